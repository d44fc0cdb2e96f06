//! Trajectory data: benchmark scene files, fixed-length windows,
//! normalization, rotation augmentation and a synthetic persona generator.

mod scene;
mod synth;

pub use scene::{load_labels, load_scene, parse_scene, window_scene, write_labels, write_scene, RawRecord, WindowSummary};
pub use synth::{default_personas, synth_generate, SynthSpec, SyntheticPersona};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Observed history length (3.2 s at 0.4 s per step).
pub const OBS_LEN: usize = 8;
/// Predicted horizon (4.8 s).
pub const PRED_LEN: usize = 12;
pub const WINDOW_LEN: usize = OBS_LEN + PRED_LEN;

pub type Point = [f64; 2];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: expected fields `{expected}`, found {found}")]
    Arity { line: usize, expected: &'static str, found: usize },
    #[error("line {line}: cannot parse {field} from {text:?}")]
    Parse { line: usize, field: &'static str, text: String },
    #[error("pedestrian {ped_id} has frame {frame} twice")]
    DuplicateFrame { ped_id: i64, frame: i64 },
    #[error("synthetic data: {0}")]
    Synth(String),
}

/// One pedestrian window: 8 observed and 12 future positions in meters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub obs: [Point; OBS_LEN],
    pub fut: [Point; PRED_LEN],
    pub ped_id: i64,
    pub scene_id: String,
    pub first_frame: i64,
    pub pattern_label: Option<u32>,
    /// Translation removed by [`normalize`]; adding it back recovers
    /// scene coordinates.
    pub origin: Point,
}

impl TrajectorySample {
    pub fn positions(&self) -> impl Iterator<Item = &Point> {
        self.obs.iter().chain(self.fut.iter())
    }

    fn map_points(&self, f: impl Fn(Point) -> Point) -> TrajectorySample {
        let mut out = self.clone();
        out.obs.iter_mut().for_each(|p| *p = f(*p));
        out.fut.iter_mut().for_each(|p| *p = f(*p));
        out
    }

    /// Ordering key used to make dataset order independent of load order.
    pub fn sort_key(&self) -> (&str, i64, i64) {
        (&self.scene_id, self.ped_id, self.first_frame)
    }
}

/// Translates the sample so the last observed position is the origin.
pub fn normalize(sample: &TrajectorySample) -> TrajectorySample {
    let [ox, oy] = sample.obs[OBS_LEN - 1];
    let mut out = sample.map_points(|[x, y]| [x - ox, y - oy]);
    out.obs[OBS_LEN - 1] = [0.0, 0.0];
    out.origin = [sample.origin[0] + ox, sample.origin[1] + oy];
    out
}

/// Inverse of [`normalize`].
pub fn denormalize(sample: &TrajectorySample) -> TrajectorySample {
    let [ox, oy] = sample.origin;
    let mut out = sample.map_points(|[x, y]| [x + ox, y + oy]);
    out.origin = [0.0, 0.0];
    out
}

pub fn rotate(sample: &TrajectorySample, radians: f64) -> TrajectorySample {
    let (s, c) = radians.sin_cos();
    sample.map_points(|[x, y]| [c * x - s * y, s * x + c * y])
}

/// Copies of a normalized sample rotated about the origin by every
/// multiple of `step_degrees` in `[0, 360)`.
pub fn rotate_augment(sample: &TrajectorySample, step_degrees: f64) -> Vec<TrajectorySample> {
    let copies = (360.0 / step_degrees).round() as usize;
    (0..copies).map(|k| if k == 0 { sample.clone() } else { rotate(sample, (k as f64 * step_degrees).to_radians()) }).collect()
}

/// Sorts by `(scene, ped, first frame)`.
pub fn sort_samples(samples: &mut [TrajectorySample]) {
    samples.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
}
