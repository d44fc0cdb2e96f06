use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::{DataError, Point, TrajectorySample, OBS_LEN, WINDOW_LEN};

/// One line of a benchmark scene file.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RawRecord {
    pub frame: i64,
    pub ped_id: i64,
    pub x: f64,
    pub y: f64,
}

fn parse_int(text: &str, line: usize, field: &'static str) -> Result<i64, DataError> {
    // Benchmark files often write integer columns as "780.0".
    if let Ok(v) = text.parse::<i64>() {
        return Ok(v);
    }
    match text.parse::<f64>() {
        Ok(v) if v.fract() == 0.0 && v.is_finite() => Ok(v as i64),
        _ => Err(DataError::Parse { line, field, text: text.to_string() }),
    }
}

fn parse_float(text: &str, line: usize, field: &'static str) -> Result<f64, DataError> {
    match text.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(DataError::Parse { line, field, text: text.to_string() }),
    }
}

/// Parses whitespace-separated `frame ped_id x y` lines. Output is sorted
/// by pedestrian, then frame.
pub fn parse_scene(text: &str) -> Result<Vec<RawRecord>, DataError> {
    let mut records = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 4 {
            return Err(DataError::Arity { line, expected: "frame ped_id x y", found: fields.len() });
        }
        records.push(RawRecord {
            frame: parse_int(fields[0], line, "frame")?,
            ped_id: parse_int(fields[1], line, "ped_id")?,
            x: parse_float(fields[2], line, "x")?,
            y: parse_float(fields[3], line, "y")?,
        });
    }
    records.sort_by_key(|r| (r.ped_id, r.frame));
    if let Some(w) = records.windows(2).find(|w| w[0].ped_id == w[1].ped_id && w[0].frame == w[1].frame) {
        return Err(DataError::DuplicateFrame { ped_id: w[0].ped_id, frame: w[0].frame });
    }
    Ok(records)
}

pub fn load_scene(path: impl AsRef<Path>) -> Result<Vec<RawRecord>, DataError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    parse_scene(&text)
}

/// Result of [`window_scene`].
#[derive(Clone, Debug, Default)]
pub struct WindowSummary {
    pub samples: Vec<TrajectorySample>,
    /// Frame spacing treated as one timestep.
    pub frame_step: i64,
    /// Consecutive-frame segments, one entry `(ped_id, length)` each.
    pub segments: Vec<(i64, usize)>,
    /// Segments shorter than one window.
    pub skipped_segments: usize,
}

/// The timestep in frames: the smallest positive frame difference within
/// any pedestrian's track.
fn frame_step(records: &[RawRecord]) -> i64 {
    records.windows(2).filter(|w| w[0].ped_id == w[1].ped_id).map(|w| w[1].frame - w[0].frame).filter(|&d| d > 0).min().unwrap_or(1)
}

/// Cuts every consecutive-frame segment into stride-1 windows of 20 steps.
/// Frame gaps split a track; segments of fewer than 20 steps are skipped.
pub fn window_scene(records: &[RawRecord], scene_id: &str) -> WindowSummary {
    let mut sorted = records.to_vec();
    sorted.sort_by_key(|r| (r.ped_id, r.frame));
    let step = frame_step(&sorted);

    let mut by_ped: BTreeMap<i64, Vec<&RawRecord>> = BTreeMap::new();
    for r in &sorted {
        by_ped.entry(r.ped_id).or_default().push(r);
    }

    let mut summary = WindowSummary { frame_step: step, ..Default::default() };
    for (ped_id, track) in by_ped {
        let mut start = 0;
        for end in 1..=track.len() {
            if end == track.len() || track[end].frame - track[end - 1].frame != step {
                let segment = &track[start..end];
                summary.segments.push((ped_id, segment.len()));
                if segment.len() < WINDOW_LEN {
                    summary.skipped_segments += 1;
                }
                for w in segment.windows(WINDOW_LEN) {
                    let pts: Vec<Point> = w.iter().map(|r| [r.x, r.y]).collect();
                    summary.samples.push(TrajectorySample {
                        obs: pts[..OBS_LEN].try_into().expect("obs length"),
                        fut: pts[OBS_LEN..].try_into().expect("fut length"),
                        ped_id,
                        scene_id: scene_id.to_string(),
                        first_frame: w[0].frame,
                        pattern_label: None,
                        origin: [0.0, 0.0],
                    });
                }
                start = end;
            }
        }
    }
    summary
}

/// Writes samples as a scene file, one 20-step track per sample with
/// frames `0, 10, ..., 190`. Samples must have distinct `ped_id`s to be
/// read back as separate tracks.
pub fn write_scene(path: impl AsRef<Path>, samples: &[TrajectorySample]) -> Result<(), DataError> {
    let mut out = String::new();
    for s in samples {
        for (t, p) in s.positions().enumerate() {
            let _ = writeln!(out, "{} {} {} {}", t * 10, s.ped_id, p[0] + s.origin[0], p[1] + s.origin[1]);
        }
    }
    write_text(path.as_ref(), &out)
}

/// Sidecar label file: `ped_id pattern_id` per line.
pub fn write_labels(path: impl AsRef<Path>, samples: &[TrajectorySample]) -> Result<(), DataError> {
    let mut out = String::new();
    for s in samples {
        if let Some(label) = s.pattern_label {
            let _ = writeln!(out, "{} {}", s.ped_id, label);
        }
    }
    write_text(path.as_ref(), &out)
}

/// Reads a label sidecar written by [`write_labels`].
pub fn load_labels(path: impl AsRef<Path>) -> Result<BTreeMap<i64, u32>, DataError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    let mut labels = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            [] => continue,
            [ped, label] => {
                let parse_err = |field, text: &str| DataError::Parse { line: i + 1, field, text: text.to_string() };
                let ped = ped.parse::<i64>().map_err(|_| parse_err("ped_id", ped))?;
                let label = label.parse::<u32>().map_err(|_| parse_err("pattern_id", label))?;
                labels.insert(ped, label);
            }
            other => return Err(DataError::Arity { line: i + 1, expected: "ped_id pattern_id", found: other.len() }),
        }
    }
    Ok(labels)
}

fn write_text(path: &Path, text: &str) -> Result<(), DataError> {
    std::fs::write(path, text).map_err(|source| DataError::Io { path: path.display().to_string(), source })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn track(ped: i64, frames: impl IntoIterator<Item = i64>) -> Vec<RawRecord> {
        frames.into_iter().map(|f| RawRecord { frame: f, ped_id: ped, x: f as f64 * 0.1, y: 0.0 }).collect()
    }

    #[test]
    fn parses_one_line() {
        let recs = parse_scene("10 3 1.5 -2.0\n").unwrap();
        assert_eq!(recs, vec![RawRecord { frame: 10, ped_id: 3, x: 1.5, y: -2.0 }]);
    }

    #[test]
    fn float_formatted_integers_and_tabs() {
        let recs = parse_scene("780.0\t1.0\t8.46\t3.59\n").unwrap();
        assert_eq!(recs[0].frame, 780);
        assert_eq!(recs[0].ped_id, 1);
    }

    #[test]
    fn empty_input_is_empty() {
        assert!(parse_scene("").unwrap().is_empty());
        assert!(parse_scene("\n  \n").unwrap().is_empty());
    }

    #[test]
    fn short_line_reports_line_number() {
        let err = parse_scene("0 1 0 0\n10 3 1.5\n").unwrap_err();
        assert!(matches!(err, DataError::Arity { line: 2, found: 3, .. }), "{err}");
    }

    #[test]
    fn non_numeric_field_is_rejected() {
        let err = parse_scene("0 1 abc 0\n").unwrap_err();
        assert!(matches!(err, DataError::Parse { line: 1, field: "x", .. }), "{err}");
        assert!(parse_scene("0.5 1 0 0\n").is_err());
    }

    #[test]
    fn duplicate_frames_are_rejected() {
        assert!(matches!(parse_scene("0 1 0 0\n0 1 1 1\n"), Err(DataError::DuplicateFrame { .. })));
    }

    #[test]
    fn window_counts() {
        let mut recs = track(1, (0..25).map(|t| t * 10));
        recs.extend(track(2, (0..19).map(|t| t * 10)));
        recs.extend(track(3, (0..20).map(|t| t * 10)));
        let s = window_scene(&recs, "a");
        assert_eq!(s.frame_step, 10);
        let count = |p| s.samples.iter().filter(|w| w.ped_id == p).count();
        assert_eq!(count(1), 6);
        assert_eq!(count(2), 0);
        assert_eq!(count(3), 1);
        assert_eq!(s.skipped_segments, 1);
    }

    #[test]
    fn single_window_splits_8_and_12() {
        let s = window_scene(&track(3, (0..20).map(|t| t * 10)), "a");
        let w = &s.samples[0];
        assert_eq!(w.obs[0][0], 0.0);
        assert!((w.obs[7][0] - 7.0).abs() < 1e-12);
        assert!((w.fut[0][0] - 8.0).abs() < 1e-12);
        assert!((w.fut[11][0] - 19.0).abs() < 1e-12);
    }

    #[test]
    fn gaps_split_segments() {
        // 22 steps, a missing frame, then 21 steps: 3 + 2 windows.
        let mut frames: Vec<i64> = (0..22).collect();
        frames.extend(23..44);
        let s = window_scene(&track(5, frames), "a");
        assert_eq!(s.segments, vec![(5, 22), (5, 21)]);
        assert_eq!(s.samples.len(), 5);
    }
}
