//! Pattern-labeled synthetic pedestrians. Every sample walks a shared
//! straight prefix, then switches to its persona's constant-curvature
//! motion, so the history only partly reveals which persona it is.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DataError, Point, TrajectorySample, OBS_LEN, WINDOW_LEN};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticPersona {
    pub pattern_id: u32,
    /// Heading change per step, radians.
    pub turn_rate: f64,
    /// Meters per step.
    pub speed: f64,
    /// Std of additive position noise, meters.
    pub noise_sigma: f64,
}

/// Four personas: straight, left turn, right turn, fast straight.
pub fn default_personas() -> Vec<SyntheticPersona> {
    [(0.0, 0.45), (0.15, 0.45), (-0.15, 0.45), (0.0, 0.7)]
        .iter()
        .enumerate()
        .map(|(i, &(turn_rate, speed))| SyntheticPersona { pattern_id: i as u32, turn_rate, speed, noise_sigma: 0.03 })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    #[serde(default = "default_personas")]
    pub personas: Vec<SyntheticPersona>,
    pub n_per_persona: usize,
    /// Positions (from the start of the window) walked with the shared
    /// prefix kinematics before the persona takes over. Must be in `1..=8`.
    #[serde(default = "default_shared_prefix")]
    pub shared_prefix: usize,
    /// Speed during the shared prefix, meters per step.
    #[serde(default = "default_prefix_speed")]
    pub prefix_speed: f64,
    /// Initial heading is uniform in `[-spread, spread]` radians.
    #[serde(default)]
    pub heading_spread: f64,
}

fn default_shared_prefix() -> usize {
    6
}

fn default_prefix_speed() -> f64 {
    0.5
}

impl SynthSpec {
    pub fn new(personas: Vec<SyntheticPersona>, n_per_persona: usize) -> Self {
        SynthSpec {
            personas,
            n_per_persona,
            shared_prefix: default_shared_prefix(),
            prefix_speed: default_prefix_speed(),
            heading_spread: 0.0,
        }
    }

    fn validate(&self) -> Result<(), DataError> {
        if self.n_per_persona == 0 {
            return Err(DataError::Synth("n_per_persona must be positive".into()));
        }
        if self.personas.len() < 2 {
            return Err(DataError::Synth("need at least 2 personas".into()));
        }
        for (i, p) in self.personas.iter().enumerate() {
            if p.speed.is_nan() || p.speed <= 0.0 || p.noise_sigma.is_nan() || p.noise_sigma < 0.0 || !p.turn_rate.is_finite() {
                return Err(DataError::Synth(format!("persona {} has invalid kinematics", p.pattern_id)));
            }
            if self.personas[..i].iter().any(|q| q.turn_rate == p.turn_rate && q.speed == p.speed) {
                return Err(DataError::Synth(format!("persona {} duplicates another persona's (turn_rate, speed)", p.pattern_id)));
            }
        }
        if !(1..=OBS_LEN).contains(&self.shared_prefix) {
            return Err(DataError::Synth(format!("shared_prefix must be in 1..={OBS_LEN}")));
        }
        if self.prefix_speed.is_nan() || self.prefix_speed <= 0.0 || self.heading_spread.is_nan() || self.heading_spread < 0.0 {
            return Err(DataError::Synth("prefix_speed must be positive and heading_spread non-negative".into()));
        }
        Ok(())
    }
}

fn walk(persona: &SyntheticPersona, spec: &SynthSpec, rng: &mut ChaCha8Rng) -> [Point; WINDOW_LEN] {
    let mut heading = if spec.heading_spread > 0.0 { rng.gen_range(-spec.heading_spread..=spec.heading_spread) } else { 0.0 };
    let mut clean = [[0.0; 2]; WINDOW_LEN];
    for t in 1..WINDOW_LEN {
        let speed = if t < spec.shared_prefix {
            spec.prefix_speed
        } else {
            heading += persona.turn_rate;
            persona.speed
        };
        clean[t] = [clean[t - 1][0] + speed * heading.cos(), clean[t - 1][1] + speed * heading.sin()];
    }
    let mut noisy = clean;
    if persona.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, persona.noise_sigma).expect("finite sigma");
        for p in noisy.iter_mut() {
            p[0] += noise.sample(rng);
            p[1] += noise.sample(rng);
        }
    }
    noisy
}

/// `n_per_persona` samples for every persona, labeled with its
/// `pattern_id`. Deterministic in `seed`; `ped_id`s are 0-based and
/// interleave personas.
pub fn synth_generate(spec: &SynthSpec, seed: u64) -> Result<Vec<TrajectorySample>, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(spec.n_per_persona * spec.personas.len());
    for _ in 0..spec.n_per_persona {
        for persona in &spec.personas {
            let pts = walk(persona, spec, &mut rng);
            out.push(TrajectorySample {
                obs: pts[..OBS_LEN].try_into().expect("obs"),
                fut: pts[OBS_LEN..].try_into().expect("fut"),
                ped_id: out.len() as i64,
                scene_id: "synth".into(),
                first_frame: 0,
                pattern_label: Some(persona.pattern_id),
                origin: [0.0, 0.0],
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n: usize) -> SynthSpec {
        SynthSpec::new(default_personas(), n)
    }

    #[test]
    fn counts_and_labels_are_balanced() {
        let data = synth_generate(&spec(250), 3).unwrap();
        assert_eq!(data.len(), 1000);
        for label in 0..4 {
            assert_eq!(data.iter().filter(|s| s.pattern_label == Some(label)).count(), 250);
        }
    }

    #[test]
    fn same_seed_same_data() {
        assert_eq!(synth_generate(&spec(20), 9).unwrap(), synth_generate(&spec(20), 9).unwrap());
        assert_ne!(synth_generate(&spec(20), 9).unwrap(), synth_generate(&spec(20), 10).unwrap());
    }

    #[test]
    fn zero_turn_rate_goes_straight() {
        let mut s = spec(5);
        s.personas[0].noise_sigma = 0.0;
        let data = synth_generate(&s, 1).unwrap();
        let straight = data.iter().find(|d| d.pattern_label == Some(0)).unwrap();
        for p in straight.positions() {
            assert!(p[1].abs() < 1e-12);
        }
        let last = straight.fut[11][0] - straight.fut[10][0];
        assert!((last - 0.45).abs() < 1e-12);
    }

    #[test]
    fn noisy_straight_stays_near_axis() {
        let data = synth_generate(&spec(50), 2).unwrap();
        for s in data.iter().filter(|d| d.pattern_label == Some(0)) {
            assert!(s.positions().all(|p| p[1].abs() < 0.2));
        }
    }

    #[test]
    fn prefix_is_shared_across_personas() {
        let mut s = spec(1);
        s.personas.iter_mut().for_each(|p| p.noise_sigma = 0.0);
        let data = synth_generate(&s, 0).unwrap();
        for d in &data[1..] {
            assert_eq!(d.obs[..s.shared_prefix], data[0].obs[..s.shared_prefix]);
        }
        assert_ne!(data[1].obs[OBS_LEN - 1], data[0].obs[OBS_LEN - 1]);
    }

    #[test]
    fn rejects_invalid_specs() {
        assert!(synth_generate(&spec(0), 0).is_err());
        let mut one = spec(3);
        one.personas.truncate(1);
        assert!(synth_generate(&one, 0).is_err());
        let mut dup = spec(3);
        dup.personas[1].turn_rate = 0.0;
        assert!(synth_generate(&dup, 0).is_err());
        let mut neg = spec(3);
        neg.personas[2].noise_sigma = -1.0;
        assert!(synth_generate(&neg, 0).is_err());
    }
}
