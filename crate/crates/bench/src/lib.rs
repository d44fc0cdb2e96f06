//! Shared fixtures for the benchmarks.

use disdis_core::dataio::{default_personas, normalize, synth_generate, SynthSpec};
use disdis_core::{ModelHyper, ModelParams, TrajectorySample};

/// Default-size model and `n` normalized synthetic samples.
pub fn fixture(n: usize) -> (ModelParams, Vec<TrajectorySample>) {
    let hyper = ModelHyper::default();
    let params = ModelParams::init(&hyper, 0).expect("default hyperparameters are valid");
    let per_persona = n.div_ceil(default_personas().len());
    let samples = synth_generate(&SynthSpec::new(default_personas(), per_persona), 3).expect("synthetic spec is valid");
    (params, samples.iter().take(n).map(normalize).collect())
}
