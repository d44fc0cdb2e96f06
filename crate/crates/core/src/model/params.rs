use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array2, Tape, Var};
use crate::dataio::PRED_LEN;

use super::ModelError;

/// Network sizes. Only `k` comes from the method itself; the rest size
/// the small recurrent backbone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelHyper {
    /// Number of discrete latent values.
    pub k: usize,
    /// History embedding `f`.
    pub d_f: usize,
    /// Future embedding fed to the posterior head.
    pub d_g: usize,
    /// Latent embedding / contrastive code size.
    pub d_c: usize,
    pub history_hidden: usize,
    pub future_hidden: usize,
    pub decoder_hidden: usize,
}

impl Default for ModelHyper {
    fn default() -> Self {
        ModelHyper { k: 80, d_f: 64, d_g: 32, d_c: 32, history_hidden: 64, future_hidden: 32, decoder_hidden: 64 }
    }
}

impl ModelHyper {
    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [self.k, self.d_f, self.d_g, self.d_c, self.history_hidden, self.future_hidden, self.decoder_hidden];
        if dims.contains(&0) {
            return Err(ModelError::Hyper("all model dimensions must be positive".into()));
        }
        Ok(())
    }
}

macro_rules! param_set {
    ($($name:ident),+ $(,)?) => {
        /// Every trainable array of the predictor.
        #[derive(Clone, Debug, PartialEq)]
        pub struct ModelParams {
            pub hyper: ModelHyper,
            $(pub $name: Array2,)+
        }

        /// Tape handles for [`ModelParams`], one per array.
        #[derive(Clone, Copy, Debug)]
        pub struct ParamVars {
            $(pub $name: Var,)+
        }

        impl ModelParams {
            pub const NAMES: &'static [&'static str] = &[$(stringify!($name)),+];

            pub fn tensors(&self) -> Vec<&Array2> {
                vec![$(&self.$name),+]
            }

            pub fn tensors_mut(&mut self) -> Vec<&mut Array2> {
                vec![$(&mut self.$name),+]
            }

            /// Registers every array as a differentiable leaf.
            pub fn bind(&self, tape: &mut Tape) -> ParamVars {
                ParamVars { $($name: tape.leaf(self.$name.clone()),)+ }
            }

            /// Registers every array as a constant (inference only).
            pub fn bind_frozen(&self, tape: &mut Tape) -> ParamVars {
                ParamVars { $($name: tape.constant(self.$name.clone()),)+ }
            }
        }

        impl ParamVars {
            pub fn vars(&self) -> Vec<Var> {
                vec![$(self.$name),+]
            }

            pub fn from_vars(vars: &[Var]) -> Self {
                let mut it = vars.iter().copied();
                ParamVars { $($name: it.next().expect("one var per parameter"),)+ }
            }
        }
    };
}

param_set!(
    enc_wx,
    enc_wh,
    enc_bx,
    enc_bh,
    enc_out_w,
    enc_out_b,
    fut_wx,
    fut_wh,
    fut_bx,
    fut_bh,
    fut_out_w,
    fut_out_b,
    prior_w,
    prior_b,
    post_w,
    post_b,
    latent_embed,
    dec_init_w,
    dec_init_b,
    dec_wx,
    dec_wh,
    dec_bx,
    dec_bh,
    dec_out_w,
    dec_out_b,
    contrastive_w,
);

/// Expected `(rows, cols)` of every parameter, in [`ModelParams::NAMES`] order.
pub fn expected_shapes(h: &ModelHyper) -> Vec<(usize, usize)> {
    let (he, hg, hd) = (h.history_hidden, h.future_hidden, h.decoder_hidden);
    vec![
        (2, 3 * he),
        (he, 3 * he),
        (1, 3 * he),
        (1, 3 * he),
        (he, h.d_f),
        (1, h.d_f),
        (2, 3 * hg),
        (hg, 3 * hg),
        (1, 3 * hg),
        (1, 3 * hg),
        (hg, h.d_g),
        (1, h.d_g),
        (h.d_f, h.k),
        (1, h.k),
        (h.d_f + h.d_g, h.k),
        (1, h.k),
        (h.k, h.d_c),
        (h.d_f + h.d_c, hd),
        (1, hd),
        (2, 3 * hd),
        (hd, 3 * hd),
        (1, 3 * hd),
        (1, 3 * hd),
        (hd, 2),
        (1, 2),
        (h.d_f, h.d_c),
    ]
}

impl ModelParams {
    /// Uniform Glorot initialization for weights, zero biases. The latent
    /// table uses unit-scale entries so latents start out distinguishable.
    pub fn init(hyper: &ModelHyper, seed: u64) -> Result<Self, ModelError> {
        hyper.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = expected_shapes(hyper);
        let mut arrays = Vec::with_capacity(shapes.len());
        for (name, &(rows, cols)) in Self::NAMES.iter().zip(&shapes) {
            let is_bias = rows == 1 && name.contains("_b");
            let arr = if is_bias {
                Array2::zeros(rows, cols)
            } else {
                let limit = if *name == "latent_embed" { 1.0 } else { (6.0 / (rows + cols) as f64).sqrt() };
                let data = (0..rows * cols).map(|_| rng.gen_range(-limit..limit)).collect();
                Array2::from_vec(rows, cols, data).expect("shape")
            };
            arrays.push(arr);
        }
        Self::from_arrays(hyper.clone(), arrays)
    }

    /// Assembles from arrays in [`ModelParams::NAMES`] order, checking shapes.
    pub fn from_arrays(hyper: ModelHyper, arrays: Vec<Array2>) -> Result<Self, ModelError> {
        hyper.validate()?;
        let shapes = expected_shapes(&hyper);
        if arrays.len() != shapes.len() {
            return Err(ModelError::ParamCount { expected: shapes.len(), found: arrays.len() });
        }
        for ((name, arr), &shape) in Self::NAMES.iter().zip(&arrays).zip(&shapes) {
            if arr.shape() != shape {
                return Err(ModelError::ParamShape { name: name.to_string(), expected: shape, found: arr.shape() });
            }
            if !arr.is_finite() {
                return Err(ModelError::NonFinite(name.to_string()));
            }
        }
        let mut it = arrays.into_iter();
        let mut next = || it.next().expect("count checked");
        Ok(ModelParams {
            hyper,
            enc_wx: next(),
            enc_wh: next(),
            enc_bx: next(),
            enc_bh: next(),
            enc_out_w: next(),
            enc_out_b: next(),
            fut_wx: next(),
            fut_wh: next(),
            fut_bx: next(),
            fut_bh: next(),
            fut_out_w: next(),
            fut_out_b: next(),
            prior_w: next(),
            prior_b: next(),
            post_w: next(),
            post_b: next(),
            latent_embed: next(),
            dec_init_w: next(),
            dec_init_b: next(),
            dec_wx: next(),
            dec_wh: next(),
            dec_bx: next(),
            dec_bh: next(),
            dec_out_w: next(),
            dec_out_b: next(),
            contrastive_w: next(),
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn k(&self) -> usize {
        self.hyper.k
    }

    /// Output horizon of the decoder.
    pub fn horizon(&self) -> usize {
        PRED_LEN
    }
}
