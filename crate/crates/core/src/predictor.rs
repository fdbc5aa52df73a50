//! Top-down salience predictor.
//!
//! A shared two-layer perceptron scores every query. Levels are scored from
//! coarse to fine: the coarsest level is scored directly, and each finer
//! level's features are first multiplied by `1 + UP(alpha_l * s_{l+1})`, where
//! `s_{l+1}` is the already predicted (post-sigmoid) map one level up and `UP`
//! is bilinear upsampling. The modulation factor is broadcast over channels.

use rand::Rng;

use crate::error::{Error, Result};
use crate::pyramid::FeaturePyramid;
use crate::tensor::{BoundParams, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SaliencePredictor {
    pub channels: usize,
    pub hidden: usize,
    pub levels: usize,
}

pub const W1: &str = "pred.w1";
pub const B1: &str = "pred.b1";
pub const W2: &str = "pred.w2";
pub const B2: &str = "pred.b2";

/// Name of the modulation coefficient applied when level `level` is scored
/// from level `level + 1`.
pub fn alpha_name(level: usize) -> String {
    format!("pred.alpha.{level}")
}

impl SaliencePredictor {
    /// Hidden width defaults to the channel width.
    pub fn new(channels: usize, levels: usize) -> Self {
        Self {
            channels,
            hidden: channels,
            levels,
        }
    }

    /// Gaussian perceptron weights, zero biases, modulation coefficients at 1.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore {
        let mut store = ParamStore::new();
        let (c, h) = (self.channels, self.hidden);
        store.insert(W1, Tensor::randn([c, h], (2.0 / c as f64).sqrt(), rng));
        store.insert(B1, Tensor::zeros([h]));
        store.insert(W2, Tensor::randn([h, 1], (1.0 / h as f64).sqrt(), rng));
        store.insert(B2, Tensor::zeros([1]));
        for l in 0..self.levels.saturating_sub(1) {
            store.insert(alpha_name(l), Tensor::scalar(1.0));
        }
        store
    }

    /// Records the forward pass. `levels` are `[C, H_l, W_l]` vars ordered
    /// fine to coarse; returns `[H_l, W_l]` probability maps in the same order.
    pub fn forward(&self, tape: &mut Tape, params: &BoundParams, levels: &[Var]) -> Result<Vec<Var>> {
        if levels.len() != self.levels {
            return Err(Error::Config(format!(
                "predictor built for {} levels, got {}",
                self.levels,
                levels.len()
            )));
        }
        let (w1, b1) = (params.var(W1)?, params.var(B1)?);
        let (w2, b2) = (params.var(W2)?, params.var(B2)?);
        let mut maps: Vec<Option<Var>> = vec![None; levels.len()];
        for l in (0..levels.len()).rev() {
            let (c, h, w) = match *tape.shape(levels[l]) {
                [c, h, w] => (c, h, w),
                _ => {
                    return Err(Error::Shape {
                        op: "predict_salience",
                        lhs: tape.shape(levels[l]).to_vec(),
                        rhs: vec![self.channels, 0, 0],
                    })
                }
            };
            if c != self.channels {
                return Err(Error::Config(format!(
                    "predictor expects {} channels, level {l} has {c}",
                    self.channels
                )));
            }
            let flat = tape.reshape(levels[l], [c, h * w])?;
            let mut rows = tape.transpose(flat)?;
            if let Some(coarser) = maps.get(l + 1).copied().flatten() {
                let alpha = params.var(&alpha_name(l))?;
                let scaled = tape.mul_scalar_var(coarser, alpha)?;
                let (ch, cw) = (tape.shape(coarser)[0], tape.shape(coarser)[1]);
                let scaled = tape.reshape(scaled, [1, ch, cw])?;
                let up = tape.bilinear_resize(scaled, h, w)?;
                let up = tape.reshape(up, [h * w])?;
                let factor = tape.add_scalar(up, 1.0);
                rows = tape.mul_rows(rows, factor)?;
            }
            let hidden = tape.matmul(rows, w1)?;
            let hidden = tape.add_row_vector(hidden, b1)?;
            let hidden = tape.relu(hidden);
            let logit = tape.matmul(hidden, w2)?;
            let logit = tape.add_row_vector(logit, b2)?;
            let logit = tape.reshape(logit, [h, w])?;
            maps[l] = Some(tape.sigmoid(logit));
        }
        Ok(maps.into_iter().map(|m| m.expect("every level scored")).collect())
    }

    /// Value-only prediction.
    pub fn predict(&self, params: &ParamStore, pyramid: &FeaturePyramid) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let bound = params.attach_frozen(&mut tape);
        let levels: Vec<Var> = pyramid
            .levels
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect();
        let maps = self.forward(&mut tape, &bound, &levels)?;
        Ok(maps.into_iter().map(|v| tape.value(v).clone()).collect())
    }
}
