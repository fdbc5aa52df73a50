use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::predictor::SaliencePredictor;
use crate::pyramid::PyramidSpec;
use crate::supervision::{
    build_salience_targets, discrete_fg_targets, focal_loss_on_tape, FocalParams, SalienceTargets,
    DEFAULT_SCALE_INTERVALS,
};
use crate::tensor::{ParamStore, Tape, Tensor, Var};

use super::scene::SyntheticScene;

const INIT_STREAM: u64 = 3;
const ORDER_STREAM: u64 = 4;
const LABEL_STREAM: u64 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Supervision {
    /// Continuous per-box salience confidence.
    Salience,
    /// Binary foreground by box size interval per level.
    Discrete,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub focal: FocalParams,
    pub supervision: Supervision,
    /// Permute every scene's targets across positions (null-hypothesis run).
    pub shuffle_labels: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            learning_rate: 1.0,
            momentum: 0.9,
            batch_size: 8,
            focal: FocalParams::default(),
            supervision: Supervision::Salience,
            shuffle_labels: false,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("bad learning rate {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        self.focal.validate()
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParamStore,
    /// Corpus loss `lambda * L_f` before the first update.
    pub initial_loss: f64,
    /// Corpus loss after each epoch.
    pub epoch_losses: Vec<f64>,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> f64 {
        self.epoch_losses.last().copied().unwrap_or(self.initial_loss)
    }
}

/// Targets for one scene under the chosen supervision.
pub fn scene_targets(
    scene: &SyntheticScene,
    strides: &[usize],
    supervision: Supervision,
) -> Result<SalienceTargets> {
    let shapes = scene.pyramid.shapes();
    let boxes = scene.bboxes();
    match supervision {
        Supervision::Salience => build_salience_targets(&shapes, strides, &boxes),
        Supervision::Discrete => {
            discrete_fg_targets(&shapes, strides, &boxes, &DEFAULT_SCALE_INTERVALS[..strides.len()])
        }
    }
}

/// Per-scene targets used for training. With `shuffle_labels` the target
/// values of the whole corpus are pooled and permuted, so labels carry no
/// information about either position or scene.
pub fn training_targets(corpus: &[SyntheticScene], cfg: &TrainConfig) -> Result<Vec<SalienceTargets>> {
    let mut targets = corpus
        .iter()
        .map(|scene| scene_targets(scene, &scene.pyramid.strides, cfg.supervision))
        .collect::<Result<Vec<_>>>()?;
    if cfg.shuffle_labels {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(LABEL_STREAM);
        let mut pool: Vec<f64> = targets.iter().flat_map(|t| t.flat()).collect();
        pool.shuffle(&mut rng);
        let mut values = pool.into_iter();
        for map in targets.iter_mut().flat_map(|t| t.maps.iter_mut()) {
            for v in map.data_mut() {
                *v = values.next().expect("pool sized from the same maps");
            }
        }
    }
    Ok(targets)
}

/// `lambda * L_f` for one scene and, if asked, its flat parameter gradient.
fn scene_loss(
    predictor: &SaliencePredictor,
    params: &ParamStore,
    scene: &SyntheticScene,
    targets: &SalienceTargets,
    focal: &FocalParams,
    with_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    let mut tape = Tape::new();
    let bound = if with_grad {
        params.attach(&mut tape)
    } else {
        params.attach_frozen(&mut tape)
    };
    let levels: Vec<Var> = scene
        .pyramid
        .levels
        .iter()
        .map(|t| tape.constant(t.clone()))
        .collect();
    let maps = predictor.forward(&mut tape, &bound, &levels)?;
    let loss = focal_loss_on_tape(&mut tape, &maps, targets, focal)?;
    let loss = tape.scale(loss, focal.lambda);
    let value = tape.value(loss).data()[0];
    if !with_grad {
        return Ok((value, None));
    }
    let grads = tape.backward(loss)?;
    Ok((value, Some(bound.flat_grad(&tape, &grads))))
}

/// Mean `lambda * L_f` over a corpus.
pub fn corpus_loss(
    predictor: &SaliencePredictor,
    params: &ParamStore,
    corpus: &[SyntheticScene],
    targets: &[SalienceTargets],
    focal: &FocalParams,
) -> Result<f64> {
    let mut total = 0.0;
    for (scene, t) in corpus.iter().zip(targets) {
        total += scene_loss(predictor, params, scene, t, focal, false)?.0;
    }
    Ok(total / corpus.len() as f64)
}

pub fn predictor_for(spec: &PyramidSpec) -> SaliencePredictor {
    SaliencePredictor::new(spec.channels, spec.levels())
}

/// Minibatch gradient descent with heavy-ball momentum on `lambda * L_f`.
pub fn train_salience(corpus: &[SyntheticScene], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let first = corpus
        .first()
        .ok_or_else(|| Error::Contract("training corpus is empty".into()))?;
    let predictor = SaliencePredictor::new(first.pyramid.channels(), first.pyramid.levels.len());
    let targets = training_targets(corpus, cfg)?;

    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    init_rng.set_stream(INIT_STREAM);
    let mut params = predictor.init_params(&mut init_rng);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order_rng.set_stream(ORDER_STREAM);

    let initial_loss = corpus_loss(&predictor, &params, corpus, &targets, &cfg.focal)?;
    if !initial_loss.is_finite() {
        return Err(Error::Diverged {
            epoch: 0,
            loss: initial_loss,
        });
    }
    let mut flat = params.flatten();
    let mut velocity = vec![0.0; flat.len()];
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = vec![0.0; flat.len()];
            for &s in batch {
                let (loss, g) = scene_loss(&predictor, &params, &corpus[s], &targets[s], &cfg.focal, true)?;
                if !loss.is_finite() {
                    return Err(Error::Diverged { epoch, loss });
                }
                for (acc, v) in grad.iter_mut().zip(g.expect("gradient requested")) {
                    *acc += v;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for ((p, v), g) in flat.iter_mut().zip(&mut velocity).zip(&grad) {
                *v = cfg.momentum * *v + g * scale;
                *p -= cfg.learning_rate * *v;
            }
            params.assign_flat(&flat)?;
        }
        let loss = corpus_loss(&predictor, &params, corpus, &targets, &cfg.focal)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch, loss });
        }
        epoch_losses.push(loss);
    }
    Ok(TrainOutcome {
        params,
        initial_loss,
        epoch_losses,
    })
}

/// Predicted maps for every scene of a corpus.
pub fn predict_corpus(
    predictor: &SaliencePredictor,
    params: &ParamStore,
    corpus: &[SyntheticScene],
) -> Result<Vec<Vec<Tensor>>> {
    corpus.iter().map(|s| predictor.predict(params, &s.pyramid)).collect()
}
