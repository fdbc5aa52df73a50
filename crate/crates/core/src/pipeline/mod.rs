//! Synthetic scenes, predictor training, the filtered encoder forward and
//! evaluation.

mod encode;
mod eval;
mod scene;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filtering::{EncoderConfig, FilterRatios};
use crate::pyramid::PyramidSpec;
use crate::refinement::{EmbeddingVariant, FusionConfig};
use crate::tensor::ParamStore;

pub use encode::{
    encode_pyramid, encode_scene, fusion_prefix, layer_prefix, pyramid_positions, two_stage_initialize,
    EncodedScene, EncoderModel, RefinementFlags,
};
pub use eval::{evaluate_selection_bias, roc_auc, salience_auc, BiasReport, ScaleCoverage};
pub use scene::{
    generate_corpus, generate_scene, read_corpus_jsonl, write_corpus_jsonl, BoxRecord, ScaleClass, SceneBox,
    SceneConfig, SceneRecord, SyntheticScene,
};
pub use train::{
    corpus_loss, predict_corpus, predictor_for, scene_targets, train_salience, training_targets, Supervision,
    TrainConfig, TrainOutcome,
};

const MODEL_STREAM: u64 = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingChoice {
    Relative,
    Absolute,
    None,
}

impl EmbeddingChoice {
    pub fn variant(self) -> Option<EmbeddingVariant> {
        match self {
            EmbeddingChoice::Relative => Some(EmbeddingVariant::Relative),
            EmbeddingChoice::Absolute => Some(EmbeddingVariant::Absolute),
            EmbeddingChoice::None => None,
        }
    }
}

/// Everything a run needs. `seed` is the first scene seed of the corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub corpus_size: usize,
    pub pyramid: PyramidSpec,
    pub scene: SceneConfig,
    pub train: TrainConfig,
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
    pub ratios: FilterRatios,
    pub embedding: EmbeddingChoice,
    pub fusion_enabled: bool,
    pub redundancy: bool,
    pub nms_threshold: f64,
    /// Queries kept for two-stage initialization before redundancy removal.
    pub two_stage_k: usize,
    /// Sampling points per head in the deformable-attention cost model.
    pub sampling_points: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            corpus_size: 64,
            pyramid: PyramidSpec::default(),
            scene: SceneConfig::default(),
            train: TrainConfig::default(),
            encoder: EncoderConfig::default(),
            fusion: FusionConfig::default(),
            ratios: FilterRatios::default(),
            embedding: EmbeddingChoice::Relative,
            fusion_enabled: false,
            redundancy: true,
            nms_threshold: 0.3,
            two_stage_k: 300,
            sampling_points: 4,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.pyramid.validate()?;
        self.scene.validate()?;
        self.train.validate()?;
        self.ratios.validate()?;
        self.model().validate()?;
        if self.ratios.levels.len() != self.pyramid.levels() {
            return Err(Error::Config(format!(
                "{} level ratios for {} pyramid levels",
                self.ratios.levels.len(),
                self.pyramid.levels()
            )));
        }
        if self.ratios.layers.len() != self.encoder.layers {
            return Err(Error::Config(format!(
                "{} layer ratios for {} encoder layers",
                self.ratios.layers.len(),
                self.encoder.layers
            )));
        }
        if !(self.nms_threshold >= 0.0) {
            return Err(Error::Config(format!("bad NMS threshold {}", self.nms_threshold)));
        }
        if self.two_stage_k == 0 || self.corpus_size == 0 || self.sampling_points == 0 {
            return Err(Error::Config(
                "two_stage_k, corpus_size and sampling_points must be positive".into(),
            ));
        }
        if self.train.supervision == Supervision::Discrete && self.pyramid.levels() > 4 {
            return Err(Error::Config("discrete supervision defines four scale intervals".into()));
        }
        Ok(())
    }

    pub fn model(&self) -> EncoderModel {
        EncoderModel {
            pyramid: self.pyramid.clone(),
            encoder: self.encoder,
            fusion: self.fusion,
        }
    }

    pub fn flags(&self) -> RefinementFlags {
        RefinementFlags {
            embedding: self.embedding.variant(),
            fusion: self.fusion_enabled,
            redundancy: self.redundancy,
        }
    }

    /// Random parameters for the whole model, seeded from `seed`.
    pub fn init_model_params(&self) -> Result<ParamStore> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(MODEL_STREAM);
        self.model().init_params(&self.flags(), &mut rng)
    }

    pub fn corpus(&self) -> Result<Vec<SyntheticScene>> {
        generate_corpus(self.seed, self.corpus_size, &self.pyramid, &self.scene)
    }
}
