use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filtering::{
    select_queries, selective_encoder_layer, sine_position_encoding, EncoderConfig, FilterPlan,
    FilterRatios,
};
use crate::geometry::{score_order, GridPos};
use crate::predictor::SaliencePredictor;
use crate::pyramid::{FeaturePyramid, PyramidSpec, QueryLayout};
use crate::refinement::{
    apply_background_embedding, cross_level_fuse, remove_redundancy, BackgroundEmbedding,
    EmbeddingVariant, FusionConfig, RedundancyMode,
};
use crate::tensor::{BoundParams, ParamStore, Tape, Tensor, Var};

use super::scene::SyntheticScene;

/// Which refinements the encoder forward and two-stage initialization use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefinementFlags {
    pub embedding: Option<EmbeddingVariant>,
    pub fusion: bool,
    pub redundancy: bool,
}

impl RefinementFlags {
    pub fn none() -> Self {
        Self {
            embedding: None,
            fusion: false,
            redundancy: false,
        }
    }
}

impl Default for RefinementFlags {
    fn default() -> Self {
        Self {
            embedding: Some(EmbeddingVariant::Relative),
            fusion: true,
            redundancy: true,
        }
    }
}

/// Structural configuration of the full encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderModel {
    pub pyramid: PyramidSpec,
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
}

pub fn layer_prefix(t: usize) -> String {
    format!("enc.{t}.")
}

pub fn fusion_prefix(level: usize) -> String {
    format!("fuse.{level}.")
}

impl EncoderModel {
    pub fn validate(&self) -> Result<()> {
        self.pyramid.validate()?;
        self.encoder.validate()?;
        self.fusion.validate()?;
        if self.encoder.channels != self.pyramid.channels || self.fusion.channels != self.pyramid.channels {
            return Err(Error::Config(format!(
                "pyramid has {} channels, encoder {} and fusion {}",
                self.pyramid.channels, self.encoder.channels, self.fusion.channels
            )));
        }
        Ok(())
    }

    pub fn predictor(&self) -> SaliencePredictor {
        SaliencePredictor::new(self.pyramid.channels, self.pyramid.levels())
    }

    /// Tables sized for the largest level.
    pub fn embedding(&self, variant: EmbeddingVariant) -> Result<BackgroundEmbedding> {
        let n = self
            .pyramid
            .shapes()
            .iter()
            .map(|&(h, w)| h.max(w))
            .max()
            .unwrap_or(1);
        BackgroundEmbedding::for_channels(variant, self.pyramid.channels, n)
    }

    /// Random parameters for the predictor, every encoder layer, the
    /// background tables `flags` asks for and, when enabled, the fusion
    /// modules (one per adjacent level pair).
    pub fn init_params<R: Rng + ?Sized>(&self, flags: &RefinementFlags, rng: &mut R) -> Result<ParamStore> {
        self.validate()?;
        let mut store = self.predictor().init_params(rng);
        for t in 0..self.encoder.layers {
            self.encoder.init_layer(&mut store, &layer_prefix(t), rng);
        }
        if let Some(variant) = flags.embedding {
            self.embedding(variant)?.init_params(&mut store, rng);
        }
        if flags.fusion {
            for l in 0..self.pyramid.levels().saturating_sub(1) {
                self.fusion.init_fusion(&mut store, &fusion_prefix(l), rng);
            }
        }
        Ok(store)
    }
}

#[derive(Clone, Debug)]
pub struct EncodedScene {
    /// `[N, C]` queries, level-major.
    pub queries: Tensor,
    pub plan: FilterPlan,
    /// Predicted salience per level, `[H_l, W_l]`.
    pub salience: Vec<Tensor>,
    /// Multiply-accumulates recorded while encoding.
    pub macs: u64,
}

/// `[C, H, W]` levels to `[sum_l H_l W_l, C]` rows.
fn flatten_levels(tape: &mut Tape, levels: &[Var]) -> Result<Var> {
    let mut rows = Vec::with_capacity(levels.len());
    for &v in levels {
        let (c, hw) = match *tape.shape(v) {
            [c, h, w] => (c, h * w),
            _ => unreachable!("pyramid levels are 3-D"),
        };
        let flat = tape.reshape(v, [c, hw])?;
        rows.push(tape.transpose(flat)?);
    }
    tape.concat(&rows)
}

/// Top-down fusion of the token pyramid: the coarsest level is kept, each
/// finer level is fused with the already fused level above it.
fn fuse_pyramid(tape: &mut Tape, levels: &[Var], params: &BoundParams, cfg: &FusionConfig) -> Result<Vec<Var>> {
    let mut fused = levels.to_vec();
    for l in (0..levels.len().saturating_sub(1)).rev() {
        fused[l] = cross_level_fuse(tape, levels[l], fused[l + 1], params, &fusion_prefix(l), cfg)?;
    }
    Ok(fused)
}

/// Per-level sinusoidal position rows in query order.
pub fn pyramid_positions(shapes: &[(usize, usize)], channels: usize) -> Result<Tensor> {
    let mut data = Vec::new();
    for &(h, w) in shapes {
        data.extend(sine_position_encoding(h, w, channels).into_data());
    }
    let n = data.len() / channels.max(1);
    Tensor::new([n, channels], data)
}

/// Predict salience, filter, run the selective layers and add the background
/// embedding to rows the last layer did not refine.
pub fn encode_scene(
    scene: &SyntheticScene,
    model: &EncoderModel,
    params: &ParamStore,
    ratios: &FilterRatios,
    flags: &RefinementFlags,
) -> Result<EncodedScene> {
    encode_pyramid(&scene.pyramid, model, params, ratios, flags)
}

pub fn encode_pyramid(
    pyramid: &FeaturePyramid,
    model: &EncoderModel,
    params: &ParamStore,
    ratios: &FilterRatios,
    flags: &RefinementFlags,
) -> Result<EncodedScene> {
    model.validate()?;
    if ratios.layers.len() != model.encoder.layers {
        return Err(Error::Config(format!(
            "{} layer ratios for {} encoder layers",
            ratios.layers.len(),
            model.encoder.layers
        )));
    }
    let salience = model.predictor().predict(params, pyramid)?;
    let plan = select_queries(&salience, ratios)?;

    let mut tape = Tape::new();
    let bound = params.attach_frozen(&mut tape);
    let levels: Vec<Var> = pyramid.levels.iter().map(|t| tape.constant(t.clone())).collect();
    let tokens = if flags.fusion {
        fuse_pyramid(&mut tape, &levels, &bound, &model.fusion)?
    } else {
        levels
    };
    let shapes = pyramid.shapes();
    let mut queries = flatten_levels(&mut tape, &tokens)?;
    let pos = tape.constant(pyramid_positions(&shapes, model.encoder.channels)?);
    for t in 0..model.encoder.layers {
        let selected = plan.global_indices(t);
        queries = selective_encoder_layer(
            &mut tape,
            queries,
            pos,
            &selected,
            &bound,
            &layer_prefix(t),
            &model.encoder,
        )?;
    }
    if let Some(variant) = flags.embedding {
        let emb = model.embedding(variant)?;
        let rows = emb.rows_on_tape(&mut tape, &bound, &shapes)?;
        queries = apply_background_embedding(&mut tape, queries, &plan, rows)?;
    }
    Ok(EncodedScene {
        queries: tape.value(queries).clone(),
        plan,
        salience,
        macs: tape.macs(),
    })
}

/// Top-`k` positions by salience across all levels, then optional
/// level-wise and image-wise redundancy removal. Output is score-descending.
pub fn two_stage_initialize(
    salience: &[Tensor],
    strides: &[usize],
    k: usize,
    nms_threshold: f64,
    redundancy: bool,
) -> Result<Vec<(GridPos, f64)>> {
    if k == 0 {
        return Err(Error::Contract("two-stage initialization needs k >= 1".into()));
    }
    if salience.len() != strides.len() {
        return Err(Error::Config(format!(
            "{} salience maps for {} strides",
            salience.len(),
            strides.len()
        )));
    }
    let shapes: Vec<(usize, usize)> = salience
        .iter()
        .map(|m| match *m.shape() {
            [h, w] => Ok((h, w)),
            _ => Err(Error::Shape {
                op: "two_stage_initialize",
                lhs: m.shape().to_vec(),
                rhs: vec![0, 0],
            }),
        })
        .collect::<Result<_>>()?;
    let layout = QueryLayout::new(&shapes);
    let scores: Vec<f64> = salience.iter().flat_map(|m| m.data().iter().copied()).collect();
    let top: Vec<(GridPos, f64)> = score_order(&scores)
        .into_iter()
        .take(k)
        .map(|g| (layout.pos(g), scores[g]))
        .collect();
    if !redundancy {
        return Ok(top);
    }
    remove_redundancy(&top, strides, nms_threshold, RedundancyMode::Both)
}
