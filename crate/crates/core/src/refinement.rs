//! Query refinement: background embeddings, cross-level token fusion and
//! redundancy removal for two-stage query initialization.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filtering::FilterPlan;
use crate::geometry::{image_unit_box, nms, unit_box, GridPos};
use crate::tensor::{BoundParams, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingVariant {
    /// Outer product of row and column tables, interpolated to each level.
    Relative,
    /// Row `i` of the row table concatenated with row `j` of the column table.
    Absolute,
}

/// Row and column tables `r, c` of shape `[n, m]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackgroundEmbedding {
    pub variant: EmbeddingVariant,
    pub n: usize,
    pub m: usize,
}

pub const BG_ROW: &str = "bg.row";
pub const BG_COL: &str = "bg.col";

impl BackgroundEmbedding {
    /// Sizes the tables for query width `channels`: `m = C` for the relative
    /// variant, `2m = C` for the absolute one.
    pub fn for_channels(variant: EmbeddingVariant, channels: usize, n: usize) -> Result<Self> {
        let m = match variant {
            EmbeddingVariant::Relative => channels,
            EmbeddingVariant::Absolute if channels.is_multiple_of(2) => channels / 2,
            EmbeddingVariant::Absolute => {
                return Err(Error::Config(format!(
                    "absolute background embedding needs even width, got {channels}"
                )))
            }
        };
        Ok(Self { variant, n, m })
    }

    pub fn channels(&self) -> usize {
        match self.variant {
            EmbeddingVariant::Relative => self.m,
            EmbeddingVariant::Absolute => 2 * self.m,
        }
    }

    pub fn init_params<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        store.insert(BG_ROW, Tensor::randn([self.n, self.m], 0.5, rng));
        store.insert(BG_COL, Tensor::randn([self.n, self.m], 0.5, rng));
    }

    /// `[C, H, W]` map for one level.
    pub fn relative_on_tape(&self, tape: &mut Tape, row: Var, col: Var, h: usize, w: usize) -> Result<Var> {
        if self.variant != EmbeddingVariant::Relative {
            return Err(Error::Contract("relative embedding requested from absolute tables".into()));
        }
        let outer = tape.channel_outer(row, col)?;
        tape.bilinear_resize(outer, h, w)
    }

    /// `[H*W, C]` rows for one level.
    pub fn absolute_on_tape(&self, tape: &mut Tape, row: Var, col: Var, h: usize, w: usize) -> Result<Var> {
        if self.variant != EmbeddingVariant::Absolute {
            return Err(Error::Contract("absolute embedding requested from relative tables".into()));
        }
        if h > self.n || w > self.n {
            return Err(Error::Contract(format!(
                "absolute embedding holds {} entries, level is {h}x{w}",
                self.n
            )));
        }
        let is: Vec<usize> = (0..h * w).map(|p| p / w).collect();
        let js: Vec<usize> = (0..h * w).map(|p| p % w).collect();
        let r = tape.gather_rows(row, &is)?;
        let c = tape.gather_rows(col, &js)?;
        tape.concat_cols(r, c)
    }

    /// Embedding rows `[sum_l H_l W_l, C]` for every level in query order.
    pub fn rows_on_tape(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        shapes: &[(usize, usize)],
    ) -> Result<Var> {
        let (row, col) = (params.var(BG_ROW)?, params.var(BG_COL)?);
        let mut parts = Vec::with_capacity(shapes.len());
        for &(h, w) in shapes {
            let level = match self.variant {
                EmbeddingVariant::Relative => {
                    let map = self.relative_on_tape(tape, row, col, h, w)?;
                    let flat = tape.reshape(map, [self.m, h * w])?;
                    tape.transpose(flat)?
                }
                EmbeddingVariant::Absolute => self.absolute_on_tape(tape, row, col, h, w)?,
            };
            parts.push(level);
        }
        tape.concat(&parts)
    }
}

/// Relative background embedding of one level as a `[m, H, W]` value.
pub fn relative_background_embedding(
    emb: &BackgroundEmbedding,
    row: &Tensor,
    col: &Tensor,
    h: usize,
    w: usize,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (r, c) = (tape.constant(row.clone()), tape.constant(col.clone()));
    let out = emb.relative_on_tape(&mut tape, r, c, h, w)?;
    Ok(tape.value(out).clone())
}

/// Absolute background embedding at one grid position: `concat(r[i], c[j])`.
pub fn absolute_background_embedding(
    emb: &BackgroundEmbedding,
    row: &Tensor,
    col: &Tensor,
    pos: GridPos,
) -> Result<Vec<f64>> {
    if emb.variant != EmbeddingVariant::Absolute {
        return Err(Error::Contract("absolute embedding requested from relative tables".into()));
    }
    if pos.i >= emb.n || pos.j >= emb.n {
        return Err(Error::Contract(format!(
            "grid position ({}, {}) outside {}-entry embedding",
            pos.i, pos.j, emb.n
        )));
    }
    let mut out = row.row(pos.i).to_vec();
    out.extend_from_slice(col.row(pos.j));
    Ok(out)
}

/// Adds `embedding` rows to every query outside the final layer's selection.
pub fn apply_background_embedding(
    tape: &mut Tape,
    queries: Var,
    plan: &FilterPlan,
    embedding: Var,
) -> Result<Var> {
    if tape.shape(queries) != tape.shape(embedding) {
        return Err(Error::Shape {
            op: "apply_background_embedding",
            lhs: tape.shape(queries).to_vec(),
            rhs: tape.shape(embedding).to_vec(),
        });
    }
    let rest = plan.final_complement();
    if rest.is_empty() {
        return Ok(queries);
    }
    let q = tape.gather_rows(queries, &rest)?;
    let e = tape.gather_rows(embedding, &rest)?;
    let shifted = tape.add(q, e)?;
    tape.scatter_rows(queries, &rest, shifted)
}

/// Fusion module hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub channels: usize,
    pub groups: usize,
    /// Squeeze-excite reduction: the gate's hidden width is `channels / reduction`.
    pub reduction: usize,
    pub blocks: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            groups: 8,
            reduction: 4,
            blocks: 1,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || !self.channels.is_multiple_of(self.groups) {
            return Err(Error::Config(format!(
                "{} channels not divisible by {} groups",
                self.channels, self.groups
            )));
        }
        if self.reduction == 0 || self.channels / self.reduction == 0 {
            return Err(Error::Config(format!("bad reduction {}", self.reduction)));
        }
        Ok(())
    }

    fn squeeze(&self) -> usize {
        self.channels / self.reduction
    }

    /// Random parameters for one gated block under `prefix`.
    pub fn init_block<R: Rng + ?Sized>(&self, store: &mut ParamStore, prefix: &str, rng: &mut R) {
        let (c, cg, s) = (self.channels, self.channels / self.groups, self.squeeze());
        let k3 = (1.0 / (9 * cg) as f64).sqrt();
        let k1 = (1.0 / cg as f64).sqrt();
        store.insert(format!("{prefix}k3"), Tensor::randn([c, cg, 3, 3], k3, rng));
        store.insert(format!("{prefix}k3.scale"), Tensor::uniform([c], 0.5, 1.5, rng));
        store.insert(format!("{prefix}k3.shift"), Tensor::randn([c], 0.1, rng));
        store.insert(format!("{prefix}k1"), Tensor::randn([c, cg, 1, 1], k1, rng));
        store.insert(format!("{prefix}k1.scale"), Tensor::uniform([c], 0.5, 1.5, rng));
        store.insert(format!("{prefix}k1.shift"), Tensor::randn([c], 0.1, rng));
        store.insert(format!("{prefix}alpha"), Tensor::scalar(rng.random_range(0.3..0.7)));
        store.insert(format!("{prefix}fc1"), Tensor::randn([c, s], (1.0 / c as f64).sqrt(), rng));
        store.insert(format!("{prefix}fc1.b"), Tensor::randn([s], 0.1, rng));
        store.insert(format!("{prefix}fc2"), Tensor::randn([s, c], (1.0 / s as f64).sqrt(), rng));
        store.insert(format!("{prefix}fc2.b"), Tensor::randn([c], 0.1, rng));
    }

    /// Random parameters for one adjacent-level fusion under `prefix`.
    pub fn init_fusion<R: Rng + ?Sized>(&self, store: &mut ParamStore, prefix: &str, rng: &mut R) {
        let c = self.channels;
        let sc = (1.0 / (2 * c) as f64).sqrt();
        store.insert(format!("{prefix}entry"), Tensor::randn([c, 2 * c, 1, 1], sc, rng));
        store.insert(format!("{prefix}residual"), Tensor::randn([c, 2 * c, 1, 1], sc, rng));
        for n in 0..self.blocks {
            self.init_block(store, &format!("{prefix}block{n}."), rng);
        }
    }
}

fn channel_affine(tape: &mut Tape, x: Var, scale: Var, shift: Var) -> Result<Var> {
    let (c, h, w) = match *tape.shape(x) {
        [c, h, w] => (c, h, w),
        _ => unreachable!("conv output is 3-D"),
    };
    let flat = tape.reshape(x, [c, h * w])?;
    let y = tape.mul_rows(flat, scale)?;
    let y = tape.add_col_vector(y, shift)?;
    tape.reshape(y, [c, h, w])
}

/// Gated grouped-convolution block with residual.
///
/// `f_M = relu(a * A3(GC3(x)) + (1 - a) * A1(GC1(x)))`, where `GC3`/`GC1` are
/// 3x3 and 1x1 grouped convolutions, `A` per-channel affines and `a` is
/// clamped to `[0, 1]`. The output is `f_M * g + x`, `g` a per-channel
/// sigmoid gate computed from the spatial mean of `f_M` through two dense
/// layers with a relu between them.
pub fn repvgg_plux_block(
    tape: &mut Tape,
    x: Var,
    params: &BoundParams,
    prefix: &str,
    cfg: &FusionConfig,
) -> Result<Var> {
    let p = |name: &str| params.var(&format!("{prefix}{name}"));
    let (c, h, w) = match *tape.shape(x) {
        [c, h, w] if c == cfg.channels => (c, h, w),
        _ => {
            return Err(Error::Config(format!(
                "fusion block expects {} channels, got shape {:?}",
                cfg.channels,
                tape.shape(x)
            )))
        }
    };
    let y3 = tape.grouped_conv2d(x, p("k3")?, cfg.groups)?;
    let y3 = channel_affine(tape, y3, p("k3.scale")?, p("k3.shift")?)?;
    let y1 = tape.grouped_conv2d(x, p("k1")?, cfg.groups)?;
    let y1 = channel_affine(tape, y1, p("k1.scale")?, p("k1.shift")?)?;
    let alpha = tape.clamp(p("alpha")?, 0.0, 1.0);
    let neg = tape.scale(alpha, -1.0);
    let one_minus = tape.add_scalar(neg, 1.0);
    let a = tape.mul_scalar_var(y3, alpha)?;
    let b = tape.mul_scalar_var(y1, one_minus)?;
    let mixed = tape.add(a, b)?;
    let fm = tape.relu(mixed);

    let fm_flat = tape.reshape(fm, [c, h * w])?;
    let pooled = tape.row_mean(fm_flat)?;
    let pooled = tape.reshape(pooled, [1, c])?;
    let z = tape.matmul(pooled, p("fc1")?)?;
    let z = tape.add_row_vector(z, p("fc1.b")?)?;
    let z = tape.relu(z);
    let z = tape.matmul(z, p("fc2")?)?;
    let z = tape.add_row_vector(z, p("fc2.b")?)?;
    let gate = tape.sigmoid(z);
    let gate = tape.reshape(gate, [c])?;
    let gated = tape.mul_rows(fm_flat, gate)?;
    let gated = tape.reshape(gated, [c, h, w])?;
    tape.add(gated, x)
}

/// Fuses a fine level with its coarser neighbour.
///
/// `f_I = Conv_entry(concat(f_low, UP(f_high)))`, passed through
/// `cfg.blocks` gated blocks, plus the residual branch
/// `Conv_residual(concat(f_low, UP(f_high)))`. Both convolutions are 1x1.
pub fn cross_level_fuse(
    tape: &mut Tape,
    f_low: Var,
    f_high: Var,
    params: &BoundParams,
    prefix: &str,
    cfg: &FusionConfig,
) -> Result<Var> {
    let (lo, hi) = (tape.shape(f_low).to_vec(), tape.shape(f_high).to_vec());
    let compatible = lo.len() == 3
        && hi.len() == 3
        && lo[0] == cfg.channels
        && hi[0] == cfg.channels
        && hi[1] == lo[1].div_ceil(2)
        && hi[2] == lo[2].div_ceil(2);
    if !compatible {
        return Err(Error::Contract(format!(
            "cross-level fusion needs a coarse level half the fine one: {lo:?} vs {hi:?}"
        )));
    }
    let up = tape.bilinear_resize(f_high, lo[1], lo[2])?;
    let cat = tape.concat(&[f_low, up])?;
    let mut x = tape.grouped_conv2d(cat, params.var(&format!("{prefix}entry"))?, 1)?;
    for n in 0..cfg.blocks {
        x = repvgg_plux_block(tape, x, params, &format!("{prefix}block{n}."), cfg)?;
    }
    let residual = tape.grouped_conv2d(cat, params.var(&format!("{prefix}residual"))?, 1)?;
    tape.add(x, residual)
}

/// Which NMS passes [`remove_redundancy`] runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RedundancyMode {
    /// Per level, on unit boxes in grid-index units.
    LevelWise,
    /// Across levels, on unit boxes mapped to image pixels.
    ImageWise,
    /// Level-wise, then image-wise.
    Both,
}

fn level_wise(selected: &[(GridPos, f64)], thr: f64) -> Result<Vec<usize>> {
    let mut keep = vec![false; selected.len()];
    let max_level = selected.iter().map(|(p, _)| p.level).max();
    for level in 0..=max_level.unwrap_or(0) {
        let members: Vec<usize> = (0..selected.len())
            .filter(|&k| selected[k].0.level == level)
            .collect();
        let boxes: Vec<_> = members.iter().map(|&k| unit_box(selected[k].0)).collect();
        let scores: Vec<f64> = members.iter().map(|&k| selected[k].1).collect();
        for kept in nms(&boxes, &scores, thr)? {
            keep[members[kept]] = true;
        }
    }
    Ok((0..selected.len()).filter(|&k| keep[k]).collect())
}

fn image_wise(selected: &[(GridPos, f64)], strides: &[usize], thr: f64) -> Result<Vec<usize>> {
    let mut boxes = Vec::with_capacity(selected.len());
    for (p, _) in selected {
        let stride = *strides.get(p.level).ok_or_else(|| {
            Error::Contract(format!("no stride for level {}", p.level))
        })?;
        boxes.push(image_unit_box(*p, stride));
    }
    let scores: Vec<f64> = selected.iter().map(|(_, s)| *s).collect();
    let mut kept = nms(&boxes, &scores, thr)?;
    kept.sort_unstable();
    Ok(kept)
}

/// NMS over unit boxes centred on selected grid positions.
///
/// Output is a subset of `selected`, ordered by score descending (ties keep
/// input order).
pub fn remove_redundancy(
    selected: &[(GridPos, f64)],
    strides: &[usize],
    iou_threshold: f64,
    mode: RedundancyMode,
) -> Result<Vec<(GridPos, f64)>> {
    if let Some((p, _)) = selected.iter().find(|(_, s)| !s.is_finite()) {
        return Err(Error::Contract(format!("non-finite score at {p:?}")));
    }
    let mut current: Vec<(GridPos, f64)> = selected.to_vec();
    if matches!(mode, RedundancyMode::LevelWise | RedundancyMode::Both) {
        current = level_wise(&current, iou_threshold)?
            .into_iter()
            .map(|k| current[k])
            .collect();
    }
    if matches!(mode, RedundancyMode::ImageWise | RedundancyMode::Both) {
        current = image_wise(&current, strides, iou_threshold)?
            .into_iter()
            .map(|k| current[k])
            .collect();
    }
    let scores: Vec<f64> = current.iter().map(|(_, s)| *s).collect();
    Ok(crate::geometry::score_order(&scores)
        .into_iter()
        .map(|k| current[k])
        .collect())
}
