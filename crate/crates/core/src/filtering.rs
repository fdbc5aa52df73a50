//! Hierarchical query filtering.
//!
//! Each encoder layer `t` refines, at each pyramid level `l`, only the
//! `ceil(v_l * w_t * H_l W_l)` queries with the highest predicted salience.
//! Selected queries attend to every query (dense keys, sparse queries);
//! unselected rows pass through a layer untouched.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::score_order;
use crate::pyramid::QueryLayout;
use crate::tensor::{BoundParams, ParamStore, Tape, Tensor, Var};

/// Level ratios `v` (one per pyramid level) and layer ratios `w` (one per encoder layer).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterRatios {
    pub levels: Vec<f64>,
    pub layers: Vec<f64>,
}

impl Default for FilterRatios {
    fn default() -> Self {
        Self {
            levels: vec![0.3, 0.5, 0.7, 1.0],
            layers: vec![1.0, 0.6],
        }
    }
}

impl FilterRatios {
    pub fn new(levels: Vec<f64>, layers: Vec<f64>) -> Result<Self> {
        let r = Self { levels, layers };
        r.validate()?;
        Ok(r)
    }

    pub fn uniform(levels: usize, layers: usize, value: f64) -> Self {
        Self {
            levels: vec![value; levels],
            layers: vec![value; layers],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(bad) = self
            .levels
            .iter()
            .chain(&self.layers)
            .find(|r| !(0.0..=1.0).contains(*r))
        {
            return Err(Error::Config(format!("filter ratio {bad} outside [0, 1]")));
        }
        if self.layers.is_empty() {
            return Err(Error::Config("at least one encoder layer ratio required".into()));
        }
        Ok(())
    }

    /// Parses `v1,v2,...:w1,w2,...`.
    pub fn parse(s: &str) -> Result<Self> {
        let (v, w) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("ratios `{s}` must look like v1,v2:w1,w2")))?;
        let list = |part: &str| -> Result<Vec<f64>> {
            part.split(',')
                .map(|x| {
                    x.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Config(format!("bad ratio `{x}`: {e}")))
                })
                .collect()
        };
        Self::new(list(v)?, list(w)?)
    }
}

/// Number of queries kept out of `n` for ratios `v` and `w`.
pub fn selected_count(v: f64, w: f64, n: usize) -> usize {
    if v <= 0.0 || w <= 0.0 || n == 0 {
        return 0;
    }
    // absorb representation error, e.g. 0.3 * 10 = 3.0000000000000004
    let exact = v * w * n as f64;
    let k = (exact - 1e-9 * exact.max(1.0)).ceil() as usize;
    k.clamp(1, n)
}

/// Selected queries per encoder layer and pyramid level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterPlan {
    pub level_shapes: Vec<(usize, usize)>,
    pub ratios: FilterRatios,
    /// `layers[t][l]`: ascending flat indices within level `l`.
    pub layers: Vec<Vec<Vec<usize>>>,
}

impl FilterPlan {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layout(&self) -> QueryLayout {
        QueryLayout::new(&self.level_shapes)
    }

    /// `Omega_t`: ascending global row indices selected at layer `t`.
    pub fn global_indices(&self, layer: usize) -> Vec<usize> {
        let layout = self.layout();
        self.layers[layer]
            .iter()
            .enumerate()
            .flat_map(|(l, idx)| {
                let off = layout.offset(l);
                idx.iter().map(move |&i| off + i)
            })
            .collect()
    }

    /// Rows never refined by the last layer.
    pub fn final_complement(&self) -> Vec<usize> {
        let layout = self.layout();
        let mut selected = vec![false; layout.total()];
        if let Some(last) = self.layers.len().checked_sub(1) {
            for g in self.global_indices(last) {
                selected[g] = true;
            }
        }
        (0..layout.total()).filter(|&g| !selected[g]).collect()
    }

    pub fn total_selected(&self) -> usize {
        self.layers.iter().flatten().map(Vec::len).sum()
    }
}

/// Top-k selection per (layer, level); ties go to the lower flat index.
pub fn select_queries(salience: &[Tensor], ratios: &FilterRatios) -> Result<FilterPlan> {
    ratios.validate()?;
    if salience.len() != ratios.levels.len() {
        return Err(Error::Config(format!(
            "{} level ratios for {} salience maps",
            ratios.levels.len(),
            salience.len()
        )));
    }
    let mut level_shapes = Vec::with_capacity(salience.len());
    let mut orders = Vec::with_capacity(salience.len());
    for map in salience {
        let shape = match *map.shape() {
            [h, w] => (h, w),
            [1, h, w] => (h, w),
            _ => {
                return Err(Error::Shape {
                    op: "select_queries",
                    lhs: map.shape().to_vec(),
                    rhs: vec![0, 0],
                })
            }
        };
        level_shapes.push(shape);
        orders.push(score_order(map.data()));
    }
    let layers = ratios
        .layers
        .iter()
        .map(|&w| {
            orders
                .iter()
                .zip(&ratios.levels)
                .map(|(order, &v)| {
                    let k = selected_count(v, w, order.len());
                    let mut picked = order[..k].to_vec();
                    picked.sort_unstable();
                    picked
                })
                .collect()
        })
        .collect();
    Ok(FilterPlan {
        level_shapes,
        ratios: ratios.clone(),
        layers,
    })
}

/// Encoder width, head count and feed-forward width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub channels: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub layers: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            heads: 4,
            ffn_hidden: 32,
            layers: 2,
        }
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "{} channels not divisible into {} heads",
                self.channels, self.heads
            )));
        }
        if self.ffn_hidden == 0 || self.layers == 0 {
            return Err(Error::Config("encoder needs a feed-forward width and layers".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    /// Random parameters for one layer, stored under `prefix`.
    pub fn init_layer<R: Rng + ?Sized>(&self, store: &mut ParamStore, prefix: &str, rng: &mut R) {
        let (c, d, f) = (self.channels, self.head_dim(), self.ffn_hidden);
        let sc = (1.0 / c as f64).sqrt();
        for h in 0..self.heads {
            for m in ["q", "k", "v"] {
                store.insert(format!("{prefix}w{m}.{h}"), Tensor::randn([c, d], sc, rng));
                store.insert(format!("{prefix}b{m}.{h}"), Tensor::randn([d], 0.1, rng));
            }
            let so = (1.0 / d as f64).sqrt() / self.heads as f64;
            store.insert(format!("{prefix}wo.{h}"), Tensor::randn([d, c], so, rng));
        }
        store.insert(format!("{prefix}bo"), Tensor::randn([c], 0.1, rng));
        store.insert(format!("{prefix}ln1.g"), Tensor::uniform([c], 0.8, 1.2, rng));
        store.insert(format!("{prefix}ln1.b"), Tensor::randn([c], 0.1, rng));
        store.insert(format!("{prefix}ffn.w1"), Tensor::randn([c, f], sc, rng));
        store.insert(format!("{prefix}ffn.b1"), Tensor::randn([f], 0.1, rng));
        store.insert(
            format!("{prefix}ffn.w2"),
            Tensor::randn([f, c], (1.0 / f as f64).sqrt(), rng),
        );
        store.insert(format!("{prefix}ffn.b2"), Tensor::randn([c], 0.1, rng));
        store.insert(format!("{prefix}ln2.g"), Tensor::uniform([c], 0.8, 1.2, rng));
        store.insert(format!("{prefix}ln2.b"), Tensor::randn([c], 0.1, rng));
    }
}

/// One filtered encoder layer.
///
/// Rows listed in `selected` become
/// `LN2(x + FFN(x))` with `x = LN1(q_i + Attn(q_i + pos_i, q + pos, q))`;
/// every other row of `queries` is returned bit-for-bit.
pub fn selective_encoder_layer(
    tape: &mut Tape,
    queries: Var,
    pos: Var,
    selected: &[usize],
    params: &BoundParams,
    prefix: &str,
    cfg: &EncoderConfig,
) -> Result<Var> {
    let n = tape.shape(queries)[0];
    if tape.shape(queries) != [n, cfg.channels] || tape.shape(pos) != tape.shape(queries) {
        return Err(Error::Shape {
            op: "selective_encoder_layer",
            lhs: tape.shape(queries).to_vec(),
            rhs: tape.shape(pos).to_vec(),
        });
    }
    if let Some(&bad) = selected.iter().find(|&&i| i >= n) {
        return Err(Error::Contract(format!(
            "selected row {bad} out of bounds for {n} queries"
        )));
    }
    if selected.is_empty() {
        return Ok(queries);
    }
    let p = |name: &str| params.var(&format!("{prefix}{name}"));

    let q_sel = tape.gather_rows(queries, selected)?;
    let pos_sel = tape.gather_rows(pos, selected)?;
    let q_in = tape.add(q_sel, pos_sel)?;
    let k_in = tape.add(queries, pos)?;
    let inv_sqrt_d = 1.0 / (cfg.head_dim() as f64).sqrt();

    let mut attn: Option<Var> = None;
    for h in 0..cfg.heads {
        let qh = tape.matmul(q_in, p(&format!("wq.{h}"))?)?;
        let qh = tape.add_row_vector(qh, p(&format!("bq.{h}"))?)?;
        let kh = tape.matmul(k_in, p(&format!("wk.{h}"))?)?;
        let kh = tape.add_row_vector(kh, p(&format!("bk.{h}"))?)?;
        let vh = tape.matmul(queries, p(&format!("wv.{h}"))?)?;
        let vh = tape.add_row_vector(vh, p(&format!("bv.{h}"))?)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, inv_sqrt_d);
        let weights = tape.softmax_rows(scores)?;
        let head = tape.matmul(weights, vh)?;
        let out = tape.matmul(head, p(&format!("wo.{h}"))?)?;
        attn = Some(match attn {
            None => out,
            Some(acc) => tape.add(acc, out)?,
        });
    }
    let attn = tape.add_row_vector(attn.expect("at least one head"), p("bo")?)?;
    let x = tape.add(q_sel, attn)?;
    let x = tape.layer_norm_rows(x, p("ln1.g")?, p("ln1.b")?, LAYER_NORM_EPS)?;
    let f = tape.matmul(x, p("ffn.w1")?)?;
    let f = tape.add_row_vector(f, p("ffn.b1")?)?;
    let f = tape.relu(f);
    let f = tape.matmul(f, p("ffn.w2")?)?;
    let f = tape.add_row_vector(f, p("ffn.b2")?)?;
    let y = tape.add(x, f)?;
    let y = tape.layer_norm_rows(y, p("ln2.g")?, p("ln2.b")?, LAYER_NORM_EPS)?;
    tape.scatter_rows(queries, selected, y)
}

/// Unfiltered encoder layer written as plain loops, used as the reference
/// for full-selection equivalence.
pub fn dense_encoder_layer_reference(
    queries: &Tensor,
    pos: &Tensor,
    params: &ParamStore,
    prefix: &str,
    cfg: &EncoderConfig,
) -> Result<Tensor> {
    let (n, c) = (queries.shape()[0], cfg.channels);
    let d = cfg.head_dim();
    let g = |name: &str| params.get(&format!("{prefix}{name}"));
    let affine = |x: &[f64], w: &Tensor, b: &Tensor| -> Vec<f64> {
        let cols = w.shape()[1];
        (0..cols)
            .map(|o| b.data()[o] + x.iter().enumerate().map(|(k, xv)| xv * w.at2(k, o)).sum::<f64>())
            .collect()
    };
    let layer_norm = |x: &[f64], gain: &Tensor, bias: &Tensor| -> Vec<f64> {
        let m = x.iter().sum::<f64>() / x.len() as f64;
        let var = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64;
        let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        x.iter()
            .enumerate()
            .map(|(j, v)| (v - m) * r * gain.data()[j] + bias.data()[j])
            .collect()
    };
    let with_pos: Vec<Vec<f64>> = (0..n)
        .map(|i| queries.row(i).iter().zip(pos.row(i)).map(|(a, b)| a + b).collect())
        .collect();
    let mut out = Vec::with_capacity(n * c);
    let mut attn = vec![vec![0.0; c]; n];
    for h in 0..cfg.heads {
        let (wq, bq) = (g(&format!("wq.{h}"))?, g(&format!("bq.{h}"))?);
        let (wk, bk) = (g(&format!("wk.{h}"))?, g(&format!("bk.{h}"))?);
        let (wv, bv) = (g(&format!("wv.{h}"))?, g(&format!("bv.{h}"))?);
        let wo = g(&format!("wo.{h}"))?;
        let qs: Vec<Vec<f64>> = with_pos.iter().map(|x| affine(x, wq, bq)).collect();
        let ks: Vec<Vec<f64>> = with_pos.iter().map(|x| affine(x, wk, bk)).collect();
        let vs: Vec<Vec<f64>> = (0..n).map(|i| affine(queries.row(i), wv, bv)).collect();
        for i in 0..n {
            let logits: Vec<f64> = ks
                .iter()
                .map(|k| qs[i].iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = e.iter().sum();
            let mut head = vec![0.0; d];
            for (j, ej) in e.iter().enumerate() {
                for (k, hv) in head.iter_mut().enumerate() {
                    *hv += ej / z * vs[j][k];
                }
            }
            for (o, a) in attn[i].iter_mut().enumerate() {
                *a += (0..d).map(|k| head[k] * wo.at2(k, o)).sum::<f64>();
            }
        }
    }
    let bo = g("bo")?;
    for i in 0..n {
        let pre: Vec<f64> = (0..c)
            .map(|o| queries.row(i)[o] + attn[i][o] + bo.data()[o])
            .collect();
        let x = layer_norm(&pre, g("ln1.g")?, g("ln1.b")?);
        let hidden: Vec<f64> = affine(&x, g("ffn.w1")?, g("ffn.b1")?)
            .into_iter()
            .map(|v| v.max(0.0))
            .collect();
        let f = affine(&hidden, g("ffn.w2")?, g("ffn.b2")?);
        let y: Vec<f64> = x.iter().zip(&f).map(|(a, b)| a + b).collect();
        out.extend(layer_norm(&y, g("ln2.g")?, g("ln2.b")?));
    }
    Tensor::new([n, c], out)
}

/// Fixed 2-D sinusoidal encoding of an `H x W` grid as `[H*W, C]` rows.
///
/// The first half of the channels encodes the row index, the second half the
/// column index, alternating sine and cosine over geometric frequencies.
pub fn sine_position_encoding(h: usize, w: usize, channels: usize) -> Tensor {
    let half = channels / 2;
    let mut data = vec![0.0; h * w * channels];
    let enc = |coord: f64, size: usize, k: usize, dims: usize| {
        let x = (coord + 0.5) / size as f64 * 2.0 * PI;
        let freq = 10000f64.powf((2 * (k / 2)) as f64 / dims.max(1) as f64);
        if k.is_multiple_of(2) {
            (x / freq).sin()
        } else {
            (x / freq).cos()
        }
    };
    for i in 0..h {
        for j in 0..w {
            let row = &mut data[(i * w + j) * channels..(i * w + j + 1) * channels];
            for (k, v) in row.iter_mut().enumerate() {
                *v = if k < half {
                    enc(i as f64, h, k, half)
                } else {
                    enc(j as f64, w, k - half, channels - half)
                };
            }
        }
    }
    Tensor::new([h * w, channels], data).expect("sized above")
}

/// Operation counts for the deformable-attention encoder cost model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub dense_ops: f64,
    pub filtered_ops: f64,
}

/// Evaluates `sum_l H_l W_l C T (C + KC + 5K + 3MK)` and the filtered
/// double sum `sum_l sum_t v_l w_t H_l W_l C (C + KC + 5K + 3MK)`.
pub fn analytic_cost(
    shapes: &[(usize, usize)],
    ratios: &FilterRatios,
    channels: usize,
    heads: usize,
    points: usize,
    layers: usize,
) -> Result<CostReport> {
    ratios.validate()?;
    if ratios.levels.len() != shapes.len() || ratios.layers.len() != layers {
        return Err(Error::Config(format!(
            "cost model: {} level ratios / {} layer ratios for {} levels / {} layers",
            ratios.levels.len(),
            ratios.layers.len(),
            shapes.len(),
            layers
        )));
    }
    let (c, m, k, t) = (channels as f64, heads as f64, points as f64, layers as f64);
    let per_query = c * (c + k * c + 5.0 * k + 3.0 * m * k);
    let mut dense_ops = 0.0;
    let mut filtered_ops = 0.0;
    for (&(h, w), &v) in shapes.iter().zip(&ratios.levels) {
        let hw = (h * w) as f64;
        dense_ops += hw * t * per_query;
        for &wt in &ratios.layers {
            filtered_ops += v * wt * hw * per_query;
        }
    }
    Ok(CostReport {
        dense_ops,
        filtered_ops,
    })
}

/// Fraction of query-layer slots refined, counted from a plan and in closed form.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct KeepRatio {
    pub counted: f64,
    pub closed_form: f64,
}

/// `counted` is selected slots over `layers * sum_l H_l W_l`; `closed_form` is
/// `(|w|_1 / T) * (|v * s^2|_1 / |s^2|_1)` with `s` the level strides.
pub fn measured_keep_ratio(plan: &FilterPlan, strides: &[usize]) -> Result<KeepRatio> {
    if strides.len() != plan.level_shapes.len() {
        return Err(Error::Config(format!(
            "{} strides for {} levels",
            strides.len(),
            plan.level_shapes.len()
        )));
    }
    let total: usize = plan.level_shapes.iter().map(|(h, w)| h * w).sum();
    let t = plan.ratios.layers.len() as f64;
    let counted = plan.total_selected() as f64 / (t * total as f64);
    let w_norm: f64 = plan.ratios.layers.iter().sum();
    let s2: Vec<f64> = strides.iter().map(|&s| (s * s) as f64).collect();
    let vs2: f64 = plan.ratios.levels.iter().zip(&s2).map(|(v, s)| v * s).sum();
    let closed_form = (w_norm / t) * (vs2 / s2.iter().sum::<f64>());
    Ok(KeepRatio {
        counted,
        closed_form,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_difference_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            channels: 4,
            heads: 2,
            ffn_hidden: 6,
            layers: 1,
        }
    }

    fn setup(n: usize, seed: u64) -> (EncoderConfig, ParamStore, Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        cfg.init_layer(&mut store, "l.", &mut rng);
        let q = Tensor::randn([n, 4], 1.0, &mut rng);
        let pos = Tensor::randn([n, 4], 0.5, &mut rng);
        (cfg, store, q, pos)
    }

    fn run_layer(store: &ParamStore, cfg: &EncoderConfig, q: &Tensor, pos: &Tensor, sel: &[usize]) -> (Tensor, u64) {
        let mut tape = Tape::new();
        let bound = store.attach_frozen(&mut tape);
        let qv = tape.constant(q.clone());
        let pv = tape.constant(pos.clone());
        let before = tape.macs();
        let out = selective_encoder_layer(&mut tape, qv, pv, sel, &bound, "l.", cfg).unwrap();
        (tape.value(out).clone(), tape.macs() - before)
    }

    #[test]
    fn counts_follow_ceiling() {
        assert_eq!(selected_count(0.3, 1.0, 10), 3);
        assert_eq!(selected_count(0.3, 1.0, 1024), 308);
        assert_eq!(selected_count(0.01, 0.5, 4), 1);
        assert_eq!(selected_count(0.0, 0.5, 4), 0);
        assert_eq!(selected_count(0.5, 0.0, 4), 0);
        assert_eq!(selected_count(1.0, 1.0, 7), 7);
        assert_eq!(selected_count(0.5, 0.5, 0), 0);
    }

    #[test]
    fn select_full_and_empty() {
        let maps = vec![Tensor::zeros([3, 3]), Tensor::zeros([2, 2])];
        let full = select_queries(&maps, &FilterRatios::uniform(2, 2, 1.0)).unwrap();
        assert_eq!(full.global_indices(1), (0..13).collect::<Vec<_>>());
        let none = FilterRatios::new(vec![1.0, 0.0], vec![1.0, 1.0]).unwrap();
        let plan = select_queries(&maps, &none).unwrap();
        assert!(plan.layers.iter().all(|l| l[1].is_empty() && l[0].len() == 9));
        assert!(select_queries(&maps[..1], &none).is_err());
    }

    #[test]
    fn select_top_quarter_of_4x4() {
        let vals = [3.0, 9.0, 1.0, 4.0, 15.0, 0.5, 2.0, 7.0, 8.0, 6.0, 12.0, 5.0, 10.0, 11.0, 13.0, 14.0];
        let map = Tensor::new([4, 4], vals.to_vec()).unwrap();
        let plan = select_queries(&[map], &FilterRatios::new(vec![0.25], vec![1.0]).unwrap()).unwrap();
        let mut sorted: Vec<usize> = (0..16).collect();
        sorted.sort_by(|&a, &b| vals[b].partial_cmp(&vals[a]).unwrap());
        let mut expect = sorted[..4].to_vec();
        expect.sort();
        assert_eq!(plan.layers[0][0], expect);
        assert_eq!(expect, vec![4, 10, 14, 15]);
    }

    #[test]
    fn selection_nested_across_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let maps = vec![Tensor::uniform([6, 6], 0.0, 1.0, &mut rng)];
        let plan = select_queries(&maps, &FilterRatios::new(vec![0.8], vec![1.0, 0.6, 0.2]).unwrap()).unwrap();
        for t in 1..3 {
            assert!(plan.layers[t][0].iter().all(|i| plan.layers[t - 1][0].contains(i)));
        }
    }

    #[test]
    fn parse_ratios() {
        let r = FilterRatios::parse("0.3,0.5,0.7,1:1,0.6").unwrap();
        assert_eq!(r, FilterRatios::default());
        assert!(FilterRatios::parse("0.3,1.5:1").is_err());
        assert!(FilterRatios::parse("0.3").is_err());
    }

    #[test]
    fn empty_selection_is_identity() {
        let (cfg, store, q, pos) = setup(7, 1);
        assert_eq!(run_layer(&store, &cfg, &q, &pos, &[]).0, q);
    }

    #[test]
    fn full_selection_matches_dense_reference() {
        let (cfg, store, q, pos) = setup(9, 2);
        let all: Vec<usize> = (0..9).collect();
        let (out, _) = run_layer(&store, &cfg, &q, &pos, &all);
        let reference = dense_encoder_layer_reference(&q, &pos, &store, "l.", &cfg).unwrap();
        assert!(out.max_abs_diff(&reference) < 1e-10);
    }

    #[test]
    fn partial_selection_touches_only_selected_rows() {
        let (cfg, store, q, pos) = setup(8, 3);
        let sel = [1, 4, 5, 6];
        let (out, _) = run_layer(&store, &cfg, &q, &pos, &sel);
        for i in 0..8 {
            if sel.contains(&i) {
                assert_ne!(out.row(i), q.row(i));
            } else {
                assert_eq!(out.row(i), q.row(i));
            }
        }
        let mut tape = Tape::new();
        let bound = store.attach_frozen(&mut tape);
        let qv = tape.constant(q.clone());
        let pv = tape.constant(pos.clone());
        let err = selective_encoder_layer(&mut tape, qv, pv, &[8], &bound, "l.", &cfg);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn macs_affine_in_selection() {
        let (cfg, store, q, pos) = setup(12, 4);
        let m: Vec<(f64, f64)> = [2usize, 5, 9]
            .iter()
            .map(|&k| {
                let sel: Vec<usize> = (0..k).collect();
                (k as f64, run_layer(&store, &cfg, &q, &pos, &sel).1 as f64)
            })
            .collect();
        let slope = (m[1].1 - m[0].1) / (m[1].0 - m[0].0);
        assert!((m[0].1 + slope * (m[2].0 - m[0].0) - m[2].1).abs() < 1e-9);
        assert!(slope > 0.0);
    }

    #[test]
    fn layer_gradient_matches_finite_differences() {
        let (cfg, store, q, pos) = setup(6, 5);
        let sel = [0, 2, 3];
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let weights = Tensor::randn([6, 4], 1.0, &mut rng);
        let eval = |flat: &[f64], grad: bool| {
            let mut s = store.clone();
            s.assign_flat(flat).unwrap();
            let mut tape = Tape::new();
            let bound = s.attach(&mut tape);
            let qv = tape.constant(q.clone());
            let pv = tape.constant(pos.clone());
            let out = selective_encoder_layer(&mut tape, qv, pv, &sel, &bound, "l.", &cfg).unwrap();
            let wv = tape.constant(weights.clone());
            let prod = tape.mul(out, wv).unwrap();
            let loss = tape.sum(prod);
            let value = tape.value(loss).data()[0];
            (value, grad.then(|| bound.flat_grad(&tape, &tape.backward(loss).unwrap())))
        };
        let flat = store.flatten();
        let analytic = eval(&flat, true).1.unwrap();
        let probes: Vec<usize> = (0..flat.len()).step_by(3).filter(|&i| analytic[i].abs() > 1e-8).collect();
        assert!(probes.len() >= 20);
        let err = finite_difference_check(|p| eval(p, false).0, &flat, &analytic, &probes, 1e-5);
        assert!(err < 1e-4, "err = {err}");
    }

    #[test]
    fn cost_hand_values() {
        let shapes = [(8, 8), (4, 4), (2, 2), (1, 1)];
        let ratios = FilterRatios::new(vec![0.5; 4], vec![1.0, 0.5]).unwrap();
        let r = analytic_cost(&shapes, &ratios, 32, 4, 4, 2).unwrap();
        // C + KC + 5K + 3MK = 32 + 128 + 20 + 48 = 228; 85 queries
        assert_eq!(r.dense_ops, 85.0 * 32.0 * 2.0 * 228.0);
        assert_eq!(r.filtered_ops, 85.0 * 32.0 * 228.0 * 0.5 * 1.5);
        let ones = analytic_cost(&shapes, &FilterRatios::uniform(4, 2, 1.0), 32, 4, 4, 2).unwrap();
        assert_eq!(ones.dense_ops, ones.filtered_ops);
        let zeros = analytic_cost(&shapes, &FilterRatios::uniform(4, 2, 0.0), 32, 4, 4, 2).unwrap();
        assert_eq!(zeros.filtered_ops, 0.0);
        assert!(analytic_cost(&shapes, &ratios, 32, 4, 4, 3).is_err());
    }

    #[test]
    fn keep_ratio_counts() {
        let shapes = [(8, 8), (4, 4), (2, 2), (1, 1)];
        let maps: Vec<Tensor> = shapes.iter().map(|&(h, w)| Tensor::zeros([h, w])).collect();
        let strides = [8, 16, 32, 64];
        let one = select_queries(&maps, &FilterRatios::uniform(4, 1, 1.0)).unwrap();
        let r = measured_keep_ratio(&one, &strides).unwrap();
        assert_eq!((r.counted, r.closed_form), (1.0, 1.0));
        let zero = select_queries(&maps, &FilterRatios::uniform(4, 1, 0.0)).unwrap();
        let r = measured_keep_ratio(&zero, &strides).unwrap();
        assert_eq!((r.counted, r.closed_form), (0.0, 0.0));
        let first = select_queries(&maps, &FilterRatios::new(vec![1.0, 0.0, 0.0, 0.0], vec![1.0]).unwrap()).unwrap();
        let r = measured_keep_ratio(&first, &strides).unwrap();
        assert_eq!(r.counted, 64.0 / 85.0);
    }

    #[test]
    fn position_encoding_shape_and_range() {
        let pe = sine_position_encoding(3, 5, 8);
        assert_eq!(pe.shape(), &[15, 8]);
        assert!(pe.data().iter().all(|v| v.abs() <= 1.0));
        assert_ne!(pe.row(0), pe.row(1));
    }
}
