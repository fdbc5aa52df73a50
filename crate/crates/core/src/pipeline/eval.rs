use std::cmp::Ordering;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::filtering::{select_queries, FilterRatios};
use crate::geometry::{grid_to_image_coords, GridPos};
use crate::predictor::SaliencePredictor;
use crate::supervision::SalienceTargets;
use crate::tensor::{ParamStore, Tensor};

use super::scene::{ScaleClass, SyntheticScene};

/// Area under the ROC curve from ranks; tied scores share their mean rank.
///
/// Errors when either class is empty.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::Contract("ROC-AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // ranks start..end (1-based: start+1 ..= end) share their mean
        let mean_rank = (start + 1 + end) as f64 / 2.0;
        rank_sum += mean_rank * order[start..end].iter().filter(|&&k| labels[k]).count() as f64;
        start = end;
    }
    let p = positives as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * negatives as f64))
}

/// Foreground (target above zero) versus background AUC of predicted
/// salience, pooled over every position of every scene.
pub fn salience_auc(predictions: &[Vec<Tensor>], targets: &[SalienceTargets]) -> Result<f64> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (pred, t) in predictions.iter().zip(targets) {
        for (p, m) in pred.iter().zip(&t.maps) {
            scores.extend_from_slice(p.data());
            labels.extend(m.data().iter().map(|&v| v > 0.0));
        }
    }
    roc_auc(&scores, &labels)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ScaleCoverage {
    pub scale: ScaleClass,
    pub objects: usize,
    /// Objects with at least one selected query inside the box.
    pub covered: usize,
    pub coverage: f64,
    pub mean_selected: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BiasReport {
    pub classes: Vec<ScaleCoverage>,
}

impl BiasReport {
    pub fn get(&self, scale: ScaleClass) -> Option<&ScaleCoverage> {
        self.classes.iter().find(|c| c.scale == scale)
    }
}

/// Per scene: grid positions selected by any encoder layer.
fn selected_positions(maps: &[Tensor], ratios: &FilterRatios) -> Result<Vec<GridPos>> {
    let plan = select_queries(maps, ratios)?;
    let layout = plan.layout();
    let mut hit = vec![false; layout.total()];
    for t in 0..plan.num_layers() {
        for g in plan.global_indices(t) {
            hit[g] = true;
        }
    }
    Ok((0..hit.len()).filter(|&g| hit[g]).map(|g| layout.pos(g)).collect())
}

/// Coverage of each scale class by the queries selected from predicted
/// salience. A query counts for an object when its image coordinate lies in
/// the box; a query selected by several layers counts once.
pub fn evaluate_selection_bias(
    predictor: &SaliencePredictor,
    params: &ParamStore,
    corpus: &[SyntheticScene],
    ratios: &FilterRatios,
) -> Result<BiasReport> {
    let mut objects = [0usize; 3];
    let mut covered = [0usize; 3];
    let mut selected = [0usize; 3];
    for scene in corpus {
        let maps = predictor.predict(params, &scene.pyramid)?;
        let picked = selected_positions(&maps, ratios)?;
        let strides = &scene.pyramid.strides;
        let points: Vec<(f64, f64)> = picked
            .iter()
            .map(|&p| grid_to_image_coords(p, strides[p.level]))
            .collect();
        for b in &scene.boxes {
            let k = b.scale as usize;
            let inside = points.iter().filter(|&&(x, y)| b.bbox.contains(x, y)).count();
            objects[k] += 1;
            selected[k] += inside;
            if inside > 0 {
                covered[k] += 1;
            }
        }
    }
    let classes = ScaleClass::ALL
        .iter()
        .map(|&scale| {
            let k = scale as usize;
            let n = objects[k];
            let frac = |x: usize| if n == 0 { 0.0 } else { x as f64 / n as f64 };
            ScaleCoverage {
                scale,
                objects: n,
                covered: covered[k],
                coverage: frac(covered[k]),
                mean_selected: frac(selected[k]),
            }
        })
        .collect();
    Ok(BiasReport { classes })
}
