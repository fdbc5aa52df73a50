//! Boxes, grid-to-image coordinate mapping, IoU and greedy NMS.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in center-size form.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        if !(w > 0.0 && h > 0.0) || !cx.is_finite() || !cy.is_finite() {
            return Err(Error::Contract(format!(
                "box needs finite center and positive size, got ({cx}, {cy}, {w}, {h})"
            )));
        }
        Ok(Self { cx, cy, w, h })
    }

    /// `[x1, y1, x2, y2]`.
    pub fn corners(&self) -> [f64; 4] {
        let (hw, hh) = (self.w / 2.0, self.h / 2.0);
        [self.cx - hw, self.cy - hh, self.cx + hw, self.cy + hh]
    }

    pub fn from_corners([x1, y1, x2, y2]: [f64; 4]) -> Result<Self> {
        Self::new((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn max_side(&self) -> f64 {
        self.w.max(self.h)
    }

    /// Border-inclusive containment.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        (x - self.cx).abs() <= self.w / 2.0 && (y - self.cy).abs() <= self.h / 2.0
    }
}

/// A query position: pyramid level and row/column inside that level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GridPos {
    pub level: usize,
    pub i: usize,
    pub j: usize,
}

impl GridPos {
    pub fn new(level: usize, i: usize, j: usize) -> Self {
        Self { level, i, j }
    }
}

/// Image coordinate `(floor(s/2) + i*s, floor(s/2) + j*s)` of a grid position.
///
/// The first coordinate comes from `i` and the second from `j`; every
/// consumer in this crate (targets, features, boxes) uses the same pairing.
pub fn grid_to_image_coords(pos: GridPos, stride: usize) -> (f64, f64) {
    let half = (stride / 2) as f64;
    let s = stride as f64;
    (half + pos.i as f64 * s, half + pos.j as f64 * s)
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let [ax1, ay1, ax2, ay2] = a.corners();
    let [bx1, by1, bx2, by2] = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    (inter / (a.area() + b.area() - inter)).clamp(0.0, 1.0)
}

/// Candidate order for greedy suppression: score descending, lower index first on ties.
pub(crate) fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Greedy non-maximum suppression.
///
/// A box is dropped when its IoU with an already kept box is strictly greater
/// than `iou_threshold`. Returns kept indices ordered by score descending.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_threshold: f64) -> Result<Vec<usize>> {
    if boxes.len() != scores.len() {
        return Err(Error::Contract(format!(
            "nms: {} boxes but {} scores",
            boxes.len(),
            scores.len()
        )));
    }
    let mut kept: Vec<usize> = Vec::new();
    for i in score_order(scores) {
        if kept.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= iou_threshold) {
            kept.push(i);
        }
    }
    Ok(kept)
}

/// Box with center `(i, j)` and half-size 1 in grid-index units: corners
/// `[i-1, j-1, i+1, j+1]`.
pub fn unit_box(pos: GridPos) -> BBox {
    BBox {
        cx: pos.i as f64,
        cy: pos.j as f64,
        w: 2.0,
        h: 2.0,
    }
}

/// Unit box mapped to image pixels: centered on the grid point's image
/// coordinate with half-size equal to the level stride.
pub fn image_unit_box(pos: GridPos, stride: usize) -> BBox {
    let (x, y) = grid_to_image_coords(pos, stride);
    let side = 2.0 * stride as f64;
    BBox {
        cx: x,
        cy: y,
        w: side,
        h: side,
    }
}
