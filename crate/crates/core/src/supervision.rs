//! Salience targets, the discrete foreground baseline, and the salience focal loss.
//!
//! A query's target is `1 - sqrt(2 (dx/w)^2 + 2 (dy/h)^2)` measured from the
//! center of the box containing its image coordinate, and 0 outside every
//! box. Because the offsets are normalized by the box size, the target
//! profile is identical for small and large objects.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{grid_to_image_coords, BBox, GridPos};
use crate::tensor::{Tape, Tensor, Var};

/// Per-level target maps, each `[H_l, W_l]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SalienceTargets {
    pub maps: Vec<Tensor>,
}

impl SalienceTargets {
    pub fn levels(&self) -> usize {
        self.maps.len()
    }

    /// All levels concatenated in level order, row-major within a level.
    pub fn flat(&self) -> Vec<f64> {
        self.maps.iter().flat_map(|m| m.data().iter().copied()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
    /// Weight of the salience term in the total loss.
    pub lambda: f64,
    /// Lower clamp on `p_f`.
    pub eps_clamp: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 2.0,
            lambda: 2.0,
            eps_clamp: 1e-12,
        }
    }
}

impl FocalParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) || !(self.gamma >= 0.0) || !(self.eps_clamp > 0.0)
        {
            return Err(Error::Config(format!("invalid focal parameters {self:?}")));
        }
        Ok(())
    }
}

/// Object-size intervals (max side, inclusive) per level for the discrete baseline.
pub const DEFAULT_SCALE_INTERVALS: [(f64, f64); 4] = [
    (-1.0, 128.0),
    (64.0, 256.0),
    (128.0, 512.0),
    (256.0, f64::INFINITY),
];

/// Salience of image point `(x, y)` with respect to one box; 0 outside it.
pub fn salience_confidence((x, y): (f64, f64), bbox: &BBox) -> f64 {
    if !bbox.contains(x, y) {
        return 0.0;
    }
    let nx = (x - bbox.cx) / bbox.w;
    let ny = (y - bbox.cy) / bbox.h;
    (1.0 - (2.0 * nx * nx + 2.0 * ny * ny).sqrt()).max(0.0)
}

fn check_levels(shapes: &[(usize, usize)], strides: &[usize]) -> Result<()> {
    if shapes.len() != strides.len() {
        return Err(Error::Config(format!(
            "{} level shapes but {} strides",
            shapes.len(),
            strides.len()
        )));
    }
    if strides.contains(&0) {
        return Err(Error::Config("stride must be at least 1".into()));
    }
    Ok(())
}

fn fill_levels(
    shapes: &[(usize, usize)],
    strides: &[usize],
    mut value: impl FnMut(usize, (f64, f64)) -> f64,
) -> Vec<Tensor> {
    shapes
        .iter()
        .zip(strides)
        .enumerate()
        .map(|(level, (&(h, w), &stride))| {
            let mut map = Tensor::zeros([h, w]);
            let data = map.data_mut();
            for i in 0..h {
                for j in 0..w {
                    let point = grid_to_image_coords(GridPos::new(level, i, j), stride);
                    data[i * w + j] = value(level, point);
                }
            }
            map
        })
        .collect()
}

/// Per-level salience targets: the maximum over boxes of [`salience_confidence`]
/// at every grid point's image coordinate.
pub fn build_salience_targets(
    shapes: &[(usize, usize)],
    strides: &[usize],
    boxes: &[BBox],
) -> Result<SalienceTargets> {
    check_levels(shapes, strides)?;
    let maps = fill_levels(shapes, strides, |_, point| {
        boxes
            .iter()
            .map(|b| salience_confidence(point, b))
            .fold(0.0, f64::max)
    });
    Ok(SalienceTargets { maps })
}

/// Binary foreground maps: a position is 1 when it lies inside a box whose
/// max side falls in that level's interval.
pub fn discrete_fg_targets(
    shapes: &[(usize, usize)],
    strides: &[usize],
    boxes: &[BBox],
    intervals: &[(f64, f64)],
) -> Result<SalienceTargets> {
    check_levels(shapes, strides)?;
    if intervals.len() != shapes.len() {
        return Err(Error::Config(format!(
            "{} scale intervals for {} levels",
            intervals.len(),
            shapes.len()
        )));
    }
    let maps = fill_levels(shapes, strides, |level, (x, y)| {
        let (lo, hi) = intervals[level];
        let hit = boxes.iter().any(|b| {
            let side = b.max_side();
            side >= lo && side <= hi && b.contains(x, y)
        });
        if hit {
            1.0
        } else {
            0.0
        }
    });
    Ok(SalienceTargets { maps })
}

/// Records the salience focal loss on `tape`.
///
/// `preds` are per-level probability maps (post-sigmoid) matching `targets`
/// in shape. The loss is `-alpha (1 - p)^gamma ln p` with
/// `p = pred * t + (1 - pred)(1 - t)` clamped to `[eps_clamp, 1]`, averaged
/// over every position of every level. `lambda` is not applied here.
pub fn focal_loss_on_tape(
    tape: &mut Tape,
    preds: &[Var],
    targets: &SalienceTargets,
    params: &FocalParams,
) -> Result<Var> {
    if preds.len() != targets.maps.len() || preds.is_empty() {
        return Err(Error::Contract(format!(
            "focal loss: {} prediction levels, {} target levels",
            preds.len(),
            targets.maps.len()
        )));
    }
    let mut flat = Vec::with_capacity(preds.len());
    for (&p, t) in preds.iter().zip(&targets.maps) {
        if tape.value(p).numel() != t.numel() {
            return Err(Error::Shape {
                op: "focal_loss",
                lhs: tape.shape(p).to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        flat.push(tape.reshape(p, [t.numel()])?);
    }
    let pred = tape.concat(&flat)?;
    let theta = targets.flat();
    let n = theta.len();
    let slope = tape.constant(Tensor::new([n], theta.iter().map(|t| 2.0 * t - 1.0).collect())?);
    let offset = tape.constant(Tensor::new([n], theta.iter().map(|t| 1.0 - t).collect())?);
    let p = tape.mul(pred, slope)?;
    let p = tape.add(p, offset)?;
    let p = tape.clamp(p, params.eps_clamp, 1.0);
    let one_minus = tape.scale(p, -1.0);
    let one_minus = tape.add_scalar(one_minus, 1.0);
    let modulator = tape.powf(one_minus, params.gamma);
    let log_p = tape.ln(p);
    let term = tape.mul(modulator, log_p)?;
    let mean = tape.mean(term);
    Ok(tape.scale(mean, -params.alpha))
}

/// Value-only salience focal loss.
pub fn salience_focal_loss(
    preds: &[Tensor],
    targets: &SalienceTargets,
    params: &FocalParams,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = preds.iter().map(|p| tape.constant(p.clone())).collect();
    let loss = focal_loss_on_tape(&mut tape, &vars, targets, params)?;
    Ok(tape.value(loss).data()[0])
}

/// 8-bit binary PGM (P5) of a `[H, W]` map with values in `[0, 1]`.
pub fn heatmap_pgm(map: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match *map.shape() {
        [h, w] => (h, w),
        [1, h, w] => (h, w),
        _ => {
            return Err(Error::Shape {
                op: "heatmap_pgm",
                lhs: map.shape().to_vec(),
                rhs: vec![0, 0],
            })
        }
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(
        map.data()
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_difference_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bx(cx: f64, cy: f64, w: f64, h: f64) -> BBox {
        BBox::new(cx, cy, w, h).unwrap()
    }

    #[test]
    fn confidence_goldens() {
        let b = bx(50.0, 40.0, 20.0, 10.0);
        assert_eq!(salience_confidence((50.0, 40.0), &b), 1.0);
        for corner in [(40.0, 35.0), (60.0, 35.0), (40.0, 45.0), (60.0, 45.0)] {
            assert!(salience_confidence(corner, &b).abs() < 1e-12);
        }
        let mid = salience_confidence((60.0, 40.0), &b);
        assert!((mid - (1.0 - 0.5f64.sqrt())).abs() < 1e-12);
        assert!((mid - 0.2928932).abs() < 1e-7);
        assert_eq!(salience_confidence((61.0, 40.0), &b), 0.0);
    }

    #[test]
    fn no_boxes_gives_zero_targets() {
        let t = build_salience_targets(&[(4, 4), (2, 2)], &[8, 16], &[]).unwrap();
        assert!(t.flat().iter().all(|&v| v == 0.0));
        assert!(build_salience_targets(&[(4, 4)], &[8, 16], &[]).is_err());
    }

    #[test]
    fn box_on_one_cell_center_peaks_there() {
        // grid point (2, 3) at stride 8 sits at (20, 28)
        let t = build_salience_targets(&[(8, 8)], &[8], &[bx(20.0, 28.0, 8.0, 8.0)]).unwrap();
        let map = &t.maps[0];
        let (mut best, mut best_at, mut count) = (f64::MIN, 0, 0);
        for (k, &v) in map.data().iter().enumerate() {
            if v > best {
                (best, best_at, count) = (v, k, 1);
            } else if v == best {
                count += 1;
            }
        }
        assert_eq!((best_at, count), (2 * 8 + 3, 1));
        assert_eq!(best, 1.0);
    }

    #[test]
    fn small_box_not_lower_than_large() {
        let shapes = [(32, 32)];
        let small = bx(60.0, 60.0, 8.0, 8.0);
        let large = bx(180.0, 180.0, 64.0, 64.0);
        let t = build_salience_targets(&shapes, &[8], &[small, large]).unwrap();
        let peak_in = |b: &BBox| {
            let mut peak = 0.0f64;
            let mut nearest = (f64::MAX, 0.0);
            for i in 0..32 {
                for j in 0..32 {
                    let (x, y) = grid_to_image_coords(GridPos::new(0, i, j), 8);
                    if b.contains(x, y) {
                        let v = t.maps[0].at2(i, j);
                        peak = peak.max(v);
                        let d = (x - b.cx).hypot(y - b.cy);
                        if d < nearest.0 {
                            nearest = (d, v);
                        }
                    }
                }
            }
            (peak, nearest.1)
        };
        let (small_peak, small_near) = peak_in(&small);
        let (large_peak, large_near) = peak_in(&large);
        assert_eq!(small_peak, small_near);
        assert_eq!(large_peak, large_near);
        // Both centers land on grid points here, so both peak at exactly 1.
        assert_eq!(small_peak, 1.0);
        assert_eq!(large_peak, 1.0);
    }

    #[test]
    fn discrete_intervals() {
        let shapes = [(64, 64), (32, 32), (16, 16), (8, 8)];
        let strides = [8, 16, 32, 64];
        let labeled = |side: f64| {
            let b = bx(256.0, 256.0, side, side * 0.8);
            let t = discrete_fg_targets(&shapes, &strides, &[b], &DEFAULT_SCALE_INTERVALS).unwrap();
            t.maps
                .iter()
                .map(|m| m.data().contains(&1.0))
                .collect::<Vec<_>>()
        };
        assert_eq!(labeled(100.0), vec![true, true, false, false]);
        assert_eq!(labeled(300.0), vec![false, false, true, true]);
        let empty = discrete_fg_targets(&shapes, &strides, &[], &DEFAULT_SCALE_INTERVALS).unwrap();
        assert!(empty.flat().iter().all(|&v| v == 0.0));
        assert!(discrete_fg_targets(&shapes, &strides, &[], &DEFAULT_SCALE_INTERVALS[..2]).is_err());
    }

    fn single(pred: f64, target: f64) -> f64 {
        let p = [Tensor::new([1, 1], vec![pred]).unwrap()];
        let t = SalienceTargets {
            maps: vec![Tensor::new([1, 1], vec![target]).unwrap()],
        };
        salience_focal_loss(&p, &t, &FocalParams::default()).unwrap()
    }

    #[test]
    fn focal_goldens() {
        assert_eq!(single(1.0, 1.0), 0.0);
        assert!((single(0.5, 0.5) - 0.25 * 0.25 * 2f64.ln()).abs() < 1e-15);
        assert!((single(0.5, 0.5) - 0.0433217).abs() < 1e-7);
        let eps: f64 = 1e-12;
        let clamped = single(1.0, 0.0);
        assert!(clamped.is_finite());
        assert!((clamped - 0.25 * (1.0 - eps).powi(2) * -eps.ln()).abs() < 1e-12);
    }

    #[test]
    fn focal_rejects_mismatch() {
        let p = [Tensor::zeros([2, 2])];
        let t = SalienceTargets {
            maps: vec![Tensor::zeros([3, 1])],
        };
        assert!(salience_focal_loss(&p, &t, &FocalParams::default()).is_err());
        let t2 = SalienceTargets { maps: vec![] };
        assert!(salience_focal_loss(&p, &t2, &FocalParams::default()).is_err());
    }

    #[test]
    fn focal_minimized_at_target() {
        for k in 0..=10 {
            let theta = k as f64 / 10.0;
            let mut best = (f64::MAX, -1.0);
            for s in 1..1000 {
                let pred = s as f64 / 1000.0;
                let l = single(pred, theta);
                if l < best.0 {
                    best = (l, pred);
                }
            }
            // p_f is linear in the prediction, so the minimum sits at the
            // end nearest the target for every theta away from 1/2.
            let expect = if theta > 0.5 {
                0.999
            } else if theta < 0.5 {
                0.001
            } else {
                best.1
            };
            assert!((best.1 - expect).abs() < 1e-12, "theta {theta}: argmin {}", best.1);
        }
    }

    #[test]
    fn focal_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let shapes = [(3usize, 4usize), (2, 2)];
        let targets = SalienceTargets {
            maps: shapes
                .iter()
                .map(|&(h, w)| Tensor::uniform([h, w], 0.0, 1.0, &mut rng))
                .collect(),
        };
        let params: Vec<f64> = (0..16).map(|_| rng.random_range(0.05..0.95)).collect();
        let split = |p: &[f64]| {
            vec![
                Tensor::new([3, 4], p[..12].to_vec()).unwrap(),
                Tensor::new([2, 2], p[12..].to_vec()).unwrap(),
            ]
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = split(&params).into_iter().map(|t| tape.param(t)).collect();
        let loss = focal_loss_on_tape(&mut tape, &vars, &targets, &FocalParams::default()).unwrap();
        let grads = tape.backward(loss).unwrap();
        let analytic: Vec<f64> = vars
            .iter()
            .flat_map(|&v| grads.get(v).unwrap().data().to_vec())
            .collect();
        let f = |p: &[f64]| salience_focal_loss(&split(p), &targets, &FocalParams::default()).unwrap();
        let probes: Vec<usize> = (0..16).collect();
        let err = finite_difference_check(f, &params, &analytic, &probes, 1e-5);
        assert!(err < 1e-4, "err = {err}");
    }

    #[test]
    fn pgm_layout() {
        let m = Tensor::new([2, 3], vec![0.0, 0.5, 1.0, 1.5, -1.0, 0.25]).unwrap();
        let bytes = heatmap_pgm(&m).unwrap();
        let header = b"P5\n3 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[0, 128, 255, 255, 0, 64]);
    }

    proptest! {
        #[test]
        fn scale_independent(
            w1 in 4u32..=512, h1 in 4u32..=512,
            w2 in 4u32..=512, h2 in 4u32..=512,
            ku in -512i32..=512, kv in -512i32..=512,
        ) {
            // dyadic offsets times integer sizes are exact, so both points see
            // bit-identical normalized offsets
            let (u, v) = (ku as f64 / 1024.0, kv as f64 / 1024.0);
            let (w1, h1, w2, h2) = (w1 as f64, h1 as f64, w2 as f64, h2 as f64);
            let b1 = bx(100.0, 200.0, w1, h1);
            let b2 = bx(-30.0, 7.0, w2, h2);
            let p1 = (b1.cx + u * w1, b1.cy + v * h1);
            let p2 = (b2.cx + u * w2, b2.cy + v * h2);
            prop_assert_eq!(salience_confidence(p1, &b1), salience_confidence(p2, &b2));
        }

        #[test]
        fn monotone_along_rays(angle in 0.0..std::f64::consts::TAU, w in 1.0..100.0f64, h in 1.0..100.0f64) {
            let b = bx(0.0, 0.0, w, h);
            let mut prev = f64::INFINITY;
            for k in 0..=50 {
                let r = k as f64 / 50.0 * 0.5;
                let v = salience_confidence((r * w * angle.cos(), r * h * angle.sin()), &b);
                prop_assert!(v <= prev + 1e-15);
                prop_assert!((0.0..=1.0).contains(&v));
                prev = v;
            }
        }
    }
}
