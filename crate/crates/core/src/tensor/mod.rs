//! Dense row-major `f64` tensors and a reverse-mode tape over them.
//!
//! [`Tensor`] is a plain value. Differentiation happens on a [`Tape`]: leaves
//! are registered with [`Tape::param`] or [`Tape::constant`], every operation
//! appends a node, and [`Tape::backward`] replays the nodes in reverse.

mod gradcheck;
mod params;
mod tape;

pub use gradcheck::{central_difference, finite_difference_check};
pub use params::{BoundParams, ParamStore};
pub use tape::{Gradients, Tape, Var};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{shape_err, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return shape_err("Tensor::new", &shape, &[data.len()]);
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros([n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Contract("ragged rows".into()));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new([rows.len(), cols], data)
    }

    /// Gaussian entries with standard deviation `std`.
    pub fn randn<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, std: f64, rng: &mut R) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self { shape, data }
    }

    pub fn uniform<R: Rng + ?Sized>(
        shape: impl Into<Vec<usize>>,
        lo: f64,
        hi: f64,
        rng: &mut R,
    ) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| rng.random_range(lo..hi)).collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return shape_err("reshape", &self.shape, &shape);
        }
        self.shape = shape;
        Ok(self)
    }

    /// Element of a 2-D tensor.
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }

    /// Element of a 3-D tensor.
    pub fn at3(&self, c: usize, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 3);
        self.data[(c * self.shape[1] + i) * self.shape[2] + j]
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.shape[1];
        &self.data[i * n..(i + 1) * n]
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `[C, H, W]` to `[H*W, C]`: one row per spatial position.
    pub fn chw_to_rows(&self) -> Result<Tensor> {
        let [c, h, w] = dims3(&self.shape, "chw_to_rows")?;
        let hw = h * w;
        let mut data = vec![0.0; c * hw];
        for ch in 0..c {
            for p in 0..hw {
                data[p * c + ch] = self.data[ch * hw + p];
            }
        }
        Tensor::new([hw, c], data)
    }

    /// `[H*W, C]` back to `[C, H, W]`.
    pub fn rows_to_chw(&self, h: usize, w: usize) -> Result<Tensor> {
        let [hw, c] = dims2(&self.shape, "rows_to_chw")?;
        if hw != h * w {
            return shape_err("rows_to_chw", &self.shape, &[h, w]);
        }
        let mut data = vec![0.0; c * hw];
        for p in 0..hw {
            for ch in 0..c {
                data[ch * hw + p] = self.data[p * c + ch];
            }
        }
        Tensor::new([c, h, w], data)
    }
}

pub(crate) fn dims2(shape: &[usize], op: &'static str) -> Result<[usize; 2]> {
    match shape {
        &[a, b] => Ok([a, b]),
        _ => shape_err(op, shape, &[0, 0]),
    }
}

pub(crate) fn dims3(shape: &[usize], op: &'static str) -> Result<[usize; 3]> {
    match shape {
        &[a, b, c] => Ok([a, b, c]),
        _ => shape_err(op, shape, &[0, 0, 0]),
    }
}

/// Source index pair and blend weight for align-corners-false bilinear sampling.
pub(crate) fn bilinear_axis(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of a `[C, H, W]` value, without recording on a tape.
pub fn bilinear_resize(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let y = tape.bilinear_resize(x, out_h, out_w)?;
    Ok(tape.value(y).clone())
}

/// Grouped "same" convolution of a `[C, H, W]` value, without a tape.
pub fn grouped_conv2d(input: &Tensor, kernels: &Tensor, groups: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let k = tape.constant(kernels.clone());
    let y = tape.grouped_conv2d(x, k, groups)?;
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::new([2, 3], vec![0.0; 5]).is_err());
        assert_eq!(Tensor::new([2, 3], vec![0.0; 6]).unwrap().numel(), 6);
    }

    #[test]
    fn chw_rows_roundtrip() {
        let t = Tensor::new([2, 2, 3], (0..12).map(f64::from).collect()).unwrap();
        let rows = t.chw_to_rows().unwrap();
        assert_eq!(rows.shape(), &[6, 2]);
        assert_eq!(rows.row(1), &[1.0, 7.0]);
        assert_eq!(rows.rows_to_chw(2, 3).unwrap(), t);
    }

    #[test]
    fn bilinear_axis_identity() {
        for (d, &(i0, i1, l)) in bilinear_axis(5, 5).iter().enumerate() {
            assert_eq!(i0, d);
            assert!(i1 == d + 1 || i1 == 4);
            assert_eq!(l, 0.0);
        }
    }
}
