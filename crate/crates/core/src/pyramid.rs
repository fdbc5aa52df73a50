use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::GridPos;
use crate::tensor::Tensor;

/// Image size, per-level strides (fine to coarse) and channel width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PyramidSpec {
    pub image_size: usize,
    pub strides: Vec<usize>,
    pub channels: usize,
}

impl Default for PyramidSpec {
    fn default() -> Self {
        Self {
            image_size: 256,
            strides: vec![8, 16, 32, 64],
            channels: 16,
        }
    }
}

impl PyramidSpec {
    pub fn validate(&self) -> Result<()> {
        if self.strides.is_empty() || self.strides.contains(&0) {
            return Err(Error::Config(format!("invalid strides {:?}", self.strides)));
        }
        if self.image_size == 0 || self.channels == 0 {
            return Err(Error::Config("image size and channels must be positive".into()));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.strides.len()
    }

    /// `(H_l, W_l)` per level; sizes round up.
    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.strides
            .iter()
            .map(|&s| {
                let n = self.image_size.div_ceil(s);
                (n, n)
            })
            .collect()
    }

    pub fn num_queries(&self) -> usize {
        self.shapes().iter().map(|(h, w)| h * w).sum()
    }
}

/// Multi-scale features, one `[C, H_l, W_l]` tensor per level, fine to coarse.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
    pub strides: Vec<usize>,
}

impl FeaturePyramid {
    pub fn new(levels: Vec<Tensor>, strides: Vec<usize>) -> Result<Self> {
        if levels.len() != strides.len() || levels.is_empty() {
            return Err(Error::Config(format!(
                "{} feature levels but {} strides",
                levels.len(),
                strides.len()
            )));
        }
        let channels = levels[0].shape().first().copied().unwrap_or(0);
        for l in &levels {
            if l.shape().len() != 3 || l.shape()[0] != channels {
                return Err(Error::Shape {
                    op: "FeaturePyramid::new",
                    lhs: levels[0].shape().to_vec(),
                    rhs: l.shape().to_vec(),
                });
            }
        }
        Ok(Self { levels, strides })
    }

    pub fn channels(&self) -> usize {
        self.levels[0].shape()[0]
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.levels
            .iter()
            .map(|t| (t.shape()[1], t.shape()[2]))
            .collect()
    }

    pub fn num_queries(&self) -> usize {
        self.shapes().iter().map(|(h, w)| h * w).sum()
    }
}

/// Maps between flat query indices (level-major, row-major within a level)
/// and grid positions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QueryLayout {
    shapes: Vec<(usize, usize)>,
    offsets: Vec<usize>,
}

impl QueryLayout {
    pub fn new(shapes: &[(usize, usize)]) -> Self {
        let mut offsets = Vec::with_capacity(shapes.len() + 1);
        let mut acc = 0;
        for &(h, w) in shapes {
            offsets.push(acc);
            acc += h * w;
        }
        offsets.push(acc);
        Self {
            shapes: shapes.to_vec(),
            offsets,
        }
    }

    pub fn total(&self) -> usize {
        *self.offsets.last().expect("sentinel offset")
    }

    pub fn offset(&self, level: usize) -> usize {
        self.offsets[level]
    }

    pub fn shapes(&self) -> &[(usize, usize)] {
        &self.shapes
    }

    pub fn flat(&self, pos: GridPos) -> usize {
        self.offsets[pos.level] + pos.i * self.shapes[pos.level].1 + pos.j
    }

    pub fn pos(&self, flat: usize) -> GridPos {
        let level = self.offsets.partition_point(|&o| o <= flat) - 1;
        let local = flat - self.offsets[level];
        let w = self.shapes[level].1;
        GridPos::new(level, local / w, local % w)
    }
}
