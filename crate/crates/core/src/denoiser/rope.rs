//! Rotary position embedding factorized over (temporal, row, column).
//!
//! The head dimension is cut into three contiguous groups, one per axis.
//! Inside a group, consecutive pairs `(2i, 2i+1)` are rotated by
//! `position × base^(-2i/group)`. Dimensions past the three groups are left
//! untouched.

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::tensor::Tensor;

/// Sizes of the temporal, row, and column groups inside one head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RopeSplit {
    pub temporal: usize,
    pub row: usize,
    pub col: usize,
}

impl RopeSplit {
    /// Temporal axis takes `2·⌈d/4⌉` dims (the even share of half the head);
    /// row and column split the rest equally in even sizes.
    pub fn for_head_dim(head_dim: usize) -> Self {
        let temporal = (2 * head_dim.div_ceil(4)).min(head_dim - head_dim % 2);
        let spatial = 2 * ((head_dim - temporal) / 4);
        Self { temporal, row: spatial, col: spatial }
    }

    pub fn validate(&self, head_dim: usize) -> Result<()> {
        for (name, g) in [("temporal", self.temporal), ("row", self.row), ("col", self.col)] {
            if g % 2 != 0 {
                bail!(Config, "rope {name} group has odd size {g}");
            }
        }
        if self.temporal + self.row + self.col > head_dim {
            bail!(Config, "rope groups {:?} exceed head dim {head_dim}", self);
        }
        Ok(())
    }

    pub fn rotated(&self) -> usize {
        self.temporal + self.row + self.col
    }
}

/// Per-token `(temporal, row, column)` indices, frame-major then row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenPositions {
    pub tokens: Vec<[usize; 3]>,
}

impl TokenPositions {
    /// Positions for an arbitrary list of per-frame temporal indices.
    pub fn from_temporal(temporal: &[usize], grid_h: usize, grid_w: usize) -> Self {
        let mut tokens = Vec::with_capacity(temporal.len() * grid_h * grid_w);
        for &t in temporal {
            for r in 0..grid_h {
                for c in 0..grid_w {
                    tokens.push([t, r, c]);
                }
            }
        }
        Self { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Distinct temporal indices in order of appearance.
    pub fn temporal_indices(&self) -> Vec<usize> {
        let mut out: Vec<usize> = Vec::new();
        for t in &self.tokens {
            if out.last() != Some(&t[0]) {
                out.push(t[0]);
            }
        }
        out
    }
}

/// Condition at temporal 0, `reasoning` frames at `1..=reasoning`, target at
/// `anchor` however many reasoning frames are present.
pub fn build_positions(reasoning: usize, anchor: usize, grid_h: usize, grid_w: usize) -> Result<TokenPositions> {
    if reasoning >= anchor {
        bail!(Contract, "reasoning length {reasoning} must be below the target anchor {anchor}");
    }
    let mut temporal: Vec<usize> = (0..=reasoning).collect();
    temporal.push(anchor);
    Ok(TokenPositions::from_temporal(&temporal, grid_h, grid_w))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rope {
    pub head_dim: usize,
    pub split: RopeSplit,
    pub base: f64,
}

impl Rope {
    pub fn new(head_dim: usize, split: RopeSplit, base: f64) -> Result<Self> {
        split.validate(head_dim)?;
        Ok(Self { head_dim, split, base })
    }

    /// Rotation angle of every dimension pair for one token; unrotated
    /// trailing dimensions get angle 0.
    fn angles(&self, pos: &[usize; 3]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.head_dim / 2);
        for (axis, group) in [self.split.temporal, self.split.row, self.split.col].into_iter().enumerate() {
            for i in 0..group / 2 {
                let freq = self.base.powf(-2.0 * i as f64 / group as f64);
                out.push(pos[axis] as f64 * freq);
            }
        }
        out.resize(self.head_dim / 2, 0.0);
        out
    }

    /// `[n, head_dim]` cosine and sine tables, each value duplicated across
    /// its pair. An odd trailing dimension gets cos 1, sin 0.
    pub fn tables(&self, positions: &TokenPositions) -> Result<(Tensor, Tensor)> {
        let n = positions.len();
        let d = self.head_dim;
        let mut cos = vec![1.0; n * d];
        let mut sin = vec![0.0; n * d];
        for (t, pos) in positions.tokens.iter().enumerate() {
            for (i, a) in self.angles(pos).into_iter().enumerate() {
                let (s, c) = a.sin_cos();
                cos[t * d + 2 * i] = c;
                cos[t * d + 2 * i + 1] = c;
                sin[t * d + 2 * i] = s;
                sin[t * d + 2 * i + 1] = s;
            }
        }
        Ok((Tensor::new([n, d], cos)?, Tensor::new([n, d], sin)?))
    }

    /// `[head_dim, head_dim]` matrix `P` with `(x·P)[2i] = -x[2i+1]` and
    /// `(x·P)[2i+1] = x[2i]`, so that `x·cos + (x·P)·sin` rotates each pair.
    pub fn pair_swap(&self) -> Tensor {
        let d = self.head_dim;
        let mut p = vec![0.0; d * d];
        for i in 0..d / 2 {
            p[(2 * i + 1) * d + 2 * i] = -1.0;
            p[(2 * i) * d + 2 * i + 1] = 1.0;
        }
        Tensor::new([d, d], p).expect("square")
    }

    /// Rotates `[n, head_dim]` rows by their token positions.
    pub fn apply(&self, x: &Tensor, positions: &TokenPositions) -> Result<Tensor> {
        if x.rank() != 2 || x.shape()[1] != self.head_dim || x.shape()[0] != positions.len() {
            bail!(Dimension, "rope input {:?} does not match {} positions of dim {}", x.shape(), positions.len(), self.head_dim);
        }
        let d = self.head_dim;
        let mut out = x.data().to_vec();
        for (t, pos) in positions.tokens.iter().enumerate() {
            for (i, a) in self.angles(pos).into_iter().enumerate() {
                let (s, c) = a.sin_cos();
                let (x0, x1) = (x.data()[t * d + 2 * i], x.data()[t * d + 2 * i + 1]);
                out[t * d + 2 * i] = x0 * c - x1 * s;
                out[t * d + 2 * i + 1] = x1 * c + x0 * s;
            }
        }
        Tensor::new([positions.len(), d], out)
    }
}

/// Convenience wrapper matching the free-function form.
pub fn apply_rope(rope: &Rope, x: &Tensor, positions: &TokenPositions) -> Result<Tensor> {
    rope.apply(x, positions)
}
