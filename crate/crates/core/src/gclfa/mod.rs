//! Global-coarse / local-fine attention.
//!
//! Each query attends to two sets of keys: the fine tokens inside its
//! inward-shifted local window, and every token of an average-pooled coarse
//! copy of the (RoPE-rotated) keys and values. Two executors compute the same
//! thing: [`gclfa_reference`] materializes the mask and the concatenated
//! key/value sequence; [`gclfa_attention`] walks each query's key rectangle
//! directly, tile by tile.

mod attention;
mod mask;
mod rope;
mod stats;

use serde::{Deserialize, Serialize};

pub use attention::{
    dense_attention_counted, dense_masked_attention, gclfa_attention, gclfa_attention_multihead,
    gclfa_attention_with, gclfa_reference, gclfa_reference_with, record_gclfa, AttentionRow, ExecOptions,
    GclfaOutput, MaskSemantics,
};
pub use mask::{axis_range, build_dense_mask, inward_offset, mask_contains};
pub use rope::{apply_rope_2d, RoPEParams, RopeTable};
pub use stats::{mask_stats, MaskStats};

use crate::numcore::{LinearOp, Resample2d};
use crate::{Error, Result, Tensor};

/// Token-grid extents; position of `(x, y)` is `y·w + x`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSize {
    pub h: usize,
    pub w: usize,
}

impl GridSize {
    pub fn new(h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::contract(format!("empty token grid {h}x{w}")));
        }
        Ok(GridSize { h, w })
    }

    pub fn tokens(self) -> usize {
        self.h * self.w
    }

    /// `(x, y)` of a row-major position.
    pub fn coords(self, pos: usize) -> (usize, usize) {
        (pos % self.w, pos / self.w)
    }
}

/// A field of `d`-dimensional tokens laid out as `[h·w, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    size: GridSize,
    tokens: Tensor,
}

impl TokenGrid {
    pub fn new(size: GridSize, tokens: Tensor) -> Result<Self> {
        let (n, d) = tokens.dims2()?;
        if n != size.tokens() {
            return Err(Error::shape(format!("{n} tokens for a {}x{} grid", size.h, size.w)));
        }
        if d == 0 || d % 4 != 0 {
            return Err(Error::contract(format!("token dimension {d} is not divisible by 4")));
        }
        Ok(TokenGrid { size, tokens })
    }

    pub fn size(&self) -> GridSize {
        self.size
    }

    pub fn d(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }
}

/// Native local window, in tokens. Both extents are even.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub h: usize,
    pub w: usize,
}

impl WindowSpec {
    pub fn new(h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::contract(format!("window {h}x{w} must have even positive extents")));
        }
        Ok(WindowSpec { h, w })
    }

    /// A window at least `2·(extent - 1)` wide on both axes, which makes every
    /// local key visible.
    pub fn covering(grid: GridSize) -> Self {
        let even = |n: usize| (2 * n.saturating_sub(1)).max(2);
        WindowSpec { h: even(grid.h), w: even(grid.w) }
    }
}

/// Pooled coarse branch; `pool` is the integer downsampling ratio.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoarseSpec {
    pub pool: usize,
    pub enabled: bool,
}

impl CoarseSpec {
    pub fn new(pool: usize) -> Result<Self> {
        if pool == 0 {
            return Err(Error::contract("pool ratio must be at least 1"));
        }
        Ok(CoarseSpec { pool, enabled: true })
    }

    pub fn disabled() -> Self {
        CoarseSpec { pool: 1, enabled: false }
    }

    pub fn check(self, grid: GridSize) -> Result<()> {
        if self.enabled && (self.pool == 0 || grid.h % self.pool != 0 || grid.w % self.pool != 0) {
            return Err(Error::shape(format!(
                "{}x{} grid is not divisible by pool ratio {}",
                grid.h, grid.w, self.pool
            )));
        }
        Ok(())
    }

    /// Number of coarse tokens for `grid`.
    pub fn coarse_tokens(self, grid: GridSize) -> usize {
        if self.enabled {
            grid.tokens() / (self.pool * self.pool)
        } else {
            0
        }
    }
}

/// Average-pools keys and values over the spatial grid. Pass already
/// rotated keys: rotation happens before pooling.
pub fn pool_kv(k: &TokenGrid, v: &TokenGrid, spec: CoarseSpec) -> Result<(Tensor, Tensor)> {
    if k.size() != v.size() {
        return Err(Error::shape("keys and values live on different grids"));
    }
    spec.check(k.size())?;
    if !spec.enabled {
        return Ok((Tensor::zeros([0, k.d()]), Tensor::zeros([0, v.d()])));
    }
    let op = Resample2d::avg_pool(k.size().h, k.size().w, spec.pool)?;
    Ok((op.apply(k.tokens())?, op.apply(v.tokens())?))
}
