//! Axial 2D rotary position embedding.
//!
//! The first `d/2` channels rotate with the token's x coordinate and the last
//! `d/2` with its y coordinate. Within each half, pair `(2i, 2i+1)` rotates
//! with frequency `base^(-2i/(d/2))`.

use serde::{Deserialize, Serialize};

use super::{GridSize, TokenGrid};
use crate::numcore::LinearOp;
use crate::{Error, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoPEParams {
    pub base: f64,
}

impl Default for RoPEParams {
    fn default() -> Self {
        RoPEParams { base: 10_000.0 }
    }
}

impl RoPEParams {
    fn check_dim(d: usize) -> Result<()> {
        if d == 0 || d % 4 != 0 {
            return Err(Error::contract(format!("axial RoPE needs d divisible by 4, got {d}")));
        }
        Ok(())
    }

    /// Rotation frequencies for one axial half of a `d`-dimensional token.
    pub fn frequencies(&self, d: usize) -> Vec<f64> {
        let half = d / 2;
        (0..half / 2)
            .map(|i| self.base.powf(-(2.0 * i as f64) / half as f64))
            .collect()
    }

    /// Rotates one token located at `(x, y)`.
    pub fn rotate_token(&self, token: &[f64], x: f64, y: f64) -> Result<Vec<f64>> {
        Self::check_dim(token.len())?;
        let freqs = self.frequencies(token.len());
        let mut out = token.to_vec();
        rotate_in_place(&mut out, &freqs, x, y, 1.0);
        Ok(out)
    }
}

fn rotate_in_place(tok: &mut [f64], freqs: &[f64], x: f64, y: f64, sign: f64) {
    let half = tok.len() / 2;
    for (offset, coord) in [(0, x), (half, y)] {
        for (i, &f) in freqs.iter().enumerate() {
            let (s, c) = (sign * coord * f).sin_cos();
            let (a, b) = (tok[offset + 2 * i], tok[offset + 2 * i + 1]);
            tok[offset + 2 * i] = a * c - b * s;
            tok[offset + 2 * i + 1] = a * s + b * c;
        }
    }
}

/// Precomputed rotation for every token of a grid; usable on the tape, where
/// its adjoint is the inverse rotation.
#[derive(Clone, Debug)]
pub struct RopeTable {
    grid: GridSize,
    d: usize,
    /// `[token][axis-half][pair]` cos/sin, flattened.
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RopeTable {
    pub fn new(grid: GridSize, d: usize, params: RoPEParams) -> Result<Self> {
        RoPEParams::check_dim(d)?;
        let freqs = params.frequencies(d);
        let per_token = 2 * freqs.len();
        let mut cos = Vec::with_capacity(grid.tokens() * per_token);
        let mut sin = Vec::with_capacity(grid.tokens() * per_token);
        for t in 0..grid.tokens() {
            let (x, y) = grid.coords(t);
            for coord in [x as f64, y as f64] {
                for &f in &freqs {
                    let (s, c) = (coord * f).sin_cos();
                    cos.push(c);
                    sin.push(s);
                }
            }
        }
        Ok(RopeTable { grid, d, cos, sin })
    }

    fn rotate(&self, x: &Tensor, sign: f64) -> Result<Tensor> {
        let (n, d) = x.dims2()?;
        if n != self.grid.tokens() || d != self.d {
            return Err(Error::shape(format!(
                "RoPE table for [{}, {}] applied to [{n}, {d}]",
                self.grid.tokens(),
                self.d
            )));
        }
        let pairs = d / 2;
        let mut out = x.data().to_vec();
        for (t, tok) in out.chunks_mut(d).enumerate() {
            for p in 0..pairs {
                let (c, s) = (self.cos[t * pairs + p], sign * self.sin[t * pairs + p]);
                let (a, b) = (tok[2 * p], tok[2 * p + 1]);
                tok[2 * p] = a * c - b * s;
                tok[2 * p + 1] = a * s + b * c;
            }
        }
        Tensor::new([n, d], out)
    }
}

impl LinearOp for RopeTable {
    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        self.rotate(x, 1.0)
    }

    fn adjoint(&self, g: &Tensor) -> Result<Tensor> {
        self.rotate(g, -1.0)
    }
}

pub fn apply_rope_2d(grid: &TokenGrid, params: RoPEParams) -> Result<TokenGrid> {
    let table = RopeTable::new(grid.size(), grid.d(), params)?;
    TokenGrid::new(grid.size(), table.apply(grid.tokens())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Rng;

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn origin_token_is_unchanged() {
        let mut rng = Rng::new(0);
        let grid = TokenGrid::new(GridSize::new(3, 3).unwrap(), rng.gaussian([9, 8], 1.0)).unwrap();
        let r = apply_rope_2d(&grid, RoPEParams::default()).unwrap();
        assert_eq!(r.tokens().data()[..8], grid.tokens().data()[..8]);
    }

    #[test]
    fn rotation_preserves_norms() {
        let mut rng = Rng::new(1);
        let grid = TokenGrid::new(GridSize::new(4, 5).unwrap(), rng.gaussian([20, 16], 1.0)).unwrap();
        let r = apply_rope_2d(&grid, RoPEParams::default()).unwrap();
        for (a, b) in grid.tokens().data().chunks(16).zip(r.tokens().data().chunks(16)) {
            assert!((dot(a, a).sqrt() - dot(b, b).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn scores_depend_only_on_relative_offset() {
        let mut rng = Rng::new(2);
        let p = RoPEParams::default();
        for _ in 0..5 {
            let q = rng.gaussian([8], 1.0);
            let k = rng.gaussian([8], 1.0);
            let (x1, x2) = (rng.below(6) as f64, rng.below(6) as f64);
            let base = dot(
                &p.rotate_token(q.data(), x1, 0.0).unwrap(),
                &p.rotate_token(k.data(), x2, 0.0).unwrap(),
            );
            for c in 0..=5 {
                let c = c as f64;
                let shifted = dot(
                    &p.rotate_token(q.data(), x1 + c, 0.0).unwrap(),
                    &p.rotate_token(k.data(), x2 + c, 0.0).unwrap(),
                );
                assert!((base - shifted).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rejects_dims_not_divisible_by_four() {
        assert!(RoPEParams::default().rotate_token(&[0.0; 6], 1.0, 1.0).is_err());
        assert!(RopeTable::new(GridSize::new(2, 2).unwrap(), 10, RoPEParams::default()).is_err());
    }

    #[test]
    fn table_matches_per_token_rotation() {
        let mut rng = Rng::new(3);
        let size = GridSize::new(3, 4).unwrap();
        let x = rng.gaussian([12, 8], 1.0);
        let table = RopeTable::new(size, 8, RoPEParams::default()).unwrap();
        let r = table.apply(&x).unwrap();
        for t in 0..12 {
            let (cx, cy) = size.coords(t);
            let one = RoPEParams::default()
                .rotate_token(&x.data()[t * 8..(t + 1) * 8], cx as f64, cy as f64)
                .unwrap();
            for (a, b) in one.iter().zip(&r.data()[t * 8..(t + 1) * 8]) {
                assert!((a - b).abs() < 1e-14);
            }
        }
        let back = table.adjoint(&r).unwrap();
        assert!(back.max_abs_diff(&x).unwrap() < 1e-12);
    }
}
