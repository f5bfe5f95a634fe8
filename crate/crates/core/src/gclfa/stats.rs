use std::collections::BTreeMap;

use serde::Serialize;

use super::mask::axis_count;
use super::{CoarseSpec, GridSize, WindowSpec};
use crate::Result;

/// Exact cost accounting for one attention configuration.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MaskStats {
    pub grid: GridSize,
    pub win: WindowSpec,
    pub pool: usize,
    /// Local-key count → number of queries with that count.
    pub keys_per_query: BTreeMap<usize, usize>,
    /// Mean local keys per query; exactly `(w+1)(h+1)` when the window fits.
    pub local_keys: f64,
    pub coarse_keys: usize,
    /// `2·N²·d`: plain dense attention.
    pub flops_dense: u64,
    /// `2·(Σ local + N·C)·d`.
    pub flops_sparse: u64,
    pub reduction: f64,
}

pub fn mask_stats(grid: GridSize, win: WindowSpec, coarse: CoarseSpec, d: usize) -> Result<MaskStats> {
    coarse.check(grid)?;
    let n = grid.tokens() as u64;
    let c = coarse.coarse_tokens(grid);
    let xs: Vec<usize> = (0..grid.w).map(|x| axis_count(x, grid.w, win.w)).collect();
    let ys: Vec<usize> = (0..grid.h).map(|y| axis_count(y, grid.h, win.h)).collect();

    let mut keys_per_query = BTreeMap::new();
    for &cy in &ys {
        for &cx in &xs {
            *keys_per_query.entry(cx * cy).or_insert(0) += 1;
        }
    }
    let local_total = xs.iter().sum::<usize>() as u64 * ys.iter().sum::<usize>() as u64;
    let d = d as u64;
    let flops_dense = 2 * n * n * d;
    let flops_sparse = 2 * (local_total + n * c as u64) * d;
    Ok(MaskStats {
        grid,
        win,
        pool: if coarse.enabled { coarse.pool } else { 0 },
        keys_per_query,
        local_keys: local_total as f64 / n as f64,
        coarse_keys: c,
        flops_dense,
        flops_sparse,
        reduction: flops_dense as f64 / flops_sparse as f64,
    })
}

impl MaskStats {
    pub const CSV_HEADER: &'static str =
        "grid_h,grid_w,win_h,win_w,s,local_keys,coarse_keys,flops_dense,flops_sparse,reduction";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.grid.h,
            self.grid.w,
            self.win.h,
            self.win.w,
            self.pool,
            self.local_keys,
            self.coarse_keys,
            self.flops_dense,
            self.flops_sparse,
            self.reduction
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(n: usize, win: usize, s: usize) -> MaskStats {
        mask_stats(
            GridSize::new(n, n).unwrap(),
            WindowSpec::new(win, win).unwrap(),
            CoarseSpec::new(s).unwrap(),
            16,
        )
        .unwrap()
    }

    #[test]
    fn eight_by_eight_reduction() {
        let s = stats(8, 4, 2);
        assert_eq!(s.local_keys, 25.0);
        assert_eq!(s.coarse_keys, 16);
        assert_eq!(s.keys_per_query.len(), 1);
        assert_eq!(s.reduction, 64.0 / 41.0);
    }

    #[test]
    fn large_grid_reduction() {
        let s = stats(64, 16, 4);
        assert_eq!(s.local_keys, 289.0);
        assert_eq!(s.coarse_keys, 256);
        assert_eq!(s.reduction, 4096.0 / 545.0);
        assert!((s.reduction - 7.52).abs() < 5e-3);
    }

    #[test]
    fn oversized_window_with_unit_pool_costs_double() {
        let g = GridSize::new(6, 6).unwrap();
        let s = mask_stats(g, WindowSpec::covering(g), CoarseSpec::new(1).unwrap(), 8).unwrap();
        assert_eq!(s.local_keys, 36.0);
        assert_eq!(s.reduction, 0.5);
    }

    #[test]
    fn csv_row_layout() {
        let s = stats(8, 4, 2);
        assert_eq!(s.csv_row(), format!("8,8,4,4,2,25,16,131072,83968,{}", 64.0 / 41.0));
    }
}
