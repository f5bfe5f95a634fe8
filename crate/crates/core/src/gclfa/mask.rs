//! Inward-shifted sliding-window masks.
//!
//! A query near a border keeps its full window by shifting the window
//! inward, so every query sees the same `(w + 1)·(h + 1)` local keys.

use super::{GridSize, WindowSpec};
use crate::{Error, Result, Tensor};

/// Inward shift `Δ = max(win/2 - q, win/2 + q - extent + 1, 0)`.
pub fn inward_offset(q_coord: usize, extent: usize, win: usize) -> Result<usize> {
    if q_coord >= extent {
        return Err(Error::contract(format!("query coordinate {q_coord} outside extent {extent}")));
    }
    if win % 2 != 0 {
        return Err(Error::contract(format!("window {win} is not even")));
    }
    if win >= extent {
        return Err(Error::contract(format!("window {win} does not fit inside extent {extent}")));
    }
    let half = (win / 2) as i64;
    let (q, n) = (q_coord as i64, extent as i64);
    Ok((half - q).max(half + q - n + 1).max(0) as usize)
}

/// Per-axis offset; windows at least as large as the extent disable the
/// inward shift.
fn axis_offset(q: usize, extent: usize, win: usize) -> usize {
    if win >= extent {
        0
    } else {
        inward_offset(q, extent, win).expect("preconditions checked by caller")
    }
}

/// Inclusive key range `[lo, hi]` visible from `q` along one axis.
///
/// The allowed set `|q - k| <= win/2 + Δ` is always an interval, which is
/// what lets the blocked executor read contiguous key rows.
pub fn axis_range(q: usize, extent: usize, win: usize) -> (usize, usize) {
    let reach = win / 2 + axis_offset(q, extent, win);
    (q.saturating_sub(reach), (q + reach).min(extent - 1))
}

pub(crate) fn axis_count(q: usize, extent: usize, win: usize) -> usize {
    let (lo, hi) = axis_range(q, extent, win);
    hi - lo + 1
}

fn check_point(p: (usize, usize), grid: GridSize) -> Result<()> {
    if p.0 >= grid.w || p.1 >= grid.h {
        return Err(Error::contract(format!(
            "token ({}, {}) outside {}x{} grid",
            p.0, p.1, grid.h, grid.w
        )));
    }
    Ok(())
}

/// Whether query `q = (x, y)` may attend local key `k = (x, y)`.
pub fn mask_contains(q: (usize, usize), k: (usize, usize), grid: GridSize, win: WindowSpec) -> Result<bool> {
    check_point(q, grid)?;
    check_point(k, grid)?;
    let dx = q.0.abs_diff(k.0);
    let dy = q.1.abs_diff(k.1);
    Ok(dx <= win.w / 2 + axis_offset(q.0, grid.w, win.w) && dy <= win.h / 2 + axis_offset(q.1, grid.h, win.h))
}

/// Materializes the `N × N` 0/1 mask with positions `y·W + x`.
pub fn build_dense_mask(grid: GridSize, win: WindowSpec) -> Result<Tensor> {
    let n = grid.tokens();
    let mut data = vec![0.0; n * n];
    for qi in 0..n {
        let q = grid.coords(qi);
        for ki in 0..n {
            if mask_contains(q, grid.coords(ki), grid, win)? {
                data[qi * n + ki] = 1.0;
            }
        }
    }
    Tensor::new([n, n], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(h: usize, w: usize) -> GridSize {
        GridSize::new(h, w).unwrap()
    }

    fn win(h: usize, w: usize) -> WindowSpec {
        WindowSpec::new(h, w).unwrap()
    }

    #[test]
    fn inward_offset_examples() {
        assert_eq!(inward_offset(0, 8, 4).unwrap(), 2);
        assert_eq!(inward_offset(3, 8, 4).unwrap(), 0);
        assert_eq!(inward_offset(7, 8, 4).unwrap(), 2);
    }

    #[test]
    fn inward_offset_contract() {
        assert!(inward_offset(8, 8, 4).is_err());
        assert!(inward_offset(0, 8, 3).is_err());
        assert!(inward_offset(0, 8, 8).is_err());
    }

    #[test]
    fn mask_contains_examples() {
        assert!(mask_contains((0, 0), (4, 4), g(8, 8), win(4, 4)).unwrap());
        assert!(!mask_contains((0, 0), (5, 0), g(8, 8), win(4, 4)).unwrap());
        for q in [(0, 0), (3, 5), (7, 7)] {
            assert!(mask_contains(q, q, g(8, 8), win(4, 4)).unwrap());
        }
    }

    #[test]
    fn dense_mask_rows_are_uniform() {
        let m = build_dense_mask(g(8, 8), win(4, 4)).unwrap();
        for row in m.data().chunks(64) {
            assert_eq!(row.iter().sum::<f64>(), 25.0);
        }
    }

    #[test]
    fn oversized_window_sees_everything() {
        let m = build_dense_mask(g(5, 6), win(8, 10)).unwrap();
        assert!(m.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn mask_is_asymmetric_near_borders() {
        // 8 x 1 strip: query 0 is shifted inward, query 4 is not
        let m = build_dense_mask(g(1, 8), WindowSpec { h: 2, w: 4 }).unwrap();
        assert_eq!(m.get(&[0, 4]).unwrap(), 1.0);
        assert_eq!(m.get(&[4, 0]).unwrap(), 0.0);
    }

    #[test]
    fn ranges_agree_with_mask() {
        let grid = g(7, 10);
        let w = win(4, 6);
        for qi in 0..grid.tokens() {
            let (qx, qy) = grid.coords(qi);
            let (xl, xh) = axis_range(qx, grid.w, w.w);
            let (yl, yh) = axis_range(qy, grid.h, w.h);
            for ki in 0..grid.tokens() {
                let (kx, ky) = grid.coords(ki);
                let inside = (xl..=xh).contains(&kx) && (yl..=yh).contains(&ky);
                assert_eq!(inside, mask_contains((qx, qy), (kx, ky), grid, w).unwrap());
            }
        }
    }
}
