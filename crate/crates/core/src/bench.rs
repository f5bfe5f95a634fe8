//! Timing sweep of the dense masked oracle against the blocked GCLFA
//! executor.

use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::gclfa::{
    gclfa_attention_with, gclfa_reference, mask_stats, CoarseSpec, ExecOptions, GridSize, RoPEParams, TokenGrid,
    WindowSpec,
};
use crate::numcore::Tensor;
use crate::par::{self, Execution};
use crate::{Error, Result, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchPoint {
    pub grid: GridSize,
    pub win: WindowSpec,
    pub pool: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub points: Vec<BenchPoint>,
    /// Channel width of the random Q, K and V.
    pub d: usize,
    pub seed: u64,
    /// Each executor is timed this many times; the fastest run is reported.
    pub repeats: usize,
    /// Worker threads for the blocked executor; 1 runs it sequentially.
    pub threads: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let p = |g: usize, wn: usize, pool: usize| BenchPoint {
            grid: GridSize { h: g, w: g },
            win: WindowSpec { h: wn, w: wn },
            pool,
        };
        BenchConfig {
            points: vec![p(16, 4, 2), p(24, 8, 2), p(32, 8, 4), p(48, 16, 4), p(64, 16, 4)],
            d: 16,
            seed: 0,
            repeats: 3,
            threads: 1,
        }
    }
}

impl BenchConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.points.is_empty() {
            out.push("bench sweep has no points".into());
        }
        if self.d == 0 || self.d % 4 != 0 {
            out.push(format!("bench d = {} must be a positive multiple of 4", self.d));
        }
        if self.repeats == 0 {
            out.push("bench repeats must be at least 1".into());
        }
        if self.threads == 0 {
            out.push("bench threads must be at least 1".into());
        }
        for p in &self.points {
            let tag = format!("{}x{}", p.grid.h, p.grid.w);
            if let Err(e) = GridSize::new(p.grid.h, p.grid.w) {
                out.push(format!("point {tag}: {e}"));
            }
            if let Err(e) = WindowSpec::new(p.win.h, p.win.w) {
                out.push(format!("point {tag}: {e}"));
            }
            match CoarseSpec::new(p.pool) {
                Ok(c) => {
                    if let Err(e) = c.check(p.grid) {
                        out.push(format!("point {tag}: {e}"));
                    }
                }
                Err(e) => out.push(format!("point {tag}: {e}")),
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Executor {
    Dense,
    Blocked,
}

impl fmt::Display for Executor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Executor::Dense => "dense",
            Executor::Blocked => "blocked",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub point: BenchPoint,
    pub executor: Executor,
    /// Seconds, fastest of the repeats.
    pub wall_time: f64,
    pub maccs: u64,
    /// Analytic count from `mask_stats` for the same configuration.
    pub analytic_maccs: u64,
    pub max_abs_err_vs_oracle: f64,
}

impl BenchRow {
    pub const CSV_HEADER: &'static str = "grid,win,s,executor,wall_time,maccs,max_abs_err_vs_oracle";

    pub fn csv_row(&self) -> String {
        let p = &self.point;
        format!(
            "{}x{},{}x{},{},{},{:.6e},{},{:e}",
            p.grid.h, p.grid.w, p.win.h, p.win.w, p.pool, self.executor, self.wall_time, self.maccs,
            self.max_abs_err_vs_oracle
        )
    }
}

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from(BenchRow::CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

fn fastest<T>(repeats: usize, mut f: impl FnMut() -> Result<T>) -> Result<(T, f64)> {
    let mut best = f64::INFINITY;
    let mut last = None;
    for _ in 0..repeats {
        let t0 = Instant::now();
        let r = f()?;
        best = best.min(t0.elapsed().as_secs_f64());
        last = Some(r);
    }
    Ok((last.expect("repeats >= 1"), best))
}

/// Runs the sweep. The dense row times the masked oracle itself, so its
/// error column is zero by construction; its analytic count is the dense
/// product over all `N + C` keys.
pub fn bench_attn(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    let problems = cfg.problems();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let exec = if cfg.threads > 1 { Execution::Parallel } else { Execution::Sequential };
    let rope = RoPEParams::default();
    let mut rows = Vec::with_capacity(2 * cfg.points.len());
    for (i, p) in cfg.points.iter().enumerate() {
        let coarse = CoarseSpec::new(p.pool)?;
        let n = p.grid.tokens();
        let mut rng = Rng::with_stream(cfg.seed, i as u64);
        let mut draw = || TokenGrid::new(p.grid, rng.gaussian([n, cfg.d], 1.0));
        let (q, k, v) = (draw()?, draw()?, draw()?);

        let (oracle, dense_time) = fastest(cfg.repeats, || gclfa_reference(&q, &k, &v, p.win, coarse, rope))?;
        let (blocked, blocked_time) = par::with_threads(cfg.threads, || {
            fastest(cfg.repeats, || {
                gclfa_attention_with(&q, &k, &v, p.win, coarse, rope, ExecOptions { exec, record_weights: false })
            })
        })?;

        let stats = mask_stats(p.grid, p.win, coarse, cfg.d)?;
        let c = stats.coarse_keys as u64;
        let dense_maccs = 2 * (n as u64) * (n as u64 + c) * cfg.d as u64;
        rows.push(BenchRow {
            point: *p,
            executor: Executor::Dense,
            wall_time: dense_time,
            maccs: dense_maccs,
            analytic_maccs: stats.flops_dense + 2 * n as u64 * c * cfg.d as u64,
            max_abs_err_vs_oracle: 0.0,
        });
        rows.push(BenchRow {
            point: *p,
            executor: Executor::Blocked,
            wall_time: blocked_time,
            maccs: blocked.maccs,
            analytic_maccs: stats.flops_sparse,
            max_abs_err_vs_oracle: blocked.out.max_abs_diff(&oracle)?,
        });
    }
    Ok(rows)
}

/// Dense attention over the plain `N` keys, for checking the `flops_dense`
/// formula against a counted run.
pub fn counted_plain_dense(grid: GridSize, d: usize, seed: u64) -> Result<(Tensor, u64)> {
    let mut rng = Rng::new(seed);
    let n = grid.tokens();
    let (q, k, v) = (rng.gaussian([n, d], 1.0), rng.gaussian([n, d], 1.0), rng.gaussian([n, d], 1.0));
    crate::gclfa::dense_attention_counted(&q, &k, &v, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BenchConfig {
        BenchConfig {
            points: vec![
                BenchPoint { grid: GridSize { h: 8, w: 8 }, win: WindowSpec { h: 4, w: 4 }, pool: 2 },
                BenchPoint { grid: GridSize { h: 6, w: 10 }, win: WindowSpec { h: 2, w: 4 }, pool: 1 },
            ],
            d: 8,
            repeats: 1,
            ..BenchConfig::default()
        }
    }

    #[test]
    fn counts_match_formulas_and_outputs_match_oracle() {
        let rows = bench_attn(&small()).unwrap();
        assert_eq!(rows.len(), 4);
        for r in &rows {
            assert_eq!(r.maccs, r.analytic_maccs, "{r:?}");
            assert!(r.max_abs_err_vs_oracle < 1e-9);
        }
        let (_, m) = counted_plain_dense(GridSize { h: 8, w: 8 }, 8, 0).unwrap();
        let s = mask_stats(GridSize { h: 8, w: 8 }, WindowSpec { h: 4, w: 4 }, CoarseSpec::new(2).unwrap(), 8).unwrap();
        assert_eq!(m, s.flops_dense);
    }

    #[test]
    fn csv_has_fixed_columns() {
        let rows = bench_attn(&small()).unwrap();
        let csv = to_csv(&rows);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(BenchRow::CSV_HEADER));
        for line in lines {
            assert_eq!(line.split(',').count(), 7);
            assert!(line.starts_with("8x8,4x4,2,") || line.starts_with("6x10,2x4,1,"));
        }
    }

    #[test]
    fn bad_sweep_is_reported_in_full() {
        let cfg = BenchConfig { d: 6, repeats: 0, ..small() };
        match bench_attn(&cfg).unwrap_err() {
            Error::Config(p) => assert_eq!(p.len(), 2),
            e => panic!("{e}"),
        }
    }
}
