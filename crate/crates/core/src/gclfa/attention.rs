use std::sync::Arc;

use super::mask::{axis_count, axis_range, build_dense_mask};
use super::{pool_kv, CoarseSpec, GridSize, RoPEParams, RopeTable, TokenGrid, WindowSpec};
use crate::numcore::{softmax_in_place, LinearOp, Resample2d};
use crate::par::{self, Execution};
use crate::{Error, Result, Tape, Tensor, Var};

/// How the 0/1 local mask enters the softmax.
///
/// `Additive` excludes masked keys with `-inf` logits. `Multiplicative`
/// multiplies the logits by the mask, so masked keys still receive weight
/// `e^0`; it exists only for comparison.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MaskSemantics {
    #[default]
    Additive,
    Multiplicative,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ExecOptions {
    pub exec: Execution,
    /// Keep every query's sparse attention weights (debugging).
    pub record_weights: bool,
}

/// Attention weights of one query over the concatenated sequence: indices
/// below `N` are local keys, `N + j` is coarse token `j`.
#[derive(Clone, Debug)]
pub struct AttentionRow {
    pub keys: Vec<usize>,
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct GclfaOutput {
    pub out: Tensor,
    /// Multiply-accumulates performed: one per score element, one per
    /// weighted-sum element.
    pub maccs: u64,
    pub rows: Option<Vec<AttentionRow>>,
}

/// `softmax(Q·Kᵀ/√d + logmask)·V`, fully dense.
pub fn dense_masked_attention(q: &Tensor, k: &Tensor, v: &Tensor, logmask: &Tensor) -> Result<Tensor> {
    Ok(dense_attention_counted(q, k, v, Some(logmask))?.0)
}

/// Dense attention that also reports its multiply-accumulate count.
pub fn dense_attention_counted(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    logmask: Option<&Tensor>,
) -> Result<(Tensor, u64)> {
    let (n, d) = q.dims2()?;
    let (m, dk) = k.dims2()?;
    let (mv, dv) = v.dims2()?;
    if d != dk || m != mv {
        return Err(Error::shape(format!(
            "attention shapes q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let mut scores = q.matmul(&k.transpose()?)?.scale(1.0 / (d as f64).sqrt());
    if let Some(mask) = logmask {
        if mask.shape() != [n, m] {
            return Err(Error::shape(format!("log-mask {:?} for [{n}, {m}] scores", mask.shape())));
        }
        scores = scores.add(mask)?;
    }
    let out = scores.softmax_lastdim()?.matmul(v)?;
    Ok((out, (n * m * (d + dv)) as u64))
}

fn check_inputs(q: &TokenGrid, k: &TokenGrid, v: &TokenGrid, coarse: CoarseSpec) -> Result<()> {
    if q.size() != k.size() || q.size() != v.size() {
        return Err(Error::shape("q, k and v live on different grids"));
    }
    if q.d() != k.d() {
        return Err(Error::shape(format!("query dim {} vs key dim {}", q.d(), k.d())));
    }
    coarse.check(q.size())
}

/// `[N, N + C]` additive mask: the local window, then `C` always-visible
/// coarse columns.
pub(crate) fn gclfa_logmask(size: GridSize, win: WindowSpec, coarse_tokens: usize) -> Tensor {
    let n = size.tokens();
    let cols = n + coarse_tokens;
    let mut data = vec![f64::NEG_INFINITY; n * cols];
    for qi in 0..n {
        let (qx, qy) = size.coords(qi);
        let (xl, xh) = axis_range(qx, size.w, win.w);
        let (yl, yh) = axis_range(qy, size.h, win.h);
        let row = &mut data[qi * cols..(qi + 1) * cols];
        for ky in yl..=yh {
            row[ky * size.w + xl..=ky * size.w + xh].fill(0.0);
        }
        row[n..].fill(0.0);
    }
    Tensor::new([n, cols], data).expect("mask extents match")
}

struct Prepared {
    q: Tensor,
    k: Tensor,
    v: Tensor,
    kc: Tensor,
    vc: Tensor,
}

fn prepare(q: &TokenGrid, k: &TokenGrid, v: &TokenGrid, coarse: CoarseSpec, rope: RoPEParams) -> Result<Prepared> {
    check_inputs(q, k, v, coarse)?;
    let table = RopeTable::new(q.size(), q.d(), rope)?;
    let qr = table.apply(q.tokens())?;
    let kr = TokenGrid::new(k.size(), table.apply(k.tokens())?)?;
    let (kc, vc) = pool_kv(&kr, v, coarse)?;
    Ok(Prepared { q: qr, k: kr.tokens, v: v.tokens().clone(), kc, vc })
}

/// Dense reference path: explicit mask, explicit concatenation.
pub fn gclfa_reference(
    q: &TokenGrid,
    k: &TokenGrid,
    v: &TokenGrid,
    win: WindowSpec,
    coarse: CoarseSpec,
    rope: RoPEParams,
) -> Result<Tensor> {
    gclfa_reference_with(q, k, v, win, coarse, rope, MaskSemantics::Additive)
}

pub fn gclfa_reference_with(
    q: &TokenGrid,
    k: &TokenGrid,
    v: &TokenGrid,
    win: WindowSpec,
    coarse: CoarseSpec,
    rope: RoPEParams,
    semantics: MaskSemantics,
) -> Result<Tensor> {
    let p = prepare(q, k, v, coarse, rope)?;
    let size = q.size();
    let n = size.tokens();
    let c = p.kc.shape()[0];
    let kt = Tensor::concat(&[&p.k, &p.kc], 0)?;
    let vt = Tensor::concat(&[&p.v, &p.vc], 0)?;
    let local = build_dense_mask(size, win)?;
    let coarse_cols = Tensor::ones([n, c]);
    let mask01 = Tensor::concat(&[&local, &coarse_cols], 1)?;
    match semantics {
        MaskSemantics::Additive => {
            let logmask = mask01.map(|m| if m == 1.0 { 0.0 } else { f64::NEG_INFINITY });
            dense_masked_attention(&p.q, &kt, &vt, &logmask)
        }
        MaskSemantics::Multiplicative => {
            let scores = p.q.matmul(&kt.transpose()?)?.mul(&mask01)?;
            scores.scale(1.0 / (q.d() as f64).sqrt()).softmax_lastdim()?.matmul(&vt)
        }
    }
}

/// Blocked executor with default options.
pub fn gclfa_attention(
    q: &TokenGrid,
    k: &TokenGrid,
    v: &TokenGrid,
    win: WindowSpec,
    coarse: CoarseSpec,
    rope: RoPEParams,
) -> Result<Tensor> {
    Ok(gclfa_attention_with(q, k, v, win, coarse, rope, ExecOptions::default())?.out)
}

struct TileResult {
    out: Vec<f64>,
    maccs: u64,
    rows: Vec<AttentionRow>,
}

/// Blocked executor: one tile per grid row of queries. All queries in a
/// tile share the key row span; each reads its key columns as one
/// contiguous run, then the coarse block.
pub fn gclfa_attention_with(
    q: &TokenGrid,
    k: &TokenGrid,
    v: &TokenGrid,
    win: WindowSpec,
    coarse: CoarseSpec,
    rope: RoPEParams,
    opts: ExecOptions,
) -> Result<GclfaOutput> {
    let p = prepare(q, k, v, coarse, rope)?;
    let size = q.size();
    let (w, n, d, dv) = (size.w, size.tokens(), q.d(), v.d());
    let c = p.kc.shape()[0];
    let scale = 1.0 / (d as f64).sqrt();
    let (qd, kd, vd, kcd, vcd) = (p.q.data(), p.k.data(), p.v.data(), p.kc.data(), p.vc.data());

    let tile = |y: usize| -> TileResult {
        let (yl, yh) = axis_range(y, size.h, win.h);
        let max_keys = axis_count(y, size.h, win.h) * size.w + c;
        let mut scores = Vec::with_capacity(max_keys);
        let mut keys = Vec::with_capacity(max_keys);
        let mut out = vec![0.0; w * dv];
        let mut rows = Vec::new();
        let mut maccs = 0u64;
        for x in 0..w {
            let (xl, xh) = axis_range(x, size.w, win.w);
            let qi = y * w + x;
            let qrow = &qd[qi * d..(qi + 1) * d];
            scores.clear();
            keys.clear();
            for ky in yl..=yh {
                let run = &kd[(ky * w + xl) * d..(ky * w + xh + 1) * d];
                for (j, krow) in run.chunks_exact(d).enumerate() {
                    scores.push(dot(qrow, krow) * scale);
                    keys.push(ky * w + xl + j);
                }
            }
            for (j, krow) in kcd.chunks_exact(d).enumerate() {
                scores.push(dot(qrow, krow) * scale);
                keys.push(n + j);
            }
            maccs += (scores.len() * d) as u64;
            softmax_in_place(&mut scores).expect("a query always sees itself");

            let orow = &mut out[x * dv..(x + 1) * dv];
            for (&key, &wgt) in keys.iter().zip(&scores) {
                let vrow = if key < n {
                    &vd[key * dv..(key + 1) * dv]
                } else {
                    &vcd[(key - n) * dv..(key - n + 1) * dv]
                };
                for (o, &val) in orow.iter_mut().zip(vrow) {
                    *o += wgt * val;
                }
            }
            maccs += (scores.len() * dv) as u64;
            if opts.record_weights {
                rows.push(AttentionRow { keys: keys.clone(), weights: scores.clone() });
            }
        }
        TileResult { out, maccs, rows }
    };

    let tiles = par::map_indices(opts.exec, size.h, tile);
    let mut data = Vec::with_capacity(n * dv);
    let mut maccs = 0;
    let mut rows = opts.record_weights.then(|| Vec::with_capacity(n));
    for t in tiles {
        data.extend_from_slice(&t.out);
        maccs += t.maccs;
        if let Some(r) = rows.as_mut() {
            r.extend(t.rows);
        }
    }
    Ok(GclfaOutput { out: Tensor::new([n, dv], data)?, maccs, rows })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Independent heads over equal channel slices sharing one mask.
#[allow(clippy::too_many_arguments)]
pub fn gclfa_attention_multihead(
    q: &TokenGrid,
    k: &TokenGrid,
    v: &TokenGrid,
    heads: usize,
    win: WindowSpec,
    coarse: CoarseSpec,
    rope: RoPEParams,
    opts: ExecOptions,
) -> Result<Tensor> {
    if heads == 0 || q.d() % heads != 0 || v.d() % heads != 0 {
        return Err(Error::contract(format!("{heads} heads do not split dims {} / {}", q.d(), v.d())));
    }
    let (dh, dvh) = (q.d() / heads, v.d() / heads);
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let slice = |g: &TokenGrid, width: usize| -> Result<TokenGrid> {
            TokenGrid::new(g.size(), g.tokens().narrow(1, h * width, width)?)
        };
        let o = gclfa_attention_with(
            &slice(q, dh)?,
            &slice(k, dh)?,
            &slice(v, dvh)?,
            win,
            coarse,
            rope,
            ExecOptions { record_weights: false, ..opts },
        )?;
        outs.push(o.out);
    }
    Tensor::concat(&outs.iter().collect::<Vec<_>>(), 1)
}

/// Records the dense reference path on a tape so it can be trained through.
/// `q`, `k`, `v` are `[N, d]` token matrices for `size`.
#[allow(clippy::too_many_arguments)]
pub fn record_gclfa(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    size: GridSize,
    win: WindowSpec,
    coarse: CoarseSpec,
    rope: RoPEParams,
) -> Result<Var> {
    coarse.check(size)?;
    let (_, d) = tape.value(q).dims2()?;
    let table: Arc<dyn LinearOp> = Arc::new(RopeTable::new(size, d, rope)?);
    let qr = tape.apply_linear(q, table.clone())?;
    let kr = tape.apply_linear(k, table)?;
    let (kt, vt) = if coarse.enabled {
        let pool: Arc<dyn LinearOp> = Arc::new(Resample2d::avg_pool(size.h, size.w, coarse.pool)?);
        let kc = tape.apply_linear(kr, pool.clone())?;
        let vc = tape.apply_linear(v, pool)?;
        (tape.concat(&[kr, kc], 0)?, tape.concat(&[v, vc], 0)?)
    } else {
        (kr, v)
    };
    let ktt = tape.transpose(kt)?;
    let raw = tape.matmul(qr, ktt)?;
    let scores = tape.scale(raw, 1.0 / (d as f64).sqrt());
    let masked = tape.add_const(scores, &gclfa_logmask(size, win, coarse.coarse_tokens(size)))?;
    let probs = tape.softmax_lastdim(masked)?;
    tape.matmul(probs, vt)
}
