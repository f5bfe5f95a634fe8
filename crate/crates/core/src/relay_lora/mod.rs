//! Low-rank adapters, merge/strip algebra and the two-stage relay.
//!
//! Stage 1 adapts the base `W0` at low resolution; its adapter is merged
//! and frozen. Stage 2 trains a second adapter on top of the merged weights
//! at high resolution. Inference loads only the second adapter onto the
//! untouched `W0`.

mod protocol;
mod vbcp;

pub use protocol::{relay_protocol, train_stage1, train_stage2, RelayOutcome};
pub use vbcp::{inspect, Checkpoint, MAGIC, VERSION};
pub use vbcp::write_atomic;

use crate::{Error, Result, Rng, Tensor};

/// Metadata keys written by the algebra below.
pub mod meta {
    pub const STAGE: &str = "stage";
    pub const LORA_RANK: &str = "lora_rank";
    pub const LORA_ALPHA: &str = "lora_alpha";
    /// Net number of adapter sets merged into the weights.
    pub const MERGE_DEPTH: &str = "lora_merge_depth";
    /// `;`-separated log of merge/strip operations.
    pub const PROVENANCE: &str = "lora_provenance";
}

pub const LORA_A: &str = "lora_A";
pub const LORA_B: &str = "lora_B";

#[derive(Clone, Debug, PartialEq)]
pub struct LoRAAdapter {
    pub target: String,
    /// `[r, d_in]`
    pub a: Tensor,
    /// `[d_out, r]`
    pub b: Tensor,
    pub alpha: f64,
}

impl LoRAAdapter {
    pub fn new(target: impl Into<String>, a: Tensor, b: Tensor, alpha: f64) -> Result<Self> {
        let adapter = LoRAAdapter { target: target.into(), a, b, alpha };
        adapter.check()?;
        Ok(adapter)
    }

    /// `A ~ N(0, 1/r)`, `B = 0`: the adapter starts as an exact no-op.
    pub fn init(target: impl Into<String>, d_out: usize, d_in: usize, rank: usize, alpha: f64, rng: &mut Rng) -> Result<Self> {
        if rank == 0 {
            return Err(Error::contract("LoRA rank must be positive"));
        }
        let a = rng.gaussian([rank, d_in], 1.0 / (rank as f64).sqrt());
        Self::new(target, a, Tensor::zeros([d_out, rank]), alpha)
    }

    fn check(&self) -> Result<()> {
        let (r, d_in) = self.a.dims2()?;
        let (d_out, rb) = self.b.dims2()?;
        if r != rb {
            return Err(Error::shape(format!(
                "{}: A is {r}x{d_in} but B is {d_out}x{rb}",
                self.target
            )));
        }
        if r == 0 || r > d_in.min(d_out) {
            return Err(Error::contract(format!(
                "{}: rank {r} must lie in 1..={}",
                self.target,
                d_in.min(d_out)
            )));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::contract(format!("{}: alpha must be positive, got {}", self.target, self.alpha)));
        }
        Ok(())
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    /// `[d_out, d_in]` of the weight this adapter modifies.
    pub fn target_shape(&self) -> [usize; 2] {
        [self.b.shape()[0], self.a.shape()[1]]
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    /// `(α/r)·B·A`.
    pub fn delta(&self) -> Result<Tensor> {
        self.check()?;
        Ok(self.b.matmul(&self.a)?.scale(self.scale()))
    }

    /// Same adapter with `B` negated, so its delta is the additive inverse.
    pub fn negated(&self) -> Self {
        LoRAAdapter { b: self.b.scale(-1.0), ..self.clone() }
    }

    pub fn factor_names(&self) -> (String, String) {
        (format!("{}.{LORA_A}", self.target), format!("{}.{LORA_B}", self.target))
    }
}

/// Packs adapters as `<target>.lora_A` / `<target>.lora_B` tensors.
pub fn adapters_to_checkpoint(adapters: &[LoRAAdapter], stage: &str) -> Result<Checkpoint> {
    let mut ckpt = Checkpoint::new();
    for ad in adapters {
        ad.check()?;
        let (a, b) = ad.factor_names();
        ckpt.insert(a, ad.a.clone())?;
        ckpt.insert(b, ad.b.clone())?;
    }
    if let Some(first) = adapters.first() {
        if adapters.iter().any(|a| a.rank() != first.rank() || a.alpha != first.alpha) {
            return Err(Error::contract("all adapters in one file must share rank and alpha"));
        }
        ckpt.set_meta(meta::LORA_RANK, first.rank().to_string());
        ckpt.set_meta(meta::LORA_ALPHA, format_real(first.alpha));
    }
    ckpt.set_meta(meta::STAGE, stage);
    Ok(ckpt)
}

/// Inverse of [`adapters_to_checkpoint`].
pub fn adapters_from_checkpoint(ckpt: &Checkpoint) -> Result<Vec<LoRAAdapter>> {
    let alpha = match ckpt.meta(meta::LORA_ALPHA) {
        Some(s) => s
            .parse::<f64>()
            .map_err(|_| Error::Format(format!("bad lora_alpha `{s}`")))?,
        None if ckpt.is_empty() => return Ok(Vec::new()),
        None => return Err(Error::Format("adapter file lacks lora_alpha metadata".into())),
    };
    let suffix_a = format!(".{LORA_A}");
    let mut out = Vec::new();
    for name in ckpt.names() {
        let Some(target) = name.strip_suffix(&suffix_a) else {
            if !name.ends_with(&format!(".{LORA_B}")) {
                return Err(Error::Format(format!("`{name}` is not a LoRA factor")));
            }
            continue;
        };
        let b_name = format!("{target}.{LORA_B}");
        let b = ckpt
            .get(&b_name)
            .ok_or_else(|| Error::Format(format!("`{name}` has no matching `{b_name}`")))?;
        out.push(LoRAAdapter::new(target, ckpt.require(name)?.clone(), b.clone(), alpha)?);
    }
    if 2 * out.len() != ckpt.len() {
        return Err(Error::Format("unpaired LoRA factors".into()));
    }
    if let Some(r) = ckpt.meta(meta::LORA_RANK) {
        if out.iter().any(|a| a.rank().to_string() != r) {
            return Err(Error::Format(format!("factor ranks disagree with lora_rank={r}")));
        }
    }
    Ok(out)
}

fn format_real(v: f64) -> String {
    // `{}` on f64 prints the shortest string that round-trips.
    format!("{v}")
}

/// Delta rounded onto the f32 storage grid.
///
/// Weights that live on that grid (anything loaded from a checkpoint file)
/// then add and subtract it without rounding, which makes strip an exact
/// inverse of merge.
fn storage_delta(adapter: &LoRAAdapter) -> Result<Tensor> {
    Ok(adapter.delta()?.map(|v| v as f32 as f64))
}

fn check_target<'a>(ckpt: &'a Checkpoint, adapter: &LoRAAdapter) -> Result<&'a Tensor> {
    let w = ckpt.require(&adapter.target)?;
    let want = adapter.target_shape();
    if w.shape() != want {
        return Err(Error::shape(format!(
            "{}: weight is {:?}, adapter expects {want:?}",
            adapter.target,
            w.shape()
        )));
    }
    Ok(w)
}

fn apply(ckpt: &Checkpoint, adapters: &[LoRAAdapter], sign: f64) -> Result<Checkpoint> {
    let mut out = ckpt.clone();
    for ad in adapters {
        let w = check_target(&out, ad)?;
        let d = storage_delta(ad)?;
        let updated = if sign > 0.0 { w.add(&d)? } else { w.sub(&d)? };
        out.replace(&ad.target, updated)?;
    }
    Ok(out)
}

fn log_op(ckpt: &mut Checkpoint, op: &str, adapters: &[LoRAAdapter], depth_step: i64) {
    let depth: i64 = ckpt.meta(meta::MERGE_DEPTH).and_then(|s| s.parse().ok()).unwrap_or(0);
    ckpt.set_meta(meta::MERGE_DEPTH, (depth + depth_step).max(0).to_string());
    let targets: Vec<&str> = adapters.iter().map(|a| a.target.as_str()).collect();
    let entry = format!("{op}({})", targets.join(","));
    let log = match ckpt.meta(meta::PROVENANCE) {
        Some(prev) if !prev.is_empty() => format!("{prev};{entry}"),
        _ => entry,
    };
    ckpt.set_meta(meta::PROVENANCE, log);
}

/// `W1 = W0 + Σ delta`, touching only targeted tensors.
pub fn merge(base: &Checkpoint, adapters: &[LoRAAdapter]) -> Result<Checkpoint> {
    if adapters.is_empty() {
        return Ok(base.clone());
    }
    let mut out = apply(base, adapters, 1.0)?;
    log_op(&mut out, "merge", adapters, 1);
    out.set_meta(meta::STAGE, "merged");
    Ok(out)
}

/// Subtracts each delta; exact inverse of [`merge`] on storage-grid weights.
pub fn strip(merged: &Checkpoint, adapters: &[LoRAAdapter]) -> Result<Checkpoint> {
    if adapters.is_empty() {
        return Ok(merged.clone());
    }
    let mut out = apply(merged, adapters, -1.0)?;
    log_op(&mut out, "strip", adapters, -1);
    if out.meta(meta::MERGE_DEPTH) == Some("0") {
        out.set_meta(meta::STAGE, "base");
    }
    Ok(out)
}

/// `W_infer = W0 + delta(LoRA2)`. Refuses weights that already carry a
/// merged adapter, since inference must start from the original base.
pub fn compose_inference(base: &Checkpoint, lora2: &[LoRAAdapter]) -> Result<Checkpoint> {
    if let Some(depth) = base.meta(meta::MERGE_DEPTH) {
        if depth != "0" {
            return Err(Error::RelayViolation(format!(
                "base already has {depth} merged adapter set(s); compose onto the original weights"
            )));
        }
    }
    let mut out = apply(base, lora2, 1.0)?;
    let targets: Vec<&str> = lora2.iter().map(|a| a.target.as_str()).collect();
    out.set_meta(meta::STAGE, "inference");
    out.set_meta("inference_targets", targets.join(","));
    Ok(out)
}
