//! High-frequency-aware training objective.
//!
//! The clean latent is blurred by a downsample/upsample round trip, noised,
//! and the model is asked to reconstruct the *clean* latent from its
//! velocity prediction via `x̂0 = x_t - t·v`.

use serde::{Deserialize, Serialize};

use crate::flowmatch::{interpolate, Schedule};
use crate::numcore::{Resample2d, Upsample, LinearOp};
use crate::{Error, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DegradationConfig {
    pub factor: usize,
    #[serde(default)]
    pub up: Upsample,
}

impl Default for DegradationConfig {
    fn default() -> Self {
        DegradationConfig { factor: 2, up: Upsample::Nearest }
    }
}

/// How the degraded latent is noised.
///
/// `Interpolated` keeps the schedule's attenuation,
/// `x_t = (1 - t)·x̃0 + t·ε`. `LiteralAdditive` adds the noise on top,
/// `x_t = x̃0 + t·ε`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HfatoVariant {
    #[default]
    Interpolated,
    LiteralAdditive,
}

#[derive(Clone, Debug)]
pub struct HfatoBatch {
    pub x0: Tensor,
    pub x0_deg: Tensor,
    pub eps: Tensor,
    pub t: f64,
    pub xt: Tensor,
    pub variant: HfatoVariant,
}

/// Average-pool by `factor`, then upsample back to the input extents.
pub fn degrade(x0: &Tensor, cfg: &DegradationConfig) -> Result<Tensor> {
    let (h, w, _) = x0.dims_hwc()?;
    if cfg.factor == 0 || h % cfg.factor != 0 || w % cfg.factor != 0 {
        return Err(Error::shape(format!(
            "{h}x{w} latent is not divisible by degradation factor {}",
            cfg.factor
        )));
    }
    if cfg.factor == 1 {
        return Ok(x0.clone());
    }
    let down = Resample2d::avg_pool(h, w, cfg.factor)?.apply(x0)?;
    Resample2d::upsample(h / cfg.factor, w / cfg.factor, cfg.factor, cfg.up)?.apply(&down)
}

pub fn hfato_forward(
    x0: &Tensor,
    eps: &Tensor,
    t: f64,
    cfg: &DegradationConfig,
    variant: HfatoVariant,
) -> Result<HfatoBatch> {
    if x0.shape() != eps.shape() {
        return Err(Error::shape(format!("x0 {:?} vs eps {:?}", x0.shape(), eps.shape())));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::contract(format!("time {t} outside [0, 1]")));
    }
    let x0_deg = degrade(x0, cfg)?;
    let xt = match variant {
        HfatoVariant::Interpolated => interpolate(&x0_deg, eps, t, Schedule::Linear)?,
        HfatoVariant::LiteralAdditive => x0_deg.axpy(Schedule::Linear.sigma(t), eps)?,
    };
    Ok(HfatoBatch { x0: x0.clone(), x0_deg, eps: eps.clone(), t, xt, variant })
}

/// `x̂0 = x_t - σ(t)·v`.
pub fn reconstruct_x0(xt: &Tensor, v: &Tensor, t: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::contract(format!("time {t} outside [0, 1]")));
    }
    xt.axpy(-Schedule::Linear.sigma(t), v)
}

/// Mean squared error against the clean latent.
pub fn hfato_loss(x0_hat: &Tensor, x0_clean: &Tensor) -> Result<f64> {
    let d = x0_hat.sub(x0_clean)?;
    Ok(d.data().iter().map(|v| v * v).sum::<f64>() / d.len().max(1) as f64)
}

/// Mean squared response of the 5-point Laplacian over interior pixels.
/// Multi-channel images average over channels as well.
pub fn hf_energy(x: &Tensor) -> Result<f64> {
    let (h, w, c) = x.dims_hwc()?;
    if h < 3 || w < 3 {
        return Err(Error::contract(format!("hf_energy needs at least 3x3 pixels, got {h}x{w}")));
    }
    let px = |y: usize, xx: usize, ch: usize| x.data()[(y * w + xx) * c + ch];
    let mut total = 0.0;
    for y in 1..h - 1 {
        for xx in 1..w - 1 {
            for ch in 0..c {
                let lap = px(y - 1, xx, ch) + px(y + 1, xx, ch) + px(y, xx - 1, ch) + px(y, xx + 1, ch)
                    - 4.0 * px(y, xx, ch);
                total += lap * lap;
            }
        }
    }
    Ok(total / ((h - 2) * (w - 2) * c) as f64)
}
