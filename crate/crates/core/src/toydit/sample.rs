use serde::{Deserialize, Serialize};

use super::model::{AttentionMode, ToyDiT};
use crate::flowmatch::{integrate, interpolate, sample_ode, OdeMethod, Schedule};
use crate::numcore::nearest_upsample2d;
use crate::relay_lora::{compose_inference, LoRAAdapter};
use crate::{Error, Result, Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub method: OdeMethod,
    pub steps: usize,
    /// Time the refinement pass restarts from.
    pub denoising_strength: f64,
    /// Recorded for completeness; the toy model has no conditioning, so
    /// guidance has nothing to act on.
    pub guidance_scale: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { method: OdeMethod::Euler, steps: 50, denoising_strength: 0.7, guidance_scale: 5.0 }
    }
}

impl SamplerConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.steps == 0 {
            out.push("sampler.steps must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.denoising_strength) {
            out.push(format!("sampler.denoising_strength = {} must lie in [0, 1]", self.denoising_strength));
        }
        if !self.guidance_scale.is_finite() {
            out.push("sampler.guidance_scale must be finite".into());
        }
        out
    }

    /// Steps spent integrating from `denoising_strength` down to 0.
    pub fn refine_steps(&self) -> usize {
        (self.steps as f64 * self.denoising_strength).round() as usize
    }
}

#[derive(Clone, Debug)]
pub struct CoarseToFine {
    pub low_res: Tensor,
    /// `low_res` nearest-upsampled to the target grid, before re-noising.
    pub upsampled: Tensor,
    pub high_res: Tensor,
}

const LOW_NOISE_STREAM: u64 = 0;
const RENOISE_STREAM: u64 = 1;

/// Draws one `[h, w]` sample from pure noise.
pub fn sample(model: &ToyDiT, h: usize, w: usize, seed: u64, cfg: &SamplerConfig) -> Result<Tensor> {
    let noise = Rng::with_stream(seed, LOW_NOISE_STREAM).gaussian([h, w], 1.0);
    sample_ode(model, &noise, cfg.steps, cfg.method)
}

/// Low-resolution generation with the base model (dense attention), nearest
/// upsampling by `scale`, re-noising to `denoising_strength`, then
/// refinement with `base + LoRA2` in GCLFA mode.
pub fn coarse_to_fine_sample(
    base: &ToyDiT,
    lora2: &[LoRAAdapter],
    prompt_seed: u64,
    low_hw: (usize, usize),
    scale: usize,
    cfg: &SamplerConfig,
) -> Result<CoarseToFine> {
    let problems = cfg.problems();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let low_model = base.with_attention(AttentionMode::Dense);
    let low_res = sample(&low_model, low_hw.0, low_hw.1, prompt_seed, cfg)?;
    let upsampled = nearest_upsample2d(&low_res, scale)?;

    let refine = cfg.refine_steps();
    if refine == 0 {
        return Ok(CoarseToFine { low_res, high_res: upsampled.clone(), upsampled });
    }
    let high_model = base
        .with_weights(compose_inference(base.weights(), lora2)?)?
        .with_attention(AttentionMode::Gclfa);
    let (h, w) = upsampled.dims2()?;
    let eps = Rng::with_stream(prompt_seed, RENOISE_STREAM).gaussian([h, w], 1.0);
    let t0 = cfg.denoising_strength;
    let start = interpolate(&upsampled, &eps, t0, Schedule::Linear)?;
    let high_res = integrate(&high_model, &start, t0, refine, cfg.method)?;
    Ok(CoarseToFine { low_res, upsampled, high_res })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toydit::DitConfig;

    #[test]
    fn full_strength_restarts_from_pure_noise() {
        let cfg = DitConfig { d: 8, window: crate::gclfa::WindowSpec { h: 2, w: 2 }, ..DitConfig::default() };
        let base = ToyDiT::init(cfg, &mut Rng::new(7)).unwrap();
        let s1 = SamplerConfig { steps: 4, denoising_strength: 1.0, ..Default::default() };
        let out = coarse_to_fine_sample(&base, &[], 3, (2, 2), 2, &s1).unwrap();
        let eps = Rng::with_stream(3, RENOISE_STREAM).gaussian([4, 4], 1.0);
        let expect = integrate(&base.with_attention(AttentionMode::Gclfa), &eps, 1.0, 4, OdeMethod::Euler).unwrap();
        assert_eq!(out.high_res, expect);
    }

    #[test]
    fn refine_steps_round() {
        assert_eq!(SamplerConfig::default().refine_steps(), 35);
        let c = SamplerConfig { steps: 3, denoising_strength: 0.5, ..Default::default() };
        assert_eq!(c.refine_steps(), 2);
    }
}
