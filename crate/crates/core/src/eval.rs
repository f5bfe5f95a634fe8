//! Paired evaluations of a trained relay: held-out reconstruction error and
//! coarse-to-fine detail gain.

use serde::Serialize;

use crate::config::{DataRole, RunConfig};
use crate::hfato::{hf_energy, hfato_forward, hfato_loss, reconstruct_x0};
use crate::relay_lora::{compose_inference, Checkpoint, LoRAAdapter};
use crate::toydit::{coarse_to_fine_sample, AttentionMode, CoarseToFine, ToyDiT};
use crate::{Result, Rng};

/// Noise levels the reconstruction error is averaged over.
pub const EVAL_TIMES: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PairedError {
    pub index: u64,
    pub base: f64,
    pub adapted: f64,
}

impl PairedError {
    pub fn adapted_wins(&self) -> bool {
        self.adapted < self.base
    }
}

/// Mean clean-latent reconstruction error of the bare base and of
/// `base + LoRA2` on `count` held-out high-resolution samples. Both models
/// run in the second stage's attention mode and see identical degraded,
/// noised inputs.
pub fn held_out_reconstruction(
    cfg: &RunConfig,
    base: &Checkpoint,
    lora2: &[LoRAAdapter],
    count: u64,
) -> Result<Vec<PairedError>> {
    cfg.validate()?;
    let bare = ToyDiT::new(cfg.dit(cfg.objective.stage2_attention), base.clone())?;
    let adapted = bare.with_weights(compose_inference(base, lora2)?)?;
    let data = cfg.dataset(DataRole::HeldOut)?;
    let [h, w] = cfg.high_res;
    let deg = cfg.hfato.degradation();
    let noise_seed = cfg.data_seed(DataRole::HeldOut).wrapping_add(1);

    (0..count)
        .map(|i| {
            let x0 = data.sample(i);
            let mut rng = Rng::with_stream(noise_seed, i);
            let (mut eb, mut ea) = (0.0, 0.0);
            for &t in &EVAL_TIMES {
                let eps = rng.gaussian([h, w], 1.0);
                let b = hfato_forward(&x0, &eps, t, &deg, cfg.hfato.variant)?;
                eb += hfato_loss(&reconstruct_x0(&b.xt, &bare.forward(&b.xt, t)?, t)?, &x0)?;
                ea += hfato_loss(&reconstruct_x0(&b.xt, &adapted.forward(&b.xt, t)?, t)?, &x0)?;
            }
            let k = EVAL_TIMES.len() as f64;
            Ok(PairedError { index: i, base: eb / k, adapted: ea / k })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct DetailGain {
    pub seed: u64,
    pub hf_upsampled: f64,
    pub hf_refined: f64,
    pub result: CoarseToFine,
}

impl DetailGain {
    pub fn gained(&self) -> bool {
        self.hf_refined > self.hf_upsampled
    }
}

/// Runs the coarse-to-fine sampler for each seed and compares the
/// high-frequency energy of the refined output with its upsampled input.
pub fn detail_gain(
    cfg: &RunConfig,
    base: &Checkpoint,
    lora2: &[LoRAAdapter],
    seeds: impl IntoIterator<Item = u64>,
) -> Result<Vec<DetailGain>> {
    cfg.validate()?;
    let model = ToyDiT::new(cfg.dit(AttentionMode::Dense), base.clone())?;
    let [lh, lw] = cfg.low_res;
    seeds
        .into_iter()
        .map(|seed| {
            let result = coarse_to_fine_sample(&model, lora2, seed, (lh, lw), cfg.scale(), &cfg.sampler)?;
            Ok(DetailGain {
                seed,
                hf_upsampled: hf_energy(&result.upsampled)?,
                hf_refined: hf_energy(&result.high_res)?,
                result,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::relay_lora::LoRAAdapter;

    fn tiny() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model.d = 8;
        cfg.low_res = [4, 4];
        cfg.high_res = [8, 8];
        cfg.gclfa.window = [4, 4];
        cfg.lora.rank = 2;
        cfg.lora.alpha = 2.0;
        cfg.sampler.steps = 4;
        cfg
    }

    #[test]
    fn fresh_adapter_ties_with_base() {
        let cfg = tiny();
        let base = ToyDiT::init(cfg.dit(AttentionMode::Dense), &mut Rng::new(0)).unwrap().into_weights();
        let ad = LoRAAdapter::init("blocks.0.attn.q", 8, 8, 2, 2.0, &mut Rng::new(1)).unwrap();
        let r = held_out_reconstruction(&cfg, &base, &[ad], 3).unwrap();
        assert_eq!(r.len(), 3);
        for p in r {
            assert_eq!(p.base, p.adapted);
            assert!(!p.adapted_wins());
        }
    }

    #[test]
    fn detail_gain_is_deterministic() {
        let cfg = tiny();
        let base = ToyDiT::init(cfg.dit(AttentionMode::Dense), &mut Rng::new(0)).unwrap().into_weights();
        let a = detail_gain(&cfg, &base, &[], [0, 1]).unwrap();
        let b = detail_gain(&cfg, &base, &[], [0, 1]).unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(a[1].result.high_res, b[1].result.high_res);
        assert_eq!(a[0].result.high_res.shape(), &[8, 8]);
    }
}
