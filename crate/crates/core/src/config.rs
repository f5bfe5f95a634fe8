//! JSON run configuration.
//!
//! Every field has a default, so a config file only needs the fields it
//! changes. Unknown fields are rejected. [`RunConfig::validate`] checks all
//! cross-module constraints and reports every problem at once.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bench::BenchConfig;
use crate::gclfa::{RoPEParams, WindowSpec};
use crate::hfato::{DegradationConfig, HfatoVariant};
use crate::numcore::Upsample;
use crate::toydit::{
    expand_targets, AdamConfig, AttentionMode, DitConfig, Objective, SamplerConfig, SyntheticDataset, TrainConfig,
    TEXTURE_AMPLITUDE,
};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Directory all outputs go to; `VIBEKIT_OUT` overrides it in the CLI.
    pub output_dir: String,
    pub model: ModelConfig,
    /// `[h, w]` of the first-stage (native) grid.
    pub low_res: [usize; 2],
    /// `[h, w]` of the second-stage grid; an integer multiple of `low_res`.
    pub high_res: [usize; 2],
    pub gclfa: GclfaConfig,
    pub hfato: HfatoConfig,
    pub lora: LoraConfig,
    pub optimizer: AdamConfig,
    pub train: TrainSchedule,
    pub objective: ObjectiveConfig,
    pub sampler: SamplerConfig,
    pub data: DataConfig,
    /// Sweep run by `bench-attn`.
    pub bench: BenchConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub n_layers: usize,
    pub ffn_mult: usize,
    pub rope_base: f64,
    pub time_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let d = DitConfig::default();
        ModelConfig {
            d: d.d,
            n_layers: d.n_layers,
            ffn_mult: d.ffn_mult,
            rope_base: d.rope.base,
            time_scale: d.time_scale,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GclfaConfig {
    /// `[h, w]` local window, both even.
    pub window: [usize; 2],
    /// Coarse-branch pooling ratio.
    pub pool: usize,
}

impl Default for GclfaConfig {
    fn default() -> Self {
        GclfaConfig { window: [8, 8], pool: 2 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HfatoConfig {
    /// Downsample/upsample factor of the degradation.
    pub factor: usize,
    pub up: Upsample,
    pub variant: HfatoVariant,
}

impl Default for HfatoConfig {
    fn default() -> Self {
        let d = DegradationConfig::default();
        HfatoConfig { factor: d.factor, up: d.up, variant: HfatoVariant::default() }
    }
}

impl HfatoConfig {
    pub fn degradation(&self) -> DegradationConfig {
        DegradationConfig { factor: self.factor, up: self.up }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<String>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 4,
            alpha: 4.0,
            targets: ["q", "k", "v", "o", "ffn.0", "ffn.2"].map(String::from).to_vec(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub pretrain_steps: usize,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub batch_size: usize,
    /// Training times are drawn from `U[t_min, t_max]`.
    pub t_min: f64,
    pub t_max: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            pretrain_steps: 800,
            stage1_steps: 300,
            stage2_steps: 500,
            batch_size: 4,
            t_min: 0.02,
            t_max: 0.98,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub stage1: Objective,
    pub stage2: Objective,
    /// Supervise `x̂0` rather than velocity whenever the objective is `fm`.
    pub fm_x0_loss: bool,
    pub stage2_attention: AttentionMode,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            stage1: Objective::Fm,
            stage2: Objective::Hfato,
            fm_x0_loss: false,
            stage2_attention: AttentionMode::Gclfa,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Texture amplitude of the image data used by both relay stages.
    pub texture_amplitude: f64,
    /// Texture amplitude of the data the base model is pretrained on.
    pub base_texture_amplitude: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { texture_amplitude: TEXTURE_AMPLITUDE, base_texture_amplitude: 0.0 }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: "out".into(),
            model: ModelConfig::default(),
            low_res: [8, 8],
            high_res: [16, 16],
            gclfa: GclfaConfig::default(),
            hfato: HfatoConfig::default(),
            lora: LoraConfig::default(),
            optimizer: AdamConfig::default(),
            train: TrainSchedule::default(),
            objective: ObjectiveConfig::default(),
            sampler: SamplerConfig::default(),
            data: DataConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

/// Dataset seeds, one per role, derived from the run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataRole {
    Pretrain,
    Stage1,
    Stage2,
    HeldOut,
}

impl RunConfig {
    /// Rank 32 with `α = r` and learning rate 1e-4. Rank 32 needs
    /// `d ≥ 32`, hence the wider model.
    pub fn wide_preset() -> Self {
        RunConfig {
            model: ModelConfig { d: 64, ..ModelConfig::default() },
            lora: LoraConfig { rank: 32, alpha: 32.0, ..LoraConfig::default() },
            optimizer: AdamConfig { lr: 1e-4, ..AdamConfig::default() },
            ..RunConfig::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))
    }

    /// Reads and validates a config file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg = Self::from_json(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn dit(&self, attention: AttentionMode) -> DitConfig {
        DitConfig {
            d: self.model.d,
            n_layers: self.model.n_layers,
            ffn_mult: self.model.ffn_mult,
            rope: RoPEParams { base: self.model.rope_base },
            time_scale: self.model.time_scale,
            attention,
            window: WindowSpec { h: self.gclfa.window[0], w: self.gclfa.window[1] },
            pool: self.gclfa.pool,
        }
    }

    pub fn data_seed(&self, role: DataRole) -> u64 {
        let tag = match role {
            DataRole::Pretrain => 0x0b,
            DataRole::Stage1 => 0x51,
            DataRole::Stage2 => 0x52,
            DataRole::HeldOut => 0xe7,
        };
        self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ tag
    }

    /// The synthetic dataset for `role`: smooth low-res frames for the base,
    /// textured low-res for the first stage, textured high-res otherwise.
    pub fn dataset(&self, role: DataRole) -> Result<SyntheticDataset> {
        let ([h, w], amp) = match role {
            DataRole::Pretrain => (self.low_res, self.data.base_texture_amplitude),
            DataRole::Stage1 => (self.low_res, self.data.texture_amplitude),
            DataRole::Stage2 | DataRole::HeldOut => (self.high_res, self.data.texture_amplitude),
        };
        SyntheticDataset::with_texture(self.data_seed(role), h, w, amp)
    }

    fn train_config(&self, objective: Objective, steps: usize, tag: u64) -> TrainConfig {
        TrainConfig {
            objective,
            x0_loss: self.objective.fm_x0_loss,
            degradation: self.hfato.degradation(),
            variant: self.hfato.variant,
            steps,
            batch_size: self.train.batch_size,
            optimizer: self.optimizer,
            t_min: self.train.t_min,
            t_max: self.train.t_max,
            seed: self.seed.wrapping_add(tag),
            ..TrainConfig::default()
        }
    }

    pub fn pretrain_config(&self) -> TrainConfig {
        self.train_config(Objective::Fm, self.train.pretrain_steps, 100)
    }

    pub fn stage1_config(&self) -> TrainConfig {
        self.train_config(self.objective.stage1, self.train.stage1_steps, 101)
    }

    pub fn stage2_config(&self) -> TrainConfig {
        self.train_config(self.objective.stage2, self.train.stage2_steps, 102)
    }

    /// Integer factor between the two stage resolutions.
    pub fn scale(&self) -> usize {
        self.high_res[0] / self.low_res[0].max(1)
    }

    /// Every violated constraint, in a stable order.
    pub fn problems(&self) -> Vec<String> {
        let mut out = self.dit(AttentionMode::Gclfa).problems();
        let [lh, lw] = self.low_res;
        let [hh, hw] = self.high_res;
        if lh < 3 || lw < 3 {
            out.push(format!("low_res {lh}x{lw} must be at least 3x3"));
        }
        if lh == 0 || lw == 0 || hh % lh != 0 || hw % lw != 0 || hh / lh.max(1) != hw / lw.max(1) || hh <= lh {
            out.push(format!("high_res {hh}x{hw} must be the same integer multiple (> 1) of low_res {lh}x{lw} on both axes"));
        }
        let [wh, ww] = self.gclfa.window;
        if wh >= 2 * hh.saturating_sub(1).max(1) || ww >= 2 * hw.saturating_sub(1).max(1) {
            out.push(format!("gclfa.window {wh}x{ww} covers the whole {hh}x{hw} grid; nothing would be sparse"));
        }
        let pool = self.gclfa.pool;
        if pool > 0 && (hh % pool != 0 || hw % pool != 0) {
            out.push(format!("high_res {hh}x{hw} is not divisible by gclfa.pool {pool}"));
        }
        let f = self.hfato.factor;
        if f == 0 {
            out.push("hfato.factor must be at least 1".into());
        } else {
            for (name, [h, w]) in [("low_res", self.low_res), ("high_res", self.high_res)] {
                if h % f != 0 || w % f != 0 {
                    out.push(format!("{name} {h}x{w} is not divisible by hfato.factor {f}"));
                }
            }
        }
        let r = self.lora.rank;
        if r == 0 || r > self.model.d {
            out.push(format!("lora.rank = {r} must lie in 1..={} (smallest targeted weight dimension)", self.model.d));
        }
        if !(self.lora.alpha > 0.0 && self.lora.alpha.is_finite()) {
            out.push(format!("lora.alpha = {} must be positive", self.lora.alpha));
        }
        if self.lora.targets.is_empty() {
            out.push("lora.targets is empty: no trainable parameters".into());
        } else if let Err(e) = expand_targets(&self.dit(AttentionMode::Dense), &self.lora.targets) {
            out.push(format!("lora.targets: {e}"));
        }
        out.extend(self.optimizer.problems());
        if self.train.batch_size == 0 {
            out.push("train.batch_size must be at least 1".into());
        }
        let (t0, t1) = (self.train.t_min, self.train.t_max);
        if !(0.0 <= t0 && t0 < t1 && t1 <= 1.0) {
            out.push(format!("train t range [{t0}, {t1}] must satisfy 0 <= t_min < t_max <= 1"));
        }
        out.extend(self.sampler.problems());
        for (name, a) in [
            ("data.texture_amplitude", self.data.texture_amplitude),
            ("data.base_texture_amplitude", self.data.base_texture_amplitude),
        ] {
            if !(a >= 0.0 && a.is_finite()) {
                out.push(format!("{name} = {a} must be non-negative"));
            }
        }
        out.extend(self.bench.problems());
        if self.output_dir.is_empty() {
            out.push("output_dir is empty".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        RunConfig::default().validate().unwrap();
        RunConfig::wide_preset().validate().unwrap();
        assert_eq!(RunConfig::default().sampler.steps, 50);
        assert_eq!(RunConfig::default().sampler.denoising_strength, 0.7);
    }

    #[test]
    fn json_round_trip_and_partial_files() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        let partial = RunConfig::from_json(r#"{"seed": 7, "lora": {"rank": 2}}"#).unwrap();
        assert_eq!(partial.seed, 7);
        assert_eq!(partial.lora.rank, 2);
        assert_eq!(partial.lora.alpha, 4.0);
        let hf = RunConfig::from_json(r#"{"hfato": {"factor": 4, "up": "bilinear"}}"#).unwrap();
        assert_eq!(hf.hfato.factor, 4);
    }

    #[test]
    fn unknown_fields_are_schema_errors() {
        assert!(matches!(RunConfig::from_json(r#"{"sed": 1}"#), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_json("[1, 2]"), Err(Error::Config(_))));
    }

    #[test]
    fn all_problems_are_reported_together() {
        let mut cfg = RunConfig::default();
        cfg.model.d = 10;
        cfg.lora.rank = 0;
        cfg.gclfa.window = [3, 4];
        cfg.sampler.denoising_strength = 1.5;
        cfg.high_res = [24, 16];
        let Err(Error::Config(problems)) = cfg.validate() else { panic!("expected config error") };
        assert!(problems.len() >= 5, "{problems:?}");
        let text = Error::Config(problems).to_string();
        assert!(text.contains("model.d") && text.contains("lora.rank") && text.contains("denoising_strength"));
    }

    #[test]
    fn data_seeds_are_distinct() {
        let cfg = RunConfig::default();
        let seeds = [DataRole::Pretrain, DataRole::Stage1, DataRole::Stage2, DataRole::HeldOut].map(|r| cfg.data_seed(r));
        for i in 0..4 {
            for j in 0..i {
                assert_ne!(seeds[i], seeds[j]);
            }
        }
    }
}
