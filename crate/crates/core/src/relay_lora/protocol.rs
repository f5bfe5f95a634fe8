use super::{adapters_to_checkpoint, merge, Checkpoint, LoRAAdapter};
use crate::config::{DataRole, RunConfig};
use crate::toydit::{train, AttentionMode, ToyDiT, TrainOutcome, Trainable};
use crate::Result;

#[derive(Clone, Debug)]
pub struct RelayOutcome {
    pub lora1: Vec<LoRAAdapter>,
    /// `W1 = W0 + ΔW_LoRA1`, frozen during the second stage.
    pub merged: Checkpoint,
    pub lora2: Vec<LoRAAdapter>,
    pub stage1_losses: Vec<f64>,
    pub stage2_losses: Vec<f64>,
}

impl RelayOutcome {
    pub fn lora1_checkpoint(&self) -> Result<Checkpoint> {
        adapters_to_checkpoint(&self.lora1, "stage1")
    }

    /// The only artifact needed at inference time.
    pub fn lora2_checkpoint(&self) -> Result<Checkpoint> {
        adapters_to_checkpoint(&self.lora2, "stage2")
    }
}

fn trainable(cfg: &RunConfig) -> Trainable {
    Trainable::Lora { targets: cfg.lora.targets.clone(), rank: cfg.lora.rank, alpha: cfg.lora.alpha }
}

/// First stage: adapt the frozen base to low-resolution textured images.
pub fn train_stage1(base: &Checkpoint, cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = ToyDiT::new(cfg.dit(AttentionMode::Dense), base.clone())?;
    let data = cfg.dataset(DataRole::Stage1)?;
    train(&model, &data, &cfg.stage1_config(), &trainable(cfg))
}

/// Second stage: a fresh adapter on the frozen merged weights, trained at
/// high resolution with the configured attention and objective.
pub fn train_stage2(merged: &Checkpoint, cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = ToyDiT::new(cfg.dit(cfg.objective.stage2_attention), merged.clone())?;
    let data = cfg.dataset(DataRole::Stage2)?;
    train(&model, &data, &cfg.stage2_config(), &trainable(cfg))
}

/// Runs both stages: train LoRA1, merge it into `W0`, freeze, train LoRA2.
pub fn relay_protocol(base: &Checkpoint, cfg: &RunConfig) -> Result<RelayOutcome> {
    let s1 = train_stage1(base, cfg)?;
    let merged = merge(base, &s1.adapters)?;
    let s2 = train_stage2(&merged, cfg)?;
    Ok(RelayOutcome {
        lora1: s1.adapters,
        merged,
        lora2: s2.adapters,
        stage1_losses: s1.losses,
        stage2_losses: s2.losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::relay_lora::compose_inference;
    use crate::toydit::pretrain_base;
    use crate::toydit::SyntheticDataset;
    use crate::Rng;

    fn tiny() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model.d = 8;
        cfg.low_res = [4, 4];
        cfg.high_res = [8, 8];
        cfg.gclfa.window = [4, 4];
        cfg.lora.rank = 2;
        cfg.lora.alpha = 2.0;
        cfg.lora.targets = vec!["q".into(), "ffn.2".into()];
        cfg.train.batch_size = 2;
        cfg
    }

    fn base(cfg: &RunConfig) -> Checkpoint {
        let mut w = ToyDiT::init(cfg.dit(AttentionMode::Dense), &mut Rng::new(1)).unwrap().into_weights();
        w.set_meta("stage", "base");
        w
    }

    #[test]
    fn zero_steps_give_noop_lora2() {
        let mut cfg = tiny();
        cfg.train.stage1_steps = 0;
        cfg.train.stage2_steps = 0;
        let w0 = base(&cfg);
        let out = relay_protocol(&w0, &cfg).unwrap();
        let composed = compose_inference(&w0, &out.lora2).unwrap();
        for (name, t) in w0.iter() {
            assert_eq!(composed.get(name).unwrap(), t);
        }
    }

    #[test]
    fn stage1_merge_changes_exactly_the_targets() {
        let mut cfg = tiny();
        cfg.train.stage1_steps = 3;
        cfg.train.stage2_steps = 2;
        let w0 = base(&cfg);
        let out = relay_protocol(&w0, &cfg).unwrap();
        let targets: Vec<&str> = out.lora1.iter().map(|a| a.target.as_str()).collect();
        assert_eq!(targets, ["blocks.0.attn.q", "blocks.0.ffn.2", "blocks.1.attn.q", "blocks.1.ffn.2"]);
        for (name, t) in w0.iter() {
            assert_eq!(out.merged.get(name).unwrap() != t, targets.contains(&name), "{name}");
        }
        assert!(compose_inference(&out.merged, &out.lora2).is_err());
        assert_eq!(out.stage2_losses.len(), 2);
        assert_eq!(out.lora2_checkpoint().unwrap().meta("stage"), Some("stage2"));
    }

    #[test]
    fn pretrained_base_is_composable() {
        let mut cfg = tiny();
        cfg.train.pretrain_steps = 2;
        let [h, w] = cfg.low_res;
        let data = SyntheticDataset::with_texture(0, h, w, 0.0).unwrap();
        let w0 = pretrain_base(cfg.dit(AttentionMode::Dense), &data, &cfg.pretrain_config()).unwrap().weights;
        assert!(compose_inference(&w0, &[]).is_ok());
    }
}
