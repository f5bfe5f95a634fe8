use serde::{Deserialize, Serialize};

use super::data::SyntheticDataset;
use super::model::{BoundWeights, DitConfig, ToyDiT, LAYER_WEIGHTS};
use crate::flowmatch::{interpolate, velocity_target, Schedule, TimeWeighting};
use crate::hfato::{hfato_forward, DegradationConfig, HfatoVariant};
use crate::relay_lora::{Checkpoint, LoRAAdapter};
use crate::{Error, Result, Rng, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Velocity regression `‖v - (ε - x0)‖²`, or `‖x̂0 - x0‖²` with `x0_loss`.
    #[default]
    Fm,
    /// Degrade, noise, and reconstruct the clean latent: `‖x̂0 - x0‖²`.
    Hfato,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            out.push(format!("optimizer.lr = {} must be positive", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                out.push(format!("optimizer.{name} = {b} must lie in [0, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            out.push(format!("optimizer.eps = {} must be positive", self.eps));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub objective: Objective,
    /// Supervise `x̂0 = x_t - t·v` against `x0` under `Fm`. `Hfato` always
    /// does.
    pub x0_loss: bool,
    pub degradation: DegradationConfig,
    pub variant: HfatoVariant,
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    /// Training times are drawn uniformly from `[t_min, t_max]`.
    pub t_min: f64,
    pub t_max: f64,
    pub weighting: TimeWeighting,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: Objective::Fm,
            x0_loss: false,
            degradation: DegradationConfig::default(),
            variant: HfatoVariant::default(),
            steps: 500,
            batch_size: 4,
            optimizer: AdamConfig::default(),
            t_min: 0.02,
            t_max: 0.98,
            weighting: TimeWeighting::default(),
            seed: 0,
        }
    }
}

/// Which parameters receive gradients.
#[derive(Clone, Debug, PartialEq)]
pub enum Trainable {
    /// Fresh adapters on the named weights; everything else is frozen.
    /// Short names such as `"attn.q"` or `"q"` expand to every layer.
    Lora { targets: Vec<String>, rank: usize, alpha: f64 },
    /// Every weight of the model.
    Full,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Trained adapters (empty for full training).
    pub adapters: Vec<LoRAAdapter>,
    /// Model weights after training; the input weights under LoRA training.
    pub weights: Checkpoint,
    /// Mean batch loss at each step, before that step's update.
    pub losses: Vec<f64>,
}

impl TrainOutcome {
    /// `step,loss` CSV with a header row.
    pub fn loss_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            s.push_str(&format!("{i},{l:e}\n"));
        }
        s
    }
}

/// Expands short target names to full weight names, in model order.
pub fn expand_targets(cfg: &DitConfig, targets: &[String]) -> Result<Vec<String>> {
    let shapes = cfg.weight_shapes();
    let mut out = Vec::new();
    for t in targets {
        let short = match t.as_str() {
            "q" | "k" | "v" | "o" => format!("attn.{t}"),
            other => other.to_string(),
        };
        let matches: Vec<&String> = if LAYER_WEIGHTS.contains(&short.as_str()) {
            shapes
                .iter()
                .map(|(n, _)| n)
                .filter(|n| n.ends_with(&format!(".{short}")) && n.starts_with("blocks."))
                .collect()
        } else {
            shapes.iter().map(|(n, _)| n).filter(|n| **n == short).collect()
        };
        if matches.is_empty() {
            return Err(Error::MissingTarget(t.clone()));
        }
        for m in matches {
            if !out.contains(m) {
                out.push(m.clone());
            }
        }
    }
    let order = |n: &String| shapes.iter().position(|(s, _)| s == n);
    out.sort_by_key(order);
    Ok(out)
}

/// Records the per-sample training loss for `x0`, `eps` at time `t`.
#[allow(clippy::too_many_arguments)]
pub fn record_sample_loss(
    tape: &mut Tape,
    model: &ToyDiT,
    w: &BoundWeights,
    x0: &Tensor,
    eps: &Tensor,
    t: f64,
    cfg: &TrainConfig,
) -> Result<Var> {
    let weight = cfg.weighting.weight(t);
    let (xt, x0_target) = match cfg.objective {
        Objective::Fm => (interpolate(x0, eps, t, Schedule::Linear)?, cfg.x0_loss),
        Objective::Hfato => (hfato_forward(x0, eps, t, &cfg.degradation, cfg.variant)?.xt, true),
    };
    let xv = tape.leaf(xt);
    let v = model.record(tape, w, xv, t)?;
    let loss = if x0_target {
        let tv = tape.scale(v, Schedule::Linear.sigma(t));
        let x_hat = tape.sub(xv, tv)?;
        let target = tape.leaf(x0.clone());
        tape.mse(x_hat, target)?
    } else {
        let target = tape.leaf(velocity_target(x0, eps)?);
        tape.mse(v, target)?
    };
    Ok(tape.scale(loss, weight))
}

struct Adam {
    cfg: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl Adam {
    fn new(cfg: AdamConfig, params: &[&Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        Adam { cfg, m: zeros.clone(), v: zeros, t: 0 }
    }

    fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            self.m[i] = self.m[i].zip_map(g, |m, g| c.beta1 * m + (1.0 - c.beta1) * g)?;
            self.v[i] = self.v[i].zip_map(g, |v, g| c.beta2 * v + (1.0 - c.beta2) * g * g)?;
            let update = self.m[i].zip_map(&self.v[i], |m, v| c.lr * (m / bc1) / ((v / bc2).sqrt() + c.eps))?;
            **p = p.sub(&update)?;
        }
        Ok(())
    }
}

/// Draws the `(index, t, eps)` triples for one step; identical for every
/// trainable and objective so runs can be compared step for step.
fn step_batch(cfg: &TrainConfig, step: usize, h: usize, w: usize) -> Vec<(u64, f64, Tensor)> {
    let mut rng = Rng::with_stream(cfg.seed, step as u64);
    (0..cfg.batch_size)
        .map(|b| {
            let t = rng.uniform_range(cfg.t_min, cfg.t_max);
            let eps = rng.gaussian([h, w], 1.0);
            ((step * cfg.batch_size + b) as u64, t, eps)
        })
        .collect()
}

fn check(cfg: &TrainConfig) -> Result<()> {
    let mut problems = cfg.optimizer.problems();
    if cfg.batch_size == 0 {
        problems.push("batch_size must be at least 1".into());
    }
    if !(0.0 <= cfg.t_min && cfg.t_min < cfg.t_max && cfg.t_max <= 1.0) {
        problems.push(format!("t range [{}, {}] must satisfy 0 <= t_min < t_max <= 1", cfg.t_min, cfg.t_max));
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(problems))
    }
}

/// Trains the chosen parameters with Adam. Deterministic given the configs.
pub fn train(model: &ToyDiT, data: &SyntheticDataset, cfg: &TrainConfig, trainable: &Trainable) -> Result<TrainOutcome> {
    check(cfg)?;
    let mut adapters = match trainable {
        Trainable::Lora { targets, rank, alpha } => {
            let names = expand_targets(model.config(), targets)?;
            if names.is_empty() {
                return Err(Error::NoTrainableParameters);
            }
            let mut rng = Rng::with_stream(cfg.seed, u64::MAX);
            let mut out = Vec::with_capacity(names.len());
            for name in names {
                let [o, i] = model.weights().require(&name)?.dims2().map(|(o, i)| [o, i])?;
                out.push(LoRAAdapter::init(name, o, i, *rank, *alpha, &mut rng)?);
            }
            out
        }
        Trainable::Full => Vec::new(),
    };
    let mut weights = model.weights().clone();
    let names: Vec<String> = model.config().weight_shapes().into_iter().map(|(n, _)| n).collect();

    let mut adam = match trainable {
        Trainable::Lora { .. } => {
            let params: Vec<&Tensor> = adapters.iter().flat_map(|a| [&a.a, &a.b]).collect();
            Adam::new(cfg.optimizer, &params)
        }
        Trainable::Full => {
            let params: Vec<&Tensor> = names.iter().map(|n| weights.require(n)).collect::<Result<_>>()?;
            Adam::new(cfg.optimizer, &params)
        }
    };

    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let current = match trainable {
            Trainable::Full => model.with_weights(weights.clone())?,
            Trainable::Lora { .. } => model.clone(),
        };
        let mut tape = Tape::new();
        let (bound, adapter_vars) = current.bind_with_adapters(&mut tape, &adapters)?;
        let mut total: Option<Var> = None;
        for (index, t, eps) in step_batch(cfg, step, data.h, data.w) {
            let x0 = data.sample(index);
            let l = record_sample_loss(&mut tape, &current, &bound, &x0, &eps, t, cfg)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, l)?,
                None => l,
            });
        }
        let total = total.expect("batch_size >= 1");
        let loss = tape.scale(total, 1.0 / cfg.batch_size as f64);
        let value = tape.value(loss).item()?;
        if !value.is_finite() {
            return Err(Error::TrainingDiverged { step, loss: value });
        }
        losses.push(value);
        let grads = tape.backward(loss)?;

        match trainable {
            Trainable::Lora { .. } => {
                let g: Vec<Tensor> = adapter_vars.iter().flat_map(|v| [grads.get(v.a), grads.get(v.b)]).collect();
                let mut params: Vec<&mut Tensor> = adapters.iter_mut().flat_map(|a| [&mut a.a, &mut a.b]).collect();
                adam.step(&mut params, &g)?;
            }
            Trainable::Full => {
                let g: Vec<Tensor> = names.iter().map(|n| bound.get(n).map(|v| grads.get(v))).collect::<Result<_>>()?;
                let mut updated: Vec<Tensor> = names.iter().map(|n| weights.require(n).cloned()).collect::<Result<_>>()?;
                let mut params: Vec<&mut Tensor> = updated.iter_mut().collect();
                adam.step(&mut params, &g)?;
                for (n, t) in names.iter().zip(updated) {
                    weights.replace(n, t)?;
                }
            }
        }
    }
    Ok(TrainOutcome { adapters, weights, losses })
}

/// Full-parameter flow-matching training from a seeded random init. The
/// returned weights are tagged as an unmerged base.
pub fn pretrain_base(cfg: DitConfig, data: &SyntheticDataset, train_cfg: &TrainConfig) -> Result<TrainOutcome> {
    let init = ToyDiT::init(cfg, &mut Rng::with_stream(train_cfg.seed, u64::MAX - 1))?;
    let mut out = train(&init, data, train_cfg, &Trainable::Full)?;
    out.weights.set_meta("stage", "base");
    out.weights.set_meta("lora_merge_depth", "0");
    Ok(out)
}
