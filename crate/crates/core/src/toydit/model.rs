use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::flowmatch::VelocityField;
use crate::gclfa::{record_gclfa, CoarseSpec, GridSize, RoPEParams, RopeTable, WindowSpec};
use crate::numcore::LinearOp;
use crate::relay_lora::{Checkpoint, LoRAAdapter};
use crate::{Error, Result, Rng, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    #[default]
    Dense,
    Gclfa,
}

/// Architecture of the toy velocity model. Resolution is not part of it:
/// the same weights run on any grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DitConfig {
    pub d: usize,
    pub n_layers: usize,
    pub ffn_mult: usize,
    pub rope: RoPEParams,
    /// Multiplier on `t` inside the sinusoidal time embedding.
    pub time_scale: f64,
    pub attention: AttentionMode,
    /// Local window and coarse pool ratio used in `Gclfa` mode.
    pub window: WindowSpec,
    pub pool: usize,
}

impl Default for DitConfig {
    fn default() -> Self {
        DitConfig {
            d: 16,
            n_layers: 2,
            ffn_mult: 2,
            rope: RoPEParams::default(),
            time_scale: 1000.0,
            attention: AttentionMode::Dense,
            window: WindowSpec { h: 8, w: 8 },
            pool: 2,
        }
    }
}

/// Per-layer weights that adapters may target.
pub const LAYER_WEIGHTS: [&str; 6] = ["attn.q", "attn.k", "attn.v", "attn.o", "ffn.0", "ffn.2"];

impl DitConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.d == 0 || self.d % 4 != 0 {
            out.push(format!("model.d = {} must be a positive multiple of 4", self.d));
        }
        if self.n_layers == 0 {
            out.push("model.n_layers must be at least 1".into());
        }
        if self.ffn_mult == 0 {
            out.push("model.ffn_mult must be at least 1".into());
        }
        if !(self.rope.base > 1.0) {
            out.push(format!("model.rope.base = {} must exceed 1", self.rope.base));
        }
        if !(self.time_scale > 0.0 && self.time_scale.is_finite()) {
            out.push(format!("model.time_scale = {} must be positive", self.time_scale));
        }
        if WindowSpec::new(self.window.h, self.window.w).is_err() {
            out.push(format!("window {}x{} must have even positive extents", self.window.h, self.window.w));
        }
        if self.pool == 0 {
            out.push("pool ratio must be at least 1".into());
        }
        out
    }

    /// `(name, [d_out, d_in])` of every weight, in checkpoint order.
    pub fn weight_shapes(&self) -> Vec<(String, [usize; 2])> {
        let (d, f) = (self.d, self.ffn_mult * self.d);
        let mut out = vec![("embed.in".to_string(), [d, 1])];
        for l in 0..self.n_layers {
            for (name, shape) in [
                ("attn.q", [d, d]),
                ("attn.k", [d, d]),
                ("attn.v", [d, d]),
                ("attn.o", [d, d]),
                ("ffn.0", [f, d]),
                ("ffn.2", [d, f]),
            ] {
                out.push((format!("blocks.{l}.{name}"), shape));
            }
        }
        out.push(("head".to_string(), [1, d]));
        out
    }

    /// Sinusoidal embedding of `t`, `d` channels: sines then cosines.
    pub fn time_embedding(&self, t: f64) -> Vec<f64> {
        let half = self.d / 2;
        let arg = |i: usize| t * self.time_scale * 10_000f64.powf(-(i as f64) / half as f64);
        (0..half).map(|i| arg(i).sin()).chain((0..half).map(|i| arg(i).cos())).collect()
    }
}

/// Weights bound as tape variables for one forward pass.
#[derive(Clone, Debug, Default)]
pub struct BoundWeights {
    vars: HashMap<String, Var>,
}

impl BoundWeights {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingTarget(name.to_string()))
    }

    /// Substitutes the variable used for `name`.
    pub fn set(&mut self, name: impl Into<String>, var: Var) {
        self.vars.insert(name.into(), var);
    }
}

/// Variables created for one adapter by [`ToyDiT::bind_with_adapters`].
#[derive(Clone, Copy, Debug)]
pub struct AdapterVars {
    pub a: Var,
    pub b: Var,
}

/// Pixel-token transformer: input embedding plus time embedding, residual
/// blocks of attention and a GELU MLP, then a linear head. There are no
/// biases or norms, so all-zero weights give an all-zero output.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyDiT {
    cfg: DitConfig,
    weights: Checkpoint,
}

impl ToyDiT {
    pub fn new(cfg: DitConfig, weights: Checkpoint) -> Result<Self> {
        let problems = cfg.problems();
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        for (name, shape) in cfg.weight_shapes() {
            let w = weights.require(&name)?;
            if w.shape() != shape {
                return Err(Error::shape(format!("{name}: expected {shape:?}, found {:?}", w.shape())));
            }
        }
        Ok(ToyDiT { cfg, weights })
    }

    /// Gaussian init with standard deviation `1/sqrt(d_in)`.
    pub fn init(cfg: DitConfig, rng: &mut Rng) -> Result<Self> {
        let mut weights = Checkpoint::new();
        for (name, [o, i]) in cfg.weight_shapes() {
            weights.insert(name, rng.gaussian([o, i], 1.0 / (i as f64).sqrt()))?;
        }
        weights.set_meta("stage", "init");
        Self::new(cfg, weights)
    }

    pub fn zeros(cfg: DitConfig) -> Result<Self> {
        let mut weights = Checkpoint::new();
        for (name, shape) in cfg.weight_shapes() {
            weights.insert(name, Tensor::zeros(shape))?;
        }
        Self::new(cfg, weights)
    }

    pub fn config(&self) -> &DitConfig {
        &self.cfg
    }

    pub fn weights(&self) -> &Checkpoint {
        &self.weights
    }

    pub fn into_weights(self) -> Checkpoint {
        self.weights
    }

    pub fn with_attention(&self, mode: AttentionMode) -> Self {
        ToyDiT { cfg: DitConfig { attention: mode, ..self.cfg }, weights: self.weights.clone() }
    }

    pub fn with_weights(&self, weights: Checkpoint) -> Result<Self> {
        Self::new(self.cfg, weights)
    }

    /// One leaf per weight.
    pub fn bind(&self, tape: &mut Tape) -> Result<BoundWeights> {
        let mut bound = BoundWeights::default();
        for (name, _) in self.cfg.weight_shapes() {
            let v = tape.leaf(self.weights.require(&name)?.clone());
            bound.set(name, v);
        }
        Ok(bound)
    }

    /// Binds the frozen weights plus `W + (α/r)·B·A` for each adapter.
    pub fn bind_with_adapters(&self, tape: &mut Tape, adapters: &[LoRAAdapter]) -> Result<(BoundWeights, Vec<AdapterVars>)> {
        let mut bound = self.bind(tape)?;
        let mut vars = Vec::with_capacity(adapters.len());
        for ad in adapters {
            let base = bound.get(&ad.target)?;
            if tape.value(base).shape() != ad.target_shape() {
                return Err(Error::shape(format!(
                    "{}: adapter expects {:?}, weight is {:?}",
                    ad.target,
                    ad.target_shape(),
                    tape.value(base).shape()
                )));
            }
            let a = tape.leaf(ad.a.clone());
            let b = tape.leaf(ad.b.clone());
            let ba = tape.matmul(b, a)?;
            let delta = tape.scale(ba, ad.scale());
            let w = tape.add(base, delta)?;
            bound.set(ad.target.clone(), w);
            vars.push(AdapterVars { a, b });
        }
        Ok((bound, vars))
    }

    /// Records the velocity prediction for `xt: [H, W]` at time `t`.
    pub fn record(&self, tape: &mut Tape, w: &BoundWeights, xt: Var, t: f64) -> Result<Var> {
        let (h, wd) = tape.value(xt).dims2()?;
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::contract(format!("time {t} outside [0, 1]")));
        }
        let grid = GridSize::new(h, wd)?;
        let n = grid.tokens();
        let d = self.cfg.d;

        let x = tape.reshape(xt, [n, 1])?;
        let emb = tape.linear(x, w.get("embed.in")?)?;
        let temb = self.cfg.time_embedding(t);
        let temb = Tensor::new([n, d], temb.iter().copied().cycle().take(n * d).collect())?;
        let mut hid = tape.add_const(emb, &temb)?;

        let rope: Arc<dyn LinearOp> = Arc::new(RopeTable::new(grid, d, self.cfg.rope)?);
        for l in 0..self.cfg.n_layers {
            let p = |s: &str| w.get(&format!("blocks.{l}.{s}"));
            let q = tape.linear(hid, p("attn.q")?)?;
            let k = tape.linear(hid, p("attn.k")?)?;
            let v = tape.linear(hid, p("attn.v")?)?;
            let att = match self.cfg.attention {
                AttentionMode::Dense => dense_attention(tape, q, k, v, &rope, d)?,
                AttentionMode::Gclfa => {
                    let win = WindowSpec::new(self.cfg.window.h, self.cfg.window.w)?;
                    record_gclfa(tape, q, k, v, grid, win, CoarseSpec::new(self.cfg.pool)?, self.cfg.rope)?
                }
            };
            let o = tape.linear(att, p("attn.o")?)?;
            hid = tape.add(hid, o)?;
            let f0 = tape.linear(hid, p("ffn.0")?)?;
            let act = tape.gelu(f0);
            let f2 = tape.linear(act, p("ffn.2")?)?;
            hid = tape.add(hid, f2)?;
        }
        let out = tape.linear(hid, w.get("head")?)?;
        tape.reshape(out, [h, wd])
    }

    pub fn forward(&self, xt: &Tensor, t: f64) -> Result<Tensor> {
        let mut tape = Tape::new();
        let w = self.bind(&mut tape)?;
        let x = tape.leaf(xt.clone());
        let out = self.record(&mut tape, &w, x, t)?;
        Ok(tape.value(out).clone())
    }
}

fn dense_attention(tape: &mut Tape, q: Var, k: Var, v: Var, rope: &Arc<dyn LinearOp>, d: usize) -> Result<Var> {
    let qr = tape.apply_linear(q, rope.clone())?;
    let kr = tape.apply_linear(k, rope.clone())?;
    let kt = tape.transpose(kr)?;
    let raw = tape.matmul(qr, kt)?;
    let scores = tape.scale(raw, 1.0 / (d as f64).sqrt());
    let probs = tape.softmax_lastdim(scores)?;
    tape.matmul(probs, v)
}

impl VelocityField for ToyDiT {
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        self.forward(x, t)
    }
}
