//! Linear-schedule flow matching: interpolation, velocity targets, the
//! training loss and probability-flow ODE samplers.
//!
//! Time runs from data (`t = 0`) to noise (`t = 1`). Samplers integrate
//! `dx = v(x, t) dt` backwards on a uniform grid and never evaluate the
//! velocity at `t = 0`.

use serde::{Deserialize, Serialize};

use crate::par::{self, Execution};
use crate::{Error, Result, Tensor};

/// Noise schedule `x_t = α(t)·x0 + σ(t)·ε`. Only the linear schedule
/// `α = 1 - t`, `σ = t` is provided.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Linear,
}

impl Schedule {
    pub fn alpha(self, t: f64) -> f64 {
        match self {
            Schedule::Linear => 1.0 - t,
        }
    }

    pub fn sigma(self, t: f64) -> f64 {
        match self {
            Schedule::Linear => t,
        }
    }
}

/// Loss reweighting `w(t)`. Constant one unless configured otherwise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeWeighting {
    Constant(f64),
}

impl Default for TimeWeighting {
    fn default() -> Self {
        TimeWeighting::Constant(1.0)
    }
}

impl TimeWeighting {
    pub fn weight(self, _t: f64) -> f64 {
        match self {
            TimeWeighting::Constant(w) => w,
        }
    }
}

/// A velocity field `v(x, t)`; the output has the shape of `x`.
pub trait VelocityField: Sync {
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor>;
}

impl<F> VelocityField for F
where
    F: Fn(&Tensor, f64) -> Result<Tensor> + Sync,
{
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        self(x, t)
    }
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::contract(format!("time {t} outside [0, 1]")));
    }
    Ok(())
}

pub fn interpolate(x0: &Tensor, eps: &Tensor, t: f64, sched: Schedule) -> Result<Tensor> {
    check_time(t)?;
    let (a, s) = (sched.alpha(t), sched.sigma(t));
    x0.zip_map(eps, |x, e| a * x + s * e)
}

/// `ε - x0`; the time derivative of the linear interpolation.
pub fn velocity_target(x0: &Tensor, eps: &Tensor) -> Result<Tensor> {
    eps.sub(x0)
}

/// `weight · mean((v_pred - v_target)^2)`.
pub fn fm_loss(v_pred: &Tensor, v_target: &Tensor, weight: f64) -> Result<f64> {
    if !(weight > 0.0) {
        return Err(Error::contract(format!("loss weight must be positive, got {weight}")));
    }
    let d = v_pred.sub(v_target)?;
    Ok(weight * d.data().iter().map(|v| v * v).sum::<f64>() / d.len().max(1) as f64)
}

/// One supervised flow-matching sample.
#[derive(Clone, Debug)]
pub struct FlowBatch {
    pub x0: Tensor,
    pub eps: Tensor,
    pub t: f64,
    pub xt: Tensor,
    pub v_target: Tensor,
}

impl FlowBatch {
    pub fn new(x0: Tensor, eps: Tensor, t: f64) -> Result<Self> {
        let xt = interpolate(&x0, &eps, t, Schedule::Linear)?;
        let v_target = velocity_target(&x0, &eps)?;
        Ok(FlowBatch { x0, eps, t, xt, v_target })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OdeMethod {
    #[default]
    Euler,
    Heun,
}

/// Integrates from pure noise at `t = 1` down to `t = 0`.
pub fn sample_ode(v: &dyn VelocityField, x_t: &Tensor, steps: usize, method: OdeMethod) -> Result<Tensor> {
    integrate(v, x_t, 1.0, steps, method)
}

/// Integrates from `t_start` down to `0` on the grid
/// `t_k = t_start·(steps - k)/steps`, `k = 0..=steps`.
///
/// Euler takes `x ← x - Δ·v(x, t_k)`. Heun averages the slope at `t_k` with
/// the slope at the Euler prediction for `t_{k+1}`; on the final step
/// `t_{k+1} = 0`, so it falls back to Euler there.
pub fn integrate(
    v: &dyn VelocityField,
    x: &Tensor,
    t_start: f64,
    steps: usize,
    method: OdeMethod,
) -> Result<Tensor> {
    if steps == 0 {
        return Err(Error::contract("sampler needs at least one step"));
    }
    check_time(t_start)?;
    let grid = |k: usize| t_start * (steps - k) as f64 / steps as f64;
    let mut x = x.clone();
    for k in 0..steps {
        let (t, t_next) = (grid(k), grid(k + 1));
        if t == 0.0 {
            break;
        }
        let dt = t - t_next;
        let slope = v.velocity(&x, t)?;
        x = match method {
            OdeMethod::Heun if k + 1 < steps => {
                let pred = x.axpy(-dt, &slope)?;
                let slope_next = v.velocity(&pred, t_next)?;
                let avg = slope.add(&slope_next)?;
                x.axpy(-0.5 * dt, &avg)?
            }
            _ => x.axpy(-dt, &slope)?,
        };
        if !x.is_finite() {
            return Err(Error::Diverged { step: k });
        }
    }
    Ok(x)
}

/// Integrates several independent trajectories, in parallel when enabled.
pub fn integrate_batch(
    v: &dyn VelocityField,
    starts: &[Tensor],
    t_start: f64,
    steps: usize,
    method: OdeMethod,
    exec: Execution,
) -> Result<Vec<Tensor>> {
    par::map_indices(exec, starts.len(), |i| integrate(v, &starts[i], t_start, steps, method))
        .into_iter()
        .collect()
}

/// Exact marginal velocity `(x - μ)/t` for data concentrated at `μ`.
#[derive(Clone, Debug)]
pub struct PointMassVelocity {
    pub mu: Tensor,
}

impl VelocityField for PointMassVelocity {
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        let mu = broadcast(&self.mu, x)?;
        x.zip_map(&mu, |x, m| (x - m) / t)
    }
}

/// Exact marginal velocity for data `~ N(mean, var·I)` under the linear
/// schedule.
///
/// With `s² = (1-t)²·var + t²` and `r = x - (1-t)·mean`:
/// `E[x0|x] = mean + (1-t)·var/s²·r`, `E[ε|x] = t/s²·r` and
/// `v = E[ε|x] - E[x0|x]`.
#[derive(Clone, Debug)]
pub struct GaussianVelocity {
    mean: Tensor,
    var: f64,
}

pub fn gaussian_oracle_velocity(mean: Tensor, var: f64) -> Result<GaussianVelocity> {
    if !(var > 0.0) {
        return Err(Error::contract(format!("oracle variance must be positive, got {var}")));
    }
    Ok(GaussianVelocity { mean, var })
}

/// `mean` is either full-shaped or a single value shared by every element.
fn broadcast(mean: &Tensor, x: &Tensor) -> Result<Tensor> {
    if mean.shape() == x.shape() {
        Ok(mean.clone())
    } else if mean.len() == 1 {
        Ok(Tensor::full(x.shape().to_vec(), mean.data()[0]))
    } else {
        Err(Error::shape(format!("mean {:?} vs state {:?}", mean.shape(), x.shape())))
    }
}

impl GaussianVelocity {
    fn s2(&self, t: f64) -> f64 {
        (1.0 - t).powi(2) * self.var + t * t
    }

    pub fn posterior_x0(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        let mean = broadcast(&self.mean, x)?;
        let gain = (1.0 - t) * self.var / self.s2(t);
        x.zip_map(&mean, |x, m| m + gain * (x - (1.0 - t) * m))
    }

    pub fn posterior_eps(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        let mean = broadcast(&self.mean, x)?;
        let gain = t / self.s2(t);
        x.zip_map(&mean, |x, m| gain * (x - (1.0 - t) * m))
    }
}

impl VelocityField for GaussianVelocity {
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        self.posterior_eps(x, t)?.sub(&self.posterior_x0(x, t)?)
    }
}
