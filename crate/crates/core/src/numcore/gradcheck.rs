use super::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Compares tape gradients of a scalar function with central differences.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)` over all
/// coordinates of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    grad_check_at(f, x, h, &coords)
}

/// Like [`grad_check`] but only probes the listed flat coordinates.
pub fn grad_check_at<F>(f: F, x: &Tensor, h: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&h) {
        return Err(Error::contract(format!("finite-difference step {h} outside [1e-6, 1e-3]")));
    }
    if let Some(&c) = coords.iter().find(|&&c| c >= x.len()) {
        return Err(Error::contract(format!("coordinate {c} out of range for {} elements", x.len())));
    }

    let eval = |x: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(x);
        let y = f(&mut tape, v)?;
        scalar_of(&tape, y)
    };

    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let y = f(&mut tape, v)?;
    scalar_of(&tape, y)?;
    let analytic = tape.backward(y)?.get(v);

    let mut worst: f64 = 0.0;
    for &i in coords {
        let mut plus = x.clone().into_data();
        let mut minus = plus.clone();
        plus[i] += h;
        minus[i] -= h;
        let fp = eval(Tensor::new(x.shape().to_vec(), plus)?)?;
        let fm = eval(Tensor::new(x.shape().to_vec(), minus)?)?;
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

fn scalar_of(tape: &Tape, y: Var) -> Result<f64> {
    let v = tape.value(y);
    if v.len() != 1 {
        return Err(Error::contract(format!(
            "grad_check needs a scalar-valued function, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.data()[0])
}
