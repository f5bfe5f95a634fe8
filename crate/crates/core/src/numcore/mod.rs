//! Tensor substrate: values, randomness, resampling and autodiff.

mod gradcheck;
mod resample;
mod rng;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_at};
pub use resample::{avg_pool2d, bilinear_upsample2d, nearest_upsample2d, Resample2d, Upsample};
pub use rng::Rng;
pub use tape::{Gradients, LinearOp, Tape, Var};
pub use tensor::Tensor;
pub(crate) use tensor::softmax_in_place;

#[cfg(test)]
mod primitive_gradients {
    //! Every tape primitive against central differences on inputs in [-1, 1].

    use std::sync::Arc;

    use super::*;
    use crate::Result;

    const TOL: f64 = 1e-6;
    const H: f64 = 1e-5;

    fn check(seed: u64, shape: &[usize], f: impl Fn(&mut Tape, Var) -> Result<Var>) {
        let x = Rng::new(seed).uniform_tensor(shape.to_vec(), -1.0, 1.0);
        let err = grad_check(f, &x, H).unwrap();
        assert!(err < TOL, "seed {seed}: relative error {err}");
    }

    fn weights(seed: u64, shape: &[usize]) -> Tensor {
        Rng::with_stream(seed, 99).uniform_tensor(shape.to_vec(), -1.0, 1.0)
    }

    /// Reduces any tensor to a scalar through a fixed random projection so
    /// that every output coordinate contributes a distinct weight.
    fn project(t: &mut Tape, v: Var, seed: u64) -> Result<Var> {
        let w = t.leaf(weights(seed, t.value(v).shape()));
        let p = t.mul(v, w)?;
        Ok(t.sum(p))
    }

    #[test]
    fn elementwise_ops() {
        for seed in 0..10 {
            check(seed, &[3, 4], |t, x| {
                let c = t.leaf(weights(seed + 1, &[3, 4]));
                let a = t.add(x, c)?;
                let s = t.sub(a, x)?;
                let m = t.mul(s, x)?;
                let m2 = t.mul(m, x)?;
                let sc = t.scale(m2, -1.7);
                project(t, sc, seed)
            });
        }
    }

    #[test]
    fn matmul_both_sides() {
        for seed in 0..10 {
            check(seed, &[3, 4], |t, x| {
                let b = t.leaf(weights(seed, &[4, 2]));
                let y = t.matmul(x, b)?;
                project(t, y, seed)
            });
            check(seed, &[4, 2], |t, x| {
                let a = t.leaf(weights(seed, &[3, 4]));
                let y = t.matmul(a, x)?;
                project(t, y, seed)
            });
        }
    }

    #[test]
    fn shape_ops() {
        for seed in 0..10 {
            check(seed, &[3, 4], |t, x| {
                let tr = t.transpose(x)?;
                let r = t.reshape(tr, [2, 6])?;
                let other = t.leaf(weights(seed, &[2, 3]));
                let c = t.concat(&[r, other, r], 1)?;
                project(t, c, seed)
            });
            check(seed, &[2, 3], |t, x| {
                let c = t.concat(&[x, x], 0)?;
                project(t, c, seed)
            });
        }
    }

    #[test]
    fn softmax_with_mask() {
        let mut mask = Tensor::zeros([3, 5]).into_data();
        mask[1] = f64::NEG_INFINITY;
        mask[7] = f64::NEG_INFINITY;
        let mask = Tensor::new([3, 5], mask).unwrap();
        for seed in 0..10 {
            check(seed, &[3, 5], |t, x| {
                let m = t.add_const(x, &mask)?;
                let s = t.softmax_lastdim(m)?;
                project(t, s, seed)
            });
        }
    }

    #[test]
    fn gelu_sum_mean() {
        for seed in 0..10 {
            check(seed, &[7], |t, x| {
                let g = t.gelu(x);
                let p = project(t, g, seed)?;
                let m = t.mean(x);
                let s = t.add(p, m)?;
                let sq = t.mul(s, s)?;
                Ok(t.sum(sq))
            });
        }
    }

    #[test]
    fn mse_and_resampling() {
        let pool: Arc<dyn LinearOp> = Arc::new(Resample2d::avg_pool(4, 4, 2).unwrap());
        let near: Arc<dyn LinearOp> = Arc::new(Resample2d::upsample(2, 2, 2, Upsample::Nearest).unwrap());
        let bil: Arc<dyn LinearOp> = Arc::new(Resample2d::upsample(4, 4, 2, Upsample::Bilinear).unwrap());
        for seed in 0..10 {
            check(seed, &[4, 4], |t, x| {
                let p = t.apply_linear(x, pool.clone())?;
                let u = t.apply_linear(p, near.clone())?;
                let b = t.apply_linear(u, bil.clone())?;
                let target = t.leaf(weights(seed, &[8, 8]));
                t.mse(b, target)
            });
        }
    }

    #[test]
    fn grad_check_examples() {
        let x = Tensor::vector(vec![1., 2.]);
        let err = grad_check(
            |t, x| {
                let sq = t.mul(x, x)?;
                Ok(t.sum(sq))
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-6);

        let err = grad_check(|t, _| Ok(t.leaf(Tensor::scalar(3.0))), &x, 1e-4).unwrap();
        assert!(err < 1e-8);
    }

    #[test]
    fn grad_check_contract_errors() {
        let x = Tensor::vector(vec![1., 2.]);
        let non_scalar = grad_check(|_, x| Ok(x), &x, 1e-4);
        assert!(matches!(non_scalar, Err(crate::Error::Contract(_))));
        let bad_step = grad_check(|t, x| Ok(t.sum(x)), &x, 0.1);
        assert!(matches!(bad_step, Err(crate::Error::Contract(_))));
    }
}
