//! Spatial resampling as explicit sparse linear maps.
//!
//! Every map is stored as per-output-pixel taps, so the adjoint needed by the
//! tape is the same table read backwards. Channels are innermost: a map built
//! for an `h × w` grid applies to `[h, w]`, `[h, w, c]` and to token matrices
//! `[h·w, c]` alike.

use serde::{Deserialize, Serialize};

use super::tape::LinearOp;
use super::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Upsample {
    #[default]
    Nearest,
    Bilinear,
}

#[derive(Clone, Debug)]
pub struct Resample2d {
    in_hw: (usize, usize),
    out_hw: (usize, usize),
    /// `taps[o]` lists `(input_pixel, weight)` contributions to output pixel `o`.
    taps: Vec<Vec<(usize, f64)>>,
}

impl Resample2d {
    /// Non-overlapping `s × s` average pooling.
    pub fn avg_pool(h: usize, w: usize, s: usize) -> Result<Self> {
        if s == 0 || h % s != 0 || w % s != 0 {
            return Err(Error::shape(format!("avg_pool: {h}x{w} grid is not divisible by {s}")));
        }
        let (ho, wo) = (h / s, w / s);
        let weight = 1.0 / (s * s) as f64;
        let taps = (0..ho * wo)
            .map(|o| {
                let (oy, ox) = (o / wo, o % wo);
                let mut t = Vec::with_capacity(s * s);
                for dy in 0..s {
                    for dx in 0..s {
                        t.push(((oy * s + dy) * w + ox * s + dx, weight));
                    }
                }
                t
            })
            .collect();
        Ok(Resample2d { in_hw: (h, w), out_hw: (ho, wo), taps })
    }

    pub fn upsample(h: usize, w: usize, s: usize, mode: Upsample) -> Result<Self> {
        if s == 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!("upsample: {h}x{w} by {s}")));
        }
        let (ho, wo) = (h * s, w * s);
        let taps = match mode {
            Upsample::Nearest => (0..ho * wo)
                .map(|o| vec![((o / wo / s) * w + (o % wo) / s, 1.0)])
                .collect(),
            Upsample::Bilinear => {
                let ys: Vec<_> = (0..ho).map(|y| linear_taps(y, s, h)).collect();
                let xs: Vec<_> = (0..wo).map(|x| linear_taps(x, s, w)).collect();
                (0..ho * wo)
                    .map(|o| {
                        let mut t = Vec::with_capacity(4);
                        for &(iy, wy) in &ys[o / wo] {
                            for &(ix, wx) in &xs[o % wo] {
                                if wy * wx != 0.0 {
                                    t.push((iy * w + ix, wy * wx));
                                }
                            }
                        }
                        t
                    })
                    .collect()
            }
        };
        Ok(Resample2d { in_hw: (h, w), out_hw: (ho, wo), taps })
    }

    pub fn in_hw(&self) -> (usize, usize) {
        self.in_hw
    }

    pub fn out_hw(&self) -> (usize, usize) {
        self.out_hw
    }

    fn out_shape(&self, shape: &[usize], from: (usize, usize), to: (usize, usize)) -> Result<Vec<usize>> {
        let pixels = from.0 * from.1;
        match shape {
            [h, w] if (*h, *w) == from => Ok(vec![to.0, to.1]),
            [h, w, c] if (*h, *w) == from => Ok(vec![to.0, to.1, *c]),
            [n, c] if *n == pixels => Ok(vec![to.0 * to.1, *c]),
            s => Err(Error::shape(format!(
                "resample over a {}x{} grid cannot take shape {s:?}",
                from.0, from.1
            ))),
        }
    }

    fn channels(x: &Tensor, pixels: usize) -> usize {
        x.len() / pixels.max(1)
    }
}

/// Half-pixel-centre linear interpolation taps along one axis.
fn linear_taps(dst: usize, s: usize, n: usize) -> Vec<(usize, f64)> {
    let src = ((dst as f64 + 0.5) / s as f64 - 0.5).clamp(0.0, (n - 1) as f64);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(n - 1);
    let frac = src - i0 as f64;
    if i1 == i0 || frac == 0.0 {
        vec![(i0, 1.0)]
    } else {
        vec![(i0, 1.0 - frac), (i1, frac)]
    }
}

impl LinearOp for Resample2d {
    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let shape = self.out_shape(x.shape(), self.in_hw, self.out_hw)?;
        let c = Self::channels(x, self.in_hw.0 * self.in_hw.1);
        let src = x.data();
        let mut out = vec![0.0; self.taps.len() * c];
        for (o, taps) in self.taps.iter().enumerate() {
            let dst = &mut out[o * c..(o + 1) * c];
            for &(i, wgt) in taps {
                for (d, s) in dst.iter_mut().zip(&src[i * c..(i + 1) * c]) {
                    *d += wgt * s;
                }
            }
        }
        Tensor::new(shape, out)
    }

    fn adjoint(&self, g: &Tensor) -> Result<Tensor> {
        let shape = self.out_shape(g.shape(), self.out_hw, self.in_hw)?;
        let c = Self::channels(g, self.out_hw.0 * self.out_hw.1);
        let src = g.data();
        let mut out = vec![0.0; self.in_hw.0 * self.in_hw.1 * c];
        for (o, taps) in self.taps.iter().enumerate() {
            for &(i, wgt) in taps {
                for (d, s) in out[i * c..(i + 1) * c].iter_mut().zip(&src[o * c..(o + 1) * c]) {
                    *d += wgt * s;
                }
            }
        }
        Tensor::new(shape, out)
    }
}

/// Average-pools an `[H, W]` / `[H, W, C]` image by `s`.
pub fn avg_pool2d(x: &Tensor, s: usize) -> Result<Tensor> {
    let (h, w, _) = x.dims_hwc()?;
    Resample2d::avg_pool(h, w, s)?.apply(x)
}

pub fn nearest_upsample2d(x: &Tensor, s: usize) -> Result<Tensor> {
    let (h, w, _) = x.dims_hwc()?;
    Resample2d::upsample(h, w, s, Upsample::Nearest)?.apply(x)
}

pub fn bilinear_upsample2d(x: &Tensor, s: usize) -> Result<Tensor> {
    let (h, w, _) = x.dims_hwc()?;
    Resample2d::upsample(h, w, s, Upsample::Bilinear)?.apply(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Tensor {
        Tensor::new([h, w], (1..=h * w).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn pool_block_means() {
        let p = avg_pool2d(&ramp(4, 4), 2).unwrap();
        assert_eq!(p.shape(), &[2, 2]);
        assert_eq!(p.data(), &[3.5, 5.5, 11.5, 13.5]);
    }

    #[test]
    fn pool_rejects_indivisible() {
        assert!(avg_pool2d(&ramp(3, 4), 2).is_err());
    }

    #[test]
    fn nearest_repeats_pixels() {
        let x = Tensor::new([1, 2], vec![1., 2.]).unwrap();
        let u = nearest_upsample2d(&x, 2).unwrap();
        assert_eq!(u.shape(), &[2, 4]);
        assert_eq!(u.data(), &[1., 1., 2., 2., 1., 1., 2., 2.]);
    }

    #[test]
    fn bilinear_preserves_constants_and_interpolates() {
        let c = Tensor::full([3, 3], 2.5);
        let u = bilinear_upsample2d(&c, 2).unwrap();
        assert!(u.data().iter().all(|&v| (v - 2.5).abs() < 1e-15));

        let x = Tensor::new([1, 2], vec![0., 4.]).unwrap();
        let u = bilinear_upsample2d(&x, 2).unwrap();
        assert_eq!(u.data()[..4], [0., 1., 3., 4.]);
    }

    #[test]
    fn channels_and_token_layout_agree() {
        let img = Tensor::new([4, 4, 3], (0..48).map(|v| v as f64).collect()).unwrap();
        let tokens = img.reshape([16, 3]).unwrap();
        let a = avg_pool2d(&img, 2).unwrap();
        let b = Resample2d::avg_pool(4, 4, 2).unwrap().apply(&tokens).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(b.shape(), &[4, 3]);
    }

    #[test]
    fn adjoint_satisfies_inner_product_identity() {
        let mut rng = crate::Rng::new(1);
        for op in [
            Resample2d::avg_pool(4, 6, 2).unwrap(),
            Resample2d::upsample(3, 2, 2, Upsample::Nearest).unwrap(),
            Resample2d::upsample(3, 2, 3, Upsample::Bilinear).unwrap(),
        ] {
            let (h, w) = op.in_hw();
            let (ho, wo) = op.out_hw();
            let x = rng.gaussian([h, w, 2], 1.0);
            let y = rng.gaussian([ho, wo, 2], 1.0);
            let lhs: f64 = op.apply(&x).unwrap().mul(&y).unwrap().sum();
            let rhs: f64 = x.mul(&op.adjoint(&y).unwrap()).unwrap().sum();
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }
}
