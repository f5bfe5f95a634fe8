use std::f64::consts::TAU;

use crate::{Error, Result, Rng, Tensor};

/// Deterministic single-channel images: a smooth layout of three
/// sinusoids of at most one cycle per image axis plus a fine texture of two random-phase
/// sinusoids between 0.3 and 0.5 cycles per pixel, clamped to `[-1, 1]`.
///
/// Layout frequencies are in cycles per image, so the same index gives the
/// same layout at every resolution. Texture frequencies are in cycles per
/// pixel and sit above the 0.25 cycles/pixel cutoff of a factor-2
/// downsample/upsample round trip.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub seed: u64,
    pub h: usize,
    pub w: usize,
    /// Peak amplitude of the texture; 0 gives smooth frames.
    pub texture_amp: f64,
}

pub const TEXTURE_AMPLITUDE: f64 = 0.2;
const LAYOUT_STREAM: u64 = 1;
const TEXTURE_STREAM: u64 = 2;

impl SyntheticDataset {
    pub fn new(seed: u64, h: usize, w: usize) -> Result<Self> {
        Self::with_texture(seed, h, w, TEXTURE_AMPLITUDE)
    }

    pub fn with_texture(seed: u64, h: usize, w: usize, texture_amp: f64) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::contract(format!("empty dataset resolution {h}x{w}")));
        }
        if !(texture_amp >= 0.0 && texture_amp.is_finite()) {
            return Err(Error::contract(format!("texture amplitude {texture_amp} must be non-negative")));
        }
        Ok(SyntheticDataset { seed, h, w, texture_amp })
    }

    /// Same content at another resolution.
    pub fn at_resolution(&self, h: usize, w: usize) -> Result<Self> {
        Self::with_texture(self.seed, h, w, self.texture_amp)
    }

    pub fn sample(&self, index: u64) -> Tensor {
        let base = Rng::with_stream(self.seed, index);
        let mut layout = base.fork(LAYOUT_STREAM);
        let mut texture = base.fork(TEXTURE_STREAM);

        let mut waves = Vec::with_capacity(5);
        for _ in 0..3 {
            let (kx, ky) = loop {
                let kx = layout.below(2) as f64;
                let ky = layout.below(3) as f64 - 1.0;
                if kx != 0.0 || ky != 0.0 {
                    break (kx, ky);
                }
            };
            let amp = layout.uniform_range(0.2, 0.4);
            let phase = layout.uniform_range(0.0, TAU);
            waves.push((amp, kx / self.w as f64, ky / self.h as f64, phase));
        }
        for _ in 0..2 {
            let f = texture.uniform_range(0.3, 0.5);
            let angle = texture.uniform_range(0.0, TAU);
            let phase = texture.uniform_range(0.0, TAU);
            waves.push((0.5 * self.texture_amp, f * angle.cos(), f * angle.sin(), phase));
        }

        let data = (0..self.h * self.w)
            .map(|i| {
                let (x, y) = ((i % self.w) as f64, (i / self.w) as f64);
                let v: f64 = waves
                    .iter()
                    .map(|&(a, fx, fy, ph)| a * (TAU * (fx * x + fy * y) + ph).sin())
                    .sum();
                v.clamp(-1.0, 1.0)
            })
            .collect();
        Tensor::new([self.h, self.w], data).expect("shape matches data")
    }
}
