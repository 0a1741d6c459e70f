use serde::{Deserialize, Serialize};

use crate::error::{ForgeError, Result};
use crate::numerics::{SeededRng, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DsaConfig {
    pub flip_probability: f64,
    /// Shifts are drawn uniformly from `-max_shift..=max_shift` per axis.
    pub max_shift: i32,
    pub scale_min: f32,
    pub scale_max: f32,
    pub noise_std: f32,
}

impl Default for DsaConfig {
    fn default() -> Self {
        Self {
            flip_probability: 0.5,
            max_shift: 2,
            scale_min: 0.8,
            scale_max: 1.2,
            noise_std: 0.01,
        }
    }
}

/// One draw of augmentation parameters, applied identically to the real and
/// the synthetic batch of a distillation step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DsaParams {
    /// Mirror columns.
    pub flip: bool,
    /// (rows, cols) translation with zero fill.
    pub shift: (i32, i32),
    /// Multiplicative intensity scale.
    pub scale: f32,
    /// Seed of the additive noise field shared by every item.
    pub noise_seed: u64,
    pub noise_std: f32,
}

impl DsaParams {
    pub fn identity() -> Self {
        Self {
            flip: false,
            shift: (0, 0),
            scale: 1.0,
            noise_seed: 0,
            noise_std: 0.0,
        }
    }

    pub fn sample(config: &DsaConfig, rng: &mut SeededRng) -> Self {
        let span = (2 * config.max_shift.max(0) + 1) as usize;
        let mut shift = || rng.below(span) as i32 - config.max_shift.max(0);
        let dy = shift();
        let dx = shift();
        Self {
            flip: rng.bernoulli(config.flip_probability),
            shift: (dy, dx),
            scale: rng.uniform(config.scale_min, config.scale_max),
            noise_seed: rng.next_seed(),
            noise_std: config.noise_std,
        }
    }

    fn noise_field(&self, len: usize) -> Option<Vec<f32>> {
        (self.noise_std > 0.0)
            .then(|| SeededRng::new(self.noise_seed).normal_vec(len, 0.0, self.noise_std))
    }
}

fn square_side(batch: &Tensor) -> Result<(usize, usize)> {
    let (n, d) = batch.dims2()?;
    let side = (d as f64).sqrt().round() as usize;
    if side * side != d {
        return Err(ForgeError::Shape(format!(
            "augmentation expects square images, got {d} values per item"
        )));
    }
    Ok((n, side))
}

/// Source pixel of output pixel (i, j) under flip then shift, if inside.
fn source(i: usize, j: usize, side: usize, p: &DsaParams) -> Option<usize> {
    let si = i as i64 - p.shift.0 as i64;
    let sj = j as i64 - p.shift.1 as i64;
    if si < 0 || sj < 0 || si >= side as i64 || sj >= side as i64 {
        return None;
    }
    let (si, mut sj) = (si as usize, sj as usize);
    if p.flip {
        sj = side - 1 - sj;
    }
    Some(si * side + sj)
}

/// Flip, zero-padded shift, intensity scale, then the shared noise field.
/// Every step is affine in the input.
pub fn dsa_augment(batch: &Tensor, params: &DsaParams) -> Result<Tensor> {
    let (n, side) = square_side(batch)?;
    let d = side * side;
    let noise = params.noise_field(d);
    let mut out = vec![0.0f32; n * d];
    for item in 0..n {
        let src = batch.row(item);
        let dst = &mut out[item * d..(item + 1) * d];
        for i in 0..side {
            for j in 0..side {
                if let Some(s) = source(i, j, side, params) {
                    dst[i * side + j] = params.scale * src[s];
                }
            }
        }
        if let Some(noise) = &noise {
            for (o, z) in dst.iter_mut().zip(noise) {
                *o += z;
            }
        }
    }
    Tensor::matrix(n, d, out)
}

/// Adjoint of [`dsa_augment`]: gradient with respect to the input batch.
pub fn dsa_backward(grad_out: &Tensor, params: &DsaParams) -> Result<Tensor> {
    let (n, side) = square_side(grad_out)?;
    let d = side * side;
    let mut out = vec![0.0f32; n * d];
    for item in 0..n {
        let g = grad_out.row(item);
        let dst = &mut out[item * d..(item + 1) * d];
        for i in 0..side {
            for j in 0..side {
                if let Some(s) = source(i, j, side, params) {
                    dst[s] += params.scale * g[i * side + j];
                }
            }
        }
    }
    Tensor::matrix(n, d, out)
}
