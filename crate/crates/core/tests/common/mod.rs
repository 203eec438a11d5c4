#![allow(dead_code)]

use conceptmix::denoiser::{ConditioningMode, DenoiseBatch, Denoiser, DenoiserConfig};
use conceptmix::diffusion::NoiseSchedule;
use conceptmix::rng;
use conceptmix::tensor::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;

/// Latent 1×8×8, base width 8, two levels, cross-attention.
pub fn small_config() -> DenoiserConfig {
    DenoiserConfig {
        latent_channels: 1,
        base_width: 8,
        levels: 2,
        time_embed_dim: 8,
        text_m: 4,
        text_d: 6,
        conditioning_mode: ConditioningMode::CrossAttention,
        attn_dim: 8,
    }
}

fn normal(shape: &[usize], rng: &mut rng::Stream, scale: f32) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| scale * rng.sample::<f32, _>(StandardNormal)).collect()).unwrap()
}

/// A denoiser whose zero-initialized output layer has been replaced with
/// random weights, so every parameter influences the loss.
pub fn randomized_denoiser(cfg: DenoiserConfig, seed: u64) -> Denoiser {
    let mut d = Denoiser::init(cfg, seed).unwrap();
    let mut r = rng::stream(seed ^ 0xabcdef);
    let id = d.params.id("conv_out.weight").unwrap();
    let shape = d.params.tensors()[id].shape().to_vec();
    d.params.tensors_mut()[id] = normal(&shape, &mut r, 0.2);
    let id = d.params.id("conv_out.bias").unwrap();
    d.params.tensors_mut()[id] = normal(&[cfg.latent_channels], &mut r, 0.1);
    d
}

pub fn random_batch(cfg: DenoiserConfig, n: usize, hw: usize, steps: usize, seed: u64) -> DenoiseBatch<f32> {
    let mut r = rng::stream(seed);
    let s = [n, cfg.latent_channels, hw, hw];
    DenoiseBatch {
        z0: normal(&s, &mut r, 0.5),
        eps: normal(&s, &mut r, 1.0),
        image: normal(&s, &mut r, 0.5),
        text: normal(&[n, cfg.text_m, cfg.text_d], &mut r, 1.0),
        t: (0..n).map(|_| r.random_range(1..=steps)).collect(),
    }
}

pub fn cast_batch(b: &DenoiseBatch<f32>) -> DenoiseBatch<f64> {
    DenoiseBatch {
        z0: b.z0.cast(),
        eps: b.eps.cast(),
        image: b.image.cast(),
        text: b.text.cast(),
        t: b.t.clone(),
    }
}

pub fn default_schedule() -> NoiseSchedule {
    NoiseSchedule::linear(200, 1e-4, 0.02).unwrap()
}

/// One sampled coordinate of the gradient check.
pub struct GradProbe {
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradProbe {
    /// `|a − n| / max(|a|, |n|, floor)`.
    pub fn rel_error(&self, floor: f64) -> f64 {
        (self.analytic - self.numeric).abs() / self.analytic.abs().max(self.numeric.abs()).max(floor)
    }
}

/// Compares `f32` analytic gradients against central differences of the
/// same loss evaluated in `f64`, at `count` randomly chosen coordinates
/// (at least one per tensor).
pub fn gradient_probes(d: &Denoiser, batch: &DenoiseBatch<f32>, alpha_bar: &[f64], count: usize, seed: u64) -> Vec<GradProbe> {
    let (_, grads) = d.loss_and_grad(batch, alpha_bar).unwrap();
    let b64 = cast_batch(batch);
    let mut p64 = d.params.cast::<f64>();
    let mut r = rng::stream(seed);
    let total = d.params.count();
    let mut probes = Vec::with_capacity(count);
    // One coordinate in every tensor first, then uniform over all coordinates.
    for k in 0..count.max(p64.len()) {
        let (ti, flat) = if k < p64.len() {
            (k, r.random_range(0..p64[k].numel()))
        } else {
            let mut flat = r.random_range(0..total);
            let mut ti = 0;
            while flat >= p64[ti].numel() {
                flat -= p64[ti].numel();
                ti += 1;
            }
            (ti, flat)
        };
        let orig = p64[ti].data()[flat];
        let h = 1e-4 * orig.abs().max(1.0);
        p64[ti].data_mut()[flat] = orig + h;
        let (lp, _) = d.loss_with(&p64, &b64, alpha_bar, false).unwrap();
        p64[ti].data_mut()[flat] = orig - h;
        let (lm, _) = d.loss_with(&p64, &b64, alpha_bar, false).unwrap();
        p64[ti].data_mut()[flat] = orig;
        probes.push(GradProbe {
            name: d.params.names()[ti].clone(),
            analytic: f64::from(grads[ti].data()[flat]),
            numeric: (lp - lm) / (2.0 * h),
        });
    }
    probes
}
