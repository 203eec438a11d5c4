//! Noise schedule, forward noising, guidance and the reverse sampling loop.
//!
//! Timesteps are 1-based: `t ∈ 1..=T`. The schedule is computed in `f64`;
//! per-element updates are evaluated in `f64` and rounded once to `f32`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::mixer::MixedConditioning;
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

/// A `(channels, height, width)` latent.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor {
    shape: [usize; 3],
    values: Vec<f32>,
}

impl LatentTensor {
    pub fn new(shape: [usize; 3], values: Vec<f32>) -> Result<Self> {
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::Shape(format!(
                "{} values for latent shape {shape:?}",
                values.len()
            )));
        }
        Ok(LatentTensor { shape, values })
    }

    pub fn zeros(shape: [usize; 3]) -> Self {
        LatentTensor {
            shape,
            values: vec![0.0; shape.iter().product()],
        }
    }

    /// Standard normal draws from `rng`, in row-major order.
    pub fn standard_normal(shape: [usize; 3], rng: &mut Stream) -> Self {
        let values = (0..shape.iter().product::<usize>())
            .map(|_| rng.sample::<f32, _>(StandardNormal))
            .collect();
        LatentTensor { shape, values }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub(crate) fn map2(&self, other: &LatentTensor, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<LatentTensor> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| f(f64::from(a), f64::from(b)) as f32)
            .collect();
        Ok(LatentTensor {
            shape: self.shape,
            values,
        })
    }

    /// Stacks latents of equal shape into an `[N, C, H, W]` tensor.
    pub fn stack(items: &[&LatentTensor]) -> Result<Tensor<f32>> {
        let shape = items
            .first()
            .map(|l| l.shape)
            .ok_or_else(|| Error::InvalidArgument("cannot stack zero latents".into()))?;
        let mut data = Vec::with_capacity(items.len() * shape.iter().product::<usize>());
        for item in items {
            if item.shape != shape {
                return Err(Error::Shape(format!("stacking {:?} with {:?}", shape, item.shape)));
            }
            data.extend_from_slice(&item.values);
        }
        Tensor::new(&[items.len(), shape[0], shape[1], shape[2]], data)
    }

    /// Splits an `[N, C, H, W]` tensor back into latents.
    pub fn unstack(t: &Tensor<f32>) -> Result<Vec<LatentTensor>> {
        let s = t.shape();
        if s.len() != 4 {
            return Err(Error::Shape(format!("expected NCHW, got {s:?}")));
        }
        let per = s[1] * s[2] * s[3];
        Ok(t
            .data()
            .chunks(per.max(1))
            .map(|c| LatentTensor {
                shape: [s[1], s[2], s[3]],
                values: c.to_vec(),
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 200,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

impl NoiseSchedule {
    /// Linear β from `beta_start` to `beta_end` over `steps` timesteps.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::InvalidArgument(format!("schedule needs T >= 2, got {steps}")));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let beta: Vec<f64> = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(NoiseSchedule {
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn index(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::InvalidArgument(format!(
                "timestep {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.beta[self.index(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alpha[self.index(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bar[self.index(t)?])
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }
}

/// `√ᾱ·x0 + √(1−ᾱ)·eps` for an explicit `ᾱ`.
pub fn diffuse_with(x0: &LatentTensor, eps: &LatentTensor, alpha_bar: f64) -> Result<LatentTensor> {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    x0.map2(eps, "forward diffusion", |x, e| a * x + b * e)
}

pub fn forward_diffuse(x0: &LatentTensor, t: usize, eps: &LatentTensor, schedule: &NoiseSchedule) -> Result<LatentTensor> {
    diffuse_with(x0, eps, schedule.alpha_bar(t)?)
}

/// `w·eps_cond + (1 − w)·eps_uncond`.
pub fn cfg_predict(eps_cond: &LatentTensor, eps_uncond: &LatentTensor, w: f64) -> Result<LatentTensor> {
    eps_cond.map2(eps_uncond, "guidance", |c, u| w * c + (1.0 - w) * u)
}

/// `(1/√α)·(z − ((1−α)/√(1−ᾱ))·eps)` for explicit `α`, `ᾱ`.
pub fn reverse_update(z_t: &LatentTensor, eps_hat: &LatentTensor, alpha: f64, alpha_bar: f64, t: usize) -> Result<LatentTensor> {
    let denom = (1.0 - alpha_bar).sqrt();
    if denom == 0.0 {
        return Err(Error::DegenerateStep { t });
    }
    let coef = (1.0 - alpha) / denom;
    let inv = 1.0 / alpha.sqrt();
    z_t.map2(eps_hat, "reverse step", |z, e| inv * (z - coef * e))
}

pub fn reverse_step(eps_hat: &LatentTensor, z_t: &LatentTensor, t: usize, schedule: &NoiseSchedule) -> Result<LatentTensor> {
    reverse_update(z_t, eps_hat, schedule.alpha(t)?, schedule.alpha_bar(t)?, t)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    /// Guidance scale `w`.
    pub scale: f64,
    /// Add `√β_t·ξ` after each reverse step with `t > 1`.
    #[serde(default)]
    pub ancestral: bool,
    /// Also replace the image conditioning with zeros in the unconditional branch.
    #[serde(default)]
    pub null_image_in_uncond: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            scale: 7.5,
            ancestral: false,
            null_image_in_uncond: false,
        }
    }
}

impl GuidanceConfig {
    pub fn with_scale(scale: f64) -> Self {
        GuidanceConfig {
            scale,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale >= 0.0 && self.scale.is_finite()) {
            return Err(Error::Config(format!("guidance scale must be >= 0, got {}", self.scale)));
        }
        Ok(())
    }
}

/// Anything that predicts the noise in a batch of latents.
pub trait NoisePredictor {
    /// `z_t` and `image` are `[N, C, H, W]`; `t` and `text` have one entry per
    /// sample, `None` meaning the null text embedding.
    fn predict_batch(
        &self,
        z_t: &Tensor<f32>,
        t: &[usize],
        text: &[Option<&EmbeddingMatrix>],
        image: &Tensor<f32>,
    ) -> Result<Tensor<f32>>;

    fn predict_noise(
        &self,
        z_t: &LatentTensor,
        t: usize,
        text: Option<&EmbeddingMatrix>,
        image: &LatentTensor,
    ) -> Result<LatentTensor> {
        let out = self.predict_batch(
            &LatentTensor::stack(&[z_t])?,
            &[t],
            &[text],
            &LatentTensor::stack(&[image])?,
        )?;
        LatentTensor::unstack(&out)?
            .pop()
            .ok_or_else(|| Error::Shape("empty prediction".into()))
    }
}

/// Mean squared error between `eps` and the model's prediction on the noised latent.
#[allow(clippy::too_many_arguments)]
pub fn training_loss<M: NoisePredictor + ?Sized>(
    model: &M,
    z0: &LatentTensor,
    t: usize,
    eps: &LatentTensor,
    text: Option<&EmbeddingMatrix>,
    image: &LatentTensor,
    schedule: &NoiseSchedule,
) -> Result<f32> {
    let z_t = forward_diffuse(z0, t, eps, schedule)?;
    let pred = model.predict_noise(&z_t, t, text, image)?;
    if pred.shape() != eps.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs noise {:?}",
            pred.shape(),
            eps.shape()
        )));
    }
    let sum: f64 = pred
        .values()
        .iter()
        .zip(eps.values())
        .map(|(&p, &e)| (f64::from(p) - f64::from(e)).powi(2))
        .sum();
    Ok((sum / eps.values().len() as f64) as f32)
}

/// One generation request for [`sample_batch`].
pub struct SampleJob<'a> {
    pub text: &'a EmbeddingMatrix,
    pub null_text: Option<&'a EmbeddingMatrix>,
    pub image: &'a LatentTensor,
    pub seed: u64,
}

/// Guided reverse diffusion from seeded Gaussian noise to `z_0`.
pub fn sample<M: NoisePredictor + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    cond: &MixedConditioning,
    image: &LatentTensor,
    guidance: &GuidanceConfig,
    seed: u64,
) -> Result<LatentTensor> {
    let job = SampleJob {
        text: &cond.e_cond,
        null_text: Some(&cond.e_null),
        image,
        seed,
    };
    Ok(sample_batch(model, schedule, &[job], guidance)?.remove(0))
}

/// Runs several independent sampling chains in lock step. Each chain draws
/// its initial noise (and ancestral noise, if enabled) from its own seed, so
/// a chain's result does not depend on the rest of the batch.
pub fn sample_batch<M: NoisePredictor + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    jobs: &[SampleJob<'_>],
    guidance: &GuidanceConfig,
) -> Result<Vec<LatentTensor>> {
    guidance.validate()?;
    if jobs.is_empty() {
        return Ok(Vec::new());
    }
    let shape = jobs[0].image.shape();
    let mut rngs: Vec<Stream> = jobs.iter().map(|j| rng::stream(j.seed)).collect();
    let mut z: Vec<LatentTensor> = rngs
        .iter_mut()
        .map(|r| LatentTensor::standard_normal(shape, r))
        .collect();
    let images: Vec<&LatentTensor> = jobs.iter().map(|j| j.image).collect();
    let image_batch = LatentTensor::stack(&images)?;
    let uncond_image = if guidance.null_image_in_uncond {
        Tensor::zeros(image_batch.shape())
    } else {
        image_batch.clone()
    };
    let cond_text: Vec<Option<&EmbeddingMatrix>> = jobs.iter().map(|j| Some(j.text)).collect();
    let null_text: Vec<Option<&EmbeddingMatrix>> = jobs.iter().map(|j| j.null_text).collect();

    for t in (1..=schedule.steps()).rev() {
        let refs: Vec<&LatentTensor> = z.iter().collect();
        let z_batch = LatentTensor::stack(&refs)?;
        let ts = vec![t; jobs.len()];
        let eps_c = LatentTensor::unstack(&model.predict_batch(&z_batch, &ts, &cond_text, &image_batch)?)?;
        let eps_u = LatentTensor::unstack(&model.predict_batch(&z_batch, &ts, &null_text, &uncond_image)?)?;
        for (i, zi) in z.iter_mut().enumerate() {
            let eps = cfg_predict(&eps_c[i], &eps_u[i], guidance.scale)?;
            let mut next = reverse_step(&eps, zi, t, schedule)?;
            if guidance.ancestral && t > 1 {
                let sigma = schedule.beta(t)?.sqrt();
                let noise = LatentTensor::standard_normal(shape, &mut rngs[i]);
                next = next.map2(&noise, "ancestral noise", |x, n| x + sigma * n)?;
            }
            if !next.is_finite() {
                return Err(Error::Divergence { stage: "sampling", step: t });
            }
            *zi = next;
        }
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    fn scalar(v: f32) -> LatentTensor {
        LatentTensor::new([1, 1, 1], vec![v]).unwrap()
    }

    #[test]
    fn tiny_schedule_by_hand() {
        let s = NoiseSchedule::linear(2, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha(1).unwrap(), 0.5);
        assert_eq!(s.alpha(2).unwrap(), 0.5);
        assert_eq!(s.alpha_bars(), &[0.5, 0.25]);
        assert!(NoiseSchedule::linear(1, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.2, 0.1).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.1).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn default_schedule_endpoint() {
        let s = ScheduleConfig::default().build().unwrap();
        assert_eq!(s.alpha_bar(1).unwrap(), 1.0 - 1e-4);
        // Independent oracle: exp(Σ ln(1 − β_i)) with β linear in [1e-4, 0.02].
        let oracle: f64 = (0..200)
            .map(|i| (1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 199.0)).ln())
            .sum::<f64>()
            .exp();
        let end = s.alpha_bar(200).unwrap();
        assert!((end - oracle).abs() < 1e-12);
        assert!((end - 0.132_182_754).abs() < 1e-8, "alpha_bar_T = {end}");
        assert!(end < 0.2);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn forward_diffusion_extremes() {
        let x0 = LatentTensor::new([1, 1, 2], vec![0.3, -1.2]).unwrap();
        let eps = LatentTensor::new([1, 1, 2], vec![0.7, 0.1]).unwrap();
        assert_eq!(diffuse_with(&x0, &eps, 1.0).unwrap(), x0);
        assert_eq!(diffuse_with(&x0, &eps, 0.0).unwrap(), eps);
        let v = diffuse_with(&scalar(2.0), &scalar(1.0), 0.25).unwrap().values()[0];
        assert!((v - 1.866_025_4).abs() < 1e-6);
        assert!(diffuse_with(&x0, &scalar(1.0), 0.5).is_err());
    }

    #[test]
    fn guidance_arithmetic() {
        let c = LatentTensor::new([1, 1, 2], vec![0.3, -2.0]).unwrap();
        let u = LatentTensor::new([1, 1, 2], vec![1.5, 0.25]).unwrap();
        assert_eq!(cfg_predict(&c, &u, 1.0).unwrap(), c);
        assert_eq!(cfg_predict(&c, &u, 0.0).unwrap(), u);
        assert_eq!(cfg_predict(&scalar(1.0), &scalar(0.0), 7.5).unwrap().values()[0], 7.5);
        assert_eq!(cfg_predict(&c, &c, 7.5).unwrap(), c);
    }

    #[test]
    fn reverse_step_by_hand() {
        let out = reverse_update(&scalar(1.0), &scalar(0.2), 0.99, 0.5, 5).unwrap().values()[0];
        let expected = (1.0 / 0.99f64.sqrt()) * (1.0 - (0.01 / 0.5f64.sqrt()) * 0.2);
        assert!((f64::from(out) - expected).abs() < 1e-6);
        assert!((out - 1.002_20).abs() < 1e-5);
        let z = LatentTensor::new([1, 1, 2], vec![0.4, -0.9]).unwrap();
        assert_eq!(reverse_update(&z, &LatentTensor::zeros([1, 1, 2]), 1.0, 0.3, 1).unwrap(), z);
        assert!(matches!(
            reverse_update(&z, &z, 1.0, 1.0, 1),
            Err(Error::DegenerateStep { t: 1 })
        ));
    }

    /// Predicts a constant and counts how often it was called.
    struct Counting {
        calls: Cell<usize>,
        value: f32,
    }

    impl NoisePredictor for Counting {
        fn predict_batch(
            &self,
            z_t: &Tensor<f32>,
            _t: &[usize],
            _text: &[Option<&EmbeddingMatrix>],
            _image: &Tensor<f32>,
        ) -> Result<Tensor<f32>> {
            self.calls.set(self.calls.get() + 1);
            Ok(Tensor::full(z_t.shape(), self.value))
        }
    }

    fn conditioning() -> MixedConditioning {
        MixedConditioning {
            e_cond: EmbeddingMatrix::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            e_null: EmbeddingMatrix::zeros(2, 2),
            class_label: "x".into(),
            provenance: crate::mixer::MixProvenance { base: 0, steps: vec![] },
        }
    }

    #[test]
    fn sampler_loop_structure_and_determinism() {
        let schedule = NoiseSchedule::linear(10, 1e-3, 0.05).unwrap();
        let model = Counting { calls: Cell::new(0), value: 0.1 };
        let image = LatentTensor::zeros([1, 2, 2]);
        let g = GuidanceConfig::default();
        let a = sample(&model, &schedule, &conditioning(), &image, &g, 3).unwrap();
        assert_eq!(model.calls.get(), 2 * 10);
        let b = sample(&model, &schedule, &conditioning(), &image, &g, 3).unwrap();
        assert_eq!(a, b);
        let c = sample(&model, &schedule, &conditioning(), &image, &g, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn sampler_reports_divergence() {
        let schedule = NoiseSchedule::linear(10, 1e-3, 0.05).unwrap();
        let model = Counting { calls: Cell::new(0), value: f32::NAN };
        let err = sample(&model, &schedule, &conditioning(), &LatentTensor::zeros([1, 1, 1]), &GuidanceConfig::default(), 0);
        assert!(matches!(err, Err(Error::Divergence { step: 10, .. })));
    }

    #[test]
    fn zero_predictor_loss_is_noise_power() {
        let schedule = NoiseSchedule::linear(10, 1e-3, 0.05).unwrap();
        let model = Counting { calls: Cell::new(0), value: 0.0 };
        let eps = LatentTensor::new([1, 1, 2], vec![0.5, -1.5]).unwrap();
        let z0 = LatentTensor::new([1, 1, 2], vec![0.1, 0.2]).unwrap();
        let loss = training_loss(&model, &z0, 3, &eps, None, &z0, &schedule).unwrap();
        assert!((loss - 1.25).abs() < 1e-7);
    }
}
