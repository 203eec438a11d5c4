//! A dense noise predictor for latents with only a handful of elements,
//! where 3×3 convolutions have nothing to work with.
//!
//! The flattened latent and the sinusoidal time features are concatenated
//! and passed through `layers` hidden layers of width `hidden` with SiLU
//! activations. Text and image conditioning are ignored.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::denoiser::timestep_features;
use crate::diffusion::{NoisePredictor, NoiseSchedule};
use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::optim::{clip_global_norm, optimizer_step, AdamState};
use crate::params::{bind, Initializer, ParamSet};
use crate::rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    pub dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub time_embed_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpDenoiser {
    pub config: MlpConfig,
    pub params: ParamSet,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub clip_norm: f64,
}

impl MlpDenoiser {
    /// Hidden layers uniform by fan-in, output layer zero.
    pub fn init(config: MlpConfig, seed: u64) -> Result<Self> {
        if config.dim == 0 || config.hidden == 0 || config.layers == 0 || config.time_embed_dim % 2 != 0 {
            return Err(Error::Config(format!("invalid dense denoiser config {config:?}")));
        }
        let mut stream = rng::stream(rng::derive(seed, "mlp-init"));
        let mut init = Initializer::new(&mut stream);
        let mut fan_in = config.dim + config.time_embed_dim;
        for i in 0..config.layers {
            init.linear(&format!("hidden.{i}"), config.hidden, fan_in, true)?;
            fan_in = config.hidden;
        }
        init.zeros("out.weight", &[config.dim, config.hidden])?;
        init.zeros("out.bias", &[config.dim])?;
        Ok(MlpDenoiser { config, params: init.set })
    }

    fn input<T: Scalar>(&self, z: &[T], t: &[usize]) -> Result<Tensor<T>> {
        let (dim, e) = (self.config.dim, self.config.time_embed_dim);
        if z.len() != t.len() * dim {
            return Err(Error::Shape(format!("{} values for {} samples of dim {dim}", z.len(), t.len())));
        }
        let mut data = Vec::with_capacity(t.len() * (dim + e));
        for (row, &ti) in z.chunks(dim).zip(t) {
            data.extend_from_slice(row);
            data.extend(timestep_features(ti, e).into_iter().map(T::from_f64));
        }
        Tensor::new(&[t.len(), dim + e], data)
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, vars: &[crate::autograd::Var], x: Tensor<T>) -> Result<crate::autograd::Var> {
        let mut h = g.input(x);
        for i in 0..self.config.layers {
            h = g.linear(h, vars[2 * i], Some(vars[2 * i + 1]))?;
            h = g.silu(h);
        }
        let l = self.config.layers;
        g.linear(h, vars[2 * l], Some(vars[2 * l + 1]))
    }

    /// Loss on `[N, dim]` clean samples and noise, and its gradient.
    pub fn loss_and_grad(&self, z0: &[f32], eps: &[f32], t: &[usize], alpha_bar: &[f64]) -> Result<(f32, Vec<Tensor<f32>>)> {
        if z0.len() != eps.len() {
            return Err(Error::Shape("clean samples and noise differ in length".into()));
        }
        let dim = self.config.dim;
        let mut zt = Vec::with_capacity(z0.len());
        for (n, &ti) in t.iter().enumerate() {
            let ab = *alpha_bar
                .get(ti.wrapping_sub(1))
                .ok_or_else(|| Error::InvalidArgument(format!("timestep {ti} outside schedule")))?;
            for j in n * dim..(n + 1) * dim {
                zt.push((ab.sqrt() * f64::from(z0[j]) + (1.0 - ab).sqrt() * f64::from(eps[j])) as f32);
            }
        }
        let mut g = Graph::new();
        let vars = bind(&mut g, self.params.tensors());
        let pred = self.forward(&mut g, &vars, self.input(&zt, t)?)?;
        let loss = g.mse(pred, Tensor::new(&[t.len(), dim], eps.to_vec())?)?;
        let mut grads = g.backward(loss)?;
        let out = vars
            .iter()
            .zip(self.params.tensors())
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        Ok((g.value(loss).item(), out))
    }

    /// Unconditional training on a fixed set of `dim`-vectors with uniform
    /// timesteps. Returns the loss of every step.
    pub fn fit(&mut self, data: &[Vec<f32>], schedule: &NoiseSchedule, fit: &FitConfig, seed: u64) -> Result<Vec<f32>> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("empty training set".into()));
        }
        let dim = self.config.dim;
        let mut r = rng::stream(rng::derive(seed, "mlp-fit"));
        let mut state = AdamState::new(&self.params);
        let mut losses = Vec::with_capacity(fit.steps);
        for step in 0..fit.steps {
            let mut z0 = Vec::with_capacity(fit.batch * dim);
            let mut eps = Vec::with_capacity(fit.batch * dim);
            let mut t = Vec::with_capacity(fit.batch);
            for _ in 0..fit.batch {
                let x = &data[r.random_range(0..data.len())];
                if x.len() != dim {
                    return Err(Error::Shape(format!("sample of length {} for dim {dim}", x.len())));
                }
                z0.extend_from_slice(x);
                t.push(r.random_range(1..=schedule.steps()));
                eps.extend((0..dim).map(|_| r.sample::<f32, _>(StandardNormal)));
            }
            let (loss, mut grads) = self.loss_and_grad(&z0, &eps, &t, schedule.alpha_bars())?;
            if !loss.is_finite() {
                return Err(Error::Divergence { stage: "training", step });
            }
            clip_global_norm(&mut grads, fit.clip_norm);
            optimizer_step(&mut self.params, &grads, &mut state, fit.lr)?;
            losses.push(loss);
        }
        Ok(losses)
    }
}

impl NoisePredictor for MlpDenoiser {
    fn predict_batch(
        &self,
        z_t: &Tensor<f32>,
        t: &[usize],
        _text: &[Option<&EmbeddingMatrix>],
        _image: &Tensor<f32>,
    ) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let vars: Vec<_> = self.params.tensors().iter().map(|p| g.input(p.clone())).collect();
        let out = self.forward(&mut g, &vars, self.input(z_t.data(), t)?)?;
        g.value(out).clone().reshaped(z_t.shape())
    }
}
