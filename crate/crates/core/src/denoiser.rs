//! The conditional noise predictor `ε_θ(z_t, t, e_T, e_I)`.
//!
//! A small U-Net: the image conditioning is concatenated to the noisy latent
//! at the input, a sinusoidal time embedding is added inside every residual
//! block, and the text embedding enters at the bottleneck through
//! cross-attention (or a pooled additive projection). The output
//! convolution starts at zero.
//!
//! Layout for `levels = L`, widths `w_i = base_width · 2^i`:
//!
//! ```text
//! conv_in(concat(z_t, e_I))                         -> w_0
//! for i in 0..L:  down.i.block, keep skip, down.i.conv (stride 2) -> w_{i+1}
//! mid.block, mid.text
//! for i in L-1..=0: upsample, concat skip, up.i.merge -> w_i, up.i.block
//! conv_out(silu(h))                                  -> latent_channels
//! ```

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::diffusion::NoisePredictor;
use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::params::{bind, load_checkpoint, save_checkpoint, Initializer, ParamSet};
use crate::rng;
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_KIND: &str = "denoiser";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningMode {
    CrossAttention,
    PooledAdditive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub base_width: usize,
    pub levels: usize,
    pub time_embed_dim: usize,
    pub text_m: usize,
    pub text_d: usize,
    pub conditioning_mode: ConditioningMode,
    /// Width of the attention query/key/value projections.
    #[serde(default = "default_attn_dim")]
    pub attn_dim: usize,
}

fn default_attn_dim() -> usize {
    32
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            latent_channels: 4,
            base_width: 32,
            levels: 2,
            time_embed_dim: 32,
            text_m: 16,
            text_d: 32,
            conditioning_mode: ConditioningMode::CrossAttention,
            attn_dim: default_attn_dim(),
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("latent_channels", self.latent_channels),
            ("base_width", self.base_width),
            ("time_embed_dim", self.time_embed_dim),
            ("text_m", self.text_m),
            ("text_d", self.text_d),
            ("attn_dim", self.attn_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("denoiser {name} must be positive")));
            }
        }
        if self.time_embed_dim % 2 != 0 {
            return Err(Error::Config("denoiser time_embed_dim must be even".into()));
        }
        if self.levels > 6 {
            return Err(Error::Config(format!("denoiser levels {} is too deep", self.levels)));
        }
        Ok(())
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// Latent height and width must be divisible by this.
    pub fn spatial_multiple(&self) -> usize {
        1 << self.levels
    }

    /// Closed-form parameter count for this configuration.
    pub fn parameter_count(&self) -> usize {
        let conv = |cout: usize, cin: usize| cout * cin * 9 + cout;
        let e = self.time_embed_dim;
        let block = |w: usize| 2 * conv(w, w) + w * e + w;
        let c = self.latent_channels;
        let mut n = 2 * (e * e + e) + conv(self.width(0), 2 * c);
        for i in 0..self.levels {
            let (w, w2) = (self.width(i), self.width(i + 1));
            n += block(w) + conv(w2, w);
            n += conv(w, w2 + w) + block(w);
        }
        let wl = self.width(self.levels);
        n += block(wl);
        n += match self.conditioning_mode {
            ConditioningMode::CrossAttention => {
                let a = self.attn_dim;
                a * wl + 2 * a * self.text_d + wl * a
            }
            ConditioningMode::PooledAdditive => wl * self.text_d,
        };
        n + conv(c, self.width(0))
    }
}

/// Sinusoidal features `[sin(t·f_i), cos(t·f_i)]` with `f_i = 10000^(−i/half)`.
pub fn timestep_features(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    let freqs: Vec<f64> = (0..half)
        .map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp())
        .collect();
    out.extend(freqs.iter().map(|f| (t as f64 * f).sin()));
    out.extend(freqs.iter().map(|f| (t as f64 * f).cos()));
    out
}

/// One mini-batch of denoising examples. Tensors are `[N, C, H, W]`
/// except `text`, which is `[N, m, d]` (rows of zeros for the null text).
#[derive(Debug, Clone)]
pub struct DenoiseBatch<T> {
    pub z0: Tensor<T>,
    pub eps: Tensor<T>,
    pub image: Tensor<T>,
    pub text: Tensor<T>,
    pub t: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub params: ParamSet,
}

fn check<T: Scalar>(g: &Graph<T>, v: Var, layer: &str) -> Result<Var> {
    if g.value(v).is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric { layer: layer.to_string() })
    }
}

struct Ctx<'a, T: Scalar> {
    g: &'a mut Graph<T>,
    vars: Vec<Var>,
    params: &'a ParamSet,
}

impl<T: Scalar> Ctx<'_, T> {
    fn p(&self, name: &str) -> Result<Var> {
        Ok(self.vars[self.params.id(name)?])
    }

    fn conv(&mut self, name: &str, x: Var, stride: usize) -> Result<Var> {
        let w = self.p(&format!("{name}.weight"))?;
        let b = self.p(&format!("{name}.bias"))?;
        let y = self.g.conv2d(x, w, b, stride, 1)?;
        check(self.g, y, name)
    }

    fn linear(&mut self, name: &str, x: Var, bias: bool) -> Result<Var> {
        let w = self.p(&format!("{name}.weight"))?;
        let b = if bias { Some(self.p(&format!("{name}.bias"))?) } else { None };
        let y = self.g.linear(x, w, b)?;
        check(self.g, y, name)
    }

    /// `h + conv2(silu(conv1(h) + proj(temb)))`
    fn block(&mut self, name: &str, h: Var, temb: Var) -> Result<Var> {
        let a = self.conv(&format!("{name}.conv1"), h, 1)?;
        let tp = self.linear(&format!("{name}.time"), temb, true)?;
        let a = self.g.add_per_sample_channel(a, tp)?;
        let a = self.g.silu(a);
        let a = self.conv(&format!("{name}.conv2"), a, 1)?;
        self.g.add(h, a)
    }
}

impl Denoiser {
    /// Fresh parameters: weights uniform in `±1/√fan_in`, biases zero, output
    /// convolution zero.
    pub fn init(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut stream = rng::stream(rng::derive(seed, "denoiser-init"));
        let mut init = Initializer::new(&mut stream);
        let e = config.time_embed_dim;
        let c = config.latent_channels;
        let block = |init: &mut Initializer, name: &str, w: usize| -> Result<()> {
            init.conv(&format!("{name}.conv1"), w, w, 3)?;
            init.linear(&format!("{name}.time"), w, e, true)?;
            init.conv(&format!("{name}.conv2"), w, w, 3)
        };
        init.linear("time.fc1", e, e, true)?;
        init.linear("time.fc2", e, e, true)?;
        init.conv("conv_in", config.width(0), 2 * c, 3)?;
        for i in 0..config.levels {
            block(&mut init, &format!("down.{i}.block"), config.width(i))?;
            init.conv(&format!("down.{i}.conv"), config.width(i + 1), config.width(i), 3)?;
        }
        let wl = config.width(config.levels);
        block(&mut init, "mid.block", wl)?;
        match config.conditioning_mode {
            ConditioningMode::CrossAttention => {
                let a = config.attn_dim;
                init.linear("mid.text.q", a, wl, false)?;
                init.linear("mid.text.k", a, config.text_d, false)?;
                init.linear("mid.text.v", a, config.text_d, false)?;
                init.linear("mid.text.out", wl, a, false)?;
            }
            ConditioningMode::PooledAdditive => {
                init.linear("mid.text.proj", wl, config.text_d, false)?;
            }
        }
        for i in (0..config.levels).rev() {
            let (w, w2) = (config.width(i), config.width(i + 1));
            init.conv(&format!("up.{i}.merge"), w, w2 + w, 3)?;
            block(&mut init, &format!("up.{i}.block"), w)?;
        }
        init.zeros("conv_out.weight", &[c, config.width(0), 3, 3])?;
        init.zeros("conv_out.bias", &[c])?;
        Ok(Denoiser { config, params: init.set })
    }

    pub fn from_params(config: DenoiserConfig, params: ParamSet) -> Result<Self> {
        let reference = Denoiser::init(config, 0)?;
        if !reference.params.same_layout(&params) {
            return Err(Error::Config("checkpoint parameters do not match the denoiser config".into()));
        }
        Ok(Denoiser { config, params })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let config = serde_json::to_value(self.config).map_err(|e| Error::parse("denoiser config", e))?;
        save_checkpoint(path, CHECKPOINT_KIND, &config, &self.params)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let (config, params) = load_checkpoint(path, CHECKPOINT_KIND)?;
        let config: DenoiserConfig =
            serde_json::from_value(config).map_err(|e| Error::parse(path.display().to_string(), e))?;
        config.validate()?;
        Self::from_params(config, params)
    }

    fn check_inputs(&self, z: &[usize], image: &[usize], text: &[usize], t: &[usize]) -> Result<()> {
        let c = &self.config;
        let k = c.spatial_multiple();
        let ok = z.len() == 4
            && z[1] == c.latent_channels
            && z[2] % k == 0
            && z[3] % k == 0
            && z[2] > 0
            && z[3] > 0
            && image == z
            && text == [z[0], c.text_m, c.text_d]
            && t.len() == z[0];
        if !ok {
            return Err(Error::Shape(format!(
                "denoiser expects z [N,{},H,W] with H,W multiples of {k}, matching e_I, text [N,{},{}] and N timesteps; got z {z:?}, e_I {image:?}, text {text:?}, {} timesteps",
                c.latent_channels,
                c.text_m,
                c.text_d,
                t.len()
            )));
        }
        Ok(())
    }

    /// Builds the forward graph on `g` with the given parameter variables.
    fn forward<T: Scalar>(&self, g: &mut Graph<T>, vars: Vec<Var>, z: Var, image: Var, text: Var, t: &[usize]) -> Result<Var> {
        let cfg = self.config;
        let mut cx = Ctx {
            g,
            vars,
            params: &self.params,
        };
        let e = cfg.time_embed_dim;
        let feats: Vec<T> = t
            .iter()
            .flat_map(|&ti| timestep_features(ti, e))
            .map(T::from_f64)
            .collect();
        let feats = cx.g.input(Tensor::new(&[t.len(), e], feats)?);
        let temb = cx.linear("time.fc1", feats, true)?;
        let temb = cx.g.silu(temb);
        let temb = cx.linear("time.fc2", temb, true)?;
        let temb = cx.g.silu(temb);

        let x = cx.g.concat_channels(z, image)?;
        let mut h = cx.conv("conv_in", x, 1)?;
        let mut skips = Vec::with_capacity(cfg.levels);
        for i in 0..cfg.levels {
            h = cx.block(&format!("down.{i}.block"), h, temb)?;
            skips.push(h);
            h = cx.conv(&format!("down.{i}.conv"), h, 2)?;
        }
        h = cx.block("mid.block", h, temb)?;
        let (hh, ww) = (cx.g.shape(h)[2], cx.g.shape(h)[3]);
        let text_term = match cfg.conditioning_mode {
            ConditioningMode::CrossAttention => {
                let tokens = cx.g.to_tokens(h)?;
                let q = cx.linear("mid.text.q", tokens, false)?;
                let k = cx.linear("mid.text.k", text, false)?;
                let v = cx.linear("mid.text.v", text, false)?;
                let scores = cx.g.batch_matmul(q, k, true)?;
                let scores = cx.g.scale(scores, 1.0 / (cfg.attn_dim as f64).sqrt());
                let attn = cx.g.softmax_last(scores);
                let mixed = cx.g.batch_matmul(attn, v, false)?;
                let out = cx.linear("mid.text.out", mixed, false)?;
                let out = cx.g.from_tokens(out, hh, ww)?;
                cx.g.add(h, out)?
            }
            ConditioningMode::PooledAdditive => {
                let pooled = cx.g.mean_rows(text)?;
                let proj = cx.linear("mid.text.proj", pooled, false)?;
                cx.g.add_per_sample_channel(h, proj)?
            }
        };
        h = check(cx.g, text_term, "mid.text")?;
        for i in (0..cfg.levels).rev() {
            h = cx.g.upsample2x(h)?;
            h = cx.g.concat_channels(h, skips[i])?;
            h = cx.conv(&format!("up.{i}.merge"), h, 1)?;
            h = cx.block(&format!("up.{i}.block"), h, temb)?;
        }
        let h = cx.g.silu(h);
        cx.conv("conv_out", h, 1)
    }

    /// Noise prediction at arbitrary precision with explicit parameter values.
    pub fn predict_with<T: Scalar>(
        &self,
        params: &[Tensor<T>],
        z: &Tensor<T>,
        image: &Tensor<T>,
        text: &Tensor<T>,
        t: &[usize],
    ) -> Result<Tensor<T>> {
        self.check_inputs(z.shape(), image.shape(), text.shape(), t)?;
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.input(p.clone())).collect();
        let (zv, iv, tv) = (g.input(z.clone()), g.input(image.clone()), g.input(text.clone()));
        let out = self.forward(&mut g, vars, zv, iv, tv, t)?;
        Ok(g.value(out).clone())
    }

    /// Denoising loss `mean((ε − ε_θ(√ᾱ·z0 + √(1−ᾱ)·ε, t, e_T, e_I))²)` and,
    /// when requested, its gradient with respect to every parameter.
    pub fn loss_with<T: Scalar>(
        &self,
        params: &[Tensor<T>],
        batch: &DenoiseBatch<T>,
        alpha_bar: &[f64],
        want_grad: bool,
    ) -> Result<(f64, Option<Vec<Tensor<T>>>)> {
        let s = batch.z0.shape();
        self.check_inputs(s, batch.image.shape(), batch.text.shape(), &batch.t)?;
        if batch.eps.shape() != s {
            return Err(Error::Shape(format!("noise {:?} vs latent {s:?}", batch.eps.shape())));
        }
        let per = s[1] * s[2] * s[3];
        let mut zt = Vec::with_capacity(batch.z0.numel());
        for (n, &t) in batch.t.iter().enumerate() {
            let ab = *alpha_bar
                .get(t.wrapping_sub(1))
                .ok_or_else(|| Error::InvalidArgument(format!("timestep {t} outside schedule")))?;
            let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
            let x0 = &batch.z0.data()[n * per..(n + 1) * per];
            let ep = &batch.eps.data()[n * per..(n + 1) * per];
            zt.extend(x0.iter().zip(ep).map(|(&x, &e)| T::from_f64(a * x.as_f64() + b * e.as_f64())));
        }
        let mut g = Graph::new();
        let vars = if want_grad {
            bind(&mut g, params)
        } else {
            params.iter().map(|p| g.input(p.clone())).collect()
        };
        let zv = g.input(Tensor::new(s, zt)?);
        let iv = g.input(batch.image.clone());
        let tv = g.input(batch.text.clone());
        let pred = self.forward(&mut g, vars.clone(), zv, iv, tv, &batch.t)?;
        let loss = g.mse(pred, batch.eps.clone())?;
        let value = g.value(loss).item().as_f64();
        if !value.is_finite() {
            return Err(Error::Numeric { layer: "loss".into() });
        }
        if !want_grad {
            return Ok((value, None));
        }
        let mut grads = g.backward(loss)?;
        let out = vars
            .iter()
            .zip(params)
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect::<Vec<_>>();
        if !out.iter().all(Tensor::is_finite) {
            return Err(Error::Numeric { layer: "backward".into() });
        }
        Ok((value, Some(out)))
    }

    /// Loss and gradients in `f32` with the current parameters.
    pub fn loss_and_grad(&self, batch: &DenoiseBatch<f32>, alpha_bar: &[f64]) -> Result<(f32, Vec<Tensor<f32>>)> {
        let (loss, grads) = self.loss_with(self.params.tensors(), batch, alpha_bar, true)?;
        Ok((loss as f32, grads.expect("requested")))
    }
}

/// Stacks per-sample text embeddings (or zeros for `None`) into `[N, m, d]`.
pub fn stack_text(text: &[Option<&EmbeddingMatrix>], m: usize, d: usize) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(text.len() * m * d);
    for e in text {
        match e {
            Some(e) if e.shape() == (m, d) => data.extend_from_slice(e.as_slice()),
            Some(e) => {
                return Err(Error::Shape(format!(
                    "text embedding {:?} but the denoiser expects ({m}, {d})",
                    e.shape()
                )))
            }
            None => data.extend(std::iter::repeat_n(0.0, m * d)),
        }
    }
    Tensor::new(&[text.len(), m, d], data)
}

impl NoisePredictor for Denoiser {
    fn predict_batch(
        &self,
        z_t: &Tensor<f32>,
        t: &[usize],
        text: &[Option<&EmbeddingMatrix>],
        image: &Tensor<f32>,
    ) -> Result<Tensor<f32>> {
        let text = stack_text(text, self.config.text_m, self.config.text_d)?;
        self.predict_with(self.params.tensors(), z_t, image, &text, t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(mode: ConditioningMode) -> DenoiserConfig {
        DenoiserConfig {
            latent_channels: 1,
            base_width: 4,
            levels: 1,
            time_embed_dim: 4,
            text_m: 3,
            text_d: 2,
            conditioning_mode: mode,
            attn_dim: 4,
        }
    }

    #[test]
    fn parameter_count_matches_formula() {
        for mode in [ConditioningMode::CrossAttention, ConditioningMode::PooledAdditive] {
            for levels in 0..3 {
                let cfg = DenoiserConfig {
                    levels,
                    conditioning_mode: mode,
                    ..small(mode)
                };
                let d = Denoiser::init(cfg, 1).unwrap();
                assert_eq!(d.params.count(), cfg.parameter_count(), "{cfg:?}");
            }
        }
    }

    #[test]
    fn golden_parameter_counts() {
        // Hand-evaluated for the small configs above.
        // levels=1, cross-attention: time 2·(16+4)=40, conv_in 4·2·9+4=76,
        // block(4) = 2·(144+4)+16+4 = 316, down conv 8·4·9+8 = 296,
        // merge 4·12·9+4 = 436, block(4) = 316, mid block(8) = 2·(576+8)+32+8 = 1208,
        // attention 4·8 + 2·4·2 + 8·4 = 80, conv_out 1·4·9+1 = 37. Total 2805.
        assert_eq!(small(ConditioningMode::CrossAttention).parameter_count(), 2805);
        // Pooled: attention replaced by 8·2 = 16.
        assert_eq!(small(ConditioningMode::PooledAdditive).parameter_count(), 2741);
        assert_eq!(DenoiserConfig::default().parameter_count(), 736_964);
    }

    #[test]
    fn names_depend_only_on_config() {
        let a = Denoiser::init(small(ConditioningMode::CrossAttention), 1).unwrap();
        let b = Denoiser::init(small(ConditioningMode::CrossAttention), 2).unwrap();
        assert!(a.params.same_layout(&b.params));
        assert_ne!(a.params, b.params);
        assert!(Denoiser::from_params(small(ConditioningMode::PooledAdditive), a.params.clone()).is_err());
    }

    #[test]
    fn zero_output_layer_predicts_zero() {
        let d = Denoiser::init(small(ConditioningMode::CrossAttention), 3).unwrap();
        let z = Tensor::full(&[2, 1, 4, 4], 0.7f32);
        let e = EmbeddingMatrix::new(3, 2, vec![1.0; 6]).unwrap();
        let out = d.predict_batch(&z, &[1, 5], &[Some(&e), None], &z).unwrap();
        assert_eq!(out.shape(), z.shape());
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_errors() {
        let d = Denoiser::init(small(ConditioningMode::CrossAttention), 3).unwrap();
        let z = Tensor::zeros(&[1, 1, 4, 4]);
        let odd = Tensor::zeros(&[1, 1, 5, 4]);
        assert!(matches!(d.predict_batch(&odd, &[1], &[None], &odd), Err(Error::Shape(_))));
        assert!(matches!(d.predict_batch(&z, &[1], &[None], &odd), Err(Error::Shape(_))));
        let wrong = EmbeddingMatrix::zeros(2, 2);
        assert!(matches!(d.predict_batch(&z, &[1], &[Some(&wrong)], &z), Err(Error::Shape(_))));
    }

    #[test]
    fn non_finite_input_names_a_layer() {
        let d = Denoiser::init(small(ConditioningMode::CrossAttention), 3).unwrap();
        let mut z = Tensor::zeros(&[1, 1, 4, 4]);
        z.data_mut()[0] = f32::NAN;
        match d.predict_batch(&z, &[1], &[None], &Tensor::zeros(&[1, 1, 4, 4])) {
            Err(Error::Numeric { layer }) => assert_eq!(layer, "conv_in"),
            other => panic!("{other:?}"),
        }
    }
}
