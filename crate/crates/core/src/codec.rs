//! The autoencoder pair `E`, `D` between images and latents.
//!
//! Identity mode maps pixels affinely, `z = 2x − 1` and `x = (z + 1) / 2`,
//! with `f = 1`. Learned mode is a small convolutional encoder with
//! `log2 f` stride-2 stages and a `tanh` output, and a mirrored decoder with
//! nearest-neighbour upsampling whose output is clamped to `[0, 1]`.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::diffusion::LatentTensor;
use crate::error::{Error, Result};
use crate::imageio::ImageTensor;
use crate::optim::{clip_global_norm, optimizer_step, AdamState};
use crate::params::{bind, load_checkpoint, save_checkpoint, Initializer, ParamSet};
use crate::rng;
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_KIND: &str = "codec";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecMode {
    Identity,
    Learned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecConfig {
    pub mode: CodecMode,
    pub image_channels: usize,
    /// Spatial downsample factor `f`; a power of two, `1` in identity mode.
    pub downsample: usize,
    /// Latent channels in learned mode; identity mode uses `image_channels`.
    pub latent_channels: usize,
    pub width: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig::learned(1)
    }
}

impl CodecConfig {
    pub fn learned(image_channels: usize) -> Self {
        CodecConfig {
            mode: CodecMode::Learned,
            image_channels,
            downsample: 4,
            latent_channels: 4,
            width: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_channels == 0 {
            return Err(Error::Config("codec image_channels must be positive".into()));
        }
        match self.mode {
            CodecMode::Identity if self.downsample != 1 || self.latent_channels != self.image_channels => Err(
                Error::Config("identity codec needs downsample = 1 and latent_channels = image_channels".into()),
            ),
            CodecMode::Learned if !self.downsample.is_power_of_two() || self.latent_channels == 0 || self.width == 0 => {
                Err(Error::Config(
                    "learned codec needs a power-of-two downsample and positive widths".into(),
                ))
            }
            _ => Ok(()),
        }
    }

    fn stages(&self) -> usize {
        self.downsample.trailing_zeros() as usize
    }

    /// Latent shape for an image of shape `[C, H, W]`.
    pub fn latent_shape(&self, image: [usize; 3]) -> Result<[usize; 3]> {
        let f = self.downsample;
        if image[0] != self.image_channels || image[1] % f != 0 || image[2] % f != 0 || image[1] == 0 || image[2] == 0 {
            return Err(Error::Shape(format!(
                "image {image:?} incompatible with {} channels and downsample {f}",
                self.image_channels
            )));
        }
        Ok([self.latent_channels, image[1] / f, image[2] / f])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codec {
    pub config: CodecConfig,
    pub params: ParamSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        CodecTrainConfig {
            steps: 1500,
            batch: 16,
            lr: 2e-3,
        }
    }
}

impl Codec {
    pub fn identity(image_channels: usize) -> Self {
        Codec {
            config: CodecConfig {
                mode: CodecMode::Identity,
                image_channels,
                downsample: 1,
                latent_channels: image_channels,
                width: 0,
            },
            params: ParamSet::new(),
        }
    }

    pub fn init(config: CodecConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut stream = rng::stream(rng::derive(seed, "codec-init"));
        let mut init = Initializer::new(&mut stream);
        if config.mode == CodecMode::Learned {
            let (w, c, l) = (config.width, config.image_channels, config.latent_channels);
            init.conv("enc.in", w, c, 3)?;
            for i in 0..config.stages() {
                init.conv(&format!("enc.down.{i}"), w, w, 3)?;
            }
            init.conv("enc.out", l, w, 3)?;
            init.conv("dec.in", w, l, 3)?;
            for i in 0..config.stages() {
                init.conv(&format!("dec.up.{i}"), w, w, 3)?;
            }
            init.conv("dec.out", c, w, 3)?;
        }
        Ok(Codec { config, params: init.set })
    }

    pub fn from_params(config: CodecConfig, params: ParamSet) -> Result<Self> {
        let reference = Codec::init(config, 0)?;
        if !reference.params.same_layout(&params) {
            return Err(Error::Config("checkpoint parameters do not match the codec config".into()));
        }
        Ok(Codec { config, params })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let config = serde_json::to_value(self.config).map_err(|e| Error::parse("codec config", e))?;
        save_checkpoint(path, CHECKPOINT_KIND, &config, &self.params)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let (config, params) = load_checkpoint(path, CHECKPOINT_KIND)?;
        let config: CodecConfig =
            serde_json::from_value(config).map_err(|e| Error::parse(path.display().to_string(), e))?;
        config.validate()?;
        Self::from_params(config, params)
    }

    fn conv<T: Scalar>(&self, g: &mut Graph<T>, vars: &[Var], name: &str, x: Var, stride: usize) -> Result<Var> {
        let w = vars[self.params.id(&format!("{name}.weight"))?];
        let b = vars[self.params.id(&format!("{name}.bias"))?];
        g.conv2d(x, w, b, stride, 1)
    }

    fn encoder<T: Scalar>(&self, g: &mut Graph<T>, vars: &[Var], x: Var) -> Result<Var> {
        let mut h = self.conv(g, vars, "enc.in", x, 1)?;
        h = g.silu(h);
        for i in 0..self.config.stages() {
            h = self.conv(g, vars, &format!("enc.down.{i}"), h, 2)?;
            h = g.silu(h);
        }
        let z = self.conv(g, vars, "enc.out", h, 1)?;
        Ok(g.tanh(z))
    }

    /// Decoder output before clamping.
    fn decoder<T: Scalar>(&self, g: &mut Graph<T>, vars: &[Var], z: Var) -> Result<Var> {
        let mut h = self.conv(g, vars, "dec.in", z, 1)?;
        h = g.silu(h);
        for i in 0..self.config.stages() {
            h = g.upsample2x(h)?;
            h = self.conv(g, vars, &format!("dec.up.{i}"), h, 1)?;
            h = g.silu(h);
        }
        self.conv(g, vars, "dec.out", h, 1)
    }

    fn constants(&self, g: &mut Graph<f32>) -> Vec<Var> {
        self.params.tensors().iter().map(|p| g.input(p.clone())).collect()
    }

    pub fn encode(&self, x: &ImageTensor) -> Result<LatentTensor> {
        let shape = self.config.latent_shape(x.shape())?;
        match self.config.mode {
            CodecMode::Identity => LatentTensor::new(shape, x.values().iter().map(|&v| 2.0 * v - 1.0).collect()),
            CodecMode::Learned => {
                let mut g = Graph::new();
                let vars = self.constants(&mut g);
                let xv = g.input(ImageTensor::stack(&[x])?);
                let z = self.encoder(&mut g, &vars, xv)?;
                LatentTensor::new(shape, g.value(z).data().to_vec())
            }
        }
    }

    pub fn decode(&self, z: &LatentTensor) -> Result<ImageTensor> {
        let [c, h, w] = z.shape();
        if c != self.config.latent_channels {
            return Err(Error::Shape(format!(
                "latent has {c} channels, codec expects {}",
                self.config.latent_channels
            )));
        }
        let f = self.config.downsample;
        let shape = [self.config.image_channels, h * f, w * f];
        match self.config.mode {
            CodecMode::Identity => ImageTensor::clamped(shape, z.values().iter().map(|&v| (v + 1.0) / 2.0).collect()),
            CodecMode::Learned => {
                let mut g = Graph::new();
                let vars = self.constants(&mut g);
                let zv = g.input(LatentTensor::stack(&[z])?);
                let x = self.decoder(&mut g, &vars, zv)?;
                ImageTensor::clamped(shape, g.value(x).data().to_vec())
            }
        }
    }

    /// Mean squared reconstruction error of `decode(encode(x))` over images.
    pub fn reconstruction_error(&self, images: &[ImageTensor]) -> Result<f64> {
        let mut sum = 0.0;
        let mut count = 0usize;
        for x in images {
            let y = self.decode(&self.encode(x)?)?;
            sum += x
                .values()
                .iter()
                .zip(y.values())
                .map(|(&a, &b)| f64::from(a - b).powi(2))
                .sum::<f64>();
            count += x.values().len();
        }
        Ok(sum / count.max(1) as f64)
    }

    fn loss_and_grad(&self, batch: &[&ImageTensor]) -> Result<(f32, Vec<Tensor<f32>>)> {
        let x = ImageTensor::stack(batch)?;
        let mut g = Graph::new();
        let vars = bind(&mut g, self.params.tensors());
        let xv = g.input(x.clone());
        let z = self.encoder(&mut g, &vars, xv)?;
        let y = self.decoder(&mut g, &vars, z)?;
        let loss = g.mse(y, x)?;
        let mut grads = g.backward(loss)?;
        let out = vars
            .iter()
            .zip(self.params.tensors())
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        Ok((g.value(loss).item(), out))
    }
}

/// Trains a codec by minimizing reconstruction MSE with Adam. Batches are
/// drawn by shuffling the dataset each epoch. Returns the codec and the
/// per-step losses.
pub fn train_codec(
    images: &[ImageTensor],
    config: CodecConfig,
    train: &CodecTrainConfig,
    seed: u64,
) -> Result<(Codec, Vec<f32>)> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("cannot train a codec on an empty dataset".into()));
    }
    let mut codec = Codec::init(config, seed)?;
    for img in images {
        config.latent_shape(img.shape())?;
    }
    if config.mode == CodecMode::Identity || train.steps == 0 {
        return Ok((codec, Vec::new()));
    }
    let mut r = rng::stream(rng::derive(seed, "codec-train"));
    let mut order: Vec<usize> = Vec::new();
    let mut state = AdamState::new(&codec.params);
    let mut losses = Vec::with_capacity(train.steps);
    let batch = train.batch.max(1);
    for step in 0..train.steps {
        let mut picked = Vec::with_capacity(batch);
        while picked.len() < batch {
            if order.is_empty() {
                order = (0..images.len()).collect();
                order.shuffle(&mut r);
            }
            picked.push(&images[order.pop().expect("refilled")]);
        }
        let (loss, mut grads) = codec.loss_and_grad(&picked)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { stage: "codec training", step });
        }
        clip_global_norm(&mut grads, 1.0);
        optimizer_step(&mut codec.params, &grads, &mut state, train.lr)?;
        losses.push(loss);
        if step % 100 == 0 {
            log::debug!("codec step {step}: loss {loss:.5}");
        }
    }
    Ok((codec, losses))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(values: Vec<f32>, h: usize, w: usize) -> ImageTensor {
        ImageTensor::new([1, h, w], values).unwrap()
    }

    #[test]
    fn identity_round_trip_is_exact() {
        let c = Codec::identity(1);
        let x = img((0..16).map(|i| i as f32 / 15.0).collect(), 4, 4);
        let z = c.encode(&x).unwrap();
        assert_eq!(z.values()[0], -1.0);
        assert_eq!(z.values()[15], 1.0);
        let y = c.decode(&z).unwrap();
        for (a, b) in x.values().iter().zip(y.values()) {
            assert!((a - b).abs() <= f32::EPSILON / 4.0);
        }
        // Every 8-bit pixel value survives the round trip unchanged on disk.
        let grid = img((0..256).map(|k| k as f32 / 255.0).collect(), 16, 16);
        let back = c.decode(&c.encode(&grid).unwrap()).unwrap();
        assert_eq!(back.quantized(), grid.quantized());
        let upper = img((0..16).map(|i| 0.5 + i as f32 / 30.0).collect(), 4, 4);
        assert_eq!(c.decode(&c.encode(&upper).unwrap()).unwrap(), upper);
        let gray = c.decode(&LatentTensor::zeros([1, 4, 4])).unwrap();
        assert!(gray.values().iter().all(|&v| v == 0.5));
        let wild = LatentTensor::new([1, 1, 2], vec![-3.0, 5.0]).unwrap();
        assert_eq!(c.decode(&wild).unwrap().values(), &[0.0, 1.0]);
    }

    #[test]
    fn learned_shapes_and_range() {
        let cfg = CodecConfig {
            width: 8,
            ..CodecConfig::learned(1)
        };
        let c = Codec::init(cfg, 1).unwrap();
        let x = img(vec![0.3; 32 * 32], 32, 32);
        let z = c.encode(&x).unwrap();
        assert_eq!(z.shape(), [4, 8, 8]);
        let y = c.decode(&z).unwrap();
        assert_eq!(y.shape(), [1, 32, 32]);
        let big = LatentTensor::new([4, 2, 2], vec![50.0; 16]).unwrap();
        assert!(c.decode(&big).unwrap().values().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(matches!(c.encode(&img(vec![0.0; 30 * 32], 30, 32)), Err(Error::Shape(_))));
    }

    #[test]
    fn config_validation() {
        let bad = CodecConfig {
            downsample: 2,
            ..Codec::identity(1).config
        };
        assert!(bad.validate().is_err());
        let bad = CodecConfig {
            downsample: 3,
            ..CodecConfig::learned(1)
        };
        assert!(bad.validate().is_err());
        assert!(train_codec(&[], CodecConfig::learned(1), &CodecTrainConfig::default(), 0).is_err());
    }
}
