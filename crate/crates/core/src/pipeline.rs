//! Training the conditional denoiser on a labeled dataset, generating new
//! images from mixed caption embeddings, and assembling augmented manifests.
//!
//! Training draws a class, then two images of that class: `x` is encoded as
//! the clean latent and `x'` as the image conditioning. Text conditioning
//! comes from a per-class pool of mixed embeddings that is rebuilt every
//! `refresh_every` steps. Generation picks a conditional image of the class,
//! draws one mixed embedding, runs the guided sampler and decodes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::codec::Codec;
use crate::dataset::{Manifest, Provenance, Record};
use crate::denoiser::{stack_text, DenoiseBatch, Denoiser, DenoiserConfig};
use crate::diffusion::{sample_batch, GuidanceConfig, LatentTensor, NoiseSchedule, SampleJob};
use crate::embedding::{build_caption, Caption, CaptionPool, CaptionSource, EmbeddingMatrix, TokenEmbedder, CAPTION_PREFIX};
use crate::error::{Error, Result};
use crate::imageio::{load_image, save_image, ImageTensor};
use crate::mixer::{mix_embeddings, MixProvenance, MixedConditioning, MixerConfig};
use crate::optim::{clip_global_norm, optimizer_step, AdamState, OptimizerConfig};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

/// Chains sampled together; bounds memory during generation.
const SAMPLE_CHUNK: usize = 32;

/// Per-class caption pools built from the real records' captions. Captions
/// that already carry the prefix are kept as they are; others become
/// descriptors of a templated caption. Duplicates are dropped. A class with
/// no captions gets the bare templated caption.
pub fn caption_pools(manifest: &Manifest) -> Result<BTreeMap<String, CaptionPool>> {
    let mut pools = BTreeMap::new();
    for class in &manifest.classes {
        let mut captions: Vec<Caption> = Vec::new();
        for r in manifest.records.iter().filter(|r| &r.label == class && r.provenance == Provenance::Real) {
            let caption = match r.caption.as_deref() {
                Some(text) if text.starts_with(CAPTION_PREFIX) => Caption {
                    class_label: class.clone(),
                    text: text.to_string(),
                    source: CaptionSource::Templated,
                },
                other => build_caption(class, other)?,
            };
            if !captions.iter().any(|c| c.text == caption.text) {
                captions.push(caption);
            }
        }
        if captions.is_empty() {
            captions.push(build_caption(class, None)?);
        }
        pools.insert(class.clone(), CaptionPool::new(class, captions)?);
    }
    Ok(pools)
}

/// Mixing with a single caption has no donor; such classes use their one
/// embedding unmixed.
fn mix_or_copy(
    pool: &[EmbeddingMatrix],
    class: &str,
    config: &MixerConfig,
    null: &EmbeddingMatrix,
) -> Result<Vec<MixedConditioning>> {
    if pool.len() == 1 {
        let plain = MixerConfig {
            coarse_passes: 0,
            fine_passes: 0,
            ..*config
        };
        return mix_embeddings(pool, class, &plain, null);
    }
    mix_embeddings(pool, class, config, null)
}

/// Indices `(x, x')` into `candidates`, both uniform; `x'` differs from `x`
/// whenever there is more than one candidate.
pub fn sample_pair_indices(count: usize, rng: &mut Stream) -> Result<(usize, usize)> {
    match count {
        0 => Err(Error::InvalidArgument("no images to pair".into())),
        1 => Ok((0, 0)),
        n => {
            let i = rng.random_range(0..n);
            let j = rng.random_range(0..n - 1);
            Ok((i, if j >= i { j + 1 } else { j }))
        }
    }
}

/// Record indices of two real images of `class_label`.
pub fn sample_training_pair(manifest: &Manifest, class_label: &str, rng: &mut Stream) -> Result<(usize, usize)> {
    manifest.class_index(class_label)?;
    let idx = manifest.indices(class_label, true);
    if idx.is_empty() {
        return Err(Error::InvalidArgument(format!("class {class_label:?} has no real images")));
    }
    let (i, j) = sample_pair_indices(idx.len(), rng)?;
    Ok((idx[i], idx[j]))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub batch: usize,
    pub optimizer: OptimizerConfig,
    /// Steps between rebuilds of the mixed embedding pools.
    pub refresh_every: usize,
    /// Probability of replacing the text conditioning with the null embedding.
    pub text_dropout: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            steps: 2000,
            batch: 16,
            optimizer: OptimizerConfig { lr: 1e-3, clip_norm: 1.0 },
            refresh_every: 500,
            text_dropout: 0.1,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.refresh_every == 0 {
            return Err(Error::Config("batch and refresh_every must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.text_dropout) {
            return Err(Error::Config(format!("text_dropout {} outside [0, 1]", self.text_dropout)));
        }
        Ok(())
    }
}

/// Everything sampling needs besides the request itself.
#[derive(Clone, Copy)]
pub struct Generator<'a> {
    pub codec: &'a Codec,
    pub denoiser: &'a Denoiser,
    pub embedder: &'a TokenEmbedder,
    pub schedule: &'a NoiseSchedule,
}

fn check_compatible(codec: &Codec, denoiser: &DenoiserConfig, embedder: &TokenEmbedder, image: [usize; 3]) -> Result<[usize; 3]> {
    let latent = codec.config.latent_shape(image)?;
    let k = denoiser.spatial_multiple();
    if latent[0] != denoiser.latent_channels || latent[1] % k != 0 || latent[2] % k != 0 {
        return Err(Error::Config(format!(
            "latent shape {latent:?} does not fit a denoiser with {} channels and {} levels",
            denoiser.latent_channels, denoiser.levels
        )));
    }
    if (embedder.m, embedder.d) != (denoiser.text_m, denoiser.text_d) {
        return Err(Error::Config(format!(
            "embedder produces {}x{} embeddings but the denoiser expects {}x{}",
            embedder.m, embedder.d, denoiser.text_m, denoiser.text_d
        )));
    }
    Ok(latent)
}

/// Trains a denoiser from scratch. Returns it with the loss of every step.
#[allow(clippy::too_many_arguments)]
pub fn finetune_diffusion(
    manifest: &Manifest,
    codec: &Codec,
    embedder: &TokenEmbedder,
    config: DenoiserConfig,
    mixer: &MixerConfig,
    schedule: &NoiseSchedule,
    train: &FinetuneConfig,
    seed: u64,
) -> Result<(Denoiser, Vec<f32>)> {
    train.validate()?;
    mixer.validate()?;
    let mut denoiser = Denoiser::init(config, seed)?;
    if train.steps == 0 {
        return Ok((denoiser, Vec::new()));
    }
    let real = manifest.real();
    let images = real.load_images(None)?;
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("no real images to train on".into()))?;
    check_compatible(codec, &config, embedder, first.shape())?;
    let latents = images.iter().map(|x| codec.encode(x)).collect::<Result<Vec<_>>>()?;

    let pools = caption_pools(&real)?;
    let classes: Vec<&String> = real.classes.iter().filter(|c| !real.indices(c, true).is_empty()).collect();
    let members: Vec<Vec<usize>> = classes.iter().map(|c| real.indices(c, true)).collect();
    let pool_embeddings: Vec<Vec<EmbeddingMatrix>> = classes.iter().map(|c| embedder.embed_pool(&pools[*c])).collect();
    let null = embedder.null_embedding();

    let mut r = rng::stream(rng::derive(seed, "finetune"));
    let refresh_root = rng::derive(seed, "mvc-refresh");
    let mut state = AdamState::new(&denoiser.params);
    let mut mixed: Vec<Vec<MixedConditioning>> = Vec::new();
    let mut losses = Vec::with_capacity(train.steps);
    let per = latents[0].values().len();
    let (m, d) = (config.text_m, config.text_d);

    for step in 0..train.steps {
        if step % train.refresh_every == 0 {
            let cfg = MixerConfig {
                seed: rng::derive_index(refresh_root, (step / train.refresh_every) as u64),
                ..*mixer
            };
            mixed = classes
                .iter()
                .zip(&pool_embeddings)
                .map(|(c, pool)| mix_or_copy(pool, c, &cfg, &null))
                .collect::<Result<_>>()?;
        }
        let mut z0 = Vec::with_capacity(train.batch * per);
        let mut eps = Vec::with_capacity(train.batch * per);
        let mut image = Vec::with_capacity(train.batch * per);
        let mut text: Vec<Option<&EmbeddingMatrix>> = Vec::with_capacity(train.batch);
        let mut t = Vec::with_capacity(train.batch);
        for _ in 0..train.batch {
            let ci = r.random_range(0..classes.len());
            let (i, j) = sample_pair_indices(members[ci].len(), &mut r)?;
            z0.extend_from_slice(latents[members[ci][i]].values());
            image.extend_from_slice(latents[members[ci][j]].values());
            t.push(r.random_range(1..=schedule.steps()));
            eps.extend((0..per).map(|_| r.sample::<f32, _>(StandardNormal)));
            let dropped = r.random::<f64>() < train.text_dropout;
            let pick = r.random_range(0..mixed[ci].len());
            text.push(if dropped { None } else { Some(&mixed[ci][pick].e_cond) });
        }
        let shape = latents[0].shape();
        let dims = [train.batch, shape[0], shape[1], shape[2]];
        let batch = DenoiseBatch {
            z0: Tensor::new(&dims, z0)?,
            eps: Tensor::new(&dims, eps)?,
            image: Tensor::new(&dims, image)?,
            text: stack_text(&text, m, d)?,
            t,
        };
        let (loss, mut grads) = match denoiser.loss_and_grad(&batch, schedule.alpha_bars()) {
            Err(Error::Numeric { .. }) => return Err(Error::Divergence { stage: "training", step }),
            other => other?,
        };
        clip_global_norm(&mut grads, train.optimizer.clip_norm);
        optimizer_step(&mut denoiser.params, &grads, &mut state, train.optimizer.lr)?;
        if step % 100 == 0 || step + 1 == train.steps {
            log::info!("diffusion step {step}: loss {loss:.4}");
        }
        losses.push(loss);
    }
    Ok((denoiser, losses))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationRequest {
    pub class_label: String,
    pub count: usize,
    pub guidance: GuidanceConfig,
    pub mixer: MixerConfig,
    pub seed: u64,
}

/// What is needed to regenerate one synthetic image exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticMeta {
    pub class_label: String,
    pub chain_seed: u64,
    pub conditional_image: PathBuf,
    /// The class's caption pool, in order; `mix` indexes into it.
    pub captions: Vec<String>,
    pub mix: MixProvenance,
    pub guidance: GuidanceConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedImage {
    pub image: ImageTensor,
    pub meta: SyntheticMeta,
}

impl Generator<'_> {
    fn check(&self, image: [usize; 3]) -> Result<[usize; 3]> {
        if !self.denoiser.params.is_finite() {
            return Err(Error::Config("denoiser parameters are not finite".into()));
        }
        check_compatible(self.codec, &self.denoiser.config, self.embedder, image)
    }

    fn embed_captions(&self, captions: &[String]) -> Vec<EmbeddingMatrix> {
        captions.iter().map(|c| self.embedder.embed_text(c)).collect()
    }

    /// Samples and decodes a list of (conditional latent, text, seed) jobs.
    fn run(&self, jobs: &[(LatentTensor, EmbeddingMatrix, u64)], guidance: &GuidanceConfig) -> Result<Vec<ImageTensor>> {
        let null = self.embedder.null_embedding();
        let mut out = Vec::with_capacity(jobs.len());
        for chunk in jobs.chunks(SAMPLE_CHUNK) {
            let batch: Vec<SampleJob> = chunk
                .iter()
                .map(|(image, text, seed)| SampleJob {
                    text,
                    null_text: Some(&null),
                    image,
                    seed: *seed,
                })
                .collect();
            for z in sample_batch(self.denoiser, self.schedule, &batch, guidance)? {
                out.push(self.codec.decode(&z)?);
            }
        }
        Ok(out)
    }

    /// Generates `request.count` images of one class, conditioned on that
    /// class's real images and mixed captions.
    pub fn generate_images(&self, request: &GenerationRequest, manifest: &Manifest) -> Result<Vec<GeneratedImage>> {
        if request.count == 0 {
            return Err(Error::InvalidArgument("generation count must be at least 1".into()));
        }
        request.guidance.validate()?;
        let class = &request.class_label;
        manifest.class_index(class)?;
        let members = manifest.indices(class, true);
        if members.is_empty() {
            return Err(Error::InvalidArgument(format!("class {class:?} has no real images")));
        }
        let pools = caption_pools(&manifest.filtered(|r| &r.label == class))?;
        let captions: Vec<String> = pools[class].captions().iter().map(|c| c.text.clone()).collect();
        let pool = self.embed_captions(&captions);
        let mixer = MixerConfig {
            outputs: request.count,
            ..request.mixer
        };
        let mixed = mix_or_copy(&pool, class, &mixer, &self.embedder.null_embedding())?;

        let class_seed = rng::derive(request.seed, class);
        let mut pick = rng::stream(rng::derive(class_seed, "conditional"));
        let mut cache: BTreeMap<usize, LatentTensor> = BTreeMap::new();
        let mut jobs = Vec::with_capacity(request.count);
        let mut metas = Vec::with_capacity(request.count);
        for (i, cond) in mixed.into_iter().enumerate() {
            let rec = members[pick.random_range(0..members.len())];
            let path = &manifest.records[rec].path;
            if !cache.contains_key(&rec) {
                let img = load_image(path)?;
                self.check(img.shape())?;
                cache.insert(rec, self.codec.encode(&img)?);
            }
            let chain_seed = rng::derive_index(class_seed, i as u64);
            jobs.push((cache[&rec].clone(), cond.e_cond, chain_seed));
            metas.push(SyntheticMeta {
                class_label: class.clone(),
                chain_seed,
                conditional_image: path.clone(),
                captions: captions.clone(),
                mix: cond.provenance,
                guidance: request.guidance,
            });
        }
        let images = self.run(&jobs, &request.guidance)?;
        Ok(images
            .into_iter()
            .zip(metas)
            .map(|(image, meta)| GeneratedImage { image, meta })
            .collect())
    }

    /// Rebuilds a synthetic image from its stored metadata alone.
    pub fn regenerate(&self, meta: &SyntheticMeta) -> Result<ImageTensor> {
        let img = load_image(&meta.conditional_image)?;
        self.check(img.shape())?;
        let text = meta.mix.replay(&self.embed_captions(&meta.captions))?;
        let job = (self.codec.encode(&img)?, text, meta.chain_seed);
        Ok(self.run(&[job], &meta.guidance)?.remove(0))
    }
}

/// Synthetic images per class for a real class of `real` images:
/// `⌈ratio · real⌉`, treating products within rounding error of an integer
/// as that integer.
pub fn synthetic_count(real: usize, ratio: f64) -> Result<usize> {
    if !(ratio > 0.0 && ratio.is_finite()) {
        return Err(Error::InvalidArgument(format!("synthetic ratio must be positive, got {ratio}")));
    }
    let x = ratio * real as f64;
    let nearest = x.round();
    Ok(if (x - nearest).abs() <= 1e-9 * x.max(1.0) { nearest } else { x.ceil() } as usize)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub ratio: f64,
    pub guidance: GuidanceConfig,
    pub mixer: MixerConfig,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            ratio: 3.0,
            guidance: GuidanceConfig::default(),
            mixer: MixerConfig::default(),
            seed: 0,
        }
    }
}

/// Generates synthetic images for every class of `real`, writes them as
/// `out_dir/<class>/<class>_syn_<i>.png` and returns the real records
/// followed by the synthetic ones. The merged manifest is also saved as
/// `out_dir/manifest.json`.
pub fn build_augmented_dataset(real: &Manifest, config: &AugmentConfig, generator: &Generator, out_dir: &Path) -> Result<Manifest> {
    let real = real.real();
    let mut synthetic = Manifest::new(real.classes.clone())?;
    for class in &real.classes {
        let have = real.indices(class, true).len();
        if have == 0 {
            continue;
        }
        let request = GenerationRequest {
            class_label: class.clone(),
            count: synthetic_count(have, config.ratio)?,
            guidance: config.guidance,
            mixer: config.mixer,
            seed: config.seed,
        };
        log::info!("generating {} images of {class:?}", request.count);
        for (i, g) in generator.generate_images(&request, &real)?.into_iter().enumerate() {
            let path = out_dir.join(class).join(format!("{class}_syn_{i:04}.png"));
            save_image(&g.image, &path)?;
            synthetic.push(Record {
                path,
                label: class.clone(),
                caption: g.meta.captions.get(g.meta.mix.base).cloned(),
                provenance: Provenance::Synthetic,
                meta: Some(serde_json::to_value(&g.meta).map_err(|e| Error::parse("synthetic metadata", e))?),
            })?;
        }
    }
    let merged = real.merged(&synthetic)?;
    merged.save(&out_dir.join("manifest.json"))?;
    Ok(merged)
}

/// Parses the metadata stored on a synthetic record.
pub fn record_meta(record: &Record) -> Result<SyntheticMeta> {
    let value = record
        .meta
        .clone()
        .ok_or_else(|| Error::InvalidArgument(format!("{} has no generation metadata", record.path.display())))?;
    serde_json::from_value(value).map_err(|e| Error::parse(record.path.display().to_string(), e))
}
