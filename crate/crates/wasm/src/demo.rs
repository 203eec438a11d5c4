use conceptmix::codec::Codec;
use conceptmix::diffusion::{forward_diffuse, LatentTensor, ScheduleConfig};
use conceptmix::embedding::{build_caption, EmbeddingMatrix, TokenEmbedder};
use conceptmix::imageio::ImageTensor;
use conceptmix::mixer::{mix_embeddings, MixerConfig};
use conceptmix::shapes::{describe, random_spec, render, ShapeSpec, SHAPE_CLASSES};
use conceptmix::{rng, Error, Result};

const MAX_SIZE: usize = 128;
const MAX_CELLS: usize = 4096;

pub fn parse_lines(text: &str) -> Vec<&str> {
    text.lines().map(str::trim).filter(|l| !l.is_empty()).collect()
}

pub fn mix_sources(captions: &str, m: usize, d: usize, coarse: usize, fine: usize, seed: u64) -> Result<Vec<u32>> {
    let lines = parse_lines(captions);
    if lines.len() < 2 {
        return Err(Error::InvalidArgument("enter at least two captions".into()));
    }
    if m * d > MAX_CELLS {
        return Err(Error::InvalidArgument(format!("m × d is limited to {MAX_CELLS}")));
    }
    let embedder = TokenEmbedder::new(0, m, d)?;
    let pool: Vec<EmbeddingMatrix> = lines.iter().map(|l| embedder.embed_text(l)).collect();
    let config = MixerConfig {
        coarse_passes: coarse,
        fine_passes: fine,
        outputs: 1,
        seed,
    };
    let mixed = mix_embeddings(&pool, "demo", &config, &embedder.null_embedding())?;
    // Replaying the mix over constant "index" matrices labels every entry with its source.
    let labels: Vec<EmbeddingMatrix> = (0..pool.len())
        .map(|k| EmbeddingMatrix::new(m, d, vec![k as f32; m * d]))
        .collect::<Result<_>>()?;
    let sources = mixed[0].provenance.replay(&labels)?;
    Ok(sources.as_slice().iter().map(|&v| v as u32).collect())
}

pub fn alpha_bars(steps: usize, beta_start: f64, beta_end: f64) -> Result<Vec<f64>> {
    let schedule = ScheduleConfig {
        steps,
        beta_start,
        beta_end,
    }
    .build()?;
    Ok(schedule.alpha_bars().to_vec())
}

#[derive(Debug, Clone, Copy)]
pub struct Schedule {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

fn spec(class: &str, size: usize, seed: u64) -> Result<ShapeSpec> {
    if !SHAPE_CLASSES.contains(&class) {
        return Err(Error::InvalidArgument(format!("unknown shape {class:?}")));
    }
    if !(8..=MAX_SIZE).contains(&size) {
        return Err(Error::InvalidArgument(format!("size must be in 8..={MAX_SIZE}")));
    }
    Ok(random_spec(class, size, &mut rng::stream(seed)))
}

pub fn shape_image(class: &str, size: usize, seed: u64, t: usize, schedule: Schedule) -> Result<ImageTensor> {
    let clean = render(&spec(class, size, seed)?, size)?;
    if t == 0 {
        return Ok(clean);
    }
    let schedule = ScheduleConfig {
        steps: schedule.steps,
        beta_start: schedule.beta_start,
        beta_end: schedule.beta_end,
    }
    .build()?;
    let codec = Codec::identity(1);
    let z0 = codec.encode(&clean)?;
    let eps = LatentTensor::standard_normal(z0.shape(), &mut rng::stream(rng::derive(seed, "noise")));
    codec.decode(&forward_diffuse(&z0, t, &eps, &schedule)?)
}

pub fn shape_rgba(class: &str, size: usize, seed: u64, t: usize, schedule: Schedule) -> Result<Vec<u8>> {
    let img = shape_image(class, size, seed, t, schedule)?;
    Ok(img
        .values()
        .iter()
        .flat_map(|&v| {
            let g = (v * 255.0).round() as u8;
            [g, g, g, 255]
        })
        .collect())
}

pub fn shape_caption(class: &str, size: usize, seed: u64) -> Result<String> {
    let descriptor = describe(&spec(class, size, seed)?, size);
    Ok(build_caption(class, Some(&descriptor))?.text)
}
