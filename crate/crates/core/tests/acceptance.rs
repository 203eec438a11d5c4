//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.
//!
//! Run a subset with `cargo test --test acceptance -- <substring>`.

use std::path::Path;
use std::time::{Duration, Instant};

use conceptmix::classifier::{
    compare_strategies, train_classifier, BatchComposer, Composition, EvalReport, TrainingStrategy,
};
use conceptmix::codec::{train_codec, Codec, CodecTrainConfig};
use conceptmix::config::RunConfig;
use conceptmix::dataset::{Manifest, Provenance, Record};
use conceptmix::denoiser::{ConditioningMode, Denoiser, DenoiserConfig};
use conceptmix::diffusion::{
    cfg_predict, forward_diffuse, reverse_step, sample_batch, GuidanceConfig, LatentTensor, NoiseSchedule, SampleJob,
};
use conceptmix::embedding::{EmbeddingMatrix, TokenEmbedder};
use conceptmix::mixer::{mix_embeddings, MixStep, MixerConfig};
use conceptmix::mlp::{FitConfig, MlpConfig, MlpDenoiser};
use conceptmix::pipeline::{build_augmented_dataset, finetune_diffusion, FinetuneConfig, Generator};
use conceptmix::shapes::{generate_shapes, ShapesConfig, SHAPE_CLASSES};
use conceptmix::{rng, Result};
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;

mod common;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome {
        pass,
        detail: detail.into(),
    })
}

struct Criterion {
    name: &'static str,
    budget: Duration,
    run: fn() -> Result<Outcome>,
}

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria = [
        Criterion { name: "mixer matches straight-line oracle", budget: secs(5), run: mixer_oracle },
        Criterion { name: "mixing positional closure", budget: secs(30), run: positional_closure },
        Criterion { name: "forward diffusion moments", budget: secs(10), run: forward_moments },
        Criterion { name: "guidance arithmetic", budget: secs(1), run: guidance_arithmetic },
        Criterion { name: "reverse step vs 64-bit oracle", budget: secs(1), run: reverse_step_oracle },
        Criterion { name: "denoiser gradient check", budget: secs(120), run: gradient_check },
        Criterion { name: "toy mixture fidelity", budget: secs(300), run: toy_mixture },
        Criterion { name: "end-to-end strategy comparison", budget: secs(1800), run: end_to_end },
        Criterion { name: "rsp admission frequency", budget: secs(10), run: rsp_frequency },
        Criterion { name: "determinism and persistence", budget: secs(300), run: determinism },
    ];
    let mut failed = 0;
    for c in criteria.iter().filter(|c| filter.is_empty() || filter.iter().any(|f| c.name.contains(f.as_str()))) {
        let start = Instant::now();
        let result = (c.run)();
        let elapsed = start.elapsed();
        let (pass, detail) = match result {
            Ok(o) => (o.pass && elapsed <= c.budget, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            failed += 1;
        }
        println!(
            "{} {}: {detail} [{:.1}s of {}s]",
            if pass { "PASS" } else { "FAIL" },
            c.name,
            elapsed.as_secs_f64(),
            c.budget.as_secs()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

fn random_pool(r: &mut rng::Stream, k: usize, m: usize, d: usize) -> Vec<EmbeddingMatrix> {
    (0..k)
        .map(|_| EmbeddingMatrix::new(m, d, (0..m * d).map(|_| r.sample::<f32, _>(StandardNormal)).collect()).unwrap())
        .collect()
}

/// Straight-line mixing over plain vectors, drawing from the documented stream.
fn oracle_mix(pool: &[Vec<f32>], m: usize, d: usize, p: usize, q: usize, n: usize, seed: u64, label: &str) -> Vec<Vec<f32>> {
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(rng::derive(seed, label));
    let k = pool.len();
    let mut outs = Vec::new();
    for _ in 0..n {
        let base = r.random_range(0..=k - 1);
        let mut x = pool[base].clone();
        let donor = |r: &mut rand_chacha::ChaCha8Rng| {
            let j = r.random_range(0..=k - 2);
            if j >= base {
                j + 1
            } else {
                j
            }
        };
        let pair = |r: &mut rand_chacha::ChaCha8Rng, bound: usize| {
            let a = r.random_range(1..=bound);
            let mut b = r.random_range(1..=bound - 1);
            if b >= a {
                b += 1;
            }
            (a.min(b), a.max(b))
        };
        for _ in 0..p {
            let j = donor(&mut r);
            let (lo, hi) = pair(&mut r, m);
            for row in lo - 1..hi {
                for col in 0..d {
                    x[row * d + col] = pool[j][row * d + col];
                }
            }
        }
        for _ in 0..q {
            let j = donor(&mut r);
            let (lo, hi) = pair(&mut r, d);
            let row = r.random_range(1..=m) - 1;
            for col in lo - 1..hi {
                x[row * d + col] = pool[j][row * d + col];
            }
        }
        outs.push(x);
    }
    outs
}

fn mixer_oracle() -> Result<Outcome> {
    let mut configs = 0;
    let mut mismatches = 0;
    let mut data = rng::stream(17);
    for m in 2..=8 {
        for d in 2..=4 {
            for k in 1..=3 {
                for p in 0..=2 {
                    for q in 0..=2 {
                        if k == 1 && p + q > 0 {
                            continue;
                        }
                        for n in 1..=4 {
                            for seed in 0..100u64 {
                                configs += 1;
                                let pool = random_pool(&mut data, k, m, d);
                                let cfg = MixerConfig {
                                    coarse_passes: p,
                                    fine_passes: q,
                                    outputs: n,
                                    seed,
                                };
                                let null = EmbeddingMatrix::zeros(m, d);
                                let got = mix_embeddings(&pool, "oracle", &cfg, &null)?;
                                let flat: Vec<Vec<f32>> = pool.iter().map(|e| e.as_slice().to_vec()).collect();
                                let want = oracle_mix(&flat, m, d, p, q, n, seed, "oracle");
                                let same = got.len() == want.len()
                                    && got.iter().zip(&want).all(|(g, w)| {
                                        g.e_cond.as_slice().iter().map(|v| v.to_bits()).eq(w.iter().map(|v| v.to_bits()))
                                    });
                                if !same {
                                    mismatches += 1;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    outcome(mismatches == 0, format!("{configs} configurations, {mismatches} mismatches"))
}

fn positional_closure() -> Result<Outcome> {
    let mut r = rng::stream(99);
    let mut violations = 0;
    let runs = 10_000;
    for run in 0..runs {
        let (m, d, k) = (r.random_range(2..=16), r.random_range(2..=32), r.random_range(2..=5));
        let pool = random_pool(&mut r, k, m, d);
        let cfg = MixerConfig {
            coarse_passes: r.random_range(0..=3),
            fine_passes: r.random_range(0..=3),
            outputs: 1,
            seed: run,
        };
        let mixed = mix_embeddings(&pool, "closure", &cfg, &EmbeddingMatrix::zeros(m, d))?;
        let e = &mixed[0].e_cond;
        for i in 0..m {
            for j in 0..d {
                if !pool.iter().any(|p| p.get(i, j).to_bits() == e.get(i, j).to_bits()) {
                    violations += 1;
                }
            }
        }
        // Every recorded edit must stay inside the matrix.
        for step in &mixed[0].provenance.steps {
            let ok = match *step {
                MixStep::Coarse { rows: (a, b), .. } => 1 <= a && a < b && b <= m,
                MixStep::Fine { row, cols: (a, b), .. } => (1..=m).contains(&row) && 1 <= a && a < b && b <= d,
            };
            if !ok {
                violations += 1;
            }
        }
    }
    outcome(violations == 0, format!("{runs} runs, {violations} violations"))
}

fn forward_moments() -> Result<Outcome> {
    let schedule = common::default_schedule();
    let t = schedule.steps() / 2;
    let ab = schedule.alpha_bar(t)?;
    let x0 = LatentTensor::new([1, 4, 4], (0..16).map(|i| i as f32 / 8.0 - 1.0).collect())?;
    let draws = 10_000;
    let mut r = rng::stream(2024);
    let mut sum = vec![0f64; 16];
    let mut sq = vec![0f64; 16];
    for _ in 0..draws {
        let eps = LatentTensor::standard_normal([1, 4, 4], &mut r);
        let z = forward_diffuse(&x0, t, &eps, &schedule)?;
        for (i, &v) in z.values().iter().enumerate() {
            sum[i] += f64::from(v);
            sq[i] += f64::from(v) * f64::from(v);
        }
    }
    let n = draws as f64;
    let se = ((1.0 - ab) / n).sqrt();
    let mut worst_z = 0f64;
    let mut var_sum = 0f64;
    for i in 0..16 {
        let mean = sum[i] / n;
        let want = ab.sqrt() * f64::from(x0.values()[i]);
        worst_z = worst_z.max((mean - want).abs() / se);
        var_sum += (sq[i] - n * mean * mean) / (n - 1.0);
    }
    let var_rel = (var_sum / 16.0 / (1.0 - ab) - 1.0).abs();
    outcome(
        worst_z < 3.0 && var_rel < 0.02,
        format!("t={t}, worst mean deviation {worst_z:.2} SE, mean per-element variance off by {:.2}%", 100.0 * var_rel),
    )
}

fn ulps(a: f32, b: f32) -> u32 {
    if a == b {
        return 0;
    }
    let key = |x: f32| {
        let i = x.to_bits() as i32;
        if i < 0 {
            i32::MIN - i
        } else {
            i
        }
    };
    key(a).abs_diff(key(b))
}

fn guidance_arithmetic() -> Result<Outcome> {
    let mut r = rng::stream(5);
    let shape = [1, 8, 8];
    let mut worst = 0u32;
    let mut exact = true;
    for _ in 0..200 {
        let c = LatentTensor::standard_normal(shape, &mut r);
        let u = LatentTensor::standard_normal(shape, &mut r);
        exact &= cfg_predict(&c, &u, 0.0)? == u && cfg_predict(&c, &u, 1.0)? == c;
        let w: f64 = r.random_range(-2.0..10.0);
        let got = cfg_predict(&c, &u, w)?;
        // Equivalent form u + w·(c − u), evaluated in f64.
        for ((&g, &ci), &ui) in got.values().iter().zip(c.values()).zip(u.values()) {
            let (ci, ui) = (f64::from(ci), f64::from(ui));
            worst = worst.max(ulps(g, (ui + w * (ci - ui)) as f32));
        }
    }
    let one = LatentTensor::new([1, 1, 1], vec![1.0])?;
    let zero = LatentTensor::new([1, 1, 1], vec![0.0])?;
    let scalar = cfg_predict(&one, &zero, 7.5)?.values()[0];
    outcome(
        exact && scalar == 7.5 && worst <= 4,
        format!("w∈{{0,1}} exact: {exact}, w=7.5 scalar: {scalar}, affine identity worst {worst} ulp"),
    )
}

fn reverse_step_oracle() -> Result<Outcome> {
    let schedule = common::default_schedule();
    // Independent schedule: linear betas and running products in f64.
    let steps = schedule.steps();
    let betas: Vec<f64> = (0..steps).map(|i| 1e-4 + (0.02 - 1e-4) * i as f64 / (steps - 1) as f64).collect();
    let mut r = rng::stream(77);
    let mut worst = 0f64;
    for _ in 0..1000 {
        let t = r.random_range(1..=steps);
        let z: f32 = r.sample(StandardNormal);
        let e: f32 = r.sample(StandardNormal);
        let alpha = 1.0 - betas[t - 1];
        let alpha_bar: f64 = betas[..t].iter().map(|b| 1.0 - b).product();
        let want = (f64::from(z) - (1.0 - alpha) / (1.0 - alpha_bar).sqrt() * f64::from(e)) / alpha.sqrt();
        let got = reverse_step(
            &LatentTensor::new([1, 1, 1], vec![e])?,
            &LatentTensor::new([1, 1, 1], vec![z])?,
            t,
            &schedule,
        )?
        .values()[0];
        worst = worst.max((f64::from(got) - want).abs() / want.abs().max(1e-30));
    }
    outcome(worst < 1e-6, format!("1000 cases, worst relative error {worst:.2e}"))
}

fn gradient_check() -> Result<Outcome> {
    let cfg = common::small_config();
    let d = common::randomized_denoiser(cfg, 11);
    let batch = common::random_batch(cfg, 2, 8, 200, 5);
    let probes = common::gradient_probes(&d, &batch, common::default_schedule().alpha_bars(), 220, 9);
    let worst = probes.iter().map(|p| p.rel_error(1e-12)).fold(0.0, f64::max);
    outcome(
        probes.len() >= 200 && worst < 1e-3,
        format!("{} parameters probed, worst relative error {worst:.2e}", probes.len()),
    )
}

fn toy_mixture() -> Result<Outcome> {
    let (radius, sigma) = (1.0f64, 0.05f64);
    let centers: Vec<(f64, f64)> = (0..8)
        .map(|k| {
            let a = std::f64::consts::TAU * k as f64 / 8.0;
            (radius * a.cos(), radius * a.sin())
        })
        .collect();
    let mut r = rng::stream(8);
    let data: Vec<Vec<f32>> = (0..4000)
        .map(|_| {
            let (cx, cy) = centers[r.random_range(0..8)];
            let (nx, ny): (f64, f64) = (r.sample(StandardNormal), r.sample(StandardNormal));
            vec![(cx + sigma * nx) as f32, (cy + sigma * ny) as f32]
        })
        .collect();
    let schedule = common::default_schedule();
    let mut model = MlpDenoiser::init(
        MlpConfig {
            dim: 2,
            hidden: 128,
            layers: 3,
            time_embed_dim: 32,
        },
        0,
    )?;
    model.fit(
        &data,
        &schedule,
        &FitConfig {
            steps: 3000,
            batch: 256,
            lr: 2e-3,
            clip_norm: 1.0,
        },
        0,
    )?;
    let null = EmbeddingMatrix::zeros(1, 1);
    let image = LatentTensor::zeros([1, 1, 2]);
    let jobs: Vec<SampleJob> = (0..1000)
        .map(|i| SampleJob {
            text: &null,
            null_text: Some(&null),
            image: &image,
            seed: rng::derive_index(123, i),
        })
        .collect();
    let samples = sample_batch(&model, &schedule, &jobs, &GuidanceConfig::with_scale(1.0))?;
    let hits = samples
        .iter()
        .filter(|s| {
            let (x, y) = (f64::from(s.values()[0]), f64::from(s.values()[1]));
            centers.iter().any(|&(cx, cy)| ((x - cx).powi(2) + (y - cy).powi(2)).sqrt() <= 3.0 * sigma)
        })
        .count();
    outcome(hits >= 950, format!("{hits}/1000 samples within 3σ of a mode"))
}

fn shapes(dir: &Path, per_class: usize, seed: u64) -> Result<Manifest> {
    let classes = SHAPE_CLASSES.iter().map(|s| s.to_string()).collect();
    generate_shapes(
        dir,
        &ShapesConfig {
            classes,
            count_per_class: per_class,
            size: 32,
            seed,
        },
    )
}

fn end_to_end() -> Result<Outcome> {
    let tmp = tempfile::tempdir().map_err(|e| conceptmix::Error::InvalidArgument(e.to_string()))?;
    let cfg = RunConfig::default();
    let train = shapes(&tmp.path().join("train"), 24, 1)?;
    let mut test = shapes(&tmp.path().join("test"), 67, 2)?;
    test.records.truncate(200);

    let (codec, _) = train_codec(&train.load_images(None)?, cfg.codec, &cfg.codec_train, rng::derive(cfg.seed, "codec"))?;
    let embedder = cfg.embedder.build()?;
    let schedule = cfg.schedule.build()?;
    let (denoiser, losses) = finetune_diffusion(
        &train,
        &codec,
        &embedder,
        cfg.denoiser,
        &cfg.run_mixer(),
        &schedule,
        &cfg.diffusion,
        rng::derive(cfg.seed, "diffusion"),
    )?;
    let window = 100.min(losses.len());
    let smooth = |s: &[f32]| s.iter().map(|&v| f64::from(v)).sum::<f64>() / s.len() as f64;
    let (first, last) = (smooth(&losses[..window]), smooth(&losses[losses.len() - window..]));

    let generator = Generator {
        codec: &codec,
        denoiser: &denoiser,
        embedder: &embedder,
        schedule: &schedule,
    };
    let augmented = build_augmented_dataset(&train, &cfg.augment_config(), &generator, &tmp.path().join("aug"))?;

    // A reference classifier trained on held-out real images judges the synthetic ones.
    let (probe, _) = train_classifier(&test, &TrainingStrategy::Baseline, &cfg.classifier.model, 99)?;
    let synthetic = augmented.synthetic();
    let truth: Vec<usize> = synthetic.records.iter().map(|r| synthetic.class_index(&r.label)).collect::<Result<_>>()?;
    let probe_report =
        EvalReport::from_predictions(augmented.classes.clone(), &truth, &probe.predict(&synthetic.load_images(None)?)?)?;
    let circle = augmented.class_index("circle")?;
    let circle_hits = probe_report.confusion[circle][circle];
    let circle_total: usize = probe_report.confusion[circle].iter().sum();

    let seeds: Vec<u64> = cfg.classifier.seeds.iter().map(|&s| rng::derive_index(cfg.seed, s)).collect();
    let report = compare_strategies(&augmented, &test, &cfg.classifier.strategies()?, &cfg.classifier.model, &seeds)?;
    println!("{}", report.to_table());
    let mean = |name: &str| report.rows.iter().find(|r| r.name == name).map(|r| r.mean);
    let (base, two) = (mean("baseline").unwrap_or(f64::NAN), mean("two_phase").unwrap_or(f64::NAN));
    let complete = report.rows.len() == 4 && report.rows.iter().all(|r| r.delta.is_some() && r.accuracies.len() == 3);
    outcome(
        complete && two >= base - 0.01,
        format!(
            "{} real + {} synthetic, {} test; baseline {:.2}%, two-phase {:.2}%; diffusion loss {first:.3} -> {last:.3} \
             (ratio {:.2}); probe agreement on synthetic {:.1}%, circle {circle_hits}/{circle_total}",
            train.len(),
            synthetic.len(),
            test.len(),
            100.0 * base,
            100.0 * two,
            last / first,
            100.0 * probe_report.accuracy
        ),
    )
}

fn rsp_frequency() -> Result<Outcome> {
    let mut manifest = Manifest::new(vec!["a".into(), "b".into()])?;
    for i in 0..40 {
        let provenance = if i < 10 { Provenance::Real } else { Provenance::Synthetic };
        manifest.push(Record {
            path: format!("img{i}.png").into(),
            label: if i % 2 == 0 { "a" } else { "b" }.into(),
            caption: None,
            provenance,
            meta: None,
        })?;
    }
    let mut composer = BatchComposer::new(&manifest, Composition::Rsp { p: 0.8 }, 32)?;
    let mut r = rng::stream(3);
    let (mut candidates, mut admitted) = (0, 0);
    for _ in 0..1000 {
        let b = composer.next_batch(&mut r);
        candidates += b.candidates;
        admitted += b.admitted;
    }
    let frac = admitted as f64 / candidates as f64;
    outcome((frac - 0.8).abs() <= 0.03, format!("{admitted}/{candidates} admitted = {frac:.4}"))
}

/// A tiny but complete run; returns every artifact's bytes.
fn tiny_run(dir: &Path) -> Result<Vec<(String, Vec<u8>)>> {
    let train = shapes(&dir.join("train"), 3, 1)?;
    let test = shapes(&dir.join("test"), 3, 2)?;
    let (codec, _) = train_codec(
        &train.load_images(None)?,
        conceptmix::codec::CodecConfig::learned(1),
        &CodecTrainConfig {
            steps: 20,
            batch: 4,
            lr: 2e-3,
        },
        4,
    )?;
    let embedder = TokenEmbedder::new(0, 4, 8)?;
    let schedule = NoiseSchedule::linear(10, 1e-4, 0.2)?;
    let dcfg = DenoiserConfig {
        latent_channels: 4,
        base_width: 8,
        levels: 1,
        time_embed_dim: 8,
        text_m: 4,
        text_d: 8,
        conditioning_mode: ConditioningMode::CrossAttention,
        attn_dim: 8,
    };
    let ft = FinetuneConfig {
        steps: 10,
        batch: 4,
        refresh_every: 5,
        ..FinetuneConfig::default()
    };
    let (denoiser, _) = finetune_diffusion(&train, &codec, &embedder, dcfg, &MixerConfig::default(), &schedule, &ft, 4)?;
    codec.save(&dir.join("codec.ckpt"))?;
    denoiser.save(&dir.join("denoiser.ckpt"))?;
    let generator = Generator {
        codec: &codec,
        denoiser: &denoiser,
        embedder: &embedder,
        schedule: &schedule,
    };
    let aug_cfg = conceptmix::pipeline::AugmentConfig {
        ratio: 1.0,
        seed: 4,
        ..Default::default()
    };
    let augmented = build_augmented_dataset(&train, &aug_cfg, &generator, &dir.join("aug"))?;
    let mut model_cfg = conceptmix::classifier::ClassifierConfig::default();
    model_cfg.phase.steps = 5;
    model_cfg.batch = 4;
    let report = compare_strategies(&augmented, &test, &TrainingStrategy::standard_set(&model_cfg), &model_cfg, &[0, 1])?;

    let mut artifacts = Vec::new();
    let mut read = |name: String, path: &Path| -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| conceptmix::Error::InvalidArgument(e.to_string()))?;
        artifacts.push((name, bytes));
        Ok(())
    };
    read("codec".into(), &dir.join("codec.ckpt"))?;
    read("denoiser".into(), &dir.join("denoiser.ckpt"))?;
    for r in &augmented.synthetic().records {
        read(r.path.file_name().unwrap().to_string_lossy().into_owned(), &r.path)?;
    }
    artifacts.push(("report".into(), report.to_json()?.into_bytes()));

    // Persistence: reload and compare, then check a regenerated image.
    let codec2 = Codec::load(&dir.join("codec.ckpt"))?;
    let denoiser2 = Denoiser::load(&dir.join("denoiser.ckpt"))?;
    let bit_equal = |a: &conceptmix::params::ParamSet, b: &conceptmix::params::ParamSet| {
        a.names() == b.names()
            && a.tensors().iter().zip(b.tensors()).all(|(x, y)| {
                x.shape() == y.shape() && x.data().iter().map(|v| v.to_bits()).eq(y.data().iter().map(|v| v.to_bits()))
            })
    };
    let reloaded = Generator {
        codec: &codec2,
        denoiser: &denoiser2,
        embedder: &embedder,
        schedule: &schedule,
    };
    let first = &augmented.synthetic().records[0];
    let meta = conceptmix::pipeline::record_meta(first)?;
    let again = reloaded.regenerate(&meta)?;
    let same_image = conceptmix::imageio::load_image(&first.path)? == again.quantized();
    let flag = bit_equal(&codec.params, &codec2.params) && bit_equal(&denoiser.params, &denoiser2.params) && same_image;
    artifacts.push(("reload".into(), vec![u8::from(flag)]));
    Ok(artifacts)
}

fn determinism() -> Result<Outcome> {
    let tmp = tempfile::tempdir().map_err(|e| conceptmix::Error::InvalidArgument(e.to_string()))?;
    let dir = tmp.path().join("run");
    let first = tiny_run(&dir)?;
    std::fs::remove_dir_all(&dir).map_err(|e| conceptmix::Error::InvalidArgument(e.to_string()))?;
    let second = tiny_run(&dir)?;
    let differing: Vec<&str> = first
        .iter()
        .zip(&second)
        .filter(|(a, b)| a != b)
        .map(|(a, _)| a.0.as_str())
        .collect();
    let reload_ok = first.last().map(|a| a.1 == [1]).unwrap_or(false);
    outcome(
        first.len() == second.len() && differing.is_empty() && reload_ok,
        format!(
            "{} artifacts compared, {} differ {differing:?}; reload bit-exact: {reload_ok}",
            first.len(),
            differing.len()
        ),
    )
}
