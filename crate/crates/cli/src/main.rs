use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use conceptmix::classifier::{compare_strategies, evaluate, train_classifier};
use conceptmix::codec::{train_codec, Codec, CodecMode};
use conceptmix::config::{load_with_overrides, RunConfig, StrategyName};
use conceptmix::dataset::{check_disjoint, Manifest, Provenance, Record};
use conceptmix::denoiser::Denoiser;
use conceptmix::embedding::{read_captions, CaptionPool};
use conceptmix::imageio::{image_grid, load_image, save_image};
use conceptmix::mixer::{mix_embeddings, write_mixed};
use conceptmix::pipeline::{build_augmented_dataset, caption_pools, finetune_diffusion, GenerationRequest, Generator};
use conceptmix::{rng, Error, Result};

/// Environment variable naming the parent of new run directories.
const RUN_ROOT_ENV: &str = "CONCEPTMIX_RUN_ROOT";

#[derive(Parser)]
#[command(name = "conceptmix", version, about = "Dataset augmentation by mixing caption embeddings")]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Config override, e.g. `--set guidance.scale=5`. Repeatable; applied in order.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Master seed (overrides `seed` in the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Write artifacts here instead of a new timestamped run directory.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic shapes dataset with captions.
    GenShapes {
        /// Output directory (default: `<run dir>/shapes`).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "circle,square,cross")]
        classes: Vec<String>,
        /// Images per class.
        #[arg(long, default_value_t = 20)]
        count: usize,
        /// Image side in pixels.
        #[arg(long, default_value_t = 32)]
        size: usize,
    },
    /// Train the image autoencoder on the real images of a manifest.
    TrainCodec {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Train the conditional denoiser.
    TrainDiffusion {
        #[arg(long)]
        manifest: PathBuf,
        /// Codec checkpoint; required unless the config selects the identity codec.
        #[arg(long)]
        codec: Option<PathBuf>,
    },
    /// Write mixed caption embeddings for one class.
    Mix {
        #[arg(long)]
        class: String,
        /// Captions file (`label<TAB>caption` per line).
        #[arg(long, conflicts_with = "manifest")]
        captions: Option<PathBuf>,
        /// Take the captions from a manifest's real records instead.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Number of conditionings (default: `mixer.outputs`).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Generate synthetic images of one class.
    Generate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        codec: Option<PathBuf>,
        #[arg(long)]
        denoiser: PathBuf,
        #[arg(long)]
        class: String,
        #[arg(long, default_value_t = 8)]
        count: usize,
    },
    /// Generate synthetic images for every class and merge them with the real ones.
    Augment {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        codec: Option<PathBuf>,
        #[arg(long)]
        denoiser: PathBuf,
    },
    /// Train one classifier, optionally evaluating it on a test manifest.
    TrainClassifier {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "baseline")]
        strategy: StrategyArg,
        #[arg(long)]
        test: Option<PathBuf>,
    },
    /// Train and evaluate every configured strategy under every configured seed.
    Compare {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
    },
    /// Lay out real and synthetic images: one row per class, real image first.
    RenderGrid {
        #[arg(long)]
        manifest: PathBuf,
        /// Synthetic images per row.
        #[arg(long, default_value_t = 3)]
        per_class: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum StrategyArg {
    Baseline,
    Combined,
    Rsp,
    TwoPhase,
}

impl From<StrategyArg> for StrategyName {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Baseline => StrategyName::Baseline,
            StrategyArg::Combined => StrategyName::Combined,
            StrategyArg::Rsp => StrategyName::Rsp,
            StrategyArg::TwoPhase => StrategyName::TwoPhase,
        }
    }
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenShapes { .. } => "gen-shapes",
            Command::TrainCodec { .. } => "train-codec",
            Command::TrainDiffusion { .. } => "train-diffusion",
            Command::Mix { .. } => "mix",
            Command::Generate { .. } => "generate",
            Command::Augment { .. } => "augment",
            Command::TrainClassifier { .. } => "train-classifier",
            Command::Compare { .. } => "compare",
            Command::RenderGrid { .. } => "render-grid",
        }
    }

    /// The library module doing the work, for error messages.
    fn module(&self) -> &'static str {
        match self {
            Command::GenShapes { .. } => "shapes",
            Command::TrainCodec { .. } => "codec",
            Command::Mix { .. } => "mixer",
            Command::TrainDiffusion { .. } | Command::Generate { .. } | Command::Augment { .. } => "pipeline",
            Command::TrainClassifier { .. } | Command::Compare { .. } => "classifier",
            Command::RenderGrid { .. } => "imageio",
        }
    }
}

struct Run {
    config: RunConfig,
    dir: PathBuf,
}

impl Run {
    fn seed(&self, stage: &str) -> u64 {
        rng::derive(self.config.seed, stage)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write_json(&self, name: &str, value: &impl serde::Serialize) -> Result<PathBuf> {
        let path = self.path(name);
        let text = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(&path, text).map_err(|e| storage(&path, e))?;
        Ok(path)
    }

    fn codec(&self, path: Option<&Path>) -> Result<Codec> {
        match (path, self.config.codec.mode) {
            (Some(p), _) => Codec::load(p),
            (None, CodecMode::Identity) => Ok(Codec::identity(self.config.codec.image_channels)),
            (None, CodecMode::Learned) => Err(Error::Config(
                "the config selects a learned codec; pass --codec <checkpoint>".into(),
            )),
        }
    }
}

fn storage(path: &Path, source: std::io::Error) -> Error {
    Error::Storage {
        path: path.to_path_buf(),
        source,
    }
}

fn setup(cli: &Cli) -> Result<Run> {
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    let config = load_with_overrides(cli.config.as_deref(), &overrides)?;
    let hash = config.hash()?;
    let dir = match &cli.run_dir {
        Some(d) => d.clone(),
        None => {
            let root = config
                .paths
                .run_root
                .clone()
                .or_else(|| std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from("runs"));
            let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
            root.join(format!("{stamp}-{hash}"))
        }
    };
    std::fs::create_dir_all(&dir).map_err(|e| storage(&dir, e))?;
    let run = Run { config, dir };
    run.config.save(&run.path("config.toml"))?;
    eprintln!(
        "conceptmix {}: seed {}, config {} ({}), run dir {}",
        cli.command.name(),
        run.config.seed,
        hash,
        run.path("config.toml").display(),
        run.dir.display()
    );
    Ok(run)
}

fn execute(cli: &Cli, run: &Run) -> Result<()> {
    let cfg = &run.config;
    match &cli.command {
        Command::GenShapes {
            out,
            classes,
            count,
            size,
        } => {
            let out = out.clone().unwrap_or_else(|| run.path("shapes"));
            let shapes = conceptmix::shapes::ShapesConfig {
                classes: classes.clone(),
                count_per_class: *count,
                size: *size,
                seed: run.seed("shapes"),
            };
            let manifest = conceptmix::shapes::generate_shapes(&out, &shapes)?;
            println!("{} images -> {}", manifest.len(), out.join("manifest.json").display());
        }
        Command::TrainCodec { manifest } => {
            let images = Manifest::load(manifest)?.real().load_images(None)?;
            let (codec, losses) = train_codec(&images, cfg.codec, &cfg.codec_train, run.seed("codec"))?;
            codec.save(&run.path("codec.ckpt"))?;
            run.write_json("codec_losses.json", &losses)?;
            println!(
                "reconstruction MSE {:.6} -> {}",
                codec.reconstruction_error(&images)?,
                run.path("codec.ckpt").display()
            );
        }
        Command::TrainDiffusion { manifest, codec } => {
            let manifest = Manifest::load(manifest)?;
            let codec = run.codec(codec.as_deref())?;
            let (denoiser, losses) = finetune_diffusion(
                &manifest,
                &codec,
                &cfg.embedder.build()?,
                cfg.denoiser,
                &cfg.run_mixer(),
                &cfg.schedule.build()?,
                &cfg.diffusion,
                run.seed("diffusion"),
            )?;
            denoiser.save(&run.path("denoiser.ckpt"))?;
            run.write_json("diffusion_losses.json", &losses)?;
            let tail = &losses[losses.len().saturating_sub(100)..];
            let mean = tail.iter().sum::<f32>() / tail.len().max(1) as f32;
            println!("final loss {mean:.4} -> {}", run.path("denoiser.ckpt").display());
        }
        Command::Mix {
            class,
            captions,
            manifest,
            count,
        } => {
            let pool = match (captions, manifest) {
                (Some(path), _) => {
                    let caps: Vec<_> = read_captions(path)?.into_iter().filter(|c| &c.class_label == class).collect();
                    CaptionPool::new(class, caps)?
                }
                (None, Some(path)) => caption_pools(&Manifest::load(path)?)?
                    .remove(class)
                    .ok_or_else(|| Error::InvalidArgument(format!("class {class:?} not in manifest")))?,
                (None, None) => return Err(Error::InvalidArgument("pass --captions or --manifest".into())),
            };
            let embedder = cfg.embedder.build()?;
            let mut mixer = cfg.run_mixer();
            mixer.outputs = count.unwrap_or(mixer.outputs);
            let mixed = mix_embeddings(&embedder.embed_pool(&pool), class, &mixer, &embedder.null_embedding())?;
            let out = run.path(&format!("mixed_{class}.emb"));
            write_mixed(&out, &mixed)?;
            println!("{} conditionings -> {}", mixed.len(), out.display());
        }
        Command::Generate {
            manifest,
            codec,
            denoiser,
            class,
            count,
        } => {
            let manifest = Manifest::load(manifest)?;
            let codec = run.codec(codec.as_deref())?;
            let denoiser = Denoiser::load(denoiser)?;
            let (embedder, schedule) = (cfg.embedder.build()?, cfg.schedule.build()?);
            let generator = Generator {
                codec: &codec,
                denoiser: &denoiser,
                embedder: &embedder,
                schedule: &schedule,
            };
            let aug = cfg.augment_config();
            let request = GenerationRequest {
                class_label: class.clone(),
                count: *count,
                guidance: aug.guidance,
                mixer: aug.mixer,
                seed: aug.seed,
            };
            let out_dir = run.path("generated");
            let mut out = Manifest::new(manifest.classes.clone())?;
            for (i, g) in generator.generate_images(&request, &manifest.real())?.into_iter().enumerate() {
                let path = out_dir.join(format!("{class}_gen_{i:04}.png"));
                save_image(&g.image, &path)?;
                out.push(Record {
                    path,
                    label: class.clone(),
                    caption: g.meta.captions.get(g.meta.mix.base).cloned(),
                    provenance: Provenance::Synthetic,
                    meta: Some(serde_json::to_value(&g.meta).map_err(|e| Error::Config(e.to_string()))?),
                })?;
            }
            out.save(&out_dir.join("manifest.json"))?;
            println!("{} images -> {}", out.len(), out_dir.display());
        }
        Command::Augment {
            manifest,
            codec,
            denoiser,
        } => {
            let manifest = Manifest::load(manifest)?;
            let codec = run.codec(codec.as_deref())?;
            let denoiser = Denoiser::load(denoiser)?;
            let (embedder, schedule) = (cfg.embedder.build()?, cfg.schedule.build()?);
            let generator = Generator {
                codec: &codec,
                denoiser: &denoiser,
                embedder: &embedder,
                schedule: &schedule,
            };
            let out = run.path("augmented");
            let merged = build_augmented_dataset(&manifest, &cfg.augment_config(), &generator, &out)?;
            println!(
                "{} real + {} synthetic -> {}",
                merged.real().len(),
                merged.synthetic().len(),
                out.join("manifest.json").display()
            );
        }
        Command::TrainClassifier {
            manifest,
            strategy,
            test,
        } => {
            let train = Manifest::load(manifest)?;
            let test = test.as_deref().map(Manifest::load).transpose()?;
            if let Some(test) = &test {
                check_disjoint(&train, test)?;
            }
            let strategy = cfg.classifier.strategy((*strategy).into())?;
            let (model, log) = train_classifier(&train, &strategy, &cfg.classifier.model, run.seed("classifier"))?;
            model.save(&run.path("classifier.ckpt"))?;
            if log.candidates > 0 {
                println!("admitted {} of {} synthetic candidates", log.admitted, log.candidates);
            }
            if let Some(test) = &test {
                let report = evaluate(&model, &train, test)?;
                run.write_json("eval.json", &report)?;
                println!("{}: accuracy {:.4} ({}/{})", strategy.name(), report.accuracy, report.correct, report.total);
            }
            println!("classifier -> {}", run.path("classifier.ckpt").display());
        }
        Command::Compare { train, test } => {
            let (train, test) = (Manifest::load(train)?, Manifest::load(test)?);
            let seeds: Vec<u64> = cfg.classifier.seeds.iter().map(|&s| rng::derive_index(cfg.seed, s)).collect();
            let report = compare_strategies(&train, &test, &cfg.classifier.strategies()?, &cfg.classifier.model, &seeds)?;
            std::fs::write(run.path("report.json"), report.to_json()?).map_err(|e| storage(&run.path("report.json"), e))?;
            let table = report.to_table();
            std::fs::write(run.path("report.txt"), &table).map_err(|e| storage(&run.path("report.txt"), e))?;
            print!("{table}");
        }
        Command::RenderGrid {
            manifest,
            per_class,
            out,
        } => {
            let manifest = Manifest::load(manifest)?;
            let mut rows = Vec::new();
            for class in &manifest.classes {
                let real = manifest.indices(class, true);
                let synthetic: Vec<usize> = manifest.indices(class, false).into_iter().filter(|i| !real.contains(i)).collect();
                let first = *real
                    .first()
                    .ok_or_else(|| Error::InvalidArgument(format!("class {class:?} has no real image")))?;
                if synthetic.len() < *per_class {
                    return Err(Error::InvalidArgument(format!(
                        "class {class:?} has {} synthetic images, {per_class} requested",
                        synthetic.len()
                    )));
                }
                let mut row = vec![load_image(&manifest.records[first].path)?];
                for &i in &synthetic[..*per_class] {
                    row.push(load_image(&manifest.records[i].path)?);
                }
                rows.push(row);
            }
            let grid = image_grid(&rows, 2)?;
            let out = out.clone().unwrap_or_else(|| run.path("grid.png"));
            save_image(&grid, &out)?;
            println!("{}x{} grid -> {}", rows.len(), per_class + 1, out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match setup(&cli).and_then(|run| execute(&cli, &run)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let category = e.category();
            eprintln!("error ({}, in {}): {e}", category.as_str(), cli.command.module());
            ExitCode::from(category.exit_code() as u8)
        }
    }
}
