//! A small convolutional classifier and the strategies for mixing synthetic
//! images into its training data.
//!
//! Architecture: `conv3×3 → SiLU → avgpool2 → conv3×3 → SiLU → avgpool2 →
//! global mean → linear`, on inputs rescaled to `[-1, 1]`.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var};
use crate::dataset::{check_disjoint, Manifest, Provenance};
use crate::error::{Error, Result};
use crate::imageio::ImageTensor;
use crate::optim::{clip_global_norm, optimizer_step, AdamState};
use crate::params::{bind, load_checkpoint, save_checkpoint, Initializer, ParamSet};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub steps: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub width1: usize,
    pub width2: usize,
    pub batch: usize,
    /// Training length for the single-phase strategies.
    pub phase: Phase,
    pub clip_norm: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            width1: 8,
            width2: 16,
            batch: 32,
            phase: Phase { steps: 800, lr: 1e-2 },
            clip_norm: 1.0,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width1 == 0 || self.width2 == 0 || self.batch == 0 {
            return Err(Error::Config("classifier widths and batch must be positive".into()));
        }
        if !(self.phase.lr > 0.0) {
            return Err(Error::Config("classifier learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// How synthetic records enter training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TrainingStrategy {
    /// Real records only.
    Baseline,
    /// Batches drawn uniformly from real and synthetic records together.
    Combined,
    /// Real batches, each joined by synthetic candidates admitted with probability `p`.
    Rsp { p: f64 },
    /// Combined training, then a shorter, slower fine-tune on real records.
    TwoPhase { phase1: Phase, phase2: Phase },
}

impl TrainingStrategy {
    pub fn rsp(p: f64) -> Result<Self> {
        let s = TrainingStrategy::Rsp { p };
        s.validate()?;
        Ok(s)
    }

    pub fn two_phase(phase1: Phase, phase2: Phase) -> Result<Self> {
        let s = TrainingStrategy::TwoPhase { phase1, phase2 };
        s.validate()?;
        Ok(s)
    }

    /// The standard two-phase schedule for a classifier config: half of
    /// the steps at half the learning rate.
    pub fn default_two_phase(config: &ClassifierConfig) -> Self {
        TrainingStrategy::TwoPhase {
            phase1: config.phase,
            phase2: Phase {
                steps: config.phase.steps / 2,
                lr: config.phase.lr / 2.0,
            },
        }
    }

    /// Baseline, combined, RSP at 0.8 and two-phase.
    pub fn standard_set(config: &ClassifierConfig) -> Vec<Self> {
        vec![
            TrainingStrategy::Baseline,
            TrainingStrategy::Combined,
            TrainingStrategy::Rsp { p: 0.8 },
            Self::default_two_phase(config),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            TrainingStrategy::Rsp { p } if !(p > 0.0 && p <= 1.0) => {
                Err(Error::Config(format!("RSP probability must be in (0, 1], got {p}")))
            }
            TrainingStrategy::TwoPhase { phase1, phase2 } => {
                if !(phase1.lr > 0.0 && phase2.lr > 0.0) {
                    return Err(Error::Config("two-phase learning rates must be positive".into()));
                }
                if !(phase2.lr < phase1.lr && phase2.steps < phase1.steps) {
                    return Err(Error::Config(format!(
                        "the second phase must be shorter and slower: {phase2:?} vs {phase1:?}"
                    )));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> String {
        match self {
            TrainingStrategy::Baseline => "baseline".into(),
            TrainingStrategy::Combined => "combined".into(),
            TrainingStrategy::Rsp { p } => format!("rsp(p={p})"),
            TrainingStrategy::TwoPhase { .. } => "two_phase".into(),
        }
    }

    fn uses_synthetic(&self) -> bool {
        *self != TrainingStrategy::Baseline
    }
}

/// Endless reshuffled pass over a fixed index set.
#[derive(Debug, Clone)]
struct Cycle {
    items: Vec<usize>,
    pending: Vec<usize>,
}

impl Cycle {
    fn new(items: Vec<usize>) -> Self {
        Cycle {
            items,
            pending: Vec::new(),
        }
    }

    fn next(&mut self, rng: &mut Stream) -> usize {
        if self.pending.is_empty() {
            self.pending = self.items.clone();
            self.pending.shuffle(rng);
        }
        self.pending.pop().expect("non-empty cycle")
    }
}

/// Which records fill each training batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Composition {
    Real,
    All,
    Rsp { p: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComposedBatch {
    pub indices: Vec<usize>,
    /// Synthetic candidates offered to RSP admission.
    pub candidates: usize,
    pub admitted: usize,
}

/// Draws training batches of record indices.
#[derive(Debug, Clone)]
pub struct BatchComposer {
    composition: Composition,
    batch: usize,
    real: Cycle,
    synthetic: Cycle,
    all: Cycle,
}

impl BatchComposer {
    pub fn new(manifest: &Manifest, composition: Composition, batch: usize) -> Result<Self> {
        let (mut real, mut synthetic) = (Vec::new(), Vec::new());
        for (i, r) in manifest.records.iter().enumerate() {
            if r.provenance == Provenance::Real {
                real.push(i);
            } else {
                synthetic.push(i);
            }
        }
        if real.is_empty() {
            return Err(Error::Config("no real records to train on".into()));
        }
        if composition != Composition::Real && synthetic.is_empty() {
            return Err(Error::Config("strategy needs synthetic records but the manifest has none".into()));
        }
        Ok(BatchComposer {
            composition,
            batch,
            real: Cycle::new(real),
            synthetic: Cycle::new(synthetic),
            all: Cycle::new((0..manifest.len()).collect()),
        })
    }

    /// With RSP, `batch` real records followed by the admitted ones among
    /// `batch` synthetic candidates, each admitted independently.
    pub fn next_batch(&mut self, rng: &mut Stream) -> ComposedBatch {
        match self.composition {
            Composition::Real => ComposedBatch {
                indices: (0..self.batch).map(|_| self.real.next(rng)).collect(),
                candidates: 0,
                admitted: 0,
            },
            Composition::All => ComposedBatch {
                indices: (0..self.batch).map(|_| self.all.next(rng)).collect(),
                candidates: 0,
                admitted: 0,
            },
            Composition::Rsp { p } => {
                let mut indices: Vec<usize> = (0..self.batch).map(|_| self.real.next(rng)).collect();
                let mut admitted = 0;
                for _ in 0..self.batch {
                    let candidate = self.synthetic.next(rng);
                    if rng.random_bool(p) {
                        indices.push(candidate);
                        admitted += 1;
                    }
                }
                ComposedBatch {
                    indices,
                    candidates: self.batch,
                    admitted,
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub config: ClassifierConfig,
    pub classes: Vec<String>,
    pub image_shape: [usize; 3],
    pub params: ParamSet,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub losses: Vec<f32>,
    pub candidates: usize,
    pub admitted: usize,
}

pub const CHECKPOINT_KIND: &str = "classifier";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassifierHeader {
    config: ClassifierConfig,
    classes: Vec<String>,
    image_shape: [usize; 3],
}

impl Classifier {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let header = ClassifierHeader {
            config: self.config,
            classes: self.classes.clone(),
            image_shape: self.image_shape,
        };
        let header = serde_json::to_value(header).map_err(|e| Error::parse("classifier config", e))?;
        save_checkpoint(path, CHECKPOINT_KIND, &header, &self.params)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let (header, params) = load_checkpoint(path, CHECKPOINT_KIND)?;
        let h: ClassifierHeader =
            serde_json::from_value(header).map_err(|e| Error::parse(path.display().to_string(), e))?;
        let reference = Classifier::init(h.config, h.classes, h.image_shape, 0)?;
        if !reference.params.same_layout(&params) {
            return Err(Error::Config("checkpoint parameters do not match the classifier config".into()));
        }
        Ok(Classifier { params, ..reference })
    }

    pub fn init(config: ClassifierConfig, classes: Vec<String>, image_shape: [usize; 3], seed: u64) -> Result<Self> {
        config.validate()?;
        if classes.is_empty() || image_shape[1] < 4 || image_shape[2] < 4 {
            return Err(Error::Config(format!(
                "classifier needs classes and images of at least 4x4, got {image_shape:?}"
            )));
        }
        let mut stream = rng::stream(rng::derive(seed, "classifier-init"));
        let mut init = Initializer::new(&mut stream);
        init.conv("conv1", config.width1, image_shape[0], 3)?;
        init.conv("conv2", config.width2, config.width1, 3)?;
        init.linear("head", classes.len(), config.width2, true)?;
        Ok(Classifier {
            config,
            classes,
            image_shape,
            params: init.set,
        })
    }

    fn logits(&self, g: &mut Graph<f32>, vars: &[Var], images: &[&ImageTensor]) -> Result<Var> {
        let mut x = ImageTensor::stack(images)?;
        if &x.shape()[1..] != self.image_shape.as_slice() {
            return Err(Error::Shape(format!(
                "classifier expects {:?} images, got {:?}",
                self.image_shape,
                &x.shape()[1..]
            )));
        }
        x.data_mut().iter_mut().for_each(|v| *v = 2.0 * *v - 1.0);
        let mut h = g.input(x);
        for i in 0..2 {
            h = g.conv2d(h, vars[2 * i], vars[2 * i + 1], 1, 1)?;
            h = g.silu(h);
            h = g.avg_pool2x(h)?;
        }
        let tokens = g.to_tokens(h)?;
        let pooled = g.mean_rows(tokens)?;
        g.linear(pooled, vars[4], Some(vars[5]))
    }

    /// Predicted class indices.
    pub fn predict(&self, images: &[ImageTensor]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let mut g = Graph::new();
            let vars: Vec<Var> = self.params.tensors().iter().map(|p| g.input(p.clone())).collect();
            let refs: Vec<&ImageTensor> = chunk.iter().collect();
            let logits = self.logits(&mut g, &vars, &refs)?;
            let k = self.classes.len();
            for row in g.value(logits).data().chunks(k) {
                let best = row
                    .iter()
                    .enumerate()
                    .fold((0, f32::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
                out.push(best.0);
            }
        }
        Ok(out)
    }

    fn train_phase(
        &mut self,
        images: &[ImageTensor],
        labels: &[usize],
        composer: &mut BatchComposer,
        phase: Phase,
        rng: &mut Stream,
        log: &mut TrainLog,
    ) -> Result<()> {
        let mut state = AdamState::new(&self.params);
        for step in 0..phase.steps {
            let batch = composer.next_batch(rng);
            log.candidates += batch.candidates;
            log.admitted += batch.admitted;
            let refs: Vec<&ImageTensor> = batch.indices.iter().map(|&i| &images[i]).collect();
            let targets: Vec<usize> = batch.indices.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let vars = bind(&mut g, self.params.tensors());
            let logits = self.logits(&mut g, &vars, &refs)?;
            let loss = g.cross_entropy(logits, &targets)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Divergence { stage: "classifier", step });
            }
            let mut grads = g.backward(loss)?;
            let mut flat: Vec<Tensor<f32>> = vars
                .iter()
                .zip(self.params.tensors())
                .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
                .collect();
            clip_global_norm(&mut flat, self.config.clip_norm);
            optimizer_step(&mut self.params, &flat, &mut state, phase.lr)?;
            log.losses.push(value);
        }
        Ok(())
    }
}

fn labels_of(manifest: &Manifest, classes: &[String]) -> Result<Vec<usize>> {
    manifest
        .records
        .iter()
        .map(|r| {
            classes
                .iter()
                .position(|c| c == &r.label)
                .ok_or_else(|| Error::InvalidArgument(format!("label {:?} unknown to the classifier", r.label)))
        })
        .collect()
}

/// Trains a classifier on `manifest` under `strategy`.
pub fn train_classifier(
    manifest: &Manifest,
    strategy: &TrainingStrategy,
    config: &ClassifierConfig,
    seed: u64,
) -> Result<(Classifier, TrainLog)> {
    strategy.validate()?;
    config.validate()?;
    if strategy.uses_synthetic() && manifest.synthetic().is_empty() {
        return Err(Error::Config(format!(
            "strategy {} needs synthetic records but the manifest has none",
            strategy.name()
        )));
    }
    let images = manifest.load_images(None)?;
    let shape = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty training manifest".into()))?
        .shape();
    let labels = labels_of(manifest, &manifest.classes)?;
    let mut model = Classifier::init(*config, manifest.classes.clone(), shape, seed)?;
    let mut log = TrainLog::default();
    let mut r = rng::stream(rng::derive(seed, "classifier-train"));
    let (composition, phase) = match *strategy {
        TrainingStrategy::Baseline => (Composition::Real, config.phase),
        TrainingStrategy::Combined => (Composition::All, config.phase),
        TrainingStrategy::Rsp { p } => (Composition::Rsp { p }, config.phase),
        TrainingStrategy::TwoPhase { phase1, .. } => (Composition::All, phase1),
    };
    let mut composer = BatchComposer::new(manifest, composition, config.batch)?;
    model.train_phase(&images, &labels, &mut composer, phase, &mut r, &mut log)?;
    if let TrainingStrategy::TwoPhase { phase2, .. } = *strategy {
        let mut r = rng::stream(rng::derive(seed, "classifier-finetune"));
        let mut composer = BatchComposer::new(manifest, Composition::Real, config.batch)?;
        model.train_phase(&images, &labels, &mut composer, phase2, &mut r, &mut log)?;
    }
    Ok((model, log))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: Vec<String>,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl EvalReport {
    pub fn from_predictions(classes: Vec<String>, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        let k = classes.len();
        if truth.len() != predicted.len() || truth.is_empty() || truth.iter().chain(predicted).any(|&c| c >= k) {
            return Err(Error::InvalidArgument("predictions do not match the labels".into()));
        }
        let mut confusion = vec![vec![0; k]; k];
        for (&t, &p) in truth.iter().zip(predicted) {
            confusion[t][p] += 1;
        }
        let correct = (0..k).map(|i| confusion[i][i]).sum();
        Ok(EvalReport {
            classes,
            correct,
            total: truth.len(),
            accuracy: correct as f64 / truth.len() as f64,
            confusion,
        })
    }
}

/// Test accuracy, after checking that no test image was used in training.
pub fn evaluate(model: &Classifier, train: &Manifest, test: &Manifest) -> Result<EvalReport> {
    check_disjoint(train, test)?;
    let truth = labels_of(test, &model.classes)?;
    let predicted = model.predict(&test.load_images(Some(model.image_shape))?)?;
    EvalReport::from_predictions(model.classes.clone(), &truth, &predicted)
}

/// Hex SHA-256 over the records (path, label, provenance) of both manifests.
pub fn dataset_fingerprint(train: &Manifest, test: &Manifest) -> String {
    let mut h = Sha256::new();
    for (tag, m) in [("train", train), ("test", test)] {
        h.update(tag.as_bytes());
        for r in &m.records {
            h.update(r.path.to_string_lossy().as_bytes());
            h.update([0]);
            h.update(r.label.as_bytes());
            h.update([0]);
            h.update([r.provenance as u8]);
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyRow {
    pub name: String,
    pub strategy: TrainingStrategy,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation over seeds (0 for a single seed).
    pub std: f64,
    /// `mean − baseline mean`, when a baseline row exists.
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub fingerprint: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<StrategyRow>,
}

impl ComparisonReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::parse("comparison report", e))
    }

    /// Accuracies in percent, one row per strategy.
    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(8).max(8);
        let mut out = String::new();
        let _ = write!(out, "{:<width$}  {:>8}  {:>6}  {:>7}", "strategy", "mean %", "std", "delta");
        for s in &self.seeds {
            let _ = write!(out, "  {:>8}", format!("seed {s}"));
        }
        out.push('\n');
        for r in &self.rows {
            let delta = r.delta.map_or_else(|| "-".to_string(), |d| format!("{:+.2}", 100.0 * d));
            let _ = write!(out, "{:<width$}  {:>8.2}  {:>6.2}  {:>7}", r.name, 100.0 * r.mean, 100.0 * r.std, delta);
            for a in &r.accuracies {
                let _ = write!(out, "  {:>8.2}", 100.0 * a);
            }
            out.push('\n');
        }
        out
    }
}

/// Trains and evaluates every strategy under every seed.
pub fn compare_strategies(
    train: &Manifest,
    test: &Manifest,
    strategies: &[TrainingStrategy],
    config: &ClassifierConfig,
    seeds: &[u64],
) -> Result<ComparisonReport> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("at least one seed is required".into()));
    }
    check_disjoint(train, test)?;
    let mut rows = Vec::with_capacity(strategies.len());
    for strategy in strategies {
        let mut accuracies = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let (model, _) = train_classifier(train, strategy, config, seed)?;
            let report = evaluate(&model, train, test)?;
            log::info!("{} seed {seed}: accuracy {:.4}", strategy.name(), report.accuracy);
            accuracies.push(report.accuracy);
        }
        let n = accuracies.len() as f64;
        let mean = accuracies.iter().sum::<f64>() / n;
        let std = if accuracies.len() > 1 {
            (accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        rows.push(StrategyRow {
            name: strategy.name(),
            strategy: *strategy,
            accuracies,
            mean,
            std,
            delta: None,
        });
    }
    if let Some(base) = rows.iter().find(|r| r.strategy == TrainingStrategy::Baseline).map(|r| r.mean) {
        rows.iter_mut().for_each(|r| r.delta = Some(r.mean - base));
    }
    Ok(ComparisonReport {
        fingerprint: dataset_fingerprint(train, test),
        seeds: seeds.to_vec(),
        rows,
    })
}
