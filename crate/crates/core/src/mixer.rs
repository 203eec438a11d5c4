//! Mixing visual concepts in caption-embedding space.
//!
//! A mixed conditioning starts as a copy of one pool embedding (the *base*)
//! and is then edited in place:
//!
//! * **coarse** passes copy a whole block of token rows `r..=s` from a donor;
//! * **fine** passes copy a column range `u..=v` of a single row from a donor.
//!
//! Donors are always drawn from the pool with the base's own index excluded.
//! Row, column and range indices are 1-based and inclusive throughout, which
//! is also how they are recorded in [`MixStep`] provenance.
//!
//! # Random stream
//!
//! Each class mixes on its own ChaCha8 stream seeded with
//! `rng::derive(config.seed, class_label)`. Per output, draws happen in this
//! order, all via `random_range` over inclusive integer ranges:
//!
//! 1. base index in `0..K`;
//! 2. per coarse pass: donor (`j` in `0..K-1`, shifted up by one when
//!    `j >= base`), then the row pair;
//! 3. per fine pass: donor, the column pair, then the row in `1..=m`.
//!
//! A pair over `1..=n` is drawn as `a` in `1..=n`, `b` in `1..=n-1` (shifted
//! up by one when `b >= a`), then ordered.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{write_archive, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixerConfig {
    /// Coarse (row block) passes per output.
    pub coarse_passes: usize,
    /// Fine (row segment) passes per output.
    pub fine_passes: usize,
    /// Outputs per class.
    pub outputs: usize,
    pub seed: u64,
}

impl Default for MixerConfig {
    fn default() -> Self {
        MixerConfig {
            coarse_passes: 1,
            fine_passes: 2,
            outputs: 8,
            seed: 0,
        }
    }
}

impl MixerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.outputs == 0 {
            return Err(Error::Config("mixer outputs per class must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MixStep {
    /// Rows `rows.0..=rows.1` copied from pool member `donor`.
    Coarse { donor: usize, rows: (usize, usize) },
    /// Columns `cols.0..=cols.1` of `row` copied from pool member `donor`.
    Fine {
        donor: usize,
        row: usize,
        cols: (usize, usize),
    },
}

impl MixStep {
    pub fn donor(&self) -> usize {
        match *self {
            MixStep::Coarse { donor, .. } | MixStep::Fine { donor, .. } => donor,
        }
    }

    pub fn is_coarse(&self) -> bool {
        matches!(self, MixStep::Coarse { .. })
    }
}

/// Enough to rebuild a mixed embedding from its pool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixProvenance {
    pub base: usize,
    pub steps: Vec<MixStep>,
}

impl MixProvenance {
    pub fn replay(&self, pool: &[EmbeddingMatrix]) -> Result<EmbeddingMatrix> {
        let mut out = pool
            .get(self.base)
            .ok_or_else(|| Error::InvalidArgument(format!("base index {} out of pool", self.base)))?
            .clone();
        for step in &self.steps {
            let donor = pool.get(step.donor()).ok_or_else(|| {
                Error::InvalidArgument(format!("donor index {} out of pool", step.donor()))
            })?;
            out = match *step {
                MixStep::Coarse { rows, .. } => coarse_mix(&out, donor, rows.0, rows.1)?,
                MixStep::Fine { row, cols, .. } => fine_mix(&out, donor, row, cols.0, cols.1)?,
            };
        }
        Ok(out)
    }
}

/// A mixed text conditioning paired with the null embedding for guidance.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedConditioning {
    pub e_cond: EmbeddingMatrix,
    pub e_null: EmbeddingMatrix,
    pub class_label: String,
    pub provenance: MixProvenance,
}

fn check_same_shape(base: &EmbeddingMatrix, donor: &EmbeddingMatrix) -> Result<()> {
    if base.shape() != donor.shape() {
        return Err(Error::Shape(format!(
            "mixing {:?} with {:?}",
            base.shape(),
            donor.shape()
        )));
    }
    Ok(())
}

/// Copies rows `r..=s` (1-based) of `donor` over `base`.
pub fn coarse_mix(base: &EmbeddingMatrix, donor: &EmbeddingMatrix, r: usize, s: usize) -> Result<EmbeddingMatrix> {
    check_same_shape(base, donor)?;
    if !(1 <= r && r < s && s <= base.rows()) {
        return Err(Error::InvalidArgument(format!(
            "row range {r}..={s} invalid for {} rows",
            base.rows()
        )));
    }
    let mut out = base.clone();
    for row in r - 1..s {
        out.row_mut(row).copy_from_slice(donor.row(row));
    }
    Ok(out)
}

/// Copies columns `u..=v` of row `row` (all 1-based) of `donor` over `base`.
pub fn fine_mix(
    base: &EmbeddingMatrix,
    donor: &EmbeddingMatrix,
    row: usize,
    u: usize,
    v: usize,
) -> Result<EmbeddingMatrix> {
    check_same_shape(base, donor)?;
    if !(1 <= row && row <= base.rows()) {
        return Err(Error::InvalidArgument(format!(
            "row {row} invalid for {} rows",
            base.rows()
        )));
    }
    if !(1 <= u && u < v && v <= base.cols()) {
        return Err(Error::InvalidArgument(format!(
            "column range {u}..={v} invalid for {} columns",
            base.cols()
        )));
    }
    let mut out = base.clone();
    out.row_mut(row - 1)[u - 1..v].copy_from_slice(&donor.row(row - 1)[u - 1..v]);
    Ok(out)
}

/// Uniform unordered pair of distinct indices from `1..=bound`, returned ordered.
pub fn sample_index_pair(rng: &mut Stream, bound: usize) -> Result<(usize, usize)> {
    if bound < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least two indices to draw a pair, got {bound}"
        )));
    }
    let a = rng.random_range(1..=bound);
    let mut b = rng.random_range(1..=bound - 1);
    if b >= a {
        b += 1;
    }
    Ok((a.min(b), a.max(b)))
}

/// Uniform index in `0..len` excluding `exclude`.
fn sample_donor(rng: &mut Stream, len: usize, exclude: usize) -> usize {
    let j = rng.random_range(0..=len - 2);
    if j >= exclude {
        j + 1
    } else {
        j
    }
}

/// The stream used for one class.
pub fn class_stream(seed: u64, class_label: &str) -> Stream {
    rng::stream(rng::derive(seed, class_label))
}

/// Generates `config.outputs` mixed conditionings from one class's pool.
pub fn mix_embeddings(
    pool: &[EmbeddingMatrix],
    class_label: &str,
    config: &MixerConfig,
    null_emb: &EmbeddingMatrix,
) -> Result<Vec<MixedConditioning>> {
    config.validate()?;
    let first = pool
        .first()
        .ok_or_else(|| Error::InvalidArgument(format!("empty embedding pool for {class_label:?}")))?;
    let (m, d) = first.shape();
    if let Some(e) = pool.iter().find(|e| e.shape() != (m, d)) {
        return Err(Error::Shape(format!("pool mixes {:?} and {:?} embeddings", (m, d), e.shape())));
    }
    if null_emb.shape() != (m, d) {
        return Err(Error::Shape(format!(
            "null embedding {:?} does not match pool {:?}",
            null_emb.shape(),
            (m, d)
        )));
    }
    if pool.len() == 1 && config.coarse_passes + config.fine_passes > 0 {
        return Err(Error::Config(format!(
            "class {class_label:?} has a single caption; mixing needs at least two"
        )));
    }

    let mut rng = class_stream(config.seed, class_label);
    let k = pool.len();
    let mut out = Vec::with_capacity(config.outputs);
    for _ in 0..config.outputs {
        let base = rng.random_range(0..=k - 1);
        let mut mixed = pool[base].clone();
        let mut steps = Vec::with_capacity(config.coarse_passes + config.fine_passes);
        for _ in 0..config.coarse_passes {
            let donor = sample_donor(&mut rng, k, base);
            let (r, s) = sample_index_pair(&mut rng, m)?;
            mixed = coarse_mix(&mixed, &pool[donor], r, s)?;
            steps.push(MixStep::Coarse { donor, rows: (r, s) });
        }
        for _ in 0..config.fine_passes {
            let donor = sample_donor(&mut rng, k, base);
            let (u, v) = sample_index_pair(&mut rng, d)?;
            let row = rng.random_range(1..=m);
            mixed = fine_mix(&mixed, &pool[donor], row, u, v)?;
            steps.push(MixStep::Fine {
                donor,
                row,
                cols: (u, v),
            });
        }
        out.push(MixedConditioning {
            e_cond: mixed,
            e_null: null_emb.clone(),
            class_label: class_label.to_string(),
            provenance: MixProvenance { base, steps },
        });
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct SidecarEntry {
    class_label: String,
    #[serde(flatten)]
    provenance: MixProvenance,
}

/// Writes the mixed embeddings as an embedding archive plus a
/// `<archive>.provenance.json` sidecar.
pub fn write_mixed(path: &Path, mixed: &[MixedConditioning]) -> Result<()> {
    let entries: Vec<_> = mixed
        .iter()
        .map(|c| (c.class_label.clone(), c.e_cond.clone()))
        .collect();
    write_archive(path, &entries)?;
    let sidecar: Vec<_> = mixed
        .iter()
        .map(|c| SidecarEntry {
            class_label: c.class_label.clone(),
            provenance: c.provenance.clone(),
        })
        .collect();
    let side_path = sidecar_path(path);
    let json = serde_json::to_vec_pretty(&sidecar).map_err(|e| Error::parse("provenance sidecar", e))?;
    fs::write(&side_path, json).map_err(|e| Error::storage(&side_path, e))
}

pub fn read_sidecar(path: &Path) -> Result<Vec<(String, MixProvenance)>> {
    let side_path = sidecar_path(path);
    let bytes = fs::read(&side_path).map_err(|e| Error::storage(&side_path, e))?;
    let entries: Vec<SidecarEntry> =
        serde_json::from_slice(&bytes).map_err(|e| Error::parse("provenance sidecar", e))?;
    Ok(entries.into_iter().map(|e| (e.class_label, e.provenance)).collect())
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".provenance.json");
    path.with_file_name(name)
}
