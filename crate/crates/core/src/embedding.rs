//! Caption pools and the deterministic token embedder.
//!
//! The embedder maps a caption to an `m × d` matrix, one row per token. It is
//! a fixed hashing scheme rather than a learned encoder, so every matrix is
//! reproducible bit for bit on any platform:
//!
//! 1. Tokenize: split on Unicode whitespace, lowercase each token, keep the
//!    first `m` tokens (excess tokens are dropped with a warning).
//! 2. Token row: seed a SplitMix64 stream with `fnv1a64(token) ^ seed` and take
//!    its first `d` outputs `z`; entry `j` is `(z_j >> 40) · 2⁻²³ − 1`, a value
//!    in `[-1, 1)` that is exact in `f32`.
//! 3. Rows after the last token are the padding vector, which is all zeros.
//!
//! The null embedding (empty caption) is therefore the zero matrix.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{fnv1a64, splitmix64, GOLDEN_GAMMA};

pub const CAPTION_PREFIX: &str = "This is an image of";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionSource {
    Templated,
    Imported,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caption {
    pub class_label: String,
    pub text: String,
    pub source: CaptionSource,
}

/// Builds the templated caption `"This is an image of <label>[, <descriptor>]"`.
pub fn build_caption(class_label: &str, descriptor: Option<&str>) -> Result<Caption> {
    if class_label.trim().is_empty() {
        return Err(Error::InvalidArgument("class label must be non-empty".into()));
    }
    let mut text = format!("{CAPTION_PREFIX} {class_label}");
    if let Some(desc) = descriptor.map(str::trim).filter(|d| !d.is_empty()) {
        text.push_str(", ");
        text.push_str(desc);
    }
    Ok(Caption {
        class_label: class_label.to_string(),
        text,
        source: CaptionSource::Templated,
    })
}

impl Caption {
    /// A caption taken verbatim from an external source.
    pub fn imported(class_label: &str, text: &str) -> Result<Caption> {
        if class_label.trim().is_empty() {
            return Err(Error::InvalidArgument("class label must be non-empty".into()));
        }
        if text.trim().is_empty() {
            return Err(Error::InvalidArgument(format!(
                "empty caption for class {class_label:?}"
            )));
        }
        Ok(Caption {
            class_label: class_label.to_string(),
            text: text.trim().to_string(),
            source: CaptionSource::Imported,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionPool {
    class_label: String,
    captions: Vec<Caption>,
}

impl CaptionPool {
    pub fn new(class_label: &str, captions: Vec<Caption>) -> Result<Self> {
        if captions.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "caption pool for {class_label:?} is empty"
            )));
        }
        if let Some(c) = captions.iter().find(|c| c.class_label != class_label) {
            return Err(Error::InvalidArgument(format!(
                "caption labelled {:?} in pool for {class_label:?}",
                c.class_label
            )));
        }
        Ok(CaptionPool {
            class_label: class_label.to_string(),
            captions,
        })
    }

    pub fn class_label(&self) -> &str {
        &self.class_label
    }

    pub fn captions(&self) -> &[Caption] {
        &self.captions
    }

    pub fn len(&self) -> usize {
        self.captions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.captions.is_empty()
    }
}

/// Row-major `m × d` embedding matrix.
#[derive(Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f32>,
}

impl fmt::Debug for EmbeddingMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EmbeddingMatrix")
            .field("rows", &self.rows)
            .field("cols", &self.cols)
            .finish_non_exhaustive()
    }
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f32>) -> Result<Self> {
        if rows < 2 || cols < 2 {
            return Err(Error::Shape(format!(
                "embedding must be at least 2x2, got {rows}x{cols}"
            )));
        }
        if values.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} embedding",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                layer: "embedding matrix".into(),
            });
        }
        Ok(EmbeddingMatrix { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        EmbeddingMatrix {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// Entry at 0-based `(row, col)`.
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f32] {
        &self.values[row * self.cols..(row + 1) * self.cols]
    }

    pub(crate) fn row_mut(&mut self, row: usize) -> &mut [f32] {
        &mut self.values[row * self.cols..(row + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.values
    }
}

/// Seeded hash-to-vector stand-in for a text encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenEmbedder {
    pub seed: u64,
    pub m: usize,
    pub d: usize,
}

impl TokenEmbedder {
    pub fn new(seed: u64, m: usize, d: usize) -> Result<Self> {
        if m < 2 || d < 2 {
            return Err(Error::InvalidArgument(format!(
                "embedder needs m >= 2 and d >= 2, got m={m}, d={d}"
            )));
        }
        Ok(TokenEmbedder { seed, m, d })
    }

    pub fn tokenize(text: &str) -> Vec<String> {
        text.split_whitespace().map(str::to_lowercase).collect()
    }

    /// The embedding row of a single token.
    pub fn token_row(&self, token: &str) -> Vec<f32> {
        let mut state = fnv1a64(token.as_bytes()) ^ self.seed;
        (0..self.d)
            .map(|_| {
                let z = splitmix64(state);
                state = state.wrapping_add(GOLDEN_GAMMA);
                ((z >> 40) as f32) * (1.0 / 8_388_608.0) - 1.0
            })
            .collect()
    }

    pub fn embed_text(&self, text: &str) -> EmbeddingMatrix {
        let mut tokens = Self::tokenize(text);
        if tokens.len() > self.m {
            log::warn!(
                "caption has {} tokens, truncated to {}: {text:?}",
                tokens.len(),
                self.m
            );
            tokens.truncate(self.m);
        }
        let mut out = EmbeddingMatrix::zeros(self.m, self.d);
        for (i, tok) in tokens.iter().enumerate() {
            out.row_mut(i).copy_from_slice(&self.token_row(tok));
        }
        out
    }

    pub fn embed_caption(&self, caption: &Caption) -> EmbeddingMatrix {
        self.embed_text(&caption.text)
    }

    pub fn embed_pool(&self, pool: &CaptionPool) -> Vec<EmbeddingMatrix> {
        pool.captions().iter().map(|c| self.embed_caption(c)).collect()
    }

    /// Embedding of the empty caption: every row is the (zero) padding vector.
    pub fn null_embedding(&self) -> EmbeddingMatrix {
        self.embed_text("")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchiveHeader {
    pub version: u32,
    pub m: usize,
    pub d: usize,
    pub count: usize,
    pub labels: Vec<String>,
}

/// Writes an embedding archive: one JSON header line, then `count` row-major
/// little-endian `f32` matrices.
pub fn write_archive(path: &Path, entries: &[(String, EmbeddingMatrix)]) -> Result<()> {
    let (m, d) = match entries.first() {
        Some((_, e)) => e.shape(),
        None => return Err(Error::InvalidArgument("empty embedding archive".into())),
    };
    if let Some((label, e)) = entries.iter().find(|(_, e)| e.shape() != (m, d)) {
        return Err(Error::Shape(format!(
            "archive entry {label:?} is {}x{}, expected {m}x{d}",
            e.rows(),
            e.cols()
        )));
    }
    let header = ArchiveHeader {
        version: 1,
        m,
        d,
        count: entries.len(),
        labels: entries.iter().map(|(l, _)| l.clone()).collect(),
    };
    let mut bytes = serde_json::to_vec(&header).map_err(|e| Error::parse("archive header", e))?;
    bytes.push(b'\n');
    for (_, e) in entries {
        for v in e.as_slice() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = fs::File::create(path).map_err(|e| Error::storage(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::storage(path, e))
}

pub fn read_archive(path: &Path) -> Result<(ArchiveHeader, Vec<(String, EmbeddingMatrix)>)> {
    let bytes = fs::read(path).map_err(|e| Error::storage(path, e))?;
    let what = || format!("embedding archive {}", path.display());
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::parse(what(), "missing header terminator"))?;
    let header: ArchiveHeader =
        serde_json::from_slice(&bytes[..split]).map_err(|e| Error::parse(what(), e))?;
    if header.version != 1 {
        return Err(Error::parse(what(), format!("unsupported version {}", header.version)));
    }
    if header.labels.len() != header.count {
        return Err(Error::parse(
            what(),
            format!("{} labels for {} matrices", header.labels.len(), header.count),
        ));
    }
    let body = &bytes[split + 1..];
    let per = header.m * header.d;
    if body.len() != header.count * per * 4 {
        return Err(Error::parse(
            what(),
            format!("expected {} payload bytes, found {}", header.count * per * 4, body.len()),
        ));
    }
    let floats: Vec<f32> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let entries = header
        .labels
        .iter()
        .zip(floats.chunks_exact(per.max(1)))
        .map(|(label, chunk)| {
            EmbeddingMatrix::new(header.m, header.d, chunk.to_vec()).map(|e| (label.clone(), e))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((header, entries))
}

/// Loads externally produced embeddings, rejecting any whose shape differs
/// from the run's `(m, d)`.
pub fn import_embeddings(path: &Path, m: usize, d: usize) -> Result<Vec<(String, EmbeddingMatrix)>> {
    let (header, entries) = read_archive(path)?;
    if (header.m, header.d) != (m, d) {
        return Err(Error::Shape(format!(
            "archive {} holds {}x{} embeddings, run expects {m}x{d}",
            path.display(),
            header.m,
            header.d
        )));
    }
    Ok(entries)
}

/// Parses a captions file: UTF-8, one `label<TAB>caption` record per line.
pub fn parse_captions(text: &str) -> Result<Vec<Caption>> {
    text.lines()
        .enumerate()
        .filter(|(_, line)| !line.trim().is_empty())
        .map(|(i, line)| {
            let (label, caption) = line.split_once('\t').ok_or_else(|| {
                Error::parse("captions file", format!("line {}: missing tab separator", i + 1))
            })?;
            Caption::imported(label.trim(), caption)
        })
        .collect()
}

pub fn read_captions(path: &Path) -> Result<Vec<Caption>> {
    let text = fs::read_to_string(path).map_err(|e| Error::storage(path, e))?;
    parse_captions(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn templated_captions() {
        assert_eq!(build_caption("cat", None).unwrap().text, "This is an image of cat");
        assert_eq!(
            build_caption("cat", Some("a cat sitting on grass")).unwrap().text,
            "This is an image of cat, a cat sitting on grass"
        );
        assert!(matches!(build_caption("", None), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn embedding_is_deterministic() {
        let emb = TokenEmbedder::new(3, 16, 32).unwrap();
        let cap = build_caption("cat", Some("a small bright cat")).unwrap();
        let a = emb.embed_caption(&cap);
        let b = emb.embed_caption(&cap);
        assert_eq!(a.as_slice(), b.as_slice());
    }

    #[test]
    fn single_token_change_touches_its_row() {
        let emb = TokenEmbedder::new(0, 8, 4).unwrap();
        let a = emb.embed_text("a red circle");
        let b = emb.embed_text("a blue circle");
        assert_eq!(a.row(0), b.row(0));
        assert_ne!(a.row(1), b.row(1));
        assert_eq!(a.row(2), b.row(2));
    }

    // Expected values hand-traced in Python from the documented scheme:
    // fnv1a64("a") ^ 7 seeds SplitMix64; entries are (z >> 40) / 2^23 - 1.
    #[test]
    fn hashing_reference_trace() {
        let emb = TokenEmbedder::new(7, 4, 3).unwrap();
        let e = emb.embed_text("a b");
        let bits = |row: &[f32]| row.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        // "a": 0.98069751, -0.73602140, 0.43770707
        assert_eq!(bits(e.row(0)), [0x3f7b_0efe, 0xbf3c_6be6, 0x3ee0_1b24]);
        // "b": -0.98143208, -0.58282077, -0.99152863
        assert_eq!(bits(e.row(1)), [0xbf7b_3f22, 0xbf15_33be, 0xbf7d_d4d2]);
        assert_eq!(e.row(2), &[0.0, 0.0, 0.0]);
        assert_eq!(e.row(3), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn null_embedding_is_padding() {
        let emb = TokenEmbedder::new(11, 4, 3).unwrap();
        let null = emb.null_embedding();
        assert_eq!(null.shape(), (4, 3));
        assert!(null.as_slice().iter().all(|&v| v == 0.0));
        assert_ne!(null, emb.embed_text("x"));
    }

    #[test]
    fn truncates_long_captions() {
        let emb = TokenEmbedder::new(0, 2, 2).unwrap();
        let long = emb.embed_text("one two three");
        let short = emb.embed_text("one two");
        assert_eq!(long, short);
    }

    #[test]
    fn captions_file_records() {
        let caps = parse_captions("cat\ta fluffy cat\n\ndog\ta dog on a couch\n").unwrap();
        assert_eq!(caps.len(), 2);
        assert_eq!(caps[1].class_label, "dog");
        assert_eq!(caps[1].source, CaptionSource::Imported);
        assert!(parse_captions("no tab here").is_err());
    }
}
