//! Labeled image manifests exchanged between pipeline stages.
//!
//! On disk a manifest is JSON:
//! `{"version":1,"classes":[..],"records":[{"path","label","caption","provenance","meta"}..]}`.
//! Paths under the manifest's directory are stored relative to it; others
//! are stored as given. In memory every path is resolved.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::{load_image, ImageTensor};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Provenance {
    #[serde(rename = "real")]
    Real,
    #[serde(rename = "synthetic")]
    Synthetic,
    /// Produced outside this pipeline and imported.
    #[serde(rename = "synthetic(external)")]
    SyntheticExternal,
}

impl Provenance {
    pub fn is_synthetic(self) -> bool {
        self != Provenance::Real
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub path: PathBuf,
    pub label: String,
    #[serde(default)]
    pub caption: Option<String>,
    pub provenance: Provenance,
    #[serde(default)]
    pub meta: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub classes: Vec<String>,
    pub records: Vec<Record>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    version: u32,
    classes: Vec<String>,
    records: Vec<Record>,
}

impl Manifest {
    pub fn new(classes: Vec<String>) -> Result<Self> {
        let unique: HashSet<&String> = classes.iter().collect();
        if unique.len() != classes.len() || classes.iter().any(String::is_empty) {
            return Err(Error::InvalidArgument("class names must be unique and non-empty".into()));
        }
        Ok(Manifest {
            classes,
            records: Vec::new(),
        })
    }

    pub fn push(&mut self, record: Record) -> Result<()> {
        self.class_index(&record.label)?;
        self.records.push(record);
        Ok(())
    }

    pub fn class_index(&self, label: &str) -> Result<usize> {
        self.classes
            .iter()
            .position(|c| c == label)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown class {label:?}")))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Indices of the records with `label` and the given provenance filter.
    pub fn indices(&self, label: &str, real_only: bool) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.label == label && (!real_only || r.provenance == Provenance::Real))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn count_by(&self, real: bool) -> BTreeMap<String, usize> {
        let mut out: BTreeMap<String, usize> = self.classes.iter().map(|c| (c.clone(), 0)).collect();
        for r in &self.records {
            if (r.provenance == Provenance::Real) == real {
                *out.entry(r.label.clone()).or_default() += 1;
            }
        }
        out
    }

    pub fn real(&self) -> Manifest {
        self.filtered(|r| r.provenance == Provenance::Real)
    }

    pub fn synthetic(&self) -> Manifest {
        self.filtered(|r| r.provenance.is_synthetic())
    }

    pub fn filtered(&self, keep: impl Fn(&Record) -> bool) -> Manifest {
        Manifest {
            classes: self.classes.clone(),
            records: self.records.iter().filter(|r| keep(r)).cloned().collect(),
        }
    }

    /// Appends `other`'s records; both must share the class list.
    pub fn merged(&self, other: &Manifest) -> Result<Manifest> {
        if self.classes != other.classes {
            return Err(Error::Config(format!(
                "cannot merge manifests with classes {:?} and {:?}",
                self.classes, other.classes
            )));
        }
        let mut out = self.clone();
        out.records.extend(other.records.iter().cloned());
        Ok(out)
    }

    /// Adds externally generated images as `synthetic(external)` records.
    pub fn import_external(&mut self, images: &[(PathBuf, String)]) -> Result<()> {
        for (path, label) in images {
            self.push(Record {
                path: path.clone(),
                label: label.clone(),
                caption: None,
                provenance: Provenance::SyntheticExternal,
                meta: None,
            })?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::storage(path, e))?;
        let file: ManifestFile = serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))?;
        if file.version != MANIFEST_VERSION {
            return Err(Error::parse(
                path.display().to_string(),
                format!("unsupported manifest version {}", file.version),
            ));
        }
        let base = path.parent().unwrap_or(Path::new(""));
        let mut m = Manifest::new(file.classes)?;
        for mut r in file.records {
            if r.path.is_relative() {
                r.path = base.join(&r.path);
            }
            m.push(r)?;
        }
        Ok(m)
    }

    pub fn to_json(&self, base: &Path) -> Result<String> {
        let records = self
            .records
            .iter()
            .map(|r| {
                let mut r = r.clone();
                if let Ok(rel) = r.path.strip_prefix(base) {
                    r.path = rel.to_path_buf();
                }
                r
            })
            .collect();
        let file = ManifestFile {
            version: MANIFEST_VERSION,
            classes: self.classes.clone(),
            records,
        };
        serde_json::to_string_pretty(&file).map_err(|e| Error::parse("manifest", e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new(""));
        if !base.as_os_str().is_empty() {
            std::fs::create_dir_all(base).map_err(|e| Error::storage(base, e))?;
        }
        std::fs::write(path, self.to_json(base)?).map_err(|e| Error::storage(path, e))
    }

    /// Loads every image, checking that all share one shape (or `expected`).
    pub fn load_images(&self, expected: Option<[usize; 3]>) -> Result<Vec<ImageTensor>> {
        let mut shape = expected;
        let mut out = Vec::with_capacity(self.records.len());
        for r in &self.records {
            let img = load_image(&r.path)?;
            match shape {
                Some(s) if s != img.shape() => {
                    return Err(Error::Shape(format!(
                        "{} has shape {:?}, expected {s:?}",
                        r.path.display(),
                        img.shape()
                    )))
                }
                None => shape = Some(img.shape()),
                _ => {}
            }
            out.push(img);
        }
        Ok(out)
    }

    /// Checks that every path loads with a consistent shape; returns it.
    pub fn validate(&self) -> Result<Option<[usize; 3]>> {
        Ok(self.load_images(None)?.first().map(ImageTensor::shape))
    }
}

fn canonical(p: &Path) -> PathBuf {
    std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}

/// Fails with a leakage error if any path appears in both manifests.
pub fn check_disjoint(train: &Manifest, test: &Manifest) -> Result<()> {
    let seen: HashSet<PathBuf> = train.records.iter().map(|r| canonical(&r.path)).collect();
    let overlap: Vec<String> = test
        .records
        .iter()
        .filter(|r| seen.contains(&canonical(&r.path)))
        .map(|r| r.path.display().to_string())
        .collect();
    if overlap.is_empty() {
        Ok(())
    } else {
        Err(Error::Leakage(format!(
            "{} test image(s) also used for training, e.g. {}",
            overlap.len(),
            overlap[0]
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(path: &str, label: &str, provenance: Provenance) -> Record {
        Record {
            path: PathBuf::from(path),
            label: label.into(),
            caption: None,
            provenance,
            meta: None,
        }
    }

    #[test]
    fn json_round_trip_with_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Manifest::new(vec!["a".into(), "b".into()]).unwrap();
        m.push(record(dir.path().join("x/1.png").to_str().unwrap(), "a", Provenance::Real)).unwrap();
        m.push(record("/elsewhere/2.png", "b", Provenance::SyntheticExternal)).unwrap();
        let path = dir.path().join("m.json");
        m.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"x/1.png\""));
        assert!(text.contains("synthetic(external)"));
        assert_eq!(Manifest::load(&path).unwrap(), m);
    }

    #[test]
    fn unknown_labels_and_fields_rejected() {
        let mut m = Manifest::new(vec!["a".into()]).unwrap();
        assert!(m.push(record("p", "z", Provenance::Real)).is_err());
        assert!(Manifest::new(vec!["a".into(), "a".into()]).is_err());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        std::fs::write(&p, r#"{"version":1,"classes":["a"],"records":[],"extra":1}"#).unwrap();
        assert!(Manifest::load(&p).is_err());
    }

    #[test]
    fn leakage_detected() {
        let mut a = Manifest::new(vec!["a".into()]).unwrap();
        a.push(record("/d/1.png", "a", Provenance::Real)).unwrap();
        let mut b = a.clone();
        assert!(matches!(check_disjoint(&a, &b), Err(Error::Leakage(_))));
        b.records[0].path = "/d/2.png".into();
        assert!(check_disjoint(&a, &b).is_ok());
    }

    #[test]
    fn counts_and_filters() {
        let mut m = Manifest::new(vec!["a".into(), "b".into()]).unwrap();
        m.push(record("1", "a", Provenance::Real)).unwrap();
        m.push(record("2", "a", Provenance::Synthetic)).unwrap();
        m.push(record("3", "b", Provenance::Real)).unwrap();
        assert_eq!(m.count_by(true)["a"], 1);
        assert_eq!(m.count_by(false)["a"], 1);
        assert_eq!(m.count_by(false)["b"], 0);
        assert_eq!(m.indices("a", true), vec![0]);
        assert_eq!(m.indices("a", false), vec![0, 1]);
        assert_eq!(m.real().len(), 2);
        assert_eq!(m.synthetic().len(), 1);
    }
}
