//! Image manifests: CSV with columns `item_id,path,split,label`.
//!
//! `split` may be blank (not yet split) and `label` blank or absent
//! (unlabeled). Relative paths are resolved against the manifest's
//! directory.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::ClassCatalog;
use crate::encoders::Image;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::unsup::{LabeledSample, UnlabeledDataset, UnlabeledItem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::validation(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub item_id: String,
    /// As written in the manifest.
    pub path: PathBuf,
    pub split: Option<Split>,
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    entries: Vec<ManifestEntry>,
    base_dir: PathBuf,
}

#[derive(Deserialize)]
struct Row {
    item_id: String,
    path: String,
    #[serde(default)]
    split: Option<String>,
    #[serde(default)]
    label: Option<String>,
}

fn blank_to_none(s: Option<String>) -> Option<String> {
    s.map(|v| v.trim().to_string()).filter(|v| !v.is_empty())
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if e.item_id.trim().is_empty() {
                return Err(Error::data("manifest item_id must not be empty"));
            }
            if !seen.insert(e.item_id.as_str()) {
                return Err(Error::data(format!(
                    "duplicate item_id {:?} in manifest",
                    e.item_id
                )));
            }
        }
        Ok(Self {
            entries,
            base_dir: base_dir.into(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let parse_err = |line: Option<usize>, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let headers = reader
            .headers()
            .map_err(|e| parse_err(Some(1), e.to_string()))?
            .clone();
        for col in ["item_id", "path"] {
            if !headers.iter().any(|h| h == col) {
                return Err(parse_err(Some(1), format!("missing column {col:?}")));
            }
        }
        let mut entries = Vec::new();
        for rec in reader.deserialize::<Row>() {
            let row = rec.map_err(|e| {
                let line = e.position().map(|p| p.line() as usize);
                parse_err(line, e.to_string())
            })?;
            let split = match blank_to_none(row.split) {
                Some(s) => Some(
                    s.parse::<Split>()
                        .map_err(|e| parse_err(None, e.to_string()))?,
                ),
                None => None,
            };
            entries.push(ManifestEntry {
                item_id: row.item_id,
                path: PathBuf::from(row.path),
                split,
                label: blank_to_none(row.label),
            });
        }
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::new(entries, base)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["item_id", "path", "split", "label"])
            .expect("in-memory write");
        for e in &self.entries {
            w.write_record([
                e.item_id.as_str(),
                &e.path.to_string_lossy(),
                e.split.map(Split::as_str).unwrap_or(""),
                e.label.as_deref().unwrap_or(""),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
    }

    /// Paths are written as stored; relative ones must stay valid from the
    /// new location.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.base_dir.join(&entry.path)
        }
    }

    /// Same base directory, subset of entries.
    pub fn with_entries(&self, entries: Vec<ManifestEntry>) -> Result<Self> {
        Self::new(entries, self.base_dir.clone())
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries
            .iter()
            .filter(|e| e.split == Some(split))
            .collect()
    }

    fn load_images<'a>(
        &self,
        entries: &[&'a ManifestEntry],
        channels: usize,
    ) -> Result<Vec<(&'a ManifestEntry, Image)>> {
        entries
            .par_iter()
            .map(|e| Ok((*e, Image::load(&self.resolve(e), channels)?)))
            .collect()
    }

    /// Images of one split without their labels.
    pub fn unlabeled(&self, split: Split, channels: usize) -> Result<UnlabeledDataset> {
        let items = self
            .load_images(&self.split(split), channels)?
            .into_iter()
            .map(|(e, image)| UnlabeledItem {
                item_id: e.item_id.clone(),
                image,
            })
            .collect();
        UnlabeledDataset::new(items)
    }

    /// Labeled images of one split; every entry must carry a catalog label.
    pub fn labeled(
        &self,
        split: Split,
        catalog: &ClassCatalog,
        channels: usize,
    ) -> Result<Vec<LabeledSample>> {
        let entries = self.split(split);
        for e in &entries {
            self.label_index(e, catalog)?;
        }
        self.load_images(&entries, channels)?
            .into_iter()
            .map(|(e, image)| {
                Ok(LabeledSample {
                    item_id: e.item_id.clone(),
                    image,
                    label: self.label_index(e, catalog)?,
                })
            })
            .collect()
    }

    /// Whether every entry of `split` has a label.
    pub fn has_labels(&self, split: Split) -> bool {
        let s = self.split(split);
        !s.is_empty() && s.iter().all(|e| e.label.is_some())
    }

    fn label_index(&self, e: &ManifestEntry, catalog: &ClassCatalog) -> Result<usize> {
        let label = e
            .label
            .as_deref()
            .ok_or_else(|| Error::data(format!("item {:?} has no label", e.item_id)))?;
        catalog.index_of(label).ok_or_else(|| {
            Error::data(format!(
                "item {:?} has label {label:?}, not in catalog {:?}",
                e.item_id,
                catalog.dataset_id()
            ))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_roundtrip_with_blank_fields() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        std::fs::write(
            &p,
            "item_id,path,split,label\na,img/a.png,train,\nb,img/b.png,,TB\n",
        )
        .unwrap();
        let m = Manifest::load(&p).unwrap();
        assert_eq!(m.entries()[0].split, Some(Split::Train));
        assert_eq!(m.entries()[0].label, None);
        assert_eq!(m.entries()[1].split, None);
        assert_eq!(m.entries()[1].label.as_deref(), Some("TB"));
        assert_eq!(m.resolve(&m.entries()[0]), dir.path().join("img/a.png"));
        m.save(&p).unwrap();
        assert_eq!(Manifest::load(&p).unwrap(), m);
    }

    #[test]
    fn label_column_is_optional() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        std::fs::write(&p, "item_id,path,split\na,a.png,test\n").unwrap();
        assert_eq!(Manifest::load(&p).unwrap().entries()[0].label, None);
    }

    #[test]
    fn bad_rows_are_parse_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        std::fs::write(&p, "item_id,path,split\na,a.png,bogus\n").unwrap();
        assert!(matches!(Manifest::load(&p), Err(Error::Parse { .. })));
        std::fs::write(&p, "id,path\na,a.png\n").unwrap();
        assert!(matches!(
            Manifest::load(&p),
            Err(Error::Parse { line: Some(1), .. })
        ));
        std::fs::write(&p, "item_id,path\na,a.png\na,b.png\n").unwrap();
        assert!(matches!(Manifest::load(&p), Err(Error::Data(_))));
    }
}
