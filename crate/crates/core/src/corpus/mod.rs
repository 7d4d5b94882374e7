//! Class catalogs, query templates and the per-class description corpus.
//!
//! The corpus is the only supervision the text-side adapter ever sees: for
//! every class label it holds free-text descriptions produced by a language
//! model, each tagged with the template that produced it.

mod generate;
pub mod llm;

use std::collections::HashSet;
use std::path::Path;

use chrono::{DateTime, Utc};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;

pub use generate::{generate_descriptions, Generated, GenerationOptions, SkippedQuery};
pub use llm::LanguageModelClient;

/// Placeholder substituted with the class label when rendering a template.
pub const CLASS_PLACEHOLDER: &str = "{class}";

/// Ordered class labels; position `k` is logit index `k` everywhere.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCatalog {
    dataset_id: String,
    labels: Vec<String>,
}

impl ClassCatalog {
    pub fn new(dataset_id: impl Into<String>, labels: Vec<String>) -> Result<Self> {
        let catalog = Self {
            dataset_id: dataset_id.into(),
            labels,
        };
        catalog.validate()?;
        Ok(catalog)
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() < 2 {
            return Err(Error::validation(format!(
                "catalog {:?} needs at least 2 classes, has {}",
                self.dataset_id,
                self.labels.len()
            )));
        }
        let mut seen = HashSet::new();
        for label in &self.labels {
            if label.trim().is_empty() {
                return Err(Error::validation("catalog contains an empty label"));
            }
            if !seen.insert(label.as_str()) {
                return Err(Error::validation(format!(
                    "duplicate class label {label:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let catalog: ClassCatalog = read_json(path)?;
        catalog.validate()?;
        Ok(catalog)
    }

    pub fn dataset_id(&self) -> &str {
        &self.dataset_id
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

/// Query template with a single `{class}` placeholder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub template_id: String,
    pub text: String,
    pub dataset_id: String,
}

impl PromptTemplate {
    pub fn new(
        template_id: impl Into<String>,
        text: impl Into<String>,
        dataset_id: impl Into<String>,
    ) -> Self {
        Self {
            template_id: template_id.into(),
            text: text.into(),
            dataset_id: dataset_id.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.text.matches(CLASS_PLACEHOLDER).count();
        if n != 1 {
            return Err(Error::validation(format!(
                "template {:?} must contain exactly one {CLASS_PLACEHOLDER} placeholder, found {n}",
                self.template_id
            )));
        }
        Ok(())
    }

    pub fn render(&self, label: &str) -> String {
        self.text.replace(CLASS_PLACEHOLDER, label)
    }

    pub fn list_from_json_file(path: &Path) -> Result<Vec<Self>> {
        let templates: Vec<PromptTemplate> = read_json(path)?;
        for t in &templates {
            t.validate()?;
        }
        Ok(templates)
    }
}

/// One rendered query, ready to send to a language model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Query {
    pub label: String,
    pub template_id: String,
    pub text: String,
}

/// Cross product of templates and labels, template-major.
pub fn build_prompts(catalog: &ClassCatalog, templates: &[PromptTemplate]) -> Result<Vec<Query>> {
    let mut out = Vec::with_capacity(templates.len() * catalog.len());
    for template in templates {
        template.validate()?;
        if template.dataset_id != catalog.dataset_id {
            return Err(Error::validation(format!(
                "template {:?} targets dataset {:?}, catalog is {:?}",
                template.template_id, template.dataset_id, catalog.dataset_id
            )));
        }
        for label in &catalog.labels {
            out.push(Query {
                label: label.clone(),
                template_id: template.template_id.clone(),
                text: template.render(label),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Description {
    pub template_id: String,
    pub text: String,
}

/// Validated, immutable description corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DescriptionCorpus {
    catalog: ClassCatalog,
    entries: IndexMap<String, Vec<Description>>,
    generator: String,
    created_at: DateTime<Utc>,
}

// On-disk layout; field order is the serialization order.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusFile {
    dataset_id: String,
    generator: String,
    created_at: DateTime<Utc>,
    labels: Vec<String>,
    entries: IndexMap<String, Vec<Description>>,
}

impl DescriptionCorpus {
    /// Builds a corpus, trimming whitespace and enforcing coverage of every
    /// catalog label. Entries are re-keyed into catalog order.
    pub fn new(
        catalog: ClassCatalog,
        entries: IndexMap<String, Vec<Description>>,
        generator: impl Into<String>,
        created_at: DateTime<Utc>,
    ) -> Result<Self> {
        catalog.validate()?;
        let generator = generator.into();
        if generator.trim().is_empty() {
            return Err(Error::validation("corpus generator provenance is empty"));
        }
        if let Some(unknown) = entries.keys().find(|k| catalog.index_of(k).is_none()) {
            return Err(Error::Consistency(format!(
                "corpus entries mention label {unknown:?} which is not in the catalog"
            )));
        }
        let mut ordered = IndexMap::with_capacity(catalog.len());
        let mut missing = Vec::new();
        for label in catalog.labels() {
            let list: Vec<Description> = entries
                .get(label)
                .map(|v| {
                    v.iter()
                        .map(|d| Description {
                            template_id: d.template_id.clone(),
                            text: d.text.trim().to_string(),
                        })
                        .collect()
                })
                .unwrap_or_default();
            if list.iter().any(|d| d.text.is_empty()) {
                return Err(Error::data(format!(
                    "class {label:?} has an empty or whitespace-only description"
                )));
            }
            if list.is_empty() {
                missing.push(label.clone());
            }
            ordered.insert(label.clone(), list);
        }
        if !missing.is_empty() {
            return Err(Error::CorpusIncomplete { labels: missing });
        }
        Ok(Self {
            catalog,
            entries: ordered,
            generator,
            created_at,
        })
    }

    pub fn catalog(&self) -> &ClassCatalog {
        &self.catalog
    }

    pub fn generator(&self) -> &str {
        &self.generator
    }

    pub fn created_at(&self) -> DateTime<Utc> {
        self.created_at
    }

    pub fn descriptions(&self, label: &str) -> Option<&[Description]> {
        self.entries.get(label).map(Vec::as_slice)
    }

    /// `(class index, description)` pairs in catalog order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, &Description)> {
        self.entries
            .values()
            .enumerate()
            .flat_map(|(k, list)| list.iter().map(move |d| (k, d)))
    }

    /// Per-class description counts (ragged counts are allowed).
    pub fn counts(&self) -> Vec<usize> {
        self.entries.values().map(Vec::len).collect()
    }

    pub fn total(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    /// Fails unless `catalog` has the same dataset and label order.
    pub fn check_catalog(&self, catalog: &ClassCatalog) -> Result<()> {
        if self.catalog.dataset_id != catalog.dataset_id {
            return Err(Error::Consistency(format!(
                "corpus dataset {:?} does not match catalog dataset {:?}",
                self.catalog.dataset_id, catalog.dataset_id
            )));
        }
        if self.catalog.labels != catalog.labels {
            return Err(Error::Consistency(format!(
                "corpus label order {:?} differs from catalog order {:?}",
                self.catalog.labels, catalog.labels
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let file = CorpusFile {
            dataset_id: self.catalog.dataset_id.clone(),
            generator: self.generator.clone(),
            created_at: self.created_at,
            labels: self.catalog.labels.clone(),
            entries: self.entries.clone(),
        };
        let mut s = serde_json::to_string_pretty(&file).expect("corpus serializes");
        s.push('\n');
        s
    }

    pub fn from_json_str(text: &str, path: &Path) -> Result<Self> {
        let file: CorpusFile = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: Some(e.line()),
            message: format!("column {}: {e}", e.column()),
        })?;
        let catalog = ClassCatalog::new(file.dataset_id, file.labels)?;
        Self::new(catalog, file.entries, file.generator, file.created_at)
    }
}

pub fn save_corpus(corpus: &DescriptionCorpus, path: &Path) -> Result<()> {
    write_atomic(path, corpus.to_json().as_bytes())
}

pub fn load_corpus(path: &Path) -> Result<DescriptionCorpus> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    DescriptionCorpus::from_json_str(&text, path)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: Some(e.line()),
        message: format!("column {}: {e}", e.column()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn catalog(labels: &[&str]) -> ClassCatalog {
        ClassCatalog::new("s-tb", labels.iter().map(|s| s.to_string()).collect()).unwrap()
    }

    fn desc(t: &str) -> Description {
        Description {
            template_id: "t0".into(),
            text: t.into(),
        }
    }

    #[test]
    fn prompts_render_each_class() {
        let cat = catalog(&["Normal", "TB"]);
        let t = PromptTemplate::new(
            "xray",
            "Describe a chest x-ray image of lungs affected by {class}?",
            "s-tb",
        );
        let q = build_prompts(&cat, &[t]).unwrap();
        assert_eq!(q.len(), 2);
        assert_eq!(
            q[1].text,
            "Describe a chest x-ray image of lungs affected by TB?"
        );
        assert_eq!(q[0].label, "Normal");
    }

    #[test]
    fn no_templates_means_no_queries() {
        let cat = catalog(&["Normal", "TB"]);
        assert!(build_prompts(&cat, &[]).unwrap().is_empty());
    }

    #[test]
    fn template_without_placeholder_is_rejected() {
        let cat = catalog(&["Normal", "TB"]);
        let t = PromptTemplate::new("bad", "Describe a lung", "s-tb");
        assert!(matches!(
            build_prompts(&cat, &[t]),
            Err(Error::Validation(_))
        ));
        let t = PromptTemplate::new("bad2", "{class} vs {class}", "s-tb");
        assert!(build_prompts(&cat, &[t]).is_err());
    }

    #[test]
    fn template_for_other_dataset_is_rejected() {
        let cat = catalog(&["Normal", "TB"]);
        let t = PromptTemplate::new("t", "Describe {class}", "isic");
        assert!(matches!(
            build_prompts(&cat, &[t]),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn catalog_invariants() {
        assert!(ClassCatalog::new("d", vec!["a".into()]).is_err());
        assert!(ClassCatalog::new("d", vec!["a".into(), "a".into()]).is_err());
        assert!(ClassCatalog::new("d", vec!["a".into(), " ".into()]).is_err());
    }

    #[test]
    fn corpus_requires_every_class() {
        let cat = catalog(&["Normal", "TB"]);
        let mut entries = IndexMap::new();
        entries.insert("Normal".to_string(), vec![desc("clear lungs")]);
        let err = DescriptionCorpus::new(cat, entries, "gpt-3.5", Utc::now()).unwrap_err();
        assert!(matches!(err, Error::CorpusIncomplete { ref labels } if labels == &["TB"]));
    }

    #[test]
    fn corpus_rejects_blank_descriptions_and_trims() {
        let cat = catalog(&["Normal", "TB"]);
        let mut entries = IndexMap::new();
        entries.insert("Normal".to_string(), vec![desc("  clear  ")]);
        entries.insert("TB".to_string(), vec![desc("   ")]);
        assert!(DescriptionCorpus::new(cat.clone(), entries.clone(), "g", Utc::now()).is_err());
        entries.insert("TB".to_string(), vec![desc("cavities\n")]);
        let c = DescriptionCorpus::new(cat, entries, "g", Utc::now()).unwrap();
        assert_eq!(c.descriptions("Normal").unwrap()[0].text, "clear");
        assert_eq!(c.descriptions("TB").unwrap()[0].text, "cavities");
        assert_eq!(c.counts(), vec![1, 1]);
    }

    #[test]
    fn parse_errors_carry_line_context() {
        let bad = "{\n  \"dataset_id\": \"x\",\n  \"generator\": 3\n}";
        let err = DescriptionCorpus::from_json_str(bad, Path::new("c.json")).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, Some(3)),
            other => panic!("unexpected {other:?}"),
        }
    }
}
