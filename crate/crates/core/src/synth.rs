//! A planted synthetic task for the toy encoders.
//!
//! Each class owns one concept word of the toy visual tower. An image of
//! class `k` activates that concept's hidden unit on every patch with a
//! per-image strength, plus a class-independent nuisance concept with a
//! random signed strength, plus Gaussian noise; pixels are obtained by
//! inverting the (orthonormal) patch embedding. A describer client writes
//! descriptions built around the same concept words, and mentions the
//! nuisance concept as a cue of some classes, so an adapter trained on text
//! is tilted towards a feature that carries no class information in images.

use std::path::{Path, PathBuf};

use chrono::{DateTime, TimeZone, Utc};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::llm::{FixtureClient, RecordingClient};
use crate::corpus::{
    build_prompts, generate_descriptions, save_corpus, ClassCatalog, DescriptionCorpus,
    GenerationOptions, LanguageModelClient, PromptTemplate,
};
use crate::dataset::{Manifest, ManifestEntry};
use crate::encoders::{Image, ImageShape, ToyVisualEncoder, ToyVlmConfig};
use crate::error::{Error, Result};
use crate::io::{sha256_hex, write_atomic};
use crate::unsup::LabeledSample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthClass {
    pub label: String,
    /// Concept word of the toy visual tower this class activates.
    pub concept: String,
    /// Extra class-specific words, one of which may appear per description.
    #[serde(default)]
    pub synonyms: Vec<String>,
    /// Words included in every description of the class.
    #[serde(default)]
    pub cues: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub dataset_id: String,
    pub classes: Vec<SynthClass>,
    pub images_per_class: usize,
    pub signal_mean: f64,
    pub signal_std: f64,
    /// Concept activated in every image, independently of its class, with
    /// strength drawn from `N(0, nuisance_std^2)`.
    pub nuisance_concept: Option<String>,
    pub nuisance_std: f64,
    pub patch_noise: f64,
    pub pixel_noise: f64,
    pub descriptions_per_query: usize,
    pub filler_words: usize,
    pub seed: u64,
    pub toy: ToyVlmConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            dataset_id: "synthetic-cxr".into(),
            classes: vec![
                SynthClass {
                    label: "normal".into(),
                    concept: "clear".into(),
                    synonyms: vec!["unremarkable".into(), "healthy".into()],
                    cues: vec![],
                },
                SynthClass {
                    label: "tuberculosis".into(),
                    concept: "cavity".into(),
                    synonyms: vec!["cavitary".into(), "apical".into()],
                    cues: vec!["opacity".into()],
                },
            ],
            images_per_class: 100,
            signal_mean: 0.6,
            signal_std: 0.25,
            nuisance_concept: Some("opacity".into()),
            nuisance_std: 0.7,
            patch_noise: 0.2,
            pixel_noise: 0.01,
            descriptions_per_query: 8,
            filler_words: 6,
            seed: 7,
            toy: ToyVlmConfig::default(),
        }
    }
}

const FILLER: [&str; 24] = [
    "the",
    "image",
    "shows",
    "region",
    "lung",
    "field",
    "with",
    "appearance",
    "visible",
    "area",
    "upper",
    "lower",
    "left",
    "right",
    "zone",
    "pattern",
    "radiograph",
    "chest",
    "finding",
    "typically",
    "seen",
    "in",
    "of",
    "and",
];

fn rng_for(parts: &[&str]) -> ChaCha8Rng {
    let digest = sha256_hex(parts.join("\u{1f}").as_bytes());
    ChaCha8Rng::seed_from_u64(u64::from_str_radix(&digest[..16], 16).expect("hex digest"))
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::validation("synthetic task needs at least 2 classes"));
        }
        let hidden: Vec<String> = (0..self.toy.visual.hidden_size)
            .map(|h| self.toy.concept_word(h))
            .collect();
        let concepts = self
            .classes
            .iter()
            .map(|c| &c.concept)
            .chain(self.nuisance_concept.as_ref());
        for c in concepts {
            if !hidden.contains(c) {
                return Err(Error::validation(format!(
                    "concept {c:?} is not a hidden unit of the toy visual encoder"
                )));
            }
        }
        if self.images_per_class == 0 || self.descriptions_per_query == 0 {
            return Err(Error::validation("synthetic counts must be positive"));
        }
        if !(self.signal_std >= 0.0
            && self.nuisance_std >= 0.0
            && self.patch_noise >= 0.0
            && self.pixel_noise >= 0.0)
        {
            return Err(Error::validation(
                "synthetic noise levels must be non-negative",
            ));
        }
        Ok(())
    }

    pub fn catalog(&self) -> Result<ClassCatalog> {
        ClassCatalog::new(
            self.dataset_id.clone(),
            self.classes.iter().map(|c| c.label.clone()).collect(),
        )
    }

    pub fn templates(&self) -> Vec<PromptTemplate> {
        [
            (
                "appearance",
                "Describe a chest x-ray image of lungs affected by {class}?",
            ),
            (
                "features",
                "What visual features distinguish {class} in a radiograph?",
            ),
            ("findings", "List the imaging findings typical of {class}."),
        ]
        .into_iter()
        .map(|(id, text)| PromptTemplate::new(id, text, self.dataset_id.clone()))
        .collect()
    }

    fn unit(&self, word: &str) -> usize {
        (0..self.toy.visual.hidden_size)
            .find(|&h| self.toy.concept_word(h) == word)
            .expect("validated concept")
    }

    /// Labeled images; item `i` belongs to class `i % C`.
    pub fn images(&self) -> Result<Vec<LabeledSample>> {
        self.validate()?;
        let enc = ToyVisualEncoder::<f64>::new(self.toy.visual.clone())?;
        if !enc.has_orthonormal_rows() {
            return Err(Error::validation(
                "synthetic images need hidden_size <= channels * patch_size^2",
            ));
        }
        let vcfg = enc.config();
        let shape: ImageShape = vcfg.input_shape();
        let (hidden, pd, ps) = (vcfg.hidden_size, vcfg.patch_dim(), vcfg.patch_size);
        let rows = enc.token_embedding_rows();
        let nuisance = self.nuisance_concept.as_deref().map(|w| self.unit(w));
        let units: Vec<usize> = self.classes.iter().map(|c| self.unit(&c.concept)).collect();
        let signal = Normal::new(self.signal_mean, self.signal_std.max(1e-12)).expect("finite");
        let nuisance_strength = Normal::new(0.0, self.nuisance_std.max(1e-12)).expect("finite");
        let patch_noise = Normal::new(0.0, self.patch_noise.max(1e-12)).expect("finite");
        let pixel_noise = Normal::new(0.0, self.pixel_noise.max(1e-12)).expect("finite");
        let c = self.classes.len();
        (0..self.images_per_class * c)
            .map(|i| {
                let label = i % c;
                let item_id = format!("img-{i:05}");
                let mut rng = rng_for(&[&self.seed.to_string(), &item_id]);
                let s = signal.sample(&mut rng).max(0.0);
                let v = nuisance_strength.sample(&mut rng);
                let mut img = Image::filled(shape, 0.0);
                for gy in 0..vcfg.grid_height {
                    for gx in 0..vcfg.grid_width {
                        let mut a: Vec<f64> =
                            (0..hidden).map(|_| patch_noise.sample(&mut rng)).collect();
                        a[units[label]] += s;
                        if let Some(n) = nuisance {
                            a[n] += v;
                        }
                        // x = E^T a, then undo the encoder's pixel normalization.
                        let mut k = 0;
                        for ch in 0..vcfg.channels {
                            for py in 0..ps {
                                for px in 0..ps {
                                    let x: f64 =
                                        (0..hidden).map(|h| rows[h * pd + k] * a[h]).sum::<f64>()
                                            + pixel_noise.sample(&mut rng);
                                    let v = vcfg.pixel_mean as f64 + vcfg.pixel_std as f64 * x;
                                    img.set(
                                        ch,
                                        gy * ps + py,
                                        gx * ps + px,
                                        v.clamp(0.0, 1.0) as f32,
                                    );
                                    k += 1;
                                }
                            }
                        }
                    }
                }
                Ok(LabeledSample {
                    item_id,
                    image: img,
                    label,
                })
            })
            .collect()
    }

    pub fn describer(&self) -> SynthDescriber {
        SynthDescriber {
            model_id: "synthetic-describer".into(),
            classes: self.classes.clone(),
            seed: self.seed,
            filler_words: self.filler_words,
            informative: true,
        }
    }

    /// Fixed timestamp so generated corpora are reproducible.
    pub fn created_at() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0)
            .single()
            .expect("valid date")
    }

    pub fn corpus_with(&self, llm: &dyn LanguageModelClient) -> Result<DescriptionCorpus> {
        let catalog = self.catalog()?;
        let queries = build_prompts(&catalog, &self.templates())?;
        let opts = GenerationOptions {
            samples_per_query: self.descriptions_per_query,
            created_at: Some(Self::created_at()),
            ..GenerationOptions::default()
        };
        Ok(generate_descriptions(&catalog, &queries, llm, &opts)?.corpus)
    }

    pub fn corpus(&self) -> Result<DescriptionCorpus> {
        self.corpus_with(&self.describer())
    }
}

/// Deterministic stand-in for a language model: the description of a class
/// mixes its concept word and synonyms with generic filler.
#[derive(Debug, Clone)]
pub struct SynthDescriber {
    pub model_id: String,
    pub classes: Vec<SynthClass>,
    pub seed: u64,
    pub filler_words: usize,
    /// When false the described class is drawn at random, ignoring the query.
    pub informative: bool,
}

impl SynthDescriber {
    pub fn uninformative(mut self) -> Self {
        self.informative = false;
        self.model_id = "synthetic-shuffled".into();
        self
    }
}

impl LanguageModelClient for SynthDescriber {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn complete(&self, prompt: &str) -> Result<String> {
        self.complete_sample(prompt, 0)
    }

    fn complete_sample(&self, prompt: &str, sample: usize) -> Result<String> {
        let mut rng = rng_for(&[&self.seed.to_string(), prompt, &sample.to_string()]);
        let mentioned = self
            .classes
            .iter()
            .filter(|c| prompt.contains(c.label.as_str()))
            .max_by_key(|c| c.label.len());
        let class = match (self.informative, mentioned) {
            (true, Some(c)) => c,
            (true, None) => return Ok(String::new()),
            (false, _) => self.classes.choose(&mut rng).expect("non-empty classes"),
        };
        let mut words: Vec<&str> = vec![class.concept.as_str()];
        words.extend(class.cues.iter().map(String::as_str));
        if let Some(w) = class.synonyms.choose(&mut rng) {
            words.push(w);
        }
        if rng.random_bool(0.5) {
            words.push(class.concept.as_str());
        }
        for _ in 0..self.filler_words {
            words.push(FILLER.choose(&mut rng).expect("non-empty"));
        }
        words.shuffle(&mut rng);
        let mut text = words.join(" ");
        if let Some(first) = text.get_mut(0..1) {
            first.make_ascii_uppercase();
        }
        text.push('.');
        Ok(text)
    }
}

/// Files written by [`write_synthetic`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthPaths {
    pub catalog: PathBuf,
    pub templates: PathBuf,
    pub manifest: PathBuf,
    pub corpus: PathBuf,
    /// Recorded describer responses, replayable as a fixture client.
    pub llm_fixture: PathBuf,
}

/// Writes the catalog, templates, PNG images with a labeled (unsplit)
/// manifest, the description corpus and its replay fixture under `dir`.
pub fn write_synthetic(cfg: &SynthConfig, dir: &Path) -> Result<SynthPaths> {
    let catalog = cfg.catalog()?;
    let paths = SynthPaths {
        catalog: dir.join("catalog.json"),
        templates: dir.join("templates.json"),
        manifest: dir.join("manifest.csv"),
        corpus: dir.join("corpus.json"),
        llm_fixture: dir.join("llm_fixture.json"),
    };
    write_atomic(&paths.catalog, pretty_json(&catalog).as_bytes())?;
    write_atomic(&paths.templates, pretty_json(&cfg.templates()).as_bytes())?;

    let img_dir = dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut entries = Vec::new();
    for s in cfg.images()? {
        let rel = PathBuf::from("images").join(format!("{}.png", s.item_id));
        s.image.save_png(&dir.join(&rel))?;
        entries.push(ManifestEntry {
            item_id: s.item_id,
            path: rel,
            split: None,
            label: Some(catalog.labels()[s.label].clone()),
        });
    }
    Manifest::new(entries, dir)?.save(&paths.manifest)?;

    let recorder = RecordingClient::new(cfg.describer());
    let corpus = cfg.corpus_with(&recorder)?;
    save_corpus(&corpus, &paths.corpus)?;
    let fixture: FixtureClient = recorder.into_fixture();
    write_atomic(&paths.llm_fixture, fixture.to_json().as_bytes())?;
    Ok(paths)
}

fn pretty_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn images_are_deterministic_and_in_range() {
        let cfg = SynthConfig {
            images_per_class: 3,
            ..SynthConfig::default()
        };
        let a = cfg.images().unwrap();
        assert_eq!(a, cfg.images().unwrap());
        assert_eq!(a.len(), 6);
        assert!(a
            .iter()
            .all(|s| s.image.data().iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn descriptions_mention_the_class_concept() {
        let cfg = SynthConfig::default();
        let corpus = cfg.corpus().unwrap();
        assert_eq!(corpus.counts(), vec![24, 24]);
        for (k, d) in corpus.iter() {
            assert!(
                d.text.to_lowercase().contains(&cfg.classes[k].concept),
                "{}",
                d.text
            );
        }
    }

    #[test]
    fn unknown_concept_is_rejected() {
        let mut cfg = SynthConfig::default();
        cfg.classes[0].concept = "zebra".into();
        assert!(cfg.images().is_err());
    }
}
