//! Run configuration, read from TOML. Relative paths are resolved against
//! the directory of the config file.

use std::path::{Path, PathBuf};

use langadapt_core::adapter::Stage1Config;
use langadapt_core::encoders::EncoderSettings;
use langadapt_core::io::sha256_hex;
use langadapt_core::losses::LossConfig;
use langadapt_core::synth::SynthPaths;
use langadapt_core::unsup::{AugOp, Stage2Config};
use langadapt_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Image manifest (CSV). Unsplit manifests are split by the run.
    pub manifest: PathBuf,
    /// Description corpus (JSON).
    pub corpus: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default = "default_fractions")]
    pub split_fractions: [f64; 3],
    #[serde(default = "default_true")]
    pub stratified: bool,
    /// Drives the split and both training stages.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub encoders: EncoderSettings,
    #[serde(default)]
    pub stage1: Stage1Config,
    #[serde(default)]
    pub stage2: Stage2Config,
    /// Neighbourhood sizes for the alignment diagnostic.
    #[serde(default = "default_k")]
    pub alignment_k: Vec<usize>,
}

fn default_fractions() -> [f64; 3] {
    [0.6, 0.2, 0.2]
}

fn default_true() -> bool {
    true
}

fn default_k() -> Vec<usize> {
    vec![1, 3, 5]
}

impl RunConfig {
    pub fn new(
        manifest: impl Into<PathBuf>,
        corpus: impl Into<PathBuf>,
        output_dir: impl Into<PathBuf>,
    ) -> Self {
        Self {
            manifest: manifest.into(),
            corpus: corpus.into(),
            output_dir: output_dir.into(),
            split_fractions: default_fractions(),
            stratified: true,
            seed: 0,
            precision: Precision::F32,
            encoders: EncoderSettings::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            alignment_k: default_k(),
        }
    }

    /// Settings for the generated synthetic dataset. The strong branch
    /// perturbs intensities rather than geometry.
    pub fn synthetic(paths: &SynthPaths, output_dir: impl Into<PathBuf>, seed: u64) -> Self {
        let mut cfg = Self::new(&paths.manifest, &paths.corpus, output_dir);
        cfg.seed = seed;
        cfg.stage1.learning_rate = 1.0;
        cfg.stage1.epochs = 50;
        cfg.stage2 = Stage2Config {
            learning_rate: 0.1,
            prompt_learning_rate: Some(1.0),
            epochs: 50,
            loss: LossConfig {
                lambda_entropy: 1.0,
                ..LossConfig::default()
            },
            ..Stage2Config::default()
        };
        cfg.stage2.augment.strong = vec![
            AugOp::HorizontalFlip { p: 0.5 },
            AugOp::ColorJitter {
                brightness: 0.1,
                contrast: 0.1,
            },
            AugOp::RandomErasing {
                p: 0.25,
                max_area: 0.1,
            },
        ];
        cfg
    }

    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            line: e.span().map(|s| text[..s.start].lines().count().max(1)),
            message: e.message().to_string(),
        })
    }

    /// Parses `path` and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => {
                Error::validation(format!("config {} does not exist", path.display()))
            }
            _ => Error::io(path, e),
        })?;
        let cfg = Self::from_toml_str(&text, path)?;
        let parent = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        let base = std::path::absolute(parent).map_err(|e| Error::io(path, e))?;
        Ok(cfg.resolved_against(&base))
    }

    pub fn resolved_against(mut self, base: &Path) -> Self {
        for p in [&mut self.manifest, &mut self.corpus, &mut self.output_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        self
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    /// Checks invariants and that every input path exists.
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.split_fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-9
            || self
                .split_fractions
                .iter()
                .any(|f| !(0.0..=1.0).contains(f))
        {
            return Err(Error::validation(format!(
                "split fractions {:?} must be in [0, 1] and sum to 1",
                self.split_fractions
            )));
        }
        if self.split_fractions[0] == 0.0 || self.split_fractions[2] == 0.0 {
            return Err(Error::validation(
                "train and test fractions must be positive",
            ));
        }
        for (what, p) in [("manifest", &self.manifest), ("corpus", &self.corpus)] {
            if !p.is_file() {
                return Err(Error::validation(format!(
                    "{what} {} does not exist",
                    p.display()
                )));
            }
        }
        if self.alignment_k.is_empty() || self.alignment_k.contains(&0) {
            return Err(Error::validation("alignment_k must list positive sizes"));
        }
        self.stage1().validate()?;
        self.stage2().validate()
    }

    pub fn stage1(&self) -> Stage1Config {
        Stage1Config {
            seed: self.seed,
            ..self.stage1.clone()
        }
    }

    pub fn stage2(&self) -> Stage2Config {
        Stage2Config {
            seed: self.seed,
            ..self.stage2.clone()
        }
    }

    /// Hash of everything that affects results; the output directory is
    /// excluded so identical runs in different places share it.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("run config serializes");
        v.as_object_mut().expect("struct").remove("output_dir");
        sha256_hex(v.to_string().as_bytes())[..16].to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_toml_uses_defaults_and_resolves_paths() {
        let cfg = RunConfig::from_toml_str(
            "manifest = \"m.csv\"\ncorpus = \"c.json\"\noutput_dir = \"out\"\n",
            Path::new("run.toml"),
        )
        .unwrap()
        .resolved_against(Path::new("/data"));
        assert_eq!(cfg.split_fractions, [0.6, 0.2, 0.2]);
        assert_eq!(cfg.manifest, PathBuf::from("/data/m.csv"));
        assert_eq!(
            RunConfig::from_toml_str(&cfg.to_toml(), Path::new("x")).unwrap(),
            cfg
        );
    }

    #[test]
    fn missing_paths_and_bad_fractions_fail_validation() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::new(
            dir.path().join("m.csv"),
            dir.path().join("c.json"),
            dir.path(),
        );
        assert!(matches!(cfg.validate(), Err(Error::Validation(_))));
        std::fs::write(&cfg.manifest, "").unwrap();
        std::fs::write(&cfg.corpus, "").unwrap();
        cfg.validate().unwrap();
        cfg.split_fractions = [0.6, 0.2, 0.3];
        assert!(matches!(cfg.validate(), Err(Error::Validation(_))));
    }

    #[test]
    fn hash_ignores_the_output_directory() {
        let a = RunConfig::new("m", "c", "out-a");
        let mut b = RunConfig::new("m", "c", "out-b");
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn unknown_keys_are_parse_errors() {
        let e = RunConfig::from_toml_str(
            "manifest = \"m\"\ncorpus = \"c\"\noutput_dir = \"o\"\nbogus = 1\n",
            Path::new("r.toml"),
        );
        assert!(matches!(e, Err(Error::Parse { .. })));
    }
}
