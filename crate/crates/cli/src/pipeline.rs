//! Staged run: corpus-load, stage 1, stage 2, eval.
//!
//! Each stage writes its artifacts plus a marker in `stages/` recording the
//! hash of its inputs and of its outputs. A stage is skipped when its marker
//! matches, so an interrupted or failed run resumes where it stopped.
//! Reports carry the config hash and seed but no timestamps, so repeated
//! runs produce identical bytes.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use langadapt_core::adapter::{embed_corpus, pretrain_adapter, Adapter, Stage1Report};
use langadapt_core::corpus::{load_corpus, DescriptionCorpus};
use langadapt_core::dataset::{Manifest, Split};
use langadapt_core::encoders::cache::{cache_image_embeddings, cache_text_embeddings};
use langadapt_core::encoders::{EncoderPair, EncoderRegistry, Image, VisualEncoder};
use langadapt_core::io::{sha256_file, sha256_hex, write_atomic};
use langadapt_core::metrics::{
    alignment_report, emit_plot_data, evaluate, gains, predictions, project_2d, AlignmentReport,
    EvalReport, PlotData, ProjectionMethod, ProjectionPoint, TsneConfig,
};
use langadapt_core::unsup::{train_stage2, LabeledSample, PromptVector, Stage2Config, TrainLog};
use langadapt_core::{Error, Result, Scalar};
use log::info;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{Precision, RunConfig};
use crate::split::split_dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Corpus,
    Stage1,
    Stage2,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Corpus, Stage::Stage1, Stage::Stage2, Stage::Eval];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Corpus => "corpus",
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
            Stage::Eval => "eval",
        }
    }
}

/// Marker written after a stage completes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageMarker {
    pub stage: Stage,
    pub config_hash: String,
    pub seed: u64,
    pub input_hash: String,
    /// Relative output path -> content hash.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageStatus {
    pub stage: Stage,
    pub skipped: bool,
}

/// Headline numbers of a run, read back from its reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub config_hash: String,
    pub stages: Vec<StageStatus>,
    pub text_holdout_accuracy: Option<f64>,
    pub stage1_visual_accuracy: Option<f64>,
    pub accuracy: Option<f64>,
    pub final_strong_entropy: Option<f64>,
}

/// Exclusive ownership of a run directory; released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

fn pid_alive(pid: u32) -> bool {
    // Without procfs, assume the owner is alive.
    !Path::new("/proc").is_dir() || Path::new(&format!("/proc/{pid}")).exists()
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("run.lock");
        for _ in 0..2 {
            match OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    writeln!(f, "{}", std::process::id()).map_err(|e| Error::io(&path, e))?;
                    return Ok(Self { path });
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    let owner = std::fs::read_to_string(&path).unwrap_or_default();
                    match owner.trim().parse::<u32>() {
                        Ok(pid) if pid_alive(pid) => {
                            return Err(Error::runtime(format!(
                                "run directory {} is locked by process {pid}",
                                dir.display()
                            )))
                        }
                        _ => {
                            log::warn!("removing stale lock {}", path.display());
                            let _ = std::fs::remove_file(&path);
                        }
                    }
                }
                Err(e) => return Err(Error::io(&path, e)),
            }
        }
        Err(Error::runtime(format!("cannot lock {}", dir.display())))
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

fn json_bytes<S: Serialize>(value: &S) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s.into_bytes()
}

fn combine(parts: &[&str]) -> String {
    sha256_hex(parts.join("\n").as_bytes())
}

fn cfg_json<S: Serialize>(value: &S) -> String {
    serde_json::to_string(value).expect("serializable")
}

/// Paths of one run. Corpus and stage-1 artifacts live under `root`;
/// stage-2 and eval artifacts under `cell` (equal to `root` except for
/// ablation cells, which share the stage-1 checkpoint).
#[derive(Debug, Clone)]
pub struct RunLayout {
    pub root: PathBuf,
    pub cell: PathBuf,
}

impl RunLayout {
    pub fn single(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
            cell: root.to_path_buf(),
        }
    }

    fn stage_dir(&self, stage: Stage) -> PathBuf {
        match stage {
            Stage::Corpus | Stage::Stage1 => self.root.join(stage.name()),
            Stage::Stage2 | Stage::Eval => self.cell.join(stage.name()),
        }
    }

    fn marker(&self, stage: Stage) -> PathBuf {
        let base = match stage {
            Stage::Corpus | Stage::Stage1 => &self.root,
            Stage::Stage2 | Stage::Eval => &self.cell,
        };
        base.join("stages").join(format!("{}.json", stage.name()))
    }

    pub fn split_manifest(&self) -> PathBuf {
        self.stage_dir(Stage::Corpus).join("manifest.csv")
    }

    pub fn corpus_summary(&self) -> PathBuf {
        self.stage_dir(Stage::Corpus).join("summary.json")
    }

    pub fn stage1_adapter(&self) -> PathBuf {
        self.stage_dir(Stage::Stage1).join("adapter.bin")
    }

    pub fn stage1_report(&self) -> PathBuf {
        self.stage_dir(Stage::Stage1).join("report.json")
    }

    pub fn stage2_adapter(&self) -> PathBuf {
        self.stage_dir(Stage::Stage2).join("adapter.bin")
    }

    pub fn stage2_prompt(&self) -> PathBuf {
        self.stage_dir(Stage::Stage2).join("prompt.bin")
    }

    pub fn stage2_log(&self) -> PathBuf {
        self.stage_dir(Stage::Stage2).join("log.json")
    }

    pub fn eval_report(&self) -> PathBuf {
        self.stage_dir(Stage::Eval).join("report.json")
    }

    pub fn failed_marker(&self) -> PathBuf {
        self.cell.join("FAILED")
    }
}

struct Ctx<'a, T: Scalar> {
    cfg: &'a RunConfig,
    layout: &'a RunLayout,
    hash: String,
    stamp: String,
    encoders: EncoderPair<T>,
}

impl<T: Scalar> Ctx<'_, T> {
    fn header(&self) -> Value {
        json!({ "config_hash": self.hash, "seed": self.cfg.seed })
    }

    fn write(
        &self,
        outputs: &mut BTreeMap<String, String>,
        path: &Path,
        bytes: &[u8],
    ) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        write_atomic(path, bytes)?;
        outputs.insert(self.rel(path), sha256_hex(bytes));
        Ok(())
    }

    fn report(
        &self,
        outputs: &mut BTreeMap<String, String>,
        path: &Path,
        body: Value,
    ) -> Result<()> {
        let mut v = self.header();
        v.as_object_mut()
            .expect("object")
            .extend(body.as_object().expect("report bodies are objects").clone());
        self.write(outputs, path, &json_bytes(&v))
    }

    fn rel(&self, path: &Path) -> String {
        path.strip_prefix(&self.layout.root)
            .unwrap_or(path)
            .to_string_lossy()
            .replace('\\', "/")
    }

    fn abs(&self, rel: &str) -> PathBuf {
        self.layout.root.join(rel)
    }

    fn marker_matches(&self, stage: Stage, input_hash: &str) -> bool {
        let Ok(text) = std::fs::read_to_string(self.layout.marker(stage)) else {
            return false;
        };
        let Ok(m) = serde_json::from_str::<StageMarker>(&text) else {
            return false;
        };
        m.input_hash == input_hash
            && m.outputs
                .iter()
                .all(|(rel, h)| sha256_file(&self.abs(rel)).is_ok_and(|got| &got == h))
    }

    fn write_marker(
        &self,
        stage: Stage,
        input_hash: &str,
        outputs: BTreeMap<String, String>,
    ) -> Result<()> {
        let marker = StageMarker {
            stage,
            config_hash: self.hash.clone(),
            seed: self.cfg.seed,
            input_hash: input_hash.to_string(),
            outputs,
        };
        let path = self.layout.marker(stage);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        write_atomic(&path, &json_bytes(&marker))
    }

    fn input_hash(&self, stage: Stage) -> Result<String> {
        let cfg = self.cfg;
        let precision = cfg_json(&cfg.precision);
        Ok(match stage {
            Stage::Corpus => combine(&[
                &sha256_file(&cfg.corpus)?,
                &sha256_file(&cfg.manifest)?,
                &cfg_json(&(cfg.split_fractions, cfg.stratified, cfg.seed)),
            ]),
            Stage::Stage1 => combine(&[
                &sha256_file(&self.layout.corpus_summary())?,
                &self.encoders.text.fingerprint(),
                &cfg_json(&cfg.stage1()),
                &precision,
            ]),
            Stage::Stage2 => combine(&[
                &sha256_file(&self.layout.corpus_summary())?,
                &sha256_file(&self.layout.stage1_adapter())?,
                &self.encoders.visual.fingerprint(),
                &cfg_json(&cfg.stage2()),
                &precision,
            ]),
            Stage::Eval => combine(&[
                &sha256_file(&self.layout.corpus_summary())?,
                &sha256_file(&self.layout.stage1_adapter())?,
                &sha256_file(&self.layout.stage2_adapter())?,
                &sha256_file(&self.layout.stage2_prompt())?,
                &self.encoders.text.fingerprint(),
                &cfg_json(&cfg.alignment_k),
            ]),
        })
    }

    fn corpus(&self) -> Result<DescriptionCorpus> {
        load_corpus(&self.cfg.corpus)
    }

    fn manifest(&self) -> Result<Manifest> {
        Manifest::load(&self.layout.split_manifest())
    }

    fn channels(&self) -> usize {
        self.encoders.visual.input_shape().channels
    }

    fn run_corpus(&self) -> Result<BTreeMap<String, String>> {
        let corpus = self.corpus()?;
        let source = Manifest::load(&self.cfg.manifest)?;
        let catalog = corpus.catalog();
        for e in source.entries() {
            if let Some(label) = &e.label {
                if catalog.index_of(label).is_none() {
                    return Err(Error::data(format!(
                        "manifest item {:?} has label {label:?}, not in catalog {:?}",
                        e.item_id,
                        catalog.dataset_id()
                    )));
                }
            }
        }
        let already_split = source.entries().iter().all(|e| e.split.is_some());
        let split = if already_split {
            source.clone()
        } else {
            split_dataset(
                &source,
                &self.cfg.split_fractions,
                self.cfg.seed,
                self.cfg.stratified,
            )?
        };
        // Absolute image paths, so the split manifest can live in the run dir.
        let entries = split
            .entries()
            .iter()
            .map(|e| {
                let mut e = e.clone();
                e.path = split.resolve(&e);
                e
            })
            .collect();
        let split = split.with_entries(entries)?;
        if split.split(Split::Train).is_empty() || split.split(Split::Test).is_empty() {
            return Err(Error::data("train and test splits must both be non-empty"));
        }
        let mut image_hashes = Vec::with_capacity(split.len());
        for e in split.entries() {
            image_hashes.push(sha256_file(&e.path)?);
        }
        let mut outputs = BTreeMap::new();
        self.write(
            &mut outputs,
            &self.layout.split_manifest(),
            split.to_csv().as_bytes(),
        )?;
        let sizes: BTreeMap<&str, usize> = Split::ALL
            .iter()
            .map(|s| (s.as_str(), split.split(*s).len()))
            .collect();
        self.report(
            &mut outputs,
            &self.layout.corpus_summary(),
            json!({
                "dataset_id": catalog.dataset_id(),
                "labels": catalog.labels(),
                "generator": corpus.generator(),
                "descriptions_per_class": corpus.counts(),
                "split_sizes": sizes,
                "split_source": if already_split { "manifest" } else { "run" },
                "images_hash": sha256_hex(image_hashes.join("").as_bytes()),
            }),
        )?;
        Ok(outputs)
    }

    fn run_stage1(&self) -> Result<BTreeMap<String, String>> {
        let corpus = self.corpus()?;
        let (adapter, report) =
            pretrain_adapter(&corpus, &*self.encoders.text, &self.cfg.stage1())?;
        let mut outputs = BTreeMap::new();
        self.write(
            &mut outputs,
            &self.layout.stage1_adapter(),
            &adapter.to_bytes(&self.stamp),
        )?;
        self.report(
            &mut outputs,
            &self.layout.stage1_report(),
            json!({ "report": report }),
        )?;
        Ok(outputs)
    }

    fn load_adapter(&self, path: &Path) -> Result<Adapter<T>> {
        let (a, stamp) = Adapter::<f32>::load(path)?;
        self.check_stamp(path, &stamp)?;
        Ok(a.cast())
    }

    fn check_stamp(&self, path: &Path, stamp: &str) -> Result<()> {
        // Stage-1 checkpoints may come from the shared base run of an ablation.
        if !stamp.contains(&format!("seed={}", self.cfg.seed)) {
            return Err(Error::data(format!(
                "{} was produced with another seed ({stamp})",
                path.display()
            )));
        }
        Ok(())
    }

    fn labeled(&self, manifest: &Manifest, split: Split) -> Result<Vec<LabeledSample>> {
        manifest.labeled(split, self.corpus()?.catalog(), self.channels())
    }

    fn run_stage2(&self) -> Result<BTreeMap<String, String>> {
        let manifest = self.manifest()?;
        let g_hat = self.load_adapter(&self.layout.stage1_adapter())?;
        let data = manifest.unlabeled(Split::Train, self.channels())?;
        let val = if manifest.has_labels(Split::Val) {
            Some(self.labeled(&manifest, Split::Val)?)
        } else {
            None
        };
        let cfg: Stage2Config = self.cfg.stage2();
        let out = train_stage2(&data, &g_hat, &*self.encoders.visual, &cfg, val.as_deref())?;
        let dir = self.layout.stage_dir(Stage::Stage2);
        let mut outputs = BTreeMap::new();
        // Checkpoints are stored in f32 whatever the training precision.
        let a32 = |a: &Adapter<T>| a.cast::<f32>().to_bytes(&self.stamp);
        let p32 = |p: &PromptVector<T>| p.cast::<f32>().to_bytes(&self.stamp);
        self.write(
            &mut outputs,
            &self.layout.stage2_adapter(),
            &a32(&out.adapter),
        )?;
        self.write(
            &mut outputs,
            &self.layout.stage2_prompt(),
            &p32(&out.prompt),
        )?;
        self.write(
            &mut outputs,
            &dir.join("final_adapter.bin"),
            &a32(&out.final_adapter),
        )?;
        self.write(
            &mut outputs,
            &dir.join("final_prompt.bin"),
            &p32(&out.final_prompt),
        )?;
        self.write(
            &mut outputs,
            &dir.join("weak_adapter.bin"),
            &a32(&out.final_weak_adapter),
        )?;
        self.report(
            &mut outputs,
            &self.layout.stage2_log(),
            json!({ "train_images": data.len(), "log": out.log }),
        )?;
        Ok(outputs)
    }

    fn run_eval(&self) -> Result<BTreeMap<String, String>> {
        let corpus = self.corpus()?;
        let catalog = corpus.catalog();
        let labels = catalog.labels().to_vec();
        let dataset = catalog.dataset_id().to_string();
        let manifest = self.manifest()?;
        let test = self.labeled(&manifest, Split::Test)?;
        let visual: &dyn VisualEncoder<T> = &*self.encoders.visual;

        let g_hat = self.load_adapter(&self.layout.stage1_adapter())?;
        let g = self.load_adapter(&self.layout.stage2_adapter())?;
        let (p32, stamp) = PromptVector::<f32>::load(&self.layout.stage2_prompt())?;
        self.check_stamp(&self.layout.stage2_prompt(), &stamp)?;
        let prompt: PromptVector<T> = p32.cast();

        let base_pairs = predictions(&test, &g_hat, None, visual)?;
        let pairs = predictions(&test, &g, Some(&prompt), visual)?;
        let base = evaluate(&dataset, "stage1-adapter", labels.len(), &base_pairs)?;
        let tuned = evaluate(&dataset, "stage2-prompted", labels.len(), &pairs)?;
        let (gain_points, gain_relative) = gains(base.accuracy, tuned.accuracy);

        let log: Value = serde_json::from_slice(
            &std::fs::read(self.layout.stage2_log())
                .map_err(|e| Error::io(self.layout.stage2_log(), e))?,
        )
        .map_err(|e| Error::data(format!("stage-2 log: {e}")))?;
        let train_log: TrainLog = serde_json::from_value(log["log"].clone())
            .map_err(|e| Error::data(format!("stage-2 log: {e}")))?;

        let alignment = self.alignment(&corpus, &test)?;

        let dir = self.layout.stage_dir(Stage::Eval);
        let mut outputs = BTreeMap::new();
        self.report(
            &mut outputs,
            &self.layout.eval_report(),
            json!({
                "labels": labels,
                "stage2": tuned,
                "stage1": base,
                "gain_points": gain_points,
                "gain_relative": gain_relative,
                "selection": train_log.selection,
                "selected_epoch": train_log.selected_epoch,
                "best_val_accuracy": train_log.best_val_accuracy,
                "final_val_accuracy": train_log.final_val_accuracy,
                "final_strong_entropy": train_log.final_strong_entropy(),
                "alignment": alignment,
            }),
        )?;
        let text = format!(
            "config {} seed {}\n\n{}\n{}\ngain {:+.4} points{}\n\nalignment ({})\n{}\n",
            self.hash,
            self.cfg.seed,
            base.to_table(&labels),
            tuned.to_table(&labels),
            gain_points,
            gain_relative
                .map(|r| format!(" ({:+.2}% relative)", 100.0 * r))
                .unwrap_or_default(),
            alignment.definition_id,
            alignment
                .k_values
                .iter()
                .zip(&alignment.scores)
                .map(|(k, s)| format!("  k={k}: {s:.4}"))
                .collect::<Vec<_>>()
                .join("\n"),
        );
        self.write(&mut outputs, &dir.join("report.txt"), text.as_bytes())?;
        self.write(
            &mut outputs,
            &dir.join("predictions.csv"),
            predictions_csv(&test, &pairs, &labels).as_bytes(),
        )?;

        let embeddings: Vec<Vec<f64>> = test
            .iter()
            .map(|s| {
                Ok(visual
                    .encode_image(&s.image, Some(&prompt))?
                    .values()
                    .iter()
                    .map(|v| v.f64())
                    .collect())
            })
            .collect::<Result<_>>()?;
        let tsne = TsneConfig {
            seed: self.cfg.seed,
            ..TsneConfig::default()
        };
        let (xy, method) = project_2d(&embeddings, ProjectionMethod::Tsne, &tsne)?;
        let points = test
            .iter()
            .zip(&pairs)
            .zip(xy)
            .map(|((s, &(_, pred)), [x, y])| ProjectionPoint {
                item_id: s.item_id.clone(),
                series: labels[pred].clone(),
                x,
                y,
            })
            .collect();
        let plot = dir.join("projection.csv");
        emit_plot_data(&PlotData::Projection2d { method, points }, &plot)?;
        outputs.insert(self.rel(&plot), sha256_file(&plot)?);
        Ok(outputs)
    }

    /// Hit-rate of the description embeddings against the frozen visual
    /// embeddings of the test images, for the configured `k` that fit.
    fn alignment(
        &self,
        corpus: &DescriptionCorpus,
        test: &[LabeledSample],
    ) -> Result<AlignmentReport> {
        let samples = embed_corpus(corpus, &*self.encoders.text)?;
        let mut text = vec![Vec::new(); corpus.catalog().len()];
        for s in samples {
            text[s.label].push(s.embedding);
        }
        let visual = test
            .iter()
            .map(|s| {
                Ok((
                    self.encoders
                        .visual
                        .encode_image(&s.image, None)?
                        .into_values(),
                    s.label,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let ks: Vec<usize> = self
            .cfg
            .alignment_k
            .iter()
            .copied()
            .filter(|&k| k <= visual.len())
            .collect();
        alignment_report(corpus.catalog().dataset_id(), &text, &visual, &ks)
    }

    fn run_stage(&self, stage: Stage) -> Result<BTreeMap<String, String>> {
        match stage {
            Stage::Corpus => self.run_corpus(),
            Stage::Stage1 => self.run_stage1(),
            Stage::Stage2 => self.run_stage2(),
            Stage::Eval => self.run_eval(),
        }
    }
}

fn predictions_csv(test: &[LabeledSample], pairs: &[(usize, usize)], labels: &[String]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["item_id", "label", "predicted"])
        .expect("in-memory");
    for (s, &(t, p)) in test.iter().zip(pairs) {
        w.write_record([s.item_id.as_str(), &labels[t], &labels[p]])
            .expect("in-memory");
    }
    String::from_utf8(w.into_inner().expect("in-memory")).expect("utf-8")
}

fn stamp(cfg: &RunConfig, hash: &str) -> String {
    format!("config={hash};seed={}", cfg.seed)
}

fn execute<T: Scalar>(
    cfg: &RunConfig,
    layout: &RunLayout,
    stages: &[Stage],
    hash: &str,
) -> Result<Vec<StageStatus>> {
    let encoders = EncoderRegistry::<T>::new().build(&cfg.encoders)?;
    let ctx = Ctx {
        cfg,
        layout,
        hash: hash.to_string(),
        stamp: stamp(cfg, hash),
        encoders,
    };
    let mut statuses = Vec::new();
    for &stage in stages {
        let input = ctx.input_hash(stage)?;
        if ctx.marker_matches(stage, &input) {
            info!("{}: up to date, skipped", stage.name());
            statuses.push(StageStatus {
                stage,
                skipped: true,
            });
            continue;
        }
        let started = Instant::now();
        let outputs = match ctx.run_stage(stage) {
            Ok(o) => o,
            Err(e) => {
                let marker = json!({ "stage": stage, "config_hash": hash, "error": e.to_string() });
                let _ = write_atomic(&layout.failed_marker(), &json_bytes(&marker));
                return Err(e);
            }
        };
        ctx.write_marker(stage, &input, outputs)?;
        info!("{}: done in {:.2?}", stage.name(), started.elapsed());
        statuses.push(StageStatus {
            stage,
            skipped: false,
        });
    }
    Ok(statuses)
}

fn read_json(path: &Path) -> Option<Value> {
    serde_json::from_slice(&std::fs::read(path).ok()?).ok()
}

/// Runs `stages` (in order) for `cfg` in `layout`, holding the cell lock.
pub fn run_stages(cfg: &RunConfig, layout: &RunLayout, stages: &[Stage]) -> Result<RunSummary> {
    cfg.validate()?;
    let _lock = RunLock::acquire(&layout.cell)?;
    let hash = cfg.hash();
    let mut config_copy = json!({ "config_hash": hash, "seed": cfg.seed, "config": cfg });
    config_copy["config"]
        .as_object_mut()
        .expect("object")
        .remove("output_dir");
    write_atomic(&layout.cell.join("config.json"), &json_bytes(&config_copy))?;
    let statuses = match cfg.precision {
        Precision::F32 => execute::<f32>(cfg, layout, stages, &hash)?,
        Precision::F64 => execute::<f64>(cfg, layout, stages, &hash)?,
    };
    if layout.failed_marker().exists() {
        let _ = std::fs::remove_file(layout.failed_marker());
    }
    Ok(summarize(layout, hash, statuses))
}

fn summarize(layout: &RunLayout, config_hash: String, stages: Vec<StageStatus>) -> RunSummary {
    let s1 = read_json(&layout.stage1_report());
    let ev = read_json(&layout.eval_report());
    RunSummary {
        run_dir: layout.cell.clone(),
        config_hash,
        stages,
        text_holdout_accuracy: s1.and_then(|v| v["report"]["final_holdout_accuracy"].as_f64()),
        stage1_visual_accuracy: ev.as_ref().and_then(|v| v["stage1"]["accuracy"].as_f64()),
        accuracy: ev.as_ref().and_then(|v| v["stage2"]["accuracy"].as_f64()),
        final_strong_entropy: ev.as_ref().and_then(|v| v["final_strong_entropy"].as_f64()),
    }
}

/// Stages up to and including `last`.
pub fn stages_through(last: Stage) -> Vec<Stage> {
    Stage::ALL.iter().copied().filter(|s| *s <= last).collect()
}

/// Full pipeline in `cfg.output_dir`.
pub fn run_pipeline(cfg: &RunConfig) -> Result<RunSummary> {
    run_stages(cfg, &RunLayout::single(&cfg.output_dir), &Stage::ALL)
}

/// Stage-1 report of a finished run.
pub fn load_stage1_report(layout: &RunLayout) -> Result<Stage1Report> {
    let v =
        read_json(&layout.stage1_report()).ok_or_else(|| Error::data("missing stage-1 report"))?;
    serde_json::from_value(v["report"].clone())
        .map_err(|e| Error::data(format!("stage-1 report: {e}")))
}

/// Eval reports (stage 1, stage 2) of a finished run.
pub fn load_eval_reports(layout: &RunLayout) -> Result<(EvalReport, EvalReport)> {
    let v = read_json(&layout.eval_report()).ok_or_else(|| Error::data("missing eval report"))?;
    let get = |k: &str| {
        serde_json::from_value(v[k].clone()).map_err(|e| Error::data(format!("eval report: {e}")))
    };
    Ok((get("stage1")?, get("stage2")?))
}

/// Alignment of description and frozen test-image embeddings, after the
/// corpus stage; no training involved. Written to `align/report.json`.
pub fn run_alignment(cfg: &RunConfig) -> Result<AlignmentReport> {
    let layout = RunLayout::single(&cfg.output_dir);
    run_stages(cfg, &layout, &[Stage::Corpus])?;
    let hash = cfg.hash();
    let report = match cfg.precision {
        Precision::F32 => alignment_with::<f32>(cfg, &layout, &hash)?,
        Precision::F64 => alignment_with::<f64>(cfg, &layout, &hash)?,
    };
    let body = json!({ "config_hash": hash, "seed": cfg.seed, "alignment": report });
    write_atomic(
        &layout.cell.join("align").join("report.json"),
        &json_bytes(&body),
    )?;
    Ok(report)
}

fn alignment_with<T: Scalar>(
    cfg: &RunConfig,
    layout: &RunLayout,
    hash: &str,
) -> Result<AlignmentReport> {
    let ctx = Ctx {
        cfg,
        layout,
        hash: hash.to_string(),
        stamp: stamp(cfg, hash),
        encoders: EncoderRegistry::<T>::new().build(&cfg.encoders)?,
    };
    let test = ctx.labeled(&ctx.manifest()?, Split::Test)?;
    ctx.alignment(&ctx.corpus()?, &test)
}

/// Fills the text and image embedding caches under `<output_dir>/cache/`
/// for every description and every manifest image. Returns the entry counts.
pub fn embed_caches(cfg: &RunConfig) -> Result<(usize, usize)> {
    cfg.validate()?;
    let encoders = EncoderRegistry::<f32>::new().build(&cfg.encoders)?;
    let corpus = load_corpus(&cfg.corpus)?;
    let labels = corpus.catalog().labels();
    let mut counters: BTreeMap<usize, usize> = BTreeMap::new();
    let texts: Vec<(String, String)> = corpus
        .iter()
        .map(|(k, d)| {
            let n = counters.entry(k).or_default();
            *n += 1;
            (
                format!("{}/{}/{}", labels[k], d.template_id, *n - 1),
                d.text.clone(),
            )
        })
        .collect();
    let dir = cfg.output_dir.join("cache");
    let text = cache_text_embeddings(&*encoders.text, &texts, &dir.join("text.cache"))?;
    let manifest = Manifest::load(&cfg.manifest)?;
    let channels = encoders.visual.input_shape().channels;
    let images = manifest
        .entries()
        .iter()
        .map(|e| {
            Ok((
                e.item_id.clone(),
                Image::load(&manifest.resolve(e), channels)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let visual = cache_image_embeddings(&*encoders.visual, &images, &dir.join("visual.cache"))?;
    Ok((text.len(), visual.len()))
}
