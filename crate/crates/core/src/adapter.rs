//! Linear cross-modal adapter (the textual classifier) and its supervised
//! pre-training on description embeddings.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{ClassCatalog, DescriptionCorpus};
use crate::encoders::TextEncoder;
use crate::error::{Error, Result};
use crate::io::{write_atomic, BinReader, BinWriter};
use crate::linalg::{all_finite, argmax, convert, dot};
use crate::losses::{cross_entropy_with_grad, TargetDistribution};
use crate::optim::{Optimizer, OptimizerKind};
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"LAAD";
const VERSION: u32 = 1;

/// `logits = W x (+ b)`, with `W` stored row-major as `C x dim`.
///
/// Parameters are kept in one flat buffer (weights, then bias) so the
/// optimizers can treat them uniformly.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter<T> {
    num_classes: usize,
    dim: usize,
    has_bias: bool,
    params: Vec<T>,
    catalog_id: String,
}

impl<T: Scalar> Adapter<T> {
    pub fn zeros(
        num_classes: usize,
        dim: usize,
        bias: bool,
        catalog_id: impl Into<String>,
    ) -> Self {
        let n = num_classes * dim + if bias { num_classes } else { 0 };
        Self {
            num_classes,
            dim,
            has_bias: bias,
            params: vec![T::zero(); n],
            catalog_id: catalog_id.into(),
        }
    }

    pub fn from_parts(
        weights: Vec<T>,
        bias: Option<Vec<T>>,
        num_classes: usize,
        dim: usize,
        catalog_id: impl Into<String>,
    ) -> Result<Self> {
        if weights.len() != num_classes * dim {
            return Err(Error::shape(
                "adapter weights",
                num_classes * dim,
                weights.len(),
            ));
        }
        let has_bias = bias.is_some();
        let mut params = weights;
        if let Some(b) = bias {
            if b.len() != num_classes {
                return Err(Error::shape("adapter bias", num_classes, b.len()));
            }
            params.extend(b);
        }
        if !all_finite(&params) {
            return Err(Error::validation("adapter parameters must be finite"));
        }
        Ok(Self {
            num_classes,
            dim,
            has_bias,
            params,
            catalog_id: catalog_id.into(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn has_bias(&self) -> bool {
        self.has_bias
    }

    pub fn catalog_id(&self) -> &str {
        &self.catalog_id
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn weights(&self) -> &[T] {
        &self.params[..self.num_classes * self.dim]
    }

    pub fn row(&self, k: usize) -> &[T] {
        &self.params[k * self.dim..(k + 1) * self.dim]
    }

    pub fn bias(&self) -> Option<&[T]> {
        self.has_bias
            .then(|| &self.params[self.num_classes * self.dim..])
    }

    pub fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.dim {
            return Err(Error::shape("adapter input", self.dim, x.len()));
        }
        let mut out: Vec<T> = (0..self.num_classes).map(|k| dot(self.row(k), x)).collect();
        if let Some(b) = self.bias() {
            for (o, &bk) in out.iter_mut().zip(b) {
                *o = *o + bk;
            }
        }
        Ok(out)
    }

    /// Adds `scale * d(logits)/d(params)^T grad_logits` into `acc`.
    pub fn accumulate_param_grad(&self, x: &[T], grad_logits: &[T], scale: T, acc: &mut [T]) {
        debug_assert_eq!(acc.len(), self.params.len());
        for (k, &g) in grad_logits.iter().enumerate() {
            let gs = g * scale;
            if gs == T::zero() {
                continue;
            }
            for (a, &xi) in acc[k * self.dim..(k + 1) * self.dim].iter_mut().zip(x) {
                *a = *a + gs * xi;
            }
            if self.has_bias {
                let i = self.num_classes * self.dim + k;
                acc[i] = acc[i] + gs;
            }
        }
    }

    /// `W^T grad_logits`: gradient with respect to the input embedding.
    pub fn input_grad(&self, grad_logits: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.dim];
        for (k, &g) in grad_logits.iter().enumerate() {
            for (o, &w) in out.iter_mut().zip(self.row(k)) {
                *o = *o + g * w;
            }
        }
        out
    }

    /// Errors unless the adapter was built for `catalog`.
    pub fn check_catalog(&self, catalog: &ClassCatalog) -> Result<()> {
        if self.catalog_id != catalog.dataset_id() || self.num_classes != catalog.len() {
            return Err(Error::Consistency(format!(
                "adapter for {:?} ({} classes) does not match catalog {:?} ({} classes)",
                self.catalog_id,
                self.num_classes,
                catalog.dataset_id(),
                catalog.len()
            )));
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Adapter<U> {
        Adapter {
            num_classes: self.num_classes,
            dim: self.dim,
            has_bias: self.has_bias,
            params: convert(&self.params),
            catalog_id: self.catalog_id.clone(),
        }
    }

    /// Header (C, dim, bias flag, catalog id, stamp) then `f32` weight rows
    /// and, when present, the bias.
    pub fn to_bytes(&self, stamp: &str) -> Vec<u8> {
        let mut w = BinWriter::new(MAGIC, VERSION);
        w.u32(self.num_classes as u32)
            .u32(self.dim as u32)
            .u8(u8::from(self.has_bias))
            .str(&self.catalog_id)
            .str(stamp)
            .f32s(self.params.iter().map(|v| v.f32()));
        w.into_bytes()
    }

    pub fn save(&self, path: &Path, stamp: &str) -> Result<()> {
        write_atomic(path, &self.to_bytes(stamp))
    }

    /// Returns the adapter and the stamp it was saved with.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (mut r, version) = BinReader::open(&bytes, path, MAGIC)?;
        if version != VERSION {
            return Err(r.err(format!("unsupported adapter file version {version}")));
        }
        let c = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let bias = match r.u8()? {
            0 => false,
            1 => true,
            other => return Err(r.err(format!("bad bias flag {other}"))),
        };
        let catalog_id = r.str()?;
        let stamp = r.str()?;
        let n = c * dim + if bias { c } else { 0 };
        let raw = r.f32s(n)?;
        r.finish()?;
        let mut params: Vec<T> = raw.into_iter().map(T::of_f32).collect();
        let b = bias.then(|| params.split_off(c * dim));
        Ok((Self::from_parts(params, b, c, dim, catalog_id)?, stamp))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub holdout_fraction: f64,
    pub bias: bool,
    pub seed: u64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            optimizer: OptimizerKind::Sgd,
            epochs: 50,
            batch_size: 32,
            holdout_fraction: 0.2,
            bias: false,
            seed: 0,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation("stage-1 learning_rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("stage-1 batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::validation("holdout_fraction must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Epoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub holdout_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Report {
    pub dataset_id: String,
    pub n_train: usize,
    pub n_holdout: usize,
    pub train_per_class: Vec<usize>,
    /// Entry 0 is the untrained adapter.
    pub epochs: Vec<Stage1Epoch>,
    pub final_train_accuracy: f64,
    pub final_holdout_accuracy: Option<f64>,
}

/// One training example: an embedding and its class index.
#[derive(Debug, Clone, PartialEq)]
pub struct TextSample<T> {
    pub embedding: Vec<T>,
    pub label: usize,
}

/// Embeds every description of `corpus`, label-major.
pub fn embed_corpus<T: Scalar>(
    corpus: &DescriptionCorpus,
    encoder: &dyn TextEncoder<T>,
) -> Result<Vec<TextSample<T>>> {
    let mut texts = Vec::new();
    let mut labels = Vec::new();
    for (k, label) in corpus.catalog().labels().iter().enumerate() {
        for d in corpus.descriptions(label).unwrap_or_default() {
            texts.push(d.text.as_str());
            labels.push(k);
        }
    }
    let embs = encoder.encode_text(&texts)?;
    Ok(embs
        .into_iter()
        .zip(labels)
        .map(|(e, label)| TextSample {
            embedding: e.into_values(),
            label,
        })
        .collect())
}

/// Stratified split of sample indices: per class, a seeded shuffle and
/// `round(n * fraction)` held out.
pub fn holdout_split<T>(
    samples: &[TextSample<T>],
    catalog: &ClassCatalog,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut holdout = Vec::new();
    let mut empty = Vec::new();
    for k in 0..catalog.len() {
        let mut idx: Vec<usize> = (0..samples.len())
            .filter(|&i| samples[i].label == k)
            .collect();
        idx.shuffle(&mut rng);
        let n_hold = (idx.len() as f64 * fraction).round() as usize;
        if n_hold >= idx.len() {
            empty.push(format!(
                "{} ({} descriptions)",
                catalog.labels()[k],
                idx.len()
            ));
        }
        holdout.extend_from_slice(&idx[..n_hold.min(idx.len())]);
        train.extend_from_slice(&idx[n_hold.min(idx.len())..]);
    }
    if !empty.is_empty() {
        return Err(Error::data(format!(
            "no training descriptions left after holdout for: {}",
            empty.join(", ")
        )));
    }
    train.sort_unstable();
    holdout.sort_unstable();
    Ok((train, holdout))
}

fn evaluate_split<T: Scalar>(
    adapter: &Adapter<T>,
    samples: &[TextSample<T>],
    idx: &[usize],
) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut correct = 0usize;
    for &i in idx {
        let s = &samples[i];
        let logits = adapter.forward(&s.embedding)?;
        let t = TargetDistribution::one_hot(s.label, adapter.num_classes())?;
        loss += crate::losses::cross_entropy(&logits, &t)?.f64();
        correct += usize::from(argmax(&logits) == s.label);
    }
    let n = idx.len().max(1) as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Trains a fresh zero-initialized adapter by mini-batch cross-entropy on
/// precomputed description embeddings.
pub fn pretrain_on_samples<T: Scalar>(
    catalog: &ClassCatalog,
    samples: &[TextSample<T>],
    cfg: &Stage1Config,
) -> Result<(Adapter<T>, Stage1Report)> {
    cfg.validate()?;
    let dim = samples
        .first()
        .map(|s| s.embedding.len())
        .ok_or_else(|| Error::data("no description embeddings to train on"))?;
    if let Some(s) = samples.iter().find(|s| s.embedding.len() != dim) {
        return Err(Error::shape(
            "description embedding",
            dim,
            s.embedding.len(),
        ));
    }
    if let Some(s) = samples.iter().find(|s| s.label >= catalog.len()) {
        return Err(Error::shape(
            "class index",
            format!("< {}", catalog.len()),
            s.label,
        ));
    }
    let (train, holdout) = holdout_split(samples, catalog, cfg.holdout_fraction, cfg.seed)?;
    let mut adapter = Adapter::<T>::zeros(catalog.len(), dim, cfg.bias, catalog.dataset_id());
    let mut opt = Optimizer::<T>::new(cfg.optimizer, cfg.learning_rate, adapter.parameter_count());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5747_4731);
    let mut grad = vec![T::zero(); adapter.parameter_count()];

    let record = |adapter: &Adapter<T>, epoch: usize| -> Result<Stage1Epoch> {
        let (train_loss, train_accuracy) = evaluate_split(adapter, samples, &train)?;
        let holdout_accuracy = if holdout.is_empty() {
            None
        } else {
            Some(evaluate_split(adapter, samples, &holdout)?.1)
        };
        Ok(Stage1Epoch {
            epoch,
            train_loss,
            train_accuracy,
            holdout_accuracy,
        })
    };

    let mut epochs = vec![record(&adapter, 0)?];
    let mut order = train.clone();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = T::zero());
            let scale = T::one() / T::of(batch.len() as f64);
            for &i in batch {
                let s = &samples[i];
                let logits = adapter.forward(&s.embedding)?;
                let t = TargetDistribution::one_hot(s.label, catalog.len())?;
                let l = cross_entropy_with_grad(&logits, &t)?;
                adapter.accumulate_param_grad(&s.embedding, &l.grad, scale, &mut grad);
            }
            opt.step(adapter.params_mut(), &grad);
        }
        if !all_finite(adapter.params()) {
            return Err(Error::NonFinite {
                epoch,
                lr: cfg.learning_rate,
                batch_ids: Vec::new(),
            });
        }
        epochs.push(record(&adapter, epoch)?);
    }

    let last = epochs.last().expect("at least the initial record");
    let mut train_per_class = vec![0; catalog.len()];
    for &i in &train {
        train_per_class[samples[i].label] += 1;
    }
    let report = Stage1Report {
        dataset_id: catalog.dataset_id().to_string(),
        n_train: train.len(),
        n_holdout: holdout.len(),
        train_per_class,
        final_train_accuracy: last.train_accuracy,
        final_holdout_accuracy: last.holdout_accuracy,
        epochs,
    };
    Ok((adapter, report))
}

/// Embeds the corpus with `encoder` and trains the adapter on it.
pub fn pretrain_adapter<T: Scalar>(
    corpus: &DescriptionCorpus,
    encoder: &dyn TextEncoder<T>,
    cfg: &Stage1Config,
) -> Result<(Adapter<T>, Stage1Report)> {
    let samples = embed_corpus(corpus, encoder)?;
    pretrain_on_samples(corpus.catalog(), &samples, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        use rand::Rng;
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn zero_adapter_gives_zero_logits() {
        let a = Adapter::<f64>::zeros(3, 4, true, "d");
        assert_eq!(a.forward(&[1.0, -2.0, 3.0, 4.0]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn selector_rows_pick_coordinates() {
        let w = vec![0.0, 0.0, 2.0, 1.0, 0.0, 0.0];
        let a = Adapter::from_parts(w, None, 2, 3, "d").unwrap();
        assert_eq!(a.forward(&[5.0, 6.0, 7.0]).unwrap(), vec![14.0, 5.0]);
    }

    #[test]
    fn forward_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (c, d) = (4, 9);
        let w = rand_vec(&mut rng, c * d);
        let b = rand_vec(&mut rng, c);
        let x = rand_vec(&mut rng, d);
        let a = Adapter::from_parts(w.clone(), Some(b.clone()), c, d, "d").unwrap();
        let got = a.forward(&x).unwrap();
        for k in 0..c {
            let mut s = b[k];
            for j in 0..d {
                s += w[k * d + j] * x[j];
            }
            assert!((got[k] - s).abs() < 1e-10);
        }
    }

    #[test]
    fn wrong_input_dim_is_shape_error() {
        let a = Adapter::<f32>::zeros(2, 4, false, "d");
        assert!(matches!(a.forward(&[1.0; 3]), Err(Error::Shape { .. })));
    }

    #[test]
    fn clones_are_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Adapter::from_parts(rand_vec(&mut rng, 6), None, 2, 3, "d").unwrap();
        let mut b = a.clone();
        assert_eq!(a, b);
        b.params_mut()[0] += 1.0;
        assert_ne!(a.params()[0], b.params()[0]);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.bin");
        let a = Adapter::from_parts(
            vec![0.5f32, -1.0, 2.0, 0.25],
            Some(vec![0.1, 0.2]),
            2,
            2,
            "cat",
        )
        .unwrap();
        a.save(&p, "stamp").unwrap();
        let (b, stamp) = Adapter::<f32>::load(&p).unwrap();
        assert_eq!((a, "stamp".to_string()), (b, stamp));
    }

    #[test]
    fn holdout_that_empties_a_class_is_a_data_error() {
        let cat = ClassCatalog::new("d", vec!["a".into(), "b".into()]).unwrap();
        let samples = vec![
            TextSample {
                embedding: vec![1.0f64],
                label: 0,
            },
            TextSample {
                embedding: vec![2.0],
                label: 1,
            },
            TextSample {
                embedding: vec![3.0],
                label: 1,
            },
        ];
        assert!(matches!(
            holdout_split(&samples, &cat, 0.6, 0),
            Err(Error::Data(_))
        ));
        let (train, hold) = holdout_split(&samples, &cat, 0.2, 0).unwrap();
        assert_eq!((train.len(), hold.len()), (3, 0));
    }
}
