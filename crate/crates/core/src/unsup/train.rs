use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::augment::{AugmentConfig, AugmentKind, AugmentationPolicy};
use super::prompt::{PromptInit, PromptVector};
use super::{LabeledSample, UnlabeledDataset, UnlabeledItem};
use crate::adapter::Adapter;
use crate::corpus::DescriptionCorpus;
use crate::encoders::{Image, TextEncoder, TokenizedImage, VisualEncoder};
use crate::error::{Error, Result};
use crate::linalg::{all_finite, argmax, cosine};
use crate::losses::{self_entropy, stage2_terms, LossConfig};
use crate::optim::{Optimizer, OptimizerKind};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateSchedule {
    /// Weak update, then strong + prompt update against the refreshed
    /// weak pseudo-labels.
    #[default]
    Alternating,
    /// Both updates from the same forward pass.
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    pub loss: LossConfig,
    pub learning_rate: f64,
    /// Prompt step size; the adapter rate is used when unset.
    pub prompt_learning_rate: Option<f64>,
    pub optimizer: OptimizerKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub prompt_init: PromptInit,
    pub schedule: UpdateSchedule,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            learning_rate: 1e-2,
            prompt_learning_rate: None,
            optimizer: OptimizerKind::Sgd,
            epochs: 50,
            batch_size: 32,
            prompt_init: PromptInit::Zeros,
            schedule: UpdateSchedule::Alternating,
            augment: AugmentConfig::default(),
            seed: 0,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        let lr_ok = |lr: f64| lr > 0.0 && lr.is_finite();
        if !lr_ok(self.learning_rate) || !self.prompt_learning_rate.is_none_or(lr_ok) {
            return Err(Error::validation("stage-2 learning rates must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("stage-2 batch_size must be positive"));
        }
        self.augment.policies(self.seed)?;
        Ok(())
    }

    pub fn prompt_lr(&self) -> f64 {
        self.prompt_learning_rate.unwrap_or(self.learning_rate)
    }
}

fn check_kind(policy: &AugmentationPolicy, kind: AugmentKind) -> Result<()> {
    if policy.kind != kind {
        return Err(Error::validation(format!(
            "expected a {kind:?} augmentation policy, got {:?}",
            policy.kind
        )));
    }
    Ok(())
}

/// `g_w(f_V(A(x)))`. No prompt ever reaches this branch.
pub fn weak_branch<T: Scalar>(
    image: &Image,
    item_id: &str,
    epoch: usize,
    g_w: &Adapter<T>,
    policy: &AugmentationPolicy,
    encoder: &dyn VisualEncoder<T>,
) -> Result<Vec<T>> {
    check_kind(policy, AugmentKind::Weak)?;
    let emb = encoder.encode_image(&policy.apply(image, item_id, epoch), None)?;
    g_w.forward(emb.values())
}

/// `g_s(f_V(A'(x) + p))`.
pub fn strong_branch<T: Scalar>(
    image: &Image,
    item_id: &str,
    epoch: usize,
    g_s: &Adapter<T>,
    prompt: &PromptVector<T>,
    policy: &AugmentationPolicy,
    encoder: &dyn VisualEncoder<T>,
) -> Result<Vec<T>> {
    check_kind(policy, AugmentKind::Strong)?;
    encoder.spec().check_prompt_capable()?;
    let emb = encoder.encode_image(&policy.apply(image, item_id, epoch), Some(prompt))?;
    g_s.forward(emb.values())
}

/// Strong-branch logits on the un-augmented (resized only) image.
pub fn predict_logits<T: Scalar>(
    image: &Image,
    g: &Adapter<T>,
    prompt: Option<&PromptVector<T>>,
    encoder: &dyn VisualEncoder<T>,
) -> Result<Vec<T>> {
    g.forward(encoder.encode_image(image, prompt)?.values())
}

/// Predicted class; ties go to the lowest index.
pub fn infer<T: Scalar>(
    image: &Image,
    g: &Adapter<T>,
    prompt: &PromptVector<T>,
    encoder: &dyn VisualEncoder<T>,
) -> Result<usize> {
    Ok(argmax(&predict_logits(image, g, Some(prompt), encoder)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distance {
    Cosine,
    Euclidean,
}

/// Distance between the adapter output of the prompted image and the mean
/// adapter output over the descriptions of the image's class.
pub fn supervised_alignment_loss<T: Scalar>(
    sample: &LabeledSample,
    g: &Adapter<T>,
    prompt: &PromptVector<T>,
    corpus: &DescriptionCorpus,
    text_encoder: &dyn TextEncoder<T>,
    visual_encoder: &dyn VisualEncoder<T>,
    distance: Distance,
) -> Result<T> {
    let label = corpus
        .catalog()
        .labels()
        .get(sample.label)
        .ok_or_else(|| Error::data(format!("label index {} not in catalog", sample.label)))?;
    let descriptions = corpus
        .descriptions(label)
        .filter(|d| !d.is_empty())
        .ok_or_else(|| Error::data(format!("no descriptions for label {label:?}")))?;
    let texts: Vec<&str> = descriptions.iter().map(|d| d.text.as_str()).collect();
    let mut text_side = vec![T::zero(); g.num_classes()];
    let inv = T::one() / T::of(texts.len() as f64);
    for e in text_encoder.encode_text(&texts)? {
        for (acc, v) in text_side.iter_mut().zip(g.forward(e.values())?) {
            *acc = *acc + v * inv;
        }
    }
    let image_side = predict_logits(&sample.image, g, Some(prompt), visual_encoder)?;
    alignment_distance(&image_side, &text_side, distance)
}

pub(crate) fn alignment_distance<T: Scalar>(a: &[T], b: &[T], distance: Distance) -> Result<T> {
    match distance {
        Distance::Cosine => cosine(a, b)
            .map(|c| T::one() - c)
            .ok_or_else(|| Error::Degenerate("cosine distance of a zero vector".into())),
        Distance::Euclidean => Ok(a
            .iter()
            .zip(b)
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<T>()
            .sqrt()),
    }
}

/// Per-item inputs to one optimization step: the weak embedding (constant,
/// since the weak branch has no trainable input) and the strong tokens.
#[derive(Debug, Clone)]
pub struct BranchViews<T> {
    pub item_id: String,
    pub weak_embedding: Vec<T>,
    pub strong_tokens: TokenizedImage<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BatchStats {
    pub weak_loss: f64,
    pub strong_loss: f64,
    pub strong_consistency: f64,
    pub strong_entropy: f64,
}

/// Gradients of the summed strong objective over a batch.
struct StrongGrad<T> {
    loss: f64,
    consistency: f64,
    entropy: f64,
    adapter: Vec<T>,
    prompt: Vec<T>,
}

/// The two branches and their optimizers.
pub struct DualBranch<'e, T: Scalar> {
    encoder: &'e dyn VisualEncoder<T>,
    loss: LossConfig,
    schedule: UpdateSchedule,
    weak_policy: AugmentationPolicy,
    strong_policy: AugmentationPolicy,
    pub weak: Adapter<T>,
    pub strong: Adapter<T>,
    pub prompt: PromptVector<T>,
    opt_weak: Optimizer<T>,
    opt_strong: Optimizer<T>,
    opt_prompt: Optimizer<T>,
}

impl<'e, T: Scalar> DualBranch<'e, T> {
    /// Both adapters start as copies of `g_hat`.
    pub fn new(
        encoder: &'e dyn VisualEncoder<T>,
        g_hat: &Adapter<T>,
        cfg: &Stage2Config,
    ) -> Result<Self> {
        cfg.validate()?;
        let spec = encoder.spec();
        spec.check_prompt_capable()?;
        if g_hat.dim() != spec.embed_dim {
            return Err(Error::shape(
                "adapter input dimension",
                spec.embed_dim,
                g_hat.dim(),
            ));
        }
        let (weak_policy, strong_policy) = cfg.augment.policies(cfg.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7072_6f6d);
        let prompt = PromptVector::init(spec, cfg.prompt_init, &mut rng);
        let n = g_hat.parameter_count();
        Ok(Self {
            encoder,
            loss: cfg.loss.clone(),
            schedule: cfg.schedule,
            weak_policy,
            strong_policy,
            weak: g_hat.clone(),
            strong: g_hat.clone(),
            opt_weak: Optimizer::new(cfg.optimizer, cfg.learning_rate, n),
            opt_strong: Optimizer::new(cfg.optimizer, cfg.learning_rate, n),
            opt_prompt: Optimizer::new(cfg.optimizer, cfg.prompt_lr(), prompt.parameter_count()),
            prompt,
        })
    }

    pub fn weak_policy(&self) -> &AugmentationPolicy {
        &self.weak_policy
    }

    pub fn strong_policy(&self) -> &AugmentationPolicy {
        &self.strong_policy
    }

    /// Augmented views of a batch for `epoch`.
    pub fn views(&self, items: &[&UnlabeledItem], epoch: usize) -> Result<Vec<BranchViews<T>>> {
        items
            .par_iter()
            .map(|it| {
                let weak = self.weak_policy.apply(&it.image, &it.item_id, epoch);
                let strong = self.strong_policy.apply(&it.image, &it.item_id, epoch);
                Ok(BranchViews {
                    item_id: it.item_id.clone(),
                    weak_embedding: self.encoder.encode_image(&weak, None)?.into_values(),
                    strong_tokens: self.encoder.tokenize(&strong)?,
                })
            })
            .collect()
    }

    fn strong_embeddings(&self, views: &[BranchViews<T>]) -> Result<Vec<Vec<T>>> {
        views
            .par_iter()
            .map(|v| {
                Ok(self
                    .encoder
                    .encode_tokens(&v.strong_tokens, Some(&self.prompt))?
                    .into_values())
            })
            .collect()
    }

    fn weak_logits(&self, views: &[BranchViews<T>]) -> Result<Vec<Vec<T>>> {
        views
            .iter()
            .map(|v| self.weak.forward(&v.weak_embedding))
            .collect()
    }

    /// Mean weak loss over the batch and its adapter gradient.
    fn weak_grad(
        &self,
        weak_logits: &[Vec<T>],
        strong_logits: &[Vec<T>],
        views: &[BranchViews<T>],
    ) -> Result<(f64, Vec<T>)> {
        let scale = T::one() / T::of(views.len() as f64);
        let mut grad = vec![T::zero(); self.weak.parameter_count()];
        let mut loss = 0.0;
        for ((lw, ls), v) in weak_logits.iter().zip(strong_logits).zip(views) {
            let terms = stage2_terms(lw, ls, &self.loss)?;
            loss += terms.weak.value.f64();
            self.weak
                .accumulate_param_grad(&v.weak_embedding, &terms.weak.grad, scale, &mut grad);
        }
        Ok((loss / views.len() as f64, grad))
    }

    fn strong_grad(
        &self,
        weak_logits: &[Vec<T>],
        strong_emb: &[Vec<T>],
        views: &[BranchViews<T>],
    ) -> Result<StrongGrad<T>> {
        let n = views.len() as f64;
        let scale = T::one() / T::of(n);
        let per_item: Vec<(f64, f64, f64, Vec<T>, Vec<T>)> = views
            .par_iter()
            .zip(strong_emb.par_iter())
            .zip(weak_logits.par_iter())
            .map(|((v, e), lw)| {
                let ls = self.strong.forward(e)?;
                let terms = stage2_terms(lw, &ls, &self.loss)?;
                let upstream = self.strong.input_grad(&terms.strong.grad);
                let pg = self
                    .encoder
                    .prompt_vjp(&v.strong_tokens, &self.prompt, &upstream)?;
                Ok((
                    terms.strong.value.f64(),
                    terms.strong_consistency.f64(),
                    terms.strong_entropy.f64(),
                    terms.strong.grad,
                    pg,
                ))
            })
            .collect::<Result<_>>()?;
        let mut out = StrongGrad {
            loss: 0.0,
            consistency: 0.0,
            entropy: 0.0,
            adapter: vec![T::zero(); self.strong.parameter_count()],
            prompt: vec![T::zero(); self.prompt.parameter_count()],
        };
        for ((loss, cons, ent, g_logits, pg), e) in per_item.into_iter().zip(strong_emb) {
            out.loss += loss / n;
            out.consistency += cons / n;
            out.entropy += ent / n;
            self.strong
                .accumulate_param_grad(e, &g_logits, scale, &mut out.adapter);
            for (acc, g) in out.prompt.iter_mut().zip(pg) {
                *acc = *acc + g * scale;
            }
        }
        Ok(out)
    }

    /// Mean strong objective of a batch with its gradients with respect to
    /// the strong adapter and the prompt (pseudo-labels from the current
    /// weak adapter).
    pub fn strong_objective(&self, views: &[BranchViews<T>]) -> Result<(f64, Vec<T>, Vec<T>)> {
        let weak_logits = self.weak_logits(views)?;
        let emb = self.strong_embeddings(views)?;
        let g = self.strong_grad(&weak_logits, &emb, views)?;
        Ok((g.loss, g.adapter, g.prompt))
    }

    /// One optimization step on a batch of views.
    pub fn step(&mut self, views: &[BranchViews<T>]) -> Result<BatchStats> {
        if views.is_empty() {
            return Ok(BatchStats::default());
        }
        let weak_logits = self.weak_logits(views)?;
        let strong_emb = self.strong_embeddings(views)?;
        let strong_logits: Vec<Vec<T>> = strong_emb
            .iter()
            .map(|e| self.strong.forward(e))
            .collect::<Result<_>>()?;

        let (weak_loss, weak_grad) = self.weak_grad(&weak_logits, &strong_logits, views)?;
        let strong = match self.schedule {
            UpdateSchedule::Alternating => {
                self.opt_weak.step(self.weak.params_mut(), &weak_grad);
                let refreshed = self.weak_logits(views)?;
                self.strong_grad(&refreshed, &strong_emb, views)?
            }
            UpdateSchedule::Joint => {
                let g = self.strong_grad(&weak_logits, &strong_emb, views)?;
                self.opt_weak.step(self.weak.params_mut(), &weak_grad);
                g
            }
        };
        self.opt_strong
            .step(self.strong.params_mut(), &strong.adapter);
        self.opt_prompt
            .step(self.prompt.values_mut(), &strong.prompt);
        Ok(BatchStats {
            weak_loss,
            strong_loss: strong.loss,
            strong_consistency: strong.consistency,
            strong_entropy: strong.entropy,
        })
    }

    fn params_finite(&self) -> bool {
        all_finite(self.weak.params())
            && all_finite(self.strong.params())
            && all_finite(self.prompt.values())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMode {
    /// Best validation accuracy (earliest epoch on ties).
    Validation,
    /// Last epoch.
    Final,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Epoch {
    pub epoch: usize,
    /// Batch means during the epoch; zero for the initial record.
    pub weak_loss: f64,
    pub strong_loss: f64,
    pub strong_consistency: f64,
    pub batch_entropy: f64,
    /// Mean strong-branch self-entropy over the training images without
    /// augmentation, at the end of the epoch.
    pub strong_entropy: f64,
    /// Fraction of training images whose weak pseudo-label changed since
    /// the previous record.
    pub churn: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Entry 0 describes the initial state.
    pub epochs: Vec<Stage2Epoch>,
    pub selection: SelectionMode,
    pub selected_epoch: usize,
    pub best_val_accuracy: Option<f64>,
    pub final_val_accuracy: Option<f64>,
}

impl TrainLog {
    pub fn final_strong_entropy(&self) -> f64 {
        self.epochs.last().map(|e| e.strong_entropy).unwrap_or(0.0)
    }
}

#[derive(Debug, Clone)]
pub struct Stage2Outcome<T> {
    /// Selected strong-branch pair.
    pub adapter: Adapter<T>,
    pub prompt: PromptVector<T>,
    pub final_adapter: Adapter<T>,
    pub final_prompt: PromptVector<T>,
    pub final_weak_adapter: Adapter<T>,
    pub log: TrainLog,
}

struct EpochEval {
    pseudo: Vec<usize>,
    entropy: f64,
    val_accuracy: Option<f64>,
}

fn evaluate_epoch<T: Scalar>(
    model: &DualBranch<'_, T>,
    data: &UnlabeledDataset,
    val: Option<&[LabeledSample]>,
) -> Result<EpochEval> {
    let per_item: Vec<(usize, f64)> = data
        .items()
        .par_iter()
        .map(|it| {
            let e = model.encoder.encode_image(&it.image, None)?;
            let pseudo = argmax(&model.weak.forward(e.values())?);
            let ls = predict_logits(&it.image, &model.strong, Some(&model.prompt), model.encoder)?;
            Ok((pseudo, self_entropy(&ls).f64()))
        })
        .collect::<Result<_>>()?;
    let n = per_item.len().max(1) as f64;
    let entropy = per_item.iter().map(|p| p.1).sum::<f64>() / n;
    let val_accuracy = match val {
        Some(v) if !v.is_empty() => {
            let correct: usize = v
                .par_iter()
                .map(|s| {
                    Ok(usize::from(
                        infer(&s.image, &model.strong, &model.prompt, model.encoder)? == s.label,
                    ))
                })
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .sum();
            Some(correct as f64 / v.len() as f64)
        }
        _ => None,
    };
    Ok(EpochEval {
        pseudo: per_item.into_iter().map(|p| p.0).collect(),
        entropy,
        val_accuracy,
    })
}

/// Dual-branch training from `g_hat`. With labeled validation samples the
/// returned pair is the epoch with the best validation accuracy, otherwise
/// the final one; both are logged.
pub fn train_stage2<T: Scalar>(
    data: &UnlabeledDataset,
    g_hat: &Adapter<T>,
    encoder: &dyn VisualEncoder<T>,
    cfg: &Stage2Config,
    val: Option<&[LabeledSample]>,
) -> Result<Stage2Outcome<T>> {
    let mut model = DualBranch::new(encoder, g_hat, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6261_7463);
    let initial = evaluate_epoch(&model, data, val)?;
    let mut epochs = vec![Stage2Epoch {
        epoch: 0,
        weak_loss: 0.0,
        strong_loss: 0.0,
        strong_consistency: 0.0,
        batch_entropy: 0.0,
        strong_entropy: initial.entropy,
        churn: None,
        val_accuracy: initial.val_accuracy,
    }];
    let selection = if initial.val_accuracy.is_some() {
        SelectionMode::Validation
    } else {
        SelectionMode::Final
    };
    let mut best = (
        initial.val_accuracy,
        0usize,
        model.strong.clone(),
        model.prompt.clone(),
    );
    let mut prev_pseudo = initial.pseudo;
    let mut order: Vec<&UnlabeledItem> = data.items().iter().collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = BatchStats::default();
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let views = model.views(batch, epoch)?;
            let stats = model.step(&views)?;
            let finite = [stats.weak_loss, stats.strong_loss]
                .iter()
                .all(|v| v.is_finite());
            if !finite || !model.params_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    lr: cfg.learning_rate,
                    batch_ids: batch.iter().map(|it| it.item_id.clone()).collect(),
                });
            }
            sums.weak_loss += stats.weak_loss;
            sums.strong_loss += stats.strong_loss;
            sums.strong_consistency += stats.strong_consistency;
            sums.strong_entropy += stats.strong_entropy;
            batches += 1;
        }
        let eval = evaluate_epoch(&model, data, val)?;
        let changed = eval
            .pseudo
            .iter()
            .zip(&prev_pseudo)
            .filter(|(a, b)| a != b)
            .count();
        let nb = batches.max(1) as f64;
        let rec = Stage2Epoch {
            epoch,
            weak_loss: sums.weak_loss / nb,
            strong_loss: sums.strong_loss / nb,
            strong_consistency: sums.strong_consistency / nb,
            batch_entropy: sums.strong_entropy / nb,
            strong_entropy: eval.entropy,
            churn: Some(changed as f64 / prev_pseudo.len().max(1) as f64),
            val_accuracy: eval.val_accuracy,
        };
        debug!(
            "stage2 epoch {epoch}: weak {:.4} strong {:.4} entropy {:.4} churn {:.3} val {:?}",
            rec.weak_loss,
            rec.strong_loss,
            rec.strong_entropy,
            rec.churn.unwrap_or(0.0),
            rec.val_accuracy
        );
        if let (Some(acc), Some(best_acc)) = (eval.val_accuracy, best.0) {
            if acc > best_acc {
                best = (Some(acc), epoch, model.strong.clone(), model.prompt.clone());
            }
        }
        prev_pseudo = eval.pseudo;
        epochs.push(rec);
    }

    let final_val_accuracy = epochs.last().and_then(|e| e.val_accuracy);
    let (adapter, prompt, selected_epoch) = match selection {
        SelectionMode::Validation => (best.2, best.3, best.1),
        SelectionMode::Final => (model.strong.clone(), model.prompt.clone(), cfg.epochs),
    };
    info!(
        "stage2 done: selected epoch {selected_epoch} ({selection:?}); best val {:?}, final val {:?}",
        best.0, final_val_accuracy
    );
    Ok(Stage2Outcome {
        adapter,
        prompt,
        final_adapter: model.strong,
        final_prompt: model.prompt,
        final_weak_adapter: model.weak,
        log: TrainLog {
            epochs,
            selection,
            selected_epoch,
            best_val_accuracy: best.0,
            final_val_accuracy,
        },
    })
}
