//! Training criteria: cross-entropy, label-smoothing cross-entropy, negative
//! cosine similarity, self-entropy, and the composite dual-branch objective.
//!
//! Every criterion comes in two forms: a value-only function and a
//! `*_with_grad` variant returning the gradient with respect to the
//! prediction (logits, or the raw vector for NCS). Targets are always treated
//! as constants: no gradient ever flows into them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{argmax, dot, log_softmax, norm, softmax};
use crate::scalar::Scalar;

/// A loss value paired with its gradient with respect to the prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue<T> {
    pub value: T,
    pub grad: Vec<T>,
}

impl<T: Scalar> LossValue<T> {
    fn zero(len: usize) -> Self {
        Self {
            value: T::zero(),
            grad: vec![T::zero(); len],
        }
    }

    fn add_scaled(&mut self, scale: T, other: &LossValue<T>) {
        self.value = self.value + scale * other.value;
        for (g, &o) in self.grad.iter_mut().zip(&other.grad) {
            *g = *g + scale * o;
        }
    }
}

/// Probability vector over the class index space.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetDistribution<T> {
    probs: Vec<T>,
}

impl<T: Scalar> TargetDistribution<T> {
    /// Validates non-negativity and unit mass (within 1e-6).
    pub fn new(probs: Vec<T>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::validation("target distribution is empty"));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < T::zero()) {
            return Err(Error::validation(
                "target distribution has negative or non-finite entries",
            ));
        }
        let mass: T = probs.iter().copied().sum();
        if (mass - T::one()).abs().f64() > 1e-6 {
            return Err(Error::validation(format!(
                "target distribution sums to {mass}, expected 1"
            )));
        }
        Ok(Self { probs })
    }

    pub fn one_hot(class: usize, num_classes: usize) -> Result<Self> {
        if class >= num_classes {
            return Err(Error::shape(
                "one-hot class index",
                format!("< {num_classes}"),
                class,
            ));
        }
        let mut probs = vec![T::zero(); num_classes];
        probs[class] = T::one();
        Ok(Self { probs })
    }

    /// `(1 - alpha) * self + alpha / C`
    pub fn smoothed(&self, alpha: T) -> Result<Self> {
        check_alpha(alpha)?;
        let c = T::of(self.probs.len() as f64);
        let probs = self
            .probs
            .iter()
            .map(|&y| (T::one() - alpha) * y + alpha / c)
            .collect();
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[T] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

fn check_alpha<T: Scalar>(alpha: T) -> Result<()> {
    if !(alpha >= T::zero() && alpha < T::one()) {
        return Err(Error::validation(format!(
            "label smoothing alpha must lie in [0, 1), got {alpha}"
        )));
    }
    Ok(())
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::shape(what, expected, got));
    }
    Ok(())
}

/// `-target^T log softmax(pred)`
pub fn cross_entropy<T: Scalar>(pred: &[T], target: &TargetDistribution<T>) -> Result<T> {
    check_len("cross-entropy logits", target.len(), pred.len())?;
    let logp = log_softmax(pred);
    Ok(-target
        .probs
        .iter()
        .zip(&logp)
        .filter(|(&y, _)| y > T::zero())
        .map(|(&y, &lp)| y * lp)
        .sum::<T>())
}

pub fn cross_entropy_with_grad<T: Scalar>(
    pred: &[T],
    target: &TargetDistribution<T>,
) -> Result<LossValue<T>> {
    let value = cross_entropy(pred, target)?;
    let mass: T = target.probs.iter().copied().sum();
    let p = softmax(pred);
    let grad = p
        .iter()
        .zip(&target.probs)
        .map(|(&pi, &yi)| pi * mass - yi)
        .collect();
    Ok(LossValue { value, grad })
}

/// Cross-entropy against `(1 - alpha) * target + alpha / C`.
pub fn label_smoothing_ce<T: Scalar>(
    pred: &[T],
    target: &TargetDistribution<T>,
    alpha: T,
) -> Result<T> {
    cross_entropy(pred, &target.smoothed(alpha)?)
}

pub fn label_smoothing_ce_with_grad<T: Scalar>(
    pred: &[T],
    target: &TargetDistribution<T>,
    alpha: T,
) -> Result<LossValue<T>> {
    cross_entropy_with_grad(pred, &target.smoothed(alpha)?)
}

/// `-(pred . target) / (|pred| |target|)`, in `[-1, 1]`.
pub fn negative_cosine_similarity<T: Scalar>(pred: &[T], target: &[T]) -> Result<T> {
    Ok(negative_cosine_similarity_with_grad(pred, target)?.value)
}

pub fn negative_cosine_similarity_with_grad<T: Scalar>(
    pred: &[T],
    target: &[T],
) -> Result<LossValue<T>> {
    check_len("cosine operands", target.len(), pred.len())?;
    let np = norm(pred);
    let nt = norm(target);
    if np == T::zero() || nt == T::zero() || !np.is_finite() || !nt.is_finite() {
        return Err(Error::Degenerate(
            "negative cosine similarity needs two nonzero finite vectors".into(),
        ));
    }
    let cos = dot(pred, target) / (np * nt);
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| -(t / (np * nt) - cos * p / (np * np)))
        .collect();
    Ok(LossValue { value: -cos, grad })
}

/// Shannon entropy of `softmax(pred)`; `0 log 0` counts as zero.
pub fn self_entropy<T: Scalar>(pred: &[T]) -> T {
    let logp = log_softmax(pred);
    -logp
        .iter()
        .map(|&lp| {
            let p = lp.exp();
            if p == T::zero() {
                T::zero()
            } else {
                p * lp
            }
        })
        .sum::<T>()
}

pub fn self_entropy_with_grad<T: Scalar>(pred: &[T]) -> LossValue<T> {
    let logp = log_softmax(pred);
    let h = self_entropy(pred);
    // dH/dz_j = -p_j (log p_j + H)
    let grad = logp
        .iter()
        .map(|&lp| {
            let p = lp.exp();
            if p == T::zero() {
                T::zero()
            } else {
                -p * (lp + h)
            }
        })
        .collect();
    LossValue { value: h, grad }
}

/// Consistency criterion used between the two branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Ce,
    Lsce,
    Ncs,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::Ce, LossKind::Lsce, LossKind::Ncs];

    pub fn label(self) -> &'static str {
        match self {
            LossKind::Ce => "CE",
            LossKind::Lsce => "LSCE",
            LossKind::Ncs => "NCS",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ce" => Ok(LossKind::Ce),
            "lsce" => Ok(LossKind::Lsce),
            "ncs" | "nc" => Ok(LossKind::Ncs),
            other => Err(Error::validation(format!("unknown loss kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Label-smoothing strength, used by [`LossKind::Lsce`] only.
    pub smoothing_alpha: f64,
    /// Weight of the strong-branch self-entropy term.
    pub lambda_entropy: f64,
    pub entropy_enabled: bool,
    /// Targets whose top probability falls below `tau` are masked out of the
    /// consistency term. Zero keeps every sample.
    pub tau: f64,
    /// Keep the full target distribution for CE/LSCE instead of its argmax.
    pub soft_targets: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Ce,
            smoothing_alpha: 0.1,
            lambda_entropy: 1.0,
            entropy_enabled: true,
            tau: 0.0,
            soft_targets: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda_entropy.is_finite() || self.lambda_entropy < 0.0 {
            return Err(Error::validation(format!(
                "lambda_entropy must be finite and >= 0, got {}",
                self.lambda_entropy
            )));
        }
        check_alpha(self.smoothing_alpha)?;
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::validation(format!(
                "tau must lie in [0, 1], got {}",
                self.tau
            )));
        }
        Ok(())
    }

    /// Effective entropy weight (zero when the term is switched off).
    pub fn entropy_weight(&self) -> f64 {
        if self.entropy_enabled {
            self.lambda_entropy
        } else {
            0.0
        }
    }
}

/// Consistency loss of `pred` towards the stop-gradient target derived from
/// `target_logits`. Returns `None` when the target is masked by `tau`.
pub fn consistency<T: Scalar>(
    target_logits: &[T],
    pred: &[T],
    cfg: &LossConfig,
) -> Result<Option<LossValue<T>>> {
    check_len("branch logits", target_logits.len(), pred.len())?;
    let q = softmax(target_logits);
    let top = argmax(&q);
    if q[top].f64() < cfg.tau {
        return Ok(None);
    }
    let c = pred.len();
    let value = match cfg.kind {
        LossKind::Ce | LossKind::Lsce => {
            let target = if cfg.soft_targets {
                TargetDistribution::new(q)?
            } else {
                TargetDistribution::one_hot(top, c)?
            };
            if cfg.kind == LossKind::Ce {
                cross_entropy_with_grad(pred, &target)?
            } else {
                label_smoothing_ce_with_grad(pred, &target, T::of(cfg.smoothing_alpha))?
            }
        }
        LossKind::Ncs => {
            // NCS compares probability vectors; chain through the softmax.
            let p = softmax(pred);
            let inner = negative_cosine_similarity_with_grad(&p, &q)?;
            let pg = dot(&p, &inner.grad);
            let grad = p
                .iter()
                .zip(&inner.grad)
                .map(|(&pi, &gi)| pi * (gi - pg))
                .collect();
            LossValue {
                value: inner.value,
                grad,
            }
        }
    };
    Ok(Some(value))
}

/// Per-sample breakdown of the dual-branch objective.
#[derive(Debug, Clone)]
pub struct Stage2Terms<T> {
    /// Weak-branch loss and its gradient w.r.t. the weak logits.
    pub weak: LossValue<T>,
    /// Strong-branch loss and its gradient w.r.t. the strong logits.
    pub strong: LossValue<T>,
    pub strong_consistency: T,
    pub strong_entropy: T,
    /// Pseudo-label emitted by the weak branch.
    pub pseudo_label: usize,
    pub weak_masked: bool,
    pub strong_masked: bool,
}

/// Both branch losses for one sample, with gradients.
///
/// * weak loss: consistency of the weak prediction towards the (stop-gradient)
///   strong prediction;
/// * strong loss: consistency of the strong prediction towards the
///   (stop-gradient) weak pseudo-label, plus `lambda * H(softmax(strong))`.
pub fn stage2_terms<T: Scalar>(
    weak_pred: &[T],
    strong_pred: &[T],
    cfg: &LossConfig,
) -> Result<Stage2Terms<T>> {
    cfg.validate()?;
    check_len("branch logits", weak_pred.len(), strong_pred.len())?;
    let c = weak_pred.len();
    let weak_c = consistency(strong_pred, weak_pred, cfg)?;
    let strong_c = consistency(weak_pred, strong_pred, cfg)?;
    let entropy = self_entropy_with_grad(strong_pred);
    let lambda = T::of(cfg.entropy_weight());

    let weak_masked = weak_c.is_none();
    let strong_masked = strong_c.is_none();
    let weak = weak_c.unwrap_or_else(|| LossValue::zero(c));
    let consistency_value = strong_c.as_ref().map(|v| v.value).unwrap_or_else(T::zero);
    let mut strong = strong_c.unwrap_or_else(|| LossValue::zero(c));
    strong.add_scaled(lambda, &entropy);

    Ok(Stage2Terms {
        weak,
        strong,
        strong_consistency: consistency_value,
        strong_entropy: entropy.value,
        pseudo_label: argmax(weak_pred),
        weak_masked,
        strong_masked,
    })
}

/// `(weak_loss, strong_loss)` for one sample.
pub fn stage2_objective<T: Scalar>(
    weak_pred: &[T],
    strong_pred: &[T],
    cfg: &LossConfig,
) -> Result<(T, T)> {
    let terms = stage2_terms(weak_pred, strong_pred, cfg)?;
    Ok((terms.weak.value, terms.strong.value))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn onehot(k: usize, c: usize) -> TargetDistribution<f64> {
        TargetDistribution::one_hot(k, c).unwrap()
    }

    #[test]
    fn uniform_logits_give_log_c() {
        let ce = cross_entropy(&[0.3f64; 4], &onehot(2, 4)).unwrap();
        assert!((ce - 4f64.ln()).abs() < 1e-12);
        let h = self_entropy(&[1.5f64; 7]);
        assert!((h - 7f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn dominant_logit_drives_losses_to_zero() {
        let pred = [0.0f64, 50.0, 0.0];
        assert!(cross_entropy(&pred, &onehot(1, 3)).unwrap() < 1e-20);
        assert!(self_entropy(&pred) < 1e-18);
    }

    #[test]
    fn lsce_at_zero_alpha_is_ce() {
        let pred = [0.2f64, -1.3, 0.7];
        let t = onehot(0, 3);
        assert_eq!(
            label_smoothing_ce(&pred, &t, 0.0).unwrap(),
            cross_entropy(&pred, &t).unwrap()
        );
    }

    #[test]
    fn lsce_rejects_alpha_outside_range() {
        let t = onehot(0, 2);
        assert!(matches!(
            label_smoothing_ce(&[0.0f64, 0.0], &t, 1.0),
            Err(Error::Validation(_))
        ));
        assert!(label_smoothing_ce(&[0.0f64, 0.0], &t, -0.1).is_err());
    }

    #[test]
    fn lsce_binary_symmetric_logits() {
        // target (0.95, 0.05); symmetric logits => p = (0.5, 0.5) => ln 2
        let v = label_smoothing_ce(&[0.4f64, 0.4], &onehot(0, 2), 0.1).unwrap();
        let oracle = -(0.95 * 0.5f64.ln() + 0.05 * 0.5f64.ln());
        assert!((v - oracle).abs() < 1e-12);
    }

    #[test]
    fn ncs_reference_values() {
        let v = [0.3f64, -2.0, 1.0];
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!((negative_cosine_similarity(&v, &v).unwrap() + 1.0).abs() < 1e-12);
        assert!((negative_cosine_similarity(&v, &neg).unwrap() - 1.0).abs() < 1e-12);
        let o = negative_cosine_similarity(&[1.0f64, 0.0, 0.0], &[0.0, 3.0, 0.0]).unwrap();
        assert!(o.abs() < 1e-12);
        assert!(matches!(
            negative_cosine_similarity(&[0.0f64, 0.0], &[1.0, 0.0]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        assert!(matches!(
            cross_entropy(&[0.0f64, 1.0, 2.0], &onehot(0, 2)),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn target_distribution_validation() {
        assert!(TargetDistribution::new(vec![0.5f64, 0.4]).is_err());
        assert!(TargetDistribution::new(vec![1.2f64, -0.2]).is_err());
        assert!(TargetDistribution::new(vec![0.25f64; 4]).is_ok());
    }

    #[test]
    fn negative_lambda_rejected() {
        let cfg = LossConfig {
            lambda_entropy: -0.5,
            ..LossConfig::default()
        };
        assert!(matches!(
            stage2_objective(&[0.0f64, 1.0], &[1.0, 0.0], &cfg),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn stage2_with_zero_lambda_is_plain_ce_on_pseudo_label() {
        let cfg = LossConfig {
            lambda_entropy: 0.0,
            ..LossConfig::default()
        };
        let weak = [0.1f64, 2.0, -0.4];
        let strong = [0.5f64, 0.2, 0.1];
        let (_, s) = stage2_objective(&weak, &strong, &cfg).unwrap();
        assert_eq!(s, cross_entropy(&strong, &onehot(1, 3)).unwrap());
    }

    #[test]
    fn agreeing_sharp_branches_have_near_zero_loss() {
        let sharp = [60.0f64, 0.0];
        let (w, s) = stage2_objective(&sharp, &sharp, &LossConfig::default()).unwrap();
        assert!(w + s < 1e-20);
    }

    #[test]
    fn tau_masks_low_confidence_targets() {
        let cfg = LossConfig {
            tau: 0.9,
            lambda_entropy: 0.0,
            ..LossConfig::default()
        };
        let t = stage2_terms(&[0.1f64, 0.0], &[0.3, 0.2], &cfg).unwrap();
        assert!(t.weak_masked && t.strong_masked);
        assert_eq!(t.strong.value, 0.0);
    }
}
