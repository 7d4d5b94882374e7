//! Accuracy reports, the text/visual alignment diagnostic, and plot data.

mod alignment;
mod plot;
mod projection;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::Adapter;
use crate::encoders::VisualEncoder;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::unsup::{infer, LabeledSample, PromptVector};

pub use alignment::{alignment_report, alignment_score, AlignmentReport, HIT_RATE_COSINE};
pub use plot::{emit_plot_data, GainRow, PlotData, PlotKind, ProjectionPoint, RadarRow};
pub use projection::{pca_2d, project_2d, silhouette, tsne_2d, ProjectionMethod, TsneConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset_id: String,
    pub model_id: String,
    pub accuracy: f64,
    /// `None` for classes without test items.
    pub per_class_accuracy: Vec<Option<f64>>,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
    pub n_test: usize,
}

impl EvalReport {
    /// Plain-text table: overall accuracy, then one row per class.
    pub fn to_table(&self, labels: &[String]) -> String {
        let mut out = format!(
            "dataset {}  model {}  n_test {}  accuracy {:.4}\n",
            self.dataset_id, self.model_id, self.n_test, self.accuracy
        );
        out.push_str("class\tn\taccuracy\tpredicted counts\n");
        for (k, row) in self.confusion.iter().enumerate() {
            let name = labels.get(k).map(String::as_str).unwrap_or("?");
            let acc = self.per_class_accuracy[k]
                .map(|a| format!("{a:.4}"))
                .unwrap_or_else(|| "-".into());
            let counts: Vec<String> = row.iter().map(|c| c.to_string()).collect();
            out.push_str(&format!(
                "{name}\t{}\t{acc}\t{}\n",
                row.iter().sum::<usize>(),
                counts.join(" ")
            ));
        }
        out
    }
}

/// Accuracy and confusion from `(true, predicted)` pairs.
pub fn evaluate(
    dataset_id: &str,
    model_id: &str,
    num_classes: usize,
    pairs: &[(usize, usize)],
) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::data("no test items to evaluate"));
    }
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    for &(t, p) in pairs {
        if t >= num_classes || p >= num_classes {
            return Err(Error::shape(
                "class index",
                format!("< {num_classes}"),
                t.max(p),
            ));
        }
        confusion[t][p] += 1;
    }
    let correct: usize = (0..num_classes).map(|k| confusion[k][k]).sum();
    let per_class_accuracy = confusion
        .iter()
        .enumerate()
        .map(|(k, row)| {
            let n: usize = row.iter().sum();
            (n > 0).then(|| row[k] as f64 / n as f64)
        })
        .collect();
    Ok(EvalReport {
        dataset_id: dataset_id.into(),
        model_id: model_id.into(),
        accuracy: correct as f64 / pairs.len() as f64,
        per_class_accuracy,
        confusion,
        n_test: pairs.len(),
    })
}

/// Predictions of the prompted strong branch (or the bare adapter when
/// `prompt` is `None`) on labeled samples.
pub fn predictions<T: Scalar>(
    samples: &[LabeledSample],
    g: &Adapter<T>,
    prompt: Option<&PromptVector<T>>,
    encoder: &dyn VisualEncoder<T>,
) -> Result<Vec<(usize, usize)>> {
    samples
        .par_iter()
        .map(|s| {
            let pred = match prompt {
                Some(p) => infer(&s.image, g, p, encoder)?,
                None => crate::linalg::argmax(&crate::unsup::predict_logits(
                    &s.image, g, None, encoder,
                )?),
            };
            Ok((s.label, pred))
        })
        .collect()
}

pub fn evaluate_model<T: Scalar>(
    dataset_id: &str,
    model_id: &str,
    samples: &[LabeledSample],
    g: &Adapter<T>,
    prompt: Option<&PromptVector<T>>,
    encoder: &dyn VisualEncoder<T>,
) -> Result<EvalReport> {
    evaluate(
        dataset_id,
        model_id,
        g.num_classes(),
        &predictions(samples, g, prompt, encoder)?,
    )
}

/// Absolute gain in points and relative gain `(new - base) / base`.
pub fn gains(base: f64, new: f64) -> (f64, Option<f64>) {
    let abs = new - base;
    let rel = (base != 0.0).then(|| abs / base);
    (abs, rel)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_and_constant_models() {
        let truth = [0usize, 1, 0, 1, 1, 0];
        let oracle: Vec<_> = truth.iter().map(|&t| (t, t)).collect();
        assert_eq!(evaluate("d", "m", 2, &oracle).unwrap().accuracy, 1.0);
        let constant: Vec<_> = truth.iter().map(|&t| (t, 0)).collect();
        let r = evaluate("d", "m", 2, &constant).unwrap();
        assert_eq!(r.accuracy, 0.5);
        assert_eq!(r.confusion, vec![vec![3, 0], vec![3, 0]]);
        assert_eq!(r.per_class_accuracy, vec![Some(1.0), Some(0.0)]);
    }

    #[test]
    fn empty_class_has_no_accuracy() {
        let r = evaluate("d", "m", 3, &[(0, 0), (1, 2)]).unwrap();
        assert_eq!(r.per_class_accuracy[2], None);
        assert_eq!(r.confusion.iter().flatten().sum::<usize>(), r.n_test);
    }

    #[test]
    fn gain_of_table_averages() {
        let (abs, rel) = gains(42.84, 55.59);
        assert!((abs - 12.75).abs() < 1e-9);
        assert!((rel.unwrap() - 12.75 / 42.84).abs() < 1e-12);
    }
}
