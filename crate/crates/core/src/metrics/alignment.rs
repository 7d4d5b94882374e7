use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm};
use crate::scalar::Scalar;

/// Identifier stored in reports computed by [`alignment_score`].
pub const HIT_RATE_COSINE: &str = "hit-rate@k/cosine";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub dataset_id: String,
    pub k_values: Vec<usize>,
    pub scores: Vec<f64>,
    pub definition_id: String,
}

/// Visual indices sorted by descending cosine similarity to `query`; equal
/// similarities keep index order, so the top-k sets are nested in k.
fn ranking<T: Scalar>(query: &[T], visual: &[(Vec<T>, usize)]) -> Vec<usize> {
    let qn = norm(query);
    let sims: Vec<f64> = visual
        .iter()
        .map(|(v, _)| {
            let d = qn * norm(v);
            if d == T::zero() {
                f64::NEG_INFINITY
            } else {
                (dot(query, v) / d).f64()
            }
        })
        .collect();
    let mut idx: Vec<usize> = (0..visual.len()).collect();
    idx.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    idx
}

fn check<T: Scalar>(text: &[Vec<Vec<T>>], visual: &[(Vec<T>, usize)], k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::validation("alignment k must be at least 1"));
    }
    if k > visual.len() {
        return Err(Error::validation(format!(
            "alignment k = {k} exceeds the {} visual embeddings",
            visual.len()
        )));
    }
    if text.iter().all(Vec::is_empty) {
        return Err(Error::validation("no text embeddings to align"));
    }
    let dim = visual[0].0.len();
    let bad = visual
        .iter()
        .map(|v| v.0.len())
        .chain(text.iter().flatten().map(Vec::len));
    if let Some(d) = bad.into_iter().find(|&d| d != dim) {
        return Err(Error::shape("alignment embedding", dim, d));
    }
    Ok(())
}

/// Fraction of description embeddings (`text[class]`) whose `k` most
/// cosine-similar visual embeddings include one of the same class.
pub fn alignment_score<T: Scalar>(
    text: &[Vec<Vec<T>>],
    visual: &[(Vec<T>, usize)],
    k: usize,
) -> Result<f64> {
    Ok(alignment_report("", text, visual, &[k])?.scores[0])
}

/// Scores for several `k` from one ranking per description.
pub fn alignment_report<T: Scalar>(
    dataset_id: &str,
    text: &[Vec<Vec<T>>],
    visual: &[(Vec<T>, usize)],
    k_values: &[usize],
) -> Result<AlignmentReport> {
    for &k in k_values {
        check(text, visual, k)?;
    }
    let mut hits = vec![0usize; k_values.len()];
    let mut total = 0usize;
    for (class, descs) in text.iter().enumerate() {
        for q in descs {
            let order = ranking(q, visual);
            let first = order.iter().position(|&i| visual[i].1 == class);
            for (h, &k) in hits.iter_mut().zip(k_values) {
                *h += usize::from(first.is_some_and(|p| p < k));
            }
            total += 1;
        }
    }
    Ok(AlignmentReport {
        dataset_id: dataset_id.into(),
        k_values: k_values.to_vec(),
        scores: hits.iter().map(|&h| h as f64 / total as f64).collect(),
        definition_id: HIT_RATE_COSINE.into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_matches_score_one() {
        let text = vec![vec![vec![1.0f64, 0.0]], vec![vec![0.0, 1.0]]];
        let visual = vec![(vec![0.0, 2.0], 1), (vec![3.0, 0.0], 0)];
        assert_eq!(alignment_score(&text, &visual, 1).unwrap(), 1.0);
    }

    #[test]
    fn k_larger_than_pool_is_rejected() {
        let text = vec![vec![vec![1.0f64]]];
        let visual = vec![(vec![1.0], 0)];
        assert!(matches!(
            alignment_score(&text, &visual, 2),
            Err(Error::Validation(_))
        ));
    }
}
