//! 2-D projections of embedding sets: exact t-SNE and a PCA fallback.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionMethod {
    Tsne,
    Pca,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iters: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 500,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iters: 100,
            seed: 0,
        }
    }
}

fn check_points(points: &[Vec<f64>]) -> Result<usize> {
    let dim = points
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::validation("nothing to project"))?;
    if dim == 0 {
        return Err(Error::validation("cannot project zero-dimensional points"));
    }
    if let Some(p) = points.iter().find(|p| p.len() != dim) {
        return Err(Error::shape("projected point", dim, p.len()));
    }
    Ok(dim)
}

/// Top-2 principal components by power iteration with deflation. Each
/// component's sign is fixed so that its largest-magnitude loading is
/// positive.
pub fn pca_2d(points: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    let dim = check_points(points)?;
    let n = points.len();
    let mut mean = vec![0.0; dim];
    for p in points {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v / n as f64;
        }
    }
    let centered: Vec<Vec<f64>> = points
        .iter()
        .map(|p| p.iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();
    let cov_mul = |v: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; dim];
        for x in &centered {
            let s: f64 = x.iter().zip(v).map(|(a, b)| a * b).sum();
            for (o, xi) in out.iter_mut().zip(x) {
                *o += s * xi;
            }
        }
        out
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0x0070_6361);
    let mut comps: Vec<Vec<f64>> = Vec::new();
    for _ in 0..2 {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        for _ in 0..300 {
            let mut w = cov_mul(&v);
            for c in &comps {
                let d: f64 = w.iter().zip(c).map(|(a, b)| a * b).sum();
                w.iter_mut().zip(c).for_each(|(a, b)| *a -= d * b);
            }
            let nw = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if nw < 1e-300 {
                break;
            }
            w.iter_mut().for_each(|x| *x /= nw);
            let delta: f64 = w.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum();
            v = w;
            if delta < 1e-12 {
                break;
            }
        }
        let big = v
            .iter()
            .copied()
            .fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if big < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        comps.push(v);
    }
    Ok(centered
        .iter()
        .map(|x| {
            let proj = |c: &[f64]| x.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
            [proj(&comps[0]), proj(&comps[1])]
        })
        .collect())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Conditional affinities with a per-point bandwidth found by bisection
/// on the entropy (log perplexity).
fn affinities(points: &[Vec<f64>], perplexity: f64) -> Vec<f64> {
    let n = points.len();
    let target = perplexity.ln();
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        let d: Vec<f64> = (0..n).map(|j| sq_dist(&points[i], &points[j])).collect();
        let (mut lo, mut hi, mut beta) = (0.0, f64::INFINITY, 1.0);
        let mut row = vec![0.0; n];
        for _ in 0..100 {
            let dmin = (0..n)
                .filter(|&j| j != i)
                .map(|j| d[j])
                .fold(f64::INFINITY, f64::min);
            let mut sum = 0.0;
            for j in 0..n {
                row[j] = if j == i {
                    0.0
                } else {
                    (-(d[j] - dmin) * beta).exp()
                };
                sum += row[j];
            }
            let mut h = 0.0;
            for j in 0..n {
                row[j] /= sum;
                if row[j] > 1e-300 {
                    h -= row[j] * row[j].ln();
                }
            }
            if (h - target).abs() < 1e-6 {
                break;
            }
            if h > target {
                lo = beta;
                beta = if hi.is_finite() {
                    (beta + hi) / 2.0
                } else {
                    beta * 2.0
                };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
        p[i * n..(i + 1) * n].copy_from_slice(&row);
    }
    let mut sym = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            sym[i * n + j] = ((p[i * n + j] + p[j * n + i]) / (2.0 * n as f64)).max(1e-12);
        }
    }
    sym
}

/// Exact (O(n^2) per iteration) t-SNE, initialized from scaled PCA.
pub fn tsne_2d(points: &[Vec<f64>], cfg: &TsneConfig) -> Result<Vec<[f64; 2]>> {
    check_points(points)?;
    let n = points.len();
    if n < 5 {
        return Err(Error::validation(format!(
            "t-SNE needs at least 5 points, got {n}"
        )));
    }
    let perplexity = cfg.perplexity.min((n as f64 - 1.0) / 3.0).max(1.0);
    let p = affinities(points, perplexity);

    let init = pca_2d(points)?;
    let sd = (init.iter().map(|y| y[0] * y[0]).sum::<f64>() / n as f64)
        .sqrt()
        .max(1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut y: Vec<[f64; 2]> = init
        .iter()
        .map(|v| {
            let j: f64 = StandardNormal.sample(&mut rng);
            [v[0] / sd * 1e-2 + 1e-6 * j, v[1] / sd * 1e-2]
        })
        .collect();
    let mut vel = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0; 2]; n];
    let mut q = vec![0.0; n * n];
    for it in 0..cfg.iterations {
        let exag = if it < cfg.exaggeration_iters {
            cfg.early_exaggeration
        } else {
            1.0
        };
        let momentum = if it < 250 { 0.5 } else { 0.8 };
        let mut qsum = 0.0;
        for i in 0..n {
            for j in 0..n {
                let v = if i == j {
                    0.0
                } else {
                    1.0 / (1.0 + (y[i][0] - y[j][0]).powi(2) + (y[i][1] - y[j][1]).powi(2))
                };
                q[i * n + j] = v;
                qsum += v;
            }
        }
        for i in 0..n {
            let mut g = [0.0; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = q[i * n + j];
                let coeff = 4.0 * (exag * p[i * n + j] - w / qsum) * w;
                g[0] += coeff * (y[i][0] - y[j][0]);
                g[1] += coeff * (y[i][1] - y[j][1]);
            }
            for d in 0..2 {
                gains[i][d] = if (g[d] > 0.0) != (vel[i][d] > 0.0) {
                    gains[i][d] + 0.2
                } else {
                    (gains[i][d] * 0.8f64).max(0.01)
                };
                vel[i][d] = momentum * vel[i][d] - cfg.learning_rate * gains[i][d] * g[d];
            }
        }
        for i in 0..n {
            y[i][0] += vel[i][0];
            y[i][1] += vel[i][1];
        }
        let (mx, my) = (
            y.iter().map(|v| v[0]).sum::<f64>() / n as f64,
            y.iter().map(|v| v[1]).sum::<f64>() / n as f64,
        );
        y.iter_mut().for_each(|v| {
            v[0] -= mx;
            v[1] -= my;
        });
    }
    if y.iter().any(|v| !v[0].is_finite() || !v[1].is_finite()) {
        return Err(Error::Degenerate("t-SNE diverged".into()));
    }
    Ok(y)
}

/// t-SNE when it applies, PCA otherwise. Returns the method actually used.
pub fn project_2d(
    points: &[Vec<f64>],
    method: ProjectionMethod,
    cfg: &TsneConfig,
) -> Result<(Vec<[f64; 2]>, ProjectionMethod)> {
    if method == ProjectionMethod::Tsne {
        match tsne_2d(points, cfg) {
            Ok(y) => return Ok((y, ProjectionMethod::Tsne)),
            Err(e) => log::warn!("t-SNE unavailable ({e}); falling back to PCA"),
        }
    }
    Ok((pca_2d(points)?, ProjectionMethod::Pca))
}

/// Mean silhouette coefficient (Euclidean); points alone in their cluster
/// score zero.
pub fn silhouette(points: &[[f64; 2]], labels: &[usize]) -> f64 {
    let n = points.len();
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let dist = |a: &[f64; 2], b: &[f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    let mut total = 0.0;
    for i in 0..n {
        let mut sums = vec![0.0; classes];
        let mut counts = vec![0usize; classes];
        for j in 0..n {
            if i != j {
                sums[labels[j]] += dist(&points[i], &points[j]);
                counts[labels[j]] += 1;
            }
        }
        let own = labels[i];
        if counts[own] == 0 {
            continue;
        }
        let a = sums[own] / counts[own] as f64;
        let b = (0..classes)
            .filter(|&k| k != own && counts[k] > 0)
            .map(|k| sums[k] / counts[k] as f64)
            .fold(f64::INFINITY, f64::min);
        if b.is_finite() {
            total += (b - a) / a.max(b);
        }
    }
    total / n.max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clusters(n: usize, dim: usize, sep: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let k = i % 2;
            let p: Vec<f64> = (0..dim)
                .map(|d| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z + if d == 0 && k == 1 { sep } else { 0.0 }
                })
                .collect();
            pts.push(p);
            labels.push(k);
        }
        (pts, labels)
    }

    #[test]
    fn pca_recovers_the_dominant_axis() {
        let (pts, labels) = clusters(60, 5, 10.0, 1);
        let y = pca_2d(&pts).unwrap();
        assert!(silhouette(&y, &labels) > 0.5);
    }

    #[test]
    fn tsne_separates_planted_clusters() {
        let (pts, labels) = clusters(60, 8, 8.0, 2);
        let y = tsne_2d(&pts, &TsneConfig::default()).unwrap();
        assert!(silhouette(&y, &labels) > 0.5);
        assert_eq!(y, tsne_2d(&pts, &TsneConfig::default()).unwrap());
    }

    #[test]
    fn tiny_sets_fall_back_to_pca() {
        let pts = vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![2.0, 2.0]];
        let (_, used) = project_2d(&pts, ProjectionMethod::Tsne, &TsneConfig::default()).unwrap();
        assert_eq!(used, ProjectionMethod::Pca);
    }

    #[test]
    fn silhouette_of_perfectly_separated_points() {
        let pts = [[0.0, 0.0], [0.0, 0.1], [10.0, 0.0], [10.0, 0.1]];
        assert!(silhouette(&pts, &[0, 0, 1, 1]) > 0.98);
    }
}
