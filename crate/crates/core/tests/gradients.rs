//! Central finite differences against the analytic gradients.

use langadapt_core::adapter::Adapter;
use langadapt_core::encoders::{toy_vlm, ToyVlmConfig, VisualEncoder};
use langadapt_core::losses::{
    consistency, cross_entropy, cross_entropy_with_grad, label_smoothing_ce,
    label_smoothing_ce_with_grad, negative_cosine_similarity, negative_cosine_similarity_with_grad,
    self_entropy, self_entropy_with_grad, LossConfig, LossKind, TargetDistribution,
};
use langadapt_core::synth::SynthConfig;
use langadapt_core::unsup::{DualBranch, PromptVector, Stage2Config, UnlabeledItem};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn close(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= TOL * analytic.abs().max(numeric.abs()) + 1e-9
}

fn central(f: impl Fn(&[f64]) -> f64, x: &[f64], i: usize) -> f64 {
    let mut p = x.to_vec();
    p[i] += STEP;
    let up = f(&p);
    p[i] -= 2.0 * STEP;
    (up - f(&p)) / (2.0 * STEP)
}

fn random_logits(rng: &mut ChaCha8Rng, c: usize) -> Vec<f64> {
    let n = Normal::new(0.0, 2.0).unwrap();
    (0..c).map(|_| n.sample(rng)).collect()
}

fn random_target(rng: &mut ChaCha8Rng, c: usize) -> TargetDistribution<f64> {
    let raw: Vec<f64> = (0..c).map(|_| rng.random::<f64>() + 0.01).collect();
    let s: f64 = raw.iter().sum();
    TargetDistribution::new(raw.into_iter().map(|v| v / s).collect()).unwrap()
}

/// Checks every coordinate; returns the number of probes.
fn check_all(name: &str, f: impl Fn(&[f64]) -> f64, grad: &[f64], x: &[f64]) -> usize {
    for i in 0..x.len() {
        let num = central(&f, x, i);
        assert!(
            close(grad[i], num),
            "{name}[{i}]: analytic {} vs numeric {num}",
            grad[i]
        );
    }
    x.len()
}

#[test]
fn logit_losses_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut probes = 0;
    for trial in 0..40 {
        let c = 2 + trial % 5;
        let z = random_logits(&mut rng, c);
        let t = random_target(&mut rng, c);
        let alpha = rng.random_range(0.0..0.5);
        let v: Vec<f64> = random_logits(&mut rng, c);

        let g = cross_entropy_with_grad(&z, &t).unwrap().grad;
        probes += check_all("ce", |x| cross_entropy(x, &t).unwrap(), &g, &z);

        let g = label_smoothing_ce_with_grad(&z, &t, alpha).unwrap().grad;
        probes += check_all(
            "lsce",
            |x| label_smoothing_ce(x, &t, alpha).unwrap(),
            &g,
            &z,
        );

        let g = negative_cosine_similarity_with_grad(&z, &v).unwrap().grad;
        probes += check_all(
            "ncs",
            |x| negative_cosine_similarity(x, &v).unwrap(),
            &g,
            &z,
        );

        let g = self_entropy_with_grad(&z).grad;
        probes += check_all("entropy", |x| self_entropy(x), &g, &z);
    }
    assert!(probes >= 100, "only {probes} probes");
}

#[test]
fn branch_consistency_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut probes = 0;
    for trial in 0..30 {
        let c = 2 + trial % 4;
        let target = random_logits(&mut rng, c);
        let pred = random_logits(&mut rng, c);
        for kind in LossKind::ALL {
            for soft in [false, true] {
                let cfg = LossConfig {
                    kind,
                    soft_targets: soft,
                    smoothing_alpha: 0.2,
                    ..LossConfig::default()
                };
                let g = consistency(&target, &pred, &cfg).unwrap().unwrap().grad;
                let f = |x: &[f64]| consistency(&target, x, &cfg).unwrap().unwrap().value;
                probes += check_all(kind.label(), f, &g, &pred);
            }
        }
    }
    assert!(probes >= 100);
}

fn toy_batch(n: usize) -> (SynthConfig, Vec<UnlabeledItem>) {
    let cfg = SynthConfig {
        images_per_class: n,
        ..SynthConfig::default()
    };
    let items = cfg
        .images()
        .unwrap()
        .iter()
        .map(|s| s.unlabeled())
        .collect();
    (cfg, items)
}

fn random_adapter(rng: &mut ChaCha8Rng, c: usize, dim: usize) -> Adapter<f64> {
    let n = Normal::new(0.0, 3.0 / (dim as f64).sqrt()).unwrap();
    let w = (0..c * dim).map(|_| n.sample(rng)).collect();
    Adapter::from_parts(w, None, c, dim, "synthetic-cxr").unwrap()
}

fn prompt_probes(loss: LossConfig, seed: u64) -> usize {
    let (synth, items) = toy_batch(2);
    let toy: ToyVlmConfig = synth.toy.clone();
    let (_, visual) = toy_vlm::<f64>(&toy).unwrap();
    let spec = visual.spec().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g_hat = random_adapter(&mut rng, 2, spec.embed_dim);
    let cfg = Stage2Config {
        loss,
        ..Stage2Config::default()
    };
    let mut db = DualBranch::new(&visual, &g_hat, &cfg).unwrap();
    db.weak = random_adapter(&mut rng, 2, spec.embed_dim);
    db.prompt = PromptVector::small_gaussian(&spec, 0.3, &mut rng);
    let refs: Vec<&UnlabeledItem> = items.iter().collect();
    let views = db.views(&refs, 0).unwrap();
    let (_, adapter_grad, prompt_grad) = db.strong_objective(&views).unwrap();

    let base = db.prompt.values().to_vec();
    let mut probes = 0;
    for _ in 0..60 {
        let i = rng.random_range(0..base.len());
        let num = {
            let mut eval = |delta: f64| {
                db.prompt.values_mut()[i] = base[i] + delta;
                db.strong_objective(&views).unwrap().0
            };
            let (up, down) = (eval(STEP), eval(-STEP));
            (up - down) / (2.0 * STEP)
        };
        db.prompt.values_mut()[i] = base[i];
        assert!(
            close(prompt_grad[i], num),
            "prompt[{i}]: analytic {} vs numeric {num}",
            prompt_grad[i]
        );
        probes += 1;
    }

    let weights = db.strong.params().to_vec();
    for _ in 0..20 {
        let i = rng.random_range(0..weights.len());
        let num = {
            let mut eval = |delta: f64| {
                db.strong.params_mut()[i] = weights[i] + delta;
                db.strong_objective(&views).unwrap().0
            };
            let (up, down) = (eval(STEP), eval(-STEP));
            (up - down) / (2.0 * STEP)
        };
        db.strong.params_mut()[i] = weights[i];
        assert!(
            close(adapter_grad[i], num),
            "adapter[{i}]: analytic {} vs numeric {num}",
            adapter_grad[i]
        );
        probes += 1;
    }
    probes
}

#[test]
fn strong_objective_prompt_gradient_through_toy_encoder() {
    let mut probes = 0;
    for (seed, kind) in [(1, LossKind::Ce), (2, LossKind::Lsce), (3, LossKind::Ncs)] {
        probes += prompt_probes(
            LossConfig {
                kind,
                ..LossConfig::default()
            },
            seed,
        );
    }
    assert!(probes >= 100);
}
