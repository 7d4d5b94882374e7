//! Seeded random projection of hashed token counts.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Embedding, EncoderSpec, Modality, TextEncoder, JOINT_DIM};
use crate::error::{Error, Result};
use crate::linalg::normalize_in_place;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyTextConfig {
    pub name: String,
    pub seed: u64,
    /// Hash buckets for token-count features.
    pub buckets: u64,
    pub embed_dim: usize,
}

impl Default for ToyTextConfig {
    fn default() -> Self {
        Self {
            name: "toy-text".into(),
            seed: 0x5eed,
            buckets: 1 << 16,
            embed_dim: JOINT_DIM,
        }
    }
}

/// `normalize(R * counts(tokens))` with `R` a seeded Gaussian matrix whose
/// columns are generated on demand per hash bucket.
#[derive(Debug, Clone)]
pub struct ToyTextEncoder<T> {
    cfg: ToyTextConfig,
    spec: EncoderSpec,
    _scalar: std::marker::PhantomData<T>,
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Lower-cased alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

impl<T: Scalar> ToyTextEncoder<T> {
    pub fn new(cfg: ToyTextConfig) -> Result<Self> {
        if cfg.buckets == 0 || cfg.embed_dim == 0 {
            return Err(Error::validation(
                "toy text encoder needs buckets > 0 and embed_dim > 0",
            ));
        }
        let spec = EncoderSpec {
            name: cfg.name.clone(),
            modality: Modality::Text,
            embed_dim: cfg.embed_dim,
            hidden_size: 0,
            num_tokens: 0,
            supports_prompt_injection: false,
            supports_gradient_to_input: false,
        };
        Ok(Self {
            cfg,
            spec,
            _scalar: std::marker::PhantomData,
        })
    }

    pub fn config(&self) -> &ToyTextConfig {
        &self.cfg
    }

    fn bucket(&self, token: &str) -> u64 {
        splitmix64(fnv1a(token.as_bytes()) ^ self.cfg.seed) % self.cfg.buckets
    }

    fn column(&self, bucket: u64) -> Vec<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(self.cfg.seed ^ splitmix64(bucket)));
        let scale = 1.0 / (self.cfg.embed_dim as f64).sqrt();
        (0..self.cfg.embed_dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                T::of(z * scale)
            })
            .collect()
    }

    /// Unit-norm direction contributed by a single word (after tokenization
    /// the word must be a single token).
    pub fn word_direction(&self, word: &str) -> Result<Vec<T>> {
        let toks = tokenize(word);
        if toks.len() != 1 {
            return Err(Error::validation(format!(
                "{word:?} is not a single token (got {toks:?})"
            )));
        }
        let mut v = self.column(self.bucket(&toks[0]));
        normalize_in_place(&mut v);
        Ok(v)
    }

    fn encode_one(&self, text: &str) -> Result<Vec<T>> {
        if text.trim().is_empty() {
            return Err(Error::validation("cannot encode an empty string"));
        }
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(Error::validation(format!("{text:?} contains no tokens")));
        }
        let mut counts: std::collections::BTreeMap<u64, u32> = Default::default();
        for t in &tokens {
            *counts.entry(self.bucket(t)).or_default() += 1;
        }
        let mut out = vec![T::zero(); self.cfg.embed_dim];
        for (bucket, count) in counts {
            let col = self.column(bucket);
            crate::linalg::axpy(T::of(count as f64), &col, &mut out);
        }
        normalize_in_place(&mut out);
        Ok(out)
    }
}

impl<T: Scalar> TextEncoder<T> for ToyTextEncoder<T> {
    fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    fn fingerprint(&self) -> String {
        format!(
            "toy-text/v1/{}/seed={}/buckets={}/dim={}",
            self.cfg.name, self.cfg.seed, self.cfg.buckets, self.cfg.embed_dim
        )
    }

    fn encode_text(&self, texts: &[&str]) -> Result<Vec<Embedding<T>>> {
        texts
            .iter()
            .map(|t| Embedding::new(self.encode_one(t)?, Modality::Text))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{cosine, norm};

    fn enc() -> ToyTextEncoder<f64> {
        ToyTextEncoder::new(ToyTextConfig::default()).unwrap()
    }

    #[test]
    fn deterministic_and_distinct() {
        let e = enc();
        let out = e.encode_text(&["a", "a", "b"]).unwrap();
        assert_eq!(out[0], out[1]);
        let c = cosine(out[0].values(), out[2].values()).unwrap();
        assert!(c < 1.0 - 1e-6);
        assert_eq!(out[0].dim(), JOINT_DIM);
        assert!((norm(out[2].values()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_input_is_rejected() {
        let e = enc();
        assert!(matches!(e.encode_text(&[""]), Err(Error::Validation(_))));
        assert!(e.encode_text(&["  \t"]).is_err());
        assert!(e.encode_text(&["?!"]).is_err());
    }

    #[test]
    fn case_and_punctuation_are_ignored() {
        let e = enc();
        let out = e
            .encode_text(&["Cavity, opacity!", "cavity opacity"])
            .unwrap();
        assert_eq!(out[0], out[1]);
    }

    #[test]
    fn seed_changes_the_projection() {
        let a = enc();
        let b = ToyTextEncoder::<f64>::new(ToyTextConfig {
            seed: 99,
            ..ToyTextConfig::default()
        })
        .unwrap();
        assert_ne!(
            a.encode_text(&["x"]).unwrap(),
            b.encode_text(&["x"]).unwrap()
        );
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}
