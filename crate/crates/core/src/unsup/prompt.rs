//! Learnable visual prompt: a `hidden_size x num_tokens` matrix injected into
//! the visual encoder's token sequence.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoders::EncoderSpec;
use crate::error::{Error, Result};
use crate::io::{write_atomic, BinReader, BinWriter};
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"LAPV";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptInit {
    #[default]
    Zeros,
    SmallGaussian,
}

/// Row-major `hidden_size x num_tokens` matrix: entry `(h, t)` perturbs
/// feature `h` of token `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptVector<T> {
    hidden_size: usize,
    num_tokens: usize,
    values: Vec<T>,
    encoder_ref: String,
}

impl<T: Scalar> PromptVector<T> {
    pub fn zeros(spec: &EncoderSpec) -> Self {
        Self {
            hidden_size: spec.hidden_size,
            num_tokens: spec.num_tokens,
            values: vec![T::zero(); spec.prompt_parameter_count()],
            encoder_ref: spec.name.clone(),
        }
    }

    pub fn small_gaussian<R: Rng + ?Sized>(spec: &EncoderSpec, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("std is finite and positive");
        let mut p = Self::zeros(spec);
        for v in p.values.iter_mut() {
            *v = T::of(normal.sample(rng));
        }
        p
    }

    pub fn init(spec: &EncoderSpec, init: PromptInit, rng: &mut impl Rng) -> Self {
        match init {
            PromptInit::Zeros => Self::zeros(spec),
            PromptInit::SmallGaussian => Self::small_gaussian(spec, 0.02, rng),
        }
    }

    pub fn from_values(
        hidden_size: usize,
        num_tokens: usize,
        values: Vec<T>,
        encoder_ref: impl Into<String>,
    ) -> Result<Self> {
        if values.len() != hidden_size * num_tokens {
            return Err(Error::shape(
                "prompt values",
                hidden_size * num_tokens,
                values.len(),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("prompt contains non-finite entries"));
        }
        Ok(Self {
            hidden_size,
            num_tokens,
            values,
            encoder_ref: encoder_ref.into(),
        })
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden_size
    }

    pub fn num_tokens(&self) -> usize {
        self.num_tokens
    }

    pub fn encoder_ref(&self) -> &str {
        &self.encoder_ref
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn parameter_count(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn get(&self, hidden: usize, token: usize) -> T {
        self.values[hidden * self.num_tokens + token]
    }

    /// Errors unless the shape equals `(spec.hidden_size, spec.num_tokens)`.
    pub fn check_against(&self, spec: &EncoderSpec) -> Result<()> {
        if (self.hidden_size, self.num_tokens) != (spec.hidden_size, spec.num_tokens) {
            return Err(Error::shape(
                "prompt (hidden_size x num_tokens)",
                format!("{}x{}", spec.hidden_size, spec.num_tokens),
                format!("{}x{}", self.hidden_size, self.num_tokens),
            ));
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == T::zero())
    }

    pub fn cast<U: Scalar>(&self) -> PromptVector<U> {
        PromptVector {
            hidden_size: self.hidden_size,
            num_tokens: self.num_tokens,
            values: crate::linalg::convert(&self.values),
            encoder_ref: self.encoder_ref.clone(),
        }
    }

    /// Binary layout: magic, version, encoder name, stamp, hidden, tokens,
    /// then `hidden * tokens` little-endian `f32` values row by row.
    pub fn to_bytes(&self, stamp: &str) -> Vec<u8> {
        let mut w = BinWriter::new(MAGIC, VERSION);
        w.str(&self.encoder_ref)
            .str(stamp)
            .u32(self.hidden_size as u32)
            .u32(self.num_tokens as u32)
            .f32s(self.values.iter().map(|v| v.f32()));
        w.into_bytes()
    }

    pub fn save(&self, path: &Path, stamp: &str) -> Result<()> {
        write_atomic(path, &self.to_bytes(stamp))
    }

    /// Returns the prompt and the stamp it was saved with.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (mut r, version) = BinReader::open(&bytes, path, MAGIC)?;
        if version != VERSION {
            return Err(r.err(format!("unsupported prompt file version {version}")));
        }
        let encoder_ref = r.str()?;
        let stamp = r.str()?;
        let hidden = r.u32()? as usize;
        let tokens = r.u32()? as usize;
        let raw = r.f32s(hidden * tokens)?;
        r.finish()?;
        let values = raw.into_iter().map(T::of_f32).collect();
        Ok((
            Self::from_values(hidden, tokens, values, encoder_ref)?,
            stamp,
        ))
    }
}
