//! Frozen text and visual encoders behind a uniform interface.
//!
//! Real backbones are not bundled. The toy encoders in [`text`] and
//! [`visual`] are deterministic, closed-form stand-ins that share one joint
//! embedding space, which is enough to exercise the whole pipeline and to
//! check every gradient against finite differences.

pub mod cache;
mod image;
pub mod registry;
pub mod text;
pub mod visual;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::all_finite;
use crate::scalar::Scalar;
use crate::unsup::PromptVector;

pub use self::image::{Image, ImageShape};
pub use cache::{CacheKey, EmbeddingCache};
pub use registry::{EncoderPair, EncoderRegistry, EncoderSettings};
pub use text::{ToyTextConfig, ToyTextEncoder};
pub use visual::{
    toy_vlm, Activation, Injection, TokenizedImage, ToyVisualConfig, ToyVisualEncoder,
    ToyVlmConfig, DEFAULT_CONCEPT_WORDS,
};

/// Dimension of the joint text/visual embedding space.
pub const JOINT_DIM: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Visual,
}

/// Output of an encoder: a finite vector tagged with its modality.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding<T> {
    values: Vec<T>,
    source: Modality,
}

impl<T: Scalar> Embedding<T> {
    pub fn new(values: Vec<T>, source: Modality) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::validation("embedding is empty"));
        }
        if !all_finite(&values) {
            return Err(Error::validation("embedding contains non-finite values"));
        }
        Ok(Self { values, source })
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn source(&self) -> Modality {
        self.source
    }
}

/// Static description of an encoder instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub name: String,
    pub modality: Modality,
    pub embed_dim: usize,
    /// Token feature width; zero for text encoders.
    pub hidden_size: usize,
    /// Token sequence length the prompt covers; zero for text encoders.
    pub num_tokens: usize,
    pub supports_prompt_injection: bool,
    pub supports_gradient_to_input: bool,
}

impl EncoderSpec {
    /// CLIP ViT-B/32 visual tower geometry.
    pub fn clip_vit_b32() -> Self {
        Self::visual("clip-vit-b32", 768, 50)
    }

    /// MedCLIP Swin visual tower geometry.
    pub fn medclip_swin() -> Self {
        Self::visual("medclip-swin", 96, 113)
    }

    fn visual(name: &str, hidden_size: usize, num_tokens: usize) -> Self {
        Self {
            name: name.into(),
            modality: Modality::Visual,
            embed_dim: JOINT_DIM,
            hidden_size,
            num_tokens,
            supports_prompt_injection: true,
            supports_gradient_to_input: true,
        }
    }

    pub fn prompt_parameter_count(&self) -> usize {
        self.hidden_size * self.num_tokens
    }

    /// Trainable parameters of the dual-branch stage: prompt plus a
    /// weights-only adapter.
    pub fn stage2_parameter_count(&self, num_classes: usize) -> usize {
        self.prompt_parameter_count() + self.embed_dim * num_classes
    }

    /// The strong branch needs prompt injection and input gradients.
    pub fn check_prompt_capable(&self) -> Result<()> {
        if !(self.supports_prompt_injection && self.supports_gradient_to_input) {
            return Err(Error::Encoder {
                encoder: self.name.clone(),
                message: "prompt tuning needs prompt injection and gradients to the input".into(),
            });
        }
        Ok(())
    }
}

pub trait TextEncoder<T: Scalar>: Send + Sync {
    fn spec(&self) -> &EncoderSpec;

    /// Changes whenever the encoder would produce different vectors.
    fn fingerprint(&self) -> String;

    /// One embedding per input, in order. Empty strings are rejected.
    fn encode_text(&self, texts: &[&str]) -> Result<Vec<Embedding<T>>>;
}

pub trait VisualEncoder<T: Scalar>: Send + Sync {
    fn spec(&self) -> &EncoderSpec;

    fn fingerprint(&self) -> String;

    /// Raw image geometry expected by [`VisualEncoder::tokenize`].
    fn input_shape(&self) -> ImageShape;

    /// Patch embedding: resizes/converts as needed and returns the token
    /// sequence the prompt is injected into.
    fn tokenize(&self, image: &Image) -> Result<TokenizedImage<T>>;

    fn encode_tokens(
        &self,
        tokens: &TokenizedImage<T>,
        prompt: Option<&PromptVector<T>>,
    ) -> Result<Embedding<T>>;

    fn encode_image(
        &self,
        image: &Image,
        prompt: Option<&PromptVector<T>>,
    ) -> Result<Embedding<T>> {
        self.encode_tokens(&self.tokenize(image)?, prompt)
    }

    /// Pulls `upstream = dL/d(embedding)` back to `dL/d(prompt)`, laid out
    /// like [`PromptVector::values`].
    fn prompt_vjp(
        &self,
        tokens: &TokenizedImage<T>,
        prompt: &PromptVector<T>,
        upstream: &[T],
    ) -> Result<Vec<T>> {
        let _ = (tokens, prompt, upstream);
        Err(Error::Encoder {
            encoder: self.spec().name.clone(),
            message: "no gradient path to the prompt".into(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn named_backbone_prompt_sizes() {
        assert_eq!(EncoderSpec::clip_vit_b32().prompt_parameter_count(), 38400);
        assert_eq!(EncoderSpec::medclip_swin().prompt_parameter_count(), 10848);
        assert_eq!(
            EncoderSpec::medclip_swin().stage2_parameter_count(7),
            10848 + 512 * 7
        );
    }

    #[test]
    fn embedding_rejects_non_finite() {
        assert!(Embedding::new(vec![1.0f64, f64::NAN], Modality::Text).is_err());
    }
}
