//! Name-based encoder construction.
//!
//! Backbones are looked up by name among registered factories. Names without
//! a factory fall back to a toy stand-in (with the named backbone's token
//! geometry when it is known) and a warning.

use std::collections::BTreeMap;
use std::sync::Arc;

use log::warn;
use serde::{Deserialize, Serialize};

use super::{toy_vlm, EncoderSpec, TextEncoder, ToyVisualConfig, ToyVlmConfig, VisualEncoder};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const TOY_TEXT: &str = "toy-text";
pub const TOY_VISUAL: &str = "toy-visual";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSettings {
    pub text: String,
    pub visual: String,
    pub toy: ToyVlmConfig,
}

impl Default for EncoderSettings {
    fn default() -> Self {
        Self {
            text: TOY_TEXT.into(),
            visual: TOY_VISUAL.into(),
            toy: ToyVlmConfig::default(),
        }
    }
}

#[derive(Clone)]
pub struct EncoderPair<T> {
    pub text: Arc<dyn TextEncoder<T>>,
    pub visual: Arc<dyn VisualEncoder<T>>,
}

type TextFactory<T> =
    Box<dyn Fn(&EncoderSettings) -> Result<Arc<dyn TextEncoder<T>>> + Send + Sync>;
type VisualFactory<T> =
    Box<dyn Fn(&EncoderSettings) -> Result<Arc<dyn VisualEncoder<T>>> + Send + Sync>;

pub struct EncoderRegistry<T> {
    text: BTreeMap<String, TextFactory<T>>,
    visual: BTreeMap<String, VisualFactory<T>>,
}

impl<T: Scalar> Default for EncoderRegistry<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn known_backbone(name: &str) -> Option<EncoderSpec> {
    [EncoderSpec::clip_vit_b32(), EncoderSpec::medclip_swin()]
        .into_iter()
        .find(|s| s.name == name)
}

impl<T: Scalar> EncoderRegistry<T> {
    pub fn new() -> Self {
        Self {
            text: BTreeMap::new(),
            visual: BTreeMap::new(),
        }
    }

    pub fn register_text(
        &mut self,
        name: &str,
        factory: impl Fn(&EncoderSettings) -> Result<Arc<dyn TextEncoder<T>>> + Send + Sync + 'static,
    ) {
        self.text.insert(name.to_string(), Box::new(factory));
    }

    pub fn register_visual(
        &mut self,
        name: &str,
        factory: impl Fn(&EncoderSettings) -> Result<Arc<dyn VisualEncoder<T>>> + Send + Sync + 'static,
    ) {
        self.visual.insert(name.to_string(), Box::new(factory));
    }

    pub fn names(&self) -> Vec<String> {
        let mut v: Vec<String> = self
            .text
            .keys()
            .chain(self.visual.keys())
            .cloned()
            .collect();
        v.extend([TOY_TEXT.to_string(), TOY_VISUAL.to_string()]);
        v
    }

    /// Builds both encoders. Missing backbones degrade to the aligned toy
    /// pair; the visual stand-in keeps the backbone's prompt geometry.
    pub fn build(&self, settings: &EncoderSettings) -> Result<EncoderPair<T>> {
        let mut toy = settings.toy.clone();
        if let Some(f) = self.visual.get(&settings.visual) {
            let visual = f(settings)?;
            let text = match self.text.get(&settings.text) {
                Some(tf) => tf(settings)?,
                None => {
                    warn!(
                        "text encoder {:?} unavailable, using {TOY_TEXT}",
                        settings.text
                    );
                    Arc::new(toy_vlm::<T>(&toy)?.0)
                }
            };
            return check_pair(EncoderPair { text, visual });
        }
        if settings.visual != TOY_VISUAL {
            match known_backbone(&settings.visual) {
                Some(spec) => {
                    warn!(
                        "visual backbone {:?} not installed; using a toy stand-in with its {}x{} token geometry",
                        settings.visual, spec.hidden_size, spec.num_tokens
                    );
                    toy.visual = ToyVisualConfig::standin_for(&spec, toy.visual.seed)?;
                }
                None => {
                    return Err(Error::validation(format!(
                        "unknown visual encoder {:?}",
                        settings.visual
                    )))
                }
            }
        }
        let (toy_text, toy_visual) = toy_vlm::<T>(&toy)?;
        let text: Arc<dyn TextEncoder<T>> = match self.text.get(&settings.text) {
            Some(tf) => tf(settings)?,
            None => {
                if settings.text != TOY_TEXT {
                    warn!(
                        "text encoder {:?} unavailable, using {TOY_TEXT}",
                        settings.text
                    );
                }
                Arc::new(toy_text)
            }
        };
        check_pair(EncoderPair {
            text,
            visual: Arc::new(toy_visual),
        })
    }
}

fn check_pair<T: Scalar>(pair: EncoderPair<T>) -> Result<EncoderPair<T>> {
    let (t, v) = (pair.text.spec().embed_dim, pair.visual.spec().embed_dim);
    if t != v {
        return Err(Error::shape("joint embedding dimension", t, v));
    }
    Ok(pair)
}
