//! Toy visual tower: patchify, linear token embedding (plus position and
//! class tokens), prompt injection, elementwise activation, mean-pool and a
//! linear projection into the joint space.
//!
//! Every step has a closed-form derivative, so the prompt gradient used by
//! the strong branch is exact.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::text::{splitmix64, ToyTextConfig, ToyTextEncoder};
use super::{Embedding, EncoderSpec, Image, ImageShape, Modality, VisualEncoder, JOINT_DIM};
use crate::error::{Error, Result};
use crate::io::sha256_hex;
use crate::linalg::{dot, normalize_in_place};
use crate::scalar::Scalar;
use crate::unsup::PromptVector;

/// Concept vocabulary the toy visual features are aligned with: hidden unit
/// `h` projects onto the text direction of word `h`.
pub const DEFAULT_CONCEPT_WORDS: [&str; 32] = [
    "opacity",
    "consolidation",
    "cavity",
    "nodule",
    "infiltrate",
    "effusion",
    "clear",
    "sharp",
    "symmetric",
    "lucent",
    "hemorrhage",
    "exudate",
    "microaneurysm",
    "vessel",
    "pigmented",
    "asymmetric",
    "border",
    "irregular",
    "lesion",
    "dark",
    "bright",
    "round",
    "texture",
    "patchy",
    "diffuse",
    "focal",
    "healthy",
    "normal",
    "inflamed",
    "scarring",
    "calcified",
    "dense",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    #[default]
    Tanh,
}

/// How the prompt enters the token sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Injection {
    /// Added elementwise to every token.
    #[default]
    Add,
    /// Appended as extra tokens.
    Append,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyVisualConfig {
    pub name: String,
    pub seed: u64,
    pub channels: usize,
    pub patch_size: usize,
    pub grid_height: usize,
    pub grid_width: usize,
    pub hidden_size: usize,
    pub class_token: bool,
    pub activation: Activation,
    pub injection: Injection,
    pub embed_dim: usize,
    pub normalize_output: bool,
    pub pixel_mean: f32,
    pub pixel_std: f32,
}

impl Default for ToyVisualConfig {
    fn default() -> Self {
        Self {
            name: "toy-visual".into(),
            seed: 0x5eed,
            channels: 1,
            patch_size: 6,
            grid_height: 4,
            grid_width: 4,
            hidden_size: 32,
            class_token: true,
            activation: Activation::Tanh,
            injection: Injection::Add,
            embed_dim: JOINT_DIM,
            normalize_output: true,
            pixel_mean: 0.5,
            pixel_std: 0.25,
        }
    }
}

impl ToyVisualConfig {
    /// Toy tower with the token geometry of a named backbone (class token
    /// plus the most square patch grid that fills the remaining tokens).
    pub fn standin_for(spec: &EncoderSpec, seed: u64) -> Result<Self> {
        if spec.num_tokens < 2 || spec.hidden_size == 0 {
            return Err(Error::validation(format!(
                "cannot build a stand-in for {} ({}x{})",
                spec.name, spec.hidden_size, spec.num_tokens
            )));
        }
        let patches = spec.num_tokens - 1;
        let mut rows = (patches as f64).sqrt().floor() as usize;
        while !patches.is_multiple_of(rows) {
            rows -= 1;
        }
        let channels = 3;
        let mut patch_size = 1;
        while channels * patch_size * patch_size < spec.hidden_size {
            patch_size += 1;
        }
        Ok(Self {
            name: spec.name.clone(),
            seed,
            channels,
            patch_size,
            grid_height: rows,
            grid_width: patches / rows,
            hidden_size: spec.hidden_size,
            embed_dim: spec.embed_dim,
            ..Self::default()
        })
    }

    pub fn num_tokens(&self) -> usize {
        self.grid_height * self.grid_width + usize::from(self.class_token)
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn input_shape(&self) -> ImageShape {
        ImageShape {
            channels: self.channels,
            height: self.grid_height * self.patch_size,
            width: self.grid_width * self.patch_size,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.channels == 0
            || self.patch_size == 0
            || self.grid_height == 0
            || self.grid_width == 0
            || self.hidden_size == 0
            || self.embed_dim == 0
        {
            return Err(Error::validation(
                "toy visual encoder dimensions must be positive",
            ));
        }
        if !(self.pixel_std > 0.0) {
            return Err(Error::validation("pixel_std must be positive"));
        }
        Ok(())
    }
}

/// Patch-embedded token sequence, `num_tokens x hidden_size`, token-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedImage<T> {
    tokens: Vec<T>,
    hidden_size: usize,
    num_tokens: usize,
}

impl<T: Scalar> TokenizedImage<T> {
    pub fn new(tokens: Vec<T>, num_tokens: usize, hidden_size: usize) -> Result<Self> {
        if num_tokens == 0 || hidden_size == 0 {
            return Err(Error::validation("token grid must be non-empty"));
        }
        if tokens.len() != num_tokens * hidden_size {
            return Err(Error::shape(
                "token matrix",
                num_tokens * hidden_size,
                tokens.len(),
            ));
        }
        Ok(Self {
            tokens,
            hidden_size,
            num_tokens,
        })
    }

    pub fn tokens(&self) -> &[T] {
        &self.tokens
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden_size
    }

    pub fn num_tokens(&self) -> usize {
        self.num_tokens
    }

    pub fn token(&self, t: usize) -> &[T] {
        &self.tokens[t * self.hidden_size..(t + 1) * self.hidden_size]
    }
}

#[derive(Debug, Clone)]
pub struct ToyVisualEncoder<T> {
    cfg: ToyVisualConfig,
    spec: EncoderSpec,
    /// `hidden x patch_dim`
    embed_rows: Vec<T>,
    /// `num_tokens x hidden`
    pos: Vec<T>,
    cls: Vec<T>,
    /// `embed_dim x hidden`
    proj: Vec<T>,
    fingerprint: String,
}

struct Forward<T> {
    /// Pre-activation of every token in the pooled sequence.
    pre: Vec<T>,
    n_pooled: usize,
    y: Vec<T>,
    y_norm: T,
    z: Vec<T>,
}

fn gaussian<T: Scalar>(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<T> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::of(z * std)
        })
        .collect()
}

fn dct(n: usize, k: usize, i: usize) -> f64 {
    let scale = if k == 0 { 1.0 } else { 2.0 };
    (scale / n as f64).sqrt()
        * (std::f64::consts::PI * (i as f64 + 0.5) * k as f64 / n as f64).cos()
}

/// Rows are 3-D cosine modes over (channel, y, x) of a patch, so they are
/// orthonormal. Modes even in `x` (unchanged by a horizontal flip) come first,
/// then lower frequencies; the constant mode is used last. With more rows
/// than patch dimensions, plain Gaussian rows with `1/sqrt(cols)` scale.
fn token_embedding(rng: &mut ChaCha8Rng, rows: usize, channels: usize, patch: usize) -> Vec<f64> {
    let cols = channels * patch * patch;
    if rows > cols {
        return gaussian::<f64>(rng, rows * cols, 1.0 / (cols as f64).sqrt());
    }
    let mut modes: Vec<(usize, usize, usize)> = (0..channels)
        .flat_map(|w| (0..patch).flat_map(move |v| (0..patch).map(move |u| (w, v, u))))
        .collect();
    modes.sort_by_key(|&(w, v, u)| (w + v + u == 0, u % 2, w + v + u, w, v, u));
    let mut m = Vec::with_capacity(rows * cols);
    for &(w, v, u) in &modes[..rows] {
        for c in 0..channels {
            for y in 0..patch {
                for x in 0..patch {
                    m.push(dct(channels, w, c) * dct(patch, v, y) * dct(patch, u, x));
                }
            }
        }
    }
    m
}

impl<T: Scalar> ToyVisualEncoder<T> {
    /// Random projection into the joint space (not aligned with any text
    /// encoder); see [`toy_vlm`] for an aligned pair.
    pub fn new(cfg: ToyVisualConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed ^ 0x7669_7375_616c));
        let embed_rows = token_embedding(&mut rng, cfg.hidden_size, cfg.channels, cfg.patch_size)
            .into_iter()
            .map(T::of)
            .collect();
        let pos = gaussian(&mut rng, cfg.num_tokens() * cfg.hidden_size, 0.02);
        let cls = gaussian(&mut rng, cfg.hidden_size, 0.02);
        let mut proj = vec![T::zero(); cfg.embed_dim * cfg.hidden_size];
        for h in 0..cfg.hidden_size {
            let mut col: Vec<T> = gaussian(&mut rng, cfg.embed_dim, 1.0);
            normalize_in_place(&mut col);
            for (d, v) in col.into_iter().enumerate() {
                proj[d * cfg.hidden_size + h] = v;
            }
        }
        let spec = EncoderSpec {
            name: cfg.name.clone(),
            modality: Modality::Visual,
            embed_dim: cfg.embed_dim,
            hidden_size: cfg.hidden_size,
            num_tokens: cfg.num_tokens(),
            supports_prompt_injection: true,
            supports_gradient_to_input: true,
        };
        let mut enc = Self {
            cfg,
            spec,
            embed_rows,
            pos,
            cls,
            proj,
            fingerprint: String::new(),
        };
        enc.refresh_fingerprint();
        Ok(enc)
    }

    /// Replaces projection column `h` (the joint-space direction of hidden
    /// unit `h`) for the first `columns.len()` units.
    pub fn with_projection_columns(mut self, columns: &[Vec<T>]) -> Result<Self> {
        let hidden = self.cfg.hidden_size;
        if columns.len() > hidden {
            return Err(Error::shape(
                "projection columns",
                format!("<= {hidden}"),
                columns.len(),
            ));
        }
        for (h, col) in columns.iter().enumerate() {
            if col.len() != self.cfg.embed_dim {
                return Err(Error::shape(
                    "projection column",
                    self.cfg.embed_dim,
                    col.len(),
                ));
            }
            for (d, &v) in col.iter().enumerate() {
                self.proj[d * hidden + h] = v;
            }
        }
        self.refresh_fingerprint();
        Ok(self)
    }

    fn refresh_fingerprint(&mut self) {
        let mut bytes = serde_json::to_vec(&self.cfg).expect("config serializes");
        for v in self
            .proj
            .iter()
            .chain(&self.embed_rows)
            .chain(&self.pos)
            .chain(&self.cls)
        {
            bytes.extend_from_slice(&v.f32().to_le_bytes());
        }
        self.fingerprint = format!("toy-visual/v1/{}", &sha256_hex(&bytes)[..16]);
    }

    pub fn config(&self) -> &ToyVisualConfig {
        &self.cfg
    }

    /// Token-embedding matrix, `hidden x patch_dim`, row-major.
    pub fn token_embedding_rows(&self) -> &[T] {
        &self.embed_rows
    }

    /// Whether the token embedding rows are orthonormal (so that
    /// `E * E^T = I` and patch patterns can be planted exactly).
    pub fn has_orthonormal_rows(&self) -> bool {
        self.cfg.hidden_size <= self.cfg.patch_dim()
    }

    fn act(&self, u: T) -> T {
        match self.cfg.activation {
            Activation::Identity => u,
            Activation::Tanh => u.tanh(),
        }
    }

    fn act_grad(&self, u: T) -> T {
        match self.cfg.activation {
            Activation::Identity => T::one(),
            Activation::Tanh => {
                let t = u.tanh();
                T::one() - t * t
            }
        }
    }

    fn check_tokens(&self, tokens: &TokenizedImage<T>) -> Result<()> {
        if (tokens.num_tokens, tokens.hidden_size) != (self.spec.num_tokens, self.spec.hidden_size)
        {
            return Err(Error::shape(
                "token sequence (num_tokens x hidden_size)",
                format!("{}x{}", self.spec.num_tokens, self.spec.hidden_size),
                format!("{}x{}", tokens.num_tokens, tokens.hidden_size),
            ));
        }
        Ok(())
    }

    fn forward(
        &self,
        tokens: &TokenizedImage<T>,
        prompt: Option<&PromptVector<T>>,
    ) -> Result<Forward<T>> {
        self.check_tokens(tokens)?;
        if let Some(p) = prompt {
            p.check_against(&self.spec)?;
        }
        let hidden = self.cfg.hidden_size;
        let nt = self.spec.num_tokens;
        let mut pre = tokens.tokens.clone();
        match (prompt, self.cfg.injection) {
            (Some(p), Injection::Add) => {
                for t in 0..nt {
                    for h in 0..hidden {
                        pre[t * hidden + h] = pre[t * hidden + h] + p.get(h, t);
                    }
                }
            }
            (Some(p), Injection::Append) => {
                pre.reserve(nt * hidden);
                for t in 0..nt {
                    for h in 0..hidden {
                        pre.push(p.get(h, t));
                    }
                }
            }
            (None, _) => {}
        }
        let n_pooled = pre.len() / hidden;
        let inv = T::one() / T::of(n_pooled as f64);
        let mut pooled = vec![T::zero(); hidden];
        for t in 0..n_pooled {
            for h in 0..hidden {
                pooled[h] = pooled[h] + self.act(pre[t * hidden + h]) * inv;
            }
        }
        let y: Vec<T> = (0..self.cfg.embed_dim)
            .map(|d| dot(&self.proj[d * hidden..(d + 1) * hidden], &pooled))
            .collect();
        let mut z = y.clone();
        let y_norm = if self.cfg.normalize_output {
            let n = normalize_in_place(&mut z);
            if n == T::zero() {
                return Err(Error::Encoder {
                    encoder: self.cfg.name.clone(),
                    message: "image maps to the zero vector".into(),
                });
            }
            n
        } else {
            T::one()
        };
        Ok(Forward {
            pre,
            n_pooled,
            y,
            y_norm,
            z,
        })
    }

    /// `dL/d(pre-activation)` for every pooled token, token-major.
    fn backward(&self, fwd: &Forward<T>, upstream: &[T]) -> Result<Vec<T>> {
        if upstream.len() != self.cfg.embed_dim {
            return Err(Error::shape(
                "embedding gradient",
                self.cfg.embed_dim,
                upstream.len(),
            ));
        }
        let hidden = self.cfg.hidden_size;
        let grad_y: Vec<T> = if self.cfg.normalize_output {
            let zg = dot(&fwd.z, upstream);
            upstream
                .iter()
                .zip(&fwd.z)
                .map(|(&g, &z)| (g - z * zg) / fwd.y_norm)
                .collect()
        } else {
            upstream.to_vec()
        };
        debug_assert_eq!(grad_y.len(), fwd.y.len());
        let mut grad_pooled = vec![T::zero(); hidden];
        for (d, &gy) in grad_y.iter().enumerate() {
            let row = &self.proj[d * hidden..(d + 1) * hidden];
            for (gp, &w) in grad_pooled.iter_mut().zip(row) {
                *gp = *gp + gy * w;
            }
        }
        let inv = T::one() / T::of(fwd.n_pooled as f64);
        let mut grad_pre = vec![T::zero(); fwd.pre.len()];
        for t in 0..fwd.n_pooled {
            for h in 0..hidden {
                let i = t * hidden + h;
                grad_pre[i] = grad_pooled[h] * inv * self.act_grad(fwd.pre[i]);
            }
        }
        Ok(grad_pre)
    }

    /// Gradient of a scalar loss with respect to the token sequence.
    pub fn tokens_vjp(
        &self,
        tokens: &TokenizedImage<T>,
        prompt: Option<&PromptVector<T>>,
        upstream: &[T],
    ) -> Result<Vec<T>> {
        let fwd = self.forward(tokens, prompt)?;
        let mut g = self.backward(&fwd, upstream)?;
        g.truncate(self.spec.num_tokens * self.cfg.hidden_size);
        Ok(g)
    }
}

impl<T: Scalar> VisualEncoder<T> for ToyVisualEncoder<T> {
    fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    fn fingerprint(&self) -> String {
        self.fingerprint.clone()
    }

    fn input_shape(&self) -> ImageShape {
        self.cfg.input_shape()
    }

    fn tokenize(&self, image: &Image) -> Result<TokenizedImage<T>> {
        let want = self.cfg.input_shape();
        let mut img = image.with_channels(want.channels)?;
        if img.shape() != want {
            img = img.resized(want.height, want.width);
        }
        let hidden = self.cfg.hidden_size;
        let ps = self.cfg.patch_size;
        let pd = self.cfg.patch_dim();
        let mean = self.cfg.pixel_mean;
        let inv_std = 1.0 / self.cfg.pixel_std;
        let offset = usize::from(self.cfg.class_token);
        let nt = self.spec.num_tokens;
        let mut tokens = vec![T::zero(); nt * hidden];
        if self.cfg.class_token {
            for h in 0..hidden {
                tokens[h] = self.cls[h] + self.pos[h];
            }
        }
        let mut patch = vec![T::zero(); pd];
        for gy in 0..self.cfg.grid_height {
            for gx in 0..self.cfg.grid_width {
                let mut k = 0;
                for c in 0..self.cfg.channels {
                    for py in 0..ps {
                        for px in 0..ps {
                            let v = img.at(c, gy * ps + py, gx * ps + px);
                            patch[k] = T::of_f32((v - mean) * inv_std);
                            k += 1;
                        }
                    }
                }
                let t = offset + gy * self.cfg.grid_width + gx;
                for h in 0..hidden {
                    tokens[t * hidden + h] = dot(&self.embed_rows[h * pd..(h + 1) * pd], &patch)
                        + self.pos[t * hidden + h];
                }
            }
        }
        TokenizedImage::new(tokens, nt, hidden)
    }

    fn encode_tokens(
        &self,
        tokens: &TokenizedImage<T>,
        prompt: Option<&PromptVector<T>>,
    ) -> Result<Embedding<T>> {
        let fwd = self.forward(tokens, prompt)?;
        Embedding::new(fwd.z, Modality::Visual)
    }

    fn prompt_vjp(
        &self,
        tokens: &TokenizedImage<T>,
        prompt: &PromptVector<T>,
        upstream: &[T],
    ) -> Result<Vec<T>> {
        let fwd = self.forward(tokens, Some(prompt))?;
        let grad_pre = self.backward(&fwd, upstream)?;
        let hidden = self.cfg.hidden_size;
        let nt = self.spec.num_tokens;
        let base = match self.cfg.injection {
            Injection::Add => 0,
            Injection::Append => nt,
        };
        let mut out = vec![T::zero(); hidden * nt];
        for t in 0..nt {
            for h in 0..hidden {
                out[h * nt + t] = grad_pre[(base + t) * hidden + h];
            }
        }
        Ok(out)
    }
}

/// Paired toy encoders sharing one joint space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyVlmConfig {
    pub text: ToyTextConfig,
    pub visual: ToyVisualConfig,
    /// Word whose text direction hidden unit `h` projects onto. Units past
    /// the end of the list use the direction of a synthetic `featureN` word.
    pub concept_words: Vec<String>,
}

impl Default for ToyVlmConfig {
    fn default() -> Self {
        Self {
            text: ToyTextConfig::default(),
            visual: ToyVisualConfig::default(),
            concept_words: DEFAULT_CONCEPT_WORDS
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }
}

impl ToyVlmConfig {
    pub fn with_seed(seed: u64) -> Self {
        let mut cfg = Self::default();
        cfg.text.seed = seed;
        cfg.visual.seed = seed;
        cfg
    }

    /// Concept word of hidden unit `h`.
    pub fn concept_word(&self, h: usize) -> String {
        self.concept_words
            .get(h)
            .cloned()
            .unwrap_or_else(|| format!("feature{h}"))
    }
}

/// Builds a text encoder and a visual encoder whose hidden unit `h` points
/// at the text embedding of concept word `h`.
pub fn toy_vlm<T: Scalar>(cfg: &ToyVlmConfig) -> Result<(ToyTextEncoder<T>, ToyVisualEncoder<T>)> {
    if cfg.text.embed_dim != cfg.visual.embed_dim {
        return Err(Error::shape(
            "joint dimension",
            cfg.text.embed_dim,
            cfg.visual.embed_dim,
        ));
    }
    let text = ToyTextEncoder::new(cfg.text.clone())?;
    let columns = (0..cfg.visual.hidden_size)
        .map(|h| text.word_direction(&cfg.concept_word(h)))
        .collect::<Result<Vec<_>>>()?;
    let visual = ToyVisualEncoder::new(cfg.visual.clone())?.with_projection_columns(&columns)?;
    Ok((text, visual))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::TextEncoder;
    use crate::linalg::cosine;

    fn image(shape: ImageShape, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..shape.len())
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (0.5 + 0.2 * z).clamp(0.0, 1.0) as f32
            })
            .collect();
        Image::new(shape.channels, shape.height, shape.width, data).unwrap()
    }

    #[test]
    fn zero_prompt_is_identity_under_addition() {
        let enc = ToyVisualEncoder::<f64>::new(ToyVisualConfig::default()).unwrap();
        let img = image(enc.input_shape(), 1);
        let p = PromptVector::zeros(enc.spec());
        assert_eq!(
            enc.encode_image(&img, None).unwrap(),
            enc.encode_image(&img, Some(&p)).unwrap()
        );
    }

    #[test]
    fn output_is_unit_norm_and_declared_dim() {
        let enc = ToyVisualEncoder::<f64>::new(ToyVisualConfig::default()).unwrap();
        let e = enc
            .encode_image(&image(enc.input_shape(), 2), None)
            .unwrap();
        assert_eq!(e.dim(), JOINT_DIM);
        assert!((crate::linalg::norm(e.values()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn prompt_shape_mismatch_is_a_shape_error() {
        let enc = ToyVisualEncoder::<f64>::new(ToyVisualConfig::default()).unwrap();
        let img = image(enc.input_shape(), 3);
        let wrong = PromptVector::from_values(2, 2, vec![0.0; 4], "x").unwrap();
        assert!(matches!(
            enc.encode_image(&img, Some(&wrong)),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn token_rows_are_orthonormal() {
        let enc = ToyVisualEncoder::<f64>::new(ToyVisualConfig::default()).unwrap();
        let pd = enc.config().patch_dim();
        let rows = enc.token_embedding_rows();
        for a in 0..4 {
            for b in 0..4 {
                let d = dot(&rows[a * pd..(a + 1) * pd], &rows[b * pd..(b + 1) * pd]);
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn standin_geometry_matches_backbones() {
        let vit = ToyVisualConfig::standin_for(&EncoderSpec::clip_vit_b32(), 1).unwrap();
        assert_eq!((vit.hidden_size, vit.num_tokens()), (768, 50));
        let swin = ToyVisualConfig::standin_for(&EncoderSpec::medclip_swin(), 1).unwrap();
        assert_eq!((swin.hidden_size, swin.num_tokens()), (96, 113));
        assert!(swin.patch_dim() >= 96);
    }

    #[test]
    fn aligned_pair_maps_concepts_to_words() {
        let cfg = ToyVlmConfig::default();
        let (text, visual) = toy_vlm::<f64>(&cfg).unwrap();
        // A pure "cavity" activation pattern lands on the text direction of "cavity".
        let h = cfg
            .concept_words
            .iter()
            .position(|w| w == "cavity")
            .unwrap();
        let hidden = cfg.visual.hidden_size;
        let nt = visual.spec().num_tokens;
        let mut tokens = vec![0.0; nt * hidden];
        for t in 0..nt {
            tokens[t * hidden + h] = 0.8;
        }
        let tok = TokenizedImage::new(tokens, nt, hidden).unwrap();
        let v = visual.encode_tokens(&tok, None).unwrap();
        let w = text.encode_text(&["cavity"]).unwrap();
        assert!(cosine(v.values(), w[0].values()).unwrap() > 0.999);
    }

    #[test]
    fn append_injection_keeps_direction_for_zero_prompt() {
        let cfg = ToyVisualConfig {
            injection: Injection::Append,
            ..ToyVisualConfig::default()
        };
        let enc = ToyVisualEncoder::<f64>::new(cfg).unwrap();
        let img = image(enc.input_shape(), 4);
        let p = PromptVector::zeros(enc.spec());
        let a = enc.encode_image(&img, None).unwrap();
        let b = enc.encode_image(&img, Some(&p)).unwrap();
        assert!(cosine(a.values(), b.values()).unwrap() > 1.0 - 1e-12);
    }
}
