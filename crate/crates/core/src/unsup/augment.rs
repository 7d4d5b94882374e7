//! Weak and strong image augmentation policies.
//!
//! Every random draw comes from a generator seeded by
//! `(policy seed, kind, item id, epoch)`, so a view is reproducible without
//! any shared state. Resizing to the encoder's input size is not an op here:
//! the encoder's tokenizer always does it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::Image;
use crate::error::{Error, Result};
use crate::io::sha256_hex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentKind {
    Weak,
    Strong,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum AugOp {
    HorizontalFlip {
        p: f32,
    },
    /// Square crop of side `scale * min(h, w)`, `scale` uniform in
    /// `[min_scale, 1]`, resampled back to full size.
    RandomCrop {
        min_scale: f32,
    },
    Rotation {
        max_degrees: f32,
    },
    ColorJitter {
        brightness: f32,
        contrast: f32,
    },
    /// With probability `p`, a rectangle covering up to `max_area` of the
    /// image is set to the image mean.
    RandomErasing {
        p: f32,
        max_area: f32,
    },
}

impl AugOp {
    fn validate(&self) -> Result<()> {
        let ok = match *self {
            AugOp::HorizontalFlip { p } => (0.0..=1.0).contains(&p),
            AugOp::RandomCrop { min_scale } => min_scale > 0.0 && min_scale <= 1.0,
            AugOp::Rotation { max_degrees } => (0.0..=180.0).contains(&max_degrees),
            AugOp::ColorJitter {
                brightness,
                contrast,
            } => (0.0..1.0).contains(&brightness) && (0.0..1.0).contains(&contrast),
            AugOp::RandomErasing { p, max_area } => {
                (0.0..=1.0).contains(&p) && max_area > 0.0 && max_area <= 1.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::validation(format!(
                "augmentation op out of range: {self:?}"
            )))
        }
    }

    fn apply(&self, img: &Image, rng: &mut ChaCha8Rng) -> Image {
        let shape = img.shape();
        let (h, w) = (shape.height as f32, shape.width as f32);
        match *self {
            AugOp::HorizontalFlip { p } => {
                if rng.random::<f32>() >= p {
                    return img.clone();
                }
                let mut out = img.clone();
                for c in 0..shape.channels {
                    for y in 0..shape.height {
                        for x in 0..shape.width {
                            out.set(c, y, x, img.at(c, y, shape.width - 1 - x));
                        }
                    }
                }
                out
            }
            AugOp::RandomCrop { min_scale } => {
                let s = rng.random_range(min_scale..=1.0);
                let side = s * h.min(w);
                let y0 = rng.random_range(0.0..=(h - side));
                let x0 = rng.random_range(0.0..=(w - side));
                remap(img, |y, x| {
                    (
                        y0 + (y + 0.5) * side / h - 0.5,
                        x0 + (x + 0.5) * side / w - 0.5,
                    )
                })
            }
            AugOp::Rotation { max_degrees } => {
                let a = rng.random_range(-max_degrees..=max_degrees).to_radians();
                let (sin, cos) = a.sin_cos();
                let (cy, cx) = ((h - 1.0) / 2.0, (w - 1.0) / 2.0);
                remap(img, |y, x| {
                    let (dy, dx) = (y - cy, x - cx);
                    (cy + sin * dx + cos * dy, cx + cos * dx - sin * dy)
                })
            }
            AugOp::ColorJitter {
                brightness,
                contrast,
            } => {
                let b = rng.random_range(-brightness..=brightness);
                let k = rng.random_range(1.0 - contrast..=1.0 + contrast);
                let mean = img.data().iter().sum::<f32>() / img.data().len() as f32;
                let mut out = img.clone();
                for v in out.data_mut() {
                    *v = ((*v - mean) * k + mean + b).clamp(0.0, 1.0);
                }
                out
            }
            AugOp::RandomErasing { p, max_area } => {
                if rng.random::<f32>() >= p {
                    return img.clone();
                }
                let area = rng.random_range(0.0..=max_area) * h * w;
                let aspect = rng.random_range(0.5f32..=2.0);
                let eh = ((area * aspect).sqrt().round() as usize).clamp(1, shape.height);
                let ew = ((area / aspect).sqrt().round() as usize).clamp(1, shape.width);
                let y0 = rng.random_range(0..=shape.height - eh);
                let x0 = rng.random_range(0..=shape.width - ew);
                let mean = img.data().iter().sum::<f32>() / img.data().len() as f32;
                let mut out = img.clone();
                for c in 0..shape.channels {
                    for y in y0..y0 + eh {
                        for x in x0..x0 + ew {
                            out.set(c, y, x, mean);
                        }
                    }
                }
                out
            }
        }
    }
}

fn remap(img: &Image, src: impl Fn(f32, f32) -> (f32, f32)) -> Image {
    let shape = img.shape();
    let mut out = img.clone();
    for y in 0..shape.height {
        for x in 0..shape.width {
            let (sy, sx) = src(y as f32, x as f32);
            for c in 0..shape.channels {
                out.set(c, y, x, img.sample_bilinear(c, sy, sx));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationPolicy {
    pub kind: AugmentKind,
    pub ops: Vec<AugOp>,
    pub seed: u64,
}

/// Op lists for both branches; the strong list must extend the weak one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub weak: Vec<AugOp>,
    pub strong: Vec<AugOp>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            weak: AugmentationPolicy::weak(0).ops,
            strong: AugmentationPolicy::strong(0).ops,
        }
    }
}

impl AugmentConfig {
    pub fn policies(&self, seed: u64) -> Result<(AugmentationPolicy, AugmentationPolicy)> {
        let weak = AugmentationPolicy::new(AugmentKind::Weak, self.weak.clone(), seed)?;
        let strong = AugmentationPolicy::new(AugmentKind::Strong, self.strong.clone(), seed)?;
        if !strong.ops.starts_with(&weak.ops) {
            return Err(Error::validation(
                "strong augmentation ops must start with every weak op",
            ));
        }
        Ok((weak, strong))
    }
}

impl AugmentationPolicy {
    pub fn new(kind: AugmentKind, ops: Vec<AugOp>, seed: u64) -> Result<Self> {
        for op in &ops {
            op.validate()?;
        }
        Ok(Self { kind, ops, seed })
    }

    /// Random horizontal flip.
    pub fn weak(seed: u64) -> Self {
        Self {
            kind: AugmentKind::Weak,
            ops: vec![AugOp::HorizontalFlip { p: 0.5 }],
            seed,
        }
    }

    /// The weak ops followed by crop, rotation, colour jitter and erasing.
    pub fn strong(seed: u64) -> Self {
        let mut ops = Self::weak(seed).ops;
        ops.extend([
            AugOp::RandomCrop { min_scale: 0.8 },
            AugOp::Rotation { max_degrees: 10.0 },
            AugOp::ColorJitter {
                brightness: 0.1,
                contrast: 0.1,
            },
            AugOp::RandomErasing {
                p: 0.25,
                max_area: 0.1,
            },
        ]);
        Self {
            kind: AugmentKind::Strong,
            ops,
            seed,
        }
    }

    /// Same kind, no stochastic ops: only the encoder's resize remains.
    pub fn deterministic(&self) -> Self {
        Self {
            kind: self.kind,
            ops: Vec::new(),
            seed: self.seed,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.ops.is_empty()
    }

    fn rng(&self, item_id: &str, epoch: usize) -> ChaCha8Rng {
        let key = format!("{}/{:?}/{}/{}", self.seed, self.kind, item_id, epoch);
        let digest = sha256_hex(key.as_bytes());
        let seed = u64::from_str_radix(&digest[..16], 16).expect("hex digest");
        ChaCha8Rng::seed_from_u64(seed)
    }

    pub fn apply(&self, image: &Image, item_id: &str, epoch: usize) -> Image {
        if self.ops.is_empty() {
            return image.clone();
        }
        let mut rng = self.rng(item_id, epoch);
        self.ops
            .iter()
            .fold(image.clone(), |img, op| op.apply(&img, &mut rng))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> Image {
        let data = (0..64).map(|i| (i % 8) as f32 / 7.0).collect();
        Image::new(1, 8, 8, data).unwrap()
    }

    #[test]
    fn views_are_deterministic_per_item_and_epoch() {
        let p = AugmentationPolicy::strong(3);
        let img = ramp();
        assert_eq!(p.apply(&img, "a", 1), p.apply(&img, "a", 1));
        let differs = (0..8).any(|e| p.apply(&img, "a", e) != p.apply(&img, "a", e + 1));
        assert!(differs);
    }

    #[test]
    fn deterministic_subset_is_identity() {
        let p = AugmentationPolicy::strong(3).deterministic();
        assert_eq!(p.apply(&ramp(), "x", 4), ramp());
    }

    #[test]
    fn strong_extends_weak() {
        let (w, s) = AugmentConfig::default().policies(1).unwrap();
        assert!(s.ops.starts_with(&w.ops) && s.ops.len() > w.ops.len());
        let bad = AugmentConfig {
            weak: vec![AugOp::Rotation { max_degrees: 5.0 }],
            strong: vec![AugOp::HorizontalFlip { p: 0.5 }],
        };
        assert!(bad.policies(1).is_err());
    }

    #[test]
    fn flip_mirrors_columns() {
        let p =
            AugmentationPolicy::new(AugmentKind::Weak, vec![AugOp::HorizontalFlip { p: 1.0 }], 0)
                .unwrap();
        let out = p.apply(&ramp(), "a", 0);
        assert_eq!(out.at(0, 2, 0), ramp().at(0, 2, 7));
    }

    #[test]
    fn pixels_stay_in_range() {
        let p = AugmentationPolicy::strong(9);
        for e in 0..20 {
            assert!(p
                .apply(&ramp(), "z", e)
                .data()
                .iter()
                .all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
