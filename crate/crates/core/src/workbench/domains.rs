//! Synthetic source and target domains.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{RngStream, Tensor};

pub const SPRITE_SIZE: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DomainKind {
    /// Isotropic Gaussian blobs evenly spaced on a circle.
    RingOfGaussians {
        components: usize,
        radius: f64,
        std: f64,
        /// Angular offset of the first component, radians.
        #[serde(default)]
        rotation: f64,
    },
    TwoMoons {
        noise: f64,
        #[serde(default)]
        rotation: f64,
    },
    /// 16x16 soft circles, optionally crossed by a horizontal bar.
    Sprites {
        radius_min: f64,
        radius_max: f64,
        brightness_min: f64,
        brightness_max: f64,
        /// Maximum center offset from the image middle, pixels.
        jitter: f64,
        #[serde(default)]
        bar: Option<Bar>,
    },
}

/// Rows `[row, row + height)` overwritten with `intensity`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bar {
    pub row: usize,
    pub height: usize,
    pub intensity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSpec")]
pub struct DomainSpec {
    #[serde(flatten)]
    pub kind: DomainKind,
    pub seed: u64,
}

/// Flattened tables cannot reject unknown keys directly, so the kind's
/// fields are collected and checked by a second pass.
#[derive(Deserialize)]
struct RawSpec {
    seed: u64,
    #[serde(flatten)]
    rest: serde_json::Map<String, serde_json::Value>,
}

impl TryFrom<RawSpec> for DomainSpec {
    type Error = String;

    fn try_from(raw: RawSpec) -> Result<Self, String> {
        let kind = serde_json::from_value(serde_json::Value::Object(raw.rest))
            .map_err(|e| e.to_string())?;
        Ok(Self { kind, seed: raw.seed })
    }
}

impl DomainSpec {
    pub fn ring(components: usize, seed: u64) -> Self {
        Self {
            kind: DomainKind::RingOfGaussians {
                components,
                radius: 2.0,
                std: 0.1,
                rotation: 0.0,
            },
            seed,
        }
    }

    pub fn sprites(seed: u64) -> Self {
        Self {
            kind: DomainKind::Sprites {
                radius_min: 3.0,
                radius_max: 6.0,
                brightness_min: 0.6,
                brightness_max: 1.0,
                jitter: 2.0,
                bar: None,
            },
            seed,
        }
    }

    /// The sprite source with a bar across rows 6 and 7.
    pub fn sprites_with_bar(seed: u64) -> Self {
        let mut spec = Self::sprites(seed);
        if let DomainKind::Sprites { bar, .. } = &mut spec.kind {
            *bar = Some(Bar {
                row: 6,
                height: 2,
                intensity: 1.0,
            });
        }
        spec
    }

    /// Shape of one sample.
    pub fn sample_shape(&self) -> Vec<usize> {
        match self.kind {
            DomainKind::Sprites { .. } => vec![SPRITE_SIZE, SPRITE_SIZE],
            _ => vec![2],
        }
    }

    pub fn is_image(&self) -> bool {
        matches!(self.kind, DomainKind::Sprites { .. })
    }

    /// Root stream for this spec; sample `i` uses `stream().child(i)`.
    pub fn stream(&self) -> RngStream {
        RngStream::new(self.seed, "domain")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(m.to_string()));
        match &self.kind {
            DomainKind::RingOfGaussians {
                components,
                radius,
                std,
                rotation,
            } => {
                if *components == 0 {
                    return bad("ring needs at least one component");
                }
                if !(radius.is_finite() && std.is_finite() && *std >= 0.0 && rotation.is_finite()) {
                    return bad("ring parameters must be finite with std >= 0");
                }
            }
            DomainKind::TwoMoons { noise, rotation } => {
                if !(noise.is_finite() && *noise >= 0.0 && rotation.is_finite()) {
                    return bad("moons noise must be finite and >= 0");
                }
            }
            DomainKind::Sprites {
                radius_min,
                radius_max,
                brightness_min,
                brightness_max,
                jitter,
                bar,
            } => {
                if !(0.0 < *radius_min && radius_min <= radius_max) {
                    return bad("sprite radii must satisfy 0 < min <= max");
                }
                if !(0.0 <= *brightness_min
                    && brightness_min <= brightness_max
                    && *brightness_max <= 1.0)
                {
                    return bad("sprite brightness must lie in [0, 1] with min <= max");
                }
                if !(jitter.is_finite() && *jitter >= 0.0) {
                    return bad("sprite jitter must be >= 0");
                }
                if let Some(b) = bar {
                    if b.height == 0 || b.row + b.height > SPRITE_SIZE {
                        return bad("bar rows fall outside the image");
                    }
                    if !(0.0..=1.0).contains(&b.intensity) {
                        return bad("bar intensity must lie in [0, 1]");
                    }
                }
            }
        }
        Ok(())
    }
}

fn rotate(x: f64, y: f64, angle: f64) -> (f64, f64) {
    let (s, c) = angle.sin_cos();
    (c * x - s * y, s * x + c * y)
}

/// One sample drawn from `stream` (already keyed to the sample index).
pub fn sample_one(spec: &DomainSpec, stream: &mut RngStream) -> Result<Tensor> {
    match &spec.kind {
        DomainKind::RingOfGaussians {
            components,
            radius,
            std,
            rotation,
        } => {
            let k = stream.uniform_int(0, components - 1);
            let angle = rotation + 2.0 * PI * k as f64 / *components as f64;
            let (nx, ny) = stream.normal_pair();
            Tensor::from_vec(vec![
                radius * angle.cos() + std * nx,
                radius * angle.sin() + std * ny,
            ])
        }
        DomainKind::TwoMoons { noise, rotation } => {
            let upper = stream.uniform() < 0.5;
            let a = PI * stream.uniform();
            let (x, y) = if upper {
                (a.cos(), a.sin())
            } else {
                (1.0 - a.cos(), 0.5 - a.sin())
            };
            let (nx, ny) = stream.normal_pair();
            let (x, y) = rotate(x - 0.5 + noise * nx, y - 0.25 + noise * ny, *rotation);
            Tensor::from_vec(vec![x, y])
        }
        DomainKind::Sprites {
            radius_min,
            radius_max,
            brightness_min,
            brightness_max,
            jitter,
            bar,
        } => {
            let r = stream.uniform_range(*radius_min, *radius_max);
            let b = stream.uniform_range(*brightness_min, *brightness_max);
            let mid = (SPRITE_SIZE as f64 - 1.0) / 2.0;
            let cx = mid + stream.uniform_range(-jitter, *jitter);
            let cy = mid + stream.uniform_range(-jitter, *jitter);
            let mut px = vec![0.0; SPRITE_SIZE * SPRITE_SIZE];
            for i in 0..SPRITE_SIZE {
                for j in 0..SPRITE_SIZE {
                    let d = ((i as f64 - cy).powi(2) + (j as f64 - cx).powi(2)).sqrt();
                    // one-pixel soft edge
                    px[i * SPRITE_SIZE + j] = b * (r + 0.5 - d).clamp(0.0, 1.0);
                }
            }
            if let Some(bar) = bar {
                for i in bar.row..bar.row + bar.height {
                    px[i * SPRITE_SIZE..(i + 1) * SPRITE_SIZE].fill(bar.intensity);
                }
            }
            Tensor::new([SPRITE_SIZE, SPRITE_SIZE], px)
        }
    }
}

/// Deterministic dataset: sample `i` is drawn from `stream.child(i)`.
pub fn synth_domain(spec: &DomainSpec, count: usize, stream: &RngStream) -> Result<Vec<Tensor>> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::invalid("domain sample count must be at least 1"));
    }
    (0..count)
        .map(|i| sample_one(spec, &mut stream.child(i)))
        .collect()
}

/// Pixel values in `[0, 1]` to the model's `[-1, 1]` range. Points pass through.
pub fn to_model(spec: &DomainSpec, x: &Tensor) -> Tensor {
    if spec.is_image() {
        x.map(|v| 2.0 * v - 1.0)
    } else {
        x.clone()
    }
}

pub fn from_model(spec: &DomainSpec, x: &Tensor) -> Tensor {
    if spec.is_image() {
        x.map(|v| 0.5 * (v + 1.0))
    } else {
        x.clone()
    }
}
