use std::fmt;
use std::str::FromStr;

use ndarray::Array3;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::{bilinear_resize, Image};
use crate::error::{BmlError, Result};

/// A test-time corruption. Degradations never change labels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Degradation {
    /// Bilinear resize to `size`×`size`.
    Resize { size: usize },
    /// Separable Gaussian blur; σ is drawn per image from `[sigma_min, sigma_max]`.
    GaussianBlur { sigma_min: f32, sigma_max: f32 },
    /// Sets `round(ratio·h·w)` pixel positions to black or white with equal odds.
    PepperNoise { ratio: f32 },
    /// Scales brightness by a factor drawn from `[max(0, 1-B), 1+B]`.
    ColorJitter { brightness: f32 },
}

/// The corruption settings of the stability benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DegradationPreset {
    Resize,
    Blur,
    Pepper,
    Jitter,
}

impl DegradationPreset {
    /// The preset for a model trained at `input_size` pixels. Resize scales the
    /// input by 224/84, mirroring the 84 → 224 experiment.
    pub fn degradation(self, input_size: usize) -> Degradation {
        match self {
            DegradationPreset::Resize => Degradation::Resize {
                size: ((input_size as f64) * 224.0 / 84.0).round() as usize,
            },
            DegradationPreset::Blur => Degradation::GaussianBlur { sigma_min: 0.1, sigma_max: 2.0 },
            DegradationPreset::Pepper => Degradation::PepperNoise { ratio: 0.01 },
            DegradationPreset::Jitter => Degradation::ColorJitter { brightness: 0.8 },
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DegradationPreset::Resize => "resize",
            DegradationPreset::Blur => "blur",
            DegradationPreset::Pepper => "pepper",
            DegradationPreset::Jitter => "jitter",
        }
    }
}

impl fmt::Display for DegradationPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DegradationPreset {
    type Err = BmlError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resize" => Ok(Self::Resize),
            "blur" => Ok(Self::Blur),
            "pepper" => Ok(Self::Pepper),
            "jitter" => Ok(Self::Jitter),
            _ => Err(BmlError::invalid(format!("unknown degradation `{s}` (resize|blur|pepper|jitter)"))),
        }
    }
}

impl Degradation {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Degradation::Resize { size } => size >= 1,
            Degradation::GaussianBlur { sigma_min, sigma_max } => {
                sigma_min >= 0.0 && sigma_max >= sigma_min && sigma_max.is_finite()
            }
            Degradation::PepperNoise { ratio } => (0.0..=1.0).contains(&ratio),
            Degradation::ColorJitter { brightness } => brightness >= 0.0 && brightness.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(BmlError::invalid(format!("invalid degradation parameters: {self:?}")))
        }
    }
}

fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i32;
    let mut k: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable blur with edge clamping.
fn blur(img: &Image, sigma: f32) -> Image {
    if sigma <= 0.0 {
        return img.clone();
    }
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as isize;
    let (h, w, c) = img.dim();
    let clamp = |v: isize, len: usize| v.clamp(0, len as isize - 1) as usize;
    let mut tmp = Array3::<f32>::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                tmp[[y, x, ch]] = kernel
                    .iter()
                    .enumerate()
                    .map(|(i, &k)| k * img[[y, clamp(x as isize + i as isize - r, w), ch]])
                    .sum::<f32>();
            }
        }
    }
    let mut out = Array3::<f32>::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out[[y, x, ch]] = kernel
                    .iter()
                    .enumerate()
                    .map(|(i, &k)| k * tmp[[clamp(y as isize + i as isize - r, h), x, ch]])
                    .sum::<f32>();
            }
        }
    }
    out
}

/// Applies one degradation. Pure in `(image, d, rng_seed)`; outputs are
/// clamped to `[0, 1]`.
pub fn apply_degradation(image: &Image, d: &Degradation, rng_seed: u64) -> Result<Image> {
    d.validate()?;
    if image.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(BmlError::invalid("degradation input must lie in [0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut out = match *d {
        Degradation::Resize { size } => bilinear_resize(image, size, size),
        Degradation::GaussianBlur { sigma_min, sigma_max } => {
            let sigma = if sigma_max > sigma_min {
                rng.random_range(sigma_min..=sigma_max)
            } else {
                sigma_min
            };
            blur(image, sigma)
        }
        Degradation::PepperNoise { ratio } => {
            let (h, w, c) = image.dim();
            let count = ((ratio as f64) * (h * w) as f64).round() as usize;
            let mut out = image.clone();
            for pos in index::sample(&mut rng, h * w, count.min(h * w)) {
                let value = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
                for ch in 0..c {
                    out[[pos / w, pos % w, ch]] = value;
                }
            }
            out
        }
        Degradation::ColorJitter { brightness } => {
            if brightness == 0.0 {
                return Ok(image.clone());
            }
            let factor = rng.random_range((1.0 - brightness).max(0.0)..=1.0 + brightness);
            image.mapv(|v| v * factor)
        }
    };
    out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Ok(out)
}

/// Applies a chain of degradations, deriving one seed per stage.
pub fn apply_degradations(image: &Image, chain: &[Degradation], rng_seed: u64) -> Result<Image> {
    let mut current = image.clone();
    for (i, d) in chain.iter().enumerate() {
        current = apply_degradation(&current, d, crate::rng::derive_seed(rng_seed, &[i as u64]))?;
    }
    Ok(current)
}
