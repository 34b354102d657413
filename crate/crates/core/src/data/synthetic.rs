//! Procedural few-shot datasets.
//!
//! Every class is a family of images: an oriented sinusoidal grating in a
//! class-specific foreground color, windowed by a soft circular or square
//! mask, over a class-specific background. Images of one class perturb the
//! family parameters (orientation, frequency, phase, window, colors) and add
//! pixel noise, so classes are separable but not trivially so.

use std::f32::consts::PI;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::Array3;
use rand::Rng;
use rand_distr::StandardNormal;

use super::image::Image;
use super::split::{DatasetSplit, ImageRecord, SplitRole, Splits};
use crate::error::{BmlError, Result};
use crate::rng::{rng_from, stream};

#[derive(Debug, Clone, Copy)]
struct ClassFamily {
    fg: [f32; 3],
    bg: [f32; 3],
    theta: f32,
    freq: f32,
    center: [f32; 2],
    radius: f32,
    square: bool,
}

impl ClassFamily {
    fn draw(rng: &mut impl Rng) -> Self {
        let mut color = || [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)];
        let fg = color();
        let bg = color();
        Self {
            fg,
            bg,
            theta: rng.random_range(0.0..PI),
            freq: rng.random_range(1.5..5.0),
            center: [rng.random_range(0.3..0.7), rng.random_range(0.3..0.7)],
            radius: rng.random_range(0.2..0.45),
            square: rng.random_bool(0.5),
        }
    }

    fn render(&self, size: usize, variation: f32, rng: &mut impl Rng) -> Image {
        let mut normal = |scale: f32| -> f32 { rng.sample::<f32, _>(StandardNormal) * scale * variation };
        let theta = self.theta + normal(0.2);
        let freq = self.freq * normal(0.12).exp();
        let cx = self.center[0] + normal(0.08);
        let cy = self.center[1] + normal(0.08);
        let radius = self.radius * normal(0.1).exp();
        let fg: Vec<f32> = self.fg.iter().map(|&c| c + normal(0.1)).collect();
        let bg: Vec<f32> = self.bg.iter().map(|&c| c + normal(0.1)).collect();
        let phase = rng.random_range(0.0..2.0 * PI);
        let (sin_t, cos_t) = theta.sin_cos();
        let softness = 1.5 / size as f32;

        let mut img = Array3::zeros((size, size, 3));
        for y in 0..size {
            let v = (y as f32 + 0.5) / size as f32;
            for x in 0..size {
                let u = (x as f32 + 0.5) / size as f32;
                let grating = 0.5 + 0.5 * (2.0 * PI * freq * (u * cos_t + v * sin_t) + phase).sin();
                let dist = if self.square {
                    (u - cx).abs().max((v - cy).abs())
                } else {
                    ((u - cx).powi(2) + (v - cy).powi(2)).sqrt()
                };
                let window = 1.0 / (1.0 + (-(radius - dist) / softness).exp());
                let mix = grating * window;
                for c in 0..3 {
                    let noise = rng.sample::<f32, _>(StandardNormal) * 0.04 * variation;
                    img[[y, x, c]] = (bg[c] + (fg[c] - bg[c]) * mix + noise).clamp(0.0, 1.0);
                }
            }
        }
        img
    }
}

fn generate(num_classes: usize, per_class: usize, size: usize, seed: u64, variation: f32) -> Result<DatasetSplit> {
    if num_classes < 2 {
        return Err(BmlError::invalid(format!("synthetic dataset needs at least 2 classes, got {num_classes}")));
    }
    if per_class == 0 || size == 0 {
        return Err(BmlError::invalid("synthetic dataset needs positive images per class and image size"));
    }
    if !(variation >= 0.0 && variation.is_finite()) {
        return Err(BmlError::invalid("synthetic variation must be finite and non-negative"));
    }
    let mut split = DatasetSplit::empty("synthetic", SplitRole::Base, size);
    for class in 0..num_classes {
        let family = ClassFamily::draw(&mut rng_from(seed, &[stream::SYNTHETIC, class as u64]));
        let name = format!("syn_{class:03}");
        let records = (0..per_class)
            .map(|i| {
                let mut rng = rng_from(seed, &[stream::SYNTHETIC, class as u64, 1 + i as u64]);
                ImageRecord {
                    id: format!("{name}/{i:04}"),
                    pixels: Arc::new(family.render(size, variation, &mut rng)),
                }
            })
            .collect();
        split.classes.push(name);
        split.images.push(records);
    }
    Ok(split)
}

/// Generates `num_classes` procedural classes of `images_per_class` images
/// each. Identical arguments reproduce identical pixels.
pub fn generate_synthetic(num_classes: usize, images_per_class: usize, image_size: usize, seed: u64) -> Result<DatasetSplit> {
    generate(num_classes, images_per_class, image_size, seed, 1.0)
}

/// A synthetic dataset addressed as
/// `synthetic://classes=32,per=40,size=32,seed=7[,split=16/8/8][,var=1.0]`.
///
/// Without `split`, a quarter of the classes (rounded down) go to each of val
/// and novel and the rest to base, in generation order.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSource {
    pub classes: usize,
    pub per_class: usize,
    pub size: usize,
    pub seed: u64,
    pub split: Option<[usize; 3]>,
    pub variation: f32,
}

impl Default for SyntheticSource {
    fn default() -> Self {
        Self {
            classes: 8,
            per_class: 50,
            size: 32,
            seed: 7,
            split: None,
            variation: 1.0,
        }
    }
}

impl SyntheticSource {
    pub fn split_sizes(&self) -> [usize; 3] {
        self.split.unwrap_or_else(|| {
            let quarter = self.classes / 4;
            [self.classes - 2 * quarter, quarter, quarter]
        })
    }

    pub fn generate(&self) -> Result<DatasetSplit> {
        generate(self.classes, self.per_class, self.size, self.seed, self.variation)
    }

    /// Generates the classes and partitions them into base/val/novel.
    pub fn build(&self) -> Result<Splits> {
        let sizes = self.split_sizes();
        if sizes.iter().sum::<usize>() != self.classes {
            return Err(BmlError::Config(format!(
                "synthetic split {}/{}/{} does not add up to {} classes",
                sizes[0], sizes[1], sizes[2], self.classes
            )));
        }
        let all = self.generate()?;
        let mut classes = all.classes.into_iter();
        let mut images = all.images.into_iter();
        let mut part = |role: SplitRole, n: usize| DatasetSplit {
            name: format!("synthetic-{role}"),
            role,
            classes: classes.by_ref().take(n).collect(),
            images: images.by_ref().take(n).collect(),
            image_size: self.size,
        };
        Ok(Splits {
            base: part(SplitRole::Base, sizes[0]),
            val: part(SplitRole::Val, sizes[1]),
            novel: part(SplitRole::Novel, sizes[2]),
        })
    }
}

impl FromStr for SyntheticSource {
    type Err = BmlError;

    fn from_str(s: &str) -> Result<Self> {
        let body = s
            .strip_prefix("synthetic://")
            .ok_or_else(|| BmlError::Config(format!("`{s}` is not a synthetic:// source")))?;
        let mut out = SyntheticSource::default();
        let bad = |key: &str, val: &str| BmlError::Config(format!("bad synthetic parameter {key}={val}"));
        for pair in body.split(',').filter(|p| !p.trim().is_empty()) {
            let (key, val) = pair
                .split_once('=')
                .ok_or_else(|| BmlError::Config(format!("expected key=value in `{pair}`")))?;
            let (key, val) = (key.trim(), val.trim());
            match key {
                "classes" => out.classes = val.parse().map_err(|_| bad(key, val))?,
                "per" => out.per_class = val.parse().map_err(|_| bad(key, val))?,
                "size" => out.size = val.parse().map_err(|_| bad(key, val))?,
                "seed" => out.seed = val.parse().map_err(|_| bad(key, val))?,
                "var" => out.variation = val.parse().map_err(|_| bad(key, val))?,
                "split" => {
                    let parts: Vec<usize> = val
                        .split('/')
                        .map(|p| p.parse().map_err(|_| bad(key, val)))
                        .collect::<Result<_>>()?;
                    let arr: [usize; 3] = parts.try_into().map_err(|_| bad(key, val))?;
                    out.split = Some(arr);
                }
                _ => return Err(BmlError::Config(format!("unknown synthetic parameter `{key}`"))),
            }
        }
        Ok(out)
    }
}
