use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::image::Image;

/// Train-time augmentation: random horizontal flip and random crop from a
/// zero-padded image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub flip: bool,
    pub crop_padding: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            flip: true,
            crop_padding: 4,
        }
    }
}

pub fn augment(image: &Image, cfg: &AugmentConfig, rng: &mut impl Rng) -> Image {
    if !cfg.enabled {
        return image.clone();
    }
    let (h, w, c) = image.dim();
    let flip = cfg.flip && rng.random_bool(0.5);
    let pad = cfg.crop_padding as i64;
    let (dy, dx) = if pad > 0 {
        (rng.random_range(-pad..=pad), rng.random_range(-pad..=pad))
    } else {
        (0, 0)
    };
    Array3::from_shape_fn((h, w, c), |(y, x, ch)| {
        let sy = y as i64 + dy;
        let sx = x as i64 + dx;
        if sy < 0 || sx < 0 || sy >= h as i64 || sx >= w as i64 {
            return 0.0;
        }
        let sx = if flip { w - 1 - sx as usize } else { sx as usize };
        image[[sy as usize, sx, ch]]
    })
}
