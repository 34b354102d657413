use std::path::Path;

use ndarray::Array3;

use crate::error::{BmlError, Result};

/// An RGB image as `[height, width, 3]` with values in `[0, 1]`.
pub type Image = Array3<f32>;

/// Decodes an 8-bit image file to RGB in `[0, 1]`, resizing bilinearly to
/// `size`×`size` when the file has a different resolution.
pub fn decode_image(path: &Path, size: usize) -> Result<Image> {
    let rgb = image::open(path)
        .map_err(|source| BmlError::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let raw = rgb.into_raw();
    let img = Array3::from_shape_fn((h, w, 3), |(y, x, c)| raw[(y * w + x) * 3 + c] as f32 / 255.0);
    if h == size && w == size {
        Ok(img)
    } else {
        Ok(bilinear_resize(&img, size, size))
    }
}

/// Bilinear resampling with half-pixel centers (no antialiasing).
pub fn bilinear_resize(img: &Image, out_h: usize, out_w: usize) -> Image {
    let (in_h, in_w, channels) = img.dim();
    if in_h == out_h && in_w == out_w {
        return img.clone();
    }
    let sy = in_h as f32 / out_h as f32;
    let sx = in_w as f32 / out_w as f32;
    let coord = |o: usize, scale: f32, len: usize| -> (usize, usize, f32) {
        let src = ((o as f32 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(len - 1);
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, src - i0 as f32)
    };
    let mut out = Array3::zeros((out_h, out_w, channels));
    for oy in 0..out_h {
        let (y0, y1, fy) = coord(oy, sy, in_h);
        for ox in 0..out_w {
            let (x0, x1, fx) = coord(ox, sx, in_w);
            for c in 0..channels {
                let top = img[[y0, x0, c]] * (1.0 - fx) + img[[y0, x1, c]] * fx;
                let bottom = img[[y1, x0, c]] * (1.0 - fx) + img[[y1, x1, c]] * fx;
                out[[oy, ox, c]] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}
