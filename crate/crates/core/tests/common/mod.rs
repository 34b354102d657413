#![allow(dead_code)]

use ndarray::{Array, Array4, Dimension, ShapeBuilder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use bml::data::{DatasetSplit, ImageRecord, SplitRole, Splits, SyntheticSource};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform<D: Dimension, Sh: ShapeBuilder<Dim = D>>(shape: Sh, scale: f64, rng: &mut ChaCha8Rng) -> Array<f64, D> {
    Array::from_shape_simple_fn(shape, || rng.random_range(-scale..scale))
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn numeric_grad<D: Dimension>(x: &Array<f64, D>, eps: f64, mut f: impl FnMut(&Array<f64, D>) -> f64) -> Array<f64, D> {
    let mut probe = x.clone();
    let mut out = Array::zeros(x.raw_dim());
    for (i, g) in out.iter_mut().enumerate() {
        let orig = probe.as_slice().unwrap()[i];
        probe.as_slice_mut().unwrap()[i] = orig + eps;
        let up = f(&probe);
        probe.as_slice_mut().unwrap()[i] = orig - eps;
        let down = f(&probe);
        probe.as_slice_mut().unwrap()[i] = orig;
        *g = (up - down) / (2.0 * eps);
    }
    out
}

/// `‖a - b‖ / max(‖a‖, ‖b‖)`, or the absolute gap when both are ~0.
pub fn rel_err<D: Dimension>(a: &Array<f64, D>, b: &Array<f64, D>) -> f64 {
    let diff = (a - b).mapv(|v| v * v).sum().sqrt();
    let scale = a.mapv(|v| v * v).sum().sqrt().max(b.mapv(|v| v * v).sum().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// The desk synthetic benchmark: 32 classes split 16/8/8 at 32 px.
pub fn desk_splits(per_class: usize) -> Splits {
    SyntheticSource {
        classes: 32,
        per_class,
        size: 32,
        seed: 7,
        split: Some([16, 8, 8]),
        variation: 1.0,
    }
    .build()
    .unwrap()
}

/// A split whose every image of class `c` is filled with the value `c / classes`.
pub fn constant_split(classes: usize, per_class: usize, size: usize) -> DatasetSplit {
    let mut split = DatasetSplit::empty("const", SplitRole::Novel, size);
    for c in 0..classes {
        split.classes.push(format!("c{c}"));
        split.images.push(
            (0..per_class)
                .map(|i| ImageRecord {
                    id: format!("c{c}/{i}"),
                    pixels: std::sync::Arc::new(ndarray::Array3::from_elem((size, size, 3), c as f32 / classes as f32)),
                })
                .collect(),
        );
    }
    split
}

pub fn batch_of(n: usize, size: usize, seed: u64) -> Array4<f32> {
    let mut r = rng(seed);
    Array4::from_shape_simple_fn((n, size, size, 3), || r.random_range(0.0..1.0))
}

/// Every image is i.i.d. noise, so no embedding can beat chance.
pub fn noise_split(classes: usize, per: usize, seed: u64) -> DatasetSplit {
    let mut r = rng(seed);
    let mut split = DatasetSplit::empty("noise", SplitRole::Novel, 32);
    for c in 0..classes {
        split.classes.push(format!("n{c}"));
        split.images.push(
            (0..per)
                .map(|i| {
                    let img = batch_of(1, 32, r.random()).index_axis_move(ndarray::Axis(0), 0);
                    ImageRecord {
                        id: format!("n{c}/{i}"),
                        pixels: std::sync::Arc::new(img),
                    }
                })
                .collect(),
        );
    }
    split
}
