use ndarray::{Array2, Array4, ArrayView1, ArrayView2, ArrayView4, Axis};

use crate::error::{BmlError, Result};

/// The global view's 1×1 convolution: `weight` is `[classes, m]`.
#[derive(Debug, Clone, Copy)]
pub struct GlobalClassifier<'a> {
    pub weight: ArrayView2<'a, f32>,
    pub bias: ArrayView1<'a, f32>,
}

impl<'a> GlobalClassifier<'a> {
    pub fn new(weight: ArrayView2<'a, f32>, bias: ArrayView1<'a, f32>) -> Result<Self> {
        if weight.nrows() != bias.len() {
            return Err(BmlError::shape(format!(
                "classifier has {} weight rows but {} biases",
                weight.nrows(),
                bias.len()
            )));
        }
        Ok(Self { weight, bias })
    }

    pub(crate) fn from_slices(weight: &'a [f32], bias: &'a [f32], classes: usize, m: usize) -> Self {
        Self {
            weight: ArrayView2::from_shape((classes, m), weight).expect("classifier weight shape"),
            bias: ArrayView1::from(bias),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.weight.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.weight.ncols()
    }
}

fn as_points(map: &ArrayView4<f32>) -> Array2<f32> {
    let (n, h, w, m) = map.dim();
    map.as_standard_layout().into_owned().into_shape_with_order((n * h * w, m)).expect("point matrix")
}

/// Pre-softmax class scores `[batch, h, w, classes]` for every spatial point.
pub fn classify_pointwise(global_map: ArrayView4<f32>, classifier: &GlobalClassifier) -> Result<Array4<f32>> {
    let (n, h, w, m) = global_map.dim();
    if m != classifier.feature_dim() {
        return Err(BmlError::shape(format!(
            "feature maps have {m} channels, classifier expects {}",
            classifier.feature_dim()
        )));
    }
    let mut scores = as_points(&global_map).dot(&classifier.weight.t());
    scores += &classifier.bias;
    // Degenerate products (one point or one channel) can come back column-major.
    let scores = scores.as_standard_layout().into_owned();
    Ok(scores.into_shape_with_order((n, h, w, classifier.num_classes())).expect("score shape"))
}

/// Gradients of [`classify_pointwise`]: returns `(d map, d weight, d bias)`.
pub fn classify_pointwise_backward(
    global_map: ArrayView4<f32>,
    classifier: &GlobalClassifier,
    grad_scores: ArrayView4<f32>,
) -> Result<(Array4<f32>, Array2<f32>, ndarray::Array1<f32>)> {
    let (n, h, w, m) = global_map.dim();
    let c = classifier.num_classes();
    if grad_scores.dim() != (n, h, w, c) {
        return Err(BmlError::shape("score gradient does not match the map"));
    }
    let points = as_points(&global_map);
    let g = grad_scores.as_standard_layout().into_owned().into_shape_with_order((n * h * w, c)).expect("grad");
    let grad_map = g.dot(&classifier.weight).as_standard_layout().into_owned();
    let grad_map = grad_map.into_shape_with_order((n, h, w, m)).expect("map grad");
    let grad_weight = g.t().dot(&points);
    let grad_bias = g.sum_axis(Axis(0));
    Ok((grad_map, grad_weight, grad_bias))
}

/// Flattens `[batch, h, w, m]` maps to `[batch, h·w·m]` in row-major
/// `(p, q, channel)` order, channel fastest.
pub fn flatten_features<A: Clone>(map: ArrayView4<A>) -> Array2<A> {
    let (n, h, w, m) = map.dim();
    map.as_standard_layout().into_owned().into_shape_with_order((n, h * w * m)).expect("flatten")
}
