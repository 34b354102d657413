use ndarray::{Array1, Array2, Array4, ArrayView1, ArrayView2, ArrayView4, Axis, s};

use crate::error::{BmlError, Result};
use crate::losses::{
    compute_point_prototypes, elastic_local_loss, global_pointwise_loss_grad, mutual_loss_grad, prototype_backward,
    total_loss, LossConfig, LossReport, LossWeights,
};

/// Labels of one training batch. Images are ordered support first, then
/// query; `global` covers all of them.
#[derive(Debug, Clone, Copy)]
pub struct BatchLabels<'a> {
    pub global: &'a [usize],
    pub support: &'a [usize],
    pub query: &'a [usize],
}

/// Inputs of the assembled objective, in double precision.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveInputs<'a> {
    pub global_map: Option<ArrayView4<'a, f64>>,
    pub local_map: Option<ArrayView4<'a, f64>>,
    pub classifier_weight: ArrayView2<'a, f64>,
    pub classifier_bias: ArrayView1<'a, f64>,
}

#[derive(Debug, Clone)]
pub struct ObjectiveOutput {
    pub report: LossReport,
    pub grad_global_map: Option<Array4<f64>>,
    pub grad_local_map: Option<Array4<f64>>,
    pub grad_classifier_weight: Option<Array2<f64>>,
    pub grad_classifier_bias: Option<Array1<f64>>,
}

/// Matrix products of degenerate shapes can come back column-major.
fn to_4d(a: Array2<f64>, shape: (usize, usize, usize, usize)) -> Array4<f64> {
    a.as_standard_layout().into_owned().into_shape_with_order(shape).expect("element count")
}

/// `α·global + β·local + γ·mutual` for one batch, with gradients with
/// respect to both maps and the classifier. Terms whose view is absent
/// contribute 0; `cfg.elastic` must already carry the current epoch.
pub fn batch_objective(
    inputs: ObjectiveInputs,
    labels: BatchLabels,
    cfg: &LossConfig,
    weights: LossWeights,
) -> Result<ObjectiveOutput> {
    let batch = labels.support.len() + labels.query.len();
    for map in [inputs.global_map, inputs.local_map].into_iter().flatten() {
        if map.dim().0 != batch || labels.global.len() != batch {
            return Err(BmlError::shape(format!(
                "batch of {} maps, {} global labels, {} support + {} query labels",
                map.dim().0,
                labels.global.len(),
                labels.support.len(),
                labels.query.len()
            )));
        }
    }
    let mut out = ObjectiveOutput {
        report: LossReport::default(),
        grad_global_map: None,
        grad_local_map: None,
        grad_classifier_weight: None,
        grad_classifier_bias: None,
    };
    let (mut global, mut local, mut mutual) = (0.0, 0.0, 0.0);

    if let Some(map) = inputs.global_map {
        let (n, h, w, m) = map.dim();
        let (wt, bias) = (inputs.classifier_weight, inputs.classifier_bias);
        if wt.ncols() != m || wt.nrows() != bias.len() {
            return Err(BmlError::shape("classifier does not match the global map"));
        }
        let points = map.as_standard_layout().into_owned().into_shape_with_order((n * h * w, m)).expect("points");
        let c = wt.nrows();
        let scores = to_4d(points.dot(&wt.t()) + bias, (n, h, w, c));
        let g = global_pointwise_loss_grad(scores.view(), labels.global)?;
        global = g.value;
        let gs = g.grad.into_shape_with_order((n * h * w, c)).expect("grad") * weights.alpha;
        out.grad_global_map = Some(to_4d(gs.dot(&wt), (n, h, w, m)));
        out.grad_classifier_weight = Some(gs.t().dot(&points));
        out.grad_classifier_bias = Some(gs.sum_axis(Axis(0)));
    }

    if let Some(map) = inputs.local_map {
        let (n, h, w, m) = map.dim();
        let ns = labels.support.len();
        let support = map.slice(s![..ns, .., .., ..]);
        let query = map.slice(s![ns.., .., .., ..]);
        let protos = compute_point_prototypes(support, labels.support)?;
        let el = elastic_local_loss(query, protos.view(), labels.query, &cfg.elastic, &cfg.metric)?;
        local = el.value;
        out.report.mean_delta = el.mean_delta;
        out.report.mean_d_el = el.mean_d_el;
        let n_way = protos.dim().0;
        let gp = el.grad_prototypes.into_shape_with_order((n_way, h * w * m)).expect("proto grad");
        let gsup = prototype_backward(gp.view(), labels.support)?;
        let mut grad = Array4::zeros((n, h, w, m));
        grad.slice_mut(s![..ns, .., .., ..])
            .assign(&to_4d(gsup, (ns, h, w, m)));
        grad.slice_mut(s![ns.., .., .., ..]).assign(&el.grad_query);
        grad *= weights.beta;
        out.grad_local_map = Some(grad);
    }

    if let (Some(g), Some(l)) = (inputs.global_map, inputs.local_map) {
        let mg = mutual_loss_grad(g, l, cfg.mutual_temperature)?;
        mutual = mg.value;
        if weights.gamma != 0.0 {
            if let Some(acc) = out.grad_global_map.as_mut() {
                acc.scaled_add(weights.gamma, &mg.grad_global);
            }
            if let Some(acc) = out.grad_local_map.as_mut() {
                acc.scaled_add(weights.gamma, &mg.grad_local);
            }
        }
    }

    let (mean_delta, mean_d_el) = (out.report.mean_delta, out.report.mean_d_el);
    let (_, report) = total_loss(global, local, mutual, &weights)?;
    out.report = LossReport { mean_delta, mean_d_el, ..report };
    Ok(out)
}
