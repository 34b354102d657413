use ndarray::{Array2, Array4, ArrayView2, ArrayView4};
use serde::{Deserialize, Serialize};

use super::log_softmax_into;
use crate::error::{BmlError, Result};

/// How query-to-prototype logits are formed: `-dist / temperature`, where
/// `dist` is the squared or plain Euclidean distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    pub squared: bool,
    pub temperature: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            squared: true,
            temperature: 1.0,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(BmlError::Config(format!("metric temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }

    pub fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        if self.squared {
            sq
        } else {
            sq.sqrt()
        }
    }

    pub fn logit(&self, a: &[f64], b: &[f64]) -> f64 {
        -self.distance(a, b) / self.temperature
    }

    /// Adds `upstream · d logit(a, b) / d a` to `grad_a` and the opposite to `grad_b`.
    pub(crate) fn backprop_logit(&self, a: &[f64], b: &[f64], upstream: f64, grad_a: &mut [f64], grad_b: &mut [f64]) {
        let scale = if self.squared {
            -2.0 / self.temperature
        } else {
            let d = self.distance(a, b);
            if d == 0.0 {
                return;
            }
            -1.0 / (self.temperature * d)
        };
        for k in 0..a.len() {
            let g = upstream * scale * (a[k] - b[k]);
            grad_a[k] += g;
            grad_b[k] -= g;
        }
    }
}

/// Infers N from the labels and checks every class in `[0, N)` has the same
/// non-zero number of rows.
pub(crate) fn class_counts(labels: &[usize]) -> Result<(usize, usize)> {
    let n_way = labels.iter().max().map_or(0, |&m| m + 1);
    let mut counts = vec![0usize; n_way];
    labels.iter().for_each(|&l| counts[l] += 1);
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(BmlError::invalid(format!("class {empty} has no support rows")));
    }
    if n_way == 0 {
        return Err(BmlError::invalid("no support rows"));
    }
    if counts.iter().any(|&c| c != counts[0]) {
        return Err(BmlError::invalid(format!("unequal shots per class: {counts:?}")));
    }
    Ok((n_way, counts[0]))
}

/// Per-class mean of the support rows: `[N·K, D] -> [N, D]`.
pub fn compute_prototypes(support_flat: ArrayView2<f64>, support_labels: &[usize]) -> Result<Array2<f64>> {
    if support_flat.nrows() != support_labels.len() {
        return Err(BmlError::shape(format!(
            "{} support rows but {} labels",
            support_flat.nrows(),
            support_labels.len()
        )));
    }
    let (n_way, shots) = class_counts(support_labels)?;
    let mut protos = Array2::zeros((n_way, support_flat.ncols()));
    for (row, &label) in support_flat.rows().into_iter().zip(support_labels) {
        let mut p = protos.row_mut(label);
        p += &row;
    }
    protos /= shots as f64;
    Ok(protos)
}

/// Prototypes computed independently at every spatial point:
/// `[N·K, h, w, m] -> [N, h, w, m]`.
pub fn compute_point_prototypes(support_maps: ArrayView4<f64>, support_labels: &[usize]) -> Result<Array4<f64>> {
    let (nk, h, w, m) = support_maps.dim();
    let flat = support_maps.as_standard_layout().into_owned().into_shape_with_order((nk, h * w * m)).expect("flat");
    let protos = compute_prototypes(flat.view(), support_labels)?;
    let n = protos.nrows();
    Ok(protos.into_shape_with_order((n, h, w, m)).expect("proto maps"))
}

/// Routes prototype gradients back to the support rows (each row receives
/// its class gradient divided by K).
pub fn prototype_backward(grad_protos: ArrayView2<f64>, support_labels: &[usize]) -> Result<Array2<f64>> {
    let (n_way, shots) = class_counts(support_labels)?;
    if grad_protos.nrows() != n_way {
        return Err(BmlError::shape("prototype gradient rows differ from class count"));
    }
    let mut out = Array2::zeros((support_labels.len(), grad_protos.ncols()));
    for (mut row, &label) in out.rows_mut().into_iter().zip(support_labels) {
        row.assign(&grad_protos.row(label));
        row /= shots as f64;
    }
    Ok(out)
}

/// Prototype matching loss on flattened embeddings: the mean over queries of
/// `-log softmax_j(-dist(query, C_j))` at the true class.
pub fn local_proto_loss(
    query_flat: ArrayView2<f64>,
    prototypes: ArrayView2<f64>,
    local_labels: &[usize],
    metric: &MetricConfig,
) -> Result<f64> {
    local_proto_loss_grad(query_flat, prototypes, local_labels, metric).map(|g| g.value)
}

/// Gradients of [`local_proto_loss`] with respect to queries and prototypes.
pub struct ProtoLossGrad {
    pub value: f64,
    pub grad_query: Array2<f64>,
    pub grad_prototypes: Array2<f64>,
}

pub fn local_proto_loss_grad(
    query_flat: ArrayView2<f64>,
    prototypes: ArrayView2<f64>,
    local_labels: &[usize],
    metric: &MetricConfig,
) -> Result<ProtoLossGrad> {
    metric.validate()?;
    let (nq, d) = query_flat.dim();
    let n_way = prototypes.nrows();
    if n_way < 2 {
        return Err(BmlError::invalid("prototype matching needs at least 2 classes"));
    }
    if prototypes.ncols() != d || local_labels.len() != nq || nq == 0 {
        return Err(BmlError::shape(format!(
            "queries {:?}, prototypes {:?}, {} labels",
            query_flat.dim(),
            prototypes.dim(),
            local_labels.len()
        )));
    }
    if let Some(&label) = local_labels.iter().find(|&&l| l >= n_way) {
        return Err(BmlError::LabelOutOfRange { label, classes: n_way });
    }
    let q = query_flat.as_standard_layout();
    let p = prototypes.as_standard_layout();
    let qs = q.as_slice().expect("layout");
    let ps = p.as_slice().expect("layout");
    let mut grad_q = vec![0.0; qs.len()];
    let mut grad_p = vec![0.0; ps.len()];
    let mut logits = vec![0.0; n_way];
    let mut logp = vec![0.0; n_way];
    let mut total = 0.0;
    let norm = 1.0 / nq as f64;
    for (i, &label) in local_labels.iter().enumerate() {
        let qi = &qs[i * d..][..d];
        for j in 0..n_way {
            logits[j] = metric.logit(qi, &ps[j * d..][..d]);
        }
        log_softmax_into(&logits, &mut logp);
        total -= logp[label];
        for j in 0..n_way {
            let upstream = (logp[j].exp() - if j == label { 1.0 } else { 0.0 }) * norm;
            let (gq, gp) = (&mut grad_q[i * d..][..d], &mut grad_p[j * d..][..d]);
            metric.backprop_logit(qi, &ps[j * d..][..d], upstream, gq, gp);
        }
    }
    Ok(ProtoLossGrad {
        value: total * norm,
        grad_query: Array2::from_shape_vec((nq, d), grad_q).expect("shape"),
        grad_prototypes: Array2::from_shape_vec((n_way, d), grad_p).expect("shape"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn one_shot_prototypes_are_the_support() {
        let support = array![[1.0, 2.0], [3.0, -1.0], [0.5, 0.5]];
        let protos = compute_prototypes(support.view(), &[0, 1, 2]).unwrap();
        assert_eq!(protos, support);
    }

    #[test]
    fn prototype_is_class_mean() {
        let support = array![[0.0, 0.0], [5.0, 5.0], [2.0, 2.0], [7.0, 1.0]];
        let protos = compute_prototypes(support.view(), &[0, 1, 0, 1]).unwrap();
        assert_eq!(protos.row(0).to_vec(), vec![1.0, 1.0]);
        assert_eq!(protos.row(1).to_vec(), vec![6.0, 3.0]);
    }

    #[test]
    fn missing_class_is_rejected() {
        let support = array![[0.0], [1.0]];
        assert!(compute_prototypes(support.view(), &[0, 2]).is_err());
    }

    #[test]
    fn equidistant_query_gives_log_n() {
        let protos = array![[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0], [0.6, 0.8]];
        let query = array![[0.0, 0.0]];
        let loss = local_proto_loss(query.view(), protos.view(), &[2], &MetricConfig::default()).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-12);
        assert!((loss - 1.6094).abs() < 1e-4);
    }

    #[test]
    fn query_on_far_separated_prototype_has_near_zero_loss() {
        let protos = array![[0.0, 0.0], [100.0, 0.0], [0.0, 100.0]];
        let query = array![[0.0, 0.0]];
        let loss = local_proto_loss(query.view(), protos.view(), &[0], &MetricConfig::default()).unwrap();
        assert!(loss < 1e-3);
    }

    #[test]
    fn single_class_is_rejected() {
        let protos = array![[0.0, 0.0]];
        let query = array![[1.0, 0.0]];
        assert!(local_proto_loss(query.view(), protos.view(), &[0], &MetricConfig::default()).is_err());
    }
}
