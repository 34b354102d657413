//! Elastic margin for the local view.
//!
//! At every spatial point of every query, the gap `Δ` between the positive
//! logit and the nearest negative logit sets a push `d_EL = (α1·e/E)·σ(α2·Δ)`
//! that is subtracted from the positive logit before the softmax. Easy points
//! (large `Δ`) and late epochs get larger pushes. `d_EL` is a schedule
//! constant: no gradient flows through it.

use ndarray::{Array3, Array4, ArrayView3, ArrayView4};
use serde::{Deserialize, Serialize};

use super::proto::MetricConfig;
use super::log_softmax_into;
use crate::error::{BmlError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ElasticConfig {
    /// Cross-epoch push scale, nominally in `[4, 6]`.
    pub alpha1: f64,
    /// Cross-task sharpness, nominally in `[0.05, 0.25]`.
    pub alpha2: f64,
    /// Set by the trainer each epoch; not part of a config file.
    #[serde(skip)]
    pub epoch: usize,
    #[serde(skip)]
    pub total_epochs: usize,
    pub enabled: bool,
}

impl Default for ElasticConfig {
    fn default() -> Self {
        Self {
            alpha1: 5.5,
            alpha2: 0.1,
            epoch: 0,
            total_epochs: 1,
            enabled: true,
        }
    }
}

impl ElasticConfig {
    pub fn at_epoch(self, epoch: usize, total_epochs: usize) -> Self {
        Self { epoch, total_epochs, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_epochs == 0 || self.epoch > self.total_epochs {
            return Err(BmlError::invalid(format!(
                "elastic schedule needs 0 <= e <= E with E >= 1, got e={} E={}",
                self.epoch, self.total_epochs
            )));
        }
        if !(self.alpha1.is_finite() && self.alpha2.is_finite() && self.alpha1 >= 0.0) {
            return Err(BmlError::invalid("elastic scale factors must be finite, alpha1 >= 0"));
        }
        Ok(())
    }

    /// `α1·e/E`, the upper bound of the push at the current epoch.
    pub fn scale(&self) -> f64 {
        if !self.enabled {
            return 0.0;
        }
        self.alpha1 * self.epoch as f64 / self.total_epochs as f64
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `(Δ, d_EL)` for one point: `Δ = logit[pos] - max_{j≠pos} logit[j]`.
pub fn elastic_push(logits_point: &[f64], positive_idx: usize, cfg: &ElasticConfig) -> Result<(f64, f64)> {
    if logits_point.len() < 2 {
        return Err(BmlError::invalid("elastic constraint needs at least 2 classes"));
    }
    if positive_idx >= logits_point.len() {
        return Err(BmlError::LabelOutOfRange {
            label: positive_idx,
            classes: logits_point.len(),
        });
    }
    let dis_p = logits_point[positive_idx];
    let dis_n = logits_point
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != positive_idx)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let delta = dis_p - dis_n;
    Ok((delta, cfg.scale() * sigmoid(cfg.alpha2 * delta)))
}

/// The elastic push `d_EL` for one spatial point.
pub fn elastic_constraint(logits_point: &[f64], positive_idx: usize, cfg: &ElasticConfig) -> Result<f64> {
    elastic_push(logits_point, positive_idx, cfg).map(|(_, d)| d)
}

/// Value and gradients of the point-wise local loss.
#[derive(Debug, Clone)]
pub struct ElasticLossOutput {
    pub value: f64,
    pub grad_query: Array4<f64>,
    pub grad_prototypes: Array4<f64>,
    /// Mean `Δ` over query points.
    pub mean_delta: f64,
    /// Mean push over query points.
    pub mean_d_el: f64,
    /// The push applied at each `[query, p, q]`.
    pub penalties: Array3<f64>,
}

fn check_shapes(query: &ArrayView4<f64>, protos: &ArrayView4<f64>, labels: &[usize]) -> Result<()> {
    let (nq, h, w, m) = query.dim();
    let (n, ph, pw, pm) = protos.dim();
    if (h, w, m) != (ph, pw, pm) {
        return Err(BmlError::shape(format!("query maps {:?} vs prototype maps {:?}", query.dim(), protos.dim())));
    }
    if labels.len() != nq || nq == 0 || h * w == 0 {
        return Err(BmlError::shape(format!("{nq} query maps but {} labels", labels.len())));
    }
    if n < 2 {
        return Err(BmlError::invalid("prototype matching needs at least 2 classes"));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= n) {
        return Err(BmlError::LabelOutOfRange { label, classes: n });
    }
    Ok(())
}

/// Shared kernel: per point logits `-dist/τ` against point prototypes, the
/// positive logit reduced by `penalty(point logits, label, index)`.
fn pointwise_margin_loss(
    query: ArrayView4<f64>,
    protos: ArrayView4<f64>,
    labels: &[usize],
    metric: &MetricConfig,
    mut penalty: impl FnMut(&[f64], usize, [usize; 3]) -> Result<(f64, f64)>,
) -> Result<ElasticLossOutput> {
    metric.validate()?;
    check_shapes(&query, &protos, labels)?;
    let (nq, h, w, m) = query.dim();
    let n_way = protos.dim().0;
    let q = query.as_standard_layout();
    let p = protos.as_standard_layout();
    let qs = q.as_slice().expect("layout");
    let ps = p.as_slice().expect("layout");
    let mut grad_q = vec![0.0; qs.len()];
    let mut grad_p = vec![0.0; ps.len()];
    let mut penalties = Array3::zeros((nq, h, w));
    let mut logits = vec![0.0; n_way];
    let mut logp = vec![0.0; n_way];
    let norm = 1.0 / (nq * h * w) as f64;
    let (mut total, mut sum_delta, mut sum_d) = (0.0, 0.0, 0.0);
    for (i, &label) in labels.iter().enumerate() {
        for pt in 0..h * w {
            let qv = &qs[(i * h * w + pt) * m..][..m];
            for j in 0..n_way {
                logits[j] = metric.logit(qv, &ps[(j * h * w + pt) * m..][..m]);
            }
            let (delta, d_el) = penalty(&logits, label, [i, pt / w, pt % w])?;
            penalties[[i, pt / w, pt % w]] = d_el;
            sum_delta += delta;
            sum_d += d_el;
            logits[label] -= d_el;
            log_softmax_into(&logits, &mut logp);
            total -= logp[label];
            for j in 0..n_way {
                let upstream = (logp[j].exp() - if j == label { 1.0 } else { 0.0 }) * norm;
                let gq = &mut grad_q[(i * h * w + pt) * m..][..m];
                let gp = &mut grad_p[(j * h * w + pt) * m..][..m];
                metric.backprop_logit(qv, &ps[(j * h * w + pt) * m..][..m], upstream, gq, gp);
            }
        }
    }
    Ok(ElasticLossOutput {
        value: total * norm,
        grad_query: Array4::from_shape_vec((nq, h, w, m), grad_q).expect("shape"),
        grad_prototypes: Array4::from_shape_vec((n_way, h, w, m), grad_p).expect("shape"),
        mean_delta: sum_delta * norm,
        mean_d_el: sum_d * norm,
        penalties,
    })
}

/// Point-wise local loss with the elastic push: mean over queries and points
/// of `-log softmax(logits with logit[y] - d_EL)[y]`. With `cfg.enabled =
/// false` it is exactly the point-wise prototypical loss.
pub fn elastic_local_loss(
    query_maps: ArrayView4<f64>,
    prototype_maps: ArrayView4<f64>,
    local_labels: &[usize],
    cfg: &ElasticConfig,
    metric: &MetricConfig,
) -> Result<ElasticLossOutput> {
    cfg.validate()?;
    pointwise_margin_loss(query_maps, prototype_maps, local_labels, metric, |logits, label, _| {
        elastic_push(logits, label, cfg)
    })
}

/// The point-wise prototypical loss (no push).
pub fn pointwise_proto_loss(
    query_maps: ArrayView4<f64>,
    prototype_maps: ArrayView4<f64>,
    local_labels: &[usize],
    metric: &MetricConfig,
) -> Result<ElasticLossOutput> {
    let off = ElasticConfig { enabled: false, ..ElasticConfig::default() };
    elastic_local_loss(query_maps, prototype_maps, local_labels, &off, metric)
}

/// The same loss with externally fixed pushes `[queries, h, w]`; used to
/// check gradients with `d_EL` held constant.
pub fn local_loss_with_penalties(
    query_maps: ArrayView4<f64>,
    prototype_maps: ArrayView4<f64>,
    local_labels: &[usize],
    penalties: ArrayView3<f64>,
    metric: &MetricConfig,
) -> Result<ElasticLossOutput> {
    let (nq, h, w, _) = query_maps.dim();
    if penalties.dim() != (nq, h, w) {
        return Err(BmlError::shape("penalties must be [queries, h, w]"));
    }
    pointwise_margin_loss(query_maps, prototype_maps, local_labels, metric, |_, _, [i, p, q]| {
        Ok((0.0, penalties[[i, p, q]]))
    })
}
