//! Training objectives. Losses are computed in `f64` and return analytic
//! gradients alongside their values.

mod elastic;
mod global;
mod mutual;
mod proto;
mod total;

pub use elastic::{
    elastic_constraint, elastic_local_loss, elastic_push, local_loss_with_penalties, pointwise_proto_loss,
    ElasticConfig, ElasticLossOutput,
};
pub use global::{global_pointwise_loss, global_pointwise_loss_grad};
pub use mutual::{mutual_loss, mutual_loss_grad, MutualLossGrad};
pub use proto::{
    compute_point_prototypes, compute_prototypes, local_proto_loss, local_proto_loss_grad, prototype_backward,
    MetricConfig, ProtoLossGrad,
};
pub use total::{total_loss, LossConfig, LossReport, LossWeights};

/// A loss value with the gradient of that value.
#[derive(Debug, Clone)]
pub struct LossGrad<G> {
    pub value: f64,
    pub grad: G,
}

/// Numerically stable `log softmax(x)` written into `out`.
pub(crate) fn log_softmax_into(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for (o, v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
}
