//! Symmetric KL between the softmax-normalized flattened feature maps of the
//! two views.

use ndarray::{Array4, ArrayView4};

use super::log_softmax_into;
use crate::error::{BmlError, Result};

pub struct MutualLossGrad {
    pub value: f64,
    pub grad_global: Array4<f64>,
    pub grad_local: Array4<f64>,
}

/// Mean over images of `KL(F_l‖F_g) + KL(F_g‖F_l)`, where `F` is a softmax
/// over the image's flattened `h·w·m` map at `temperature`.
pub fn mutual_loss(global_map: ArrayView4<f64>, local_map: ArrayView4<f64>, temperature: f64) -> Result<f64> {
    mutual_loss_grad(global_map, local_map, temperature).map(|g| g.value)
}

/// [`mutual_loss`] with gradients for both maps. Neither side is detached.
pub fn mutual_loss_grad(
    global_map: ArrayView4<f64>,
    local_map: ArrayView4<f64>,
    temperature: f64,
) -> Result<MutualLossGrad> {
    if global_map.dim() != local_map.dim() {
        return Err(BmlError::shape(format!(
            "global map {:?} vs local map {:?}",
            global_map.dim(),
            local_map.dim()
        )));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(BmlError::invalid(format!("mutual temperature must be positive, got {temperature}")));
    }
    let (n, h, w, m) = global_map.dim();
    let d = h * w * m;
    if n == 0 || d == 0 {
        return Err(BmlError::shape("empty feature maps"));
    }
    let g = global_map.as_standard_layout();
    let l = local_map.as_standard_layout();
    let (gs, ls) = (g.as_slice().expect("layout"), l.as_slice().expect("layout"));
    let mut grad_g = vec![0.0; n * d];
    let mut grad_l = vec![0.0; n * d];
    let (mut a, mut b) = (vec![0.0; d], vec![0.0; d]);
    let (mut la, mut lb) = (vec![0.0; d], vec![0.0; d]);
    let norm = 1.0 / n as f64;
    let mut total = 0.0;
    for i in 0..n {
        for k in 0..d {
            a[k] = gs[i * d + k] / temperature;
            b[k] = ls[i * d + k] / temperature;
        }
        log_softmax_into(&a, &mut la);
        log_softmax_into(&b, &mut lb);
        // KL(p‖q) + KL(q‖p) = Σ (p - q)(log p - log q)
        let mut value = 0.0;
        let (mut ep, mut eq) = (0.0, 0.0);
        for k in 0..d {
            let (p, q, diff) = (la[k].exp(), lb[k].exp(), la[k] - lb[k]);
            value += (p - q) * diff;
            ep += p * diff;
            eq += q * diff;
        }
        total += value;
        for k in 0..d {
            let (p, q, diff) = (la[k].exp(), lb[k].exp(), la[k] - lb[k]);
            grad_g[i * d + k] = (p * (diff - ep) + (p - q)) * norm / temperature;
            grad_l[i * d + k] = (-q * (diff - eq) - (p - q)) * norm / temperature;
        }
    }
    Ok(MutualLossGrad {
        value: total * norm,
        grad_global: Array4::from_shape_vec((n, h, w, m), grad_g).expect("shape"),
        grad_local: Array4::from_shape_vec((n, h, w, m), grad_l).expect("shape"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(v: &[f64]) -> Array4<f64> {
        Array4::from_shape_vec((1, 1, 1, v.len()), v.to_vec()).unwrap()
    }

    #[test]
    fn identical_maps_give_zero() {
        let a = map(&[0.3, -1.0, 2.0, 0.5]);
        assert!(mutual_loss(a.view(), a.view(), 1.0).unwrap().abs() < 1e-12);
    }

    #[test]
    fn symmetric_in_arguments() {
        let a = map(&[0.3, -1.0, 2.0]);
        let b = map(&[1.0, 0.0, -0.7]);
        let ab = mutual_loss(a.view(), b.view(), 1.0).unwrap();
        let ba = mutual_loss(b.view(), a.view(), 1.0).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert!(ab > 0.0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = Array4::zeros((1, 2, 2, 3));
        let b = Array4::zeros((1, 2, 1, 3));
        assert!(mutual_loss(a.view(), b.view(), 1.0).is_err());
    }
}
