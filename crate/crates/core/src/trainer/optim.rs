use crate::model::{Gradients, ParamStore};

/// SGD with classical momentum and L2 weight decay folded into the gradient:
/// `v ← μv + g + λw`, `w ← w − lr·v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f32,
    pub weight_decay: f32,
    pub velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(params: &ParamStore, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum: momentum as f32,
            weight_decay: weight_decay as f32,
            velocity: params.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect(),
        }
    }

    /// Updates the tensors whose `trainable` flag is set; others are untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, lr: f64, trainable: &[bool]) {
        let lr = lr as f32;
        for (i, t) in params.tensors.iter_mut().enumerate() {
            if !trainable[i] {
                continue;
            }
            let v = &mut self.velocity[i];
            for ((w, g), v) in t.data.iter_mut().zip(&grads.tensors[i]).zip(v.iter_mut()) {
                *v = self.momentum * *v + g + self.weight_decay * *w;
                *w -= lr * *v;
            }
        }
    }
}
