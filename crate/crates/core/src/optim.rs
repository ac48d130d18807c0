//! Adaptive-moment optimizer and gradient clipping.

use crate::tape::Matrix;
use std::collections::BTreeMap;

/// Anything exposing its parameters as named matrices. Names must be
/// stable across calls; they key optimizer state and checkpoints.
pub trait ParamSet {
    fn for_each(&self, f: &mut dyn FnMut(&str, &Matrix));
    fn for_each_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each(&mut |_, m| n += m.len());
        n
    }
}

/// First-order adaptive-moment optimizer with bias correction.
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    state: BTreeMap<String, (Matrix, Matrix)>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            state: BTreeMap::new(),
        }
    }

    /// Applies one update step. Parameters without a gradient entry are
    /// left untouched and accumulate no state.
    pub fn step<P: ParamSet>(&mut self, params: &mut P, grads: &BTreeMap<String, Matrix>) {
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.learning_rate);
        let bias1 = 1.0 - b1.powi(t);
        let bias2 = 1.0 - b2.powi(t);
        let state = &mut self.state;
        params.for_each_mut(&mut |name, value| {
            let g = match grads.get(name) {
                Some(g) => g,
                None => return,
            };
            let (m, v) = state
                .entry(name.to_string())
                .or_insert_with(|| (Matrix::zeros(value.dim()), Matrix::zeros(value.dim())));
            azip_update(m, v, value, g, b1, b2, lr, eps, bias1, bias2);
        });
    }
}

#[allow(clippy::too_many_arguments)]
fn azip_update(
    m: &mut Matrix,
    v: &mut Matrix,
    value: &mut Matrix,
    g: &Matrix,
    b1: f64,
    b2: f64,
    lr: f64,
    eps: f64,
    bias1: f64,
    bias2: f64,
) {
    for ((mi, vi), (pi, gi)) in m
        .iter_mut()
        .zip(v.iter_mut())
        .zip(value.iter_mut().zip(g.iter()))
    {
        *mi = b1 * *mi + (1.0 - b1) * gi;
        *vi = b2 * *vi + (1.0 - b2) * gi * gi;
        let mhat = *mi / bias1;
        let vhat = *vi / bias2;
        *pi -= lr * mhat / (vhat.sqrt() + eps);
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_gradients(grads: &mut BTreeMap<String, Matrix>, max_norm: f64) -> f64 {
    let total: f64 = grads
        .values()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum();
    let norm = total.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.values_mut() {
            g.mapv_inplace(|x| x * scale);
        }
    }
    norm
}
