//! First-order optimizers with per-parameter state.

use serde::{Deserialize, Serialize};

use crate::mlp::{Gradients, MlpNet, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Rmsprop,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const RMSPROP_DECAY: f64 = 0.9;
const RMSPROP_EPS: f64 = 1e-8;

/// Moment buffers mirroring the layer layout.
#[derive(Debug, Clone)]
pub struct OptimizerState<S: Scalar> {
    kind: OptimizerKind,
    /// First moments (unused by rmsprop).
    m_w: Vec<Vec<S>>,
    m_b: Vec<Vec<S>>,
    /// Second moments.
    v_w: Vec<Vec<S>>,
    v_b: Vec<Vec<S>>,
    /// Completed steps; drives bias correction.
    t: u64,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new(kind: OptimizerKind, net: &MlpNet<S>) -> Self {
        let zeros_w: Vec<Vec<S>> =
            net.layers.iter().map(|l| vec![S::zero(); l.weights.len()]).collect();
        let zeros_b: Vec<Vec<S>> = net.layers.iter().map(|l| vec![S::zero(); l.bias.len()]).collect();
        OptimizerState {
            kind,
            m_w: zeros_w.clone(),
            m_b: zeros_b.clone(),
            v_w: zeros_w,
            v_b: zeros_b,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update in place with step size `lr_t`.
    pub fn step(&mut self, net: &mut MlpNet<S>, grads: &Gradients<S>, lr_t: f64) {
        self.t += 1;
        match self.kind {
            OptimizerKind::Adam => {
                let b1 = S::from_f64(ADAM_BETA1);
                let b2 = S::from_f64(ADAM_BETA2);
                let one = S::one();
                let eps = S::from_f64(ADAM_EPS);
                let corr1 = S::from_f64(1.0 / (1.0 - ADAM_BETA1.powi(self.t as i32)));
                let corr2 = S::from_f64(1.0 / (1.0 - ADAM_BETA2.powi(self.t as i32)));
                let lr = S::from_f64(lr_t);
                for (l, layer) in net.layers.iter_mut().enumerate() {
                    adam_update(&mut layer.weights, &grads.dw[l], &mut self.m_w[l], &mut self.v_w[l], b1, b2, one, eps, corr1, corr2, lr);
                    adam_update(&mut layer.bias, &grads.db[l], &mut self.m_b[l], &mut self.v_b[l], b1, b2, one, eps, corr1, corr2, lr);
                }
            }
            OptimizerKind::Rmsprop => {
                let decay = S::from_f64(RMSPROP_DECAY);
                let one_minus = S::from_f64(1.0 - RMSPROP_DECAY);
                let eps = S::from_f64(RMSPROP_EPS);
                let lr = S::from_f64(lr_t);
                for (l, layer) in net.layers.iter_mut().enumerate() {
                    rmsprop_update(&mut layer.weights, &grads.dw[l], &mut self.v_w[l], decay, one_minus, eps, lr);
                    rmsprop_update(&mut layer.bias, &grads.db[l], &mut self.v_b[l], decay, one_minus, eps, lr);
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn adam_update<S: Scalar>(
    params: &mut [S],
    grads: &[S],
    m: &mut [S],
    v: &mut [S],
    b1: S,
    b2: S,
    one: S,
    eps: S,
    corr1: S,
    corr2: S,
    lr: S,
) {
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let m_hat = m[i] * corr1;
        let v_hat = v[i] * corr2;
        params[i] = params[i] - lr * m_hat / (v_hat.sqrt() + eps);
    }
}

fn rmsprop_update<S: Scalar>(
    params: &mut [S],
    grads: &[S],
    v: &mut [S],
    decay: S,
    one_minus: S,
    eps: S,
    lr: S,
) {
    for i in 0..params.len() {
        let g = grads[i];
        v[i] = decay * v[i] + one_minus * g * g;
        params[i] = params[i] - lr * g / (v[i].sqrt() + eps);
    }
}

/// lr_t = lr / (1 + decay * t), t counting completed steps from zero.
pub fn decayed_lr(lr: f64, decay: f64, step: u64) -> f64 {
    lr / (1.0 + decay * step as f64)
}
