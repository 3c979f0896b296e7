//! Adam with bias correction, plus Polyak target averaging.

use super::mlp::{Mlp, MlpGrads};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(net: &Mlp) -> Self {
        AdamState {
            m: net.blocks.iter().map(|b| vec![0.0; b.len()]).collect(),
            v: net.blocks.iter().map(|b| vec![0.0; b.len()]).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

pub fn adam_step(net: &mut Mlp, grads: &MlpGrads, state: &mut AdamState, lr: f64) {
    state.t += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for ((block, g), (m, v)) in net
        .blocks
        .iter_mut()
        .zip(&grads.blocks)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for i in 0..block.values.len() {
            let gi = g[i];
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            block.values[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
}

/// target <- (1 - rate) * target + rate * online, elementwise.
pub fn polyak_update(target: &mut Mlp, online: &Mlp, rate: f64) {
    assert_eq!(target.n_params(), online.n_params(), "net shapes");
    for (tb, ob) in target.blocks.iter_mut().zip(&online.blocks) {
        for (t, o) in tb.values.iter_mut().zip(&ob.values) {
            *t = (1.0 - rate) * *t + rate * *o;
        }
    }
}

/// Scalar Adam used for the entropy temperature.
#[derive(Debug, Clone, Default)]
pub struct ScalarAdam {
    m: f64,
    v: f64,
    t: u64,
}

impl ScalarAdam {
    pub fn step(&mut self, param: &mut f64, grad: f64, lr: f64) {
        self.t += 1;
        self.m = ADAM_BETA1 * self.m + (1.0 - ADAM_BETA1) * grad;
        self.v = ADAM_BETA2 * self.v + (1.0 - ADAM_BETA2) * grad * grad;
        let m_hat = self.m / (1.0 - ADAM_BETA1.powi(self.t as i32));
        let v_hat = self.v / (1.0 - ADAM_BETA2.powi(self.t as i32));
        *param -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}
