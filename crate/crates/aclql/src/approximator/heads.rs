//! Distribution heads on top of raw network outputs: the squashed Gaussian
//! actor, the fixed-sigma Gaussian behavior model, and the two-headed
//! conservatism weight net.

use super::mlp::{ForwardCache, Mlp, MlpGrads};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
/// Floor on 1 - tanh(u)^2 inside the squash correction log.
pub const TANH_SAT_FLOOR: f64 = 1e-6;
pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// One reparameterized draw a = tanh(mu + std * noise) with everything the
/// backward pass needs.
#[derive(Debug, Clone)]
pub struct ActorEval {
    pub mu: Vec<f64>,
    pub log_std_raw: Vec<f64>,
    pub log_std: Vec<f64>,
    pub std: Vec<f64>,
    pub noise: Vec<f64>,
    pub pre_tanh: Vec<f64>,
    pub action: Vec<f64>,
    pub log_prob: f64,
    pub cache: ForwardCache,
}

/// Actor output layout: [mu_0..mu_d, log_std_0..log_std_d].
pub fn actor_action_dim(actor: &Mlp) -> usize {
    debug_assert_eq!(actor.output_dim % 2, 0, "actor output must be 2 * action_dim");
    actor.output_dim / 2
}

pub fn actor_sample(actor: &Mlp, state: &[f64], noise: &[f64]) -> ActorEval {
    let d = actor_action_dim(actor);
    assert_eq!(noise.len(), d, "noise dim");
    let cache = actor.forward_cached(state);
    let raw = cache.output();
    let mu = raw[..d].to_vec();
    let log_std_raw = raw[d..].to_vec();
    let log_std: Vec<f64> = log_std_raw
        .iter()
        .map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX))
        .collect();
    let std: Vec<f64> = log_std.iter().map(|v| v.exp()).collect();
    let pre_tanh: Vec<f64> = (0..d).map(|i| mu[i] + std[i] * noise[i]).collect();
    let action: Vec<f64> = pre_tanh.iter().map(|u| u.tanh()).collect();
    let mut log_prob = 0.0;
    for i in 0..d {
        let sq = (1.0 - action[i] * action[i]).max(TANH_SAT_FLOOR);
        log_prob += -0.5 * noise[i] * noise[i] - log_std[i] - 0.5 * LN_2PI - sq.ln();
    }
    ActorEval {
        mu,
        log_std_raw,
        log_std,
        std,
        noise: noise.to_vec(),
        pre_tanh,
        action,
        log_prob,
        cache,
    }
}

/// Deterministic evaluation action tanh(mu(s)).
pub fn actor_mean_action(actor: &Mlp, state: &[f64]) -> Vec<f64> {
    let d = actor_action_dim(actor);
    let raw = actor.forward(state);
    raw[..d].iter().map(|m| m.tanh()).collect()
}

/// Accumulates actor parameter gradients for a loss with per-dimension
/// action gradient `d_action` and scalar log-prob gradient `d_log_prob`.
pub fn actor_backward(
    actor: &Mlp,
    eval: &ActorEval,
    d_action: &[f64],
    d_log_prob: f64,
    grads: &mut MlpGrads,
) {
    let d = actor_action_dim(actor);
    assert_eq!(d_action.len(), d, "action grad dim");
    let mut grad_out = vec![0.0; 2 * d];
    for i in 0..d {
        let a = eval.action[i];
        let dadu = 1.0 - a * a;
        // d log_prob / du: the squash correction -ln(1 - a^2) contributes
        // 2a unless the floor clamp is active, which freezes that term.
        let saturated = 1.0 - a * a <= TANH_SAT_FLOOR;
        let dlogp_du = if saturated { 0.0 } else { 2.0 * a };
        let du_dls = eval.std[i] * eval.noise[i];
        let clamped = eval.log_std_raw[i] < LOG_STD_MIN || eval.log_std_raw[i] > LOG_STD_MAX;

        let d_u = d_log_prob * dlogp_du + d_action[i] * dadu;
        grad_out[i] = d_u;
        let d_ls = d_u * du_dls - d_log_prob;
        grad_out[d + i] = if clamped { 0.0 } else { d_ls };
    }
    actor.backward(&eval.cache, &grad_out, grads, false);
}

/// Log density of `action` under the fixed-sigma Gaussian whose mean is the
/// behavior net's output.
pub fn behavior_log_prob(behavior: &Mlp, state: &[f64], action: &[f64], sigma: f64) -> f64 {
    let mean = behavior.forward(state);
    assert_eq!(mean.len(), action.len(), "behavior action dim");
    let mut lp = 0.0;
    for (m, a) in mean.iter().zip(action) {
        let z = (a - m) / sigma;
        lp += -0.5 * z * z - sigma.ln() - 0.5 * LN_2PI;
    }
    lp
}

/// Two-headed weight net output at (state, action): (w_mu, w_beta).
pub fn weight_forward(net: &Mlp, state: &[f64], action: &[f64]) -> (f64, f64, ForwardCache) {
    debug_assert_eq!(net.output_dim, 2, "weight net has two heads");
    let input = concat(state, action);
    let cache = net.forward_cached(&input);
    let out = cache.output();
    (out[0], out[1], cache)
}

pub fn weight_backward(
    net: &Mlp,
    cache: &ForwardCache,
    d_w_mu: f64,
    d_w_beta: f64,
    grads: &mut MlpGrads,
) {
    net.backward(cache, &[d_w_mu, d_w_beta], grads, false);
}

pub fn concat(state: &[f64], action: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(state.len() + action.len());
    v.extend_from_slice(state);
    v.extend_from_slice(action);
    v
}
