//! Training objectives: TD error, conservative penalties (constant-weight
//! and adaptive-weight forms), the weight-net losses (monotonicity,
//! surrogate hinges, positivity), behavior cloning, and the
//! entropy-regularized actor loss. Every op returns the scalar loss and
//! accumulates analytic gradients that are finite-difference checked in the
//! tests below.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::approximator::{
    actor_backward, actor_sample, concat, weight_backward, weight_forward, ForwardCache, Mlp,
    MlpGrads,
};
use crate::error::{Error, Result};

/// One minibatch with everything the alternating updates need: transitions,
/// per-row quality, policy samples at the same states, and the log densities
/// and conservatism gaps derived from them.
///
/// Flat row-major storage. Row `i` owns `k` policy-sampled actions; flat
/// index `i * k + j` addresses sample `j` of row `i`.
#[derive(Debug, Clone)]
pub struct BatchSample {
    pub n: usize,
    pub k: usize,
    pub obs_dim: usize,
    pub action_dim: usize,
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
    pub next_states: Vec<f64>,
    pub dones: Vec<f64>,
    /// Quality of each dataset transition, in [0, 1].
    pub m_in: Vec<f64>,
    /// `k` policy actions per row, flattened.
    pub ood_actions: Vec<f64>,
    /// ln pi at each policy action (the over-distribution is the policy).
    pub ood_log_prob_pi: Vec<f64>,
    /// ln of the cloned behavior density at the dataset action.
    pub in_log_prob_beta: Vec<f64>,
    /// ln of the cloned behavior density at each policy action.
    pub ood_log_prob_beta: Vec<f64>,
    /// Transferred quality of each policy action, in [0, 1].
    pub m_ood: Vec<f64>,
    /// Per-row ordering gap (1 - m) * r_max.
    pub d_ord: Vec<f64>,
    /// Per-row anchor gap m * r_max.
    pub d_cql: Vec<f64>,
}

impl BatchSample {
    pub fn validate(&self) -> Result<()> {
        let (n, k) = (self.n, self.k);
        if n == 0 || k == 0 {
            return Err(Error::Dim(format!("batch needs n >= 1 and k >= 1, got n={n} k={k}")));
        }
        let checks: [(&str, usize, usize); 12] = [
            ("states", self.states.len(), n * self.obs_dim),
            ("actions", self.actions.len(), n * self.action_dim),
            ("rewards", self.rewards.len(), n),
            ("next_states", self.next_states.len(), n * self.obs_dim),
            ("dones", self.dones.len(), n),
            ("m_in", self.m_in.len(), n),
            ("ood_actions", self.ood_actions.len(), n * k * self.action_dim),
            ("ood_log_prob_pi", self.ood_log_prob_pi.len(), n * k),
            ("in_log_prob_beta", self.in_log_prob_beta.len(), n),
            ("ood_log_prob_beta", self.ood_log_prob_beta.len(), n * k),
            ("m_ood", self.m_ood.len(), n * k),
            ("d_ord", self.d_ord.len(), n),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(Error::Dim(format!("{name}: expected {want} values, got {got}")));
            }
        }
        if self.d_cql.len() != n {
            return Err(Error::Dim(format!("d_cql: expected {n} values, got {}", self.d_cql.len())));
        }
        for (name, vals) in [
            ("states", &self.states),
            ("actions", &self.actions),
            ("rewards", &self.rewards),
            ("next_states", &self.next_states),
            ("ood_actions", &self.ood_actions),
            ("ood_log_prob_pi", &self.ood_log_prob_pi),
            ("in_log_prob_beta", &self.in_log_prob_beta),
            ("ood_log_prob_beta", &self.ood_log_prob_beta),
            ("d_ord", &self.d_ord),
            ("d_cql", &self.d_cql),
        ] {
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("batch field {name}")));
            }
        }
        for m in self.m_in.iter().chain(&self.m_ood) {
            if !(0.0..=1.0).contains(m) {
                return Err(Error::Schema(format!("quality value {m} outside [0, 1]")));
            }
        }
        for d in &self.dones {
            if *d != 0.0 && *d != 1.0 {
                return Err(Error::Schema(format!("done flag {d} is not 0 or 1")));
            }
        }
        Ok(())
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.obs_dim..(i + 1) * self.obs_dim]
    }

    pub fn action(&self, i: usize) -> &[f64] {
        &self.actions[i * self.action_dim..(i + 1) * self.action_dim]
    }

    pub fn next_state(&self, i: usize) -> &[f64] {
        &self.next_states[i * self.obs_dim..(i + 1) * self.obs_dim]
    }

    pub fn ood_action(&self, i: usize, j: usize) -> &[f64] {
        let flat = i * self.k + j;
        &self.ood_actions[flat * self.action_dim..(flat + 1) * self.action_dim]
    }
}

/// Scalar diagnostics for one update, mirroring the metrics CSV columns.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossReport {
    pub td: f64,
    pub penalty: f64,
    pub mono: f64,
    pub ord: f64,
    pub cql: f64,
    pub pos: f64,
    pub bc: f64,
    pub actor: f64,
    pub weight_total: f64,
}

/// Frozen one-step backup r + gamma * (1 - done) * min-twin Q(s', a') for
/// each row. `next_actions` are policy samples at the next states; the
/// result is a constant with respect to the online critic.
pub fn td_backup(
    target1: &Mlp,
    target2: &Mlp,
    batch: &BatchSample,
    next_actions: &[f64],
    gamma: f64,
) -> Vec<f64> {
    assert_eq!(next_actions.len(), batch.n * batch.action_dim, "next action dim");
    let mut out = Vec::with_capacity(batch.n);
    for i in 0..batch.n {
        let a = &next_actions[i * batch.action_dim..(i + 1) * batch.action_dim];
        let x = concat(batch.next_state(i), a);
        let q = target1.forward(&x)[0].min(target2.forward(&x)[0]);
        out.push(batch.rewards[i] + gamma * (1.0 - batch.dones[i]) * q);
    }
    out
}

/// Half mean squared Bellman residual against precomputed frozen targets.
/// Gradients accumulate into `grads` for the one critic being updated.
pub fn td_loss(critic: &Mlp, batch: &BatchSample, targets: &[f64], grads: &mut MlpGrads) -> f64 {
    assert_eq!(targets.len(), batch.n, "target rows");
    let n = batch.n as f64;
    let mut loss = 0.0;
    for (i, target) in targets.iter().enumerate() {
        let cache = critic.forward_cached(&concat(batch.state(i), batch.action(i)));
        let resid = cache.output()[0] - target;
        loss += 0.5 * resid * resid / n;
        if resid != 0.0 {
            critic.backward(&cache, &[resid / n], grads, false);
        }
    }
    loss
}

/// Adaptive-weight conservative penalty
/// mean_{i,j}(w_mu * Q(s, a_pi)) - mean_i(w_beta * Q(s, a)). Weight values
/// are frozen inputs; gradients flow to the critic only.
pub fn acl_penalty(
    critic: &Mlp,
    batch: &BatchSample,
    w_mu: &[f64],
    w_beta: &[f64],
    grads: &mut MlpGrads,
) -> f64 {
    assert_eq!(w_mu.len(), batch.n * batch.k, "w_mu values");
    assert_eq!(w_beta.len(), batch.n, "w_beta values");
    let n = batch.n as f64;
    let nk = (batch.n * batch.k) as f64;
    let mut penalty = 0.0;
    for i in 0..batch.n {
        for j in 0..batch.k {
            let cache = critic.forward_cached(&concat(batch.state(i), batch.ood_action(i, j)));
            let w = w_mu[i * batch.k + j];
            penalty += w * cache.output()[0] / nk;
            if w != 0.0 {
                critic.backward(&cache, &[w / nk], grads, false);
            }
        }
        let cache = critic.forward_cached(&concat(batch.state(i), batch.action(i)));
        let w = w_beta[i];
        penalty -= w * cache.output()[0] / n;
        if w != 0.0 {
            critic.backward(&cache, &[-w / n], grads, false);
        }
    }
    penalty
}

/// Constant-weight penalty alpha * (mean Q at policy actions - mean Q at
/// dataset actions). Kept as its own code path so the adaptive form can be
/// checked against it rather than defined by it. The value accumulates term
/// by term in the same order as the adaptive path, so an adaptive run whose
/// weights are pinned to alpha reproduces this penalty bit for bit.
pub fn cql_penalty(critic: &Mlp, batch: &BatchSample, alpha: f64, grads: &mut MlpGrads) -> f64 {
    let n = batch.n as f64;
    let nk = (batch.n * batch.k) as f64;
    let mut penalty = 0.0;
    for i in 0..batch.n {
        for j in 0..batch.k {
            let cache = critic.forward_cached(&concat(batch.state(i), batch.ood_action(i, j)));
            penalty += alpha * cache.output()[0] / nk;
            critic.backward(&cache, &[alpha / nk], grads, false);
        }
        let cache = critic.forward_cached(&concat(batch.state(i), batch.action(i)));
        penalty -= alpha * cache.output()[0] / n;
        critic.backward(&cache, &[-alpha / n], grads, false);
    }
    penalty
}

/// Uniform random cyclic permutation (Sattolo). A single cycle of length
/// >= 2 has no fixed point, which is exactly what the pairing loss needs.
pub fn derangement(len: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if len < 2 {
        return Err(Error::Dim(format!("derangement needs len >= 2, got {len}")));
    }
    let mut p: Vec<usize> = (0..len).collect();
    for i in (1..len).rev() {
        let j = rng.gen_range(0..i);
        p.swap(i, j);
    }
    Ok(p)
}

fn check_pairing(name: &str, pairing: &[usize], len: usize) -> Result<()> {
    if pairing.len() != len {
        return Err(Error::Dim(format!("{name}: pairing len {} vs values {len}", pairing.len())));
    }
    let mut seen = vec![false; len];
    for (i, &j) in pairing.iter().enumerate() {
        if j >= len || j == i || seen[j] {
            return Err(Error::Schema(format!("{name}: index {i} -> {j} is not a derangement")));
        }
        seen[j] = true;
    }
    Ok(())
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Backprop through softmax: dL/dv_i = s_i * (g_i - sum_j g_j s_j).
fn softmax_backward(s: &[f64], g: &[f64]) -> Vec<f64> {
    let dot: f64 = s.iter().zip(g).map(|(si, gi)| si * gi).sum();
    s.iter().zip(g).map(|(si, gi)| si * (gi - dot)).collect()
}

/// Ordering loss over batch-softmaxed weights against batch-softmaxed
/// quality: policy-side weights should move opposite to transferred quality,
/// dataset-side weights should move with in-dataset quality. Pairs come
/// from caller-supplied derangements. Returns the loss plus gradients with
/// respect to the raw weight values.
pub fn monotonicity_loss(
    w_mu: &[f64],
    m_ood: &[f64],
    w_beta: &[f64],
    m_in: &[f64],
    pair_mu: &[usize],
    pair_beta: &[usize],
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if w_mu.len() != m_ood.len() || w_beta.len() != m_in.len() {
        return Err(Error::Dim("weight and quality vectors must align".into()));
    }
    if w_mu.len() < 2 || w_beta.len() < 2 {
        return Err(Error::Dim("monotonicity loss needs at least 2 values per side".into()));
    }
    check_pairing("policy side", pair_mu, w_mu.len())?;
    check_pairing("dataset side", pair_beta, w_beta.len())?;

    // Anti-monotone side: (sw_i - sw_j) should equal (sm_j - sm_i).
    let side = |w: &[f64], m: &[f64], pair: &[usize], flip: f64| {
        let sw = softmax(w);
        let sm = softmax(m);
        let cnt = w.len() as f64;
        let mut loss = 0.0;
        let mut g = vec![0.0; w.len()];
        for (i, &j) in pair.iter().enumerate() {
            let e = (sw[i] - sw[j]) + flip * (sm[i] - sm[j]);
            loss += e * e / cnt;
            g[i] += 2.0 * e / cnt;
            g[j] -= 2.0 * e / cnt;
        }
        (loss, softmax_backward(&sw, &g))
    };
    let (loss_mu, d_mu) = side(w_mu, m_ood, pair_mu, 1.0);
    let (loss_beta, d_beta) = side(w_beta, m_in, pair_beta, -1.0);
    Ok((loss_mu + loss_beta, d_mu, d_beta))
}

#[derive(Debug, Clone)]
pub struct HingeOut {
    pub l_ord: f64,
    pub l_cql: f64,
    /// Gradients of l_ord alone, then l_cql alone, with respect to each
    /// weight entry. Kept separate so each hinge can be difference-checked
    /// on its own; consumers wanting the total sum the pairs.
    pub d_ord_mu: Vec<f64>,
    pub d_ord_beta: Vec<f64>,
    pub d_cql_mu: Vec<f64>,
    pub d_cql_beta: Vec<f64>,
}

/// Linear surrogate hinges for the two conservatism gaps, built from the
/// bound ln x <= x - 1 so both sides are affine in the weights. Row i
/// supplies the dataset-side weight, log density, and gaps; each of its k
/// policy samples supplies the policy-side weight and log density.
/// Subgradient at the kink is 0.
#[allow(clippy::too_many_arguments)]
pub fn surrogate_hinges(
    n: usize,
    k: usize,
    w_mu: &[f64],
    w_beta: &[f64],
    ln_mu: &[f64],
    ln_beta: &[f64],
    d_ord: &[f64],
    d_cql: &[f64],
    alpha: f64,
) -> Result<HingeOut> {
    if w_mu.len() != n * k || ln_mu.len() != n * k {
        return Err(Error::Dim("policy-side arrays must have n * k entries".into()));
    }
    if w_beta.len() != n || ln_beta.len() != n || d_ord.len() != n || d_cql.len() != n {
        return Err(Error::Dim("dataset-side arrays must have n entries".into()));
    }
    if ln_mu.iter().chain(ln_beta).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("log density in surrogate hinge".into()));
    }
    let nk = (n * k) as f64;
    let mut l_ord = 0.0;
    let mut l_cql = 0.0;
    let mut d_ord_mu = vec![0.0; n * k];
    let mut d_ord_beta = vec![0.0; n];
    let mut d_cql_mu = vec![0.0; n * k];
    let mut d_cql_beta = vec![0.0; n];
    for i in 0..n {
        let tb = ln_beta[i] + 1.0;
        for j in 0..k {
            let f = i * k + j;
            let tm = ln_mu[f] + 1.0;
            let ord_arg = w_beta[i] * tb - w_mu[f] * tm + d_ord[i] * tb;
            if ord_arg > 0.0 {
                l_ord += ord_arg / nk;
                d_ord_beta[i] += tb / nk;
                d_ord_mu[f] -= tm / nk;
            }
            let cql_arg = (w_mu[f] - alpha) * tm - (w_beta[i] - alpha) * tb + d_cql[i] * tb;
            if cql_arg > 0.0 {
                l_cql += cql_arg / nk;
                d_cql_mu[f] += tm / nk;
                d_cql_beta[i] -= tb / nk;
            }
        }
    }
    Ok(HingeOut { l_ord, l_cql, d_ord_mu, d_ord_beta, d_cql_mu, d_cql_beta })
}

/// mean max(0, -w_mu) + mean max(0, -w_beta). Pushes weights toward the
/// positive orthant; inactive (zero gradient) once they get there.
pub fn positivity_loss(w_mu: &[f64], w_beta: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let side = |w: &[f64]| {
        let cnt = w.len() as f64;
        let mut loss = 0.0;
        let mut g = vec![0.0; w.len()];
        for (i, &v) in w.iter().enumerate() {
            if v < 0.0 {
                loss += -v / cnt;
                g[i] = -1.0 / cnt;
            }
        }
        (loss, g)
    };
    let (lm, gm) = side(w_mu);
    let (lb, gb) = side(w_beta);
    (lm + lb, gm, gb)
}

/// Per-term breakdown of the weight-net objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightLossBreakdown {
    pub total: f64,
    pub mono: f64,
    pub ord: f64,
    pub cql: f64,
    pub pos: f64,
}

/// Weight values the net assigns to one batch: the policy head at each
/// policy action, the dataset head at each dataset action, with the forward
/// caches needed to push gradients back through the net.
pub struct WeightEval {
    pub w_mu: Vec<f64>,
    pub w_beta: Vec<f64>,
    caches_mu: Vec<ForwardCache>,
    caches_beta: Vec<ForwardCache>,
}

pub fn evaluate_weights(net: &Mlp, batch: &BatchSample) -> WeightEval {
    let mut w_mu = Vec::with_capacity(batch.n * batch.k);
    let mut w_beta = Vec::with_capacity(batch.n);
    let mut caches_mu = Vec::with_capacity(batch.n * batch.k);
    let mut caches_beta = Vec::with_capacity(batch.n);
    for i in 0..batch.n {
        for j in 0..batch.k {
            let (wm, _, cache) = weight_forward(net, batch.state(i), batch.ood_action(i, j));
            w_mu.push(wm);
            caches_mu.push(cache);
        }
        let (_, wb, cache) = weight_forward(net, batch.state(i), batch.action(i));
        w_beta.push(wb);
        caches_beta.push(cache);
    }
    WeightEval { w_mu, w_beta, caches_mu, caches_beta }
}

/// Full weight-net objective: ordering hinge plus anchor hinge plus
/// monotonicity plus positivity, unit coefficients. Critic and policy
/// quantities inside the batch are frozen; gradients flow only into the
/// weight net.
pub fn weight_total_loss(
    net: &Mlp,
    batch: &BatchSample,
    alpha: f64,
    pair_mu: &[usize],
    pair_beta: &[usize],
    grads: &mut MlpGrads,
) -> Result<(WeightLossBreakdown, WeightEval)> {
    batch.validate()?;
    let eval = evaluate_weights(net, batch);
    let (mono, mono_d_mu, mono_d_beta) = monotonicity_loss(
        &eval.w_mu,
        &batch.m_ood,
        &eval.w_beta,
        &batch.m_in,
        pair_mu,
        pair_beta,
    )?;
    let hinges = surrogate_hinges(
        batch.n,
        batch.k,
        &eval.w_mu,
        &eval.w_beta,
        &batch.ood_log_prob_pi,
        &batch.in_log_prob_beta,
        &batch.d_ord,
        &batch.d_cql,
        alpha,
    )?;
    let (pos, pos_d_mu, pos_d_beta) = positivity_loss(&eval.w_mu, &eval.w_beta);

    for (f, cache) in eval.caches_mu.iter().enumerate() {
        let d = mono_d_mu[f] + hinges.d_ord_mu[f] + hinges.d_cql_mu[f] + pos_d_mu[f];
        if d != 0.0 {
            weight_backward(net, cache, d, 0.0, grads);
        }
    }
    for (i, cache) in eval.caches_beta.iter().enumerate() {
        let d = mono_d_beta[i] + hinges.d_ord_beta[i] + hinges.d_cql_beta[i] + pos_d_beta[i];
        if d != 0.0 {
            weight_backward(net, cache, 0.0, d, grads);
        }
    }
    let breakdown = WeightLossBreakdown {
        total: mono + hinges.l_ord + hinges.l_cql + pos,
        mono,
        ord: hinges.l_ord,
        cql: hinges.l_cql,
        pos,
    };
    Ok((breakdown, eval))
}

/// Mean squared error between the behavior net's mean action and the
/// dataset action, averaged over every action coordinate in the batch.
pub fn bc_loss(behavior: &Mlp, batch: &BatchSample, grads: &mut MlpGrads) -> f64 {
    let total = (batch.n * batch.action_dim) as f64;
    let mut loss = 0.0;
    for i in 0..batch.n {
        let cache = behavior.forward_cached(batch.state(i));
        let out = cache.output();
        let a = batch.action(i);
        let mut d_out = vec![0.0; out.len()];
        for (d, (o, t)) in d_out.iter_mut().zip(out.iter().zip(a)) {
            let resid = o - t;
            loss += resid * resid / total;
            *d = 2.0 * resid / total;
        }
        behavior.backward(&cache, &d_out, grads, false);
    }
    loss
}

/// mean(temp * ln pi(a|s) - min-twin Q(s, a)) over reparameterized samples.
/// Critics are frozen; their input gradients chain into the actor. Returns
/// the loss and the mean log probability (the temperature update needs it).
#[allow(clippy::too_many_arguments)]
pub fn actor_loss(
    actor: &Mlp,
    critic1: &Mlp,
    critic2: &Mlp,
    batch: &BatchSample,
    temp: f64,
    noise: &[f64],
    grads: &mut MlpGrads,
) -> (f64, f64) {
    assert_eq!(noise.len(), batch.n * batch.action_dim, "noise dim");
    let n = batch.n as f64;
    let mut loss = 0.0;
    let mut mean_logp = 0.0;
    let mut scratch = MlpGrads::zeros_like(critic1);
    for i in 0..batch.n {
        let eps = &noise[i * batch.action_dim..(i + 1) * batch.action_dim];
        let eval = actor_sample(actor, batch.state(i), eps);
        let x = concat(batch.state(i), &eval.action);
        let c1 = critic1.forward_cached(&x);
        let c2 = critic2.forward_cached(&x);
        let (q, argmin): (f64, &Mlp) = if c1.output()[0] <= c2.output()[0] {
            (c1.output()[0], critic1)
        } else {
            (c2.output()[0], critic2)
        };
        loss += (temp * eval.log_prob - q) / n;
        mean_logp += eval.log_prob / n;

        let cache = if c1.output()[0] <= c2.output()[0] { &c1 } else { &c2 };
        let input_grad = argmin
            .backward(cache, &[-1.0 / n], &mut scratch, true)
            .expect("input grad requested");
        let d_action = &input_grad[batch.obs_dim..];
        actor_backward(actor, &eval, d_action, temp / n, grads);
    }
    (loss, mean_logp)
}
