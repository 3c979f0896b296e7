//! The full training loop: behavior cloning, then alternating critic /
//! weight-net / actor updates with Polyak-averaged twin targets, periodic
//! evaluation, and average-Q model selection.
//!
//! A run directory holds run.json (provenance), metrics.csv (one row per
//! evaluation point), one checkpoint per evaluation point, and
//! selected.json naming the checkpoint with the highest mean dataset Q.
//! Every draw site derives its generator from (seed, component, step), so
//! reruns are byte-identical and weight-mode variants consume identical
//! random streams.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::approximator::{
    actor_mean_action, actor_sample, adam_step, behavior_log_prob, concat, polyak_update,
    AdamState, Checkpoint, Mlp, MlpGrads, ScalarAdam,
};
use crate::config::RunConfig;
use crate::dataset::{compute_stats, OfflineDataset};
use crate::envs::{PointMass2D, HORIZON, POINT_MASS_ENV};
use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::losses::{
    acl_penalty, actor_loss, bc_loss, cql_penalty, derangement, monotonicity_loss,
    positivity_loss, surrogate_hinges, td_backup, td_loss, weight_total_loss, BatchSample,
    LossReport, WeightLossBreakdown,
};
use crate::quality::{check_alignment, gaps, ood_quality, QualityAnnotations};
use crate::rng::{stream, StreamId};

/// Bounds on ln(temperature). The auto-tuner raises the temperature whenever
/// policy entropy sits below -action_dim; with a dataset-shaped critic the
/// entropy stays pinned low, so an unbounded temperature ratchets up until
/// the entropy bonus drowns the Q term in the actor loss. Capping at 1
/// keeps the tuner active in the regime where it is useful.
pub const LOG_TEMP_MIN: f64 = -10.0;
pub const LOG_TEMP_MAX: f64 = 0.0;

/// Adam rate for the supervised cloning phases. These are plain regression
/// fits, so their rate is fixed rather than tied to lr_actor; bc_steps then
/// buys the same fit quality no matter how gently the policy itself is
/// updated later.
pub const BC_LR: f64 = 3e-3;

/// Where the conservatism weights come from during training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightMode {
    /// Two-headed weight net, trained every step.
    Learned,
    /// Same machinery as `Learned`, but the net's output layer is pinned to
    /// a constant at initialization. With lr_weight = 0 it stays there,
    /// which makes the run comparable bit for bit with `CqlBaseline`.
    Pinned(f64),
    /// Constant-alpha baseline on its own penalty code path; no weight-net
    /// update.
    CqlBaseline(f64),
    /// No conservative penalty at all.
    Unconstrained,
}

impl std::fmt::Display for WeightMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            WeightMode::Learned => write!(f, "learned"),
            WeightMode::Pinned(c) => write!(f, "pinned({c})"),
            WeightMode::CqlBaseline(a) => write!(f, "cql-baseline({a})"),
            WeightMode::Unconstrained => write!(f, "unconstrained"),
        }
    }
}

/// Dataset flattened to row-major arrays with per-transition quality and
/// conservatism gaps, so minibatch gathers are plain memcpys.
#[derive(Debug, Clone)]
pub struct FlatData {
    pub n: usize,
    pub obs_dim: usize,
    pub action_dim: usize,
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
    pub next_states: Vec<f64>,
    pub dones: Vec<f64>,
    pub m: Vec<f64>,
    pub d_ord: Vec<f64>,
    pub d_cql: Vec<f64>,
    pub r_max: f64,
}

impl FlatData {
    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.obs_dim..(i + 1) * self.obs_dim]
    }

    pub fn action(&self, i: usize) -> &[f64] {
        &self.actions[i * self.action_dim..(i + 1) * self.action_dim]
    }
}

pub fn flatten(dataset: &OfflineDataset, ann: &QualityAnnotations) -> Result<FlatData> {
    check_alignment(dataset, ann)?;
    flatten_core(dataset, Some(ann))
}

/// Flattening without annotations: quality parks mid-scale and the gaps
/// follow from it. Only paths that ignore the quality columns, like
/// behavior cloning, should rely on the placeholders.
pub fn flatten_unannotated(dataset: &OfflineDataset) -> Result<FlatData> {
    flatten_core(dataset, None)
}

fn flatten_core(dataset: &OfflineDataset, ann: Option<&QualityAnnotations>) -> Result<FlatData> {
    dataset.validate()?;
    let stats = compute_stats(dataset)?;
    let n = dataset.n_transitions();
    let (obs_dim, action_dim) = (dataset.header.obs_dim, dataset.header.action_dim);
    let mut flat = FlatData {
        n,
        obs_dim,
        action_dim,
        states: Vec::with_capacity(n * obs_dim),
        actions: Vec::with_capacity(n * action_dim),
        rewards: Vec::with_capacity(n),
        next_states: Vec::with_capacity(n * obs_dim),
        dones: Vec::with_capacity(n),
        m: Vec::with_capacity(n),
        d_ord: Vec::with_capacity(n),
        d_cql: Vec::with_capacity(n),
        r_max: stats.r_max,
    };
    for (i, tr) in dataset.iter_transitions().enumerate() {
        flat.states.extend_from_slice(&tr.s);
        flat.actions.extend_from_slice(&tr.a);
        flat.rewards.push(tr.r);
        flat.next_states.extend_from_slice(&tr.s2);
        flat.dones.push(if tr.done { 1.0 } else { 0.0 });
        let m = match ann {
            Some(a) => a.rows[i].m,
            None => 0.5,
        };
        flat.m.push(m);
        let pair = gaps(m, stats.r_max);
        flat.d_ord.push(pair.d_ord);
        flat.d_cql.push(pair.d_cql);
    }
    Ok(flat)
}

/// Everything that changes while training. Optimizer moments live here so a
/// state plus a config replays deterministically.
pub struct TrainerState {
    pub actor: Mlp,
    pub critic1: Mlp,
    pub critic2: Mlp,
    pub target1: Mlp,
    pub target2: Mlp,
    pub weight_net: Mlp,
    pub behavior: Mlp,
    pub log_temp: f64,
    pub step: u64,
    opt_actor: AdamState,
    opt_critic1: AdamState,
    opt_critic2: AdamState,
    opt_weight: AdamState,
    opt_temp: ScalarAdam,
}

/// Rebuilds the block names of a cloned net under a new prefix, so targets
/// and their online critics never collide inside a checkpoint.
fn clone_as(net: &Mlp, name: &str) -> Mlp {
    let mut out = net.clone();
    for l in 0..out.n_layers() {
        out.blocks[2 * l].name = format!("{name}.l{l}.w");
        out.blocks[2 * l + 1].name = format!("{name}.l{l}.b");
    }
    out
}

impl TrainerState {
    /// Fresh nets from the seed's init streams; targets start as exact
    /// copies of their critics; temperature starts at 1.
    pub fn new(obs_dim: usize, action_dim: usize, behavior: Mlp, config: &RunConfig) -> Self {
        assert_eq!(behavior.input_dim, obs_dim, "behavior input dim");
        assert_eq!(behavior.output_dim, action_dim, "behavior output dim");
        let h = &config.hidden;
        let actor = Mlp::new(
            "actor",
            obs_dim,
            h,
            2 * action_dim,
            &mut stream(config.seed, StreamId::NetInit, 0),
            1e-2,
        );
        let critic1 = Mlp::new(
            "critic1",
            obs_dim + action_dim,
            h,
            1,
            &mut stream(config.seed, StreamId::NetInit, 1),
            1.0,
        );
        let critic2 = Mlp::new(
            "critic2",
            obs_dim + action_dim,
            h,
            1,
            &mut stream(config.seed, StreamId::NetInit, 2),
            1.0,
        );
        let weight_net = Mlp::new(
            "weight",
            obs_dim + action_dim,
            h,
            2,
            &mut stream(config.seed, StreamId::NetInit, 3),
            1.0,
        );
        let target1 = clone_as(&critic1, "target1");
        let target2 = clone_as(&critic2, "target2");
        TrainerState {
            opt_actor: AdamState::new(&actor),
            opt_critic1: AdamState::new(&critic1),
            opt_critic2: AdamState::new(&critic2),
            opt_weight: AdamState::new(&weight_net),
            opt_temp: ScalarAdam::default(),
            actor,
            critic1,
            critic2,
            target1,
            target2,
            weight_net,
            behavior,
            log_temp: 0.0,
            step: 0,
        }
    }

    pub fn temperature(&self) -> f64 {
        self.log_temp.exp()
    }
}

/// Zeroes the weight net's output layer and sets both head biases to `c`,
/// so every (state, action) maps to exactly (c, c).
pub fn pin_weight_net(net: &mut Mlp, c: f64) {
    let last = net.n_layers() - 1;
    for v in &mut net.blocks[2 * last].values {
        *v = 0.0;
    }
    for v in &mut net.blocks[2 * last + 1].values {
        *v = c;
    }
}

/// Behavior cloning: `bc_steps` Adam steps of mean-squared action error on
/// minibatches from the cloning stream. Returns the net and the loss of the
/// final step (0 when no steps ran).
pub fn pretrain_bc(flat: &FlatData, config: &RunConfig) -> Result<(Mlp, f64)> {
    let mut net = Mlp::new(
        "behavior",
        flat.obs_dim,
        &config.hidden,
        flat.action_dim,
        &mut stream(config.seed, StreamId::NetInit, 4),
        1.0,
    );
    let mut opt = AdamState::new(&net);
    let mut last = 0.0;
    for s in 1..=config.bc_steps {
        let mut rng = stream(config.seed, StreamId::BcBatch, s);
        let rows: Vec<usize> = (0..config.batch_size)
            .map(|_| rng.gen_range(0..flat.n))
            .collect();
        let batch = gather_rows(flat, &rows, 1);
        let mut grads = MlpGrads::zeros_like(&net);
        let loss = bc_loss(&net, &batch, &mut grads);
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("behavior cloning loss at step {s}")));
        }
        adam_step(&mut net, &grads, &mut opt, BC_LR);
        last = loss;
    }
    Ok((net, last))
}

/// Fits the actor's mean head to the dataset actions for bc_steps before any
/// critic feedback exists, so the policy starts on the data manifold instead
/// of wherever the fresh critic's extrapolation points. The squash makes
/// this a tanh regression; the log-std head receives no gradient. Consumes
/// the same batch stream as the behavior fit, so reruns stay bitwise stable.
pub fn warm_start_actor(flat: &FlatData, actor: &mut Mlp, config: &RunConfig) -> Result<f64> {
    let d = flat.action_dim;
    let mut opt = AdamState::new(actor);
    let mut last = 0.0;
    for s in 1..=config.bc_steps {
        let mut rng = stream(config.seed, StreamId::BcBatch, s);
        let rows: Vec<usize> = (0..config.batch_size)
            .map(|_| rng.gen_range(0..flat.n))
            .collect();
        let total = (rows.len() * d) as f64;
        let mut grads = MlpGrads::zeros_like(actor);
        let mut loss = 0.0;
        for &r in &rows {
            let cache = actor.forward_cached(flat.state(r));
            let out = cache.output();
            let target = flat.action(r);
            let mut d_out = vec![0.0; out.len()];
            for (i, (pred_raw, t)) in out[..d].iter().zip(target).enumerate() {
                let pred = pred_raw.tanh();
                let resid = pred - t;
                loss += resid * resid / total;
                d_out[i] = 2.0 * resid * (1.0 - pred * pred) / total;
            }
            actor.backward(&cache, &d_out, &mut grads, false);
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("actor warm start loss at step {s}")));
        }
        adam_step(actor, &grads, &mut opt, BC_LR);
        last = loss;
    }
    Ok(last)
}

/// Copies the chosen dataset rows into a batch, leaving the policy-sample
/// fields zeroed for the caller to fill.
fn gather_rows(flat: &FlatData, rows: &[usize], k: usize) -> BatchSample {
    let n = rows.len();
    let (od, ad) = (flat.obs_dim, flat.action_dim);
    let mut b = BatchSample {
        n,
        k,
        obs_dim: od,
        action_dim: ad,
        states: Vec::with_capacity(n * od),
        actions: Vec::with_capacity(n * ad),
        rewards: Vec::with_capacity(n),
        next_states: Vec::with_capacity(n * od),
        dones: Vec::with_capacity(n),
        m_in: Vec::with_capacity(n),
        ood_actions: vec![0.0; n * k * ad],
        ood_log_prob_pi: vec![0.0; n * k],
        in_log_prob_beta: vec![0.0; n],
        ood_log_prob_beta: vec![0.0; n * k],
        m_ood: vec![0.0; n * k],
        d_ord: Vec::with_capacity(n),
        d_cql: Vec::with_capacity(n),
    };
    for &r in rows {
        b.states.extend_from_slice(flat.state(r));
        b.actions.extend_from_slice(flat.action(r));
        b.rewards.push(flat.rewards[r]);
        b.next_states
            .extend_from_slice(&flat.next_states[r * od..(r + 1) * od]);
        b.dones.push(flat.dones[r]);
        b.m_in.push(flat.m[r]);
        b.d_ord.push(flat.d_ord[r]);
        b.d_cql.push(flat.d_cql[r]);
    }
    b
}

/// One training minibatch for step `step`: uniformly drawn rows plus `k`
/// policy samples per row with their log densities under the policy and the
/// cloned behavior model, and the transferred quality of each sample.
/// `ln_beta_in` holds the precomputed behavior log density at every dataset
/// action (the behavior net is frozen after cloning).
pub fn assemble_batch(
    flat: &FlatData,
    ln_beta_in: &[f64],
    actor: &Mlp,
    behavior: &Mlp,
    config: &RunConfig,
    step: u64,
) -> Result<BatchSample> {
    assert_eq!(ln_beta_in.len(), flat.n, "behavior log density rows");
    let mut row_rng = stream(config.seed, StreamId::Batch, step);
    let rows: Vec<usize> = (0..config.batch_size)
        .map(|_| row_rng.gen_range(0..flat.n))
        .collect();
    let k = config.n_ood_samples;
    let mut b = gather_rows(flat, &rows, k);
    for (i, &r) in rows.iter().enumerate() {
        b.in_log_prob_beta[i] = ln_beta_in[r];
    }

    let ad = flat.action_dim;
    let mut ood_rng = stream(config.seed, StreamId::OodNoise, step);
    for i in 0..b.n {
        for j in 0..k {
            let noise: Vec<f64> = (0..ad)
                .map(|_| StandardNormal.sample(&mut ood_rng))
                .collect();
            let eval = actor_sample(actor, b.state(i), &noise);
            let f = i * k + j;
            b.ood_actions[f * ad..(f + 1) * ad].copy_from_slice(&eval.action);
            b.ood_log_prob_pi[f] = eval.log_prob;
            b.ood_log_prob_beta[f] =
                behavior_log_prob(behavior, b.state(i), &eval.action, config.bc_sigma);
            b.m_ood[f] = ood_quality(b.m_in[i], &eval.action, b.action(i))?;
        }
    }
    b.validate()?;
    Ok(b)
}

/// One step's losses plus the mean weight each side actually received.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepRecord {
    pub report: LossReport,
    pub w_mu_mean: f64,
    pub w_beta_mean: f64,
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn finite(x: f64, what: &str, step: u64) -> Result<f64> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::NonFinite(format!("{what} loss at step {step}")))
    }
}

/// One alternating update: twin critics on frozen targets plus the
/// conservative penalty, then the weight net, then the actor and its
/// entropy temperature, then Polyak target tracking.
pub fn train_step(
    state: &mut TrainerState,
    batch: &BatchSample,
    config: &RunConfig,
    mode: WeightMode,
) -> Result<StepRecord> {
    let s = state.step + 1;

    // Frozen one-step backups with policy actions at the next states.
    let mut td_rng = stream(config.seed, StreamId::TdNoise, s);
    let mut next_actions = Vec::with_capacity(batch.n * batch.action_dim);
    for i in 0..batch.n {
        let noise: Vec<f64> = (0..batch.action_dim)
            .map(|_| StandardNormal.sample(&mut td_rng))
            .collect();
        next_actions.extend_from_slice(&actor_sample(&state.actor, batch.next_state(i), &noise).action);
    }
    let targets = td_backup(&state.target1, &state.target2, batch, &next_actions, config.gamma);

    // Weight values for the penalty, frozen with respect to the critic
    // update; in the learned modes also the weight-net gradients.
    let anchor = config.alpha_cql_anchor;
    let (w_mu, w_beta, breakdown, weight_grads) = match mode {
        WeightMode::Learned | WeightMode::Pinned(_) => {
            let mut pair_rng = stream(config.seed, StreamId::MonoPairing, s);
            let pair_mu = derangement(batch.n * batch.k, &mut pair_rng)?;
            let pair_beta = derangement(batch.n, &mut pair_rng)?;
            let mut grads = MlpGrads::zeros_like(&state.weight_net);
            let (bd, eval) =
                weight_total_loss(&state.weight_net, batch, anchor, &pair_mu, &pair_beta, &mut grads)?;
            (eval.w_mu, eval.w_beta, bd, Some(grads))
        }
        WeightMode::CqlBaseline(c) => {
            // Diagnostics only: the same loss functions the learned path
            // uses, evaluated at the constant weights, so a pinned run is
            // comparable column for column.
            let mut pair_rng = stream(config.seed, StreamId::MonoPairing, s);
            let pair_mu = derangement(batch.n * batch.k, &mut pair_rng)?;
            let pair_beta = derangement(batch.n, &mut pair_rng)?;
            let w_mu = vec![c; batch.n * batch.k];
            let w_beta = vec![c; batch.n];
            let (mono, _, _) =
                monotonicity_loss(&w_mu, &batch.m_ood, &w_beta, &batch.m_in, &pair_mu, &pair_beta)?;
            let hinges = surrogate_hinges(
                batch.n,
                batch.k,
                &w_mu,
                &w_beta,
                &batch.ood_log_prob_pi,
                &batch.in_log_prob_beta,
                &batch.d_ord,
                &batch.d_cql,
                anchor,
            )?;
            let (pos, _, _) = positivity_loss(&w_mu, &w_beta);
            let bd = WeightLossBreakdown {
                total: mono + hinges.l_ord + hinges.l_cql + pos,
                mono,
                ord: hinges.l_ord,
                cql: hinges.l_cql,
                pos,
            };
            (w_mu, w_beta, bd, None)
        }
        WeightMode::Unconstrained => (
            Vec::new(),
            Vec::new(),
            WeightLossBreakdown { total: 0.0, mono: 0.0, ord: 0.0, cql: 0.0, pos: 0.0 },
            None,
        ),
    };
    finite(breakdown.total, "weight", s)?;

    // Critic update.
    let mut g1 = MlpGrads::zeros_like(&state.critic1);
    let mut g2 = MlpGrads::zeros_like(&state.critic2);
    let td1 = finite(td_loss(&state.critic1, batch, &targets, &mut g1), "critic 1 td", s)?;
    let td2 = finite(td_loss(&state.critic2, batch, &targets, &mut g2), "critic 2 td", s)?;
    let (pen1, pen2) = match mode {
        WeightMode::Learned | WeightMode::Pinned(_) => (
            acl_penalty(&state.critic1, batch, &w_mu, &w_beta, &mut g1),
            acl_penalty(&state.critic2, batch, &w_mu, &w_beta, &mut g2),
        ),
        WeightMode::CqlBaseline(c) => (
            cql_penalty(&state.critic1, batch, c, &mut g1),
            cql_penalty(&state.critic2, batch, c, &mut g2),
        ),
        WeightMode::Unconstrained => (0.0, 0.0),
    };
    finite(pen1, "critic 1 penalty", s)?;
    finite(pen2, "critic 2 penalty", s)?;
    adam_step(&mut state.critic1, &g1, &mut state.opt_critic1, config.lr_critic);
    adam_step(&mut state.critic2, &g2, &mut state.opt_critic2, config.lr_critic);

    // Weight-net update.
    if let Some(grads) = weight_grads {
        adam_step(&mut state.weight_net, &grads, &mut state.opt_weight, config.lr_weight);
    }

    // Actor and temperature update.
    let mut actor_rng = stream(config.seed, StreamId::ActorNoise, s);
    let noise: Vec<f64> = (0..batch.n * batch.action_dim)
        .map(|_| StandardNormal.sample(&mut actor_rng))
        .collect();
    let mut ga = MlpGrads::zeros_like(&state.actor);
    let (actor_l, mean_logp) = actor_loss(
        &state.actor,
        &state.critic1,
        &state.critic2,
        batch,
        state.temperature(),
        &noise,
        &mut ga,
    );
    finite(actor_l, "actor", s)?;
    adam_step(&mut state.actor, &ga, &mut state.opt_actor, config.lr_actor);
    // Temperature drifts until the policy entropy reaches -action_dim.
    let target_entropy = -(batch.action_dim as f64);
    let d_log_temp = -(mean_logp + target_entropy);
    state
        .opt_temp
        .step(&mut state.log_temp, d_log_temp, config.lr_actor);
    state.log_temp = state.log_temp.clamp(LOG_TEMP_MIN, LOG_TEMP_MAX);

    polyak_update(&mut state.target1, &state.critic1, config.polyak_rate);
    polyak_update(&mut state.target2, &state.critic2, config.polyak_rate);
    state.step = s;

    Ok(StepRecord {
        report: LossReport {
            td: 0.5 * (td1 + td2),
            penalty: 0.5 * (pen1 + pen2),
            mono: breakdown.mono,
            ord: breakdown.ord,
            cql: breakdown.cql,
            pos: breakdown.pos,
            bc: 0.0,
            actor: actor_l,
            weight_total: breakdown.total,
        },
        w_mu_mean: mean(&w_mu),
        w_beta_mean: mean(&w_beta),
    })
}

/// Rolls `episodes` evaluation episodes with deterministic mean actions and
/// returns the mean and population standard deviation of the undiscounted
/// returns. The dynamics and the start state are deterministic, so requesting
/// several episodes measures the same rollout; the fan-out exists for
/// environments with stochastic resets.
pub fn evaluate_policy(actor: &Mlp, episodes: u64, exec: ExecMode) -> (f64, f64) {
    assert!(episodes >= 1, "need at least one evaluation episode");
    let returns: Vec<f64> = exec.map_indices(episodes as usize, |_| {
        let mut env = PointMass2D::default();
        let mut obs = env.reset();
        let mut ret = 0.0;
        for _ in 0..HORIZON {
            let a = actor_mean_action(actor, &obs);
            let out = env.step([a[0], a[1]]);
            ret += out.reward;
            obs = out.obs;
        }
        ret
    });
    let mean_ret = returns.iter().sum::<f64>() / returns.len() as f64;
    let var = returns
        .iter()
        .map(|r| (r - mean_ret) * (r - mean_ret))
        .sum::<f64>()
        / returns.len() as f64;
    (mean_ret, var.sqrt())
}

/// Mean over the given states of min-twin Q at the actor's mean action: the
/// model-selection statistic.
pub fn avg_q_from_states(
    actor: &Mlp,
    critic1: &Mlp,
    critic2: &Mlp,
    states: &[f64],
    obs_dim: usize,
    exec: ExecMode,
) -> f64 {
    let n = states.len() / obs_dim;
    assert!(n > 0 && states.len() == n * obs_dim, "state array shape");
    let q: Vec<f64> = exec.map_indices(n, |i| {
        let s = &states[i * obs_dim..(i + 1) * obs_dim];
        let a = actor_mean_action(actor, s);
        let x = concat(s, &a);
        critic1.forward(&x)[0].min(critic2.forward(&x)[0])
    });
    q.iter().sum::<f64>() / n as f64
}

pub fn avg_dataset_q(
    actor: &Mlp,
    critic1: &Mlp,
    critic2: &Mlp,
    flat: &FlatData,
    exec: ExecMode,
) -> f64 {
    avg_q_from_states(actor, critic1, critic2, &flat.states, flat.obs_dim, exec)
}

/// Picks the checkpoint whose actor/critics give the highest mean dataset
/// Q, ties broken by the latest step. Returns the winning step.
pub fn select_model(
    checkpoints: &[Checkpoint],
    dataset: &OfflineDataset,
    exec: ExecMode,
) -> Result<u64> {
    if checkpoints.is_empty() {
        return Err(Error::Usage("no checkpoints to select from".into()));
    }
    let states: Vec<f64> = dataset
        .iter_transitions()
        .flat_map(|tr| tr.s.iter().copied())
        .collect();
    let obs_dim = dataset.header.obs_dim;
    let mut best: Option<(f64, u64)> = None;
    for ck in checkpoints {
        let actor = ck.extract_net("actor")?;
        let c1 = ck.extract_net("critic1")?;
        let c2 = ck.extract_net("critic2")?;
        let avg = avg_q_from_states(&actor, &c1, &c2, &states, obs_dim, exec);
        let better = match best {
            None => true,
            Some((bq, bs)) => avg > bq || (avg == bq && ck.step > bs),
        };
        if better {
            best = Some((avg, ck.step));
        }
    }
    Ok(best.expect("nonempty checkpoint set").1)
}

/// Spearman rank correlation with average ranks on ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len(), "rank correlation lengths");
    assert!(xs.len() >= 2, "rank correlation needs >= 2 points");
    let rx = ranks(xs);
    let ry = ranks(ys);
    let n = rx.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx.sqrt() * vy.sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).expect("finite values"));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        // Ranks are 1-based; a run of equal values shares the average rank.
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

pub const METRICS_HEADER: &str =
    "step,td,penalty,mono,ord,cql,pos,actor,w_mu_mean,w_beta_mean,avg_q_dataset,eval_mean,eval_std";

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics_path: PathBuf,
    pub checkpoints: Vec<(u64, PathBuf)>,
    pub selected_step: u64,
    pub bc_final_mse: f64,
    pub final_avg_q: f64,
    pub final_eval_mean: f64,
    pub final_eval_std: f64,
}

#[derive(Serialize)]
struct RunMeta<'a> {
    version: u32,
    config_hash: &'a str,
    env: &'a str,
    weight_mode: String,
    bc_final_mse: f64,
}

#[derive(Serialize)]
struct SelectedModel<'a> {
    version: u32,
    config_hash: &'a str,
    step: u64,
}

fn make_checkpoint(state: &TrainerState, hash: &str) -> Checkpoint {
    let mut ck = Checkpoint::new(hash, state.step);
    ck.insert_net(&state.actor);
    ck.insert_net(&state.critic1);
    ck.insert_net(&state.critic2);
    ck.insert_net(&state.target1);
    ck.insert_net(&state.target2);
    ck.insert_net(&state.weight_net);
    ck.insert_net(&state.behavior);
    ck.scalars.insert("log_temp".into(), state.log_temp);
    ck
}

/// Clones the behavior policy, then runs `train_steps` alternating updates,
/// writing a metrics row and a checkpoint at step 0, every `eval_every`
/// steps, and at the final step. Finishes by selecting the checkpoint with
/// the highest mean dataset Q.
pub fn run_training(
    dataset: &OfflineDataset,
    ann: &QualityAnnotations,
    config: &RunConfig,
    mode: WeightMode,
    run_dir: &Path,
    exec: ExecMode,
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.header.env != POINT_MASS_ENV {
        return Err(Error::Config(format!(
            "training supports only {POINT_MASS_ENV}, dataset is for {}",
            dataset.header.env
        )));
    }
    let flat = flatten(dataset, ann)?;
    std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let hash = config.hash();

    let (behavior, bc_final_mse) = pretrain_bc(&flat, config)?;
    let ln_beta_in: Vec<f64> = exec.map_indices(flat.n, |i| {
        behavior_log_prob(&behavior, flat.state(i), flat.action(i), config.bc_sigma)
    });
    let mut state = TrainerState::new(flat.obs_dim, flat.action_dim, behavior, config);
    warm_start_actor(&flat, &mut state.actor, config)?;
    if let WeightMode::Pinned(c) = mode {
        pin_weight_net(&mut state.weight_net, c);
    }

    let meta = RunMeta {
        version: 1,
        config_hash: &hash,
        env: &dataset.header.env,
        weight_mode: mode.to_string(),
        bc_final_mse,
    };
    let meta_path = run_dir.join("run.json");
    std::fs::write(
        &meta_path,
        serde_json::to_string(&meta).expect("run metadata serializes") + "\n",
    )
    .map_err(|e| Error::io(&meta_path, e))?;

    let metrics_path = run_dir.join("metrics.csv");
    let file = File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut out = BufWriter::new(file);
    writeln!(out, "{METRICS_HEADER}").map_err(|e| Error::io(&metrics_path, e))?;

    let mut checkpoints: Vec<(u64, PathBuf)> = Vec::new();
    let mut ckpt_objs: Vec<Checkpoint> = Vec::new();

    let emit = |state: &TrainerState,
                    rec: &StepRecord,
                    out: &mut BufWriter<File>,
                    checkpoints: &mut Vec<(u64, PathBuf)>,
                    ckpt_objs: &mut Vec<Checkpoint>|
     -> Result<(f64, f64, f64)> {
        let (eval_mean, eval_std) = evaluate_policy(&state.actor, config.eval_episodes, exec);
        let avg_q = avg_dataset_q(&state.actor, &state.critic1, &state.critic2, &flat, exec);
        let r = &rec.report;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            state.step,
            r.td,
            r.penalty,
            r.mono,
            r.ord,
            r.cql,
            r.pos,
            r.actor,
            rec.w_mu_mean,
            rec.w_beta_mean,
            avg_q,
            eval_mean,
            eval_std
        )
        .map_err(|e| Error::io(&metrics_path, e))?;
        let ck = make_checkpoint(state, &hash);
        let path = run_dir.join(format!("ckpt_{:08}.json", state.step));
        ck.save(&path)?;
        checkpoints.push((state.step, path));
        ckpt_objs.push(ck);
        Ok((avg_q, eval_mean, eval_std))
    };

    let mut final_stats =
        emit(&state, &StepRecord::default(), &mut out, &mut checkpoints, &mut ckpt_objs)?;
    for s in 1..=config.train_steps {
        let batch = assemble_batch(&flat, &ln_beta_in, &state.actor, &state.behavior, config, s)?;
        let rec = train_step(&mut state, &batch, config, mode)?;
        if s % config.eval_every == 0 || s == config.train_steps {
            final_stats = emit(&state, &rec, &mut out, &mut checkpoints, &mut ckpt_objs)?;
        }
    }
    out.flush().map_err(|e| Error::io(&metrics_path, e))?;

    let selected_step = select_model(&ckpt_objs, dataset, exec)?;
    let selected = SelectedModel { version: 1, config_hash: &hash, step: selected_step };
    let sel_path = run_dir.join("selected.json");
    std::fs::write(
        &sel_path,
        serde_json::to_string(&selected).expect("selection serializes") + "\n",
    )
    .map_err(|e| Error::io(&sel_path, e))?;

    Ok(TrainOutcome {
        metrics_path,
        checkpoints,
        selected_step,
        bc_final_mse,
        final_avg_q: final_stats.0,
        final_eval_mean: final_stats.1,
        final_eval_std: final_stats.2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::QualityMode;
    use crate::envs::{gen_point_mass, QualityTier};
    use crate::quality::annotate_dataset;

    fn desk_config() -> RunConfig {
        RunConfig {
            batch_size: 8,
            bc_steps: 5,
            train_steps: 10,
            eval_every: 4,
            eval_episodes: 2,
            n_ood_samples: 2,
            lr_actor: 1e-3,
            hidden: vec![8, 8],
            seed: 5,
            ..RunConfig::default()
        }
    }

    /// States in [-1,1]^2, actions from a fixed affine map: a clean target
    /// for the cloning test and a cheap stand-in dataset elsewhere.
    fn linear_flat(n: usize, seed: u64) -> FlatData {
        let mut rng = stream(seed, StreamId::GradCheck, 3);
        let mut states = Vec::with_capacity(n * 2);
        let mut actions = Vec::with_capacity(n);
        let mut m = Vec::with_capacity(n);
        for _ in 0..n {
            let s = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            states.extend_from_slice(&s);
            actions.push(0.6 * s[0] - 0.3 * s[1] + 0.1);
            m.push(rng.gen_range(0.0..1.0));
        }
        let (d_ord, d_cql): (Vec<f64>, Vec<f64>) = m
            .iter()
            .map(|&mi| {
                let g = gaps(mi, 1.0);
                (g.d_ord, g.d_cql)
            })
            .unzip();
        FlatData {
            n,
            obs_dim: 2,
            action_dim: 1,
            next_states: states.clone(),
            states,
            actions,
            rewards: vec![0.0; n],
            dones: vec![0.0; n],
            m,
            d_ord,
            d_cql,
            r_max: 1.0,
        }
    }

    #[test]
    fn targets_start_as_exact_copies_with_their_own_names() {
        let cfg = desk_config();
        let flat = linear_flat(32, 1);
        let (behavior, _) = pretrain_bc(&flat, &cfg).unwrap();
        let state = TrainerState::new(2, 1, behavior, &cfg);
        assert_eq!(state.target1.flat_params(), state.critic1.flat_params());
        assert_eq!(state.target2.flat_params(), state.critic2.flat_params());
        assert_eq!(state.target1.blocks[0].name, "target1.l0.w");
        assert_eq!(state.critic1.blocks[0].name, "critic1.l0.w");
        assert_eq!(state.log_temp, 0.0);
        assert_eq!(state.step, 0);
    }

    #[test]
    fn cloning_fits_a_linear_policy_and_replays_exactly() {
        let flat = linear_flat(512, 2);
        let cfg = RunConfig {
            bc_steps: 10_000,
            batch_size: 64,
            lr_actor: 1e-3,
            hidden: vec![16, 16],
            seed: 9,
            ..RunConfig::default()
        };
        let (net, mse) = pretrain_bc(&flat, &cfg).unwrap();
        assert!(mse < 1e-3, "final cloning mse {mse}");
        let (net2, mse2) = pretrain_bc(&flat, &cfg).unwrap();
        assert_eq!(net.flat_params(), net2.flat_params());
        assert_eq!(mse.to_bits(), mse2.to_bits());

        // Zero steps leave the freshly initialized parameters untouched.
        let cfg0 = RunConfig { bc_steps: 0, ..cfg };
        let (net0, mse0) = pretrain_bc(&flat, &cfg0).unwrap();
        let fresh = Mlp::new(
            "behavior",
            2,
            &cfg0.hidden,
            1,
            &mut stream(cfg0.seed, StreamId::NetInit, 4),
            1.0,
        );
        assert_eq!(net0.flat_params(), fresh.flat_params());
        assert_eq!(mse0, 0.0);
    }

    fn fresh_state(cfg: &RunConfig, flat: &FlatData) -> (TrainerState, Vec<f64>) {
        let (behavior, _) = pretrain_bc(flat, cfg).unwrap();
        let ln_beta: Vec<f64> = (0..flat.n)
            .map(|i| behavior_log_prob(&behavior, flat.state(i), flat.action(i), cfg.bc_sigma))
            .collect();
        (TrainerState::new(flat.obs_dim, flat.action_dim, behavior, cfg), ln_beta)
    }

    #[test]
    fn steps_replay_bit_for_bit() {
        let cfg = desk_config();
        let flat = linear_flat(64, 3);
        let run = || -> (Vec<StepRecord>, Vec<f64>) {
            let (mut state, ln_beta) = fresh_state(&cfg, &flat);
            let mut recs = Vec::new();
            for s in 1..=3 {
                let batch =
                    assemble_batch(&flat, &ln_beta, &state.actor, &state.behavior, &cfg, s).unwrap();
                recs.push(train_step(&mut state, &batch, &cfg, WeightMode::Learned).unwrap());
            }
            (recs, state.actor.flat_params())
        };
        let (r1, p1) = run();
        let (r2, p2) = run();
        for (a, b) in r1.iter().zip(&r2) {
            assert_eq!(a.report.td.to_bits(), b.report.td.to_bits());
            assert_eq!(a.report.penalty.to_bits(), b.report.penalty.to_bits());
            assert_eq!(a.report.actor.to_bits(), b.report.actor.to_bits());
            assert_eq!(a.report.weight_total.to_bits(), b.report.weight_total.to_bits());
            assert_eq!(a.w_mu_mean.to_bits(), b.w_mu_mean.to_bits());
        }
        assert_eq!(p1, p2);
    }

    #[test]
    fn zero_learning_rates_freeze_everything_but_the_step_counter() {
        let cfg = RunConfig {
            lr_critic: 0.0,
            lr_actor: 0.0,
            lr_weight: 0.0,
            ..desk_config()
        };
        let flat = linear_flat(64, 4);
        let (mut state, ln_beta) = fresh_state(&cfg, &flat);
        let before_actor = state.actor.flat_params();
        let before_c1 = state.critic1.flat_params();
        let before_c2 = state.critic2.flat_params();
        let before_w = state.weight_net.flat_params();
        let before_temp = state.log_temp;
        let batch = assemble_batch(&flat, &ln_beta, &state.actor, &state.behavior, &cfg, 1).unwrap();
        train_step(&mut state, &batch, &cfg, WeightMode::Learned).unwrap();
        assert_eq!(state.actor.flat_params(), before_actor);
        assert_eq!(state.critic1.flat_params(), before_c1);
        assert_eq!(state.critic2.flat_params(), before_c2);
        assert_eq!(state.weight_net.flat_params(), before_w);
        assert_eq!(state.log_temp, before_temp);
        assert_eq!(state.step, 1);
        // Polyak still averages target toward an unchanged critic, which is
        // an identity only up to rounding.
        for (t, c) in state.target1.flat_params().iter().zip(&before_c1) {
            assert!((t - c).abs() < 1e-12);
        }
    }

    #[test]
    fn pinned_run_reproduces_the_baseline_metrics_file_byte_for_byte() {
        let data = gen_point_mass(QualityTier::Medium, 2, 3, 0.99);
        let ann = annotate_dataset(&data, 0.5, QualityMode::LambdaMix, ExecMode::Sequential).unwrap();
        let cfg = RunConfig {
            lr_weight: 0.0,
            seed: 11,
            ..desk_config()
        };
        let dir = tempfile::tempdir().unwrap();
        let a = run_training(
            &data,
            &ann,
            &cfg,
            WeightMode::Pinned(cfg.alpha_cql_anchor),
            &dir.path().join("a"),
            ExecMode::Sequential,
        )
        .unwrap();
        let b = run_training(
            &data,
            &ann,
            &cfg,
            WeightMode::CqlBaseline(cfg.alpha_cql_anchor),
            &dir.path().join("b"),
            ExecMode::Sequential,
        )
        .unwrap();
        let ma = std::fs::read(&a.metrics_path).unwrap();
        let mb = std::fs::read(&b.metrics_path).unwrap();
        assert_eq!(ma, mb);
        assert!(!ma.is_empty());
    }

    #[test]
    fn run_directory_has_rows_checkpoints_and_a_selection() {
        let data = gen_point_mass(QualityTier::Random, 2, 7, 0.99);
        let ann = annotate_dataset(&data, 0.5, QualityMode::LambdaMix, ExecMode::Sequential).unwrap();
        let cfg = desk_config();
        let dir = tempfile::tempdir().unwrap();
        let out = run_training(
            &data,
            &ann,
            &cfg,
            WeightMode::Learned,
            dir.path(),
            ExecMode::Sequential,
        )
        .unwrap();

        let text = std::fs::read_to_string(&out.metrics_path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], METRICS_HEADER);
        let steps: Vec<u64> = lines[1..]
            .iter()
            .map(|l| l.split(',').next().unwrap().parse().unwrap())
            .collect();
        assert_eq!(steps, vec![0, 4, 8, 10]);
        assert_eq!(out.checkpoints.len(), 4);
        for (step, path) in &out.checkpoints {
            let ck = Checkpoint::load(path).unwrap();
            assert_eq!(ck.step, *step);
            assert_eq!(ck.config_hash, cfg.hash());
            assert!(ck.scalars.contains_key("log_temp"));
            ck.extract_net("target1").unwrap();
        }
        assert!(steps.contains(&out.selected_step));
        let sel = std::fs::read_to_string(dir.path().join("selected.json")).unwrap();
        assert!(sel.contains(&format!("\"step\":{}", out.selected_step)));
        assert!(std::fs::read_to_string(dir.path().join("run.json"))
            .unwrap()
            .contains("\"weight_mode\":\"learned\""));
    }

    #[test]
    fn reruns_write_identical_artifacts() {
        let data = gen_point_mass(QualityTier::Medium, 2, 9, 0.99);
        let ann = annotate_dataset(&data, 0.5, QualityMode::LambdaMix, ExecMode::Sequential).unwrap();
        let cfg = RunConfig { train_steps: 6, eval_every: 3, ..desk_config() };
        let dir = tempfile::tempdir().unwrap();
        let o1 = run_training(&data, &ann, &cfg, WeightMode::Learned, &dir.path().join("r1"), ExecMode::Sequential).unwrap();
        let o2 = run_training(&data, &ann, &cfg, WeightMode::Learned, &dir.path().join("r2"), ExecMode::Parallel).unwrap();
        assert_eq!(
            std::fs::read(&o1.metrics_path).unwrap(),
            std::fs::read(&o2.metrics_path).unwrap()
        );
        assert_eq!(
            std::fs::read(&o1.checkpoints.last().unwrap().1).unwrap(),
            std::fs::read(&o2.checkpoints.last().unwrap().1).unwrap()
        );
        assert_eq!(o1.selected_step, o2.selected_step);
    }

    /// Single-layer net reading nothing: constant output c.
    fn constant_critic(name: &str, input_dim: usize, c: f64) -> Mlp {
        let mut net = Mlp::new(name, input_dim, &[], 1, &mut stream(0, StreamId::NetInit, 9), 1.0);
        let mut flat = vec![0.0; net.n_params()];
        *flat.last_mut().unwrap() = c;
        net.set_flat_params(&flat).unwrap();
        net
    }

    fn zero_actor(obs_dim: usize, action_dim: usize) -> Mlp {
        let mut net = Mlp::new(
            "actor",
            obs_dim,
            &[],
            2 * action_dim,
            &mut stream(0, StreamId::NetInit, 10),
            1.0,
        );
        net.set_flat_params(&vec![0.0; net.n_params()]).unwrap();
        net
    }

    #[test]
    fn selection_takes_the_highest_average_q_and_breaks_ties_late() {
        let data = {
            let mut d = gen_point_mass(QualityTier::Random, 1, 1, 0.99);
            d.episodes[0].transitions.truncate(5);
            d
        };
        let ck = |step: u64, q: f64| {
            let mut c = Checkpoint::new("h", step);
            c.insert_net(&zero_actor(4, 2));
            c.insert_net(&constant_critic("critic1", 6, q));
            c.insert_net(&constant_critic("critic2", 6, q + 1.0));
            c
        };
        let picks = select_model(&[ck(1, 5.0), ck(2, 7.0)], &data, ExecMode::Sequential).unwrap();
        assert_eq!(picks, 2);
        let tie = select_model(&[ck(9, 7.0), ck(2, 7.0)], &data, ExecMode::Sequential).unwrap();
        assert_eq!(tie, 9);
        assert!(select_model(&[], &data, ExecMode::Sequential).is_err());
    }

    #[test]
    fn average_q_matches_a_streaming_second_pass() {
        let mut rng = stream(21, StreamId::NetInit, 11);
        let actor = Mlp::new("actor", 3, &[8], 4, &mut rng, 1.0);
        let c1 = Mlp::new("c1", 5, &[8], 1, &mut rng, 1.0);
        let c2 = Mlp::new("c2", 5, &[8], 1, &mut rng, 1.0);
        let states: Vec<f64> = (0..300).map(|i| ((i * 37) % 19) as f64 / 19.0 - 0.5).collect();
        let batched = avg_q_from_states(&actor, &c1, &c2, &states, 3, ExecMode::Parallel);
        let mut streaming = 0.0;
        for (i, chunk) in states.chunks(3).enumerate() {
            let a = actor_mean_action(&actor, chunk);
            let x = concat(chunk, &a);
            let q = c1.forward(&x)[0].min(c2.forward(&x)[0]);
            streaming += (q - streaming) / (i + 1) as f64;
        }
        assert!((batched - streaming).abs() <= 1e-9, "{batched} vs {streaming}");
    }

    #[test]
    fn evaluation_is_deterministic_and_scores_the_expected_extremes() {
        use crate::envs::{env_spec, normalized_score, POINT_MASS_ENV};
        let anchors = env_spec(POINT_MASS_ENV).unwrap().anchors;

        // An idle policy parks at the start, which is about as bad as
        // flailing randomly.
        let idle = zero_actor(4, 2);
        let (m1, s1) = evaluate_policy(&idle, 3, ExecMode::Sequential);
        let (m2, _) = evaluate_policy(&idle, 3, ExecMode::Parallel);
        assert_eq!(m1.to_bits(), m2.to_bits());
        assert_eq!(s1, 0.0);
        let idle_score = normalized_score(m1, &anchors).unwrap();
        assert!(idle_score.abs() < 5.0, "idle score {idle_score}");

        // A linear head replaying the goal-seeking controller through the
        // tanh squash lands near the expert anchor.
        let mut pd = zero_actor(4, 2);
        let (kp, kd) = (2.0, 3.0);
        pd.blocks[0].values = vec![
            -kp, 0.0, -kd, 0.0, // mu_x row
            0.0, -kp, 0.0, -kd, // mu_y row
            0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, // log-std rows unused by the mean
        ];
        pd.blocks[1].values = vec![kp * 1.0, kp * 1.0, 0.0, 0.0];
        let (mean_ret, _) = evaluate_policy(&pd, 2, ExecMode::Sequential);
        let score = normalized_score(mean_ret, &anchors).unwrap();
        assert!(score > 90.0 && score < 110.0, "controller score {score}");
    }

    #[test]
    fn spearman_hand_values() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[5.0, 0.0, -5.0]) + 1.0).abs() < 1e-12);
        // Ranks of x: [1, 2.5, 2.5, 4]; hand Pearson against [1,2,3,4].
        let r = spearman(&[0.0, 1.0, 1.0, 2.0], &[1.0, 2.0, 3.0, 4.0]);
        assert!((r - 0.9486832980505138).abs() < 1e-12, "{r}");
        assert_eq!(spearman(&[1.0, 1.0], &[0.0, 1.0]), 0.0);
    }

    #[test]
    fn weight_net_learns_opposite_rankings_from_quality() {
        // Strictly increasing quality over rows; log densities fixed at -1
        // so both hinge arguments vanish and the ordering terms drive the
        // net alone. The policy-side head must fall with quality, the
        // dataset-side head must rise.
        let n = 32;
        let m: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        let states: Vec<f64> = (0..n)
            .flat_map(|i| [2.0 * (i as f64 + 0.5) / n as f64 - 1.0, 0.3])
            .collect();
        let actions: Vec<f64> = (0..n).map(|i| 0.2 * (i as f64) / n as f64).collect();
        let batch = BatchSample {
            n,
            k: 1,
            obs_dim: 2,
            action_dim: 1,
            states,
            actions: actions.clone(),
            rewards: vec![0.0; n],
            next_states: vec![0.0; 2 * n],
            dones: vec![0.0; n],
            m_in: m.clone(),
            ood_actions: actions,
            ood_log_prob_pi: vec![-1.0; n],
            in_log_prob_beta: vec![-1.0; n],
            ood_log_prob_beta: vec![-1.0; n],
            m_ood: m.clone(),
            d_ord: m.iter().map(|&x| gaps(x, 1.0).d_ord).collect(),
            d_cql: m.iter().map(|&x| gaps(x, 1.0).d_cql).collect(),
        };
        batch.validate().unwrap();

        let mut net = Mlp::new("weight", 3, &[32, 32], 2, &mut stream(31, StreamId::NetInit, 3), 1.0);
        let mut opt = AdamState::new(&net);
        for s in 1..=2000u64 {
            let mut pair_rng = stream(31, StreamId::MonoPairing, s);
            let pair_mu = derangement(n, &mut pair_rng).unwrap();
            let pair_beta = derangement(n, &mut pair_rng).unwrap();
            let mut grads = MlpGrads::zeros_like(&net);
            weight_total_loss(&net, &batch, 10.0, &pair_mu, &pair_beta, &mut grads).unwrap();
            adam_step(&mut net, &grads, &mut opt, 3e-3);
        }
        let eval = crate::losses::evaluate_weights(&net, &batch);
        let rho_mu = spearman(&eval.w_mu, &batch.m_ood);
        let rho_beta = spearman(&eval.w_beta, &batch.m_in);
        assert!(rho_beta >= 0.9, "dataset-side correlation {rho_beta}");
        assert!(rho_mu <= -0.9, "policy-side correlation {rho_mu}");
    }
}
