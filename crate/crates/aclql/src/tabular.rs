//! Exact finite-MDP oracles. The three Q-function families (ordinary,
//! adaptive-weight conservative, constant-weight conservative) have closed
//! forms over the (state, action) index space, so every claimed ordering and
//! identity can be machine-checked by linear solves and independently by
//! iterated backups. The corpus runner aggregates those checks over seeded
//! random instances.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::rng::{stream, StreamId};

/// Row-sum tolerance for transition rows.
pub const PROB_TOL: f64 = 1e-12;
/// Pivot threshold below which the linear solve reports a singular system.
const PIVOT_TOL: f64 = 1e-12;

/// Finite MDP with dense transition tensor `p[s][a][s']` (flattened) and
/// reward table `r[s][a]`.
#[derive(Debug, Clone)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    pub p: Vec<f64>,
    pub r: Vec<f64>,
    pub gamma: f64,
}

impl TabularMdp {
    pub fn n_pairs(&self) -> usize {
        self.n_states * self.n_actions
    }

    pub fn idx(&self, s: usize, a: usize) -> usize {
        s * self.n_actions + a
    }

    pub fn p_row(&self, s: usize, a: usize) -> &[f64] {
        let base = (s * self.n_actions + a) * self.n_states;
        &self.p[base..base + self.n_states]
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_states == 0 || self.n_actions == 0 {
            return Err(Error::Dim("MDP needs at least one state and action".into()));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Schema(format!("gamma {} outside [0, 1)", self.gamma)));
        }
        if self.p.len() != self.n_pairs() * self.n_states || self.r.len() != self.n_pairs() {
            return Err(Error::Dim("transition or reward table has wrong size".into()));
        }
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let row = self.p_row(s, a);
                if row.iter().any(|p| *p < 0.0 || !p.is_finite()) {
                    return Err(Error::Schema(format!(
                        "transition row ({s}, {a}) has a negative or non-finite entry"
                    )));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > PROB_TOL {
                    return Err(Error::Schema(format!(
                        "transition row ({s}, {a}) sums to {sum}, not 1"
                    )));
                }
            }
        }
        if self.r.iter().any(|r| !r.is_finite()) {
            return Err(Error::NonFinite("reward table".into()));
        }
        Ok(())
    }
}

/// Evaluation policy, cloned behavior policy, and over-distribution for one
/// verification instance, all as stochastic tables `[s][a]`.
///
/// `support_ok` records whether every pair with positive over-distribution
/// mass also has positive behavior mass; the conservative fixed points are
/// only defined when it holds.
#[derive(Debug, Clone)]
pub struct PolicyPair {
    pub n_states: usize,
    pub n_actions: usize,
    pub pi: Vec<f64>,
    pub pi_beta: Vec<f64>,
    pub mu: Vec<f64>,
    pub support_ok: bool,
}

fn check_stochastic(name: &str, table: &[f64], n_states: usize, n_actions: usize) -> Result<()> {
    if table.len() != n_states * n_actions {
        return Err(Error::Dim(format!("{name}: expected {} entries", n_states * n_actions)));
    }
    for s in 0..n_states {
        let row = &table[s * n_actions..(s + 1) * n_actions];
        if row.iter().any(|p| *p < 0.0 || !p.is_finite()) {
            return Err(Error::Schema(format!("{name}: row {s} has a bad probability")));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Schema(format!("{name}: row {s} sums to {sum}")));
        }
    }
    Ok(())
}

impl PolicyPair {
    pub fn new(
        pi: Vec<f64>,
        pi_beta: Vec<f64>,
        mu: Vec<f64>,
        n_states: usize,
        n_actions: usize,
    ) -> Result<PolicyPair> {
        check_stochastic("pi", &pi, n_states, n_actions)?;
        check_stochastic("pi_beta", &pi_beta, n_states, n_actions)?;
        check_stochastic("mu", &mu, n_states, n_actions)?;
        let support_ok = mu
            .iter()
            .zip(&pi_beta)
            .all(|(m, b)| *m == 0.0 || *b > 0.0);
        Ok(PolicyPair { n_states, n_actions, pi, pi_beta, mu, support_ok })
    }
}

/// Per-pair weight tables for the adaptive penalty. Finite but otherwise
/// unconstrained: the oracles must expose what happens when positivity or
/// any other training-time preference is violated.
#[derive(Debug, Clone)]
pub struct WeightAssignment {
    pub w_mu: Vec<f64>,
    pub w_beta: Vec<f64>,
}

impl WeightAssignment {
    pub fn constant(n_pairs: usize, w_mu: f64, w_beta: f64) -> WeightAssignment {
        WeightAssignment { w_mu: vec![w_mu; n_pairs], w_beta: vec![w_beta; n_pairs] }
    }

    pub fn validate(&self, n_pairs: usize) -> Result<()> {
        if self.w_mu.len() != n_pairs || self.w_beta.len() != n_pairs {
            return Err(Error::Dim(format!("weight tables need {n_pairs} entries")));
        }
        if self.w_mu.iter().chain(&self.w_beta).any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("weight table".into()));
        }
        Ok(())
    }
}

/// Dense joint transition over (s, a) pairs under evaluation policy `pi`:
/// row (s, a), column (s', a') holds P[s][a][s'] * pi[s'][a'].
pub fn policy_transition(mdp: &TabularMdp, pi: &[f64]) -> Vec<f64> {
    let n = mdp.n_pairs();
    let mut m = vec![0.0; n * n];
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            let row = mdp.idx(s, a);
            let p = mdp.p_row(s, a);
            for s2 in 0..mdp.n_states {
                if p[s2] == 0.0 {
                    continue;
                }
                for a2 in 0..mdp.n_actions {
                    m[row * n + mdp.idx(s2, a2)] = p[s2] * pi[s2 * mdp.n_actions + a2];
                }
            }
        }
    }
    m
}

fn matvec(m: &[f64], v: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for (i, o) in out.iter_mut().enumerate() {
        let row = &m[i * n..(i + 1) * n];
        *o = row.iter().zip(v).map(|(a, b)| a * b).sum();
    }
    out
}

/// One application of the ordinary backup r + gamma * E[Q(s', a')], written
/// as direct loops so matrix-based paths can be cross-checked against it.
pub fn backup(mdp: &TabularMdp, pi: &[f64], q: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; mdp.n_pairs()];
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            let p = mdp.p_row(s, a);
            let mut future = 0.0;
            for (s2, ps2) in p.iter().enumerate() {
                if *ps2 == 0.0 {
                    continue;
                }
                let mut ev = 0.0;
                for a2 in 0..mdp.n_actions {
                    ev += pi[s2 * mdp.n_actions + a2] * q[s2 * mdp.n_actions + a2];
                }
                future += ps2 * ev;
            }
            out[mdp.idx(s, a)] = mdp.r[mdp.idx(s, a)] + mdp.gamma * future;
        }
    }
    out
}

/// Backup followed by a per-pair subtraction; the conservative iterates are
/// exactly this with their respective gap tables.
pub fn shifted_backup(mdp: &TabularMdp, pi: &[f64], q: &[f64], shift: &[f64]) -> Vec<f64> {
    backup(mdp, pi, q).iter().zip(shift).map(|(b, s)| b - s).collect()
}

/// Partial-pivot Gaussian elimination on a dense row-major system. Consumes
/// the inputs as scratch space.
pub fn solve_dense(a: &mut [f64], b: &mut [f64], n: usize) -> Result<Vec<f64>> {
    assert_eq!(a.len(), n * n, "matrix size");
    assert_eq!(b.len(), n, "rhs size");
    for col in 0..n {
        let mut piv = col;
        let mut best = a[col * n + col].abs();
        for row in (col + 1)..n {
            let v = a[row * n + col].abs();
            if v > best {
                best = v;
                piv = row;
            }
        }
        if best < PIVOT_TOL {
            return Err(Error::Verification(format!("singular linear system at column {col}")));
        }
        if piv != col {
            for j in 0..n {
                a.swap(col * n + j, piv * n + j);
            }
            b.swap(col, piv);
        }
        let d = a[col * n + col];
        for row in (col + 1)..n {
            let factor = a[row * n + col] / d;
            if factor == 0.0 {
                continue;
            }
            a[row * n + col] = 0.0;
            for j in (col + 1)..n {
                a[row * n + j] -= factor * a[col * n + j];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for j in (row + 1)..n {
            acc -= a[row * n + j] * x[j];
        }
        x[row] = acc / a[row * n + row];
    }
    Ok(x)
}

/// Solves (I - gamma * P_pi) x = rhs over the pair index space.
pub fn solve_resolvent(mdp: &TabularMdp, pi: &[f64], rhs: &[f64]) -> Result<Vec<f64>> {
    let n = mdp.n_pairs();
    let ppi = policy_transition(mdp, pi);
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let eye = if i == j { 1.0 } else { 0.0 };
            a[i * n + j] = eye - mdp.gamma * ppi[i * n + j];
        }
    }
    let mut b = rhs.to_vec();
    solve_dense(&mut a, &mut b, n)
}

/// Per-pair shift (w_mu * mu - w_beta * pi_beta) / pi_beta that separates
/// the adaptive iterate from the ordinary one.
pub fn ordering_gap(pol: &PolicyPair, w: &WeightAssignment) -> Result<Vec<f64>> {
    let n = pol.n_states * pol.n_actions;
    w.validate(n)?;
    let mut gap = vec![0.0; n];
    for s in 0..pol.n_states {
        for a in 0..pol.n_actions {
            let i = s * pol.n_actions + a;
            let beta = pol.pi_beta[i];
            if beta == 0.0 {
                return Err(Error::Schema(format!(
                    "behavior policy has zero mass at state {s} action {a}"
                )));
            }
            gap[i] = (w.w_mu[i] * pol.mu[i] - w.w_beta[i] * beta) / beta;
        }
    }
    Ok(gap)
}

/// Per-pair shift alpha * (mu - pi_beta) / pi_beta of the constant-weight
/// baseline. Written out independently of [`ordering_gap`] so the
/// special-case equivalence below crosses two code paths.
pub fn anchor_shift(pol: &PolicyPair, alpha: f64) -> Result<Vec<f64>> {
    let n = pol.n_states * pol.n_actions;
    let mut gap = vec![0.0; n];
    for s in 0..pol.n_states {
        for a in 0..pol.n_actions {
            let i = s * pol.n_actions + a;
            let beta = pol.pi_beta[i];
            if beta == 0.0 {
                return Err(Error::Schema(format!(
                    "behavior policy has zero mass at state {s} action {a}"
                )));
            }
            gap[i] = alpha * (pol.mu[i] - beta) / beta;
        }
    }
    Ok(gap)
}

/// Difference between the constant-weight shift and the adaptive shift,
/// ((alpha - w_mu) * mu - (alpha - w_beta) * pi_beta) / pi_beta. Positive
/// entries mean the adaptive iterate sits above the constant-weight one.
pub fn anchor_gap(pol: &PolicyPair, w: &WeightAssignment, alpha: f64) -> Result<Vec<f64>> {
    let n = pol.n_states * pol.n_actions;
    w.validate(n)?;
    let mut gap = vec![0.0; n];
    for s in 0..pol.n_states {
        for a in 0..pol.n_actions {
            let i = s * pol.n_actions + a;
            let beta = pol.pi_beta[i];
            if beta == 0.0 {
                return Err(Error::Schema(format!(
                    "behavior policy has zero mass at state {s} action {a}"
                )));
            }
            gap[i] = ((alpha - w.w_mu[i]) * pol.mu[i] - (alpha - w.w_beta[i]) * beta) / beta;
        }
    }
    Ok(gap)
}

/// Exact fixed point of the ordinary backup: (I - gamma * P_pi)^{-1} r.
pub fn ordinary_fixed_point(mdp: &TabularMdp, pi: &[f64]) -> Result<Vec<f64>> {
    solve_resolvent(mdp, pi, &mdp.r)
}

fn require_support(pol: &PolicyPair) -> Result<()> {
    if !pol.support_ok {
        return Err(Error::Schema(
            "over-distribution has mass outside the behavior policy's support".into(),
        ));
    }
    Ok(())
}

/// Exact fixed point of the adaptive conservative backup,
/// (I - gamma * P_pi)^{-1} (r - ordering_gap).
pub fn acl_fixed_point(
    mdp: &TabularMdp,
    pol: &PolicyPair,
    w: &WeightAssignment,
) -> Result<Vec<f64>> {
    require_support(pol)?;
    let gap = ordering_gap(pol, w)?;
    let rhs: Vec<f64> = mdp.r.iter().zip(&gap).map(|(r, g)| r - g).collect();
    solve_resolvent(mdp, &pol.pi, &rhs)
}

/// Exact fixed point of the constant-weight conservative backup,
/// (I - gamma * P_pi)^{-1} (r - anchor_shift).
pub fn cql_fixed_point(mdp: &TabularMdp, pol: &PolicyPair, alpha: f64) -> Result<Vec<f64>> {
    require_support(pol)?;
    let shift = anchor_shift(pol, alpha)?;
    let rhs: Vec<f64> = mdp.r.iter().zip(&shift).map(|(r, g)| r - g).collect();
    solve_resolvent(mdp, &pol.pi, &rhs)
}

/// Iterates the shifted backup from zero until the sup-norm step change
/// drops below `tol`. Independent oracle for the linear solves.
pub fn iterate_shifted(
    mdp: &TabularMdp,
    pi: &[f64],
    shift: &[f64],
    tol: f64,
    max_iters: usize,
) -> (Vec<f64>, usize) {
    let mut q = vec![0.0; mdp.n_pairs()];
    for iter in 1..=max_iters {
        let next = shifted_backup(mdp, pi, &q, shift);
        let delta = next
            .iter()
            .zip(&q)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        q = next;
        if delta < tol {
            return (q, iter);
        }
    }
    (q, max_iters)
}

/// Outcome of one verification pass: how many checks held, the worst
/// residual seen, and a line per violated check.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct PropReport {
    pub checks_passed: usize,
    pub max_residual: f64,
    pub violations: Vec<String>,
}

impl PropReport {
    fn record(&mut self, ok: bool, residual: f64, detail: impl FnOnce() -> String) {
        if residual.is_finite() {
            self.max_residual = self.max_residual.max(residual);
        }
        if ok {
            self.checks_passed += 1;
        } else {
            self.violations.push(detail());
        }
    }

    pub fn all_passed(&self) -> bool {
        self.violations.is_empty()
    }

    fn absorb(&mut self, prefix: &str, other: PropReport) {
        self.checks_passed += other.checks_passed;
        self.max_residual = self.max_residual.max(other.max_residual);
        self.violations
            .extend(other.violations.into_iter().map(|v| format!("{prefix}: {v}")));
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Checks the first conservatism claim: a single adaptive backup differs
/// from the ordinary backup by exactly minus the ordering gap, and at the
/// fixed points the difference equals the resolvent applied to the gap, so
/// a one-signed gap forces a one-sided Q ordering.
pub fn verify_ordering_gap(
    mdp: &TabularMdp,
    pol: &PolicyPair,
    w: &WeightAssignment,
) -> Result<PropReport> {
    require_support(pol)?;
    let mut rep = PropReport::default();
    let gap = ordering_gap(pol, w)?;
    let n = mdp.n_pairs();

    // Per-backup identity on two probe tables, crossing the loop-based
    // backup against the dense-matrix path.
    let ppi = policy_transition(mdp, &pol.pi);
    let ramp: Vec<f64> = (0..n).map(|i| 0.37 * i as f64 - 1.0).collect();
    for q in [&mdp.r, &ramp] {
        let adaptive = shifted_backup(mdp, &pol.pi, q, &gap);
        let pq = matvec(&ppi, q, n);
        let ordinary: Vec<f64> =
            mdp.r.iter().zip(&pq).map(|(r, f)| r + mdp.gamma * f).collect();
        let resid = (0..n)
            .map(|i| ((adaptive[i] - ordinary[i]) + gap[i]).abs())
            .fold(0.0f64, f64::max);
        rep.record(resid <= 1e-10, resid, || {
            format!("per-backup gap identity residual {resid:.3e}")
        });
    }

    // Fixed-point difference equals the resolvent-propagated gap.
    let q_ord = ordinary_fixed_point(mdp, &pol.pi)?;
    let q_acl = acl_fixed_point(mdp, pol, w)?;
    let propagated = solve_resolvent(mdp, &pol.pi, &gap)?;
    let diff: Vec<f64> = q_ord.iter().zip(&q_acl).map(|(o, a)| o - a).collect();
    let resid = max_abs_diff(&diff, &propagated);
    rep.record(resid <= 1e-9, resid, || {
        format!("fixed-point difference vs propagated gap residual {resid:.3e}")
    });

    // Sign agreement wherever the propagated gap is clearly nonzero.
    let sign_bad = (0..n)
        .filter(|&i| propagated[i].abs() > 1e-9 && diff[i] * propagated[i] <= 0.0)
        .count();
    rep.record(sign_bad == 0, 0.0, || {
        format!("{sign_bad} pairs where the Q difference contradicts the propagated gap sign")
    });

    // One-signed gaps force pointwise orderings.
    if gap.iter().all(|g| *g > 0.0) {
        let worst = q_acl
            .iter()
            .zip(&q_ord)
            .map(|(a, o)| a - o)
            .fold(f64::NEG_INFINITY, f64::max);
        rep.record(worst <= 1e-12, worst.max(0.0), || {
            format!("positive gap but adaptive Q exceeds ordinary Q by {worst:.3e}")
        });
    }
    if gap.iter().all(|g| *g < 0.0) {
        let worst = q_ord
            .iter()
            .zip(&q_acl)
            .map(|(o, a)| o - a)
            .fold(f64::NEG_INFINITY, f64::max);
        rep.record(worst <= 1e-12, worst.max(0.0), || {
            format!("negative gap but ordinary Q exceeds adaptive Q by {worst:.3e}")
        });
    }
    Ok(rep)
}

/// Checks the exact-backup regime of the sandwich bound: the fixed-point
/// difference equals h = -(I - gamma * P_pi)^{-1} gap elementwise, and with
/// a synthetic non-negative error table the difference stays inside
/// [h - err, h + err].
pub fn verify_resolvent_sandwich(
    mdp: &TabularMdp,
    pol: &PolicyPair,
    w: &WeightAssignment,
    err: Option<&[f64]>,
) -> Result<PropReport> {
    require_support(pol)?;
    let mut rep = PropReport::default();
    let gap = ordering_gap(pol, w)?;
    let h: Vec<f64> = solve_resolvent(mdp, &pol.pi, &gap)?
        .iter()
        .map(|g| -g)
        .collect();
    let q_ord = ordinary_fixed_point(mdp, &pol.pi)?;
    let q_acl = acl_fixed_point(mdp, pol, w)?;
    let diff: Vec<f64> = q_acl.iter().zip(&q_ord).map(|(a, o)| a - o).collect();
    let resid = max_abs_diff(&diff, &h);
    rep.record(resid <= 1e-9, resid, || {
        format!("fixed-point difference vs h residual {resid:.3e}")
    });

    if let Some(err) = err {
        if err.len() != mdp.n_pairs() {
            return Err(Error::Dim("error table size".into()));
        }
        if err.iter().any(|e| *e < 0.0 || !e.is_finite()) {
            return Err(Error::Schema("error table must be non-negative".into()));
        }
        let bad = (0..mdp.n_pairs())
            .filter(|&i| diff[i] < h[i] - err[i] - 1e-12 || diff[i] > h[i] + err[i] + 1e-12)
            .count();
        rep.record(bad == 0, 0.0, || {
            format!("{bad} pairs escaped the [h - err, h + err] interval")
        });
    }
    Ok(rep)
}

/// Checks the comparison against the constant-weight baseline: backup
/// difference equals the anchor gap per pair, and a one-signed anchor gap
/// forces the corresponding pointwise Q ordering.
pub fn verify_anchor_gap(
    mdp: &TabularMdp,
    pol: &PolicyPair,
    w: &WeightAssignment,
    alpha: f64,
) -> Result<PropReport> {
    require_support(pol)?;
    let mut rep = PropReport::default();
    let gap_adaptive = ordering_gap(pol, w)?;
    let shift_anchor = anchor_shift(pol, alpha)?;
    let d = anchor_gap(pol, w, alpha)?;
    let n = mdp.n_pairs();

    let probe = &mdp.r;
    let adaptive = shifted_backup(mdp, &pol.pi, probe, &gap_adaptive);
    let anchored = shifted_backup(mdp, &pol.pi, probe, &shift_anchor);
    let resid = (0..n)
        .map(|i| ((adaptive[i] - anchored[i]) - d[i]).abs())
        .fold(0.0f64, f64::max);
    rep.record(resid <= 1e-10, resid, || {
        format!("per-backup anchor gap identity residual {resid:.3e}")
    });

    let q_acl = acl_fixed_point(mdp, pol, w)?;
    let q_cql = cql_fixed_point(mdp, pol, alpha)?;
    let propagated = solve_resolvent(mdp, &pol.pi, &d)?;
    let diff: Vec<f64> = q_acl.iter().zip(&q_cql).map(|(a, c)| a - c).collect();
    let resid = max_abs_diff(&diff, &propagated);
    rep.record(resid <= 1e-9, resid, || {
        format!("fixed-point anchor difference vs propagated gap residual {resid:.3e}")
    });

    if d.iter().all(|g| *g > 0.0) {
        let worst = q_cql
            .iter()
            .zip(&q_acl)
            .map(|(c, a)| c - a)
            .fold(f64::NEG_INFINITY, f64::max);
        rep.record(worst <= 1e-12, worst.max(0.0), || {
            format!("positive anchor gap but anchored Q exceeds adaptive Q by {worst:.3e}")
        });
    }
    if d.iter().all(|g| *g < 0.0) {
        let worst = q_acl
            .iter()
            .zip(&q_cql)
            .map(|(a, c)| a - c)
            .fold(f64::NEG_INFINITY, f64::max);
        rep.record(worst <= 1e-12, worst.max(0.0), || {
            format!("negative anchor gap but adaptive Q exceeds anchored Q by {worst:.3e}")
        });
    }
    Ok(rep)
}

/// Builds a weight assignment that provably wedges the adaptive fixed point
/// between the anchored and ordinary ones on this MDP.
///
/// Both pointwise premises (ordering gap positive everywhere AND anchor gap
/// positive everywhere) cannot hold at once for stochastic rows: adding the
/// two gaps gives alpha * (mu - pi_beta) / pi_beta, which must change sign
/// somewhere unless mu = pi_beta exactly. The wedge is built at the
/// resolvent level instead: with a concentrated mu = pi and a uniform
/// pi_beta the propagated anchor shift S is strictly positive, so splitting
/// it as u = frac * S and choosing weights whose ordering gap propagates to
/// exactly u yields Q_ord - Q_acl = u >= 0 and Q_acl - Q_cql = S - u >= 0.
pub fn sandwich_case(
    mdp: &TabularMdp,
    alpha: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(PolicyPair, WeightAssignment)> {
    if mdp.n_actions < 2 {
        return Err(Error::Dim("wedge construction needs at least 2 actions".into()));
    }
    let (s_count, a_count) = (mdp.n_states, mdp.n_actions);
    let n = mdp.n_pairs();
    let eps = 0.02;
    let mut pi = vec![0.0; n];
    for s in 0..s_count {
        let star = rng.gen_range(0..a_count);
        for a in 0..a_count {
            pi[s * a_count + a] =
                if a == star { 1.0 - eps } else { eps / (a_count - 1) as f64 };
        }
    }
    let pi_beta = vec![1.0 / a_count as f64; n];
    let pol = PolicyPair::new(pi.clone(), pi_beta, pi, s_count, a_count)?;

    let shift = anchor_shift(&pol, alpha)?;
    let total = solve_resolvent(mdp, &pol.pi, &shift)?;
    let min_total = total.iter().cloned().fold(f64::INFINITY, f64::min);
    if min_total <= 0.0 {
        return Err(Error::Verification(format!(
            "propagated anchor shift has min {min_total:.3e}; wedge construction inapplicable"
        )));
    }

    let u: Vec<f64> = total.iter().map(|t| t * rng.gen_range(0.2..0.8)).collect();
    // gap_w = (I - gamma * P_pi) u, so the resolvent maps it back to u.
    let ppi = policy_transition(mdp, &pol.pi);
    let pu = matvec(&ppi, &u, n);
    let gap_w: Vec<f64> = u.iter().zip(&pu).map(|(ui, pi_u)| ui - mdp.gamma * pi_u).collect();

    let mut w_mu = vec![0.0; n];
    let w_beta = vec![alpha; n];
    for i in 0..n {
        w_mu[i] = pol.pi_beta[i] * (gap_w[i] + alpha) / pol.mu[i];
    }
    Ok((pol, WeightAssignment { w_mu, w_beta }))
}

/// Aggregated corpus outcome emitted by the tabular verification command.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct VerifyReport {
    pub instances: usize,
    pub checks_passed: usize,
    pub max_residual: f64,
    pub violations: Vec<String>,
}

/// Seeded random instance: 2 to 5 states, 2 to 4 actions, transition and
/// policy rows drawn flat on the simplex, rewards uniform in [-1, 1],
/// gamma fixed at 0.9.
pub fn random_instance(corpus_seed: u64, index: u64) -> (TabularMdp, PolicyPair) {
    let mut rng = stream(corpus_seed, StreamId::TabularInstance, index);
    let n_states = rng.gen_range(2..=5);
    let n_actions = rng.gen_range(2..=4);
    let simplex_row = |rng: &mut ChaCha8Rng, k: usize| -> Vec<f64> {
        loop {
            // Exp(1) draws normalized to sum 1 land flat on the simplex.
            let g: Vec<f64> = (0..k).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
            let sum: f64 = g.iter().sum();
            if sum > 1e-9 {
                return g.iter().map(|x| x / sum).collect();
            }
        }
    };
    let mut p = Vec::with_capacity(n_states * n_actions * n_states);
    for _ in 0..n_states * n_actions {
        p.extend(simplex_row(&mut rng, n_states));
    }
    let r: Vec<f64> = (0..n_states * n_actions).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mdp = TabularMdp { n_states, n_actions, p, r, gamma: 0.9 };

    let table = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        let mut t = Vec::with_capacity(n_states * n_actions);
        for _ in 0..n_states {
            t.extend(simplex_row(rng, n_actions));
        }
        t
    };
    let pi = table(&mut rng);
    let pi_beta = table(&mut rng);
    let mu = table(&mut rng);
    let pol = PolicyPair::new(pi, pi_beta, mu, n_states, n_actions)
        .expect("random rows are stochastic");
    (mdp, pol)
}

fn instance_report(corpus_seed: u64, index: u64, alpha: f64) -> Result<PropReport> {
    let (mdp, pol) = random_instance(corpus_seed, index);
    mdp.validate()?;
    let n = mdp.n_pairs();
    let mut rng = stream(corpus_seed, StreamId::TabularInstance, index ^ (1 << 32));
    let mut rep = PropReport::default();

    // Random weights exercise the gap identities with both signs present.
    let w_rand = WeightAssignment {
        w_mu: (0..n).map(|_| rng.gen_range(-2.0..12.0)).collect(),
        w_beta: (0..n).map(|_| rng.gen_range(-2.0..12.0)).collect(),
    };
    rep.absorb("ordering", verify_ordering_gap(&mdp, &pol, &w_rand)?);
    let gap = ordering_gap(&pol, &w_rand)?;
    let h: Vec<f64> = solve_resolvent(&mdp, &pol.pi, &gap)?.iter().map(|g| -g).collect();
    let err: Vec<f64> = h.iter().map(|v| v.abs() / 2.0).collect();
    rep.absorb(
        "resolvent",
        verify_resolvent_sandwich(&mdp, &pol, &w_rand, Some(&err))?,
    );
    rep.absorb("anchor", verify_anchor_gap(&mdp, &pol, &w_rand, alpha)?);

    // Special-case collapses.
    let q_ord = ordinary_fixed_point(&mdp, &pol.pi)?;
    let q_zero = acl_fixed_point(&mdp, &pol, &WeightAssignment::constant(n, 0.0, 0.0))?;
    let resid = max_abs_diff(&q_ord, &q_zero);
    rep.record(resid <= 1e-12, resid, || {
        format!("zero weights drift from ordinary Q by {resid:.3e}")
    });
    let q_const = acl_fixed_point(&mdp, &pol, &WeightAssignment::constant(n, alpha, alpha))?;
    let q_cql = cql_fixed_point(&mdp, &pol, alpha)?;
    let resid = max_abs_diff(&q_const, &q_cql);
    rep.record(resid <= 1e-10, resid, || {
        format!("constant weights drift from anchored Q by {resid:.3e}")
    });

    // One-sided pointwise premises that are satisfiable for stochastic rows.
    rep.absorb(
        "positive ordering gap",
        verify_ordering_gap(&mdp, &pol, &WeightAssignment::constant(n, 1.0, 0.0))?,
    );
    rep.absorb(
        "negative ordering gap",
        verify_ordering_gap(&mdp, &pol, &WeightAssignment::constant(n, 0.0, 1.0))?,
    );
    rep.absorb(
        "positive anchor gap",
        verify_anchor_gap(&mdp, &pol, &WeightAssignment::constant(n, alpha - 1.0, alpha), alpha)?,
    );
    rep.absorb(
        "negative anchor gap",
        verify_anchor_gap(&mdp, &pol, &WeightAssignment::constant(n, alpha + 1.0, alpha), alpha)?,
    );

    // Iterated backups agree with the linear solves.
    let gap_rand = ordering_gap(&pol, &w_rand)?;
    let q_acl = acl_fixed_point(&mdp, &pol, &w_rand)?;
    let zeros = vec![0.0; n];
    for (name, shift, solved) in [
        ("ordinary", &zeros, &q_ord),
        ("adaptive", &gap_rand, &q_acl),
        ("anchored", &anchor_shift(&pol, alpha)?, &q_cql),
    ] {
        let (iterated, _) = iterate_shifted(&mdp, &pol.pi, shift, 1e-12, 5000);
        let resid = max_abs_diff(&iterated, solved);
        rep.record(resid <= 1e-8, resid, || {
            format!("{name} iterate vs solve residual {resid:.3e}")
        });
    }

    // Full wedge: anchored <= adaptive <= ordinary pointwise, with margin.
    let (wedge_pol, wedge_w) = sandwich_case(&mdp, alpha, &mut rng)?;
    let q_ord_w = ordinary_fixed_point(&mdp, &wedge_pol.pi)?;
    let q_acl_w = acl_fixed_point(&mdp, &wedge_pol, &wedge_w)?;
    let q_cql_w = cql_fixed_point(&mdp, &wedge_pol, alpha)?;
    let upper_slack = q_acl_w
        .iter()
        .zip(&q_ord_w)
        .map(|(a, o)| a - o)
        .fold(f64::NEG_INFINITY, f64::max);
    rep.record(upper_slack <= 1e-9, upper_slack.max(0.0), || {
        format!("wedge: adaptive Q exceeds ordinary Q by {upper_slack:.3e}")
    });
    let lower_slack = q_cql_w
        .iter()
        .zip(&q_acl_w)
        .map(|(c, a)| c - a)
        .fold(f64::NEG_INFINITY, f64::max);
    rep.record(lower_slack <= 1e-9, lower_slack.max(0.0), || {
        format!("wedge: anchored Q exceeds adaptive Q by {lower_slack:.3e}")
    });
    let margin = q_ord_w
        .iter()
        .zip(&q_cql_w)
        .map(|(o, c)| o - c)
        .fold(f64::INFINITY, f64::min);
    rep.record(margin > 1e-6, 0.0, || {
        format!("wedge: interval between anchored and ordinary Q collapsed to {margin:.3e}")
    });
    Ok(rep)
}

/// Runs the full verification battery over `n_instances` seeded random
/// MDPs and aggregates one report.
pub fn verify_corpus(
    n_instances: usize,
    corpus_seed: u64,
    alpha: f64,
    exec: ExecMode,
) -> VerifyReport {
    let reports =
        exec.map_indices(n_instances, |i| instance_report(corpus_seed, i as u64, alpha));
    let mut out = VerifyReport {
        instances: n_instances,
        checks_passed: 0,
        max_residual: 0.0,
        violations: Vec::new(),
    };
    for (i, rep) in reports.into_iter().enumerate() {
        match rep {
            Ok(r) => {
                out.checks_passed += r.checks_passed;
                out.max_residual = out.max_residual.max(r.max_residual);
                out.violations
                    .extend(r.violations.into_iter().map(|v| format!("instance {i}: {v}")));
            }
            Err(e) => out.violations.push(format!("instance {i}: {e}")),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one_state_mdp() -> TabularMdp {
        TabularMdp { n_states: 1, n_actions: 1, p: vec![1.0], r: vec![1.0], gamma: 0.5 }
    }

    fn one_state_pol() -> PolicyPair {
        PolicyPair::new(vec![1.0], vec![1.0], vec![1.0], 1, 1).unwrap()
    }

    #[test]
    fn one_state_geometric_series() {
        let mdp = one_state_mdp();
        let q = ordinary_fixed_point(&mdp, &[1.0]).unwrap();
        // 1 / (1 - 0.5) = 2.
        assert!((q[0] - 2.0).abs() < 1e-12);

        // Gap (2 * 1 - 1 * 1) / 1 = 1 shifts the fixed point to
        // (1 - 1) / (1 - 0.5) = 0, a difference of exactly 2.
        let pol = one_state_pol();
        let w = WeightAssignment { w_mu: vec![2.0], w_beta: vec![1.0] };
        let q_acl = acl_fixed_point(&mdp, &pol, &w).unwrap();
        assert!(q_acl[0].abs() < 1e-12);
        let (iterated, _) = iterate_shifted(&mdp, &pol.pi, &[1.0], 1e-12, 1000);
        assert!((iterated[0] - q_acl[0]).abs() < 1e-10);
    }

    #[test]
    fn zero_rewards_give_zero_values() {
        let (mut mdp, pol) = random_instance(40, 0);
        mdp.r.iter_mut().for_each(|r| *r = 0.0);
        let q = ordinary_fixed_point(&mdp, &pol.pi).unwrap();
        assert!(q.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn ordinary_matches_value_iteration() {
        // Fixed-size instance: 5 states, 3 actions.
        let (mdp, pol) = {
            let mut i = 0;
            loop {
                let (mdp, pol) = random_instance(41, i);
                if mdp.n_states == 5 && mdp.n_actions == 3 {
                    break (mdp, pol);
                }
                i += 1;
            }
        };
        let solved = ordinary_fixed_point(&mdp, &pol.pi).unwrap();
        let zeros = vec![0.0; mdp.n_pairs()];
        let (iterated, iters) = iterate_shifted(&mdp, &pol.pi, &zeros, 1e-14, 10_000);
        assert!(iters < 10_000, "value iteration did not converge");
        assert!(max_abs_diff(&solved, &iterated) <= 1e-12);
    }

    #[test]
    fn zero_weights_reduce_to_ordinary() {
        let (mdp, pol) = random_instance(42, 3);
        let q_ord = ordinary_fixed_point(&mdp, &pol.pi).unwrap();
        let w = WeightAssignment::constant(mdp.n_pairs(), 0.0, 0.0);
        let q_acl = acl_fixed_point(&mdp, &pol, &w).unwrap();
        assert_eq!(q_ord, q_acl);
    }

    #[test]
    fn constant_weights_collapse_to_anchored_form() {
        let (mdp, pol) = random_instance(43, 1);
        for alpha in [0.5, 7.0, 10.0] {
            let w = WeightAssignment::constant(mdp.n_pairs(), alpha, alpha);
            let q_acl = acl_fixed_point(&mdp, &pol, &w).unwrap();
            let q_cql = cql_fixed_point(&mdp, &pol, alpha).unwrap();
            assert!(max_abs_diff(&q_acl, &q_cql) <= 1e-10);
        }
    }

    #[test]
    fn anchored_form_special_cases() {
        let (mdp, pol) = random_instance(44, 2);
        let q_ord = ordinary_fixed_point(&mdp, &pol.pi).unwrap();
        // Matching distributions cancel the shift for any alpha.
        let same = PolicyPair::new(
            pol.pi.clone(),
            pol.pi_beta.clone(),
            pol.pi_beta.clone(),
            pol.n_states,
            pol.n_actions,
        )
        .unwrap();
        let q = cql_fixed_point(&mdp, &same, 10.0).unwrap();
        assert!(max_abs_diff(&q, &q_ord) <= 1e-10);
        // Zero alpha removes the shift entirely.
        let q = cql_fixed_point(&mdp, &pol, 0.0).unwrap();
        assert!(max_abs_diff(&q, &q_ord) <= 1e-12);
    }

    #[test]
    fn iterated_backup_matches_solve_at_alpha_ten() {
        let (mdp, pol) = random_instance(45, 4);
        let solved = cql_fixed_point(&mdp, &pol, 10.0).unwrap();
        let shift = anchor_shift(&pol, 10.0).unwrap();
        let (iterated, _) = iterate_shifted(&mdp, &pol.pi, &shift, 1e-12, 5000);
        assert!(max_abs_diff(&solved, &iterated) <= 1e-8);
    }

    #[test]
    fn contraction_rate_is_bounded_by_gamma() {
        let (mdp, pol) = random_instance(46, 5);
        let mut q = vec![0.0; mdp.n_pairs()];
        let mut last_delta = f64::INFINITY;
        for step in 0..60 {
            let next = backup(&mdp, &pol.pi, &q);
            let delta = max_abs_diff(&next, &q);
            if step > 2 && last_delta > 1e-13 {
                assert!(
                    delta <= mdp.gamma * last_delta * (1.0 + 1e-9),
                    "step {step}: delta {delta} vs gamma * {last_delta}"
                );
            }
            last_delta = delta;
            q = next;
        }
    }

    #[test]
    fn zero_behavior_mass_names_the_pair() {
        let mdp = TabularMdp {
            n_states: 1,
            n_actions: 2,
            p: vec![1.0, 1.0],
            r: vec![0.0, 0.0],
            gamma: 0.9,
        };
        let pol = PolicyPair::new(
            vec![0.5, 0.5],
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            1,
            2,
        )
        .unwrap();
        assert!(pol.support_ok);
        let w = WeightAssignment::constant(2, 1.0, 1.0);
        let err = acl_fixed_point(&mdp, &pol, &w).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("state 0") && msg.contains("action 1"), "{msg}");
    }

    #[test]
    fn support_violation_blocks_the_conservative_forms() {
        let pol = PolicyPair::new(
            vec![0.5, 0.5],
            vec![1.0, 0.0],
            vec![0.5, 0.5],
            1,
            2,
        )
        .unwrap();
        assert!(!pol.support_ok);
        let mdp = TabularMdp {
            n_states: 1,
            n_actions: 2,
            p: vec![1.0, 1.0],
            r: vec![0.0, 0.0],
            gamma: 0.9,
        };
        let w = WeightAssignment::constant(2, 1.0, 1.0);
        assert!(acl_fixed_point(&mdp, &pol, &w).is_err());
        assert!(cql_fixed_point(&mdp, &pol, 1.0).is_err());
    }

    #[test]
    fn singular_systems_are_reported() {
        let mut a = vec![1.0, 1.0, 1.0, 1.0];
        let mut b = vec![1.0, 2.0];
        assert!(solve_dense(&mut a, &mut b, 2).is_err());

        // Known solution round-trip: x = [3, -2] under [[2, 1], [1, 3]].
        let mut a = vec![2.0, 1.0, 1.0, 3.0];
        let mut b = vec![4.0, -3.0];
        let x = solve_dense(&mut a, &mut b, 2).unwrap();
        assert!((x[0] - 3.0).abs() < 1e-12 && (x[1] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn ordering_report_covers_both_branches() {
        let (mdp, pol) = random_instance(47, 6);
        let n = mdp.n_pairs();
        // Zero gap: difference identically zero.
        let rep =
            verify_ordering_gap(&mdp, &pol, &WeightAssignment::constant(n, 0.0, 0.0)).unwrap();
        assert!(rep.all_passed(), "{:?}", rep.violations);

        // Positive gap mu / pi_beta everywhere pushes adaptive Q down.
        let rep =
            verify_ordering_gap(&mdp, &pol, &WeightAssignment::constant(n, 1.0, 0.0)).unwrap();
        assert!(rep.all_passed(), "{:?}", rep.violations);

        // Negative gap -1 everywhere pushes adaptive Q up.
        let rep =
            verify_ordering_gap(&mdp, &pol, &WeightAssignment::constant(n, 0.0, 1.0)).unwrap();
        assert!(rep.all_passed(), "{:?}", rep.violations);
    }

    #[test]
    fn resolvent_identity_with_synthetic_error_band() {
        let mdp = one_state_mdp();
        let pol = one_state_pol();
        let w = WeightAssignment { w_mu: vec![2.0], w_beta: vec![1.0] };
        // h = -(1 - 0.5)^{-1} * 1 = -2.
        let rep = verify_resolvent_sandwich(&mdp, &pol, &w, None).unwrap();
        assert!(rep.all_passed());
        let q_ord = ordinary_fixed_point(&mdp, &pol.pi).unwrap();
        let q_acl = acl_fixed_point(&mdp, &pol, &w).unwrap();
        assert!((q_acl[0] - q_ord[0] + 2.0).abs() < 1e-12);

        let rep = verify_resolvent_sandwich(&mdp, &pol, &w, Some(&[1.0])).unwrap();
        assert!(rep.all_passed());
        // Zero weights force h identically zero.
        let wz = WeightAssignment::constant(1, 0.0, 0.0);
        let rep = verify_resolvent_sandwich(&mdp, &pol, &wz, Some(&[0.0])).unwrap();
        assert!(rep.all_passed());
        // Negative error tables are rejected.
        assert!(verify_resolvent_sandwich(&mdp, &pol, &w, Some(&[-1.0])).is_err());
    }

    #[test]
    fn anchor_report_covers_both_branches() {
        let (mdp, pol) = random_instance(48, 7);
        let n = mdp.n_pairs();
        let alpha = 10.0;
        // Equal weights: gap identically zero, fixed points equal.
        let rep = verify_anchor_gap(
            &mdp,
            &pol,
            &WeightAssignment::constant(n, alpha, alpha),
            alpha,
        )
        .unwrap();
        assert!(rep.all_passed(), "{:?}", rep.violations);

        // w_mu below alpha with w_beta at alpha: gap mu / pi_beta > 0.
        let rep = verify_anchor_gap(
            &mdp,
            &pol,
            &WeightAssignment::constant(n, alpha - 1.0, alpha),
            alpha,
        )
        .unwrap();
        assert!(rep.all_passed(), "{:?}", rep.violations);

        // w_mu above alpha flips the sign.
        let rep = verify_anchor_gap(
            &mdp,
            &pol,
            &WeightAssignment::constant(n, alpha + 1.0, alpha),
            alpha,
        )
        .unwrap();
        assert!(rep.all_passed(), "{:?}", rep.violations);
    }

    #[test]
    fn wedge_orders_all_three_fixed_points() {
        for i in 0..10 {
            let (mdp, _) = random_instance(49, i);
            let mut rng = stream(49, StreamId::TabularInstance, 1000 + i);
            let (pol, w) = sandwich_case(&mdp, 10.0, &mut rng).unwrap();
            let q_ord = ordinary_fixed_point(&mdp, &pol.pi).unwrap();
            let q_acl = acl_fixed_point(&mdp, &pol, &w).unwrap();
            let q_cql = cql_fixed_point(&mdp, &pol, 10.0).unwrap();
            for j in 0..mdp.n_pairs() {
                assert!(q_acl[j] <= q_ord[j] + 1e-9, "instance {i} pair {j} upper");
                assert!(q_cql[j] <= q_acl[j] + 1e-9, "instance {i} pair {j} lower");
            }
            let spread = q_ord
                .iter()
                .zip(&q_cql)
                .map(|(o, c)| o - c)
                .fold(f64::INFINITY, f64::min);
            assert!(spread > 1e-6, "instance {i}: wedge collapsed");
        }
    }

    #[test]
    fn corpus_is_clean_and_mode_independent() {
        let seq = verify_corpus(20, 50, 10.0, ExecMode::Sequential);
        assert!(seq.violations.is_empty(), "{:?}", seq.violations);
        assert!(seq.checks_passed > 20 * 10);
        assert!(seq.max_residual < 1e-8);
        let par = verify_corpus(20, 50, 10.0, ExecMode::Parallel);
        assert_eq!(
            serde_json::to_string(&seq).unwrap(),
            serde_json::to_string(&par).unwrap()
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn random_instances_are_valid(index in 0u64..10_000) {
            let (mdp, pol) = random_instance(51, index);
            prop_assert!(mdp.validate().is_ok());
            prop_assert!(pol.support_ok);
            prop_assert!((2..=5).contains(&mdp.n_states));
            prop_assert!((2..=4).contains(&mdp.n_actions));
            for v in mdp.r.iter() {
                prop_assert!((-1.0..=1.0).contains(v));
            }
        }
    }
}
