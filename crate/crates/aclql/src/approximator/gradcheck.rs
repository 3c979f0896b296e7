//! Central-difference gradient verification.
//!
//! Each sampled coordinate is probed at several step sizes and passes on its
//! best agreement. A genuine gradient bug keeps a constant relative error at
//! every step size; step-size retries only absorb finite-difference
//! artifacts (truncation, roundoff, or a ReLU/hinge kink straddled by one
//! particular h).

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use super::mlp::{Mlp, MlpGrads};

pub const FD_DEFAULT_H: f64 = 1e-5;
const LADDER: [f64; 4] = [1.0, 8.0, 0.125, 1.0 / 64.0];

#[derive(Debug, Clone, Copy)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Relative error with the spec floor: |a - b| / max(|a|, |b|, 1e-8).
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares `analytic` against central differences of `loss` over a random
/// subsample of at least `min_coords` coordinates (all of them if the net is
/// small). Returns the max relative error across checked coordinates.
pub fn finite_diff_check<F>(
    net: &Mlp,
    analytic: &MlpGrads,
    loss: F,
    h: f64,
    min_coords: usize,
    rng: &mut ChaCha8Rng,
) -> FdReport
where
    F: Fn(&Mlp) -> f64,
{
    let flat = net.flat_params();
    let flat_grads: Vec<f64> = analytic.blocks.iter().flatten().copied().collect();
    let n = flat.len();
    let mut coords: Vec<usize> = (0..n).collect();
    if n > min_coords {
        coords.shuffle(rng);
        coords.truncate(min_coords);
        coords.sort_unstable();
    }

    let mut probe = net.clone();
    let mut max_rel = 0.0f64;
    for &idx in &coords {
        let g = flat_grads[idx];
        let mut best = f64::INFINITY;
        for scale in LADDER {
            let step = h * scale;
            let mut p = flat.clone();
            p[idx] += step;
            probe.set_flat_params(&p).expect("same shape");
            let up = loss(&probe);
            p[idx] -= 2.0 * step;
            probe.set_flat_params(&p).expect("same shape");
            let down = loss(&probe);
            let fd = (up - down) / (2.0 * step);
            best = best.min(rel_err(g, fd));
            if best <= 1e-12 {
                break;
            }
        }
        max_rel = max_rel.max(best);
    }
    FdReport {
        max_rel_err: max_rel,
        checked: coords.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, StreamId};

    #[test]
    fn linear_loss_checks_to_machine_precision() {
        // L = sum(outputs): gradient exact, central differences exact too.
        let mut rng = stream(20, StreamId::NetInit, 0);
        let net = Mlp::new("t", 2, &[4], 2, &mut rng, 1.0);
        let x = [0.7, -0.3];
        let cache = net.forward_cached(&x);
        let mut grads = MlpGrads::zeros_like(&net);
        net.backward(&cache, &[1.0, 1.0], &mut grads, false);
        let mut fd_rng = stream(20, StreamId::GradCheck, 0);
        let report = finite_diff_check(
            &net,
            &grads,
            |n| n.forward(&x).iter().sum(),
            FD_DEFAULT_H,
            64,
            &mut fd_rng,
        );
        assert!(report.max_rel_err <= 1e-9, "{}", report.max_rel_err);
    }

    #[test]
    fn quadratic_loss_checks_tightly() {
        let mut rng = stream(21, StreamId::NetInit, 0);
        let net = Mlp::new("t", 3, &[6, 6], 1, &mut rng, 1.0);
        let x = [0.1, 0.5, -0.9];
        let cache = net.forward_cached(&x);
        let y = cache.output()[0];
        let mut grads = MlpGrads::zeros_like(&net);
        net.backward(&cache, &[y], &mut grads, false);
        let mut fd_rng = stream(21, StreamId::GradCheck, 0);
        let report = finite_diff_check(
            &net,
            &grads,
            |n| {
                let v = n.forward(&x)[0];
                0.5 * v * v
            },
            FD_DEFAULT_H,
            64,
            &mut fd_rng,
        );
        assert!(report.max_rel_err <= 1e-7, "{}", report.max_rel_err);
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        let mut rng = stream(22, StreamId::NetInit, 0);
        let net = Mlp::new("t", 2, &[4], 1, &mut rng, 1.0);
        let x = [0.4, 0.2];
        let cache = net.forward_cached(&x);
        let mut grads = MlpGrads::zeros_like(&net);
        net.backward(&cache, &[1.0], &mut grads, false);
        // Corrupt every block by doubling: no step size can make this agree.
        for b in &mut grads.blocks {
            for g in b {
                *g *= 2.0;
            }
        }
        let mut fd_rng = stream(22, StreamId::GradCheck, 0);
        let report = finite_diff_check(
            &net,
            &grads,
            |n| n.forward(&x)[0],
            FD_DEFAULT_H,
            64,
            &mut fd_rng,
        );
        assert!(report.max_rel_err > 1e-2, "{}", report.max_rel_err);
    }
}
