//! Per-transition quality scores and the conservatism gaps derived from
//! them.
//!
//! Quality mixes a normalized discounted return with a normalized immediate
//! reward: m = lambda * g_norm + (1 - lambda) * r_norm. Off-dataset actions
//! get a transferred score that decays with distance from the dataset action
//! at the same state. Gaps split the reward ceiling between the two
//! conservatism targets: d_ord + d_cql = r_max.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::QualityMode;
use crate::dataset::OfflineDataset;
use crate::error::{Error, Result};
use crate::exec::ExecMode;

/// Discounted Monte Carlo return per step, computed by the backward
/// recursion g_t = r_t + gamma * g_{t+1}. Episodes cut off by the horizon
/// are scored on what was observed, same as terminated ones.
pub fn mc_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut g = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        g[t] = acc;
    }
    g
}

/// Truncated n-step return per step, no bootstrap: sum of the next n
/// rewards, discounted. Evaluated by the same backward Horner recurrence as
/// [`mc_returns`], so whenever the window reaches the episode end the value
/// is bit-identical to the Monte Carlo return.
pub fn nstep_sarsa_returns(rewards: &[f64], gamma: f64, n: u32) -> Vec<f64> {
    let len = rewards.len();
    let n = n.max(1) as usize;
    let mut g = vec![0.0; len];
    for (t, gt) in g.iter_mut().enumerate() {
        let end = (t + n).min(len);
        let mut acc = 0.0;
        for j in (t..end).rev() {
            acc = rewards[j] + gamma * acc;
        }
        *gt = acc;
    }
    g
}

pub const QUALITY_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityHeader {
    pub version: u32,
    pub lambda: f64,
    pub mode: String,
    /// Hash of the run configuration that wrote the file; empty for
    /// annotations held in memory.
    #[serde(default)]
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityRow {
    pub eps: u64,
    pub t: u64,
    pub g: f64,
    pub g_norm: f64,
    pub r_norm: f64,
    pub m: f64,
}

/// Sidecar annotations, rows in dataset transition order.
#[derive(Debug, Clone, PartialEq)]
pub struct QualityAnnotations {
    pub header: QualityHeader,
    pub rows: Vec<QualityRow>,
}

fn normalize(x: f64, min: f64, max: f64) -> f64 {
    // Constant signal carries no ranking information; park it mid-scale.
    if max == min {
        0.5
    } else {
        (x - min) / (max - min)
    }
}

pub fn annotate_dataset(
    dataset: &OfflineDataset,
    lambda: f64,
    mode: QualityMode,
    exec: ExecMode,
) -> Result<QualityAnnotations> {
    if dataset.episodes.is_empty() {
        return Err(Error::Schema("cannot annotate an empty dataset".into()));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda {lambda} outside [0, 1]")));
    }

    let gamma = dataset.header.gamma;
    let per_episode: Vec<Vec<f64>> = exec.map(&dataset.episodes, |ep| {
        let rewards: Vec<f64> = ep.transitions.iter().map(|tr| tr.r).collect();
        match mode {
            QualityMode::LambdaMix => mc_returns(&rewards, gamma),
            QualityMode::NstepSarsa(n) => nstep_sarsa_returns(&rewards, gamma, n),
        }
    });

    let mut g_min = f64::INFINITY;
    let mut g_max = f64::NEG_INFINITY;
    let mut r_min = f64::INFINITY;
    let mut r_max = f64::NEG_INFINITY;
    for (ep, gs) in dataset.episodes.iter().zip(&per_episode) {
        for (tr, &g) in ep.transitions.iter().zip(gs) {
            g_min = g_min.min(g);
            g_max = g_max.max(g);
            r_min = r_min.min(tr.r);
            r_max = r_max.max(tr.r);
        }
    }

    let mut rows = Vec::with_capacity(dataset.n_transitions());
    for (ep, gs) in dataset.episodes.iter().zip(&per_episode) {
        for (tr, &g) in ep.transitions.iter().zip(gs) {
            let g_norm = normalize(g, g_min, g_max);
            let r_norm = normalize(tr.r, r_min, r_max);
            let m = (lambda * g_norm + (1.0 - lambda) * r_norm).clamp(0.0, 1.0);
            rows.push(QualityRow {
                eps: tr.eps,
                t: tr.t,
                g,
                g_norm,
                r_norm,
                m,
            });
        }
    }

    Ok(QualityAnnotations {
        header: QualityHeader {
            version: QUALITY_VERSION,
            lambda,
            mode: mode.to_string(),
            config_hash: String::new(),
        },
        rows,
    })
}

/// Quality transferred to an off-dataset action at the same state.
///
/// The in-dataset score and the scaled action distance are fused by
/// T(x1, x2) = (x1 - x2/2 + 1) / 2 with x1 = m_in in [0, 1] and
/// x2 = 2 * ||a_ood - a_in|| / (2 * sqrt(d)) clamped to [0, 2], so the
/// result stays in [0, 1], rises with m_in and falls with distance.
pub fn ood_quality(m_in: f64, a_ood: &[f64], a_in: &[f64]) -> Result<f64> {
    if a_ood.len() != a_in.len() || a_in.is_empty() {
        return Err(Error::Dim(format!(
            "action dims {} vs {}",
            a_ood.len(),
            a_in.len()
        )));
    }
    if !(0.0..=1.0).contains(&m_in) {
        return Err(Error::Schema(format!("m_in {m_in} outside [0, 1]")));
    }
    let dist2: f64 = a_ood
        .iter()
        .zip(a_in)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let d = a_in.len() as f64;
    let x2 = (2.0 * dist2.sqrt() / (2.0 * d.sqrt())).clamp(0.0, 2.0);
    Ok(0.5 * (m_in - 0.5 * x2 + 1.0))
}

/// Conservatism gap split: the ordinary-side gap shrinks and the CQL-side
/// gap grows as quality m rises.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapPair {
    pub d_ord: f64,
    pub d_cql: f64,
}

pub fn gaps(m: f64, r_max: f64) -> GapPair {
    GapPair {
        d_ord: (1.0 - m) * r_max,
        d_cql: m * r_max,
    }
}

pub fn save_annotations(ann: &QualityAnnotations, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let emit = |w: &mut BufWriter<File>, s: String| -> Result<()> {
        w.write_all(s.as_bytes())
            .and_then(|_| w.write_all(b"\n"))
            .map_err(|e| Error::io(path, e))
    };
    emit(&mut w, serde_json::to_string(&ann.header).expect("header serializes"))?;
    for row in &ann.rows {
        emit(&mut w, serde_json::to_string(row).expect("row serializes"))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_annotations(path: &Path) -> Result<QualityAnnotations> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let header: QualityHeader = match lines.next() {
        Some((_, Ok(line))) => serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.into(),
            line: 1,
            msg: e.to_string(),
        })?,
        Some((_, Err(e))) => return Err(Error::io(path, e)),
        None => {
            return Err(Error::Parse {
                path: path.into(),
                line: 1,
                msg: "missing header line".into(),
            })
        }
    };
    if header.version != QUALITY_VERSION {
        return Err(Error::Schema(format!(
            "unsupported quality version {}",
            header.version
        )));
    }
    let mut rows = Vec::new();
    for (idx, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let row: QualityRow = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.into(),
            line: idx + 1,
            msg: e.to_string(),
        })?;
        if !(row.g.is_finite() && row.m.is_finite()) || !(0.0..=1.0).contains(&row.m) {
            return Err(Error::Schema(format!(
                "quality row eps {} t {}: m outside [0, 1] or non-finite",
                row.eps, row.t
            )));
        }
        rows.push(row);
    }
    Ok(QualityAnnotations { header, rows })
}

/// Checks that the annotation rows line up one-to-one with the dataset's
/// transitions, in order.
pub fn check_alignment(dataset: &OfflineDataset, ann: &QualityAnnotations) -> Result<()> {
    if ann.rows.len() != dataset.n_transitions() {
        return Err(Error::Schema(format!(
            "annotation rows {} vs dataset transitions {}",
            ann.rows.len(),
            dataset.n_transitions()
        )));
    }
    for (tr, row) in dataset.iter_transitions().zip(&ann.rows) {
        if tr.eps != row.eps || tr.t != row.t {
            return Err(Error::Schema(format!(
                "annotation misaligned at eps {} t {} (dataset has eps {} t {})",
                row.eps, row.t, tr.eps, tr.t
            )));
        }
    }
    Ok(())
}
