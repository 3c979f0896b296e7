//! Env registry with the normalized-score anchors. The anchors are Monte
//! Carlo estimates computed once by [`compute_anchors`] under the protocol
//! recorded next to them, then frozen into `registry.json`; a test
//! regenerates them and fails if the stored values drift.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use super::point_mass::{anchor_episode_return, QualityTier};
use crate::error::{Error, Result};

/// Seed the stored anchors were generated with.
pub const ANCHOR_SEED: u64 = 77;
/// Episodes per tier in the anchor estimate.
pub const ANCHOR_EPISODES: usize = 1000;
/// Offset separating expert anchor episode streams from random ones.
pub const ANCHOR_EXPERT_OFFSET: u64 = 1_000_000;

const REGISTRY_JSON: &str = include_str!("registry.json");

/// Score endpoints: 0 maps to the random policy's mean return, 100 to the
/// noisy scripted expert's.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreAnchors {
    #[serde(rename = "random")]
    pub random_return: f64,
    #[serde(rename = "expert")]
    pub expert_return: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnvSpec {
    pub obs_dim: usize,
    pub action_dim: usize,
    pub anchors: ScoreAnchors,
    pub anchor_seed_protocol: String,
}

/// Parses the embedded registry and checks the anchor invariant.
pub fn registry() -> Result<BTreeMap<String, EnvSpec>> {
    let reg: BTreeMap<String, EnvSpec> = serde_json::from_str(REGISTRY_JSON)
        .map_err(|e| Error::Schema(format!("env registry: {e}")))?;
    for (name, spec) in &reg {
        if spec.anchors.expert_return <= spec.anchors.random_return {
            return Err(Error::Schema(format!(
                "env {name}: expert anchor must exceed random anchor"
            )));
        }
    }
    Ok(reg)
}

pub fn env_spec(name: &str) -> Result<EnvSpec> {
    registry()?
        .remove(name)
        .ok_or_else(|| Error::Usage(format!("unknown env '{name}'")))
}

/// 100 * (mean_return - random) / (expert - random); not clipped to
/// [0, 100].
pub fn normalized_score(mean_return: f64, anchors: &ScoreAnchors) -> Result<f64> {
    let span = anchors.expert_return - anchors.random_return;
    if span == 0.0 {
        return Err(Error::Schema("score anchors coincide".into()));
    }
    Ok(100.0 * (mean_return - anchors.random_return) / span)
}

/// Reconstructs the point-mass anchors under the stored protocol: the mean
/// undiscounted return over [`ANCHOR_EPISODES`] episodes per tier at seed
/// [`ANCHOR_SEED`], expert episodes offset by [`ANCHOR_EXPERT_OFFSET`] in
/// the stream index.
pub fn compute_anchors() -> ScoreAnchors {
    let mean = |tier: QualityTier, offset: u64| -> f64 {
        let total: f64 = (0..ANCHOR_EPISODES)
            .map(|ep| anchor_episode_return(tier, offset + ep as u64, ANCHOR_SEED))
            .sum();
        total / ANCHOR_EPISODES as f64
    };
    ScoreAnchors {
        random_return: mean(QualityTier::Random, 0),
        expert_return: mean(QualityTier::Expert, ANCHOR_EXPERT_OFFSET),
    }
}
