//! Continuous 2-D point-mass task and the scripted controllers that
//! generate its quality-tiered offline datasets.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::fmt;
use std::str::FromStr;

use crate::dataset::{DatasetHeader, Episode, OfflineDataset, Transition, DATASET_VERSION};
use crate::error::{Error, Result};
use crate::rng::{stream, StreamId};

pub const POINT_MASS_ENV: &str = "point-mass-2d";
pub const POINT_MASS_OBS_DIM: usize = 4;
pub const POINT_MASS_ACTION_DIM: usize = 2;
pub const HORIZON: usize = 200;
pub const GOAL: [f64; 2] = [1.0, 1.0];
pub const START: [f64; 2] = [-1.0, -1.0];
pub const GOAL_RADIUS: f64 = 0.1;
pub const GOAL_BONUS: f64 = 10.0;
const POS_LIMIT: f64 = 2.0;
const VEL_LIMIT: f64 = 1.0;
const POS_STEP: f64 = 0.05;
const VEL_STEP: f64 = 0.1;

/// Point mass accelerating toward a fixed goal. Observation is
/// [pos_x, pos_y, vel_x, vel_y]; actions are accelerations in [-1, 1]^2.
/// There is no terminal state: episodes truncate at the horizon, so dataset
/// rows never set the done flag.
#[derive(Debug, Clone)]
pub struct PointMass2D {
    pos: [f64; 2],
    vel: [f64; 2],
    t: usize,
}

pub struct StepOut {
    pub obs: Vec<f64>,
    pub reward: f64,
    pub truncated: bool,
}

impl Default for PointMass2D {
    fn default() -> Self {
        PointMass2D { pos: START, vel: [0.0; 2], t: 0 }
    }
}

impl PointMass2D {
    pub fn reset(&mut self) -> Vec<f64> {
        *self = PointMass2D::default();
        self.obs()
    }

    pub fn obs(&self) -> Vec<f64> {
        vec![self.pos[0], self.pos[1], self.vel[0], self.vel[1]]
    }

    fn dist_to_goal(&self) -> f64 {
        let dx = self.pos[0] - GOAL[0];
        let dy = self.pos[1] - GOAL[1];
        (dx * dx + dy * dy).sqrt()
    }

    /// Position integrates the old velocity, then velocity integrates the
    /// clamped action; both state components are clamped to their boxes.
    /// Reward is scored on the post-step position.
    pub fn step(&mut self, action: [f64; 2]) -> StepOut {
        for (i, &act) in action.iter().enumerate() {
            let a = act.clamp(-1.0, 1.0);
            self.pos[i] = (self.pos[i] + POS_STEP * self.vel[i]).clamp(-POS_LIMIT, POS_LIMIT);
            self.vel[i] = (self.vel[i] + VEL_STEP * a).clamp(-VEL_LIMIT, VEL_LIMIT);
        }
        self.t += 1;
        let dist = self.dist_to_goal();
        let reward = -dist + if dist < GOAL_RADIUS { GOAL_BONUS } else { 0.0 };
        StepOut { obs: self.obs(), reward, truncated: self.t >= HORIZON }
    }
}

/// Proportional-derivative push toward the goal, clamped to the action box.
/// Gains chosen so the noise-free controller settles inside the goal radius
/// well within the horizon.
pub fn scripted_action(obs: &[f64]) -> [f64; 2] {
    const KP: f64 = 2.0;
    const KD: f64 = 3.0;
    let mut a = [0.0; 2];
    for i in 0..2 {
        a[i] = (KP * (GOAL[i] - obs[i]) - KD * obs[2 + i]).clamp(-1.0, 1.0);
    }
    a
}

/// Dataset quality tiers mirroring the usual offline-RL taxonomy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QualityTier {
    Expert,
    Medium,
    MediumReplay,
    Random,
}

impl QualityTier {
    pub const ALL: [QualityTier; 4] = [
        QualityTier::Expert,
        QualityTier::Medium,
        QualityTier::MediumReplay,
        QualityTier::Random,
    ];
}

impl fmt::Display for QualityTier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            QualityTier::Expert => "expert",
            QualityTier::Medium => "medium",
            QualityTier::MediumReplay => "medium-replay",
            QualityTier::Random => "random",
        };
        f.write_str(s)
    }
}

impl FromStr for QualityTier {
    type Err = Error;

    fn from_str(s: &str) -> Result<QualityTier> {
        match s {
            "expert" => Ok(QualityTier::Expert),
            "medium" => Ok(QualityTier::Medium),
            "medium-replay" => Ok(QualityTier::MediumReplay),
            "random" => Ok(QualityTier::Random),
            other => Err(Error::Usage(format!(
                "unknown quality tier '{other}' (expected expert, medium, medium-replay, random)"
            ))),
        }
    }
}

/// Noise level of the scripted controller per tier; random ignores it.
fn controller_sigma(tier: QualityTier) -> f64 {
    match tier {
        QualityTier::Expert => 0.05,
        QualityTier::Medium => 0.4,
        QualityTier::Random | QualityTier::MediumReplay => unreachable!("resolved per episode"),
    }
}

fn tier_action(tier: QualityTier, obs: &[f64], rng: &mut ChaCha8Rng) -> [f64; 2] {
    match tier {
        QualityTier::Random => [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
        QualityTier::Expert | QualityTier::Medium => {
            let sigma = controller_sigma(tier);
            let base = scripted_action(obs);
            let mut a = [0.0; 2];
            for i in 0..2 {
                let eps: f64 = StandardNormal.sample(rng);
                a[i] = (base[i] + sigma * eps).clamp(-1.0, 1.0);
            }
            a
        }
        QualityTier::MediumReplay => unreachable!("resolved per episode"),
    }
}

/// The tier an individual episode rolls with: the replay mix alternates
/// between its two sources so the split is exactly half and half.
fn episode_tier(tier: QualityTier, ep: usize) -> QualityTier {
    match tier {
        QualityTier::MediumReplay => {
            if ep.is_multiple_of(2) {
                QualityTier::Medium
            } else {
                QualityTier::Random
            }
        }
        other => other,
    }
}

fn roll_episode(ep: u64, tier: QualityTier, seed: u64) -> Episode {
    let mut rng = stream(seed, StreamId::DataEpisode, ep);
    let mut env = PointMass2D::default();
    let mut obs = env.reset();
    let mut transitions = Vec::with_capacity(HORIZON);
    for t in 0..HORIZON {
        let action = tier_action(tier, &obs, &mut rng);
        let out = env.step(action);
        transitions.push(Transition {
            eps: ep,
            t: t as u64,
            s: obs,
            a: action.to_vec(),
            r: out.reward,
            s2: out.obs.clone(),
            done: false,
        });
        obs = out.obs;
    }
    Episode { id: ep, transitions }
}

/// Rolls `episodes` point-mass episodes under the tier's policy. Episode
/// `ep` consumes only its own rng stream, so datasets are reproducible
/// bitwise and the replay mix shares episodes with its source tiers.
pub fn gen_point_mass(
    tier: QualityTier,
    episodes: usize,
    seed: u64,
    gamma: f64,
) -> OfflineDataset {
    let eps: Vec<Episode> = (0..episodes)
        .map(|ep| roll_episode(ep as u64, episode_tier(tier, ep), seed))
        .collect();
    OfflineDataset {
        header: DatasetHeader {
            version: DATASET_VERSION,
            env: POINT_MASS_ENV.to_string(),
            obs_dim: POINT_MASS_OBS_DIM,
            action_dim: POINT_MASS_ACTION_DIM,
            gamma,
            config_hash: String::new(),
        },
        episodes: eps,
    }
}

/// Undiscounted return of one anchor episode. Anchor episodes use their own
/// rng component so dataset regeneration cannot disturb the stored scores.
pub fn anchor_episode_return(tier: QualityTier, index: u64, seed: u64) -> f64 {
    let mut rng = stream(seed, StreamId::Anchor, index);
    let mut env = PointMass2D::default();
    let mut obs = env.reset();
    let mut ret = 0.0;
    for _ in 0..HORIZON {
        let action = tier_action(tier, &obs, &mut rng);
        let out = env.step(action);
        ret += out.reward;
        obs = out.obs;
    }
    ret
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{compute_stats, save_dataset};

    #[test]
    fn noise_free_controller_settles_in_goal_region() {
        let mut env = PointMass2D::default();
        let mut obs = env.reset();
        let mut min_dist = f64::INFINITY;
        let mut final_dist = f64::INFINITY;
        for _ in 0..HORIZON {
            let out = env.step(scripted_action(&obs));
            obs = out.obs;
            let dx = obs[0] - GOAL[0];
            let dy = obs[1] - GOAL[1];
            final_dist = (dx * dx + dy * dy).sqrt();
            min_dist = min_dist.min(final_dist);
        }
        assert!(min_dist < GOAL_RADIUS, "controller never entered the goal region");
        assert!(final_dist < GOAL_RADIUS, "controller did not stay at the goal");
    }

    #[test]
    fn state_stays_inside_the_boxes() {
        let mut env = PointMass2D::default();
        env.reset();
        // Saturating push down-left; also checks input clamping.
        for _ in 0..HORIZON {
            let out = env.step([-5.0, -5.0]);
            assert!(out.obs[0] >= -2.0 && out.obs[1] >= -2.0);
            assert!(out.obs[2] >= -1.0 && out.obs[3] >= -1.0);
        }
    }

    #[test]
    fn generation_is_byte_identical_per_seed() {
        let a = gen_point_mass(QualityTier::Medium, 3, 9, 0.99);
        let b = gen_point_mass(QualityTier::Medium, 3, 9, 0.99);
        let dir = tempfile::tempdir().unwrap();
        let pa = dir.path().join("a.jsonl");
        let pb = dir.path().join("b.jsonl");
        save_dataset(&a, &pa).unwrap();
        save_dataset(&b, &pb).unwrap();
        let ba = std::fs::read(&pa).unwrap();
        let bb = std::fs::read(&pb).unwrap();
        assert!(!ba.is_empty());
        assert_eq!(ba, bb);
    }

    #[test]
    fn tiers_are_separable_by_mean_return() {
        let mean = |tier| {
            let d = gen_point_mass(tier, 6, 10, 0.99);
            compute_stats(&d).unwrap().mean_return
        };
        let expert = mean(QualityTier::Expert);
        let medium = mean(QualityTier::Medium);
        let replay = mean(QualityTier::MediumReplay);
        let random = mean(QualityTier::Random);
        assert!(expert > medium, "expert {expert} vs medium {medium}");
        assert!(medium > replay, "medium {medium} vs replay {replay}");
        assert!(replay > random, "replay {replay} vs random {random}");
    }

    #[test]
    fn replay_mix_shares_episodes_with_its_sources() {
        let replay = gen_point_mass(QualityTier::MediumReplay, 4, 11, 0.99);
        let medium = gen_point_mass(QualityTier::Medium, 4, 11, 0.99);
        let random = gen_point_mass(QualityTier::Random, 4, 11, 0.99);
        assert_eq!(replay.episodes[0], medium.episodes[0]);
        assert_eq!(replay.episodes[2], medium.episodes[2]);
        assert_eq!(replay.episodes[1], random.episodes[1]);
        assert_eq!(replay.episodes[3], random.episodes[3]);
    }
}
