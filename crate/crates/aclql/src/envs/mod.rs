//! Desk-scale environments: a continuous point-mass task with scripted
//! dataset tiers and normalized scoring, and a gridworld that exports its
//! exact finite MDP for the oracle suite.

mod gridworld;
mod point_mass;
mod registry;

pub use gridworld::{Gridworld, GRID_ACTIONS};
pub use point_mass::{
    anchor_episode_return, gen_point_mass, scripted_action, PointMass2D, QualityTier, StepOut,
    GOAL, GOAL_BONUS, GOAL_RADIUS, HORIZON, POINT_MASS_ACTION_DIM, POINT_MASS_ENV,
    POINT_MASS_OBS_DIM, START,
};
pub use registry::{
    compute_anchors, env_spec, normalized_score, registry, EnvSpec, ScoreAnchors, ANCHOR_EPISODES,
    ANCHOR_EXPERT_OFFSET, ANCHOR_SEED,
};
