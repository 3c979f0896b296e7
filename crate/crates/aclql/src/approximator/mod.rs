//! Function approximation: rectifier MLPs with analytic gradients, the
//! distribution heads built on them, Adam, Polyak target tracking, JSON
//! checkpoints, and finite-difference gradient verification.

mod adam;
mod checkpoint;
mod gradcheck;
mod heads;
mod mlp;

pub use adam::{adam_step, polyak_update, AdamState, ScalarAdam, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use checkpoint::{Checkpoint, NetBlock, CHECKPOINT_VERSION};
pub use gradcheck::{finite_diff_check, FdReport, FD_DEFAULT_H};
pub use heads::{
    actor_action_dim, actor_backward, actor_mean_action, actor_sample, behavior_log_prob, concat,
    weight_backward, weight_forward, ActorEval, LN_2PI, LOG_STD_MAX, LOG_STD_MIN, TANH_SAT_FLOOR,
};
pub use mlp::{ForwardCache, Mlp, MlpGrads, ParameterBlock};
