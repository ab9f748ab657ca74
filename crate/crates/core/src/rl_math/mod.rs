//! Off-policy RL mathematics on exactly evaluable toy policies.

pub mod estimators;
pub mod experiments;
pub mod kl;
pub mod policy;
pub mod sampling;
pub mod trajectory;

pub use estimators::{
    ess, finite_difference_gradient, fit_baseline, is_reinforce_gradient, max_relative_error, reinforce_gradient,
    surrogate_objective, truncated_is_weight, BaselineTable, IsGranularity, DEFAULT_IS_CLAMP,
};
pub use kl::{categorical_kl, kl_per_position, mean_curve};
pub use policy::{
    drifting_checkpoints, log_softmax, policy_logprobs, ContextKey, DecodeState, LogitTable, Policy,
    RecurrentToyPolicy, TabularPolicy,
};
pub use sampling::{
    mixed_policy_sample, sample_categorical, sample_trajectories, BehaviorRoller, BehaviorSpec, MixedPolicySchedule,
};
pub use trajectory::{assign_rewards, read_trajectories, write_trajectories, Trajectory};
