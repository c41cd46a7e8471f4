//! Meta-gradient engines for the discount: MG through one inner update and
//! BMG toward a bootstrapped target, plus the optimizers they differentiate.

mod engine;
mod optimizer;

pub use engine::{
    bmg_matching_gradient, bmg_meta_gradient, bmg_target, gamma_of_logit, inner_update, meta_update, mg_meta_gradient,
    mg_outer_gradient, outer_objective, outer_objective_targets, policy_divergence, Algorithm, BmgSpec, InnerStep,
    KlDirection, MetaGradient, MetaParams, OuterLossSpec, UpdateRule,
};
pub use optimizer::{
    clip_global_norm, OptimizerConfig, OptimizerKind, OptimizerState, ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON,
    RMSPROP_DECAY, RMSPROP_EPSILON,
};

#[cfg(test)]
mod tests;
