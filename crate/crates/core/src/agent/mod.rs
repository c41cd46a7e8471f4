//! Policy and critic networks, advantage estimation and actor-critic losses.

mod gae;
mod loss;
mod network;

pub use gae::{batch_gae, gae_advantages};
pub use loss::{
    entropy, inner_loss, outer_critic_td_loss, outer_loss, outer_targets, AdvantageTargets, InnerLossSpec,
    LossCoefficients, LossGraph, OracleDiscount, ValueSource,
};
pub use network::{Agent, AgentParams, Architecture, NetworkSpec, ParamVars};
