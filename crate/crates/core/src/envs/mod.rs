//! Environments and batched trajectory collection.

pub mod chain;
mod rollout;
pub mod snake;

use rand_chacha::ChaCha8Rng;

pub use chain::{ChainState, DiscountingChain};
pub use rollout::{Collector, Policy, TrajectoryBatch, Transition};
pub use snake::{Snake, SnakeState};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    pub terminal: bool,
}

/// A seedable episodic environment with a discrete action set.
pub trait Environment: Send + Sync {
    type State: Clone + Send;

    /// Shape of a single observation.
    fn observation_shape(&self) -> Vec<usize>;
    fn num_actions(&self) -> usize;
    fn reset(&self, rng: &mut ChaCha8Rng) -> Self::State;
    fn step(&self, state: &mut Self::State, action: usize, rng: &mut ChaCha8Rng) -> Result<StepOutcome>;
    fn observe(&self, state: &Self::State, out: &mut [f64]);

    fn observation_len(&self) -> usize {
        self.observation_shape().iter().product()
    }
}

/// Environment identifiers accepted in experiment configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum EnvId {
    #[serde(rename = "discounting-chain")]
    DiscountingChain,
    #[serde(rename = "snake-6x6")]
    Snake6x6,
}

impl EnvId {
    pub fn as_str(self) -> &'static str {
        match self {
            EnvId::DiscountingChain => "discounting-chain",
            EnvId::Snake6x6 => "snake-6x6",
        }
    }
}

impl std::str::FromStr for EnvId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "discounting-chain" => Ok(EnvId::DiscountingChain),
            "snake-6x6" => Ok(EnvId::Snake6x6),
            other => Err(Error::Config(format!("unknown environment `{other}`"))),
        }
    }
}
