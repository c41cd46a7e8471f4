//! Discounting Chain: the first action picks one of five chains, each of
//! which pays a single reward after a fixed delay. Only the longest chain is
//! optimal, so a short discount horizon prefers the wrong one.

use rand_chacha::ChaCha8Rng;

use super::{Environment, StepOutcome};
use crate::autodiff::Real;
use crate::error::{Error, Result};

pub const NUM_CHAINS: usize = 5;
pub const REWARD_HORIZONS: [usize; NUM_CHAINS] = [1, 3, 10, 30, 100];
pub const REWARD_VALUES: [f64; NUM_CHAINS] = [1.0, 1.0, 1.0, 1.0, 1.1];
pub const EPISODE_LEN: usize = 100;
/// One-hot selection slots (five chains plus "none") and normalized time.
pub const OBSERVATION_LEN: usize = NUM_CHAINS + 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChainState {
    pub selected_chain: Option<usize>,
    pub timestep: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscountingChain {
    horizons: [usize; NUM_CHAINS],
    rewards: [f64; NUM_CHAINS],
    episode_len: usize,
}

impl Default for DiscountingChain {
    fn default() -> Self {
        DiscountingChain {
            horizons: REWARD_HORIZONS,
            rewards: REWARD_VALUES,
            episode_len: EPISODE_LEN,
        }
    }
}

impl DiscountingChain {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn episode_len(&self) -> usize {
        self.episode_len
    }

    pub fn horizons(&self) -> &[usize; NUM_CHAINS] {
        &self.horizons
    }

    pub fn rewards(&self) -> &[f64; NUM_CHAINS] {
        &self.rewards
    }

    /// The chain layout is fixed, so the seed does not influence the state.
    pub fn reset_with_seed(&self, _seed: u64) -> (ChainState, Vec<f64>) {
        let s = self.initial_state();
        let obs = self.observation(&s);
        (s, obs)
    }

    pub fn initial_state(&self) -> ChainState {
        ChainState {
            selected_chain: None,
            timestep: 0,
        }
    }

    pub fn is_terminal(&self, s: &ChainState) -> bool {
        s.timestep >= self.episode_len
    }

    /// Pure transition: returns the next state, reward, and terminal flag.
    pub fn transition(&self, s: &ChainState, action: usize) -> Result<(ChainState, f64, bool)> {
        if action >= NUM_CHAINS {
            return Err(Error::Action {
                action,
                num_actions: NUM_CHAINS,
            });
        }
        if self.is_terminal(s) {
            return Err(Error::State("step on a finished discounting-chain episode".into()));
        }
        let chain = s.selected_chain.unwrap_or(action);
        let reward = if s.timestep + 1 == self.horizons[chain] {
            self.rewards[chain]
        } else {
            0.0
        };
        let next = ChainState {
            selected_chain: Some(chain),
            timestep: s.timestep + 1,
        };
        Ok((next, reward, self.is_terminal(&next)))
    }

    pub fn observation(&self, s: &ChainState) -> Vec<f64> {
        let mut obs = vec![0.0; OBSERVATION_LEN];
        self.write_observation(s, &mut obs);
        obs
    }

    fn write_observation(&self, s: &ChainState, out: &mut [f64]) {
        out.iter_mut().for_each(|x| *x = 0.0);
        out[s.selected_chain.unwrap_or(NUM_CHAINS)] = 1.0;
        out[NUM_CHAINS + 1] = s.timestep as f64 / self.episode_len as f64;
    }

    /// Inverse of the observation encoding.
    pub fn decode_observation(&self, obs: &[f64]) -> Result<ChainState> {
        if obs.len() != OBSERVATION_LEN {
            return Err(Error::Shape(format!(
                "chain observation has {} entries, expected {OBSERVATION_LEN}",
                obs.len()
            )));
        }
        let slot = obs[..=NUM_CHAINS]
            .iter()
            .position(|&x| x == 1.0)
            .ok_or_else(|| Error::Shape("chain observation has no selection slot set".into()))?;
        let timestep = (obs[NUM_CHAINS + 1] * self.episode_len as f64).round() as usize;
        Ok(ChainState {
            selected_chain: (slot < NUM_CHAINS).then_some(slot),
            timestep,
        })
    }

    /// Exact `V^{pi,gamma}(s)`. `policy_probs` is the chain-selection
    /// distribution and only matters before a chain is chosen.
    pub fn analytic_value<T: Real>(&self, s: &ChainState, policy_probs: &[f64], gamma: T) -> Result<T> {
        let g = gamma.value();
        if !(g > 0.0 && g <= 1.0) {
            return Err(Error::Config(format!("discount {g} outside (0, 1]")));
        }
        match s.selected_chain {
            Some(i) => Ok(self.pending_value(i, s.timestep, gamma)),
            None => {
                validate_distribution(policy_probs, NUM_CHAINS)?;
                Ok((0..NUM_CHAINS).fold(T::zero(), |acc, i| {
                    acc + self.pending_value(i, s.timestep, gamma).scale(policy_probs[i])
                }))
            }
        }
    }

    /// Discounted value at `timestep` of chain `i`'s reward, if still unpaid.
    fn pending_value<T: Real>(&self, i: usize, timestep: usize, gamma: T) -> T {
        let h = self.horizons[i];
        if timestep < h {
            gamma.powi((h - 1 - timestep) as i32).scale(self.rewards[i])
        } else {
            T::zero()
        }
    }
}

pub(crate) fn validate_distribution(p: &[f64], n: usize) -> Result<()> {
    if p.len() != n {
        return Err(Error::Distribution(format!("{} probabilities for {n} outcomes", p.len())));
    }
    if p.iter().any(|&x| !(0.0..=1.0 + 1e-12).contains(&x)) {
        return Err(Error::Distribution(format!("probabilities out of range: {p:?}")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::Distribution(format!("probabilities sum to {s}")));
    }
    Ok(())
}

impl Environment for DiscountingChain {
    type State = ChainState;

    fn observation_shape(&self) -> Vec<usize> {
        vec![OBSERVATION_LEN]
    }

    fn num_actions(&self) -> usize {
        NUM_CHAINS
    }

    fn reset(&self, _rng: &mut ChaCha8Rng) -> ChainState {
        self.initial_state()
    }

    fn step(&self, state: &mut ChainState, action: usize, _rng: &mut ChaCha8Rng) -> Result<StepOutcome> {
        let (next, reward, terminal) = self.transition(state, action)?;
        *state = next;
        Ok(StepOutcome { reward, terminal })
    }

    fn observe(&self, state: &ChainState, out: &mut [f64]) {
        self.write_observation(state, out);
    }
}
