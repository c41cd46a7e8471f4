use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Environment;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Maps a batch of observations `[N, ...]` to action log-probabilities `[N, A]`.
pub trait Policy {
    fn log_probs(&self, observations: &Tensor) -> Result<Tensor>;
}

impl<F> Policy for F
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    fn log_probs(&self, observations: &Tensor) -> Result<Tensor> {
        self(observations)
    }
}

/// One environment step as seen by the learner.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub observation: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub terminal: bool,
    /// After a terminal step this is the reset observation of the next episode.
    pub next_observation: Vec<f64>,
    pub behavior_log_prob: f64,
}

/// `B` sequences of `T` steps, stored sequence-major (`row = b * T + t`).
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBatch {
    pub batch_size: usize,
    pub seq_len: usize,
    /// `[B*T, obs...]`
    pub observations: Tensor,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub terminals: Vec<bool>,
    pub behavior_log_probs: Vec<f64>,
    /// Observation after the last step of each sequence, `[B, obs...]`.
    pub bootstrap_observations: Tensor,
    /// Returns of episodes that ended inside this batch.
    pub episode_returns: Vec<f64>,
}

impl TrajectoryBatch {
    pub fn len(&self) -> usize {
        self.batch_size * self.seq_len
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn observation_len(&self) -> usize {
        self.observations.len() / self.len()
    }

    pub fn observation(&self, row: usize) -> &[f64] {
        let d = self.observation_len();
        &self.observations.data()[row * d..(row + 1) * d]
    }

    pub fn transition(&self, b: usize, t: usize) -> Transition {
        let row = b * self.seq_len + t;
        let d = self.observation_len();
        let next_observation = if t + 1 < self.seq_len {
            self.observation(row + 1).to_vec()
        } else {
            self.bootstrap_observations.data()[b * d..(b + 1) * d].to_vec()
        };
        Transition {
            observation: self.observation(row).to_vec(),
            action: self.actions[row],
            reward: self.rewards[row],
            terminal: self.terminals[row],
            next_observation,
            behavior_log_prob: self.behavior_log_probs[row],
        }
    }

    /// Mean of completed-episode returns, if any episode finished.
    pub fn mean_episode_return(&self) -> Option<f64> {
        if self.episode_returns.is_empty() {
            None
        } else {
            Some(self.episode_returns.iter().sum::<f64>() / self.episode_returns.len() as f64)
        }
    }
}

#[derive(Debug, Clone)]
struct Stream<S> {
    state: S,
    rng: ChaCha8Rng,
    episode_return: f64,
}

/// `B` independent environment streams with their own RNG substreams.
/// Cloning a collector clones its RNG state, so a clone replays identical
/// batches under the same policy.
#[derive(Debug, Clone)]
pub struct Collector<E: Environment> {
    env: E,
    streams: Vec<Stream<E::State>>,
}

fn sample_categorical(log_probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, lp) in log_probs.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    // u landed in the rounding gap above the cumulative sum
    log_probs
        .iter()
        .enumerate()
        .rev()
        .find(|(_, lp)| lp.is_finite() && lp.exp() > 0.0)
        .map(|(i, _)| i)
        .unwrap_or(0)
}

impl<E: Environment> Collector<E> {
    pub fn new(env: E, batch_size: usize, seed: u64) -> Self {
        let streams = (0..batch_size)
            .map(|b| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(b as u64);
                let state = env.reset(&mut rng);
                Stream {
                    state,
                    rng,
                    episode_return: 0.0,
                }
            })
            .collect();
        Collector { env, streams }
    }

    pub fn env(&self) -> &E {
        &self.env
    }

    pub fn batch_size(&self) -> usize {
        self.streams.len()
    }

    fn observe_all(&self) -> Result<Tensor> {
        let d = self.env.observation_len();
        let mut data = vec![0.0; self.streams.len() * d];
        for (s, out) in self.streams.iter().zip(data.chunks_mut(d)) {
            self.env.observe(&s.state, out);
        }
        let mut shape = vec![self.streams.len()];
        shape.extend(self.env.observation_shape());
        Tensor::new(shape, data)
    }

    /// Advances every stream `seq_len` steps under `policy`, resetting
    /// finished episodes in place.
    pub fn collect(&mut self, policy: &dyn Policy, seq_len: usize) -> Result<TrajectoryBatch> {
        let b = self.streams.len();
        if b == 0 || seq_len == 0 {
            return Err(Error::Config("rollout needs B >= 1 and T >= 1".into()));
        }
        let d = self.env.observation_len();
        let n = b * seq_len;
        let mut observations = vec![0.0; n * d];
        let mut actions = vec![0; n];
        let mut rewards = vec![0.0; n];
        let mut terminals = vec![false; n];
        let mut behavior_log_probs = vec![0.0; n];
        let mut episode_returns = Vec::new();
        let num_actions = self.env.num_actions();

        for t in 0..seq_len {
            let obs = self.observe_all()?;
            let lp = policy.log_probs(&obs)?;
            if lp.shape() != [b, num_actions] {
                return Err(Error::Shape(format!(
                    "policy returned {:?}, expected [{b}, {num_actions}]",
                    lp.shape()
                )));
            }
            for (i, stream) in self.streams.iter_mut().enumerate() {
                let row = i * seq_len + t;
                let lrow = &lp.data()[i * num_actions..(i + 1) * num_actions];
                let total: f64 = lrow.iter().map(|x| x.exp()).sum();
                if !total.is_finite() || (total - 1.0).abs() > 1e-6 {
                    return Err(Error::Distribution(format!(
                        "policy row sums to {total}"
                    )));
                }
                let a = sample_categorical(lrow, stream.rng.gen::<f64>());
                observations[row * d..(row + 1) * d].copy_from_slice(&obs.data()[i * d..(i + 1) * d]);
                let out = self.env.step(&mut stream.state, a, &mut stream.rng)?;
                actions[row] = a;
                rewards[row] = out.reward;
                terminals[row] = out.terminal;
                behavior_log_probs[row] = lrow[a];
                stream.episode_return += out.reward;
                if out.terminal {
                    episode_returns.push(stream.episode_return);
                    stream.episode_return = 0.0;
                    stream.state = self.env.reset(&mut stream.rng);
                }
            }
        }

        let mut obs_shape = vec![n];
        obs_shape.extend(self.env.observation_shape());
        Ok(TrajectoryBatch {
            batch_size: b,
            seq_len,
            observations: Tensor::new(obs_shape, observations)?,
            actions,
            rewards,
            terminals,
            behavior_log_probs,
            bootstrap_observations: self.observe_all()?,
            episode_returns,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::chain::{DiscountingChain, NUM_CHAINS};
    use crate::envs::snake::Snake;

    fn uniform(n: usize) -> impl Fn(&Tensor) -> Result<Tensor> {
        move |obs: &Tensor| {
            let rows = obs.shape()[0];
            Tensor::new(vec![rows, n], vec![-(n as f64).ln(); rows * n])
        }
    }

    fn deterministic(action: usize, n: usize) -> impl Fn(&Tensor) -> Result<Tensor> {
        move |obs: &Tensor| {
            let rows = obs.shape()[0];
            let mut d = vec![-1e300; rows * n];
            for r in 0..rows {
                d[r * n + action] = 0.0;
            }
            Tensor::new(vec![rows, n], d)
        }
    }

    #[test]
    fn single_deterministic_transition() {
        let mut c = Collector::new(DiscountingChain::new(), 1, 0);
        let batch = c.collect(&deterministic(0, NUM_CHAINS), 1).unwrap();
        assert_eq!(batch.actions, vec![0]);
        assert_eq!(batch.rewards, vec![1.0]);
        assert_eq!(batch.terminals, vec![false]);
        assert_eq!(batch.behavior_log_probs, vec![0.0]);
        let tr = batch.transition(0, 0);
        assert_eq!(tr.next_observation[0], 1.0);
    }

    #[test]
    fn equal_rng_state_gives_identical_batches() {
        let c = Collector::new(Snake::new(), 8, 42);
        let mut a = c.clone();
        let mut b = c;
        let pa = a.collect(&uniform(4), 20).unwrap();
        let pb = b.collect(&uniform(4), 20).unwrap();
        assert_eq!(pa, pb);
    }

    #[test]
    fn chain_sequence_is_one_episode() {
        let mut c = Collector::new(DiscountingChain::new(), 128, 1);
        let batch = c.collect(&uniform(NUM_CHAINS), 100).unwrap();
        assert_eq!(batch.episode_returns.len(), 128);
        for b in 0..128 {
            let term: Vec<bool> = (0..100).map(|t| batch.terminals[b * 100 + t]).collect();
            assert!(term[99] && term[..99].iter().all(|&x| !x));
            // each sequence starts from the unselected state
            assert_eq!(batch.observation(b * 100)[NUM_CHAINS], 1.0);
        }
        // next batch starts fresh episodes too
        let again = c.collect(&uniform(NUM_CHAINS), 100).unwrap();
        assert_eq!(again.observation(0)[NUM_CHAINS], 1.0);
    }

    #[test]
    fn snake_rewards_match_apples() {
        let mut c = Collector::new(Snake::new(), 16, 9);
        let batch = c.collect(&uniform(4), 300).unwrap();
        let total: f64 = batch.rewards.iter().sum();
        assert!(total >= batch.episode_returns.iter().sum::<f64>());
        for r in &batch.episode_returns {
            assert_eq!(r.fract(), 0.0);
        }
    }

    #[test]
    fn invalid_policy_is_rejected() {
        let mut c = Collector::new(DiscountingChain::new(), 2, 0);
        let bad = |obs: &Tensor| Tensor::new(vec![obs.shape()[0], NUM_CHAINS], vec![0.0; obs.shape()[0] * NUM_CHAINS]);
        assert!(matches!(c.collect(&bad, 1), Err(Error::Distribution(_))));
    }
}
