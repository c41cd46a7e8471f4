use serde::{Deserialize, Serialize};

use super::gae::batch_gae;
use super::network::{Agent, AgentParams, ParamVars};
use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::diagnostics::normalize_advantages;
use crate::envs::{DiscountingChain, TrajectoryBatch};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossCoefficients {
    pub pg: f64,
    pub td: f64,
    pub entropy: f64,
}

/// Discount used when the value baseline is the analytic chain value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OracleDiscount {
    /// The current meta-learned discount.
    Meta,
    Fixed(f64),
}

/// Where the value estimates behind advantages come from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ValueSource {
    InnerHead,
    OuterHead,
    /// Exact values of the discounting chain under the current policy.
    Oracle(OracleDiscount),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerLossSpec {
    pub coefficients: LossCoefficients,
    pub lambda: f64,
    pub source: ValueSource,
    /// Without a baseline the policy-gradient weight is the return target.
    pub baseline: bool,
}

/// Advantages and value targets, held constant by the losses that use them.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageTargets<T: Real = f64> {
    pub advantages: Vec<T>,
    pub value_targets: Vec<T>,
}

/// A recorded scalar loss together with the tape that produced it.
pub struct LossGraph<T: Real = f64> {
    tape: Tape<T>,
    vars: ParamVars,
    loss: Var,
    pub targets: AdvantageTargets<T>,
    /// Mean policy entropy over the batch, in nats.
    pub entropy: f64,
}

impl<T: Real> LossGraph<T> {
    pub fn value(&self) -> T {
        self.tape.value(self.loss).data()[0]
    }

    /// Gradient of the loss for every parameter, grouped like the input.
    pub fn gradients(mut self, like: &AgentParams<T>) -> Result<AgentParams<T>> {
        let mut g = self.tape.backward(self.loss)?;
        let flat = self
            .vars
            .iter()
            .map(|&v| g.take(v).ok_or_else(|| Error::State("missing parameter gradient".into())))
            .collect::<Result<Vec<_>>>()?;
        like.with_flat(flat)
    }
}

/// Mean Shannon entropy (nats) of the rows of `log_probs`.
pub fn entropy(log_probs: &Tensor) -> Result<f64> {
    let (rows, _) = log_probs.as_matrix()?;
    if rows == 0 {
        return Err(Error::Shape("entropy of an empty batch".into()));
    }
    let h: f64 = log_probs.data().iter().map(|&l| if l.is_finite() { -l.exp() * l } else { 0.0 }).sum();
    Ok(h / rows as f64)
}

fn stacked_observations(batch: &TrajectoryBatch) -> Result<Tensor> {
    let mut shape = batch.observations.shape().to_vec();
    shape[0] += batch.batch_size;
    let mut data = batch.observations.data().to_vec();
    data.extend_from_slice(batch.bootstrap_observations.data());
    Tensor::new(shape, data)
}

/// Analytic chain values for every row of `obs`, under the current policy.
fn oracle_values<T: Real>(agent: &Agent, params: &AgentParams<T>, obs: &Tensor, discount: T) -> Result<Vec<T>> {
    let chain = DiscountingChain::default();
    let d = chain.observation(&chain.initial_state());
    if agent.obs_shape != [d.len()] {
        return Err(Error::Config("oracle values exist only for the discounting chain".into()));
    }
    let start = Tensor::new(vec![1, d.len()], d)?;
    let probs: Vec<f64> = agent.log_probs(&params.values(), &start)?.data().iter().map(|l| l.exp()).collect();
    obs.data()
        .chunks(agent.obs_shape[0])
        .map(|row| chain.analytic_value(&chain.decode_observation(row)?, &probs, discount))
        .collect()
}

fn detached<T: Real>(t: &Tensor<T>) -> Vec<T> {
    t.data().iter().map(|x| x.detach()).collect()
}

fn check_batch(agent: &Agent, batch: &TrajectoryBatch) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Shape("empty trajectory batch".into()));
    }
    if let Some(&a) = batch.actions.iter().find(|&&a| a >= agent.num_actions) {
        return Err(Error::Action {
            action: a,
            num_actions: agent.num_actions,
        });
    }
    Ok(())
}

/// Sums the policy-gradient, TD and entropy terms; batch-mean, time-sum.
#[allow(clippy::too_many_arguments)]
fn assemble<T: Real>(
    mut tape: Tape<T>,
    vars: ParamVars,
    batch: &TrajectoryBatch,
    c: &LossCoefficients,
    logits: Var,
    values: Option<Var>,
    weights: &[T],
    targets: AdvantageTargets<T>,
) -> Result<LossGraph<T>> {
    let b = batch.batch_size as f64;
    let logp = tape.log_softmax(logits)?;
    let entropy = entropy(&tape.value(logp).values())?;
    let mut total: Option<Var> = None;
    let mut push = |tape: &mut Tape<T>, term: Var| -> Result<()> {
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
        Ok(())
    };
    if c.pg != 0.0 {
        let chosen = tape.gather(logp, &batch.actions)?;
        let w = tape.constant(Tensor::vector(weights.to_vec()))?;
        let wl = tape.mul(w, chosen)?;
        let s = tape.sum(wl)?;
        let term = tape.scale(s, -c.pg / b)?;
        push(&mut tape, term)?;
    }
    if c.td != 0.0 {
        let v = values.ok_or_else(|| Error::Config("a TD term needs a critic".into()))?;
        let g = tape.constant(Tensor::vector(targets.value_targets.clone()))?;
        let diff = tape.sub(v, g)?;
        let sq = tape.square(diff)?;
        let s = tape.sum(sq)?;
        let term = tape.scale(s, c.td / b)?;
        push(&mut tape, term)?;
    }
    if c.entropy != 0.0 {
        let p = tape.softmax(logits)?;
        let plp = tape.mul(p, logp)?;
        let s = tape.sum(plp)?;
        let term = tape.scale(s, c.entropy / b)?;
        push(&mut tape, term)?;
    }
    let loss = match total {
        Some(l) => l,
        None => {
            let z = tape.constant(Tensor::scalar(T::zero()))?;
            tape.scale(z, 0.0)?
        }
    };
    Ok(LossGraph {
        tape,
        vars,
        loss,
        targets,
        entropy,
    })
}

/// Inner actor-critic loss at discount `gamma`. Value estimates enter the
/// advantages through a gradient stop; a `gamma` carrying a tangent makes
/// the resulting gradients carry d/d(gamma).
pub fn inner_loss<T: Real>(
    agent: &Agent,
    params: &AgentParams<T>,
    batch: &TrajectoryBatch,
    gamma: T,
    spec: &InnerLossSpec,
) -> Result<LossGraph<T>> {
    check_batch(agent, batch)?;
    let n = batch.len();
    let mut tape = Tape::new();
    let vars = agent.register(&mut tape, params)?;
    let obs = tape.constant(batch.observations.lift())?;
    let logits = agent.policy_logits(&mut tape, &vars.policy, obs)?;

    let uses_heads = matches!(spec.source, ValueSource::InnerHead | ValueSource::OuterHead);
    let stacked = stacked_observations(batch)?;
    let mut v_rows = None;
    let mut base: Option<Vec<T>> = None;
    if uses_heads || spec.coefficients.td != 0.0 {
        let all = tape.constant(stacked.lift())?;
        let (vi, vo) = agent.critic_values(&mut tape, &vars, all)?;
        v_rows = Some(tape.slice_rows(vi, 0, n)?);
        base = match spec.source {
            ValueSource::InnerHead => Some(detached(tape.value(vi))),
            ValueSource::OuterHead => Some(detached(tape.value(vo))),
            ValueSource::Oracle(_) => None,
        };
    }
    let base = match (base, spec.source) {
        (Some(b), _) => b,
        (None, ValueSource::Oracle(d)) => {
            let discount = match d {
                OracleDiscount::Meta => gamma,
                OracleDiscount::Fixed(g) => T::from_f64(g),
            };
            oracle_values(agent, params, &stacked, discount)?
        }
        (None, _) => unreachable!("head values computed above"),
    };
    let (advantages, value_targets) = batch_gae(
        &batch.rewards,
        &batch.terminals,
        &base[..n],
        &base[n..],
        batch.seq_len,
        gamma,
        spec.lambda,
    )?;
    let weights = if spec.baseline { advantages.clone() } else { value_targets.clone() };
    let targets = AdvantageTargets {
        advantages,
        value_targets,
    };
    assemble(tape, vars, batch, &spec.coefficients, logits, v_rows, &weights, targets)
}

/// Frozen advantages for the outer objective, computed from `params` at the
/// fixed discount `gamma_prime`. `meta_gamma` is only read by an oracle
/// source tied to the meta-learned discount.
#[allow(clippy::too_many_arguments)]
pub fn outer_targets(
    agent: &Agent,
    params: &AgentParams,
    batch: &TrajectoryBatch,
    gamma_prime: f64,
    lambda: f64,
    source: ValueSource,
    meta_gamma: f64,
    normalize: bool,
) -> Result<AdvantageTargets> {
    check_batch(agent, batch)?;
    let n = batch.len();
    let stacked = stacked_observations(batch)?;
    let base = match source {
        ValueSource::InnerHead => agent.values(params, &stacked)?.0.into_data(),
        ValueSource::OuterHead => agent.values(params, &stacked)?.1.into_data(),
        ValueSource::Oracle(d) => {
            let g = match d {
                OracleDiscount::Meta => meta_gamma,
                OracleDiscount::Fixed(g) => g,
            };
            oracle_values(agent, params, &stacked, g)?
        }
    };
    let (mut advantages, value_targets) = batch_gae(
        &batch.rewards,
        &batch.terminals,
        &base[..n],
        &base[n..],
        batch.seq_len,
        gamma_prime,
        lambda,
    )?;
    if normalize {
        advantages = normalize_advantages(&advantages)?;
    }
    Ok(AdvantageTargets {
        advantages,
        value_targets,
    })
}

/// Outer policy objective against frozen targets.
pub fn outer_loss<T: Real>(
    agent: &Agent,
    params: &AgentParams<T>,
    batch: &TrajectoryBatch,
    coefficients: &LossCoefficients,
    targets: &AdvantageTargets,
    baseline: bool,
) -> Result<LossGraph<T>> {
    check_batch(agent, batch)?;
    let n = batch.len();
    if targets.advantages.len() != n || targets.value_targets.len() != n {
        return Err(Error::Shape(format!(
            "{} advantages for a batch of {n}",
            targets.advantages.len()
        )));
    }
    let mut tape = Tape::new();
    let vars = agent.register(&mut tape, params)?;
    let obs = tape.constant(batch.observations.lift())?;
    let logits = agent.policy_logits(&mut tape, &vars.policy, obs)?;
    let v_rows = if coefficients.td != 0.0 {
        Some(agent.critic_values(&mut tape, &vars, obs)?.0)
    } else {
        None
    };
    let lift = |v: &[f64]| v.iter().map(|&x| T::from_f64(x)).collect::<Vec<T>>();
    let weights = lift(if baseline { &targets.advantages } else { &targets.value_targets });
    let targets = AdvantageTargets {
        advantages: lift(&targets.advantages),
        value_targets: lift(&targets.value_targets),
    };
    assemble(tape, vars, batch, coefficients, logits, v_rows, &weights, targets)
}

/// One-step TD loss for the outer value head at discount `gamma_prime`.
/// The head reads the critic torso through a gradient stop, so only the
/// outer head receives gradient.
pub fn outer_critic_td_loss<T: Real>(
    agent: &Agent,
    params: &AgentParams<T>,
    batch: &TrajectoryBatch,
    gamma_prime: f64,
) -> Result<LossGraph<T>> {
    check_batch(agent, batch)?;
    let (n, t_len) = (batch.len(), batch.seq_len);
    let mut tape = Tape::new();
    let vars = agent.register(&mut tape, params)?;
    let all = tape.constant(stacked_observations(batch)?.lift())?;
    let (_, vo) = agent.critic_values(&mut tape, &vars, all)?;
    let next = detached(tape.value(vo));
    let value_targets: Vec<T> = (0..n)
        .map(|row| {
            let (b, t) = (row / t_len, row % t_len);
            let v_next = if t + 1 < t_len { next[row + 1] } else { next[n + b] };
            let live = if batch.terminals[row] { 0.0 } else { gamma_prime };
            T::from_f64(batch.rewards[row]) + v_next.scale(live)
        })
        .collect();
    let v = tape.slice_rows(vo, 0, n)?;
    let g = tape.constant(Tensor::vector(value_targets.clone()))?;
    let diff = tape.sub(v, g)?;
    let sq = tape.square(diff)?;
    let s = tape.sum(sq)?;
    let loss = tape.scale(s, 1.0 / batch.batch_size as f64)?;
    let advantages = (0..n).map(|r| value_targets[r] - tape.value(v).data()[r].detach()).collect();
    Ok(LossGraph {
        tape,
        vars,
        loss,
        targets: AdvantageTargets {
            advantages,
            value_targets,
        },
        entropy: f64::NAN,
    })
}
