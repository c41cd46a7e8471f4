use serde::{Deserialize, Serialize};

use super::optimizer::OptimizerState;
use crate::agent::{inner_loss, outer_loss, outer_targets, Agent, AgentParams, AdvantageTargets, InnerLossSpec, LossCoefficients, ValueSource};
use crate::autodiff::{sigmoid, Dual, Real, Tensor};
use crate::envs::TrajectoryBatch;
use crate::error::{Error, Result};

/// The meta-learned discount, stored as an unconstrained logit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetaParams {
    pub logit: f64,
    pub lo: f64,
    pub hi: f64,
}

/// `lo + (hi - lo) * sigmoid(z)`.
pub fn gamma_of_logit<T: Real>(z: T, lo: f64, hi: f64) -> T {
    T::from_f64(lo) + sigmoid(z).scale(hi - lo)
}

impl MetaParams {
    pub fn new(logit: f64, lo: f64, hi: f64) -> Result<Self> {
        if !(0.0 <= lo && lo < hi && hi <= 1.0) {
            return Err(Error::Config(format!("discount bounds ({lo}, {hi}) must satisfy 0 <= lo < hi <= 1")));
        }
        if !logit.is_finite() {
            return Err(Error::Numerical(format!("discount logit {logit}")));
        }
        Ok(MetaParams { logit, lo, hi })
    }

    /// Logit whose discount is `gamma`, which must lie strictly inside the bounds.
    pub fn from_gamma(gamma: f64, lo: f64, hi: f64) -> Result<Self> {
        if !(lo < gamma && gamma < hi) {
            return Err(Error::Config(format!("initial discount {gamma} not inside ({lo}, {hi})")));
        }
        let u = (gamma - lo) / (hi - lo);
        Self::new((u / (1.0 - u)).ln(), lo, hi)
    }

    pub fn gamma(&self) -> f64 {
        gamma_of_logit(self.logit, self.lo, self.hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Mg,
    Bmg,
}

/// Argument order of the policy-matching KL.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlDirection {
    /// `KL(target || online)`
    TargetOnline,
    /// `KL(online || target)`
    OnlineTarget,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BmgSpec {
    /// Total bootstrap steps; all but the last use the inner loss.
    pub target_steps: usize,
    pub direction: KlDirection,
}

impl Default for BmgSpec {
    fn default() -> Self {
        BmgSpec {
            target_steps: 1,
            direction: KlDirection::TargetOnline,
        }
    }
}

/// Fixed hyperparameters of the outer objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OuterLossSpec {
    pub gamma: f64,
    pub lambda: f64,
    pub coefficients: LossCoefficients,
    pub source: ValueSource,
    pub normalize: bool,
    pub baseline: bool,
}

/// Everything the meta-gradient engines need besides parameters and data.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateRule {
    pub agent: Agent,
    pub inner: InnerLossSpec,
    pub outer: OuterLossSpec,
    pub bmg: BmgSpec,
}

/// Result of one inner update.
#[derive(Debug, Clone)]
pub struct InnerStep<T: Real> {
    pub params: AgentParams<T>,
    pub optimizer: OptimizerState,
    pub loss: f64,
    pub entropy: f64,
}

/// One optimizer step on the inner loss at discount `gamma_of_logit(z)`.
/// With `z` a dual variable every component of the result carries its
/// derivative with respect to `z`. `statistics` replaces the optimizer's
/// second-moment update; see [`OptimizerState::step_with_statistics`].
pub fn inner_update<T: Real>(
    rule: &UpdateRule,
    params: &AgentParams,
    optimizer: &OptimizerState,
    batch: &TrajectoryBatch,
    meta: &MetaParams,
    z: T,
    statistics: Option<&[Tensor]>,
) -> Result<InnerStep<T>> {
    let gamma = gamma_of_logit(z, meta.lo, meta.hi);
    let theta = params.lift::<T>();
    let graph = inner_loss(&rule.agent, &theta, batch, gamma, &rule.inner)?;
    let loss = graph.value().value();
    let entropy = graph.entropy;
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("inner loss {loss}")));
    }
    let grads = graph.gradients(&theta)?.flatten();
    let flat = theta.flatten();
    let (next, optimizer) = match statistics {
        Some(s) => optimizer.step_with_statistics(&flat, &grads, s.to_vec())?,
        None => optimizer.step(&flat, &grads)?,
    };
    Ok(InnerStep {
        params: theta.with_flat(next)?,
        optimizer,
        loss,
        entropy,
    })
}

/// Frozen advantages of the outer objective at `theta_prime`.
pub fn outer_objective_targets(
    rule: &UpdateRule,
    theta_prime: &AgentParams,
    batch: &TrajectoryBatch,
    meta_gamma: f64,
) -> Result<AdvantageTargets> {
    let o = &rule.outer;
    outer_targets(&rule.agent, theta_prime, batch, o.gamma, o.lambda, o.source, meta_gamma, o.normalize)
}

/// Outer objective at `theta_prime` against frozen targets.
pub fn outer_objective<T: Real>(
    rule: &UpdateRule,
    theta_prime: &AgentParams<T>,
    batch: &TrajectoryBatch,
    targets: &AdvantageTargets,
) -> Result<T> {
    let o = &rule.outer;
    Ok(outer_loss(&rule.agent, theta_prime, batch, &o.coefficients, targets, o.baseline)?.value())
}

/// A meta-gradient with the quantities computed along the way.
#[derive(Debug, Clone)]
pub struct MetaGradient {
    pub value: f64,
    /// Outer objective (MG) or matching loss (BMG) at the current logit.
    pub objective: f64,
    pub targets: AdvantageTargets,
}

/// d/dz of the outer objective through a dual-valued `theta_prime`.
pub fn mg_outer_gradient(
    rule: &UpdateRule,
    theta_prime: &AgentParams<Dual>,
    outer_batch: &TrajectoryBatch,
    meta_gamma: f64,
) -> Result<MetaGradient> {
    let targets = outer_objective_targets(rule, &theta_prime.values(), outer_batch, meta_gamma)?;
    let l = outer_objective(rule, theta_prime, outer_batch, &targets)?;
    Ok(MetaGradient {
        value: l.eps,
        objective: l.re,
        targets,
    })
}

/// MG meta-gradient: inner update from `params` on `inner_batch`, then the
/// derivative of the outer objective on `outer_batch` with respect to the
/// logit. Returns the gradient and the dual inner step.
pub fn mg_meta_gradient(
    rule: &UpdateRule,
    params: &AgentParams,
    optimizer: &OptimizerState,
    meta: &MetaParams,
    inner_batch: &TrajectoryBatch,
    outer_batch: &TrajectoryBatch,
) -> Result<(MetaGradient, InnerStep<Dual>)> {
    let step = inner_update(rule, params, optimizer, inner_batch, meta, Dual::variable(meta.logit), None)?;
    let g = mg_outer_gradient(rule, &step.params, outer_batch, meta.gamma())?;
    Ok((g, step))
}

/// Bootstrap target: `K - 1` inner-loss steps then one outer-loss step from
/// `theta_prime`. Only values are kept, so the target carries no tangent.
/// `batches` supplies one batch per step; the last is also the batch whose
/// advantages drive the outer step.
pub fn bmg_target(
    rule: &UpdateRule,
    theta_prime: &AgentParams,
    optimizer: &OptimizerState,
    batches: &[&TrajectoryBatch],
    meta_gamma: f64,
) -> Result<AgentParams> {
    let k = rule.bmg.target_steps;
    if k == 0 {
        return Err(Error::Config("bootstrap target needs at least one step".into()));
    }
    if batches.len() != k {
        return Err(Error::Config(format!("{} batches for {k} bootstrap steps", batches.len())));
    }
    let mut theta = theta_prime.clone();
    let mut opt = optimizer.clone();
    for batch in &batches[..k - 1] {
        let g = inner_loss(&rule.agent, &theta, batch, meta_gamma, &rule.inner)?.gradients(&theta)?;
        let (next, o) = opt.step(&theta.flatten(), &g.flatten())?;
        theta = theta.with_flat(next)?;
        opt = o;
    }
    let last = batches[k - 1];
    let targets = outer_objective_targets(rule, &theta, last, meta_gamma)?;
    let o = &rule.outer;
    let g = outer_loss(&rule.agent, &theta, last, &o.coefficients, &targets, o.baseline)?.gradients(&theta)?;
    let (next, _) = opt.step(&theta.flatten(), &g.flatten())?;
    theta.with_flat(next)
}

/// Mean KL divergence between the policies of `online` and `target` over
/// the observations `obs`.
pub fn policy_divergence<T: Real>(
    agent: &Agent,
    online: &AgentParams<T>,
    target: &AgentParams,
    obs: &Tensor,
    direction: KlDirection,
) -> Result<T> {
    let lp = agent.log_probs(online, obs)?;
    let lq = agent.log_probs(target, obs)?;
    let rows = obs.shape()[0];
    let total = lp.data().iter().zip(lq.data()).fold(T::zero(), |acc, (&p, &q)| match direction {
        KlDirection::TargetOnline => acc + (T::from_f64(q) - p).scale(q.exp()),
        KlDirection::OnlineTarget => acc + p.exp() * (p - T::from_f64(q)),
    });
    let kl = total.scale(1.0 / rows as f64);
    if !kl.is_finite() {
        return Err(Error::Numerical("non-finite policy divergence".into()));
    }
    Ok(kl)
}

/// d/dz of the matching loss between a dual `theta_prime` and a fixed target.
pub fn bmg_matching_gradient(
    rule: &UpdateRule,
    theta_prime: &AgentParams<Dual>,
    target: &AgentParams,
    matching_batch: &TrajectoryBatch,
) -> Result<f64> {
    Ok(policy_divergence(&rule.agent, theta_prime, target, &matching_batch.observations, rule.bmg.direction)?.eps)
}

/// BMG meta-gradient. `target_batches` feed [`bmg_target`]; the matching
/// loss is evaluated on the last of them.
pub fn bmg_meta_gradient(
    rule: &UpdateRule,
    params: &AgentParams,
    optimizer: &OptimizerState,
    meta: &MetaParams,
    inner_batch: &TrajectoryBatch,
    target_batches: &[&TrajectoryBatch],
) -> Result<(MetaGradient, InnerStep<Dual>, AgentParams)> {
    let step = inner_update(rule, params, optimizer, inner_batch, meta, Dual::variable(meta.logit), None)?;
    let theta_prime = step.params.values();
    let target = bmg_target(rule, &theta_prime, &step.optimizer, target_batches, meta.gamma())?;
    let matching = *target_batches.last().expect("at least one target batch");
    let kl = policy_divergence(&rule.agent, &step.params, &target, &matching.observations, rule.bmg.direction)?;
    let targets = outer_objective_targets(rule, &theta_prime, matching, meta.gamma())?;
    Ok((
        MetaGradient {
            value: kl.eps,
            objective: kl.re,
            targets,
        },
        step,
        target,
    ))
}

/// Adam (or configured) step on the logit, clipped as configured.
pub fn meta_update(state: &OptimizerState, meta: &MetaParams, meta_grad: f64) -> Result<(MetaParams, OptimizerState)> {
    if !meta_grad.is_finite() {
        return Err(Error::Numerical(format!("meta-gradient {meta_grad}")));
    }
    let (z, next) = state.step(&[Tensor::scalar(meta.logit)], &[Tensor::scalar(meta_grad)])?;
    let logit = z[0].data()[0];
    Ok((MetaParams::new(logit, meta.lo, meta.hi)?, next))
}
