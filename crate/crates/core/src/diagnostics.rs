//! Advantage statistics and finite-difference checks of the meta-gradient.

use serde::{Deserialize, Serialize};

use crate::agent::AgentParams;
use crate::envs::{DiscountingChain, TrajectoryBatch};
use crate::error::{Error, Result};
use crate::meta::{
    bmg_meta_gradient, inner_update, mg_meta_gradient, outer_objective, outer_objective_targets, policy_divergence,
    MetaParams, OptimizerState, UpdateRule,
};

/// Moments of a batch of advantages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdvantageStats {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl AdvantageStats {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::DegenerateBatch("no advantages".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite advantage".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Ok(AdvantageStats {
            mean,
            std: var.sqrt(),
            count: values.len(),
        })
    }
}

/// Shifts and scales to zero mean and unit (population) standard deviation.
pub fn normalize_advantages(values: &[f64]) -> Result<Vec<f64>> {
    let s = AdvantageStats::of(values)?;
    if s.std == 0.0 {
        return Err(Error::DegenerateBatch("advantages have zero spread".into()));
    }
    Ok(values.iter().map(|v| (v - s.mean) / s.std).collect())
}

/// Moments of the advantages the outer objective would use at `theta_prime`.
pub fn outer_advantage_stats(
    rule: &UpdateRule,
    theta_prime: &AgentParams,
    batch: &TrajectoryBatch,
    meta_gamma: f64,
) -> Result<AdvantageStats> {
    AdvantageStats::of(&outer_objective_targets(rule, theta_prime, batch, meta_gamma)?.advantages)
}

/// Central difference `(f(z + eps) - f(z - eps)) / 2 eps`.
pub fn finite_diff_meta_gradient(pipeline: impl Fn(f64) -> Result<f64>, z: f64, epsilon: f64) -> Result<f64> {
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::Config(format!("finite-difference step {epsilon} must be > 0")));
    }
    let hi = pipeline(z + epsilon)?;
    let lo = pipeline(z - epsilon)?;
    if !(hi.is_finite() && lo.is_finite()) {
        return Err(Error::Numerical(format!("pipeline evaluated to {lo}, {hi} around z = {z}")));
    }
    let d = (hi - lo) / (2.0 * epsilon);
    if !d.is_finite() {
        return Err(Error::Numerical(format!("finite difference {d} at z = {z}")));
    }
    Ok(d)
}

/// `|a - b| / max(|a|, |b|, 1e-12)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

pub const FD_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetaGradientCheck {
    pub analytic: f64,
    pub finite_difference: f64,
    pub relative_error: f64,
}

impl MetaGradientCheck {
    fn new(analytic: f64, finite_difference: f64) -> Self {
        MetaGradientCheck {
            analytic,
            finite_difference,
            relative_error: relative_error(analytic, finite_difference),
        }
    }
}

/// Compares the MG meta-gradient with a finite difference of the same
/// pipeline: inner update at perturbed logits, then the outer objective on
/// the fixed outer batch with its advantages and the optimizer statistics
/// frozen at the base point.
pub fn check_mg_meta_gradient(
    rule: &UpdateRule,
    params: &AgentParams,
    optimizer: &OptimizerState,
    meta: &MetaParams,
    inner_batch: &TrajectoryBatch,
    outer_batch: &TrajectoryBatch,
    epsilon: f64,
) -> Result<MetaGradientCheck> {
    let (g, step) = mg_meta_gradient(rule, params, optimizer, meta, inner_batch, outer_batch)?;
    let stats = step.optimizer.second;
    let pipeline = |z: f64| {
        let s = inner_update(rule, params, optimizer, inner_batch, meta, z, Some(&stats))?;
        outer_objective(rule, &s.params, outer_batch, &g.targets)
    };
    Ok(MetaGradientCheck::new(g.value, finite_diff_meta_gradient(pipeline, meta.logit, epsilon)?))
}

/// Compares the BMG meta-gradient with a finite difference of the matching
/// loss, the bootstrap target held fixed.
pub fn check_bmg_meta_gradient(
    rule: &UpdateRule,
    params: &AgentParams,
    optimizer: &OptimizerState,
    meta: &MetaParams,
    inner_batch: &TrajectoryBatch,
    target_batches: &[&TrajectoryBatch],
    epsilon: f64,
) -> Result<MetaGradientCheck> {
    let (g, step, target) = bmg_meta_gradient(rule, params, optimizer, meta, inner_batch, target_batches)?;
    let stats = step.optimizer.second;
    let matching = target_batches.last().ok_or_else(|| Error::Config("no matching batch".into()))?;
    let pipeline = |z: f64| {
        let s = inner_update(rule, params, optimizer, inner_batch, meta, z, Some(&stats))?;
        policy_divergence(&rule.agent, &s.params, &target, &matching.observations, rule.bmg.direction)
    };
    Ok(MetaGradientCheck::new(g.value, finite_diff_meta_gradient(pipeline, meta.logit, epsilon)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub max_abs_discrepancy: f64,
    pub states_checked: usize,
}

/// Checks the analytic chain values against explicit enumeration: every
/// chain is rolled out to the end and its discounted return weighted by the
/// policy, at the start state and at every later state of each chain.
pub fn oracle_consistency_check(policy_probs: &[f64], gamma: f64) -> Result<OracleReport> {
    let env = DiscountingChain::default();
    let start = env.initial_state();
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut start_value = 0.0;
    for (chain, &p) in policy_probs.iter().enumerate() {
        // rewards along the episode that picks `chain`
        let mut rewards = Vec::new();
        let mut states = vec![start];
        let mut s = start;
        while !env.is_terminal(&s) {
            let (next, r, _) = env.transition(&s, chain)?;
            rewards.push(r);
            states.push(next);
            s = next;
        }
        let ret_from = |t: usize| -> f64 { rewards[t..].iter().enumerate().map(|(k, r)| gamma.powi(k as i32) * r).sum() };
        start_value += p * ret_from(0);
        for (t, st) in states.iter().enumerate().skip(1) {
            let expect = if t < rewards.len() { ret_from(t) } else { 0.0 };
            let got = env.analytic_value(st, policy_probs, gamma)?;
            worst = worst.max((got - expect).abs());
            checked += 1;
        }
    }
    let got = env.analytic_value(&start, policy_probs, gamma)?;
    worst = worst.max((got - start_value).abs());
    Ok(OracleReport {
        max_abs_discrepancy: worst,
        states_checked: checked + 1,
    })
}
