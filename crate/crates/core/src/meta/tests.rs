use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::agent::{Agent, AgentParams, Architecture, InnerLossSpec, LossCoefficients, NetworkSpec, OracleDiscount, ValueSource};
use crate::autodiff::{Dual, Tensor};
use crate::diagnostics::{check_bmg_meta_gradient, check_mg_meta_gradient, FD_EPSILON};
use crate::envs::{Collector, DiscountingChain, Environment, Snake, TrajectoryBatch};

fn dc_rule(fixed: bool) -> UpdateRule {
    let env = DiscountingChain::default();
    let c = LossCoefficients {
        pg: 1.0,
        td: 0.0,
        entropy: 0.005,
    };
    UpdateRule {
        agent: Agent::new(NetworkSpec::linear(), env.observation_shape(), env.num_actions()).unwrap(),
        inner: InnerLossSpec {
            coefficients: c,
            lambda: 0.0,
            source: ValueSource::Oracle(OracleDiscount::Meta),
            baseline: true,
        },
        outer: OuterLossSpec {
            gamma: 1.0,
            lambda: 0.0,
            coefficients: c,
            source: ValueSource::Oracle(if fixed { OracleDiscount::Fixed(1.0) } else { OracleDiscount::Meta }),
            normalize: false,
            baseline: true,
        },
        bmg: BmgSpec::default(),
    }
}

fn snake_rule(fixed: bool) -> UpdateRule {
    let env = Snake::new();
    let spec = NetworkSpec {
        architecture: Architecture::ConvMlp,
        conv_channels: vec![2, 3],
        kernel_size: 3,
        hidden: 8,
    };
    UpdateRule {
        agent: Agent::new(spec, env.observation_shape(), env.num_actions()).unwrap(),
        inner: InnerLossSpec {
            coefficients: LossCoefficients {
                pg: 1.0,
                td: 0.5,
                entropy: 0.01,
            },
            lambda: 0.95,
            source: ValueSource::InnerHead,
            baseline: true,
        },
        outer: OuterLossSpec {
            gamma: 1.0,
            lambda: 1.0,
            coefficients: LossCoefficients {
                pg: 1.0,
                td: 0.0,
                entropy: 0.0,
            },
            source: if fixed { ValueSource::OuterHead } else { ValueSource::InnerHead },
            normalize: false,
            baseline: true,
        },
        bmg: BmgSpec::default(),
    }
}

fn sgd(lr: f64) -> OptimizerConfig {
    OptimizerConfig {
        kind: OptimizerKind::Sgd,
        learning_rate: lr,
        clip_norm: None,
    }
}

fn jitter(p: &AgentParams, seed: u64, scale: f64) -> AgentParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q = p.clone();
    for t in q.iter_mut() {
        t.data_mut().iter_mut().for_each(|x| *x += scale * (rng.gen::<f64>() - 0.5));
    }
    q
}

fn collect<E: Environment + Clone>(env: E, agent: &Agent, p: &AgentParams, b: usize, t: usize, seed: u64) -> TrajectoryBatch {
    let mut c = Collector::new(env, b, seed);
    c.collect(&|o: &Tensor| agent.log_probs(p, o), t).unwrap()
}

#[test]
fn gamma_parameterisation_examples() {
    assert_eq!(gamma_of_logit(0.0, 0.9, 1.0), 0.95);
    assert!((gamma_of_logit(4f64.ln(), 0.0, 1.0) - 0.8).abs() < 1e-15);
    let t = gamma_of_logit(Dual::variable(0.0), 0.9, 1.0).eps;
    assert!((t - 0.025).abs() < 1e-15);
    let m = MetaParams::from_gamma(0.8, 0.0, 1.0).unwrap();
    assert!((m.logit - 4f64.ln()).abs() < 1e-12);
    assert!(MetaParams::from_gamma(0.95, 0.95, 1.0).is_err());
    assert!(MetaParams::new(0.0, 0.5, 0.5).is_err());
}

#[test]
fn zero_learning_rate_gives_zero_tangent() {
    let rule = dc_rule(true);
    let p = jitter(&rule.agent.init(0), 1, 1.0);
    let batch = collect(DiscountingChain::default(), &rule.agent, &p, 8, 100, 0);
    let meta = MetaParams::new(0.0, 0.9, 1.0).unwrap();
    let opt = OptimizerState::new(sgd(0.0), &p.flatten());
    let s = inner_update(&rule, &p, &opt, &batch, &meta, Dual::variable(0.0), None).unwrap();
    assert_eq!(s.params.values(), p);
    assert!(s.params.iter().all(|t| t.data().iter().all(|x| x.eps == 0.0)));
}

#[test]
fn gamma_free_inner_loss_gives_zero_tangent() {
    let mut rule = dc_rule(true);
    // a fixed-discount oracle and lambda 0 make the inner loss independent of gamma
    // only if the bootstrap term vanishes, which holds when every reward is
    // paid at a terminal step; here the pg coefficient is removed instead
    rule.inner.coefficients.pg = 0.0;
    let p = jitter(&rule.agent.init(0), 2, 1.0);
    let batch = collect(DiscountingChain::default(), &rule.agent, &p, 8, 100, 1);
    let meta = MetaParams::new(0.3, 0.9, 1.0).unwrap();
    let opt = OptimizerState::new(sgd(0.5), &p.flatten());
    let s = inner_update(&rule, &p, &opt, &batch, &meta, Dual::variable(0.3), None).unwrap();
    assert!(s.params.iter().all(|t| t.data().iter().all(|x| x.eps == 0.0)));
    assert_ne!(s.params.values(), p);
}

#[test]
fn dc_inner_tangent_matches_finite_difference() {
    let rule = dc_rule(true);
    let p = jitter(&rule.agent.init(0), 3, 1.0);
    let batch = collect(DiscountingChain::default(), &rule.agent, &p, 16, 100, 2);
    let meta = MetaParams::new(0.2, 0.9, 1.0).unwrap();
    let opt = OptimizerState::new(sgd(0.5), &p.flatten());
    let s = inner_update(&rule, &p, &opt, &batch, &meta, Dual::variable(meta.logit), None).unwrap();
    let at = |z: f64| inner_update(&rule, &p, &opt, &batch, &meta, z, None).unwrap().params;
    let (hi, lo) = (at(meta.logit + 1e-6), at(meta.logit - 1e-6));
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for ((d, h), l) in s.params.iter().zip(hi.iter()).zip(lo.iter()) {
        for ((x, a), b) in d.data().iter().zip(h.data()).zip(l.data()) {
            let fd = (a - b) / 2e-6;
            num = num.max((x.eps - fd).abs());
            den = den.max(fd.abs());
        }
    }
    assert!(den > 0.0 && num / den < 1e-5, "{num} / {den}");
}

#[test]
fn dc_mg_and_bmg_match_finite_differences() {
    for fixed in [false, true] {
        let rule = dc_rule(fixed);
        let p = jitter(&rule.agent.init(0), 4, 2.0);
        let env = DiscountingChain::default();
        let inner = collect(env.clone(), &rule.agent, &p, 32, 100, 3);
        let outer = collect(env, &rule.agent, &p, 32, 100, 4);
        let meta = MetaParams::new(-0.4, 0.9, 1.0).unwrap();
        let opt = OptimizerState::new(sgd(0.5), &p.flatten());
        let c = check_mg_meta_gradient(&rule, &p, &opt, &meta, &inner, &outer, FD_EPSILON).unwrap();
        assert!(c.relative_error < 1e-5, "mg {c:?}");
        let c = check_bmg_meta_gradient(&rule, &p, &opt, &meta, &inner, &[&outer], FD_EPSILON).unwrap();
        assert!(c.relative_error < 1e-5, "bmg {c:?}");
    }
}

#[test]
fn snake_mg_matches_finite_difference_through_rmsprop() {
    for fixed in [false, true] {
        let rule = snake_rule(fixed);
        let p = jitter(&rule.agent.init(5), 6, 0.3);
        let inner = collect(Snake::new(), &rule.agent, &p, 4, 5, 7);
        let outer = collect(Snake::new(), &rule.agent, &p, 4, 5, 8);
        let meta = MetaParams::from_gamma(0.8, 0.0, 1.0).unwrap();
        let cfg = OptimizerConfig {
            kind: OptimizerKind::RmsProp,
            learning_rate: 5e-2,
            clip_norm: None,
        };
        let opt = OptimizerState::new(cfg, &p.flatten());
        let c = check_mg_meta_gradient(&rule, &p, &opt, &meta, &inner, &outer, FD_EPSILON).unwrap();
        assert!(c.relative_error < 1e-5, "{c:?}");
        let c = check_bmg_meta_gradient(&rule, &p, &opt, &meta, &inner, &[&outer], FD_EPSILON).unwrap();
        assert!(c.relative_error < 1e-5, "{c:?}");
    }
}

#[test]
fn bmg_target_with_zero_step_equals_start_and_matching_gradient_vanishes() {
    let rule = dc_rule(true);
    let p = jitter(&rule.agent.init(0), 7, 1.0);
    let batch = collect(DiscountingChain::default(), &rule.agent, &p, 8, 100, 5);
    let opt = OptimizerState::new(sgd(0.0), &p.flatten());
    let t = bmg_target(&rule, &p, &opt, &[&batch], 0.95).unwrap();
    assert_eq!(t, p);
    let meta = MetaParams::new(0.0, 0.9, 1.0).unwrap();
    let (g, _, _) = bmg_meta_gradient(&rule, &p, &opt, &meta, &batch, &[&batch]).unwrap();
    assert_eq!(g.objective, 0.0);
    assert_eq!(g.value, 0.0);
}

#[test]
fn bmg_gradient_shrinks_with_target_step() {
    let rule = dc_rule(true);
    let p = jitter(&rule.agent.init(0), 8, 1.0);
    let inner = collect(DiscountingChain::default(), &rule.agent, &p, 16, 100, 6);
    let outer = collect(DiscountingChain::default(), &rule.agent, &p, 16, 100, 7);
    let meta = MetaParams::new(0.0, 0.9, 1.0).unwrap();
    // the inner step stays at 0.5 while the target step shrinks
    let grad = |target_lr: f64| {
        let opt = OptimizerState::new(sgd(0.5), &p.flatten());
        let step = inner_update(&rule, &p, &opt, &inner, &meta, Dual::variable(0.0), None).unwrap();
        let mut topt = step.optimizer.clone();
        topt.config.learning_rate = target_lr;
        let target = bmg_target(&rule, &step.params.values(), &topt, &[&outer], meta.gamma()).unwrap();
        bmg_matching_gradient(&rule, &step.params, &target, &outer).unwrap()
    };
    let (a, b, c) = (grad(1e-1).abs(), grad(1e-3).abs(), grad(1e-5).abs());
    assert!(a > b && b > c && c < 1e-6, "{a} {b} {c}");
}

#[test]
fn bmg_rejects_bad_step_counts() {
    let mut rule = dc_rule(true);
    let p = rule.agent.init(0);
    let batch = collect(DiscountingChain::default(), &rule.agent, &p, 2, 100, 0);
    let opt = OptimizerState::new(sgd(0.5), &p.flatten());
    assert!(bmg_target(&rule, &p, &opt, &[], 0.95).is_err());
    rule.bmg.target_steps = 0;
    assert!(bmg_target(&rule, &p, &opt, &[&batch], 0.95).is_err());
    rule.bmg.target_steps = 2;
    let t = bmg_target(&rule, &p, &opt, &[&batch, &batch], 0.95).unwrap();
    assert_ne!(t, p);
}

#[test]
fn meta_update_examples() {
    let adam = OptimizerConfig {
        kind: OptimizerKind::Adam,
        learning_rate: 0.1,
        clip_norm: None,
    };
    let meta = MetaParams::new(0.4, 0.9, 1.0).unwrap();
    let s = OptimizerState::new(adam, &[Tensor::scalar(0.0)]);
    let (m, _) = meta_update(&s, &meta, 0.0).unwrap();
    assert_eq!(m.logit, 0.4);
    let (m, _) = meta_update(&s, &meta, -3.0).unwrap();
    assert!((m.logit - 0.5).abs() < 1e-8);
    assert!(meta_update(&s, &meta, f64::NAN).is_err());
    let clipped = OptimizerConfig {
        kind: OptimizerKind::Sgd,
        learning_rate: 1.0,
        clip_norm: Some(0.1),
    };
    let s = OptimizerState::new(clipped, &[Tensor::scalar(0.0)]);
    let (m, _) = meta_update(&s, &meta, -5.0).unwrap();
    assert!((m.logit - 0.5).abs() < 1e-12);
}

/// A policy that mostly picks the immediately paying chain at the start.
fn myopic(rule: &UpdateRule) -> AgentParams {
    let mut p = rule.agent.init(0);
    // weight from the "no chain selected" slot to action 0
    p.policy[0].data_mut()[5 * 5] = 2.0;
    p
}

#[test]
fn dc_meta_gradient_signs_for_myopic_policy() {
    let env = DiscountingChain::default();
    for (fixed, up) in [(true, true), (false, false)] {
        let rule = dc_rule(fixed);
        let p = myopic(&rule);
        let inner = collect(env.clone(), &rule.agent, &p, 128, 100, 11);
        let outer = collect(env.clone(), &rule.agent, &p, 128, 100, 12);
        let meta = MetaParams::new(0.0, 0.9, 1.0).unwrap();
        let opt = OptimizerState::new(sgd(0.5), &p.flatten());
        let (g, _) = mg_meta_gradient(&rule, &p, &opt, &meta, &inner, &outer).unwrap();
        // gradient descent on z raises gamma when the derivative is negative
        assert_eq!(g.value < 0.0, up, "fixed={fixed}: {}", g.value);
    }
}

#[test]
fn inner_update_does_not_depend_on_outer_source() {
    let env = DiscountingChain::default();
    let (a, b) = (dc_rule(false), dc_rule(true));
    let p = jitter(&a.agent.init(0), 9, 1.0);
    let inner = collect(env, &a.agent, &p, 8, 100, 9);
    let meta = MetaParams::new(0.1, 0.9, 1.0).unwrap();
    let opt = OptimizerState::new(sgd(0.5), &p.flatten());
    let sa = inner_update(&a, &p, &opt, &inner, &meta, Dual::variable(0.1), None).unwrap();
    let sb = inner_update(&b, &p, &opt, &inner, &meta, Dual::variable(0.1), None).unwrap();
    assert_eq!(sa.params, sb.params);
}

