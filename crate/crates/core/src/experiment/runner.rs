use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, OuterSource};
use super::metrics::{aggregate, write_metrics, write_table, MetricsRow};
use crate::agent::{outer_critic_td_loss, Agent, AgentParams};
use crate::autodiff::{Dual, Tensor};
use crate::diagnostics::{check_bmg_meta_gradient, check_mg_meta_gradient, AdvantageStats, MetaGradientCheck, FD_EPSILON};
use crate::envs::{Collector, DiscountingChain, EnvId, Environment, Snake, TrajectoryBatch};
use crate::error::{Error, Result};
use crate::meta::{
    bmg_matching_gradient, bmg_target, inner_update, meta_update, mg_outer_gradient, outer_objective_targets, Algorithm,
    OptimizerState, UpdateRule,
};

/// End-of-run digest written next to the metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub env: EnvId,
    pub algorithm: Algorithm,
    pub outer_source: OuterSource,
    pub normalize_advantages: bool,
    pub seed: u64,
    pub meta_updates: usize,
    pub env_steps: u64,
    pub initial_gamma: f64,
    pub final_gamma: f64,
    pub final_logit: f64,
    /// Mean of the per-update returns over the last tenth of training.
    pub final_mean_return: Option<f64>,
    /// Mean of the per-update outer advantage means over the last tenth.
    pub final_advantage_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub rows: Vec<MetricsRow>,
    pub summary: RunSummary,
}

/// Mean of the values over the last `ceil(n / 10)` entries.
pub fn tail_mean(values: &[Option<f64>]) -> Option<f64> {
    let k = values.len().div_ceil(10);
    let xs: Vec<f64> = values[values.len() - k..].iter().flatten().copied().collect();
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn at_update(u: usize, e: Error) -> Error {
    let ctx = |m: String| format!("meta-update {u}: {m}");
    match e {
        Error::Shape(m) => Error::Shape(ctx(m)),
        Error::Numerical(m) => Error::Numerical(ctx(m)),
        Error::State(m) => Error::State(ctx(m)),
        Error::Distribution(m) => Error::Distribution(ctx(m)),
        Error::Config(m) => Error::Config(ctx(m)),
        Error::DegenerateBatch(m) => Error::DegenerateBatch(ctx(m)),
        Error::Schema(m) => Error::Schema(ctx(m)),
        Error::Io(m) => Error::Io(ctx(m)),
        other @ Error::Action { .. } => other,
    }
}

/// Runs the configured experiment for one seed. Deterministic in
/// `(config, seed)` unless wall-clock logging is enabled.
pub fn run_experiment(cfg: &ExperimentConfig, seed: u64) -> Result<RunOutput> {
    cfg.validate()?;
    match cfg.env {
        EnvId::DiscountingChain => run_with(DiscountingChain::default(), cfg, seed),
        EnvId::Snake6x6 => run_with(Snake::new(), cfg, seed),
    }
}

struct Learner<E: Environment> {
    rule: UpdateRule,
    params: AgentParams,
    optimizer: OptimizerState,
    critic_optimizer: OptimizerState,
    meta: crate::meta::MetaParams,
    meta_optimizer: OptimizerState,
    collector: Collector<E>,
    env_steps: u64,
}

impl<E: Environment> Learner<E> {
    fn collect(&mut self, params: &AgentParams, seq_len: usize) -> Result<TrajectoryBatch> {
        let agent = &self.rule.agent;
        let policy = |o: &Tensor| agent.log_probs(params, o);
        let b = self.collector.collect(&policy, seq_len)?;
        self.env_steps += b.len() as u64;
        Ok(b)
    }
}

impl<E: Environment> Learner<E> {
    fn new(env: E, cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let agent = Agent::new(cfg.network.clone(), env.observation_shape(), env.num_actions())?;
        let params = agent.init(seed);
        let flat = params.flatten();
        Ok(Learner {
            optimizer: OptimizerState::new(cfg.inner_optimizer(), &flat),
            critic_optimizer: OptimizerState::new(cfg.outer_critic_optimizer(), &flat),
            meta: cfg.initial_meta()?,
            meta_optimizer: OptimizerState::new(cfg.meta_optimizer(), &[Tensor::scalar(0.0)]),
            collector: Collector::new(env, cfg.batch_size, seed),
            rule: UpdateRule {
                agent,
                inner: cfg.inner_spec(),
                outer: cfg.outer_spec(),
                bmg: cfg.bmg_spec(),
            },
            params,
            env_steps: 0,
        })
    }

    /// Finite-difference check of the configured meta-gradient at the
    /// initial parameters, on freshly collected batches.
    fn check(&mut self, cfg: &ExperimentConfig, epsilon: f64) -> Result<MetaGradientCheck> {
        let theta = self.params.clone();
        let inner = self.collect(&theta, cfg.seq_len)?;
        let step = inner_update(&self.rule, &theta, &self.optimizer, &inner, &self.meta, self.meta.logit, None)?;
        let outer = self.collect(&step.params, cfg.seq_len)?;
        match cfg.algorithm {
            Algorithm::Mg => {
                check_mg_meta_gradient(&self.rule, &theta, &self.optimizer, &self.meta, &inner, &outer, epsilon)
            }
            Algorithm::Bmg => {
                let mut extra = Vec::new();
                for _ in 1..self.rule.bmg.target_steps {
                    extra.push(self.collect(&step.params, cfg.seq_len)?);
                }
                let mut batches: Vec<&TrajectoryBatch> = extra.iter().collect();
                batches.push(&outer);
                check_bmg_meta_gradient(&self.rule, &theta, &self.optimizer, &self.meta, &inner, &batches, epsilon)
            }
        }
    }
}

/// Runs the finite-difference meta-gradient check for `(config, seed)`.
pub fn check_meta_gradient(cfg: &ExperimentConfig, seed: u64, epsilon: f64) -> Result<MetaGradientCheck> {
    cfg.validate()?;
    match cfg.env {
        EnvId::DiscountingChain => Learner::new(DiscountingChain::default(), cfg, seed)?.check(cfg, epsilon),
        EnvId::Snake6x6 => Learner::new(Snake::new(), cfg, seed)?.check(cfg, epsilon),
    }
}

fn run_with<E: Environment>(env: E, cfg: &ExperimentConfig, seed: u64) -> Result<RunOutput> {
    let mut l = Learner::new(env, cfg, seed)?;
    let initial_gamma = l.meta.gamma();
    let start = Instant::now();
    let mut rows = Vec::with_capacity(cfg.meta_updates);
    for u in 1..=cfg.meta_updates {
        let row = meta_step(&mut l, cfg, u).map_err(|e| at_update(u, e))?;
        rows.push(MetricsRow {
            wall_clock_s: cfg.diagnostics.log_wall_clock.then(|| start.elapsed().as_secs_f64()),
            ..row
        });
    }
    let returns: Vec<Option<f64>> = rows.iter().map(|r| r.mean_return).collect();
    let advantages: Vec<Option<f64>> = rows.iter().map(|r| Some(r.advantage_mean)).collect();
    let summary = RunSummary {
        env: cfg.env,
        algorithm: cfg.algorithm,
        outer_source: cfg.outer_source,
        normalize_advantages: cfg.normalize_advantages,
        seed,
        meta_updates: cfg.meta_updates,
        env_steps: l.env_steps,
        initial_gamma,
        final_gamma: l.meta.gamma(),
        final_logit: l.meta.logit,
        final_mean_return: if rows.is_empty() { None } else { tail_mean(&returns) },
        final_advantage_mean: if rows.is_empty() { None } else { tail_mean(&advantages) },
    };
    Ok(RunOutput { rows, summary })
}

/// One full meta-update: inner batch, inner step, outer batch, meta-gradient,
/// meta step, and the outer critic's TD step when there is a critic.
fn meta_step<E: Environment>(l: &mut Learner<E>, cfg: &ExperimentConfig, u: usize) -> Result<MetricsRow> {
    let theta = l.params.clone();
    let inner = l.collect(&theta, cfg.seq_len)?;
    let step = inner_update(&l.rule, &theta, &l.optimizer, &inner, &l.meta, Dual::variable(l.meta.logit), None)?;
    let theta_prime = step.params.values();
    let outer = l.collect(&theta_prime, cfg.seq_len)?;
    let gamma = l.meta.gamma();
    let fd_due = cfg.diagnostics.fd_every > 0 && u.is_multiple_of(cfg.diagnostics.fd_every);

    let mut extra = Vec::new();
    let (meta_grad, targets, fd) = match cfg.algorithm {
        Algorithm::Mg => {
            let g = mg_outer_gradient(&l.rule, &step.params, &outer, gamma)?;
            let fd = if fd_due {
                Some(check_mg_meta_gradient(&l.rule, &theta, &l.optimizer, &l.meta, &inner, &outer, FD_EPSILON)?.finite_difference)
            } else {
                None
            };
            (g.value, g.targets, fd)
        }
        Algorithm::Bmg => {
            for _ in 1..l.rule.bmg.target_steps {
                extra.push(l.collect(&theta_prime, cfg.seq_len)?);
            }
            let mut batches: Vec<&TrajectoryBatch> = extra.iter().collect();
            batches.push(&outer);
            let target = bmg_target(&l.rule, &theta_prime, &step.optimizer, &batches, gamma)?;
            let g = bmg_matching_gradient(&l.rule, &step.params, &target, &outer)?;
            let targets = outer_objective_targets(&l.rule, &theta_prime, &outer, gamma)?;
            let fd = if fd_due {
                Some(check_bmg_meta_gradient(&l.rule, &theta, &l.optimizer, &l.meta, &inner, &batches, FD_EPSILON)?.finite_difference)
            } else {
                None
            };
            (g, targets, fd)
        }
    };
    let stats = AdvantageStats::of(&targets.advantages)?;
    let (meta, meta_optimizer) = meta_update(&l.meta_optimizer, &l.meta, meta_grad)?;
    l.meta = meta;
    l.meta_optimizer = meta_optimizer;
    l.params = theta_prime;
    l.optimizer = step.optimizer;
    if l.rule.agent.has_critic() {
        let g = outer_critic_td_loss::<f64>(&l.rule.agent, &l.params, &outer, cfg.outer.gamma)?.gradients(&l.params)?;
        let (next, o) = l.critic_optimizer.step(&l.params.flatten(), &g.flatten())?;
        l.params = l.params.with_flat(next)?;
        l.critic_optimizer = o;
    }
    let finished: Vec<f64> = inner
        .episode_returns
        .iter()
        .chain(&outer.episode_returns)
        .chain(extra.iter().flat_map(|b| &b.episode_returns))
        .copied()
        .collect();
    Ok(MetricsRow {
        meta_update: u,
        env_steps: l.env_steps,
        mean_return: (!finished.is_empty()).then(|| finished.iter().sum::<f64>() / finished.len() as f64),
        gamma: l.meta.gamma(),
        meta_grad,
        meta_grad_fd: fd,
        advantage_mean: stats.mean,
        advantage_std: stats.std,
        wall_clock_s: None,
    })
}

pub fn metrics_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("seed_{seed}.csv"))
}

pub fn summary_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("seed_{seed}.summary.json"))
}

pub fn aggregate_path(dir: &Path) -> PathBuf {
    dir.join("aggregate.csv")
}

fn io_at(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::Io(format!("{}: {e}", path.display()))
}

fn write_run(dir: &Path, out: &RunOutput) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_at(dir))?;
    let p = metrics_path(dir, out.summary.seed);
    let mut buf = Vec::new();
    write_metrics(&mut buf, &out.rows)?;
    fs::write(&p, buf).map_err(io_at(&p))?;
    let s = summary_path(dir, out.summary.seed);
    let json = serde_json::to_string_pretty(&out.summary).expect("summary serializes");
    fs::write(&s, json + "\n").map_err(io_at(&s))?;
    Ok(())
}

/// Runs one seed and writes its metrics and summary under `dir`.
pub fn run_to_dir(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> Result<RunOutput> {
    let out = run_experiment(cfg, seed)?;
    write_run(dir, &out)?;
    Ok(out)
}

#[derive(Debug)]
pub struct SweepReport {
    pub runs: Vec<RunOutput>,
    pub failures: Vec<(u64, Error)>,
    /// Written when at least one seed succeeded.
    pub aggregate: Option<PathBuf>,
}

/// Runs every distinct seed (in parallel), writes per-seed files, then an
/// aggregate over the seeds that succeeded. A failing seed does not stop
/// the others.
pub fn sweep(cfg: &ExperimentConfig, seeds: &[u64], dir: &Path) -> Result<SweepReport> {
    if seeds.is_empty() {
        return Err(Error::Config("seeds: at least one seed is required".into()));
    }
    cfg.validate()?;
    let mut unique = seeds.to_vec();
    unique.sort_unstable();
    unique.dedup();
    let results: Vec<(u64, Result<RunOutput>)> = unique.par_iter().map(|&s| (s, run_to_dir(cfg, s, dir))).collect();
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for (s, r) in results {
        match r {
            Ok(o) => runs.push(o),
            Err(e) => failures.push((s, e)),
        }
    }
    let aggregate_file = if runs.is_empty() {
        None
    } else {
        let table = aggregate(&runs.iter().map(|r| r.rows.clone()).collect::<Vec<_>>())?;
        let p = aggregate_path(dir);
        let mut buf = Vec::new();
        write_table(&mut buf, &table)?;
        fs::write(&p, buf).map_err(io_at(&p))?;
        Some(p)
    };
    Ok(SweepReport {
        runs,
        failures,
        aggregate: aggregate_file,
    })
}
