use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Result};
use clap::{Args, Parser, Subcommand};
use metagrad::diagnostics::FD_EPSILON;
use metagrad::experiment::{
    check_meta_gradient, emit_plot, read_table_file, run_to_dir, sweep, ExperimentConfig, Quantity, PRESET_NAMES,
};

/// Environment variable naming the directory run outputs are written under.
const OUTPUT_ROOT_VAR: &str = "METAGRAD_OUT";

#[derive(Parser)]
#[command(name = "metagrad", version, about = "Meta-learned discount factors with MG and BMG")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one seed and write its metrics CSV and summary.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Seed to run; defaults to the first configured seed.
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Train several seeds and write per-seed files plus an aggregate.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated seeds; defaults to the configured list.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Render aggregate files as one SVG line chart.
    Plot {
        /// Aggregate CSVs, optionally labelled as `label=path`.
        #[arg(required = true)]
        aggregates: Vec<String>,
        /// One of return, gamma, advantage_mean.
        #[arg(long, short)]
        quantity: String,
        /// Output file; stdout when omitted.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Compare the analytic meta-gradient with central finite differences.
    CheckMetagrad {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = FD_EPSILON)]
        epsilon: f64,
        /// Fail when the relative error exceeds this.
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
    },
    /// Print the resolved config in its flat text form.
    DumpConfig {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// Built-in preset name.
    #[arg(long, conflicts_with = "config", required_unless_present = "config")]
    preset: Option<String>,
    /// Config file path.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set inner.gamma_start=0.97`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct OutputArgs {
    /// Output root; falls back to $METAGRAD_OUT, then `runs`.
    #[arg(long)]
    out_root: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let text = match (&self.preset, &self.config) {
            (Some(name), _) => {
                let cfg = ExperimentConfig::preset(name)?;
                if self.overrides.is_empty() {
                    return Ok(cfg);
                }
                cfg.dump()
            }
            (None, Some(path)) => fs::read_to_string(path)
                .map_err(|e| metagrad::Error::Io(format!("{}: {e}", path.display())))?,
            (None, None) => bail!(metagrad::Error::Config(format!(
                "pass --preset ({}) or --config",
                PRESET_NAMES.join(", ")
            ))),
        };
        Ok(ExperimentConfig::parse(&text, &self.overrides)?)
    }
}

impl OutputArgs {
    fn dir(&self, cfg: &ExperimentConfig) -> PathBuf {
        let root = self
            .out_root
            .clone()
            .or_else(|| std::env::var_os(OUTPUT_ROOT_VAR).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"));
        root.join(&cfg.output_dir)
    }
}

/// Distinct exit code per failure category; clap's own usage errors exit 2.
fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<CheckFailed>().is_some() {
        return 8;
    }
    match err.downcast_ref::<metagrad::Error>().map(|e| e.category()) {
        Some("config") => 3,
        Some("io") => 4,
        Some("schema") => 5,
        Some("numerical" | "degenerate-batch") => 6,
        Some(_) => 7,
        None => 1,
    }
}

fn category(err: &anyhow::Error) -> &'static str {
    if err.downcast_ref::<CheckFailed>().is_some() {
        return "check";
    }
    err.downcast_ref::<metagrad::Error>().map_or("error", |e| e.category())
}

#[derive(Debug)]
struct CheckFailed;

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("meta-gradient check failed")
    }
}

impl std::error::Error for CheckFailed {}

fn plot_input(arg: &str) -> (String, &Path) {
    match arg.split_once('=') {
        Some((label, path)) => (label.to_string(), Path::new(path)),
        None => {
            let p = Path::new(arg);
            let label = p
                .parent()
                .and_then(|d| d.file_name())
                .map_or_else(|| arg.to_string(), |n| n.to_string_lossy().into_owned());
            (label, p)
        }
    }
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run { config, seed, output } => {
            let cfg = config.load()?;
            let seed = seed.or_else(|| cfg.seeds.first().copied()).unwrap_or(0);
            let dir = output.dir(&cfg);
            let out = run_to_dir(&cfg, seed, &dir)?;
            let s = &out.summary;
            println!(
                "seed {seed}: {} meta-updates, gamma {:.4} -> {:.4}, final return {}",
                s.meta_updates,
                s.initial_gamma,
                s.final_gamma,
                s.final_mean_return.map_or("n/a".into(), |r| format!("{r:.4}"))
            );
            println!("wrote {}", dir.display());
        }
        Command::Sweep { config, seeds, output } => {
            let cfg = config.load()?;
            let seeds = if seeds.is_empty() { cfg.seeds.clone() } else { seeds };
            let dir = output.dir(&cfg);
            let report = sweep(&cfg, &seeds, &dir)?;
            for r in &report.runs {
                println!("seed {}: final gamma {:.4}", r.summary.seed, r.summary.final_gamma);
            }
            for (seed, e) in &report.failures {
                eprintln!("seed {seed} failed [{}]: {e}", e.category());
            }
            if let Some(p) = &report.aggregate {
                println!("wrote {}", p.display());
            }
            if let Some((_, e)) = report.failures.into_iter().next() {
                return Err(anyhow::Error::new(e).context("sweep finished with failed seeds"));
            }
        }
        Command::Plot { aggregates, quantity, out } => {
            let quantity: Quantity = quantity.parse()?;
            let mut tables = Vec::new();
            for arg in &aggregates {
                let (label, path) = plot_input(arg);
                tables.push((label, read_table_file(path)?));
            }
            let svg = emit_plot(&tables, quantity)?;
            match out {
                Some(p) => fs::write(&p, svg).map_err(|e| metagrad::Error::Io(format!("{}: {e}", p.display())))?,
                None => print!("{svg}"),
            }
        }
        Command::CheckMetagrad {
            config,
            seed,
            epsilon,
            tolerance,
        } => {
            let cfg = config.load()?;
            let c = check_meta_gradient(&cfg, seed, epsilon)?;
            println!("analytic          {:+.12e}", c.analytic);
            println!("finite-difference {:+.12e}", c.finite_difference);
            println!("relative error    {:.3e}", c.relative_error);
            if c.relative_error.is_nan() || c.relative_error >= tolerance {
                return Err(anyhow!(CheckFailed)
                    .context(format!("relative error {:.3e} exceeds {tolerance:.1e}", c.relative_error)));
            }
        }
        Command::DumpConfig { config } => print!("{}", config.load()?.dump()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e:#}", category(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
