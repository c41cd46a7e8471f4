use super::config::preset_text;
use super::*;
use crate::error::Error;

fn small_chain(name: &str) -> ExperimentConfig {
    ExperimentConfig::parse(
        &ExperimentConfig::preset(name).unwrap().dump(),
        &["batch_size=8".into(), "meta_updates=4".into()],
    )
    .unwrap()
}

fn config_error(r: crate::Result<ExperimentConfig>) -> String {
    match r {
        Err(Error::Config(m)) => m,
        other => panic!("expected a config error, got {other:?}"),
    }
}

#[test]
fn presets_dump_to_their_own_text() {
    for name in PRESET_NAMES {
        let cfg = ExperimentConfig::preset(name).unwrap();
        assert_eq!(cfg.dump(), preset_text(name).unwrap(), "{name}");
        assert_eq!(ExperimentConfig::parse(&cfg.dump(), &[]).unwrap(), cfg, "{name}");
        assert_eq!(cfg.output_dir, name);
    }
}

#[test]
fn chain_preset_values() {
    let cfg = ExperimentConfig::preset("discounting-chain.mg.fixed").unwrap();
    let text = cfg.dump();
    for line in [
        "inner.gamma_start = 0.95",
        "batch_size = 128",
        "seq_len = 100",
        "inner.optimizer = \"SGD\"",
        "inner.learning_rate = 0.5",
        "meta.optimizer = \"Adam\"",
        "meta.mg_learning_rate = 0.1",
    ] {
        assert!(text.lines().any(|l| l == line), "missing `{line}`");
    }
    assert_eq!(cfg.meta_updates, 2000);
    assert_eq!(cfg.seeds.len(), 10);
}

#[test]
fn snake_preset_values() {
    let cfg = ExperimentConfig::preset("snake.mg.biased").unwrap();
    let text = cfg.dump();
    for line in [
        "inner.gamma_start = 0.8",
        "batch_size = 512",
        "seq_len = 5",
        "inner.lambda = 0.95",
        "inner.optimizer = \"RMSProp\"",
        "inner.learning_rate = 5e-4",
        "inner.c_td = 0.5",
    ] {
        assert!(text.lines().any(|l| l == line), "missing `{line}`");
    }
}

#[test]
fn overrides_apply_before_validation() {
    let text = preset_text("discounting-chain.bmg.fixed").unwrap();
    let cfg = ExperimentConfig::parse(text, &["inner.gamma_start=0.97".into(), "seeds=[4, 5]".into()]).unwrap();
    assert_eq!(cfg.inner.gamma_start, 0.97);
    assert_eq!(cfg.seeds, vec![4, 5]);
    let cfg = ExperimentConfig::parse(text, &["meta.clip_norm=0.5".into()]).unwrap();
    assert_eq!(cfg.meta.clip_norm, Some(0.5));
}

#[test]
fn config_errors_name_the_field() {
    let text = preset_text("snake.mg.fixed").unwrap();
    let m = config_error(ExperimentConfig::parse(text, &["inner.gamma_start=1.5".into()]));
    assert!(m.starts_with("inner.gamma_start"), "{m}");
    let m = config_error(ExperimentConfig::parse(text, &["inner.optimizer=\"Lion\"".into()]));
    assert!(m.contains("inner.optimizer"), "{m}");
    let m = config_error(ExperimentConfig::parse(text, &["outer.bogus=1".into()]));
    assert!(m.contains("outer"), "{m}");
    let m = config_error(ExperimentConfig::parse(text, &["batch_size=0".into()]));
    assert!(m.starts_with("batch_size"), "{m}");
    let m = config_error(ExperimentConfig::parse(text, &["network.architecture=\"linear\"".into()]));
    assert!(m.starts_with("network.architecture"), "{m}");
    config_error(ExperimentConfig::parse(text, &["no-equals-sign".into()]));
    config_error(ExperimentConfig::parse("env = ", &[]));
    config_error(ExperimentConfig::preset("cartpole"));
}

#[test]
fn zero_budget_reports_starting_discount() {
    let mut cfg = small_chain("discounting-chain.mg.biased");
    cfg.meta_updates = 0;
    let out = run_experiment(&cfg, 0).unwrap();
    assert!(out.rows.is_empty());
    assert_eq!(out.summary.initial_gamma, out.summary.final_gamma);
    assert!((out.summary.initial_gamma - 0.95).abs() < 1e-15);
    assert_eq!(out.summary.final_mean_return, None);
    let mut buf = Vec::new();
    write_metrics(&mut buf, &out.rows).unwrap();
    assert_eq!(read_table(&buf[..]).unwrap().rows.len(), 0);
}

#[test]
fn runs_are_reproducible_byte_for_byte() {
    for name in ["discounting-chain.mg.fixed", "discounting-chain.bmg.biased"] {
        let cfg = small_chain(name);
        let dir = tempfile::tempdir().unwrap();
        let a = run_to_dir(&cfg, 7, &dir.path().join("a")).unwrap();
        let b = run_to_dir(&cfg, 7, &dir.path().join("b")).unwrap();
        assert_eq!(a, b);
        let fa = std::fs::read(metrics_path(&dir.path().join("a"), 7)).unwrap();
        let fb = std::fs::read(metrics_path(&dir.path().join("b"), 7)).unwrap();
        assert_eq!(fa, fb);
        assert_eq!(a.rows.len(), 4);
        assert!(a.rows.windows(2).all(|w| w[0].meta_update < w[1].meta_update));
        assert_eq!(a.rows[3].env_steps, 4 * 2 * 8 * 100);
    }
}

#[test]
fn different_seeds_differ() {
    let cfg = small_chain("discounting-chain.mg.fixed");
    let a = run_experiment(&cfg, 1).unwrap();
    let b = run_experiment(&cfg, 2).unwrap();
    assert_ne!(a.rows, b.rows);
}

#[test]
fn finite_difference_column_follows_cadence() {
    let mut cfg = small_chain("discounting-chain.mg.fixed");
    cfg.diagnostics.fd_every = 2;
    let out = run_experiment(&cfg, 3).unwrap();
    let fd: Vec<bool> = out.rows.iter().map(|r| r.meta_grad_fd.is_some()).collect();
    assert_eq!(fd, [false, true, false, true]);
    for r in out.rows.iter().filter(|r| r.meta_grad_fd.is_some()) {
        let rel = crate::diagnostics::relative_error(r.meta_grad, r.meta_grad_fd.unwrap());
        assert!(rel < 1e-5, "relative error {rel}");
    }
}

#[test]
fn meta_gradient_check_agrees() {
    for name in ["discounting-chain.mg.biased", "discounting-chain.bmg.fixed"] {
        let c = check_meta_gradient(&small_chain(name), 0, crate::diagnostics::FD_EPSILON).unwrap();
        assert!(c.relative_error < 1e-5, "{name}: {c:?}");
    }
}

#[test]
fn sweep_dedupes_seeds_and_aggregates() {
    let cfg = small_chain("discounting-chain.mg.biased");
    let dir = tempfile::tempdir().unwrap();
    let report = sweep(&cfg, &[5, 5], dir.path()).unwrap();
    assert_eq!(report.runs.len(), 1);
    assert!(report.failures.is_empty());
    let agg = read_table_file(&report.aggregate.unwrap()).unwrap();
    for s in agg.column("gamma_std").unwrap() {
        assert_eq!(s, Some(0.0));
    }
    let single = run_experiment(&cfg, 5).unwrap();
    let means = agg.column("gamma_mean").unwrap();
    assert!(single.rows.iter().zip(&means).all(|(r, m)| Some(r.gamma) == *m));

    let report = sweep(&cfg, &[1, 2], dir.path()).unwrap();
    assert_eq!(report.runs.len(), 2);
    assert!(metrics_path(dir.path(), 1).exists());
    assert!(summary_path(dir.path(), 2).exists());
    let agg = read_table_file(&aggregate_path(dir.path())).unwrap();
    assert!(agg.column("seeds").unwrap().iter().all(|s| *s == Some(2.0)));
    let svg = emit_plot(&[("biased".into(), agg)], Quantity::Gamma).unwrap();
    assert!(svg.starts_with("<svg"));
}

#[test]
fn sweep_needs_a_seed() {
    let cfg = small_chain("discounting-chain.mg.biased");
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(sweep(&cfg, &[], dir.path()), Err(Error::Config(_))));
}

#[test]
fn tail_mean_uses_last_tenth() {
    let xs: Vec<Option<f64>> = (1..=20).map(|i| Some(i as f64)).collect();
    assert_eq!(tail_mean(&xs), Some(19.5));
    assert_eq!(tail_mean(&[Some(1.0), None]), None);
    assert_eq!(tail_mean(&[None]), None);
}
