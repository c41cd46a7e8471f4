use std::fmt::Write as _;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use toml::Value;

use crate::agent::{Architecture, InnerLossSpec, LossCoefficients, NetworkSpec, OracleDiscount, ValueSource};
use crate::envs::EnvId;
use crate::error::{Error, Result};
use crate::meta::{Algorithm, BmgSpec, KlDirection, MetaParams, OptimizerConfig, OptimizerKind, OuterLossSpec};

/// Which value estimate the outer objective's advantages use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OuterSource {
    /// The inner critic (or the chain oracle at the meta-learned discount).
    Biased,
    /// The outer critic (or the chain oracle at the outer discount).
    Fixed,
}

/// Optional clip norm written as a number or `"None"`.
mod clip {
    use super::*;

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
        match v {
            Some(x) => s.serialize_f64(*x),
            None => s.serialize_str("None"),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<f64>, D::Error> {
        match Raw::deserialize(d)? {
            Raw::Num(x) => Ok(Some(x)),
            Raw::Text(t) if t.eq_ignore_ascii_case("none") => Ok(None),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("expected a number or \"None\", got \"{t}\""))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InnerConfig {
    pub gamma_start: f64,
    pub lambda: f64,
    pub c_pg: f64,
    pub c_td: f64,
    pub c_en: f64,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    #[serde(with = "clip")]
    pub clip_norm: Option<f64>,
    /// Subtract a value baseline in the policy-gradient weight.
    pub baseline: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OuterConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub c_pg: f64,
    pub c_td: f64,
    pub c_en: f64,
    /// Step size of the outer critic's own TD updates.
    pub critic_learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaConfig {
    pub optimizer: OptimizerKind,
    pub mg_learning_rate: f64,
    pub bmg_learning_rate: f64,
    #[serde(with = "clip")]
    pub clip_norm: Option<f64>,
    pub gamma_lo: f64,
    pub gamma_hi: f64,
    pub bmg_target_steps: usize,
    pub bmg_kl_direction: KlDirection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsConfig {
    /// Compute the finite-difference meta-gradient every this many updates; 0 disables it.
    pub fd_every: usize,
    /// Record wall-clock seconds. Off by default so metrics files are reproducible byte for byte.
    pub log_wall_clock: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvId,
    pub algorithm: Algorithm,
    pub outer_source: OuterSource,
    pub normalize_advantages: bool,
    pub batch_size: usize,
    pub seq_len: usize,
    pub meta_updates: usize,
    pub seeds: Vec<u64>,
    pub output_dir: String,
    pub network: NetworkSpec,
    pub inner: InnerConfig,
    pub outer: OuterConfig,
    pub meta: MetaConfig,
    pub diagnostics: DiagnosticsConfig,
}

pub const PRESET_NAMES: [&str; 6] = [
    "discounting-chain.mg.biased",
    "discounting-chain.mg.fixed",
    "discounting-chain.bmg.biased",
    "discounting-chain.bmg.fixed",
    "snake.mg.biased",
    "snake.mg.fixed",
];

pub(super) fn preset_text(name: &str) -> Option<&'static str> {
    Some(match name {
        "discounting-chain.mg.biased" => include_str!("../../presets/discounting-chain.mg.biased"),
        "discounting-chain.mg.fixed" => include_str!("../../presets/discounting-chain.mg.fixed"),
        "discounting-chain.bmg.biased" => include_str!("../../presets/discounting-chain.bmg.biased"),
        "discounting-chain.bmg.fixed" => include_str!("../../presets/discounting-chain.bmg.fixed"),
        "snake.mg.biased" => include_str!("../../presets/snake.mg.biased"),
        "snake.mg.fixed" => include_str!("../../presets/snake.mg.fixed"),
        _ => return None,
    })
}

/// Sets `path` (dotted) inside a TOML table, creating sections as needed.
fn set_path(root: &mut toml::Table, path: &str, value: Value) -> Result<()> {
    let mut parts: Vec<&str> = path.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::Config(format!("empty key in `{path}`")))?;
    let mut table = root;
    for p in parts {
        let entry = table.entry(p.to_string()).or_insert_with(|| Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{p}` in `{path}` is not a section")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

/// Parses the right-hand side of an override: a TOML value, or a bare string.
fn parse_override_value(text: &str) -> Value {
    let text = text.trim();
    toml::from_str::<toml::Table>(&format!("v = {text}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(text.to_string()))
}

fn is_learning_rate(key: &str) -> bool {
    key.ends_with("learning_rate")
}

fn format_float(key: &str, x: f64) -> String {
    if is_learning_rate(key) && x != 0.0 && x.abs() < 0.01 {
        format!("{x:e}")
    } else {
        format!("{x:?}")
    }
}

fn format_value(key: &str, v: &Value) -> String {
    match v {
        Value::Float(x) => format_float(key, *x),
        Value::Integer(i) => i.to_string(),
        Value::Boolean(b) => b.to_string(),
        Value::String(s) => Value::String(s.clone()).to_string(),
        Value::Array(a) => format!("[{}]", a.iter().map(|x| format_value(key, x)).collect::<Vec<_>>().join(", ")),
        other => other.to_string(),
    }
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut String) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            _ => {
                let _ = writeln!(out, "{key} = {}", format_value(&key, v));
            }
        }
    }
}

impl ExperimentConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let text = preset_text(name)
            .ok_or_else(|| Error::Config(format!("unknown preset `{name}`; known: {}", PRESET_NAMES.join(", "))))?;
        Self::parse(text, &[])
    }

    /// Parses config text and applies `key=value` overrides before
    /// validation. Errors name the offending field path.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(format!("config syntax: {e}")))?;
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            set_path(&mut table, k.trim(), parse_override_value(v))?;
        }
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(Value::Table(table)).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("{path}: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Flat `section.key = value` text that parses back to `self`.
    pub fn dump(&self) -> String {
        let table = Value::try_from(self).expect("config serializes to a table");
        let mut out = String::new();
        flatten("", table.as_table().expect("config is a table"), &mut out);
        out
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |path: &str, msg: String| Err(Error::Config(format!("{path}: {msg}")));
        if self.batch_size == 0 {
            return fail("batch_size", "must be >= 1".into());
        }
        if self.seq_len == 0 {
            return fail("seq_len", "must be >= 1".into());
        }
        if self.seeds.is_empty() {
            return fail("seeds", "at least one seed is required".into());
        }
        let m = &self.meta;
        if !(0.0 <= m.gamma_lo && m.gamma_lo < m.gamma_hi && m.gamma_hi <= 1.0) {
            return fail("meta.gamma_lo", format!("bounds ({}, {}) must satisfy 0 <= lo < hi <= 1", m.gamma_lo, m.gamma_hi));
        }
        let g = self.inner.gamma_start;
        if !(m.gamma_lo < g && g < m.gamma_hi) {
            return fail("inner.gamma_start", format!("{g} not strictly inside ({}, {})", m.gamma_lo, m.gamma_hi));
        }
        for (path, l) in [("inner.lambda", self.inner.lambda), ("outer.lambda", self.outer.lambda)] {
            if !(0.0..=1.0).contains(&l) {
                return fail(path, format!("{l} outside [0, 1]"));
            }
        }
        if !(self.outer.gamma > 0.0 && self.outer.gamma <= 1.0) {
            return fail("outer.gamma", format!("{} outside (0, 1]", self.outer.gamma));
        }
        for (path, c) in [
            ("inner.c_pg", self.inner.c_pg),
            ("inner.c_td", self.inner.c_td),
            ("inner.c_en", self.inner.c_en),
            ("outer.c_pg", self.outer.c_pg),
            ("outer.c_td", self.outer.c_td),
            ("outer.c_en", self.outer.c_en),
        ] {
            if !c.is_finite() {
                return fail(path, format!("{c} is not finite"));
            }
        }
        for (path, o) in [
            ("inner", self.inner_optimizer()),
            ("meta", self.meta_optimizer()),
            ("outer.critic_learning_rate", self.outer_critic_optimizer()),
        ] {
            o.validate().map_err(|e| Error::Config(format!("{path}: {e}")))?;
        }
        if m.bmg_target_steps == 0 {
            return fail("meta.bmg_target_steps", "must be >= 1".into());
        }
        match (self.env, &self.network.architecture) {
            (EnvId::DiscountingChain, Architecture::Linear) | (EnvId::Snake6x6, Architecture::ConvMlp) => {}
            (env, arch) => {
                return fail(
                    "network.architecture",
                    format!("{arch:?} is not supported for {}", env.as_str()),
                )
            }
        }
        if self.network.architecture == Architecture::ConvMlp {
            if self.network.conv_channels.is_empty() || self.network.conv_channels.contains(&0) {
                return fail("network.conv_channels", "needs at least one non-empty layer".into());
            }
            if self.network.hidden == 0 {
                return fail("network.hidden", "must be >= 1".into());
            }
            if self.network.kernel_size.is_multiple_of(2) {
                return fail("network.kernel_size", "must be odd".into());
            }
        }
        if self.network.architecture == Architecture::Linear && (self.inner.c_td != 0.0 || self.outer.c_td != 0.0) {
            return fail("inner.c_td", "the linear architecture has no critic to train".into());
        }
        Ok(())
    }

    pub fn inner_optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            kind: self.inner.optimizer,
            learning_rate: self.inner.learning_rate,
            clip_norm: self.inner.clip_norm,
        }
    }

    /// Optimizer for the outer critic: the inner optimizer kind at its own rate.
    pub fn outer_critic_optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            kind: self.inner.optimizer,
            learning_rate: self.outer.critic_learning_rate,
            clip_norm: self.inner.clip_norm,
        }
    }

    pub fn meta_learning_rate(&self) -> f64 {
        match self.algorithm {
            Algorithm::Mg => self.meta.mg_learning_rate,
            Algorithm::Bmg => self.meta.bmg_learning_rate,
        }
    }

    pub fn meta_optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            kind: self.meta.optimizer,
            learning_rate: self.meta_learning_rate(),
            clip_norm: self.meta.clip_norm,
        }
    }

    pub fn initial_meta(&self) -> Result<MetaParams> {
        MetaParams::from_gamma(self.inner.gamma_start, self.meta.gamma_lo, self.meta.gamma_hi)
    }

    /// Value source of the inner loss.
    pub fn inner_source(&self) -> ValueSource {
        match self.env {
            EnvId::DiscountingChain => ValueSource::Oracle(OracleDiscount::Meta),
            EnvId::Snake6x6 => ValueSource::InnerHead,
        }
    }

    /// Value source of the outer objective's advantages.
    pub fn outer_value_source(&self) -> ValueSource {
        match (self.env, self.outer_source) {
            (EnvId::DiscountingChain, OuterSource::Biased) => ValueSource::Oracle(OracleDiscount::Meta),
            (EnvId::DiscountingChain, OuterSource::Fixed) => ValueSource::Oracle(OracleDiscount::Fixed(self.outer.gamma)),
            (EnvId::Snake6x6, OuterSource::Biased) => ValueSource::InnerHead,
            (EnvId::Snake6x6, OuterSource::Fixed) => ValueSource::OuterHead,
        }
    }

    pub fn inner_spec(&self) -> InnerLossSpec {
        InnerLossSpec {
            coefficients: LossCoefficients {
                pg: self.inner.c_pg,
                td: self.inner.c_td,
                entropy: self.inner.c_en,
            },
            lambda: self.inner.lambda,
            source: self.inner_source(),
            baseline: self.inner.baseline,
        }
    }

    pub fn outer_spec(&self) -> OuterLossSpec {
        OuterLossSpec {
            gamma: self.outer.gamma,
            lambda: self.outer.lambda,
            coefficients: LossCoefficients {
                pg: self.outer.c_pg,
                td: self.outer.c_td,
                entropy: self.outer.c_en,
            },
            source: self.outer_value_source(),
            normalize: self.normalize_advantages,
            baseline: self.inner.baseline,
        }
    }

    pub fn bmg_spec(&self) -> BmgSpec {
        BmgSpec {
            target_steps: self.meta.bmg_target_steps,
            direction: self.meta.bmg_kl_direction,
        }
    }
}
