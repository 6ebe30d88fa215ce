//! Run configuration: one JSON document plus command-line overrides.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use flowmap::cnf::{OdeConfig, TraceMode};
use flowmap::model::ModelSpec;
use flowmap::output::config_hash;
use flowmap::schedules::{GridSpec, ScheduleKind};
use flowmap::targets::TargetSpec;
use flowmap::trainer::{AuxConfig, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Flowmap,
    Dopri5,
    Euler,
}

impl SamplerKind {
    pub fn name(self) -> &'static str {
        match self {
            SamplerKind::Flowmap => "flowmap",
            SamplerKind::Dopri5 => "dopri5",
            SamplerKind::Euler => "euler",
        }
    }
}

impl fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TraceArg {
    Exact,
    Hutchinson,
}

impl From<TraceArg> for TraceMode {
    fn from(t: TraceArg) -> Self {
        match t {
            TraceArg::Exact => TraceMode::Exact,
            TraceArg::Hutchinson => TraceMode::Hutchinson,
        }
    }
}

fn default_k() -> usize {
    10_000
}
fn default_reference() -> usize {
    10_000
}
fn default_sampler() -> SamplerKind {
    SamplerKind::Flowmap
}
fn default_trace() -> TraceMode {
    TraceMode::Exact
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_k")]
    pub k_samples: usize,
    /// Size of the held-out exact test set.
    #[serde(default = "default_reference")]
    pub n_reference: usize,
    #[serde(default = "default_sampler")]
    pub sampler: SamplerKind,
    #[serde(default)]
    pub ode: OdeConfig,
    #[serde(default = "default_trace")]
    pub trace: TraceMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k_samples: default_k(),
            n_reference: default_reference(),
            sampler: default_sampler(),
            ode: OdeConfig::default(),
            trace: default_trace(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub round_trip_tol: f64,
    pub round_trip_samples: usize,
    pub logdet_tol: f64,
    pub logdet_samples: usize,
    pub fd_step: f64,
    pub aux_tol: f64,
    pub aux: AuxConfig,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            round_trip_tol: 5e-2,
            round_trip_samples: 1000,
            logdet_tol: 1e-6,
            logdet_samples: 100,
            fd_step: 1e-5,
            aux_tol: 1e-3,
            aux: AuxConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub target: TargetSpec,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub grid: GridSpec,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub verify: VerifyConfig,
    pub seed: u64,
    pub out: PathBuf,
}

/// Flags shared by every subcommand; each one, when given, replaces the
/// matching config value.
#[derive(Args, Clone, Debug, Default)]
pub struct Overrides {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub sampler: Option<SamplerKind>,
    /// Sampling steps of the flow-map grid (also the Euler step count).
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, value_parser = parse_schedule)]
    pub schedule: Option<ScheduleKind>,
    #[arg(long)]
    pub atol: Option<f64>,
    #[arg(long)]
    pub rtol: Option<f64>,
    #[arg(long, value_enum)]
    pub trace: Option<TraceArg>,
    #[arg(long)]
    pub k_samples: Option<usize>,
    /// Optimizer steps; overrides `train.steps`.
    #[arg(long)]
    pub train_steps: Option<usize>,
    /// Write zeros in every wall-clock column so reruns are byte-identical.
    #[arg(long)]
    pub no_timing: bool,
}

fn parse_schedule(s: &str) -> Result<ScheduleKind, String> {
    ScheduleKind::from_str(s).map_err(|e| e.to_string())
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| anyhow::anyhow!("config schema error: {e}"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(p) = &o.out {
            self.out = p.clone();
        }
        if let Some(s) = o.sampler {
            self.eval.sampler = s;
        }
        if let Some(n) = o.steps {
            self.grid.steps = n;
        }
        if let Some(k) = o.schedule {
            self.grid.schedule = k;
        }
        if let Some(a) = o.atol {
            self.eval.ode.atol = a;
        }
        if let Some(r) = o.rtol {
            self.eval.ode.rtol = r;
        }
        if let Some(t) = o.trace {
            self.eval.trace = t.into();
        }
        if let Some(k) = o.k_samples {
            self.eval.k_samples = k;
        }
        if let Some(n) = o.train_steps {
            self.train.steps = n;
        }
        self.train.seed = self.seed;
        self.verify.aux.train.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.eval.ode.validate()?;
        self.verify.aux.train.validate()?;
        self.grid.build::<f64>()?;
        let target = self.target.build::<f64>()?;
        if target.dim() != self.model.dim {
            bail!("model.dim is {} but the target has dimension {}", self.model.dim, target.dim());
        }
        if self.eval.k_samples == 0 || self.eval.n_reference == 0 {
            bail!("eval.k_samples and eval.n_reference must be positive");
        }
        Ok(())
    }

    /// Loads, overrides and validates.
    pub fn resolve(o: &Overrides) -> Result<Self> {
        let mut cfg = Self::load(&o.config)?;
        cfg.apply(o);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Content hash of everything except the output directory.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.out = PathBuf::new();
        Ok(config_hash(&c)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> serde_json::Value {
        serde_json::json!({
            "target": {"kind": "gmm", "weights": [0.7, 0.3], "means": [[-2.5, 0.0], [2.5, 0.0]], "sigma": 0.5},
            "model": {"dim": 2},
            "train": {"steps": 10},
            "grid": {"schedule": "linear", "steps": 4},
            "seed": 1,
            "out": "runs/x"
        })
    }

    #[test]
    fn minimal_config_parses_with_defaults() {
        let c = RunConfig::from_json(&base().to_string()).unwrap();
        assert_eq!(c.eval.k_samples, 10_000);
        assert_eq!(c.eval.sampler, SamplerKind::Flowmap);
        c.validate().unwrap();
    }

    #[test]
    fn missing_field_is_named() {
        for field in ["model", "grid", "seed", "target"] {
            let mut v = base();
            v.as_object_mut().unwrap().remove(field);
            let e = RunConfig::from_json(&v.to_string()).unwrap_err().to_string();
            assert!(e.contains(&format!("missing field `{field}`")), "{e}");
        }
        let mut v = base();
        v["model"].as_object_mut().unwrap().remove("dim");
        let e = RunConfig::from_json(&v.to_string()).unwrap_err().to_string();
        assert!(e.contains("`dim`"), "{e}");
    }

    #[test]
    fn unknown_field_is_rejected() {
        let mut v = base();
        v["train"]["stepz"] = 3.into();
        let e = RunConfig::from_json(&v.to_string()).unwrap_err().to_string();
        assert!(e.contains("stepz"), "{e}");
    }

    #[test]
    fn flags_win() {
        let mut c = RunConfig::from_json(&base().to_string()).unwrap();
        let o = Overrides {
            seed: Some(9),
            steps: Some(16),
            schedule: Some(ScheduleKind::Edm),
            atol: Some(1e-7),
            trace: Some(TraceArg::Hutchinson),
            k_samples: Some(5),
            ..Default::default()
        };
        c.apply(&o);
        assert_eq!((c.seed, c.train.seed, c.grid.steps), (9, 9, 16));
        assert_eq!(c.grid.schedule, ScheduleKind::Edm);
        assert_eq!(c.eval.ode.atol, 1e-7);
        assert_eq!(c.eval.ode.rtol, OdeConfig::default().rtol);
        assert_eq!(c.eval.trace, TraceMode::Hutchinson);
        assert_eq!(c.eval.k_samples, 5);
    }

    #[test]
    fn hash_ignores_output_directory() {
        let a = RunConfig::from_json(&base().to_string()).unwrap();
        let mut b = a.clone();
        b.out = "elsewhere".into();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.seed = 2;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let mut v = base();
        v["model"]["dim"] = 3.into();
        let c = RunConfig::from_json(&v.to_string()).unwrap();
        assert!(c.validate().unwrap_err().to_string().contains("model.dim"));
    }
}
