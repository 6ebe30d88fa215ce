//! One evaluation per axis value and seed, one CSV row per cell.

use std::time::Instant;

use anyhow::{bail, Result};
use clap::ValueEnum;
use serde_json::json;

use flowmap::model::FlowMapModel;
use flowmap::output::{csv_writer, fmt_real, sidecar_path, write_json};
use flowmap::rng::stream;
use flowmap::sampler::round_trip_error;
use flowmap::schedules::ScheduleKind;
use flowmap::trainer::train;

use crate::commands::{evaluate_cell, Ctx};
use crate::config::{RunConfig, SamplerKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    Steps,
    #[value(name = "lambda_r")]
    LambdaR,
    Schedule,
    Tolerance,
    Samples,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Steps => "steps",
            Axis::LambdaR => "lambda_r",
            Axis::Schedule => "schedule",
            Axis::Tolerance => "tolerance",
            Axis::Samples => "samples",
        }
    }

    pub fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            Axis::Steps => &["1", "2", "4", "8", "16"],
            Axis::LambdaR => &["1", "10", "100", "1000", "10000", "100000"],
            Axis::Schedule => &["linear", "geometric", "cosine", "chebyshev", "edm"],
            Axis::Tolerance => &["1e-2", "1e-3", "1e-4", "1e-5", "1e-6"],
            Axis::Samples => &["100", "1000", "10000"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }

    /// Config for one cell.
    fn apply(self, base: &RunConfig, value: &str) -> Result<RunConfig> {
        let mut c = base.clone();
        match self {
            Axis::Steps => {
                c.grid.steps = value.parse()?;
                c.eval.sampler = SamplerKind::Flowmap;
            }
            Axis::LambdaR => {
                c.train.loss.lambda_r = value.parse()?;
                c.eval.sampler = SamplerKind::Flowmap;
            }
            Axis::Schedule => {
                c.grid.schedule = value.parse::<ScheduleKind>()?;
                c.eval.sampler = SamplerKind::Flowmap;
            }
            Axis::Tolerance => {
                let tol: f64 = value.parse()?;
                c.eval.ode.atol = tol;
                c.eval.ode.rtol = tol;
                c.eval.sampler = SamplerKind::Dopri5;
            }
            Axis::Samples => c.eval.k_samples = value.parse()?,
        }
        c.validate()?;
        Ok(c)
    }
}

pub const SWEEP_HEADER: [&str; 17] = [
    "axis",
    "value",
    "seed",
    "sampler",
    "schedule",
    "steps",
    "lambda_r",
    "k_samples",
    "nfe",
    "nfe_total",
    "wall_ms",
    "ess",
    "w2_energy",
    "w2_energy_reweighted",
    "w2_torus",
    "n_valid",
    "round_trip_mean",
];

fn opt(v: Option<f64>) -> String {
    v.map(fmt_real).unwrap_or_default()
}

pub fn sweep(ctx: &Ctx, axis: Axis, values: Option<Vec<String>>, seeds: u64, checkpoint: Option<&std::path::Path>) -> Result<()> {
    if seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let values = values.unwrap_or_else(|| axis.default_values());
    let path = ctx.out(&format!("sweep_{}.csv", axis.name()));
    let mut w = csv_writer(&path, &ctx.stamp)?;
    w.write_record(SWEEP_HEADER)?;
    let target = ctx.target()?;
    let start = Instant::now();
    let shared = if axis == Axis::LambdaR { None } else { Some(ctx.model(checkpoint, None)?) };
    for value in &values {
        let cell_base = axis.apply(&ctx.cfg, value)?;
        for k in 0..seeds {
            let mut cfg = cell_base.clone();
            cfg.seed = ctx.cfg.seed + k;
            cfg.train.seed = cfg.seed;
            let trained;
            let model: &FlowMapModel<f64> = match &shared {
                Some(m) => m,
                None => {
                    log::info!("training lambda_r={value} seed={}", cfg.seed);
                    trained = train(target.as_ref(), cfg.model.clone(), &cfg.train)?.0;
                    &trained
                }
            };
            let reference = target.exact_sample(&mut stream(cfg.seed, "reference", 0), cfg.eval.n_reference)?;
            let ev = evaluate_cell(ctx, &cfg, model, target.as_ref(), &reference)?;
            let m = &ev.metrics;
            let rt = match cfg.eval.sampler {
                SamplerKind::Flowmap => Some(round_trip_error(&model.view(true), &cfg.grid.build()?, cfg.eval.k_samples.min(1000), cfg.seed)?.mean),
                _ => None,
            };
            let flowmap = cfg.eval.sampler == SamplerKind::Flowmap;
            let n = ev.drawn.samples.len().max(1) as f64;
            w.write_record([
                axis.name().to_string(),
                value.clone(),
                cfg.seed.to_string(),
                cfg.eval.sampler.name().to_string(),
                if flowmap { cfg.grid.schedule.name().to_string() } else { String::new() },
                if cfg.eval.sampler != SamplerKind::Dopri5 { cfg.grid.steps.to_string() } else { String::new() },
                fmt_real(cfg.train.loss.lambda_r),
                cfg.eval.k_samples.to_string(),
                fmt_real(m.nfe_total as f64 / n),
                m.nfe_total.to_string(),
                ev.wall_ms.to_string(),
                fmt_real(m.ess),
                opt(m.w2_energy),
                opt(m.w2_energy_reweighted),
                opt(m.w2_torus),
                m.n_valid.to_string(),
                opt(rt),
            ])?;
            w.flush()?;
        }
    }
    write_json(
        &sidecar_path(&path),
        &json!({
            "axis": axis.name(),
            "values": values,
            "seeds": seeds,
            "wall_ms": ctx.ms(start),
            "config_hash": ctx.stamp.config_hash,
            "seed": ctx.stamp.seed,
        }),
    )?;
    Ok(())
}
