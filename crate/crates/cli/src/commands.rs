use std::fs::OpenOptions;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use serde::Serialize;
use serde_json::json;

use flowmap::boltzmann::{evaluate, SampleMetrics};
use flowmap::cnf::{cnf_sample_and_likelihood, euler_sample_and_likelihood, OdeStats};
use flowmap::linalg::Matrix;
use flowmap::model::{load_checkpoint, FlowMapModel};
use flowmap::output::{csv_writer, write_json, write_sample_set, Stamp, TRAIN_LOG_HEADER};
use flowmap::rng::stream;
use flowmap::sampler::{logdet_vs_finite_difference, round_trip_error, sample_with_likelihood, WeightedSampleSet};
use flowmap::targets::EnergyTarget;
use flowmap::trainer::{train_reverse_auxiliary, Trainer};

use crate::config::{RunConfig, SamplerKind};

/// Hand-built maps usable in place of a checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Builtin {
    /// `h ≡ 0`.
    Identity,
    /// `h(x) = −2x`; singular on steps of length ½.
    Fold,
}

pub struct Ctx {
    pub cfg: RunConfig,
    pub stamp: Stamp,
    pub timing: bool,
}

impl Ctx {
    pub fn new(cfg: RunConfig, timing: bool) -> Result<Self> {
        let stamp = Stamp::new(cfg.hash()?, cfg.seed);
        Ok(Self { cfg, stamp, timing })
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.cfg.out.join(name)
    }

    pub fn ms(&self, since: Instant) -> u64 {
        if self.timing {
            since.elapsed().as_millis() as u64
        } else {
            0
        }
    }

    pub fn target(&self) -> Result<Box<dyn EnergyTarget<f64>>> {
        Ok(self.cfg.target.build()?)
    }

    pub fn default_checkpoint(&self) -> PathBuf {
        self.out("model.ckpt")
    }

    pub fn model(&self, checkpoint: Option<&Path>, builtin: Option<Builtin>) -> Result<FlowMapModel<f64>> {
        let d = self.cfg.model.dim;
        Ok(match builtin {
            Some(Builtin::Identity) => FlowMapModel::linear(d, 0.0),
            Some(Builtin::Fold) => FlowMapModel::linear(d, -2.0),
            None => {
                let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| self.default_checkpoint());
                load_checkpoint(&path).with_context(|| format!("loading {}", path.display()))?.model
            }
        })
    }

    fn training_set(&self, target: &dyn EnergyTarget<f64>) -> Result<Matrix<f64>> {
        Ok(target.exact_sample(&mut stream(self.cfg.seed, "train_set", 0), self.cfg.train.n_train)?)
    }

    /// Held-out exact draws, from a stream the training set never uses.
    pub fn reference(&self, target: &dyn EnergyTarget<f64>) -> Result<Matrix<f64>> {
        Ok(target.exact_sample(&mut stream(self.cfg.seed, "reference", 0), self.cfg.eval.n_reference)?)
    }
}

#[derive(Serialize)]
struct TrainSidecar<'a> {
    command: &'a str,
    steps_run: u64,
    final_step: u64,
    skipped: u64,
    healthy: bool,
    final_loss: Option<f64>,
    resumed_from: Option<String>,
    wall_ms: u64,
    config: &'a RunConfig,
}

pub fn train(ctx: &Ctx, resume: Option<&Path>) -> Result<()> {
    let cfg = &ctx.cfg;
    let start = Instant::now();
    let target = ctx.target()?;
    let data = ctx.training_set(target.as_ref())?;
    let mut trainer = match resume {
        Some(p) => {
            let ckpt = load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?;
            if ckpt.model.spec() != &cfg.model {
                bail!("checkpoint model spec differs from the config");
            }
            Trainer::from_checkpoint(ckpt, cfg.train.clone())?
        }
        None => Trainer::new(
            FlowMapModel::new(cfg.model.clone(), &mut stream(cfg.seed, "init", 0))?,
            cfg.train.clone(),
        )?,
    };
    let log_path = ctx.out("train_log.csv");
    std::fs::create_dir_all(&cfg.out)?;
    let append = resume.is_some() && log_path.exists();
    let summary = if append {
        let f = OpenOptions::new().append(true).open(&log_path)?;
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(BufWriter::new(f));
        run_logged(ctx, &mut trainer, &data, &mut w)?
    } else {
        let mut w = csv_writer(&log_path, &ctx.stamp)?;
        w.write_record(TRAIN_LOG_HEADER)?;
        run_logged(ctx, &mut trainer, &data, &mut w)?
    };
    trainer.save(&ctx.default_checkpoint())?;
    write_json(
        &ctx.out("train_log.json"),
        &with_stamp(
            &TrainSidecar {
                command: "train",
                steps_run: summary.steps,
                final_step: trainer.step,
                skipped: summary.skipped,
                healthy: summary.healthy,
                final_loss: summary.final_loss,
                resumed_from: resume.map(|p| p.display().to_string()),
                wall_ms: ctx.ms(start),
                config: cfg,
            },
            &ctx.stamp,
        )?,
    )?;
    log::info!("trained to step {} ({} skipped)", trainer.step, summary.skipped);
    if !summary.healthy {
        bail!("training unhealthy: {} of {} steps skipped", summary.skipped, summary.steps);
    }
    Ok(())
}

fn run_logged<W: std::io::Write>(
    ctx: &Ctx,
    trainer: &mut Trainer<f64>,
    data: &Matrix<f64>,
    w: &mut csv::Writer<W>,
) -> Result<flowmap::trainer::TrainSummary> {
    let ckpt_dir = ctx.out("checkpoints");
    if trainer.cfg.checkpoint_every > 0 {
        std::fs::create_dir_all(&ckpt_dir)?;
    }
    let until = trainer.cfg.steps as u64;
    let start = trainer.step;
    let mut last = None;
    while trainer.step < until {
        let mut row = trainer.advance(data)?;
        if !ctx.timing {
            row.wall_ms = 0;
        }
        if row.skipped == 0 {
            last = Some(row.loss_total);
        }
        w.serialize(&row)?;
        let k = trainer.cfg.checkpoint_every as u64;
        if k > 0 && trainer.step % k == 0 {
            trainer.save(&ckpt_dir.join(format!("step_{:08}.ckpt", trainer.step)))?;
        }
    }
    w.flush()?;
    let ran = trainer.step - start;
    Ok(flowmap::trainer::TrainSummary {
        steps: ran,
        skipped: trainer.skipped,
        healthy: trainer.skipped as f64 <= 0.01 * ran.max(1) as f64,
        final_loss: last,
    })
}

fn with_stamp<M: Serialize>(meta: &M, stamp: &Stamp) -> Result<serde_json::Value> {
    let mut v = serde_json::to_value(meta)?;
    let obj = v.as_object_mut().context("metadata must be an object")?;
    obj.insert("config_hash".into(), stamp.config_hash.clone().into());
    obj.insert("seed".into(), stamp.seed.into());
    Ok(v)
}

/// Samples and the integrator statistics of a CNF run.
pub struct Drawn {
    pub samples: WeightedSampleSet<f64>,
    pub ode: Option<OdeStats>,
}

pub fn draw(cfg: &RunConfig, model: &FlowMapModel<f64>, target: &dyn EnergyTarget<f64>) -> Result<Drawn> {
    let map = model.view(true);
    let k = cfg.eval.k_samples;
    Ok(match cfg.eval.sampler {
        SamplerKind::Flowmap => Drawn {
            samples: sample_with_likelihood(&map, &cfg.grid.build()?, target, k, cfg.seed)?,
            ode: None,
        },
        SamplerKind::Dopri5 => {
            let run = cnf_sample_and_likelihood(&map, target, k, cfg.seed, &cfg.eval.ode, cfg.eval.trace)?;
            Drawn {
                samples: run.samples,
                ode: Some(run.stats),
            }
        }
        SamplerKind::Euler => {
            let run = euler_sample_and_likelihood(&map, target, cfg.grid.steps, k, cfg.seed)?;
            Drawn {
                samples: run.samples,
                ode: Some(run.stats),
            }
        }
    })
}

/// Sampler description written next to every sample file and report.
pub fn sampler_meta(cfg: &RunConfig, drawn: &Drawn) -> serde_json::Value {
    let mut m = json!({
        "sampler": cfg.eval.sampler.name(),
        "target": cfg.target,
        "k_samples": cfg.eval.k_samples,
        "nfe_total": drawn.samples.nfe_total,
        "nfe_per_sample": drawn.samples.nfe_total as f64 / drawn.samples.len().max(1) as f64,
    });
    let obj = m.as_object_mut().expect("object");
    match cfg.eval.sampler {
        SamplerKind::Flowmap => {
            obj.insert("schedule".into(), cfg.grid.schedule.name().into());
            obj.insert("steps".into(), cfg.grid.steps.into());
        }
        SamplerKind::Dopri5 | SamplerKind::Euler => {
            let stats = drawn.ode.unwrap_or_default();
            let dopri = cfg.eval.sampler == SamplerKind::Dopri5;
            obj.insert("integrator".into(), cfg.eval.sampler.name().into());
            obj.insert("atol".into(), if dopri { cfg.eval.ode.atol.into() } else { serde_json::Value::Null });
            obj.insert("rtol".into(), if dopri { cfg.eval.ode.rtol.into() } else { serde_json::Value::Null });
            let trace = if dopri { cfg.eval.trace.name() } else { "exact" };
            obj.insert("trace_mode".into(), trace.into());
            obj.insert("accepted_steps".into(), stats.accepted.into());
            obj.insert("rejected_steps".into(), stats.rejected.into());
        }
    }
    m
}

pub fn sample(ctx: &Ctx, checkpoint: Option<&Path>, builtin: Option<Builtin>) -> Result<()> {
    let start = Instant::now();
    let target = ctx.target()?;
    let model = ctx.model(checkpoint, builtin)?;
    let drawn = draw(&ctx.cfg, &model, target.as_ref())?;
    let mut meta = sampler_meta(&ctx.cfg, &drawn);
    meta["wall_ms"] = ctx.ms(start).into();
    write_sample_set(&ctx.out("samples.csv"), &drawn.samples, &ctx.stamp, &meta)?;
    log::info!("{} samples, {} valid", drawn.samples.len(), drawn.samples.n_valid());
    Ok(())
}

pub struct Evaluated {
    pub drawn: Drawn,
    pub metrics: SampleMetrics,
    pub wall_ms: u64,
}

/// Draws samples and scores them against `reference`.
pub fn evaluate_cell(ctx: &Ctx, cfg: &RunConfig, model: &FlowMapModel<f64>, target: &dyn EnergyTarget<f64>, reference: &Matrix<f64>) -> Result<Evaluated> {
    let start = Instant::now();
    let drawn = draw(cfg, model, target)?;
    let wall_ms = ctx.ms(start);
    let metrics = evaluate(&drawn.samples, reference, target, cfg.seed)?;
    Ok(Evaluated { drawn, metrics, wall_ms })
}

pub fn eval(ctx: &Ctx, checkpoint: Option<&Path>, builtin: Option<Builtin>) -> Result<()> {
    let target = ctx.target()?;
    let model = ctx.model(checkpoint, builtin)?;
    let reference = ctx.reference(target.as_ref())?;
    let ev = evaluate_cell(ctx, &ctx.cfg, &model, target.as_ref(), &reference)?;
    let mut meta = sampler_meta(&ctx.cfg, &ev.drawn);
    meta["wall_ms"] = ev.wall_ms.into();
    write_sample_set(&ctx.out("samples.csv"), &ev.drawn.samples, &ctx.stamp, &meta)?;
    let mut report = serde_json::to_value(&ev.metrics)?;
    let obj = report.as_object_mut().expect("object");
    for (k, v) in meta.as_object().expect("object") {
        obj.entry(k.clone()).or_insert(v.clone());
    }
    obj.insert("n_reference".into(), ctx.cfg.eval.n_reference.into());
    let report = with_stamp(&report, &ctx.stamp)?;
    write_json(&ctx.out("metrics.json"), &report)?;
    log::info!("ess {:.4} w2_energy {:?}", ev.metrics.ess, ev.metrics.w2_energy);
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub measured: serde_json::Value,
    pub threshold: f64,
}

pub fn verify(ctx: &Ctx, checkpoint: Option<&Path>, builtin: Option<Builtin>) -> Result<bool> {
    let cfg = &ctx.cfg;
    let v = &cfg.verify;
    let model = ctx.model(checkpoint, builtin)?;
    let grid = cfg.grid.build()?;
    let map = model.view(true);
    let mut checks = Vec::new();

    let rt = round_trip_error(&map, &grid, v.round_trip_samples, cfg.seed)?;
    let probe = sample_with_likelihood(&map, &grid, ctx.target()?.as_ref(), v.round_trip_samples, cfg.seed)?;
    let flagged = probe.len() - probe.n_valid();
    checks.push(CheckResult {
        name: "round_trip",
        passed: rt.mean < v.round_trip_tol && flagged == 0,
        measured: json!({"mean": rt.mean, "max": rt.max, "non_invertible_rows": flagged}),
        threshold: v.round_trip_tol,
    });

    let ld = logdet_vs_finite_difference(&map, &grid, v.logdet_samples, cfg.seed, v.fd_step)?;
    checks.push(CheckResult {
        name: "logdet_vs_finite_difference",
        passed: ld.non_invertible == 0 && ld.max_abs_err < v.logdet_tol,
        measured: serde_json::to_value(ld)?,
        threshold: v.logdet_tol,
    });

    let aux = train_reverse_auxiliary(&model, &grid, &v.aux)?;
    checks.push(CheckResult {
        name: "auxiliary_reverse",
        passed: aux.reconstruction < v.aux_tol,
        measured: json!({
            "reconstruction": aux.reconstruction,
            "final_train_loss": aux.train_loss.last().copied(),
        }),
        threshold: v.aux_tol,
    });

    for c in &checks {
        let verdict = if c.passed { "PASS" } else { "FAIL" };
        println!("{verdict} {} {}", c.name, c.measured);
    }
    let all = checks.iter().all(|c| c.passed);
    write_json(
        &ctx.out("verify.json"),
        &with_stamp(&json!({"passed": all, "checks": checks}), &ctx.stamp)?,
    )?;
    Ok(all)
}
