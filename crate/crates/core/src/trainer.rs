//! The training loop: batches, hybrid loss, clipped adaptive updates, EMA,
//! checkpoints and the CSV log. Also the auxiliary reverse model used to
//! check invertibility independently of the cycle loss.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{invalid, Error, Result};
use crate::linalg::Matrix;
use crate::losses::{loss_and_grad, sample_time_pairs, Batch, LossBreakdown, LossConfig};
use crate::model::{Checkpoint, FlowMapModel, ModelSpec};
use crate::optim::{clip_grad_norm, lr_at, AdamWConfig, OptimizerState};
use crate::output::TrainLogRow;
use crate::rng::{standard_normal, stream};
use crate::sampler::prior_draw;
use crate::scalar::Real;
use crate::schedules::TimeGrid;
use crate::targets::EnergyTarget;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    pub ema_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
    /// Rows per gradient shard; fixes the reduction order.
    pub shard_rows: usize,
    /// Write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: usize,
    /// Size of the fixed training set drawn from an analytic target.
    pub n_train: usize,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 256,
            lr: 5e-4,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 1e-4,
            warmup_frac: 0.05,
            ema_decay: 0.999,
            grad_clip: 10.0,
            seed: 0,
            shard_rows: 64,
            checkpoint_every: 0,
            n_train: 100_000,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be positive"));
        }
        if !(self.lr >= 0.0) || !(self.eps > 0.0) || !(self.weight_decay >= 0.0) || !(self.grad_clip > 0.0) {
            return Err(invalid("optimizer rates must be positive"));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(invalid("warmup_frac must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(invalid("ema_decay must lie in [0, 1]"));
        }
        self.loss.validate()
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.betas.0,
            beta2: self.betas.1,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Outcome of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport<T> {
    pub loss: LossBreakdown<T>,
    /// Gradient norm before clipping (NaN when the step was skipped early).
    pub grad_norm: T,
    pub skipped: bool,
}

fn is_numerical(e: &Error) -> bool {
    matches!(e, Error::NonFinite { .. } | Error::NonFiniteRow { .. })
}

/// One update: loss and gradient, clipping, AdamW, EMA. A non-finite loss
/// or gradient leaves parameters, moments and EMA untouched.
pub fn train_step<T: Real>(
    model: &mut FlowMapModel<T>,
    opt: &mut OptimizerState<T>,
    batch: &Batch<T>,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<StepReport<T>> {
    let skipped = |loss| StepReport {
        loss,
        grad_norm: T::nan(),
        skipped: true,
    };
    let (loss, mut grad) = match loss_and_grad(&model.view(false), batch, &cfg.loss, cfg.shard_rows) {
        Ok(v) => v,
        Err(e) if is_numerical(&e) => {
            let nan = T::nan();
            return Ok(skipped(LossBreakdown {
                total: nan,
                cfm: nan,
                avg: nan,
                inv: nan,
            }));
        }
        Err(e) => return Err(e),
    };
    if !loss.all_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Ok(skipped(loss));
    }
    let norm = clip_grad_norm(&mut grad, T::of(cfg.grad_clip));
    opt.update(model.params.values_mut(), &grad, T::of(lr), &cfg.adamw());
    model.ema_update(T::of(cfg.ema_decay));
    Ok(StepReport {
        loss,
        grad_norm: norm,
        skipped: false,
    })
}

/// Batch for optimizer step `step` (0-based): depends only on the seed and
/// the step, so resumed runs see the same batches.
pub fn draw_batch<T: Real>(data: &Matrix<T>, cfg: &TrainConfig, step: u64) -> Result<Batch<T>> {
    if data.rows() == 0 {
        return Err(invalid("empty training set"));
    }
    let d = data.cols();
    let k = cfg.batch_size;
    let mut rng = stream(cfg.seed, "batch", step);
    let x0 = Matrix::from_vec(k, d, standard_normal(&mut rng, k * d));
    let mut x1 = Matrix::zeros(k, d);
    for i in 0..k {
        let j = rng.gen_range(0..data.rows());
        x1.row_mut(i).copy_from_slice(data.row(j));
    }
    let (s, t) = sample_time_pairs(&mut rng, k, cfg.loss.p_same);
    Batch::new(x0, x1, s, t)
}

/// Resumable training state.
pub struct Trainer<T> {
    pub model: FlowMapModel<T>,
    pub optimizer: OptimizerState<T>,
    pub cfg: TrainConfig,
    /// Optimizer steps taken so far, skipped ones included.
    pub step: u64,
    pub skipped: u64,
    started: Instant,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub steps: u64,
    pub skipped: u64,
    /// False when more than 1% of steps were skipped.
    pub healthy: bool,
    pub final_loss: Option<f64>,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: FlowMapModel<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let n = model.params.len();
        Ok(Self {
            model,
            optimizer: OptimizerState::new(n),
            cfg,
            step: 0,
            skipped: 0,
            started: Instant::now(),
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let n = ckpt.model.params.len();
        let optimizer = ckpt.optimizer.unwrap_or_else(|| OptimizerState::new(n));
        Ok(Self {
            model: ckpt.model,
            optimizer,
            cfg,
            step: ckpt.step,
            skipped: 0,
            started: Instant::now(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.model.save(path, self.step, Some(&self.optimizer))
    }

    /// Runs one step and returns its log row.
    pub fn advance(&mut self, data: &Matrix<T>) -> Result<TrainLogRow> {
        let batch = draw_batch(data, &self.cfg, self.step)?;
        let lr = lr_at(self.step as usize, self.cfg.steps, self.cfg.lr, self.cfg.warmup_frac);
        let r = train_step(&mut self.model, &mut self.optimizer, &batch, &self.cfg, lr)?;
        self.step += 1;
        if r.skipped {
            self.skipped += 1;
            log::warn!("step {} skipped: non-finite loss or gradient", self.step);
        }
        Ok(TrainLogRow {
            step: self.step,
            loss_total: r.loss.total.as_f64(),
            loss_cfm: r.loss.cfm.as_f64(),
            loss_avg: r.loss.avg.as_f64(),
            loss_inv: r.loss.inv.as_f64(),
            lr,
            grad_norm: r.grad_norm.as_f64(),
            skipped: u8::from(r.skipped),
            wall_ms: self.started.elapsed().as_millis() as u64,
        })
    }

    /// Trains up to `cfg.steps`, streaming rows to `log` and writing
    /// `checkpoint_every`-spaced checkpoints into `ckpt_dir`.
    pub fn run<W: Write>(
        &mut self,
        data: &Matrix<T>,
        mut log: Option<&mut csv::Writer<W>>,
        ckpt_dir: Option<&Path>,
    ) -> Result<TrainSummary> {
        self.run_until(self.cfg.steps as u64, data, log.as_deref_mut(), ckpt_dir)
    }

    pub fn run_until<W: Write>(
        &mut self,
        until: u64,
        data: &Matrix<T>,
        mut log: Option<&mut csv::Writer<W>>,
        ckpt_dir: Option<&Path>,
    ) -> Result<TrainSummary> {
        let start = self.step;
        let mut last = None;
        while self.step < until {
            let row = self.advance(data)?;
            if row.skipped == 0 {
                last = Some(row.loss_total);
            }
            if let Some(w) = log.as_deref_mut() {
                w.serialize(&row)?;
            }
            if let (Some(dir), k) = (ckpt_dir, self.cfg.checkpoint_every) {
                if k > 0 && self.step % k as u64 == 0 {
                    self.save(&dir.join(format!("step_{:08}.ckpt", self.step)))?;
                }
            }
        }
        if let Some(w) = log {
            w.flush()?;
        }
        let ran = self.step - start;
        Ok(TrainSummary {
            steps: ran,
            skipped: self.skipped,
            healthy: self.skipped as f64 <= 0.01 * ran.max(1) as f64,
            final_loss: last,
        })
    }
}

/// Trains a fresh model on a fixed exact-sample training set of the target.
pub fn train<T: Real>(
    target: &dyn EnergyTarget<T>,
    spec: ModelSpec,
    cfg: &TrainConfig,
) -> Result<(FlowMapModel<T>, Vec<TrainLogRow>, TrainSummary)> {
    let data = target.exact_sample(&mut stream(cfg.seed, "train_set", 0), cfg.n_train)?;
    train_on(&data, spec, cfg)
}

/// Trains a fresh model on the rows of `data`.
pub fn train_on<T: Real>(
    data: &Matrix<T>,
    spec: ModelSpec,
    cfg: &TrainConfig,
) -> Result<(FlowMapModel<T>, Vec<TrainLogRow>, TrainSummary)> {
    let model = FlowMapModel::new(spec, &mut stream(cfg.seed, "init", 0))?;
    let mut trainer = Trainer::new(model, cfg.clone())?;
    let mut rows = Vec::with_capacity(cfg.steps);
    let mut last = None;
    while (trainer.step as usize) < cfg.steps {
        let row = trainer.advance(data)?;
        if row.skipped == 0 {
            last = Some(row.loss_total);
        }
        rows.push(row);
    }
    let summary = TrainSummary {
        steps: trainer.step,
        skipped: trainer.skipped,
        healthy: trainer.skipped as f64 <= 0.01 * (trainer.step.max(1)) as f64,
        final_loss: last,
    };
    Ok((trainer.model, rows, summary))
}

/// Settings for the auxiliary reverse model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuxConfig {
    pub n_pairs: usize,
    pub n_holdout: usize,
    pub train: TrainConfig,
}

impl Default for AuxConfig {
    fn default() -> Self {
        Self {
            n_pairs: 100_000,
            n_holdout: 2_000,
            train: TrainConfig {
                steps: 150_000,
                batch_size: 256,
                lr: 3e-3,
                ..TrainConfig::default()
            },
        }
    }
}

/// `X(x, s, t)` applied along `times` with the evaluation weights.
fn push<T: Real>(model: &FlowMapModel<T>, times: &[T], x: &[T]) -> Result<Vec<T>> {
    let map = model.view(true);
    let mut cur = x.to_vec();
    for w in times.windows(2) {
        cur = map.step(&cur, w[0], w[1])?;
    }
    Ok(cur)
}

fn pairs<T: Real>(frozen: &FlowMapModel<T>, times: &[T], seed: u64, n: usize) -> Result<(Matrix<T>, Matrix<T>)> {
    let d = frozen.dim();
    let rows: Vec<Result<(Vec<T>, Vec<T>)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let x0 = prior_draw::<T>(seed, i, d);
            let x1 = push(frozen, times, &x0)?;
            Ok((x0, x1))
        })
        .collect();
    let mut a = Matrix::zeros(n, d);
    let mut b = Matrix::zeros(n, d);
    for (i, r) in rows.into_iter().enumerate() {
        let (x0, x1) = r?;
        a.row_mut(i).copy_from_slice(&x0);
        b.row_mut(i).copy_from_slice(&x1);
    }
    Ok((a, b))
}

/// Mean `‖x₀ − X_aux(x₁, 0, 1)‖` over the pairs.
fn reconstruction<T: Real>(aux: &FlowMapModel<T>, x0: &Matrix<T>, x1: &Matrix<T>) -> Result<f64> {
    let map = aux.view(true);
    let errs: Vec<Result<f64>> = (0..x0.rows())
        .into_par_iter()
        .map(|i| {
            let back = map.step(x1.row(i), T::zero(), T::one())?;
            Ok(back
                .iter()
                .zip(x0.row(i))
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum::<T>()
                .sqrt()
                .as_f64())
        })
        .collect();
    let errs = errs.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(errs.iter().sum::<f64>() / errs.len().max(1) as f64)
}

/// Gradient of `mean ‖u(x₁, 0, 1) − (x₀ − x₁)‖²` on a minibatch.
fn aux_loss_grad<T: Real>(aux: &FlowMapModel<T>, x0: &Matrix<T>, x1: &Matrix<T>) -> Result<(T, Vec<T>)> {
    let k = x0.rows();
    let map = aux.view(false);
    let mut tape = Tape::new(&aux.params);
    let x = tape.constant(x1.clone());
    let zeros = vec![T::zero(); k];
    let ones = vec![T::one(); k];
    let u = map.forward_tape(&mut tape, x, &zeros, &ones)?;
    let disp: Vec<T> = x0.data().iter().zip(x1.data()).map(|(&a, &b)| a - b).collect();
    let tgt = tape.constant(Matrix::from_vec(k, x0.cols(), disp));
    let diff = tape.sub(u, tgt);
    let sq = tape.square(diff);
    let sum = tape.sum(sq);
    let loss = tape.scale(sum, T::one() / T::of_usize(k));
    let g = tape.backward(loss)?;
    Ok((tape.scalar(loss), g))
}

/// Result of the auxiliary reverse fit.
#[derive(Clone, Debug)]
pub struct AuxOutcome<T> {
    pub model: FlowMapModel<T>,
    /// Mean `ℓ2` reconstruction error on held-out prior draws.
    pub reconstruction: f64,
    pub train_loss: Vec<f64>,
}

/// Fits a separate one-step map from data back to latents on reflow pairs
/// `(x₀, x₁ = forward(x₀))` generated by the frozen model along `grid`,
/// then reports its reconstruction error on fresh prior draws.
pub fn train_reverse_auxiliary<T: Real>(frozen: &FlowMapModel<T>, grid: &TimeGrid<T>, cfg: &AuxConfig) -> Result<AuxOutcome<T>> {
    let tc = &cfg.train;
    tc.validate()?;
    let times = grid.ascending();
    let (x0, x1) = pairs(frozen, &times, crate::rng::derive_seed(tc.seed, "aux_pairs", 0), cfg.n_pairs)?;
    let (h0, h1) = pairs(frozen, &times, crate::rng::derive_seed(tc.seed, "aux_holdout", 0), cfg.n_holdout)?;
    let mut aux = FlowMapModel::new(frozen.spec().clone(), &mut stream(tc.seed, "aux_init", 0))?;
    let mut opt = OptimizerState::new(aux.params.len());
    let adam = tc.adamw();
    let d = frozen.dim();
    let k = tc.batch_size;
    let mut losses = Vec::with_capacity(tc.steps);
    for step in 0..tc.steps {
        let mut rng = stream(tc.seed, "aux_batch", step as u64);
        let mut b0 = Matrix::zeros(k, d);
        let mut b1 = Matrix::zeros(k, d);
        for i in 0..k {
            let j = rng.gen_range(0..cfg.n_pairs);
            b0.row_mut(i).copy_from_slice(x0.row(j));
            b1.row_mut(i).copy_from_slice(x1.row(j));
        }
        let (loss, mut g) = aux_loss_grad(&aux, &b0, &b1)?;
        if !loss.is_finite() || g.iter().any(|v| !v.is_finite()) {
            losses.push(f64::NAN);
            continue;
        }
        clip_grad_norm(&mut g, T::of(tc.grad_clip));
        let lr = lr_at(step, tc.steps, tc.lr, tc.warmup_frac);
        opt.update(aux.params.values_mut(), &g, T::of(lr), &adam);
        aux.ema_update(T::of(tc.ema_decay));
        losses.push(loss.as_f64());
    }
    let reconstruction = reconstruction(&aux, &h0, &h1)?;
    Ok(AuxOutcome {
        model: aux,
        reconstruction,
        train_loss: losses,
    })
}
