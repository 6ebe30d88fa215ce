//! Few-step generation with exact per-step change of variables.

use rayon::prelude::*;
use serde::Serialize;

use crate::autodiff::{jacobian, Dual};
use crate::error::Result;
use crate::linalg::Matrix;
use crate::model::FlowMap;
use crate::rng::{standard_normal, stream};
use crate::scalar::Real;
use crate::schedules::TimeGrid;
use crate::targets::EnergyTarget;

/// `|det J|` below this is treated as a fold.
pub const MIN_ABS_DET: f64 = 1e-300;

/// Log-density of `N(0, I_d)`.
pub fn std_normal_logpdf<T: Real>(x: &[T]) -> T {
    let sq: T = x.iter().map(|&v| v * v).sum();
    -T::of(0.5) * sq - T::of(0.5 * x.len() as f64 * (2.0 * std::f64::consts::PI).ln())
}

#[derive(Clone, Debug)]
pub struct StepResult<T> {
    pub x_next: Vec<T>,
    /// `log|det ∂X/∂x|`.
    pub logdet: T,
    pub invertible: bool,
    pub jac: Option<Matrix<T>>,
    pub nfe: usize,
}

/// One map application `x ↦ X(x, s, t)` with its exact Jacobian
/// log-determinant: one value pass plus `d` forward-mode column passes.
pub fn flow_step<T: Real>(map: &FlowMap<'_, T>, x: &[T], s: T, t: T, keep_jac: bool) -> Result<StepResult<T>> {
    let x_next = map.step(x, s, t)?;
    let j = jacobian(
        |z: &[Dual<T>]| map.step(z, Dual::constant(s), Dual::constant(t)),
        x,
    )?;
    let ld = j.matrix.log_abs_det();
    let invertible = !ld.is_singular() && ld.log_abs > T::of(MIN_ABS_DET.ln()) && ld.log_abs.is_finite();
    Ok(StepResult {
        x_next,
        logdet: ld.log_abs,
        invertible,
        jac: keep_jac.then_some(j.matrix),
        nfe: 1 + j.evaluations,
    })
}

/// A prior draw pushed along a time sequence.
#[derive(Clone, Debug)]
pub struct Trajectory<T> {
    pub x: Vec<T>,
    pub logdets: Vec<T>,
    pub invertible: bool,
    pub nfe: usize,
}

impl<T: Real> Trajectory<T> {
    pub fn logdet_sum(&self) -> T {
        self.logdets.iter().copied().sum()
    }
}

/// Applies `X(·, τₖ, τₖ₊₁)` for consecutive entries of `times`.
pub fn transport<T: Real>(map: &FlowMap<'_, T>, times: &[T], x: &[T]) -> Result<Trajectory<T>> {
    let mut cur = x.to_vec();
    let mut logdets = Vec::with_capacity(times.len().saturating_sub(1));
    let mut invertible = true;
    let mut nfe = 0;
    for w in times.windows(2) {
        let r = flow_step(map, &cur, w[0], w[1], false)?;
        invertible &= r.invertible;
        nfe += r.nfe;
        logdets.push(r.logdet);
        cur = r.x_next;
    }
    Ok(Trajectory {
        x: cur,
        logdets,
        invertible,
        nfe,
    })
}

/// Samples with model log-densities, energies and log importance weights.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedSampleSet<T> {
    pub x: Matrix<T>,
    pub logp_model: Vec<T>,
    pub energy: Vec<T>,
    /// `−energy − logp_model`.
    pub logw: Vec<T>,
    pub valid: Vec<bool>,
    pub nfe_total: u64,
}

impl<T: Real> WeightedSampleSet<T> {
    /// Computes energies and weights; a row is valid when `ok` holds and
    /// every derived value is finite.
    pub fn from_parts(x: Matrix<T>, logp_model: Vec<T>, ok: Vec<bool>, target: &dyn EnergyTarget<T>, nfe_total: u64) -> Self {
        let n = x.rows();
        assert_eq!(logp_model.len(), n);
        assert_eq!(ok.len(), n);
        let mut energy = Vec::with_capacity(n);
        let mut logw = Vec::with_capacity(n);
        let mut valid = Vec::with_capacity(n);
        for i in 0..n {
            let row = x.row(i);
            let finite_row = row.iter().all(|v| v.is_finite());
            let e = if finite_row { target.energy(row) } else { T::nan() };
            let lw = -e - logp_model[i];
            energy.push(e);
            logw.push(lw);
            valid.push(ok[i] && finite_row && lw.is_finite());
        }
        Self {
            x,
            logp_model,
            energy,
            logw,
            valid,
            nfe_total,
        }
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn valid_logw(&self) -> Vec<T> {
        self.logw.iter().zip(&self.valid).filter(|(_, v)| **v).map(|(w, _)| *w).collect()
    }

    pub fn valid_energy(&self) -> Vec<T> {
        self.energy.iter().zip(&self.valid).filter(|(_, v)| **v).map(|(e, _)| *e).collect()
    }

    pub fn valid_rows(&self) -> Vec<Vec<T>> {
        (0..self.len()).filter(|&i| self.valid[i]).map(|i| self.x.row(i).to_vec()).collect()
    }
}

/// Prior draw number `index` of run `seed`.
pub fn prior_draw<T: Real>(seed: u64, index: usize, dim: usize) -> Vec<T> {
    standard_normal(&mut stream(seed, "prior", index as u64), dim)
}

/// Draws `k` prior samples and pushes them through `grid` from 0 to 1,
/// accumulating `log p ← log p − log|det J|` per step.
pub fn sample_with_likelihood<T: Real>(
    map: &FlowMap<'_, T>,
    grid: &TimeGrid<T>,
    target: &dyn EnergyTarget<T>,
    k: usize,
    seed: u64,
) -> Result<WeightedSampleSet<T>> {
    let d = map.dim();
    let times = grid.ascending();
    let rows: Vec<Result<(Vec<T>, T, bool, usize)>> = (0..k)
        .into_par_iter()
        .map(|i| {
            let x0 = prior_draw::<T>(seed, i, d);
            let tr = transport(map, &times, &x0)?;
            let logp = std_normal_logpdf(&x0) - tr.logdet_sum();
            Ok((tr.x, logp, tr.invertible, tr.nfe))
        })
        .collect();
    let mut x = Matrix::zeros(k, d);
    let mut logp = Vec::with_capacity(k);
    let mut ok = Vec::with_capacity(k);
    let mut nfe = 0u64;
    for (i, r) in rows.into_iter().enumerate() {
        let (xi, lp, inv, n) = r?;
        x.row_mut(i).copy_from_slice(&xi);
        logp.push(lp);
        ok.push(inv);
        nfe += n as u64;
    }
    Ok(WeightedSampleSet::from_parts(x, logp, ok, target, nfe))
}

fn run<T: Real>(map: &FlowMap<'_, T>, times: &[T], x: &[T]) -> Result<Vec<T>> {
    let mut cur = x.to_vec();
    for w in times.windows(2) {
        cur = map.step(&cur, w[0], w[1])?;
    }
    Ok(cur)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RoundTripStats {
    pub mean: f64,
    pub max: f64,
}

fn stats<T: Real>(errors: &[T]) -> RoundTripStats {
    let n = errors.len().max(1) as f64;
    RoundTripStats {
        mean: errors.iter().map(|e| e.as_f64()).sum::<f64>() / n,
        max: errors.iter().map(|e| e.as_f64()).fold(0.0, f64::max),
    }
}

fn dist<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>().sqrt()
}

/// Per-sample `‖x₀ − x̂₀‖` after pushing prior draws 0→1 and back 1→0.
pub fn round_trip_errors<T: Real>(map: &FlowMap<'_, T>, grid: &TimeGrid<T>, k: usize, seed: u64) -> Result<Vec<T>> {
    let up = grid.ascending();
    let down = grid.times().to_vec();
    (0..k)
        .into_par_iter()
        .map(|i| {
            let x0 = prior_draw::<T>(seed, i, map.dim());
            let x1 = run(map, &up, &x0)?;
            let back = run(map, &down, &x1)?;
            Ok(dist(&x0, &back))
        })
        .collect()
}

pub fn round_trip_error<T: Real>(map: &FlowMap<'_, T>, grid: &TimeGrid<T>, k: usize, seed: u64) -> Result<RoundTripStats> {
    Ok(stats(&round_trip_errors(map, grid, k, seed)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Likelihoods<T> {
    pub logp: Vec<T>,
    pub invertible: Vec<bool>,
    /// Round trip data→prior→data on the queried points.
    pub round_trip: RoundTripStats,
    /// True when the round-trip mean exceeds the tolerance, i.e. the
    /// backward map is not a usable inverse.
    pub approximate: bool,
}

/// Default tolerance on the mean round trip for [`likelihood_of`].
pub const LIKELIHOOD_ROUND_TRIP_TOL: f64 = 1e-1;

/// Model log-density of data points: backward steps 1→0, adding
/// `log|det|` of each backward step, then the prior log-density.
pub fn likelihood_of<T: Real>(map: &FlowMap<'_, T>, grid: &TimeGrid<T>, points: &Matrix<T>, tol: f64) -> Result<Likelihoods<T>> {
    let down = grid.times().to_vec();
    let up = grid.ascending();
    let rows: Vec<Result<(T, bool, T)>> = (0..points.rows())
        .into_par_iter()
        .map(|i| {
            let x = points.row(i);
            let tr = transport(map, &down, x)?;
            let lp = std_normal_logpdf(&tr.x) + tr.logdet_sum();
            let again = run(map, &up, &tr.x)?;
            Ok((lp, tr.invertible, dist(x, &again)))
        })
        .collect();
    let mut logp = Vec::new();
    let mut invertible = Vec::new();
    let mut errs = Vec::new();
    for r in rows {
        let (lp, inv, e) = r?;
        logp.push(lp);
        invertible.push(inv);
        errs.push(e);
    }
    let round_trip = stats(&errs);
    Ok(Likelihoods {
        logp,
        invertible,
        approximate: !(round_trip.mean < tol),
        round_trip,
    })
}

/// Per-step `log|det J|` along one prior draw, for diagnostics.
pub fn step_logdets<T: Real>(map: &FlowMap<'_, T>, grid: &TimeGrid<T>, x0: &[T]) -> Result<Vec<(Vec<T>, T)>> {
    let mut cur = x0.to_vec();
    let mut out = Vec::new();
    for w in grid.ascending().windows(2) {
        let r = flow_step(map, &cur, w[0], w[1], false)?;
        out.push((cur.clone(), r.logdet));
        cur = r.x_next;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LogdetCheck {
    pub max_abs_err: f64,
    pub mean_abs_err: f64,
    pub compared: usize,
    pub non_invertible: usize,
}

/// Exact against finite-difference log-determinants: largest `|log|det J| − log|det J_fd||` over `k` prior draws and every
/// step of `grid`, where `J_fd` is the central-difference Jacobian with
/// step `h`. Steps that are not invertible are counted, not compared.
pub fn logdet_vs_finite_difference<T: Real>(map: &FlowMap<'_, T>, grid: &TimeGrid<T>, k: usize, seed: u64, h: f64) -> Result<LogdetCheck> {
    let d = map.dim();
    let times = grid.ascending();
    let per: Vec<Result<Vec<Option<f64>>>> = (0..k)
        .into_par_iter()
        .map(|i| {
            let mut cur = prior_draw::<T>(seed, i, d);
            let mut out = Vec::with_capacity(times.len() - 1);
            for w in times.windows(2) {
                let r = flow_step(map, &cur, w[0], w[1], false)?;
                let mut jac = Matrix::zeros(d, d);
                for j in 0..d {
                    let mut a = cur.clone();
                    let mut b = cur.clone();
                    a[j] += T::of(h);
                    b[j] -= T::of(h);
                    let (fa, fb) = (map.step(&a, w[0], w[1])?, map.step(&b, w[0], w[1])?);
                    for r in 0..d {
                        jac[(r, j)] = (fa[r] - fb[r]) / T::of(2.0 * h);
                    }
                }
                let fd = jac.log_abs_det();
                out.push(if r.invertible && !fd.is_singular() {
                    Some((r.logdet - fd.log_abs).as_f64().abs())
                } else {
                    None
                });
                cur = r.x_next;
            }
            Ok(out)
        })
        .collect();
    let mut check = LogdetCheck {
        max_abs_err: 0.0,
        mean_abs_err: 0.0,
        compared: 0,
        non_invertible: 0,
    };
    let mut total = 0.0;
    for row in per {
        for e in row? {
            match e {
                Some(e) => {
                    check.max_abs_err = check.max_abs_err.max(e);
                    total += e;
                    check.compared += 1;
                }
                None => check.non_invertible += 1,
            }
        }
    }
    check.mean_abs_err = total / check.compared.max(1) as f64;
    Ok(check)
}
