//! Continuous-time baseline: the instantaneous field `v(x, τ) = u(x, τ, τ)`
//! integrated with its log-density, `d log p/dτ = −tr ∂v/∂x`.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Dual;
use crate::error::{invalid, Error, Result};
use crate::linalg::Matrix;
use crate::model::FlowMap;
use crate::rng::{rademacher, stream};
use crate::sampler::{prior_draw, std_normal_logpdf, WeightedSampleSet};
use crate::scalar::{Real, Scalar};
use crate::targets::EnergyTarget;

/// A time-dependent vector field on `R^d`, evaluable on reals and duals.
pub trait VelocityField<T: Real>: Sync {
    fn dim(&self) -> usize;
    fn eval<S: Scalar<T>>(&self, x: &[S], tau: S) -> Result<Vec<S>>;
}

impl<T: Real> VelocityField<T> for FlowMap<'_, T> {
    fn dim(&self) -> usize {
        FlowMap::dim(self)
    }

    fn eval<S: Scalar<T>>(&self, x: &[S], tau: S) -> Result<Vec<S>> {
        self.velocity(x, tau)
    }
}

/// `v(x, τ) = a·x`.
#[derive(Clone, Copy, Debug)]
pub struct LinearField {
    pub dim: usize,
    pub rate: f64,
}

impl<T: Real> VelocityField<T> for LinearField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval<S: Scalar<T>>(&self, x: &[S], _tau: S) -> Result<Vec<S>> {
        Ok(x.iter().map(|v| v.scale(T::of(self.rate))).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OdeConfig {
    pub atol: f64,
    pub rtol: f64,
    /// Accepted plus rejected steps.
    pub max_steps: usize,
    pub safety: f64,
    pub min_growth: f64,
    pub max_growth: f64,
}

impl Default for OdeConfig {
    fn default() -> Self {
        Self {
            atol: 1e-5,
            rtol: 1e-5,
            max_steps: 100_000,
            safety: 0.9,
            min_growth: 0.2,
            max_growth: 10.0,
        }
    }
}

impl OdeConfig {
    pub fn with_tol(tol: f64) -> Self {
        Self {
            atol: tol,
            rtol: tol,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.atol > 0.0 && self.rtol > 0.0) {
            return Err(invalid("tolerances must be positive"));
        }
        if !(self.safety > 0.0 && self.min_growth > 0.0 && self.min_growth <= 1.0 && self.max_growth >= 1.0) {
            return Err(invalid("step controller parameters out of range"));
        }
        if self.max_steps == 0 {
            return Err(invalid("max_steps must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OdeStats {
    pub accepted: u64,
    pub rejected: u64,
    /// Right-hand-side calls, rejected steps included.
    pub nfe: u64,
}

impl std::ops::AddAssign for OdeStats {
    fn add_assign(&mut self, o: Self) {
        self.accepted += o.accepted;
        self.rejected += o.rejected;
        self.nfe += o.nfe;
    }
}

const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
// fifth-order weights minus embedded fourth-order weights
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

/// Adaptive Dormand–Prince 4(5) from `span.0` to `span.1` (either
/// direction). The first trial step covers the whole span.
pub fn dopri45<T, F>(f: F, y0: &[T], span: (T, T), cfg: &OdeConfig) -> Result<(Vec<T>, OdeStats)>
where
    T: Real,
    F: FnMut(&[T], T) -> Result<Vec<T>>,
{
    dopri45_masked(f, y0, span, cfg, y0.len())
}

/// Hairer–Wanner starting step: an explicit Euler probe of size `h₀`
/// estimates the second derivative, capped by the span.
#[allow(clippy::too_many_arguments)]
fn initial_step<T, F>(f: &mut F, y: &[T], f0: &[T], t: T, total: T, cfg: &OdeConfig, controlled: usize, stats: &mut OdeStats) -> Result<T>
where
    T: Real,
    F: FnMut(&[T], T) -> Result<Vec<T>>,
{
    let span = total.abs();
    if controlled == 0 {
        return Ok(span);
    }
    let scale: Vec<T> = y[..controlled].iter().map(|v| T::of(cfg.atol) + T::of(cfg.rtol) * v.abs()).collect();
    let rms = |v: &[T]| (v.iter().zip(&scale).map(|(&a, &s)| (a / s) * (a / s)).sum::<T>() / T::of_usize(controlled)).sqrt();
    let d0 = rms(&y[..controlled]);
    let d1 = rms(&f0[..controlled]);
    let h0 = if d0 < T::of(1e-5) || d1 < T::of(1e-5) { T::of(1e-6) } else { T::of(0.01) * d0 / d1 }.min(span);
    let dir = total.signum();
    let y1: Vec<T> = y.iter().zip(f0).map(|(&a, &b)| a + dir * h0 * b).collect();
    let f1 = f(&y1, t + dir * h0)?;
    stats.nfe += 1;
    let diff: Vec<T> = f1[..controlled].iter().zip(&f0[..controlled]).map(|(&a, &b)| a - b).collect();
    let d2 = rms(&diff) / h0;
    let m = d1.max(d2);
    let h1 = if m <= T::of(1e-15) { (h0 * T::of(1e-3)).max(T::of(1e-6)) } else { (T::of(0.01) / m).powf(T::of(0.2)) };
    Ok((T::of(100.0) * h0).min(h1).min(span))
}

/// As [`dopri45`], with only the first `controlled` components entering
/// the error norm.
fn dopri45_masked<T, F>(mut f: F, y0: &[T], span: (T, T), cfg: &OdeConfig, controlled: usize) -> Result<(Vec<T>, OdeStats)>
where
    T: Real,
    F: FnMut(&[T], T) -> Result<Vec<T>>,
{
    cfg.validate()?;
    let (t0, t1) = span;
    let n = y0.len();
    let mut stats = OdeStats::default();
    let total = t1 - t0;
    if total == T::zero() {
        return Ok((y0.to_vec(), stats));
    }
    let dir = total.signum();
    let min_step = T::of(1e-14) * total.abs();
    let mut t = t0;
    let mut y = y0.to_vec();
    let mut k: Vec<Vec<T>> = vec![Vec::new(); 7];
    k[0] = f(&y, t)?;
    stats.nfe += 1;
    let mut h = initial_step(&mut f, &y, &k[0], t, total, cfg, controlled, &mut stats)?;
    let mut stage = vec![T::zero(); n];
    let fail = |tau: T, reason: String| Error::Integration { tau: tau.as_f64(), reason };
    while (t1 - t) * dir > T::zero() {
        if (stats.accepted + stats.rejected) as usize >= cfg.max_steps {
            return Err(fail(t, format!("exceeded {} steps", cfg.max_steps)));
        }
        if h < min_step {
            return Err(fail(t, "step size underflow".into()));
        }
        let remaining = (t1 - t).abs();
        let last = h >= remaining;
        let step = if last { remaining } else { h };
        let hs = step * dir;
        for i in 1..7 {
            for (j, st) in stage.iter_mut().enumerate() {
                let mut acc = T::zero();
                for (m, km) in k.iter().enumerate().take(i) {
                    acc += T::of(A[i][m]) * km[j];
                }
                *st = y[j] + hs * acc;
            }
            k[i] = f(&stage, t + T::of(C[i]) * hs)?;
            stats.nfe += 1;
        }
        // stage 7 is evaluated at the fifth-order solution
        let y_new = stage.clone();
        let mut sq = T::zero();
        for j in 0..controlled {
            let mut e = T::zero();
            for (m, km) in k.iter().enumerate() {
                e += T::of(E[m]) * km[j];
            }
            let scale = T::of(cfg.atol) + T::of(cfg.rtol) * y[j].abs().max(y_new[j].abs());
            let r = hs * e / scale;
            sq += r * r;
        }
        let err = if controlled > 0 { (sq / T::of_usize(controlled)).sqrt() } else { T::zero() };
        if !err.is_finite() || !y_new.iter().all(|v| v.is_finite()) {
            stats.rejected += 1;
            h = step * T::of(cfg.min_growth);
            continue;
        }
        let growth = if err == T::zero() {
            T::of(cfg.max_growth)
        } else {
            (T::of(cfg.safety) * err.powf(T::of(-0.2))).max(T::of(cfg.min_growth)).min(T::of(cfg.max_growth))
        };
        if err <= T::one() {
            stats.accepted += 1;
            t = if last { t1 } else { t + hs };
            y = y_new;
            k[0] = k[6].clone();
            h = step * growth;
        } else {
            stats.rejected += 1;
            h = step * growth.min(T::one());
        }
    }
    Ok((y, stats))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceMode {
    Exact,
    Hutchinson,
}

impl TraceMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Exact => "exact",
            Self::Hutchinson => "hutchinson",
        }
    }
}

/// Divergence of `field` at `(x, τ)` with the network evaluations spent.
/// Exact: `d` unit-vector JVPs. Hutchinson: one JVP with a Rademacher
/// probe drawn from `rng`.
pub fn divergence<T: Real, V: VelocityField<T>, R: Rng + ?Sized>(
    field: &V,
    x: &[T],
    tau: T,
    mode: TraceMode,
    rng: &mut R,
) -> Result<(T, usize)> {
    let d = x.len();
    let jvp = |dir: &[T]| -> Result<Vec<T>> {
        let out = field.eval(&Dual::seed(x, dir), Dual::constant(tau))?;
        Ok(out.into_iter().map(|o| o.tangent).collect())
    };
    match mode {
        TraceMode::Exact => {
            let mut e = vec![T::zero(); d];
            let mut tr = T::zero();
            for j in 0..d {
                e[j] = T::one();
                tr += jvp(&e)?[j];
                e[j] = T::zero();
            }
            Ok((tr, d))
        }
        TraceMode::Hutchinson => {
            let eps = rademacher::<T, _>(rng, d);
            let je = jvp(&eps)?;
            Ok((eps.iter().zip(&je).map(|(&a, &b)| a * b).sum(), 1))
        }
    }
}

/// Single-probe Hutchinson estimate `εᵀAε` of `tr A`.
pub fn hutchinson_probe<T: Real, R: Rng + ?Sized>(a: &Matrix<T>, rng: &mut R) -> T {
    let eps = rademacher::<T, _>(rng, a.cols());
    let ae = a.matvec(&eps);
    eps.iter().zip(&ae).map(|(&x, &y)| x * y).sum()
}

/// One CNF trajectory: final state, `log p` at τ = 1, solver statistics.
#[derive(Clone, Debug)]
pub struct CnfTrajectory<T> {
    pub x: Vec<T>,
    pub logp: T,
    pub stats: OdeStats,
}

/// Integrates `[x, log p]` from τ = 0 to 1 starting at `x0`. Network
/// evaluations are counted in `stats.nfe`: one value pass plus the trace
/// passes per right-hand-side call. Under Hutchinson only `x` enters the
/// error norm, since a fresh probe per stage makes the `log p` error
/// estimate pure noise.
pub fn integrate_with_logp<T: Real, V: VelocityField<T>, R: Rng + ?Sized>(
    field: &V,
    x0: &[T],
    cfg: &OdeConfig,
    mode: TraceMode,
    rng: &mut R,
) -> Result<CnfTrajectory<T>> {
    integrate_inner(field, x0, cfg, mode, rng, mode == TraceMode::Exact)
}

fn integrate_inner<T: Real, V: VelocityField<T>, R: Rng + ?Sized>(
    field: &V,
    x0: &[T],
    cfg: &OdeConfig,
    mode: TraceMode,
    rng: &mut R,
    control_logp: bool,
) -> Result<CnfTrajectory<T>> {
    let d = x0.len();
    let mut evals = 0u64;
    let mut y0 = x0.to_vec();
    y0.push(std_normal_logpdf(x0));
    let rhs = |y: &[T], tau: T| -> Result<Vec<T>> {
        let x = &y[..d];
        let mut out = field.eval(x, tau)?;
        let (tr, passes) = divergence(field, x, tau, mode, rng)?;
        evals += 1 + passes as u64;
        out.push(-tr);
        Ok(out)
    };
    let controlled = if control_logp { d + 1 } else { d };
    let (y, mut stats) = dopri45_masked(rhs, &y0, (T::zero(), T::one()), cfg, controlled)?;
    stats.nfe = evals;
    Ok(CnfTrajectory {
        x: y[..d].to_vec(),
        logp: y[d],
        stats,
    })
}

/// Samples with solver totals, for the output sidecar.
#[derive(Clone, Debug)]
pub struct CnfRun<T> {
    pub samples: WeightedSampleSet<T>,
    pub stats: OdeStats,
}

fn collect<T: Real>(
    rows: Vec<Result<(Vec<T>, T, OdeStats)>>,
    d: usize,
    target: &dyn EnergyTarget<T>,
) -> Result<CnfRun<T>> {
    let k = rows.len();
    let mut x = Matrix::zeros(k, d);
    let mut logp = Vec::with_capacity(k);
    let mut stats = OdeStats::default();
    for (i, r) in rows.into_iter().enumerate() {
        let (xi, lp, st) = r?;
        x.row_mut(i).copy_from_slice(&xi);
        logp.push(lp);
        stats += st;
    }
    let samples = WeightedSampleSet::from_parts(x, logp, vec![true; k], target, stats.nfe);
    Ok(CnfRun { samples, stats })
}

/// Draws the same prior points as the flow-map sampler for `seed` and
/// integrates each with Dopri5. Hutchinson probes come from per-sample
/// streams.
pub fn cnf_sample_and_likelihood<T: Real, V: VelocityField<T>>(
    field: &V,
    target: &dyn EnergyTarget<T>,
    k: usize,
    seed: u64,
    cfg: &OdeConfig,
    mode: TraceMode,
) -> Result<CnfRun<T>> {
    let d = field.dim();
    let rows = (0..k)
        .into_par_iter()
        .map(|i| {
            let x0 = prior_draw::<T>(seed, i, d);
            let mut rng = stream(seed, "hutchinson", i as u64);
            let tr = integrate_with_logp(field, &x0, cfg, mode, &mut rng)?;
            Ok((tr.x, tr.logp, tr.stats))
        })
        .collect();
    collect(rows, d, target)
}

/// Fixed-step forward Euler on `[x, log p]` with exact traces:
/// `log p ← log p − Δτ·tr ∂v/∂x`, a first-order stand-in for the exact
/// per-step log-determinant.
pub fn euler_trajectory<T: Real, V: VelocityField<T>>(field: &V, x0: &[T], n_steps: usize) -> Result<CnfTrajectory<T>> {
    if n_steps == 0 {
        return Err(invalid("euler needs at least one step"));
    }
    let mut x = x0.to_vec();
    let mut logp = std_normal_logpdf(x0);
    let dt = T::one() / T::of_usize(n_steps);
    let mut nfe = 0u64;
    let mut unused = stream(0, "unused", 0);
    for i in 0..n_steps {
        let tau = T::of_usize(i) * dt;
        let v = field.eval(&x, tau)?;
        let (tr, passes) = divergence(field, &x, tau, TraceMode::Exact, &mut unused)?;
        nfe += 1 + passes as u64;
        logp -= dt * tr;
        for (xi, vi) in x.iter_mut().zip(v) {
            *xi += dt * vi;
        }
    }
    Ok(CnfTrajectory {
        x,
        logp,
        stats: OdeStats {
            accepted: n_steps as u64,
            rejected: 0,
            nfe,
        },
    })
}

pub fn euler_sample_and_likelihood<T: Real, V: VelocityField<T>>(
    field: &V,
    target: &dyn EnergyTarget<T>,
    n_steps: usize,
    k: usize,
    seed: u64,
) -> Result<CnfRun<T>> {
    let d = field.dim();
    let rows = (0..k)
        .into_par_iter()
        .map(|i| {
            let x0 = prior_draw::<T>(seed, i, d);
            let tr = euler_trajectory(field, &x0, n_steps)?;
            Ok((tr.x, tr.logp, tr.stats))
        })
        .collect();
    collect(rows, d, target)
}
