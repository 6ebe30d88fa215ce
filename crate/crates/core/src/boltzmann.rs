//! Self-normalized importance sampling and evaluation metrics.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment;
use crate::error::{invalid, Error, Result};
use crate::linalg::Matrix;
use crate::rng::stream;
use crate::sampler::WeightedSampleSet;
use crate::scalar::Real;
use crate::targets::{wrap_angle, EnergyTarget};

/// Largest point set handed to the assignment solver.
pub const TORUS_W2_MAX_POINTS: usize = 2048;

/// A map `o: R^d → R^m` whose expectation is estimated.
pub enum Observable<'a, T: Real> {
    Coordinates,
    Energy(&'a dyn EnergyTarget<T>),
    /// One-hot indicator of the target mode a point belongs to.
    ModeIndicator(&'a dyn EnergyTarget<T>),
    /// Angles wrapped to `[0, 2π)`.
    AngleVector,
    Custom {
        name: String,
        dim: usize,
        f: Box<dyn Fn(&[T]) -> Vec<f64> + Send + Sync + 'a>,
    },
}

impl<T: Real> Observable<'_, T> {
    pub fn name(&self) -> &str {
        match self {
            Self::Coordinates => "coordinates",
            Self::Energy(_) => "energy",
            Self::ModeIndicator(_) => "mode_indicator",
            Self::AngleVector => "angle_vector",
            Self::Custom { name, .. } => name,
        }
    }

    pub fn output_dim(&self, d: usize) -> usize {
        match self {
            Self::Coordinates | Self::AngleVector => d,
            Self::Energy(_) => 1,
            Self::ModeIndicator(t) => t.mode_weights().len(),
            Self::Custom { dim, .. } => *dim,
        }
    }

    pub fn eval(&self, x: &[T]) -> Vec<f64> {
        match self {
            Self::Coordinates => x.iter().map(|v| v.as_f64()).collect(),
            Self::Energy(t) => vec![t.energy(x).as_f64()],
            Self::ModeIndicator(t) => {
                let mut out = vec![0.0; t.mode_weights().len()];
                out[t.mode_of(x)] = 1.0;
                out
            }
            Self::AngleVector => x
                .iter()
                .map(|v| {
                    let two_pi = 2.0 * std::f64::consts::PI;
                    v.as_f64().rem_euclid(two_pi)
                })
                .collect(),
            Self::Custom { f, .. } => f(x),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnisEstimate {
    pub value: Vec<f64>,
    /// Delta-method standard error per component.
    pub std_err: Vec<f64>,
    pub ess: f64,
    pub n_valid: usize,
    pub logw_max: f64,
    /// `max − min` over valid log-weights.
    pub logw_spread: f64,
}

/// Max-shifted weights `exp(logw − max)`.
fn shifted_weights(logw: &[f64]) -> Result<(Vec<f64>, f64)> {
    let max = logw.iter().copied().filter(|v| v.is_finite()).fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::NoValidSamples);
    }
    let w = logw
        .iter()
        .map(|&l| if l.is_finite() { (l - max).exp() } else { 0.0 })
        .collect();
    Ok((w, max))
}

fn kish(w: &[f64]) -> f64 {
    let s: f64 = w.iter().sum();
    let s2: f64 = w.iter().map(|v| v * v).sum();
    s * s / (w.len() as f64 * s2)
}

/// Kish effective sample size fraction `(Σw)² / (N·Σw²)`. Non-finite
/// entries count toward `N` with zero weight.
pub fn ess<T: Real>(logw: &[T]) -> Result<f64> {
    let lw: Vec<f64> = logw.iter().map(|v| v.as_f64()).collect();
    let (w, _) = shifted_weights(&lw)?;
    Ok(kish(&w))
}

pub fn snis<T: Real>(o: &Observable<'_, T>, samples: &WeightedSampleSet<T>) -> Result<SnisEstimate> {
    let idx: Vec<usize> = (0..samples.len()).filter(|&i| samples.valid[i]).collect();
    if idx.is_empty() {
        return Err(Error::NoValidSamples);
    }
    let lw: Vec<f64> = idx.iter().map(|&i| samples.logw[i].as_f64()).collect();
    let (w, max) = shifted_weights(&lw)?;
    let total: f64 = w.iter().sum();
    let m = o.output_dim(samples.dim());
    let values: Vec<Vec<f64>> = idx.iter().map(|&i| o.eval(samples.x.row(i))).collect();
    let mut est = vec![0.0; m];
    for (wi, oi) in w.iter().zip(&values) {
        for (e, v) in est.iter_mut().zip(oi) {
            *e += wi * v;
        }
    }
    est.iter_mut().for_each(|e| *e /= total);
    let mut var = vec![0.0; m];
    for (wi, oi) in w.iter().zip(&values) {
        let wn = wi / total;
        for k in 0..m {
            var[k] += wn * wn * (oi[k] - est[k]).powi(2);
        }
    }
    let min = lw.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(SnisEstimate {
        value: est,
        std_err: var.into_iter().map(f64::sqrt).collect(),
        ess: kish(&w),
        n_valid: idx.len(),
        logw_max: max,
        logw_spread: max - min,
    })
}

/// Order statistics of `sorted` read off at `m` evenly spaced quantile
/// levels, linearly interpolated.
fn quantiles(sorted: &[f64], m: usize) -> Vec<f64> {
    let n = sorted.len();
    if n == m {
        return sorted.to_vec();
    }
    (0..m)
        .map(|k| {
            if m == 1 || n == 1 {
                return sorted[0];
            }
            let pos = k as f64 * (n - 1) as f64 / (m - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            let frac = pos - lo as f64;
            sorted[lo] + frac * (sorted[hi] - sorted[lo])
        })
        .collect()
}

fn sorted_f64<T: Real>(v: &[T]) -> Vec<f64> {
    let mut s: Vec<f64> = v.iter().map(|x| x.as_f64()).collect();
    s.sort_by(f64::total_cmp);
    s
}

/// One-dimensional 2-Wasserstein distance by rank coupling.
pub fn w2_energy<T: Real>(a: &[T], b: &[T]) -> f64 {
    assert!(!a.is_empty() && !b.is_empty(), "w2_energy needs nonempty sets");
    let m = a.len().max(b.len());
    let qa = quantiles(&sorted_f64(a), m);
    let qb = quantiles(&sorted_f64(b), m);
    let sq: f64 = qa.iter().zip(&qb).map(|(x, y)| (x - y).powi(2)).sum();
    (sq / m as f64).sqrt()
}

/// Uniform deterministic thinning to `m` rows.
fn thin(rows: &[Vec<f64>], m: usize) -> Vec<&[f64]> {
    let n = rows.len();
    (0..m).map(|k| rows[k * n / m].as_slice()).collect()
}

/// Squared wrapped distance on the torus.
pub fn torus_cost(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| wrap_angle(x - y).powi(2)).sum()
}

/// Torus 2-Wasserstein distance under the exact optimal coupling of
/// equal-size subsamples (at most [`TORUS_W2_MAX_POINTS`] each).
pub fn w2_torus<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<f64> {
    if a.cols() != b.cols() {
        return Err(Error::DimensionMismatch {
            context: "w2_torus",
            expected: a.cols(),
            got: b.cols(),
        });
    }
    let to_rows = |m: &Matrix<T>| -> Vec<Vec<f64>> {
        (0..m.rows()).map(|i| m.row(i).iter().map(|v| v.as_f64()).collect()).collect()
    };
    let ra = to_rows(a);
    let rb = to_rows(b);
    let n = ra.len().min(rb.len()).min(TORUS_W2_MAX_POINTS);
    if n == 0 {
        return Err(invalid("w2_torus needs nonempty sets"));
    }
    let pa = thin(&ra, n);
    let pb = thin(&rb, n);
    let cost: Vec<f64> = pa
        .par_iter()
        .flat_map_iter(|x| pb.iter().map(move |y| torus_cost(x, y)))
        .collect();
    let (_, total) = assignment::solve(&cost, n);
    Ok((total / n as f64).sqrt())
}

/// `k` indices drawn by systematic resampling on the SNIS weights of the
/// valid rows.
pub fn resample_indices<T: Real>(samples: &WeightedSampleSet<T>, k: usize, seed: u64) -> Result<Vec<usize>> {
    let idx: Vec<usize> = (0..samples.len()).filter(|&i| samples.valid[i]).collect();
    if idx.is_empty() {
        return Err(Error::NoValidSamples);
    }
    let lw: Vec<f64> = idx.iter().map(|&i| samples.logw[i].as_f64()).collect();
    let (w, _) = shifted_weights(&lw)?;
    let total: f64 = w.iter().sum();
    let offset: f64 = stream(seed, "resample", 0).gen_range(0.0..1.0);
    let mut out = Vec::with_capacity(k);
    let mut cum = 0.0;
    let mut j = 0;
    for r in 0..k {
        let level = (r as f64 + offset) / k as f64 * total;
        while j + 1 < w.len() && cum + w[j] <= level {
            cum += w[j];
            j += 1;
        }
        out.push(idx[j]);
    }
    Ok(out)
}

/// Metrics of one sample set against reference draws from the target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub ess: f64,
    /// Proposal energies against reference energies.
    pub w2_energy: Option<f64>,
    /// Resampled (SNIS) energies against reference energies.
    pub w2_energy_reweighted: Option<f64>,
    /// Only for toroidal targets.
    pub w2_torus: Option<f64>,
    pub mode_weights: Option<Vec<f64>>,
    pub n_valid: usize,
    pub n_total: usize,
    pub nfe_total: u64,
}

pub fn evaluate<T: Real>(
    samples: &WeightedSampleSet<T>,
    reference: &Matrix<T>,
    target: &dyn EnergyTarget<T>,
    seed: u64,
) -> Result<SampleMetrics> {
    let n_valid = samples.n_valid();
    let mut m = SampleMetrics {
        ess: 0.0,
        w2_energy: None,
        w2_energy_reweighted: None,
        w2_torus: None,
        mode_weights: None,
        n_valid,
        n_total: samples.len(),
        nfe_total: samples.nfe_total,
    };
    if n_valid == 0 {
        return Ok(m);
    }
    let ref_energy: Vec<T> = (0..reference.rows()).map(|i| target.energy(reference.row(i))).collect();
    m.ess = ess(&samples.valid_logw())?;
    m.w2_energy = Some(w2_energy(&samples.valid_energy(), &ref_energy));
    let picks = resample_indices(samples, n_valid, seed)?;
    let resampled: Vec<T> = picks.iter().map(|&i| samples.energy[i]).collect();
    m.w2_energy_reweighted = Some(w2_energy(&resampled, &ref_energy));
    m.mode_weights = Some(snis(&Observable::ModeIndicator(target), samples)?.value);
    if target.is_toroidal() {
        let rows = samples.valid_rows();
        let flat: Vec<T> = rows.concat();
        let valid = Matrix::from_vec(rows.len(), samples.dim(), flat);
        m.w2_torus = Some(w2_torus(&valid, reference)?);
    }
    Ok(m)
}
