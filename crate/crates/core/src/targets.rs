//! Analytic energy targets `p(x) ∝ exp(−E(x))` with exact samplers.

use std::f64::consts::PI;

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::Matrix;
use crate::scalar::Real;

/// An energy function together with an exact sampler and, where the
/// normalizer is known, the exact log-density.
pub trait EnergyTarget<T: Real>: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn energy(&self, x: &[T]) -> T;
    /// `log p(x)`; `None` when the partition function is unknown.
    fn exact_logp(&self, x: &[T]) -> Option<T>;
    fn is_toroidal(&self) -> bool {
        false
    }
    /// True mode weights, in the order [`EnergyTarget::mode_of`] reports.
    fn mode_weights(&self) -> Vec<f64>;
    fn mode_of(&self, x: &[T]) -> usize;
    /// Exact draws with the mode weights overridden by `weights`.
    fn sample_with_mode_weights(&self, rng: &mut dyn RngCore, n: usize, weights: &[f64]) -> Result<Matrix<T>>;

    fn exact_sample(&self, rng: &mut dyn RngCore, n: usize) -> Result<Matrix<T>> {
        self.sample_with_mode_weights(rng, n, &self.mode_weights())
    }
}

fn normalized_weights(weights: &[f64], modes: usize) -> Result<Vec<f64>> {
    if weights.len() != modes {
        return Err(invalid(format!("expected {modes} mode weights, got {}", weights.len())));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(invalid("mode weights must be finite and non-negative"));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(invalid("mode weights sum to zero"));
    }
    Ok(weights.iter().map(|w| w / total).collect())
}

fn pick_mode(rng: &mut dyn RngCore, weights: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (k, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc && *w > 0.0 {
            return k;
        }
    }
    weights.iter().rposition(|w| *w > 0.0).expect("some positive weight")
}

fn log_sum_exp<T: Real>(terms: impl Iterator<Item = T>) -> T {
    let v: Vec<T> = terms.collect();
    let m = v.iter().copied().fold(T::neg_infinity(), T::max);
    if m == T::neg_infinity() {
        return m;
    }
    m + v.iter().map(|&t| (t - m).exp()).sum::<T>().ln()
}

/// Isotropic Gaussian mixture `Σₖ πₖ N(x; μₖ, σ²I)`.
#[derive(Clone, Debug)]
pub struct Gmm<T> {
    weights: Vec<f64>,
    means: Vec<Vec<T>>,
    sigma: T,
    dim: usize,
}

impl<T: Real> Gmm<T> {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, sigma: f64) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() {
            return Err(invalid("mixture needs one weight per mean"));
        }
        if weights.iter().any(|w| !(*w > 0.0)) || ((weights.iter().sum::<f64>() - 1.0).abs() > 1e-9) {
            return Err(invalid("mixture weights must be positive and sum to 1"));
        }
        let dim = means[0].len();
        if dim == 0 || means.iter().any(|m| m.len() != dim) {
            return Err(invalid("mixture means must share a positive dimension"));
        }
        if !(sigma > 0.0) {
            return Err(invalid("mixture scale must be positive"));
        }
        Ok(Self {
            weights,
            means: means.into_iter().map(|m| m.into_iter().map(T::of).collect()).collect(),
            sigma: T::of(sigma),
            dim,
        })
    }

    /// Two modes at `(∓2.5, 0)` with weights `(0.7, 0.3)` and `σ = 0.5`.
    pub fn default_2d() -> Self {
        Self::new(vec![0.7, 0.3], vec![vec![-2.5, 0.0], vec![2.5, 0.0]], 0.5).expect("valid default")
    }

    pub fn means(&self) -> &[Vec<T>] {
        &self.means
    }

    pub fn sigma(&self) -> T {
        self.sigma
    }

    fn component_logpdf(&self, k: usize, x: &[T]) -> T {
        let s2 = self.sigma * self.sigma;
        let sq: T = x.iter().zip(&self.means[k]).map(|(&a, &b)| (a - b) * (a - b)).sum();
        let norm = T::of(0.5 * self.dim as f64) * (T::of(2.0 * PI) * s2).ln();
        -sq / (T::of(2.0) * s2) - norm
    }
}

impl<T: Real> EnergyTarget<T> for Gmm<T> {
    fn name(&self) -> &str {
        "gmm"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn energy(&self, x: &[T]) -> T {
        -log_sum_exp((0..self.weights.len()).map(|k| T::of(self.weights[k].ln()) + self.component_logpdf(k, x)))
    }

    fn exact_logp(&self, x: &[T]) -> Option<T> {
        Some(-self.energy(x))
    }

    fn mode_weights(&self) -> Vec<f64> {
        self.weights.clone()
    }

    fn mode_of(&self, x: &[T]) -> usize {
        let d2 = |m: &Vec<T>| x.iter().zip(m).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>();
        (0..self.means.len())
            .min_by(|&a, &b| d2(&self.means[a]).partial_cmp(&d2(&self.means[b])).expect("finite"))
            .expect("non-empty mixture")
    }

    fn sample_with_mode_weights(&self, rng: &mut dyn RngCore, n: usize, weights: &[f64]) -> Result<Matrix<T>> {
        let w = normalized_weights(weights, self.weights.len())?;
        let mut out = Matrix::zeros(n, self.dim);
        for i in 0..n {
            let k = pick_mode(rng, &w);
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                let z: f64 = rng.sample(StandardNormal);
                *v = self.means[k][j] + self.sigma * T::of(z);
            }
        }
        Ok(out)
    }
}

/// `E(x) = b (x₀² − 1)² + ½ Σ_{i>0} xᵢ²`.
///
/// The first coordinate is drawn by rejection from a Gaussian envelope; the
/// rest are exactly standard normal.
#[derive(Clone, Debug)]
pub struct DoubleWell<T> {
    dim: usize,
    barrier: T,
    envelope_sigma: f64,
    log_bound: f64,
}

impl<T: Real> DoubleWell<T> {
    pub fn new(dim: usize, barrier: f64) -> Result<Self> {
        if dim == 0 || dim > 16 {
            return Err(invalid("double well dimension must be in 1..=16"));
        }
        if !(barrier > 0.0) {
            return Err(invalid("double well barrier must be positive"));
        }
        let sigma = 1.0;
        // sup_x exp(−b(x²−1)² + x²/2σ²) is attained at x² = 1 + 1/(4bσ²).
        let y = 1.0 + 1.0 / (4.0 * barrier * sigma * sigma);
        let log_bound = -barrier * (y - 1.0).powi(2) + y / (2.0 * sigma * sigma);
        Ok(Self {
            dim,
            barrier: T::of(barrier),
            envelope_sigma: sigma,
            log_bound,
        })
    }

    pub fn barrier(&self) -> T {
        self.barrier
    }

    /// Draws `|x₀|` from the marginal `∝ exp(−b(x₀²−1)²)`.
    fn sample_abs_x0(&self, rng: &mut dyn RngCore) -> f64 {
        let b = self.barrier.as_f64();
        let s = self.envelope_sigma;
        loop {
            let z: f64 = rng.sample(StandardNormal);
            let x = s * z;
            let log_accept = -b * (x * x - 1.0).powi(2) + x * x / (2.0 * s * s) - self.log_bound;
            let u: f64 = rng.gen();
            if u.ln() < log_accept {
                return x.abs();
            }
        }
    }
}

impl<T: Real> EnergyTarget<T> for DoubleWell<T> {
    fn name(&self) -> &str {
        "double_well"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn energy(&self, x: &[T]) -> T {
        let a = x[0] * x[0] - T::one();
        let rest: T = x[1..].iter().map(|&v| v * v).sum();
        self.barrier * a * a + T::of(0.5) * rest
    }

    fn exact_logp(&self, _x: &[T]) -> Option<T> {
        None
    }

    fn mode_weights(&self) -> Vec<f64> {
        vec![0.5, 0.5]
    }

    /// Mode 0 is the left well (`x₀ < 0`).
    fn mode_of(&self, x: &[T]) -> usize {
        usize::from(x[0] >= T::zero())
    }

    fn sample_with_mode_weights(&self, rng: &mut dyn RngCore, n: usize, weights: &[f64]) -> Result<Matrix<T>> {
        let w = normalized_weights(weights, 2)?;
        let mut out = Matrix::zeros(n, self.dim);
        for i in 0..n {
            let k = pick_mode(rng, &w);
            let a = self.sample_abs_x0(rng);
            let row = out.row_mut(i);
            row[0] = T::of(if k == 0 { -a } else { a });
            for v in &mut row[1..] {
                *v = T::of(rng.sample::<f64, _>(StandardNormal));
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VonMisesMode {
    pub weight: f64,
    pub loc: Vec<f64>,
    pub concentration: f64,
}

/// Mixture of products of von Mises densities on `[0, 2π)^d`.
#[derive(Clone, Debug)]
pub struct VonMisesTorus<T> {
    dim: usize,
    modes: Vec<VonMisesMode>,
    log_norm: Vec<T>,
}

/// `log I₀(κ)` by summing the power series in log space.
pub fn log_bessel_i0(kappa: f64) -> f64 {
    if kappa == 0.0 {
        return 0.0;
    }
    let q = 2.0 * (0.5 * kappa).ln();
    let mut log_term = 0.0f64;
    let mut acc = 0.0f64; // log of the running sum
    let mut k = 1.0f64;
    loop {
        log_term += q - 2.0 * k.ln();
        let hi = acc.max(log_term);
        acc = hi + ((acc - hi).exp() + (log_term - hi).exp()).ln();
        if log_term < acc - 40.0 && k > 0.5 * kappa {
            return acc;
        }
        k += 1.0;
    }
}

/// Best–Fisher rejection sampler for a centred von Mises angle in `(−π, π]`.
fn sample_von_mises(rng: &mut dyn RngCore, kappa: f64) -> f64 {
    if kappa < 1e-8 {
        return rng.gen_range(-PI..PI);
    }
    let tau = 1.0 + (1.0 + 4.0 * kappa * kappa).sqrt();
    let rho = (tau - (2.0 * tau).sqrt()) / (2.0 * kappa);
    let r = (1.0 + rho * rho) / (2.0 * rho);
    loop {
        let u1: f64 = rng.gen();
        let u2: f64 = rng.gen();
        let u3: f64 = rng.gen();
        let z = (PI * u1).cos();
        let f = (1.0 + r * z) / (r + z);
        let c = kappa * (r - f);
        if c * (2.0 - c) - u2 > 0.0 || (c / u2).ln() + 1.0 - c >= 0.0 {
            let theta = f.clamp(-1.0, 1.0).acos();
            return if u3 > 0.5 { theta } else { -theta };
        }
    }
}

/// Wraps an angle difference into `[−π, π)`.
pub fn wrap_angle<T: Real>(d: T) -> T {
    let two_pi = T::of(2.0 * PI);
    let shifted = (d + T::PI()) % two_pi;
    let shifted = if shifted < T::zero() { shifted + two_pi } else { shifted };
    shifted - T::PI()
}

impl<T: Real> VonMisesTorus<T> {
    pub fn new(dim: usize, modes: Vec<VonMisesMode>) -> Result<Self> {
        if dim == 0 || dim > 16 || modes.is_empty() {
            return Err(invalid("torus target needs 1..=16 dims and at least one mode"));
        }
        if modes.iter().any(|m| m.loc.len() != dim || !(m.concentration >= 0.0) || !(m.weight > 0.0)) {
            return Err(invalid("each von Mises mode needs dim locations, κ ≥ 0, weight > 0"));
        }
        let total: f64 = modes.iter().map(|m| m.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(invalid("von Mises mode weights must sum to 1"));
        }
        let log_norm = modes
            .iter()
            .map(|m| T::of(dim as f64 * ((2.0 * PI).ln() + log_bessel_i0(m.concentration))))
            .collect();
        Ok(Self { dim, modes, log_norm })
    }

    /// Two modes on the 2-torus at `(π/2, π/2)` and `(3π/2, 3π/2)`.
    pub fn default_2d() -> Self {
        Self::new(
            2,
            vec![
                VonMisesMode {
                    weight: 0.6,
                    loc: vec![0.5 * PI, 0.5 * PI],
                    concentration: 4.0,
                },
                VonMisesMode {
                    weight: 0.4,
                    loc: vec![1.5 * PI, 1.5 * PI],
                    concentration: 4.0,
                },
            ],
        )
        .expect("valid default")
    }

    pub fn modes(&self) -> &[VonMisesMode] {
        &self.modes
    }
}

impl<T: Real> EnergyTarget<T> for VonMisesTorus<T> {
    fn name(&self) -> &str {
        "vonmises_torus"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn energy(&self, x: &[T]) -> T {
        -log_sum_exp(self.modes.iter().zip(&self.log_norm).map(|(m, &ln)| {
            let kappa = T::of(m.concentration);
            let s: T = x.iter().zip(&m.loc).map(|(&a, &mu)| kappa * (a - T::of(mu)).cos()).sum();
            T::of(m.weight.ln()) + s - ln
        }))
    }

    fn exact_logp(&self, x: &[T]) -> Option<T> {
        Some(-self.energy(x))
    }

    fn is_toroidal(&self) -> bool {
        true
    }

    fn mode_weights(&self) -> Vec<f64> {
        self.modes.iter().map(|m| m.weight).collect()
    }

    fn mode_of(&self, x: &[T]) -> usize {
        let dist = |m: &VonMisesMode| {
            x.iter()
                .zip(&m.loc)
                .map(|(&a, &mu)| wrap_angle(a - T::of(mu)).powi(2))
                .sum::<T>()
        };
        (0..self.modes.len())
            .min_by(|&a, &b| dist(&self.modes[a]).partial_cmp(&dist(&self.modes[b])).expect("finite"))
            .expect("non-empty")
    }

    fn sample_with_mode_weights(&self, rng: &mut dyn RngCore, n: usize, weights: &[f64]) -> Result<Matrix<T>> {
        let w = normalized_weights(weights, self.modes.len())?;
        let mut out = Matrix::zeros(n, self.dim);
        for i in 0..n {
            let m = &self.modes[pick_mode(rng, &w)];
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                let a = (m.loc[j] + sample_von_mises(rng, m.concentration)).rem_euclid(2.0 * PI);
                *v = T::of(a);
            }
        }
        Ok(out)
    }
}

/// Serializable target description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetSpec {
    Gmm {
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        sigma: f64,
    },
    DoubleWell {
        dim: usize,
        barrier: f64,
    },
    VonmisesTorus {
        dim: usize,
        modes: Vec<VonMisesMode>,
    },
}

impl TargetSpec {
    pub fn default_gmm() -> Self {
        TargetSpec::Gmm {
            weights: vec![0.7, 0.3],
            means: vec![vec![-2.5, 0.0], vec![2.5, 0.0]],
            sigma: 0.5,
        }
    }

    pub fn build<T: Real>(&self) -> Result<Box<dyn EnergyTarget<T>>> {
        Ok(match self {
            TargetSpec::Gmm { weights, means, sigma } => Box::new(Gmm::new(weights.clone(), means.clone(), *sigma)?),
            TargetSpec::DoubleWell { dim, barrier } => Box::new(DoubleWell::new(*dim, *barrier)?),
            TargetSpec::VonmisesTorus { dim, modes } => Box::new(VonMisesTorus::new(*dim, modes.clone())?),
        })
    }
}

/// Exact draws with overridden mode weights: a deliberately biased
/// training set.
pub fn biased_training_set<T: Real>(
    target: &dyn EnergyTarget<T>,
    mode_weights: &[f64],
    n: usize,
    rng: &mut dyn RngCore,
) -> Result<Matrix<T>> {
    target.sample_with_mode_weights(rng, n, mode_weights)
}
