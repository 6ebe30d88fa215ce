//! Inference time grids running from `t₀ = 1` down to `t_N = 0`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Geometric,
    Cosine,
    Chebyshev,
    Edm,
}

impl ScheduleKind {
    pub const ALL: [ScheduleKind; 5] = [
        ScheduleKind::Linear,
        ScheduleKind::Geometric,
        ScheduleKind::Cosine,
        ScheduleKind::Chebyshev,
        ScheduleKind::Edm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::Geometric => "geometric",
            ScheduleKind::Cosine => "cosine",
            ScheduleKind::Chebyshev => "chebyshev",
            ScheduleKind::Edm => "edm",
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ScheduleKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| invalid(format!("unknown schedule `{s}`")))
    }
}

fn default_alpha() -> f64 {
    2.0
}
fn default_rho() -> f64 {
    7.0
}
fn default_sigma_min() -> f64 {
    1e-3
}
fn default_sigma_max() -> f64 {
    1.0
}

/// Serializable grid request.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub schedule: ScheduleKind,
    pub steps: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default = "default_sigma_min")]
    pub sigma_min: f64,
    #[serde(default = "default_sigma_max")]
    pub sigma_max: f64,
}

impl GridSpec {
    pub fn new(schedule: ScheduleKind, steps: usize) -> Self {
        Self {
            schedule,
            steps,
            alpha: default_alpha(),
            rho: default_rho(),
            sigma_min: default_sigma_min(),
            sigma_max: default_sigma_max(),
        }
    }

    pub fn build<T: Real>(&self) -> Result<TimeGrid<T>> {
        match self.schedule {
            ScheduleKind::Linear => linear_grid(self.steps),
            ScheduleKind::Geometric => geometric_grid(self.steps, self.alpha),
            ScheduleKind::Cosine => cosine_grid(self.steps),
            ScheduleKind::Chebyshev => chebyshev_grid(self.steps),
            ScheduleKind::Edm => edm_grid(self.steps, self.rho, self.sigma_min, self.sigma_max),
        }
    }
}

/// Strictly decreasing times `1 = t₀ > … > t_N = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeGrid<T> {
    times: Vec<T>,
    kind: ScheduleKind,
}

impl<T: Real> TimeGrid<T> {
    fn checked(kind: ScheduleKind, times: Vec<T>) -> Result<Self> {
        let n = times.len();
        if n < 2 || times[0] != T::one() || times[n - 1] != T::zero() {
            return Err(invalid(format!("{kind} grid must run from 1 to 0")));
        }
        if times.windows(2).any(|w| !(w[0] > w[1])) {
            return Err(invalid(format!("{kind} grid is not strictly decreasing")));
        }
        Ok(Self { times, kind })
    }

    /// An arbitrary grid; validated like the built-in ones.
    pub fn custom(times: Vec<T>) -> Result<Self> {
        Self::checked(ScheduleKind::Linear, times)
    }

    pub fn times(&self) -> &[T] {
        &self.times
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    /// Times in the prior→data direction, `0 → 1`.
    pub fn ascending(&self) -> Vec<T> {
        self.times.iter().rev().copied().collect()
    }
}

fn need_steps(n: usize) -> Result<()> {
    if n < 1 {
        return Err(invalid("a grid needs at least one step"));
    }
    Ok(())
}

fn finish<T: Real>(kind: ScheduleKind, mut times: Vec<T>) -> Result<TimeGrid<T>> {
    let n = times.len() - 1;
    times[0] = T::one();
    times[n] = T::zero();
    TimeGrid::checked(kind, times)
}

/// `tᵢ = 1 − i/N`.
pub fn linear_grid<T: Real>(n: usize) -> Result<TimeGrid<T>> {
    need_steps(n)?;
    let nn = T::of_usize(n);
    let times = (0..=n).map(|i| T::one() - T::of_usize(i) / nn).collect();
    TimeGrid::checked(ScheduleKind::Linear, times)
}

/// `tᵢ = (α^{N−i} − 1)/(α^N − 1)`.
pub fn geometric_grid<T: Real>(n: usize, alpha: f64) -> Result<TimeGrid<T>> {
    need_steps(n)?;
    if !(alpha > 1.0) {
        return Err(invalid(format!("geometric base must exceed 1, got {alpha}")));
    }
    let a = T::of(alpha);
    let denom = a.powi(n as i32) - T::one();
    let times = (0..=n)
        .map(|i| (a.powi((n - i) as i32) - T::one()) / denom)
        .collect();
    TimeGrid::checked(ScheduleKind::Geometric, times)
}

/// `tᵢ = cos²(π i / 2N)`, `t_N = 0`.
pub fn cosine_grid<T: Real>(n: usize) -> Result<TimeGrid<T>> {
    need_steps(n)?;
    let times = (0..=n)
        .map(|i| {
            let c = (T::FRAC_PI_2() * T::of_usize(i) / T::of_usize(n)).cos();
            c * c
        })
        .collect();
    finish(ScheduleKind::Cosine, times)
}

/// Chebyshev nodes `tᵢ = ½(cos(π(i + ½)/(N + 1)) + 1)`, endpoints clamped
/// to 1 and 0.
pub fn chebyshev_grid<T: Real>(n: usize) -> Result<TimeGrid<T>> {
    need_steps(n)?;
    let half = T::of(0.5);
    let times = (0..=n)
        .map(|i| half * ((T::PI() * (T::of_usize(i) + half) / T::of_usize(n + 1)).cos() + T::one()))
        .collect();
    finish(ScheduleKind::Chebyshev, times)
}

/// Power-law noise levels mapped to `[0, 1]`:
/// `σᵢ = (σ_max^{1/ρ} + i/N (σ_min^{1/ρ} − σ_max^{1/ρ}))^ρ`,
/// `tᵢ = (σᵢ − σ_min)/(σ_max − σ_min)`, `t_N = 0`.
pub fn edm_grid<T: Real>(n: usize, rho: f64, sigma_min: f64, sigma_max: f64) -> Result<TimeGrid<T>> {
    need_steps(n)?;
    if !(rho > 0.0) || !(sigma_min > 0.0) || !(sigma_max > sigma_min) {
        return Err(invalid("edm grid needs rho > 0 and 0 < sigma_min < sigma_max"));
    }
    let times = edm_sigmas::<T>(n, rho, sigma_min, sigma_max)
        .into_iter()
        .map(|s| (s - T::of(sigma_min)) / (T::of(sigma_max) - T::of(sigma_min)))
        .collect();
    finish(ScheduleKind::Edm, times)
}

pub fn edm_sigmas<T: Real>(n: usize, rho: f64, sigma_min: f64, sigma_max: f64) -> Vec<T> {
    let inv = T::one() / T::of(rho);
    let hi = T::of(sigma_max).powf(inv);
    let lo = T::of(sigma_min).powf(inv);
    (0..=n)
        .map(|i| (hi + T::of_usize(i) / T::of_usize(n) * (lo - hi)).powf(T::of(rho)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn linear_values() {
        assert_eq!(linear_grid::<f64>(4).unwrap().times(), &[1.0, 0.75, 0.5, 0.25, 0.0]);
        assert_eq!(linear_grid::<f64>(1).unwrap().times(), &[1.0, 0.0]);
        assert_eq!(linear_grid::<f64>(2).unwrap().times(), &[1.0, 0.5, 0.0]);
        assert!(linear_grid::<f64>(0).is_err());
    }

    #[test]
    fn geometric_values() {
        close(geometric_grid::<f64>(2, 2.0).unwrap().times(), &[1.0, 1.0 / 3.0, 0.0], 1e-12);
        close(
            geometric_grid::<f64>(3, 2.0).unwrap().times(),
            &[1.0, 3.0 / 7.0, 1.0 / 7.0, 0.0],
            1e-12,
        );
        let g = geometric_grid::<f64>(9, 2.0).unwrap();
        assert_eq!(g.times()[0], 1.0);
        assert_eq!(g.times()[9], 0.0);
        assert!(geometric_grid::<f64>(3, 1.0).is_err());
    }

    #[test]
    fn cosine_values() {
        close(cosine_grid::<f64>(2).unwrap().times(), &[1.0, 0.5, 0.0], 1e-15);
        assert_eq!(cosine_grid::<f64>(1).unwrap().times(), &[1.0, 0.0]);
    }

    #[test]
    fn chebyshev_values() {
        let r3 = 3f64.sqrt() / 2.0;
        // Raw nodes for N = 2 are [½(√3/2+1), ½, ½(1−√3/2)]; only the
        // interior survives clamping.
        let g = chebyshev_grid::<f64>(2).unwrap();
        close(g.times(), &[1.0, 0.5, 0.0], 1e-15);
        assert!((0.5 * (r3 + 1.0) - 0.9330127018922193).abs() < 1e-15);
        assert_eq!(chebyshev_grid::<f64>(1).unwrap().times(), &[1.0, 0.0]);
    }

    #[test]
    fn edm_matches_arbitrary_precision_oracle() {
        // 50-digit evaluation of the power-law sigmas, frozen.
        let oracle = [
            1.0,
            0.302326702281086671652863,
            0.07084216518973120475420293,
            0.01069117729334864596140812,
            0.0,
        ];
        close(edm_grid::<f64>(4, 7.0, 1e-3, 1.0).unwrap().times(), &oracle, 1e-12);
    }

    #[test]
    fn edm_rho_one_is_linear_in_sigma() {
        let s: Vec<f64> = edm_sigmas(8, 1.0, 1e-3, 1.0);
        let diffs: Vec<f64> = s.windows(2).map(|w| w[0] - w[1]).collect();
        for d in &diffs {
            assert!((d - diffs[0]).abs() < 1e-14);
        }
    }

    #[test]
    fn every_schedule_is_valid_up_to_64_steps() {
        for kind in ScheduleKind::ALL {
            for n in 1..=64 {
                let g: TimeGrid<f64> = GridSpec::new(kind, n).build().unwrap();
                assert_eq!(g.times().len(), n + 1);
                assert_eq!(g.times()[0], 1.0);
                assert_eq!(g.times()[n], 0.0);
                assert!(g.times().windows(2).all(|w| w[0] > w[1]), "{kind} N={n}");
            }
        }
    }

    #[test]
    fn ascending_reverses() {
        let g = linear_grid::<f64>(4).unwrap();
        assert_eq!(g.ascending(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn parses_names() {
        assert_eq!("edm".parse::<ScheduleKind>().unwrap(), ScheduleKind::Edm);
        assert!("karras".parse::<ScheduleKind>().is_err());
    }
}
