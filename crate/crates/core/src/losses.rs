//! Training objectives: conditional flow matching, the average-velocity
//! (MeanFlow) loss, its SplitMeanFlow alternative and the cycle-consistency
//! invertibility loss.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Dual, Tape};
use crate::error::{invalid, Error, Result};
use crate::linalg::Matrix;
use crate::model::FlowMap;
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossVariant {
    MeanFlow,
    SplitMeanFlow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_avg: f64,
    pub lambda_r: f64,
    pub p_same: f64,
    pub variant: LossVariant,
    pub split_lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_avg: 1.0,
            lambda_r: 10.0,
            p_same: 0.25,
            variant: LossVariant::MeanFlow,
            split_lambda: 0.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_avg >= 0.0) || !(self.lambda_r >= 0.0) {
            return Err(invalid("loss weights must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.p_same) {
            return Err(invalid("p_same must lie in [0, 1]"));
        }
        if !(self.split_lambda > 0.0 && self.split_lambda < 1.0) {
            return Err(invalid("split_lambda must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Prior draws `x0`, data draws `x1` and one `(s, t)` pair per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub x0: Matrix<T>,
    pub x1: Matrix<T>,
    pub s: Vec<T>,
    pub t: Vec<T>,
}

impl<T: Real> Batch<T> {
    pub fn new(x0: Matrix<T>, x1: Matrix<T>, s: Vec<T>, t: Vec<T>) -> Result<Self> {
        let k = x0.rows();
        if x1.shape() != x0.shape() || s.len() != k || t.len() != k {
            return Err(invalid("batch parts disagree in shape"));
        }
        let unit = |v: &T| *v >= T::zero() && *v <= T::one();
        if !s.iter().all(unit) || !t.iter().all(unit) {
            return Err(invalid("batch times must lie in [0, 1]"));
        }
        Ok(Self { x0, x1, s, t })
    }

    pub fn len(&self) -> usize {
        self.x0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.x0.cols()
    }

    /// `x_s = s·x1 + (1 − s)·x0`.
    pub fn x_s(&self) -> Matrix<T> {
        let mut out = Matrix::zeros(self.len(), self.dim());
        for i in 0..self.len() {
            let s = self.s[i];
            for j in 0..self.dim() {
                out[(i, j)] = s * self.x1[(i, j)] + (T::one() - s) * self.x0[(i, j)];
            }
        }
        out
    }

    /// `v_s = x1 − x0`.
    pub fn v_s(&self) -> Matrix<T> {
        let data = self.x1.data().iter().zip(self.x0.data()).map(|(&a, &b)| a - b).collect();
        Matrix::from_vec(self.len(), self.dim(), data)
    }

    /// Rows `range` as a standalone batch.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        let d = self.dim();
        let rows = range.len();
        let take = |m: &Matrix<T>| Matrix::from_vec(rows, d, m.data()[range.start * d..range.end * d].to_vec());
        Self {
            x0: take(&self.x0),
            x1: take(&self.x1),
            s: self.s[range.clone()].to_vec(),
            t: self.t[range].to_vec(),
        }
    }
}

/// `a, b ~ U(0,1)`, `s = min`, `t = max`; with probability `p_same`, `t ← s`.
pub fn sample_time_pairs<T: Real, R: Rng + ?Sized>(rng: &mut R, k: usize, p_same: f64) -> (Vec<T>, Vec<T>) {
    let mut s = Vec::with_capacity(k);
    let mut t = Vec::with_capacity(k);
    for _ in 0..k {
        let a: f64 = rng.gen();
        let b: f64 = rng.gen();
        let same = rng.gen::<f64>() < p_same;
        let lo = a.min(b);
        s.push(T::of(lo));
        t.push(T::of(if same { lo } else { a.max(b) }));
    }
    (s, t)
}

/// `u_tgt = v + (t − s)·du/ds`, the fixed point of the average velocity
/// when the state sits at the start time `s`.
#[inline]
pub fn meanflow_target<T: Real>(v: T, du_ds: T, s: T, t: T) -> T {
    v + (t - s) * du_ds
}

/// Stop-gradient MeanFlow targets, one row per batch row, from a single
/// forward-mode pass along `(v_s, 1, 0)`.
pub fn meanflow_targets<T: Real>(map: &FlowMap<'_, T>, batch: &Batch<T>) -> Result<Matrix<T>> {
    let xs = batch.x_s();
    let vs = batch.v_s();
    let d = batch.dim();
    let mut out = Matrix::zeros(batch.len(), d);
    for i in 0..batch.len() {
        let (s, t) = (batch.s[i], batch.t[i]);
        let v = vs.row(i);
        if s == t {
            out.row_mut(i).copy_from_slice(v);
            continue;
        }
        let x = Dual::seed(xs.row(i), v);
        let u = map.forward(&x, Dual::new(s, T::one()), Dual::constant(t))?;
        for (j, uj) in u.iter().enumerate() {
            if !uj.tangent.is_finite() {
                return Err(Error::NonFiniteRow {
                    row: i,
                    what: "jvp tangent",
                });
            }
            out[(i, j)] = meanflow_target(v[j], uj.tangent, s, t);
        }
    }
    Ok(out)
}

/// Stop-gradient SplitMeanFlow targets:
/// `λ·u(x_s, s, r) + (1 − λ)·u(X(x_s, s, r), r, t)` with `r = λs + (1 − λ)t`.
/// Rows with `s = t` fall back to the flow-matching target `v_s`.
pub fn splitmeanflow_targets<T: Real>(map: &FlowMap<'_, T>, batch: &Batch<T>, split_lambda: T) -> Result<Matrix<T>> {
    let xs = batch.x_s();
    let vs = batch.v_s();
    let mut out = Matrix::zeros(batch.len(), batch.dim());
    let lam = split_lambda;
    for i in 0..batch.len() {
        let (s, t) = (batch.s[i], batch.t[i]);
        if s == t {
            out.row_mut(i).copy_from_slice(vs.row(i));
            continue;
        }
        let r = lam * s + (T::one() - lam) * t;
        let x = xs.row(i);
        let u1 = map.forward(x, s, r)?;
        let mid: Vec<T> = x.iter().zip(&u1).map(|(&a, &b)| a + (r - s) * b).collect();
        let u2 = map.forward(&mid, r, t)?;
        for (j, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = lam * u1[j] + (T::one() - lam) * u2[j];
        }
    }
    Ok(out)
}

/// Loss value with the unweighted terms it is built from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown<T> {
    pub total: T,
    pub cfm: T,
    pub avg: T,
    pub inv: T,
}

impl<T: Real> LossBreakdown<T> {
    fn add(self, o: Self) -> Self {
        Self {
            total: self.total + o.total,
            cfm: self.cfm + o.cfm,
            avg: self.avg + o.avg,
            inv: self.inv + o.inv,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.total.is_finite() && self.cfm.is_finite() && self.avg.is_finite() && self.inv.is_finite()
    }
}

/// Builds the hybrid loss on `tape` for `batch`, normalized by `denom`
/// rows (so shards of one batch add up). Returns the total node and the
/// term values.
fn build_loss<T: Real>(
    tape: &mut Tape<'_, T>,
    map: &FlowMap<'_, T>,
    batch: &Batch<T>,
    cfg: &LossConfig,
    denom: usize,
) -> Result<(usize, LossBreakdown<T>)> {
    let targets = match cfg.variant {
        LossVariant::MeanFlow => meanflow_targets(map, batch)?,
        LossVariant::SplitMeanFlow => splitmeanflow_targets(map, batch, T::of(cfg.split_lambda))?,
    };
    let norm = T::one() / T::of_usize(denom);
    let x = tape.constant(batch.x_s());
    let u = map.forward_tape(tape, x, &batch.s, &batch.t)?;
    let tgt = tape.constant(targets);
    let tgt = tape.stop_grad(tgt);
    let diff = tape.sub(u, tgt);
    let sq = tape.square(diff);
    let same: Vec<T> = batch
        .s
        .iter()
        .zip(&batch.t)
        .map(|(s, t)| if s == t { T::one() } else { T::zero() })
        .collect();
    let other: Vec<T> = same.iter().map(|&m| T::one() - m).collect();
    let cfm_rows = tape.row_scale(sq, same);
    let cfm_sum = tape.sum(cfm_rows);
    let cfm = tape.scale(cfm_sum, norm);
    let avg_rows = tape.row_scale(sq, other);
    let avg_sum = tape.sum(avg_rows);
    let avg = tape.scale(avg_sum, norm);

    let (xt, _) = map.step_tape(tape, x, &batch.s, &batch.t)?;
    let (back, _) = map.step_tape(tape, xt, &batch.t, &batch.s)?;
    let gap = tape.sub(x, back);
    let gap_sq = tape.square(gap);
    let inv_sum = tape.sum(gap_sq);
    let inv = tape.scale(inv_sum, norm);

    let weighted_avg = tape.scale(avg, T::of(cfg.lambda_avg));
    let weighted_inv = tape.scale(inv, T::of(cfg.lambda_r));
    let partial = tape.add(cfm, weighted_avg);
    let total = tape.add(partial, weighted_inv);
    let breakdown = LossBreakdown {
        total: tape.scalar(total),
        cfm: tape.scalar(cfm),
        avg: tape.scalar(avg),
        inv: tape.scalar(inv),
    };
    Ok((total, breakdown))
}

/// Hybrid loss `cfm + λ_avg·avg + λ_r·inv` with its breakdown.
///
/// Rows with `s = t` form the flow-matching term, the others the
/// average-velocity term; both are normalized by the full batch size, so
/// `cfm + avg` is the plain mean over rows. The invertibility term uses
/// every row.
pub fn total_loss<T: Real>(map: &FlowMap<'_, T>, batch: &Batch<T>, cfg: &LossConfig) -> Result<LossBreakdown<T>> {
    let mut tape = Tape::new(map.params);
    Ok(build_loss(&mut tape, map, batch, cfg, batch.len())?.1)
}

/// Loss and parameter gradient. The batch is cut into fixed shards of
/// `shard_rows` rows evaluated in parallel; shard results are reduced in
/// shard order, so the result does not depend on the worker count.
pub fn loss_and_grad<T: Real>(
    map: &FlowMap<'_, T>,
    batch: &Batch<T>,
    cfg: &LossConfig,
    shard_rows: usize,
) -> Result<(LossBreakdown<T>, Vec<T>)> {
    if batch.is_empty() {
        return Err(invalid("empty batch"));
    }
    let shard_rows = shard_rows.max(1);
    let n = batch.len();
    let starts: Vec<usize> = (0..n).step_by(shard_rows).collect();
    let parts: Vec<Result<(LossBreakdown<T>, Vec<T>)>> = starts
        .par_iter()
        .map(|&a| {
            let shard = batch.slice(a..(a + shard_rows).min(n));
            let mut tape = Tape::new(map.params);
            let (total, b) = build_loss(&mut tape, map, &shard, cfg, n)?;
            let g = tape.backward(total)?;
            Ok((b, g))
        })
        .collect();
    let mut acc = LossBreakdown::default();
    let mut grad = vec![T::zero(); map.params.len()];
    for part in parts {
        let (b, g) = part?;
        acc = acc.add(b);
        grad.iter_mut().zip(&g).for_each(|(a, &v)| *a += v);
    }
    Ok((acc, grad))
}

fn mean_sq_rows<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> T {
    let sum: T = a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
    sum / T::of_usize(a.rows())
}

fn forward_rows<T: Real>(map: &FlowMap<'_, T>, x: &Matrix<T>, s: &[T], t: &[T]) -> Result<Matrix<T>> {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        out.row_mut(i).copy_from_slice(&map.forward(x.row(i), s[i], t[i])?);
    }
    Ok(out)
}

/// Mean over rows of `‖u(x_s, s, t) − sg(u_tgt)‖²`.
pub fn meanflow_loss<T: Real>(map: &FlowMap<'_, T>, batch: &Batch<T>) -> Result<T> {
    let tgt = meanflow_targets(map, batch)?;
    let u = forward_rows(map, &batch.x_s(), &batch.s, &batch.t)?;
    Ok(mean_sq_rows(&u, &tgt))
}

/// Mean over rows of `‖u(x_s, s, t) − sg(split target)‖²`.
pub fn splitmeanflow_loss<T: Real>(map: &FlowMap<'_, T>, batch: &Batch<T>, split_lambda: T) -> Result<T> {
    let tgt = splitmeanflow_targets(map, batch, split_lambda)?;
    let u = forward_rows(map, &batch.x_s(), &batch.s, &batch.t)?;
    Ok(mean_sq_rows(&u, &tgt))
}

/// Mean over rows of `‖x_s − X(X(x_s, s, t), t, s)‖²`.
pub fn invertibility_loss<T: Real>(map: &FlowMap<'_, T>, batch: &Batch<T>) -> Result<T> {
    let xs = batch.x_s();
    let mut back = Matrix::zeros(batch.len(), batch.dim());
    for i in 0..batch.len() {
        let fwd = map.step(xs.row(i), batch.s[i], batch.t[i])?;
        back.row_mut(i).copy_from_slice(&map.step(&fwd, batch.t[i], batch.s[i])?);
    }
    Ok(mean_sq_rows(&xs, &back))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FlowMapModel, ModelSpec};
    use crate::rng::stream;
    use proptest::prelude::*;

    fn random_model(seed: u64) -> FlowMapModel<f64> {
        let spec = ModelSpec::new(2).with_size(16, 2);
        let mut m = FlowMapModel::new(spec, &mut stream(seed, "init", 0)).unwrap();
        // Non-zero head so the map is not the identity.
        let mut rng = stream(seed, "head", 0);
        let n = m.params.len();
        for v in &mut m.params.values_mut()[n - 2 * 16 - 2..] {
            *v = rand::Rng::gen_range(&mut rng, -0.5..0.5);
        }
        m.ema = m.params.clone();
        m
    }

    fn random_batch(seed: u64, k: usize, p_same: f64) -> Batch<f64> {
        let mut rng = stream(seed, "batch", 0);
        let mut g = |rows| {
            let data = crate::rng::standard_normal(&mut rng, rows * 2);
            Matrix::from_vec(rows, 2, data)
        };
        let x0 = g(k);
        let x1 = g(k);
        let (s, t) = sample_time_pairs(&mut stream(seed, "times", 0), k, p_same);
        Batch::new(x0, x1, s, t).unwrap()
    }

    fn one_row(x0: &[f64], x1: &[f64], s: f64, t: f64) -> Batch<f64> {
        Batch::new(
            Matrix::from_rows(&[x0.to_vec()]),
            Matrix::from_rows(&[x1.to_vec()]),
            vec![s],
            vec![t],
        )
        .unwrap()
    }

    #[test]
    fn time_pairs_are_ordered_with_ties() {
        let (s, t) = sample_time_pairs::<f64, _>(&mut stream(1, "t", 0), 20_000, 0.25);
        assert!(s.iter().zip(&t).all(|(a, b)| a <= b));
        let ties = s.iter().zip(&t).filter(|(a, b)| a == b).count() as f64 / 20_000.0;
        assert!((ties - 0.25).abs() < 0.02, "{ties}");
    }

    #[test]
    fn cfm_rows_use_velocity_target() {
        let m = random_model(1);
        let map = m.view(false);
        let b = one_row(&[0.3, -1.0], &[1.2, 0.4], 0.4, 0.4);
        let u = map.forward(&b.x_s().row(0).to_vec(), 0.4, 0.4).unwrap();
        let v = b.v_s();
        let want = (u[0] - v[(0, 0)]).powi(2) + (u[1] - v[(0, 1)]).powi(2);
        assert!((meanflow_loss(&map, &b).unwrap() - want).abs() < 1e-14);
    }

    #[test]
    fn constant_field_is_a_fixed_point() {
        // u ≡ c through a linear model with zero weights and bias c.
        let mut m = FlowMapModel::<f64>::linear(2, 0.0);
        let n = m.params.len();
        m.params.values_mut()[n - 2..].copy_from_slice(&[0.7, -1.1]);
        let map = m.view(false);
        let b = one_row(&[0.0, 0.0], &[0.7, -1.1], 0.2, 0.9);
        assert_eq!(meanflow_loss(&map, &b).unwrap(), 0.0);
        assert!(splitmeanflow_loss(&map, &b, 0.5).unwrap() < 1e-30);
    }

    #[test]
    fn target_is_exact_for_time_dependent_velocity() {
        // v(τ) = aτ has average a(s+t)/2 and ∂u/∂s = a/2.
        let (a, s, t) = (1.7f64, 0.2, 0.9);
        let tgt = meanflow_target(a * s, a / 2.0, s, t);
        assert!((tgt - a * (s + t) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn jvp_matches_finite_difference_oracle() {
        let m = random_model(2);
        let map = m.view(false);
        let b = one_row(&[0.3, -0.8], &[1.5, 0.2], 0.3, 0.8);
        let tgt = meanflow_targets(&map, &b).unwrap();
        let xs = b.x_s().row(0).to_vec();
        let v = b.v_s().row(0).to_vec();
        let h = 1e-6;
        let shift = |e: f64| {
            let x: Vec<f64> = xs.iter().zip(&v).map(|(a, b)| a + e * b).collect();
            map.forward(&x, 0.3 + e, 0.8).unwrap()
        };
        let (up, dn) = (shift(h), shift(-h));
        for j in 0..2 {
            let fd = (up[j] - dn[j]) / (2.0 * h);
            let want = meanflow_target(v[j], fd, 0.3, 0.8);
            assert!((tgt[(0, j)] - want).abs() <= 1e-4 * want.abs().max(1e-3));
        }
    }

    #[test]
    fn target_is_frozen_in_the_gradient() {
        // d/dθ of the loss must equal d/dθ ‖u_θ − c‖² with c held fixed.
        let m = random_model(3);
        let map = m.view(false);
        let b = random_batch(3, 8, 0.0);
        let cfg = LossConfig {
            lambda_r: 0.0,
            ..Default::default()
        };
        let (_, g) = loss_and_grad(&map, &b, &cfg, 64).unwrap();
        let frozen = meanflow_targets(&map, &b).unwrap();
        let xs = b.x_s();
        let objective = |p: &crate::autodiff::ParamStore<f64>| {
            let view = m.view_with(p);
            let u = forward_rows(&view, &xs, &b.s, &b.t).unwrap();
            mean_sq_rows(&u, &frozen)
        };
        let eps = 1e-6;
        for idx in [0, 7, m.params.len() - 1, m.params.len() - 5] {
            let mut plus = m.params.clone();
            plus.values_mut()[idx] += eps;
            let mut minus = m.params.clone();
            minus.values_mut()[idx] -= eps;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * eps);
            assert!((g[idx] - fd).abs() < 1e-6 * (1.0 + fd.abs()), "{idx}: {} vs {fd}", g[idx]);
        }
    }

    #[test]
    fn invertibility_of_identity_and_ties() {
        let m = FlowMapModel::<f64>::linear(2, 0.0);
        assert_eq!(invertibility_loss(&m.view(false), &random_batch(4, 16, 0.3)).unwrap(), 0.0);
        let m = random_model(4);
        assert_eq!(invertibility_loss(&m.view(false), &random_batch(4, 16, 1.0)).unwrap(), 0.0);
    }

    #[test]
    fn invertibility_hand_example() {
        // h = x: forward 0→0.5 gives 1.5x; the backward step has u = −h,
        // so 1.5x + (−0.5)(−1.5x) = 2.25x and the row loss is 1.5625‖x‖².
        let m = FlowMapModel::<f64>::linear(2, 1.0);
        let x = [0.8, -0.6];
        let b = one_row(&x, &x, 0.0, 0.5);
        let want = 1.5625 * (0.64 + 0.36);
        assert!((invertibility_loss(&m.view(false), &b).unwrap() - want).abs() < 1e-14);
    }

    #[test]
    fn split_hand_example() {
        // h = a·x with λ = ½, s = 0, t = 1, r = ½:
        // u1 = a x, mid = (1 + a/2) x, u2 = a (1 + a/2) x,
        // target = ½ a x + ½ a (1 + a/2) x = a (1 + a/4) x.
        let a = 0.6;
        let m = FlowMapModel::<f64>::linear(2, a);
        let x = [1.0, 2.0];
        let b = one_row(&x, &[0.0, 0.0], 0.0, 1.0);
        let tgt = splitmeanflow_targets(&m.view(false), &b, 0.5).unwrap();
        for j in 0..2 {
            assert!((tgt[(0, j)] - a * (1.0 + a / 4.0) * x[j]).abs() < 1e-14);
        }
        let loss = splitmeanflow_loss(&m.view(false), &b, 0.5).unwrap();
        let want: f64 = x.iter().map(|v| (a * v - a * (1.0 + a / 4.0) * v).powi(2)).sum();
        assert!((loss - want).abs() < 1e-14);
    }

    #[test]
    fn split_ties_fall_back_to_flow_matching() {
        let m = random_model(5);
        let b = random_batch(5, 8, 1.0);
        let map = m.view(false);
        let a = splitmeanflow_loss(&map, &b, 0.5).unwrap();
        let c = meanflow_loss(&map, &b).unwrap();
        assert!((a - c).abs() < 1e-14);
    }

    #[test]
    fn term_isolation() {
        let m = random_model(6);
        let map = m.view(false);
        let b = random_batch(6, 32, 1.0);
        let cfg = LossConfig {
            lambda_avg: 0.0,
            lambda_r: 0.0,
            ..Default::default()
        };
        let l = total_loss(&map, &b, &cfg).unwrap();
        assert!((l.total - meanflow_loss(&map, &b).unwrap()).abs() < 1e-12);
        assert_eq!(l.avg, 0.0);
    }

    #[test]
    fn zero_field_zero_velocity_gives_zero() {
        let m = FlowMapModel::<f64>::linear(2, 0.0);
        let x = Matrix::from_rows(&[vec![0.5, 1.0], vec![-1.0, 0.2]]);
        let b = Batch::new(x.clone(), x, vec![0.1, 0.3], vec![0.7, 0.3]).unwrap();
        let l = total_loss(&m.view(false), &b, &LossConfig::default()).unwrap();
        assert_eq!(l.total, 0.0);
    }

    #[test]
    fn tape_terms_match_scalar_reference() {
        let m = random_model(7);
        let map = m.view(false);
        let b = random_batch(7, 24, 0.25);
        let l = total_loss(&map, &b, &LossConfig::default()).unwrap();
        assert!((l.cfm + l.avg - meanflow_loss(&map, &b).unwrap()).abs() < 1e-12);
        assert!((l.inv - invertibility_loss(&map, &b).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn sharding_does_not_change_the_gradient() {
        let m = random_model(8);
        let map = m.view(false);
        let b = random_batch(8, 40, 0.25);
        let cfg = LossConfig::default();
        let (l1, g1) = loss_and_grad(&map, &b, &cfg, 40).unwrap();
        let (l2, g2) = loss_and_grad(&map, &b, &cfg, 7).unwrap();
        assert!((l1.total - l2.total).abs() < 1e-12);
        for (a, c) in g1.iter().zip(&g2) {
            assert!((a - c).abs() < 1e-12);
        }
    }

    #[test]
    fn nan_tangent_names_the_row() {
        let mut m = random_model(9);
        m.params.values_mut()[0] = f64::INFINITY;
        let b = random_batch(9, 4, 0.0);
        let err = meanflow_targets(&m.view(false), &b).unwrap_err();
        assert!(matches!(err, Error::NonFiniteRow { row: 0, .. }), "{err}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn breakdown_adds_up(seed in 0u64..1000, la in 0.0f64..5.0, lr in 0.0f64..50.0, split in any::<bool>()) {
            let m = random_model(seed);
            let b = random_batch(seed, 12, 0.3);
            let cfg = LossConfig {
                lambda_avg: la,
                lambda_r: lr,
                variant: if split { LossVariant::SplitMeanFlow } else { LossVariant::MeanFlow },
                ..Default::default()
            };
            let l = total_loss(&m.view(false), &b, &cfg).unwrap();
            prop_assert!((l.cfm + la * l.avg + lr * l.inv - l.total).abs() < 1e-12 * (1.0 + l.total.abs()));
        }
    }
}
