//! Forward-mode (dual numbers) and reverse-mode (tape) differentiation over
//! the fixed primitive set the flow-map network uses.

mod dual;
mod params;
mod tape;

pub use dual::Dual;
pub use params::{ParamStore, TensorSpec};
pub use tape::{NodeId, Op, Tape};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Real;

/// `(f(x), J_f(x)·v)` from one forward pass on dual numbers.
pub fn jvp<T, F>(f: F, x: &[T], v: &[T]) -> Result<(Vec<T>, Vec<T>)>
where
    T: Real,
    F: FnOnce(&[Dual<T>]) -> Result<Vec<Dual<T>>>,
{
    if x.len() != v.len() {
        return Err(Error::DimensionMismatch {
            context: "jvp direction",
            expected: x.len(),
            got: v.len(),
        });
    }
    let out = f(&Dual::seed(x, v))?;
    Ok(out.iter().map(|d| (d.primal, d.tangent)).unzip())
}

/// Dense Jacobian built column by column from unit-vector JVPs.
#[derive(Clone, Debug)]
pub struct Jacobian<T> {
    pub value: Vec<T>,
    pub matrix: Matrix<T>,
    /// Forward passes spent, one per column.
    pub evaluations: usize,
}

pub fn jacobian<T, F>(f: F, x: &[T]) -> Result<Jacobian<T>>
where
    T: Real,
    F: Fn(&[Dual<T>]) -> Result<Vec<Dual<T>>>,
{
    let d = x.len();
    let mut matrix = Matrix::zeros(0, 0);
    let mut value = Vec::new();
    let mut e = vec![T::zero(); d];
    for j in 0..d {
        e[j] = T::one();
        let (val, col) = jvp(&f, x, &e)?;
        e[j] = T::zero();
        if j == 0 {
            matrix = Matrix::zeros(col.len(), d);
            value = val;
        }
        for (i, c) in col.into_iter().enumerate() {
            matrix[(i, j)] = c;
        }
    }
    Ok(Jacobian {
        value,
        matrix,
        evaluations: d,
    })
}

/// Value and gradient of a scalar loss built on a fresh tape.
pub fn grad<T, F>(params: &ParamStore<T>, loss: F) -> Result<(T, Vec<T>)>
where
    T: Real,
    F: FnOnce(&mut Tape<'_, T>) -> Result<NodeId>,
{
    let mut tape = Tape::new(params);
    let out = loss(&mut tape)?;
    let g = tape.backward(out)?;
    Ok((tape.scalar(out), g))
}
