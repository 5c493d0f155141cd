//! Dense-network numeric substrate.
//!
//! Everything here is generic over [`Real`] so the same layer and loss code
//! trains in `f32` and is gradient-checked in `f64`.

mod adam;
mod gradcheck;
mod layer;
mod loss;
mod mlp;

use std::fmt::{Debug, Display};

use ndarray::{Array2, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{grad_check, GradCheckConfig};
pub use layer::{Activation, DenseLayer, LayerCache, LayerGrads, LEAKY_SLOPE};
pub use loss::{entropy_loss, log_softmax_rows, softmax_ce, softmax_rows, Target};
pub use mlp::{Mlp, MlpGrads, MlpTape};

/// Row-major dense matrix.
pub type Matrix<T> = Array2<T>;

/// Scalar type usable by the numeric kernel.
pub trait Real:
    Float
    + LinalgScalar
    + ScalarOperand
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + 'static
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal fits scalar type")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Fails with a numeric error naming `op` if any entry is NaN or infinite.
pub fn ensure_finite<'a, T: Real>(
    op: &'static str,
    values: impl IntoIterator<Item = &'a T> + Clone,
) -> Result<()> {
    if !values.clone().into_iter().fold(false, |bad, v| bad | !v.is_finite()) {
        return Ok(());
    }
    for (i, v) in values.into_iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::numeric(op, format!("non-finite value {v} at flat index {i}")));
        }
    }
    Ok(())
}

pub(crate) fn ensure_scalar_finite<T: Real>(op: &'static str, v: T) -> Result<T> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::numeric(op, format!("non-finite scalar {v}")))
    }
}

/// Horizontal concatenation `[a | b]`.
pub fn hconcat<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.nrows() != b.nrows() {
        return Err(Error::shape("hconcat", a.dim(), b.dim()));
    }
    ndarray::concatenate(ndarray::Axis(1), &[a.view(), b.view()])
        .map_err(|_| Error::shape("hconcat", a.dim(), b.dim()))
}

/// Vertical concatenation.
pub fn vconcat<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.ncols() != b.ncols() {
        return Err(Error::shape("vconcat", a.dim(), b.dim()));
    }
    ndarray::concatenate(ndarray::Axis(0), &[a.view(), b.view()])
        .map_err(|_| Error::shape("vconcat", a.dim(), b.dim()))
}

/// Splits columns at `at` into two owned matrices.
pub fn hsplit<T: Real>(m: &Matrix<T>, at: usize) -> (Matrix<T>, Matrix<T>) {
    let left = m.slice(ndarray::s![.., ..at]).to_owned();
    let right = m.slice(ndarray::s![.., at..]).to_owned();
    (left, right)
}

/// Gathers the given rows into a new matrix.
pub fn gather_rows<T: Real>(m: &Matrix<T>, rows: &[usize]) -> Matrix<T> {
    m.select(ndarray::Axis(0), rows)
}

/// Converts a matrix between scalar types.
pub fn cast<A: Real, B: Real>(m: &Matrix<A>) -> Matrix<B> {
    m.mapv(|v| B::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or_else(B::nan))
}
