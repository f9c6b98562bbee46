//! Differentiable operations recorded on a [`Graph`](crate::Graph).
//!
//! Every op validates shapes eagerly and returns a [`TensorError`](crate::TensorError)
//! on mismatch; backward rules never fail on well-formed tapes.

mod basic;
mod conv;
mod linear;
mod loss;
mod norm;

pub use loss::{ssim_value, SsimWindow};
pub use norm::BatchStats;

use crate::error::{Result, TensorError};

pub(crate) fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(TensorError::shape(op, format!("{a:?}"), format!("{b:?}")));
    }
    Ok(())
}
