//! Minimal dense numerics: a parameter store, an execution interface with an
//! eager backend (inference) and a recording backend with reverse-mode
//! gradients (training), and the kernels both share.

mod eager;
mod exec;
mod graph;
pub mod kernels;
mod params;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};

pub use eager::Eager;
pub use exec::{AttentionGroup, AttentionLayout, AttentionProbs, ChannelNormIds, ConvGeometry, Exec};
pub use graph::{Graph, Var};
pub use params::{Grads, Init, ParamId, ParamKind, ParamStore};

/// Floating point element type of every tensor. Training and inference run in
/// `f32`; gradient checks run in `f64`.
pub trait Scalar:
    LinalgScalar
    + Float
    + FromPrimitive
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("finite literal")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[cfg(test)]
mod tests;
