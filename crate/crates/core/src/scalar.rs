//! Floating-point scalar abstraction shared by the network and training code.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Real scalar the Q-network is generic over: `f32` or `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Default
    + Debug
    + Display
    + Serialize
    + DeserializeOwned
    + Send
    + Sync
    + 'static
{
    /// Short dtype tag written into checkpoints.
    const DTYPE: &'static str;

    #[inline]
    fn of(v: f64) -> Self {
        // f64 -> f32 saturates to +-inf rather than failing, so this never panics for finite input.
        Self::from_f64(v).expect("finite f64 converts to any Float")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
}
