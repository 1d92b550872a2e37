//! Transcendentals used on hot paths: the platform libm when `std` is
//! enabled, the portable `libm` crate otherwise.

#[cfg(feature = "std")]
mod imp {
    #[inline]
    pub fn sin(x: f64) -> f64 {
        x.sin()
    }
    #[inline]
    pub fn cos(x: f64) -> f64 {
        x.cos()
    }
    #[inline]
    pub fn exp(x: f64) -> f64 {
        x.exp()
    }
}

#[cfg(not(feature = "std"))]
mod imp {
    pub use libm::{cos, exp, sin};
}

pub use imp::{cos, exp, sin};
