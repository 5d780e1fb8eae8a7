//! Scalar abstraction so the whole network runs in either f32 (training
//! speed) or f64 (finite-difference gradient verification).

use rand::Rng;

/// Floating-point scalar usable throughout the model.
pub trait Real:
    ndarray::NdFloat + rustfft::FftNum + num_traits::FromPrimitive + num_traits::Float
{
    /// Precision tag stored in checkpoints.
    const PRECISION: &'static str;
}

impl Real for f32 {
    const PRECISION: &'static str = "f32";
}

impl Real for f64 {
    const PRECISION: &'static str = "f64";
}

/// Shorthand for converting literals into the active scalar type.
#[inline]
pub fn c<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("finite literal")
}

/// Draw a standard-normal variate in f64 and cast, so f32 and f64 models
/// initialized from the same seed share one random stream.
#[inline]
pub fn normal<T: Real, R: Rng>(rng: &mut R, mean: f64, std: f64) -> T {
    // Box-Muller on the raw uniform stream; avoids a rand_distr type bound.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
    c(mean + std * z)
}
