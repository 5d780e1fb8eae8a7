//! Multi-channel FIR filtering via overlap-save FFT convolution.
//!
//! Kernels are prepared once per parameter update and reused across a
//! batch. Two tricks keep this fast on CPU: channel pairs are packed into
//! one complex inverse transform, and blocks whose input segment is all
//! zero are skipped outright (zero-padded training segments make such
//! blocks common).

use std::sync::Arc;

use ndarray::{Array2, ArrayView2};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::num::Real;

const MIN_FFT: usize = 1024;
const MAX_FFT: usize = 16384;

/// Per-channel kernel spectra packed in pairs, plus the FFT plans.
pub struct PreparedKernels<T: Real> {
    pub num_channels: usize,
    pub kernel_len: usize,
    fft_size: usize,
    /// spectra[p] = FFT(k_{2p} + i k_{2p+1}), zero-padded to fft_size.
    spectra: Vec<Vec<Complex<T>>>,
    forward: Arc<dyn Fft<T>>,
    inverse: Arc<dyn Fft<T>>,
}

fn fft_size_for(kernel_len: usize) -> usize {
    let mut n = MIN_FFT;
    while n < 8 * kernel_len && n < MAX_FFT {
        n *= 2;
    }
    n
}

/// FFT the kernels (rows of `kernels`) once for reuse over many waves.
pub fn prepare_kernels<T: Real>(kernels: ArrayView2<'_, T>) -> PreparedKernels<T> {
    let num_channels = kernels.nrows();
    let kernel_len = kernels.ncols();
    let fft_size = fft_size_for(kernel_len);
    assert!(kernel_len < fft_size, "kernel too long for FFT block");

    let mut planner = FftPlanner::<T>::new();
    let forward = planner.plan_fft_forward(fft_size);
    let inverse = planner.plan_fft_inverse(fft_size);

    let mut spectra = Vec::with_capacity(num_channels.div_ceil(2));
    let mut buf = vec![Complex::new(T::zero(), T::zero()); fft_size];
    for pair in 0..num_channels.div_ceil(2) {
        buf.iter_mut()
            .for_each(|v| *v = Complex::new(T::zero(), T::zero()));
        let c0 = 2 * pair;
        let c1 = 2 * pair + 1;
        for i in 0..kernel_len {
            let re = kernels[[c0, i]];
            let im = if c1 < num_channels {
                kernels[[c1, i]]
            } else {
                T::zero()
            };
            buf[i] = Complex::new(re, im);
        }
        forward.process(&mut buf);
        spectra.push(buf.clone());
    }

    PreparedKernels {
        num_channels,
        kernel_len,
        fft_size,
        spectra,
        forward,
        inverse,
    }
}

/// Centered ("same") linear convolution of `wave` with every prepared
/// kernel; output is (channels, wave_len). For the even-symmetric kernels
/// used by the sinc front-end this equals cross-correlation.
pub fn conv_same<T: Real>(wave: &[T], prep: &PreparedKernels<T>) -> Array2<T> {
    let w = wave.len();
    let l = prep.kernel_len;
    let n = prep.fft_size;
    let half = (l - 1) / 2;
    let valid = n - (l - 1);
    let full = w + l - 1;
    let num_blocks = full.div_ceil(valid);
    let scale = T::one() / T::from_usize(n).unwrap();

    let mut out = Array2::<T>::zeros((prep.num_channels, w));
    let mut in_buf = vec![Complex::new(T::zero(), T::zero()); n];
    let mut work = vec![Complex::new(T::zero(), T::zero()); n];
    let mut scratch =
        vec![Complex::new(T::zero(), T::zero()); prep.inverse.get_inplace_scratch_len()];

    for b in 0..num_blocks {
        // Full-convolution output indices [o, o + valid) need input
        // samples x[o - (l-1) + t] for t in 0..n.
        let o = b * valid;
        let in_start = o as isize - (l as isize - 1);

        let mut all_zero = true;
        for (t, slot) in in_buf.iter_mut().enumerate() {
            let idx = in_start + t as isize;
            let v = if idx >= 0 && (idx as usize) < w {
                wave[idx as usize]
            } else {
                T::zero()
            };
            if v != T::zero() {
                all_zero = false;
            }
            *slot = Complex::new(v, T::zero());
        }
        if all_zero {
            continue; // zero input block -> zero output, already zeroed
        }
        prep.forward
            .process_with_scratch(&mut in_buf, &mut scratch);

        for (pair, spec) in prep.spectra.iter().enumerate() {
            for t in 0..n {
                work[t] = in_buf[t] * spec[t];
            }
            prep.inverse.process_with_scratch(&mut work, &mut scratch);
            let c0 = 2 * pair;
            let c1 = 2 * pair + 1;
            // z[t] for t in l-1..n holds full-conv outputs y[o - (l-1) + t];
            // the "same" slice is y[half .. half + w].
            for u in 0..valid {
                let y_full = o + u;
                if y_full < half || y_full >= half + w {
                    continue;
                }
                let z = work[l - 1 + u] * scale;
                out[[c0, y_full - half]] = z.re;
                if c1 < prep.num_channels {
                    out[[c1, y_full - half]] = z.im;
                }
            }
        }
    }
    out
}
