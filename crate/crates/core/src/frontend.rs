//! Learnable sinc bandpass filterbank front-end.
//!
//! Each channel is an FIR bandpass filter parameterized by two scalars,
//! a low cutoff and a bandwidth, built as the difference of two windowed
//! sinc low-pass kernels. Raw waveforms are convolved with the bank, then
//! rectified, max-pooled to the frame hop, log-compressed and
//! mean-variance normalized per channel.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::fft::{conv_same, prepare_kernels, PreparedKernels};
use crate::num::{c, Real};

/// Paper minimum for both the low cutoff and the bandwidth, in Hz.
pub const MIN_FREQ_HZ: f64 = 5.0;
pub const MIN_BAND_HZ: f64 = 5.0;

/// Fixed pipeline constants (design defaults at 16 kHz).
pub const SAMPLE_RATE: f64 = 16_000.0;
pub const KERNEL_LEN: usize = 251;
pub const FRAME_LEN: usize = 400;
pub const HOP: usize = 160;
const LOG_FLOOR: f64 = 1e-6;
const NORM_EPS: f64 = 1e-8;

/// Static configuration of the front-end (everything but the two learnable
/// vectors).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct FrontendConfig {
    pub kernel_len: usize,
    pub sample_rate: f64,
    pub frame_len: usize,
    pub hop: usize,
    /// When set, the cutoff parameters are excluded from gradient updates.
    pub fixed: bool,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            kernel_len: KERNEL_LEN,
            sample_rate: SAMPLE_RATE,
            frame_len: FRAME_LEN,
            hop: HOP,
            fixed: false,
        }
    }
}

/// Learnable per-channel (low cutoff, bandwidth) pairs, in Hz.
#[derive(Debug, Clone)]
pub struct FilterbankParams<T> {
    pub low_hz: Array1<T>,
    pub band_hz: Array1<T>,
    pub kernel_len: usize,
    pub sample_rate: f64,
}

impl<T: Real> FilterbankParams<T> {
    pub fn num_channels(&self) -> usize {
        self.low_hz.len()
    }

    /// Effective (f1, f2) after the forward-map clamps: f1 is at least
    /// `MIN_FREQ_HZ` and leaves room for the minimum band below Nyquist,
    /// the band is at least `MIN_BAND_HZ`, and f2 never exceeds Nyquist.
    /// Guarantees f2 > f1 for any raw parameter values.
    pub fn effective_cutoffs(&self) -> Vec<(f64, f64)> {
        let nyquist = self.sample_rate / 2.0;
        self.low_hz
            .iter()
            .zip(self.band_hz.iter())
            .map(|(&low, &band)| {
                let f1 = low
                    .to_f64()
                    .unwrap()
                    .abs()
                    .clamp(MIN_FREQ_HZ, nyquist - MIN_BAND_HZ);
                let band = band.to_f64().unwrap().abs().max(MIN_BAND_HZ);
                let f2 = (f1 + band).min(nyquist);
                (f1, f2)
            })
            .collect()
    }
}

/// Frame-level front-end output: channels x frames.
#[derive(Debug, Clone)]
pub struct FeatureMap<T> {
    pub values: Array2<T>,
    pub hop: usize,
    pub frame_len: usize,
}

impl<T: Real> FeatureMap<T> {
    pub fn num_channels(&self) -> usize {
        self.values.nrows()
    }
    pub fn num_frames(&self) -> usize {
        self.values.ncols()
    }
}

/// Windowed time-domain bandpass kernel
/// g[n] = 2 f2' sinc(2 pi f2' n) - 2 f1' sinc(2 pi f1' n), f' = f / sample_rate,
/// multiplied by a Hamming window. Built half-and-mirror so g[n] == g[-n]
/// bit-exactly.
pub fn sinc_kernel<T: Real>(
    f1: f64,
    f2: f64,
    kernel_len: usize,
    sample_rate: f64,
) -> Result<Array1<T>> {
    validate_kernel_args(f1, f2, kernel_len, sample_rate)?;
    let half = (kernel_len - 1) / 2;
    let f1n = f1 / sample_rate;
    let f2n = f2 / sample_rate;
    let mut kernel = Array1::<T>::zeros(kernel_len);
    for i in 0..=half {
        let n = i as f64; // offset from center
        let g = 2.0 * f2n * sinc(2.0 * std::f64::consts::PI * f2n * n)
            - 2.0 * f1n * sinc(2.0 * std::f64::consts::PI * f1n * n);
        let w = hamming(half as f64 + n, kernel_len);
        let v = c::<T>(g * w);
        kernel[half + i] = v;
        kernel[half - i] = v;
    }
    Ok(kernel)
}

/// d kernel / d f1 and d kernel / d f2 (same shape as the kernel).
/// d/df [2 (f/sr) sinc(2 pi (f/sr) n)] = (2 / sr) cos(2 pi (f/sr) n).
pub fn sinc_kernel_grad<T: Real>(
    f1: f64,
    f2: f64,
    kernel_len: usize,
    sample_rate: f64,
) -> Result<(Array1<T>, Array1<T>)> {
    validate_kernel_args(f1, f2, kernel_len, sample_rate)?;
    let half = (kernel_len - 1) / 2;
    let f1n = f1 / sample_rate;
    let f2n = f2 / sample_rate;
    let mut d1 = Array1::<T>::zeros(kernel_len);
    let mut d2 = Array1::<T>::zeros(kernel_len);
    for i in 0..=half {
        let n = i as f64;
        let w = hamming(half as f64 + n, kernel_len);
        let g1 = -2.0 / sample_rate * (2.0 * std::f64::consts::PI * f1n * n).cos() * w;
        let g2 = 2.0 / sample_rate * (2.0 * std::f64::consts::PI * f2n * n).cos() * w;
        d1[half + i] = c::<T>(g1);
        d1[half - i] = c::<T>(g1);
        d2[half + i] = c::<T>(g2);
        d2[half - i] = c::<T>(g2);
    }
    Ok((d1, d2))
}

fn validate_kernel_args(f1: f64, f2: f64, kernel_len: usize, sample_rate: f64) -> Result<()> {
    if kernel_len % 2 == 0 || kernel_len < 3 {
        return Err(Error::parameter(format!(
            "kernel_len must be odd and >= 3, got {kernel_len}"
        )));
    }
    if !(f1 > 0.0 && f2 > f1 && f2 <= sample_rate / 2.0) {
        return Err(Error::parameter(format!(
            "cutoffs must satisfy 0 < f1 < f2 <= Nyquist, got f1={f1}, f2={f2}"
        )));
    }
    Ok(())
}

#[inline]
fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        x.sin() / x
    }
}

#[inline]
fn hamming(i: f64, len: usize) -> f64 {
    0.54 - 0.46 * (2.0 * std::f64::consts::PI * i / (len as f64 - 1.0)).cos()
}

/// One filter per MIDI note: filter k spans its two neighboring MIDI
/// frequencies, f1 = 2^((k-1-69)/12) * 440 and f2 = 2^((k+1-69)/12) * 440.
/// The shared note grid makes f2(k) == f1(k+2) exact. Stored values are the
/// raw formula outputs; the effective-cutoff clamps (5 Hz minima, Nyquist)
/// take precedence in the forward map, which saturates the top filters at
/// 16 kHz and widens the very low, sub-5-Hz-band filters.
pub fn midi_init<T: Real>(num_filters: usize, sample_rate: f64) -> Result<FilterbankParams<T>> {
    if num_filters < 1 {
        return Err(Error::parameter("num_filters must be >= 1"));
    }
    let note = |k: isize| 440.0 * 2f64.powf((k as f64 - 69.0) / 12.0);
    let grid: Vec<f64> = (-1..=(num_filters as isize)).map(note).collect();
    let mut low = Array1::<T>::zeros(num_filters);
    let mut band = Array1::<T>::zeros(num_filters);
    for k in 0..num_filters {
        let f1 = grid[k];
        let f2 = grid[k + 2];
        low[k] = c(f1);
        band[k] = c(f2 - f1);
    }
    Ok(FilterbankParams {
        low_hz: low,
        band_hz: band,
        kernel_len: KERNEL_LEN,
        sample_rate,
    })
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Mel-spaced initialization: num_filters + 2 mel-equally-spaced points span
/// [f_min, Nyquist]; filter i gets f1 = point i and f2 = point i+2.
pub fn mel_init<T: Real>(
    num_filters: usize,
    sample_rate: f64,
    f_min: f64,
) -> Result<FilterbankParams<T>> {
    if num_filters < 1 {
        return Err(Error::parameter("num_filters must be >= 1"));
    }
    let nyquist = sample_rate / 2.0;
    if f_min >= nyquist {
        return Err(Error::parameter(format!(
            "f_min {f_min} must be below Nyquist {nyquist}"
        )));
    }
    let m_lo = hz_to_mel(f_min);
    let m_hi = hz_to_mel(nyquist);
    let n_points = num_filters + 2;
    let points: Vec<f64> = (0..n_points)
        .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (n_points - 1) as f64))
        .collect();
    let mut low = Array1::<T>::zeros(num_filters);
    let mut band = Array1::<T>::zeros(num_filters);
    for i in 0..num_filters {
        low[i] = c(points[i]);
        band[i] = c(points[i + 2] - points[i]);
    }
    Ok(FilterbankParams {
        low_hz: low,
        band_hz: band,
        kernel_len: KERNEL_LEN,
        sample_rate,
    })
}

/// Everything the backward pass needs from a front-end forward.
pub struct FrontendTrace<T> {
    /// |conv| max-pooled per frame, before log compression: (C, F).
    pub pooled: Array2<T>,
    /// Waveform index of each frame's pooling argmax: (C, F).
    pub argmax: Array2<u32>,
    /// Sign of the convolution output at the argmax: (C, F).
    pub sign: Array2<i8>,
    /// Per-channel normalization mean and 1/std of the log features.
    pub norm_mean: Array1<T>,
    pub norm_inv_std: Array1<T>,
    /// Normalized output (the FeatureMap values), kept for the backward.
    pub normalized: Array2<T>,
}

/// Gradients of a scalar loss with respect to the raw cutoff parameters.
#[derive(Debug, Clone)]
pub struct FrontendGrads<T> {
    pub low_hz: Array1<T>,
    pub band_hz: Array1<T>,
}

/// Build the current effective kernels of the bank, FFT-prepared for reuse
/// across a batch.
pub fn prepare_bank<T: Real>(params: &FilterbankParams<T>) -> Result<PreparedKernels<T>> {
    let cuts = params.effective_cutoffs();
    let mut kernels = Array2::<T>::zeros((params.num_channels(), params.kernel_len));
    for (ch, &(f1, f2)) in cuts.iter().enumerate() {
        let k = sinc_kernel::<T>(f1, f2, params.kernel_len, params.sample_rate)?;
        kernels.row_mut(ch).assign(&k);
    }
    Ok(prepare_kernels(kernels.view()))
}

/// Run the front-end over one waveform: per-channel bandpass convolution,
/// rectification, max-pooling to the frame hop, log compression and
/// per-channel mean-variance normalization over time.
pub fn apply_frontend_prepared<T: Real>(
    wave: &[T],
    prep: &PreparedKernels<T>,
    cfg: &FrontendConfig,
) -> Result<(FeatureMap<T>, FrontendTrace<T>)> {
    if wave.len() < cfg.frame_len.max(cfg.kernel_len) {
        return Err(Error::input(format!(
            "waveform of {} samples is shorter than a frame ({})",
            wave.len(),
            cfg.frame_len.max(cfg.kernel_len)
        )));
    }
    let conv = conv_same(wave, prep);
    let channels = conv.nrows();
    let frames = (wave.len() - cfg.frame_len) / cfg.hop + 1;

    let mut pooled = Array2::<T>::zeros((channels, frames));
    let mut argmax = Array2::<u32>::zeros((channels, frames));
    let mut sign = Array2::<i8>::zeros((channels, frames));
    for ch in 0..channels {
        let row = conv.row(ch);
        for f in 0..frames {
            let start = f * cfg.hop;
            let mut best = T::neg_infinity();
            let mut best_idx = start;
            for i in start..start + cfg.frame_len {
                let v = row[i].abs();
                if v > best {
                    best = v;
                    best_idx = i;
                }
            }
            pooled[[ch, f]] = best;
            argmax[[ch, f]] = best_idx as u32;
            sign[[ch, f]] = if row[best_idx] >= T::zero() { 1 } else { -1 };
        }
    }

    // log compression then per-channel mean-variance normalization.
    let floor = c::<T>(LOG_FLOOR);
    let logged = pooled.mapv(|v| (v + floor).ln());
    let mut normalized = Array2::<T>::zeros((channels, frames));
    let mut norm_mean = Array1::<T>::zeros(channels);
    let mut norm_inv_std = Array1::<T>::zeros(channels);
    let nf = c::<T>(frames as f64);
    for ch in 0..channels {
        let row = logged.row(ch);
        let mean = row.sum() / nf;
        let var = row.fold(T::zero(), |acc, &v| acc + (v - mean) * (v - mean)) / nf;
        let inv_std = T::one() / (var + c::<T>(NORM_EPS)).sqrt();
        norm_mean[ch] = mean;
        norm_inv_std[ch] = inv_std;
        for f in 0..frames {
            normalized[[ch, f]] = (row[f] - mean) * inv_std;
        }
    }

    let features = FeatureMap {
        values: normalized.clone(),
        hop: cfg.hop,
        frame_len: cfg.frame_len,
    };
    let trace = FrontendTrace {
        pooled,
        argmax,
        sign,
        norm_mean,
        norm_inv_std,
        normalized,
    };
    Ok((features, trace))
}

/// Convenience wrapper that prepares the bank for a single waveform.
pub fn apply_frontend<T: Real>(
    wave: &[T],
    params: &FilterbankParams<T>,
    cfg: &FrontendConfig,
) -> Result<(FeatureMap<T>, FrontendTrace<T>)> {
    let prep = prepare_bank(params)?;
    apply_frontend_prepared(wave, &prep, cfg)
}

/// Backpropagate a loss gradient on the FeatureMap down to the raw cutoff
/// parameters. Returns zero gradients when the config freezes the bank.
pub fn frontend_backward<T: Real>(
    wave: &[T],
    params: &FilterbankParams<T>,
    cfg: &FrontendConfig,
    trace: &FrontendTrace<T>,
    grad_out: &Array2<T>,
) -> Result<FrontendGrads<T>> {
    let channels = params.num_channels();
    let mut g_low = Array1::<T>::zeros(channels);
    let mut g_band = Array1::<T>::zeros(channels);
    if cfg.fixed {
        return Ok(FrontendGrads {
            low_hz: g_low,
            band_hz: g_band,
        });
    }

    let frames = trace.pooled.ncols();
    let nf = c::<T>(frames as f64);
    let floor = c::<T>(LOG_FLOOR);
    let nyquist = params.sample_rate / 2.0;
    let cuts = params.effective_cutoffs();
    let half = (params.kernel_len - 1) / 2;

    for ch in 0..channels {
        // mean-variance normalization backward (population statistics):
        // dx = inv_std * (dy - mean(dy) - y * mean(dy .* y))
        let gy = grad_out.row(ch);
        let y = trace.normalized.row(ch);
        let mean_gy = gy.sum() / nf;
        let mean_gyy = gy
            .iter()
            .zip(y.iter())
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b)
            / nf;
        let inv_std = trace.norm_inv_std[ch];

        // Sparse gradient over conv outputs: every frame contributes only at
        // its pooling argmax. Accumulate a_i = sum_n g_conv[n] wave[n+i-half].
        let mut a = vec![T::zero(); params.kernel_len];
        for f in 0..frames {
            let g_log = inv_std * (gy[f] - mean_gy - y[f] * mean_gyy);
            let g_pooled = g_log / (trace.pooled[[ch, f]] + floor);
            let s = c::<T>(trace.sign[[ch, f]] as f64);
            let g_conv = g_pooled * s;
            let n = trace.argmax[[ch, f]] as usize;
            for (i, slot) in a.iter_mut().enumerate() {
                let idx = n as isize + i as isize - half as isize;
                if idx >= 0 && (idx as usize) < wave.len() {
                    *slot = *slot + g_conv * wave[idx as usize];
                }
            }
        }

        let (f1, f2) = cuts[ch];
        let (dk_df1, dk_df2) =
            sinc_kernel_grad::<T>(f1, f2, params.kernel_len, params.sample_rate)?;
        let mut g_f1 = T::zero();
        let mut g_f2 = T::zero();
        for i in 0..params.kernel_len {
            g_f1 = g_f1 + a[i] * dk_df1[i];
            g_f2 = g_f2 + a[i] * dk_df2[i];
        }

        // Chain through the clamped forward map.
        let low = params.low_hz[ch].to_f64().unwrap();
        let band = params.band_hz[ch].to_f64().unwrap();
        let band_eff = band.abs().max(MIN_BAND_HZ);
        let f1_active = low.abs() > MIN_FREQ_HZ && low.abs() < nyquist - MIN_BAND_HZ;
        let band_active = band.abs() > MIN_BAND_HZ;
        let f2_from_f1 = f1 + band_eff < nyquist;

        let df1_dlow = if f1_active { low.signum() } else { 0.0 };
        let dband_eff_dband = if band_active { band.signum() } else { 0.0 };
        let g_f1_total = g_f1 + if f2_from_f1 { g_f2 } else { T::zero() };
        g_low[ch] = g_f1_total * c::<T>(df1_dlow);
        g_band[ch] = if f2_from_f1 {
            g_f2 * c::<T>(dband_eff_dband)
        } else {
            T::zero()
        };
    }

    Ok(FrontendGrads {
        low_hz: g_low,
        band_hz: g_band,
    })
}

/// Expected frame count for a waveform length under this config.
pub fn frame_count(wave_len: usize, cfg: &FrontendConfig) -> usize {
    (wave_len - cfg.frame_len) / cfg.hop + 1
}

/// Mean energy per channel of the pre-normalization pooled magnitudes
/// (diagnostic; used by the tone-selectivity checks).
pub fn mean_channel_energy<T: Real>(trace: &FrontendTrace<T>) -> Array1<T> {
    let frames = c::<T>(trace.pooled.ncols() as f64);
    let mut out = Array1::<T>::zeros(trace.pooled.nrows());
    for (ch, row) in trace.pooled.rows().into_iter().enumerate() {
        out[ch] = row.sum() / frames;
    }
    out
}

/// CSV rows (channel, f1_hz, f2_hz) of the current effective cutoffs.
pub fn filter_table<T: Real>(params: &FilterbankParams<T>) -> Vec<(usize, f64, f64)> {
    params
        .effective_cutoffs()
        .iter()
        .enumerate()
        .map(|(ch, &(f1, f2))| (ch, f1, f2))
        .collect()
}
