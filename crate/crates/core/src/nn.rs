//! Minimal batched NN primitives with explicit backward passes.
//!
//! Everything operates on (N, C, H, W) tensors. Parallelism is always over
//! independent output slots (per-sample maps, per-channel reductions) or
//! fixed batch chunks reduced in index order, so results are bitwise
//! reproducible regardless of thread count.

use ndarray::parallel::prelude::*;
use ndarray::{Array1, Array2, Array4, ArrayView2, ArrayView4, Axis, Zip};

use crate::num::{c, Real};

/// Fixed chunk count for deterministic batch reductions.
const GRAD_CHUNKS: usize = 4;

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

fn conv_out_len(len: usize, kernel: usize, stride: usize) -> usize {
    let pad = kernel / 2;
    (len + 2 * pad - kernel) / stride + 1
}

/// Unfold one sample (C, H, W) into (C*kh*kw, H'*W') with implicit
/// zero padding of kh/2, kw/2.
fn unfold<T: Real>(
    x: &ndarray::ArrayView3<'_, T>,
    kh: usize,
    kw: usize,
    stride: (usize, usize),
) -> Array2<T> {
    let (ci, h, w) = x.dim();
    let (sh, sw) = stride;
    let ph = kh / 2;
    let pw = kw / 2;
    let ho = conv_out_len(h, kh, sh);
    let wo = conv_out_len(w, kw, sw);
    let mut cols = Array2::<T>::zeros((ci * kh * kw, ho * wo));
    for cin in 0..ci {
        let plane = x.index_axis(Axis(0), cin);
        for ky in 0..kh {
            for kx in 0..kw {
                let row = cin * kh * kw + ky * kw + kx;
                let mut out_row = cols.row_mut(row);
                for oy in 0..ho {
                    let iy = (oy * sh + ky) as isize - ph as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..wo {
                        let ix = (ox * sw + kx) as isize - pw as isize;
                        if ix >= 0 && (ix as usize) < w {
                            out_row[oy * wo + ox] = plane[[iy, ix as usize]];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add of unfolded gradient columns back to an input gradient.
fn fold_add<T: Real>(
    cols: &Array2<T>,
    gx: &mut ndarray::ArrayViewMut3<'_, T>,
    kh: usize,
    kw: usize,
    stride: (usize, usize),
) {
    let (ci, h, w) = gx.dim();
    let (sh, sw) = stride;
    let ph = kh / 2;
    let pw = kw / 2;
    let ho = conv_out_len(h, kh, sh);
    let wo = conv_out_len(w, kw, sw);
    for cin in 0..ci {
        let mut plane = gx.index_axis_mut(Axis(0), cin);
        for ky in 0..kh {
            for kx in 0..kw {
                let row = cols.row(cin * kh * kw + ky * kw + kx);
                for oy in 0..ho {
                    let iy = (oy * sh + ky) as isize - ph as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..wo {
                        let ix = (ox * sw + kx) as isize - pw as isize;
                        if ix >= 0 && (ix as usize) < w {
                            plane[[iy, ix as usize]] =
                                plane[[iy, ix as usize]] + row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Batched 2-D convolution, zero-padded to keep ceil(len/stride) output.
/// Weights are (C_out, C_in, kh, kw); no bias (a BatchNorm always follows).
pub fn conv2d_fwd<T: Real>(
    x: &Array4<T>,
    weight: ArrayView4<'_, T>,
    stride: (usize, usize),
) -> Array4<T> {
    let (n, ci, h, w) = x.dim();
    let (co, ci2, kh, kw) = weight.dim();
    assert_eq!(ci, ci2, "conv channel mismatch");
    let ho = conv_out_len(h, kh, stride.0);
    let wo = conv_out_len(w, kw, stride.1);
    let wmat = weight
        .into_shape((co, ci * kh * kw))
        .expect("contiguous weights");

    let mut out = Array4::<T>::zeros((n, co, ho, wo));
    x.axis_iter(Axis(0))
        .into_par_iter()
        .zip(out.axis_iter_mut(Axis(0)).into_par_iter())
        .for_each(|(xi, mut oi)| {
            let cols = unfold(&xi, kh, kw, stride);
            let y = wmat.dot(&cols); // (co, ho*wo)
            let y = y.into_shape((co, ho, wo)).unwrap();
            oi.assign(&y);
        });
    out
}

/// Gradients of a conv: returns (d input, d weight).
pub fn conv2d_bwd<T: Real>(
    x: &Array4<T>,
    weight: ArrayView4<'_, T>,
    gy: &Array4<T>,
    stride: (usize, usize),
) -> (Array4<T>, Array4<T>) {
    let (n, ci, h, w) = x.dim();
    let (co, _, kh, kw) = weight.dim();
    let (_, _, ho, wo) = gy.dim();
    let wmat = weight
        .into_shape((co, ci * kh * kw))
        .expect("contiguous weights");

    let mut gx = Array4::<T>::zeros((n, ci, h, w));
    x.axis_iter(Axis(0))
        .into_par_iter()
        .zip(gy.axis_iter(Axis(0)).into_par_iter())
        .zip(gx.axis_iter_mut(Axis(0)).into_par_iter())
        .for_each(|((_, gyi), mut gxi)| {
            let gymat = gyi.into_shape((co, ho * wo)).unwrap();
            let gcols = wmat.t().dot(&gymat); // (ci*kh*kw, ho*wo)
            fold_add(&gcols, &mut gxi, kh, kw, stride);
        });

    // Weight gradient: fixed chunking over the batch, partials summed in
    // chunk order for determinism.
    let chunk = n.div_ceil(GRAD_CHUNKS).max(1);
    let partials: Vec<Array2<T>> = (0..n.div_ceil(chunk))
        .into_par_iter()
        .map(|ci_chunk| {
            let lo = ci_chunk * chunk;
            let hi = (lo + chunk).min(n);
            let mut acc = Array2::<T>::zeros((co, ci * kh * kw));
            for i in lo..hi {
                let cols = unfold(&x.index_axis(Axis(0), i), kh, kw, stride);
                let gymat = gy
                    .index_axis(Axis(0), i)
                    .into_shape((co, ho * wo))
                    .unwrap();
                acc = acc + gymat.dot(&cols.t());
            }
            acc
        })
        .collect();
    let mut gw = Array2::<T>::zeros((co, ci * kh * kw));
    for p in partials {
        gw = gw + p;
    }
    let gw = gw.into_shape((co, ci, kh, kw)).unwrap();
    (gx, gw)
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

pub struct BnCache<T> {
    pub xhat: Array4<T>,
    pub inv_std: Array1<T>,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Training-mode batch norm over (N, H, W) per channel. Updates the running
/// mean/var in place (biased variance, momentum 0.1).
pub fn bn_fwd_train<T: Real>(
    x: &Array4<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &mut [T],
    running_var: &mut [T],
) -> (Array4<T>, BnCache<T>) {
    let (n, ch, h, w) = x.dim();
    let count = c::<T>((n * h * w) as f64);
    let mut mean = Array1::<T>::zeros(ch);
    let mut var = Array1::<T>::zeros(ch);
    // Per-channel stats: parallel over channels, sequential inside.
    mean.as_slice_mut()
        .unwrap()
        .par_iter_mut()
        .zip(var.as_slice_mut().unwrap().par_iter_mut())
        .enumerate()
        .for_each(|(cidx, (m, v))| {
            let mut s = T::zero();
            for i in 0..n {
                let plane = x.index_axis(Axis(0), i);
                let plane = plane.index_axis(Axis(0), cidx);
                for val in plane.iter() {
                    s = s + *val;
                }
            }
            let mu = s / count;
            let mut sq = T::zero();
            for i in 0..n {
                let plane = x.index_axis(Axis(0), i);
                let plane = plane.index_axis(Axis(0), cidx);
                for val in plane.iter() {
                    let d = *val - mu;
                    sq = sq + d * d;
                }
            }
            *m = mu;
            *v = sq / count;
        });

    let momentum = c::<T>(BN_MOMENTUM);
    let one_m = T::one() - momentum;
    for cidx in 0..ch {
        running_mean[cidx] = one_m * running_mean[cidx] + momentum * mean[cidx];
        running_var[cidx] = one_m * running_var[cidx] + momentum * var[cidx];
    }

    let inv_std = var.mapv(|v| T::one() / (v + c::<T>(BN_EPS)).sqrt());
    let mut xhat = Array4::<T>::zeros((n, ch, h, w));
    let mut y = Array4::<T>::zeros((n, ch, h, w));
    Zip::from(&mut xhat)
        .and(&mut y)
        .and(x)
        .and_broadcast(&mean.view().insert_axis(Axis(0)).insert_axis(Axis(2)).insert_axis(Axis(3)))
        .and_broadcast(
            &inv_std
                .view()
                .insert_axis(Axis(0))
                .insert_axis(Axis(2))
                .insert_axis(Axis(3)),
        )
        .for_each(|xh, yy, &xv, &m, &istd| {
            *xh = (xv - m) * istd;
            *yy = *xh;
        });
    // scale/shift
    for cidx in 0..ch {
        let g = gamma[cidx];
        let b = beta[cidx];
        for i in 0..n {
            let mut plane = y.index_axis_mut(Axis(0), i);
            let mut plane = plane.index_axis_mut(Axis(0), cidx);
            plane.mapv_inplace(|v| v * g + b);
        }
    }
    (y, BnCache { xhat, inv_std })
}

/// Inference-mode batch norm using the running statistics.
pub fn bn_fwd_eval<T: Real>(
    x: &Array4<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
) -> Array4<T> {
    let (n, ch, _, _) = x.dim();
    let mut y = x.clone();
    for cidx in 0..ch {
        let istd = T::one() / (running_var[cidx] + c::<T>(BN_EPS)).sqrt();
        let m = running_mean[cidx];
        let g = gamma[cidx];
        let b = beta[cidx];
        for i in 0..n {
            let mut plane = y.index_axis_mut(Axis(0), i);
            let mut plane = plane.index_axis_mut(Axis(0), cidx);
            plane.mapv_inplace(|v| (v - m) * istd * g + b);
        }
    }
    y
}

/// Batch-norm backward. Returns (d input, d gamma, d beta).
pub fn bn_bwd<T: Real>(
    cache: &BnCache<T>,
    gamma: &[T],
    gy: &Array4<T>,
) -> (Array4<T>, Array1<T>, Array1<T>) {
    let (n, ch, h, w) = gy.dim();
    let count = c::<T>((n * h * w) as f64);
    let mut ggamma = Array1::<T>::zeros(ch);
    let mut gbeta = Array1::<T>::zeros(ch);
    let mut sum_gy = Array1::<T>::zeros(ch);
    let mut sum_gy_xhat = Array1::<T>::zeros(ch);

    for cidx in 0..ch {
        let mut sg = T::zero();
        let mut sgx = T::zero();
        for i in 0..n {
            let g_plane = gy.index_axis(Axis(0), i);
            let g_plane = g_plane.index_axis(Axis(0), cidx);
            let x_plane = cache.xhat.index_axis(Axis(0), i);
            let x_plane = x_plane.index_axis(Axis(0), cidx);
            for (g, xh) in g_plane.iter().zip(x_plane.iter()) {
                sg = sg + *g;
                sgx = sgx + *g * *xh;
            }
        }
        sum_gy[cidx] = sg;
        sum_gy_xhat[cidx] = sgx;
        gbeta[cidx] = sg;
        ggamma[cidx] = sgx;
    }

    let mut gx = Array4::<T>::zeros((n, ch, h, w));
    for cidx in 0..ch {
        let coef = gamma[cidx] * cache.inv_std[cidx] / count;
        let sg = sum_gy[cidx];
        let sgx = sum_gy_xhat[cidx];
        for i in 0..n {
            let gy_plane = gy.index_axis(Axis(0), i);
            let gy_plane = gy_plane.index_axis(Axis(0), cidx);
            let xh_plane = cache.xhat.index_axis(Axis(0), i);
            let xh_plane = xh_plane.index_axis(Axis(0), cidx);
            let mut gx_plane = gx.index_axis_mut(Axis(0), i);
            let mut gx_plane = gx_plane.index_axis_mut(Axis(0), cidx);
            Zip::from(&mut gx_plane)
                .and(&gy_plane)
                .and(&xh_plane)
                .for_each(|o, &g, &xh| {
                    *o = coef * (count * g - sg - xh * sgx);
                });
        }
    }
    (gx, ggamma, gbeta)
}

// ---------------------------------------------------------------------------
// ReLU
// ---------------------------------------------------------------------------

pub fn relu_fwd<T: Real>(x: &Array4<T>) -> Array4<T> {
    x.mapv(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_bwd<T: Real>(y: &Array4<T>, gy: &Array4<T>) -> Array4<T> {
    let mut gx = gy.clone();
    Zip::from(&mut gx).and(y).for_each(|g, &yv| {
        if yv <= T::zero() {
            *g = T::zero();
        }
    });
    gx
}

// ---------------------------------------------------------------------------
// Max pooling (window == stride, ceil mode)
// ---------------------------------------------------------------------------

pub struct PoolCache {
    pub argmax: Array4<u32>, // flat (h*w) input index per output slot
    pub in_shape: (usize, usize, usize, usize),
}

pub fn maxpool_fwd<T: Real>(x: &Array4<T>, window: (usize, usize)) -> (Array4<T>, PoolCache) {
    let (n, ch, h, w) = x.dim();
    let (ph, pw) = window;
    let ho = h.div_ceil(ph);
    let wo = w.div_ceil(pw);
    let mut y = Array4::<T>::zeros((n, ch, ho, wo));
    let mut arg = Array4::<u32>::zeros((n, ch, ho, wo));
    for i in 0..n {
        for cidx in 0..ch {
            let plane = x.index_axis(Axis(0), i);
            let plane = plane.index_axis(Axis(0), cidx);
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = T::neg_infinity();
                    let mut best_idx = 0u32;
                    for iy in oy * ph..((oy + 1) * ph).min(h) {
                        for ix in ox * pw..((ox + 1) * pw).min(w) {
                            let v = plane[[iy, ix]];
                            if v > best {
                                best = v;
                                best_idx = (iy * w + ix) as u32;
                            }
                        }
                    }
                    y[[i, cidx, oy, ox]] = best;
                    arg[[i, cidx, oy, ox]] = best_idx;
                }
            }
        }
    }
    (
        y,
        PoolCache {
            argmax: arg,
            in_shape: (n, ch, h, w),
        },
    )
}

pub fn maxpool_bwd<T: Real>(cache: &PoolCache, gy: &Array4<T>) -> Array4<T> {
    let (n, ch, h, w) = cache.in_shape;
    let mut gx = Array4::<T>::zeros((n, ch, h, w));
    let (_, _, ho, wo) = gy.dim();
    for i in 0..n {
        for cidx in 0..ch {
            for oy in 0..ho {
                for ox in 0..wo {
                    let flat = cache.argmax[[i, cidx, oy, ox]] as usize;
                    let iy = flat / w;
                    let ix = flat % w;
                    gx[[i, cidx, iy, ix]] =
                        gx[[i, cidx, iy, ix]] + gy[[i, cidx, oy, ox]];
                }
            }
        }
    }
    gx
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

/// y = x W^T + b with x: (N, in), W: (out, in), b: (out).
pub fn linear_fwd<T: Real>(x: &Array2<T>, w: ArrayView2<'_, T>, b: &[T]) -> Array2<T> {
    let mut y = x.dot(&w.t());
    for mut row in y.rows_mut() {
        for (v, bb) in row.iter_mut().zip(b) {
            *v = *v + *bb;
        }
    }
    y
}

/// Returns (d x, d W, d b).
pub fn linear_bwd<T: Real>(
    x: &Array2<T>,
    w: ArrayView2<'_, T>,
    gy: &Array2<T>,
) -> (Array2<T>, Array2<T>, Array1<T>) {
    let gx = gy.dot(&w);
    let gw = gy.t().dot(x);
    let gb = gy.sum_axis(Axis(0));
    (gx, gw, gb)
}

// ---------------------------------------------------------------------------
// Softmax cross-entropy
// ---------------------------------------------------------------------------

/// Numerically stable log-softmax cross-entropy for one row of logits.
/// Returns (loss, d logits).
pub fn softmax_xent<T: Real>(logits: &[T], label: usize) -> (T, Vec<T>) {
    assert!(label < logits.len());
    let max = logits
        .iter()
        .fold(T::neg_infinity(), |a, &b| if b > a { b } else { a });
    let mut denom = T::zero();
    for &v in logits {
        denom = denom + (v - max).exp();
    }
    let log_denom = denom.ln();
    let loss = -(logits[label] - max - log_denom);
    let mut grad = Vec::with_capacity(logits.len());
    for (j, &v) in logits.iter().enumerate() {
        let p = (v - max - log_denom).exp();
        grad.push(if j == label { p - T::one() } else { p });
    }
    (loss, grad)
}
