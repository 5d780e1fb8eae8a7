//! Learnable dictionary encoding: soft assignment of frame vectors to a
//! set of learnable cluster centers, aggregating the weighted residuals.
//!
//! w_tc = softmax_c( -s_c ||r_t - mu_c||^2 )
//! e_c  = sum_t w_tc (r_t - mu_c) / (sum_t w_tc + eps)

use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::num::{c, Real};

pub const LDE_EPS: f64 = 1e-8;

/// Positivity map for the stored raw scales.
pub fn softplus<T: Real>(x: T) -> T {
    let zero = T::zero();
    let pos = if x > zero { x } else { zero };
    pos + (-(x.abs())).exp().ln_1p()
}

pub fn softplus_grad<T: Real>(x: T) -> T {
    // sigmoid(x)
    T::one() / (T::one() + (-x).exp())
}

pub struct LdeCache<T> {
    /// Posteriors w: (T, C).
    pub posteriors: Array2<T>,
    /// Squared distances d: (T, C).
    dist_sq: Array2<T>,
    /// Per-cluster posterior mass S_c and aggregate u_c.
    mass: Array1<T>,
    agg: Array2<T>,
}

/// Pool frame vectors (T, D) into a (C, D) residual matrix.
pub fn lde_pool<T: Real>(
    frames: ArrayView2<'_, T>,
    centers: ArrayView2<'_, T>,
    scales: &[T],
) -> Result<(Array2<T>, LdeCache<T>)> {
    let (t_len, d) = frames.dim();
    let (c_len, d2) = centers.dim();
    if t_len == 0 {
        return Err(Error::input("LDE needs at least one frame"));
    }
    if d != d2 || scales.len() != c_len {
        return Err(Error::parameter("LDE dimension mismatch"));
    }

    let mut dist_sq = Array2::<T>::zeros((t_len, c_len));
    for t in 0..t_len {
        for k in 0..c_len {
            let mut acc = T::zero();
            for j in 0..d {
                let diff = frames[[t, j]] - centers[[k, j]];
                acc = acc + diff * diff;
            }
            dist_sq[[t, k]] = acc;
        }
    }

    let mut posteriors = Array2::<T>::zeros((t_len, c_len));
    for t in 0..t_len {
        let mut max = T::neg_infinity();
        for k in 0..c_len {
            let a = -scales[k] * dist_sq[[t, k]];
            if a > max {
                max = a;
            }
            posteriors[[t, k]] = a;
        }
        let mut denom = T::zero();
        for k in 0..c_len {
            let e = (posteriors[[t, k]] - max).exp();
            posteriors[[t, k]] = e;
            denom = denom + e;
        }
        for k in 0..c_len {
            posteriors[[t, k]] = posteriors[[t, k]] / denom;
        }
    }

    let eps = c::<T>(LDE_EPS);
    let mut mass = Array1::<T>::zeros(c_len);
    let mut agg = Array2::<T>::zeros((c_len, d));
    for t in 0..t_len {
        for k in 0..c_len {
            let w = posteriors[[t, k]];
            mass[k] = mass[k] + w;
            for j in 0..d {
                agg[[k, j]] = agg[[k, j]] + w * (frames[[t, j]] - centers[[k, j]]);
            }
        }
    }
    let mut pooled = Array2::<T>::zeros((c_len, d));
    for k in 0..c_len {
        let z = mass[k] + eps;
        for j in 0..d {
            pooled[[k, j]] = agg[[k, j]] / z;
        }
    }
    Ok((
        pooled,
        LdeCache {
            posteriors,
            dist_sq,
            mass,
            agg,
        },
    ))
}

/// Backward of [`lde_pool`]. Returns (d frames, d centers, d scales).
pub fn lde_bwd<T: Real>(
    frames: ArrayView2<'_, T>,
    centers: ArrayView2<'_, T>,
    scales: &[T],
    cache: &LdeCache<T>,
    g_pooled: ArrayView2<'_, T>,
) -> (Array2<T>, Array2<T>, Array1<T>) {
    let (t_len, d) = frames.dim();
    let c_len = centers.nrows();
    let eps = c::<T>(LDE_EPS);

    // Through e_c = u_c / (S_c + eps).
    let mut g_agg = Array2::<T>::zeros((c_len, d)); // dL/du_c
    let mut g_mass = Array1::<T>::zeros(c_len); // dL/dS_c
    for k in 0..c_len {
        let z = cache.mass[k] + eps;
        let mut dot = T::zero();
        for j in 0..d {
            g_agg[[k, j]] = g_pooled[[k, j]] / z;
            dot = dot + g_pooled[[k, j]] * cache.agg[[k, j]];
        }
        g_mass[k] = -dot / (z * z);
    }

    let mut g_frames = Array2::<T>::zeros((t_len, d));
    let mut g_centers = Array2::<T>::zeros((c_len, d));
    let mut g_scales = Array1::<T>::zeros(c_len);

    // Direct (fixed-w) paths of u_c = sum_t w_tc (r_t - mu_c).
    for k in 0..c_len {
        for j in 0..d {
            g_centers[[k, j]] = g_centers[[k, j]] - cache.mass[k] * g_agg[[k, j]];
        }
    }
    for t in 0..t_len {
        for k in 0..c_len {
            let w = cache.posteriors[[t, k]];
            for j in 0..d {
                g_frames[[t, j]] = g_frames[[t, j]] + w * g_agg[[k, j]];
            }
        }
    }

    // Through the posteriors: q_tc = dL/dw_tc, then softmax backward into
    // a_tc = -s_c d_tc.
    for t in 0..t_len {
        let mut q = vec![T::zero(); c_len];
        for k in 0..c_len {
            let mut dot = T::zero();
            for j in 0..d {
                dot = dot + g_agg[[k, j]] * (frames[[t, j]] - centers[[k, j]]);
            }
            q[k] = dot + g_mass[k];
        }
        let mut wq = T::zero();
        for k in 0..c_len {
            wq = wq + cache.posteriors[[t, k]] * q[k];
        }
        for k in 0..c_len {
            let w = cache.posteriors[[t, k]];
            let g_a = w * (q[k] - wq);
            // a = -s_c * d
            g_scales[k] = g_scales[k] - g_a * cache.dist_sq[[t, k]];
            let g_d = -scales[k] * g_a;
            for j in 0..d {
                let diff = frames[[t, j]] - centers[[k, j]];
                let two = c::<T>(2.0);
                g_frames[[t, j]] = g_frames[[t, j]] + g_d * two * diff;
                g_centers[[k, j]] = g_centers[[k, j]] - g_d * two * diff;
            }
        }
    }

    (g_frames, g_centers, g_scales)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn single_cluster_reduces_to_mean_residual() {
        let frames: Array2<f64> = arr2(&[[1.0, 2.0], [3.0, 4.0], [5.0, 0.0]]);
        let centers: Array2<f64> = arr2(&[[1.0, 1.0]]);
        let (pooled, cache) = lde_pool(frames.view(), centers.view(), &[0.7]).unwrap();
        for t in 0..3 {
            assert!((cache.posteriors[[t, 0]] - 1.0).abs() < 1e-15);
        }
        let mean = [3.0, 2.0];
        for j in 0..2 {
            assert!((pooled[[0, j]] - (mean[j] - centers[[0, j]])).abs() < 1e-8);
        }
    }

    #[test]
    fn matching_center_gets_zero_residual() {
        let mu: Array2<f64> = arr2(&[[0.5, -0.5], [2.0, 2.0]]);
        let frames: Array2<f64> = arr2(&[[0.5, -0.5], [0.5, -0.5]]);
        let (pooled, cache) = lde_pool(frames.view(), mu.view(), &[1.0, 1.0]).unwrap();
        for j in 0..2 {
            assert!(pooled[[0, j]].abs() < 1e-12);
        }
        // e_c = (mu_j - mu_c) * w for the non-matching cluster
        let w = cache.posteriors[[0, 1]];
        let z = cache.mass[1] + LDE_EPS;
        for j in 0..2 {
            let expect = 2.0 * w * (mu[[0, j]] - mu[[1, j]]) / z;
            assert!((pooled[[1, j]] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let frames = rand_mat(&mut rng, 7, 4);
        let centers = rand_mat(&mut rng, 3, 4);
        let scales = [0.9f64, 1.4, 0.3];
        let (pooled, _) = lde_pool(frames.view(), centers.view(), &scales).unwrap();

        // Direct transcription of the definition.
        for k in 0..3 {
            let mut num = [0.0f64; 4];
            let mut den = 0.0f64;
            for t in 0..7 {
                let mut logits = [0.0f64; 3];
                for kk in 0..3 {
                    let mut dist = 0.0;
                    for j in 0..4 {
                        dist += (frames[[t, j]] - centers[[kk, j]]).powi(2);
                    }
                    logits[kk] = -scales[kk] * dist;
                }
                let denom: f64 = logits.iter().map(|v| v.exp()).sum();
                let w = logits[k].exp() / denom;
                den += w;
                for j in 0..4 {
                    num[j] += w * (frames[[t, j]] - centers[[k, j]]);
                }
            }
            for j in 0..4 {
                let expect = num[j] / (den + LDE_EPS);
                assert!(
                    (pooled[[k, j]] - expect).abs() < 1e-12,
                    "k={k} j={j}: {} vs {expect}",
                    pooled[[k, j]]
                );
            }
        }
    }

    #[test]
    fn permutation_invariant_and_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let frames = rand_mat(&mut rng, 9, 5);
        let centers = rand_mat(&mut rng, 4, 5);
        let scales = [1.0f64, 0.5, 2.0, 0.8];
        let (pooled, cache) = lde_pool(frames.view(), centers.view(), &scales).unwrap();
        for t in 0..9 {
            let s: f64 = (0..4).map(|k| cache.posteriors[[t, k]]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let mut shuffled = frames.clone();
        let perm = [8usize, 2, 5, 0, 7, 1, 4, 6, 3];
        for (dst, &src) in perm.iter().enumerate() {
            shuffled.row_mut(dst).assign(&frames.row(src));
        }
        let (pooled2, _) = lde_pool(shuffled.view(), centers.view(), &scales).unwrap();
        for (a, b) in pooled.iter().zip(pooled2.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..5 {
            let t_len = rng.gen_range(3..8);
            let c_len = rng.gen_range(2..5);
            let d = rng.gen_range(2..6);
            let frames = rand_mat(&mut rng, t_len, d);
            let centers = rand_mat(&mut rng, c_len, d);
            let scales: Vec<f64> = (0..c_len).map(|_| rng.gen_range(0.2..2.0)).collect();
            let gw = rand_mat(&mut rng, c_len, d);
            let loss = |f: &Array2<f64>, mu: &Array2<f64>, s: &[f64]| -> f64 {
                let (pooled, _) = lde_pool(f.view(), mu.view(), s).unwrap();
                (&pooled * &gw).sum()
            };
            let (_, cache) = lde_pool(frames.view(), centers.view(), &scales).unwrap();
            let (gf, gc, gs) = lde_bwd(frames.view(), centers.view(), &scales, &cache, gw.view());
            let h = 1e-6;

            let mut f2 = frames.clone();
            for i in 0..f2.len() {
                let orig = f2.as_slice().unwrap()[i];
                f2.as_slice_mut().unwrap()[i] = orig + h;
                let lp = loss(&f2, &centers, &scales);
                f2.as_slice_mut().unwrap()[i] = orig - h;
                let lm = loss(&f2, &centers, &scales);
                f2.as_slice_mut().unwrap()[i] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let an = gf.as_slice().unwrap()[i];
                assert!((an - fd).abs() / an.abs().max(fd.abs()).max(1e-6) < 1e-4);
            }
            let mut mu2 = centers.clone();
            for i in 0..mu2.len() {
                let orig = mu2.as_slice().unwrap()[i];
                mu2.as_slice_mut().unwrap()[i] = orig + h;
                let lp = loss(&frames, &mu2, &scales);
                mu2.as_slice_mut().unwrap()[i] = orig - h;
                let lm = loss(&frames, &mu2, &scales);
                mu2.as_slice_mut().unwrap()[i] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let an = gc.as_slice().unwrap()[i];
                assert!((an - fd).abs() / an.abs().max(fd.abs()).max(1e-6) < 1e-4);
            }
            let mut s2 = scales.clone();
            for i in 0..s2.len() {
                let orig = s2[i];
                s2[i] = orig + h;
                let lp = loss(&frames, &centers, &s2);
                s2[i] = orig - h;
                let lm = loss(&frames, &centers, &s2);
                s2[i] = orig;
                let fd = (lp - lm) / (2.0 * h);
                assert!((gs[i] - fd).abs() / gs[i].abs().max(fd.abs()).max(1e-6) < 1e-4);
            }
        }
    }

    #[test]
    fn softplus_is_positive_and_smooth() {
        for x in [-20.0f64, -1.0, 0.0, 1.0, 30.0] {
            assert!(softplus(x) > 0.0);
            let h = 1e-6;
            let fd = (softplus(x + h) - softplus(x - h)) / (2.0 * h);
            assert!((softplus_grad(x) - fd).abs() < 1e-6);
        }
    }
}
