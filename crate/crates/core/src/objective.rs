//! Dual-head classification objective: angular softmax over instrument
//! identities plus a plain softmax over instrument families as a
//! regularization task.

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::softmax_xent;
use crate::num::{c, Real};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    /// Angular margin m (>= 1). m = 1 is plain cosine softmax.
    pub margin: u32,
    /// Weight of the family head in the total loss.
    pub beta: f64,
    /// When false the instrument head falls back to the margin-free
    /// cosine softmax (the margin ablation).
    pub a_softmax: bool,
    /// When false no family head exists at all.
    pub family_head: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            margin: 2,
            beta: 1.0,
            a_softmax: true,
            family_head: true,
        }
    }
}

impl ObjectiveConfig {
    pub fn effective_margin(&self) -> u32 {
        if self.a_softmax {
            self.margin
        } else {
            1
        }
    }
}

/// Annealing of the margin blend: the target logit is
/// (lambda cos + psi) / (1 + lambda), with lambda decayed towards
/// `floor` over training. `rate` is scaled to the run length so that
/// short desk-scale runs still reach the floor (SphereFace uses
/// 1000 / (1 + 0.1 t) over thousands of steps).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LambdaSchedule {
    pub initial: f64,
    pub floor: f64,
    pub rate: f64,
}

impl LambdaSchedule {
    /// Schedule that reaches the floor roughly 40% into `total_steps`.
    pub fn for_run(total_steps: usize) -> Self {
        let initial = 1000.0;
        let floor = 5.0;
        let knee = (total_steps as f64 * 0.4).max(1.0);
        let rate = (initial / floor - 1.0) / knee;
        LambdaSchedule {
            initial,
            floor,
            rate,
        }
    }

    pub fn at(&self, step: usize) -> f64 {
        (self.initial / (1.0 + self.rate * step as f64)).max(self.floor)
    }
}

/// Chebyshev polynomials of the first and second kind.
fn chebyshev_t(m: u32, x: f64) -> f64 {
    match m {
        0 => 1.0,
        1 => x,
        _ => {
            let mut tm2 = 1.0;
            let mut tm1 = x;
            for _ in 2..=m {
                let t = 2.0 * x * tm1 - tm2;
                tm2 = tm1;
                tm1 = t;
            }
            tm1
        }
    }
}

fn chebyshev_u(m: u32, x: f64) -> f64 {
    match m {
        0 => 1.0,
        1 => 2.0 * x,
        _ => {
            let mut um2 = 1.0;
            let mut um1 = 2.0 * x;
            for _ in 2..=m {
                let u = 2.0 * x * um1 - um2;
                um2 = um1;
                um1 = u;
            }
            um1
        }
    }
}

fn interval_index(cos_theta: f64, m: u32) -> u32 {
    let theta = cos_theta.clamp(-1.0, 1.0).acos();
    let k = (theta * m as f64 / std::f64::consts::PI).floor() as u32;
    k.min(m - 1)
}

/// psi(theta) = (-1)^k cos(m theta) - 2k on theta in [k pi/m, (k+1) pi/m],
/// expressed through cos(theta). Continuous and non-increasing on [0, pi].
pub fn psi(cos_theta: f64, m: u32) -> f64 {
    assert!(m >= 1, "margin must be >= 1");
    let k = interval_index(cos_theta, m);
    let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
    sign * chebyshev_t(m, cos_theta.clamp(-1.0, 1.0)) - 2.0 * k as f64
}

/// d psi / d cos(theta); uses T_m'(x) = m U_{m-1}(x).
pub fn psi_grad(cos_theta: f64, m: u32) -> f64 {
    let k = interval_index(cos_theta, m);
    let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
    sign * m as f64 * chebyshev_u(m - 1, cos_theta.clamp(-1.0, 1.0))
}

/// Per-sample A-softmax loss with gradients.
///
/// Non-target logits are ||e|| cos(theta_j); the target logit is
/// ||e|| (lambda cos(theta_y) + psi(theta_y)) / (1 + lambda).
/// Rows of `weights` are normalized inside the cosine, so the loss is
/// invariant to their scale.
pub fn asoftmax_loss<T: Real>(
    emb: &[T],
    label: usize,
    weights: ArrayView2<'_, T>,
    margin: u32,
    lambda: f64,
) -> Result<(T, Array1<T>, Array2<T>)> {
    let (k_classes, dim) = weights.dim();
    if label >= k_classes {
        return Err(Error::data(format!(
            "label {label} out of range for {k_classes} classes"
        )));
    }
    if emb.len() != dim {
        return Err(Error::parameter("embedding dimension mismatch"));
    }
    let ae = l2_norm(emb);
    if ae == T::zero() {
        return Err(Error::numeric("zero-norm embedding in A-softmax"));
    }

    let mut norms = vec![T::zero(); k_classes];
    let mut dots = vec![T::zero(); k_classes];
    for j in 0..k_classes {
        let row = weights.row(j);
        let mut nw = T::zero();
        let mut dot = T::zero();
        for (w, e) in row.iter().zip(emb) {
            nw = nw + *w * *w;
            dot = dot + *w * *e;
        }
        let nw = nw.sqrt();
        if nw == T::zero() {
            return Err(Error::numeric("zero-norm class row in A-softmax"));
        }
        norms[j] = nw;
        dots[j] = dot;
    }

    let lam = c::<T>(lambda);
    let one = T::one();
    let cos_y = (dots[label] / (ae * norms[label]))
        .max(-one)
        .min(one);
    let cy = cos_y.to_f64().unwrap();
    let psi_v = c::<T>(psi(cy, margin));
    let psi_d = c::<T>(psi_grad(cy, margin));
    let g_of_c = (lam * cos_y + psi_v) / (one + lam);
    let g_prime = (lam + psi_d) / (one + lam);

    let mut logits = vec![T::zero(); k_classes];
    for j in 0..k_classes {
        logits[j] = if j == label {
            ae * g_of_c
        } else {
            dots[j] / norms[j]
        };
    }
    let (loss, dz) = softmax_xent(&logits, label);

    let mut g_emb = Array1::<T>::zeros(dim);
    let mut g_w = Array2::<T>::zeros((k_classes, dim));
    for j in 0..k_classes {
        let gz = dz[j];
        if gz == T::zero() {
            continue;
        }
        if j == label {
            // z_y = ||e|| g(c)
            let nw = norms[j];
            for i in 0..dim {
                let w_i = weights[[j, i]];
                let e_i = emb[i];
                g_emb[i] = g_emb[i]
                    + gz * (g_of_c * e_i / ae + g_prime * (w_i / nw - cos_y * e_i / ae));
                g_w[[j, i]] = g_w[[j, i]]
                    + gz * g_prime * (e_i / nw - cos_y * ae * w_i / (nw * nw));
            }
        } else {
            // z_j = (W_j . e) / ||W_j||
            let nw = norms[j];
            let dot = dots[j];
            for i in 0..dim {
                let w_i = weights[[j, i]];
                g_emb[i] = g_emb[i] + gz * w_i / nw;
                g_w[[j, i]] =
                    g_w[[j, i]] + gz * (emb[i] / nw - dot * w_i / (nw * nw * nw));
            }
        }
    }
    Ok((loss, g_emb, g_w))
}

/// Plain biasful softmax over instrument families.
/// Returns (loss, d emb, d weights, d bias).
pub fn family_loss<T: Real>(
    emb: &[T],
    label: usize,
    weights: ArrayView2<'_, T>,
    bias: &[T],
) -> Result<(T, Array1<T>, Array2<T>, Array1<T>)> {
    let (k_classes, dim) = weights.dim();
    if label >= k_classes {
        return Err(Error::data(format!(
            "family label {label} out of range for {k_classes} classes"
        )));
    }
    let mut logits = vec![T::zero(); k_classes];
    for j in 0..k_classes {
        let mut acc = bias[j];
        for (w, e) in weights.row(j).iter().zip(emb) {
            acc = acc + *w * *e;
        }
        logits[j] = acc;
    }
    let (loss, dz) = softmax_xent(&logits, label);
    let mut g_emb = Array1::<T>::zeros(dim);
    let mut g_w = Array2::<T>::zeros((k_classes, dim));
    let mut g_b = Array1::<T>::zeros(k_classes);
    for j in 0..k_classes {
        let gz = dz[j];
        g_b[j] = gz;
        for i in 0..dim {
            g_emb[i] = g_emb[i] + gz * weights[[j, i]];
            g_w[[j, i]] = gz * emb[i];
        }
    }
    Ok((loss, g_emb, g_w, g_b))
}

/// Per-batch loss components. `total = instr + beta * family` holds exactly.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub instr: f64,
    pub family: f64,
    pub beta: f64,
}

impl LossBreakdown {
    pub fn combine(instr: f64, family: f64, beta: f64) -> Self {
        LossBreakdown {
            total: instr + beta * family,
            instr,
            family,
            beta,
        }
    }
}

/// Per-sample dual-head loss. Family gradients are `None` when the family
/// head is ablated.
#[allow(clippy::too_many_arguments)]
pub fn multitask_loss<T: Real>(
    emb: &[T],
    instr_label: usize,
    family_label: usize,
    instr_weights: ArrayView2<'_, T>,
    family_weights: Option<(ArrayView2<'_, T>, &[T])>,
    cfg: &ObjectiveConfig,
    lambda: f64,
) -> Result<MultitaskOut<T>> {
    let margin = cfg.effective_margin();
    let (instr, mut g_emb, g_instr_w) =
        asoftmax_loss(emb, instr_label, instr_weights, margin, lambda)?;
    let mut family = T::zero();
    let mut g_family = None;
    if cfg.family_head {
        let (fw, fb) = family_weights
            .ok_or_else(|| Error::parameter("family head enabled but weights missing"))?;
        let (floss, g_e, g_w, g_b) = family_loss(emb, family_label, fw, fb)?;
        let beta = c::<T>(cfg.beta);
        for (dst, src) in g_emb.iter_mut().zip(g_e.iter()) {
            *dst = *dst + beta * *src;
        }
        family = floss;
        g_family = Some((g_w, g_b));
    }
    let instr_f = instr.to_f64().unwrap();
    let family_f = family.to_f64().unwrap();
    let beta = if cfg.family_head { cfg.beta } else { 0.0 };
    Ok(MultitaskOut {
        breakdown: LossBreakdown::combine(instr_f, family_f, beta),
        g_emb,
        g_instr_w: g_instr_w,
        g_family,
    })
}

pub struct MultitaskOut<T> {
    pub breakdown: LossBreakdown,
    pub g_emb: Array1<T>,
    pub g_instr_w: Array2<T>,
    pub g_family: Option<(Array2<T>, Array1<T>)>,
}

fn l2_norm<T: Real>(v: &[T]) -> T {
    let mut acc = T::zero();
    for x in v {
        acc = acc + *x * *x;
    }
    acc.sqrt()
}

/// Renormalize every row of the instrument head to unit norm (applied
/// after each optimizer update).
pub fn renormalize_rows<T: Real>(weights: &mut [T], dim: usize) {
    for row in weights.chunks_mut(dim) {
        let norm = l2_norm(row);
        if norm > T::zero() {
            for v in row.iter_mut() {
                *v = *v / norm;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn psi_hand_values() {
        // theta = pi/2, m = 2 -> k = 1: (-1) cos(pi) - 2 = -1
        assert!((psi(0.0, 2) - (-1.0)).abs() < 1e-12);
        // theta = 0, m = 2 -> k = 0: cos(0) = 1
        assert!((psi(1.0, 2) - 1.0).abs() < 1e-12);
        // m = 1 is the identity on cos
        for c in [-0.99, -0.4, 0.0, 0.3, 1.0] {
            assert!((psi(c, 1) - c).abs() < 1e-12);
        }
    }

    #[test]
    fn psi_is_continuous_and_nonincreasing() {
        for m in 1..=4u32 {
            let mut prev = f64::INFINITY;
            let mut prev_theta = -1.0;
            for i in 0..=2000 {
                let theta = std::f64::consts::PI * i as f64 / 2000.0;
                let v = psi(theta.cos(), m);
                assert!(
                    v <= prev + 1e-9,
                    "psi not non-increasing at m={m}, theta={theta}"
                );
                if prev_theta >= 0.0 {
                    assert!((v - prev).abs() < 0.02, "jump at m={m}, theta={theta}");
                }
                prev = v;
                prev_theta = theta;
            }
        }
    }

    #[test]
    fn margin_penalizes_target_logit() {
        // psi(theta) <= cos(theta) on (0, pi) for m >= 2
        for m in 2..=4u32 {
            for i in 1..200 {
                let theta = std::f64::consts::PI * i as f64 / 200.0;
                assert!(psi(theta.cos(), m) <= theta.cos() + 1e-12);
            }
        }
    }

    #[test]
    fn m1_lambda0_is_plain_cosine_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let emb: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut w = Array2::<f64>::zeros((3, 6));
        for v in w.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let (loss, _, _) = asoftmax_loss(&emb, 1, w.view(), 1, 0.0).unwrap();
        // manual plain softmax over ||e|| cos(theta_j)
        let ae = emb.iter().map(|v| v * v).sum::<f64>().sqrt();
        let logits: Vec<f64> = (0..3)
            .map(|j| {
                let row = w.row(j);
                let dot: f64 = row.iter().zip(&emb).map(|(a, b)| a * b).sum();
                let nw = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                ae * dot / (ae * nw)
            })
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = logits.iter().map(|v| (v - max).exp()).sum();
        let expect = -(logits[1] - max - denom.ln());
        assert!((loss - expect).abs() < 1e-12);
    }

    #[test]
    fn loss_invariant_to_row_scale_and_argmax_to_emb_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let emb: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut w = Array2::<f64>::zeros((4, 5));
        for v in w.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let (l1, _, _) = asoftmax_loss(&emb, 2, w.view(), 2, 3.0).unwrap();
        let w2 = w.mapv(|v| v * 7.5);
        let (l2, _, _) = asoftmax_loss(&emb, 2, w2.view(), 2, 3.0).unwrap();
        assert!((l1 - l2).abs() < 1e-10);

        // predicted class from margin-free logits is scale invariant
        let logits = |e: &[f64]| -> Vec<f64> {
            let ae = e.iter().map(|v| v * v).sum::<f64>().sqrt();
            (0..4)
                .map(|j| {
                    let row = w.row(j);
                    let dot: f64 = row.iter().zip(e).map(|(a, b)| a * b).sum();
                    let nw = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    ae * dot / (ae * nw)
                })
                .collect()
        };
        let argmax = |v: &[f64]| {
            v.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0
        };
        let scaled: Vec<f64> = emb.iter().map(|v| 42.0 * v).collect();
        assert_eq!(argmax(&logits(&emb)), argmax(&logits(&scaled)));
    }

    #[test]
    fn zero_embedding_is_numeric_error() {
        let w = Array2::<f64>::from_elem((2, 3), 0.5);
        assert!(asoftmax_loss(&[0.0, 0.0, 0.0], 0, w.view(), 2, 5.0).is_err());
    }

    #[test]
    fn unknown_label_is_data_error() {
        let w = Array2::<f64>::from_elem((2, 3), 0.5);
        assert!(asoftmax_loss(&[1.0, 0.0, 0.0], 5, w.view(), 2, 5.0).is_err());
        let b = vec![0.0; 2];
        assert!(family_loss(&[1.0, 0.0, 0.0], 2, w.view(), &b).is_err());
    }

    #[test]
    fn asoftmax_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for margin in [1u32, 2, 3] {
            for _ in 0..4 {
                let dim = rng.gen_range(3..7);
                let k = rng.gen_range(2..5);
                let emb: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let mut w = Array2::<f64>::zeros((k, dim));
                for v in w.iter_mut() {
                    *v = rng.gen_range(-1.0..1.0);
                }
                let label = rng.gen_range(0..k);
                let lambda = rng.gen_range(0.0..8.0);
                let (_, g_emb, g_w) =
                    asoftmax_loss(&emb, label, w.view(), margin, lambda).unwrap();
                let h = 1e-6;
                let mut emb2 = emb.clone();
                for i in 0..dim {
                    emb2[i] += h;
                    let (lp, _, _) =
                        asoftmax_loss(&emb2, label, w.view(), margin, lambda).unwrap();
                    emb2[i] -= 2.0 * h;
                    let (lm, _, _) =
                        asoftmax_loss(&emb2, label, w.view(), margin, lambda).unwrap();
                    emb2[i] += h;
                    let fd = (lp - lm) / (2.0 * h);
                    assert!(
                        (g_emb[i] - fd).abs() / g_emb[i].abs().max(fd.abs()).max(1e-6) < 1e-4,
                        "emb[{i}] m={margin}: {} vs {fd}",
                        g_emb[i]
                    );
                }
                let mut w2 = w.clone();
                for i in 0..w2.len() {
                    let orig = w2.as_slice().unwrap()[i];
                    w2.as_slice_mut().unwrap()[i] = orig + h;
                    let (lp, _, _) =
                        asoftmax_loss(&emb, label, w2.view(), margin, lambda).unwrap();
                    w2.as_slice_mut().unwrap()[i] = orig - h;
                    let (lm, _, _) =
                        asoftmax_loss(&emb, label, w2.view(), margin, lambda).unwrap();
                    w2.as_slice_mut().unwrap()[i] = orig;
                    let fd = (lp - lm) / (2.0 * h);
                    let an = g_w.as_slice().unwrap()[i];
                    assert!(
                        (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6) < 1e-4,
                        "w[{i}] m={margin}: {an} vs {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn multitask_breakdown_and_ablation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let emb: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut iw = Array2::<f64>::zeros((3, 8));
        let mut fw = Array2::<f64>::zeros((2, 8));
        for v in iw.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        for v in fw.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let fb = vec![0.1, -0.2];

        let cfg = ObjectiveConfig::default();
        let out = multitask_loss(&emb, 1, 0, iw.view(), Some((fw.view(), &fb)), &cfg, 5.0)
            .unwrap();
        let b = out.breakdown;
        assert!((b.total - (b.instr + b.beta * b.family)).abs() < 1e-12);
        assert!(out.g_family.is_some());

        // beta = 0 keeps the family head but removes its weight in total
        let cfg0 = ObjectiveConfig {
            beta: 0.0,
            ..ObjectiveConfig::default()
        };
        let out0 =
            multitask_loss(&emb, 1, 0, iw.view(), Some((fw.view(), &fb)), &cfg0, 5.0).unwrap();
        assert!((out0.breakdown.total - out0.breakdown.instr).abs() < 1e-12);

        // ablated family head: no family loss at all
        let cfg_no = ObjectiveConfig {
            family_head: false,
            ..ObjectiveConfig::default()
        };
        let out_no = multitask_loss(&emb, 1, 0, iw.view(), None, &cfg_no, 5.0).unwrap();
        assert_eq!(out_no.breakdown.family, 0.0);
        assert!(out_no.g_family.is_none());

        // one-class family problem is exactly zero loss
        let fw1 = Array2::<f64>::from_elem((1, 8), 0.3);
        let fb1 = vec![0.5];
        let (l, _, _, _) = family_loss(&emb, 0, fw1.view(), &fb1).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn multitask_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let emb: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut iw = Array2::<f64>::zeros((3, 6));
        let mut fw = Array2::<f64>::zeros((3, 6));
        for v in iw.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        for v in fw.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let fb = vec![0.0, 0.1, -0.3];
        let cfg = ObjectiveConfig::default();
        let run = |e: &[f64]| -> f64 {
            multitask_loss(e, 2, 1, iw.view(), Some((fw.view(), &fb)), &cfg, 4.0)
                .unwrap()
                .breakdown
                .total
        };
        let out =
            multitask_loss(&emb, 2, 1, iw.view(), Some((fw.view(), &fb)), &cfg, 4.0).unwrap();
        let h = 1e-6;
        let mut e2 = emb.clone();
        for i in 0..e2.len() {
            e2[i] += h;
            let lp = run(&e2);
            e2[i] -= 2.0 * h;
            let lm = run(&e2);
            e2[i] += h;
            let fd = (lp - lm) / (2.0 * h);
            let an = out.g_emb[i];
            assert!(
                (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6) < 1e-4,
                "emb[{i}]: {an} vs {fd}"
            );
        }
    }

    #[test]
    fn renormalize_makes_unit_rows() {
        let mut w = vec![3.0f64, 4.0, 0.0, 5.0, 12.0, 0.0];
        renormalize_rows(&mut w, 3);
        let n1 = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
        let n2 = (w[3] * w[3] + w[4] * w[4] + w[5] * w[5]).sqrt();
        assert!((n1 - 1.0).abs() < 1e-12);
        assert!((n2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lambda_schedule_reaches_floor() {
        let s = LambdaSchedule::for_run(300);
        assert!((s.at(0) - 1000.0).abs() < 1e-9);
        assert!(s.at(120) <= 5.0 + 1e-9);
        assert_eq!(s.at(10_000), 5.0);
    }
}
