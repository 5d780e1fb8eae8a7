//! Residual convolutional encoder over front-end feature maps.
//!
//! The feature map is treated as a one-channel image (filter channels x
//! frames). A ResNet34-shaped stack (configurable block counts and width)
//! produces frame-level representations; the frequency axis is collapsed
//! by mean so each frame is a D-vector with D = 8 * base_width.

pub mod lde;

use ndarray::{Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn;
use crate::num::{c, Real};
use crate::param::{LayoutBuilder, ParamStore};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Residual blocks per stage; [3, 4, 6, 3] is the 34-layer layout.
    pub block_counts: [usize; 4],
    /// Channel width of the first stage; stages double it (w, 2w, 4w, 8w).
    pub base_width: usize,
    /// Stride of the stem convolution (freq, time).
    pub stem_stride: (usize, usize),
    /// Window of the stem max-pool (freq, time).
    pub stem_pool: (usize, usize),
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            block_counts: [3, 4, 6, 3],
            base_width: 16,
            stem_stride: (2, 2),
            stem_pool: (4, 4),
        }
    }
}

impl EncoderConfig {
    pub fn stage_widths(&self) -> [usize; 4] {
        let w = self.base_width;
        [w, 2 * w, 4 * w, 8 * w]
    }

    /// Dimensionality of each frame vector after the frequency collapse.
    pub fn frame_dim(&self) -> usize {
        self.base_width * 8
    }

    /// Total down-sampling factor along the time axis.
    pub fn total_stride(&self) -> usize {
        // stem conv, stem pool, and one stride-2 block in stages 2..4
        self.stem_stride.1 * self.stem_pool.1 * 2 * 2 * 2
    }

    fn validate(&self) -> Result<()> {
        if self.block_counts.iter().any(|&b| b == 0) || self.base_width == 0 {
            return Err(Error::parameter("block counts and width must be positive"));
        }
        Ok(())
    }
}

/// Register every encoder tensor on a layout builder.
pub fn register_params(b: &mut LayoutBuilder, cfg: &EncoderConfig) {
    let widths = cfg.stage_widths();
    b.tensor("enc.stem.w", &[cfg.base_width, 1, 3, 3]);
    b.tensor("enc.stem.bn.g", &[cfg.base_width]);
    b.tensor("enc.stem.bn.b", &[cfg.base_width]);
    for (si, &blocks) in cfg.block_counts.iter().enumerate() {
        let cin_stage = if si == 0 { widths[0] } else { widths[si - 1] };
        for bi in 0..blocks {
            let cin = if bi == 0 { cin_stage } else { widths[si] };
            let cout = widths[si];
            let p = format!("enc.s{si}.b{bi}");
            b.tensor(format!("{p}.c1.w"), &[cout, cin, 3, 3]);
            b.tensor(format!("{p}.bn1.g"), &[cout]);
            b.tensor(format!("{p}.bn1.b"), &[cout]);
            b.tensor(format!("{p}.c2.w"), &[cout, cout, 3, 3]);
            b.tensor(format!("{p}.bn2.g"), &[cout]);
            b.tensor(format!("{p}.bn2.b"), &[cout]);
            if bi == 0 && (cin != cout || si > 0) {
                b.tensor(format!("{p}.down.w"), &[cout, cin, 1, 1]);
                b.tensor(format!("{p}.down.bn.g"), &[cout]);
                b.tensor(format!("{p}.down.bn.b"), &[cout]);
            }
        }
    }
}

/// Register the batch-norm running statistics on a state layout.
pub fn register_state(b: &mut LayoutBuilder, cfg: &EncoderConfig) {
    let widths = cfg.stage_widths();
    b.tensor("enc.stem.bn.rm", &[cfg.base_width]);
    b.tensor("enc.stem.bn.rv", &[cfg.base_width]);
    for (si, &blocks) in cfg.block_counts.iter().enumerate() {
        for bi in 0..blocks {
            let cout = widths[si];
            let p = format!("enc.s{si}.b{bi}");
            for bn in ["bn1", "bn2"] {
                b.tensor(format!("{p}.{bn}.rm"), &[cout]);
                b.tensor(format!("{p}.{bn}.rv"), &[cout]);
            }
            if bi == 0 && si > 0 {
                b.tensor(format!("{p}.down.bn.rm"), &[cout]);
                b.tensor(format!("{p}.down.bn.rv"), &[cout]);
            }
        }
    }
}

fn has_down(_cfg: &EncoderConfig, si: usize, bi: usize) -> bool {
    bi == 0 && si > 0
}

fn block_stride(si: usize, bi: usize) -> (usize, usize) {
    if si > 0 && bi == 0 {
        (2, 2)
    } else {
        (1, 1)
    }
}

pub struct BlockTrace<T> {
    x: Array4<T>,
    bn1: nn::BnCache<T>,
    r1: Array4<T>,
    bn2: nn::BnCache<T>,
    down_bn: Option<nn::BnCache<T>>,
    out: Array4<T>,
}

pub struct EncoderTrace<T> {
    x0: Array4<T>,
    stem_bn: nn::BnCache<T>,
    stem_relu: Array4<T>,
    stem_pool: nn::PoolCache,
    blocks: Vec<BlockTrace<T>>,
    /// Shape before the frequency collapse: (N, D, H', T').
    pre_collapse_dim: (usize, usize, usize, usize),
}

enum Mode<'a, T> {
    Train(&'a mut ParamStore<T>),
    Eval(&'a ParamStore<T>),
}

fn bn_apply<T: Real>(
    x: &Array4<T>,
    params: &ParamStore<T>,
    name: &str,
    mode: &mut Mode<'_, T>,
) -> (Array4<T>, Option<nn::BnCache<T>>) {
    let g = params.slice(&format!("{name}.g")).to_vec();
    let b = params.slice(&format!("{name}.b")).to_vec();
    match mode {
        Mode::Train(state) => {
            let rm_name = format!("{name}.rm");
            let rv_name = format!("{name}.rv");
            let mut rm = state.slice(&rm_name).to_vec();
            let mut rv = state.slice(&rv_name).to_vec();
            let (y, cache) = nn::bn_fwd_train(x, &g, &b, &mut rm, &mut rv);
            state.slice_mut(&rm_name).copy_from_slice(&rm);
            state.slice_mut(&rv_name).copy_from_slice(&rv);
            (y, Some(cache))
        }
        Mode::Eval(state) => {
            let rm = state.slice(&format!("{name}.rm"));
            let rv = state.slice(&format!("{name}.rv"));
            (nn::bn_fwd_eval(x, &g, &b, rm, rv), None)
        }
    }
}

fn forward_impl<T: Real>(
    features: &Array4<T>,
    params: &ParamStore<T>,
    cfg: &EncoderConfig,
    mut mode: Mode<'_, T>,
    want_trace: bool,
) -> Result<(Array3<T>, Option<EncoderTrace<T>>)> {
    cfg.validate()?;
    let (n, one, _freq, frames) = features.dim();
    if one != 1 {
        return Err(Error::input("encoder expects a single input channel"));
    }
    if frames < cfg.total_stride() {
        return Err(Error::input(format!(
            "need at least {} frames, got {frames}",
            cfg.total_stride()
        )));
    }

    let stem_out = nn::conv2d_fwd(features, params.view4("enc.stem.w"), cfg.stem_stride);
    let (stem_bn_out, stem_bn) = bn_apply(&stem_out, params, "enc.stem.bn", &mut mode);
    let stem_relu = nn::relu_fwd(&stem_bn_out);
    let (mut x, stem_pool) = nn::maxpool_fwd(&stem_relu, cfg.stem_pool);

    let mut blocks = Vec::new();
    for (si, &nblocks) in cfg.block_counts.iter().enumerate() {
        for bi in 0..nblocks {
            let p = format!("enc.s{si}.b{bi}");
            let stride = block_stride(si, bi);
            let c1 = nn::conv2d_fwd(&x, params.view4(&format!("{p}.c1.w")), stride);
            let (b1, bn1) = bn_apply(&c1, params, &format!("{p}.bn1"), &mut mode);
            let r1 = nn::relu_fwd(&b1);
            let c2 = nn::conv2d_fwd(&r1, params.view4(&format!("{p}.c2.w")), (1, 1));
            let (b2, bn2) = bn_apply(&c2, params, &format!("{p}.bn2"), &mut mode);
            let (shortcut, down_bn) = if has_down(cfg, si, bi) {
                let d = nn::conv2d_fwd(&x, params.view4(&format!("{p}.down.w")), stride);
                let (db, dbn) = bn_apply(&d, params, &format!("{p}.down.bn"), &mut mode);
                (db, dbn)
            } else {
                (x.clone(), None)
            };
            let sum = &b2 + &shortcut;
            let out = nn::relu_fwd(&sum);
            if want_trace {
                blocks.push(BlockTrace {
                    x: x.clone(),
                    bn1: bn1.unwrap(),
                    r1,
                    bn2: bn2.unwrap(),
                    down_bn,
                    out: out.clone(),
                });
            }
            x = out;
        }
    }

    // Collapse frequency by mean: (N, D, H', T') -> frames (N, T', D).
    let (_, d, hp, tp) = x.dim();
    let collapsed = x.mean_axis(Axis(2)).unwrap(); // (N, D, T')
    let mut frames_out = Array3::<T>::zeros((n, tp, d));
    for i in 0..n {
        for t in 0..tp {
            for k in 0..d {
                frames_out[[i, t, k]] = collapsed[[i, k, t]];
            }
        }
    }

    let trace = if want_trace {
        Some(EncoderTrace {
            x0: features.clone(),
            stem_bn: stem_bn.unwrap(),
            stem_relu,
            stem_pool,
            blocks,
            pre_collapse_dim: (n, d, hp, tp),
        })
    } else {
        None
    };
    Ok((frames_out, trace))
}

/// Training-mode forward (updates running statistics, returns a trace).
pub fn encoder_fwd_train<T: Real>(
    features: &Array4<T>,
    params: &ParamStore<T>,
    state: &mut ParamStore<T>,
    cfg: &EncoderConfig,
) -> Result<(Array3<T>, EncoderTrace<T>)> {
    let (frames, trace) = forward_impl(features, params, cfg, Mode::Train(state), true)?;
    Ok((frames, trace.unwrap()))
}

/// Inference-mode forward using running statistics.
pub fn encoder_fwd_eval<T: Real>(
    features: &Array4<T>,
    params: &ParamStore<T>,
    state: &ParamStore<T>,
    cfg: &EncoderConfig,
) -> Result<Array3<T>> {
    let (frames, _) = forward_impl(features, params, cfg, Mode::Eval(state), false)?;
    Ok(frames)
}

/// Backward through the encoder. `g_frames` is (N, T', D); gradients for
/// every encoder tensor are accumulated into `grads`; returns the gradient
/// with respect to the input feature map.
pub fn encoder_bwd<T: Real>(
    trace: &EncoderTrace<T>,
    params: &ParamStore<T>,
    grads: &mut ParamStore<T>,
    cfg: &EncoderConfig,
    g_frames: &Array3<T>,
) -> Result<Array4<T>> {
    let (n, d, hp, tp) = trace.pre_collapse_dim;
    // Invert transpose + mean collapse.
    let inv_h = T::one() / c::<T>(hp as f64);
    let mut gx = Array4::<T>::zeros((n, d, hp, tp));
    for i in 0..n {
        for t in 0..tp {
            for k in 0..d {
                let g = g_frames[[i, t, k]] * inv_h;
                for h in 0..hp {
                    gx[[i, k, h, t]] = g;
                }
            }
        }
    }

    // Blocks in reverse.
    let mut idx = trace.blocks.len();
    for (si, &nblocks) in cfg.block_counts.iter().enumerate().rev() {
        for bi in (0..nblocks).rev() {
            idx -= 1;
            let tr = &trace.blocks[idx];
            let p = format!("enc.s{si}.b{bi}");
            let stride = block_stride(si, bi);

            let g_sum = nn::relu_bwd(&tr.out, &gx);
            // main path
            let g1 = params.slice(&format!("{p}.bn2.g")).to_vec();
            let (g_c2, ggamma2, gbeta2) = nn::bn_bwd(&tr.bn2, &g1, &g_sum);
            add_to(grads, &format!("{p}.bn2.g"), ggamma2.as_slice().unwrap());
            add_to(grads, &format!("{p}.bn2.b"), gbeta2.as_slice().unwrap());
            let (g_r1, g_w2) =
                nn::conv2d_bwd(&tr.r1, params.view4(&format!("{p}.c2.w")), &g_c2, (1, 1));
            add_to4(grads, &format!("{p}.c2.w"), &g_w2);
            let g_b1 = nn::relu_bwd(&tr.r1, &g_r1);
            let gamma1 = params.slice(&format!("{p}.bn1.g")).to_vec();
            let (g_c1, ggamma1, gbeta1) = nn::bn_bwd(&tr.bn1, &gamma1, &g_b1);
            add_to(grads, &format!("{p}.bn1.g"), ggamma1.as_slice().unwrap());
            add_to(grads, &format!("{p}.bn1.b"), gbeta1.as_slice().unwrap());
            let (mut g_x, g_w1) =
                nn::conv2d_bwd(&tr.x, params.view4(&format!("{p}.c1.w")), &g_c1, stride);
            add_to4(grads, &format!("{p}.c1.w"), &g_w1);

            // shortcut path
            if let Some(dbn) = &tr.down_bn {
                let dg = params.slice(&format!("{p}.down.bn.g")).to_vec();
                let (g_dconv, ggd, gbd) = nn::bn_bwd(dbn, &dg, &g_sum);
                add_to(grads, &format!("{p}.down.bn.g"), ggd.as_slice().unwrap());
                add_to(grads, &format!("{p}.down.bn.b"), gbd.as_slice().unwrap());
                let (g_xd, g_wd) = nn::conv2d_bwd(
                    &tr.x,
                    params.view4(&format!("{p}.down.w")),
                    &g_dconv,
                    stride,
                );
                add_to4(grads, &format!("{p}.down.w"), &g_wd);
                g_x = g_x + g_xd;
            } else {
                g_x = g_x + &g_sum;
            }
            gx = g_x;
        }
    }

    // Stem.
    let g_pool = nn::maxpool_bwd(&trace.stem_pool, &gx);
    let g_relu = nn::relu_bwd(&trace.stem_relu, &g_pool);
    let gamma = params.slice("enc.stem.bn.g").to_vec();
    let (g_conv, ggamma, gbeta) = nn::bn_bwd(&trace.stem_bn, &gamma, &g_relu);
    add_to(grads, "enc.stem.bn.g", ggamma.as_slice().unwrap());
    add_to(grads, "enc.stem.bn.b", gbeta.as_slice().unwrap());
    let (g_in, g_w) = nn::conv2d_bwd(&trace.x0, params.view4("enc.stem.w"), &g_conv, cfg.stem_stride);
    add_to4(grads, "enc.stem.w", &g_w);
    Ok(g_in)
}

fn add_to<T: Real>(grads: &mut ParamStore<T>, name: &str, values: &[T]) {
    for (dst, src) in grads.slice_mut(name).iter_mut().zip(values) {
        *dst = *dst + *src;
    }
}

fn add_to4<T: Real>(grads: &mut ParamStore<T>, name: &str, values: &Array4<T>) {
    let flat = values.as_slice().expect("contiguous gradient");
    add_to(grads, name, flat);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::ParamLayout;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig {
            block_counts: [1, 1, 1, 1],
            base_width: 2,
            stem_stride: (1, 1),
            stem_pool: (2, 2),
        }
    }

    fn init_params(cfg: &EncoderConfig, seed: u64) -> (ParamStore<f64>, ParamStore<f64>) {
        let mut b = ParamLayout::builder();
        register_params(&mut b, cfg);
        let layout = b.build();
        let mut params = ParamStore::<f64>::zeros(layout);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for spec in params.layout().specs().to_vec() {
            let slice = &mut params.data[spec.range()];
            if spec.name.ends_with(".g") {
                slice.iter_mut().for_each(|v| *v = 1.0);
            } else if spec.name.ends_with(".b") {
                slice.iter_mut().for_each(|v| *v = 0.0);
            } else {
                slice
                    .iter_mut()
                    .for_each(|v| *v = rng.gen_range(-0.3..0.3));
            }
        }
        let mut sb = ParamLayout::builder();
        register_state(&mut sb, cfg);
        let slayout = sb.build();
        let mut state = ParamStore::<f64>::zeros(slayout);
        for spec in state.layout().specs().to_vec() {
            if spec.name.ends_with(".rv") {
                state.data[spec.range()].iter_mut().for_each(|v| *v = 1.0);
            }
        }
        (params, state)
    }

    #[test]
    fn deterministic_and_shape_contract() {
        let cfg = tiny_cfg();
        let (params, state) = init_params(&cfg, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut x = Array4::<f64>::zeros((1, 1, 12, 64));
        for v in x.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let a = encoder_fwd_eval(&x, &params, &state, &cfg).unwrap();
        let b = encoder_fwd_eval(&x, &params, &state, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim().2, cfg.frame_dim());
        assert_eq!(a.dim().1, 64usize.div_ceil(cfg.total_stride()));
    }

    #[test]
    fn doubling_input_doubles_frames() {
        let cfg = tiny_cfg();
        let (params, state) = init_params(&cfg, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut x = Array4::<f64>::zeros((1, 1, 12, 160));
        for v in x.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let x2 = ndarray::concatenate(Axis(3), &[x.view(), x.view()]).unwrap();
        let t1 = encoder_fwd_eval(&x, &params, &state, &cfg).unwrap().dim().1;
        let t2 = encoder_fwd_eval(&x2, &params, &state, &cfg).unwrap().dim().1;
        assert!((t2 as isize - 2 * t1 as isize).abs() <= 1);
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_frames() {
        let cfg = tiny_cfg();
        let (params, state) = init_params(&cfg, 3);
        let x = Array4::<f64>::zeros((2, 1, 12, 64));
        let frames = encoder_fwd_eval(&x, &params, &state, &cfg).unwrap();
        assert!(frames.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn too_few_frames_is_input_error() {
        let cfg = tiny_cfg();
        let (params, state) = init_params(&cfg, 4);
        let x = Array4::<f64>::zeros((1, 1, 12, cfg.total_stride() - 1));
        assert!(encoder_fwd_eval(&x, &params, &state, &cfg).is_err());
    }

    /// Finite differences through the full encoder (train mode), checking a
    /// sample of weight gradients from every stage plus the input gradient.
    #[test]
    fn encoder_gradients_match_finite_differences() {
        let cfg = tiny_cfg();
        let (params, state) = init_params(&cfg, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut x = Array4::<f64>::zeros((2, 1, 8, 32));
        for v in x.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let weights: Vec<f64> = {
            let mut s2 = state.clone();
            let (frames, _) = encoder_fwd_train(&x, &params, &mut s2, &cfg).unwrap();
            (0..frames.len()).map(|_| rng.gen_range(-1.0..1.0)).collect()
        };
        let loss = |p: &ParamStore<f64>, x: &Array4<f64>| -> f64 {
            let mut s2 = state.clone();
            let (frames, _) = encoder_fwd_train(x, p, &mut s2, &cfg).unwrap();
            frames.iter().zip(&weights).map(|(&v, &w)| v * w).sum()
        };

        let mut s2 = state.clone();
        let (frames, trace) = encoder_fwd_train(&x, &params, &mut s2, &cfg).unwrap();
        let g_frames = Array3::from_shape_vec(frames.dim(), weights.clone()).unwrap();
        let mut grads = ParamStore::<f64>::zeros(params.layout().clone());
        let g_in = encoder_bwd(&trace, &params, &mut grads, &cfg, &g_frames).unwrap();

        let h = 1e-5;
        let mut p2 = params.clone();
        for name in [
            "enc.stem.w",
            "enc.s0.b0.c1.w",
            "enc.s1.b0.down.w",
            "enc.s2.b0.c2.w",
            "enc.s3.b0.bn1.g",
            "enc.s3.b0.bn2.b",
        ] {
            let range = params.layout().range(name);
            for probe in 0..3.min(range.len()) {
                let i = range.start + probe * (range.len() / 3).max(1);
                let orig = p2.data[i];
                p2.data[i] = orig + h;
                let lp = loss(&p2, &x);
                p2.data[i] = orig - h;
                let lm = loss(&p2, &x);
                p2.data[i] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let an = grads.data[i];
                assert!(
                    (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6) < 1e-4,
                    "{name}[{i}]: analytic {an} vs fd {fd}"
                );
            }
        }
        let mut x2 = x.clone();
        for _ in 0..6 {
            let i = rng.gen_range(0..x2.len());
            let orig = x2.as_slice().unwrap()[i];
            x2.as_slice_mut().unwrap()[i] = orig + h;
            let lp = loss(&params, &x2);
            x2.as_slice_mut().unwrap()[i] = orig - h;
            let lm = loss(&params, &x2);
            x2.as_slice_mut().unwrap()[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let an = g_in.as_slice().unwrap()[i];
            assert!(
                (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6) < 1e-4,
                "input[{i}]: {an} vs {fd}"
            );
        }
    }
}
