//! Trainable time-domain masking enhancer.
//!
//! A reduced ConvTasNet-style stack: learned analysis basis, a temporal
//! convolutional separator that emits a sigmoid mask over basis
//! coefficients, and a learned synthesis basis applied by overlap-add at
//! 50% frame overlap. Output length always equals input length.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, VarId};
use crate::error::{Error, Result};
use crate::kernels;
use crate::signal::Waveform;
use crate::tensor::Tensor;

/// Normalization floor inside separator blocks.
pub const SE_NORM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SEConfig {
    /// Number of basis filters.
    pub n_basis: usize,
    /// Analysis window length in samples; stride is half of it.
    pub window: usize,
    /// Separator channel width.
    pub bottleneck: usize,
    /// Dilation cycles in the separator.
    pub repeats: usize,
    /// Blocks per cycle; block j uses dilation 2^j.
    pub blocks_per_repeat: usize,
    /// Hidden width inside a block.
    pub hidden: usize,
    /// Depthwise kernel width.
    pub kernel: usize,
}

impl SEConfig {
    /// Full-scale hyperparameters of the original separation network;
    /// far beyond what desk-scale training needs.
    pub fn full_scale() -> Self {
        SEConfig {
            n_basis: 4096,
            window: 320,
            bottleneck: 256,
            repeats: 4,
            blocks_per_repeat: 8,
            hidden: 512,
            kernel: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.window.is_multiple_of(2) {
            return Err(Error::InvalidConfig("window length must be even".into()));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::InvalidConfig("depthwise kernel must be odd".into()));
        }
        if [
            self.n_basis,
            self.window,
            self.bottleneck,
            self.repeats,
            self.blocks_per_repeat,
            self.hidden,
            self.kernel,
        ]
        .iter()
        .any(|&v| v < 1)
        {
            return Err(Error::InvalidConfig("all model dims must be >= 1".into()));
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        self.window / 2
    }

    /// Frame count and padded length for an input of `t` samples.
    pub fn frames_and_padded(&self, t: usize) -> (usize, usize) {
        let stride = self.stride();
        let frames = (t - self.window).div_ceil(stride) + 1;
        (frames, (frames - 1) * stride + self.window)
    }
}

impl Default for SEConfig {
    /// Desk-scale model: a full training run fits in minutes on a CPU.
    fn default() -> Self {
        SEConfig {
            n_basis: 128,
            window: 32,
            bottleneck: 32,
            repeats: 2,
            blocks_per_repeat: 4,
            hidden: 64,
            kernel: 3,
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct TcnBlock {
    pub in_w: Tensor,    // [h, b]
    pub in_b: Tensor,    // [h]
    pub prelu1: Tensor,  // [1]
    pub norm1_g: Tensor, // [h]
    pub norm1_b: Tensor, // [h]
    pub dw_w: Tensor,    // [h, p]
    pub dw_b: Tensor,    // [h]
    pub prelu2: Tensor,  // [1]
    pub norm2_g: Tensor, // [h]
    pub norm2_b: Tensor, // [h]
    pub out_w: Tensor,   // [b, h]
    pub out_b: Tensor,   // [b]
}

#[derive(Clone, Debug)]
pub struct SEParams {
    config: SEConfig,
    pub(crate) enc_basis: Tensor,    // [n_basis, 1, window]
    pub(crate) in_norm_g: Tensor,    // [n_basis]
    pub(crate) in_norm_b: Tensor,    // [n_basis]
    pub(crate) bottleneck_w: Tensor, // [b, n_basis]
    pub(crate) bottleneck_b: Tensor, // [b]
    pub(crate) blocks: Vec<TcnBlock>,
    pub(crate) mask_prelu: Tensor, // [1]
    pub(crate) mask_w: Tensor,     // [n_basis, b]
    pub(crate) mask_b: Tensor,     // [n_basis]
    pub(crate) dec_basis: Tensor,  // [n_basis, window]
}

/// Mirror of `SEParams` as tape nodes, in the same canonical order.
pub struct SeVars {
    pub ids: Vec<VarId>,
}

/// Deterministic initialization from a seed; biases start at zero.
pub fn init_se_model(config: &SEConfig, seed: u64) -> Result<SEParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (nb, l, b, h, p) = (
        config.n_basis,
        config.window,
        config.bottleneck,
        config.hidden,
        config.kernel,
    );
    let basis_std = (1.0 / l as f64).sqrt();
    let mut params = SEParams {
        config: *config,
        enc_basis: randn(&mut rng, &[nb, 1, l], basis_std),
        in_norm_g: ones(&[nb]),
        in_norm_b: Tensor::zeros(&[nb]),
        bottleneck_w: randn(&mut rng, &[b, nb], (2.0 / nb as f64).sqrt()),
        bottleneck_b: Tensor::zeros(&[b]),
        blocks: (0..config.repeats * config.blocks_per_repeat)
            .map(|_| TcnBlock {
                in_w: randn(&mut rng, &[h, b], (2.0 / b as f64).sqrt()),
                in_b: Tensor::zeros(&[h]),
                prelu1: Tensor::scalar(0.25),
                norm1_g: ones(&[h]),
                norm1_b: Tensor::zeros(&[h]),
                dw_w: randn(&mut rng, &[h, p], (2.0 / p as f64).sqrt()),
                dw_b: Tensor::zeros(&[h]),
                prelu2: Tensor::scalar(0.25),
                norm2_g: ones(&[h]),
                norm2_b: Tensor::zeros(&[h]),
                out_w: randn(&mut rng, &[b, h], (2.0 / h as f64).sqrt()),
                out_b: Tensor::zeros(&[b]),
            })
            .collect(),
        mask_prelu: Tensor::scalar(0.25),
        mask_w: randn(&mut rng, &[nb, b], (1.0 / b as f64).sqrt()),
        mask_b: Tensor::zeros(&[nb]),
        dec_basis: randn(&mut rng, &[nb, l], basis_std),
    };
    for (_, t) in params.named_tensors_mut() {
        t.round_to_f32();
    }
    Ok(params)
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("std must be finite");
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| normal.sample(rng)).collect())
}

fn ones(shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, vec![1.0; n])
}

impl SEParams {
    pub fn config(&self) -> &SEConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Canonical (name, tensor) listing; defines gradient, optimizer and
    /// checkpoint layout. `SeVars::build` pushes leaves in this order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("enc_basis".into(), &self.enc_basis),
            ("in_norm.gamma".into(), &self.in_norm_g),
            ("in_norm.beta".into(), &self.in_norm_b),
            ("bottleneck.w".into(), &self.bottleneck_w),
            ("bottleneck.b".into(), &self.bottleneck_b),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.in.w"), &b.in_w));
            out.push((format!("block{i}.in.b"), &b.in_b));
            out.push((format!("block{i}.prelu1"), &b.prelu1));
            out.push((format!("block{i}.norm1.gamma"), &b.norm1_g));
            out.push((format!("block{i}.norm1.beta"), &b.norm1_b));
            out.push((format!("block{i}.dw.w"), &b.dw_w));
            out.push((format!("block{i}.dw.b"), &b.dw_b));
            out.push((format!("block{i}.prelu2"), &b.prelu2));
            out.push((format!("block{i}.norm2.gamma"), &b.norm2_g));
            out.push((format!("block{i}.norm2.beta"), &b.norm2_b));
            out.push((format!("block{i}.out.w"), &b.out_w));
            out.push((format!("block{i}.out.b"), &b.out_b));
        }
        out.push(("mask.prelu".into(), &self.mask_prelu));
        out.push(("mask.w".into(), &self.mask_w));
        out.push(("mask.b".into(), &self.mask_b));
        out.push(("dec_basis".into(), &self.dec_basis));
        out
    }

    pub(crate) fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("enc_basis".into(), &mut self.enc_basis),
            ("in_norm.gamma".into(), &mut self.in_norm_g),
            ("in_norm.beta".into(), &mut self.in_norm_b),
            ("bottleneck.w".into(), &mut self.bottleneck_w),
            ("bottleneck.b".into(), &mut self.bottleneck_b),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("block{i}.in.w"), &mut b.in_w));
            out.push((format!("block{i}.in.b"), &mut b.in_b));
            out.push((format!("block{i}.prelu1"), &mut b.prelu1));
            out.push((format!("block{i}.norm1.gamma"), &mut b.norm1_g));
            out.push((format!("block{i}.norm1.beta"), &mut b.norm1_b));
            out.push((format!("block{i}.dw.w"), &mut b.dw_w));
            out.push((format!("block{i}.dw.b"), &mut b.dw_b));
            out.push((format!("block{i}.prelu2"), &mut b.prelu2));
            out.push((format!("block{i}.norm2.gamma"), &mut b.norm2_g));
            out.push((format!("block{i}.norm2.beta"), &mut b.norm2_b));
            out.push((format!("block{i}.out.w"), &mut b.out_w));
            out.push((format!("block{i}.out.b"), &mut b.out_b));
        }
        out.push(("mask.prelu".into(), &mut self.mask_prelu));
        out.push(("mask.w".into(), &mut self.mask_w));
        out.push(("mask.b".into(), &mut self.mask_b));
        out.push(("dec_basis".into(), &mut self.dec_basis));
        out
    }

    /// Enhance a waveform. Pure function of (params, input); the output has
    /// exactly the input's length.
    pub fn enhance(&self, noisy: &Waveform) -> Result<Waveform> {
        let cfg = &self.config;
        let t = noisy.len();
        if t < cfg.window {
            return Err(Error::InputTooShort {
                got: t,
                need: cfg.window,
            });
        }
        let (frames, t_pad) = cfg.frames_and_padded(t);
        let stride = cfg.stride();
        let (nb, bdim, h, p) = (cfg.n_basis, cfg.bottleneck, cfg.hidden, cfg.kernel);

        let mut padded = noisy.samples.clone();
        padded.resize(t_pad, 0.0);

        // Analysis.
        let mut coeffs = Tensor::zeros(&[nb, frames]);
        kernels::conv1d_fwd(
            &padded,
            1,
            t_pad,
            self.enc_basis.data(),
            nb,
            cfg.window,
            None,
            stride,
            1,
            0,
            coeffs.data_mut(),
        );

        // Separator.
        let mut cur = global_norm_plain(&coeffs, &self.in_norm_g, &self.in_norm_b);
        cur = matmul_bias(
            &self.bottleneck_w,
            &cur,
            &self.bottleneck_b,
            bdim,
            nb,
            frames,
        );
        for (i, blk) in self.blocks.iter().enumerate() {
            let dilation = 1usize << (i % cfg.blocks_per_repeat);
            let mut x = matmul_bias(&blk.in_w, &cur, &blk.in_b, h, bdim, frames);
            prelu_plain(&mut x, blk.prelu1.item());
            x = global_norm_plain(&x, &blk.norm1_g, &blk.norm1_b);
            let mut y = Tensor::zeros(&[h, frames]);
            kernels::dwconv1d_fwd(
                x.data(),
                h,
                frames,
                blk.dw_w.data(),
                p,
                Some(blk.dw_b.data()),
                dilation,
                y.data_mut(),
            );
            prelu_plain(&mut y, blk.prelu2.item());
            y = global_norm_plain(&y, &blk.norm2_g, &blk.norm2_b);
            let res = matmul_bias(&blk.out_w, &y, &blk.out_b, bdim, h, frames);
            cur.add_assign(&res);
        }
        let mut mask_in = cur;
        prelu_plain(&mut mask_in, self.mask_prelu.item());
        let mut mask = matmul_bias(&self.mask_w, &mask_in, &self.mask_b, nb, bdim, frames);
        for v in mask.data_mut() {
            *v = 1.0 / (1.0 + (-*v).exp());
        }

        // Masked synthesis.
        let mut masked = coeffs;
        for (m, k) in masked.data_mut().iter_mut().zip(mask.data()) {
            *m *= k;
        }
        let mut out = vec![0.0; t_pad];
        kernels::overlap_add_fwd(
            masked.data(),
            nb,
            frames,
            self.dec_basis.data(),
            cfg.window,
            stride,
            &mut out,
        );
        out.truncate(t);
        Waveform::new(out, noisy.sample_rate)
    }

    /// Tape version of `enhance`; returns the enhanced waveform node.
    pub fn enhance_on_tape(&self, tape: &mut Tape, vars: &SeVars, noisy: VarId) -> Result<VarId> {
        let cfg = &self.config;
        let t = tape.value(noisy).numel();
        if t < cfg.window {
            return Err(Error::InputTooShort {
                got: t,
                need: cfg.window,
            });
        }
        let (_frames, t_pad) = cfg.frames_and_padded(t);
        let stride = cfg.stride();
        let mut ids = vars.ids.iter().copied();
        let mut next = || ids.next().expect("SeVars out of ids");

        let (enc_basis, in_g, in_b, bot_w, bot_b) = (next(), next(), next(), next(), next());

        let padded = tape.pad1d(noisy, t_pad - t);
        let x = tape.reshape(padded, &[1, t_pad]);
        let coeffs = tape.conv1d(x, enc_basis, None, stride, 1, 0);

        let mut cur = tape.global_norm(coeffs, in_g, in_b, SE_NORM_EPS);
        cur = tape.matmul(bot_w, cur);
        cur = tape.add_col_vec(cur, bot_b);
        for i in 0..self.blocks.len() {
            let dilation = 1usize << (i % cfg.blocks_per_repeat);
            let (in_w, in_b) = (next(), next());
            let prelu1 = next();
            let (n1g, n1b) = (next(), next());
            let (dw_w, dw_b) = (next(), next());
            let prelu2 = next();
            let (n2g, n2b) = (next(), next());
            let (out_w, out_b) = (next(), next());

            let mut h = tape.matmul(in_w, cur);
            h = tape.add_col_vec(h, in_b);
            h = tape.prelu(h, prelu1);
            h = tape.global_norm(h, n1g, n1b, SE_NORM_EPS);
            h = tape.dwconv1d(h, dw_w, Some(dw_b), dilation);
            h = tape.prelu(h, prelu2);
            h = tape.global_norm(h, n2g, n2b, SE_NORM_EPS);
            let mut res = tape.matmul(out_w, h);
            res = tape.add_col_vec(res, out_b);
            cur = tape.add(cur, res);
        }
        let mask_prelu = next();
        let (mask_w, mask_b) = (next(), next());
        let dec_basis = next();
        debug_assert!(ids.next().is_none(), "SeVars has unused ids");

        let mask_in = tape.prelu(cur, mask_prelu);
        let mut mask = tape.matmul(mask_w, mask_in);
        mask = tape.add_col_vec(mask, mask_b);
        let mask = tape.sigmoid(mask);
        let masked = tape.mul(coeffs, mask);
        let synth = tape.overlap_add(masked, dec_basis, stride);
        Ok(tape.slice1d(synth, 0, t))
    }
}

impl SeVars {
    /// Push every parameter tensor as a tape leaf, in canonical order.
    pub fn build(tape: &mut Tape, params: &SEParams, trainable: bool) -> SeVars {
        let ids = params
            .named_tensors()
            .into_iter()
            .map(|(_, t)| tape.leaf(t.clone(), trainable))
            .collect();
        SeVars { ids }
    }
}

fn matmul_bias(
    w: &Tensor,
    x: &Tensor,
    b: &Tensor,
    rows: usize,
    inner: usize,
    cols: usize,
) -> Tensor {
    let mut y = Tensor::zeros(&[rows, cols]);
    kernels::matmul(w.data(), rows, inner, x.data(), cols, y.data_mut());
    for r in 0..rows {
        let bv = b.data()[r];
        for v in &mut y.data_mut()[r * cols..(r + 1) * cols] {
            *v += bv;
        }
    }
    y
}

fn prelu_plain(x: &mut Tensor, slope: f64) {
    for v in x.data_mut() {
        if *v < 0.0 {
            *v *= slope;
        }
    }
}

fn global_norm_plain(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Tensor {
    let (c, t) = (x.shape()[0], x.shape()[1]);
    let (mean, inv_std) = kernels::norm_stats(x.data(), SE_NORM_EPS);
    let mut y = Tensor::zeros(&[c, t]);
    for ci in 0..c {
        kernels::norm_apply(
            &x.data()[ci * t..(ci + 1) * t],
            mean,
            inv_std,
            gamma.data()[ci],
            beta.data()[ci],
            &mut y.data_mut()[ci * t..(ci + 1) * t],
        );
    }
    y
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    fn test_wave(seed: u64, n: usize) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new((0..n).map(|_| rng.random_range(-0.9..0.9)).collect(), 8000).unwrap()
    }

    fn tiny_config() -> SEConfig {
        SEConfig {
            n_basis: 12,
            window: 8,
            bottleneck: 6,
            repeats: 1,
            blocks_per_repeat: 2,
            hidden: 8,
            kernel: 3,
        }
    }

    #[test]
    fn full_scale_constants() {
        let c = SEConfig::full_scale();
        assert_eq!(
            (
                c.n_basis,
                c.window,
                c.bottleneck,
                c.repeats,
                c.blocks_per_repeat,
                c.hidden,
                c.kernel
            ),
            (4096, 320, 256, 4, 8, 512, 3)
        );
        c.validate().unwrap();
    }

    #[test]
    fn desk_scale_defaults() {
        let c = SEConfig::default();
        assert_eq!(
            (
                c.n_basis,
                c.window,
                c.bottleneck,
                c.repeats,
                c.blocks_per_repeat,
                c.hidden,
                c.kernel
            ),
            (128, 32, 32, 2, 4, 64, 3)
        );
        let p = init_se_model(&c, 1).unwrap();
        // Small enough that a full run finishes in minutes on a CPU.
        assert!(p.param_count() < 100_000, "{} params", p.param_count());
    }

    #[test]
    fn init_is_deterministic() {
        let c = tiny_config();
        let a = init_se_model(&c, 5).unwrap();
        let b = init_se_model(&c, 5).unwrap();
        for ((_, x), (_, y)) in a.named_tensors().iter().zip(b.named_tensors().iter()) {
            assert_eq!(x, y);
        }
        let other = init_se_model(&c, 6).unwrap();
        assert_ne!(a.enc_basis, other.enc_basis);
    }

    #[test]
    fn output_length_equals_input_length() {
        let c = SEConfig::default();
        let p = init_se_model(&c, 2).unwrap();
        for t in [c.window, c.window + 1, 10 * c.window + 7] {
            let w = test_wave(t as u64, t);
            let out = p.enhance(&w).unwrap();
            assert_eq!(out.len(), t);
        }
        assert!(matches!(
            p.enhance(&test_wave(0, c.window - 1)),
            Err(Error::InputTooShort { .. })
        ));
    }

    #[test]
    fn zero_input_gives_zero_output() {
        // Biases are zero-initialized, so an all-zero input encodes to zero
        // coefficients and the masked synthesis stays exactly zero.
        let p = init_se_model(&SEConfig::default(), 3).unwrap();
        let w = Waveform::new(vec![0.0; 400], 8000).unwrap();
        let out = p.enhance(&w).unwrap();
        assert!(out.samples.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn enhance_is_deterministic() {
        let p = init_se_model(&SEConfig::default(), 4).unwrap();
        let w = test_wave(9, 1000);
        assert_eq!(
            p.enhance(&w).unwrap().samples,
            p.enhance(&w).unwrap().samples
        );
    }

    #[test]
    fn orthonormal_basis_with_saturated_mask_reconstructs() {
        // Full real-DFT orthonormal basis under a sqrt-Hann window at 50%
        // overlap satisfies the overlap-add identity. With the separator
        // zeroed and a large positive mask bias the mask saturates at 1, so
        // the model must reproduce its input wherever frames fully overlap.
        let l = 16usize;
        let cfg = SEConfig {
            n_basis: l,
            window: l,
            bottleneck: 4,
            repeats: 1,
            blocks_per_repeat: 1,
            hidden: 4,
            kernel: 3,
        };
        let mut p = init_se_model(&cfg, 7).unwrap();

        // sqrt-Hann window (periodic), so w^2 sums to 1 at 50% overlap.
        let window: Vec<f64> = (0..l)
            .map(|t| (0.5 - 0.5 * (2.0 * std::f64::consts::PI * t as f64 / l as f64).cos()).sqrt())
            .collect();
        // Orthonormal real DFT rows.
        let mut rows = vec![vec![0.0; l]; l];
        let norm0 = (1.0 / l as f64).sqrt();
        let norm = (2.0 / l as f64).sqrt();
        for t in 0..l {
            rows[0][t] = norm0;
            rows[l - 1][t] = norm0 * if t % 2 == 0 { 1.0 } else { -1.0 };
        }
        for m in 1..l / 2 {
            for t in 0..l {
                let ang = 2.0 * std::f64::consts::PI * m as f64 * t as f64 / l as f64;
                rows[2 * m - 1][t] = norm * ang.cos();
                rows[2 * m][t] = norm * ang.sin();
            }
        }
        for (k, row) in rows.iter().enumerate() {
            for t in 0..l {
                p.enc_basis.data_mut()[k * l + t] = window[t] * row[t];
                p.dec_basis.data_mut()[k * l + t] = window[t] * row[t];
            }
        }
        // Zero the separator; saturate the mask.
        p.bottleneck_w = Tensor::zeros(&[4, l]);
        for blk in &mut p.blocks {
            blk.in_w = Tensor::zeros(&[4, 4]);
            blk.out_w = Tensor::zeros(&[4, 4]);
            blk.out_b = Tensor::zeros(&[4]);
        }
        p.mask_w = Tensor::zeros(&[l, 4]);
        p.mask_b = Tensor::from_vec(&[l], vec![40.0; l]);

        // Signal with silent edges so partially covered frames carry zeros.
        let t = 10 * l;
        let mut samples = test_wave(13, t).samples;
        for v in samples.iter_mut().take(l) {
            *v = 0.0;
        }
        for v in samples.iter_mut().skip(t - l) {
            *v = 0.0;
        }
        let x = Waveform::new(samples, 8000).unwrap();
        let out = p.enhance(&x).unwrap();

        let err: f64 = out
            .samples
            .iter()
            .zip(&x.samples)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let rel = (err / x.energy()).sqrt();
        assert!(rel <= 1e-5, "relative reconstruction error {rel}");

        // Independent overlap-add oracle: window, project, resynthesize.
        let stride = l / 2;
        let frames = (t - l) / stride + 1;
        let mut oracle = vec![0.0; t];
        for f in 0..frames {
            let seg = &x.samples[f * stride..f * stride + l];
            for k in 0..l {
                let coeff: f64 = (0..l).map(|i| window[i] * rows[k][i] * seg[i]).sum();
                for i in 0..l {
                    oracle[f * stride + i] += coeff * window[i] * rows[k][i];
                }
            }
        }
        for (a, b) in out.samples.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-9, "oracle mismatch: {a} vs {b}");
        }
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        let cfg = tiny_config();
        let p = init_se_model(&cfg, 11).unwrap();
        let w = test_wave(21, 100);
        let plain = p.enhance(&w).unwrap();

        let mut tape = Tape::new();
        let vars = SeVars::build(&mut tape, &p, true);
        let x = tape.leaf(Tensor::from_vec(&[100], w.samples.clone()), false);
        let out = p.enhance_on_tape(&mut tape, &vars, x).unwrap();
        for (a, b) in tape.value(out).data().iter().zip(&plain.samples) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn every_parameter_receives_a_finite_gradient() {
        let cfg = tiny_config();
        let p = init_se_model(&cfg, 12).unwrap();
        let noisy = test_wave(31, 120);
        let clean = test_wave(32, 120);

        let mut tape = Tape::new();
        let vars = SeVars::build(&mut tape, &p, true);
        let x = tape.leaf(Tensor::from_vec(&[120], noisy.samples.clone()), false);
        let out = p.enhance_on_tape(&mut tape, &vars, x).unwrap();
        let reference = tape.constant(Tensor::from_vec(&[120], clean.samples.clone()));
        let loss = tape.snr_loss(out, reference, 1e-8);
        let mut grads = tape.backward(loss);

        let names = p.named_tensors();
        for (id, (name, _)) in vars.ids.iter().zip(names.iter()) {
            let g = grads
                .take(*id)
                .unwrap_or_else(|| panic!("{name} received no gradient"));
            assert!(g.is_finite(), "{name} gradient not finite");
        }
    }
}
