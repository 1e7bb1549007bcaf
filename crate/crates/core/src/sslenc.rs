//! The frozen multi-layer feature encoder.
//!
//! A strided convolution frontend followed by N residual blocks (depthwise
//! conv, pointwise mixing, ReLU, per-channel normalization). Weights are
//! drawn once from a seed and never trained; the layer outputs serve as the
//! feature space in which enhanced and clean signals are compared.
//! Gradient flows *through* the encoder to whatever produced its input, but
//! never into its parameters.
//!
//! The per-channel normalization uses statistics frozen at initialization
//! (calibrated on seeded noise), not per-utterance statistics. Features of
//! a frame therefore depend only on that frame's window, which keeps the
//! frozen feature space stable across utterances.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, VarId};
use crate::error::{Error, Result};
use crate::kernels;
use crate::signal::Waveform;
use crate::tensor::Tensor;
use crate::util::sha256_hex;

/// Normalization floor used inside the residual blocks.
pub const ENC_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub dim: usize,
    /// Samples per output frame.
    pub hop: usize,
    /// Frontend receptive field in samples.
    pub frontend_kernel: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            n_layers: 8,
            dim: 64,
            hop: 80,
            frontend_kernel: 160,
            seed: 1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 1 || self.dim < 1 || self.hop < 1 || self.frontend_kernel < 1 {
            return Err(Error::InvalidConfig("encoder dims must all be >= 1".into()));
        }
        Ok(())
    }

    /// Number of output frames for an input of `t` samples.
    pub fn out_frames(&self, t: usize) -> usize {
        (t - self.frontend_kernel) / self.hop + 1
    }
}

#[derive(Clone, Debug)]
pub(crate) struct EncBlock {
    pub norm_gamma: Tensor,   // [d]
    pub norm_beta: Tensor,    // [d]
    pub norm_mean: Tensor,    // [d], frozen calibration statistic
    pub norm_inv_std: Tensor, // [d], frozen calibration statistic
    pub dw_w: Tensor,         // [d, 3]
    pub dw_b: Tensor,         // [d]
    pub pw_w: Tensor,         // [d, d]
    pub pw_b: Tensor,         // [d]
}

impl EncBlock {
    /// Effective per-channel (scale, shift) of the frozen normalization.
    fn norm_affine(&self) -> (Tensor, Tensor) {
        let d = self.norm_gamma.numel();
        let mut scale = Tensor::zeros(&[d]);
        let mut shift = Tensor::zeros(&[d]);
        for c in 0..d {
            let g = self.norm_gamma.data()[c];
            let inv = self.norm_inv_std.data()[c];
            let mu = self.norm_mean.data()[c];
            scale.data_mut()[c] = g * inv;
            shift.data_mut()[c] = self.norm_beta.data()[c] - g * mu * inv;
        }
        (scale, shift)
    }
}

/// Frozen encoder parameters. There is deliberately no mutable access.
#[derive(Clone, Debug)]
pub struct EncoderParams {
    config: EncoderConfig,
    pub(crate) frontend_w: Tensor, // [d, 1, kernel]
    pub(crate) frontend_b: Tensor, // [d]
    pub(crate) blocks: Vec<EncBlock>,
}

/// N feature matrices of identical shape [dim, frames].
#[derive(Clone, Debug)]
pub struct FeatureStack {
    layers: Vec<Tensor>,
    hop: usize,
}

impl FeatureStack {
    pub fn new(layers: Vec<Tensor>, hop: usize) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::ShapeMismatch("feature stack has no layers".into()));
        }
        let shape = layers[0].shape().to_vec();
        for (i, l) in layers.iter().enumerate() {
            if l.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch(format!(
                    "layer {i} has shape {:?}, expected {:?}",
                    l.shape(),
                    shape
                )));
            }
            if !l.is_finite() {
                return Err(Error::ShapeMismatch(format!("layer {i} is not finite")));
            }
        }
        Ok(FeatureStack { layers, hop })
    }

    pub fn layers(&self) -> &[Tensor] {
        &self.layers
    }

    /// (N, D, T')
    pub fn dims(&self) -> (usize, usize, usize) {
        (
            self.layers.len(),
            self.layers[0].shape()[0],
            self.layers[0].shape()[1],
        )
    }

    /// Frames per second is sample_rate / hop; the hop itself in samples.
    pub fn hop(&self) -> usize {
        self.hop
    }

    /// Weighted sum across layers: sum_n weights[n] * layer_n. Zero-weight
    /// layers are skipped, mirroring the tape-side combination exactly.
    pub fn combine(&self, weights: &[f64]) -> Result<Tensor> {
        if weights.len() != self.layers.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} layer weights for {} layers",
                weights.len(),
                self.layers.len()
            )));
        }
        let mut out = Tensor::zeros(self.layers[0].shape());
        for (w, layer) in weights.iter().zip(&self.layers) {
            if *w != 0.0 {
                out.axpy(*w, layer);
            }
        }
        Ok(out)
    }
}

/// Draw frozen encoder weights deterministically from the config seed,
/// then calibrate each block's normalization statistics on seeded noise.
pub fn init_frozen_encoder(config: &EncoderConfig) -> Result<EncoderParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.dim;
    let k = config.frontend_kernel;

    let mut params = EncoderParams {
        config: *config,
        frontend_w: randn(&mut rng, &[d, 1, k], (1.0 / k as f64).sqrt()),
        frontend_b: Tensor::zeros(&[d]),
        blocks: (0..config.n_layers)
            .map(|_| EncBlock {
                norm_gamma: ones(&[d]),
                norm_beta: Tensor::zeros(&[d]),
                norm_mean: Tensor::zeros(&[d]),
                norm_inv_std: ones(&[d]),
                dw_w: randn(&mut rng, &[d, 3], (1.0 / 3.0f64).sqrt()),
                dw_b: Tensor::zeros(&[d]),
                pw_w: randn(&mut rng, &[d, d], (2.0 / d as f64).sqrt()),
                pw_b: Tensor::zeros(&[d]),
            })
            .collect(),
    };
    calibrate_norms(&mut params, &mut rng);
    // Keep parameters on the f32 grid so checkpoints roundtrip losslessly.
    for (_, t) in params.named_tensors_mut() {
        t.round_to_f32();
    }
    Ok(params)
}

/// Run seeded noise through the stack, freezing per-channel mean and
/// inverse standard deviation for each block's normalization in turn.
fn calibrate_norms(params: &mut EncoderParams, rng: &mut ChaCha8Rng) {
    let cfg = params.config;
    let d = cfg.dim;
    let t_cal = cfg.frontend_kernel + cfg.hop * 119;
    let normal = Normal::new(0.0, 0.25).unwrap();
    let n_waves = 4;

    let mut activations: Vec<Tensor> = (0..n_waves)
        .map(|_| {
            let samples: Vec<f64> = (0..t_cal).map(|_| normal.sample(rng)).collect();
            let t_out = cfg.out_frames(t_cal);
            let mut front = Tensor::zeros(&[d, t_out]);
            kernels::conv1d_fwd(
                &samples,
                1,
                t_cal,
                params.frontend_w.data(),
                d,
                cfg.frontend_kernel,
                Some(params.frontend_b.data()),
                cfg.hop,
                1,
                0,
                front.data_mut(),
            );
            front
        })
        .collect();

    for bi in 0..params.blocks.len() {
        let frames: usize = activations.iter().map(|a| a.shape()[1]).sum();
        let mut mean = vec![0.0f64; d];
        let mut var = vec![0.0f64; d];
        for a in &activations {
            let t = a.shape()[1];
            for (c, m) in mean.iter_mut().enumerate() {
                for v in &a.data()[c * t..(c + 1) * t] {
                    *m += v;
                }
            }
        }
        for m in &mut mean {
            *m /= frames as f64;
        }
        for a in &activations {
            let t = a.shape()[1];
            for (c, vr) in var.iter_mut().enumerate() {
                for v in &a.data()[c * t..(c + 1) * t] {
                    *vr += (v - mean[c]) * (v - mean[c]);
                }
            }
        }
        let block = &mut params.blocks[bi];
        for c in 0..d {
            block.norm_mean.data_mut()[c] = mean[c];
            block.norm_inv_std.data_mut()[c] = 1.0 / (var[c] / frames as f64 + ENC_NORM_EPS).sqrt();
        }
        let block = &params.blocks[bi];
        for a in &mut activations {
            let t = a.shape()[1];
            *a = block_fwd(block, a, d, t);
        }
    }
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

impl EncoderParams {
    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// (N, D, hop) as reported to every consumer.
    pub fn layer_dims(&self) -> (usize, usize, usize) {
        (self.config.n_layers, self.config.dim, self.config.hop)
    }

    /// Canonical (name, tensor) listing; the order defines gradient and
    /// checkpoint layout.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("frontend.w".into(), &self.frontend_w),
            ("frontend.b".into(), &self.frontend_b),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.norm.gamma"), &b.norm_gamma));
            out.push((format!("block{i}.norm.beta"), &b.norm_beta));
            out.push((format!("block{i}.norm.mean"), &b.norm_mean));
            out.push((format!("block{i}.norm.inv_std"), &b.norm_inv_std));
            out.push((format!("block{i}.dw.w"), &b.dw_w));
            out.push((format!("block{i}.dw.b"), &b.dw_b));
            out.push((format!("block{i}.pw.w"), &b.pw_w));
            out.push((format!("block{i}.pw.b"), &b.pw_b));
        }
        out
    }

    pub(crate) fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("frontend.w".into(), &mut self.frontend_w),
            ("frontend.b".into(), &mut self.frontend_b),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("block{i}.norm.gamma"), &mut b.norm_gamma));
            out.push((format!("block{i}.norm.beta"), &mut b.norm_beta));
            out.push((format!("block{i}.norm.mean"), &mut b.norm_mean));
            out.push((format!("block{i}.norm.inv_std"), &mut b.norm_inv_std));
            out.push((format!("block{i}.dw.w"), &mut b.dw_w));
            out.push((format!("block{i}.dw.b"), &mut b.dw_b));
            out.push((format!("block{i}.pw.w"), &mut b.pw_w));
            out.push((format!("block{i}.pw.b"), &mut b.pw_b));
        }
        out
    }

    /// SHA-256 over all parameter bytes; the frozen-ness witness.
    pub fn checksum(&self) -> String {
        let mut bytes = Vec::new();
        for (name, t) in self.named_tensors() {
            bytes.extend_from_slice(name.as_bytes());
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        sha256_hex(&bytes)
    }

    /// Forward pass: waveform in, one feature matrix per residual block out.
    pub fn encode(&self, x: &Waveform) -> Result<FeatureStack> {
        let cfg = &self.config;
        let t = x.len();
        if t < cfg.frontend_kernel {
            return Err(Error::InputTooShort {
                got: t,
                need: cfg.frontend_kernel,
            });
        }
        let t_out = cfg.out_frames(t);
        let d = cfg.dim;

        let mut cur = Tensor::zeros(&[d, t_out]);
        kernels::conv1d_fwd(
            &x.samples,
            1,
            t,
            self.frontend_w.data(),
            d,
            cfg.frontend_kernel,
            Some(self.frontend_b.data()),
            cfg.hop,
            1,
            0,
            cur.data_mut(),
        );

        let mut layers = Vec::with_capacity(cfg.n_layers);
        for b in &self.blocks {
            cur = block_fwd(b, &cur, d, t_out);
            layers.push(cur.clone());
        }
        FeatureStack::new(layers, cfg.hop)
    }

    /// Same forward pass expressed on an autodiff tape. The waveform node
    /// may carry gradient; the encoder leaves never do.
    pub fn encode_on_tape(&self, tape: &mut Tape, wave: VarId) -> Result<Vec<VarId>> {
        let cfg = &self.config;
        let t = tape.value(wave).numel();
        if t < cfg.frontend_kernel {
            return Err(Error::InputTooShort {
                got: t,
                need: cfg.frontend_kernel,
            });
        }
        let x = tape.reshape(wave, &[1, t]);
        let fw = tape.leaf(self.frontend_w.clone(), false);
        let fb = tape.leaf(self.frontend_b.clone(), false);
        let mut cur = tape.conv1d(x, fw, Some(fb), cfg.hop, 1, 0);

        let mut layers = Vec::with_capacity(cfg.n_layers);
        for b in &self.blocks {
            let (scale, shift) = b.norm_affine();
            let scale = tape.leaf(scale, false);
            let shift = tape.leaf(shift, false);
            let dw_w = tape.leaf(b.dw_w.clone(), false);
            let dw_b = tape.leaf(b.dw_b.clone(), false);
            let pw_w = tape.leaf(b.pw_w.clone(), false);
            let pw_b = tape.leaf(b.pw_b.clone(), false);

            let c = tape.mul_col_vec(cur, scale);
            let c = tape.add_col_vec(c, shift);
            let h = tape.dwconv1d(c, dw_w, Some(dw_b), 1);
            let h = tape.relu(h);
            let mixed = tape.matmul(pw_w, h);
            let mixed = tape.add_col_vec(mixed, pw_b);
            cur = tape.add(cur, mixed);
            layers.push(cur);
        }
        Ok(layers)
    }
}

/// Residual block: x + PW(relu(DW(norm(x)))) with frozen per-channel
/// normalization statistics. With zero pointwise weights the block is
/// exactly the identity.
fn block_fwd(b: &EncBlock, x: &Tensor, d: usize, t: usize) -> Tensor {
    let (scale, shift) = b.norm_affine();
    let mut c = Tensor::zeros(&[d, t]);
    for ci in 0..d {
        let (sc, sh) = (scale.data()[ci], shift.data()[ci]);
        for (o, v) in c.data_mut()[ci * t..(ci + 1) * t]
            .iter_mut()
            .zip(&x.data()[ci * t..(ci + 1) * t])
        {
            *o = sc * v + sh;
        }
    }
    let mut h = Tensor::zeros(&[d, t]);
    kernels::dwconv1d_fwd(
        c.data(),
        d,
        t,
        b.dw_w.data(),
        3,
        Some(b.dw_b.data()),
        1,
        h.data_mut(),
    );
    for v in h.data_mut() {
        *v = v.max(0.0);
    }
    let mut mixed = Tensor::zeros(&[d, t]);
    kernels::matmul(b.pw_w.data(), d, d, h.data(), t, mixed.data_mut());
    let mut out = x.clone();
    for ci in 0..d {
        let bias = b.pw_b.data()[ci];
        for (o, m) in out.data_mut()[ci * t..(ci + 1) * t]
            .iter_mut()
            .zip(&mixed.data()[ci * t..(ci + 1) * t])
        {
            *o += m + bias;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn test_wave(seed: u64, n: usize) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), 8000).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let cfg = EncoderConfig::default();
        let a = init_frozen_encoder(&cfg).unwrap();
        let b = init_frozen_encoder(&cfg).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        let c = init_frozen_encoder(&EncoderConfig { seed: 2, ..cfg }).unwrap();
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn parameter_shapes_match_config() {
        let cfg = EncoderConfig {
            n_layers: 3,
            dim: 5,
            hop: 4,
            frontend_kernel: 8,
            seed: 9,
        };
        let p = init_frozen_encoder(&cfg).unwrap();
        assert_eq!(p.frontend_w.shape(), &[5, 1, 8]);
        assert_eq!(p.blocks.len(), 3);
        assert_eq!(p.blocks[0].pw_w.shape(), &[5, 5]);
        assert_eq!(p.layer_dims(), (3, 5, 4));
    }

    #[test]
    fn frame_arithmetic() {
        let cfg = EncoderConfig::default();
        let p = init_frozen_encoder(&cfg).unwrap();
        assert_eq!(p.layer_dims(), (8, 64, 80));
        let stack = p.encode(&test_wave(3, 1600)).unwrap();
        let (n, d, t) = stack.dims();
        assert_eq!((n, d, t), (8, 64, 19));
        assert_eq!(stack.hop(), 80);

        assert!(matches!(
            p.encode(&test_wave(3, 100)),
            Err(Error::InputTooShort { .. })
        ));
    }

    #[test]
    fn encode_is_deterministic_and_finite() {
        let p = init_frozen_encoder(&EncoderConfig::default()).unwrap();
        let w = test_wave(4, 2000);
        let a = p.encode(&w).unwrap();
        let b = p.encode(&w).unwrap();
        for (x, y) in a.layers().iter().zip(b.layers()) {
            assert_eq!(x, y);
        }
        assert!(a.layers().iter().all(|l| l.is_finite()));
    }

    #[test]
    fn equal_length_inputs_share_frame_count() {
        let p = init_frozen_encoder(&EncoderConfig::default()).unwrap();
        let a = p.encode(&test_wave(5, 3000)).unwrap();
        let b = p.encode(&test_wave(6, 3000)).unwrap();
        assert_eq!(a.dims(), b.dims());
    }

    #[test]
    fn identity_block_returns_frontend_output() {
        // One layer whose pointwise path is zeroed: layer output must equal
        // the frontend convolution computed directly.
        let cfg = EncoderConfig {
            n_layers: 1,
            dim: 4,
            hop: 8,
            frontend_kernel: 16,
            seed: 11,
        };
        let mut p = init_frozen_encoder(&cfg).unwrap();
        p.blocks[0].pw_w = Tensor::zeros(&[4, 4]);
        p.blocks[0].pw_b = Tensor::zeros(&[4]);

        let w = test_wave(12, 160);
        let stack = p.encode(&w).unwrap();
        let t_out = cfg.out_frames(160);

        // Direct frontend convolution oracle.
        for d in 0..4 {
            for t in 0..t_out {
                let mut want = p.frontend_b.data()[d];
                for k in 0..16 {
                    want += p.frontend_w.data()[d * 16 + k] * w.samples[t * 8 + k];
                }
                let got = stack.layers()[0].data()[d * t_out + t];
                assert!(
                    (got - want).abs() < 1e-12,
                    "frontend mismatch at ({d},{t}): {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        let p = init_frozen_encoder(&EncoderConfig {
            n_layers: 3,
            dim: 6,
            hop: 8,
            frontend_kernel: 16,
            seed: 21,
        })
        .unwrap();
        let w = test_wave(22, 400);
        let plain = p.encode(&w).unwrap();

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[400], w.samples.clone()), true);
        let layers = p.encode_on_tape(&mut tape, x).unwrap();
        for (var, l) in layers.iter().zip(plain.layers()) {
            let tv = tape.value(*var);
            assert_eq!(tv.shape(), l.shape());
            for (a, b) in tv.data().iter().zip(l.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn encode_gradient_reaches_the_waveform_but_not_the_weights() {
        let p = init_frozen_encoder(&EncoderConfig {
            n_layers: 2,
            dim: 4,
            hop: 4,
            frontend_kernel: 8,
            seed: 31,
        })
        .unwrap();
        let w = test_wave(32, 64);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[64], w.samples.clone()), true);
        let layers = p.encode_on_tape(&mut tape, x).unwrap();
        let last = *layers.last().unwrap();
        let target = tape.constant(Tensor::zeros(tape.value(last).shape().to_vec().as_slice()));
        let loss = tape.mse_loss(last, target, 1.0);
        let mut grads = tape.backward(loss);
        let gx = grads.take(x).expect("waveform gradient must exist");
        assert!(gx.is_finite());
        assert!(gx.sq_sum() > 0.0);
    }
}
