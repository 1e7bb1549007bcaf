//! Reverse-mode automatic differentiation on a flat tape.
//!
//! The op vocabulary is exactly what the models in this crate need: 1-D
//! convolutions, overlap-add synthesis, normalizations, pointwise
//! nonlinearities and the loss heads. Leaves carry a `requires_grad` flag;
//! frozen parameters are ordinary leaves with the flag off, so gradient
//! flows *through* them to earlier inputs but never *into* them.

#![allow(clippy::needless_range_loop)]

use std::sync::Arc;

use crate::kernels;
use crate::tensor::Tensor;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct VarId(usize);

const LN10_OVER_10: f64 = std::f64::consts::LN_10 / 10.0;

enum Op {
    Leaf,
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    Scale(VarId, f64),
    Reshape(VarId),
    Slice1d {
        x: VarId,
        start: usize,
        len: usize,
    },
    Pad1d {
        x: VarId,
    },
    /// sum_i coeffs[i] * terms[i] with fixed coefficients.
    WeightedSum {
        terms: Vec<VarId>,
        coeffs: Vec<f64>,
    },
    /// sum_i coeffs[i] * terms[i] where the coefficient vector is itself a node.
    LinComb {
        coeffs: VarId,
        terms: Vec<VarId>,
    },
    Conv1d {
        x: VarId,
        w: VarId,
        b: Option<VarId>,
        stride: usize,
        dilation: usize,
        pad: usize,
    },
    DwConv1d {
        x: VarId,
        w: VarId,
        b: Option<VarId>,
        dilation: usize,
    },
    OverlapAdd {
        frames: VarId,
        basis: VarId,
        stride: usize,
    },
    Relu(VarId),
    Sigmoid(VarId),
    PRelu {
        x: VarId,
        slope: VarId,
    },
    ChannelNorm {
        x: VarId,
        gamma: VarId,
        beta: VarId,
        eps: f64,
    },
    GlobalNorm {
        x: VarId,
        gamma: VarId,
        beta: VarId,
        eps: f64,
    },
    MatMul(VarId, VarId),
    AddColVec {
        x: VarId,
        v: VarId,
    },
    MulColVec {
        x: VarId,
        v: VarId,
    },
    Softmax1d(VarId),
    MseLoss {
        a: VarId,
        b: VarId,
        denom: f64,
    },
    SnrLoss {
        est: VarId,
        reference: VarId,
        eps: f64,
    },
    CrossEntropyFrames {
        logits: VarId,
        labels: Arc<Vec<u16>>,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    needs: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Grads {
    g: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, id: VarId) -> Option<&Tensor> {
        self.g[id.0].as_ref()
    }

    pub fn take(&mut self, id: VarId) -> Option<Tensor> {
        self.g[id.0].take()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, needs: bool) -> VarId {
        self.nodes.push(Node { op, value, needs });
        VarId(self.nodes.len() - 1)
    }

    fn needs(&self, id: VarId) -> bool {
        self.nodes[id.0].needs
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> VarId {
        self.push(Op::Leaf, value, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> VarId {
        self.leaf(value, false)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Add(a, b), v, needs)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        let v = self.value(a).sub(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Sub(a, b), v, needs)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        let av = self.value(a);
        let bv = self.value(b);
        debug_assert!(av.same_shape(bv));
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x * y)
            .collect();
        let v = Tensor::from_vec(av.shape(), data);
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Mul(a, b), v, needs)
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> VarId {
        let mut v = self.value(a).clone();
        v.scale_assign(c);
        let needs = self.needs(a);
        self.push(Op::Scale(a, c), v, needs)
    }

    pub fn reshape(&mut self, a: VarId, shape: &[usize]) -> VarId {
        let v = self.value(a).clone().reshaped(shape);
        let needs = self.needs(a);
        self.push(Op::Reshape(a), v, needs)
    }

    pub fn slice1d(&mut self, x: VarId, start: usize, len: usize) -> VarId {
        let data = self.value(x).data()[start..start + len].to_vec();
        let needs = self.needs(x);
        self.push(
            Op::Slice1d { x, start, len },
            Tensor::from_vec(&[len], data),
            needs,
        )
    }

    pub fn pad1d(&mut self, x: VarId, right: usize) -> VarId {
        let xv = self.value(x);
        let t = xv.numel();
        let mut data = xv.data().to_vec();
        data.resize(t + right, 0.0);
        let needs = self.needs(x);
        self.push(Op::Pad1d { x }, Tensor::from_vec(&[t + right], data), needs)
    }

    pub fn weighted_sum(&mut self, terms: &[VarId], coeffs: &[f64]) -> VarId {
        assert_eq!(terms.len(), coeffs.len());
        assert!(!terms.is_empty());
        let mut v = Tensor::zeros(self.value(terms[0]).shape());
        for (&t, &c) in terms.iter().zip(coeffs) {
            v.axpy(c, self.value(t));
        }
        let needs = terms.iter().any(|&t| self.needs(t));
        self.push(
            Op::WeightedSum {
                terms: terms.to_vec(),
                coeffs: coeffs.to_vec(),
            },
            v,
            needs,
        )
    }

    pub fn lin_comb(&mut self, coeffs: VarId, terms: &[VarId]) -> VarId {
        let cv = self.value(coeffs);
        assert_eq!(cv.numel(), terms.len());
        let c = cv.data().to_vec();
        let mut v = Tensor::zeros(self.value(terms[0]).shape());
        for (&t, &ci) in terms.iter().zip(&c) {
            v.axpy(ci, self.value(t));
        }
        let needs = self.needs(coeffs) || terms.iter().any(|&t| self.needs(t));
        self.push(
            Op::LinComb {
                coeffs,
                terms: terms.to_vec(),
            },
            v,
            needs,
        )
    }

    /// x: [cin, t_in], w: [cout, cin, k], b: [cout] -> [cout, t_out]
    pub fn conv1d(
        &mut self,
        x: VarId,
        w: VarId,
        b: Option<VarId>,
        stride: usize,
        dilation: usize,
        pad: usize,
    ) -> VarId {
        let (xv, wv) = (self.value(x), self.value(w));
        let (cin, t_in) = (xv.shape()[0], xv.shape()[1]);
        let (cout, k) = (wv.shape()[0], wv.shape()[2]);
        debug_assert_eq!(wv.shape()[1], cin);
        let t_out = kernels::conv_out_len(t_in, k, stride, dilation, pad);
        let mut y = Tensor::zeros(&[cout, t_out]);
        kernels::conv1d_fwd(
            xv.data(),
            cin,
            t_in,
            wv.data(),
            cout,
            k,
            b.map(|b| self.value(b).data()),
            stride,
            dilation,
            pad,
            y.data_mut(),
        );
        let needs = self.needs(x) || self.needs(w) || b.map(|b| self.needs(b)).unwrap_or(false);
        self.push(
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                dilation,
                pad,
            },
            y,
            needs,
        )
    }

    /// Depthwise conv with same padding. x: [c, t], w: [c, k], b: [c] -> [c, t]
    pub fn dwconv1d(&mut self, x: VarId, w: VarId, b: Option<VarId>, dilation: usize) -> VarId {
        let (xv, wv) = (self.value(x), self.value(w));
        let (c, t) = (xv.shape()[0], xv.shape()[1]);
        let k = wv.shape()[1];
        let mut y = Tensor::zeros(&[c, t]);
        kernels::dwconv1d_fwd(
            xv.data(),
            c,
            t,
            wv.data(),
            k,
            b.map(|b| self.value(b).data()),
            dilation,
            y.data_mut(),
        );
        let needs = self.needs(x) || self.needs(w) || b.map(|b| self.needs(b)).unwrap_or(false);
        self.push(Op::DwConv1d { x, w, b, dilation }, y, needs)
    }

    /// frames: [nb, f], basis: [nb, l] -> [(f-1)*stride + l]
    pub fn overlap_add(&mut self, frames: VarId, basis: VarId, stride: usize) -> VarId {
        let (fv, bv) = (self.value(frames), self.value(basis));
        let (nb, nf) = (fv.shape()[0], fv.shape()[1]);
        let l = bv.shape()[1];
        debug_assert_eq!(bv.shape()[0], nb);
        let t = (nf - 1) * stride + l;
        let mut y = Tensor::zeros(&[t]);
        kernels::overlap_add_fwd(fv.data(), nb, nf, bv.data(), l, stride, y.data_mut());
        let needs = self.needs(frames) || self.needs(basis);
        self.push(
            Op::OverlapAdd {
                frames,
                basis,
                stride,
            },
            y,
            needs,
        )
    }

    pub fn relu(&mut self, x: VarId) -> VarId {
        let data = self.value(x).data().iter().map(|v| v.max(0.0)).collect();
        let v = Tensor::from_vec(self.value(x).shape(), data);
        let needs = self.needs(x);
        self.push(Op::Relu(x), v, needs)
    }

    pub fn sigmoid(&mut self, x: VarId) -> VarId {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let v = Tensor::from_vec(self.value(x).shape(), data);
        let needs = self.needs(x);
        self.push(Op::Sigmoid(x), v, needs)
    }

    /// Parametric ReLU with a single learned slope for the negative part.
    pub fn prelu(&mut self, x: VarId, slope: VarId) -> VarId {
        let s = self.value(slope).item();
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { s * v })
            .collect();
        let v = Tensor::from_vec(self.value(x).shape(), data);
        let needs = self.needs(x) || self.needs(slope);
        self.push(Op::PRelu { x, slope }, v, needs)
    }

    /// Per-channel normalization over time with per-channel affine.
    pub fn channel_norm(&mut self, x: VarId, gamma: VarId, beta: VarId, eps: f64) -> VarId {
        let xv = self.value(x);
        let (c, t) = (xv.shape()[0], xv.shape()[1]);
        let g = self.value(gamma).data().to_vec();
        let bta = self.value(beta).data().to_vec();
        let mut y = Tensor::zeros(&[c, t]);
        for ci in 0..c {
            let row = &xv.data()[ci * t..(ci + 1) * t];
            let (mean, inv_std) = kernels::norm_stats(row, eps);
            kernels::norm_apply(
                row,
                mean,
                inv_std,
                g[ci],
                bta[ci],
                &mut y.data_mut()[ci * t..(ci + 1) * t],
            );
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            Op::ChannelNorm {
                x,
                gamma,
                beta,
                eps,
            },
            y,
            needs,
        )
    }

    /// Normalization over the whole [c, t] map with per-channel affine.
    pub fn global_norm(&mut self, x: VarId, gamma: VarId, beta: VarId, eps: f64) -> VarId {
        let xv = self.value(x);
        let (c, t) = (xv.shape()[0], xv.shape()[1]);
        let g = self.value(gamma).data().to_vec();
        let bta = self.value(beta).data().to_vec();
        let (mean, inv_std) = kernels::norm_stats(xv.data(), eps);
        let mut y = Tensor::zeros(&[c, t]);
        for ci in 0..c {
            kernels::norm_apply(
                &xv.data()[ci * t..(ci + 1) * t],
                mean,
                inv_std,
                g[ci],
                bta[ci],
                &mut y.data_mut()[ci * t..(ci + 1) * t],
            );
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            Op::GlobalNorm {
                x,
                gamma,
                beta,
                eps,
            },
            y,
            needs,
        )
    }

    /// a: [m, k], b: [k, n] -> [m, n]
    pub fn matmul(&mut self, a: VarId, b: VarId) -> VarId {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.shape()[0], av.shape()[1]);
        let n = bv.shape()[1];
        debug_assert_eq!(bv.shape()[0], k);
        let mut y = Tensor::zeros(&[m, n]);
        kernels::matmul(av.data(), m, k, bv.data(), n, y.data_mut());
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::MatMul(a, b), y, needs)
    }

    /// x: [m, n] times column vector v: [m] broadcast over columns.
    pub fn mul_col_vec(&mut self, x: VarId, v: VarId) -> VarId {
        let xv = self.value(x);
        let (m, n) = (xv.shape()[0], xv.shape()[1]);
        let vv = self.value(v).data().to_vec();
        let mut y = xv.clone();
        for mi in 0..m {
            for yv in &mut y.data_mut()[mi * n..(mi + 1) * n] {
                *yv *= vv[mi];
            }
        }
        let needs = self.needs(x) || self.needs(v);
        self.push(Op::MulColVec { x, v }, y, needs)
    }

    /// x: [m, n] plus column vector v: [m] broadcast over columns.
    pub fn add_col_vec(&mut self, x: VarId, v: VarId) -> VarId {
        let xv = self.value(x);
        let (m, n) = (xv.shape()[0], xv.shape()[1]);
        let vv = self.value(v).data().to_vec();
        let mut y = xv.clone();
        for mi in 0..m {
            for yv in &mut y.data_mut()[mi * n..(mi + 1) * n] {
                *yv += vv[mi];
            }
        }
        let needs = self.needs(x) || self.needs(v);
        self.push(Op::AddColVec { x, v }, y, needs)
    }

    pub fn softmax1d(&mut self, x: VarId) -> VarId {
        let xv = self.value(x).data();
        let m = xv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = xv.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        let v = Tensor::from_vec(
            self.value(x).shape(),
            exps.into_iter().map(|e| e / z).collect(),
        );
        let needs = self.needs(x);
        self.push(Op::Softmax1d(x), v, needs)
    }

    /// ||a - b||^2 / denom as a scalar node.
    pub fn mse_loss(&mut self, a: VarId, b: VarId, denom: f64) -> VarId {
        let (av, bv) = (self.value(a), self.value(b));
        debug_assert!(av.same_shape(bv));
        let ss: f64 = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let needs = self.needs(a) || self.needs(b);
        self.push(
            Op::MseLoss { a, b, denom },
            Tensor::scalar(ss / denom),
            needs,
        )
    }

    /// Negated scale-dependent SNR of `est` against `reference`, in dB.
    /// Minimizing this drives the estimate toward the reference.
    pub fn snr_loss(&mut self, est: VarId, reference: VarId, eps: f64) -> VarId {
        let (ev, rv) = (self.value(est), self.value(reference));
        debug_assert!(ev.same_shape(rv));
        let r: f64 = rv.sq_sum();
        let e: f64 = ev
            .data()
            .iter()
            .zip(rv.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let val = -10.0 * (r / (e + eps * r)).log10();
        let needs = self.needs(est) || self.needs(reference);
        self.push(
            Op::SnrLoss {
                est,
                reference,
                eps,
            },
            Tensor::scalar(val),
            needs,
        )
    }

    /// Mean per-frame softmax cross-entropy. logits: [c, t], labels: len t.
    pub fn cross_entropy_frames(&mut self, logits: VarId, labels: Arc<Vec<u16>>) -> VarId {
        let lv = self.value(logits);
        let (c, t) = (lv.shape()[0], lv.shape()[1]);
        debug_assert_eq!(labels.len(), t);
        let mut total = 0.0;
        for ti in 0..t {
            let mut m = f64::NEG_INFINITY;
            for ci in 0..c {
                m = m.max(lv.data()[ci * t + ti]);
            }
            let mut z = 0.0;
            for ci in 0..c {
                z += (lv.data()[ci * t + ti] - m).exp();
            }
            let target = lv.data()[labels[ti] as usize * t + ti];
            total += z.ln() + m - target;
        }
        let needs = self.needs(logits);
        self.push(
            Op::CrossEntropyFrames { logits, labels },
            Tensor::scalar(total / t as f64),
            needs,
        )
    }

    /// Reverse pass from a scalar loss node.
    pub fn backward(&self, loss: VarId) -> Grads {
        let mut g: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        debug_assert_eq!(self.value(loss).numel(), 1);
        g[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs {
                g[idx] = None;
                continue;
            }
            let Some(gy) = g[idx].take() else { continue };
            self.backprop_node(idx, &gy, &mut g);
            // Leaves keep their accumulated gradient.
            if matches!(self.nodes[idx].op, Op::Leaf) {
                g[idx] = Some(gy);
            }
        }
        Grads { g }
    }

    fn backprop_node(&self, idx: usize, gy: &Tensor, g: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(g, *a, |buf| buf.add_assign(gy));
                self.accum(g, *b, |buf| buf.add_assign(gy));
            }
            Op::Sub(a, b) => {
                self.accum(g, *a, |buf| buf.add_assign(gy));
                self.accum(g, *b, |buf| buf.axpy(-1.0, gy));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).clone(), self.value(*b).clone());
                self.accum(g, *a, |buf| {
                    for ((o, gv), bvv) in buf.data_mut().iter_mut().zip(gy.data()).zip(bv.data()) {
                        *o += gv * bvv;
                    }
                });
                self.accum(g, *b, |buf| {
                    for ((o, gv), avv) in buf.data_mut().iter_mut().zip(gy.data()).zip(av.data()) {
                        *o += gv * avv;
                    }
                });
            }
            Op::Scale(a, c) => {
                self.accum(g, *a, |buf| buf.axpy(*c, gy));
            }
            Op::Reshape(a) => {
                self.accum(g, *a, |buf| {
                    for (o, gv) in buf.data_mut().iter_mut().zip(gy.data()) {
                        *o += gv;
                    }
                });
            }
            Op::Slice1d { x, start, len } => {
                self.accum(g, *x, |buf| {
                    for (o, gv) in buf.data_mut()[*start..*start + *len]
                        .iter_mut()
                        .zip(gy.data())
                    {
                        *o += gv;
                    }
                });
            }
            Op::Pad1d { x } => {
                let t = self.value(*x).numel();
                self.accum(g, *x, |buf| {
                    for (o, gv) in buf.data_mut().iter_mut().zip(&gy.data()[..t]) {
                        *o += gv;
                    }
                });
            }
            Op::WeightedSum { terms, coeffs } => {
                for (&t, &c) in terms.iter().zip(coeffs) {
                    self.accum(g, t, |buf| buf.axpy(c, gy));
                }
            }
            Op::LinComb { coeffs, terms } => {
                let cv = self.value(*coeffs).data().to_vec();
                if self.needs(*coeffs) {
                    let dots: Vec<f64> = terms
                        .iter()
                        .map(|&t| {
                            self.value(t)
                                .data()
                                .iter()
                                .zip(gy.data())
                                .map(|(a, b)| a * b)
                                .sum()
                        })
                        .collect();
                    self.accum(g, *coeffs, |buf| {
                        for (o, d) in buf.data_mut().iter_mut().zip(&dots) {
                            *o += d;
                        }
                    });
                }
                for (&t, &c) in terms.iter().zip(&cv) {
                    if self.needs(t) {
                        self.accum(g, t, |buf| buf.axpy(c, gy));
                    }
                }
            }
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                dilation,
                pad,
            } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (cin, t_in) = (xv.shape()[0], xv.shape()[1]);
                let (cout, k) = (wv.shape()[0], wv.shape()[2]);
                if self.needs(*x) {
                    let wd = wv.data().to_vec();
                    self.accum(g, *x, |buf| {
                        kernels::conv1d_bwd_input(
                            gy.data(),
                            cin,
                            t_in,
                            &wd,
                            cout,
                            k,
                            *stride,
                            *dilation,
                            *pad,
                            buf.data_mut(),
                        );
                    });
                }
                if self.needs(*w) {
                    let xd = xv.data().to_vec();
                    self.accum(g, *w, |buf| {
                        kernels::conv1d_bwd_weight(
                            gy.data(),
                            &xd,
                            cin,
                            t_in,
                            cout,
                            k,
                            *stride,
                            *dilation,
                            *pad,
                            buf.data_mut(),
                        );
                    });
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        self.accum(g, *b, |buf| {
                            kernels::conv1d_bwd_bias(gy.data(), cout, buf.data_mut());
                        });
                    }
                }
            }
            Op::DwConv1d { x, w, b, dilation } => {
                let xv = self.value(*x).clone();
                let wv = self.value(*w).clone();
                let (c, t) = (xv.shape()[0], xv.shape()[1]);
                let k = wv.shape()[1];
                if self.needs(*x) {
                    self.accum(g, *x, |buf| {
                        kernels::dwconv1d_bwd(
                            gy.data(),
                            xv.data(),
                            c,
                            t,
                            wv.data(),
                            k,
                            *dilation,
                            Some(buf.data_mut()),
                            None,
                            None,
                        );
                    });
                }
                if self.needs(*w) {
                    self.accum(g, *w, |buf| {
                        kernels::dwconv1d_bwd(
                            gy.data(),
                            xv.data(),
                            c,
                            t,
                            wv.data(),
                            k,
                            *dilation,
                            None,
                            Some(buf.data_mut()),
                            None,
                        );
                    });
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        self.accum(g, *b, |buf| {
                            kernels::dwconv1d_bwd(
                                gy.data(),
                                xv.data(),
                                c,
                                t,
                                wv.data(),
                                k,
                                *dilation,
                                None,
                                None,
                                Some(buf.data_mut()),
                            );
                        });
                    }
                }
            }
            Op::OverlapAdd {
                frames,
                basis,
                stride,
            } => {
                let fv = self.value(*frames).clone();
                let bv = self.value(*basis).clone();
                let (nb, nf) = (fv.shape()[0], fv.shape()[1]);
                let l = bv.shape()[1];
                if self.needs(*frames) {
                    self.accum(g, *frames, |buf| {
                        kernels::overlap_add_bwd(
                            gy.data(),
                            fv.data(),
                            nb,
                            nf,
                            bv.data(),
                            l,
                            *stride,
                            Some(buf.data_mut()),
                            None,
                        );
                    });
                }
                if self.needs(*basis) {
                    self.accum(g, *basis, |buf| {
                        kernels::overlap_add_bwd(
                            gy.data(),
                            fv.data(),
                            nb,
                            nf,
                            bv.data(),
                            l,
                            *stride,
                            None,
                            Some(buf.data_mut()),
                        );
                    });
                }
            }
            Op::Relu(x) => {
                let yv = node.value.clone();
                self.accum(g, *x, |buf| {
                    for ((o, gv), yvv) in buf.data_mut().iter_mut().zip(gy.data()).zip(yv.data()) {
                        if *yvv > 0.0 {
                            *o += gv;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let yv = node.value.clone();
                self.accum(g, *x, |buf| {
                    for ((o, gv), yvv) in buf.data_mut().iter_mut().zip(gy.data()).zip(yv.data()) {
                        *o += gv * yvv * (1.0 - yvv);
                    }
                });
            }
            Op::PRelu { x, slope } => {
                let xv = self.value(*x).clone();
                let s = self.value(*slope).item();
                if self.needs(*x) {
                    self.accum(g, *x, |buf| {
                        for ((o, gv), xvv) in
                            buf.data_mut().iter_mut().zip(gy.data()).zip(xv.data())
                        {
                            *o += gv * if *xvv > 0.0 { 1.0 } else { s };
                        }
                    });
                }
                if self.needs(*slope) {
                    let ds: f64 = gy
                        .data()
                        .iter()
                        .zip(xv.data())
                        .filter(|(_, x)| **x <= 0.0)
                        .map(|(gv, x)| gv * x)
                        .sum();
                    self.accum(g, *slope, |buf| buf.data_mut()[0] += ds);
                }
            }
            Op::ChannelNorm {
                x,
                gamma,
                beta,
                eps,
            } => {
                let xv = self.value(*x).clone();
                let gv = self.value(*gamma).data().to_vec();
                let (c, t) = (xv.shape()[0], xv.shape()[1]);
                if self.needs(*x) {
                    self.accum(g, *x, |buf| {
                        for ci in 0..c {
                            let row = &xv.data()[ci * t..(ci + 1) * t];
                            let (mean, inv_std) = kernels::norm_stats(row, *eps);
                            let gam = gv[ci];
                            kernels::norm_bwd_group(
                                row,
                                &gy.data()[ci * t..(ci + 1) * t],
                                mean,
                                inv_std,
                                |_| gam,
                                &mut buf.data_mut()[ci * t..(ci + 1) * t],
                            );
                        }
                    });
                }
                self.norm_affine_grads(g, &xv, gy, *gamma, *beta, *eps, false);
            }
            Op::GlobalNorm {
                x,
                gamma,
                beta,
                eps,
            } => {
                let xv = self.value(*x).clone();
                let gv = self.value(*gamma).data().to_vec();
                let (_c, t) = (xv.shape()[0], xv.shape()[1]);
                if self.needs(*x) {
                    let (mean, inv_std) = kernels::norm_stats(xv.data(), *eps);
                    self.accum(g, *x, |buf| {
                        kernels::norm_bwd_group(
                            xv.data(),
                            gy.data(),
                            mean,
                            inv_std,
                            |i| gv[i / t],
                            buf.data_mut(),
                        );
                    });
                }
                self.norm_affine_grads(g, &xv, gy, *gamma, *beta, *eps, true);
            }
            Op::MatMul(a, b) => {
                let av = self.value(*a).clone();
                let bv = self.value(*b).clone();
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if self.needs(*a) {
                    // dA[m,k] += gy[m,n] . B^T[n,k]
                    self.accum(g, *a, |buf| {
                        for mi in 0..m {
                            for ki in 0..k {
                                let mut acc = 0.0;
                                for ni in 0..n {
                                    acc += gy.data()[mi * n + ni] * bv.data()[ki * n + ni];
                                }
                                buf.data_mut()[mi * k + ki] += acc;
                            }
                        }
                    });
                }
                if self.needs(*b) {
                    // dB[k,n] += A^T[k,m] . gy[m,n]
                    self.accum(g, *b, |buf| {
                        for mi in 0..m {
                            for ki in 0..k {
                                let avv = av.data()[mi * k + ki];
                                if avv == 0.0 {
                                    continue;
                                }
                                let brow = &mut buf.data_mut()[ki * n..(ki + 1) * n];
                                for (o, gvv) in
                                    brow.iter_mut().zip(&gy.data()[mi * n..(mi + 1) * n])
                                {
                                    *o += avv * gvv;
                                }
                            }
                        }
                    });
                }
            }
            Op::MulColVec { x, v } => {
                let xv = self.value(*x).clone();
                let vv = self.value(*v).data().to_vec();
                let (m, n) = (xv.shape()[0], xv.shape()[1]);
                if self.needs(*x) {
                    self.accum(g, *x, |buf| {
                        for mi in 0..m {
                            let s = vv[mi];
                            for (o, gv) in buf.data_mut()[mi * n..(mi + 1) * n]
                                .iter_mut()
                                .zip(&gy.data()[mi * n..(mi + 1) * n])
                            {
                                *o += gv * s;
                            }
                        }
                    });
                }
                if self.needs(*v) {
                    self.accum(g, *v, |buf| {
                        for mi in 0..m {
                            let dot: f64 = gy.data()[mi * n..(mi + 1) * n]
                                .iter()
                                .zip(&xv.data()[mi * n..(mi + 1) * n])
                                .map(|(a, b)| a * b)
                                .sum();
                            buf.data_mut()[mi] += dot;
                        }
                    });
                }
            }
            Op::AddColVec { x, v } => {
                let (m, n) = {
                    let xv = self.value(*x);
                    (xv.shape()[0], xv.shape()[1])
                };
                self.accum(g, *x, |buf| buf.add_assign(gy));
                if self.needs(*v) {
                    self.accum(g, *v, |buf| {
                        for mi in 0..m {
                            buf.data_mut()[mi] +=
                                gy.data()[mi * n..(mi + 1) * n].iter().sum::<f64>();
                        }
                    });
                }
            }
            Op::Softmax1d(x) => {
                let s = node.value.data().to_vec();
                let dot: f64 = gy.data().iter().zip(&s).map(|(a, b)| a * b).sum();
                self.accum(g, *x, |buf| {
                    for ((o, gv), sv) in buf.data_mut().iter_mut().zip(gy.data()).zip(&s) {
                        *o += sv * (gv - dot);
                    }
                });
            }
            Op::MseLoss { a, b, denom } => {
                let gs = gy.item();
                let av = self.value(*a).clone();
                let bv = self.value(*b).clone();
                let c = 2.0 * gs / denom;
                if self.needs(*a) {
                    self.accum(g, *a, |buf| {
                        for ((o, x), y) in buf.data_mut().iter_mut().zip(av.data()).zip(bv.data()) {
                            *o += c * (x - y);
                        }
                    });
                }
                if self.needs(*b) {
                    self.accum(g, *b, |buf| {
                        for ((o, x), y) in buf.data_mut().iter_mut().zip(av.data()).zip(bv.data()) {
                            *o -= c * (x - y);
                        }
                    });
                }
            }
            Op::SnrLoss {
                est,
                reference,
                eps,
            } => {
                let gs = gy.item();
                let ev = self.value(*est).clone();
                let rv = self.value(*reference).clone();
                let r: f64 = rv.sq_sum();
                let e: f64 = ev
                    .data()
                    .iter()
                    .zip(rv.data())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                let denom = e + eps * r;
                if self.needs(*est) {
                    let c = gs / (LN10_OVER_10 * denom);
                    self.accum(g, *est, |buf| {
                        for ((o, x), y) in buf.data_mut().iter_mut().zip(ev.data()).zip(rv.data()) {
                            *o += c * 2.0 * (x - y);
                        }
                    });
                }
                if self.needs(*reference) {
                    let c = gs / LN10_OVER_10;
                    self.accum(g, *reference, |buf| {
                        for ((o, x), y) in buf.data_mut().iter_mut().zip(ev.data()).zip(rv.data()) {
                            *o += c * ((-2.0 * (x - y) + 2.0 * eps * y) / denom - 2.0 * y / r);
                        }
                    });
                }
            }
            Op::CrossEntropyFrames { logits, labels } => {
                let gs = gy.item();
                let lv = self.value(*logits).clone();
                let (c, t) = (lv.shape()[0], lv.shape()[1]);
                let labels = labels.clone();
                self.accum(g, *logits, |buf| {
                    for ti in 0..t {
                        let mut m = f64::NEG_INFINITY;
                        for ci in 0..c {
                            m = m.max(lv.data()[ci * t + ti]);
                        }
                        let mut z = 0.0;
                        for ci in 0..c {
                            z += (lv.data()[ci * t + ti] - m).exp();
                        }
                        for ci in 0..c {
                            let p = (lv.data()[ci * t + ti] - m).exp() / z;
                            let ind = if labels[ti] as usize == ci { 1.0 } else { 0.0 };
                            buf.data_mut()[ci * t + ti] += gs * (p - ind) / t as f64;
                        }
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn norm_affine_grads(
        &self,
        g: &mut [Option<Tensor>],
        xv: &Tensor,
        gy: &Tensor,
        gamma: VarId,
        beta: VarId,
        eps: f64,
        global: bool,
    ) {
        let (c, t) = (xv.shape()[0], xv.shape()[1]);
        if self.needs(gamma) {
            let mut dg = vec![0.0; c];
            if global {
                let (mean, inv_std) = kernels::norm_stats(xv.data(), eps);
                for ci in 0..c {
                    for ti in 0..t {
                        let xhat = (xv.data()[ci * t + ti] - mean) * inv_std;
                        dg[ci] += gy.data()[ci * t + ti] * xhat;
                    }
                }
            } else {
                for ci in 0..c {
                    let row = &xv.data()[ci * t..(ci + 1) * t];
                    let (mean, inv_std) = kernels::norm_stats(row, eps);
                    for ti in 0..t {
                        let xhat = (row[ti] - mean) * inv_std;
                        dg[ci] += gy.data()[ci * t + ti] * xhat;
                    }
                }
            }
            self.accum(g, gamma, |buf| {
                for (o, d) in buf.data_mut().iter_mut().zip(&dg) {
                    *o += d;
                }
            });
        }
        if self.needs(beta) {
            self.accum(g, beta, |buf| {
                for ci in 0..c {
                    buf.data_mut()[ci] += gy.data()[ci * t..(ci + 1) * t].iter().sum::<f64>();
                }
            });
        }
    }

    fn accum(&self, g: &mut [Option<Tensor>], id: VarId, f: impl FnOnce(&mut Tensor)) {
        if !self.needs(id) {
            return;
        }
        let buf = g[id.0].get_or_insert_with(|| Tensor::zeros(self.value(id).shape()));
        f(buf);
    }
}
