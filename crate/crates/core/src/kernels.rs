//! Low-level numeric kernels: 1-D convolutions, overlap-add synthesis and
//! normalizations, each with the matching gradient routines.
//!
//! Both the plain inference paths and the autodiff tape call into these
//! functions, so there is a single definition of every forward rule.

#![allow(clippy::too_many_arguments)]
#![allow(clippy::needless_range_loop)]

/// Output length of a 1-D convolution.
pub fn conv_out_len(t_in: usize, k: usize, stride: usize, dilation: usize, pad: usize) -> usize {
    let span = dilation * (k - 1) + 1;
    if t_in + 2 * pad < span {
        return 0;
    }
    (t_in + 2 * pad - span) / stride + 1
}

/// y[co, t] = bias[co] + sum_{ci, kk} w[co, ci, kk] * x[ci, t*stride + kk*dilation - pad]
pub fn conv1d_fwd(
    x: &[f64],
    cin: usize,
    t_in: usize,
    w: &[f64],
    cout: usize,
    k: usize,
    bias: Option<&[f64]>,
    stride: usize,
    dilation: usize,
    pad: usize,
    y: &mut [f64],
) {
    let t_out = conv_out_len(t_in, k, stride, dilation, pad);
    debug_assert_eq!(y.len(), cout * t_out);
    for co in 0..cout {
        let y_row = &mut y[co * t_out..(co + 1) * t_out];
        let b = bias.map_or(0.0, |b| b[co]);
        y_row.fill(b);
        for ci in 0..cin {
            let x_row = &x[ci * t_in..(ci + 1) * t_in];
            let w_row = &w[(co * cin + ci) * k..(co * cin + ci + 1) * k];
            for (kk, &wv) in w_row.iter().enumerate() {
                if wv == 0.0 {
                    continue;
                }
                let off = (kk * dilation) as isize - pad as isize;
                let (t_lo, t_hi) = valid_range(off, stride, t_in, t_out);
                if t_hi <= t_lo {
                    continue;
                }
                if stride == 1 {
                    let x_start = (t_lo as isize + off) as usize;
                    let xs = &x_row[x_start..x_start + (t_hi - t_lo)];
                    for (yv, xv) in y_row[t_lo..t_hi].iter_mut().zip(xs) {
                        *yv += wv * xv;
                    }
                } else {
                    for t in t_lo..t_hi {
                        let xi = (t * stride) as isize + off;
                        y_row[t] += wv * x_row[xi as usize];
                    }
                }
            }
        }
    }
}

/// Gradient of `conv1d_fwd` with respect to the input, accumulated into `gx`.
pub fn conv1d_bwd_input(
    gy: &[f64],
    cin: usize,
    t_in: usize,
    w: &[f64],
    cout: usize,
    k: usize,
    stride: usize,
    dilation: usize,
    pad: usize,
    gx: &mut [f64],
) {
    let t_out = gy.len() / cout;
    for co in 0..cout {
        let g_row = &gy[co * t_out..(co + 1) * t_out];
        for ci in 0..cin {
            let gx_row = &mut gx[ci * t_in..(ci + 1) * t_in];
            let w_row = &w[(co * cin + ci) * k..(co * cin + ci + 1) * k];
            for (kk, &wv) in w_row.iter().enumerate() {
                if wv == 0.0 {
                    continue;
                }
                let off = (kk * dilation) as isize - pad as isize;
                let (t_lo, t_hi) = valid_range(off, stride, t_in, t_out);
                for t in t_lo..t_hi {
                    let xi = ((t * stride) as isize + off) as usize;
                    gx_row[xi] += wv * g_row[t];
                }
            }
        }
    }
}

/// Gradient of `conv1d_fwd` with respect to the weights, accumulated into `gw`.
pub fn conv1d_bwd_weight(
    gy: &[f64],
    x: &[f64],
    cin: usize,
    t_in: usize,
    cout: usize,
    k: usize,
    stride: usize,
    dilation: usize,
    pad: usize,
    gw: &mut [f64],
) {
    let t_out = gy.len() / cout;
    for co in 0..cout {
        let g_row = &gy[co * t_out..(co + 1) * t_out];
        for ci in 0..cin {
            let x_row = &x[ci * t_in..(ci + 1) * t_in];
            let gw_row = &mut gw[(co * cin + ci) * k..(co * cin + ci + 1) * k];
            for (kk, gwv) in gw_row.iter_mut().enumerate() {
                let off = (kk * dilation) as isize - pad as isize;
                let (t_lo, t_hi) = valid_range(off, stride, t_in, t_out);
                let mut acc = 0.0;
                for t in t_lo..t_hi {
                    let xi = ((t * stride) as isize + off) as usize;
                    acc += g_row[t] * x_row[xi];
                }
                *gwv += acc;
            }
        }
    }
}

/// Gradient of `conv1d_fwd` with respect to the bias, accumulated into `gb`.
pub fn conv1d_bwd_bias(gy: &[f64], cout: usize, gb: &mut [f64]) {
    let t_out = gy.len() / cout;
    for co in 0..cout {
        gb[co] += gy[co * t_out..(co + 1) * t_out].iter().sum::<f64>();
    }
}

/// Depthwise 1-D convolution with "same" zero padding:
/// y[c, t] = bias[c] + sum_kk w[c, kk] * x[c, t + (kk - (k-1)/2)*dilation]
pub fn dwconv1d_fwd(
    x: &[f64],
    channels: usize,
    t: usize,
    w: &[f64],
    k: usize,
    bias: Option<&[f64]>,
    dilation: usize,
    y: &mut [f64],
) {
    debug_assert!(k % 2 == 1, "same-padding depthwise conv needs odd kernel");
    let half = (k / 2) * dilation;
    for c in 0..channels {
        let x_row = &x[c * t..(c + 1) * t];
        let y_row = &mut y[c * t..(c + 1) * t];
        let b = bias.map_or(0.0, |b| b[c]);
        y_row.fill(b);
        for kk in 0..k {
            let wv = w[c * k + kk];
            if wv == 0.0 {
                continue;
            }
            let off = (kk * dilation) as isize - half as isize;
            let (t_lo, t_hi) = valid_range(off, 1, t, t);
            if t_hi <= t_lo {
                continue;
            }
            let x_start = (t_lo as isize + off) as usize;
            let xs = &x_row[x_start..x_start + (t_hi - t_lo)];
            for (yv, xv) in y_row[t_lo..t_hi].iter_mut().zip(xs) {
                *yv += wv * xv;
            }
        }
    }
}

pub fn dwconv1d_bwd(
    gy: &[f64],
    x: &[f64],
    channels: usize,
    t: usize,
    w: &[f64],
    k: usize,
    dilation: usize,
    gx: Option<&mut [f64]>,
    gw: Option<&mut [f64]>,
    gb: Option<&mut [f64]>,
) {
    let half = (k / 2) * dilation;
    let mut gx = gx;
    let mut gw = gw;
    let mut gb = gb;
    for c in 0..channels {
        let g_row = &gy[c * t..(c + 1) * t];
        let x_row = &x[c * t..(c + 1) * t];
        for kk in 0..k {
            let off = (kk * dilation) as isize - half as isize;
            let (t_lo, t_hi) = valid_range(off, 1, t, t);
            if let Some(gx) = gx.as_deref_mut() {
                let wv = w[c * k + kk];
                let gx_row = &mut gx[c * t..(c + 1) * t];
                for ti in t_lo..t_hi {
                    gx_row[(ti as isize + off) as usize] += wv * g_row[ti];
                }
            }
            if let Some(gw) = gw.as_deref_mut() {
                let mut acc = 0.0;
                for ti in t_lo..t_hi {
                    acc += g_row[ti] * x_row[(ti as isize + off) as usize];
                }
                gw[c * k + kk] += acc;
            }
        }
        if let Some(gb) = gb.as_deref_mut() {
            gb[c] += g_row.iter().sum::<f64>();
        }
    }
}

/// Overlap-add synthesis: y[f*stride + l] += sum_n frames[n, f] * basis[n, l].
/// Output length is (n_frames - 1) * stride + l_basis.
pub fn overlap_add_fwd(
    frames: &[f64],
    n_basis: usize,
    n_frames: usize,
    basis: &[f64],
    l_basis: usize,
    stride: usize,
    y: &mut [f64],
) {
    y.fill(0.0);
    for n in 0..n_basis {
        let b_row = &basis[n * l_basis..(n + 1) * l_basis];
        let f_row = &frames[n * n_frames..(n + 1) * n_frames];
        for (f, &fv) in f_row.iter().enumerate() {
            if fv == 0.0 {
                continue;
            }
            let y_seg = &mut y[f * stride..f * stride + l_basis];
            for (yv, bv) in y_seg.iter_mut().zip(b_row) {
                *yv += fv * bv;
            }
        }
    }
}

pub fn overlap_add_bwd(
    gy: &[f64],
    frames: &[f64],
    n_basis: usize,
    n_frames: usize,
    basis: &[f64],
    l_basis: usize,
    stride: usize,
    g_frames: Option<&mut [f64]>,
    g_basis: Option<&mut [f64]>,
) {
    if let Some(gf) = g_frames {
        for n in 0..n_basis {
            let b_row = &basis[n * l_basis..(n + 1) * l_basis];
            let gf_row = &mut gf[n * n_frames..(n + 1) * n_frames];
            for (f, gfv) in gf_row.iter_mut().enumerate() {
                let g_seg = &gy[f * stride..f * stride + l_basis];
                let mut acc = 0.0;
                for (gv, bv) in g_seg.iter().zip(b_row) {
                    acc += gv * bv;
                }
                *gfv += acc;
            }
        }
    }
    if let Some(gb) = g_basis {
        for n in 0..n_basis {
            let gb_row = &mut gb[n * l_basis..(n + 1) * l_basis];
            let f_row = &frames[n * n_frames..(n + 1) * n_frames];
            for (f, &fv) in f_row.iter().enumerate() {
                if fv == 0.0 {
                    continue;
                }
                let g_seg = &gy[f * stride..f * stride + l_basis];
                for (gbv, gv) in gb_row.iter_mut().zip(g_seg) {
                    *gbv += fv * gv;
                }
            }
        }
    }
}

/// Normalization statistics over a slice: (mean, 1/sqrt(var + eps)).
pub fn norm_stats(x: &[f64], eps: f64) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

/// y = gamma * (x - mean) * inv_std + beta over the given slice.
pub fn norm_apply(x: &[f64], mean: f64, inv_std: f64, gamma: f64, beta: f64, y: &mut [f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv = gamma * (xv - mean) * inv_std + beta;
    }
}

/// Backward pass of a normalization group that shares (mean, inv_std).
/// `gamma_of` maps an element index to its channel gain. Returns the
/// gradient with respect to x accumulated into gx; per-channel gamma/beta
/// grads are the caller's job (they need x_hat, provided by `xhat_out`).
pub fn norm_bwd_group(
    x: &[f64],
    gy: &[f64],
    mean: f64,
    inv_std: f64,
    gamma_of: impl Fn(usize) -> f64,
    gx: &mut [f64],
) {
    let n = x.len() as f64;
    // ghat = gy * gamma; gx = inv_std * (ghat - mean(ghat) - xhat * mean(ghat*xhat))
    let mut sum_ghat = 0.0;
    let mut sum_ghat_xhat = 0.0;
    for (i, (&xv, &gv)) in x.iter().zip(gy).enumerate() {
        let ghat = gv * gamma_of(i);
        let xhat = (xv - mean) * inv_std;
        sum_ghat += ghat;
        sum_ghat_xhat += ghat * xhat;
    }
    let m_ghat = sum_ghat / n;
    let m_ghat_xhat = sum_ghat_xhat / n;
    for (i, (&xv, &gv)) in x.iter().zip(gy).enumerate() {
        let ghat = gv * gamma_of(i);
        let xhat = (xv - mean) * inv_std;
        gx[i] += inv_std * (ghat - m_ghat - xhat * m_ghat_xhat);
    }
}

/// Plain matrix product: y[m, n] = sum_k a[m, k] * b[k, n].
pub fn matmul(a: &[f64], m: usize, kdim: usize, b: &[f64], n: usize, y: &mut [f64]) {
    y.fill(0.0);
    for mi in 0..m {
        let a_row = &a[mi * kdim..(mi + 1) * kdim];
        let y_row = &mut y[mi * n..(mi + 1) * n];
        for (ki, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[ki * n..(ki + 1) * n];
            for (yv, bv) in y_row.iter_mut().zip(b_row) {
                *yv += av * bv;
            }
        }
    }
}

fn valid_range(off: isize, stride: usize, t_in: usize, t_out: usize) -> (usize, usize) {
    // Range of t such that 0 <= t*stride + off < t_in.
    let s = stride as isize;
    let t_lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
    let t_hi = if (t_in as isize) > off {
        ((t_in as isize - 1 - off) / s + 1).min(t_out as isize)
    } else {
        0
    };
    if t_hi <= t_lo {
        (0, 0)
    } else {
        (t_lo as usize, t_hi as usize)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_matches_direct_sum() {
        // 2 input channels, 2 output channels, k=3, stride 2, pad 1.
        let x = [
            1.0, 2.0, 3.0, 4.0, 5.0, /* ch2 */ -1.0, 0.5, 2.0, -2.0, 1.0,
        ];
        let w = [
            0.5, -1.0, 0.25, /* co0,ci1 */ 1.0, 0.0, -0.5, //
            -0.25, 0.75, 1.5, /* co1,ci1 */ 0.0, 2.0, -1.0,
        ];
        let bias = [0.1, -0.2];
        let (cin, t_in, cout, k, stride, dilation, pad) = (2, 5, 2, 3, 2, 1, 1);
        let t_out = conv_out_len(t_in, k, stride, dilation, pad);
        let mut y = vec![0.0; cout * t_out];
        conv1d_fwd(
            &x,
            cin,
            t_in,
            &w,
            cout,
            k,
            Some(&bias),
            stride,
            dilation,
            pad,
            &mut y,
        );

        let get = |ci: usize, i: isize| -> f64 {
            if i < 0 || i >= t_in as isize {
                0.0
            } else {
                x[ci * t_in + i as usize]
            }
        };
        for co in 0..cout {
            for t in 0..t_out {
                let mut want = bias[co];
                for ci in 0..cin {
                    for kk in 0..k {
                        let idx = (t * stride + kk * dilation) as isize - pad as isize;
                        want += w[(co * cin + ci) * k + kk] * get(ci, idx);
                    }
                }
                assert!((y[co * t_out + t] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn overlap_add_covers_every_tap() {
        // One basis vector of ones, stride 2: each frame spreads into 4 taps.
        let frames = [1.0, 10.0, 100.0];
        let basis = [1.0, 1.0, 1.0, 1.0];
        let mut y = vec![0.0; 2 * 2 + 4];
        overlap_add_fwd(&frames, 1, 3, &basis, 4, 2, &mut y);
        assert_eq!(y, vec![1.0, 1.0, 11.0, 11.0, 110.0, 110.0, 100.0, 100.0]);
    }

    #[test]
    fn norm_produces_zero_mean_unit_var() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let (mean, inv_std) = norm_stats(&x, 0.0);
        let mut y = [0.0; 4];
        norm_apply(&x, mean, inv_std, 1.0, 0.0, &mut y);
        let m: f64 = y.iter().sum::<f64>() / 4.0;
        let v: f64 = y.iter().map(|a| a * a).sum::<f64>() / 4.0;
        assert!(m.abs() < 1e-12);
        assert!((v - 1.0).abs() < 1e-12);
    }
}
