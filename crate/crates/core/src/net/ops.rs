//! Network primitives and their exact backward passes.
//!
//! Every op is deterministic: accumulation orders are fixed (parallelism
//! only ever splits work so that each output element is written by exactly
//! one task), ties in pooling argmax go to the first element in row-major
//! window order, and reductions use fixed blocking. Convolutions are
//! cross-correlations with zero-padded `same` output.

use super::NetError;
use crate::net::tensor::Tensor;
use crate::parallel;

fn dims4(t: &Tensor, op: &'static str, what: &'static str) -> Result<[usize; 4], NetError> {
    match *t.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        ref s => Err(NetError::Shape {
            op,
            dimension: "rank",
            detail: format!("{what} must be rank 4, got shape {s:?}"),
        }),
    }
}

/// `same`-padded cross-correlation of `input` `[n, c_in, h, w]` with
/// `weights` `[c_out, c_in, k, k]` (odd `k`) plus `bias` `[c_out]`,
/// producing `[n, c_out, h, w]`.
pub fn conv2d(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor, NetError> {
    let [n, cin, h, w] = dims4(input, "conv2d", "input")?;
    let [cout, wcin, k, k2] = dims4(weights, "conv2d", "weights")?;
    if k != k2 || k % 2 == 0 {
        return Err(NetError::Shape {
            op: "conv2d",
            dimension: "kernel",
            detail: format!("kernel must be square with odd size, got {k}x{k2}"),
        });
    }
    if wcin != cin {
        return Err(NetError::Shape {
            op: "conv2d",
            dimension: "c_in",
            detail: format!("input has {cin} channels but weights expect {wcin}"),
        });
    }
    if bias.shape() != [cout] {
        return Err(NetError::Shape {
            op: "conv2d",
            dimension: "c_out",
            detail: format!(
                "bias shape {:?} does not match {cout} output channels",
                bias.shape()
            ),
        });
    }
    let pad = (k - 1) / 2;
    let plane = h * w;
    let mut out = Tensor::zeros(&[n, cout, h, w]);
    let in_data = input.data();
    let w_data = weights.data();
    let b_data = bias.data();
    parallel::for_each_chunk(out.data_mut(), plane, |idx, out_plane| {
        let ni = idx / cout;
        let co = idx % cout;
        out_plane.fill(b_data[co]);
        for ci in 0..cin {
            let in_plane = &in_data[(ni * cin + ci) * plane..][..plane];
            let kw = &w_data[(co * cin + ci) * k * k..][..k * k];
            accumulate_conv_plane(out_plane, in_plane, kw, h, w, k, pad);
        }
    });
    Ok(out)
}

/// `out += kw (*) inp` for one channel plane; `kw` is a `k*k` kernel.
fn accumulate_conv_plane(out: &mut [f32], inp: &[f32], kw: &[f32], h: usize, w: usize, k: usize, pad: usize) {
    if k == 3 && w >= 2 {
        return conv_plane_k3(out, inp, kw, h, w);
    }
    // Generic path: one shifted axpy pass per kernel tap.
    for ky in 0..k {
        let iy_off = ky as isize - pad as isize;
        let oy_lo = (-iy_off).max(0) as usize;
        let oy_hi = ((h as isize - iy_off).min(h as isize)).max(0) as usize;
        for kx in 0..k {
            let wv = kw[ky * k + kx];
            let ix_off = kx as isize - pad as isize;
            let ox_lo = (-ix_off).max(0) as usize;
            let ox_hi = ((w as isize - ix_off).min(w as isize)).max(0) as usize;
            if ox_lo >= ox_hi {
                continue;
            }
            for oy in oy_lo..oy_hi {
                let iy = (oy as isize + iy_off) as usize;
                let ix0 = (ox_lo as isize + ix_off) as usize;
                let or = &mut out[oy * w + ox_lo..oy * w + ox_hi];
                let ir = &inp[iy * w + ix0..][..ox_hi - ox_lo];
                for (o, &i) in or.iter_mut().zip(ir) {
                    *o += wv * i;
                }
            }
        }
    }
}

/// 3x3 fast path: one fused pass per kernel row, vectorizable.
fn conv_plane_k3(out: &mut [f32], inp: &[f32], kw: &[f32], h: usize, w: usize) {
    for ky in 0..3usize {
        let iy_off = ky as isize - 1;
        let oy_lo = (-iy_off).max(0) as usize;
        let oy_hi = ((h as isize - iy_off).min(h as isize)).max(0) as usize;
        let (w0, w1, w2) = (kw[ky * 3], kw[ky * 3 + 1], kw[ky * 3 + 2]);
        for oy in oy_lo..oy_hi {
            let iy = (oy as isize + iy_off) as usize;
            let or = &mut out[oy * w..][..w];
            let ir = &inp[iy * w..][..w];
            or[0] += w1 * ir[0] + w2 * ir[1];
            or[w - 1] += w0 * ir[w - 2] + w1 * ir[w - 1];
            let dst = &mut or[1..w - 1];
            let s0 = &ir[..w - 2];
            let s1 = &ir[1..w - 1];
            let s2 = &ir[2..w];
            for ((d, &a), (&b, &c)) in dst.iter_mut().zip(s0).zip(s1.iter().zip(s2)) {
                *d += w0 * a + w1 * b + w2 * c;
            }
        }
    }
}

/// Gradients of [`conv2d`] with respect to its input, weights, and bias.
pub struct Conv2dGrads {
    pub dinput: Tensor,
    pub dweights: Tensor,
    pub dbias: Tensor,
}

/// Backward pass of [`conv2d`]. `input` and `weights` are the forward
/// arguments; `dout` is the loss gradient at the output, shape
/// `[n, c_out, h, w]`.
pub fn conv2d_backward(input: &Tensor, weights: &Tensor, dout: &Tensor) -> Conv2dGrads {
    let [n, cin, h, w] = match *input.shape() {
        [a, b, c, d] => [a, b, c, d],
        _ => unreachable!("conv2d_backward input was validated by conv2d"),
    };
    let [cout, _, k, _] = match *weights.shape() {
        [a, b, c, d] => [a, b, c, d],
        _ => unreachable!(),
    };
    debug_assert_eq!(dout.shape(), &[n, cout, h, w]);
    let pad = (k - 1) / 2;
    let plane = h * w;
    let in_data = input.data();
    let w_data = weights.data();
    let dout_data = dout.data();

    // d(input): correlate dout with the spatially flipped kernels,
    // transposing the channel roles.
    let mut flipped = vec![0.0f32; w_data.len()];
    for co in 0..cout {
        for ci in 0..cin {
            let src = &w_data[(co * cin + ci) * k * k..][..k * k];
            let dst = &mut flipped[(co * cin + ci) * k * k..][..k * k];
            for i in 0..k * k {
                dst[i] = src[k * k - 1 - i];
            }
        }
    }
    let mut dinput = Tensor::zeros(&[n, cin, h, w]);
    parallel::for_each_chunk(dinput.data_mut(), plane, |idx, din_plane| {
        let ni = idx / cin;
        let ci = idx % cin;
        for co in 0..cout {
            let dout_plane = &dout_data[(ni * cout + co) * plane..][..plane];
            let kw = &flipped[(co * cin + ci) * k * k..][..k * k];
            accumulate_conv_plane(din_plane, dout_plane, kw, h, w, k, pad);
        }
    });

    // d(weights): for each tap, a sum of row dot products between dout and
    // the correspondingly shifted input, accumulated in f64 across rows.
    let mut dweights = Tensor::zeros(weights.shape());
    parallel::for_each_chunk(dweights.data_mut(), cin * k * k, |co, dw_chunk| {
        let mut acc = vec![0.0f64; cin * k * k];
        for ni in 0..n {
            let dout_plane = &dout_data[(ni * cout + co) * plane..][..plane];
            for ci in 0..cin {
                let in_plane = &in_data[(ni * cin + ci) * plane..][..plane];
                for ky in 0..k {
                    let iy_off = ky as isize - pad as isize;
                    let oy_lo = (-iy_off).max(0) as usize;
                    let oy_hi = ((h as isize - iy_off).min(h as isize)).max(0) as usize;
                    for kx in 0..k {
                        let ix_off = kx as isize - pad as isize;
                        let ox_lo = (-ix_off).max(0) as usize;
                        let ox_hi = ((w as isize - ix_off).min(w as isize)).max(0) as usize;
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let mut tap = 0.0f64;
                        for oy in oy_lo..oy_hi {
                            let iy = (oy as isize + iy_off) as usize;
                            let ix0 = (ox_lo as isize + ix_off) as usize;
                            let dr = &dout_plane[oy * w + ox_lo..oy * w + ox_hi];
                            let ir = &in_plane[iy * w + ix0..][..ox_hi - ox_lo];
                            tap += dot_f32(dr, ir) as f64;
                        }
                        acc[(ci * k + ky) * k + kx] += tap;
                    }
                }
            }
        }
        for (dst, &a) in dw_chunk.iter_mut().zip(&acc) {
            *dst = a as f32;
        }
    });

    // d(bias): plain sums of dout planes.
    let mut dbias = Tensor::zeros(&[cout]);
    for co in 0..cout {
        let mut acc = 0.0f64;
        for ni in 0..n {
            for &v in &dout_data[(ni * cout + co) * plane..][..plane] {
                acc += v as f64;
            }
        }
        dbias.data_mut()[co] = acc as f32;
    }

    Conv2dGrads {
        dinput,
        dweights,
        dbias,
    }
}

/// Deterministic blocked dot product (8 independent lanes, fixed fold order).
fn dot_f32(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0.0f32; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (xa, xb) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            lanes[l] += xa[l] * xb[l];
        }
    }
    let mut s = 0.0f32;
    for l in 0..8 {
        s += lanes[l];
    }
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        s += x * y;
    }
    s
}

/// Elementwise `max(0, x)`.
pub fn relu(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

/// Backward pass of [`relu`], masked by the forward *output* (`y > 0` holds
/// exactly where `x > 0`; the subgradient at 0 is taken as 0).
pub fn relu_backward(output: &Tensor, dout: &Tensor) -> Tensor {
    debug_assert_eq!(output.shape(), dout.shape());
    let mut din = dout.clone();
    for (d, &y) in din.data_mut().iter_mut().zip(output.data()) {
        if y <= 0.0 {
            *d = 0.0;
        }
    }
    din
}

/// 2x2 max pooling with stride 2 over `[n, c, h, w]` (`h`, `w` even).
///
/// Returns the pooled tensor and, per output element, the flat index of the
/// selected input element; ties go to the first element of the window in
/// row-major order, so routing is fully deterministic.
pub fn maxpool2(x: &Tensor) -> Result<(Tensor, Vec<u32>), NetError> {
    let [n, c, h, w] = dims4(x, "maxpool2", "input")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(NetError::OddPool { h, w });
    }
    assert!(x.len() <= u32::MAX as usize, "tensor too large for u32 argmax routing");
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut argmax = vec![0u32; out.len()];
    let data = x.data();
    let out_data = out.data_mut();
    for plane_idx in 0..n * c {
        let base = plane_idx * h * w;
        let obase = plane_idx * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                let i00 = base + (2 * oy) * w + 2 * ox;
                let candidates = [i00, i00 + 1, i00 + w, i00 + w + 1];
                let mut best = candidates[0];
                let mut best_v = data[best];
                for &i in &candidates[1..] {
                    if data[i] > best_v {
                        best = i;
                        best_v = data[i];
                    }
                }
                out_data[obase + oy * ow + ox] = best_v;
                argmax[obase + oy * ow + ox] = best as u32;
            }
        }
    }
    Ok((out, argmax))
}

/// Backward pass of [`maxpool2`]: routes each output gradient to the input
/// element that won the forward max.
pub fn maxpool2_backward(argmax: &[u32], input_shape: &[usize], dout: &Tensor) -> Tensor {
    debug_assert_eq!(argmax.len(), dout.len());
    let mut din = Tensor::zeros(input_shape);
    let din_data = din.data_mut();
    for (&idx, &g) in argmax.iter().zip(dout.data()) {
        din_data[idx as usize] += g;
    }
    din
}

/// Nearest-neighbor 2x upsampling of `[n, c, h, w]` to `[n, c, 2h, 2w]`.
pub fn upsample2(x: &Tensor) -> Tensor {
    let [n, c, h, w] = match *x.shape() {
        [a, b, cc, d] => [a, b, cc, d],
        ref s => panic!("upsample2 expects rank 4, got {s:?}"),
    };
    let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
    let src = x.data();
    let dst = out.data_mut();
    for plane_idx in 0..n * c {
        let base = plane_idx * h * w;
        let obase = plane_idx * 4 * h * w;
        for y in 0..h {
            for x_ in 0..w {
                let v = src[base + y * w + x_];
                let o = obase + (2 * y) * (2 * w) + 2 * x_;
                dst[o] = v;
                dst[o + 1] = v;
                dst[o + 2 * w] = v;
                dst[o + 2 * w + 1] = v;
            }
        }
    }
    out
}

/// Backward pass of [`upsample2`]: each input element collects the sum of
/// its four replicas, in fixed row-major order.
pub fn upsample2_backward(dout: &Tensor) -> Tensor {
    let [n, c, h2, w2] = match *dout.shape() {
        [a, b, cc, d] => [a, b, cc, d],
        ref s => panic!("upsample2_backward expects rank 4, got {s:?}"),
    };
    debug_assert!(h2 % 2 == 0 && w2 % 2 == 0);
    let (h, w) = (h2 / 2, w2 / 2);
    let mut din = Tensor::zeros(&[n, c, h, w]);
    let src = dout.data();
    let dst = din.data_mut();
    for plane_idx in 0..n * c {
        let base = plane_idx * h * w;
        let obase = plane_idx * h2 * w2;
        for y in 0..h {
            for x_ in 0..w {
                let o = obase + (2 * y) * w2 + 2 * x_;
                dst[base + y * w + x_] = src[o] + src[o + 1] + src[o + w2] + src[o + w2 + 1];
            }
        }
    }
    din
}

/// Concatenates two `[n, c, h, w]` tensors along the channel axis.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor, NetError> {
    let [n, ca, h, w] = dims4(a, "concat_channels", "first input")?;
    let [nb, cb, hb, wb] = dims4(b, "concat_channels", "second input")?;
    for (dim, x, y) in [("n", n, nb), ("h", h, hb), ("w", w, wb)] {
        if x != y {
            return Err(NetError::Shape {
                op: "concat_channels",
                dimension: dim,
                detail: format!("first input has {x}, second has {y}"),
            });
        }
    }
    let mut out = Tensor::zeros(&[n, ca + cb, h, w]);
    let plane = h * w;
    let dst = out.data_mut();
    for ni in 0..n {
        let obase = ni * (ca + cb) * plane;
        dst[obase..obase + ca * plane]
            .copy_from_slice(&a.data()[ni * ca * plane..][..ca * plane]);
        dst[obase + ca * plane..obase + (ca + cb) * plane]
            .copy_from_slice(&b.data()[ni * cb * plane..][..cb * plane]);
    }
    Ok(out)
}

/// Splits a `[n, ca + cb, h, w]` tensor back into `([n, ca, h, w],
/// [n, cb, h, w])`; the exact inverse of [`concat_channels`], and therefore
/// also its backward pass.
pub fn split_channels(x: &Tensor, ca: usize) -> (Tensor, Tensor) {
    let [n, c, h, w] = match *x.shape() {
        [a, b, cc, d] => [a, b, cc, d],
        ref s => panic!("split_channels expects rank 4, got {s:?}"),
    };
    assert!(ca <= c, "cannot split {ca} channels out of {c}");
    let cb = c - ca;
    let plane = h * w;
    let mut a = Tensor::zeros(&[n, ca, h, w]);
    let mut b = Tensor::zeros(&[n, cb, h, w]);
    for ni in 0..n {
        let base = ni * c * plane;
        a.data_mut()[ni * ca * plane..][..ca * plane]
            .copy_from_slice(&x.data()[base..base + ca * plane]);
        b.data_mut()[ni * cb * plane..][..cb * plane]
            .copy_from_slice(&x.data()[base + ca * plane..base + c * plane]);
    }
    (a, b)
}

/// Class-weighted softmax cross-entropy over `[n, k, h, w]` logits.
///
/// `targets` holds one class index per pixel in `[n, h, w]` row-major
/// order; `class_weights` has one positive weight per class. The loss is
/// the weight-normalized mean `sum(w_t * ce) / sum(w_t)`, accumulated in
/// f64, and the returned gradient is with respect to the logits.
///
/// Softmax is stabilized by max-subtraction, so arbitrarily large logits
/// cannot overflow; non-finite logits propagate to a non-finite loss, which
/// is the training loop's divergence signal.
pub fn softmax_cross_entropy(
    logits: &Tensor,
    targets: &[u8],
    class_weights: &[f32],
) -> Result<(f64, Tensor), NetError> {
    let [n, nclasses, h, w] = dims4(logits, "softmax_cross_entropy", "logits")?;
    if class_weights.len() != nclasses {
        return Err(NetError::Shape {
            op: "softmax_cross_entropy",
            dimension: "classes",
            detail: format!(
                "{} class weights for {nclasses} classes",
                class_weights.len()
            ),
        });
    }
    if targets.len() != n * h * w {
        return Err(NetError::Shape {
            op: "softmax_cross_entropy",
            dimension: "targets",
            detail: format!("{} targets for {} pixels", targets.len(), n * h * w),
        });
    }

    let plane = h * w;
    let data = logits.data();
    let mut dlogits = Tensor::zeros(logits.shape());
    let dl = dlogits.data_mut();
    let mut probs = vec![0.0f32; nclasses];

    // First pass computes the normalizer; the per-pixel gradient needs it,
    // so gradients are scaled in a second pass.
    let mut loss_sum = 0.0f64;
    let mut weight_sum = 0.0f64;
    for ni in 0..n {
        for p in 0..plane {
            let t = targets[ni * plane + p] as usize;
            if t >= nclasses {
                return Err(NetError::TargetOutOfRange {
                    value: targets[ni * plane + p],
                    index: ni * plane + p,
                    num_classes: nclasses,
                });
            }
            let base = ni * nclasses * plane + p;
            let mut m = f32::NEG_INFINITY;
            for c in 0..nclasses {
                let v = data[base + c * plane];
                if !(v <= m) {
                    m = v; // also catches NaN, which then poisons the loss
                }
            }
            let mut denom = 0.0f32;
            for c in 0..nclasses {
                let e = (data[base + c * plane] - m).exp();
                probs[c] = e;
                denom += e;
            }
            let wt = class_weights[t];
            // ce = -ln(p_t) = ln(denom) - (logit_t - m)
            let ce = (denom as f64).ln() - (data[base + t * plane] - m) as f64;
            loss_sum += wt as f64 * ce;
            weight_sum += wt as f64;
            for c in 0..nclasses {
                let p_c = probs[c] / denom;
                let indicator = if c == t { 1.0 } else { 0.0 };
                dl[base + c * plane] = wt * (p_c - indicator);
            }
        }
    }

    if weight_sum <= 0.0 {
        // Every pixel belongs to a zero-weight class: no signal.
        for v in dl.iter_mut() {
            *v = 0.0;
        }
        return Ok((0.0, dlogits));
    }
    let inv = (1.0 / weight_sum) as f32;
    for v in dl.iter_mut() {
        *v *= inv;
    }
    Ok((loss_sum / weight_sum, dlogits))
}

/// Per-pixel argmax over the class axis of `[n, k, h, w]` logits (first
/// maximum wins), flattened in `[n, h, w]` order.
pub fn argmax_classes(logits: &Tensor) -> Vec<u8> {
    let [n, k, h, w] = match *logits.shape() {
        [a, b, c, d] => [a, b, c, d],
        ref s => panic!("argmax_classes expects rank 4, got {s:?}"),
    };
    debug_assert!(k <= u8::MAX as usize);
    let plane = h * w;
    let data = logits.data();
    let mut out = vec![0u8; n * plane];
    for ni in 0..n {
        for p in 0..plane {
            let base = ni * k * plane + p;
            let mut best = 0usize;
            let mut best_v = data[base];
            for c in 1..k {
                let v = data[base + c * plane];
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            out[ni * plane + p] = best as u8;
        }
    }
    out
}
