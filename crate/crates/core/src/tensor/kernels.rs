//! Operator kernels.
//!
//! Each kernel documents its accumulation order; that order is a contract.
//! The reference kernels follow the naive loop definition directly. The
//! `*_blocked` variants reorganize memory access (padded buffers, output
//! tiling) but visit reduction terms in the identical order, so their outputs
//! are bit-identical to the reference kernels.
//!
//! NaN policy: kernels propagate NaN from inputs but never create NaN from
//! finite inputs, fast-math included.

use super::{Padding, Tensor, TensorError};

/// Accumulation order: channel-major, then kernel row, then kernel column;
/// bias (when present) is added once after the reduction.
pub fn conv2d(
    input: &Tensor,
    weights: &Tensor,
    bias: Option<&Tensor>,
    stride: (usize, usize),
    padding: Padding,
) -> Result<Tensor, TensorError> {
    let geom = ConvGeometry::resolve("conv2d", input, weights, bias, stride, padding)?;
    let (n_batch, in_c, in_h, in_w) = geom.input;
    let (out_c, _, k_h, k_w) = geom.kernel;
    let x = input.data();
    let w = weights.data();

    let mut out = vec![0.0f32; n_batch * out_c * geom.out_h * geom.out_w];
    let mut idx = 0;
    for n in 0..n_batch {
        for k in 0..out_c {
            for oh in 0..geom.out_h {
                let ih0 = (oh * geom.stride.0) as isize - geom.pad.0 as isize;
                for ow in 0..geom.out_w {
                    let iw0 = (ow * geom.stride.1) as isize - geom.pad.1 as isize;
                    let mut acc = 0.0f32;
                    for c in 0..in_c {
                        let x_plane = (n * in_c + c) * in_h * in_w;
                        let w_plane = (k * in_c + c) * k_h * k_w;
                        for r in 0..k_h {
                            let ih = ih0 + r as isize;
                            if ih < 0 || ih >= in_h as isize {
                                continue;
                            }
                            for s in 0..k_w {
                                let iw = iw0 + s as isize;
                                if iw < 0 || iw >= in_w as isize {
                                    continue;
                                }
                                acc += x[x_plane + ih as usize * in_w + iw as usize]
                                    * w[w_plane + r * k_w + s];
                            }
                        }
                    }
                    if let Some(b) = bias {
                        acc += b.data()[k];
                    }
                    out[idx] = acc;
                    idx += 1;
                }
            }
        }
    }
    Tensor::new(vec![n_batch, out_c, geom.out_h, geom.out_w], out)
}

/// Cache-friendly conv2d: materializes a zero-padded input plane per image
/// and hoists weight rows, keeping the reference accumulation order.
/// Bit-identical to [`conv2d`].
pub fn conv2d_blocked(
    input: &Tensor,
    weights: &Tensor,
    bias: Option<&Tensor>,
    stride: (usize, usize),
    padding: Padding,
) -> Result<Tensor, TensorError> {
    let geom = ConvGeometry::resolve("conv2d", input, weights, bias, stride, padding)?;
    let (n_batch, in_c, in_h, in_w) = geom.input;
    let (out_c, _, k_h, k_w) = geom.kernel;
    let x = input.data();
    let w = weights.data();

    // Padded extents cover every window the output touches, and the whole
    // input even when VALID padding crops an edge.
    let pad_h = ((geom.out_h - 1) * geom.stride.0 + k_h).max(geom.pad.0 + in_h);
    let pad_w = ((geom.out_w - 1) * geom.stride.1 + k_w).max(geom.pad.1 + in_w);
    let mut padded = vec![0.0f32; in_c * pad_h * pad_w];

    let mut out = vec![0.0f32; n_batch * out_c * geom.out_h * geom.out_w];
    for n in 0..n_batch {
        for cell in padded.iter_mut() {
            *cell = 0.0;
        }
        for c in 0..in_c {
            let src_plane = (n * in_c + c) * in_h * in_w;
            let dst_plane = c * pad_h * pad_w;
            for ih in 0..in_h {
                let src = src_plane + ih * in_w;
                let dst = dst_plane + (ih + geom.pad.0) * pad_w + geom.pad.1;
                padded[dst..dst + in_w].copy_from_slice(&x[src..src + in_w]);
            }
        }
        // Padded cells contribute exactly-zero terms, which leave the running
        // sum bit-unchanged, so no bounds checks are needed here.
        for k in 0..out_c {
            let w_base = k * in_c * k_h * k_w;
            let b = bias.map(|b| b.data()[k]);
            for oh in 0..geom.out_h {
                let row0 = oh * geom.stride.0;
                let out_row = ((n * out_c + k) * geom.out_h + oh) * geom.out_w;
                for ow in 0..geom.out_w {
                    let col0 = ow * geom.stride.1;
                    let mut acc = 0.0f32;
                    for c in 0..in_c {
                        let p_plane = c * pad_h * pad_w;
                        let w_plane = w_base + c * k_h * k_w;
                        for r in 0..k_h {
                            let p_row = p_plane + (row0 + r) * pad_w + col0;
                            let w_row = w_plane + r * k_w;
                            for s in 0..k_w {
                                acc += padded[p_row + s] * w[w_row + s];
                            }
                        }
                    }
                    if let Some(b) = b {
                        acc += b;
                    }
                    out[out_row + ow] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n_batch, out_c, geom.out_h, geom.out_w], out)
}

struct ConvGeometry {
    input: (usize, usize, usize, usize),
    kernel: (usize, usize, usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
    out_h: usize,
    out_w: usize,
}

impl ConvGeometry {
    fn resolve(
        op: &'static str,
        input: &Tensor,
        weights: &Tensor,
        bias: Option<&Tensor>,
        stride: (usize, usize),
        padding: Padding,
    ) -> Result<Self, TensorError> {
        if input.rank() != 4 {
            return Err(TensorError::mismatch(
                op,
                format!("input must be rank-4 NCHW, got {:?}", input.shape()),
            ));
        }
        if weights.rank() != 4 {
            return Err(TensorError::mismatch(
                op,
                format!("weights must be rank-4 KCRS, got {:?}", weights.shape()),
            ));
        }
        let [n, c, h, w] = [
            input.shape()[0],
            input.shape()[1],
            input.shape()[2],
            input.shape()[3],
        ];
        let [k, wc, r, s] = [
            weights.shape()[0],
            weights.shape()[1],
            weights.shape()[2],
            weights.shape()[3],
        ];
        if c != wc {
            return Err(TensorError::mismatch(
                op,
                format!("input has {c} channels, weights expect {wc}"),
            ));
        }
        if let Some(b) = bias {
            if b.shape() != [k] {
                return Err(TensorError::mismatch(
                    op,
                    format!("bias shape {:?} does not match {k} output channels", b.shape()),
                ));
            }
        }
        let (out_h, pad_h) = out_extent(op, h, r, stride.0, padding)?;
        let (out_w, pad_w) = out_extent(op, w, s, stride.1, padding)?;
        Ok(ConvGeometry {
            input: (n, c, h, w),
            kernel: (k, wc, r, s),
            stride,
            pad: (pad_h, pad_w),
            out_h,
            out_w,
        })
    }
}

/// Output extent and leading pad for one spatial axis; shared with shape
/// inference so kernels and the IR agree on padding arithmetic.
pub(crate) fn out_extent(
    op: &'static str,
    extent: usize,
    window: usize,
    stride: usize,
    padding: Padding,
) -> Result<(usize, usize), TensorError> {
    if stride < 1 {
        return Err(TensorError::InvalidStride { op });
    }
    match padding {
        Padding::Valid => valid_extent(op, extent, window, stride),
        Padding::Same => Ok(same_extent(extent, window, stride)),
    }
}

fn valid_extent(
    op: &'static str,
    extent: usize,
    window: usize,
    stride: usize,
) -> Result<(usize, usize), TensorError> {
    if window > extent {
        return Err(TensorError::mismatch(
            op,
            format!("window {window} exceeds input extent {extent} with VALID padding"),
        ));
    }
    Ok(((extent - window) / stride + 1, 0))
}

/// SAME rule: output = ceil(extent / stride); padding split evenly with the
/// extra pixel at the end (bottom/right).
fn same_extent(extent: usize, window: usize, stride: usize) -> (usize, usize) {
    let out = extent.div_ceil(stride);
    let span = (out - 1) * stride + window;
    let total = span.saturating_sub(extent);
    (out, total / 2)
}

/// Fully-connected layer: `y[n,o] = sum_f x[n,f] * w[o,f] (+ b[o])`,
/// feature-major accumulation.
pub fn dense(
    input: &Tensor,
    weights: &Tensor,
    bias: Option<&Tensor>,
) -> Result<Tensor, TensorError> {
    let (n_batch, feat, out) = dense_check(input, weights, bias)?;
    let x = input.data();
    let w = weights.data();
    let mut y = vec![0.0f32; n_batch * out];
    for n in 0..n_batch {
        let row = &x[n * feat..(n + 1) * feat];
        for o in 0..out {
            let w_row = &w[o * feat..(o + 1) * feat];
            let mut acc = 0.0f32;
            for f in 0..feat {
                acc += row[f] * w_row[f];
            }
            if let Some(b) = bias {
                acc += b.data()[o];
            }
            y[n * out + o] = acc;
        }
    }
    Tensor::new(vec![n_batch, out], y)
}

/// Output-tiled dense with the same feature-major accumulation; bit-identical
/// to [`dense`].
pub fn dense_blocked(
    input: &Tensor,
    weights: &Tensor,
    bias: Option<&Tensor>,
) -> Result<Tensor, TensorError> {
    const TILE: usize = 8;
    let (n_batch, feat, out) = dense_check(input, weights, bias)?;
    let x = input.data();
    let w = weights.data();
    let mut y = vec![0.0f32; n_batch * out];
    for n in 0..n_batch {
        let row = &x[n * feat..(n + 1) * feat];
        let y_row = &mut y[n * out..(n + 1) * out];
        for tile in (0..out).step_by(TILE) {
            let hi = (tile + TILE).min(out);
            let mut acc = [0.0f32; TILE];
            for (slot, o) in (tile..hi).enumerate() {
                let w_row = &w[o * feat..(o + 1) * feat];
                for f in 0..feat {
                    acc[slot] += row[f] * w_row[f];
                }
            }
            for (slot, o) in (tile..hi).enumerate() {
                y_row[o] = match bias {
                    Some(b) => acc[slot] + b.data()[o],
                    None => acc[slot],
                };
            }
        }
    }
    Tensor::new(vec![n_batch, out], y)
}

fn dense_check(
    input: &Tensor,
    weights: &Tensor,
    bias: Option<&Tensor>,
) -> Result<(usize, usize, usize), TensorError> {
    if input.rank() != 2 || weights.rank() != 2 {
        return Err(TensorError::mismatch(
            "dense",
            format!(
                "expected rank-2 input and weights, got {:?} and {:?}",
                input.shape(),
                weights.shape()
            ),
        ));
    }
    let (n, feat) = (input.shape()[0], input.shape()[1]);
    let (out, wf) = (weights.shape()[0], weights.shape()[1]);
    if feat != wf {
        return Err(TensorError::mismatch(
            "dense",
            format!("input has {feat} features, weights expect {wf}"),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [out] {
            return Err(TensorError::mismatch(
                "dense",
                format!("bias shape {:?} does not match {out} outputs", b.shape()),
            ));
        }
    }
    Ok((n, feat, out))
}

/// Per-batch matrix product `[B,M,K] x [B,K,N] -> [B,M,N]`, K-major
/// accumulation. A batch count of 1 on either side broadcasts against the
/// other side's batch count.
pub fn batch_matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    if a.rank() != 3 || b.rank() != 3 {
        return Err(TensorError::mismatch(
            "batch_matmul",
            format!("expected rank-3 operands, got {:?} and {:?}", a.shape(), b.shape()),
        ));
    }
    let (ba, m, ka) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let (bb, kb, n) = (b.shape()[0], b.shape()[1], b.shape()[2]);
    if ba != bb && ba != 1 && bb != 1 {
        return Err(TensorError::mismatch(
            "batch_matmul",
            format!("batch counts differ: {ba} vs {bb}"),
        ));
    }
    if ka != kb {
        return Err(TensorError::mismatch(
            "batch_matmul",
            format!("inner dims differ: {ka} vs {kb}"),
        ));
    }
    let batches = ba.max(bb);
    let (xa, xb) = (a.data(), b.data());
    let mut y = vec![0.0f32; batches * m * n];
    for batch in 0..batches {
        let a_base = if ba == 1 { 0 } else { batch * m * ka };
        let b_base = if bb == 1 { 0 } else { batch * ka * n };
        let y_base = batch * m * n;
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f32;
                for k in 0..ka {
                    acc += xa[a_base + i * ka + k] * xb[b_base + k * n + j];
                }
                y[y_base + i * n + j] = acc;
            }
        }
    }
    Tensor::new(vec![batches, m, n], y)
}

fn relu_scalar(v: f32) -> f32 {
    // Branches chosen so -0.0 maps to +0.0 and NaN propagates.
    if v.is_nan() || v > 0.0 {
        v
    } else {
        0.0
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| relu_scalar(v)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("shape unchanged")
}

/// Row-wise softmax over the last axis: `exp(x - max(x)) / sum`.
///
/// With `fast_math` the exponential is a degree-6 polynomial approximation
/// (range-reduced); otherwise it is `f32::exp`. The subtraction of the row
/// max keeps arguments non-positive, so the denominator is always >= 1 and
/// finite inputs never produce NaN.
pub fn softmax(x: &Tensor, fast_math: bool) -> Tensor {
    let cols = x.last_dim();
    let mut data = x.data().to_vec();
    for row in data.chunks_mut(cols) {
        let mut max = f32::NEG_INFINITY;
        for &v in row.iter() {
            if v.is_nan() || v > max {
                max = v;
            }
        }
        let mut sum = 0.0f32;
        for v in row.iter_mut() {
            let e = if fast_math {
                poly_exp(*v - max)
            } else {
                (*v - max).exp()
            };
            *v = e;
            sum += e;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Tensor::new(x.shape().to_vec(), data).expect("shape unchanged")
}

/// Degree-6 polynomial exponential: `e^x = 2^k * p6(r)` with
/// `x = k*ln2 + r`, `r` in `[-ln2/2, ln2/2]`, and `p6` the order-6 Taylor
/// polynomial of `e^r` in Horner form.
pub fn poly_exp(x: f32) -> f32 {
    use std::f32::consts::{LN_2, LOG2_E};
    if x.is_nan() {
        return x;
    }
    // Saturate far outside the f32 range instead of producing inf/NaN.
    if x > 88.0 {
        return f32::MAX;
    }
    if x < -104.0 {
        return 0.0;
    }
    let k = (x * LOG2_E).round();
    let r = x - k * LN_2;
    let p = 1.0
        + r * (1.0
            + r * (0.5
                + r * (1.0 / 6.0
                    + r * (1.0 / 24.0 + r * (1.0 / 120.0 + r * (1.0 / 720.0))))));
    p * exp2_int(k as i32)
}

/// 2^k as f32, including the subnormal range.
fn exp2_int(k: i32) -> f32 {
    if (-126..=127).contains(&k) {
        f32::from_bits(((k + 127) as u32) << 23)
    } else if (-149..-126).contains(&k) {
        f32::from_bits(1u32 << (k + 149))
    } else if k < -149 {
        0.0
    } else {
        f32::MAX
    }
}

/// Elementwise addition. Shapes must match exactly, or one operand may be a
/// rank-1 vector matching the other's last axis (broadcast over rows).
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| x + y)
            .collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    let broadcast = |full: &Tensor, vec: &Tensor, flipped: bool| -> Result<Tensor, TensorError> {
        let cols = full.last_dim();
        if vec.shape() != [cols] {
            return Err(TensorError::mismatch(
                "add",
                format!("cannot broadcast {:?} against {:?}", a.shape(), b.shape()),
            ));
        }
        let v = vec.data();
        let data = full
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let y = v[i % cols];
                if flipped {
                    y + x
                } else {
                    x + y
                }
            })
            .collect();
        Tensor::new(full.shape().to_vec(), data)
    };
    if b.rank() == 1 && a.rank() > 1 {
        broadcast(a, b, false)
    } else if a.rank() == 1 && b.rank() > 1 {
        broadcast(b, a, true)
    } else {
        Err(TensorError::mismatch(
            "add",
            format!("shapes {:?} and {:?} are incompatible", a.shape(), b.shape()),
        ))
    }
}

fn pool_check(
    op: &'static str,
    input: &Tensor,
    kernel: (usize, usize),
    stride: (usize, usize),
    padding: Padding,
) -> Result<((usize, usize, usize, usize), (usize, usize), (usize, usize)), TensorError> {
    if input.rank() != 4 {
        return Err(TensorError::mismatch(
            op,
            format!("input must be rank-4 NCHW, got {:?}", input.shape()),
        ));
    }
    if kernel.0 < 1 || kernel.1 < 1 {
        return Err(TensorError::mismatch(op, "pool window must be >= 1 in both axes"));
    }
    let [n, c, h, w] = [
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    ];
    let (out_h, pad_h) = out_extent(op, h, kernel.0, stride.0, padding)?;
    let (out_w, pad_w) = out_extent(op, w, kernel.1, stride.1, padding)?;
    Ok(((n, c, h, w), (out_h, out_w), (pad_h, pad_w)))
}

/// Window maximum over in-bounds cells, visited row-major.
pub fn maxpool(
    input: &Tensor,
    kernel: (usize, usize),
    stride: (usize, usize),
    padding: Padding,
) -> Result<Tensor, TensorError> {
    pool(input, kernel, stride, padding, "maxpool", |cells| {
        let mut best = f32::NEG_INFINITY;
        for &v in cells {
            if v.is_nan() {
                return v;
            }
            if v > best {
                best = v;
            }
        }
        best
    })
}

/// Window mean over in-bounds cells (padded cells are not counted), visited
/// row-major with a single division at the end.
pub fn avgpool(
    input: &Tensor,
    kernel: (usize, usize),
    stride: (usize, usize),
    padding: Padding,
) -> Result<Tensor, TensorError> {
    pool(input, kernel, stride, padding, "avgpool", |cells| {
        let mut acc = 0.0f32;
        for &v in cells {
            acc += v;
        }
        acc / cells.len() as f32
    })
}

fn pool(
    input: &Tensor,
    kernel: (usize, usize),
    stride: (usize, usize),
    padding: Padding,
    op: &'static str,
    reduce: impl Fn(&[f32]) -> f32,
) -> Result<Tensor, TensorError> {
    let ((n_batch, chans, h, w), (out_h, out_w), (pad_h, pad_w)) =
        pool_check(op, input, kernel, stride, padding)?;
    let x = input.data();
    let mut out = vec![0.0f32; n_batch * chans * out_h * out_w];
    let mut window = Vec::with_capacity(kernel.0 * kernel.1);
    let mut idx = 0;
    for n in 0..n_batch {
        for c in 0..chans {
            let plane = (n * chans + c) * h * w;
            for oh in 0..out_h {
                let ih0 = (oh * stride.0) as isize - pad_h as isize;
                for ow in 0..out_w {
                    let iw0 = (ow * stride.1) as isize - pad_w as isize;
                    window.clear();
                    for r in 0..kernel.0 {
                        let ih = ih0 + r as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for s in 0..kernel.1 {
                            let iw = iw0 + s as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            window.push(x[plane + ih as usize * w + iw as usize]);
                        }
                    }
                    out[idx] = reduce(&window);
                    idx += 1;
                }
            }
        }
    }
    Tensor::new(vec![n_batch, chans, out_h, out_w], out)
}

/// `[N,C,H,W] -> [N,C]`: spatial mean per channel, row-major accumulation,
/// one division.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor, TensorError> {
    if input.rank() != 4 {
        return Err(TensorError::mismatch(
            "global_avg_pool",
            format!("input must be rank-4 NCHW, got {:?}", input.shape()),
        ));
    }
    let [n_batch, chans, h, w] = [
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    ];
    let spatial = h * w;
    let x = input.data();
    let mut out = vec![0.0f32; n_batch * chans];
    for (i, cell) in out.iter_mut().enumerate() {
        let plane = i * spatial;
        let mut acc = 0.0f32;
        for &v in &x[plane..plane + spatial] {
            acc += v;
        }
        *cell = acc / spatial as f32;
    }
    Tensor::new(vec![n_batch, chans], out)
}

/// Inference-mode batch normalization over channel axis 1:
/// `y = (x - mean[c]) * scale[c] + beta[c]` with
/// `scale[c] = gamma[c] / sqrt(var[c] + eps)`.
///
/// `var + eps` must be strictly positive for every channel.
pub fn batchnorm(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mean: &Tensor,
    var: &Tensor,
    epsilon: f32,
) -> Result<Tensor, TensorError> {
    if input.rank() < 2 {
        return Err(TensorError::mismatch(
            "batchnorm",
            format!("input must have rank >= 2, got {:?}", input.shape()),
        ));
    }
    let chans = input.shape()[1];
    for (name, t) in [("gamma", gamma), ("beta", beta), ("mean", mean), ("var", var)] {
        if t.shape() != [chans] {
            return Err(TensorError::mismatch(
                "batchnorm",
                format!("{name} shape {:?} does not match {chans} channels", t.shape()),
            ));
        }
    }
    if epsilon < 0.0 || !epsilon.is_finite() {
        return Err(TensorError::InvalidEpsilon { epsilon });
    }
    let mut scale = vec![0.0f32; chans];
    for c in 0..chans {
        let denom = var.data()[c] + epsilon;
        if denom <= 0.0 {
            return Err(TensorError::InvalidEpsilon { epsilon });
        }
        scale[c] = gamma.data()[c] / denom.sqrt();
    }
    let inner: usize = input.shape()[2..].iter().product();
    let x = input.data();
    let mut out = vec![0.0f32; x.len()];
    let batches = input.shape()[0];
    for n in 0..batches {
        for c in 0..chans {
            let base = (n * chans + c) * inner;
            let (s, m, b) = (scale[c], mean.data()[c], beta.data()[c]);
            for i in 0..inner {
                out[base + i] = (x[base + i] - m) * s + b;
            }
        }
    }
    Tensor::new(input.shape().to_vec(), out)
}

/// Same buffer, new shape; element counts must agree.
pub fn reshape(input: &Tensor, shape: &[usize]) -> Result<Tensor, TensorError> {
    input.with_shape(shape.to_vec())
}

/// Concatenate along `axis`; all parts must agree on every other extent.
pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor, TensorError> {
    let first = parts.first().ok_or_else(|| {
        TensorError::mismatch("concat", "at least one operand required")
    })?;
    let rank = first.rank();
    if axis >= rank {
        return Err(TensorError::InvalidAxis {
            op: "concat",
            axis,
            rank,
        });
    }
    let mut axis_total = 0usize;
    for p in parts {
        if p.rank() != rank {
            return Err(TensorError::mismatch(
                "concat",
                format!("rank mismatch: {:?} vs {:?}", first.shape(), p.shape()),
            ));
        }
        for d in 0..rank {
            if d != axis && p.shape()[d] != first.shape()[d] {
                return Err(TensorError::mismatch(
                    "concat",
                    format!(
                        "extent mismatch on axis {d}: {:?} vs {:?}",
                        first.shape(),
                        p.shape()
                    ),
                ));
            }
        }
        axis_total += p.shape()[axis];
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = axis_total;
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let mut out = Vec::with_capacity(outer * axis_total * inner);
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape()[axis] * inner;
            let base = o * chunk;
            out.extend_from_slice(&p.data()[base..base + chunk]);
        }
    }
    Tensor::new(shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).expect("valid test tensor")
    }

    #[test]
    fn conv2d_unit_kernel_scales() {
        let input = Tensor::filled(vec![1, 1, 3, 3], 1.0).unwrap();
        let weights = t(&[1, 1, 1, 1], &[2.0]);
        let out = conv2d(&input, &weights, None, (1, 1), Padding::Valid).unwrap();
        assert_eq!(out.shape(), &[1, 1, 3, 3]);
        assert!(out.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv2d_full_window_sums() {
        let input = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let weights = Tensor::filled(vec![1, 1, 2, 2], 1.0).unwrap();
        let out = conv2d(&input, &weights, None, (1, 1), Padding::Valid).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 1]);
        assert_eq!(out.data(), &[10.0]);
    }

    #[test]
    fn conv2d_same_preserves_spatial_extent() {
        let input = Tensor::filled(vec![1, 3, 5, 5], 0.5).unwrap();
        let weights = Tensor::filled(vec![8, 3, 3, 3], 0.1).unwrap();
        let out = conv2d(&input, &weights, None, (1, 1), Padding::Same).unwrap();
        assert_eq!(out.shape(), &[1, 8, 5, 5]);
    }

    #[test]
    fn conv2d_rejects_channel_mismatch_and_zero_stride() {
        let input = Tensor::filled(vec![1, 2, 4, 4], 1.0).unwrap();
        let weights = Tensor::filled(vec![1, 3, 3, 3], 1.0).unwrap();
        assert!(matches!(
            conv2d(&input, &weights, None, (1, 1), Padding::Valid),
            Err(TensorError::ShapeMismatch { .. })
        ));
        let weights = Tensor::filled(vec![1, 2, 3, 3], 1.0).unwrap();
        assert!(matches!(
            conv2d(&input, &weights, None, (0, 1), Padding::Valid),
            Err(TensorError::InvalidStride { .. })
        ));
    }

    #[test]
    fn dense_identity_and_hand_case() {
        let eye = t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let x = t(&[1, 3], &[1.0, 2.0, 3.0]);
        let out = dense(&x, &eye, None).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0, 3.0]);

        let w = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let x = t(&[1, 2], &[1.0, 1.0]);
        assert_eq!(dense(&x, &w, None).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn dense_bias_only() {
        let w = Tensor::zeros(vec![1, 3]).unwrap();
        let b = Tensor::from_vec(vec![5.0]).unwrap();
        let x = t(&[1, 3], &[9.0, -2.0, 0.5]);
        assert_eq!(dense(&x, &w, Some(&b)).unwrap().data(), &[5.0]);
    }

    #[test]
    fn batch_matmul_identity_and_mismatch() {
        let eye = t(&[1, 2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = t(&[1, 2, 2], &[5.0, 6.0, 7.0, 8.0]);
        assert_eq!(batch_matmul(&eye, &b).unwrap().data(), b.data());

        let a = Tensor::filled(vec![2, 2, 2], 1.0).unwrap();
        let b = Tensor::filled(vec![3, 2, 2], 1.0).unwrap();
        assert!(matches!(
            batch_matmul(&a, &b),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn batch_matmul_broadcasts_single_batches() {
        let a = t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[1, 2, 1], &[10.0, 100.0]);
        let out = batch_matmul(&a, &b).unwrap();
        assert_eq!(out.shape(), &[2, 1, 1]);
        assert_eq!(out.data(), &[210.0, 430.0]);

        let a1 = t(&[1, 1, 2], &[1.0, 2.0]);
        let b2 = t(&[2, 2, 1], &[1.0, 1.0, 2.0, 2.0]);
        let out = batch_matmul(&a1, &b2).unwrap();
        assert_eq!(out.shape(), &[2, 1, 1]);
        assert_eq!(out.data(), &[3.0, 6.0]);
    }

    #[test]
    fn relu_clamps_and_is_idempotent() {
        let x = t(&[3], &[-1.0, 0.0, 2.0]);
        let once = relu(&x);
        assert_eq!(once.data(), &[0.0, 0.0, 2.0]);
        assert!(relu(&once).bit_eq(&once));
    }

    #[test]
    fn relu_maps_negative_zero_to_positive_zero() {
        let x = t(&[1], &[-0.0]);
        assert_eq!(relu(&x).data()[0].to_bits(), 0.0f32.to_bits());
    }

    #[test]
    fn softmax_constant_row_is_uniform() {
        let x = Tensor::filled(vec![1, 4], 3.2).unwrap();
        let out = softmax(&x, false);
        for &v in out.data() {
            assert_eq!(v, 0.25);
        }
    }

    #[test]
    fn softmax_closed_form() {
        let x = t(&[1, 2], &[0.0, std::f32::consts::LN_2]);
        let out = softmax(&x, false);
        assert!((out.data()[0] - 1.0 / 3.0).abs() < 1e-6);
        assert!((out.data()[1] - 2.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn poly_exp_tracks_exp_and_saturates() {
        for i in -400..=80 {
            let x = i as f32 * 0.25;
            let exact = x.exp();
            let approx = poly_exp(x);
            assert!(
                (approx - exact).abs() <= 1e-3 * exact.max(1e-30) + 1e-30,
                "x={x}: {approx} vs {exact}"
            );
        }
        assert_eq!(poly_exp(0.0), 1.0);
        assert_eq!(poly_exp(-200.0), 0.0);
        assert!(poly_exp(1000.0).is_finite());
    }

    #[test]
    fn fast_softmax_stays_close_and_normalized() {
        let x = t(&[1, 5], &[-3.0, 0.5, 2.0, -10.0, 1.5]);
        let exact = softmax(&x, false);
        let fast = softmax(&x, true);
        let sum: f32 = fast.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-5);
        for (a, b) in exact.data().iter().zip(fast.data()) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn add_broadcasts_rank1_over_rows_commutatively() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t(&[3], &[10.0, 20.0, 30.0]);
        let ab = add(&a, &b).unwrap();
        let ba = add(&b, &a).unwrap();
        assert_eq!(ab.data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        assert!(ab.bit_eq(&ba));
    }

    #[test]
    fn add_rejects_incompatible() {
        let a = Tensor::filled(vec![2, 3], 1.0).unwrap();
        let b = Tensor::filled(vec![2], 1.0).unwrap();
        assert!(add(&a, &b).is_err());
    }

    #[test]
    fn maxpool_basic() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let out = maxpool(&x, (2, 2), (2, 2), Padding::Valid).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 1]);
        assert_eq!(out.data(), &[4.0]);
    }

    #[test]
    fn avgpool_same_counts_only_valid_cells() {
        // 2x2 input, 2x2 window, stride 1, SAME: bottom-right window sees one cell.
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let out = avgpool(&x, (2, 2), (1, 1), Padding::Same).unwrap();
        assert_eq!(out.shape(), &[1, 1, 2, 2]);
        assert_eq!(out.data(), &[2.5, 3.0, 3.5, 4.0]);
    }

    #[test]
    fn global_avg_pool_reduces_to_channel_means() {
        let x = t(&[1, 2, 1, 2], &[1.0, 3.0, 10.0, 20.0]);
        let out = global_avg_pool(&x).unwrap();
        assert_eq!(out.shape(), &[1, 2]);
        assert_eq!(out.data(), &[2.0, 15.0]);
    }

    #[test]
    fn batchnorm_identity_params() {
        let x = t(&[1, 2, 1, 2], &[1.0, -2.0, 3.0, 0.5]);
        let ones = Tensor::filled(vec![2], 1.0).unwrap();
        let zeros = Tensor::zeros(vec![2]).unwrap();
        let out = batchnorm(&x, &ones, &zeros, &zeros, &ones, 0.0).unwrap();
        assert!(out.bit_eq(&x));
    }

    #[test]
    fn batchnorm_rejects_nonpositive_denominator() {
        let x = Tensor::filled(vec![1, 1, 1, 1], 1.0).unwrap();
        let one = Tensor::filled(vec![1], 1.0).unwrap();
        let zero = Tensor::zeros(vec![1]).unwrap();
        assert!(matches!(
            batchnorm(&x, &one, &zero, &zero, &zero, 0.0),
            Err(TensorError::InvalidEpsilon { .. })
        ));
        assert!(matches!(
            batchnorm(&x, &one, &zero, &zero, &one, -1.0),
            Err(TensorError::InvalidEpsilon { .. })
        ));
    }

    #[test]
    fn concat_on_channel_axis() {
        let a = Tensor::filled(vec![1, 3, 2, 2], 1.0).unwrap();
        let b = Tensor::filled(vec![1, 5, 2, 2], 2.0).unwrap();
        let out = concat(&[&a, &b], 1).unwrap();
        assert_eq!(out.shape(), &[1, 8, 2, 2]);
        assert_eq!(out.data()[0], 1.0);
        assert_eq!(out.data()[3 * 4], 2.0);
    }

    #[test]
    fn concat_rejects_bad_axis_and_extent() {
        let a = Tensor::filled(vec![1, 3, 2, 2], 1.0).unwrap();
        let b = Tensor::filled(vec![1, 5, 2, 3], 2.0).unwrap();
        assert!(matches!(
            concat(&[&a, &b], 4),
            Err(TensorError::InvalidAxis { .. })
        ));
        assert!(concat(&[&a, &b], 1).is_err());
    }

    #[test]
    fn blocked_kernels_match_reference_bitwise() {
        // Deterministic pseudo-random fill, negative values included.
        let fill = |n: usize, salt: u32| -> Vec<f32> {
            (0..n)
                .map(|i| {
                    let h = (i as u32).wrapping_mul(2654435761).wrapping_add(salt);
                    (h % 2000) as f32 / 500.0 - 2.0
                })
                .collect()
        };
        let input = Tensor::new(vec![2, 3, 7, 6], fill(2 * 3 * 7 * 6, 1)).unwrap();
        let weights = Tensor::new(vec![4, 3, 3, 3], fill(4 * 3 * 3 * 3, 2)).unwrap();
        let bias = Tensor::new(vec![4], fill(4, 3)).unwrap();
        for padding in [Padding::Same, Padding::Valid] {
            for stride in [(1, 1), (2, 2), (1, 2)] {
                let a = conv2d(&input, &weights, Some(&bias), stride, padding).unwrap();
                let b = conv2d_blocked(&input, &weights, Some(&bias), stride, padding).unwrap();
                assert!(a.bit_eq(&b), "stride {stride:?} {padding:?}");
            }
        }
        let x = Tensor::new(vec![3, 17], fill(51, 4)).unwrap();
        let w = Tensor::new(vec![13, 17], fill(13 * 17, 5)).unwrap();
        let b = Tensor::new(vec![13], fill(13, 6)).unwrap();
        let d1 = dense(&x, &w, Some(&b)).unwrap();
        let d2 = dense_blocked(&x, &w, Some(&b)).unwrap();
        assert!(d1.bit_eq(&d2));
    }
}
