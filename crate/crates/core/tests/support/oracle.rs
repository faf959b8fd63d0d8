//! Naive-loop oracle kernels and the randomized equivalence sweep.
//!
//! Every oracle spells out the accumulation-order contract as the plainest
//! possible loops; the production kernels (including the blocked variants)
//! must reproduce it bit for bit.

use deltadiff_core::tensor::{
    add, avgpool, batch_matmul, batchnorm, concat, conv2d, conv2d_blocked, dense, dense_blocked,
    global_avg_pool, maxpool, relu, softmax, Padding, Tensor,
};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

pub fn o_conv2d(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: (usize, usize),
    padding: Padding,
) -> Tensor {
    let (n_b, in_c, in_h, in_w) = nchw(x);
    let (out_c, _, k_h, k_w) = nchw(w);
    let (out_h, pad_h) = o_extent(in_h, k_h, stride.0, padding);
    let (out_w, pad_w) = o_extent(in_w, k_w, stride.1, padding);
    let mut out = Vec::new();
    for n in 0..n_b {
        for k in 0..out_c {
            for oh in 0..out_h {
                for ow in 0..out_w {
                    let mut acc = 0.0f32;
                    for c in 0..in_c {
                        for r in 0..k_h {
                            for s in 0..k_w {
                                let ih = (oh * stride.0 + r) as isize - pad_h as isize;
                                let iw = (ow * stride.1 + s) as isize - pad_w as isize;
                                if ih < 0 || ih >= in_h as isize || iw < 0 || iw >= in_w as isize
                                {
                                    continue;
                                }
                                acc += x.data()
                                    [((n * in_c + c) * in_h + ih as usize) * in_w + iw as usize]
                                    * w.data()[((k * in_c + c) * k_h + r) * k_w + s];
                            }
                        }
                    }
                    if let Some(b) = bias {
                        acc += b.data()[k];
                    }
                    out.push(acc);
                }
            }
        }
    }
    Tensor::new(vec![n_b, out_c, out_h, out_w], out).expect("oracle shape")
}

pub fn o_dense(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Tensor {
    let (n_b, feat) = (x.shape()[0], x.shape()[1]);
    let out = w.shape()[0];
    let mut y = Vec::new();
    for n in 0..n_b {
        for o in 0..out {
            let mut acc = 0.0f32;
            for f in 0..feat {
                acc += x.data()[n * feat + f] * w.data()[o * feat + f];
            }
            if let Some(b) = bias {
                acc += b.data()[o];
            }
            y.push(acc);
        }
    }
    Tensor::new(vec![n_b, out], y).expect("oracle shape")
}

pub fn o_batch_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (ba, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let (bb, n) = (b.shape()[0], b.shape()[2]);
    let batches = ba.max(bb);
    let mut out = Vec::new();
    for batch in 0..batches {
        let ab = if ba == 1 { 0 } else { batch };
        let bb_i = if bb == 1 { 0 } else { batch };
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f32;
                for p in 0..k {
                    acc += a.data()[(ab * m + i) * k + p] * b.data()[(bb_i * k + p) * n + j];
                }
                out.push(acc);
            }
        }
    }
    Tensor::new(vec![batches, m, n], out).expect("oracle shape")
}

pub fn o_relu(x: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .map(|&v| if v > 0.0 { v } else { 0.0 })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("oracle shape")
}

pub fn o_softmax(x: &Tensor) -> Tensor {
    let cols = *x.shape().last().expect("rank >= 1");
    let mut data = Vec::with_capacity(x.data().len());
    for row in x.data().chunks(cols) {
        let mut max = f32::NEG_INFINITY;
        for &v in row {
            if v > max {
                max = v;
            }
        }
        let mut exps = Vec::with_capacity(cols);
        let mut sum = 0.0f32;
        for &v in row {
            let e = (v - max).exp();
            exps.push(e);
            sum += e;
        }
        for e in exps {
            data.push(e / sum);
        }
    }
    Tensor::new(x.shape().to_vec(), data).expect("oracle shape")
}

pub fn o_add(a: &Tensor, b: &Tensor) -> Tensor {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        return Tensor::new(a.shape().to_vec(), data).expect("oracle shape");
    }
    // Rank-1 operand broadcast over the other side's last axis.
    let (full, vec, flipped) = if b.rank() == 1 { (a, b, false) } else { (b, a, true) };
    let cols = *full.shape().last().expect("rank >= 1");
    let data = full
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let y = vec.data()[i % cols];
            if flipped {
                y + x
            } else {
                x + y
            }
        })
        .collect();
    Tensor::new(full.shape().to_vec(), data).expect("oracle shape")
}

fn o_pool(
    x: &Tensor,
    kernel: (usize, usize),
    stride: (usize, usize),
    padding: Padding,
    average: bool,
) -> Tensor {
    let (n_b, chans, h, w) = nchw(x);
    let (out_h, pad_h) = o_extent(h, kernel.0, stride.0, padding);
    let (out_w, pad_w) = o_extent(w, kernel.1, stride.1, padding);
    let mut out = Vec::new();
    for n in 0..n_b {
        for c in 0..chans {
            for oh in 0..out_h {
                for ow in 0..out_w {
                    let mut cells = Vec::new();
                    for r in 0..kernel.0 {
                        for s in 0..kernel.1 {
                            let ih = (oh * stride.0 + r) as isize - pad_h as isize;
                            let iw = (ow * stride.1 + s) as isize - pad_w as isize;
                            if ih < 0 || ih >= h as isize || iw < 0 || iw >= w as isize {
                                continue;
                            }
                            cells.push(
                                x.data()[((n * chans + c) * h + ih as usize) * w + iw as usize],
                            );
                        }
                    }
                    if average {
                        let mut acc = 0.0f32;
                        for &v in &cells {
                            acc += v;
                        }
                        out.push(acc / cells.len() as f32);
                    } else {
                        let mut best = f32::NEG_INFINITY;
                        for &v in &cells {
                            if v > best {
                                best = v;
                            }
                        }
                        out.push(best);
                    }
                }
            }
        }
    }
    Tensor::new(vec![n_b, chans, out_h, out_w], out).expect("oracle shape")
}

pub fn o_global_avg_pool(x: &Tensor) -> Tensor {
    let (n_b, chans, h, w) = nchw(x);
    let mut out = Vec::new();
    for n in 0..n_b {
        for c in 0..chans {
            let mut acc = 0.0f32;
            for i in 0..h * w {
                acc += x.data()[(n * chans + c) * h * w + i];
            }
            out.push(acc / (h * w) as f32);
        }
    }
    Tensor::new(vec![n_b, chans], out).expect("oracle shape")
}

pub fn o_batchnorm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mean: &Tensor,
    var: &Tensor,
    epsilon: f32,
) -> Tensor {
    let chans = x.shape()[1];
    let inner: usize = x.shape()[2..].iter().product();
    let batches = x.shape()[0];
    let mut out = Vec::new();
    for n in 0..batches {
        for c in 0..chans {
            let scale = gamma.data()[c] / (var.data()[c] + epsilon).sqrt();
            for i in 0..inner {
                let v = x.data()[(n * chans + c) * inner + i];
                out.push((v - mean.data()[c]) * scale + beta.data()[c]);
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("oracle shape")
}

pub fn o_concat(parts: &[&Tensor], axis: usize) -> Tensor {
    let mut shape = parts[0].shape().to_vec();
    shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = Vec::new();
    for o in 0..outer {
        for p in parts {
            let span = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * span..(o + 1) * span]);
        }
    }
    Tensor::new(shape, out).expect("oracle shape")
}

/// SAME/VALID output extent and leading pad, mirroring the documented rule:
/// SAME pads `ceil(e/s)` outputs with the extra pixel trailing.
fn o_extent(extent: usize, window: usize, stride: usize, padding: Padding) -> (usize, usize) {
    match padding {
        Padding::Valid => ((extent - window) / stride + 1, 0),
        Padding::Same => {
            let out = extent.div_ceil(stride);
            let span = (out - 1) * stride + window;
            (out, span.saturating_sub(extent) / 2)
        }
    }
}

fn nchw(t: &Tensor) -> (usize, usize, usize, usize) {
    (t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3])
}

fn bits(t: &Tensor) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn assert_bit_eq(op: &str, case: usize, got: &Tensor, want: &Tensor) {
    assert_eq!(got.shape(), want.shape(), "{op} case {case}: shape mismatch");
    assert_eq!(bits(got), bits(want), "{op} case {case}: payload mismatch");
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let len = shape.iter().product();
    let data = (0..len).map(|_| rng.gen_range(-2.0f32..2.0)).collect();
    Tensor::new(shape, data).expect("random shape")
}

fn rand_padding(rng: &mut ChaCha8Rng) -> Padding {
    if rng.gen_bool(0.5) {
        Padding::Same
    } else {
        Padding::Valid
    }
}

/// Runs `cases` randomized shape draws, cycling through every kernel, and
/// asserts bit-exact agreement with the oracles. Returns the number of
/// executed comparisons.
pub fn randomized_sweep(cases: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut executed = 0;
    for case in 0..cases {
        match case % 11 {
            0 => {
                let (n, ci, co) = (
                    rng.gen_range(1..=2),
                    rng.gen_range(1..=4),
                    rng.gen_range(1..=4),
                );
                let (h, w) = (rng.gen_range(1..=7), rng.gen_range(1..=7));
                let (kh, kw) = (rng.gen_range(1..=h), rng.gen_range(1..=w));
                let stride = (rng.gen_range(1..=2), rng.gen_range(1..=2));
                let padding = rand_padding(&mut rng);
                let x = rand_tensor(&mut rng, vec![n, ci, h, w]);
                let wt = rand_tensor(&mut rng, vec![co, ci, kh, kw]);
                let bias = rng
                    .gen_bool(0.5)
                    .then(|| rand_tensor(&mut rng, vec![co]));
                let want = o_conv2d(&x, &wt, bias.as_ref(), stride, padding);
                let got = conv2d(&x, &wt, bias.as_ref(), stride, padding).expect("conv2d");
                assert_bit_eq("conv2d", case, &got, &want);
                let blocked =
                    conv2d_blocked(&x, &wt, bias.as_ref(), stride, padding).expect("blocked");
                assert_bit_eq("conv2d_blocked", case, &blocked, &want);
            }
            1 => {
                let (n, f, o) = (
                    rng.gen_range(1..=4),
                    rng.gen_range(1..=16),
                    rng.gen_range(1..=12),
                );
                let x = rand_tensor(&mut rng, vec![n, f]);
                let wt = rand_tensor(&mut rng, vec![o, f]);
                let bias = rng.gen_bool(0.5).then(|| rand_tensor(&mut rng, vec![o]));
                let want = o_dense(&x, &wt, bias.as_ref());
                let got = dense(&x, &wt, bias.as_ref()).expect("dense");
                assert_bit_eq("dense", case, &got, &want);
                let blocked = dense_blocked(&x, &wt, bias.as_ref()).expect("blocked");
                assert_bit_eq("dense_blocked", case, &blocked, &want);
            }
            2 => {
                let (m, k, n) = (
                    rng.gen_range(1..=5),
                    rng.gen_range(1..=6),
                    rng.gen_range(1..=5),
                );
                let batch = rng.gen_range(1..=3);
                let (ba, bb) = match rng.gen_range(0..3) {
                    0 => (batch, batch),
                    1 => (1, batch),
                    _ => (batch, 1),
                };
                let a = rand_tensor(&mut rng, vec![ba, m, k]);
                let b = rand_tensor(&mut rng, vec![bb, k, n]);
                let want = o_batch_matmul(&a, &b);
                let got = batch_matmul(&a, &b).expect("batch_matmul");
                assert_bit_eq("batch_matmul", case, &got, &want);
            }
            3 => {
                let shape = vec![rng.gen_range(1..=4), rng.gen_range(1..=9)];
                let x = rand_tensor(&mut rng, shape);
                assert_bit_eq("relu", case, &relu(&x), &o_relu(&x));
            }
            4 => {
                let shape = vec![rng.gen_range(1..=4), rng.gen_range(1..=9)];
                let x = rand_tensor(&mut rng, shape);
                assert_bit_eq("softmax", case, &softmax(&x, false), &o_softmax(&x));
            }
            5 => {
                let shape = vec![rng.gen_range(1..=3), rng.gen_range(1..=4), rng.gen_range(1..=5)];
                let a = rand_tensor(&mut rng, shape.clone());
                if rng.gen_bool(0.5) {
                    let b = rand_tensor(&mut rng, shape);
                    let want = o_add(&a, &b);
                    assert_bit_eq("add", case, &add(&a, &b).expect("add"), &want);
                } else {
                    let cols = *a.shape().last().expect("rank");
                    let v = rand_tensor(&mut rng, vec![cols]);
                    let (lhs, rhs) = if rng.gen_bool(0.5) { (&a, &v) } else { (&v, &a) };
                    let want = o_add(lhs, rhs);
                    assert_bit_eq("add_bcast", case, &add(lhs, rhs).expect("add"), &want);
                }
            }
            6 | 7 => {
                let (h, w) = (rng.gen_range(1..=7), rng.gen_range(1..=7));
                let kernel = (rng.gen_range(1..=h), rng.gen_range(1..=w));
                let stride = (rng.gen_range(1..=2), rng.gen_range(1..=2));
                let padding = rand_padding(&mut rng);
                let shape = vec![rng.gen_range(1..=2), rng.gen_range(1..=3), h, w];
                let x = rand_tensor(&mut rng, shape);
                if case % 11 == 6 {
                    let want = o_pool(&x, kernel, stride, padding, false);
                    let got = maxpool(&x, kernel, stride, padding).expect("maxpool");
                    assert_bit_eq("maxpool", case, &got, &want);
                } else {
                    let want = o_pool(&x, kernel, stride, padding, true);
                    let got = avgpool(&x, kernel, stride, padding).expect("avgpool");
                    assert_bit_eq("avgpool", case, &got, &want);
                }
            }
            8 => {
                let shape = vec![
                    rng.gen_range(1..=2),
                    rng.gen_range(1..=4),
                    rng.gen_range(1..=6),
                    rng.gen_range(1..=6),
                ];
                let x = rand_tensor(&mut rng, shape);
                let got = global_avg_pool(&x).expect("global_avg_pool");
                assert_bit_eq("global_avg_pool", case, &got, &o_global_avg_pool(&x));
            }
            9 => {
                let c = rng.gen_range(1..=4);
                let shape = vec![rng.gen_range(1..=2), c, rng.gen_range(1..=4), rng.gen_range(1..=4)];
                let x = rand_tensor(&mut rng, shape);
                let gamma = rand_tensor(&mut rng, vec![c]);
                let beta = rand_tensor(&mut rng, vec![c]);
                let mean = rand_tensor(&mut rng, vec![c]);
                let var_data: Vec<f32> = (0..c).map(|_| rng.gen_range(0.5f32..2.0)).collect();
                let var = Tensor::new(vec![c], var_data).expect("var shape");
                let eps = 1e-5;
                let want = o_batchnorm(&x, &gamma, &beta, &mean, &var, eps);
                let got = batchnorm(&x, &gamma, &beta, &mean, &var, eps).expect("batchnorm");
                assert_bit_eq("batchnorm", case, &got, &want);
            }
            _ => {
                let axis = rng.gen_range(0..3);
                let mut base = vec![rng.gen_range(1..=3), rng.gen_range(1..=3), rng.gen_range(1..=3)];
                let count = rng.gen_range(2..=3);
                let parts: Vec<Tensor> = (0..count)
                    .map(|_| {
                        base[axis] = rng.gen_range(1..=3);
                        rand_tensor(&mut rng, base.clone())
                    })
                    .collect();
                let refs: Vec<&Tensor> = parts.iter().collect();
                let want = o_concat(&refs, axis);
                let got = concat(&refs, axis).expect("concat");
                assert_bit_eq("concat", case, &got, &want);
            }
        }
        executed += 1;
    }
    executed
}
