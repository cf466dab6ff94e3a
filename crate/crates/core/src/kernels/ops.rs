//! Forward and analytic backward kernels for every layer the network uses.
//!
//! All compute is f32 with f64 accumulators in reductions. Every backward here
//! is exact for the paired forward; the finite-difference checker in
//! [`super::gradcheck`] is the independent oracle for that claim.

use super::tensor::Tensor;

/// Negative-side slope for leaky ReLU.
pub const LEAKY_SLOPE: f32 = 0.01;

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

/// `c[m,n] = a[m,k] * b[k,n]`, f64 row accumulators.
pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    let mut out = vec![0.0f32; m * n];
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for kk in 0..k {
            let aik = a[i * k + kk] as f64;
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (j, bv) in brow.iter().enumerate() {
                acc[j] += aik * *bv as f64;
            }
        }
        for j in 0..n {
            out[i * n + j] = acc[j] as f32;
        }
    }
    out
}

/// `c[m,n] = a^T[m,k_rows] ...` precisely: a is [k,m], result is a^T * b with b [k,n].
pub fn matmul_at_b(a: &[f32], b: &[f32], k: usize, m: usize, n: usize) -> Vec<f32> {
    assert_eq!(a.len(), k * m);
    assert_eq!(b.len(), k * n);
    let mut out = vec![0.0f64; m * n];
    for kk in 0..k {
        let arow = &a[kk * m..(kk + 1) * m];
        let brow = &b[kk * n..(kk + 1) * n];
        for (i, av) in arow.iter().enumerate() {
            let av = *av as f64;
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (j, bv) in brow.iter().enumerate() {
                orow[j] += av * *bv as f64;
            }
        }
    }
    out.into_iter().map(|v| v as f32).collect()
}

/// `c[m,n] = a[m,k] * b^T` with b stored [n,k].
pub fn matmul_a_bt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), n * k);
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0f64;
            for (av, bv) in arow.iter().zip(brow.iter()) {
                acc += *av as f64 * *bv as f64;
            }
            out[i * n + j] = acc as f32;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// linear
// ---------------------------------------------------------------------------

/// `y[m,co] = x[m,ci] W[ci,co] + b[co]`.
pub fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (m, ci) = as_2d(x);
    let (wi, co) = as_2d(w);
    assert_eq!(ci, wi, "linear: input width {ci} vs weight rows {wi}");
    assert_eq!(b.len(), co, "linear: bias length");
    let mut y = matmul(x.data(), w.data(), m, ci, co);
    for row in y.chunks_exact_mut(co) {
        for (v, bias) in row.iter_mut().zip(b.data()) {
            *v += bias;
        }
    }
    Tensor::from_vec(&[m, co], y)
}

/// Returns `(dx, dw, db)` for the linear forward.
pub fn linear_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (m, ci) = as_2d(x);
    let (_, co) = as_2d(w);
    assert_eq!(dy.shape(), &[m, co]);
    let dx = matmul_a_bt(dy.data(), w.data(), m, co, ci);
    let dw = matmul_at_b(x.data(), dy.data(), m, ci, co);
    let mut db = vec![0.0f64; co];
    for row in dy.data().chunks_exact(co) {
        for (acc, v) in db.iter_mut().zip(row) {
            *acc += *v as f64;
        }
    }
    (
        Tensor::from_vec(&[m, ci], dx),
        Tensor::from_vec(&[ci, co], dw),
        Tensor::from_vec(&[co], db.into_iter().map(|v| v as f32).collect()),
    )
}

fn as_2d(t: &Tensor) -> (usize, usize) {
    match t.shape() {
        [m, n] => (*m, *n),
        s => panic!("expected rank-2 tensor, got {s:?}"),
    }
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Valid,
    Same,
}

#[derive(Debug, Clone, Copy)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: Padding,
}

impl Conv2dSpec {
    pub fn same(stride: usize) -> Self {
        assert!(stride >= 1);
        Self {
            stride,
            padding: Padding::Same,
        }
    }

    pub fn valid(stride: usize) -> Self {
        assert!(stride >= 1);
        Self {
            stride,
            padding: Padding::Valid,
        }
    }

    /// (out_extent, pad_begin) for one spatial axis.
    fn axis(&self, input: usize, kernel: usize) -> (usize, usize) {
        match self.padding {
            Padding::Valid => {
                assert!(kernel <= input, "conv2d: kernel {kernel} exceeds input {input}");
                ((input - kernel) / self.stride + 1, 0)
            }
            Padding::Same => {
                let out = input.div_ceil(self.stride);
                let total = ((out - 1) * self.stride + kernel).saturating_sub(input);
                (out, total / 2)
            }
        }
    }
}

/// `x: [ci,h,w]`, `weight: [co,ci,kh,kw]`, `bias: [co]` -> `[co,oh,ow]`.
pub fn conv2d_forward(x: &Tensor, weight: &Tensor, bias: &Tensor, spec: Conv2dSpec) -> Tensor {
    let [ci, h, w] = rank3(x);
    let [co, wci, kh, kw] = rank4(weight);
    assert_eq!(ci, wci, "conv2d: channel mismatch");
    assert_eq!(bias.len(), co);
    let (oh, pad_h) = spec.axis(h, kh);
    let (ow, pad_w) = spec.axis(w, kw);
    let xd = x.data();
    let wd = weight.data();
    let mut out = vec![0.0f32; co * oh * ow];
    for c_out in 0..co {
        let wbase = c_out * ci * kh * kw;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias.data()[c_out] as f64;
                for c_in in 0..ci {
                    for ky in 0..kh {
                        let iy = (oy * spec.stride + ky) as isize - pad_h as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = (c_in * h + iy as usize) * w;
                        let wrow = wbase + (c_in * kh + ky) * kw;
                        for kx in 0..kw {
                            let ix = (ox * spec.stride + kx) as isize - pad_w as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += xd[xrow + ix as usize] as f64 * wd[wrow + kx] as f64;
                        }
                    }
                }
                out[(c_out * oh + oy) * ow + ox] = acc as f32;
            }
        }
    }
    Tensor::from_vec(&[co, oh, ow], out)
}

/// Returns `(dx, dweight, dbias)` for the conv2d forward.
pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    spec: Conv2dSpec,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let [ci, h, w] = rank3(x);
    let [co, _, kh, kw] = rank4(weight);
    let (oh, pad_h) = spec.axis(h, kh);
    let (ow, pad_w) = spec.axis(w, kw);
    assert_eq!(dy.shape(), &[co, oh, ow]);
    let xd = x.data();
    let wd = weight.data();
    let dyd = dy.data();
    let mut dx = vec![0.0f32; ci * h * w];
    let mut dw = vec![0.0f64; weight.len()];
    let mut db = vec![0.0f64; co];
    for c_out in 0..co {
        let wbase = c_out * ci * kh * kw;
        for oy in 0..oh {
            for ox in 0..ow {
                let g = dyd[(c_out * oh + oy) * ow + ox];
                if g == 0.0 {
                    continue;
                }
                db[c_out] += g as f64;
                for c_in in 0..ci {
                    for ky in 0..kh {
                        let iy = (oy * spec.stride + ky) as isize - pad_h as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = (c_in * h + iy as usize) * w;
                        let wrow = wbase + (c_in * kh + ky) * kw;
                        for kx in 0..kw {
                            let ix = (ox * spec.stride + kx) as isize - pad_w as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            dx[xrow + ix as usize] += g * wd[wrow + kx];
                            dw[wrow + kx] += g as f64 * xd[xrow + ix as usize] as f64;
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::from_vec(&[ci, h, w], dx),
        Tensor::from_vec(
            weight.shape(),
            dw.into_iter().map(|v| v as f32).collect::<Vec<_>>(),
        ),
        Tensor::from_vec(&[co], db.into_iter().map(|v| v as f32).collect::<Vec<_>>()),
    )
}

fn rank3(t: &Tensor) -> [usize; 3] {
    match t.shape() {
        [a, b, c] => [*a, *b, *c],
        s => panic!("expected rank-3 tensor, got {s:?}"),
    }
}

fn rank4(t: &Tensor) -> [usize; 4] {
    match t.shape() {
        [a, b, c, d] => [*a, *b, *c, *d],
        s => panic!("expected rank-4 tensor, got {s:?}"),
    }
}

// ---------------------------------------------------------------------------
// softmax
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

/// Max-subtracted softmax over the given axis of a rank-2 tensor. `Rows`
/// normalizes each row (sum over columns is 1).
pub fn softmax_forward(x: &Tensor, axis: Axis) -> Tensor {
    let (r, c) = as_2d(x);
    let xd = x.data();
    let mut out = vec![0.0f32; r * c];
    match axis {
        Axis::Rows => {
            for i in 0..r {
                softmax_slice(&xd[i * c..(i + 1) * c], &mut out[i * c..(i + 1) * c], 1);
            }
        }
        Axis::Cols => {
            for j in 0..c {
                // Strided column view.
                let col: Vec<f32> = (0..r).map(|i| xd[i * c + j]).collect();
                let mut tmp = vec![0.0f32; r];
                softmax_slice(&col, &mut tmp, 1);
                for i in 0..r {
                    out[i * c + j] = tmp[i];
                }
            }
        }
    }
    Tensor::from_vec(&[r, c], out)
}

fn softmax_slice(x: &[f32], out: &mut [f32], _stride: usize) {
    let max = x.iter().fold(f32::NEG_INFINITY, |m, v| m.max(*v));
    let mut sum = 0.0f64;
    for (o, v) in out.iter_mut().zip(x) {
        let e = (v - max).exp();
        *o = e;
        sum += e as f64;
    }
    let inv = (1.0 / sum) as f32;
    out.iter_mut().for_each(|v| *v *= inv);
}

/// `dx_i = y_i * (dy_i - sum_j dy_j y_j)` along the softmax axis.
pub fn softmax_backward(y: &Tensor, dy: &Tensor, axis: Axis) -> Tensor {
    let (r, c) = as_2d(y);
    assert_eq!(dy.shape(), y.shape());
    let yd = y.data();
    let dyd = dy.data();
    let mut dx = vec![0.0f32; r * c];
    match axis {
        Axis::Rows => {
            for i in 0..r {
                let ys = &yd[i * c..(i + 1) * c];
                let ds = &dyd[i * c..(i + 1) * c];
                let dot: f64 = ys.iter().zip(ds).map(|(a, b)| *a as f64 * *b as f64).sum();
                for j in 0..c {
                    dx[i * c + j] = ys[j] * (ds[j] - dot as f32);
                }
            }
        }
        Axis::Cols => {
            for j in 0..c {
                let dot: f64 = (0..r)
                    .map(|i| yd[i * c + j] as f64 * dyd[i * c + j] as f64)
                    .sum();
                for i in 0..r {
                    dx[i * c + j] = yd[i * c + j] * (dyd[i * c + j] - dot as f32);
                }
            }
        }
    }
    Tensor::from_vec(&[r, c], dx)
}

// ---------------------------------------------------------------------------
// element-wise activations
// ---------------------------------------------------------------------------

pub fn leaky_relu_forward(x: &Tensor) -> Tensor {
    map(x, |v| if v >= 0.0 { v } else { LEAKY_SLOPE * v })
}

pub fn leaky_relu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    map2(x, dy, |xv, g| if xv >= 0.0 { g } else { LEAKY_SLOPE * g })
}

pub fn sigmoid_forward(x: &Tensor) -> Tensor {
    map(x, sigmoid_scalar)
}

pub fn sigmoid_scalar(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

/// Backward in terms of the forward output `y`.
pub fn sigmoid_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    map2(y, dy, |yv, g| g * yv * (1.0 - yv))
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_A: f32 = 0.044_715;

/// Tanh-approximation GELU; the backward matches this exact formula.
pub fn gelu_forward(x: &Tensor) -> Tensor {
    map(x, |v| {
        0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh())
    })
}

pub fn gelu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    map2(x, dy, |v, g| {
        let u = GELU_C * (v + GELU_A * v * v * v);
        let t = u.tanh();
        let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
        g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
    })
}

fn map(x: &Tensor, f: impl Fn(f32) -> f32) -> Tensor {
    Tensor::from_vec(x.shape(), x.data().iter().map(|v| f(*v)).collect())
}

fn map2(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    assert_eq!(a.shape(), b.shape());
    Tensor::from_vec(
        a.shape(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| f(*x, *y))
            .collect(),
    )
}

// ---------------------------------------------------------------------------
// layer norm
// ---------------------------------------------------------------------------

pub const NORM_EPS: f32 = 1e-5;

pub struct LayerNormCache {
    normalized: Tensor,
    rstd: Vec<f32>,
}

/// Normalizes each row of `x[m,c]` to zero mean / unit variance, then applies
/// the per-channel affine `gamma`, `beta`.
pub fn layer_norm_forward(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> (Tensor, LayerNormCache) {
    let (m, c) = as_2d(x);
    assert_eq!(gamma.len(), c);
    assert_eq!(beta.len(), c);
    let xd = x.data();
    let mut out = vec![0.0f32; m * c];
    let mut normalized = vec![0.0f32; m * c];
    let mut rstds = vec![0.0f32; m];
    for i in 0..m {
        let row = &xd[i * c..(i + 1) * c];
        let mean = (row.iter().map(|v| *v as f64).sum::<f64>() / c as f64) as f32;
        let var = (row
            .iter()
            .map(|v| {
                let d = (*v - mean) as f64;
                d * d
            })
            .sum::<f64>()
            / c as f64) as f32;
        let rstd = 1.0 / (var + NORM_EPS).sqrt();
        rstds[i] = rstd;
        for j in 0..c {
            let n = (row[j] - mean) * rstd;
            normalized[i * c + j] = n;
            out[i * c + j] = n * gamma.data()[j] + beta.data()[j];
        }
    }
    (
        Tensor::from_vec(&[m, c], out),
        LayerNormCache {
            normalized: Tensor::from_vec(&[m, c], normalized),
            rstd: rstds,
        },
    )
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gamma: &Tensor,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (m, c) = as_2d(&cache.normalized);
    assert_eq!(dy.shape(), &[m, c]);
    let nd = cache.normalized.data();
    let dyd = dy.data();
    let gd = gamma.data();
    let mut dx = vec![0.0f32; m * c];
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    for i in 0..m {
        let nrow = &nd[i * c..(i + 1) * c];
        let drow = &dyd[i * c..(i + 1) * c];
        let mut sum_dn = 0.0f64;
        let mut sum_dn_n = 0.0f64;
        for j in 0..c {
            let dn = (drow[j] * gd[j]) as f64;
            sum_dn += dn;
            sum_dn_n += dn * nrow[j] as f64;
            dgamma[j] += drow[j] as f64 * nrow[j] as f64;
            dbeta[j] += drow[j] as f64;
        }
        let inv_c = 1.0 / c as f64;
        for j in 0..c {
            let dn = (drow[j] * gd[j]) as f64;
            dx[i * c + j] = (cache.rstd[i] as f64
                * (dn - sum_dn * inv_c - nrow[j] as f64 * sum_dn_n * inv_c))
                as f32;
        }
    }
    (
        Tensor::from_vec(&[m, c], dx),
        Tensor::from_vec(&[c], dgamma.into_iter().map(|v| v as f32).collect::<Vec<_>>()),
        Tensor::from_vec(&[c], dbeta.into_iter().map(|v| v as f32).collect::<Vec<_>>()),
    )
}

// ---------------------------------------------------------------------------
// batch norm (1d)
// ---------------------------------------------------------------------------

/// Running statistics for batch norm, updated in batch mode and used verbatim
/// in running mode.
#[derive(Debug, Clone)]
pub struct BatchNormStats {
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub momentum: f32,
}

impl BatchNormStats {
    pub fn new(channels: usize, momentum: f32) -> Self {
        Self {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum,
        }
    }
}

pub struct BatchNormCache {
    normalized: Tensor,
    rstd: Vec<f32>,
    batch_mode: bool,
}

/// Batch mode: normalizes `x[n,c]` per channel with batch statistics and
/// updates the running stats. Requires n >= 2.
pub fn batch_norm_forward_batch(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    stats: &mut BatchNormStats,
) -> (Tensor, BatchNormCache) {
    let (n, c) = as_2d(x);
    assert!(n >= 2, "batch norm in batch mode needs n >= 2");
    let xd = x.data();
    let mut out = vec![0.0f32; n * c];
    let mut normalized = vec![0.0f32; n * c];
    let mut rstds = vec![0.0f32; c];
    for j in 0..c {
        let mean = ((0..n).map(|i| xd[i * c + j] as f64).sum::<f64>() / n as f64) as f32;
        let var = ((0..n)
            .map(|i| {
                let d = (xd[i * c + j] - mean) as f64;
                d * d
            })
            .sum::<f64>()
            / n as f64) as f32;
        let rstd = 1.0 / (var + NORM_EPS).sqrt();
        rstds[j] = rstd;
        stats.running_mean[j] =
            (1.0 - stats.momentum) * stats.running_mean[j] + stats.momentum * mean;
        stats.running_var[j] = (1.0 - stats.momentum) * stats.running_var[j] + stats.momentum * var;
        for i in 0..n {
            let nv = (xd[i * c + j] - mean) * rstd;
            normalized[i * c + j] = nv;
            out[i * c + j] = nv * gamma.data()[j] + beta.data()[j];
        }
    }
    (
        Tensor::from_vec(&[n, c], out),
        BatchNormCache {
            normalized: Tensor::from_vec(&[n, c], normalized),
            rstd: rstds,
            batch_mode: true,
        },
    )
}

/// Running mode: normalizes with the stored running statistics (treated as
/// constants in the backward). Works for any n >= 1, so per-sample training
/// batches stay well-defined.
pub fn batch_norm_forward_running(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    stats: &BatchNormStats,
) -> (Tensor, BatchNormCache) {
    let (n, c) = as_2d(x);
    let xd = x.data();
    let mut out = vec![0.0f32; n * c];
    let mut normalized = vec![0.0f32; n * c];
    let mut rstds = vec![0.0f32; c];
    for j in 0..c {
        let rstd = 1.0 / (stats.running_var[j] + NORM_EPS).sqrt();
        rstds[j] = rstd;
        for i in 0..n {
            let nv = (xd[i * c + j] - stats.running_mean[j]) * rstd;
            normalized[i * c + j] = nv;
            out[i * c + j] = nv * gamma.data()[j] + beta.data()[j];
        }
    }
    (
        Tensor::from_vec(&[n, c], out),
        BatchNormCache {
            normalized: Tensor::from_vec(&[n, c], normalized),
            rstd: rstds,
            batch_mode: false,
        },
    )
}

/// Returns `(dx, dgamma, dbeta)` for either batch-norm mode.
pub fn batch_norm_backward(
    cache: &BatchNormCache,
    gamma: &Tensor,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (n, c) = as_2d(&cache.normalized);
    assert_eq!(dy.shape(), &[n, c]);
    let nd = cache.normalized.data();
    let dyd = dy.data();
    let gd = gamma.data();
    let mut dx = vec![0.0f32; n * c];
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    for j in 0..c {
        let mut sum_dn = 0.0f64;
        let mut sum_dn_n = 0.0f64;
        for i in 0..n {
            let dn = (dyd[i * c + j] * gd[j]) as f64;
            sum_dn += dn;
            sum_dn_n += dn * nd[i * c + j] as f64;
            dgamma[j] += dyd[i * c + j] as f64 * nd[i * c + j] as f64;
            dbeta[j] += dyd[i * c + j] as f64;
        }
        for i in 0..n {
            let dn = (dyd[i * c + j] * gd[j]) as f64;
            dx[i * c + j] = if cache.batch_mode {
                let inv_n = 1.0 / n as f64;
                (cache.rstd[j] as f64
                    * (dn - sum_dn * inv_n - nd[i * c + j] as f64 * sum_dn_n * inv_n))
                    as f32
            } else {
                (cache.rstd[j] as f64 * dn) as f32
            };
        }
    }
    (
        Tensor::from_vec(&[n, c], dx),
        Tensor::from_vec(&[c], dgamma.into_iter().map(|v| v as f32).collect::<Vec<_>>()),
        Tensor::from_vec(&[c], dbeta.into_iter().map(|v| v as f32).collect::<Vec<_>>()),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn linear_identity_weight_passes_through() {
        let x = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 4.0]);
        let mut w = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            w.data_mut()[i * 3 + i] = 1.0;
        }
        let b = Tensor::zeros(&[3]);
        let y = linear_forward(&x, &w, &b);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn linear_one_by_one() {
        let x = Tensor::from_vec(&[1, 1], vec![2.0]);
        let w = Tensor::from_vec(&[1, 1], vec![3.0]);
        let b = Tensor::from_vec(&[1], vec![1.0]);
        let y = linear_forward(&x, &w, &b);
        assert_eq!(y.data(), &[7.0]);
    }

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let w = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]);
        let b = Tensor::zeros(&[1]);
        let y = conv2d_forward(&x, &w, &b, Conv2dSpec::same(1));
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_averaging_kernel_constant_input() {
        // Valid padding so every window sees only real input.
        let x = Tensor::from_vec(&[1, 5, 5], vec![2.0; 25]);
        let w = Tensor::from_vec(&[1, 1, 3, 3], vec![1.0 / 9.0; 9]);
        let b = Tensor::zeros(&[1]);
        let y = conv2d_forward(&x, &w, &b, Conv2dSpec::valid(1));
        assert_eq!(y.shape(), &[1, 3, 3]);
        for v in y.data() {
            assert_abs_diff_eq!(*v, 2.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn conv_same_stride2_output_shape() {
        let x = Tensor::zeros(&[1, 48, 96]);
        let w = Tensor::zeros(&[8, 1, 3, 3]);
        let b = Tensor::zeros(&[8]);
        let y = conv2d_forward(&x, &w, &b, Conv2dSpec::same(2));
        assert_eq!(y.shape(), &[8, 24, 48]);
    }

    #[test]
    fn softmax_symmetry_and_closed_form() {
        let x = Tensor::from_vec(&[1, 2], vec![0.0, 0.0]);
        let y = softmax_forward(&x, Axis::Rows);
        assert_eq!(y.data(), &[0.5, 0.5]);

        let x = Tensor::from_vec(&[1, 2], vec![1.0f32.ln(), 3.0f32.ln()]);
        let y = softmax_forward(&x, Axis::Rows);
        assert_abs_diff_eq!(y.data()[0], 0.25, epsilon = 1e-6);
        assert_abs_diff_eq!(y.data()[1], 0.75, epsilon = 1e-6);
    }

    #[test]
    fn softmax_shift_invariance() {
        let x = Tensor::from_vec(&[1, 4], vec![0.3, -1.2, 2.0, 0.7]);
        let shifted = Tensor::from_vec(&[1, 4], x.data().iter().map(|v| v + 5.0).collect());
        let a = softmax_forward(&x, Axis::Rows);
        let b = softmax_forward(&shifted, Axis::Rows);
        for (u, v) in a.data().iter().zip(b.data()) {
            assert_abs_diff_eq!(u, v, epsilon = 1e-6);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::from_vec(&[3, 4], (0..12).map(|v| (v as f32) * 0.37 - 2.0).collect());
        let y = softmax_forward(&x, Axis::Rows);
        for row in y.data().chunks(4) {
            let s: f32 = row.iter().sum();
            assert_abs_diff_eq!(s, 1.0, epsilon = 1e-6);
            assert!(row.iter().all(|v| *v >= 0.0));
        }
        let yc = softmax_forward(&x, Axis::Cols);
        for j in 0..4 {
            let s: f32 = (0..3).map(|i| yc.data()[i * 4 + j]).sum();
            assert_abs_diff_eq!(s, 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn activation_point_values() {
        assert_eq!(
            sigmoid_forward(&Tensor::scalar(0.0)).data()[0],
            0.5,
        );
        assert_eq!(
            leaky_relu_forward(&Tensor::scalar(-1.0)).data()[0],
            -0.01,
        );
        assert_eq!(leaky_relu_forward(&Tensor::scalar(2.0)).data()[0], 2.0);
        // GELU is odd-ish around zero: gelu(0) = 0.
        assert_eq!(gelu_forward(&Tensor::scalar(0.0)).data()[0], 0.0);
    }

    #[test]
    fn layer_norm_constant_row_is_zero_before_affine() {
        let x = Tensor::from_vec(&[1, 4], vec![3.0; 4]);
        let gamma = Tensor::from_vec(&[4], vec![1.0; 4]);
        let beta = Tensor::zeros(&[4]);
        let (y, _) = layer_norm_forward(&x, &gamma, &beta);
        for v in y.data() {
            assert_abs_diff_eq!(*v, 0.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn batch_norm_batch_mode_normalizes() {
        let x = Tensor::from_vec(&[4, 2], vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0, 4.0, 40.0]);
        let gamma = Tensor::from_vec(&[2], vec![1.0, 1.0]);
        let beta = Tensor::zeros(&[2]);
        let mut stats = BatchNormStats::new(2, 0.1);
        let (y, _) = batch_norm_forward_batch(&x, &gamma, &beta, &mut stats);
        for j in 0..2 {
            let mean: f32 = (0..4).map(|i| y.data()[i * 2 + j]).sum::<f32>() / 4.0;
            assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-6);
        }
        // Running stats moved toward the batch stats.
        assert!(stats.running_mean[0] > 0.0);
        assert!(stats.running_mean[1] > stats.running_mean[0]);
    }

    #[test]
    fn batch_norm_running_mode_is_affine() {
        let x = Tensor::from_vec(&[1, 2], vec![2.0, -3.0]);
        let gamma = Tensor::from_vec(&[2], vec![1.0, 2.0]);
        let beta = Tensor::from_vec(&[2], vec![0.0, 1.0]);
        let stats = BatchNormStats::new(2, 0.1);
        let (y, _) = batch_norm_forward_running(&x, &gamma, &beta, &stats);
        assert_abs_diff_eq!(y.data()[0], 2.0, epsilon = 1e-4);
        assert_abs_diff_eq!(y.data()[1], -5.0, epsilon = 1e-4);
    }
}
