//! Forward and backward kernels for the operations GateNet is built from.
//!
//! Activations are laid out as `[rows, channels]` matrices. A kernel-size-1
//! convolution over a `[C_in, L]` signal is the same affine map applied to each
//! of the `L` positions, so the network evaluates it as [`linear_rows`] over the
//! transposed layout; [`pointwise_conv1d`] keeps the channel-major form for
//! callers that hold signals that way.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// Lower clamp for the target-class probability inside the focal loss.
pub const PROB_FLOOR: f64 = 1e-12;

/// Normalization mode for batchnorm layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Batch statistics without touching the running statistics.
    BatchStats,
    /// Running statistics only.
    Eval,
}

impl Mode {
    pub fn uses_batch_stats(self) -> bool {
        !matches!(self, Mode::Eval)
    }
}

/// Running mean/variance of one batchnorm layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

/// `C = A·B + beta·C` on strided row/column views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above bound every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn check_affine(op: &'static str, in_ch: usize, w: &Tensor, b: &Tensor) -> Result<usize> {
    let (out_ch, w_in) = w.dims2(op)?;
    if w_in != in_ch {
        return Err(Error::dim(
            op,
            format!("input channels {in_ch} but weight expects {w_in} (axis 1 of weight)"),
        ));
    }
    if b.shape() != [out_ch] {
        return Err(Error::dim(
            op,
            format!("bias shape {:?} does not match output channels {out_ch}", b.shape()),
        ));
    }
    Ok(out_ch)
}

/// `out[o, l] = b[o] + Σ_i w[o, i] · x[i, l]` for `x: [C_in, L]`.
pub fn pointwise_conv1d(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (c_in, len) = x.dims2("pointwise_conv1d")?;
    let c_out = check_affine("pointwise_conv1d", c_in, w, b)?;
    let mut out = Vec::with_capacity(c_out * len);
    for &bias in b.data() {
        out.extend(std::iter::repeat_n(bias, len));
    }
    gemm(c_out, c_in, len, w.data(), (c_in, 1), x.data(), (len, 1), 1.0, &mut out);
    Tensor::matrix(c_out, len, out)
}

/// Row-wise affine map `x·wᵀ + b` for `x: [N, in]`, `w: [out, in]`.
pub fn linear_rows(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, c_in) = x.dims2("linear")?;
    let c_out = check_affine("linear", c_in, w, b)?;
    let mut out = Vec::with_capacity(n * c_out);
    for _ in 0..n {
        out.extend_from_slice(b.data());
    }
    gemm(n, c_in, c_out, x.data(), (c_in, 1), w.data(), (1, c_in), 1.0, &mut out);
    Tensor::matrix(n, c_out, out)
}

/// Dense layer; identical to [`linear_rows`].
pub fn dense(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    linear_rows(x, w, b)
}

pub struct LinearGrads {
    pub dx: Tensor,
    pub dw: Tensor,
    pub db: Tensor,
}

pub fn linear_rows_backward(x: &Tensor, w: &Tensor, dout: &Tensor) -> Result<LinearGrads> {
    let (n, c_in) = x.dims2("linear_backward")?;
    let (c_out, _) = w.dims2("linear_backward")?;
    if dout.shape() != [n, c_out] {
        return Err(Error::dim(
            "linear_backward",
            format!("upstream gradient {:?}, expected [{n}, {c_out}]", dout.shape()),
        ));
    }
    let mut dx = vec![0.0; n * c_in];
    gemm(n, c_out, c_in, dout.data(), (c_out, 1), w.data(), (c_in, 1), 0.0, &mut dx);
    let mut dw = vec![0.0; c_out * c_in];
    gemm(c_out, n, c_in, dout.data(), (1, c_out), x.data(), (c_in, 1), 0.0, &mut dw);
    let mut db = vec![0.0; c_out];
    for r in 0..n {
        for (acc, g) in db.iter_mut().zip(&dout.data()[r * c_out..(r + 1) * c_out]) {
            *acc += g;
        }
    }
    Ok(LinearGrads {
        dx: Tensor::matrix(n, c_in, dx)?,
        dw: Tensor::matrix(c_out, c_in, dw)?,
        db: Tensor::vector(db),
    })
}

/// Values kept from a batchnorm forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
    pub batch_stats: bool,
}

/// Batchnorm over the rows of `x: [N, C]`.
///
/// `weights` gives a multiplicity per row: a row with weight `m` contributes to the
/// batch statistics exactly as `m` identical rows would. `None` means all ones.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm(
    x: &Tensor,
    gamma: &Tensor,
    beta_shift: &Tensor,
    running: &mut RunningStats,
    mode: Mode,
    weights: Option<&[f64]>,
) -> Result<(Tensor, BnCache)> {
    let (n, c) = x.dims2("batchnorm")?;
    if gamma.shape() != [c] || beta_shift.shape() != [c] {
        return Err(Error::dim(
            "batchnorm",
            format!(
                "{c} channels but gamma {:?} and shift {:?}",
                gamma.shape(),
                beta_shift.shape()
            ),
        ));
    }
    if running.mean.len() != c || running.var.len() != c {
        return Err(Error::dim("batchnorm", "running statistics channel count"));
    }
    if let Some(w) = weights {
        if w.len() != n {
            return Err(Error::dim("batchnorm", format!("{} weights for {n} rows", w.len())));
        }
    }
    let xd = x.data();
    let (mean, var) = if mode.uses_batch_stats() {
        let total: f64 = weights.map_or(n as f64, |w| w.iter().sum());
        if total < 2.0 {
            return Err(Error::DegenerateBatch { rows: total as usize });
        }
        let mut mean = vec![0.0; c];
        for r in 0..n {
            let m = weights.map_or(1.0, |w| w[r]);
            for (acc, v) in mean.iter_mut().zip(&xd[r * c..(r + 1) * c]) {
                *acc += m * v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= total);
        let mut var = vec![0.0; c];
        for r in 0..n {
            let m = weights.map_or(1.0, |w| w[r]);
            for ((acc, v), mu) in var.iter_mut().zip(&xd[r * c..(r + 1) * c]).zip(&mean) {
                let d = v - mu;
                *acc += m * d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= total);
        if mode == Mode::Train {
            let unbias = total / (total - 1.0);
            for ch in 0..c {
                running.mean[ch] = (1.0 - BN_MOMENTUM) * running.mean[ch] + BN_MOMENTUM * mean[ch];
                running.var[ch] =
                    (1.0 - BN_MOMENTUM) * running.var[ch] + BN_MOMENTUM * var[ch] * unbias;
            }
        }
        (mean, var)
    } else {
        (running.mean.clone(), running.var.clone())
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
    let mut xhat = vec![0.0; n * c];
    let mut out = vec![0.0; n * c];
    let (g, s) = (gamma.data(), beta_shift.data());
    for r in 0..n {
        for ch in 0..c {
            let i = r * c + ch;
            let h = (xd[i] - mean[ch]) * inv_std[ch];
            xhat[i] = h;
            out[i] = g[ch] * h + s[ch];
        }
    }
    Ok((
        Tensor::matrix(n, c, out)?,
        BnCache {
            xhat: Tensor::matrix(n, c, xhat)?,
            inv_std,
            batch_stats: mode.uses_batch_stats(),
        },
    ))
}

pub struct BnGrads {
    pub dx: Tensor,
    pub dgamma: Tensor,
    pub dshift: Tensor,
}

/// Backward of [`batchnorm`]. `dout` rows are the summed gradients of all copies
/// a weighted row stands for.
pub fn batchnorm_backward(
    cache: &BnCache,
    gamma: &Tensor,
    dout: &Tensor,
    weights: Option<&[f64]>,
) -> Result<BnGrads> {
    let (n, c) = cache.xhat.dims2("batchnorm_backward")?;
    if dout.shape() != [n, c] {
        return Err(Error::dim("batchnorm_backward", "upstream gradient shape"));
    }
    let xh = cache.xhat.data();
    let go = dout.data();
    let mut dgamma = vec![0.0; c];
    let mut dshift = vec![0.0; c];
    for r in 0..n {
        for ch in 0..c {
            let i = r * c + ch;
            dgamma[ch] += go[i] * xh[i];
            dshift[ch] += go[i];
        }
    }
    let g = gamma.data();
    let mut dx = vec![0.0; n * c];
    if cache.batch_stats {
        let total: f64 = weights.map_or(n as f64, |w| w.iter().sum());
        for r in 0..n {
            let m = weights.map_or(1.0, |w| w[r]);
            for ch in 0..c {
                let i = r * c + ch;
                dx[i] = g[ch] * cache.inv_std[ch] / total
                    * (total * go[i] - m * dshift[ch] - m * xh[i] * dgamma[ch]);
            }
        }
    } else {
        for r in 0..n {
            for ch in 0..c {
                let i = r * c + ch;
                dx[i] = go[i] * g[ch] * cache.inv_std[ch];
            }
        }
    }
    Ok(BnGrads {
        dx: Tensor::matrix(n, c, dx)?,
        dgamma: Tensor::vector(dgamma),
        dshift: Tensor::vector(dshift),
    })
}

pub fn relu(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    out
}

pub fn relu_backward(x: &Tensor, dout: &Tensor) -> Tensor {
    let mut dx = dout.clone();
    for (g, v) in dx.data_mut().iter_mut().zip(x.data()) {
        if *v <= 0.0 {
            *g = 0.0;
        }
    }
    dx
}

/// Mean over the last axis of `x: [C, L]`; a pooling window spanning the whole axis.
pub fn avgpool_last_axis(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 {
        return Err(Error::dim("avgpool", format!("expected [C, L], got {:?}", x.shape())));
    }
    let (c, l) = (x.shape()[0], x.shape()[1]);
    if l == 0 {
        return Err(Error::EmptyContext);
    }
    let out = (0..c)
        .map(|ch| x.row(ch).iter().sum::<f64>() / l as f64)
        .collect();
    Ok(Tensor::vector(out))
}

/// `out[b] = mean_j x[index[b·k + j]]` for `x: [U, E]`; pools `k` gathered rows per output.
pub fn gather_mean(x: &Tensor, index: &[u32], k: usize) -> Result<Tensor> {
    gather_mean_impl(x, index, k, false)
}

/// Like [`gather_mean`], but each group is summed in a fixed order of its row
/// values, so the result is bit-identical under any permutation of the group.
pub fn gather_mean_canonical(x: &Tensor, index: &[u32], k: usize) -> Result<Tensor> {
    gather_mean_impl(x, index, k, true)
}

fn gather_mean_impl(x: &Tensor, index: &[u32], k: usize, canonical: bool) -> Result<Tensor> {
    let (u, e) = x.dims2("gather_mean")?;
    if k == 0 {
        return Err(Error::EmptyContext);
    }
    if index.len() % k != 0 {
        return Err(Error::dim("gather_mean", format!("{} indices not a multiple of {k}", index.len())));
    }
    if let Some(&bad) = index.iter().find(|&&i| i as usize >= u) {
        return Err(Error::dim("gather_mean", format!("index {bad} >= {u} rows")));
    }
    let b = index.len() / k;
    let xd = x.data();
    let mut out = vec![0.0; b * e];
    let scale = 1.0 / k as f64;
    let mut order = Vec::with_capacity(k);
    for (row, chunk) in out.chunks_mut(e).zip(index.chunks(k)) {
        let chunk = if canonical {
            order.clear();
            order.extend_from_slice(chunk);
            order.sort_by(|&a, &b| {
                let ra = &xd[a as usize * e..(a as usize + 1) * e];
                let rb = &xd[b as usize * e..(b as usize + 1) * e];
                ra.iter().zip(rb).map(|(p, q)| p.total_cmp(q)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
            });
            &order[..]
        } else {
            chunk
        };
        for &i in chunk {
            let src = &xd[i as usize * e..(i as usize + 1) * e];
            for (acc, v) in row.iter_mut().zip(src) {
                *acc += v;
            }
        }
        row.iter_mut().for_each(|v| *v *= scale);
    }
    Tensor::matrix(b, e, out)
}

pub fn gather_mean_backward(rows: usize, index: &[u32], k: usize, dout: &Tensor) -> Result<Tensor> {
    let (_, e) = dout.dims2("gather_mean_backward")?;
    let mut dx = vec![0.0; rows * e];
    let scale = 1.0 / k as f64;
    for (g, chunk) in dout.data().chunks(e).zip(index.chunks(k)) {
        for &i in chunk {
            let dst = &mut dx[i as usize * e..(i as usize + 1) * e];
            for (acc, v) in dst.iter_mut().zip(g) {
                *acc += v * scale;
            }
        }
    }
    Tensor::matrix(rows, e, dx)
}

/// Column concatenation of two matrices with equal row counts.
pub fn concat_cols(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, ca) = a.dims2("concat")?;
    let (nb, cb) = b.dims2("concat")?;
    if n != nb {
        return Err(Error::dim("concat", format!("row counts {n} and {nb} (axis 0)")));
    }
    let mut out = Vec::with_capacity(n * (ca + cb));
    for r in 0..n {
        out.extend_from_slice(a.row(r));
        out.extend_from_slice(b.row(r));
    }
    Tensor::matrix(n, ca + cb, out)
}

/// Row-wise softmax of `x: [N, C]`.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    let (_, c) = x.dims2("softmax")?;
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(c) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    Ok(out)
}

pub fn softmax_backward(probs: &Tensor, dprobs: &Tensor) -> Result<Tensor> {
    let (_, c) = probs.dims2("softmax_backward")?;
    let mut dx = dprobs.clone();
    for (g, p) in dx.data_mut().chunks_mut(c).zip(probs.data().chunks(c)) {
        let dot: f64 = g.iter().zip(p).map(|(a, b)| a * b).sum();
        for (gi, pi) in g.iter_mut().zip(p) {
            *gi = pi * (*gi - dot);
        }
    }
    Ok(dx)
}

/// Mean class-weighted focal loss `−w_t·(1−p_t)^γ·ln p_t` over the rows of `probs`.
///
/// Returns the loss and the number of rows whose `p_t` was clamped to [`PROB_FLOOR`].
pub fn focal_loss(probs: &Tensor, targets: &[usize], class_weights: &[f64], gamma: f64) -> Result<(f64, usize)> {
    let (n, c) = check_loss_inputs(probs, targets, class_weights)?;
    let mut total = 0.0;
    let mut saturated = 0;
    for (r, &t) in targets.iter().enumerate() {
        let raw = probs.data()[r * c + t];
        if raw < PROB_FLOOR {
            saturated += 1;
        }
        let p = raw.max(PROB_FLOOR);
        total += -class_weights[t] * (1.0 - p).powf(gamma) * p.ln();
    }
    Ok((total / n as f64, saturated))
}

pub fn focal_loss_backward(probs: &Tensor, targets: &[usize], class_weights: &[f64], gamma: f64) -> Result<Tensor> {
    let (n, c) = check_loss_inputs(probs, targets, class_weights)?;
    let mut d = vec![0.0; n * c];
    for (r, &t) in targets.iter().enumerate() {
        let p = probs.data()[r * c + t].max(PROB_FLOOR);
        let q = 1.0 - p;
        // d/dp of −(1−p)^γ ln p = γ(1−p)^(γ−1) ln p − (1−p)^γ / p
        let focus = if gamma == 0.0 || q <= 0.0 {
            0.0
        } else {
            gamma * q.powf(gamma - 1.0) * p.ln()
        };
        d[r * c + t] = class_weights[t] * (focus - q.powf(gamma) / p) / n as f64;
    }
    Tensor::matrix(n, c, d)
}

fn check_loss_inputs(probs: &Tensor, targets: &[usize], class_weights: &[f64]) -> Result<(usize, usize)> {
    let (n, c) = probs.dims2("focal_loss")?;
    if targets.len() != n {
        return Err(Error::dim("focal_loss", format!("{} targets for {n} rows", targets.len())));
    }
    if class_weights.len() != c {
        return Err(Error::dim("focal_loss", format!("{} class weights for {c} classes", class_weights.len())));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= c) {
        return Err(Error::dim("focal_loss", format!("target {t} >= {c} classes")));
    }
    Ok((n, c))
}
