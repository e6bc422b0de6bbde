//! Pure forward/backward kernels for the differentiable operations the
//! network needs. The tape in [`crate::tape`] records these; everything here
//! is a plain function over immutable inputs so the kernels are reusable and
//! independently testable.
//!
//! Convolution is cross-correlation (no kernel flip); "same" padding is
//! zero-padding. Summation order per output element is fixed, so the
//! rayon-parallel paths produce bit-identical results to the sequential ones.

use crate::error::{Error, Result};
use crate::tensor::{same_shape, Scalar, Tensor};
use crate::util::par_map;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn expect_rank<T: Scalar>(op: &'static str, t: &Tensor<T>, rank: usize) -> Result<()> {
    if t.shape().len() != rank {
        return Err(Error::invalid(
            op,
            format!("expected rank {}, got shape {:?}", rank, t.shape()),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

pub fn conv2d_out_shape(
    op: &'static str,
    input: &[usize],
    kernel: &[usize],
    stride: usize,
    pad: Padding,
) -> Result<(usize, usize, usize, usize)> {
    let (ci, h, w) = (input[0], input[1], input[2]);
    let (co, kci, lh, lw) = (kernel[0], kernel[1], kernel[2], kernel[3]);
    if lh != lw || lh % 2 == 0 {
        return Err(Error::invalid(op, format!("kernel must be odd square, got {}x{}", lh, lw)));
    }
    if kci != ci {
        return Err(Error::ShapeMismatch {
            op,
            axis: 1,
            expected: ci,
            actual: kci,
        });
    }
    if stride == 0 {
        return Err(Error::invalid(op, "stride must be >= 1"));
    }
    let pad_lo = match pad {
        Padding::Same => (lh - 1) / 2,
        Padding::Valid => 0,
    };
    let hp = h + 2 * pad_lo;
    let wp = w + 2 * pad_lo;
    if hp < lh || wp < lw {
        return Err(Error::invalid(op, format!("input {}x{} smaller than kernel {}", h, w, lh)));
    }
    let ho = (hp - lh) / stride + 1;
    let wo = (wp - lw) / stride + 1;
    Ok((co, ho, wo, pad_lo))
}

/// Cross-correlation of a CHW input with an [C_out, C_in, L, L] kernel.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: Padding,
) -> Result<Tensor<T>> {
    expect_rank("conv2d", input, 3)?;
    expect_rank("conv2d", kernel, 4)?;
    let (co, ho, wo, pad_lo) = conv2d_out_shape("conv2d", input.shape(), kernel.shape(), stride, pad)?;
    let (ci, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let l = kernel.shape()[2];
    if let Some(b) = bias {
        if b.shape() != [co] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                axis: 0,
                expected: co,
                actual: b.numel(),
            });
        }
    }
    let id = input.data();
    let kd = kernel.data();
    let plane = ho * wo;
    let data: Vec<T> = par_map(co, |oc| {
        let mut out = vec![T::zero(); plane];
        let b = bias.map(|b| b.data()[oc]).unwrap_or_else(T::zero);
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = b;
                for ic in 0..ci {
                    let kbase = ((oc * ci + ic) * l) * l;
                    let ibase = ic * h * w;
                    for ky in 0..l {
                        let iy = (oy * stride + ky) as isize - pad_lo as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let irow = ibase + iy as usize * w;
                        let krow = kbase + ky * l;
                        for kx in 0..l {
                            let ix = (ox * stride + kx) as isize - pad_lo as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc = acc + id[irow + ix as usize] * kd[krow + kx];
                        }
                    }
                }
                out[oy * wo + ox] = acc;
            }
        }
        out
    })
    .into_iter()
    .flatten()
    .collect();
    Tensor::new(vec![co, ho, wo], data)
}

/// Gradients of [`conv2d_forward`] w.r.t. input, kernel, and bias.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    gout: &Tensor<T>,
    stride: usize,
    pad: Padding,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (co, ho, wo, pad_lo) =
        conv2d_out_shape("conv2d_backward", input.shape(), kernel.shape(), stride, pad)?;
    same_shape("conv2d_backward", gout.shape(), &[co, ho, wo])?;
    let (ci, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let l = kernel.shape()[2];
    let mut dinput = Tensor::zeros(input.shape());
    let mut dkernel = Tensor::zeros(kernel.shape());
    let mut dbias = Tensor::zeros(&[co]);
    let id = input.data();
    let kd = kernel.data();
    let gd = gout.data();
    let din = dinput.data_mut();
    let dk = dkernel.data_mut();
    let db = dbias.data_mut();
    for oc in 0..co {
        for oy in 0..ho {
            for ox in 0..wo {
                let g = gd[(oc * ho + oy) * wo + ox];
                db[oc] = db[oc] + g;
                for ic in 0..ci {
                    let kbase = ((oc * ci + ic) * l) * l;
                    let ibase = ic * h * w;
                    for ky in 0..l {
                        let iy = (oy * stride + ky) as isize - pad_lo as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let irow = ibase + iy as usize * w;
                        let krow = kbase + ky * l;
                        for kx in 0..l {
                            let ix = (ox * stride + kx) as isize - pad_lo as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            din[irow + ix as usize] = din[irow + ix as usize] + g * kd[krow + kx];
                            dk[krow + kx] = dk[krow + kx] + g * id[irow + ix as usize];
                        }
                    }
                }
            }
        }
    }
    Ok((dinput, dkernel, dbias))
}

// ---------------------------------------------------------------------------
// Batch normalization (per-channel over the sample's spatial extent)
// ---------------------------------------------------------------------------

/// Running statistics for one batch-norm layer.
#[derive(Clone, Debug)]
pub struct BnState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Scalar> BnState<T> {
    pub fn new(channels: usize) -> Self {
        BnState {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
        }
    }
}

/// Per-channel statistics saved by the forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct BnSaved<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub fn batchnorm_forward<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    state: &mut BnState<T>,
    mode: Mode,
    momentum: T,
    eps: T,
) -> Result<(Tensor<T>, BnSaved<T>)> {
    expect_rank("batch_norm", input, 3)?;
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let m = h * w;
    if m == 0 {
        return Err(Error::invalid("batch_norm", "zero-size channel"));
    }
    if eps <= T::zero() {
        return Err(Error::invalid("batch_norm", "eps must be > 0"));
    }
    if gamma.numel() != c || beta.numel() != c || state.running_mean.len() != c {
        return Err(Error::ShapeMismatch {
            op: "batch_norm",
            axis: 0,
            expected: c,
            actual: gamma.numel(),
        });
    }
    let mf = T::from_f64(m as f64);
    let mut out = Tensor::zeros(input.shape());
    let mut saved = BnSaved {
        mean: vec![T::zero(); c],
        var: vec![T::zero(); c],
    };
    for ch in 0..c {
        let base = ch * m;
        let slice = &input.data()[base..base + m];
        let (mean, var) = match mode {
            Mode::Train => {
                let mean = slice.iter().copied().sum::<T>() / mf;
                let var = slice
                    .iter()
                    .map(|&v| (v - mean) * (v - mean))
                    .sum::<T>()
                    / mf;
                state.running_mean[ch] =
                    (T::one() - momentum) * state.running_mean[ch] + momentum * mean;
                state.running_var[ch] =
                    (T::one() - momentum) * state.running_var[ch] + momentum * var;
                (mean, var)
            }
            Mode::Eval => (state.running_mean[ch], state.running_var[ch]),
        };
        saved.mean[ch] = mean;
        saved.var[ch] = var;
        let inv = (var + eps).sqrt().recip();
        let (g, b) = (gamma.data()[ch], beta.data()[ch]);
        for i in 0..m {
            out.data_mut()[base + i] = g * (slice[i] - mean) * inv + b;
        }
    }
    Ok((out, saved))
}

pub fn batchnorm_backward<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    saved: &BnSaved<T>,
    gout: &Tensor<T>,
    mode: Mode,
    eps: T,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let m = h * w;
    let mf = T::from_f64(m as f64);
    let mut dinput = Tensor::zeros(input.shape());
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    for ch in 0..c {
        let base = ch * m;
        let x = &input.data()[base..base + m];
        let g = &gout.data()[base..base + m];
        let mean = saved.mean[ch];
        let inv = (saved.var[ch] + eps).sqrt().recip();
        let gam = gamma.data()[ch];
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for i in 0..m {
            let xh = (x[i] - mean) * inv;
            sum_g = sum_g + g[i];
            sum_gx = sum_gx + g[i] * xh;
        }
        dgamma.data_mut()[ch] = sum_gx;
        dbeta.data_mut()[ch] = sum_g;
        match mode {
            Mode::Train => {
                let mg = sum_g / mf;
                let mgx = sum_gx / mf;
                for i in 0..m {
                    let xh = (x[i] - mean) * inv;
                    dinput.data_mut()[base + i] = gam * inv * (g[i] - mg - xh * mgx);
                }
            }
            Mode::Eval => {
                for i in 0..m {
                    dinput.data_mut()[base + i] = gam * inv * g[i];
                }
            }
        }
    }
    Ok((dinput, dgamma, dbeta))
}

// ---------------------------------------------------------------------------
// Elementwise activations
// ---------------------------------------------------------------------------

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

pub fn relu_backward<T: Scalar>(x: &Tensor<T>, gout: &Tensor<T>) -> Tensor<T> {
    Tensor::from_fn(x.shape(), |i| {
        if x.data()[i] > T::zero() {
            gout.data()[i]
        } else {
            T::zero()
        }
    })
}

/// Numerically safe logistic: never overflows for large |x|.
pub fn sigmoid_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| {
        if v >= T::zero() {
            (T::one() + (-v).exp()).recip()
        } else {
            let e = v.exp();
            e / (T::one() + e)
        }
    })
}

pub fn sigmoid_backward<T: Scalar>(out: &Tensor<T>, gout: &Tensor<T>) -> Tensor<T> {
    Tensor::from_fn(out.shape(), |i| {
        let s = out.data()[i];
        gout.data()[i] * s * (T::one() - s)
    })
}

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Area,
}

/// 2x downsampling. `Max` takes the 2x2 window max (first index wins ties),
/// `Area` averages the 2x2 block. Odd extents are the caller's problem.
pub fn downsample2_forward<T: Scalar>(
    x: &Tensor<T>,
    kind: PoolKind,
) -> Result<(Tensor<T>, Vec<usize>)> {
    expect_rank("downsample2", x, 3)?;
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(
            "downsample2",
            format!("extents must be even, got {}x{}", h, w),
        ));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[c, ho, wo]);
    let mut argmax = Vec::new();
    if kind == PoolKind::Max {
        argmax = vec![0usize; c * ho * wo];
    }
    let quarter = T::from_f64(0.25);
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let idx = |dy: usize, dx: usize| (ch * h + 2 * oy + dy) * w + 2 * ox + dx;
                let v = match kind {
                    PoolKind::Max => {
                        let mut best = idx(0, 0);
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            if x.data()[idx(dy, dx)] > x.data()[best] {
                                best = idx(dy, dx);
                            }
                        }
                        argmax[(ch * ho + oy) * wo + ox] = best;
                        x.data()[best]
                    }
                    PoolKind::Area => {
                        (x.data()[idx(0, 0)]
                            + x.data()[idx(0, 1)]
                            + x.data()[idx(1, 0)]
                            + x.data()[idx(1, 1)])
                            * quarter
                    }
                };
                out.set3(ch, oy, ox, v);
            }
        }
    }
    Ok((out, argmax))
}

pub fn downsample2_backward<T: Scalar>(
    in_shape: &[usize],
    kind: PoolKind,
    argmax: &[usize],
    gout: &Tensor<T>,
) -> Tensor<T> {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (ho, wo) = (h / 2, w / 2);
    let mut dx = Tensor::zeros(in_shape);
    let quarter = T::from_f64(0.25);
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let g = gout.at3(ch, oy, ox);
                match kind {
                    PoolKind::Max => {
                        let i = argmax[(ch * ho + oy) * wo + ox];
                        dx.data_mut()[i] = dx.data_mut()[i] + g;
                    }
                    PoolKind::Area => {
                        for (dy, dx_) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let i = (ch * h + 2 * oy + dy) * w + 2 * ox + dx_;
                            dx.data_mut()[i] = dx.data_mut()[i] + g * quarter;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Source taps for one output coordinate of the 2x bilinear upsampler.
///
/// Half-pixel convention: output sample `j` reads input coordinate
/// `(j + 0.5) / 2 - 0.5`, clamped at the borders. With this convention a
/// constant image stays constant and a 1x1 image upsamples to a constant 2x2.
fn bilinear_taps<T: Scalar>(j: usize, n_in: usize) -> (usize, usize, T) {
    let s = (j as f64 + 0.5) / 2.0 - 0.5;
    if s <= 0.0 || n_in == 1 {
        return (0, 0, T::zero());
    }
    let max = (n_in - 1) as f64;
    if s >= max {
        return (n_in - 1, n_in - 1, T::zero());
    }
    let i0 = s.floor() as usize;
    (i0, i0 + 1, T::from_f64(s - i0 as f64))
}

pub fn upsample2_forward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank("upsample2", x, 3)?;
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(&[c, ho, wo]);
    for ch in 0..c {
        for oy in 0..ho {
            let (y0, y1, fy) = bilinear_taps::<T>(oy, h);
            for ox in 0..wo {
                let (x0, x1, fx) = bilinear_taps::<T>(ox, w);
                let one = T::one();
                let v = x.at3(ch, y0, x0) * (one - fy) * (one - fx)
                    + x.at3(ch, y0, x1) * (one - fy) * fx
                    + x.at3(ch, y1, x0) * fy * (one - fx)
                    + x.at3(ch, y1, x1) * fy * fx;
                out.set3(ch, oy, ox, v);
            }
        }
    }
    Ok(out)
}

pub fn upsample2_backward<T: Scalar>(in_shape: &[usize], gout: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (ho, wo) = (2 * h, 2 * w);
    let mut dx = Tensor::zeros(in_shape);
    for ch in 0..c {
        for oy in 0..ho {
            let (y0, y1, fy) = bilinear_taps::<T>(oy, h);
            for ox in 0..wo {
                let (x0, x1, fx) = bilinear_taps::<T>(ox, w);
                let g = gout.at3(ch, oy, ox);
                let one = T::one();
                let acc = |dx: &mut Tensor<T>, y: usize, xx: usize, wgt: T| {
                    let v = dx.at3(ch, y, xx) + g * wgt;
                    dx.set3(ch, y, xx, v);
                };
                acc(&mut dx, y0, x0, (one - fy) * (one - fx));
                acc(&mut dx, y0, x1, (one - fy) * fx);
                acc(&mut dx, y1, x0, fy * (one - fx));
                acc(&mut dx, y1, x1, fy * fx);
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Shape plumbing: concat / split
// ---------------------------------------------------------------------------

pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank("concat_channels", a, 3)?;
    expect_rank("concat_channels", b, 3)?;
    same_shape("concat_channels", &a.shape()[1..], &b.shape()[1..]).map_err(|e| match e {
        Error::ShapeMismatch { axis, expected, actual, op } => Error::ShapeMismatch {
            op,
            axis: axis + 1,
            expected,
            actual,
        },
        other => other,
    })?;
    let (c1, c2) = (a.shape()[0], b.shape()[0]);
    let (h, w) = (a.shape()[1], a.shape()[2]);
    let mut data = Vec::with_capacity((c1 + c2) * h * w);
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::new(vec![c1 + c2, h, w], data)
}

/// Channels `[from, to)` of a CHW tensor.
pub fn slice_channels<T: Scalar>(x: &Tensor<T>, from: usize, to: usize) -> Result<Tensor<T>> {
    expect_rank("slice_channels", x, 3)?;
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if from > to || to > c {
        return Err(Error::invalid(
            "slice_channels",
            format!("range {}..{} out of {} channels", from, to, c),
        ));
    }
    let data = x.data()[from * h * w..to * h * w].to_vec();
    Tensor::new(vec![to - from, h, w], data)
}

/// Concatenate two matrices along columns: [n,c1] + [n,c2] -> [n,c1+c2].
pub fn concat_cols<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank("concat_cols", a, 2)?;
    expect_rank("concat_cols", b, 2)?;
    if a.shape()[0] != b.shape()[0] {
        return Err(Error::ShapeMismatch {
            op: "concat_cols",
            axis: 0,
            expected: a.shape()[0],
            actual: b.shape()[0],
        });
    }
    let (n, c1, c2) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut data = Vec::with_capacity(n * (c1 + c2));
    for i in 0..n {
        data.extend_from_slice(&a.data()[i * c1..(i + 1) * c1]);
        data.extend_from_slice(&b.data()[i * c2..(i + 1) * c2]);
    }
    Tensor::new(vec![n, c1 + c2], data)
}

pub fn split_cols<T: Scalar>(x: &Tensor<T>, c1: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    expect_rank("split_cols", x, 2)?;
    let (n, c) = (x.shape()[0], x.shape()[1]);
    if c1 > c {
        return Err(Error::invalid("split_cols", format!("c1 {} > {}", c1, c)));
    }
    let mut a = Vec::with_capacity(n * c1);
    let mut b = Vec::with_capacity(n * (c - c1));
    for i in 0..n {
        a.extend_from_slice(&x.data()[i * c..i * c + c1]);
        b.extend_from_slice(&x.data()[i * c + c1..(i + 1) * c]);
    }
    Ok((Tensor::new(vec![n, c1], a)?, Tensor::new(vec![n, c - c1], b)?))
}

// ---------------------------------------------------------------------------
// Matrix ops
// ---------------------------------------------------------------------------

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank("matmul", a, 2)?;
    expect_rank("matmul", b, 2)?;
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (kb, n) = (b.shape()[0], b.shape()[1]);
    if k != kb {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            axis: 1,
            expected: k,
            actual: kb,
        });
    }
    let ad = a.data();
    let bd = b.data();
    let data: Vec<T> = par_map(m, |i| {
        let arow = &ad[i * k..(i + 1) * k];
        let mut row = vec![T::zero(); n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &bd[p * n..(p + 1) * n];
            for j in 0..n {
                row[j] = row[j] + av * brow[j];
            }
        }
        row
    })
    .into_iter()
    .flatten()
    .collect();
    Tensor::new(vec![m, n], data)
}

pub fn transpose2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank("transpose2", x, 2)?;
    let (m, n) = (x.shape()[0], x.shape()[1]);
    let mut out = Tensor::zeros(&[n, m]);
    for i in 0..m {
        for j in 0..n {
            out.set2(j, i, x.at2(i, j));
        }
    }
    Ok(out)
}

/// Row-wise softmax with max-subtraction for stability.
pub fn row_softmax_forward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank("row_softmax", x, 2)?;
    let (m, n) = (x.shape()[0], x.shape()[1]);
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        let row = &x.data()[i * n..(i + 1) * n];
        let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut sum = T::zero();
        for j in 0..n {
            let e = (row[j] - mx).exp();
            out.set2(i, j, e);
            sum = sum + e;
        }
        for j in 0..n {
            let v = out.at2(i, j) / sum;
            out.set2(i, j, v);
        }
    }
    Ok(out)
}

pub fn row_softmax_backward<T: Scalar>(beta: &Tensor<T>, gout: &Tensor<T>) -> Tensor<T> {
    let (m, n) = (beta.shape()[0], beta.shape()[1]);
    let mut dx = Tensor::zeros(beta.shape());
    for i in 0..m {
        let b = &beta.data()[i * n..(i + 1) * n];
        let g = &gout.data()[i * n..(i + 1) * n];
        let dot: T = b.iter().zip(g.iter()).map(|(&bv, &gv)| bv * gv).sum();
        for j in 0..n {
            dx.set2(i, j, b[j] * (g[j] - dot));
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Channel attention primitives
// ---------------------------------------------------------------------------

/// Global average pool: CHW -> per-channel means, shape [C].
pub fn mean_channels_forward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank("cam_pool", x, 3)?;
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let m = h * w;
    if m == 0 {
        return Err(Error::invalid("cam_pool", "empty spatial extent"));
    }
    let mf = T::from_f64(m as f64);
    let data = (0..c)
        .map(|ch| x.data()[ch * m..(ch + 1) * m].iter().copied().sum::<T>() / mf)
        .collect();
    Tensor::new(vec![c], data)
}

pub fn mean_channels_backward<T: Scalar>(in_shape: &[usize], gout: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let m = h * w;
    let mf = T::from_f64(m as f64);
    let mut dx = Tensor::zeros(in_shape);
    for ch in 0..c {
        let g = gout.data()[ch] / mf;
        for i in 0..m {
            dx.data_mut()[ch * m + i] = g;
        }
    }
    dx
}

/// Per-channel broadcast multiply: out[c] = x[c] * w[c].
pub fn channel_scale_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank("channel_scale", x, 3)?;
    let c = x.shape()[0];
    if w.numel() != c {
        return Err(Error::ShapeMismatch {
            op: "channel_scale",
            axis: 0,
            expected: c,
            actual: w.numel(),
        });
    }
    let m = x.shape()[1] * x.shape()[2];
    let mut out = Tensor::zeros(x.shape());
    for ch in 0..c {
        let s = w.data()[ch];
        for i in 0..m {
            out.data_mut()[ch * m + i] = x.data()[ch * m + i] * s;
        }
    }
    Ok(out)
}

pub fn channel_scale_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let c = x.shape()[0];
    let m = x.shape()[1] * x.shape()[2];
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(&[c]);
    for ch in 0..c {
        let s = w.data()[ch];
        let mut acc = T::zero();
        for i in 0..m {
            let g = gout.data()[ch * m + i];
            dx.data_mut()[ch * m + i] = g * s;
            acc = acc + g * x.data()[ch * m + i];
        }
        dw.data_mut()[ch] = acc;
    }
    (dx, dw)
}

// ---------------------------------------------------------------------------
// Orthogonal subspace projector P = V (V^T V + eps I)^-1 V^T
// ---------------------------------------------------------------------------

/// Forward pass of the projector. Returns `(P, M)` with `M = (V^T V + eps I)^-1 V^T`
/// saved for the backward pass. The Tikhonov term is scaled by
/// `eps_reg * trace(V^T V) / K` so rank-deficient bases stay solvable.
pub fn ortho_project_forward<T: Scalar>(
    v: &Tensor<T>,
    eps_reg: T,
) -> Result<(Tensor<T>, Tensor<T>)> {
    expect_rank("orth_project", v, 2)?;
    v.check_finite("orth_project")?;
    let (n, k) = (v.shape()[0], v.shape()[1]);
    // gram = V^T V, k x k
    let mut gram = vec![T::zero(); k * k];
    for row in 0..n {
        let r = &v.data()[row * k..(row + 1) * k];
        for i in 0..k {
            for j in i..k {
                gram[i * k + j] = gram[i * k + j] + r[i] * r[j];
            }
        }
    }
    for i in 0..k {
        for j in 0..i {
            gram[i * k + j] = gram[j * k + i];
        }
    }
    let trace: T = (0..k).map(|i| gram[i * k + i]).sum();
    let eps = eps_reg * trace / T::from_f64(k as f64) + T::from_f64(1e-300);
    for i in 0..k {
        gram[i * k + i] = gram[i * k + i] + eps;
    }
    let l = crate::linalg::cholesky(&gram, k, "orth_project")?;
    // M = A^-1 V^T : solve per column of V^T (i.e. per row of V)
    let md: Vec<T> = par_map(n, |row| {
        let mut col: Vec<T> = v.data()[row * k..(row + 1) * k].to_vec();
        crate::linalg::chol_solve(&l, k, &mut col);
        col
    })
    .into_iter()
    .flatten()
    .collect();
    // md is laid out as n rows of k: M^T actually. M[k][n] with M[p][row] = md[row*k + p].
    let mut m = Tensor::zeros(&[k, n]);
    for row in 0..n {
        for p in 0..k {
            m.set2(p, row, md[row * k + p]);
        }
    }
    let p = matmul(v, &m)?; // [N,K] x [K,N] -> [N,N]
    Ok((p, m))
}

/// Adjoint of the projector map: dV = (I - P)(G + G^T) M^T, plus the small
/// correction from the V-dependent Tikhonov term eps = eps_reg tr(V^T V)/K.
pub fn ortho_project_backward<T: Scalar>(
    v: &Tensor<T>,
    p: &Tensor<T>,
    m: &Tensor<T>,
    gout: &Tensor<T>,
    eps_reg: T,
) -> Result<Tensor<T>> {
    let gt = transpose2(gout)?;
    let sym = gout.add(&gt)?;
    // associate as (G + G^T) M^T first: keeps every product O(N^2 K)
    // instead of the O(N^3) of forming (I - P)(G + G^T)
    let sym_mt = matmul(&sym, &transpose2(m)?)?;
    let dv = sym_mt.sub(&matmul(p, &sym_mt)?)?;
    // d eps / dV = 2 (eps_reg / K) V; its contribution is
    // -tr(M G^T M^T) * (d eps / dV).
    let k = v.shape()[1];
    let mgt = matmul(m, &gt)?;
    let trace: T = mgt
        .data()
        .iter()
        .zip(m.data().iter())
        .map(|(&a, &b)| a * b)
        .sum();
    let coeff = T::from_f64(2.0) * eps_reg / T::from_f64(k as f64) * trace;
    dv.sub(&v.scale(coeff))
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// Mean squared error over all elements.
pub fn mse_forward<T: Scalar>(rec: &Tensor<T>, gt: &Tensor<T>) -> Result<T> {
    same_shape("mse_loss", rec.shape(), gt.shape())?;
    let n = T::from_f64(rec.numel() as f64);
    let sum: T = rec
        .data()
        .iter()
        .zip(gt.data().iter())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum();
    Ok(sum / n)
}

pub fn mse_backward<T: Scalar>(rec: &Tensor<T>, gt: &Tensor<T>, gscale: T) -> (Tensor<T>, Tensor<T>) {
    let n = T::from_f64(rec.numel() as f64);
    let two = T::from_f64(2.0);
    let drec = Tensor::from_fn(rec.shape(), |i| {
        gscale * two * (rec.data()[i] - gt.data()[i]) / n
    });
    let dgt = drec.scale(-T::one());
    (drec, dgt)
}
