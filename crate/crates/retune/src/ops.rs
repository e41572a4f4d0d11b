//! Tensor kernels: forward and backward math for every graph operator.
//!
//! Summation order is part of each kernel's contract. Dot products run left
//! to right; convolution accumulates one channel partial sum at a time, in
//! channel order. The fractional-stride and upsample-plus-dilation routes
//! share these helpers, which is what makes their outputs bit-identical.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Left-to-right dot product.
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::zero();
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

fn dot_strided<T: Scalar>(k: &[T], x: &[T], start: usize, step: usize) -> T {
    let mut acc = T::zero();
    for (j, &kj) in k.iter().enumerate() {
        acc += kj * x[start + step * j];
    }
    acc
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// Output length of a valid (unpadded) 1D convolution.
pub fn conv1d_out_len(len: usize, kernel: usize, stride: usize, dilation: usize) -> Result<usize> {
    let field = dilation * (kernel - 1) + 1;
    if len < field {
        return Err(Error::InputTooShort {
            needed: field,
            got: len,
        });
    }
    Ok((len - field) / stride + 1)
}

/// Output length of a fractional-stride convolution with unit-spaced taps:
/// start(t) = floor(num*t/den), valid while start(t) + kernel - 1 < len.
pub fn fractional_out_len(len: usize, kernel: usize, num: usize, den: usize) -> Result<usize> {
    if den == 0 || num == 0 {
        return Err(Error::InvalidArgument("fractional stride must have num, den > 0".into()));
    }
    if len < kernel {
        return Err(Error::InputTooShort {
            needed: kernel,
            got: len,
        });
    }
    // largest t with floor(num*t/den) <= len - kernel
    let m = len - kernel;
    Ok((den * (m + 1) - 1) / num + 1)
}

/// Valid 1D convolution. x: [Cin, L], k: [Cout, Cin, K] -> [Cout, L_out].
///
/// out[co][t] = sum_ci sum_j k[co][ci][j] * x[ci][stride*t + dilation*j]
pub fn conv1d_fwd<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    stride: usize,
    dilation: usize,
) -> Result<Tensor<T>> {
    let (cin, len) = dims2(x, "conv1d input")?;
    let (cout, kcin, ksz) = dims3(k, "conv1d kernel")?;
    if kcin != cin {
        return Err(Error::Shape(format!(
            "conv1d channel mismatch: input has {cin}, kernel expects {kcin}"
        )));
    }
    if stride == 0 || dilation == 0 {
        return Err(Error::InvalidArgument("stride and dilation must be positive".into()));
    }
    let out_len = conv1d_out_len(len, ksz, stride, dilation)?;
    let mut out = vec![T::zero(); cout * out_len];
    for co in 0..cout {
        let orow = &mut out[co * out_len..(co + 1) * out_len];
        for ci in 0..cin {
            let krow = &k.data()[(co * cin + ci) * ksz..(co * cin + ci + 1) * ksz];
            let xrow = &x.data()[ci * len..(ci + 1) * len];
            if dilation == 1 {
                for (t, o) in orow.iter_mut().enumerate() {
                    *o += dot(krow, &xrow[stride * t..stride * t + ksz]);
                }
            } else {
                for (t, o) in orow.iter_mut().enumerate() {
                    *o += dot_strided(krow, xrow, stride * t, dilation);
                }
            }
        }
    }
    Tensor::from_vec(vec![cout, out_len], out)
}

pub fn conv1d_bwd<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    stride: usize,
    dilation: usize,
    g: &Tensor<T>,
    dx: &mut Tensor<T>,
    dk: &mut Tensor<T>,
) {
    let (cin, len) = (x.shape()[0], x.shape()[1]);
    let (cout, _, ksz) = (k.shape()[0], k.shape()[1], k.shape()[2]);
    let out_len = g.shape()[1];
    let dxd = dx.data_mut();
    for co in 0..cout {
        let grow = &g.data()[co * out_len..(co + 1) * out_len];
        for ci in 0..cin {
            let krow = &k.data()[(co * cin + ci) * ksz..(co * cin + ci + 1) * ksz];
            for t in 0..out_len {
                let gv = grow[t];
                let base = ci * len + stride * t;
                for j in 0..ksz {
                    dxd[base + dilation * j] += gv * krow[j];
                }
            }
        }
    }
    let dkd = dk.data_mut();
    for co in 0..cout {
        let grow = &g.data()[co * out_len..(co + 1) * out_len];
        for ci in 0..cin {
            let xrow = &x.data()[ci * len..(ci + 1) * len];
            for j in 0..ksz {
                let mut acc = T::zero();
                for t in 0..out_len {
                    acc += grow[t] * xrow[stride * t + dilation * j];
                }
                dkd[(co * cin + ci) * ksz + j] += acc;
            }
        }
    }
}

/// Fractional-stride convolution with unit-spaced taps.
/// x: [Cin, L], k: [Cout, Cin, K] -> [Cout, L_out], start(t) = floor(num*t/den).
pub fn fractional_conv_fwd<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    num: usize,
    den: usize,
) -> Result<Tensor<T>> {
    let (cin, len) = dims2(x, "fractional_conv input")?;
    let (cout, kcin, ksz) = dims3(k, "fractional_conv kernel")?;
    if kcin != cin {
        return Err(Error::Shape(format!(
            "fractional_conv channel mismatch: input has {cin}, kernel expects {kcin}"
        )));
    }
    let out_len = fractional_out_len(len, ksz, num, den)?;
    let mut out = vec![T::zero(); cout * out_len];
    for co in 0..cout {
        let orow = &mut out[co * out_len..(co + 1) * out_len];
        for ci in 0..cin {
            let krow = &k.data()[(co * cin + ci) * ksz..(co * cin + ci + 1) * ksz];
            let xrow = &x.data()[ci * len..(ci + 1) * len];
            for (t, o) in orow.iter_mut().enumerate() {
                let start = num * t / den;
                *o += dot(krow, &xrow[start..start + ksz]);
            }
        }
    }
    Tensor::from_vec(vec![cout, out_len], out)
}

pub fn fractional_conv_bwd<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    num: usize,
    den: usize,
    g: &Tensor<T>,
    dx: &mut Tensor<T>,
    dk: &mut Tensor<T>,
) {
    let (cin, len) = (x.shape()[0], x.shape()[1]);
    let (cout, _, ksz) = (k.shape()[0], k.shape()[1], k.shape()[2]);
    let out_len = g.shape()[1];
    let dxd = dx.data_mut();
    for co in 0..cout {
        let grow = &g.data()[co * out_len..(co + 1) * out_len];
        for ci in 0..cin {
            let krow = &k.data()[(co * cin + ci) * ksz..(co * cin + ci + 1) * ksz];
            for t in 0..out_len {
                let gv = grow[t];
                let base = ci * len + num * t / den;
                for j in 0..ksz {
                    dxd[base + j] += gv * krow[j];
                }
            }
        }
    }
    let dkd = dk.data_mut();
    for co in 0..cout {
        let grow = &g.data()[co * out_len..(co + 1) * out_len];
        for ci in 0..cin {
            let xrow = &x.data()[ci * len..(ci + 1) * len];
            for j in 0..ksz {
                let mut acc = T::zero();
                for t in 0..out_len {
                    acc += grow[t] * xrow[num * t / den + j];
                }
                dkd[(co * cin + ci) * ksz + j] += acc;
            }
        }
    }
}

/// Grouped 1D convolution along the time axis with same-padding, used by the
/// positional encoder. x: [T, d], k: [d, d/groups, K] (K odd), b: [d] -> [T, d].
pub fn grouped_time_conv_fwd<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    b: &Tensor<T>,
    groups: usize,
) -> Result<Tensor<T>> {
    let (tlen, d) = dims2(x, "grouped conv input")?;
    let (kd, gsize, ksz) = dims3(k, "grouped conv kernel")?;
    if kd != d || groups == 0 || d % groups != 0 || gsize != d / groups {
        return Err(Error::Shape(format!(
            "grouped conv kernel {:?} does not match width {d} with {groups} groups",
            k.shape()
        )));
    }
    if ksz % 2 != 1 {
        return Err(Error::InvalidArgument("grouped time conv requires an odd kernel".into()));
    }
    let half = ksz / 2;
    let mut out = vec![T::zero(); tlen * d];
    for t in 0..tlen {
        for c in 0..d {
            let gstart = (c / gsize) * gsize;
            let mut acc = b.data()[c];
            for i in 0..gsize {
                let krow = &k.data()[(c * gsize + i) * ksz..(c * gsize + i + 1) * ksz];
                for (j, &kv) in krow.iter().enumerate() {
                    let tt = t as isize + j as isize - half as isize;
                    if tt >= 0 && (tt as usize) < tlen {
                        acc += kv * x.data()[tt as usize * d + gstart + i];
                    }
                }
            }
            out[t * d + c] = acc;
        }
    }
    Tensor::from_vec(vec![tlen, d], out)
}

pub fn grouped_time_conv_bwd<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    groups: usize,
    g: &Tensor<T>,
    dx: &mut Tensor<T>,
    dk: &mut Tensor<T>,
    db: &mut Tensor<T>,
) {
    let (tlen, d) = (x.shape()[0], x.shape()[1]);
    let ksz = k.shape()[2];
    let gsize = d / groups;
    let half = ksz / 2;
    for t in 0..tlen {
        for c in 0..d {
            let gstart = (c / gsize) * gsize;
            let gv = g.data()[t * d + c];
            db.data_mut()[c] += gv;
            for i in 0..gsize {
                for j in 0..ksz {
                    let tt = t as isize + j as isize - half as isize;
                    if tt >= 0 && (tt as usize) < tlen {
                        let xi = tt as usize * d + gstart + i;
                        dk.data_mut()[(c * gsize + i) * ksz + j] += gv * x.data()[xi];
                        dx.data_mut()[xi] += gv * k.data()[(c * gsize + i) * ksz + j];
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

/// x: [N, din], w: [dout, din], b: [dout] -> [N, dout].
pub fn linear_fwd<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, din) = dims2(x, "linear input")?;
    let (dout, wdin) = dims2(w, "linear weight")?;
    if wdin != din || b.shape() != [dout] {
        return Err(Error::Shape(format!(
            "linear shapes do not chain: x {:?}, w {:?}, b {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    let mut out = vec![T::zero(); n * dout];
    for i in 0..n {
        let xrow = x.row(i);
        for o in 0..dout {
            out[i * dout + o] = b.data()[o] + dot(w.row(o), xrow);
        }
    }
    Tensor::from_vec(vec![n, dout], out)
}

pub fn linear_bwd<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
    dx: &mut Tensor<T>,
    dw: &mut Tensor<T>,
    db: &mut Tensor<T>,
) {
    let (n, din) = (x.shape()[0], x.shape()[1]);
    let dout = w.shape()[0];
    for i in 0..n {
        let grow = g.row(i);
        let dxrow = &mut dx.data_mut()[i * din..(i + 1) * din];
        for o in 0..dout {
            let gv = grow[o];
            let wrow = w.row(o);
            for c in 0..din {
                dxrow[c] += gv * wrow[c];
            }
        }
    }
    for i in 0..n {
        let grow = g.row(i);
        let xrow = x.row(i);
        for o in 0..dout {
            let gv = grow[o];
            let dwrow = &mut dw.data_mut()[o * din..(o + 1) * din];
            for c in 0..din {
                dwrow[c] += gv * xrow[c];
            }
            db.data_mut()[o] += gv;
        }
    }
}

/// Batched a[B,m,k] . b[B,n,k]^T -> [B,m,n].
pub fn bmm_nt_fwd<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (ba, m, kk) = dims3(a, "bmm_nt lhs")?;
    let (bb, n, kb) = dims3(b, "bmm_nt rhs")?;
    if ba != bb || kk != kb {
        return Err(Error::Shape(format!(
            "bmm_nt shapes do not chain: {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![T::zero(); ba * m * n];
    for bi in 0..ba {
        for i in 0..m {
            let arow = &a.data()[(bi * m + i) * kk..(bi * m + i + 1) * kk];
            for j in 0..n {
                let brow = &b.data()[(bi * n + j) * kk..(bi * n + j + 1) * kk];
                out[(bi * m + i) * n + j] = dot(arow, brow);
            }
        }
    }
    Tensor::from_vec(vec![ba, m, n], out)
}

pub fn bmm_nt_bwd<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &Tensor<T>,
    da: &mut Tensor<T>,
    db: &mut Tensor<T>,
) {
    let (bsz, m, kk) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let n = b.shape()[1];
    for bi in 0..bsz {
        for i in 0..m {
            let grow = &g.data()[(bi * m + i) * n..(bi * m + i + 1) * n];
            let darow = &mut da.data_mut()[(bi * m + i) * kk..(bi * m + i + 1) * kk];
            for j in 0..n {
                let gv = grow[j];
                let brow = &b.data()[(bi * n + j) * kk..(bi * n + j + 1) * kk];
                for c in 0..kk {
                    darow[c] += gv * brow[c];
                }
            }
        }
        for i in 0..m {
            let grow = &g.data()[(bi * m + i) * n..(bi * m + i + 1) * n];
            let arow = &a.data()[(bi * m + i) * kk..(bi * m + i + 1) * kk];
            for j in 0..n {
                let gv = grow[j];
                let dbrow = &mut db.data_mut()[(bi * n + j) * kk..(bi * n + j + 1) * kk];
                for c in 0..kk {
                    dbrow[c] += gv * arow[c];
                }
            }
        }
    }
}

/// Batched a[B,m,k] . b[B,k,n] -> [B,m,n].
pub fn bmm_nn_fwd<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (ba, m, kk) = dims3(a, "bmm_nn lhs")?;
    let (bb, kb, n) = dims3(b, "bmm_nn rhs")?;
    if ba != bb || kk != kb {
        return Err(Error::Shape(format!(
            "bmm_nn shapes do not chain: {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![T::zero(); ba * m * n];
    for bi in 0..ba {
        for i in 0..m {
            let orow_base = (bi * m + i) * n;
            for c in 0..kk {
                let av = a.data()[(bi * m + i) * kk + c];
                let brow = &b.data()[(bi * kk + c) * n..(bi * kk + c + 1) * n];
                for j in 0..n {
                    out[orow_base + j] += av * brow[j];
                }
            }
        }
    }
    Tensor::from_vec(vec![ba, m, n], out)
}

pub fn bmm_nn_bwd<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &Tensor<T>,
    da: &mut Tensor<T>,
    db: &mut Tensor<T>,
) {
    let (bsz, m, kk) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let n = b.shape()[2];
    for bi in 0..bsz {
        // da = g . b^T
        for i in 0..m {
            let grow = &g.data()[(bi * m + i) * n..(bi * m + i + 1) * n];
            let darow = &mut da.data_mut()[(bi * m + i) * kk..(bi * m + i + 1) * kk];
            for c in 0..kk {
                let brow = &b.data()[(bi * kk + c) * n..(bi * kk + c + 1) * n];
                darow[c] += dot(grow, brow);
            }
        }
        // db = a^T . g
        for i in 0..m {
            let grow = &g.data()[(bi * m + i) * n..(bi * m + i + 1) * n];
            for c in 0..kk {
                let av = a.data()[(bi * m + i) * kk + c];
                let dbrow = &mut db.data_mut()[(bi * kk + c) * n..(bi * kk + c + 1) * n];
                for j in 0..n {
                    dbrow[j] += av * grow[j];
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Normalization and activations
// ---------------------------------------------------------------------------

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Row-wise layer norm. x: [N, d], gamma/beta: [d].
pub fn layer_norm_fwd<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, d) = dims2(x, "layer_norm input")?;
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::Shape("layer_norm gamma/beta must match width".into()));
    }
    let eps = T::from_f64c(LAYER_NORM_EPS);
    let dn = T::from_usize(d).unwrap();
    let mut out = vec![T::zero(); n * d];
    for i in 0..n {
        let row = x.row(i);
        let mut mu = T::zero();
        for &v in row {
            mu += v;
        }
        mu = mu / dn;
        let mut var = T::zero();
        for &v in row {
            let c = v - mu;
            var += c * c;
        }
        var = var / dn;
        let inv = (var + eps).sqrt().recip();
        for c in 0..d {
            let xhat = (row[c] - mu) * inv;
            out[i * d + c] = xhat * gamma.data()[c] + beta.data()[c];
        }
    }
    Tensor::from_vec(vec![n, d], out)
}

pub fn layer_norm_bwd<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    g: &Tensor<T>,
    dx: &mut Tensor<T>,
    dgamma: &mut Tensor<T>,
    dbeta: &mut Tensor<T>,
) {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let eps = T::from_f64c(LAYER_NORM_EPS);
    let dn = T::from_usize(d).unwrap();
    for i in 0..n {
        let row = x.row(i);
        let grow = g.row(i);
        let mut mu = T::zero();
        for &v in row {
            mu += v;
        }
        mu = mu / dn;
        let mut var = T::zero();
        for &v in row {
            let c = v - mu;
            var += c * c;
        }
        var = var / dn;
        let inv = (var + eps).sqrt().recip();
        let mut m1 = T::zero();
        let mut m2 = T::zero();
        for c in 0..d {
            let xhat = (row[c] - mu) * inv;
            let dxhat = grow[c] * gamma.data()[c];
            m1 += dxhat;
            m2 += dxhat * xhat;
        }
        m1 = m1 / dn;
        m2 = m2 / dn;
        for c in 0..d {
            let xhat = (row[c] - mu) * inv;
            let dxhat = grow[c] * gamma.data()[c];
            dx.data_mut()[i * d + c] += inv * (dxhat - m1 - xhat * m2);
            dgamma.data_mut()[c] += grow[c] * xhat;
            dbeta.data_mut()[c] += grow[c];
        }
    }
}

/// GELU, tanh form: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
pub fn gelu<T: Scalar>(v: T) -> T {
    let c = T::from_f64c(0.7978845608028654);
    let a = T::from_f64c(0.044715);
    let half = T::from_f64c(0.5);
    let u = c * (v + a * v * v * v);
    half * v * (T::one() + u.tanh())
}

pub fn gelu_grad<T: Scalar>(v: T) -> T {
    let c = T::from_f64c(0.7978845608028654);
    let a = T::from_f64c(0.044715);
    let half = T::from_f64c(0.5);
    let three = T::from_f64c(3.0);
    let u = c * (v + a * v * v * v);
    let th = u.tanh();
    let sech2 = T::one() - th * th;
    half * (T::one() + th) + half * v * sech2 * c * (T::one() + three * a * v * v)
}

// ---------------------------------------------------------------------------
// Softmax family
// ---------------------------------------------------------------------------

/// Softmax over the last axis; x viewed as [N, V].
pub fn softmax_last_fwd<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let v = last_axis(x)?;
    let n = x.numel() / v;
    let mut out = vec![T::zero(); x.numel()];
    for i in 0..n {
        let row = &x.data()[i * v..(i + 1) * v];
        softmax_into(row, &mut out[i * v..(i + 1) * v]);
    }
    Tensor::from_vec(x.shape().to_vec(), out)
}

pub(crate) fn softmax_into<T: Scalar>(row: &[T], out: &mut [T]) {
    let mut mx = row[0];
    for &x in row {
        if x > mx {
            mx = x;
        }
    }
    let mut sum = T::zero();
    for (o, &x) in out.iter_mut().zip(row.iter()) {
        let e = (x - mx).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

/// dz = y * (g - <g, y>) per row; `y` is the forward output.
pub fn softmax_last_bwd<T: Scalar>(y: &Tensor<T>, g: &Tensor<T>, dx: &mut Tensor<T>) {
    let v = *y.shape().last().unwrap();
    let n = y.numel() / v;
    for i in 0..n {
        let yr = &y.data()[i * v..(i + 1) * v];
        let gr = &g.data()[i * v..(i + 1) * v];
        let inner = dot(gr, yr);
        let dr = &mut dx.data_mut()[i * v..(i + 1) * v];
        for c in 0..v {
            dr[c] += yr[c] * (gr[c] - inner);
        }
    }
}

/// Log-softmax over the last axis.
pub fn log_softmax_last_fwd<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let v = last_axis(x)?;
    let n = x.numel() / v;
    let mut out = vec![T::zero(); x.numel()];
    for i in 0..n {
        let row = &x.data()[i * v..(i + 1) * v];
        let lse = log_sum_exp(row);
        for c in 0..v {
            out[i * v + c] = row[c] - lse;
        }
    }
    Tensor::from_vec(x.shape().to_vec(), out)
}

pub fn log_softmax_last_bwd<T: Scalar>(y: &Tensor<T>, g: &Tensor<T>, dx: &mut Tensor<T>) {
    let v = *y.shape().last().unwrap();
    let n = y.numel() / v;
    for i in 0..n {
        let yr = &y.data()[i * v..(i + 1) * v];
        let gr = &g.data()[i * v..(i + 1) * v];
        let mut gsum = T::zero();
        for &gv in gr {
            gsum += gv;
        }
        let dr = &mut dx.data_mut()[i * v..(i + 1) * v];
        for c in 0..v {
            dr[c] += gr[c] - yr[c].exp() * gsum;
        }
    }
}

pub fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let mut mx = row[0];
    for &x in row {
        if x > mx {
            mx = x;
        }
    }
    let mut sum = T::zero();
    for &x in row {
        sum += (x - mx).exp();
    }
    mx + sum.ln()
}

/// Mean cross entropy. logits: [N, C], targets: class index per row.
pub fn cross_entropy_fwd<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> Result<T> {
    let (n, c) = dims2(logits, "cross_entropy logits")?;
    if targets.len() != n {
        return Err(Error::InvalidArgument(format!(
            "cross_entropy: {n} rows but {} targets",
            targets.len()
        )));
    }
    let mut total = T::zero();
    for i in 0..n {
        let label = targets[i];
        if label >= c {
            return Err(Error::InvalidArgument(format!(
                "cross_entropy: target {label} out of range for {c} classes"
            )));
        }
        let row = logits.row(i);
        total += log_sum_exp(row) - row[label];
    }
    Ok(total / T::from_usize(n).unwrap())
}

pub fn cross_entropy_bwd<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[usize],
    go: T,
    dx: &mut Tensor<T>,
) {
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    let scale = go / T::from_usize(n).unwrap();
    let mut probs = vec![T::zero(); c];
    for i in 0..n {
        softmax_into(logits.row(i), &mut probs);
        let dr = &mut dx.data_mut()[i * c..(i + 1) * c];
        for j in 0..c {
            let ind = if j == targets[i] { T::one() } else { T::zero() };
            dr[j] += scale * (probs[j] - ind);
        }
    }
}

// ---------------------------------------------------------------------------
// Similarity and entropy
// ---------------------------------------------------------------------------

/// Row-wise cosine similarity between a and b, both [N, d] -> [N].
///
/// Computed as dot(a,b) / (|a| * |b|) with no epsilon, so scaling either
/// side by a power of two leaves the result bit-identical.
pub fn cosine_rows_fwd<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d) = dims2(a, "cosine lhs")?;
    if b.shape() != [n, d] {
        return Err(Error::Shape(format!(
            "cosine shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![T::zero(); n];
    for i in 0..n {
        let ar = a.row(i);
        let br = b.row(i);
        let na = dot(ar, ar).sqrt();
        let nb = dot(br, br).sqrt();
        out[i] = dot(ar, br) / (na * nb);
    }
    Tensor::from_vec(vec![n], out)
}

pub fn cosine_rows_bwd<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &Tensor<T>,
    da: &mut Tensor<T>,
    db: &mut Tensor<T>,
) {
    let (n, d) = (a.shape()[0], a.shape()[1]);
    for i in 0..n {
        let ar = a.row(i);
        let br = b.row(i);
        let na = dot(ar, ar).sqrt();
        let nb = dot(br, br).sqrt();
        let cos = dot(ar, br) / (na * nb);
        let gv = g.data()[i];
        let dar = &mut da.data_mut()[i * d..(i + 1) * d];
        for c in 0..d {
            dar[c] += gv * (br[c] / (na * nb) - cos * ar[c] / (na * na));
        }
        let dbr = &mut db.data_mut()[i * d..(i + 1) * d];
        for c in 0..d {
            dbr[c] += gv * (ar[c] / (na * nb) - cos * br[c] / (nb * nb));
        }
    }
}

/// exp(entropy) per row of a [G, V] distribution table; 0 log 0 = 0.
///
/// Evaluated as V·exp(−Σ_v p·ln(p·V)), the divergence-from-uniform form.
/// On the simplex this equals exp(H(p)), but p·V is exactly 1 for a uniform
/// row with dyadic V, so the uniform case returns V with no rounding at all.
pub fn exp_entropy_rows_fwd<T: Scalar>(p: &Tensor<T>) -> Result<Tensor<T>> {
    let (gn, v) = dims2(p, "exp_entropy input")?;
    let vn = T::from_usize(v).unwrap();
    let mut out = vec![T::zero(); gn];
    for i in 0..gn {
        let mut kl = T::zero();
        for c in 0..v {
            let pv = p.data()[i * v + c];
            if pv > T::zero() {
                kl += pv * (pv * vn).ln();
            }
        }
        out[i] = vn * (-kl).exp();
    }
    Tensor::from_vec(vec![gn], out)
}

pub fn exp_entropy_rows_bwd<T: Scalar>(p: &Tensor<T>, g: &Tensor<T>, dp: &mut Tensor<T>) {
    let (gn, v) = (p.shape()[0], p.shape()[1]);
    let vn = T::from_usize(v).unwrap();
    for i in 0..gn {
        let mut kl = T::zero();
        for c in 0..v {
            let pv = p.data()[i * v + c];
            if pv > T::zero() {
                kl += pv * (pv * vn).ln();
            }
        }
        let eh = vn * (-kl).exp();
        let gv = g.data()[i];
        for c in 0..v {
            let pv = p.data()[i * v + c];
            if pv > T::zero() {
                dp.data_mut()[i * v + c] -= gv * eh * ((pv * vn).ln() + T::one());
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Data movement
// ---------------------------------------------------------------------------

pub fn transpose2d<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (a, b) = dims2(x, "transpose input")?;
    let mut out = vec![T::zero(); a * b];
    for i in 0..a {
        for j in 0..b {
            out[j * a + i] = x.data()[i * b + j];
        }
    }
    Tensor::from_vec(vec![b, a], out)
}

/// [T, h*dk] -> [h, T, dk].
pub fn split_heads<T: Scalar>(x: &Tensor<T>, heads: usize) -> Result<Tensor<T>> {
    let (tlen, d) = dims2(x, "split_heads input")?;
    if heads == 0 || d % heads != 0 {
        return Err(Error::Shape(format!("width {d} not divisible by {heads} heads")));
    }
    let dk = d / heads;
    let mut out = vec![T::zero(); tlen * d];
    for t in 0..tlen {
        for h in 0..heads {
            for i in 0..dk {
                out[(h * tlen + t) * dk + i] = x.data()[t * d + h * dk + i];
            }
        }
    }
    Tensor::from_vec(vec![heads, tlen, dk], out)
}

/// [h, T, dk] -> [T, h*dk].
pub fn merge_heads<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (heads, tlen, dk) = dims3(x, "merge_heads input")?;
    let d = heads * dk;
    let mut out = vec![T::zero(); tlen * d];
    for h in 0..heads {
        for t in 0..tlen {
            for i in 0..dk {
                out[t * d + h * dk + i] = x.data()[(h * tlen + t) * dk + i];
            }
        }
    }
    Tensor::from_vec(vec![tlen, d], out)
}

/// Select rows of x [N, d] by index; indices may repeat.
pub fn gather_rows_fwd<T: Scalar>(x: &Tensor<T>, idx: &[usize]) -> Result<Tensor<T>> {
    let (n, d) = dims2(x, "gather input")?;
    let mut out = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        if i >= n {
            return Err(Error::InvalidArgument(format!(
                "gather index {i} out of range for {n} rows"
            )));
        }
        out.extend_from_slice(x.row(i));
    }
    Tensor::from_vec(vec![idx.len(), d], out)
}

pub fn gather_rows_bwd<T: Scalar>(idx: &[usize], d: usize, g: &Tensor<T>, dx: &mut Tensor<T>) {
    for (m, &i) in idx.iter().enumerate() {
        let grow = &g.data()[m * d..(m + 1) * d];
        let drow = &mut dx.data_mut()[i * d..(i + 1) * d];
        for c in 0..d {
            drow[c] += grow[c];
        }
    }
}

/// Replace the given rows of x [T, d] with vector v [d].
pub fn substitute_rows_fwd<T: Scalar>(
    x: &Tensor<T>,
    idx: &[usize],
    v: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, d) = dims2(x, "substitute input")?;
    if v.shape() != [d] {
        return Err(Error::Shape("substitute vector must match row width".into()));
    }
    let mut out = x.clone();
    for &i in idx {
        if i >= n {
            return Err(Error::InvalidArgument(format!(
                "mask index {i} out of range for {n} frames"
            )));
        }
        out.data_mut()[i * d..(i + 1) * d].copy_from_slice(v.data());
    }
    Ok(out)
}

pub fn substitute_rows_bwd<T: Scalar>(
    idx: &[usize],
    d: usize,
    g: &Tensor<T>,
    dx: &mut Tensor<T>,
    dv: &mut Tensor<T>,
) {
    let n = g.shape()[0];
    let mut replaced = vec![false; n];
    for &i in idx {
        replaced[i] = true;
    }
    for i in 0..n {
        let grow = &g.data()[i * d..(i + 1) * d];
        if replaced[i] {
            for c in 0..d {
                dv.data_mut()[c] += grow[c];
            }
        } else {
            let drow = &mut dx.data_mut()[i * d..(i + 1) * d];
            for c in 0..d {
                drow[c] += grow[c];
            }
        }
    }
}

/// Mean over the leading axis: [N, rest..] -> [rest..].
pub fn mean_axis0_fwd<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape().len() < 2 {
        return Err(Error::Shape("mean_axis0 needs rank >= 2".into()));
    }
    let n = x.shape()[0];
    let rest: usize = x.shape()[1..].iter().product();
    let inv = T::from_usize(n).unwrap().recip();
    let mut out = vec![T::zero(); rest];
    for i in 0..n {
        for c in 0..rest {
            out[c] += x.data()[i * rest + c];
        }
    }
    for o in out.iter_mut() {
        *o = *o * inv;
    }
    Tensor::from_vec(x.shape()[1..].to_vec(), out)
}

pub fn mean_axis0_bwd<T: Scalar>(n: usize, g: &Tensor<T>, dx: &mut Tensor<T>) {
    let rest = g.numel();
    let inv = T::from_usize(n).unwrap().recip();
    for i in 0..n {
        for c in 0..rest {
            dx.data_mut()[i * rest + c] += g.data()[c] * inv;
        }
    }
}

/// q[t, g*dg+i] = sum_v y[t,g,v] * codebook[g,v,i].
pub fn codebook_lookup_fwd<T: Scalar>(y: &Tensor<T>, codebook: &Tensor<T>) -> Result<Tensor<T>> {
    let (tlen, gn, v) = dims3(y, "codebook weights")?;
    let (cg, cv, dg) = dims3(codebook, "codebook")?;
    if cg != gn || cv != v {
        return Err(Error::Shape(format!(
            "codebook {:?} does not match weights {:?}",
            codebook.shape(),
            y.shape()
        )));
    }
    let dq = gn * dg;
    let mut out = vec![T::zero(); tlen * dq];
    for t in 0..tlen {
        for g in 0..gn {
            for vv in 0..v {
                let w = y.data()[(t * gn + g) * v + vv];
                let cb = &codebook.data()[(g * v + vv) * dg..(g * v + vv + 1) * dg];
                let orow = &mut out[t * dq + g * dg..t * dq + (g + 1) * dg];
                for i in 0..dg {
                    orow[i] += w * cb[i];
                }
            }
        }
    }
    Tensor::from_vec(vec![tlen, dq], out)
}

pub fn codebook_lookup_bwd<T: Scalar>(
    y: &Tensor<T>,
    codebook: &Tensor<T>,
    g: &Tensor<T>,
    dy: &mut Tensor<T>,
    dcb: &mut Tensor<T>,
) {
    let (tlen, gn, v) = (y.shape()[0], y.shape()[1], y.shape()[2]);
    let dg = codebook.shape()[2];
    let dq = gn * dg;
    for t in 0..tlen {
        for gi in 0..gn {
            let grow = &g.data()[t * dq + gi * dg..t * dq + (gi + 1) * dg];
            for vv in 0..v {
                let cb = &codebook.data()[(gi * v + vv) * dg..(gi * v + vv + 1) * dg];
                dy.data_mut()[(t * gn + gi) * v + vv] += dot(grow, cb);
                let w = y.data()[(t * gn + gi) * v + vv];
                let dcbrow = &mut dcb.data_mut()[(gi * v + vv) * dg..(gi * v + vv + 1) * dg];
                for i in 0..dg {
                    dcbrow[i] += w * grow[i];
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Shape helpers
// ---------------------------------------------------------------------------

pub(crate) fn dims2<T: Scalar>(x: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    match x.shape() {
        [a, b] => Ok((*a, *b)),
        s => Err(Error::Shape(format!("{what}: expected rank 2, got {s:?}"))),
    }
}

pub(crate) fn dims3<T: Scalar>(x: &Tensor<T>, what: &str) -> Result<(usize, usize, usize)> {
    match x.shape() {
        [a, b, c] => Ok((*a, *b, *c)),
        s => Err(Error::Shape(format!("{what}: expected rank 3, got {s:?}"))),
    }
}

fn last_axis<T: Scalar>(x: &Tensor<T>) -> Result<usize> {
    match x.shape().last() {
        Some(&v) if v > 0 => Ok(v),
        _ => Err(Error::Shape("softmax over empty axis".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(shape: [usize; 2], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_kernel_subsamples() {
        let x = t2([1, 5], &[1.0, 2.0, 3.0, 4.0, 5.0]);
        let k = Tensor::from_vec(vec![1, 1, 1], vec![1.0]).unwrap();
        let y = conv1d_fwd(&x, &k, 2, 1).unwrap();
        assert_eq!(y.data(), &[1.0, 3.0, 5.0]);
    }

    #[test]
    fn conv_dilated_pair_sum() {
        // kernel [1,1] with dilation 2 sums x[t] + x[t+2]
        let x = t2([1, 6], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let k = Tensor::from_vec(vec![1, 1, 2], vec![1.0, 1.0]).unwrap();
        let y = conv1d_fwd(&x, &k, 1, 2).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0, 8.0, 10.0]);
    }

    #[test]
    fn conv_length_16k() {
        assert_eq!(conv1d_out_len(16000, 10, 5, 1).unwrap(), 3199);
    }

    #[test]
    fn conv_too_short_is_error() {
        let x = t2([1, 3], &[1.0, 2.0, 3.0]);
        let k = Tensor::from_vec(vec![1, 1, 2], vec![1.0, 1.0]).unwrap();
        assert!(matches!(
            conv1d_fwd(&x, &k, 1, 3),
            Err(Error::InputTooShort { needed: 4, got: 3 })
        ));
    }

    #[test]
    fn fractional_delta_kernel_reads_start_indices() {
        let x = Tensor::from_vec(vec![1, 13], (0..13).map(|v| v as f64).collect()).unwrap();
        let k = Tensor::from_vec(vec![1, 1, 5], vec![1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let y = fractional_conv_fwd(&x, &k, 5, 2).unwrap();
        // starts 0,2,5,7: the last start needs index 7+4 <= 12
        assert_eq!(y.data(), &[0.0, 2.0, 5.0, 7.0]);
    }

    #[test]
    fn fractional_constant_input() {
        let x = Tensor::filled(vec![1, 20], 3.0f64);
        let k = Tensor::from_vec(vec![1, 1, 4], vec![0.5, 0.25, 0.125, 0.125]).unwrap();
        let y = fractional_conv_fwd(&x, &k, 5, 2).unwrap();
        for &v in y.data() {
            assert!((v - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn fractional_den_zero_is_error() {
        let x = Tensor::filled(vec![1, 20], 1.0f64);
        let k = Tensor::from_vec(vec![1, 1, 2], vec![1.0, 1.0]).unwrap();
        assert!(fractional_conv_fwd(&x, &k, 5, 0).is_err());
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let x = t2([1, 4], &[0.0, 0.0, 0.0, 0.0]);
        let y = softmax_last_fwd(&x).unwrap();
        for &v in y.data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_self_is_one() {
        let a = t2([1, 3], &[0.3, -1.2, 2.0]);
        let y = cosine_rows_fwd(&a, &a).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_is_scale_invariant_bitwise() {
        let a = t2([2, 3], &[0.3, -1.2, 2.0, 0.7, 0.1, -0.4]);
        let b = t2([2, 3], &[1.0, 0.5, -0.25, -0.3, 0.9, 0.2]);
        let c1 = cosine_rows_fwd(&a, &b).unwrap();
        let a2 = a.map(|v| v * 2.0);
        let b2 = b.map(|v| v * 2.0);
        let c2 = cosine_rows_fwd(&a2, &b2).unwrap();
        assert_eq!(c1.data(), c2.data());
    }

    #[test]
    fn cross_entropy_uniform_is_ln_c() {
        let logits = Tensor::zeros(vec![3, 10]);
        let loss: f64 = cross_entropy_fwd(&logits, &[1, 5, 9]).unwrap();
        assert!((loss - (10.0f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn exp_entropy_uniform_and_onehot() {
        let p = t2([2, 4], &[0.25, 0.25, 0.25, 0.25, 1.0, 0.0, 0.0, 0.0]);
        let e = exp_entropy_rows_fwd(&p).unwrap();
        // uniform row: p*V == 1 exactly, so the result is V with zero error
        assert_eq!(e.data()[0], 4.0);
        assert!((e.data()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn split_merge_heads_roundtrip() {
        let x = t2([3, 4], &[0., 1., 2., 3., 4., 5., 6., 7., 8., 9., 10., 11.]);
        let h = split_heads(&x, 2).unwrap();
        assert_eq!(h.shape(), &[2, 3, 2]);
        assert_eq!(h.data()[0..2], [0.0, 1.0]);
        assert_eq!(h.data()[6..8], [2.0, 3.0]);
        let back = merge_heads(&h).unwrap();
        assert_eq!(back.data(), x.data());
    }
}
