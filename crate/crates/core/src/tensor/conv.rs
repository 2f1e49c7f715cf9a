//! Convolution kernels lowered to im2col and a fixed-order matrix product.
//!
//! A [`conv2d`] output element accumulates its terms in `(in_channel, ky, kx)`
//! order starting from zero, then adds the bias. Taps outside the input
//! contribute a zero product. The loop nests are fixed, so results are
//! bitwise reproducible on one platform.

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Per-side spatial padding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub const ZERO: Padding = Padding {
        top: 0,
        bottom: 0,
        left: 0,
        right: 0,
    };

    pub fn uniform(p: usize) -> Self {
        Padding {
            top: p,
            bottom: p,
            left: p,
            right: p,
        }
    }
}

/// "Same"-style padding for one axis: output is `ceil(input / stride)`,
/// with the odd extra row/column on the bottom/right.
///
/// Returns `(output, before, after)`.
pub fn same_padding(input: usize, kernel: usize, stride: usize) -> (usize, usize, usize) {
    let out = input.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(input);
    (out, total / 2, total - total / 2)
}

/// Padding that makes a transposed convolution map `input` to exactly
/// `target` on one axis. This is the padding the forward convolution uses
/// when mapping `target` back to `input`.
pub fn transposed_padding(
    input: usize,
    kernel: usize,
    stride: usize,
    target: usize,
) -> Result<(usize, usize)> {
    let full = (input - 1) * stride + kernel;
    if full < target {
        return Err(Error::shape(format!(
            "transposed conv cannot reach {target} from {input} (kernel {kernel}, stride {stride})"
        )));
    }
    let total = full - target;
    Ok((total / 2, total - total / 2))
}

/// Indices `i` in `[0, n)` whose position `i * stride + k - pad` falls in `[0, limit)`.
#[inline]
fn valid_range(n: usize, limit: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    let off = k as isize - pad as isize;
    let s = stride as isize;
    let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
    let top = limit as isize - 1 - off;
    if top < 0 {
        return (0, 0);
    }
    let hi = ((top / s) + 1).min(n as isize);
    if hi <= lo {
        (0, 0)
    } else {
        (lo as usize, hi as usize)
    }
}

fn check_kernel<T: Real>(
    op: &str,
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    transposed: bool,
) -> Result<()> {
    let (_, cin, _, _) = x.dims4()?;
    let (w0, w1, _, _) = w
        .dims4()
        .map_err(|_| Error::shape(format!("{op}: kernel must be 4-D, got {:?}", w.shape())))?;
    let (kin, kout) = if transposed { (w0, w1) } else { (w1, w0) };
    if kin != cin {
        return Err(Error::shape(format!(
            "{op}: input has {cin} channels but kernel {:?} expects {kin}",
            w.shape()
        )));
    }
    if let Some(b) = bias {
        if b.numel() != kout {
            return Err(Error::shape(format!(
                "{op}: bias has {} entries, expected {kout}",
                b.numel()
            )));
        }
    }
    if stride == 0 {
        return Err(Error::invalid(format!("{op}: stride must be positive")));
    }
    Ok(())
}

fn conv_out_len(op: &str, n: usize, before: usize, after: usize, k: usize, s: usize) -> Result<usize> {
    let padded = n + before + after;
    if padded < k {
        return Err(Error::shape(format!(
            "{op}: kernel extent {k} exceeds padded extent {padded}"
        )));
    }
    Ok((padded - k) / s + 1)
}

fn add_bias<T: Real>(out: &mut Tensor<T>, bias: Option<&Tensor<T>>) {
    if let Some(b) = bias {
        let shape = out.shape().to_vec();
        let (c, plane) = (shape[1], shape[2] * shape[3]);
        for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let bv = b.data()[i % c];
            for v in chunk {
                *v += bv;
            }
        }
    }
}

/// Gradients of a convolution. Absent fields were not requested.
#[derive(Debug, Default)]
pub struct ConvGrads<T: Real> {
    pub x: Option<Tensor<T>>,
    pub w: Option<Tensor<T>>,
    pub b: Option<Tensor<T>>,
}

fn bias_grad<T: Real>(gout: &Tensor<T>) -> Tensor<T> {
    let s = gout.shape();
    let (b, c, plane) = (s[0], s[1], s[2] * s[3]);
    let mut gb = Tensor::zeros(&[c]);
    for bi in 0..b {
        for ci in 0..c {
            let mut acc = T::zero();
            for &v in &gout.data()[(bi * c + ci) * plane..][..plane] {
                acc += v;
            }
            gb.data_mut()[ci] += acc;
        }
    }
    gb
}

/// Shape of one im2col lowering: the `big` grid is sampled by a `kh x kw`
/// window at stride `stride` for every position of the `small` grid.
#[derive(Clone, Copy, Debug)]
struct Lowering {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: Padding,
}

impl Lowering {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.b * self.oh * self.ow
    }

    /// `cols[(c, ky, kx)][(b, oy, ox)]`, zero where the window leaves `big`.
    fn im2col<T: Real>(&self, big: &[T]) -> Vec<T> {
        let (plane, small) = (self.h * self.w, self.oh * self.ow);
        let mut cols = vec![T::zero(); self.rows() * self.cols()];
        let mut r = 0;
        for ci in 0..self.c {
            for ky in 0..self.kh {
                let (y0, y1) = valid_range(self.oh, self.h, self.stride, ky, self.pad.top);
                for kx in 0..self.kw {
                    let (x0, x1) = valid_range(self.ow, self.w, self.stride, kx, self.pad.left);
                    let row = &mut cols[r * self.cols()..][..self.cols()];
                    r += 1;
                    if x0 >= x1 {
                        continue;
                    }
                    let shift = x0 * self.stride + kx - self.pad.left;
                    for bi in 0..self.b {
                        let src = &big[(bi * self.c + ci) * plane..][..plane];
                        for oy in y0..y1 {
                            let iy = oy * self.stride + ky - self.pad.top;
                            let srow = &src[iy * self.w..][..self.w];
                            let drow = &mut row[bi * small + oy * self.ow..][x0..x1];
                            if self.stride == 1 {
                                drow.copy_from_slice(&srow[shift..shift + x1 - x0]);
                            } else {
                                for (j, d) in drow.iter_mut().enumerate() {
                                    *d = srow[shift + j * self.stride];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adds every column entry back onto the `big` position it was read from.
    fn col2im<T: Real>(&self, cols: &[T], big: &mut [T]) {
        let (plane, small) = (self.h * self.w, self.oh * self.ow);
        let mut r = 0;
        for ci in 0..self.c {
            for ky in 0..self.kh {
                let (y0, y1) = valid_range(self.oh, self.h, self.stride, ky, self.pad.top);
                for kx in 0..self.kw {
                    let (x0, x1) = valid_range(self.ow, self.w, self.stride, kx, self.pad.left);
                    let row = &cols[r * self.cols()..][..self.cols()];
                    r += 1;
                    if x0 >= x1 {
                        continue;
                    }
                    let shift = x0 * self.stride + kx - self.pad.left;
                    for bi in 0..self.b {
                        let dst = &mut big[(bi * self.c + ci) * plane..][..plane];
                        for oy in y0..y1 {
                            let iy = oy * self.stride + ky - self.pad.top;
                            let drow = &mut dst[iy * self.w..][..self.w];
                            let srow = &row[bi * small + oy * self.ow..][x0..x1];
                            if self.stride == 1 {
                                for (d, &s) in drow[shift..].iter_mut().zip(srow) {
                                    *d += s;
                                }
                            } else {
                                for (j, &s) in srow.iter().enumerate() {
                                    drow[shift + j * self.stride] += s;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `[B, C, P]` to `[C, B * P]`.
fn to_channel_major<T: Real>(x: &[T], b: usize, c: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        for ci in 0..c {
            out[(ci * b + bi) * plane..][..plane].copy_from_slice(&x[(bi * c + ci) * plane..][..plane]);
        }
    }
    out
}

/// `[C, B * P]` to `[B, C, P]`.
fn from_channel_major<T: Real>(x: &[T], b: usize, c: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        for ci in 0..c {
            out[(bi * c + ci) * plane..][..plane].copy_from_slice(&x[(ci * b + bi) * plane..][..plane]);
        }
    }
    out
}

fn transpose<T: Real>(a: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// `out[m][n] += sum_k a[m][k] * b[k][n]`, accumulated in ascending `k`.
fn gemm_acc<T: Real>(a: &[T], m: usize, k: usize, b: &[T], n: usize, out: &mut [T]) {
    let mut rows = out.chunks_mut(n);
    let mut i = 0;
    while i + 4 <= m {
        let (o0, o1, o2, o3) = (
            rows.next().unwrap(),
            rows.next().unwrap(),
            rows.next().unwrap(),
            rows.next().unwrap(),
        );
        for kk in 0..k {
            let (a0, a1, a2, a3) = (
                a[i * k + kk],
                a[(i + 1) * k + kk],
                a[(i + 2) * k + kk],
                a[(i + 3) * k + kk],
            );
            let br = &b[kk * n..][..n];
            for j in 0..n {
                let v = br[j];
                o0[j] += a0 * v;
                o1[j] += a1 * v;
                o2[j] += a2 * v;
                o3[j] += a3 * v;
            }
        }
        i += 4;
    }
    for o in rows {
        for kk in 0..k {
            let av = a[i * k + kk];
            for (d, &v) in o.iter_mut().zip(&b[kk * n..][..n]) {
                *d += av * v;
            }
        }
        i += 1;
    }
}

/// `out[m][k] = sum_n a[m][n] * b[k][n]`.
fn gemm_nt<T: Real>(a: &[T], m: usize, b: &[T], k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * k];
    for i in 0..m {
        let ar = &a[i * n..][..n];
        for kk in 0..k {
            let br = &b[kk * n..][..n];
            let mut acc = [T::zero(); 4];
            let mut ca = ar.chunks_exact(4);
            let mut cb = br.chunks_exact(4);
            for (x, y) in (&mut ca).zip(&mut cb) {
                for l in 0..4 {
                    acc[l] += x[l] * y[l];
                }
            }
            let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
            for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
                s += x * y;
            }
            out[i * k + kk] = s;
        }
    }
    out
}

/// Cross-correlation of `x[B,Cin,H,W]` with `w[Cout,Cin,kh,kw]`.
pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: Padding,
) -> Result<Tensor<T>> {
    check_kernel("conv2d", x, w, bias, stride, false)?;
    let (b, cin, h, wd) = x.dims4()?;
    let (cout, _, kh, kw) = w.dims4()?;
    let oh = conv_out_len("conv2d", h, pad.top, pad.bottom, kh, stride)?;
    let ow = conv_out_len("conv2d", wd, pad.left, pad.right, kw, stride)?;
    let low = Lowering { b, c: cin, h, w: wd, oh, ow, kh, kw, stride, pad };
    let cols = low.im2col(x.data());
    let mut out_cm = vec![T::zero(); cout * low.cols()];
    gemm_acc(w.data(), cout, low.rows(), &cols, low.cols(), &mut out_cm);
    let mut out = Tensor::new(vec![b, cout, oh, ow], from_channel_major(&out_cm, b, cout, oh * ow))?;
    add_bias(&mut out, bias);
    Ok(out)
}

/// Backward pass of [`conv2d`].
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &Tensor<T>,
    stride: usize,
    pad: Padding,
    need: (bool, bool, bool),
) -> Result<ConvGrads<T>> {
    let (b, cin, h, wd) = x.dims4()?;
    let (cout, _, kh, kw) = w.dims4()?;
    let (gb_, gc, oh, ow) = gout.dims4()?;
    if gb_ != b || gc != cout {
        return Err(Error::shape("conv2d_backward: gradient shape mismatch"));
    }
    let (need_x, need_w, need_b) = need;
    let low = Lowering { b, c: cin, h, w: wd, oh, ow, kh, kw, stride, pad };
    let g_cm = to_channel_major(gout.data(), b, cout, oh * ow);
    let gw = if need_w {
        let cols = low.im2col(x.data());
        let d = gemm_nt(&g_cm, cout, &cols, low.rows(), low.cols());
        Some(Tensor::new(w.shape().to_vec(), d)?)
    } else {
        None
    };
    let gx = if need_x {
        let wt = transpose(w.data(), cout, low.rows());
        let mut gcols = vec![T::zero(); low.rows() * low.cols()];
        gemm_acc(&wt, low.rows(), cout, &g_cm, low.cols(), &mut gcols);
        let mut gx = Tensor::zeros(x.shape());
        low.col2im(&gcols, gx.data_mut());
        Some(gx)
    } else {
        None
    };
    Ok(ConvGrads {
        x: gx,
        w: gw,
        b: need_b.then(|| bias_grad(gout)),
    })
}

/// Transposed convolution of `x[B,Cin,H,W]` with `w[Cin,Cout,kh,kw]`.
///
/// Output extent is `(H - 1) * stride + kh - top - bottom + output_padding.0`,
/// likewise for the width. Each output element sums, for every kernel tap
/// `(ky, kx)` in ascending order, the partial sum over input channels.
pub fn conv_transpose2d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: Padding,
    output_padding: (usize, usize),
) -> Result<Tensor<T>> {
    check_kernel("conv_transpose2d", x, w, bias, stride, true)?;
    let (b, cin, h, wd) = x.dims4()?;
    let (_, cout, kh, kw) = w.dims4()?;
    let full_h = (h - 1) * stride + kh + output_padding.0;
    let full_w = (wd - 1) * stride + kw + output_padding.1;
    if full_h <= pad.top + pad.bottom || full_w <= pad.left + pad.right {
        return Err(Error::shape(format!(
            "conv_transpose2d: padding {pad:?} leaves an empty output"
        )));
    }
    let oh = full_h - pad.top - pad.bottom;
    let ow = full_w - pad.left - pad.right;
    let low = Lowering { b, c: cout, h: oh, w: ow, oh: h, ow: wd, kh, kw, stride, pad };
    let x_cm = to_channel_major(x.data(), b, cin, h * wd);
    let wt = transpose(w.data(), cin, low.rows());
    let mut cols = vec![T::zero(); low.rows() * low.cols()];
    gemm_acc(&wt, low.rows(), cin, &x_cm, low.cols(), &mut cols);
    let mut out = Tensor::zeros(&[b, cout, oh, ow]);
    low.col2im(&cols, out.data_mut());
    add_bias(&mut out, bias);
    Ok(out)
}

/// Backward pass of [`conv_transpose2d`].
pub fn conv_transpose2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &Tensor<T>,
    stride: usize,
    pad: Padding,
    need: (bool, bool, bool),
) -> Result<ConvGrads<T>> {
    let (b, cin, h, wd) = x.dims4()?;
    let (_, cout, kh, kw) = w.dims4()?;
    let (gb_, gc, oh, ow) = gout.dims4()?;
    if gb_ != b || gc != cout {
        return Err(Error::shape("conv_transpose2d_backward: gradient shape mismatch"));
    }
    let (need_x, need_w, need_b) = need;
    let low = Lowering { b, c: cout, h: oh, w: ow, oh: h, ow: wd, kh, kw, stride, pad };
    let (mut gx, mut gw) = (None, None);
    if need_x || need_w {
        let gcols = low.im2col(gout.data());
        if need_w {
            let x_cm = to_channel_major(x.data(), b, cin, h * wd);
            let d = gemm_nt(&x_cm, cin, &gcols, low.rows(), low.cols());
            gw = Some(Tensor::new(w.shape().to_vec(), d)?);
        }
        if need_x {
            let mut gx_cm = vec![T::zero(); cin * low.cols()];
            gemm_acc(w.data(), cin, low.rows(), &gcols, low.cols(), &mut gx_cm);
            gx = Some(Tensor::new(x.shape().to_vec(), from_channel_major(&gx_cm, b, cin, h * wd))?);
        }
    }
    Ok(ConvGrads {
        x: gx,
        w: gw,
        b: need_b.then(|| bias_grad(gout)),
    })
}
