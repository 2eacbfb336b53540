//! Forward kernels and the matching adjoint helpers used by the tape.
//!
//! All matrices are row-major `Tensor`s. Kernels check shapes and return
//! dimension errors; the hot loops are written so that the innermost index is
//! contiguous.

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// Tanh-form GELU with tunable scale `eps` and cubic coefficient `rho`:
/// `eps * x * (1 + tanh(sqrt(2/pi) * (x + rho * x^3)))`.
pub fn gelu<T: Real>(x: T, eps: T, rho: T) -> T {
    let u = T::of(SQRT_2_OVER_PI) * (x + rho * x * x * x);
    eps * x * (T::one() + u.tanh())
}

pub fn gelu_grad<T: Real>(x: T, eps: T, rho: T) -> T {
    let c = T::of(SQRT_2_OVER_PI);
    let th = (c * (x + rho * x * x * x)).tanh();
    let three = T::of(3.0);
    eps * (T::one() + th) + eps * x * (T::one() - th * th) * c * (T::one() + three * rho * x * x)
}

/// Soft interval (shrinkage) function.
pub fn soft<T: Real>(x: T, lambda: T) -> Result<T> {
    if lambda < T::zero() || lambda.is_nan() {
        return Err(Error::Argument(format!(
            "soft threshold needs lambda >= 0, got {lambda}"
        )));
    }
    Ok(shrink(x, lambda))
}

#[inline]
pub(crate) fn shrink<T: Real>(x: T, lambda: T) -> T {
    if x > lambda {
        x - lambda
    } else if x < -lambda {
        x + lambda
    } else {
        T::zero()
    }
}

fn expect_matrix<T: Real>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    if t.ndim() != 2 {
        return Err(Error::Shape(format!(
            "{op} expects a matrix, got shape {:?}",
            t.shape()
        )));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

pub fn softmax_rows<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = expect_matrix(x, "softmax_rows")?;
    let mut out = x.clone();
    for i in 0..r {
        let row = &mut out.data_mut()[i * c..(i + 1) * c];
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v = *v / z;
        }
    }
    Ok(out)
}

pub fn log_softmax_rows<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = expect_matrix(x, "log_softmax_rows")?;
    let mut out = x.clone();
    for i in 0..r {
        let row = &mut out.data_mut()[i * c..(i + 1) * c];
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        for v in row.iter_mut() {
            *v = *v - lse;
        }
    }
    Ok(out)
}

/// Row statistics kept from a layer-norm forward pass.
#[derive(Clone, Debug)]
pub struct LayerNormCache<T> {
    pub normalized: Vec<T>,
    pub inv_std: Vec<T>,
}

pub fn layer_norm<T: Real>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    let (r, c) = expect_matrix(x, "layer_norm")?;
    for (t, axis) in [(gain, "gain"), (bias, "bias")] {
        if t.len() != c {
            return Err(Error::Dimension {
                op: "layer_norm",
                axis,
                expected: c,
                got: t.len(),
            });
        }
    }
    let n = T::of(c as f64);
    let mut normalized = vec![T::zero(); r * c];
    let mut inv_std = vec![T::zero(); r];
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        let row = x.row(i);
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let is = if var + eps > T::zero() {
            T::one() / (var + eps).sqrt()
        } else {
            // constant row with eps = 0; normalized values are all zero
            T::zero()
        };
        inv_std[i] = is;
        for j in 0..c {
            let xh = (row[j] - mean) * is;
            normalized[i * c + j] = xh;
            out[i * c + j] = xh * gain.data()[j] + bias.data()[j];
        }
    }
    Ok((
        Tensor::new(vec![r, c], out)?,
        LayerNormCache {
            normalized,
            inv_std,
        },
    ))
}

/// `a (m×k) · b (k×n)`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = expect_matrix(a, "matmul")?;
    let (k2, n) = expect_matrix(b, "matmul")?;
    if k != k2 {
        return Err(Error::Dimension {
            op: "matmul",
            axis: "inner",
            expected: k,
            got: k2,
        });
    }
    let mut out = vec![T::zero(); m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a (m×k) · bᵀ` where `b` is `n×k`.
pub fn matmul_nt<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = expect_matrix(a, "matmul_nt")?;
    let (n, k2) = expect_matrix(b, "matmul_nt")?;
    if k != k2 {
        return Err(Error::Dimension {
            op: "matmul_nt",
            axis: "inner",
            expected: k,
            got: k2,
        });
    }
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = a.row(i);
        for j in 0..n {
            out[i * n + j] = dot(arow, b.row(j));
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `aᵀ · b` where `a` is `k×m` and `b` is `k×n`.
pub fn matmul_tn<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, m) = expect_matrix(a, "matmul_tn")?;
    let (k2, n) = expect_matrix(b, "matmul_tn")?;
    if k != k2 {
        return Err(Error::Dimension {
            op: "matmul_tn",
            axis: "inner",
            expected: k,
            got: k2,
        });
    }
    let mut out = vec![T::zero(); m * n];
    for p in 0..k {
        let arow = a.row(p);
        let brow = b.row(p);
        for i in 0..m {
            let av = arow[i];
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Geometry of a 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: (usize, usize),
    pub padding: (usize, usize),
    pub stride: (usize, usize),
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn infer<T: Real>(
        x: &Tensor<T>,
        w: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        padding: (usize, usize),
        stride: (usize, usize),
    ) -> Result<Self> {
        if x.ndim() != 3 {
            return Err(Error::Shape(format!(
                "conv2d input must be c×h×w, got {:?}",
                x.shape()
            )));
        }
        if w.ndim() != 4 {
            return Err(Error::Shape(format!(
                "conv2d kernels must be out×in×kh×kw, got {:?}",
                w.shape()
            )));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (o, ci, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        if ci != c {
            return Err(Error::Dimension {
                op: "conv2d",
                axis: "in_channels",
                expected: ci,
                got: c,
            });
        }
        if let Some(b) = bias {
            if b.len() != o {
                return Err(Error::Dimension {
                    op: "conv2d",
                    axis: "bias",
                    expected: o,
                    got: b.len(),
                });
            }
        }
        if h + 2 * padding.0 < kh || h == 0 {
            return Err(Error::Dimension {
                op: "conv2d",
                axis: "height",
                expected: kh,
                got: h + 2 * padding.0,
            });
        }
        if wd + 2 * padding.1 < kw || wd == 0 {
            return Err(Error::Dimension {
                op: "conv2d",
                axis: "width",
                expected: kw,
                got: wd + 2 * padding.1,
            });
        }
        Ok(Self {
            in_channels: c,
            out_channels: o,
            height: h,
            width: wd,
            kernel: (kh, kw),
            padding,
            stride,
            out_height: (h + 2 * padding.0 - kh) / stride.0 + 1,
            out_width: (wd + 2 * padding.1 - kw) / stride.1 + 1,
        })
    }

    /// Valid output column range for kernel column `kj`, plus the input
    /// column of the first valid output.
    #[inline]
    fn col_span(&self, kj: usize) -> (usize, usize) {
        let (pw, sw) = (self.padding.1, self.stride.1);
        // ix = x*sw + kj - pw must lie in [0, width)
        let lo = if kj >= pw { 0 } else { (pw - kj).div_ceil(sw) };
        let hi_excl = if self.width + pw > kj {
            ((self.width + pw - kj - 1) / sw + 1).min(self.out_width)
        } else {
            0
        };
        (lo, hi_excl.max(lo))
    }

    #[inline]
    fn in_row(&self, y: usize, ki: usize) -> Option<usize> {
        let iy = (y * self.stride.0 + ki) as isize - self.padding.0 as isize;
        (iy >= 0 && (iy as usize) < self.height).then_some(iy as usize)
    }
}

/// Standard cross-correlation of a `c×h×w` input with `o×c×kh×kw` kernels.
pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    padding: (usize, usize),
    stride: (usize, usize),
) -> Result<Tensor<T>> {
    let g = ConvGeometry::infer(x, w, bias, padding, stride)?;
    let (oh, ow) = (g.out_height, g.out_width);
    let (kh, kw) = g.kernel;
    let mut out = vec![T::zero(); g.out_channels * oh * ow];
    if let Some(b) = bias {
        for (o, chunk) in out.chunks_mut(oh * ow).enumerate() {
            chunk.fill(b.data()[o]);
        }
    }
    let (xd, wd) = (x.data(), w.data());
    let sw = g.stride.1;
    for o in 0..g.out_channels {
        for c in 0..g.in_channels {
            let xplane = &xd[c * g.height * g.width..(c + 1) * g.height * g.width];
            for ki in 0..kh {
                for kj in 0..kw {
                    let wv = wd[((o * g.in_channels + c) * kh + ki) * kw + kj];
                    let (lo, hi) = g.col_span(kj);
                    if lo >= hi {
                        continue;
                    }
                    for y in 0..oh {
                        let Some(iy) = g.in_row(y, ki) else { continue };
                        let xrow = &xplane[iy * g.width..(iy + 1) * g.width];
                        let orow = &mut out[(o * oh + y) * ow..(o * oh + y + 1) * ow];
                        let ix0 = lo * sw + kj - g.padding.1;
                        if sw == 1 {
                            for (ov, &xv) in orow[lo..hi].iter_mut().zip(&xrow[ix0..]) {
                                *ov += wv * xv;
                            }
                        } else {
                            for (n, ov) in orow[lo..hi].iter_mut().enumerate() {
                                *ov += wv * xrow[ix0 + n * sw];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.out_channels, oh, ow], out)
}

/// Adjoint of [`conv2d`]: gradients for input, kernels, and bias.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
    g: &ConvGeometry,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (oh, ow) = (g.out_height, g.out_width);
    let (kh, kw) = g.kernel;
    let sw = g.stride.1;
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); w.len()];
    let gd = grad_out.data();
    let db: Vec<T> = gd.chunks(oh * ow).map(|ch| ch.iter().copied().sum()).collect();
    let (xd, wd) = (x.data(), w.data());
    let plane = g.height * g.width;
    for o in 0..g.out_channels {
        for c in 0..g.in_channels {
            for ki in 0..kh {
                for kj in 0..kw {
                    let widx = ((o * g.in_channels + c) * kh + ki) * kw + kj;
                    let wv = wd[widx];
                    let (lo, hi) = g.col_span(kj);
                    if lo >= hi {
                        continue;
                    }
                    let mut acc = T::zero();
                    for y in 0..oh {
                        let Some(iy) = g.in_row(y, ki) else { continue };
                        let base = c * plane + iy * g.width;
                        let grow = &gd[(o * oh + y) * ow..(o * oh + y + 1) * ow];
                        let ix0 = lo * sw + kj - g.padding.1;
                        if sw == 1 {
                            let n = hi - lo;
                            let xrow = &xd[base + ix0..base + ix0 + n];
                            acc += dot(&grow[lo..hi], xrow);
                            let dxrow = &mut dx[base + ix0..base + ix0 + n];
                            for (d, &gv) in dxrow.iter_mut().zip(&grow[lo..hi]) {
                                *d += wv * gv;
                            }
                        } else {
                            for (n, &gv) in grow[lo..hi].iter().enumerate() {
                                let ix = base + ix0 + n * sw;
                                acc += gv * xd[ix];
                                dx[ix] += wv * gv;
                            }
                        }
                    }
                    dw[widx] += acc;
                }
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx).expect("dx shape"),
        Tensor::new(w.shape().to_vec(), dw).expect("dw shape"),
        Tensor::new(vec![g.out_channels], db).expect("db shape"),
    )
}
