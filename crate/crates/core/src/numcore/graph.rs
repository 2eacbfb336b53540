//! Dynamic reverse-mode tape.
//!
//! A [`Graph`] records every operation of one forward pass. Nodes are
//! immutable once pushed; [`Graph::backward`] walks them in reverse and
//! returns a [`Gradients`] table indexed by [`Var`].
//!
//! [`Graph::pair_grid`] evaluates one small sub-graph per (row, column) pair,
//! each on its own local tape. That is how batch similarity matrices are
//! built: the per-pair work runs in parallel and its adjoints are reduced in
//! a fixed order, so results do not depend on the thread count.

use std::sync::Arc;

use rand::{Rng, RngCore};
use rayon::prelude::*;

use super::kernels::{self, ConvGeometry, LayerNormCache};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Body of a [`Graph::pair_grid`] cell: `(local graph, row inputs, column
/// inputs, shared inputs) -> scalar`.
pub type PairFn<T> = dyn Fn(&mut Graph<T>, &[Var], &[Var], &[Var]) -> Result<Var> + Send + Sync;

struct LocalTape<T: Real> {
    graph: Graph<T>,
    rows: Vec<Var>,
    cols: Vec<Var>,
    shared: Vec<Var>,
    out: Var,
}

struct GridOp<T: Real> {
    rows: Vec<Vec<Var>>,
    cols: Vec<Vec<Var>>,
    shared: Vec<Var>,
    tapes: Vec<LocalTape<T>>,
}

enum Op<T: Real> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRowBias(Var, Var),
    MulScalar(Var, Var),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        cache: LayerNormCache<T>,
    },
    Gelu {
        x: Var,
        eps: T,
        rho: T,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geo: ConvGeometry,
    },
    MeanRows(Var),
    MaxRows {
        x: Var,
        argmax: Vec<usize>,
    },
    SpatialMean(Var),
    Sum(Var),
    Mean(Var),
    Diag(Var),
    SoftThreshold {
        x: Var,
        lambda: Var,
    },
    Softplus(Var),
    Cosine(Var, Var),
    Dot(Var, Var),
    Cols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Reshape(Var),
    ChannelBilinear {
        x: Var,
        y: Var,
        k: usize,
    },
    Crop3(Var),
    Grid(Box<GridOp<T>>),
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape<T: Real>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn scalar_like<T: Real>(op: &str, t: &Tensor<T>) -> Result<()> {
    if t.len() != 1 {
        return Err(Error::Shape(format!(
            "{op}: expected a single-element tensor, got {:?}",
            t.shape()
        )));
    }
    Ok(())
}

fn expect_ndim<T: Real>(op: &str, t: &Tensor<T>, ndim: usize) -> Result<()> {
    if t.ndim() != ndim {
        return Err(Error::Shape(format!(
            "{op}: expected {ndim}-d input, got {:?}",
            t.shape()
        )));
    }
    Ok(())
}

fn t<T: Real>(shape: Vec<usize>, data: Vec<T>) -> Tensor<T> {
    Tensor::new(shape, data).expect("kernel produced a consistent shape")
}

impl<T: Real> Graph<T> {
    /// A graph that records gradients for parameter leaves.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph for evaluation only: parameters become constants and no
    /// adjoint state is kept.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let needs_grad = self.grad_enabled && requires_grad;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("add", x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let out = t(x.shape().to_vec(), data);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("sub", x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p - q).collect();
        let out = t(x.shape().to_vec(), data);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("mul", x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let out = t(x.shape().to_vec(), data);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|v| v * c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    /// Adds a length-`c` vector to every row of an `r×c` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        expect_ndim("add_row_bias", xv, 2)?;
        if bv.len() != xv.cols() {
            return Err(Error::Dimension {
                op: "add_row_bias",
                axis: "columns",
                expected: xv.cols(),
                got: bv.len(),
            });
        }
        let c = xv.cols();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv.data()[i % c])
            .collect();
        let out = t(xv.shape().to_vec(), data);
        Ok(self.push(out, Op::AddRowBias(x, bias), &[x, bias]))
    }

    /// `x * s` for a single-element tensor `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        scalar_like("mul_scalar", self.value(s))?;
        let sv = self.value(s).item();
        let out = self.value(x).map(|v| v * sv);
        Ok(self.push(out, Op::MulScalar(x, s), &[x, s]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul_nt(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMulNt(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        expect_ndim("transpose", self.value(a), 2)?;
        let out = self.value(a).transpose();
        Ok(self.push(out, Op::Transpose(a), &[a]))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = kernels::softmax_rows(self.value(a))?;
        Ok(self.push(out, Op::SoftmaxRows(a), &[a]))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = kernels::log_softmax_rows(self.value(a))?;
        Ok(self.push(out, Op::LogSoftmaxRows(a), &[a]))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (out, cache) =
            kernels::layer_norm(self.value(x), self.value(gain), self.value(bias), eps)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                cache,
            },
            &[x, gain, bias],
        ))
    }

    pub fn gelu(&mut self, x: Var, eps: T, rho: T) -> Var {
        let out = self.value(x).map(|v| kernels::gelu(v, eps, rho));
        self.push(out, Op::Gelu { x, eps, rho }, &[x])
    }

    /// Inverted dropout. `rate == 0` records nothing and returns `x`.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut dyn RngCore) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let n = self.value(x).len();
        let mask: Vec<T> = (0..n)
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = t(xv.shape().to_vec(), data);
        Ok(self.push(out, Op::Dropout { x, mask }, &[x]))
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        padding: (usize, usize),
        stride: (usize, usize),
    ) -> Result<Var> {
        let bias = b.map(|b| self.value(b));
        let geo = ConvGeometry::infer(self.value(x), self.value(w), bias, padding, stride)?;
        let out = kernels::conv2d(self.value(x), self.value(w), bias, padding, stride)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Conv2d { x, w, b, geo }, &inputs))
    }

    /// Mean over the rows of an `s×d` matrix, giving a `[d]` vector.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        expect_ndim("mean_rows", xv, 2)?;
        let (r, c) = (xv.rows(), xv.cols());
        if r == 0 {
            return Err(Error::Shape("mean_rows over zero rows".into()));
        }
        let mut acc = vec![T::zero(); c];
        for i in 0..r {
            for (a, &v) in acc.iter_mut().zip(xv.row(i)) {
                *a += v;
            }
        }
        let n = T::of(r as f64);
        let out = t(vec![c], acc.into_iter().map(|v| v / n).collect());
        Ok(self.push(out, Op::MeanRows(x), &[x]))
    }

    /// Column-wise max over the rows of an `s×d` matrix.
    pub fn max_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        expect_ndim("max_rows", xv, 2)?;
        let (r, c) = (xv.rows(), xv.cols());
        if r == 0 {
            return Err(Error::Shape("max_rows over zero rows".into()));
        }
        let mut best = xv.row(0).to_vec();
        let mut argmax = vec![0usize; c];
        for i in 1..r {
            for (j, &v) in xv.row(i).iter().enumerate() {
                if v > best[j] {
                    best[j] = v;
                    argmax[j] = i;
                }
            }
        }
        let out = t(vec![c], best);
        Ok(self.push(out, Op::MaxRows { x, argmax }, &[x]))
    }

    /// Global average pool of a `c×h×w` tensor, giving `[c]`.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        expect_ndim("spatial_mean", xv, 3)?;
        let c = xv.shape()[0];
        let plane = xv.shape()[1] * xv.shape()[2];
        let n = T::of(plane as f64);
        let data = xv
            .data()
            .chunks(plane)
            .map(|ch| ch.iter().copied().sum::<T>() / n)
            .collect();
        let out = t(vec![c], data);
        Ok(self.push(out, Op::SpatialMean(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<T>() / T::of(v.len() as f64);
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    pub fn diag(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        expect_ndim("diag", xv, 2)?;
        if xv.rows() != xv.cols() {
            return Err(Error::Shape(format!("diag of non-square {:?}", xv.shape())));
        }
        let n = xv.rows();
        let out = t(vec![n], (0..n).map(|i| xv.at2(i, i)).collect());
        Ok(self.push(out, Op::Diag(x), &[x]))
    }

    /// Elementwise shrinkage by a single-element, nonnegative `lambda`.
    pub fn soft_threshold(&mut self, x: Var, lambda: Var) -> Result<Var> {
        scalar_like("soft_threshold", self.value(lambda))?;
        let lam = self.value(lambda).item();
        if lam < T::zero() || lam.is_nan() {
            return Err(Error::Argument(format!(
                "soft threshold needs lambda >= 0, got {lam}"
            )));
        }
        let out = self.value(x).map(|v| kernels::shrink(v, lam));
        Ok(self.push(out, Op::SoftThreshold { x, lambda }, &[x, lambda]))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let out = self.value(x).map(softplus);
        self.push(out, Op::Softplus(x), &[x])
    }

    /// Cosine similarity of two equal-length vectors. A zero vector yields 0.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.len() != y.len() {
            return Err(Error::Dimension {
                op: "cosine",
                axis: "length",
                expected: x.len(),
                got: y.len(),
            });
        }
        let (na, nb) = (norm(x.data()), norm(y.data()));
        let c = if na == T::zero() || nb == T::zero() {
            log::warn!("cosine similarity of a zero vector; returning 0");
            T::zero()
        } else {
            kernels::dot(x.data(), y.data()) / (na * nb)
        };
        Ok(self.push(Tensor::scalar(c), Op::Cosine(a, b), &[a, b]))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.len() != y.len() {
            return Err(Error::Dimension {
                op: "dot",
                axis: "length",
                expected: x.len(),
                got: y.len(),
            });
        }
        let d = kernels::dot(x.data(), y.data());
        Ok(self.push(Tensor::scalar(d), Op::Dot(a, b), &[a, b]))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        expect_ndim("cols", xv, 2)?;
        let (r, c) = (xv.rows(), xv.cols());
        if start + len > c {
            return Err(Error::Dimension {
                op: "cols",
                axis: "columns",
                expected: c,
                got: start + len,
            });
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&xv.row(i)[start..start + len]);
        }
        let out = t(vec![r, len], data);
        Ok(self.push(out, Op::Cols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat_cols of nothing".into()))?;
        let r = self.value(*first).rows();
        let mut total = 0;
        for &p in parts {
            let pv = self.value(p);
            expect_ndim("concat_cols", pv, 2)?;
            if pv.rows() != r {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    axis: "rows",
                    expected: r,
                    got: pv.rows(),
                });
            }
            total += pv.cols();
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = t(vec![r, total], data);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Per-channel bilinear grid: with `x: s1×(k·r)` and `y: s2×(k·r)`,
    /// `out[c, a, b] = <x[a, c·r..(c+1)·r], y[b, c·r..(c+1)·r]>`.
    pub fn channel_bilinear(&mut self, x: Var, y: Var, k: usize) -> Result<Var> {
        let (xv, yv) = (self.value(x), self.value(y));
        expect_ndim("channel_bilinear", xv, 2)?;
        expect_ndim("channel_bilinear", yv, 2)?;
        if xv.cols() != yv.cols() {
            return Err(Error::Dimension {
                op: "channel_bilinear",
                axis: "width",
                expected: xv.cols(),
                got: yv.cols(),
            });
        }
        if k == 0 || xv.cols() % k != 0 {
            return Err(Error::Config(format!(
                "channel_bilinear: width {} is not a multiple of {k} channels",
                xv.cols()
            )));
        }
        let r = xv.cols() / k;
        let (s1, s2) = (xv.rows(), yv.rows());
        let mut out = vec![T::zero(); k * s1 * s2];
        for c in 0..k {
            for a in 0..s1 {
                let xa = &xv.row(a)[c * r..(c + 1) * r];
                let orow = &mut out[(c * s1 + a) * s2..(c * s1 + a + 1) * s2];
                for (b, o) in orow.iter_mut().enumerate() {
                    *o = kernels::dot(xa, &yv.row(b)[c * r..(c + 1) * r]);
                }
            }
        }
        let out = t(vec![k, s1, s2], out);
        Ok(self.push(out, Op::ChannelBilinear { x, y, k }, &[x, y]))
    }

    /// Leading `k×s1×s2` corner of a `k×S1×S2` tensor.
    pub fn crop3(&mut self, x: Var, s1: usize, s2: usize) -> Result<Var> {
        let xv = self.value(x);
        expect_ndim("crop3", xv, 3)?;
        let (k, cap1, cap2) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        if s1 > cap1 || s2 > cap2 {
            return Err(Error::Config(format!(
                "requested {s1}×{s2} window exceeds capacity {cap1}×{cap2}"
            )));
        }
        let mut data = Vec::with_capacity(k * s1 * s2);
        for c in 0..k {
            for i in 0..s1 {
                let start = (c * cap1 + i) * cap2;
                data.extend_from_slice(&xv.data()[start..start + s2]);
            }
        }
        let out = t(vec![k, s1, s2], data);
        Ok(self.push(out, Op::Crop3(x), &[x]))
    }

    /// Evaluates `f` once per (row, column) pair on an independent local
    /// tape and gathers the scalar results into a `rows×cols` matrix.
    ///
    /// Every input is copied into each local tape as a leaf, so `f` sees the
    /// same values it would on this graph. When gradients are enabled the
    /// local tapes are kept for the backward pass.
    pub fn pair_grid(
        &mut self,
        rows: Vec<Vec<Var>>,
        cols: Vec<Vec<Var>>,
        shared: Vec<Var>,
        f: Arc<PairFn<T>>,
    ) -> Result<Var> {
        let (nr, nc) = (rows.len(), cols.len());
        if nr == 0 || nc == 0 {
            return Err(Error::Argument("pair_grid needs at least one row and column".into()));
        }
        let mut inputs: Vec<Var> = rows.iter().chain(&cols).flatten().copied().collect();
        inputs.extend(&shared);
        let keep = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].needs_grad);

        let this = &*self;
        let build = |idx: usize| -> Result<LocalTape<T>> {
            let (i, j) = (idx / nc, idx % nc);
            let mut lg = if keep { Graph::new() } else { Graph::inference() };
            let mut copy = |vars: &[Var]| -> Vec<Var> {
                vars.iter()
                    .map(|&v| lg.leaf(this.value(v).clone(), this.requires_grad(v)))
                    .collect()
            };
            let (r, c, s) = (copy(&rows[i]), copy(&cols[j]), copy(&shared));
            let out = f(&mut lg, &r, &c, &s)?;
            scalar_like("pair_grid cell", lg.value(out))?;
            Ok(LocalTape {
                graph: lg,
                rows: r,
                cols: c,
                shared: s,
                out,
            })
        };
        let tapes: Vec<LocalTape<T>> = (0..nr * nc)
            .into_par_iter()
            .map(build)
            .collect::<Result<_>>()?;
        let values = tapes.iter().map(|lt| lt.graph.value(lt.out).item()).collect();
        let out = t(vec![nr, nc], values);
        let op = GridOp {
            rows,
            cols,
            shared,
            tapes: if keep { tapes } else { Vec::new() },
        };
        Ok(self.push(out, Op::Grid(Box::new(op)), &inputs))
    }

    /// Reverse pass from a single-element root with seed 1.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        scalar_like("backward root", self.value(root))?;
        Ok(self.backward_with(root, Tensor::full(self.shape(root), T::one())))
    }

    /// Reverse pass from `root` with an explicit upstream gradient.
    pub fn backward_with(&self, root: Var, seed: Tensor<T>) -> Gradients<T> {
        assert_eq!(seed.shape(), self.shape(root), "seed shape must match root");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].needs_grad {
            return Gradients { grads };
        }
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce() -> Tensor<T>) {
        if self.nodes[v.0].needs_grad {
            self.acc(grads, v, f());
        }
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_with(grads, *a, || g.clone());
                self.acc_with(grads, *b, || g.clone());
            }
            Op::Sub(a, b) => {
                self.acc_with(grads, *a, || g.clone());
                self.acc_with(grads, *b, || g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc_with(grads, *a, || zip_map(g, bv, |p, q| p * q));
                self.acc_with(grads, *b, || zip_map(g, av, |p, q| p * q));
            }
            Op::Scale(a, c) => self.acc_with(grads, *a, || g.map(|v| v * *c)),
            Op::AddRowBias(x, b) => {
                self.acc_with(grads, *x, || g.clone());
                self.acc_with(grads, *b, || {
                    let c = g.cols();
                    let mut s = vec![T::zero(); c];
                    for row in g.data().chunks(c) {
                        for (a, &v) in s.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    t(vec![c], s)
                });
            }
            Op::MulScalar(x, s) => {
                let sv = self.value(*s).item();
                self.acc_with(grads, *x, || g.map(|v| v * sv));
                self.acc_with(grads, *s, || {
                    let d = kernels::dot(g.data(), self.value(*x).data());
                    Tensor::full(self.shape(*s), d)
                });
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc_with(grads, *a, || kernels::matmul_nt(g, bv).expect("matmul adjoint"));
                self.acc_with(grads, *b, || kernels::matmul_tn(av, g).expect("matmul adjoint"));
            }
            Op::MatMulNt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc_with(grads, *a, || kernels::matmul(g, bv).expect("matmul_nt adjoint"));
                self.acc_with(grads, *b, || kernels::matmul_tn(g, av).expect("matmul_nt adjoint"));
            }
            Op::Transpose(a) => self.acc_with(grads, *a, || g.transpose()),
            Op::SoftmaxRows(a) => self.acc_with(grads, *a, || {
                let c = y.cols();
                let mut out = vec![T::zero(); y.len()];
                for (r, (yr, gr)) in y.data().chunks(c).zip(g.data().chunks(c)).enumerate() {
                    let s = kernels::dot(yr, gr);
                    for j in 0..c {
                        out[r * c + j] = yr[j] * (gr[j] - s);
                    }
                }
                t(y.shape().to_vec(), out)
            }),
            Op::LogSoftmaxRows(a) => self.acc_with(grads, *a, || {
                let c = y.cols();
                let mut out = vec![T::zero(); y.len()];
                for (r, (yr, gr)) in y.data().chunks(c).zip(g.data().chunks(c)).enumerate() {
                    let s: T = gr.iter().copied().sum();
                    for j in 0..c {
                        out[r * c + j] = gr[j] - yr[j].exp() * s;
                    }
                }
                t(y.shape().to_vec(), out)
            }),
            Op::LayerNorm {
                x,
                gain,
                bias,
                cache,
            } => {
                let c = y.cols();
                let rws = y.rows();
                let gv = self.value(*gain).data();
                self.acc_with(grads, *gain, || {
                    let mut s = vec![T::zero(); c];
                    for (gr, xr) in g.data().chunks(c).zip(cache.normalized.chunks(c)) {
                        for j in 0..c {
                            s[j] += gr[j] * xr[j];
                        }
                    }
                    t(vec![c], s)
                });
                self.acc_with(grads, *bias, || {
                    let mut s = vec![T::zero(); c];
                    for gr in g.data().chunks(c) {
                        for j in 0..c {
                            s[j] += gr[j];
                        }
                    }
                    t(vec![c], s)
                });
                self.acc_with(grads, *x, || {
                    let n = T::of(c as f64);
                    let mut out = vec![T::zero(); rws * c];
                    for r in 0..rws {
                        let gr = &g.data()[r * c..(r + 1) * c];
                        let xr = &cache.normalized[r * c..(r + 1) * c];
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..c {
                            let dxh = gr[j] * gv[j];
                            s1 += dxh;
                            s2 += dxh * xr[j];
                        }
                        let k = cache.inv_std[r] / n;
                        for j in 0..c {
                            let dxh = gr[j] * gv[j];
                            out[r * c + j] = k * (n * dxh - s1 - xr[j] * s2);
                        }
                    }
                    t(vec![rws, c], out)
                });
            }
            Op::Gelu { x, eps, rho } => self.acc_with(grads, *x, || {
                zip_map(g, self.value(*x), |gv, xv| gv * kernels::gelu_grad(xv, *eps, *rho))
            }),
            Op::Dropout { x, mask } => self.acc_with(grads, *x, || {
                let data = g.data().iter().zip(mask).map(|(&a, &m)| a * m).collect();
                t(g.shape().to_vec(), data)
            }),
            Op::Conv2d { x, w, b, geo } => {
                let want = self.nodes[x.0].needs_grad
                    || self.nodes[w.0].needs_grad
                    || b.is_some_and(|b| self.nodes[b.0].needs_grad);
                if want {
                    let (dx, dw, db) =
                        kernels::conv2d_backward(self.value(*x), self.value(*w), g, geo);
                    self.acc(grads, *x, dx);
                    self.acc(grads, *w, dw);
                    if let Some(b) = b {
                        self.acc(grads, *b, db);
                    }
                }
            }
            Op::MeanRows(x) => self.acc_with(grads, *x, || {
                let xv = self.value(*x);
                let n = T::of(xv.rows() as f64);
                let row: Vec<T> = g.data().iter().map(|&v| v / n).collect();
                let data = (0..xv.rows()).flat_map(|_| row.iter().copied()).collect();
                t(xv.shape().to_vec(), data)
            }),
            Op::MaxRows { x, argmax } => self.acc_with(grads, *x, || {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut out = vec![T::zero(); xv.len()];
                for (j, &r) in argmax.iter().enumerate() {
                    out[r * c + j] = g.data()[j];
                }
                t(xv.shape().to_vec(), out)
            }),
            Op::SpatialMean(x) => self.acc_with(grads, *x, || {
                let xv = self.value(*x);
                let plane = xv.shape()[1] * xv.shape()[2];
                let n = T::of(plane as f64);
                let data = g
                    .data()
                    .iter()
                    .flat_map(|&v| std::iter::repeat(v / n).take(plane))
                    .collect();
                t(xv.shape().to_vec(), data)
            }),
            Op::Sum(x) => {
                let gv = g.item();
                self.acc_with(grads, *x, || Tensor::full(self.shape(*x), gv));
            }
            Op::Mean(x) => {
                let n = T::of(self.value(*x).len() as f64);
                let gv = g.item() / n;
                self.acc_with(grads, *x, || Tensor::full(self.shape(*x), gv));
            }
            Op::Diag(x) => self.acc_with(grads, *x, || {
                let n = g.len();
                let mut out = vec![T::zero(); n * n];
                for (i, &v) in g.data().iter().enumerate() {
                    out[i * n + i] = v;
                }
                t(vec![n, n], out)
            }),
            Op::SoftThreshold { x, lambda } => {
                let xv = self.value(*x);
                let lam = self.value(*lambda).item();
                self.acc_with(grads, *x, || {
                    zip_map(g, xv, |gv, v| if v.abs() > lam { gv } else { T::zero() })
                });
                self.acc_with(grads, *lambda, || {
                    let mut s = T::zero();
                    for (&gv, &v) in g.data().iter().zip(xv.data()) {
                        if v > lam {
                            s -= gv;
                        } else if v < -lam {
                            s += gv;
                        }
                    }
                    Tensor::full(self.shape(*lambda), s)
                });
            }
            Op::Softplus(x) => self.acc_with(grads, *x, || {
                zip_map(g, self.value(*x), |gv, v| gv * sigmoid(v))
            }),
            Op::Cosine(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (na, nb) = (norm(av.data()), norm(bv.data()));
                if na == T::zero() || nb == T::zero() {
                    return;
                }
                let c = y.item();
                let gv = g.item();
                self.acc_with(grads, *a, || {
                    zip_map(bv, av, |bb, aa| gv * (bb / (na * nb) - c * aa / (na * na)))
                });
                self.acc_with(grads, *b, || {
                    zip_map(av, bv, |aa, bb| gv * (aa / (na * nb) - c * bb / (nb * nb)))
                });
            }
            Op::Dot(a, b) => {
                let gv = g.item();
                self.acc_with(grads, *a, || self.value(*b).map(|v| v * gv));
                self.acc_with(grads, *b, || self.value(*a).map(|v| v * gv));
            }
            Op::Cols { x, start } => self.acc_with(grads, *x, || {
                let xv = self.value(*x);
                let (c, len) = (xv.cols(), g.cols());
                let mut out = vec![T::zero(); xv.len()];
                for r in 0..xv.rows() {
                    out[r * c + start..r * c + start + len].copy_from_slice(g.row(r));
                }
                t(xv.shape().to_vec(), out)
            }),
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    self.acc_with(grads, p, || {
                        let mut data = Vec::with_capacity(g.rows() * pc);
                        for r in 0..g.rows() {
                            data.extend_from_slice(&g.row(r)[offset..offset + pc]);
                        }
                        t(vec![g.rows(), pc], data)
                    });
                    offset += pc;
                }
            }
            Op::Reshape(x) => self.acc_with(grads, *x, || {
                t(self.shape(*x).to_vec(), g.data().to_vec())
            }),
            Op::ChannelBilinear { x, y: yv, k } => {
                let (xv, yt) = (self.value(*x), self.value(*yv));
                let (s1, s2, w) = (xv.rows(), yt.rows(), xv.cols());
                let r = w / k;
                self.acc_with(grads, *x, || {
                    let mut out = vec![T::zero(); s1 * w];
                    for c in 0..*k {
                        for a in 0..s1 {
                            let grow = &g.data()[(c * s1 + a) * s2..(c * s1 + a + 1) * s2];
                            let dst = &mut out[a * w + c * r..a * w + (c + 1) * r];
                            for (b, &gv) in grow.iter().enumerate() {
                                let src = &yt.row(b)[c * r..(c + 1) * r];
                                for (d, &s) in dst.iter_mut().zip(src) {
                                    *d += gv * s;
                                }
                            }
                        }
                    }
                    t(vec![s1, w], out)
                });
                self.acc_with(grads, *yv, || {
                    let mut out = vec![T::zero(); s2 * w];
                    for c in 0..*k {
                        for a in 0..s1 {
                            let grow = &g.data()[(c * s1 + a) * s2..(c * s1 + a + 1) * s2];
                            let src = &xv.row(a)[c * r..(c + 1) * r];
                            for (b, &gv) in grow.iter().enumerate() {
                                let dst = &mut out[b * w + c * r..b * w + (c + 1) * r];
                                for (d, &s) in dst.iter_mut().zip(src) {
                                    *d += gv * s;
                                }
                            }
                        }
                    }
                    t(vec![s2, w], out)
                });
            }
            Op::Crop3(x) => self.acc_with(grads, *x, || {
                let xv = self.value(*x);
                let (k, cap1, cap2) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let (s1, s2) = (g.shape()[1], g.shape()[2]);
                let mut out = vec![T::zero(); xv.len()];
                for c in 0..k {
                    for i in 0..s1 {
                        let dst = (c * cap1 + i) * cap2;
                        let src = (c * s1 + i) * s2;
                        out[dst..dst + s2].copy_from_slice(&g.data()[src..src + s2]);
                    }
                }
                t(xv.shape().to_vec(), out)
            }),
            Op::Grid(op) => self.propagate_grid(op, g, grads),
        }
    }

    fn propagate_grid(&self, op: &GridOp<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let nc = op.cols.len();
        type Cell<T> = (Vec<Option<Tensor<T>>>, Vec<Option<Tensor<T>>>, Vec<Option<Tensor<T>>>);
        let cells: Vec<Option<Cell<T>>> = op
            .tapes
            .par_iter()
            .enumerate()
            .map(|(idx, lt)| {
                let gv = g.data()[idx];
                if gv == T::zero() {
                    return None;
                }
                let lg = lt.graph.backward_with(lt.out, Tensor::full(&[1], gv));
                let pick = |vs: &[Var]| vs.iter().map(|&v| lg.get(v).cloned()).collect();
                Some((pick(&lt.rows), pick(&lt.cols), pick(&lt.shared)))
            })
            .collect();
        // fixed-order reduction
        for (idx, cell) in cells.into_iter().enumerate() {
            let Some((rg, cg, sg)) = cell else { continue };
            let (i, j) = (idx / nc, idx % nc);
            let targets = op.rows[i].iter().zip(rg).chain(op.cols[j].iter().zip(cg));
            for (&v, gr) in targets.chain(op.shared.iter().zip(sg)) {
                if let Some(gr) = gr {
                    self.acc(grads, v, gr);
                }
            }
        }
    }
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    t(a.shape().to_vec(), data)
}

fn norm<T: Real>(x: &[T]) -> T {
    kernels::dot(x, x).sqrt()
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub(crate) fn softplus<T: Real>(x: T) -> T {
    // log(1 + e^x) without overflow
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Adjoints produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the root with respect to `v`; `None` when `v` does not
    /// require gradients or does not influence the root.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Like [`get`](Self::get) but yields zeros shaped like the node when
    /// no gradient flowed.
    pub fn get_or_zeros(&self, graph: &Graph<T>, v: Var) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(graph.shape(v)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn leaf_gradient_shapes_match_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::randn(&[3, 4], 1.0, &mut rng));
        let b = g.param(Tensor::randn(&[4, 2], 1.0, &mut rng));
        let c = g.matmul(a, b).unwrap();
        let s = g.sum(c);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap().shape(), &[3, 4]);
        assert_eq!(grads.get(b).unwrap().shape(), &[4, 2]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::full(&[2], 1.0));
        let b = g.param(Tensor::full(&[2], 3.0));
        let p = g.mul(a, b).unwrap();
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn inference_graph_tracks_nothing() {
        let mut g = Graph::<f64>::inference();
        let a = g.param(Tensor::full(&[2], 1.0));
        let s = g.sum(a);
        assert!(!g.requires_grad(s));
        let grads = g.backward(s).unwrap();
        assert!(grads.get(a).is_none());
    }

    #[test]
    fn reused_node_accumulates() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::new(vec![2], vec![1.5, -2.0]).unwrap());
        let sq = g.mul(a, a).unwrap();
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[3.0, -4.0]);
    }

    #[test]
    fn dropout_zero_rate_is_identity_and_mask_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::full(&[1000], 1.0));
        assert_eq!(g.dropout(x, 0.0, &mut rng).unwrap(), x);
        let d = g.dropout(x, 0.1, &mut rng).unwrap();
        let v = g.value(d);
        assert!(v.data().iter().all(|&e| e == 0.0 || (e - 1.0 / 0.9).abs() < 1e-12));
        let dropped = v.data().iter().filter(|&&e| e == 0.0).count();
        assert!((50..150).contains(&dropped), "dropped {dropped}");
    }

    #[test]
    fn cosine_of_zero_vector_is_zero() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::zeros(&[3]));
        let b = g.param(Tensor::full(&[3], 1.0));
        let c = g.cosine(a, b).unwrap();
        assert_eq!(g.value(c).item(), 0.0);
        let grads = g.backward(c).unwrap();
        assert!(grads.get(a).is_none());
    }

    #[test]
    fn pair_grid_matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = Graph::<f64>::new();
        let rows: Vec<Var> = (0..3).map(|_| g.param(Tensor::randn(&[4], 1.0, &mut rng))).collect();
        let cols: Vec<Var> = (0..2).map(|_| g.param(Tensor::randn(&[4], 1.0, &mut rng))).collect();
        let w = g.param(Tensor::randn(&[4], 1.0, &mut rng));
        let f: Arc<PairFn<f64>> = Arc::new(|lg, r, c, s| {
            let p = lg.mul(r[0], s[0])?;
            lg.dot(p, c[0])
        });
        let grid = g
            .pair_grid(
                rows.iter().map(|&v| vec![v]).collect(),
                cols.iter().map(|&v| vec![v]).collect(),
                vec![w],
                f,
            )
            .unwrap();
        let loss = g.sum(grid);
        let grads = g.backward(loss).unwrap();

        let mut h = Graph::<f64>::new();
        let hr: Vec<Var> = rows.iter().map(|&v| h.param(g.value(v).clone())).collect();
        let hc: Vec<Var> = cols.iter().map(|&v| h.param(g.value(v).clone())).collect();
        let hw = h.param(g.value(w).clone());
        let mut terms = Vec::new();
        for &r in &hr {
            for &c in &hc {
                let p = h.mul(r, hw).unwrap();
                terms.push(h.dot(p, c).unwrap());
            }
        }
        let mut total = terms[0];
        for &term in &terms[1..] {
            total = h.add(total, term).unwrap();
        }
        let hgrads = h.backward(total).unwrap();
        assert!((g.value(loss).item() - h.value(total).item()).abs() < 1e-12);
        for (a, b) in rows.iter().chain(&cols).chain([&w]).zip(hr.iter().chain(&hc).chain([&hw])) {
            let (ga, gb) = (grads.get(*a).unwrap(), hgrads.get(*b).unwrap());
            for (x, y) in ga.data().iter().zip(gb.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0f64) - 2f64.ln()).abs() < 1e-15);
        assert!((softplus(800.0f64) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0f64) >= 0.0);
    }
}
