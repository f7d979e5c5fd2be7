//! Elementwise, reduction, shape and matrix operations.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::tensor::{Backward, Tensor};

/// How `rhs` repeats against `lhs` in a binary op: equal shapes, a shape
/// suffix (e.g. a bias row against a matrix), or a one-element scalar.
fn broadcast_len(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<usize> {
    let rn: usize = rhs.iter().product();
    if lhs == rhs || rn == 1 {
        return Ok(rn);
    }
    if rhs.len() <= lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs {
        return Ok(rn);
    }
    Err(Error::shape(op, format!("{lhs:?} vs {rhs:?}")))
}

fn reduce_repeats<T: Scalar>(g: &[T], rn: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rn];
    for chunk in g.chunks(rn) {
        out.iter_mut().zip(chunk).for_each(|(o, &v)| *o += v);
    }
    out
}

#[derive(Clone, Copy)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

struct BinaryBackward {
    kind: BinaryKind,
    rn: usize,
}

impl<T: Scalar> Backward<T> for BinaryBackward {
    fn backward(&self, _out: &Tensor<T>, g: &[T], parents: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        let (lhs, rhs) = (&parents[0], &parents[1]);
        let rn = self.rn;
        match self.kind {
            BinaryKind::Add | BinaryKind::Sub => {
                let gl = lhs.requires_grad().then(|| g.to_vec());
                let gr = rhs.requires_grad().then(|| {
                    let mut r = reduce_repeats(g, rn);
                    if matches!(self.kind, BinaryKind::Sub) {
                        r.iter_mut().for_each(|v| *v = -*v);
                    }
                    r
                });
                vec![gl, gr]
            }
            BinaryKind::Mul => {
                let ld = lhs.data();
                let rd = rhs.data();
                let gl = lhs
                    .requires_grad()
                    .then(|| g.iter().enumerate().map(|(i, &gi)| gi * rd[i % rn]).collect());
                let gr = rhs.requires_grad().then(|| {
                    let mut out = vec![T::zero(); rn];
                    for (i, (&gi, &li)) in g.iter().zip(ld.iter()).enumerate() {
                        out[i % rn] += gi * li;
                    }
                    out
                });
                vec![gl, gr]
            }
        }
    }
}

struct ScaleBackward<T>(T);

impl<T: Scalar> Backward<T> for ScaleBackward<T> {
    fn backward(&self, _out: &Tensor<T>, g: &[T], _p: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        vec![Some(g.iter().map(|&v| v * self.0).collect())]
    }
}

struct PassBackward;

impl<T: Scalar> Backward<T> for PassBackward {
    fn backward(&self, _out: &Tensor<T>, g: &[T], _p: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        vec![Some(g.to_vec())]
    }
}

#[derive(Clone, Copy, Debug)]
enum UnaryKind {
    Relu,
    Silu,
    Sigmoid,
    Exp,
    Ln,
    Square,
}

struct UnaryBackward(UnaryKind);

impl<T: Scalar> Backward<T> for UnaryBackward {
    fn backward(&self, out: &Tensor<T>, g: &[T], p: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        let x = p[0].data();
        let y = out.data();
        let one = T::one();
        let two = one + one;
        let grad = g
            .iter()
            .zip(x.iter().zip(y.iter()))
            .map(|(&gi, (&xi, &yi))| {
                gi * match self.0 {
                    UnaryKind::Relu => {
                        if xi > T::zero() {
                            one
                        } else {
                            T::zero()
                        }
                    }
                    UnaryKind::Silu => {
                        let s = sigmoid(xi);
                        s * (one + xi * (one - s))
                    }
                    UnaryKind::Sigmoid => yi * (one - yi),
                    UnaryKind::Exp => yi,
                    UnaryKind::Ln => one / xi,
                    UnaryKind::Square => two * xi,
                }
            })
            .collect();
        vec![Some(grad)]
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

struct SumBackward;

impl<T: Scalar> Backward<T> for SumBackward {
    fn backward(&self, _out: &Tensor<T>, g: &[T], p: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        vec![Some(vec![g[0]; p[0].numel()])]
    }
}

struct PermuteBackward {
    in_shape: Vec<usize>,
    axes: Vec<usize>,
}

impl<T: Scalar> Backward<T> for PermuteBackward {
    fn backward(&self, _out: &Tensor<T>, g: &[T], _p: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        let mut inverse = vec![0; self.axes.len()];
        for (i, &a) in self.axes.iter().enumerate() {
            inverse[a] = i;
        }
        let out_shape: Vec<usize> = self.axes.iter().map(|&a| self.in_shape[a]).collect();
        vec![Some(permute_data(g, &out_shape, &inverse))]
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_data<T: Scalar>(data: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..n {
        out.push(data[offset]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

struct MatmulBackward {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
}

impl<T: Scalar> Backward<T> for MatmulBackward {
    fn backward(&self, _out: &Tensor<T>, g: &[T], p: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        let (a, b) = (&p[0], &p[1]);
        let (m, k, n) = (self.m, self.k, self.n);
        let ad = a.data();
        let bd = b.data();
        let ga = a.requires_grad().then(|| {
            let mut out = vec![T::zero(); self.batch * m * k];
            for i in 0..self.batch {
                // dA = dC @ B^T
                T::gemm(
                    m,
                    n,
                    k,
                    T::one(),
                    &g[i * m * n..(i + 1) * m * n],
                    n as isize,
                    1,
                    &bd[i * k * n..(i + 1) * k * n],
                    1,
                    n as isize,
                    T::zero(),
                    &mut out[i * m * k..(i + 1) * m * k],
                    k as isize,
                    1,
                );
            }
            out
        });
        let gb = b.requires_grad().then(|| {
            let mut out = vec![T::zero(); self.batch * k * n];
            for i in 0..self.batch {
                // dB = A^T @ dC
                T::gemm(
                    k,
                    m,
                    n,
                    T::one(),
                    &ad[i * m * k..(i + 1) * m * k],
                    1,
                    k as isize,
                    &g[i * m * n..(i + 1) * m * n],
                    n as isize,
                    1,
                    T::zero(),
                    &mut out[i * k * n..(i + 1) * k * n],
                    n as isize,
                    1,
                );
            }
            out
        });
        vec![ga, gb]
    }
}

struct ConcatBackward {
    outer: usize,
    inner: usize,
    sizes: Vec<usize>,
}

impl<T: Scalar> Backward<T> for ConcatBackward {
    fn backward(&self, _out: &Tensor<T>, g: &[T], p: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        let total: usize = self.sizes.iter().sum();
        let mut start = 0;
        let mut grads = Vec::with_capacity(p.len());
        for (t, &sz) in p.iter().zip(&self.sizes) {
            if t.requires_grad() {
                let mut out = Vec::with_capacity(self.outer * sz * self.inner);
                for o in 0..self.outer {
                    let base = (o * total + start) * self.inner;
                    out.extend_from_slice(&g[base..base + sz * self.inner]);
                }
                grads.push(Some(out));
            } else {
                grads.push(None);
            }
            start += sz;
        }
        grads
    }
}

struct SliceBackward {
    outer: usize,
    inner: usize,
    axis_len: usize,
    start: usize,
    len: usize,
}

impl<T: Scalar> Backward<T> for SliceBackward {
    fn backward(&self, _out: &Tensor<T>, g: &[T], _p: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        let mut out = vec![T::zero(); self.outer * self.axis_len * self.inner];
        let block = self.len * self.inner;
        for o in 0..self.outer {
            let dst = (o * self.axis_len + self.start) * self.inner;
            out[dst..dst + block].copy_from_slice(&g[o * block..(o + 1) * block]);
        }
        vec![Some(out)]
    }
}

struct SelectRowsBackward {
    rows: usize,
    width: usize,
    indices: Vec<usize>,
}

impl<T: Scalar> Backward<T> for SelectRowsBackward {
    fn backward(&self, _out: &Tensor<T>, g: &[T], _p: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        let w = self.width;
        let mut out = vec![T::zero(); self.rows * w];
        for (k, &r) in self.indices.iter().enumerate() {
            out[r * w..(r + 1) * w]
                .iter_mut()
                .zip(&g[k * w..(k + 1) * w])
                .for_each(|(o, &v)| *o += v);
        }
        vec![Some(out)]
    }
}

struct SoftmaxBackward {
    width: usize,
}

impl<T: Scalar> Backward<T> for SoftmaxBackward {
    fn backward(&self, out: &Tensor<T>, g: &[T], _p: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        let y = out.data();
        let w = self.width;
        let mut grad = vec![T::zero(); y.len()];
        for ((gr, yr), dst) in g.chunks(w).zip(y.chunks(w)).zip(grad.chunks_mut(w)) {
            let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
            for ((d, &gi), &yi) in dst.iter_mut().zip(gr).zip(yr) {
                *d = yi * (gi - dot);
            }
        }
        vec![Some(grad)]
    }
}

struct LayerNormBackward<T> {
    width: usize,
    normalized: Vec<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> Backward<T> for LayerNormBackward<T> {
    fn backward(&self, _out: &Tensor<T>, g: &[T], p: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        let w = self.width;
        let gamma = p[1].data();
        let wn = T::from_usize(w).unwrap();
        let gx = p[0].requires_grad().then(|| {
            let mut out = vec![T::zero(); g.len()];
            for (r, (gr, dst)) in g.chunks(w).zip(out.chunks_mut(w)).enumerate() {
                let xh = &self.normalized[r * w..(r + 1) * w];
                let dxh: Vec<T> = gr.iter().zip(gamma.iter()).map(|(&a, &b)| a * b).collect();
                let mean_d: T = dxh.iter().copied().sum::<T>() / wn;
                let mean_dx: T = dxh.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / wn;
                for i in 0..w {
                    dst[i] = self.inv_std[r] * (dxh[i] - mean_d - xh[i] * mean_dx);
                }
            }
            out
        });
        let ggamma = p[1].requires_grad().then(|| {
            let mut out = vec![T::zero(); w];
            for (gr, xh) in g.chunks(w).zip(self.normalized.chunks(w)) {
                for i in 0..w {
                    out[i] += gr[i] * xh[i];
                }
            }
            out
        });
        let gbeta = p[2].requires_grad().then(|| reduce_repeats(g, w));
        vec![gx, ggamma, gbeta]
    }
}

impl<T: Scalar> Tensor<T> {
    fn binary(&self, rhs: &Tensor<T>, kind: BinaryKind, name: &'static str) -> Result<Tensor<T>> {
        let rn = broadcast_len(name, self.shape(), rhs.shape())?;
        let data = {
            let l = self.data();
            let r = rhs.data();
            l.iter()
                .enumerate()
                .map(|(i, &a)| {
                    let b = r[i % rn];
                    match kind {
                        BinaryKind::Add => a + b,
                        BinaryKind::Sub => a - b,
                        BinaryKind::Mul => a * b,
                    }
                })
                .collect()
        };
        Tensor::from_op(
            name,
            data,
            self.shape().to_vec(),
            vec![self.clone(), rhs.clone()],
            Box::new(BinaryBackward { kind, rn }),
        )
    }

    /// Elementwise sum; `rhs` may be a trailing-shape suffix or a scalar.
    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(rhs, BinaryKind::Add, "add")
    }

    pub fn sub(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(rhs, BinaryKind::Sub, "sub")
    }

    pub fn mul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(rhs, BinaryKind::Mul, "mul")
    }

    pub fn scale(&self, s: T) -> Result<Tensor<T>> {
        let data = self.data().iter().map(|&v| v * s).collect();
        Tensor::from_op(
            "scale",
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(ScaleBackward(s)),
        )
    }

    pub fn add_scalar(&self, s: T) -> Result<Tensor<T>> {
        let data = self.data().iter().map(|&v| v + s).collect();
        Tensor::from_op(
            "add_scalar",
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(PassBackward),
        )
    }

    fn unary(&self, kind: UnaryKind, name: &'static str) -> Result<Tensor<T>> {
        let data = self
            .data()
            .iter()
            .map(|&x| match kind {
                UnaryKind::Relu => x.max(T::zero()),
                UnaryKind::Silu => x * sigmoid(x),
                UnaryKind::Sigmoid => sigmoid(x),
                UnaryKind::Exp => x.exp(),
                UnaryKind::Ln => x.ln(),
                UnaryKind::Square => x * x,
            })
            .collect();
        Tensor::from_op(
            name,
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(UnaryBackward(kind)),
        )
    }

    pub fn relu(&self) -> Result<Tensor<T>> {
        self.unary(UnaryKind::Relu, "relu")
    }

    /// `x * sigmoid(x)`; smooth everywhere, unlike `relu`.
    pub fn silu(&self) -> Result<Tensor<T>> {
        self.unary(UnaryKind::Silu, "silu")
    }

    pub fn sigmoid(&self) -> Result<Tensor<T>> {
        self.unary(UnaryKind::Sigmoid, "sigmoid")
    }

    pub fn exp(&self) -> Result<Tensor<T>> {
        self.unary(UnaryKind::Exp, "exp")
    }

    pub fn ln(&self) -> Result<Tensor<T>> {
        self.unary(UnaryKind::Ln, "ln")
    }

    pub fn square(&self) -> Result<Tensor<T>> {
        self.unary(UnaryKind::Square, "square")
    }

    pub fn sum(&self) -> Result<Tensor<T>> {
        let s = self.data().iter().copied().sum();
        Tensor::from_op("sum", vec![s], vec![1], vec![self.clone()], Box::new(SumBackward))
    }

    pub fn mean(&self) -> Result<Tensor<T>> {
        let n = T::from_usize(self.numel().max(1)).unwrap();
        self.sum()?.scale(T::one() / n)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape())));
        }
        Tensor::from_op(
            "reshape",
            self.to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            Box::new(PassBackward),
        )
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<T>> {
        let rank = self.ndim();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape("permute", format!("axes {axes:?} for rank {rank}")));
        }
        let data = permute_data(&self.data(), self.shape(), axes);
        let out_shape = axes.iter().map(|&a| self.shape()[a]).collect();
        Tensor::from_op(
            "permute",
            data,
            out_shape,
            vec![self.clone()],
            Box::new(PermuteBackward {
                in_shape: self.shape().to_vec(),
                axes: axes.to_vec(),
            }),
        )
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Tensor<T>> {
        let rank = self.ndim();
        if rank < 2 {
            return Err(Error::shape("transpose", format!("rank {rank}")));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(&axes)
    }

    /// `(m,k) @ (k,n)` or batched `(b,m,k) @ (b,k,n)`.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (batch, m, k, k2, n) = match (self.shape(), rhs.shape()) {
            ([m, k], [k2, n]) => (1, *m, *k, *k2, *n),
            ([b, m, k], [b2, k2, n]) if b == b2 => (*b, *m, *k, *k2, *n),
            (a, b) => return Err(Error::shape("matmul", format!("{a:?} @ {b:?}"))),
        };
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} @ {:?}", self.shape(), rhs.shape()),
            ));
        }
        let mut out = vec![T::zero(); batch * m * n];
        {
            let a = self.data();
            let b = rhs.data();
            for i in 0..batch {
                T::gemm(
                    m,
                    k,
                    n,
                    T::one(),
                    &a[i * m * k..(i + 1) * m * k],
                    k as isize,
                    1,
                    &b[i * k * n..(i + 1) * k * n],
                    n as isize,
                    1,
                    T::zero(),
                    &mut out[i * m * n..(i + 1) * m * n],
                    n as isize,
                    1,
                );
            }
        }
        let shape = if self.ndim() == 2 {
            vec![m, n]
        } else {
            vec![batch, m, n]
        };
        Tensor::from_op(
            "matmul",
            out,
            shape,
            vec![self.clone(), rhs.clone()],
            Box::new(MatmulBackward { batch, m, k, n }),
        )
    }

    /// `x @ W + b` over the last axis of `x`, broadcasting leading axes.
    pub fn linear(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let (&n_in, lead) = self
            .shape()
            .split_last()
            .ok_or_else(|| Error::shape("linear", "scalar input"))?;
        let [w_in, n_out] = *weight.shape() else {
            return Err(Error::shape("linear", format!("weight shape {:?}", weight.shape())));
        };
        if w_in != n_in {
            return Err(Error::shape(
                "linear",
                format!("input {:?} vs weight {:?}", self.shape(), weight.shape()),
            ));
        }
        if let Some(b) = bias {
            if b.shape() != [n_out] {
                return Err(Error::shape("linear", format!("bias {:?}", b.shape())));
            }
        }
        let rows: usize = lead.iter().product();
        let x2 = if self.ndim() == 2 {
            self.clone()
        } else {
            self.reshape(&[rows, n_in])?
        };
        let mut y = x2.matmul(weight)?;
        if let Some(b) = bias {
            y = y.add(b)?;
        }
        let mut out_shape = lead.to_vec();
        out_shape.push(n_out);
        if self.ndim() == 2 {
            Ok(y)
        } else {
            y.reshape(&out_shape)
        }
    }

    /// Joins tensors along `axis`; all other axes must agree.
    pub fn concat(parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let rank = first.ndim();
        if axis >= rank {
            return Err(Error::shape("concat", format!("axis {axis} for rank {rank}")));
        }
        for p in parts {
            let ok = p.ndim() == rank && (0..rank).all(|d| d == axis || p.shape()[d] == first.shape()[d]);
            if !ok {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs {:?} on axis {axis}", first.shape(), p.shape()),
                ));
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        let guards: Vec<_> = parts.iter().map(|p| p.data()).collect();
        for o in 0..outer {
            for (g, &sz) in guards.iter().zip(&sizes) {
                out.extend_from_slice(&g[o * sz * inner..(o + 1) * sz * inner]);
            }
        }
        drop(guards);
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        Tensor::from_op(
            "concat",
            out,
            shape,
            parts.to_vec(),
            Box::new(ConcatBackward { outer, inner, sizes }),
        )
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts.first().ok_or_else(|| Error::shape("stack", "no inputs"))?;
        let mut shape = vec![1];
        shape.extend_from_slice(first.shape());
        let expanded = parts
            .iter()
            .map(|p| p.reshape(&[&[1], p.shape()].concat()))
            .collect::<Result<Vec<_>>>()?;
        if expanded.iter().any(|p| p.shape() != shape.as_slice()) {
            return Err(Error::shape("stack", "inputs differ in shape"));
        }
        Tensor::concat(&expanded, 0)
    }

    /// Contiguous range `[start, start+len)` of `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        let rank = self.ndim();
        if axis >= rank || start + len > self.shape()[axis] {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {}) of axis {axis} in {:?}", start + len, self.shape()),
            ));
        }
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let axis_len = self.shape()[axis];
        let block = len * inner;
        let mut out = Vec::with_capacity(outer * block);
        {
            let d = self.data();
            for o in 0..outer {
                let src = (o * axis_len + start) * inner;
                out.extend_from_slice(&d[src..src + block]);
            }
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Tensor::from_op(
            "slice",
            out,
            shape,
            vec![self.clone()],
            Box::new(SliceBackward {
                outer,
                inner,
                axis_len,
                start,
                len,
            }),
        )
    }

    /// Gathers rows of a 2-D table (embedding lookup).
    pub fn select_rows(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let [rows, width] = *self.shape() else {
            return Err(Error::shape("select_rows", format!("{:?}", self.shape())));
        };
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::IndexOutOfRange {
                what: "select_rows",
                index: bad,
                len: rows,
            });
        }
        let mut out = Vec::with_capacity(indices.len() * width);
        {
            let d = self.data();
            for &r in indices {
                out.extend_from_slice(&d[r * width..(r + 1) * width]);
            }
        }
        Tensor::from_op(
            "select_rows",
            out,
            vec![indices.len(), width],
            vec![self.clone()],
            Box::new(SelectRowsBackward {
                rows,
                width,
                indices: indices.to_vec(),
            }),
        )
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&self) -> Result<Tensor<T>> {
        let w = *self
            .shape()
            .last()
            .ok_or_else(|| Error::shape("softmax", "scalar input"))?;
        if w == 0 {
            return Err(Error::shape("softmax", "empty last axis"));
        }
        let out = {
            let d = self.data();
            let mut out = Vec::with_capacity(d.len());
            for row in d.chunks(w) {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let start = out.len();
                let mut total = T::zero();
                for &v in row {
                    let e = (v - max).exp();
                    total += e;
                    out.push(e);
                }
                out[start..].iter_mut().for_each(|v| *v /= total);
            }
            out
        };
        Tensor::from_op(
            "softmax",
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(SoftmaxBackward { width: w }),
        )
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&self, gamma: &Tensor<T>, beta: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
        let w = *self
            .shape()
            .last()
            .ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
        if gamma.shape() != [w] || beta.shape() != [w] {
            return Err(Error::shape(
                "layer_norm",
                format!("width {w}, gamma {:?}, beta {:?}", gamma.shape(), beta.shape()),
            ));
        }
        let wn = T::from_usize(w).unwrap();
        let (out, normalized, inv_std) = {
            let d = self.data();
            let g = gamma.data();
            let b = beta.data();
            let rows = d.len() / w;
            let mut out = Vec::with_capacity(d.len());
            let mut normalized = Vec::with_capacity(d.len());
            let mut inv_std = Vec::with_capacity(rows);
            for row in d.chunks(w) {
                let mean = row.iter().copied().sum::<T>() / wn;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / wn;
                let is = T::one() / (var + eps).sqrt();
                inv_std.push(is);
                for (i, &v) in row.iter().enumerate() {
                    let xh = (v - mean) * is;
                    normalized.push(xh);
                    out.push(xh * g[i] + b[i]);
                }
            }
            (out, normalized, inv_std)
        };
        Tensor::from_op(
            "layer_norm",
            out,
            self.shape().to_vec(),
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(LayerNormBackward {
                width: w,
                normalized,
                inv_std,
            }),
        )
    }
}
