//! Reverse-mode differentiation over an append-only tape.
//!
//! Every operation pushes a node holding its forward value and whatever it
//! needs for the backward pass. Nodes only reference earlier nodes, so the
//! reverse of insertion order is a valid topological order.

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Clamp applied to probabilities inside the binary cross-entropy.
pub const BCE_EPS: f64 = 1e-7;
/// Variance floor of instance normalization.
pub const NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    Upsample2x(Var),
    InstanceNorm {
        x: Var,
        inv_std: Vec<T>,
    },
    LeakyRelu {
        x: Var,
        slope: T,
    },
    Sigmoid(Var),
    Concat(Var, Var),
    Bce {
        pred: Var,
        target: Vec<T>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Mean(Var),
    SampleMean(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Output size of a convolution along one axis, `None` when the kernel does not fit.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    (input + 2 * pad)
        .checked_sub(kernel)
        .filter(|_| stride > 0)
        .map(|v| v / stride + 1)
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Source pixel for output coordinate `o` and kernel tap `t` along one axis.
    fn src(&self, o: usize, t: usize, limit: usize) -> Option<usize> {
        (o * self.stride + t).checked_sub(self.pad).filter(|&i| i < limit)
    }

    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let p = self.cols();
        for ci in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = ((ci * self.k + ky) * self.k + kx) * p;
                    for oy in 0..self.ho {
                        let dst = &mut cols[row + oy * self.wo..row + (oy + 1) * self.wo];
                        match self.src(oy, ky, self.h) {
                            None => dst.fill(T::zero()),
                            Some(iy) => {
                                let plane = &x[(ci * self.h + iy) * self.w..(ci * self.h + iy + 1) * self.w];
                                for (ox, d) in dst.iter_mut().enumerate() {
                                    *d = self.src(ox, kx, self.w).map_or(T::zero(), |ix| plane[ix]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, cols: &[T], dx: &mut [T]) {
        let p = self.cols();
        for ci in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = ((ci * self.k + ky) * self.k + kx) * p;
                    for oy in 0..self.ho {
                        let Some(iy) = self.src(oy, ky, self.h) else { continue };
                        let base = (ci * self.h + iy) * self.w;
                        for ox in 0..self.wo {
                            if let Some(ix) = self.src(ox, kx, self.w) {
                                dx[base + ix] += cols[row + oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn add_into<T: Scalar>(dst: &mut Option<Vec<T>>, len: usize, delta: impl IntoIterator<Item = T>) {
    let g = dst.get_or_insert_with(|| vec![T::zero(); len]);
    for (a, d) in g.iter_mut().zip(delta) {
        *a += d;
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. It collects gradients iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t.detached(),
            grad: None,
            requires_grad: t.requires_grad(),
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that never collects gradients.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let t = t.detached();
        self.nodes.push(Node {
            value: t,
            grad: None,
            requires_grad: false,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies `v`'s value into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.detached();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let [n, c, h, wd] = self.value(x).dims4()?;
        let [cout, cin, k, k2] = self.value(w).dims4()?;
        if cin != c || k != k2 || self.value(b).shape() != [cout] {
            return Err(Error::Shape(format!(
                "conv2d input {:?} weights {:?} bias {:?}",
                self.value(x).shape(),
                self.value(w).shape(),
                self.value(b).shape()
            )));
        }
        let (Some(ho), Some(wo)) = (conv_out_size(h, k, stride, pad), conv_out_size(wd, k, stride, pad)) else {
            return Err(Error::Shape(format!(
                "kernel {k} stride {stride} pad {pad} does not fit a {h}x{wd} input"
            )));
        };
        let g = ConvGeom { c, h, w: wd, k, stride, pad, ho, wo };
        let (rows, p) = (g.rows(), g.cols());
        let mut out = vec![T::zero(); n * cout * p];
        let mut cols = vec![T::zero(); rows * p];
        {
            let xs = self.value(x).data();
            let ws = self.value(w).data();
            let bs = self.value(b).data();
            for s in 0..n {
                g.im2col(&xs[s * c * h * wd..(s + 1) * c * h * wd], &mut cols);
                let o = &mut out[s * cout * p..(s + 1) * cout * p];
                for (oc, plane) in o.chunks_mut(p).enumerate() {
                    plane.fill(bs[oc]);
                }
                T::gemm(cout, rows, p, T::one(), ws, (rows as isize, 1), &cols, (p as isize, 1), T::one(), o, (p as isize, 1));
            }
        }
        let value = Tensor::from_vec(&[n, cout, ho, wo], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, stride, pad }, &[x, w, b]))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); n * c * 4 * h * w];
        for plane in 0..n * c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(plane * 2 * h + y) * 2 * w + xx] = src[(plane * h + y / 2) * w + xx / 2];
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, 2 * h, 2 * w], out)?;
        Ok(self.push(value, Op::Upsample2x(x), &[x]))
    }

    /// Per-sample, per-channel standardization without affine parameters.
    pub fn instance_norm(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let m = h * w;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        let mut inv_std = Vec::with_capacity(n * c);
        let mt = T::lit(m as f64);
        for (plane, dst) in src.chunks(m).zip(out.chunks_mut(m)) {
            let mean = plane.iter().copied().sum::<T>() / mt;
            let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / mt;
            let is = T::one() / (var + T::lit(NORM_EPS)).sqrt();
            for (d, &v) in dst.iter_mut().zip(plane) {
                *d = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let value = Tensor::from_vec(&[n, c, h, w], out)?;
        Ok(self.push(value, Op::InstanceNorm { x, inv_std }, &[x]))
    }

    /// `max(x, 0) + slope * min(x, 0)`; slope 0 is a plain ReLU.
    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| if v > T::zero() { v } else { v * slope }).collect();
        let value = Tensor::from_vec(src.shape(), data).expect("same shape");
        self.push(value, Op::LeakyRelu { x, slope }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| sigmoid(v)).collect();
        let value = Tensor::from_vec(src.shape(), data).expect("same shape");
        self.push(value, Op::Sigmoid(x), &[x])
    }

    /// Concatenates two `[n, c, h, w]` tensors along channels.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, ca, h, w] = self.value(a).dims4()?;
        let [nb, cb, hb, wb] = self.value(b).dims4()?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::Shape(format!(
                "concat {:?} with {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let m = h * w;
        let mut out = Vec::with_capacity(n * (ca + cb) * m);
        for s in 0..n {
            out.extend_from_slice(&da[s * ca * m..(s + 1) * ca * m]);
            out.extend_from_slice(&db[s * cb * m..(s + 1) * cb * m]);
        }
        let value = Tensor::from_vec(&[n, ca + cb, h, w], out)?;
        Ok(self.push(value, Op::Concat(a, b), &[a, b]))
    }

    /// Mean binary cross-entropy of `pred` against a constant `target`,
    /// with `pred` clamped to `[BCE_EPS, 1 - BCE_EPS]`.
    pub fn bce(&mut self, pred: Var, target: &[T]) -> Result<Var> {
        let p = self.value(pred).data();
        if p.len() != target.len() {
            return Err(Error::Shape(format!(
                "bce prediction has {} elements, target {}",
                p.len(),
                target.len()
            )));
        }
        let loss = bce_value(p, target);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                pred,
                target: target.to_vec(),
            },
            &[pred],
        ))
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() == self.value(b).shape() {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "elementwise op on {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )))
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::from_vec(self.value(a).shape(), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::from_vec(self.value(a).shape(), data)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, k: T) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| v * k).collect();
        let value = Tensor::from_vec(src.shape(), data).expect("same shape");
        self.push(value, Op::Scale(x, k), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().copied().sum::<T>() / T::lit(t.numel() as f64);
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Mean over every axis but the first: `[n, ...]` to `[n]`.
    pub fn sample_mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let Some(&n) = t.shape().first().filter(|&&n| n > 0) else {
            return Err(Error::Shape(format!("sample_mean on shape {:?}", t.shape())));
        };
        let m = t.numel() / n;
        let data = t.data().chunks(m).map(|c| c.iter().copied().sum::<T>() / T::lit(m as f64)).collect();
        let value = Tensor::from_vec(&[n], data)?;
        Ok(self.push(value, Op::SampleMean(x), &[x]))
    }

    /// Populates gradients of `loss` with respect to every node that depends
    /// on a trainable leaf. Leaf gradients accumulate across calls; interior
    /// gradients are recomputed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Graph(format!(
                "loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Graph("loss is not connected to any trainable tensor".into()));
        }
        for node in &mut self.nodes[..=loss.0] {
            if !matches!(node.op, Op::Leaf) {
                node.grad = None;
            }
        }
        add_into(&mut self.nodes[loss.0].grad, 1, [T::one()]);
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let Some(dy) = node.grad.as_deref() else { continue };
            if !node.requires_grad {
                continue;
            }
            backprop(node, dy, before)?;
        }
        Ok(())
    }
}

pub(crate) fn bce_value<T: Scalar>(pred: &[T], target: &[T]) -> T {
    let eps = T::lit(BCE_EPS);
    let total: T = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let p = p.max(eps).min(T::one() - eps);
            t * p.ln() + (T::one() - t) * (T::one() - p).ln()
        })
        .sum();
    -total / T::lit(pred.len() as f64)
}

fn backprop<T: Scalar>(node: &Node<T>, dy: &[T], nodes: &mut [Node<T>]) -> Result<()> {
    let y = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d { x, w, b, stride, pad } => {
            let [n, c, h, wd] = nodes[x.0].value.dims4()?;
            let [cout, _, k, _] = nodes[w.0].value.dims4()?;
            let [_, _, ho, wo] = node.value.dims4()?;
            let g = ConvGeom { c, h, w: wd, k, stride: *stride, pad: *pad, ho, wo };
            let (rows, p) = (g.rows(), g.cols());
            let need_x = nodes[x.0].requires_grad;
            let need_w = nodes[w.0].requires_grad;
            let need_b = nodes[b.0].requires_grad;
            if need_b {
                let mut db = vec![T::zero(); cout];
                for s in 0..n {
                    for (oc, acc) in db.iter_mut().enumerate() {
                        let start = (s * cout + oc) * p;
                        *acc += dy[start..start + p].iter().copied().sum::<T>();
                    }
                }
                add_into(&mut nodes[b.0].grad, cout, db);
            }
            if need_w || need_x {
                let mut cols = vec![T::zero(); rows * p];
                let mut dw = vec![T::zero(); cout * rows];
                let mut dx = if need_x { vec![T::zero(); n * c * h * wd] } else { Vec::new() };
                let xs = nodes[x.0].value.data();
                let ws = nodes[w.0].value.data();
                for s in 0..n {
                    let dys = &dy[s * cout * p..(s + 1) * cout * p];
                    if need_w {
                        g.im2col(&xs[s * c * h * wd..(s + 1) * c * h * wd], &mut cols);
                        // dW += dY · colsᵀ
                        T::gemm(cout, p, rows, T::one(), dys, (p as isize, 1), &cols, (1, p as isize), T::one(), &mut dw, (rows as isize, 1));
                    }
                    if need_x {
                        // dcols = Wᵀ · dY
                        T::gemm(rows, cout, p, T::one(), ws, (1, rows as isize), dys, (p as isize, 1), T::zero(), &mut cols, (p as isize, 1));
                        g.col2im(&cols, &mut dx[s * c * h * wd..(s + 1) * c * h * wd]);
                    }
                }
                if need_w {
                    add_into(&mut nodes[w.0].grad, cout * rows, dw);
                }
                if need_x {
                    let len = dx.len();
                    add_into(&mut nodes[x.0].grad, len, dx);
                }
            }
        }
        Op::Upsample2x(x) => {
            let [n, c, h, w] = nodes[x.0].value.dims4()?;
            let mut dx = vec![T::zero(); n * c * h * w];
            for plane in 0..n * c {
                for yy in 0..2 * h {
                    for xx in 0..2 * w {
                        dx[(plane * h + yy / 2) * w + xx / 2] += dy[(plane * 2 * h + yy) * 2 * w + xx];
                    }
                }
            }
            let len = dx.len();
            add_into(&mut nodes[x.0].grad, len, dx);
        }
        Op::InstanceNorm { x, inv_std } => {
            let [_, _, h, w] = nodes[x.0].value.dims4()?;
            let m = h * w;
            let mt = T::lit(m as f64);
            let mut dx = vec![T::zero(); y.len()];
            for (((yp, gp), dp), &is) in y.chunks(m).zip(dy.chunks(m)).zip(dx.chunks_mut(m)).zip(inv_std) {
                let mean_g = gp.iter().copied().sum::<T>() / mt;
                let mean_gy = gp.iter().zip(yp).map(|(&g, &v)| g * v).sum::<T>() / mt;
                for ((d, &g), &v) in dp.iter_mut().zip(gp).zip(yp) {
                    *d = is * (g - mean_g - v * mean_gy);
                }
            }
            let len = dx.len();
            add_into(&mut nodes[x.0].grad, len, dx);
        }
        Op::LeakyRelu { x, slope } => {
            let xs = nodes[x.0].value.data();
            let dx: Vec<T> = xs.iter().zip(dy).map(|(&v, &g)| if v > T::zero() { g } else { g * *slope }).collect();
            add_into(&mut nodes[x.0].grad, dx.len(), dx);
        }
        Op::Sigmoid(x) => {
            let dx: Vec<T> = y.iter().zip(dy).map(|(&s, &g)| g * s * (T::one() - s)).collect();
            add_into(&mut nodes[x.0].grad, dx.len(), dx);
        }
        Op::Concat(a, b) => {
            let [n, ca, h, w] = nodes[a.0].value.dims4()?;
            let [_, cb, _, _] = nodes[b.0].value.dims4()?;
            let m = h * w;
            if nodes[a.0].requires_grad {
                let da: Vec<T> = (0..n)
                    .flat_map(|s| dy[s * (ca + cb) * m..(s * (ca + cb) + ca) * m].iter().copied())
                    .collect();
                add_into(&mut nodes[a.0].grad, da.len(), da);
            }
            if nodes[b.0].requires_grad {
                let db: Vec<T> = (0..n)
                    .flat_map(|s| dy[(s * (ca + cb) + ca) * m..(s + 1) * (ca + cb) * m].iter().copied())
                    .collect();
                add_into(&mut nodes[b.0].grad, db.len(), db);
            }
        }
        Op::Bce { pred, target } => {
            let eps = T::lit(BCE_EPS);
            let scale = dy[0] / T::lit(target.len() as f64);
            let ps = nodes[pred.0].value.data();
            let dx: Vec<T> = ps
                .iter()
                .zip(target)
                .map(|(&p, &t)| {
                    if p < eps || p > T::one() - eps {
                        T::zero()
                    } else {
                        scale * ((T::one() - t) / (T::one() - p) - t / p)
                    }
                })
                .collect();
            add_into(&mut nodes[pred.0].grad, dx.len(), dx);
        }
        Op::Add(a, b) => {
            for v in [a, b] {
                if nodes[v.0].requires_grad {
                    add_into(&mut nodes[v.0].grad, dy.len(), dy.iter().copied());
                }
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (nodes[a.0].value.data().to_vec(), nodes[b.0].value.data().to_vec());
            if nodes[a.0].requires_grad {
                add_into(&mut nodes[a.0].grad, dy.len(), dy.iter().zip(&bv).map(|(&g, &v)| g * v));
            }
            if nodes[b.0].requires_grad {
                add_into(&mut nodes[b.0].grad, dy.len(), dy.iter().zip(&av).map(|(&g, &v)| g * v));
            }
        }
        Op::Scale(x, k) => {
            add_into(&mut nodes[x.0].grad, dy.len(), dy.iter().map(|&g| g * *k));
        }
        Op::Sum(x) => {
            let len = nodes[x.0].value.numel();
            add_into(&mut nodes[x.0].grad, len, std::iter::repeat_n(dy[0], len));
        }
        Op::Mean(x) => {
            let len = nodes[x.0].value.numel();
            let g = dy[0] / T::lit(len as f64);
            add_into(&mut nodes[x.0].grad, len, std::iter::repeat_n(g, len));
        }
        Op::SampleMean(x) => {
            let len = nodes[x.0].value.numel();
            let m = len / dy.len();
            let scale = T::one() / T::lit(m as f64);
            add_into(&mut nodes[x.0].grad, len, dy.iter().flat_map(|&g| std::iter::repeat_n(g * scale, m)));
        }
    }
    Ok(())
}
