use std::rc::Rc;

use crate::real::Real;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An operation whose vector-Jacobian product is supplied by the caller.
///
/// `backward` receives the input values, the forward output and the
/// upstream gradient, and returns one optional gradient per input.
pub trait CustomOp<T: Real> {
    fn name(&self) -> &'static str;

    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>>;
}

enum Op<T: Real> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddLeading(Var, Var),
    AddTrailing(Var, Var),
    MulScalarVar(Var, Var),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Transpose(Var),
    Reshape(Var),
    Silu(Var),
    Sigmoid(Var),
    Square(Var),
    Sum(Var),
    SoftmaxRows(Var),
    Conv2d { x: Var, w: Var, pad: usize },
    GroupNorm { x: Var, groups: usize, rstd: Vec<T> },
    LayerNormRows { x: Var, rstd: Vec<T> },
    AvgPool2(Var),
    Upsample2(Var),
    Concat0(Var, Var),
    GatherRows { table: Var, idx: Vec<usize> },
    Custom { inputs: Vec<Var>, op: Rc<dyn CustomOp<T>> },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of recorded operations. Build the forward pass with the op methods,
/// then call [`Graph::backward`] on a scalar output.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Grads<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn shape_err<V>(msg: String) -> Result<V> {
    Err(Error::Shape(msg))
}

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(format!("{what}: {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn chw(t: &Tensor<impl Real>, what: &str) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        s => shape_err(format!("{what} expects [C,H,W], got {s:?}")),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "sub")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c), &[a])
    }

    /// `x * s` where `s` is a one-element tensor.
    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return shape_err(format!("mul_scalar_var: scalar has shape {:?}", self.shape(s)));
        }
        let c = self.value(s).data()[0];
        let v = self.value(x).map(|e| e * c);
        Ok(self.push(v, Op::MulScalarVar(x, s), &[x, s]))
    }

    /// Adds `v[r]` to every element of slice `r` along the leading axis.
    pub fn add_leading(&mut self, x: Var, v: Var) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2();
        if self.value(v).len() != rows {
            return shape_err(format!("add_leading: {:?} + {:?}", self.shape(x), self.shape(v)));
        }
        let mut out = self.value(x).clone();
        let bias = self.value(v).data().to_vec();
        for (chunk, &b) in out.data_mut().chunks_mut(cols.max(1)).zip(&bias) {
            chunk.iter_mut().for_each(|e| *e += b);
        }
        Ok(self.push(out, Op::AddLeading(x, v), &[x, v]))
    }

    /// Adds `v` to every row (broadcast over all but the last axis).
    pub fn add_trailing(&mut self, x: Var, v: Var) -> Result<Var> {
        let last = *self.shape(x).last().unwrap_or(&1);
        if self.value(v).len() != last {
            return shape_err(format!("add_trailing: {:?} + {:?}", self.shape(x), self.shape(v)));
        }
        let mut out = self.value(x).clone();
        let bias = self.value(v).data().to_vec();
        for chunk in out.data_mut().chunks_mut(last) {
            chunk.iter_mut().zip(&bias).for_each(|(e, &b)| *e += b);
        }
        Ok(self.push(out, Op::AddTrailing(x, v), &[x, v]))
    }

    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b), ta, tb)?;
        Ok(self.push(v, Op::MatMul { a, b, ta, tb }, &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose2();
        self.push(v, Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(v, Op::Reshape(a), &[a]))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * sigmoid(x));
        self.push(v, Op::Silu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// Softmax over the last axis. Entries equal to `-inf` receive zero mass;
    /// every row needs at least one finite entry.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let v = softmax_rows(self.value(a))?;
        Ok(self.push(v, Op::SoftmaxRows(a), &[a]))
    }

    /// Stride-1 2-D convolution of a `[C_in,H,W]` input with a
    /// `[C_out,C_in,k,k]` kernel and symmetric zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, pad: usize) -> Result<Var> {
        let (cin, h, wd) = chw(self.value(x), "conv2d")?;
        let (cout, wcin, k) = match self.shape(w) {
            [co, ci, k1, k2] if k1 == k2 => (*co, *ci, *k1),
            s => return shape_err(format!("conv2d kernel must be [Co,Ci,k,k], got {s:?}")),
        };
        if wcin != cin || h + 2 * pad < k || wd + 2 * pad < k {
            return shape_err(format!("conv2d: input {:?} kernel {:?}", self.shape(x), self.shape(w)));
        }
        let (oh, ow) = (h + 2 * pad + 1 - k, wd + 2 * pad + 1 - k);
        let cols = im2col(self.value(x).data(), cin, h, wd, k, pad, oh, ow);
        let mut out = vec![T::zero(); cout * oh * ow];
        T::gemm(cout, cin * k * k, oh * ow, T::one(), self.value(w).data(), false, &cols, false, T::zero(), &mut out);
        let v = Tensor::new(&[cout, oh, ow], out)?;
        Ok(self.push(v, Op::Conv2d { x, w, pad }, &[x, w]))
    }

    /// Group normalization without affine parameters on a `[C,H,W]` input.
    pub fn group_norm(&mut self, x: Var, groups: usize, eps: f64) -> Result<Var> {
        let (c, h, w) = chw(self.value(x), "group_norm")?;
        if groups == 0 || c % groups != 0 {
            return shape_err(format!("group_norm: {c} channels into {groups} groups"));
        }
        let (v, rstd) = normalize_chunks(self.value(x), (c / groups) * h * w, T::lit(eps));
        Ok(self.push(v, Op::GroupNorm { x, groups, rstd }, &[x]))
    }

    /// Normalizes each row (last axis) to zero mean and unit variance.
    pub fn layer_norm_rows(&mut self, x: Var, eps: f64) -> Var {
        let last = *self.shape(x).last().unwrap_or(&1);
        let (v, rstd) = normalize_chunks(self.value(x), last, T::lit(eps));
        self.push(v, Op::LayerNormRows { x, rstd }, &[x])
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = chw(self.value(x), "avg_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return shape_err(format!("avg_pool2 needs even dims, got {h}x{w}"));
        }
        let src = self.value(x).data();
        let (oh, ow) = (h / 2, w / 2);
        let quarter = T::lit(0.25);
        let mut out = vec![T::zero(); c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let base = ch * h * w + 2 * y * w + 2 * xx;
                    out[ch * oh * ow + y * ow + xx] = (src[base] + src[base + 1] + src[base + w] + src[base + w + 1]) * quarter;
                }
            }
        }
        let v = Tensor::new(&[c, oh, ow], out)?;
        Ok(self.push(v, Op::AvgPool2(x), &[x]))
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = chw(self.value(x), "upsample2")?;
        let src = self.value(x).data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    out[ch * oh * ow + y * ow + xx] = src[ch * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
        let v = Tensor::new(&[c, oh, ow], out)?;
        Ok(self.push(v, Op::Upsample2(x), &[x]))
    }

    /// Concatenation along the leading axis.
    pub fn concat0(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() || sa.is_empty() || sa[1..] != sb[1..] {
            return shape_err(format!("concat0: {sa:?} and {sb:?}"));
        }
        let mut shape = sa.to_vec();
        shape[0] += sb[0];
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let v = Tensor::new(&shape, data)?;
        Ok(self.push(v, Op::Concat0(a, b), &[a, b]))
    }

    /// Selects rows of a `[V, D]` table.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (rows, d) = self.value(table).dims2();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= rows {
                return Err(Error::Index { index: i, len: rows });
            }
            data.extend_from_slice(&self.value(table).data()[i * d..(i + 1) * d]);
        }
        let v = Tensor::new(&[idx.len(), d], data)?;
        Ok(self.push(v, Op::GatherRows { table, idx: idx.to_vec() }, &[table]))
    }

    /// Records an operation computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor<T>, op: Rc<dyn CustomOp<T>>) -> Var {
        self.push(output, Op::Custom { inputs: inputs.to_vec(), op }, inputs)
    }

    /// Reverse pass from a one-element output.
    pub fn backward(&self, root: Var) -> Result<Grads<T>> {
        if self.value(root).len() != 1 {
            return shape_err(format!("backward root must be scalar, got {:?}", self.shape(root)));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.shape(root), T::one()));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, g.zip_map(vb, |gg, x| gg * x));
                self.acc(grads, *b, g.zip_map(va, |gg, x| gg * x));
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.acc(grads, *a, g.map(|x| x * c));
            }
            Op::MulScalarVar(x, s) => {
                let c = self.value(*s).data()[0];
                self.acc(grads, *x, g.map(|e| e * c));
                let gs: T = g.data().iter().zip(self.value(*x).data()).map(|(&a, &b)| a * b).sum();
                self.acc(grads, *s, Tensor::new(self.shape(*s), vec![gs])?);
            }
            Op::AddLeading(x, v) => {
                self.acc(grads, *x, g.clone());
                let (_, cols) = g.dims2();
                let gv: Vec<T> = g.data().chunks(cols.max(1)).map(|c| c.iter().copied().sum()).collect();
                self.acc(grads, *v, Tensor::new(self.shape(*v), gv)?);
            }
            Op::AddTrailing(x, v) => {
                self.acc(grads, *x, g.clone());
                let last = self.value(*v).len();
                let mut gv = vec![T::zero(); last];
                for chunk in g.data().chunks(last) {
                    gv.iter_mut().zip(chunk).for_each(|(a, &b)| *a += b);
                }
                self.acc(grads, *v, Tensor::new(self.shape(*v), gv)?);
            }
            Op::MatMul { a, b, ta, tb } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].requires_grad {
                    // C = op(A) op(B); dop(A) = G op(B)^T
                    let ga = if *ta { vb.matmul(g, *tb, true)? } else { g.matmul(vb, false, !*tb)? };
                    self.acc(grads, *a, ga.reshaped(va.shape())?);
                }
                if self.nodes[b.0].requires_grad {
                    let gb = if *tb { g.matmul(va, true, *ta)? } else { va.matmul(g, !*ta, false)? };
                    self.acc(grads, *b, gb.reshaped(vb.shape())?);
                }
            }
            Op::Transpose(a) => self.acc(grads, *a, g.transpose2()),
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                self.acc(grads, *a, g.clone().reshaped(&shape)?);
            }
            Op::Silu(a) => {
                let gx = g.zip_map(self.value(*a), |gg, x| {
                    let s = sigmoid(x);
                    gg * s * (T::one() + x * (T::one() - s))
                });
                self.acc(grads, *a, gx);
            }
            Op::Sigmoid(a) => self.acc(grads, *a, g.zip_map(y, |gg, s| gg * s * (T::one() - s))),
            Op::Square(a) => {
                let two = T::lit(2.0);
                self.acc(grads, *a, g.zip_map(self.value(*a), |gg, x| gg * two * x));
            }
            Op::Sum(a) => {
                let gv = g.data()[0];
                self.acc(grads, *a, Tensor::full(self.shape(*a), gv));
            }
            Op::SoftmaxRows(a) => self.acc(grads, *a, softmax_rows_backward(y, g)),
            Op::Conv2d { x, w, pad } => {
                let (cin, h, wd) = chw(self.value(*x), "conv2d")?;
                let wt = self.value(*w);
                let (cout, k) = (wt.shape()[0], wt.shape()[2]);
                let (oh, ow) = (y.shape()[1], y.shape()[2]);
                let cols = im2col(self.value(*x).data(), cin, h, wd, k, *pad, oh, ow);
                let kk = cin * k * k;
                if self.nodes[w.0].requires_grad {
                    let mut gw = vec![T::zero(); cout * kk];
                    T::gemm(cout, oh * ow, kk, T::one(), g.data(), false, &cols, true, T::zero(), &mut gw);
                    self.acc(grads, *w, Tensor::new(wt.shape(), gw)?);
                }
                if self.nodes[x.0].requires_grad {
                    let mut gcols = vec![T::zero(); kk * oh * ow];
                    T::gemm(kk, cout, oh * ow, T::one(), wt.data(), true, g.data(), false, T::zero(), &mut gcols);
                    let gx = col2im(&gcols, cin, h, wd, k, *pad, oh, ow);
                    self.acc(grads, *x, Tensor::new(&[cin, h, wd], gx)?);
                }
            }
            Op::GroupNorm { x, groups, rstd } => {
                let chunk = y.len() / groups;
                self.acc(grads, *x, normalize_backward(y, g, rstd, chunk));
            }
            Op::LayerNormRows { x, rstd } => {
                let chunk = *y.shape().last().unwrap_or(&1);
                self.acc(grads, *x, normalize_backward(y, g, rstd, chunk));
            }
            Op::AvgPool2(x) => {
                let (c, h, w) = chw(self.value(*x), "avg_pool2")?;
                let (oh, ow) = (h / 2, w / 2);
                let q = T::lit(0.25);
                let mut gx = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for yy in 0..h {
                        for xx in 0..w {
                            gx[ch * h * w + yy * w + xx] = g.data()[ch * oh * ow + (yy / 2) * ow + xx / 2] * q;
                        }
                    }
                }
                self.acc(grads, *x, Tensor::new(&[c, h, w], gx)?);
            }
            Op::Upsample2(x) => {
                let (c, h, w) = chw(self.value(*x), "upsample2")?;
                let (oh, ow) = (2 * h, 2 * w);
                let mut gx = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for yy in 0..oh {
                        for xx in 0..ow {
                            gx[ch * h * w + (yy / 2) * w + xx / 2] += g.data()[ch * oh * ow + yy * ow + xx];
                        }
                    }
                }
                self.acc(grads, *x, Tensor::new(&[c, h, w], gx)?);
            }
            Op::Concat0(a, b) => {
                let na = self.value(*a).len();
                let ga = Tensor::new(self.shape(*a), g.data()[..na].to_vec())?;
                let gb = Tensor::new(self.shape(*b), g.data()[na..].to_vec())?;
                self.acc(grads, *a, ga);
                self.acc(grads, *b, gb);
            }
            Op::GatherRows { table, idx } => {
                let (_, d) = self.value(*table).dims2();
                let mut gt = Tensor::zeros(self.shape(*table));
                for (r, &i) in idx.iter().enumerate() {
                    let dst = &mut gt.data_mut()[i * d..(i + 1) * d];
                    dst.iter_mut().zip(&g.data()[r * d..(r + 1) * d]).for_each(|(a, &b)| *a += b);
                }
                self.acc(grads, *table, gt);
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(*v)).collect();
                let gs = op.backward(&vals, y, g);
                if gs.len() != inputs.len() {
                    return Err(Error::Custom(format!("{} returned {} grads for {} inputs", op.name(), gs.len(), inputs.len())));
                }
                for (v, gi) in inputs.iter().zip(gs) {
                    if let Some(gi) = gi {
                        same_shape(&gi, self.value(*v), op.name())?;
                        self.acc(grads, *v, gi);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Row softmax over the last axis, with `-inf` entries receiving zero mass.
pub fn softmax_rows<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let last = *x.shape().last().unwrap_or(&1);
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(last.max(1)) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        if !m.is_finite() {
            return Err(Error::Custom("softmax row without a finite entry".into()));
        }
        let mut s = T::zero();
        for e in row.iter_mut() {
            *e = (*e - m).exp();
            s += *e;
        }
        row.iter_mut().for_each(|e| *e /= s);
    }
    Ok(out)
}

/// Vector-Jacobian product of a row softmax given its output.
pub fn softmax_rows_backward<T: Real>(y: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let last = *y.shape().last().unwrap_or(&1);
    let mut gx = g.clone();
    for (gr, yr) in gx.data_mut().chunks_mut(last.max(1)).zip(y.data().chunks(last.max(1))) {
        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
        gr.iter_mut().zip(yr).for_each(|(a, &b)| *a = b * (*a - dot));
    }
    gx
}

fn normalize_chunks<T: Real>(x: &Tensor<T>, chunk: usize, eps: T) -> (Tensor<T>, Vec<T>) {
    let mut out = x.clone();
    let mut rstds = Vec::with_capacity(x.len() / chunk.max(1));
    let n = T::lit(chunk as f64);
    for c in out.data_mut().chunks_mut(chunk.max(1)) {
        let mean = c.iter().copied().sum::<T>() / n;
        let var = c.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rstd = T::one() / (var + eps).sqrt();
        c.iter_mut().for_each(|v| *v = (*v - mean) * rstd);
        rstds.push(rstd);
    }
    (out, rstds)
}

fn normalize_backward<T: Real>(y: &Tensor<T>, g: &Tensor<T>, rstd: &[T], chunk: usize) -> Tensor<T> {
    let mut gx = g.clone();
    let n = T::lit(chunk as f64);
    for ((gc, yc), &r) in gx.data_mut().chunks_mut(chunk).zip(y.data().chunks(chunk)).zip(rstd) {
        let mg = gc.iter().copied().sum::<T>() / n;
        let mgy = gc.iter().zip(yc).map(|(&a, &b)| a * b).sum::<T>() / n;
        gc.iter_mut().zip(yc).for_each(|(gv, &yv)| *gv = r * (*gv - mg - yv * mgy));
    }
    gx
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(x: &[T], cin: usize, h: usize, w: usize, k: usize, pad: usize, oh: usize, ow: usize) -> Vec<T> {
    if k == 1 && pad == 0 {
        return x.to_vec();
    }
    let mut cols = vec![T::zero(); cin * k * k * oh * ow];
    for c in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = oy + ky;
                    if iy < pad || iy - pad >= h {
                        continue;
                    }
                    let src = &x[c * h * w + (iy - pad) * w..c * h * w + (iy - pad + 1) * w];
                    for ox in 0..ow {
                        let ix = ox + kx;
                        if ix >= pad && ix - pad < w {
                            dst[oy * ow + ox] = src[ix - pad];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(cols: &[T], cin: usize, h: usize, w: usize, k: usize, pad: usize, oh: usize, ow: usize) -> Vec<T> {
    if k == 1 && pad == 0 {
        return cols.to_vec();
    }
    let mut x = vec![T::zero(); cin * h * w];
    for c in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = oy + ky;
                    if iy < pad || iy - pad >= h {
                        continue;
                    }
                    let base = c * h * w + (iy - pad) * w;
                    for ox in 0..ow {
                        let ix = ox + kx;
                        if ix >= pad && ix - pad < w {
                            x[base + ix - pad] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    x
}
