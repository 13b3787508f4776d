use std::collections::HashMap;
use std::rc::Rc;

use crate::conv::{conv2d_backward, conv2d_forward, ConvGeometry};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{broadcast_shape, broadcast_strides, for_each_offset2, numel, reduce_to_shape};
use crate::{Scalar, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Unary {
    Neg,
    Exp,
    Log,
    Sqrt,
    Sqr,
    Abs,
    Relu,
    LeakyRelu(f64),
    Silu,
    Sigmoid,
    Tanh,
    /// `ln(1 + e^x)`, evaluated stably.
    Softplus,
    Recip,
}

#[derive(Debug, Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op<T> {
    Leaf,
    Binary(Binary, Var, Var),
    Scale(Var, T),
    Offset(Var),
    Unary(Unary, Var),
    SumTo(Var),
    BroadcastTo(Var),
    Reshape(Var),
    Gather(Var, Rc<Vec<u32>>),
    Narrow { x: Var, axis: usize, start: usize },
    Concat { inputs: Vec<Var>, axis: usize },
    Matmul(Var, Var),
    Conv2d { x: Var, w: Var, geom: ConvGeometry },
    GroupNorm { x: Var, groups: usize, stats: Vec<(T, T)> },
    Softmax(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A define-by-run tape. Every operation appends a node; [`Graph::backward`] walks the tape
/// in reverse.
///
/// Shape errors inside the graph are programming errors and panic, the same way slice
/// indexing does. Callers validate user-supplied shapes before building graphs.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(ParamId, Var)>,
    param_lookup: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-node gradients produced by [`Graph::backward`]. Only leaves keep their gradient.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn c<T: Scalar>(v: f64) -> T {
    T::from_f64(v)
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Scalar>(x: T) -> T {
    // max(x, 0) + ln(1 + e^-|x|)
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            param_lookup: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A free leaf; gradients are readable from [`Gradients::get`] after backward.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Records (once per graph) the current value of a stored parameter. Frozen parameters
    /// become constants.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_lookup.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Leaf, store.is_trainable(id));
        self.params.push((id, v));
        self.param_lookup.insert(id, v);
        v
    }

    /// Cuts the tape: the returned node carries `v`'s value but no gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    /// Gradients of all trainable parameters that took part in the graph.
    pub fn param_grads(&self, grads: &Gradients<T>) -> Vec<(ParamId, Tensor<T>)> {
        self.params
            .iter()
            .filter_map(|&(id, v)| grads.get(v).map(|g| (id, g.clone())))
            .collect()
    }

    // ---------------------------------------------------------------- element-wise

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let f = |x: T, y: T| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let value = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::from_vec(ta.shape(), data).expect("same shape")
        } else {
            let shape = broadcast_shape(ta.shape(), tb.shape()).unwrap_or_else(|e| panic!("{e}"));
            let sa = broadcast_strides(ta.shape(), &shape);
            let sb = broadcast_strides(tb.shape(), &shape);
            let mut data = vec![T::zero(); numel(&shape)];
            let (da, db) = (ta.data(), tb.data());
            for_each_offset2(&shape, &sa, &sb, |i, oa, ob| data[i] = f(da[oa], db[ob]));
            Tensor::from_vec(&shape, data).expect("broadcast shape")
        };
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Binary(kind, a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(Binary::Div, a, b)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = c::<T>(s);
        let value = self.nodes[a.0].value.map(|x| x * s);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn offset(&mut self, a: Var, o: f64) -> Var {
        let o = c::<T>(o);
        let value = self.nodes[a.0].value.map(|x| x + o);
        let rg = self.rg(a);
        self.push(value, Op::Offset(a), rg)
    }

    pub fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let f = |x: T| -> T {
            match kind {
                Unary::Neg => -x,
                Unary::Exp => x.exp(),
                Unary::Log => x.ln(),
                Unary::Sqrt => x.sqrt(),
                Unary::Sqr => x * x,
                Unary::Abs => x.abs(),
                Unary::Relu => x.max(T::zero()),
                Unary::LeakyRelu(s) => {
                    if x > T::zero() {
                        x
                    } else {
                        x * c::<T>(s)
                    }
                }
                Unary::Silu => x * sigmoid(x),
                Unary::Sigmoid => sigmoid(x),
                Unary::Tanh => x.tanh(),
                Unary::Softplus => softplus(x),
                Unary::Recip => T::one() / x,
            }
        };
        let value = self.nodes[a.0].value.map(f);
        let rg = self.rg(a);
        self.push(value, Op::Unary(kind, a), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(Unary::Neg, a)
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(Unary::Log, a)
    }
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(Unary::Sqrt, a)
    }
    pub fn sqr(&mut self, a: Var) -> Var {
        self.unary(Unary::Sqr, a)
    }
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(Unary::Abs, a)
    }
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(Unary::LeakyRelu(slope), a)
    }
    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(Unary::Silu, a)
    }
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }
    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a)
    }
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(Unary::Softplus, a)
    }
    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(Unary::Recip, a)
    }

    // ---------------------------------------------------------------- reductions & shape

    /// Sums `a` down to `shape`, which must broadcast to `a`'s shape.
    pub fn sum_to(&mut self, a: Var, shape: &[usize]) -> Var {
        let src = &self.nodes[a.0].value;
        let b = broadcast_shape(shape, src.shape()).unwrap_or_else(|e| panic!("{e}"));
        assert_eq!(b, src.shape(), "sum_to: {:?} does not broadcast to {:?}", shape, src.shape());
        let data = reduce_to_shape(src.data(), src.shape(), shape);
        let value = Tensor::from_vec(shape, data).expect("reduced shape");
        let rg = self.rg(a);
        self.push(value, Op::SumTo(a), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        self.sum_to(a, &[1])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.numel();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sums over the listed axes, keeping them as size-1 dimensions.
    pub fn sum_axes(&mut self, a: Var, axes: &[usize]) -> Var {
        let mut shape = self.shape(a).to_vec();
        for &ax in axes {
            shape[ax] = 1;
        }
        self.sum_to(a, &shape)
    }

    pub fn mean_axes(&mut self, a: Var, axes: &[usize]) -> Var {
        let shape = self.shape(a).to_vec();
        let count: usize = axes.iter().map(|&ax| shape[ax]).product();
        let s = self.sum_axes(a, axes);
        self.scale(s, 1.0 / count as f64)
    }

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Var {
        let src = &self.nodes[a.0].value;
        let b = broadcast_shape(src.shape(), shape).unwrap_or_else(|e| panic!("{e}"));
        assert_eq!(b, shape, "broadcast_to: {:?} -> {:?}", src.shape(), shape);
        let sa = broadcast_strides(src.shape(), shape);
        let zero = vec![0; shape.len()];
        let mut data = vec![T::zero(); numel(shape)];
        let d = src.data();
        for_each_offset2(shape, &sa, &zero, |i, oa, _| data[i] = d[oa]);
        let value = Tensor::from_vec(shape, data).expect("shape");
        let rg = self.rg(a);
        self.push(value, Op::BroadcastTo(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self.nodes[a.0].value.clone().reshape(shape);
        let rg = self.rg(a);
        self.push(value, Op::Reshape(a), rg)
    }

    /// `out[i] = a[index[i]]` (flat indices), producing a tensor of `shape`.
    pub fn gather(&mut self, a: Var, shape: &[usize], index: Vec<u32>) -> Var {
        assert_eq!(numel(shape), index.len(), "gather: index/shape mismatch");
        let src = self.nodes[a.0].value.data();
        let data = index.iter().map(|&i| src[i as usize]).collect();
        let value = Tensor::from_vec(shape, data).expect("shape");
        let rg = self.rg(a);
        self.push(value, Op::Gather(a, Rc::new(index)), rg)
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Var {
        let shape = self.shape(a).to_vec();
        assert_eq!(axes.len(), shape.len(), "permute: rank mismatch");
        let strides = row_major_strides(&shape);
        let out_shape: Vec<usize> = axes.iter().map(|&ax| shape[ax]).collect();
        let sa: Vec<usize> = axes.iter().map(|&ax| strides[ax]).collect();
        let zero = vec![0; shape.len()];
        let mut index = vec![0u32; numel(&shape)];
        for_each_offset2(&out_shape, &sa, &zero, |i, oa, _| index[i] = oa as u32);
        self.gather(a, &out_shape, index)
    }

    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let shape = self.shape(a).to_vec();
        assert!(start + len <= shape[axis], "narrow out of range");
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.nodes[a.0].value.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::from_vec(&out_shape, data).expect("shape");
        let rg = self.rg(a);
        self.push(value, Op::Narrow { x: a, axis, start }, rg)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Var {
        assert!(!inputs.is_empty(), "concat of nothing");
        let first = self.shape(inputs[0]).to_vec();
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            assert_eq!(s.len(), first.len(), "concat rank mismatch");
            for (d, (&x, &y)) in s.iter().zip(&first).enumerate() {
                assert!(d == axis || x == y, "concat shape mismatch {:?} vs {:?}", s, first);
            }
            total += s[axis];
        }
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = &self.nodes[v.0].value;
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::from_vec(&shape, data).expect("shape");
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        )
    }

    // ---------------------------------------------------------------- linear algebra

    /// Batched matrix product over the last two axes. `b` may be a plain matrix shared by
    /// every batch entry of `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() >= 2 && sb.len() >= 2, "matmul needs rank >= 2");
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        assert_eq!(k, k2, "matmul inner dims {:?} x {:?}", sa, sb);
        let ba: usize = sa[..sa.len() - 2].iter().product();
        let bb: usize = sb[..sb.len() - 2].iter().product();
        assert!(bb == 1 || ba == 1 || ba == bb, "matmul batch mismatch {:?} x {:?}", sa, sb);
        let batch = ba.max(bb);
        let mut out_shape = if ba >= bb {
            sa[..sa.len() - 2].to_vec()
        } else {
            sb[..sb.len() - 2].to_vec()
        };
        out_shape.extend([m, n]);
        let mut out = vec![T::zero(); batch * m * n];
        let (da, db) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
        if bb == 1 {
            T::gemm(ba * m, k, n, T::one(), da, k as isize, 1, db, n as isize, 1, T::zero(), &mut out, n as isize, 1);
        } else {
            for i in 0..batch {
                let ao = if ba == 1 { 0 } else { i * m * k };
                T::gemm(
                    m,
                    k,
                    n,
                    T::one(),
                    &da[ao..ao + m * k],
                    k as isize,
                    1,
                    &db[i * k * n..(i + 1) * k * n],
                    n as isize,
                    1,
                    T::zero(),
                    &mut out[i * m * n..(i + 1) * m * n],
                    n as isize,
                    1,
                );
            }
        }
        let value = Tensor::from_vec(&out_shape, out).expect("shape");
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Matmul(a, b), rg)
    }

    /// Cross-correlation over NCHW input with an `(out, in, kh, kw)` kernel, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        assert!(sx.len() == 4 && sw.len() == 4, "conv2d expects NCHW input and OIHW kernel");
        assert_eq!(sx[1], sw[1], "conv2d channel mismatch: input {:?} kernel {:?}", sx, sw);
        let geom = ConvGeometry {
            batch: sx[0],
            in_channels: sx[1],
            height: sx[2],
            width: sx[3],
            out_channels: sw[0],
            kernel_h: sw[2],
            kernel_w: sw[3],
            stride,
            pad,
        };
        assert!(
            sx[2] + 2 * pad >= sw[2] && sx[3] + 2 * pad >= sw[3],
            "conv2d kernel larger than padded input"
        );
        let out = conv2d_forward(self.value(x).data(), self.value(w).data(), &geom);
        let shape = [geom.batch, geom.out_channels, geom.out_h(), geom.out_w()];
        let value = Tensor::from_vec(&shape, out).expect("shape");
        let rg = self.rg(x) || self.rg(w);
        self.push(value, Op::Conv2d { x, w, geom }, rg)
    }

    /// Normalizes each `(sample, group)` block to zero mean and unit variance (no affine).
    pub fn group_norm(&mut self, x: Var, groups: usize, eps: f64) -> Var {
        let shape = self.shape(x).to_vec();
        assert!(shape.len() >= 2 && shape[1] % groups == 0, "group_norm: {shape:?} / {groups}");
        let block = numel(&shape[1..]) / groups;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        let mut stats = Vec::with_capacity(shape[0] * groups);
        let inv = c::<T>(1.0 / block as f64);
        for (chunk, dst) in src.chunks(block).zip(out.chunks_mut(block)) {
            let mean = chunk.iter().copied().sum::<T>() * inv;
            let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv;
            let rstd = T::one() / (var + c::<T>(eps)).sqrt();
            for (o, &v) in dst.iter_mut().zip(chunk) {
                *o = (v - mean) * rstd;
            }
            stats.push((mean, rstd));
        }
        let value = Tensor::from_vec(&shape, out).expect("shape");
        let rg = self.rg(x);
        self.push(value, Op::GroupNorm { x, groups, stats }, rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let l = *shape.last().expect("softmax of scalar");
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for (row, dst) in src.chunks(l).zip(out.chunks_mut(l)) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for (o, &v) in dst.iter_mut().zip(row) {
                *o = (v - mx).exp();
                sum = sum + *o;
            }
            for o in dst.iter_mut() {
                *o = *o / sum;
            }
        }
        let value = Tensor::from_vec(&shape, out).expect("shape");
        let rg = self.rg(x);
        self.push(value, Op::Softmax(x), rg)
    }

    // ---------------------------------------------------------------- backward

    /// Reverse-mode sweep from a single-element `loss` node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        let seed = Tensor::full(self.shape(loss), T::one());
        self.backward_with(loss, seed)
    }

    /// Reverse-mode sweep seeded with an explicit output cotangent.
    pub fn backward_with(&self, out: Var, seed: Tensor<T>) -> Gradients<T> {
        assert_eq!(seed.shape(), self.shape(out), "seed shape mismatch");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(out) {
            return Gradients { grads };
        }
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, data: Vec<T>) {
        if !self.rg(v) {
            return;
        }
        let shape = self.shape(v);
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(data) {
                    *e = *e + d;
                }
            }
            slot @ None => *slot = Some(Tensor::from_vec(shape, data).expect("grad shape")),
        }
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        let out_shape = g.shape();
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (need_a, need_b) = (self.rg(*a), self.rg(*b));
                let same = ta.shape() == out_shape && tb.shape() == out_shape;
                match kind {
                    Binary::Add | Binary::Sub => {
                        if need_a {
                            let d = reduce_to_shape(gd, out_shape, ta.shape());
                            self.accumulate(grads, *a, d);
                        }
                        if need_b {
                            let mut d = reduce_to_shape(gd, out_shape, tb.shape());
                            if matches!(kind, Binary::Sub) {
                                d.iter_mut().for_each(|x| *x = -*x);
                            }
                            self.accumulate(grads, *b, d);
                        }
                    }
                    Binary::Mul | Binary::Div => {
                        let (va, vb) = (ta.data(), tb.data());
                        let mut da = vec![T::zero(); if need_a { ta.numel() } else { 0 }];
                        let mut db = vec![T::zero(); if need_b { tb.numel() } else { 0 }];
                        let div = matches!(kind, Binary::Div);
                        let mut step = |i: usize, oa: usize, ob: usize| {
                            let (x, y) = (va[oa], vb[ob]);
                            if div {
                                if need_a {
                                    da[oa] = da[oa] + gd[i] / y;
                                }
                                if need_b {
                                    db[ob] = db[ob] - gd[i] * x / (y * y);
                                }
                            } else {
                                if need_a {
                                    da[oa] = da[oa] + gd[i] * y;
                                }
                                if need_b {
                                    db[ob] = db[ob] + gd[i] * x;
                                }
                            }
                        };
                        if same {
                            for i in 0..gd.len() {
                                step(i, i, i);
                            }
                        } else {
                            let sa = broadcast_strides(ta.shape(), out_shape);
                            let sb = broadcast_strides(tb.shape(), out_shape);
                            for_each_offset2(out_shape, &sa, &sb, step);
                        }
                        if need_a {
                            self.accumulate(grads, *a, da);
                        }
                        if need_b {
                            self.accumulate(grads, *b, db);
                        }
                    }
                }
            }
            Op::Scale(a, s) => {
                let d = gd.iter().map(|&x| x * *s).collect();
                self.accumulate(grads, *a, d);
            }
            Op::Offset(a) => self.accumulate(grads, *a, gd.to_vec()),
            Op::Unary(kind, a) => {
                let x = self.value(*a).data();
                let y = node.value.data();
                let d = (0..gd.len())
                    .map(|i| {
                        let (xi, yi, gi) = (x[i], y[i], gd[i]);
                        let dydx = match kind {
                            Unary::Neg => -T::one(),
                            Unary::Exp => yi,
                            Unary::Log => T::one() / xi,
                            Unary::Sqrt => c::<T>(0.5) / yi,
                            Unary::Sqr => c::<T>(2.0) * xi,
                            Unary::Abs => {
                                if xi > T::zero() {
                                    T::one()
                                } else if xi < T::zero() {
                                    -T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::Relu => {
                                if xi > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::LeakyRelu(s) => {
                                if xi > T::zero() {
                                    T::one()
                                } else {
                                    c::<T>(*s)
                                }
                            }
                            Unary::Silu => {
                                let s = sigmoid(xi);
                                s * (T::one() + xi * (T::one() - s))
                            }
                            Unary::Sigmoid => yi * (T::one() - yi),
                            Unary::Tanh => T::one() - yi * yi,
                            Unary::Softplus => sigmoid(xi),
                            Unary::Recip => -yi * yi,
                        };
                        gi * dydx
                    })
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::SumTo(a) => {
                let in_shape = self.shape(*a);
                let sa = broadcast_strides(out_shape, in_shape);
                let zero = vec![0; in_shape.len()];
                let mut d = vec![T::zero(); numel(in_shape)];
                for_each_offset2(in_shape, &sa, &zero, |i, o, _| d[i] = gd[o]);
                self.accumulate(grads, *a, d);
            }
            Op::BroadcastTo(a) => {
                let d = reduce_to_shape(gd, out_shape, self.shape(*a));
                self.accumulate(grads, *a, d);
            }
            Op::Reshape(a) => self.accumulate(grads, *a, gd.to_vec()),
            Op::Gather(a, index) => {
                let mut d = vec![T::zero(); self.value(*a).numel()];
                for (&gi, &ix) in gd.iter().zip(index.iter()) {
                    d[ix as usize] = d[ix as usize] + gi;
                }
                self.accumulate(grads, *a, d);
            }
            Op::Narrow { x, axis, start } => {
                let in_shape = self.shape(*x);
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let len = out_shape[*axis];
                let mut d = vec![T::zero(); numel(in_shape)];
                for o in 0..outer {
                    let dst = (o * in_shape[*axis] + start) * inner;
                    let src = o * len * inner;
                    d[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
                }
                self.accumulate(grads, *x, d);
            }
            Op::Concat { inputs, axis } => {
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[*axis];
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    if self.rg(v) {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let s = (o * total + offset) * inner;
                            d.extend_from_slice(&gd[s..s + len * inner]);
                        }
                        self.accumulate(grads, v, d);
                    }
                    offset += len;
                }
            }
            Op::Matmul(a, b) => self.matmul_backward(*a, *b, gd, grads),
            Op::Conv2d { x, w, geom } => {
                let (need_x, need_w) = (self.rg(*x), self.rg(*w));
                let (dx, dw) = conv2d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    gd,
                    geom,
                    need_x,
                    need_w,
                );
                if need_x {
                    self.accumulate(grads, *x, dx);
                }
                if need_w {
                    self.accumulate(grads, *w, dw);
                }
            }
            Op::GroupNorm { x, groups, stats } => {
                let shape = self.shape(*x);
                let block = numel(&shape[1..]) / groups;
                let y = node.value.data();
                let inv = c::<T>(1.0 / block as f64);
                let mut d = vec![T::zero(); gd.len()];
                for (bi, &(_, rstd)) in stats.iter().enumerate() {
                    let r = bi * block..(bi + 1) * block;
                    let (gb, yb) = (&gd[r.clone()], &y[r.clone()]);
                    let mean_g = gb.iter().copied().sum::<T>() * inv;
                    let mean_gy = gb.iter().zip(yb).map(|(&a, &b)| a * b).sum::<T>() * inv;
                    for ((o, &gi), &yi) in d[r].iter_mut().zip(gb).zip(yb) {
                        *o = rstd * (gi - mean_g - yi * mean_gy);
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::Softmax(x) => {
                let l = *out_shape.last().expect("rank");
                let y = node.value.data();
                let mut d = vec![T::zero(); gd.len()];
                for ((dr, gr), yr) in d.chunks_mut(l).zip(gd.chunks(l)).zip(y.chunks(l)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for ((o, &gi), &yi) in dr.iter_mut().zip(gr).zip(yr) {
                        *o = yi * (gi - dot);
                    }
                }
                self.accumulate(grads, *x, d);
            }
        }
    }

    fn matmul_backward(&self, a: Var, b: Var, gd: &[T], grads: &mut [Option<Tensor<T>>]) {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let n = sb[sb.len() - 1];
        let ba: usize = sa[..sa.len() - 2].iter().product();
        let bb: usize = sb[..sb.len() - 2].iter().product();
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let (need_a, need_b) = (self.rg(a), self.rg(b));
        if bb == 1 {
            let rows = ba * m;
            if need_a {
                // dA = dC · Bᵀ
                let mut d = vec![T::zero(); rows * k];
                T::gemm(rows, n, k, T::one(), gd, n as isize, 1, vb, 1, n as isize, T::zero(), &mut d, k as isize, 1);
                self.accumulate(grads, a, d);
            }
            if need_b {
                // dB = Aᵀ · dC
                let mut d = vec![T::zero(); k * n];
                T::gemm(k, rows, n, T::one(), va, 1, k as isize, gd, n as isize, 1, T::zero(), &mut d, n as isize, 1);
                self.accumulate(grads, b, d);
            }
            return;
        }
        let batch = bb;
        if need_a {
            let mut d = vec![T::zero(); ba * m * k];
            for i in 0..batch {
                let ao = if ba == 1 { 0 } else { i * m * k };
                T::gemm(
                    m,
                    n,
                    k,
                    T::one(),
                    &gd[i * m * n..(i + 1) * m * n],
                    n as isize,
                    1,
                    &vb[i * k * n..(i + 1) * k * n],
                    1,
                    n as isize,
                    T::one(),
                    &mut d[ao..ao + m * k],
                    k as isize,
                    1,
                );
            }
            self.accumulate(grads, a, d);
        }
        if need_b {
            let mut d = vec![T::zero(); batch * k * n];
            for i in 0..batch {
                let ao = if ba == 1 { 0 } else { i * m * k };
                T::gemm(
                    k,
                    m,
                    n,
                    T::one(),
                    &va[ao..ao + m * k],
                    1,
                    k as isize,
                    &gd[i * m * n..(i + 1) * m * n],
                    n as isize,
                    1,
                    T::zero(),
                    &mut d[i * k * n..(i + 1) * k * n],
                    n as isize,
                    1,
                );
            }
            self.accumulate(grads, b, d);
        }
    }
}
