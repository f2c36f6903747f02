//! Reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of one forward pass as a node in
//! execution order. [`Tape::backward`] consumes the tape, walks the nodes in
//! reverse exactly once and returns the gradients of all participating
//! leaves. Gradients of a value with several consumers add up.
//!
//! ```
//! use spinalxfer::{Tape, Tensor};
//!
//! let x = Tensor::<f64>::new(vec![3], vec![1.0, -2.0, 3.0]).unwrap().with_requires_grad(true);
//! let mut tape = Tape::new();
//! let v = tape.leaf(&x);
//! let twice = tape.add(v, v).unwrap();
//! let loss = tape.sum(twice);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.of(&x).unwrap(), &[2.0, 2.0, 2.0]);
//! ```

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{dim_err, Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::tensor::{Scalar, Tensor, TensorId};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

enum Op<T> {
    Leaf { source: Option<TensorId> },
    MatMul { a: usize, b: usize },
    Conv2d { input: usize, kernel: usize, geom: ConvGeometry, cols: Vec<T> },
    Relu { x: usize },
    MaxPool2 { x: usize, argmax: Vec<u32> },
    Concat { parts: Vec<usize>, axis: usize },
    AddBias { x: usize, bias: usize },
    Narrow { x: usize, axis: usize, start: usize },
    Reshape { x: usize },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, factor: T },
    Sum { x: usize },
    SoftmaxCrossEntropy { logits: usize, probs: Vec<T>, labels: Vec<usize> },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Arc<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

pub struct Tape<T: Scalar> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass, keyed by leaf.
#[derive(Debug)]
pub struct Gradients<T> {
    tape: u64,
    by_tensor: HashMap<TensorId, Vec<T>>,
    by_leaf: HashMap<usize, Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a tensor registered with [`Tape::leaf`].
    pub fn of(&self, tensor: &Tensor<T>) -> Option<&[T]> {
        self.by_tensor.get(&tensor.id()).map(Vec::as_slice)
    }

    /// Gradient for a leaf variable of the tape that produced these gradients.
    pub fn wrt(&self, var: Var) -> Option<&[T]> {
        if var.tape != self.tape {
            return None;
        }
        self.by_leaf.get(&var.index).map(Vec::as_slice)
    }

    /// Adds this pass's gradient into `tensor.grad`, if it participated.
    pub fn accumulate_into(&self, tensor: &mut Tensor<T>) -> Result<()> {
        if let Some(g) = self.by_tensor.get(&tensor.id()) {
            tensor.accumulate_grad(g)?;
        }
        Ok(())
    }
}

fn grad_slot<'g, T: Scalar>(grads: &'g mut [Option<Vec<T>>], nodes: &[Node<T>], j: usize) -> &'g mut Vec<T> {
    let len = nodes[j].value.len();
    grads[j].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d = *d + *s);
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool, op: Op<T>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value: Arc::new(value),
            requires_grad,
            op,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn node(&self, var: Var) -> Result<&Node<T>> {
        if var.tape != self.id {
            return Err(Error::Usage("variable belongs to a different tape".into()));
        }
        Ok(&self.nodes[var.index])
    }

    fn idx(&self, var: Var) -> Result<usize> {
        self.node(var).map(|_| var.index)
    }

    /// Records a tensor. It takes part in differentiation iff
    /// `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: &Tensor<T>) -> Var {
        self.nodes.push(Node {
            shape: tensor.shape().to_vec(),
            value: Arc::clone(tensor.shared_data()),
            requires_grad: tensor.requires_grad(),
            op: Op::Leaf {
                source: Some(tensor.id()),
            },
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Records a non-differentiable input.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        let shape = tensor.shape().to_vec();
        self.push(shape, tensor.into_vec(), false, Op::Leaf { source: None })
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        &self.nodes[self.expect(var)].shape
    }

    pub fn value(&self, var: Var) -> &[T] {
        &self.nodes[self.expect(var)].value
    }

    /// Snapshot of a recorded value as a standalone tensor.
    pub fn tensor(&self, var: Var) -> Tensor<T> {
        let node = &self.nodes[self.expect(var)];
        Tensor::from_parts(node.shape.clone(), Arc::clone(&node.value))
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[self.expect(var)].requires_grad
    }

    fn expect(&self, var: Var) -> usize {
        assert_eq!(var.tape, self.id, "variable belongs to a different tape");
        var.index
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (&self.nodes[ia].shape, &self.nodes[ib].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err(format!("matmul of {sa:?} and {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(&self.nodes[ia].value, &self.nodes[ib].value, m, k, n);
        let rg = self.nodes[ia].requires_grad || self.nodes[ib].requires_grad;
        Ok(self.push(vec![m, n], out, rg, Op::MatMul { a: ia, b: ib }))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (ii, ik) = (self.idx(input)?, self.idx(kernel)?);
        let geom = ConvGeometry::new(&self.nodes[ii].shape, &self.nodes[ik].shape, stride, padding)?;
        let (out, cols) = kernels::conv2d_gemm(&geom, &self.nodes[ii].value, &self.nodes[ik].value);
        let kernel_rg = self.nodes[ik].requires_grad;
        let rg = kernel_rg || self.nodes[ii].requires_grad;
        let cols = if kernel_rg { cols } else { Vec::new() };
        Ok(self.push(
            geom.out_shape(),
            out,
            rg,
            Op::Conv2d {
                input: ii,
                kernel: ik,
                geom,
                cols,
            },
        ))
    }

    /// Elementwise `max(0, x)` with NaN passed through; the subgradient at 0
    /// is 0.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let node = &self.nodes[ix];
        let out = node.value.iter().map(|&v| if v < T::zero() { T::zero() } else { v }).collect();
        let (shape, rg) = (node.shape.clone(), node.requires_grad);
        Ok(self.push(shape, out, rg, Op::Relu { x: ix }))
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let node = &self.nodes[ix];
        let s = &node.shape;
        if s.len() != 4 || !s[2].is_multiple_of(2) || !s[3].is_multiple_of(2) {
            return Err(dim_err(format!("maxpool2 needs N×C×H×W with even H and W, got {s:?}")));
        }
        let (out, argmax) = kernels::maxpool2(&node.value, s[0], s[1], s[2], s[3]);
        let shape = vec![s[0], s[1], s[2] / 2, s[3] / 2];
        let rg = node.requires_grad;
        let argmax = if rg { argmax } else { Vec::new() };
        Ok(self.push(shape, out, rg, Op::MaxPool2 { x: ix, argmax }))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let idxs = parts.iter().map(|&p| self.idx(p)).collect::<Result<Vec<_>>>()?;
        let first = idxs
            .first()
            .map(|&i| self.nodes[i].shape.clone())
            .ok_or_else(|| dim_err("concat of zero tensors"))?;
        if axis >= first.len() {
            return Err(dim_err(format!("concat axis {axis} out of range for {first:?}")));
        }
        let mut shape = first.clone();
        shape[axis] = 0;
        for &i in &idxs {
            let s = &self.nodes[i].shape;
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(dim_err(format!("concat along axis {axis} of {first:?} and {s:?}")));
            }
            shape[axis] += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &i in &idxs {
                let chunk = self.nodes[i].shape[axis] * inner;
                out.extend_from_slice(&self.nodes[i].value[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = idxs.iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push(shape, out, rg, Op::Concat { parts: idxs, axis }))
    }

    /// Adds `bias` (length = size of axis 1) to every position of `x`,
    /// e.g. per feature for `N×F` or per channel for `N×C×H×W`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (ix, ib) = (self.idx(x)?, self.idx(bias)?);
        let (xs, bs) = (&self.nodes[ix].shape, &self.nodes[ib].shape);
        if xs.len() < 2 || bs.len() != 1 || bs[0] != xs[1] {
            return Err(dim_err(format!("bias {bs:?} does not broadcast over {xs:?}")));
        }
        let inner: usize = xs[2..].iter().product();
        let b = &self.nodes[ib].value;
        let out = self.nodes[ix]
            .value
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[(i / inner) % b.len()])
            .collect();
        let shape = xs.clone();
        let rg = self.nodes[ix].requires_grad || self.nodes[ib].requires_grad;
        Ok(self.push(shape, out, rg, Op::AddBias { x: ix, bias: ib }))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ix = self.idx(x)?;
        let s = &self.nodes[ix].shape;
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(dim_err(format!("narrow [{start}, {}) on axis {axis} of {s:?}", start + len)));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let src = &self.nodes[ix].value;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s.clone();
        shape[axis] = len;
        let rg = self.nodes[ix].requires_grad;
        Ok(self.push(shape, out, rg, Op::Narrow { x: ix, axis, start }))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let ix = self.idx(x)?;
        let node = &self.nodes[ix];
        if shape.iter().product::<usize>() != node.value.len() {
            return Err(dim_err(format!("cannot reshape {:?} into {shape:?}", node.shape)));
        }
        let (value, rg) = (Arc::clone(&node.value), node.requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            requires_grad: rg,
            op: Op::Reshape { x: ix },
        });
        Ok(Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        })
    }

    /// Collapses everything after the batch axis: `N×…` to `N×D`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.node(x)?.shape.clone();
        let n = *s.first().ok_or_else(|| dim_err("cannot flatten a scalar"))?;
        self.reshape(x, vec![n, s[1..].iter().product()])
    }

    fn same_shape(&self, a: usize, b: usize, what: &str) -> Result<()> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(dim_err(format!(
                "{what} of {:?} and {:?}",
                self.nodes[a].shape, self.nodes[b].shape
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        self.same_shape(ia, ib, "add")?;
        let out = self.nodes[ia].value.iter().zip(self.nodes[ib].value.iter()).map(|(x, y)| *x + *y).collect();
        let rg = self.nodes[ia].requires_grad || self.nodes[ib].requires_grad;
        let shape = self.nodes[ia].shape.clone();
        Ok(self.push(shape, out, rg, Op::Add { a: ia, b: ib }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        self.same_shape(ia, ib, "mul")?;
        let out = self.nodes[ia].value.iter().zip(self.nodes[ib].value.iter()).map(|(x, y)| *x * *y).collect();
        let rg = self.nodes[ia].requires_grad || self.nodes[ib].requires_grad;
        let shape = self.nodes[ia].shape.clone();
        Ok(self.push(shape, out, rg, Op::Mul { a: ia, b: ib }))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let ix = self.expect(x);
        let node = &self.nodes[ix];
        let out = node.value.iter().map(|&v| v * factor).collect();
        let (shape, rg) = (node.shape.clone(), node.requires_grad);
        self.push(shape, out, rg, Op::Scale { x: ix, factor })
    }

    /// Sum of all elements as a rank-0 scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let ix = self.expect(x);
        let total = self.nodes[ix].value.iter().copied().sum();
        let rg = self.nodes[ix].requires_grad;
        self.push(Vec::new(), vec![total], rg, Op::Sum { x: ix })
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let il = self.idx(logits)?;
        let s = &self.nodes[il].shape;
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(dim_err(format!("cross-entropy of logits {s:?} with {} labels", labels.len())));
        }
        let (n, c) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Data(format!("label {bad} out of range for {c} classes")));
        }
        let x = &self.nodes[il].value;
        let mut probs = vec![T::zero(); n * c];
        let mut loss = 0.0f64;
        for (row, &label) in labels.iter().enumerate() {
            let z = &x[row * c..(row + 1) * c];
            let max = z.iter().copied().fold(T::neg_infinity(), T::max);
            let p = &mut probs[row * c..(row + 1) * c];
            let mut total = T::zero();
            for (pi, &zi) in p.iter_mut().zip(z) {
                *pi = (zi - max).exp();
                total = total + *pi;
            }
            p.iter_mut().for_each(|v| *v = *v / total);
            loss += (total.ln() - (z[label] - max)).as_f64();
        }
        let loss = T::from_f64(loss / n as f64);
        let rg = self.nodes[il].requires_grad;
        Ok(self.push(
            Vec::new(),
            vec![loss],
            rg,
            Op::SoftmaxCrossEntropy {
                logits: il,
                probs,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Differentiates the scalar `loss` with respect to every leaf that
    /// requires a gradient. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let root = self.idx(loss)?;
        if self.nodes[root].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[root].shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(vec![T::one()]);
        let mut out = Gradients {
            tape: self.id,
            by_tensor: HashMap::new(),
            by_leaf: HashMap::new(),
        };

        for i in (0..=root).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf { source } = &node.op {
                if let Some(g) = grads[i].take() {
                    if let Some(id) = source {
                        match out.by_tensor.get_mut(id) {
                            Some(existing) => add_into(existing, &g),
                            None => {
                                out.by_tensor.insert(*id, g.clone());
                            }
                        }
                    }
                    out.by_leaf.insert(i, g);
                }
                continue;
            }
            let Some(dout) = grads[i].take() else { continue };
            self.backprop_node(node, &dout, &mut grads);
        }
        Ok(out)
    }

    fn backprop_node(&self, node: &Node<T>, dout: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let wants = |j: usize| nodes[j].requires_grad;
        macro_rules! slot {
            ($j:expr) => {
                grad_slot(grads, nodes, $j)
            };
        }

        match &node.op {
            Op::Leaf { .. } => unreachable!(),
            Op::MatMul { a, b } => {
                let (sa, sb) = (&nodes[*a].shape, &nodes[*b].shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if wants(*a) {
                    // dA = dOut · Bᵀ
                    let g = slot!(*a);
                    T::gemm(m, n, k, dout, (n as isize, 1), &nodes[*b].value, (1, n as isize), T::one(), g, (k as isize, 1));
                }
                if wants(*b) {
                    // dB = Aᵀ · dOut
                    let g = slot!(*b);
                    T::gemm(k, m, n, &nodes[*a].value, (1, k as isize), dout, (n as isize, 1), T::one(), g, (n as isize, 1));
                }
            }
            Op::Conv2d { input, kernel, geom, cols } => {
                let plane = geom.out_plane();
                let np = geom.batch * plane;
                let kl = geom.patch_len();
                let dout_fm = kernels::batch_major_to_filter_major(dout, geom.filters, geom.batch, plane);
                if wants(*kernel) {
                    let g = slot!(*kernel);
                    T::gemm(geom.filters, np, kl, &dout_fm, (np as isize, 1), cols, (1, np as isize), T::one(), g, (kl as isize, 1));
                }
                if wants(*input) {
                    let mut dcols = vec![T::zero(); kl * np];
                    T::gemm(kl, geom.filters, np, &nodes[*kernel].value, (1, kl as isize), &dout_fm, (np as isize, 1), T::zero(), &mut dcols, (np as isize, 1));
                    let dx = kernels::col2im(geom, &dcols);
                    add_into(slot!(*input), &dx);
                }
            }
            Op::Relu { x } => {
                let g = slot!(*x);
                for ((gi, &d), &v) in g.iter_mut().zip(dout).zip(node.value.iter()) {
                    if v > T::zero() {
                        *gi = *gi + d;
                    }
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let g = slot!(*x);
                for (&d, &src) in dout.iter().zip(argmax) {
                    g[src as usize] = g[src as usize] + d;
                }
            }
            Op::Concat { parts, axis } => {
                let inner: usize = node.shape[axis + 1..].iter().product();
                let outer: usize = node.shape[..*axis].iter().product();
                let row = node.shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let chunk = nodes[p].shape[*axis] * inner;
                    if wants(p) {
                        let g = slot!(p);
                        for o in 0..outer {
                            add_into(&mut g[o * chunk..(o + 1) * chunk], &dout[o * row + offset..o * row + offset + chunk]);
                        }
                    }
                    offset += chunk;
                }
            }
            Op::AddBias { x, bias } => {
                if wants(*x) {
                    add_into(slot!(*x), dout);
                }
                if wants(*bias) {
                    let inner: usize = node.shape[2..].iter().product();
                    let g = slot!(*bias);
                    let c = g.len();
                    for (i, &d) in dout.iter().enumerate() {
                        let ch = (i / inner) % c;
                        g[ch] = g[ch] + d;
                    }
                }
            }
            Op::Narrow { x, axis, start } => {
                let src_shape = &nodes[*x].shape;
                let inner: usize = src_shape[axis + 1..].iter().product();
                let outer: usize = src_shape[..*axis].iter().product();
                let len = node.shape[*axis];
                let g = slot!(*x);
                for o in 0..outer {
                    let base = (o * src_shape[*axis] + start) * inner;
                    add_into(&mut g[base..base + len * inner], &dout[o * len * inner..(o + 1) * len * inner]);
                }
            }
            Op::Reshape { x } => add_into(slot!(*x), dout),
            Op::Add { a, b } => {
                if wants(*a) {
                    add_into(slot!(*a), dout);
                }
                if wants(*b) {
                    add_into(slot!(*b), dout);
                }
            }
            Op::Mul { a, b } => {
                if wants(*a) {
                    let other = Arc::clone(&nodes[*b].value);
                    let g = slot!(*a);
                    for ((gi, &d), &o) in g.iter_mut().zip(dout).zip(other.iter()) {
                        *gi = *gi + d * o;
                    }
                }
                if wants(*b) {
                    let other = Arc::clone(&nodes[*a].value);
                    let g = slot!(*b);
                    for ((gi, &d), &o) in g.iter_mut().zip(dout).zip(other.iter()) {
                        *gi = *gi + d * o;
                    }
                }
            }
            Op::Scale { x, factor } => {
                let g = slot!(*x);
                for (gi, &d) in g.iter_mut().zip(dout) {
                    *gi = *gi + d * *factor;
                }
            }
            Op::Sum { x } => {
                let g = slot!(*x);
                g.iter_mut().for_each(|gi| *gi = *gi + dout[0]);
            }
            Op::SoftmaxCrossEntropy { logits, probs, labels } => {
                let n = labels.len();
                let c = probs.len() / n;
                let scale = dout[0] / T::from_f64(n as f64);
                let g = slot!(*logits);
                for (row, &label) in labels.iter().enumerate() {
                    for j in 0..c {
                        let target = if j == label { T::one() } else { T::zero() };
                        let gi = &mut g[row * c + j];
                        *gi = *gi + (probs[row * c + j] - target) * scale;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 1], &[5.0, 6.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[17.0, 39.0]);
        assert_eq!(tape.shape(c), &[2, 1]);

        let eye = tape.constant(Tensor::eye(3));
        let m = tape.constant(t(&[3, 2], &[1.5, -2.0, 0.25, 7.0, 3.0, -1.0]));
        let same = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.value(same), tape.value(m));

        let z = tape.constant(Tensor::zeros(&[2, 2]));
        let any = tape.constant(t(&[2, 2], &[9.0, 8.0, 7.0, 6.0]));
        let zz = tape.matmul(z, any).unwrap();
        assert_eq!(tape.value(zz), &[0.0; 4]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.matches("[2, 3]").count() == 2, "{msg}");
    }

    #[test]
    fn conv_examples() {
        let mut tape = Tape::<f64>::new();
        let x = t(&[1, 1, 3, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let xv = tape.constant(x.clone());
        let unit = tape.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
        let same = tape.conv2d(xv, unit, 1, 0).unwrap();
        assert_eq!(tape.value(same), x.data());

        let ones = tape.constant(Tensor::full(&[1, 1, 4, 4], 1.0));
        let k = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let out = tape.conv2d(ones, k, 1, 0).unwrap();
        assert_eq!(tape.shape(out), &[1, 1, 2, 2]);
        assert_eq!(tape.value(out), &[9.0; 4]);

        let zk = tape.constant(Tensor::zeros(&[2, 1, 3, 3]));
        let zo = tape.conv2d(xv, zk, 1, 1).unwrap();
        assert!(tape.value(zo).iter().all(|&v| v == 0.0));

        let big = tape.constant(Tensor::zeros(&[1, 1, 5, 5]));
        assert!(matches!(tape.conv2d(xv, big, 1, 0), Err(Error::Config(_))));
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r), &[0.0, 0.0, 2.0]);

        let p = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let pooled = tape.maxpool2(p).unwrap();
        assert_eq!(tape.value(pooled), &[4.0]);
        let odd = tape.constant(Tensor::zeros(&[1, 1, 3, 2]));
        assert!(tape.maxpool2(odd).is_err());

        let a = tape.constant(Tensor::zeros(&[1, 4]));
        let b = tape.constant(Tensor::full(&[1, 4], 1.0));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[1, 8]);
        let tall = tape.constant(Tensor::zeros(&[2, 4]));
        assert!(tape.concat(&[a, tall], 1).is_err());
        assert!(tape.concat(&[a, b], 2).is_err());

        let m = tape.constant(t(&[2, 3], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]));
        let bias = tape.constant(t(&[3], &[10.0, 20.0, 30.0]));
        let out = tape.add_bias(m, bias).unwrap();
        assert_eq!(tape.value(out), &[10.0, 21.0, 32.0, 13.0, 24.0, 35.0]);
        let wrong = tape.constant(Tensor::zeros(&[2]));
        assert!(tape.add_bias(m, wrong).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::<f64>::new();
        let uniform = tape.constant(Tensor::zeros(&[4, 10]));
        let l = tape.softmax_cross_entropy(uniform, &[0, 3, 9, 5]).unwrap();
        assert!((tape.value(l)[0] - 10f64.ln()).abs() < 1e-12);

        let mut sat = vec![0.0; 10];
        sat[4] = 1000.0;
        let s = tape.constant(t(&[1, 10], &sat));
        let l = tape.softmax_cross_entropy(s, &[4]).unwrap();
        assert!(tape.value(l)[0].abs() < 1e-12);

        let z = tape.constant(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let l = tape.softmax_cross_entropy(z, &[2]).unwrap();
        assert!((tape.value(l)[0] - 0.40760596).abs() < 1e-8);

        assert!(matches!(tape.softmax_cross_entropy(z, &[3]), Err(Error::Data(_))));
    }

    #[test]
    fn sum_and_accumulation() {
        let x = t(&[2, 3], &[1.0, -2.0, 0.5, 4.0, 0.0, 3.0]).with_requires_grad(true);
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let loss = tape.sum(v);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.of(&x).unwrap(), &[1.0; 6]);

        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let twice = tape.add(v, v).unwrap();
        let loss = tape.sum(twice);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.of(&x).unwrap(), &[2.0; 6]);
    }

    #[test]
    fn non_participating_tensors_untouched() {
        let x = t(&[2], &[1.0, 2.0]).with_requires_grad(true);
        let frozen = t(&[2], &[3.0, 4.0]);
        let mut tape = Tape::new();
        let a = tape.leaf(&x);
        let b = tape.leaf(&frozen);
        let p = tape.mul(a, b).unwrap();
        let loss = tape.sum(p);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.of(&x).unwrap(), &[3.0, 4.0]);
        assert!(g.of(&frozen).is_none());
    }

    #[test]
    fn backward_usage_errors() {
        let mut other = Tape::<f64>::new();
        let foreign = other.constant(Tensor::scalar(1.0));
        let tape = Tape::<f64>::new();
        assert!(matches!(tape.backward(foreign), Err(Error::Usage(_))));

        let mut tape = Tape::<f64>::new();
        let v = tape.constant(Tensor::zeros(&[3]));
        assert!(matches!(tape.backward(v), Err(Error::Usage(_))));
    }
}
