use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};

use super::kernels::{self, ConvGeom};
use super::{Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation families, used to name failing gradient checks and for fault
/// injection in the gradient-check harness.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Leaf,
    MatMul,
    BatchMatMul,
    Linear,
    Conv2d,
    Add,
    Sub,
    Mul,
    AddBroadcast,
    MulBroadcast,
    Scale,
    Sum,
    Mean,
    MeanAxis,
    LayerNorm,
    Gelu,
    Softmax,
    Permute,
    Reshape,
    Linearized,
}

impl OpKind {
    pub const ALL: [OpKind; 20] = [
        OpKind::Leaf,
        OpKind::MatMul,
        OpKind::BatchMatMul,
        OpKind::Linear,
        OpKind::Conv2d,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::AddBroadcast,
        OpKind::MulBroadcast,
        OpKind::Scale,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::MeanAxis,
        OpKind::LayerNorm,
        OpKind::Gelu,
        OpKind::Softmax,
        OpKind::Permute,
        OpKind::Reshape,
        OpKind::Linearized,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::BatchMatMul => "batch_matmul",
            OpKind::Linear => "linear",
            OpKind::Conv2d => "conv2d",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::AddBroadcast => "add_broadcast",
            OpKind::MulBroadcast => "mul_broadcast",
            OpKind::Scale => "scale",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::MeanAxis => "mean_axis",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Gelu => "gelu",
            OpKind::Softmax => "softmax",
            OpKind::Permute => "permute",
            OpKind::Reshape => "reshape",
            OpKind::Linearized => "linearized",
        }
    }

    pub fn parse(s: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.name() == s)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, k: Var, b: Option<Var>, geom: ConvGeom },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddBroadcast { x: Var, b: Var },
    MulBroadcast { x: Var, b: Var },
    Scale { x: Var, c: T },
    Sum { x: Var },
    Mean { x: Var },
    MeanAxis { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<T>, rstd: Vec<T> },
    Gelu { x: Var },
    Softmax { x: Var, axis: usize },
    Permute { x: Var, perm: Vec<usize> },
    Reshape { x: Var },
    Linearized { x: Var, local_grad: Vec<T> },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::BatchMatMul { .. } => OpKind::BatchMatMul,
            Op::Linear { .. } => OpKind::Linear,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Add { .. } => OpKind::Add,
            Op::Sub { .. } => OpKind::Sub,
            Op::Mul { .. } => OpKind::Mul,
            Op::AddBroadcast { .. } => OpKind::AddBroadcast,
            Op::MulBroadcast { .. } => OpKind::MulBroadcast,
            Op::Scale { .. } => OpKind::Scale,
            Op::Sum { .. } => OpKind::Sum,
            Op::Mean { .. } => OpKind::Mean,
            Op::MeanAxis { .. } => OpKind::MeanAxis,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Gelu { .. } => OpKind::Gelu,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::Permute { .. } => OpKind::Permute,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Linearized { .. } => OpKind::Linearized,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations in execution order; replaying the tape backwards
/// yields gradients for every leaf that requires them.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    names: BTreeMap<String, Var>,
    fault: Option<OpKind>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), names: BTreeMap::new(), fault: None }
    }

    /// Test hook: perturbs the backward pass of every `kind` node so that the
    /// gradient checker has something to catch.
    pub fn inject_fault(&mut self, kind: Option<OpKind>) {
        self.fault = kind;
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

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf registered under `name`.
    pub fn param(&mut self, name: &str, t: Tensor<T>) -> Result<Var> {
        let v = self.leaf(t, true);
        self.bind_name(name, v)?;
        Ok(v)
    }

    pub fn bind_name(&mut self, name: &str, v: Var) -> Result<()> {
        if self.names.insert(name.to_string(), v).is_some() {
            return Err(Error::config(format!("parameter {name} registered twice")));
        }
        Ok(())
    }

    pub fn param_var(&self, name: &str) -> Result<Var> {
        self.names
            .get(name)
            .copied()
            .ok_or_else(|| Error::config(format!("missing parameter {name}")))
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.names.contains_key(name)
    }

    pub fn param_names(&self) -> impl Iterator<Item = (&str, Var)> {
        self.names.iter().map(|(k, &v)| (k.as_str(), v))
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    /// Plain 2-D matrix product `[m×k]·[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul: cannot multiply {sa:?} by {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(self.data(a), self.data(b), m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul { a, b }, &[a, b]))
    }

    /// Batched product of `[G×m×k]` with `[G×k×n]`, or with `[G×n×k]ᵀ` when
    /// `trans_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || Error::shape(format!("batch_matmul: cannot multiply {sa:?} by {sb:?} (trans_b={trans_b})"));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(bad());
        }
        let (da, db) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(g * m * n);
        for gi in 0..g {
            let ab = &da[gi * m * k..(gi + 1) * m * k];
            let bb = &db[gi * k * n..(gi + 1) * k * n];
            if trans_b {
                out.extend(kernels::matmul_bt(ab, bb, m, k, n));
            } else {
                out.extend(kernels::matmul(ab, bb, m, k, n));
            }
        }
        let t = Tensor::new(vec![g, m, n], out)?;
        Ok(self.push(t, Op::BatchMatMul { a, b, trans_b }, &[a, b]))
    }

    /// Affine map over the last axis: `x[..., k] · w[k×n] + b[n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let k = *sx.last().unwrap_or(&0);
        if sw.len() != 2 || sw[0] != k {
            return Err(Error::shape(format!("linear: input {sx:?} incompatible with weight {sw:?}")));
        }
        let n = sw[1];
        if let Some(b) = b {
            if self.shape(b) != [n] {
                return Err(Error::shape(format!("linear: bias {:?} for weight {sw:?}", self.shape(b))));
            }
        }
        let rows = self.value(x).len() / k;
        let mut out = vec![T::zero(); rows * n];
        if let Some(b) = b {
            let bias = self.data(b);
            for row in out.chunks_mut(n) {
                row.copy_from_slice(bias);
            }
        }
        kernels::matmul_acc(self.data(x), self.data(w), &mut out, rows, k, n);
        let mut shape = sx.clone();
        *shape.last_mut().unwrap() = n;
        let t = Tensor::new(shape, out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(t, Op::Linear { x, w, b }, &inputs))
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        k: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(k), stride, padding, groups)?;
        if let Some(b) = b {
            if self.shape(b) != [geom.out_ch] {
                return Err(Error::shape(format!(
                    "conv2d: bias {:?} for {} output channels",
                    self.shape(b),
                    geom.out_ch
                )));
            }
        }
        let out = kernels::conv2d_forward(&geom, self.data(x), self.data(k), b.map(|b| self.data(b)));
        let t = Tensor::new(geom.out_shape(), out)?;
        let inputs: Vec<Var> = [Some(x), Some(k), b].into_iter().flatten().collect();
        Ok(self.push(t, Op::Conv2d { x, k, b, geom }, &inputs))
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Vec<T> {
        self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(t, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_with(a, b, |x, y| x - y);
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(t, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_with(a, b, |x, y| x * y);
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(t, Op::Mul { a, b }, &[a, b]))
    }

    fn suffix_len(&self, x: Var, b: Var, op: &str) -> Result<usize> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sb.len() > sx.len() || sx[sx.len() - sb.len()..] != *sb {
            return Err(Error::shape(format!("{op}: {sb:?} is not a trailing shape of {sx:?}")));
        }
        Ok(self.value(b).len())
    }

    /// `x + b` with `b` repeated over the leading axes of `x`.
    pub fn add_broadcast(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = self.suffix_len(x, b, "add_broadcast")?;
        let bias = self.data(b);
        let out: Vec<T> = self.data(x).iter().enumerate().map(|(i, &v)| v + bias[i % n]).collect();
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(t, Op::AddBroadcast { x, b }, &[x, b]))
    }

    /// `x * b` with `b` repeated over the leading axes of `x`.
    pub fn mul_broadcast(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = self.suffix_len(x, b, "mul_broadcast")?;
        let s = self.data(b);
        let out: Vec<T> = self.data(x).iter().enumerate().map(|(i, &v)| v * s[i % n]).collect();
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(t, Op::MulBroadcast { x, b }, &[x, b]))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let out: Vec<T> = self.data(x).iter().map(|&v| v * c).collect();
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(t, Op::Scale { x, c }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.data(x).iter().copied().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum { x }, &[x]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = T::from_f64(self.value(x).len() as f64);
        let s: T = self.data(x).iter().copied().sum();
        Ok(self.push(Tensor::scalar(s / n), Op::Mean { x }, &[x]))
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape.len() < 2 {
            return Err(Error::shape(format!("mean_axis: invalid axis {axis} for {shape:?}")));
        }
        let (outer, len, inner) = kernels::split_axis(&shape, axis);
        let d = self.data(x);
        let inv = T::from_f64(1.0 / len as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for l in 0..len {
                for (acc, &v) in dst.iter_mut().zip(&d[(o * len + l) * inner..][..inner]) {
                    *acc += v;
                }
            }
            for v in dst.iter_mut() {
                *v *= inv;
            }
        }
        let mut oshape = shape;
        oshape.remove(axis);
        let t = Tensor::new(oshape, out)?;
        Ok(self.push(t, Op::MeanAxis { x, axis }, &[x]))
    }

    /// Standardises the last axis then applies `gamma·x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape(format!(
                "layer_norm: normalized size {d} of {:?} vs gamma {:?} and beta {:?}",
                self.shape(x),
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        if !(eps >= 0.0) {
            return Err(Error::contract(format!("layer_norm: eps must be non-negative, got {eps}")));
        }
        let (out, mean, rstd) =
            kernels::layer_norm_forward(self.data(x), d, self.data(gamma), self.data(beta), T::from_f64(eps));
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, mean, rstd }, &[x, gamma, beta]))
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out: Vec<T> = self.data(x).iter().map(|&v| gelu(v)).collect();
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(t, Op::Gelu { x }, &[x]))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(format!("softmax: invalid axis {axis} for {shape:?}")));
        }
        let out = kernels::softmax_forward(self.data(x), &shape, axis);
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Softmax { x, axis }, &[x]))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape(format!("permute: {perm:?} is not a permutation of {shape:?}")));
        }
        let out = kernels::permute(self.data(x), &shape, perm);
        let oshape = perm.iter().map(|&p| shape[p]).collect();
        let t = Tensor::new(oshape, out)?;
        Ok(self.push(t, Op::Permute { x, perm: perm.to_vec() }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape { x }, &[x]))
    }

    /// Records a scalar `f(x)` computed outside the graph together with its
    /// gradient `df/dx`. Used by the loss functions.
    pub fn linearized(&mut self, x: Var, value: T, local_grad: Vec<T>) -> Result<Var> {
        if local_grad.len() != self.value(x).len() {
            return Err(Error::shape(format!(
                "linearized: {} gradient entries for {:?}",
                local_grad.len(),
                self.shape(x)
            )));
        }
        Ok(self.push(Tensor::scalar(value), Op::Linearized { x, local_grad }, &[x]))
    }

    /// Reverse sweep from a scalar `loss`. Gradients are kept for leaves only.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut contribs = self.node_backward(i, &g);
            if self.fault == Some(node.op.kind()) {
                for (_, c) in contribs.iter_mut() {
                    for v in c.iter_mut() {
                        *v = *v * T::from_f64(1.1) + T::from_f64(1e-2);
                    }
                }
            }
            for (v, c) in contribs {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, x) in acc.iter_mut().zip(&c) {
                            *a += *x;
                        }
                    }
                    slot @ None => *slot = Some(c),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn node_backward(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.wants(*a) {
                    out.push((*a, kernels::matmul_bt(g, self.data(*b), m, n, k)));
                }
                if self.wants(*b) {
                    out.push((*b, kernels::matmul_at(self.data(*a), g, m, k, n)));
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = self.shape(*a);
                let (gn, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.shape()[2];
                let (da, db) = (self.data(*a), self.data(*b));
                if self.wants(*a) {
                    let mut ga = Vec::with_capacity(da.len());
                    for gi in 0..gn {
                        let gg = &g[gi * m * n..(gi + 1) * m * n];
                        let bb = &db[gi * k * n..(gi + 1) * k * n];
                        if *trans_b {
                            ga.extend(kernels::matmul(gg, bb, m, n, k));
                        } else {
                            ga.extend(kernels::matmul_bt(gg, bb, m, n, k));
                        }
                    }
                    out.push((*a, ga));
                }
                if self.wants(*b) {
                    let mut gb = Vec::with_capacity(db.len());
                    for gi in 0..gn {
                        let gg = &g[gi * m * n..(gi + 1) * m * n];
                        let ab = &da[gi * m * k..(gi + 1) * m * k];
                        if *trans_b {
                            gb.extend(kernels::matmul_at(gg, ab, m, n, k));
                        } else {
                            gb.extend(kernels::matmul_at(ab, gg, m, k, n));
                        }
                    }
                    out.push((*b, gb));
                }
            }
            Op::Linear { x, w, b } => {
                let sw = self.shape(*w);
                let (k, n) = (sw[0], sw[1]);
                let rows = self.value(*x).len() / k;
                if self.wants(*x) {
                    out.push((*x, kernels::matmul_bt(g, self.data(*w), rows, n, k)));
                }
                if self.wants(*w) {
                    out.push((*w, kernels::matmul_at(self.data(*x), g, rows, k, n)));
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut gb = vec![T::zero(); n];
                        for row in g.chunks(n) {
                            for (a, &v) in gb.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                        out.push((*b, gb));
                    }
                }
            }
            Op::Conv2d { x, k, b, geom } => {
                if self.wants(*x) {
                    out.push((*x, kernels::conv2d_grad_input(geom, g, self.data(*k))));
                }
                if self.wants(*k) {
                    out.push((*k, kernels::conv2d_grad_kernel(geom, g, self.data(*x))));
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        out.push((*b, kernels::conv2d_grad_bias(geom, g)));
                    }
                }
            }
            Op::Add { a, b } => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Sub { a, b } => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.iter().map(|&v| -v).collect()));
            }
            Op::Mul { a, b } => {
                let (da, db) = (self.data(*a), self.data(*b));
                if self.wants(*a) {
                    out.push((*a, g.iter().zip(db).map(|(&gv, &y)| gv * y).collect()));
                }
                if self.wants(*b) {
                    out.push((*b, g.iter().zip(da).map(|(&gv, &x)| gv * x).collect()));
                }
            }
            Op::AddBroadcast { x, b } => {
                let n = self.value(*b).len();
                if self.wants(*b) {
                    let mut gb = vec![T::zero(); n];
                    for chunk in g.chunks(n) {
                        for (a, &v) in gb.iter_mut().zip(chunk) {
                            *a += v;
                        }
                    }
                    out.push((*b, gb));
                }
                out.push((*x, g.to_vec()));
            }
            Op::MulBroadcast { x, b } => {
                let n = self.value(*b).len();
                let (dx, db) = (self.data(*x), self.data(*b));
                if self.wants(*b) {
                    let mut gb = vec![T::zero(); n];
                    for (chunk, xc) in g.chunks(n).zip(dx.chunks(n)) {
                        for ((a, &gv), &xv) in gb.iter_mut().zip(chunk).zip(xc) {
                            *a += gv * xv;
                        }
                    }
                    out.push((*b, gb));
                }
                if self.wants(*x) {
                    out.push((*x, g.iter().enumerate().map(|(i, &gv)| gv * db[i % n]).collect()));
                }
            }
            Op::Scale { x, c } => out.push((*x, g.iter().map(|&v| v * *c).collect())),
            Op::Sum { x } => out.push((*x, vec![g[0]; self.value(*x).len()])),
            Op::Mean { x } => {
                let n = self.value(*x).len();
                out.push((*x, vec![g[0] / T::from_f64(n as f64); n]));
            }
            Op::MeanAxis { x, axis } => {
                let (outer, len, inner) = kernels::split_axis(self.shape(*x), *axis);
                let inv = T::from_f64(1.0 / len as f64);
                let mut gx = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for _ in 0..len {
                        gx.extend(src.iter().map(|&v| v * inv));
                    }
                }
                out.push((*x, gx));
            }
            Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                let d = self.value(*gamma).len();
                let (gx, gg, gb) =
                    kernels::layer_norm_backward(self.data(*x), g, d, self.data(*gamma), mean, rstd);
                out.push((*x, gx));
                out.push((*gamma, gg));
                out.push((*beta, gb));
            }
            Op::Gelu { x } => {
                out.push((*x, g.iter().zip(self.data(*x)).map(|(&gv, &v)| gv * gelu_grad(v)).collect()));
            }
            Op::Softmax { x, axis } => {
                out.push((*x, kernels::softmax_backward(node.value.data(), g, self.shape(*x), *axis)));
            }
            Op::Permute { x, perm } => {
                let inv = kernels::inverse_permutation(perm);
                out.push((*x, kernels::permute(g, node.value.shape(), &inv)));
            }
            Op::Reshape { x } => out.push((*x, g.to_vec())),
            Op::Linearized { x, local_grad } => {
                out.push((*x, local_grad.iter().map(|&v| v * g[0]).collect()));
            }
        }
        out
    }
}

#[inline]
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    x * half * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
fn gelu_grad<T: Scalar>(x: T) -> T {
    let cdf = T::from_f64(0.5) * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * T::from_f64(0.5)).exp() * T::from_f64(0.398_942_280_401_432_7);
    cdf + x * pdf
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf; zeros when the leaf does not influence the loss.
    pub fn wrt(&self, graph: &Graph<T>, v: Var) -> Tensor<T> {
        let shape = graph.shape(v).to_vec();
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient length matches its leaf"),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn is_reached(&self, v: Var) -> bool {
        self.grads.get(v.0).is_some_and(|g| g.is_some())
    }

    /// Gradient for every named parameter of `graph`.
    pub fn named(&self, graph: &Graph<T>) -> BTreeMap<String, Tensor<T>> {
        graph
            .param_names()
            .map(|(name, v)| (name.to_string(), self.wrt(graph, v)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor<f32> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut g = Graph::<f32>::new();
        let i = g.input(t(&[2, 2], &[1., 0., 0., 1.]));
        let v = g.input(t(&[2, 1], &[3., 4.]));
        let y = g.matmul(i, v).unwrap();
        assert_eq!(g.data(y), &[3., 4.]);
        let a = g.input(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = g.input(t(&[2, 1], &[5., 6.]));
        let y = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(y), &[2, 1]);
        assert_eq!(g.data(y), &[17., 39.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f32>::new();
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[2, 3]));
        let msg = g.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.starts_with("shape error"), "{msg}");
    }

    #[test]
    fn matmul_gradient_is_b_transposed() {
        let mut g = Graph::<f32>::new();
        let a = g.param("a", t(&[1, 2], &[1., 2.])).unwrap();
        let b = g.param("b", t(&[2, 1], &[3., 4.])).unwrap();
        let y = g.matmul(a, b).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(&g, a).data(), &[3., 4.]);
        assert_eq!(grads.wrt(&g, b).data(), &[1., 2.]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f32>::new();
        let p = g.param("p", Tensor::zeros(&[3])).unwrap();
        let y = g.scale(p, 2.0).unwrap();
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn sum_and_square_gradients() {
        let mut g = Graph::<f32>::new();
        let p = g.param("p", Tensor::full(&[2, 3], 0.7)).unwrap();
        let s = g.sum(p).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.wrt(&g, p).data().iter().all(|&v| v == 1.0));

        let mut g = Graph::<f32>::new();
        let p = g.param("p", t(&[1], &[3.])).unwrap();
        let sq = g.mul(p, p).unwrap();
        let s = g.sum(sq).unwrap();
        assert_eq!(g.backward(s).unwrap().wrt(&g, p).data(), &[6.]);
    }

    #[test]
    fn unreached_parameters_get_zero_gradient() {
        let mut g = Graph::<f32>::new();
        let p = g.param("p", Tensor::full(&[2], 1.0)).unwrap();
        let q = g.param("q", Tensor::full(&[3], 1.0)).unwrap();
        let s = g.sum(p).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(!grads.is_reached(q));
        let named = grads.named(&g);
        assert_eq!(named["q"].data(), &[0.0, 0.0, 0.0]);
        assert_eq!(named["p"].data(), &[1.0, 1.0]);
    }

    #[test]
    fn two_consumers_accumulate_exactly() {
        let x0 = t(&[4], &[0.3, -1.2, 2.5, 0.01]);
        let grad_of = |twice: bool| {
            let mut g = Graph::<f32>::new();
            let x = g.param("x", x0.clone()).unwrap();
            let f = |g: &mut Graph<f32>| {
                let y = g.gelu(x).unwrap();
                let y = g.softmax(y, 0).unwrap();
                let y = g.mul(y, y).unwrap();
                g.sum(y).unwrap()
            };
            let a = f(&mut g);
            let out = if twice {
                let b = f(&mut g);
                g.add(a, b).unwrap()
            } else {
                a
            };
            g.backward(out).unwrap().wrt(&g, x).into_data()
        };
        let once = grad_of(false);
        let twice = grad_of(true);
        for (a, b) in once.iter().zip(&twice) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn conv2d_examples() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::full(&[1, 1, 3, 3], 1.0));
        let k = g.input(t(&[1, 1, 1, 1], &[2.0]));
        let y = g.conv2d(x, k, None, 1, 0, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 3, 3]);
        assert!(g.data(y).iter().all(|&v| v == 2.0));

        let x = g.input(Tensor::full(&[1, 2, 4, 4], 0.5));
        let k = g.input(Tensor::full(&[2, 1, 7, 7], 0.1));
        let y = g.conv2d(x, k, None, 1, 3, 2).unwrap();
        assert_eq!(g.shape(y), &[1, 2, 4, 4]);

        let x = g.input(t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
        let k = g.input(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = g.conv2d(x, k, None, 1, 0, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1, 1]);
        assert_eq!(g.data(y), &[45.0]);
    }

    #[test]
    fn conv2d_errors() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::zeros(&[1, 3, 4, 4]));
        let k = g.input(Tensor::zeros(&[3, 1, 3, 3]));
        assert!(g.conv2d(x, k, None, 1, 0, 2).is_err());
        let k = g.input(Tensor::zeros(&[3, 3, 3, 3]));
        assert!(g.conv2d(x, k, None, 2, 0, 1).is_err());
    }

    #[test]
    fn identity_depthwise_conv_is_identity() {
        let mut g = Graph::<f32>::new();
        let data: Vec<f32> = (0..48).map(|i| (i as f32).sin()).collect();
        let x = g.input(t(&[1, 3, 4, 4], &data));
        let k = g.input(Tensor::full(&[3, 1, 1, 1], 1.0));
        let y = g.conv2d(x, k, None, 1, 0, 3).unwrap();
        assert_eq!(g.data(y), &data[..]);
    }

    #[test]
    fn conv2d_matches_direct_summation() {
        // 2 groups, stride 2, padding 1 against an independent loop
        let (b, c, h, w, o, kk, s, p, grp) = (2, 4, 5, 5, 6, 3, 2, 1, 2);
        let x: Vec<f64> = (0..b * c * h * w).map(|i| ((i * 31 % 17) as f64) / 7.0 - 1.0).collect();
        let k: Vec<f64> = (0..o * (c / grp) * kk * kk).map(|i| ((i * 13 % 11) as f64) / 5.0 - 1.0).collect();
        let mut g = Graph::<f64>::new();
        let xv = g.input(Tensor::new(vec![b, c, h, w], x.clone()).unwrap());
        let kv = g.input(Tensor::new(vec![o, c / grp, kk, kk], k.clone()).unwrap());
        let y = g.conv2d(xv, kv, None, s, p, grp).unwrap();
        let (oh, ow) = (3, 3);
        assert_eq!(g.shape(y), &[b, o, oh, ow]);
        let cpg = c / grp;
        let opg = o / grp;
        for bi in 0..b {
            for oi in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..cpg {
                            let cin = (oi / opg) * cpg + ci;
                            for ky in 0..kk {
                                for kx in 0..kk {
                                    let iy = (oy * s + ky) as isize - p as isize;
                                    let ix = (ox * s + kx) as isize - p as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += k[((oi * cpg + ci) * kk + ky) * kk + kx]
                                        * x[((bi * c + cin) * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                        let got = g.data(y)[((bi * o + oi) * oh + oy) * ow + ox];
                        assert!((got - acc).abs() < 1e-12, "{got} vs {acc}");
                    }
                }
            }
        }
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::<f32>::new();
        let one = g.input(Tensor::full(&[4], 1.0));
        let zero = g.input(Tensor::zeros(&[4]));
        let x = g.input(Tensor::full(&[4], 1.0));
        let y = g.layer_norm(x, one, zero, 1e-5).unwrap();
        assert_eq!(g.data(y), &[0.0; 4]);

        let one = g.input(Tensor::full(&[2], 1.0));
        let zero = g.input(Tensor::zeros(&[2]));
        let x = g.input(t(&[2], &[1., 3.]));
        let y = g.layer_norm(x, one, zero, 0.0).unwrap();
        assert_eq!(g.data(y), &[-1.0, 1.0]);

        let x = g.input(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.layer_norm(x, one, zero, 1e-5), Err(Error::Shape(_))));
    }

    #[test]
    fn gelu_values() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::new(vec![3], vec![0.0, 10.0, 1.0]).unwrap());
        let y = g.gelu(x).unwrap();
        let d = g.data(y);
        assert_eq!(d[0], 0.0);
        assert!((d[1] - 10.0).abs() < 1e-6);
        assert!((d[2] - 0.841_344_746_068_542_9).abs() < 1e-7);
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::zeros(&[3]));
        let y = g.softmax(x, 0).unwrap();
        for &v in g.data(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        let x = g.input(t(&[2], &[1000., 0.]));
        let y = g.softmax(x, 0).unwrap();
        assert!((g.data(y)[0] - 1.0).abs() < 1e-6 && g.data(y)[1] >= 0.0);
        assert!(g.data(y).iter().all(|v| v.is_finite()));
        let x = g.input(t(&[2], &[1., 2.]));
        let y = g.softmax(x, 0).unwrap();
        let e = (1f64.exp(), 2f64.exp());
        assert!((g.data(y)[0] as f64 - e.0 / (e.0 + e.1)).abs() < 1e-6);
        assert!((g.data(y)[0] - 0.26894).abs() < 1e-5);
        assert!((g.data(y)[1] - 0.73106).abs() < 1e-5);
        assert!(g.softmax(x, 1).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut g = Graph::<f32>::new();
            let x = g.input(Tensor::new(vec![2, 3, 8, 8], (0..384).map(|i| (i as f32 * 0.37).cos()).collect()).unwrap());
            let k = g.input(Tensor::new(vec![3, 1, 7, 7], (0..147).map(|i| (i as f32 * 0.11).sin()).collect()).unwrap());
            let y = g.conv2d(x, k, None, 1, 3, 3).unwrap();
            let y = g.gelu(y).unwrap();
            g.data(y).to_vec()
        };
        let (a, b) = (run(), run());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
