//! Reverse-mode differentiation over a linear operation trace.
//!
//! A [`Graph`] records every operation in the order it is executed, which is
//! already a topological order. [`Graph::backward`] walks the trace once in
//! reverse and accumulates gradients by summation over all uses of a value.
//! Leaves that do not require gradients (constants, frozen parameters) never
//! receive a gradient entry.

mod gradcheck;
mod kernels;

use std::collections::{BTreeMap, HashMap};

pub use gradcheck::{finite_diff_check, finite_diff_check_probe, probe_loss, FdOptions, FdReport, Oracle, Probe};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{sum_of, Real, Tensor};

use kernels::{mm_nn, mm_nt, mm_tn, permute_data, suffix_repeat};

/// Handle to a value recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    MatMul,
    Transpose,
    Permute,
    Reshape,
    Softmax,
    Relu,
    Silu,
    Abs,
    Square,
    RmsNorm,
    Concat,
    Gather,
    ConvTime,
    Sum,
    Mean,
}

impl OpKind {
    pub const ALL: [OpKind; 20] = [
        OpKind::Leaf,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::MatMul,
        OpKind::Transpose,
        OpKind::Permute,
        OpKind::Reshape,
        OpKind::Softmax,
        OpKind::Relu,
        OpKind::Silu,
        OpKind::Abs,
        OpKind::Square,
        OpKind::RmsNorm,
        OpKind::Concat,
        OpKind::Gather,
        OpKind::ConvTime,
        OpKind::Sum,
        OpKind::Mean,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Permute => "permute",
            OpKind::Reshape => "reshape",
            OpKind::Softmax => "softmax_last",
            OpKind::Relu => "relu",
            OpKind::Silu => "silu",
            OpKind::Abs => "abs",
            OpKind::Square => "square",
            OpKind::RmsNorm => "rmsnorm",
            OpKind::Concat => "concat_last",
            OpKind::Gather => "gather_rows",
            OpKind::ConvTime => "conv_time",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
        }
    }
}

impl std::str::FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown operation {s:?}")))
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    Transpose(Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Softmax(Var),
    Relu(Var),
    Silu(Var),
    Abs(Var),
    Square(Var),
    RmsNorm { x: Var, gamma: Var, inv: Vec<T> },
    Concat(Vec<Var>),
    Gather { table: Var, indices: Vec<usize> },
    ConvTime { x: Var, kernel: Var },
    Sum(Var),
    Mean(Var),
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Permute(..) => OpKind::Permute,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Softmax(..) => OpKind::Softmax,
            Op::Relu(..) => OpKind::Relu,
            Op::Silu(..) => OpKind::Silu,
            Op::Abs(..) => OpKind::Abs,
            Op::Square(..) => OpKind::Square,
            Op::RmsNorm { .. } => OpKind::RmsNorm,
            Op::Concat(..) => OpKind::Concat,
            Op::Gather { .. } => OpKind::Gather,
            Op::ConvTime { .. } => OpKind::ConvTime,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// The computation record for one forward evaluation.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(Var, ParamId)>,
    fault: Option<OpKind>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to traced leaves.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    leaves: HashMap<Var, Tensor<T>>,
    params: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn into_params(self) -> BTreeMap<ParamId, Tensor<T>> {
        self.params
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            fault: None,
        }
    }

    /// Scale the backward rule of every `kind` operation by 1.1. Exists so
    /// the gradient checker can be shown to catch a broken rule.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
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

    /// Sign pattern of every input to a piecewise-linear op (`relu`, `abs`).
    /// Two evaluations with equal patterns lie on the same linear piece.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for n in &self.nodes {
            if let Op::Relu(a) | Op::Abs(a) = n.op {
                out.extend(self.value(a).data().iter().map(|&x| x > T::zero()));
            }
        }
        out
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

    /// A leaf whose gradient is tracked iff the tensor says so.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t.with_requires_grad(false), Op::Leaf, false)
    }

    /// A parameter leaf; frozen parameters are recorded without gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Leaf, !p.frozen);
        self.params.push((v, id));
        v
    }

    fn suffix_check(&self, op: &'static str, a: Var, b: Var) -> Result<usize> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(self.value(a).len() / self.value(b).len())
    }

    /// Elementwise sum; `b` may broadcast over leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.suffix_check("add", a, b)?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let k = bv.len();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % k])
            .collect();
        let out = Tensor::new(av.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.suffix_check("sub", a, b)?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let k = bv.len();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x - bv[i % k])
            .collect();
        let out = Tensor::new(av.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise product; `b` may broadcast over leading axes of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.suffix_check("mul", a, b)?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let k = bv.len();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * bv[i % k])
            .collect();
        let out = Tensor::new(av.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    /// Batched matrix product `[…,p,q] · […,q,r] → […,p,r]`. Either side may
    /// be a plain matrix broadcast across the other side's batch axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (ba, bb, p, q, r, out_shape) = matmul_dims(&sa, &sb)?;
        let batch = ba.max(bb);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); batch * p * r];
        for i in 0..batch {
            let ao = if ba == 1 { 0 } else { i * p * q };
            let bo = if bb == 1 { 0 } else { i * q * r };
            mm_nn(
                &av[ao..ao + p * q],
                &bv[bo..bo + q * r],
                &mut out[i * p * r..(i + 1) * p * r],
                p,
                q,
                r,
            );
        }
        let out = Tensor::new(&out_shape, out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let rank = self.shape(a).len();
        if rank < 2 {
            return Err(Error::shape("transpose", self.shape(a), &[]));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        let (shape, data) = permute_data(self.value(a), &axes);
        let out = Tensor::new(&shape, data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let rank = self.shape(a).len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&x| x >= rank || std::mem::replace(&mut seen[x], true)) {
            return Err(Error::shape("permute", self.shape(a), axes));
        }
        let (shape, data) = permute_data(self.value(a), axes);
        let out = Tensor::new(&shape, data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Permute(a, axes.to_vec()), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?.with_requires_grad(false);
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax_last(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let k = *av.shape().last().unwrap();
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(k) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
        let out = Tensor::new(av.shape(), data).unwrap();
        let rg = self.rg(a);
        self.push(out, Op::Softmax(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(T::zero()));
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x / (T::one() + (-x).exp()));
        let rg = self.rg(a);
        self.push(out, Op::Silu(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.abs());
        let rg = self.rg(a);
        self.push(out, Op::Abs(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        let rg = self.rg(a);
        self.push(out, Op::Square(a), rg)
    }

    /// `x / sqrt(mean(x²) + eps) · gamma` over the last axis.
    pub fn rmsnorm(&mut self, x: Var, gamma: Var, eps: T) -> Result<Var> {
        let sx = self.shape(x);
        let k = *sx.last().unwrap();
        if self.shape(gamma) != [k] {
            return Err(Error::shape("rmsnorm", sx, self.shape(gamma)));
        }
        let xv = self.value(x);
        let gv = self.value(gamma).data();
        let kt = T::c(k as f64);
        let mut inv = Vec::with_capacity(xv.len() / k);
        let mut data = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(k) {
            let ms = sum_of(row.iter().map(|&v| v * v)) / kt;
            let r = T::one() / (ms + eps).sqrt();
            inv.push(r);
            data.extend(row.iter().zip(gv).map(|(&v, &g)| v * r * g));
        }
        let out = Tensor::new(xv.shape(), data)?;
        let rg = self.rg(x) || self.rg(gamma);
        Ok(self.push(out, Op::RmsNorm { x, gamma, inv }, rg))
    }

    /// Concatenate along the last axis; leading extents must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
        let lead = &self.shape(first)[..self.shape(first).len() - 1];
        let rows: usize = lead.iter().product();
        let mut width = 0;
        for &p in parts {
            let s = self.shape(p);
            if &s[..s.len() - 1] != lead {
                return Err(Error::shape("concat_last", self.shape(first), s));
            }
            width += s[s.len() - 1];
        }
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                let k = *self.shape(p).last().unwrap();
                data.extend_from_slice(&self.value(p).data()[r * k..(r + 1) * k]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(width);
        let out = Tensor::new(&shape, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::Concat(parts.to_vec()), rg))
    }

    /// Row lookup `table[indices[i], :]`, producing `[len(indices), width]`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let st = self.shape(table);
        if st.len() != 2 {
            return Err(Error::shape("gather_rows", st, &[]));
        }
        let (vocab, width) = (st[0], st[1]);
        if indices.is_empty() {
            return Err(Error::Usage("gather_rows with no indices".into()));
        }
        let tv = self.value(table).data();
        let mut data = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            if i >= vocab {
                return Err(Error::Index {
                    what: "embedding row",
                    index: i,
                    limit: vocab,
                });
            }
            data.extend_from_slice(&tv[i * width..(i + 1) * width]);
        }
        let out = Tensor::new(&[indices.len(), width], data)?;
        let rg = self.rg(table);
        Ok(self.push(
            out,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// 1-D convolution along the time axis with zero same-padding, applied
    /// independently per node. `x: […,T,N,c_in]`, `kernel: [w,c_in,c_out]`.
    pub fn conv_time(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(kernel).to_vec();
        if sk.len() != 3 || sx.len() < 3 || sx[sx.len() - 1] != sk[1] {
            return Err(Error::shape("conv_time", &sx, &sk));
        }
        let w = sk[0];
        if w % 2 == 0 {
            return Err(Error::Config(format!(
                "conv_time kernel width must be odd, got {w}"
            )));
        }
        let (t_len, n, cin) = (sx[sx.len() - 3], sx[sx.len() - 2], sx[sx.len() - 1]);
        let cout = sk[2];
        let batch: usize = sx[..sx.len() - 3].iter().product();
        let half = w / 2;
        let xv = self.value(x).data();
        let kv = self.value(kernel).data();
        let mut out = vec![T::zero(); batch * t_len * n * cout];
        for b in 0..batch {
            for t in 0..t_len {
                for j in 0..w {
                    let src = t as isize + j as isize - half as isize;
                    if src < 0 || src >= t_len as isize {
                        continue;
                    }
                    let src = src as usize;
                    let k = &kv[j * cin * cout..(j + 1) * cin * cout];
                    for node in 0..n {
                        let xi = ((b * t_len + src) * n + node) * cin;
                        let oi = ((b * t_len + t) * n + node) * cout;
                        mm_nn(&xv[xi..xi + cin], k, &mut out[oi..oi + cout], 1, cin, cout);
                    }
                }
            }
        }
        let mut shape = sx.clone();
        *shape.last_mut().unwrap() = cout;
        let out = Tensor::new(&shape, out)?;
        let rg = self.rg(x) || self.rg(kernel);
        Ok(self.push(out, Op::ConvTime { x, kernel }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = sum_of(self.value(a).data().iter().copied());
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s: T = sum_of(v.data().iter().copied()) / T::c(v.len() as f64);
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Propagate gradients of a scalar `loss` back to every traced leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let kind = node.op.kind();
            let mut contribs = self.local_grads(idx, &g);
            if self.fault == Some(kind) {
                for (_, c) in contribs.iter_mut() {
                    for v in c.iter_mut() {
                        *v *= T::c(1.1);
                    }
                }
            }
            for (parent, c) in contribs {
                if !self.rg(parent) {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(c) {
                            *a += v;
                        }
                    }
                    slot @ None => *slot = Some(c),
                }
            }
            // Keep leaf gradients; intermediate ones were consumed above.
        }

        let mut leaves = HashMap::new();
        for (idx, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                let data = grads[idx]
                    .take()
                    .unwrap_or_else(|| vec![T::zero(); node.value.len()]);
                leaves.insert(Var(idx), Tensor::new(node.value.shape(), data)?);
            }
        }
        let mut params = BTreeMap::new();
        for &(v, id) in &self.params {
            if let Some(g) = leaves.get(&v) {
                match params.get_mut(&id) {
                    None => {
                        params.insert(id, g.clone());
                    }
                    Some(acc) => {
                        let acc: &mut Tensor<T> = acc;
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += *b;
                        }
                    }
                }
            }
        }
        Ok(Gradients { leaves, params })
    }

    /// Vector-Jacobian products of node `idx` for each of its inputs.
    fn local_grads(&self, idx: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => {
                let gb = suffix_repeat(g, self.value(*b).len());
                vec![(*a, g.to_vec()), (*b, gb)]
            }
            Op::Sub(a, b) => {
                let gb = suffix_repeat(g, self.value(*b).len())
                    .into_iter()
                    .map(|v| -v)
                    .collect();
                vec![(*a, g.to_vec()), (*b, gb)]
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let k = bv.len();
                let ga = g.iter().enumerate().map(|(i, &gi)| gi * bv[i % k]).collect();
                let prod: Vec<T> = g.iter().zip(av).map(|(&gi, &x)| gi * x).collect();
                vec![(*a, ga), (*b, suffix_repeat(&prod, k))]
            }
            Op::Scale(a, c) => vec![(*a, g.iter().map(|&v| v * *c).collect())],
            Op::MatMul(a, b) => {
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let (ba, bb, p, q, r, _) = matmul_dims(sa, sb).expect("checked in forward");
                let batch = ba.max(bb);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let mut ga = vec![T::zero(); av.len()];
                let mut gb = vec![T::zero(); bv.len()];
                for i in 0..batch {
                    let ao = if ba == 1 { 0 } else { i * p * q };
                    let bo = if bb == 1 { 0 } else { i * q * r };
                    let gi = &g[i * p * r..(i + 1) * p * r];
                    // dA = G · Bᵀ, dB = Aᵀ · G
                    mm_nt(gi, &bv[bo..bo + q * r], &mut ga[ao..ao + p * q], p, r, q);
                    mm_tn(&av[ao..ao + p * q], gi, &mut gb[bo..bo + q * r], p, q, r);
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Transpose(a) => {
                let rank = node.value.rank();
                let mut axes: Vec<usize> = (0..rank).collect();
                axes.swap(rank - 2, rank - 1);
                let gt = Tensor::new(node.value.shape(), g.to_vec()).unwrap();
                vec![(*a, permute_data(&gt, &axes).1)]
            }
            Op::Permute(a, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                let gt = Tensor::new(node.value.shape(), g.to_vec()).unwrap();
                vec![(*a, permute_data(&gt, &inverse).1)]
            }
            Op::Reshape(a) => vec![(*a, g.to_vec())],
            Op::Softmax(a) => {
                let y = node.value.data();
                let k = *node.value.shape().last().unwrap();
                let mut ga = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(k).zip(g.chunks(k)) {
                    let dot: T = sum_of(yr.iter().zip(gr).map(|(&a, &b)| a * b));
                    ga.extend(yr.iter().zip(gr).map(|(&yi, &gi)| yi * (gi - dot)));
                }
                vec![(*a, ga)]
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let ga = x
                    .iter()
                    .zip(g)
                    .map(|(&xi, &gi)| if xi > T::zero() { gi } else { T::zero() })
                    .collect();
                vec![(*a, ga)]
            }
            Op::Silu(a) => {
                let x = self.value(*a).data();
                let ga = x
                    .iter()
                    .zip(g)
                    .map(|(&xi, &gi)| {
                        let s = T::one() / (T::one() + (-xi).exp());
                        gi * s * (T::one() + xi * (T::one() - s))
                    })
                    .collect();
                vec![(*a, ga)]
            }
            Op::Abs(a) => {
                let x = self.value(*a).data();
                let ga = x
                    .iter()
                    .zip(g)
                    .map(|(&xi, &gi)| {
                        if xi > T::zero() {
                            gi
                        } else if xi < T::zero() {
                            -gi
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                vec![(*a, ga)]
            }
            Op::Square(a) => {
                let x = self.value(*a).data();
                let two = T::c(2.0);
                vec![(*a, x.iter().zip(g).map(|(&xi, &gi)| two * xi * gi).collect())]
            }
            Op::RmsNorm { x, gamma, inv } => {
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                let k = gv.len();
                let kt = T::c(k as f64);
                let mut gx = Vec::with_capacity(xv.len());
                let mut ggamma = vec![T::zero(); k];
                for ((xr, gr), &r) in xv.chunks(k).zip(g.chunks(k)).zip(inv) {
                    // d/dx_i of x_i·r·γ_i with r = (mean(x²)+eps)^(-1/2)
                    let dot: T = sum_of(xr.iter().zip(gr).zip(gv).map(|((&xi, &gi), &gam)| gi * gam * xi));
                    let coef = r * r * r * dot / kt;
                    for i in 0..k {
                        gx.push(gr[i] * gv[i] * r - xr[i] * coef);
                        ggamma[i] += gr[i] * xr[i] * r;
                    }
                }
                vec![(*x, gx), (*gamma, ggamma)]
            }
            Op::Concat(parts) => {
                let width = *node.value.shape().last().unwrap();
                let rows = node.value.len() / width;
                let mut out = Vec::with_capacity(parts.len());
                let mut start = 0;
                for &p in parts {
                    let k = *self.shape(p).last().unwrap();
                    let mut gp = Vec::with_capacity(rows * k);
                    for r in 0..rows {
                        gp.extend_from_slice(&g[r * width + start..r * width + start + k]);
                    }
                    start += k;
                    out.push((p, gp));
                }
                out
            }
            Op::Gather { table, indices } => {
                let st = self.shape(*table);
                let width = st[1];
                let mut gt = vec![T::zero(); st[0] * width];
                for (row, &i) in indices.iter().enumerate() {
                    for c in 0..width {
                        gt[i * width + c] += g[row * width + c];
                    }
                }
                vec![(*table, gt)]
            }
            Op::ConvTime { x, kernel } => {
                let sx = self.shape(*x);
                let sk = self.shape(*kernel);
                let (w, cin, cout) = (sk[0], sk[1], sk[2]);
                let (t_len, n) = (sx[sx.len() - 3], sx[sx.len() - 2]);
                let batch: usize = sx[..sx.len() - 3].iter().product();
                let half = w / 2;
                let xv = self.value(*x).data();
                let kv = self.value(*kernel).data();
                let mut gx = vec![T::zero(); xv.len()];
                let mut gk = vec![T::zero(); kv.len()];
                for b in 0..batch {
                    for t in 0..t_len {
                        for j in 0..w {
                            let src = t as isize + j as isize - half as isize;
                            if src < 0 || src >= t_len as isize {
                                continue;
                            }
                            let src = src as usize;
                            let ko = j * cin * cout;
                            for node_i in 0..n {
                                let xi = ((b * t_len + src) * n + node_i) * cin;
                                let oi = ((b * t_len + t) * n + node_i) * cout;
                                let go = &g[oi..oi + cout];
                                // dx[src] += k_j · g[t];  dk_j += x[src]ᵀ · g[t]
                                mm_nt(go, &kv[ko..ko + cin * cout], &mut gx[xi..xi + cin], 1, cout, cin);
                                mm_tn(&xv[xi..xi + cin], go, &mut gk[ko..ko + cin * cout], 1, cin, cout);
                            }
                        }
                    }
                }
                vec![(*x, gx), (*kernel, gk)]
            }
            Op::Sum(a) => vec![(*a, vec![g[0]; self.value(*a).len()])],
            Op::Mean(a) => {
                let n = self.value(*a).len();
                vec![(*a, vec![g[0] / T::c(n as f64); n])]
            }
        }
    }
}

/// Resolve batched-matmul extents: (batch_a, batch_b, p, q, r, out_shape).
fn matmul_dims(
    sa: &[usize],
    sb: &[usize],
) -> Result<(usize, usize, usize, usize, usize, Vec<usize>)> {
    if sa.len() < 2 || sb.len() < 2 {
        return Err(Error::shape("matmul", sa, sb));
    }
    let (p, q) = (sa[sa.len() - 2], sa[sa.len() - 1]);
    let (q2, r) = (sb[sb.len() - 2], sb[sb.len() - 1]);
    if q != q2 {
        return Err(Error::shape("matmul", sa, sb));
    }
    let la = &sa[..sa.len() - 2];
    let lb = &sb[..sb.len() - 2];
    let lead = if la == lb || lb.is_empty() {
        la
    } else if la.is_empty() {
        lb
    } else {
        return Err(Error::shape("matmul", sa, sb));
    };
    let mut out = lead.to_vec();
    out.extend_from_slice(&[p, r]);
    Ok((
        la.iter().product(),
        lb.iter().product(),
        p,
        q,
        r,
        out,
    ))
}
