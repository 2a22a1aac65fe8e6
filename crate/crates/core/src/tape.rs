//! Reverse-mode differentiation over a tape of tensor primitives.
//!
//! A [`Tape`] records every primitive application in registration order.
//! Parameters enter the tape as leaves that remember which [`ParamStore`]
//! they came from; [`Tape::backward`] walks the records in reverse and
//! returns [`Gradients`] keyed by parameter, which the owning store then
//! accumulates. Frozen parameters and constants never receive adjoints.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU32, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{matmul_nt_raw, matmul_raw, matmul_tn_raw, Tensor};

const LAYER_NORM_EPS: f64 = 1e-5;

static NEXT_STORE_ID: AtomicU32 = AtomicU32::new(1);

/// Identifies one parameter group across all stores alive in the process.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamKey {
    store: u32,
    index: u32,
}

/// Index of a group inside its store.
pub type ParamId = usize;

#[derive(Debug)]
pub struct ParamGroup {
    name: String,
    value: Arc<Tensor>,
    grad: Tensor,
    pub trainable: bool,
}

impl ParamGroup {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn grad(&self) -> &Tensor {
        &self.grad
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }
}

/// An owned, named collection of parameter groups.
///
/// Each store carries a process-unique id so gradients computed on one
/// store can never be applied to another, including to a clone.
#[derive(Debug)]
pub struct ParamStore {
    id: u32,
    groups: Vec<ParamGroup>,
    index: BTreeMap<String, ParamId>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        let mut out = ParamStore::new();
        for g in &self.groups {
            out.groups.push(ParamGroup {
                name: g.name.clone(),
                value: Arc::new((*g.value).clone()),
                grad: g.grad.clone(),
                trainable: g.trainable,
            });
        }
        out.index = self.index.clone();
        out
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            groups: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::DuplicateParameter(name.to_string()));
        }
        let id = self.groups.len();
        let grad = Tensor::zeros(value.shape());
        self.groups.push(ParamGroup {
            name: name.to_string(),
            value: Arc::new(value),
            grad,
            trainable,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn key(&self, id: ParamId) -> ParamKey {
        ParamKey {
            store: self.id,
            index: id as u32,
        }
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn group(&self, id: ParamId) -> &ParamGroup {
        &self.groups[id]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.groups[id].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.groups[id].value)
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.groups[id].grad
    }

    pub fn id_of(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.groups[id].trainable = trainable;
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for g in &mut self.groups {
            g.trainable = trainable;
        }
    }

    pub fn total_params(&self) -> usize {
        self.groups.iter().map(ParamGroup::numel).sum()
    }

    pub fn trainable_params(&self) -> usize {
        self.groups
            .iter()
            .filter(|g| g.trainable)
            .map(ParamGroup::numel)
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.groups {
            g.grad.fill(0.0);
        }
    }

    /// Adds every gradient belonging to this store into the matching group.
    /// Gradients from other stores are ignored; a gradient that names this
    /// store but an index it does not hold is an error.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        self.accumulate_scaled(grads, 1.0)
    }

    pub fn accumulate_scaled(&mut self, grads: &Gradients, factor: f64) -> Result<()> {
        for (key, g) in &grads.map {
            if key.store != self.id {
                continue;
            }
            let group = self
                .groups
                .get_mut(key.index as usize)
                .ok_or_else(|| Error::DetachedParameter(alloc::format!("#{}", key.index)))?;
            if !group.trainable {
                continue;
            }
            for (a, b) in group.grad.data_mut().iter_mut().zip(g.data()) {
                *a += factor * b;
            }
        }
        Ok(())
    }

    /// Euclidean norm over the gradients of trainable groups.
    pub fn grad_norm(&self) -> f64 {
        let sq: f64 = self
            .groups
            .iter()
            .filter(|g| g.trainable)
            .flat_map(|g| g.grad.data())
            .map(|v| v * v)
            .sum();
        libm::sqrt(sq)
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for g in self.groups.iter_mut().filter(|g| g.trainable) {
            for v in g.grad.data_mut() {
                *v *= factor;
            }
        }
    }

    /// Mutable access to value and grad of one group at once.
    pub fn value_and_grad_mut(&mut self, id: ParamId) -> (&mut Tensor, &Tensor) {
        let g = &mut self.groups[id];
        (Arc::make_mut(&mut g.value), &g.grad)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Gradients {
    map: BTreeMap<ParamKey, Tensor>,
}

impl Gradients {
    pub fn get(&self, store: &ParamStore, id: ParamId) -> Option<&Tensor> {
        self.map.get(&store.key(id))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamKey),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    ScaleCol {
        x: Var,
        weights: Var,
        col: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Softmax(Var),
    CausalSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Gelu(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    Sum(Var),
    SumSquares(Var),
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive applications.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    let t = libm::tanh(u);
    let y = 0.5 * x * (1.0 + t);
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    (y, dy)
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn node(&self, v: Var) -> Result<&Node> {
        self.nodes.get(v.0).ok_or(Error::DetachedVar(v.0))
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name(&op) });
        }
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Constant, false)
    }

    /// Records a parameter leaf. Frozen groups enter as non-differentiable.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let g = &store.groups[id];
        self.nodes.push(Node {
            value: Arc::clone(&g.value),
            op: Op::Param(store.key(id)),
            requires_grad: g.trainable,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.node(a)?.value.clone(), self.node(b)?.value.clone());
        let (n, k, m) = (av.rows(), av.cols(), bv.cols());
        if bv.rows() != k {
            return Err(mismatch("matmul", &av, &bv));
        }
        let out = Tensor::matrix(n, m, matmul_raw(av.data(), bv.data(), n, k, m))?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`; with `b` a `d_out×d_in` weight this is a linear map of the rows of `a`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.node(a)?.value.clone(), self.node(b)?.value.clone());
        let (n, k, m) = (av.rows(), av.cols(), bv.rows());
        if bv.cols() != k {
            return Err(mismatch("matmul_nt", &av, &bv));
        }
        let out = Tensor::matrix(n, m, matmul_nt_raw(av.data(), bv.data(), n, k, m))?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::MatMulNT(a, b), rg)
    }

    fn elementwise(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (av, bv) = (self.node(a)?.value.clone(), self.node(b)?.value.clone());
        if av.shape() != bv.shape() {
            return Err(mismatch(name, &av, &bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let av = self.node(a)?.value.clone();
        let out = av.scaled(factor);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, factor), rg)
    }

    /// Adds a row vector (`1×m` or `m`) to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, rv) = (self.node(x)?.value.clone(), self.node(row)?.value.clone());
        let m = xv.cols();
        if rv.numel() != m {
            return Err(mismatch("add_row", &xv, &rv));
        }
        let mut data = xv.data().to_vec();
        for chunk in data.chunks_mut(m) {
            for (a, b) in chunk.iter_mut().zip(rv.data()) {
                *a += b;
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x, row]);
        self.push(out, Op::AddRow(x, row), rg)
    }

    /// Multiplies row `i` of `x` by `weights[i, col]`.
    pub fn scale_col(&mut self, x: Var, weights: Var, col: usize) -> Result<Var> {
        let (xv, wv) = (self.node(x)?.value.clone(), self.node(weights)?.value.clone());
        if xv.rows() != wv.rows() {
            return Err(mismatch("scale_col", &xv, &wv));
        }
        if col >= wv.cols() {
            return Err(Error::IndexOutOfRange {
                op: "scale_col",
                index: col,
                extent: wv.cols(),
            });
        }
        let m = xv.cols();
        let mut data = xv.data().to_vec();
        for (i, chunk) in data.chunks_mut(m).enumerate() {
            let w = wv.at(i, col);
            chunk.iter_mut().for_each(|v| *v *= w);
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x, weights]);
        self.push(out, Op::ScaleCol { x, weights, col }, rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.node(x)?.value.clone();
        let (n, m) = (xv.rows(), xv.cols());
        if len == 0 || start + len > m {
            return Err(Error::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                extent: m,
            });
        }
        let mut data = Vec::with_capacity(n * len);
        for i in 0..n {
            data.extend_from_slice(&xv.data()[i * m + start..i * m + start + len]);
        }
        let out = Tensor::matrix(n, len, data)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::SliceCols { x, start }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<Arc<Tensor>> = parts
            .iter()
            .map(|p| self.node(*p).map(|n| n.value.clone()))
            .collect::<Result<_>>()?;
        let first = vals.first().ok_or(Error::EmptySequence)?;
        let n = first.rows();
        for v in &vals {
            if v.rows() != n {
                return Err(mismatch("concat_cols", first, v));
            }
        }
        let total: usize = vals.iter().map(|v| v.cols()).sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for v in &vals {
                data.extend_from_slice(v.row_slice(i));
            }
        }
        let out = Tensor::matrix(n, total, data)?;
        let rg = self.rg(parts);
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.node(x)?.value.clone();
        let out = softmax_rows(&xv, false);
        let rg = self.rg(&[x]);
        self.push(out, Op::Softmax(x), rg)
    }

    /// Row-wise softmax over entries `j ≤ i` of a square matrix; the rest are zero.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.node(x)?.value.clone();
        if xv.rows() != xv.cols() {
            return Err(mismatch("causal_softmax", &xv, &xv));
        }
        let out = softmax_rows(&xv, true);
        let rg = self.rg(&[x]);
        self.push(out, Op::CausalSoftmax(x), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.node(x)?.value.clone();
        let gv = self.node(gain)?.value.clone();
        let bv = self.node(bias)?.value.clone();
        let (n, m) = (xv.rows(), xv.cols());
        if gv.numel() != m || bv.numel() != m {
            return Err(mismatch("layer_norm", &xv, &gv));
        }
        let mut xhat = vec![0.0; n * m];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = xv.row_slice(i);
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let is = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
            inv_std[i] = is;
            for j in 0..m {
                let h = (row[j] - mean) * is;
                xhat[i * m + j] = h;
                out[i * m + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.node(table)?.value.clone();
        let (v, d) = (tv.rows(), tv.cols());
        if ids.is_empty() {
            return Err(Error::EmptySequence);
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::IndexOutOfRange {
                    op: "embedding",
                    index: id,
                    extent: v,
                });
            }
            data.extend_from_slice(tv.row_slice(id));
        }
        let out = Tensor::matrix(ids.len(), d, data)?;
        let rg = self.rg(&[table]);
        self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xv = self.node(x)?.value.clone();
        let data = xv.data().iter().map(|v| gelu_parts(*v).0).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Mean negative log-likelihood over the rows that carry a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let lv = self.node(logits)?.value.clone();
        let (n, v) = (lv.rows(), lv.cols());
        if targets.len() != n {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                left: lv.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let probs = softmax_rows(&lv, false).into_data();
        let mut total = 0.0;
        let mut count = 0;
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                if t >= v {
                    return Err(Error::IndexOutOfRange {
                        op: "cross_entropy",
                        index: t,
                        extent: v,
                    });
                }
                total -= log_softmax_at(lv.row_slice(i), t);
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::EmptySequence);
        }
        let out = Tensor::scalar(total / count as f64);
        let rg = self.rg(&[logits]);
        self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            rg,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xv = self.node(x)?.value.clone();
        let out = Tensor::scalar(xv.data().iter().sum());
        let rg = self.rg(&[x]);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let xv = self.node(x)?.value.clone();
        let out = Tensor::scalar(xv.data().iter().map(|v| v * v).sum());
        let rg = self.rg(&[x]);
        self.push(out, Op::SumSquares(x), rg)
    }

    /// Replays adjoints in reverse registration order, producing a gradient
    /// for every trainable parameter the loss depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.node(loss)?.value;
        if !lv.is_scalar() {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut out = Gradients::default();
        if !self.nodes[loss.0].requires_grad {
            return Ok(out);
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(lv.shape().to_vec(), vec![1.0])?);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, g, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(
        &self,
        node: &Node,
        g: Tensor,
        grads: &mut [Option<Tensor>],
        out: &mut Gradients,
    ) -> Result<()> {
        let val = |v: Var| -> &Tensor { &self.nodes[v.0].value };
        match &node.op {
            Op::Constant => {}
            Op::Param(key) => match out.map.get_mut(key) {
                Some(acc) => acc.add_assign(&g)?,
                None => {
                    out.map.insert(*key, g);
                }
            },
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.cols());
                if self.wants(*a) {
                    let d = matmul_nt_raw(g.data(), bv.data(), n, m, k);
                    accumulate(grads, *a, Tensor::new(av.shape().to_vec(), d)?)?;
                }
                if self.wants(*b) {
                    let d = matmul_tn_raw(av.data(), g.data(), n, k, m);
                    accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), d)?)?;
                }
            }
            Op::MatMulNT(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.rows());
                if self.wants(*a) {
                    let d = matmul_raw(g.data(), bv.data(), n, m, k);
                    accumulate(grads, *a, Tensor::new(av.shape().to_vec(), d)?)?;
                }
                if self.wants(*b) {
                    let d = matmul_tn_raw(g.data(), av.data(), n, m, k);
                    accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), d)?)?;
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone())?;
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g)?;
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone())?;
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.scaled(-1.0))?;
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if self.wants(*a) {
                    let d = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                    accumulate(grads, *a, Tensor::new(av.shape().to_vec(), d)?)?;
                }
                if self.wants(*b) {
                    let d = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), d)?)?;
                }
            }
            Op::Scale(a, f) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.scaled(*f))?;
                }
            }
            Op::AddRow(x, row) => {
                if self.wants(*row) {
                    let rv = val(*row);
                    let m = g.cols();
                    let mut d = vec![0.0; m];
                    for chunk in g.data().chunks(m) {
                        for (a, b) in d.iter_mut().zip(chunk) {
                            *a += b;
                        }
                    }
                    accumulate(grads, *row, Tensor::new(rv.shape().to_vec(), d)?)?;
                }
                if self.wants(*x) {
                    accumulate(grads, *x, g)?;
                }
            }
            Op::ScaleCol { x, weights, col } => {
                let (xv, wv) = (val(*x), val(*weights));
                let m = xv.cols();
                if self.wants(*weights) {
                    let mut d = Tensor::zeros(wv.shape());
                    let kc = wv.cols();
                    for i in 0..xv.rows() {
                        let s: f64 = g.data()[i * m..(i + 1) * m]
                            .iter()
                            .zip(xv.row_slice(i))
                            .map(|(a, b)| a * b)
                            .sum();
                        d.data_mut()[i * kc + col] = s;
                    }
                    accumulate(grads, *weights, d)?;
                }
                if self.wants(*x) {
                    let mut d = g.into_data();
                    for (i, chunk) in d.chunks_mut(m).enumerate() {
                        let w = wv.at(i, *col);
                        chunk.iter_mut().for_each(|v| *v *= w);
                    }
                    accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), d)?)?;
                }
            }
            Op::SliceCols { x, start } => {
                if self.wants(*x) {
                    let xv = val(*x);
                    let (n, m, len) = (xv.rows(), xv.cols(), g.cols());
                    let mut d = Tensor::zeros(xv.shape());
                    for i in 0..n {
                        d.data_mut()[i * m + start..i * m + start + len]
                            .copy_from_slice(g.row_slice(i));
                    }
                    accumulate(grads, *x, d)?;
                }
            }
            Op::ConcatCols(parts) => {
                let n = g.rows();
                let mut offset = 0;
                for p in parts {
                    let pv = val(*p);
                    let w = pv.cols();
                    if self.wants(*p) {
                        let mut d = Vec::with_capacity(n * w);
                        for i in 0..n {
                            d.extend_from_slice(&g.row_slice(i)[offset..offset + w]);
                        }
                        accumulate(grads, *p, Tensor::new(pv.shape().to_vec(), d)?)?;
                    }
                    offset += w;
                }
            }
            Op::Softmax(x) | Op::CausalSoftmax(x) => {
                if self.wants(*x) {
                    let y = &node.value;
                    let m = y.cols();
                    let mut d = vec![0.0; y.numel()];
                    for i in 0..y.rows() {
                        let yr = y.row_slice(i);
                        let gr = g.row_slice(i);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..m {
                            d[i * m + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(grads, *x, Tensor::new(y.shape().to_vec(), d)?)?;
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = val(*gain);
                let (n, m) = (g.rows(), g.cols());
                if self.wants(*gain) {
                    let mut d = vec![0.0; m];
                    for i in 0..n {
                        for j in 0..m {
                            d[j] += g.data()[i * m + j] * xhat[i * m + j];
                        }
                    }
                    accumulate(grads, *gain, Tensor::new(gv.shape().to_vec(), d)?)?;
                }
                if self.wants(*bias) {
                    let mut d = vec![0.0; m];
                    for chunk in g.data().chunks(m) {
                        for (a, b) in d.iter_mut().zip(chunk) {
                            *a += b;
                        }
                    }
                    accumulate(grads, *bias, Tensor::new(val(*bias).shape().to_vec(), d)?)?;
                }
                if self.wants(*x) {
                    let mut d = vec![0.0; n * m];
                    let mf = m as f64;
                    for i in 0..n {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..m {
                            let dh = g.data()[i * m + j] * gv.data()[j];
                            sum_dh += dh;
                            sum_dh_h += dh * xhat[i * m + j];
                        }
                        for j in 0..m {
                            let dh = g.data()[i * m + j] * gv.data()[j];
                            d[i * m + j] = inv_std[i] / mf
                                * (mf * dh - sum_dh - xhat[i * m + j] * sum_dh_h);
                        }
                    }
                    accumulate(grads, *x, Tensor::new(val(*x).shape().to_vec(), d)?)?;
                }
            }
            Op::Embedding { table, ids } => {
                if self.wants(*table) {
                    let tv = val(*table);
                    let dcols = tv.cols();
                    let mut d = Tensor::zeros(tv.shape());
                    for (row, &id) in ids.iter().enumerate() {
                        let dst = &mut d.data_mut()[id * dcols..(id + 1) * dcols];
                        for (a, b) in dst.iter_mut().zip(g.row_slice(row)) {
                            *a += b;
                        }
                    }
                    accumulate(grads, *table, d)?;
                }
            }
            Op::Gelu(x) => {
                if self.wants(*x) {
                    let xv = val(*x);
                    let d = xv
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(v, gv)| gelu_parts(*v).1 * gv)
                        .collect();
                    accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), d)?)?;
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if self.wants(*logits) {
                    let lv = val(*logits);
                    let v = lv.cols();
                    let scale = g.data()[0] / *count as f64;
                    let mut d = vec![0.0; lv.numel()];
                    for (i, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            for j in 0..v {
                                d[i * v + j] = probs[i * v + j] * scale;
                            }
                            d[i * v + t] -= scale;
                        }
                    }
                    accumulate(grads, *logits, Tensor::new(lv.shape().to_vec(), d)?)?;
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    let xv = val(*x);
                    accumulate(grads, *x, Tensor::filled(xv.shape(), g.data()[0]))?;
                }
            }
            Op::SumSquares(x) => {
                if self.wants(*x) {
                    let xv = val(*x);
                    accumulate(grads, *x, xv.scaled(2.0 * g.data()[0]))?;
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, delta: Tensor) -> Result<()> {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&delta),
        slot @ None => {
            *slot = Some(delta);
            Ok(())
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Constant => "constant",
        Op::Param(_) => "param",
        Op::MatMul(..) => "matmul",
        Op::MatMulNT(..) => "matmul_nt",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::AddRow(..) => "add_row",
        Op::ScaleCol { .. } => "scale_col",
        Op::SliceCols { .. } => "slice_cols",
        Op::ConcatCols(_) => "concat_cols",
        Op::Softmax(_) => "softmax",
        Op::CausalSoftmax(_) => "causal_softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Embedding { .. } => "embedding",
        Op::Gelu(_) => "gelu",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::Sum(_) => "sum",
        Op::SumSquares(_) => "sum_squares",
    }
}

pub(crate) fn softmax_rows(x: &Tensor, causal: bool) -> Tensor {
    let (n, m) = (x.rows(), x.cols());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = x.row_slice(i);
        let width = if causal { (i + 1).min(m) } else { m };
        let max = row[..width].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for j in 0..width {
            let e = libm::exp(row[j] - max);
            out[i * m + j] = e;
            total += e;
        }
        for j in 0..width {
            out[i * m + j] /= total;
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("shape preserved")
}

pub(crate) fn log_softmax_at(row: &[f64], target: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + libm::log(row.iter().map(|v| libm::exp(v - max)).sum::<f64>());
    row[target] - lse
}
