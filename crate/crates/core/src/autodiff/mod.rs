//! Reverse-mode differentiation over dense `f64` arrays.
//!
//! A [`Graph`] records every operation as a node holding its value. Calling
//! [`Graph::backward`] on a scalar node propagates adjoints in reverse creation
//! order and adds them to the gradient accumulators of the leaves. Calling it
//! again without [`Graph::zero_grad`] accumulates.
//!
//! Trainable arrays live in a [`ParamStore`]; [`Graph::param`] copies one into
//! the graph as a leaf and [`ParamStore::absorb`] pulls the gradients back out.
//! A frozen store produces constant leaves, so no adjoint ever reaches it.

mod layers;
mod params;
mod tensor;

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

pub use layers::{Linear, Mlp};
pub use params::{one_cycle_lr, AdamConfig, ParamId, ParamStore};
pub use tensor::Tensor;
pub(crate) use tensor::gemm;

use crate::error::{invalid, Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a user-defined operation: receives the output adjoint and
/// one zero-initialized buffer per input, to be filled with that input's
/// contribution.
pub type BackwardFn = Box<dyn Fn(&[f64], &mut [Vec<f64>])>;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    MulRow(Var, Var),
    MatMul(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Sin(Var),
    Cos(Var),
    Atan2(Var, Var),
    SmoothL1(Var, f64),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    Concat(Vec<Var>),
    SliceCols(Var, usize),
    Reshape(Var),
    Gather(Var, Vec<Option<usize>>),
    ScatterMean(Var, Vec<usize>, Vec<f64>),
    SegmentMax(Var, Vec<usize>),
    LogSoftmax(Var),
    Custom {
        name: &'static str,
        inputs: Vec<Var>,
        backward: BackwardFn,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Computation graph for one forward/backward pass.
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
    param_cache: Vec<Option<Var>>,
    store_uid: Option<u64>,
    macs: u64,
    branch_notes: u64,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            params: Vec::new(),
            param_cache: Vec::new(),
            store_uid: None,
            macs: 0,
            branch_notes: FNV_OFFSET,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulate operations performed by matrix products so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Accumulated gradient of a leaf, if it requires one and backward ran.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn zero_grad(&mut self) {
        for g in self.leaf_grads.iter_mut().flatten() {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// Differentiable leaf.
    pub fn var(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf without gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf holding a copy of parameter `id`. Repeated calls return the same
    /// node. Leaves from a frozen store do not require gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        match self.store_uid {
            None => self.store_uid = Some(store.uid()),
            Some(uid) => assert_eq!(uid, store.uid(), "a graph can only read from one parameter store"),
        }
        if self.param_cache.len() < store.len() {
            self.param_cache.resize(store.len(), None);
        }
        if let Some(v) = self.param_cache[id.index()] {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Leaf, !store.is_frozen());
        self.param_cache[id.index()] = Some(v);
        self.params.push((id, v));
        v
    }

    pub(crate) fn param_leaves(&self) -> &[(ParamId, Var)] {
        &self.params
    }

    /// True when any parameter leaf of this graph requires gradient.
    pub fn has_trainable_params(&self) -> bool {
        self.params.iter().any(|&(_, v)| self.nodes[v.0].needs_grad)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(value, op, needs)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn matrix(&self, op: &'static str, a: Var) -> Result<(usize, usize)> {
        let t = self.value(a);
        if !t.is_matrix() {
            return Err(Error::ShapeMismatch {
                op,
                left: t.shape().to_vec(),
                right: vec![0, 0],
            });
        }
        Ok((t.rows(), t.cols()))
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, make: Op) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.derived(value, make, &[a, b]))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, make: Op) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("same element count");
        self.derived(value, make, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| x + s, Op::Offset(a))
    }

    /// `x[n,c] + b[c]`, broadcasting the row over the leading dimension.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, c) = self.matrix("add_row", x)?;
        if self.value(b).numel() != c {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                left: self.shape(x).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let (tx, tb) = (self.value(x), self.value(b));
        let mut data = tx.data().to_vec();
        for r in 0..n {
            for (d, &bv) in data[r * c..(r + 1) * c].iter_mut().zip(tb.data()) {
                *d += bv;
            }
        }
        let value = Tensor::matrix(n, c, data)?;
        Ok(self.derived(value, Op::AddRow(x, b), &[x, b]))
    }

    /// `x[n,c] * s[n,1]`: scales every row by its own factor.
    pub fn mul_col(&mut self, x: Var, s: Var) -> Result<Var> {
        let (n, c) = self.matrix("mul_col", x)?;
        if self.shape(s) != [n, 1] {
            return Err(Error::ShapeMismatch {
                op: "mul_col",
                left: self.shape(x).to_vec(),
                right: self.shape(s).to_vec(),
            });
        }
        let (tx, ts) = (self.value(x), self.value(s));
        let mut data = tx.data().to_vec();
        for r in 0..n {
            let f = ts.data()[r];
            data[r * c..(r + 1) * c].iter_mut().for_each(|d| *d *= f);
        }
        let value = Tensor::matrix(n, c, data)?;
        Ok(self.derived(value, Op::MulCol(x, s), &[x, s]))
    }

    /// `x[n,c] * r[c]`: element-wise product of every row with `r`.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let (n, c) = self.matrix("mul_row", x)?;
        if self.value(r).numel() != c {
            return Err(Error::ShapeMismatch {
                op: "mul_row",
                left: self.shape(x).to_vec(),
                right: self.shape(r).to_vec(),
            });
        }
        let (tx, tr) = (self.value(x), self.value(r));
        let mut data = tx.data().to_vec();
        for row in 0..n {
            for (d, &rv) in data[row * c..(row + 1) * c].iter_mut().zip(tr.data()) {
                *d *= rv;
            }
        }
        let value = Tensor::matrix(n, c, data)?;
        Ok(self.derived(value, Op::MulRow(x, r), &[x, r]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix("matmul", a)?;
        let (k2, n) = self.matrix("matmul", b)?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        self.macs += (m * k * n) as u64;
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.derived(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, f64::ln, Op::Log(a))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.map(a, f64::sin, Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.map(a, f64::cos, Op::Cos(a))
    }

    /// Element-wise `atan2(y, x)`.
    pub fn atan2(&mut self, y: Var, x: Var) -> Result<Var> {
        self.zip("atan2", y, x, f64::atan2, Op::Atan2(y, x))
    }

    /// Element-wise smooth-L1 with transition point `beta`:
    /// `0.5 x^2 / beta` below it, `|x| - 0.5 beta` above.
    pub fn smooth_l1(&mut self, a: Var, beta: f64) -> Var {
        self.map(a, move |x| smooth_l1(x, beta), Op::SmoothL1(a, beta))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.derived(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.numel().max(1) as f64;
        let s = t.data().iter().sum::<f64>() / n;
        self.derived(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Row sums: `[n,c] -> [n,1]`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let (n, c) = self.matrix("sum_cols", a)?;
        let t = self.value(a);
        let data = (0..n).map(|r| t.data()[r * c..(r + 1) * c].iter().sum()).collect();
        let value = Tensor::matrix(n, 1, data)?;
        Ok(self.derived(value, Op::SumCols(a), &[a]))
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(invalid("concat of zero tensors"));
        }
        let (n, _) = self.matrix("concat", parts[0])?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pn, pc) = self.matrix("concat", p)?;
            if pn != n {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    left: self.shape(parts[0]).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; n * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..n {
                data[r * total + offset..r * total + offset + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let value = Tensor::matrix(n, total, data)?;
        Ok(self.derived(value, Op::Concat(parts.to_vec()), parts))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (n, c) = self.matrix("slice_cols", a)?;
        if start >= end || end > c {
            return Err(invalid(alloc::format!("slice_cols {start}..{end} out of range for width {c}")));
        }
        let w = end - start;
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(n * w);
        for r in 0..n {
            data.extend_from_slice(&src[r * c + start..r * c + end]);
        }
        let value = Tensor::matrix(n, w, data)?;
        Ok(self.derived(value, Op::SliceCols(a, start), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        Ok(self.derived(value, Op::Reshape(a), &[a]))
    }

    /// Rows of `a` picked by `index`; `None` yields a zero row.
    pub fn gather_rows(&mut self, a: Var, index: Vec<Option<usize>>) -> Result<Var> {
        let (n, c) = self.matrix("gather_rows", a)?;
        if let Some(bad) = index.iter().flatten().find(|&&i| i >= n) {
            return Err(invalid(alloc::format!("gather index {bad} out of range for {n} rows")));
        }
        let src = self.value(a).data();
        let mut data = vec![0.0; index.len() * c];
        for (dst, idx) in data.chunks_exact_mut(c.max(1)).zip(&index) {
            if let Some(i) = idx {
                dst.copy_from_slice(&src[i * c..(i + 1) * c]);
            }
        }
        let value = Tensor::matrix(index.len(), c, data)?;
        Ok(self.derived(value, Op::Gather(a, index), &[a]))
    }

    /// Averages the rows of `a` that share a target: output row `t` is the mean
    /// of all input rows `i` with `target[i] == t`, or zero if there are none.
    pub fn scatter_mean(&mut self, a: Var, target: Vec<usize>, n_out: usize) -> Result<Var> {
        let (n, c) = self.matrix("scatter_mean", a)?;
        if target.len() != n {
            return Err(invalid(alloc::format!("scatter_mean: {} targets for {n} rows", target.len())));
        }
        if let Some(bad) = target.iter().find(|&&t| t >= n_out) {
            return Err(invalid(alloc::format!("scatter target {bad} out of range for {n_out} rows")));
        }
        let mut counts = vec![0.0; n_out];
        for &t in &target {
            counts[t] += 1.0;
        }
        let inv: Vec<f64> = counts.iter().map(|&k| if k > 0.0 { 1.0 / k } else { 0.0 }).collect();
        let src = self.value(a).data();
        let mut data = vec![0.0; n_out * c];
        for (i, &t) in target.iter().enumerate() {
            for j in 0..c {
                data[t * c + j] += src[i * c + j] * inv[t];
            }
        }
        let value = Tensor::matrix(n_out, c, data)?;
        Ok(self.derived(value, Op::ScatterMean(a, target, inv), &[a]))
    }

    /// Column-wise max over consecutive row segments. `offsets` has one more
    /// entry than there are segments; every segment must be non-empty. Ties go
    /// to the lowest row.
    pub fn segment_max(&mut self, a: Var, offsets: &[usize]) -> Result<Var> {
        let (n, c) = self.matrix("segment_max", a)?;
        if offsets.len() < 2 || offsets[0] != 0 || *offsets.last().unwrap() != n {
            return Err(invalid("segment offsets must start at 0 and end at the row count"));
        }
        if offsets.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("segments must be non-empty"));
        }
        let g = offsets.len() - 1;
        let src = self.value(a).data();
        let mut data = vec![f64::NEG_INFINITY; g * c];
        let mut arg = vec![0usize; g * c];
        for s in 0..g {
            for r in offsets[s]..offsets[s + 1] {
                for j in 0..c {
                    let v = src[r * c + j];
                    if v > data[s * c + j] || r == offsets[s] {
                        data[s * c + j] = v;
                        arg[s * c + j] = r;
                    }
                }
            }
        }
        let value = Tensor::matrix(g, c, data)?;
        Ok(self.derived(value, Op::SegmentMax(a, arg), &[a]))
    }

    /// Column-wise max over all rows: `[n,c] -> [1,c]`.
    pub fn max_over_set(&mut self, a: Var) -> Result<Var> {
        let (n, _) = self.matrix("max_over_set", a)?;
        self.segment_max(a, &[0, n])
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let (n, c) = self.matrix("log_softmax", a)?;
        let src = self.value(a).data();
        let mut data = vec![0.0; n * c];
        for r in 0..n {
            let row = &src[r * c..(r + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln();
            for j in 0..c {
                data[r * c + j] = row[j] - lse;
            }
        }
        let value = Tensor::matrix(n, c, data)?;
        Ok(self.derived(value, Op::LogSoftmax(a), &[a]))
    }

    /// Operation with a caller-supplied value and backward rule.
    pub fn custom(&mut self, name: &'static str, inputs: &[Var], value: Tensor, backward: BackwardFn) -> Var {
        self.derived(
            value,
            Op::Custom {
                name,
                inputs: inputs.to_vec(),
                backward,
            },
            inputs,
        )
    }

    /// Mixes a custom op's discrete choices into [`Graph::branch_signature`].
    pub fn note_branch(&mut self, key: u64) {
        self.branch_notes = fnv(self.branch_notes, key);
    }

    /// Hash of every piecewise decision taken so far: relu masks, max
    /// winners, smooth-L1 regions, the atan2 branch cut and whatever custom
    /// ops noted. Two graphs built by the same code with equal signatures
    /// lie on the same smooth piece, so finite differences between them are
    /// meaningful.
    pub fn branch_signature(&self) -> u64 {
        let mut h = self.branch_notes;
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => {
                    for &v in self.value(*a).data() {
                        h = fnv(h, (v > 0.0) as u64);
                    }
                }
                Op::SmoothL1(a, beta) => {
                    for &v in self.value(*a).data() {
                        h = fnv(h, ((v.abs() < *beta) as u64) | (((v < 0.0) as u64) << 1));
                    }
                }
                Op::SegmentMax(_, arg) => {
                    for &r in arg {
                        h = fnv(h, r as u64);
                    }
                }
                Op::Atan2(y, x) => {
                    for (&vy, &vx) in self.value(*y).data().iter().zip(self.value(*x).data()) {
                        h = fnv(h, ((vx < 0.0) && (vy < 0.0)) as u64);
                    }
                }
                _ => {}
            }
        }
        h
    }

    /// Name of the operation that produced `v` (for diagnostics).
    pub fn op_name(&self, v: Var) -> &'static str {
        match &self.nodes[v.0].op {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "add_scalar",
            Op::AddRow(..) => "add_row",
            Op::MulCol(..) => "mul_col",
            Op::MulRow(..) => "mul_row",
            Op::MatMul(..) => "matmul",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sin(..) => "sin",
            Op::Cos(..) => "cos",
            Op::Atan2(..) => "atan2",
            Op::SmoothL1(..) => "smooth_l1",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumCols(..) => "sum_cols",
            Op::Concat(..) => "concat",
            Op::SliceCols(..) => "slice_cols",
            Op::Reshape(..) => "reshape",
            Op::Gather(..) => "gather_rows",
            Op::ScatterMean(..) => "scatter_mean",
            Op::SegmentMax(..) => "segment_max",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Custom { name, .. } => name,
        }
    }

    /// Propagates adjoints from the scalar `loss` and adds them to the leaf
    /// accumulators.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let acc = self.leaf_grads[i].get_or_insert_with(|| vec![0.0; g.len()]);
                acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b);
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        let val = |v: Var| -> &Tensor { &nodes[v.0].value };
        macro_rules! with_slot {
            ($v:expr, |$buf:ident| $body:block) => {{
                let v: Var = $v;
                if nodes[v.0].needs_grad {
                    let n = nodes[v.0].value.numel();
                    let $buf: &mut Vec<f64> = adj[v.0].get_or_insert_with(|| vec![0.0; n]);
                    $body
                }
            }};
        }
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                with_slot!(*a, |ga| { axpy(ga, g, 1.0) });
                with_slot!(*b, |gb| { axpy(gb, g, 1.0) });
            }
            Op::Sub(a, b) => {
                with_slot!(*a, |ga| { axpy(ga, g, 1.0) });
                with_slot!(*b, |gb| { axpy(gb, g, -1.0) });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                with_slot!(*a, |ga| {
                    for k in 0..g.len() {
                        ga[k] += g[k] * vb[k];
                    }
                });
                with_slot!(*b, |gb| {
                    for k in 0..g.len() {
                        gb[k] += g[k] * va[k];
                    }
                });
            }
            Op::Scale(a, s) => with_slot!(*a, |ga| { axpy(ga, g, *s) }),
            Op::Offset(a) | Op::Reshape(a) => with_slot!(*a, |ga| { axpy(ga, g, 1.0) }),
            Op::AddRow(x, b) => {
                let c = out.cols();
                with_slot!(*x, |gx| { axpy(gx, g, 1.0) });
                with_slot!(*b, |gb| {
                    for row in g.chunks_exact(c) {
                        axpy(gb, row, 1.0);
                    }
                });
            }
            Op::MulCol(x, s) => {
                let c = out.cols();
                let (vx, vs) = (val(*x).data(), val(*s).data());
                with_slot!(*x, |gx| {
                    for (r, row) in g.chunks_exact(c).enumerate() {
                        for j in 0..c {
                            gx[r * c + j] += row[j] * vs[r];
                        }
                    }
                });
                with_slot!(*s, |gs| {
                    for (r, row) in g.chunks_exact(c).enumerate() {
                        gs[r] += row.iter().zip(&vx[r * c..(r + 1) * c]).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
            }
            Op::MulRow(x, rv) => {
                let c = out.cols();
                let (vx, vr) = (val(*x).data(), val(*rv).data());
                with_slot!(*x, |gx| {
                    for (r, row) in g.chunks_exact(c).enumerate() {
                        for j in 0..c {
                            gx[r * c + j] += row[j] * vr[j];
                        }
                    }
                });
                with_slot!(*rv, |gr| {
                    for (r, row) in g.chunks_exact(c).enumerate() {
                        for j in 0..c {
                            gr[j] += row[j] * vx[r * c + j];
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                with_slot!(*a, |ga| {
                    gemm(m, n, k, g, false, tb.data(), true, ga, true);
                });
                with_slot!(*b, |gb| {
                    gemm(k, m, n, ta.data(), true, g, false, gb, true);
                });
            }
            Op::Relu(a) => {
                let va = val(*a).data();
                with_slot!(*a, |ga| {
                    for k in 0..g.len() {
                        if va[k] > 0.0 {
                            ga[k] += g[k];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = out.data();
                with_slot!(*a, |ga| {
                    for k in 0..g.len() {
                        ga[k] += g[k] * y[k] * (1.0 - y[k]);
                    }
                });
            }
            Op::Exp(a) => {
                let y = out.data();
                with_slot!(*a, |ga| {
                    for k in 0..g.len() {
                        ga[k] += g[k] * y[k];
                    }
                });
            }
            Op::Log(a) => {
                let va = val(*a).data();
                with_slot!(*a, |ga| {
                    for k in 0..g.len() {
                        ga[k] += g[k] / va[k];
                    }
                });
            }
            Op::Sin(a) => {
                let va = val(*a).data();
                with_slot!(*a, |ga| {
                    for k in 0..g.len() {
                        ga[k] += g[k] * va[k].cos();
                    }
                });
            }
            Op::Cos(a) => {
                let va = val(*a).data();
                with_slot!(*a, |ga| {
                    for k in 0..g.len() {
                        ga[k] -= g[k] * va[k].sin();
                    }
                });
            }
            Op::Atan2(y, x) => {
                let (vy, vx) = (val(*y).data(), val(*x).data());
                with_slot!(*y, |gy| {
                    for k in 0..g.len() {
                        let r2 = vx[k] * vx[k] + vy[k] * vy[k];
                        if r2 > 0.0 {
                            gy[k] += g[k] * vx[k] / r2;
                        }
                    }
                });
                with_slot!(*x, |gx| {
                    for k in 0..g.len() {
                        let r2 = vx[k] * vx[k] + vy[k] * vy[k];
                        if r2 > 0.0 {
                            gx[k] -= g[k] * vy[k] / r2;
                        }
                    }
                });
            }
            Op::SmoothL1(a, beta) => {
                let va = val(*a).data();
                with_slot!(*a, |ga| {
                    for k in 0..g.len() {
                        ga[k] += g[k] * smooth_l1_grad(va[k], *beta);
                    }
                });
            }
            Op::Sum(a) => with_slot!(*a, |ga| { ga.iter_mut().for_each(|v| *v += g[0]) }),
            Op::Mean(a) => {
                let n = val(*a).numel().max(1) as f64;
                with_slot!(*a, |ga| { ga.iter_mut().for_each(|v| *v += g[0] / n) });
            }
            Op::SumCols(a) => {
                let c = val(*a).cols();
                with_slot!(*a, |ga| {
                    for (r, row) in ga.chunks_exact_mut(c).enumerate() {
                        row.iter_mut().for_each(|v| *v += g[r]);
                    }
                });
            }
            Op::Concat(parts) => {
                let total = out.cols();
                let n = out.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    with_slot!(p, |gp| {
                        for r in 0..n {
                            axpy(&mut gp[r * w..(r + 1) * w], &g[r * total + offset..r * total + offset + w], 1.0);
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceCols(a, start) => {
                let c = val(*a).cols();
                let w = out.cols();
                with_slot!(*a, |ga| {
                    for r in 0..out.rows() {
                        axpy(&mut ga[r * c + start..r * c + start + w], &g[r * w..(r + 1) * w], 1.0);
                    }
                });
            }
            Op::Gather(a, index) => {
                let c = val(*a).cols();
                with_slot!(*a, |ga| {
                    for (k, idx) in index.iter().enumerate() {
                        if let Some(src) = idx {
                            axpy(&mut ga[src * c..(src + 1) * c], &g[k * c..(k + 1) * c], 1.0);
                        }
                    }
                });
            }
            Op::ScatterMean(a, target, inv) => {
                let c = val(*a).cols();
                with_slot!(*a, |ga| {
                    for (k, &t) in target.iter().enumerate() {
                        axpy(&mut ga[k * c..(k + 1) * c], &g[t * c..(t + 1) * c], inv[t]);
                    }
                });
            }
            Op::SegmentMax(a, arg) => {
                let c = out.cols();
                with_slot!(*a, |ga| {
                    for (k, &src) in arg.iter().enumerate() {
                        ga[src * c + k % c] += g[k];
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let c = out.cols();
                let y = out.data();
                with_slot!(*a, |ga| {
                    for r in 0..out.rows() {
                        let gs: f64 = g[r * c..(r + 1) * c].iter().sum();
                        for j in 0..c {
                            ga[r * c + j] += g[r * c + j] - y[r * c + j].exp() * gs;
                        }
                    }
                });
            }
            Op::Custom { inputs, backward, .. } => {
                let mut bufs: Vec<Vec<f64>> = inputs.iter().map(|&v| vec![0.0; val(v).numel()]).collect();
                backward(g, &mut bufs);
                for (&v, b) in inputs.iter().zip(&bufs) {
                    with_slot!(v, |gv| { axpy(gv, b, 1.0) });
                }
            }
        }
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;

fn fnv(mut h: u64, v: u64) -> u64 {
    for b in v.to_le_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn smooth_l1(x: f64, beta: f64) -> f64 {
    let a = x.abs();
    if a < beta {
        0.5 * x * x / beta
    } else {
        a - 0.5 * beta
    }
}

pub fn smooth_l1_grad(x: f64, beta: f64) -> f64 {
    if x.abs() < beta {
        x / beta
    } else if x > 0.0 {
        1.0
    } else {
        -1.0
    }
}
