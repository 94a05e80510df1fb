//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation of a forward pass as a node whose inputs
//! are earlier nodes, so node order is already a topological order. Trainable
//! tensors live in a [`Params`] store; [`Tape::param`] copies a parameter onto
//! the tape once and remembers which node holds it. [`Tape::backward`] walks the
//! nodes in reverse and returns one gradient per parameter in the store, zero
//! for parameters that never appeared on the tape.
//!
//! ```
//! use mmrec::autodiff::{Params, Tape};
//! use mmrec::Tensor;
//!
//! let mut params = Params::new();
//! let w = params.add("w", Tensor::row(vec![1.0, -2.0, 3.0]));
//!
//! let mut tape = Tape::new();
//! let x = tape.param(&params, w);
//! let y = tape.mul(x, x).unwrap();
//! let loss = tape.sum(y);
//! let grads = tape.backward(loss, &params).unwrap();
//! assert_eq!(grads.get(w).data(), &[2.0, -4.0, 6.0]);
//! ```

use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{dot, Tensor};

/// Identifier of a trainable tensor inside a [`Params`] store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors, kept in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total number of scalar entries across all tensors.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

/// One gradient tensor per parameter, aligned with the store it came from.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(params: &Params) -> Self {
        Gradients {
            grads: params
                .values
                .iter()
                .map(|t| Tensor::zeros(t.rows(), t.cols()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g))
    }

    /// Adds `other` into `self` entry by entry.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Compressed neighbourhood lists: the edges of segment `i` are
/// `offsets[i]..offsets[i + 1]`, and edge `e` points at `targets[e]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segments {
    offsets: Vec<usize>,
    targets: Vec<usize>,
    owners: Vec<usize>,
}

impl Segments {
    pub fn new(lists: &[Vec<usize>]) -> Self {
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        let mut targets = Vec::new();
        let mut owners = Vec::new();
        offsets.push(0);
        for (i, l) in lists.iter().enumerate() {
            targets.extend_from_slice(l);
            owners.extend(std::iter::repeat_n(i, l.len()));
            offsets.push(targets.len());
        }
        Segments {
            offsets,
            targets,
            owners,
        }
    }

    pub fn segment_count(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn edge_count(&self) -> usize {
        self.targets.len()
    }

    pub fn range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    /// Target of every edge, in edge order.
    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    /// Segment that owns every edge, in edge order.
    pub fn owners(&self) -> &[usize] {
        &self.owners
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Transpose(Var),
    SoftmaxRows(Var),
    Elu(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Mask(Var, Rc<Vec<f64>>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Rc<Vec<usize>>),
    MeanRows(Var),
    Sum(Var),
    SegmentSoftmax(Var, Rc<Segments>),
    SegmentMean(Var, Rc<Segments>),
    EdgeAggregate(Var, Var, Rc<Segments>),
    SoftmaxXent(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Record of one forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            bound: HashMap::new(),
        }
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Binds a trainable parameter. Repeated calls return the same node.
    pub fn param(&mut self, params: &Params, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.push(params.get(id).clone(), Op::Param(id));
        self.bound.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(value, Op::MatMulNt(a, b)))
    }

    fn zip_with(
        &mut self,
        a: Var,
        b: Var,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (x, y) = (self.value(a), self.value(b));
        x.same_shape(y, op)?;
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| f(p, q))
            .collect();
        Tensor::from_vec(x.rows(), x.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with(a, b, "add", |p, q| p + q)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with(a, b, "sub", |p, q| p - q)?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with(a, b, "mul", |p, q| p * q)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    /// Adds the `1 × n` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, r) = (self.value(a), self.value(b));
        if r.rows() != 1 || r.cols() != x.cols() {
            return Err(Error::Dimension {
                op: "add_row",
                left: x.shape(),
                right: r.shape(),
            });
        }
        let mut value = x.clone();
        for i in 0..value.rows() {
            for (v, b) in value.row_slice_mut(i).iter_mut().zip(r.data()) {
                *v += b;
            }
        }
        Ok(self.push(value, Op::AddRow(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|v| v * factor);
        self.push(value, Op::Scale(a, factor))
    }

    /// Multiplies `a` by the `1 × 1` tensor `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.shape() != [1, 1] {
            return Err(Error::Dimension {
                op: "scale_by",
                left: self.value(a).shape(),
                right: sv.shape(),
            });
        }
        let factor = sv.item();
        let value = self.value(a).map(|v| v * factor);
        Ok(self.push(value, Op::ScaleBy(a, s)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        self.push(value, Op::SoftmaxRows(a))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(elu);
        self.push(value, Op::Elu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        check_slope(slope)?;
        let value = self.value(a).map(|v| leaky_relu(v, slope));
        Ok(self.push(value, Op::LeakyRelu(a, slope)))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(value, Op::Sigmoid(a))
    }

    /// Inverted dropout driven by `rng`. Identity when not training or when
    /// `rate` is zero; no random numbers are consumed in that case.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        a: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        check_dropout(rate)?;
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let mask = dropout_mask(self.value(a).len(), rate, rng);
        let value = {
            let x = self.value(a);
            let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
            Tensor::from_vec(x.rows(), x.cols(), data)?
        };
        Ok(self.push(value, Op::Mask(a, Rc::new(mask))))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Usage("concat_cols of nothing".into()))?;
        let rows = self.value(*first).rows();
        let mut width = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    left: self.value(*first).shape(),
                    right: t.shape(),
                });
            }
            width += t.cols();
        }
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let value = Tensor::from_vec(rows, width, data)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Usage("concat_rows of nothing".into()))?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    left: self.value(*first).shape(),
                    right: t.shape(),
                });
            }
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        let value = Tensor::from_vec(rows, cols, data)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        if start > end || end > x.cols() {
            return Err(Error::Dimension {
                op: "slice_cols",
                left: x.shape(),
                right: [start, end],
            });
        }
        let value = x.slice_cols(start, end);
        Ok(self.push(value, Op::SliceCols(a, start)))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        if start > end || end > x.rows() {
            return Err(Error::Dimension {
                op: "slice_rows",
                left: x.shape(),
                right: [start, end],
            });
        }
        let value = Tensor::from_vec(
            end - start,
            x.cols(),
            x.data()[start * x.cols()..end * x.cols()].to_vec(),
        )?;
        Ok(self.push(value, Op::SliceRows(a, start)))
    }

    pub fn gather_rows(&mut self, a: Var, indices: Rc<Vec<usize>>) -> Result<Var> {
        let x = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= x.rows()) {
            return Err(Error::Dimension {
                op: "gather_rows",
                left: x.shape(),
                right: [bad, 0],
            });
        }
        let value = x.gather_rows(&indices);
        Ok(self.push(value, Op::GatherRows(a, indices)))
    }

    /// Mean over rows: `m × n → 1 × n`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rows() == 0 {
            return Err(Error::Usage("mean of zero rows".into()));
        }
        let mut out = vec![0.0; x.cols()];
        for r in 0..x.rows() {
            for (o, v) in out.iter_mut().zip(x.row_slice(r)) {
                *o += v;
            }
        }
        let m = x.rows() as f64;
        out.iter_mut().for_each(|o| *o /= m);
        let value = Tensor::row(out);
        Ok(self.push(value, Op::MeanRows(a)))
    }

    /// Sum of all entries as a `1 × 1` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    /// Softmax of an `E × 1` column taken separately within each segment.
    pub fn segment_softmax(&mut self, a: Var, segments: Rc<Segments>) -> Result<Var> {
        let x = self.value(a);
        if x.cols() != 1 || x.rows() != segments.edge_count() {
            return Err(Error::Dimension {
                op: "segment_softmax",
                left: x.shape(),
                right: [segments.edge_count(), 1],
            });
        }
        let mut out = vec![0.0; x.rows()];
        for i in 0..segments.segment_count() {
            let range = segments.range(i);
            softmax_into(&x.data()[range.clone()], &mut out[range]);
        }
        let value = Tensor::column(out);
        Ok(self.push(value, Op::SegmentSoftmax(a, segments)))
    }

    /// Mean of the rows of `a` listed in each segment; empty segments give a
    /// zero row. Output has one row per segment.
    pub fn segment_mean(&mut self, a: Var, segments: Rc<Segments>) -> Result<Var> {
        let x = self.value(a);
        if let Some(&bad) = segments.targets().iter().find(|&&t| t >= x.rows()) {
            return Err(Error::Dimension {
                op: "segment_mean",
                left: x.shape(),
                right: [bad, 0],
            });
        }
        let cols = x.cols();
        let mut value = Tensor::zeros(segments.segment_count(), cols);
        for i in 0..segments.segment_count() {
            let range = segments.range(i);
            if range.is_empty() {
                continue;
            }
            let n = range.len() as f64;
            let out = value.row_slice_mut(i);
            for &t in &segments.targets()[range] {
                for (o, v) in out.iter_mut().zip(x.row_slice(t)) {
                    *o += v;
                }
            }
            out.iter_mut().for_each(|o| *o /= n);
        }
        Ok(self.push(value, Op::SegmentMean(a, segments)))
    }

    /// `out_i = Σ_{e ∈ segment i} weights_e · rows[targets_e]` for an `E × 1`
    /// weight column and an `N × d` row matrix.
    pub fn edge_aggregate(
        &mut self,
        weights: Var,
        rows: Var,
        segments: Rc<Segments>,
    ) -> Result<Var> {
        let (w, h) = (self.value(weights), self.value(rows));
        if w.cols() != 1 || w.rows() != segments.edge_count() {
            return Err(Error::Dimension {
                op: "edge_aggregate",
                left: w.shape(),
                right: [segments.edge_count(), 1],
            });
        }
        if let Some(&bad) = segments.targets().iter().find(|&&t| t >= h.rows()) {
            return Err(Error::Dimension {
                op: "edge_aggregate",
                left: h.shape(),
                right: [bad, 0],
            });
        }
        let mut value = Tensor::zeros(segments.segment_count(), h.cols());
        for i in 0..segments.segment_count() {
            let out = value.row_slice_mut(i);
            for e in segments.range(i) {
                let a = w.data()[e];
                for (o, v) in out.iter_mut().zip(h.row_slice(segments.targets()[e])) {
                    *o += a * v;
                }
            }
        }
        Ok(self.push(value, Op::EdgeAggregate(weights, rows, segments)))
    }

    /// Sum over rows of `logsumexp(row) − row[0]`: softmax cross-entropy where
    /// column 0 of every row is the correct class.
    pub fn softmax_xent(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.cols() == 0 {
            return Err(Error::Usage("softmax_xent over zero classes".into()));
        }
        let total = (0..x.rows())
            .map(|r| {
                let row = x.row_slice(r);
                log_sum_exp(row) - row[0]
            })
            .sum();
        Ok(self.push(Tensor::scalar(total), Op::SoftmaxXent(a)))
    }

    /// Reverse sweep from a `1 × 1` root.
    pub fn backward(&self, root: Var, params: &Params) -> Result<Gradients> {
        let root_shape = self.value(root).shape();
        if root_shape != [1, 1] {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got shape {root_shape:?}"
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients::zeros_like(params);

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.grads[id.0].add_assign(&g),
                Op::MatMul(a, b) => {
                    let ga = g.matmul_nt(self.value(*b))?;
                    let gb = self.value(*a).matmul_tn(&g)?;
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulNt(a, b) => {
                    let ga = g.matmul(self.value(*b))?;
                    let gb = g.matmul_tn(self.value(*a))?;
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, g.map(|v| -v));
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = hadamard(&g, self.value(*b));
                    let gb = hadamard(&g, self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddRow(a, b) => {
                    let mut gb = vec![0.0; g.cols()];
                    for r in 0..g.rows() {
                        for (s, v) in gb.iter_mut().zip(g.row_slice(r)) {
                            *s += v;
                        }
                    }
                    acc(&mut grads, *b, Tensor::row(gb));
                    acc(&mut grads, *a, g);
                }
                Op::Scale(a, f) => acc(&mut grads, *a, g.map(|v| v * f)),
                Op::ScaleBy(a, s) => {
                    let factor = self.value(*s).item();
                    let gs = dot(g.data(), self.value(*a).data());
                    acc(&mut grads, *s, Tensor::scalar(gs));
                    acc(&mut grads, *a, g.map(|v| v * factor));
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.transpose()),
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        softmax_backward(y.row_slice(r), g.row_slice(r), ga.row_slice_mut(r));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Elu(a) => {
                    let x = self.value(*a);
                    let y = &node.value;
                    let data = g
                        .data()
                        .iter()
                        .zip(x.data().iter().zip(y.data()))
                        .map(|(gv, (&xv, &yv))| if xv >= 0.0 { *gv } else { gv * (yv + 1.0) })
                        .collect();
                    acc(&mut grads, *a, Tensor::from_vec(g.rows(), g.cols(), data)?);
                }
                Op::LeakyRelu(a, slope) => {
                    let x = self.value(*a);
                    let data = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(gv, &xv)| if xv >= 0.0 { *gv } else { gv * slope })
                        .collect();
                    acc(&mut grads, *a, Tensor::from_vec(g.rows(), g.cols(), data)?);
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let data = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(gv, yv)| gv * (1.0 - yv * yv))
                        .collect();
                    acc(&mut grads, *a, Tensor::from_vec(g.rows(), g.cols(), data)?);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let data = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(gv, yv)| gv * yv * (1.0 - yv))
                        .collect();
                    acc(&mut grads, *a, Tensor::from_vec(g.rows(), g.cols(), data)?);
                }
                Op::Mask(a, mask) => {
                    let data = g
                        .data()
                        .iter()
                        .zip(mask.iter())
                        .map(|(gv, m)| gv * m)
                        .collect();
                    acc(&mut grads, *a, Tensor::from_vec(g.rows(), g.cols(), data)?);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        acc(&mut grads, p, g.slice_cols(start, start + w));
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let h = self.value(p).rows();
                        let slice = g.data()[start * g.cols()..(start + h) * g.cols()].to_vec();
                        acc(&mut grads, p, Tensor::from_vec(h, g.cols(), slice)?);
                        start += h;
                    }
                }
                Op::SliceCols(a, start) => {
                    let x = self.value(*a);
                    let mut ga = Tensor::zeros(x.rows(), x.cols());
                    for r in 0..g.rows() {
                        ga.row_slice_mut(r)[*start..*start + g.cols()]
                            .copy_from_slice(g.row_slice(r));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SliceRows(a, start) => {
                    let x = self.value(*a);
                    let mut ga = Tensor::zeros(x.rows(), x.cols());
                    let c = x.cols();
                    ga.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                    acc(&mut grads, *a, ga);
                }
                Op::GatherRows(a, indices) => {
                    let x = self.value(*a);
                    let mut ga = Tensor::zeros(x.rows(), x.cols());
                    for (r, &i) in indices.iter().enumerate() {
                        for (o, v) in ga.row_slice_mut(i).iter_mut().zip(g.row_slice(r)) {
                            *o += v;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::MeanRows(a) => {
                    let x = self.value(*a);
                    let m = x.rows() as f64;
                    let mut ga = Tensor::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        for (o, v) in ga.row_slice_mut(r).iter_mut().zip(g.data()) {
                            *o = v / m;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let x = self.value(*a);
                    acc(&mut grads, *a, Tensor::filled(x.rows(), x.cols(), g.item()));
                }
                Op::SegmentSoftmax(a, segments) => {
                    let y = node.value.data();
                    let mut ga = vec![0.0; y.len()];
                    for i in 0..segments.segment_count() {
                        let range = segments.range(i);
                        softmax_backward(
                            &y[range.clone()],
                            &g.data()[range.clone()],
                            &mut ga[range],
                        );
                    }
                    acc(&mut grads, *a, Tensor::column(ga));
                }
                Op::SegmentMean(a, segments) => {
                    let x = self.value(*a);
                    let mut ga = Tensor::zeros(x.rows(), x.cols());
                    for i in 0..segments.segment_count() {
                        let range = segments.range(i);
                        if range.is_empty() {
                            continue;
                        }
                        let n = range.len() as f64;
                        for &t in &segments.targets()[range] {
                            for (o, v) in ga.row_slice_mut(t).iter_mut().zip(g.row_slice(i)) {
                                *o += v / n;
                            }
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::EdgeAggregate(weights, rows, segments) => {
                    let w = self.value(*weights);
                    let h = self.value(*rows);
                    let mut gw = vec![0.0; w.rows()];
                    let mut gh = Tensor::zeros(h.rows(), h.cols());
                    for i in 0..segments.segment_count() {
                        let gi = g.row_slice(i);
                        for e in segments.range(i) {
                            let t = segments.targets()[e];
                            gw[e] = dot(gi, h.row_slice(t));
                            let a = w.data()[e];
                            for (o, v) in gh.row_slice_mut(t).iter_mut().zip(gi) {
                                *o += a * v;
                            }
                        }
                    }
                    acc(&mut grads, *weights, Tensor::column(gw));
                    acc(&mut grads, *rows, gh);
                }
                Op::SoftmaxXent(a) => {
                    let x = self.value(*a);
                    let scale = g.item();
                    let mut ga = Tensor::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let out = ga.row_slice_mut(r);
                        softmax_into(x.row_slice(r), out);
                        out[0] -= 1.0;
                        out.iter_mut().for_each(|o| *o *= scale);
                    }
                    acc(&mut grads, *a, ga);
                }
            }
        }
        Ok(out)
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::from_vec(a.rows(), a.cols(), data).expect("same shape")
}

fn softmax_backward(y: &[f64], g: &[f64], out: &mut [f64]) {
    let inner = dot(y, g);
    for ((o, yv), gv) in out.iter_mut().zip(y).zip(g) {
        *o = yv * (gv - inner);
    }
}

pub(crate) fn softmax_into(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

pub(crate) fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::INFINITY {
        return max;
    }
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Row-wise softmax of a plain tensor.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        softmax_into(x.row_slice(r), out.row_slice_mut(r));
    }
    out
}

/// Exponential linear unit with α = 1.
pub fn elu(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

pub fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

pub(crate) fn check_slope(slope: f64) -> Result<()> {
    if !(slope > 0.0 && slope < 1.0) {
        return Err(Error::Config(format!(
            "leaky relu slope must lie in (0, 1), got {slope}"
        )));
    }
    Ok(())
}

pub(crate) fn check_dropout(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!(
            "dropout rate must lie in [0, 1), got {rate}"
        )));
    }
    Ok(())
}

fn dropout_mask<R: Rng + ?Sized>(n: usize, rate: f64, rng: &mut R) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..n)
        .map(|_| {
            if rng.random::<f64>() < rate {
                0.0
            } else {
                keep
            }
        })
        .collect()
}

/// Dropout on a plain tensor with a mask drawn from `seed`.
pub fn dropout(x: &Tensor, rate: f64, training: bool, seed: u64) -> Result<Tensor> {
    use rand::SeedableRng;
    check_dropout(rate)?;
    if !training || rate == 0.0 {
        return Ok(x.clone());
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mask = dropout_mask(x.len(), rate, &mut rng);
    let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
    Tensor::from_vec(x.rows(), x.cols(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GradCheck};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn uniform(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-2.0..2.0))
            .collect();
        Tensor::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row(vec![0.7; 5]));
        let y = tape.softmax_rows(x);
        for v in tape.value(y).data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
        let x = tape.constant(Tensor::row(vec![0.0, 3f64.ln()]));
        let y = tape.softmax_rows(x);
        let d = tape.value(y).data();
        assert!((d[0] - 0.25).abs() < 1e-15 && (d[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut r = rng(1);
        let x = uniform(4, 6, &mut r);
        let y = softmax_rows(&x);
        let mut shifted = x.clone();
        shifted.row_slice_mut(2).iter_mut().for_each(|v| *v += 7.3);
        let z = softmax_rows(&shifted);
        for row in 0..4 {
            assert!((y.row_slice(row).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        for (a, b) in y.data().iter().zip(z.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn elu_and_leaky_values() {
        assert_eq!(elu(0.0), 0.0);
        assert_eq!(elu(1.0), 1.0);
        assert!((elu(-1.0) - (std::f64::consts::E.recip() - 1.0)).abs() < 1e-15);
        assert_eq!(leaky_relu(2.0, 0.2), 2.0);
        assert!((leaky_relu(-1.0, 0.2) + 0.2).abs() < 1e-15);
    }

    #[test]
    fn leaky_gradient_is_slope_on_negative_side() {
        let mut params = Params::new();
        let id = params.add("x", Tensor::scalar(-3.0));
        let mut tape = Tape::new();
        let x = tape.param(&params, id);
        let y = tape.leaky_relu(x, 0.2).unwrap();
        let g = tape.backward(y, &params).unwrap();
        assert!((g.get(id).item() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn slope_and_rate_validation() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(1.0));
        assert!(matches!(tape.leaky_relu(x, 1.5), Err(Error::Config(_))));
        assert!(matches!(tape.leaky_relu(x, 0.0), Err(Error::Config(_))));
        assert!(matches!(
            tape.dropout(x, 1.0, true, &mut rng(0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn dropout_identity_cases() {
        let x = Tensor::row(vec![1.0, 2.0, 3.0]);
        assert_eq!(dropout(&x, 0.0, true, 9).unwrap(), x);
        assert_eq!(dropout(&x, 0.4, false, 9).unwrap(), x);
        assert_eq!(
            dropout(&x, 0.4, true, 9).unwrap(),
            dropout(&x, 0.4, true, 9).unwrap()
        );
    }

    #[test]
    fn dropout_mean_is_preserved() {
        let n = 100_000;
        let x = Tensor::filled(1, n, 1.0);
        let y = dropout(&x, 0.4, true, 42).unwrap();
        let mean = y.sum() / n as f64;
        // each entry is 0 or 1/0.6 with mean 1 and variance p/(1-p)
        let se = (0.4f64 / 0.6 / n as f64).sqrt();
        assert!((mean - 1.0).abs() < 3.0 * se, "mean {mean}, se {se}");
    }

    #[test]
    fn constant_root_has_zero_gradients() {
        let mut params = Params::new();
        let id = params.add("w", Tensor::row(vec![1.0, 2.0]));
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::scalar(5.0));
        let g = tape.backward(c, &params).unwrap();
        assert_eq!(g.get(id).data(), &[0.0, 0.0]);
    }

    #[test]
    fn sum_of_parameter_gives_ones() {
        let mut params = Params::new();
        let id = params.add("w", Tensor::zeros(3, 2));
        let mut tape = Tape::new();
        let w = tape.param(&params, id);
        let s = tape.sum(w);
        let g = tape.backward(s, &params).unwrap();
        assert!(g.get(id).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn non_scalar_root_rejected() {
        let params = Params::new();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(2, 2));
        assert!(matches!(tape.backward(x, &params), Err(Error::Usage(_))));
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut r = rng(7);
        let mut params = Params::new();
        let a = params.add("a", Tensor::randn(5, 4, 1.0, &mut r));
        let b = params.add("b", Tensor::randn(4, 3, 1.0, &mut r));
        let report = check_gradients(&params, GradCheck::new(1e-6, 1e-7), |p, tape| {
            let x = tape.param(p, a);
            let y = tape.param(p, b);
            let z = tape.matmul(x, y)?;
            Ok(tape.sum(z))
        })
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn segment_ops_match_finite_differences() {
        let mut r = rng(11);
        let mut params = Params::new();
        let a = params.add("a", uniform(3, 4, &mut r));
        let e = params.add("e", uniform(5, 1, &mut r));
        let h = params.add("h", uniform(3, 2, &mut r));
        let segs = Rc::new(Segments::new(&[vec![0, 2], vec![1], vec![0, 2]]));
        let report = check_gradients(&params, GradCheck::default(), |p, tape| {
            let e = tape.param(p, e);
            let h = tape.param(p, h);
            let a = tape.param(p, a);
            let w = tape.segment_softmax(e, segs.clone())?;
            let agg = tape.edge_aggregate(w, h, segs.clone())?;
            let agg = tape.mul(agg, agg)?;
            let t1 = tape.sum(agg);
            let xe = tape.softmax_xent(a)?;
            tape.add(t1, xe)
        })
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn composite_ops_match_finite_differences() {
        let mut r = rng(12);
        let mut params = Params::new();
        let a = params.add("a", uniform(3, 4, &mut r));
        let b = params.add("b", uniform(3, 4, &mut r));
        let c = params.add("c", uniform(4, 2, &mut r));
        let row = params.add("row", uniform(1, 4, &mut r));
        let s = params.add("s", uniform(1, 1, &mut r));
        let h = params.add("h", uniform(3, 2, &mut r));
        let segs = Rc::new(Segments::new(&[vec![0, 2], vec![], vec![0, 1, 2]]));
        let report = check_gradients(&params, GradCheck::default(), |p, tape| {
            let (a, b, c) = (tape.param(p, a), tape.param(p, b), tape.param(p, c));
            let (row, s, h) = (tape.param(p, row), tape.param(p, s), tape.param(p, h));
            let mut terms = Vec::new();
            let ab = tape.mul(a, b)?;
            terms.push(tape.sum(ab));
            let d = tape.sub(a, b)?;
            let d = tape.add_row(d, row)?;
            let d = tape.elu(d);
            let d = tape.matmul(d, c)?;
            let d = tape.tanh(d);
            terms.push(tape.sum(d));
            let nt = tape.matmul_nt(a, b)?;
            let nt = tape.softmax_rows(nt);
            let nt = tape.mul(nt, nt)?;
            terms.push(tape.sum(nt));
            let l = tape.leaky_relu(a, 0.2)?;
            let l = tape.scale_by(l, s)?;
            let l = tape.sigmoid(l);
            let l = tape.transpose(l);
            let l = tape.mean_rows(l)?;
            let l = tape.mul(l, l)?;
            terms.push(tape.sum(l));
            let parts = tape.concat_cols(&[a, b])?;
            let parts = tape.slice_cols(parts, 2, 7)?;
            let parts = tape.concat_rows(&[parts, parts])?;
            let parts = tape.slice_rows(parts, 1, 5)?;
            let parts = tape.gather_rows(parts, Rc::new(vec![3, 0, 0, 2]))?;
            let parts = tape.mul(parts, parts)?;
            terms.push(tape.sum(parts));
            let m = tape.segment_mean(h, segs.clone())?;
            let m = tape.scale(m, 1.7);
            let m = tape.mul(m, m)?;
            terms.push(tape.sum(m));
            let mut total = terms[0];
            for &t in &terms[1..] {
                total = tape.add(total, t)?;
            }
            Ok(total)
        })
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn dropout_gradient_uses_the_same_mask() {
        let mut r = rng(5);
        let mut params = Params::new();
        let a = params.add("a", uniform(4, 4, &mut r));
        let report = check_gradients(&params, GradCheck::default(), |p, tape| {
            let mut mask_rng = rng(99);
            let x = tape.param(p, a);
            let y = tape.dropout(x, 0.5, true, &mut mask_rng)?;
            let y = tape.mul(y, y)?;
            Ok(tape.sum(y))
        })
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn repeated_runs_are_bitwise_identical() {
        let run = || {
            let mut r = rng(3);
            let mut params = Params::new();
            let a = params.add("a", Tensor::randn(6, 6, 1.0, &mut r));
            let mut tape = Tape::new();
            let x = tape.param(&params, a);
            let y = tape.softmax_rows(x);
            let y = tape.dropout(y, 0.3, true, &mut r).unwrap();
            let z = tape.matmul(y, x).unwrap();
            let z = tape.elu(z);
            let s = tape.sum(z);
            let g = tape.backward(s, &params).unwrap();
            (
                tape.value(s).item().to_bits(),
                g.get(a)
                    .data()
                    .iter()
                    .map(|v| v.to_bits())
                    .collect::<Vec<_>>(),
            )
        };
        assert_eq!(run(), run());
    }
}
