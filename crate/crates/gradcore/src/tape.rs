use std::f64::consts::PI;
use std::sync::Arc;

use crate::kernels::{gelu, gelu_derivative, matmul_nn, matmul_nt, matmul_tn};
use crate::{GradError, Tensor};

/// Handle to a node of a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input { slot: usize },
    Literal(Arc<Tensor>),
    Affine { x: NodeId, w: NodeId, b: Option<NodeId> },
    Sin { x: NodeId, omega: f64 },
    Relu(NodeId),
    Gelu(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    ScaleShift { x: NodeId, scale: f64, shift: f64 },
    ConcatCols(NodeId, NodeId),
    SliceCols { x: NodeId, start: usize },
    Reshape(NodeId),
    RepeatRows { x: NodeId, counts: Vec<usize> },
    TileRows { x: NodeId, times: usize },
    LogSumExp(NodeId),
    LogMeanExpOffset { x: NodeId, offset: f64 },
    Sum(NodeId),
    Mean(NodeId),
    SquaredError(NodeId, NodeId),
    GaussianLogpdf { x: NodeId, mean: NodeId, var: f64 },
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    /// Depends on at least one tracked input.
    tracked: bool,
}

/// Gradients of the scalar output with respect to the tape's inputs.
#[derive(Clone, Debug)]
pub struct Gradients {
    nodes: Vec<NodeId>,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a tracked input; `None` for data inputs.
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor> {
        let slot = self.nodes.iter().position(|n| *n == id)?;
        self.grads[slot].as_ref()
    }

    /// One entry per input slot, in declaration order.
    pub fn into_slots(self) -> Vec<Option<Tensor>> {
        self.grads
    }
}

/// A static computation graph with cached forward values.
///
/// Nodes are appended in topological order by construction, so every operand
/// id is smaller than the id of its consumer. The last node added is the
/// output.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    slots: Vec<NodeId>,
    tracked_slots: Vec<bool>,
    values: Vec<Option<Arc<Tensor>>>,
    evaluated: bool,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn mismatch(node: usize, detail: impl Into<String>) -> GradError {
    GradError::ShapeMismatch { node, detail: detail.into() }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn num_inputs(&self) -> usize {
        self.slots.len()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn output(&self) -> Option<NodeId> {
        self.nodes.len().checked_sub(1).map(NodeId)
    }

    /// Cached forward value of a node.
    pub fn value(&self, id: NodeId) -> Option<&Tensor> {
        self.values.get(id.0).and_then(|v| v.as_deref())
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, tracked: bool) -> NodeId {
        self.evaluated = false;
        self.nodes.push(Node { op, shape, tracked });
        NodeId(self.nodes.len() - 1)
    }

    fn next_id(&self) -> usize {
        self.nodes.len()
    }

    fn tracked(&self, id: NodeId) -> bool {
        self.nodes[id.0].tracked
    }

    fn dims2(&self, id: NodeId, what: &str) -> Result<(usize, usize), GradError> {
        match self.nodes[id.0].shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(mismatch(self.next_id(), format!("{what} must be 2-D, got {s:?}"))),
        }
    }

    // ---- leaves -------------------------------------------------------

    /// Differentiable input, bound at `forward` time.
    pub fn input(&mut self, shape: &[usize]) -> NodeId {
        let slot = self.slots.len();
        let id = self.push(Op::Input { slot }, shape.to_vec(), true);
        self.slots.push(id);
        self.tracked_slots.push(true);
        id
    }

    /// Non-differentiable input, bound at `forward` time.
    pub fn data(&mut self, shape: &[usize]) -> NodeId {
        let slot = self.slots.len();
        let id = self.push(Op::Input { slot }, shape.to_vec(), false);
        self.slots.push(id);
        self.tracked_slots.push(false);
        id
    }

    /// Constant fixed at build time.
    pub fn literal(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Literal(Arc::new(value)), shape, false)
    }

    // ---- primitives ---------------------------------------------------

    /// `x[n,k] * w[m,k]^T + b[m]`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId, GradError> {
        let (n, k) = self.dims2(x, "affine input")?;
        let (m, kw) = self.dims2(w, "affine weight")?;
        if k != kw {
            return Err(mismatch(self.next_id(), format!("affine: input width {k} vs weight width {kw}")));
        }
        if let Some(b) = b {
            if self.nodes[b.0].shape != [m] {
                return Err(mismatch(
                    self.next_id(),
                    format!("affine: bias shape {:?}, expected [{m}]", self.nodes[b.0].shape),
                ));
            }
        }
        let tracked = self.tracked(x) || self.tracked(w) || b.is_some_and(|b| self.tracked(b));
        Ok(self.push(Op::Affine { x, w, b }, vec![n, m], tracked))
    }

    /// `sin(omega * x)`.
    pub fn sin(&mut self, x: NodeId, omega: f64) -> NodeId {
        let shape = self.nodes[x.0].shape.clone();
        let tracked = self.tracked(x);
        self.push(Op::Sin { x, omega }, shape, tracked)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let shape = self.nodes[x.0].shape.clone();
        let tracked = self.tracked(x);
        self.push(Op::Relu(x), shape, tracked)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let shape = self.nodes[x.0].shape.clone();
        let tracked = self.tracked(x);
        self.push(Op::Gelu(x), shape, tracked)
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<Vec<usize>, GradError> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa != sb {
            return Err(mismatch(self.next_id(), format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(sa.clone())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        let shape = self.same_shape(a, b, "add")?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Op::Add(a, b), shape, tracked))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        let shape = self.same_shape(a, b, "sub")?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Op::Sub(a, b), shape, tracked))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        let shape = self.same_shape(a, b, "mul")?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Op::Mul(a, b), shape, tracked))
    }

    /// `scale * x + shift`.
    pub fn scale_shift(&mut self, x: NodeId, scale: f64, shift: f64) -> NodeId {
        let shape = self.nodes[x.0].shape.clone();
        let tracked = self.tracked(x);
        self.push(Op::ScaleShift { x, scale, shift }, shape, tracked)
    }

    /// `[a | b]` along the last axis of two matrices with equal row counts.
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        let (ra, ca) = self.dims2(a, "concat lhs")?;
        let (rb, cb) = self.dims2(b, "concat rhs")?;
        if ra != rb {
            return Err(mismatch(self.next_id(), format!("concat: rows {ra} vs {rb}")));
        }
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Op::ConcatCols(a, b), vec![ra, ca + cb], tracked))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, GradError> {
        let (r, c) = self.dims2(x, "slice input")?;
        if start + len > c {
            return Err(mismatch(self.next_id(), format!("slice {start}..{} of {c} columns", start + len)));
        }
        let tracked = self.tracked(x);
        Ok(self.push(Op::SliceCols { x, start }, vec![r, len], tracked))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, GradError> {
        let from = &self.nodes[x.0].shape;
        if numel(from) != numel(shape) {
            return Err(mismatch(self.next_id(), format!("reshape {from:?} -> {shape:?}")));
        }
        let tracked = self.tracked(x);
        Ok(self.push(Op::Reshape(x), shape.to_vec(), tracked))
    }

    /// Row `i` of `x` repeated `counts[i]` times, contiguously.
    pub fn repeat_rows(&mut self, x: NodeId, counts: &[usize]) -> Result<NodeId, GradError> {
        let (r, c) = self.dims2(x, "repeat_rows input")?;
        if counts.len() != r {
            return Err(mismatch(self.next_id(), format!("repeat_rows: {} counts for {r} rows", counts.len())));
        }
        let total = counts.iter().sum();
        let tracked = self.tracked(x);
        Ok(self.push(Op::RepeatRows { x, counts: counts.to_vec() }, vec![total, c], tracked))
    }

    /// The whole matrix stacked `times` times.
    pub fn tile_rows(&mut self, x: NodeId, times: usize) -> Result<NodeId, GradError> {
        let (r, c) = self.dims2(x, "tile_rows input")?;
        let tracked = self.tracked(x);
        Ok(self.push(Op::TileRows { x, times }, vec![r * times, c], tracked))
    }

    /// Stabilised `ln sum exp` over the last axis: `[k] -> []`, `[n,k] -> [n]`.
    pub fn logsumexp(&mut self, x: NodeId) -> Result<NodeId, GradError> {
        let shape = self.reduced_last_axis(x, "logsumexp")?;
        let tracked = self.tracked(x);
        Ok(self.push(Op::LogSumExp(x), shape, tracked))
    }

    /// Stabilised `ln(offset + mean exp)` over the last axis, `offset >= 0`.
    pub fn log_mean_exp_offset(&mut self, x: NodeId, offset: f64) -> Result<NodeId, GradError> {
        if !(offset >= 0.0 && offset.is_finite()) {
            return Err(mismatch(self.next_id(), format!("log_mean_exp_offset: offset {offset} must be >= 0")));
        }
        let shape = self.reduced_last_axis(x, "log_mean_exp_offset")?;
        let tracked = self.tracked(x);
        Ok(self.push(Op::LogMeanExpOffset { x, offset }, shape, tracked))
    }

    fn reduced_last_axis(&self, x: NodeId, what: &str) -> Result<Vec<usize>, GradError> {
        match self.nodes[x.0].shape.as_slice() {
            [k] if *k > 0 => Ok(vec![]),
            [n, k] if *k > 0 => Ok(vec![*n]),
            s => Err(mismatch(self.next_id(), format!("{what}: unsupported shape {s:?}"))),
        }
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let tracked = self.tracked(x);
        self.push(Op::Sum(x), vec![], tracked)
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId, GradError> {
        if numel(&self.nodes[x.0].shape) == 0 {
            return Err(mismatch(self.next_id(), "mean of empty tensor"));
        }
        let tracked = self.tracked(x);
        Ok(self.push(Op::Mean(x), vec![], tracked))
    }

    /// Mean of `(a - b)^2` over all elements.
    pub fn squared_error(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        let shape = self.same_shape(a, b, "squared_error")?;
        if numel(&shape) == 0 {
            return Err(mismatch(self.next_id(), "squared_error of empty tensors"));
        }
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Op::SquaredError(a, b), vec![], tracked))
    }

    /// `sum_i ln N(x_i; mean_i, var)`.
    pub fn gaussian_logpdf(&mut self, x: NodeId, mean: NodeId, var: f64) -> Result<NodeId, GradError> {
        self.same_shape(x, mean, "gaussian_logpdf")?;
        if !(var > 0.0 && var.is_finite()) {
            return Err(mismatch(self.next_id(), format!("gaussian_logpdf: variance {var} must be > 0")));
        }
        let tracked = self.tracked(x) || self.tracked(mean);
        Ok(self.push(Op::GaussianLogpdf { x, mean, var }, vec![], tracked))
    }

    // ---- evaluation ---------------------------------------------------

    /// Binds `inputs` to the input slots (declaration order), evaluates every
    /// node and returns the output value.
    pub fn forward<I, T>(&mut self, inputs: I) -> Result<Tensor, GradError>
    where
        I: IntoIterator<Item = T>,
        T: Into<Arc<Tensor>>,
    {
        if self.nodes.is_empty() {
            return Err(GradError::Empty);
        }
        let inputs: Vec<Arc<Tensor>> = inputs.into_iter().map(Into::into).collect();
        if inputs.len() != self.slots.len() {
            return Err(GradError::InputCount { expected: self.slots.len(), got: inputs.len() });
        }
        self.evaluated = false;
        self.values.clear();
        self.values.resize(self.nodes.len(), None);
        let mut inputs: Vec<Option<Arc<Tensor>>> = inputs.into_iter().map(Some).collect();

        for i in 0..self.nodes.len() {
            let value = match &self.nodes[i].op {
                Op::Input { slot } => {
                    let t = inputs[*slot].take().expect("each slot bound once");
                    if t.shape() != self.nodes[i].shape.as_slice() {
                        return Err(mismatch(
                            i,
                            format!("input shape {:?}, declared {:?}", t.shape(), self.nodes[i].shape),
                        ));
                    }
                    t
                }
                Op::Literal(t) => Arc::clone(t),
                _ => Arc::new(self.eval(i)),
            };
            if !value.is_finite() {
                return Err(GradError::NonFinite { node: i });
            }
            self.values[i] = Some(value);
        }
        self.evaluated = true;
        let out = self.values.last().and_then(|v| v.as_deref()).expect("non-empty");
        Ok(out.clone())
    }

    fn val(&self, id: NodeId) -> &Tensor {
        self.values[id.0].as_deref().expect("operand evaluated before consumer")
    }

    fn eval(&self, i: usize) -> Tensor {
        let shape = self.nodes[i].shape.clone();
        let data: Vec<f64> = match &self.nodes[i].op {
            Op::Input { .. } | Op::Literal(_) => unreachable!("leaves are bound in forward"),
            Op::Affine { x, w, b } => {
                let (n, k) = (shape[0], self.nodes[x.0].shape[1]);
                let m = shape[1];
                let mut out = vec![0.0; n * m];
                matmul_nt(self.val(*x).data(), self.val(*w).data(), &mut out, n, k, m, false);
                if let Some(b) = b {
                    let bias = self.val(*b).data();
                    for row in out.chunks_exact_mut(m) {
                        for (o, bv) in row.iter_mut().zip(bias) {
                            *o += bv;
                        }
                    }
                }
                out
            }
            Op::Sin { x, omega } => self.val(*x).data().iter().map(|v| (omega * v).sin()).collect(),
            Op::Relu(x) => self.val(*x).data().iter().map(|v| v.max(0.0)).collect(),
            Op::Gelu(x) => self.val(*x).data().iter().map(|v| gelu(*v)).collect(),
            Op::Add(a, b) => zip_map(self.val(*a), self.val(*b), |p, q| p + q),
            Op::Sub(a, b) => zip_map(self.val(*a), self.val(*b), |p, q| p - q),
            Op::Mul(a, b) => zip_map(self.val(*a), self.val(*b), |p, q| p * q),
            Op::ScaleShift { x, scale, shift } => {
                self.val(*x).data().iter().map(|v| scale * v + shift).collect()
            }
            Op::ConcatCols(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let (ca, cb) = (ta.cols(), tb.cols());
                let mut out = Vec::with_capacity(shape[0] * (ca + cb));
                for r in 0..shape[0] {
                    out.extend_from_slice(&ta.data()[r * ca..(r + 1) * ca]);
                    out.extend_from_slice(&tb.data()[r * cb..(r + 1) * cb]);
                }
                out
            }
            Op::SliceCols { x, start } => {
                let t = self.val(*x);
                let c = t.cols();
                let len = shape[1];
                let mut out = Vec::with_capacity(shape[0] * len);
                for row in t.data().chunks_exact(c) {
                    out.extend_from_slice(&row[*start..start + len]);
                }
                out
            }
            Op::Reshape(x) => self.val(*x).data().to_vec(),
            Op::RepeatRows { x, counts } => {
                let t = self.val(*x);
                let c = t.cols();
                let mut out = Vec::with_capacity(shape[0] * c);
                for (row, &k) in t.data().chunks_exact(c).zip(counts) {
                    for _ in 0..k {
                        out.extend_from_slice(row);
                    }
                }
                out
            }
            Op::TileRows { x, times } => {
                let t = self.val(*x);
                let mut out = Vec::with_capacity(t.len() * times);
                for _ in 0..*times {
                    out.extend_from_slice(t.data());
                }
                out
            }
            Op::LogSumExp(x) => {
                let t = self.val(*x);
                t.data().chunks_exact(t.cols()).map(logsumexp_row).collect()
            }
            Op::LogMeanExpOffset { x, offset } => {
                let t = self.val(*x);
                t.data().chunks_exact(t.cols()).map(|r| log_mean_exp_offset_row(r, *offset)).collect()
            }
            Op::Sum(x) => vec![self.val(*x).data().iter().sum()],
            Op::Mean(x) => vec![shifted_mean(self.val(*x).data())],
            Op::SquaredError(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let s: f64 = ta.data().iter().zip(tb.data()).map(|(p, q)| (p - q) * (p - q)).sum();
                vec![s / ta.len() as f64]
            }
            Op::GaussianLogpdf { x, mean, var } => {
                let (tx, tm) = (self.val(*x), self.val(*mean));
                let norm = -0.5 * (2.0 * PI * var).ln();
                let s: f64 = tx
                    .data()
                    .iter()
                    .zip(tm.data())
                    .map(|(p, q)| norm - (p - q) * (p - q) / (2.0 * var))
                    .sum();
                vec![s]
            }
        };
        Tensor::new(shape, data).expect("shape inference matches kernels")
    }

    /// Reverse accumulation from the (scalar) output, seeded with `seed`.
    pub fn backward(&mut self, seed: f64) -> Result<Gradients, GradError> {
        if !self.evaluated {
            return Err(GradError::NotEvaluated);
        }
        let out = self.nodes.len() - 1;
        if numel(&self.nodes[out].shape) != 1 {
            return Err(GradError::NonScalarOutput { node: out, shape: self.nodes[out].shape.clone() });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[out].tracked {
            grads[out] = Some(vec![seed]);
        }

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].tracked || matches!(self.nodes[i].op, Op::Input { .. }) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }

        let grads_out = self
            .slots
            .iter()
            .zip(&self.tracked_slots)
            .map(|(id, &tracked)| {
                tracked.then(|| {
                    let shape = self.nodes[id.0].shape.clone();
                    let data = grads[id.0].take().unwrap_or_else(|| vec![0.0; numel(&shape)]);
                    Tensor::new(shape, data).expect("gradient shape")
                })
            })
            .collect();
        Ok(Gradients { nodes: self.slots.clone(), grads: grads_out })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        macro_rules! with_grad {
            ($id:expr, |$buf:ident| $body:expr) => {{
                let id: NodeId = $id;
                if nodes[id.0].tracked {
                    let n = numel(&nodes[id.0].shape);
                    let $buf: &mut Vec<f64> = grads[id.0].get_or_insert_with(|| vec![0.0; n]);
                    $body;
                }
            }};
        }

        match &nodes[i].op {
            Op::Input { .. } | Op::Literal(_) => {}
            Op::Affine { x, w, b } => {
                let (n, k) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
                let m = nodes[i].shape[1];
                with_grad!(*x, |gx| {
                    matmul_nn(g, self.val(*w).data(), gx, n, m, k, true);
                });
                with_grad!(*w, |gw| {
                    matmul_tn(g, self.val(*x).data(), gw, n, m, k, true);
                });
                if let Some(b) = b {
                    with_grad!(*b, |gb| {
                        for row in g.chunks_exact(m) {
                            for (o, v) in gb.iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                    });
                }
            }
            Op::Sin { x, omega } => {
                let xv = self.val(*x).data();
                with_grad!(*x, |gx| {
                    for ((o, gi), xi) in gx.iter_mut().zip(g).zip(xv) {
                        *o += gi * omega * (omega * xi).cos();
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.val(*x).data();
                with_grad!(*x, |gx| {
                    for ((o, gi), xi) in gx.iter_mut().zip(g).zip(xv) {
                        if *xi > 0.0 {
                            *o += gi;
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.val(*x).data();
                with_grad!(*x, |gx| {
                    for ((o, gi), xi) in gx.iter_mut().zip(g).zip(xv) {
                        *o += gi * gelu_derivative(*xi);
                    }
                });
            }
            Op::Add(a, b) => {
                with_grad!(*a, |ga| add_into(ga, g));
                with_grad!(*b, |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                with_grad!(*a, |ga| add_into(ga, g));
                with_grad!(*b, |gb| {
                    for (o, gi) in gb.iter_mut().zip(g) {
                        *o -= gi;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a).data(), self.val(*b).data());
                with_grad!(*a, |ga| {
                    for ((o, gi), q) in ga.iter_mut().zip(g).zip(bv) {
                        *o += gi * q;
                    }
                });
                with_grad!(*b, |gb| {
                    for ((o, gi), p) in gb.iter_mut().zip(g).zip(av) {
                        *o += gi * p;
                    }
                });
            }
            Op::ScaleShift { x, scale, .. } => {
                with_grad!(*x, |gx| {
                    for (o, gi) in gx.iter_mut().zip(g) {
                        *o += scale * gi;
                    }
                });
            }
            Op::ConcatCols(a, b) => {
                let (ca, cb) = (nodes[a.0].shape[1], nodes[b.0].shape[1]);
                let c = ca + cb;
                with_grad!(*a, |ga| {
                    for (dst, src) in ga.chunks_exact_mut(ca).zip(g.chunks_exact(c)) {
                        add_into(dst, &src[..ca]);
                    }
                });
                with_grad!(*b, |gb| {
                    for (dst, src) in gb.chunks_exact_mut(cb).zip(g.chunks_exact(c)) {
                        add_into(dst, &src[ca..]);
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let c = nodes[x.0].shape[1];
                let len = nodes[i].shape[1];
                with_grad!(*x, |gx| {
                    for (dst, src) in gx.chunks_exact_mut(c).zip(g.chunks_exact(len)) {
                        add_into(&mut dst[*start..start + len], src);
                    }
                });
            }
            Op::Reshape(x) => with_grad!(*x, |gx| add_into(gx, g)),
            Op::RepeatRows { x, counts } => {
                let c = nodes[x.0].shape[1];
                with_grad!(*x, |gx| {
                    let mut src = g.chunks_exact(c);
                    for (dst, &k) in gx.chunks_exact_mut(c).zip(counts) {
                        for _ in 0..k {
                            add_into(dst, src.next().expect("row count"));
                        }
                    }
                });
            }
            Op::TileRows { x, .. } => {
                let len = numel(&nodes[x.0].shape);
                with_grad!(*x, |gx| {
                    for block in g.chunks_exact(len.max(1)) {
                        add_into(gx, block);
                    }
                });
            }
            Op::LogSumExp(x) => {
                let t = self.val(*x);
                let out = self.val(NodeId(i)).data();
                let k = t.cols();
                with_grad!(*x, |gx| {
                    for (r, (dst, row)) in gx.chunks_exact_mut(k).zip(t.data().chunks_exact(k)).enumerate() {
                        for (o, v) in dst.iter_mut().zip(row) {
                            *o += g[r] * (v - out[r]).exp();
                        }
                    }
                });
            }
            Op::LogMeanExpOffset { x, .. } => {
                let t = self.val(*x);
                let out = self.val(NodeId(i)).data();
                let k = t.cols();
                with_grad!(*x, |gx| {
                    for (r, (dst, row)) in gx.chunks_exact_mut(k).zip(t.data().chunks_exact(k)).enumerate() {
                        for (o, v) in dst.iter_mut().zip(row) {
                            *o += g[r] * (v - out[r]).exp() / k as f64;
                        }
                    }
                });
            }
            Op::Sum(x) => with_grad!(*x, |gx| {
                for o in gx.iter_mut() {
                    *o += g[0];
                }
            }),
            Op::Mean(x) => with_grad!(*x, |gx| {
                let s = g[0] / gx.len() as f64;
                for o in gx.iter_mut() {
                    *o += s;
                }
            }),
            Op::SquaredError(a, b) => {
                let (av, bv) = (self.val(*a).data(), self.val(*b).data());
                let s = 2.0 * g[0] / av.len() as f64;
                with_grad!(*a, |ga| {
                    for ((o, p), q) in ga.iter_mut().zip(av).zip(bv) {
                        *o += s * (p - q);
                    }
                });
                with_grad!(*b, |gb| {
                    for ((o, p), q) in gb.iter_mut().zip(av).zip(bv) {
                        *o -= s * (p - q);
                    }
                });
            }
            Op::GaussianLogpdf { x, mean, var } => {
                let (xv, mv) = (self.val(*x).data(), self.val(*mean).data());
                with_grad!(*x, |gx| {
                    for ((o, p), q) in gx.iter_mut().zip(xv).zip(mv) {
                        *o -= g[0] * (p - q) / var;
                    }
                });
                with_grad!(*mean, |gm| {
                    for ((o, p), q) in gm.iter_mut().zip(xv).zip(mv) {
                        *o += g[0] * (p - q) / var;
                    }
                });
            }
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data().iter().zip(b.data()).map(|(p, q)| f(*p, *q)).collect()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (o, v) in dst.iter_mut().zip(src) {
        *o += v;
    }
}

/// `m + ln sum exp(x - m)` with `m = max x`.
pub fn logsumexp_row(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// `ln(c + mean exp x)`. When no entry exceeds `ln c` the result is formed as
/// `ln c + ln_1p(..)`, so it never rounds below `ln c`; otherwise it is shifted
/// by `max x`, which is exact for all-zero input.
pub(crate) fn log_mean_exp_offset_row(row: &[f64], c: f64) -> f64 {
    let k = row.len() as f64;
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if c > 0.0 {
        let lc = c.ln();
        if m <= lc {
            let s: f64 = row.iter().map(|v| (v - lc).exp()).sum();
            return lc + (s / k).ln_1p();
        }
        let s: f64 = row.iter().map(|v| (v - m).exp()).sum();
        return m + (c * (-m).exp() + s / k).ln();
    }
    let s: f64 = row.iter().map(|v| (v - m).exp()).sum();
    m + (s / k).ln()
}

/// `x0 + sum(x_i - x0) / n`; exact for constant input.
pub(crate) fn shifted_mean(xs: &[f64]) -> f64 {
    let x0 = xs[0];
    x0 + xs.iter().map(|v| v - x0).sum::<f64>() / xs.len() as f64
}
