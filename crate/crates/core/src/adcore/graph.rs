use std::collections::BTreeMap;

use super::tensor::{matmul_raw, transpose_raw, Tensor};
use super::AdError;

/// Named input values for one forward evaluation.
pub type Bindings = BTreeMap<String, Tensor>;

/// Gradients keyed by input name.
pub type Gradients = BTreeMap<String, Tensor>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Reduction extent for `sum` / `mean`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Every element, producing a rank-0 scalar.
    All,
    /// Down the rows, producing a `1 x cols` row vector.
    Rows,
    /// Across the columns, producing a `rows x 1` column vector.
    Cols,
}

#[derive(Debug, Clone)]
enum Op {
    Input { name: String, requires_grad: bool },
    Constant(Tensor),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Offset(NodeId, f64),
    BroadcastAs(NodeId, NodeId),
    Sum(NodeId, Axis),
    Mean(NodeId, Axis),
    Relu(NodeId),
    Square(NodeId),
    SqrtEps(NodeId, f64),
    MaxConst(NodeId, f64),
    Softplus(NodeId),
    ConcatRows(Vec<NodeId>),
    SliceRows(NodeId, usize, usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Constant(_) => "constant",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "subtract",
            Op::Mul(..) => "multiply",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::BroadcastAs(..) => "broadcast",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Relu(_) => "relu",
            Op::Square(_) => "square",
            Op::SqrtEps(..) => "sqrt_eps",
            Op::MaxConst(..) => "max_const",
            Op::Softplus(_) => "softplus",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceRows(..) => "slice_rows",
        }
    }

    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Input { .. } | Op::Constant(_) => Vec::new(),
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            // The shape donor of a broadcast receives no gradient.
            Op::BroadcastAs(a, _) => vec![*a],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Offset(a, _)
            | Op::Sum(a, _)
            | Op::Mean(a, _)
            | Op::Relu(a)
            | Op::Square(a)
            | Op::SqrtEps(a, _)
            | Op::MaxConst(a, _)
            | Op::Softplus(a)
            | Op::SliceRows(a, _, _) => vec![*a],
            Op::ConcatRows(parts) => parts.clone(),
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    needs_grad: bool,
}

/// A recorded computation over dense tensors with reverse-mode differentiation.
///
/// Nodes are appended in construction order, which is also the topological
/// order used by [`Graph::forward`] and (reversed) by [`Graph::backward`].
/// The same graph can be re-evaluated with different bindings, which is what
/// the finite-difference checker relies on.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    inputs: BTreeMap<String, NodeId>,
    values: Vec<Tensor>,
    output: Option<NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op) -> NodeId {
        let needs_grad = match &op {
            Op::Input { requires_grad, .. } => *requires_grad,
            Op::Constant(_) => false,
            other => other.parents().iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node { op, needs_grad });
        // Structural change invalidates any previous evaluation.
        self.values.clear();
        NodeId(self.nodes.len() - 1)
    }

    /// Declares a named input. Declaring the same name twice returns the
    /// existing node.
    pub fn input(&mut self, name: impl Into<String>, requires_grad: bool) -> NodeId {
        let name = name.into();
        if let Some(&id) = self.inputs.get(&name) {
            return id;
        }
        let id = self.push(Op::Input { name: name.clone(), requires_grad });
        self.inputs.insert(name, id);
        id
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant(value))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Transpose(a))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        self.push(Op::Scale(a, factor))
    }

    pub fn offset(&mut self, a: NodeId, shift: f64) -> NodeId {
        self.push(Op::Offset(a, shift))
    }

    /// Repeats `a` along its unit dimensions to match the shape of `like`.
    pub fn broadcast_as(&mut self, a: NodeId, like: NodeId) -> NodeId {
        self.push(Op::BroadcastAs(a, like))
    }

    pub fn sum(&mut self, a: NodeId, axis: Axis) -> NodeId {
        self.push(Op::Sum(a, axis))
    }

    pub fn mean(&mut self, a: NodeId, axis: Axis) -> NodeId {
        self.push(Op::Mean(a, axis))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Relu(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Square(a))
    }

    /// `sqrt(a + eps)`; `eps` must be positive.
    pub fn sqrt_eps(&mut self, a: NodeId, eps: f64) -> NodeId {
        self.push(Op::SqrtEps(a, eps))
    }

    /// Elementwise `max(floor, a)` with subgradient 0 at the kink.
    pub fn max_const(&mut self, a: NodeId, floor: f64) -> NodeId {
        self.push(Op::MaxConst(a, floor))
    }

    /// Elementwise `ln(1 + exp(a))`.
    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Softplus(a))
    }

    pub fn concat_rows(&mut self, parts: Vec<NodeId>) -> NodeId {
        self.push(Op::ConcatRows(parts))
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        self.push(Op::SliceRows(a, start, len))
    }

    /// Fixes which node [`Graph::forward`] returns; defaults to the last node.
    pub fn set_output(&mut self, id: NodeId) {
        self.output = Some(id);
    }

    pub fn output(&self) -> Option<NodeId> {
        self.output.or_else(|| self.nodes.len().checked_sub(1).map(NodeId))
    }

    /// Names of inputs declared with `requires_grad`.
    pub fn trainable_inputs(&self) -> Vec<String> {
        self.inputs
            .iter()
            .filter(|(_, id)| self.nodes[id.0].needs_grad)
            .map(|(name, _)| name.clone())
            .collect()
    }

    pub fn input_names(&self) -> impl Iterator<Item = &str> {
        self.inputs.keys().map(String::as_str)
    }

    /// Value of a node after the most recent forward pass.
    pub fn value(&self, id: NodeId) -> Option<&Tensor> {
        self.values.get(id.0)
    }

    pub fn has_values(&self) -> bool {
        !self.nodes.is_empty() && self.values.len() == self.nodes.len()
    }

    /// Evaluates every node in recording order and returns the output value.
    pub fn forward(&mut self, inputs: &Bindings) -> Result<Tensor, AdError> {
        let out = self.output().ok_or(AdError::EmptyGraph)?;
        self.values.clear();
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            let v = eval(&node.op, idx, &values, inputs)?;
            if !v.is_finite() {
                return Err(AdError::NumericInstability { node: idx, op: node.op.name() });
            }
            values.push(v);
        }
        let result = values[out.0].clone();
        self.values = values;
        Ok(result)
    }

    /// Propagates `seed` from the output node back to every trainable input.
    pub fn backward(&self, seed: &Tensor) -> Result<Gradients, AdError> {
        if !self.has_values() {
            return Err(AdError::BackwardBeforeForward);
        }
        let out = self.output().ok_or(AdError::EmptyGraph)?;
        let out_shape = self.values[out.0].shape();
        if seed.shape() != out_shape && seed.dims2() != self.values[out.0].dims2() {
            return Err(AdError::Shape {
                op: "backward",
                detail: format!("seed shape {:?} does not match output shape {:?}", seed.shape(), out_shape),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Tensor::from_parts(out_shape.to_vec(), seed.values().to_vec()));

        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(upstream) = grads[idx].take() else { continue };
            for (parent, contrib) in self.local_grads(idx, &node.op, &upstream) {
                if !self.nodes[parent.0].needs_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
            // Inputs keep their accumulated gradient.
            if matches!(node.op, Op::Input { .. }) {
                grads[idx] = Some(upstream);
            }
        }

        let mut result = Gradients::new();
        for (name, id) in &self.inputs {
            if !self.nodes[id.0].needs_grad {
                continue;
            }
            let g = grads[id.0]
                .take()
                .unwrap_or_else(|| Tensor::zeros(self.values[id.0].shape()));
            if !g.is_finite() {
                return Err(AdError::NumericInstability { node: id.0, op: "backward" });
            }
            result.insert(name.clone(), g);
        }
        Ok(result)
    }

    fn local_grads(&self, idx: usize, op: &Op, up: &Tensor) -> Vec<(NodeId, Tensor)> {
        let val = |id: &NodeId| &self.values[id.0];
        match op {
            Op::Input { .. } | Op::Constant(_) => Vec::new(),
            Op::MatMul(a, b) => {
                let (av, bv) = (val(a), val(b));
                let (n, k) = av.dims2();
                let m = bv.cols();
                let bt = transpose_raw(bv.values(), k, m);
                let at = transpose_raw(av.values(), n, k);
                let da = matmul_raw(up.values(), &bt, n, m, k);
                let db = matmul_raw(&at, up.values(), k, n, m);
                vec![
                    (*a, Tensor::from_parts(av.shape().to_vec(), da)),
                    (*b, Tensor::from_parts(bv.shape().to_vec(), db)),
                ]
            }
            Op::Transpose(a) => {
                let (r, c) = up.dims2();
                let t = transpose_raw(up.values(), r, c);
                vec![(*a, Tensor::from_parts(val(a).shape().to_vec(), t))]
            }
            Op::Add(a, b) => vec![(*a, up.clone()), (*b, up.clone())],
            Op::Sub(a, b) => vec![(*a, up.clone()), (*b, up.map(|g| -g))],
            Op::Mul(a, b) => vec![
                (*a, up.zip(val(b), |g, y| g * y)),
                (*b, up.zip(val(a), |g, x| g * x)),
            ],
            Op::Scale(a, f) => vec![(*a, up.map(|g| g * f))],
            Op::Offset(a, _) => vec![(*a, up.clone())],
            Op::BroadcastAs(a, _) => {
                let src = val(a);
                let (sr, sc) = src.dims2();
                let (r, c) = up.dims2();
                let mut acc = vec![0.0; sr * sc];
                for i in 0..r {
                    for j in 0..c {
                        acc[(i % sr) * sc + (j % sc)] += up.values()[i * c + j];
                    }
                }
                vec![(*a, Tensor::from_parts(src.shape().to_vec(), acc))]
            }
            Op::Sum(a, axis) | Op::Mean(a, axis) => {
                let src = val(a);
                let (r, c) = src.dims2();
                let denom = match (op, axis) {
                    (Op::Sum(..), _) => 1.0,
                    (_, Axis::All) => (r * c) as f64,
                    (_, Axis::Rows) => r as f64,
                    (_, Axis::Cols) => c as f64,
                };
                let g = up.values();
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        let u = match axis {
                            Axis::All => g[0],
                            Axis::Rows => g[j],
                            Axis::Cols => g[i],
                        };
                        out[i * c + j] = u / denom;
                    }
                }
                vec![(*a, Tensor::from_parts(src.shape().to_vec(), out))]
            }
            Op::Relu(a) => vec![(*a, up.zip(val(a), |g, x| if x > 0.0 { g } else { 0.0 }))],
            Op::MaxConst(a, floor) => {
                vec![(*a, up.zip(val(a), |g, x| if x > *floor { g } else { 0.0 }))]
            }
            Op::Square(a) => vec![(*a, up.zip(val(a), |g, x| 2.0 * x * g))],
            Op::SqrtEps(a, _) => {
                let y = &self.values[idx];
                vec![(*a, up.zip(y, |g, s| g / (2.0 * s)))]
            }
            Op::Softplus(a) => vec![(*a, up.zip(val(a), |g, x| g * sigmoid(x)))],
            Op::ConcatRows(parts) => {
                let cols = up.cols();
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for p in parts {
                    let pv = val(p);
                    let n = pv.rows() * cols;
                    let slice = up.values()[offset..offset + n].to_vec();
                    offset += n;
                    out.push((*p, Tensor::from_parts(pv.shape().to_vec(), slice)));
                }
                out
            }
            Op::SliceRows(a, start, _) => {
                let src = val(a);
                let cols = src.cols();
                let mut g = vec![0.0; src.len()];
                g[start * cols..start * cols + up.len()].copy_from_slice(up.values());
                vec![(*a, Tensor::from_parts(src.shape().to_vec(), g))]
            }
        }
    }

    /// Side of the kink each hinge element sits on after the last forward
    /// pass: `-1` below, `0` exactly at, `1` above.
    pub fn hinge_signature(&self) -> Vec<i8> {
        let mut sig = Vec::new();
        if !self.has_values() {
            return sig;
        }
        for node in &self.nodes {
            let (src, floor) = match node.op {
                Op::Relu(a) => (a, 0.0),
                Op::MaxConst(a, f) => (a, f),
                _ => continue,
            };
            sig.extend(self.values[src.0].values().iter().map(|&x| {
                if x > floor {
                    1
                } else if x < floor {
                    -1
                } else {
                    0
                }
            }));
        }
        sig
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

fn softplus_value(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn shape_err(op: &'static str, detail: String) -> AdError {
    AdError::Shape { op, detail }
}

fn same_dims(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), AdError> {
    if a.dims2() != b.dims2() {
        return Err(shape_err(op, format!("operands {:?} and {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn eval(op: &Op, idx: usize, values: &[Tensor], inputs: &Bindings) -> Result<Tensor, AdError> {
    let v = |id: &NodeId| &values[id.0];
    Ok(match op {
        Op::Input { name, .. } => inputs
            .get(name)
            .cloned()
            .ok_or_else(|| AdError::MissingInput(name.clone()))?,
        Op::Constant(t) => t.clone(),
        Op::MatMul(a, b) => {
            let (av, bv) = (v(a), v(b));
            if av.shape().len() != 2 || bv.shape().len() != 2 || av.cols() != bv.rows() {
                return Err(shape_err(
                    "matmul",
                    format!("cannot multiply {:?} by {:?} (node {idx})", av.shape(), bv.shape()),
                ));
            }
            let (n, k) = av.dims2();
            let m = bv.cols();
            Tensor::from_parts(vec![n, m], matmul_raw(av.values(), bv.values(), n, k, m))
        }
        Op::Transpose(a) => {
            let av = v(a);
            let (r, c) = av.dims2();
            Tensor::from_parts(vec![c, r], transpose_raw(av.values(), r, c))
        }
        Op::Add(a, b) => {
            same_dims("add", v(a), v(b))?;
            v(a).zip(v(b), |x, y| x + y)
        }
        Op::Sub(a, b) => {
            same_dims("subtract", v(a), v(b))?;
            v(a).zip(v(b), |x, y| x - y)
        }
        Op::Mul(a, b) => {
            same_dims("multiply", v(a), v(b))?;
            v(a).zip(v(b), |x, y| x * y)
        }
        Op::Scale(a, f) => v(a).map(|x| x * f),
        Op::Offset(a, s) => v(a).map(|x| x + s),
        Op::BroadcastAs(a, like) => {
            let (src, target) = (v(a), v(like));
            let (sr, sc) = src.dims2();
            let (r, c) = target.dims2();
            if (sr != r && sr != 1) || (sc != c && sc != 1) {
                return Err(shape_err(
                    "broadcast",
                    format!("cannot broadcast {:?} to {:?}", src.shape(), target.shape()),
                ));
            }
            let mut out = Vec::with_capacity(r * c);
            for i in 0..r {
                for j in 0..c {
                    out.push(src.values()[(i % sr) * sc + (j % sc)]);
                }
            }
            Tensor::from_parts(target.shape().to_vec(), out)
        }
        Op::Sum(a, axis) => reduce(v(a), *axis, false),
        Op::Mean(a, axis) => {
            if v(a).is_empty() {
                return Err(shape_err("mean", "empty operand".into()));
            }
            reduce(v(a), *axis, true)
        }
        Op::Relu(a) => v(a).map(|x| x.max(0.0)),
        Op::MaxConst(a, floor) => v(a).map(|x| x.max(*floor)),
        Op::Square(a) => v(a).map(|x| x * x),
        Op::SqrtEps(a, eps) => v(a).map(|x| (x + eps).sqrt()),
        Op::Softplus(a) => v(a).map(softplus_value),
        Op::ConcatRows(parts) => {
            let Some(first) = parts.first() else {
                return Err(shape_err("concat_rows", "no operands".into()));
            };
            let cols = v(first).cols();
            let mut rows = 0;
            let mut out = Vec::new();
            for p in parts {
                let pv = v(p);
                if pv.cols() != cols {
                    return Err(shape_err(
                        "concat_rows",
                        format!("column mismatch {:?} vs {cols} columns", pv.shape()),
                    ));
                }
                rows += pv.rows();
                out.extend_from_slice(pv.values());
            }
            Tensor::from_parts(vec![rows, cols], out)
        }
        Op::SliceRows(a, start, len) => {
            let src = v(a);
            let (r, c) = src.dims2();
            if src.shape().len() != 2 || start + len > r || *len == 0 {
                return Err(shape_err(
                    "slice_rows",
                    format!("rows {start}..{} out of range for {:?}", start + len, src.shape()),
                ));
            }
            Tensor::from_parts(vec![*len, c], src.values()[start * c..(start + len) * c].to_vec())
        }
    })
}

fn reduce(t: &Tensor, axis: Axis, mean: bool) -> Tensor {
    let (r, c) = t.dims2();
    let x = t.values();
    match axis {
        Axis::All => {
            let s: f64 = x.iter().sum();
            Tensor::from_parts(Vec::new(), vec![if mean { s / (r * c) as f64 } else { s }])
        }
        Axis::Rows => {
            let mut out = vec![0.0; c];
            for i in 0..r {
                for j in 0..c {
                    out[j] += x[i * c + j];
                }
            }
            if mean {
                out.iter_mut().for_each(|o| *o /= r as f64);
            }
            Tensor::from_parts(vec![1, c], out)
        }
        Axis::Cols => {
            let out = (0..r)
                .map(|i| {
                    let s: f64 = x[i * c..(i + 1) * c].iter().sum();
                    if mean {
                        s / c as f64
                    } else {
                        s
                    }
                })
                .collect();
            Tensor::from_parts(vec![r, 1], out)
        }
    }
}
