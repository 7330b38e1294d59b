use std::collections::{BTreeMap, HashMap};

use super::{Tensor, TensorError};

/// Index of a node inside a [`Graph`]. Parents always have smaller ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise nonlinearities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Silu,
    Sigmoid,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Silu => x * sigmoid(x),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input(String),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Affine { x: NodeId, scale: f64, shift: f64 },
    Pointwise(NodeId, Activation),
    Sum(NodeId),
    Mean(NodeId),
    Concat(Vec<NodeId>),
    Gather { table: NodeId, index: NodeId },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Affine { .. } => "affine",
            Op::Pointwise(..) => "pointwise",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Concat(_) => "concat",
            Op::Gather { .. } => "gather",
        }
    }

    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Input(_) => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Affine { x, .. } | Op::Pointwise(x, _) | Op::Sum(x) | Op::Mean(x) => vec![*x],
            Op::Concat(parts) => parts.clone(),
            // The index operand never carries gradient.
            Op::Gather { table, .. } => vec![*table],
        }
    }
}

/// Named bindings for the graph inputs.
pub type Feed<'a> = HashMap<&'a str, &'a Tensor>;

/// Gradients keyed by input name, for every bound input with `requires_grad`.
pub type Gradients = BTreeMap<String, Tensor>;

struct Evaluated {
    values: Vec<Tensor>,
    needs_grad: Vec<bool>,
    leaf_grad: Vec<bool>,
}

/// Topologically ordered computation graph over the primitive set.
#[derive(Default)]
pub struct Graph {
    ops: Vec<Op>,
    inputs: HashMap<String, NodeId>,
    outputs: BTreeMap<String, NodeId>,
    state: Option<Evaluated>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op) -> NodeId {
        self.state = None;
        self.ops.push(op);
        NodeId(self.ops.len() - 1)
    }

    /// Declares (or returns the existing) named input.
    pub fn input(&mut self, name: &str) -> NodeId {
        if let Some(&id) = self.inputs.get(name) {
            return id;
        }
        let id = self.push(Op::Input(name.to_string()));
        self.inputs.insert(name.to_string(), id);
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> NodeId {
        self.push(Op::Affine { x, scale, shift })
    }

    pub fn pointwise(&mut self, x: NodeId, act: Activation) -> NodeId {
        self.push(Op::Pointwise(x, act))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum(x))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Mean(x))
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        self.push(Op::Concat(parts.to_vec()))
    }

    /// Selects rows of a `[rows, d]` table by integer-valued indices.
    pub fn gather(&mut self, table: NodeId, index: NodeId) -> NodeId {
        self.push(Op::Gather { table, index })
    }

    pub fn output(&mut self, name: &str, node: NodeId) {
        self.outputs.insert(name.to_string(), node);
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn output_names(&self) -> impl Iterator<Item = &str> {
        self.outputs.keys().map(String::as_str)
    }

    pub fn input_names(&self) -> impl Iterator<Item = &str> {
        self.inputs.keys().map(String::as_str)
    }

    /// Value of a node from the last forward pass.
    pub fn value(&self, node: NodeId) -> Option<&Tensor> {
        self.state.as_ref().map(|s| &s.values[node.0])
    }

    pub fn output_value(&self, name: &str) -> Option<&Tensor> {
        let id = *self.outputs.get(name)?;
        self.value(id)
    }

    /// Evaluates every node, keeping activations for a later [`Graph::backward`].
    pub fn forward_eval(&mut self, feed: &Feed<'_>) -> Result<BTreeMap<String, Tensor>, TensorError> {
        for name in feed.keys() {
            if !self.inputs.contains_key(*name) {
                return Err(TensorError::UnknownInput(name.to_string()));
            }
        }
        self.state = None;
        let n = self.ops.len();
        let mut values: Vec<Tensor> = Vec::with_capacity(n);
        let mut needs_grad = vec![false; n];
        let mut leaf_grad = vec![false; n];
        for (i, op) in self.ops.iter().enumerate() {
            let v = match op {
                Op::Input(name) => {
                    let t = feed
                        .get(name.as_str())
                        .ok_or_else(|| TensorError::MissingInput(name.clone()))?;
                    leaf_grad[i] = t.requires_grad();
                    needs_grad[i] = t.requires_grad();
                    t.detach()
                }
                _ => {
                    needs_grad[i] = op.parents().iter().any(|p| needs_grad[p.0]);
                    eval_op(i, op, &values)?
                }
            };
            if !v.is_finite() {
                return Err(TensorError::NonFinite {
                    node: i,
                    op: op.name(),
                });
            }
            values.push(v);
        }
        let out = self
            .outputs
            .iter()
            .map(|(k, id)| (k.clone(), values[id.0].clone()))
            .collect();
        self.state = Some(Evaluated {
            values,
            needs_grad,
            leaf_grad,
        });
        Ok(out)
    }

    /// Propagates seed gradients from named outputs back to the inputs.
    ///
    /// Only inputs bound with `requires_grad` receive gradients; detached
    /// inputs stop propagation. Seeds on several outputs accumulate.
    pub fn backward(&self, seeds: &BTreeMap<String, Tensor>) -> Result<Gradients, TensorError> {
        let state = self.state.as_ref().ok_or(TensorError::BackwardBeforeForward)?;
        let n = self.ops.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        for (name, seed) in seeds {
            let id = *self
                .outputs
                .get(name)
                .ok_or_else(|| TensorError::NotAnOutput(name.clone()))?;
            let shape = state.values[id.0].shape();
            if seed.shape() != shape {
                return Err(TensorError::SeedShape {
                    name: name.clone(),
                    expected: shape.to_vec(),
                    got: seed.shape().to_vec(),
                });
            }
            accumulate(&mut grads[id.0], seed.data());
        }

        for i in (0..n).rev() {
            if !state.needs_grad[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Input(_) = self.ops[i] {
                grads[i] = Some(g);
                continue;
            }
            backprop_op(&self.ops[i], &g, &state.values, &state.needs_grad, &mut grads);
            for p in self.ops[i].parents() {
                if let Some(pg) = &grads[p.0] {
                    if pg.iter().any(|v| !v.is_finite()) {
                        return Err(TensorError::NonFinite {
                            node: p.0,
                            op: self.ops[p.0].name(),
                        });
                    }
                }
            }
        }

        let mut out = Gradients::new();
        for (name, id) in &self.inputs {
            if !state.leaf_grad[id.0] {
                continue;
            }
            let shape = state.values[id.0].shape();
            let data = grads[id.0]
                .take()
                .unwrap_or_else(|| vec![0.0; state.values[id.0].len()]);
            out.insert(name.clone(), Tensor::from_vec(shape, data));
        }
        Ok(out)
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}

/// Output shape for a suffix broadcast between `a` and `b`, if compatible.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let la: usize = a.iter().product();
    let lb: usize = b.iter().product();
    if a == b || lb == 1 {
        return Some(a.to_vec());
    }
    if la == 1 {
        return Some(b.to_vec());
    }
    if b.len() <= a.len() && a.ends_with(b) {
        return Some(a.to_vec());
    }
    if a.len() <= b.len() && b.ends_with(a) {
        return Some(b.to_vec());
    }
    None
}

fn mismatch(node: usize, op: &Op, detail: String) -> TensorError {
    TensorError::ShapeMismatch {
        node,
        op: op.name(),
        detail,
    }
}

/// Interprets matmul operand shapes as `[m, k] x [k, n]`, with 1-D operands
/// promoted to a row (left) or column (right) vector.
fn matmul_dims(a: &[usize], b: &[usize]) -> Option<(usize, usize, usize, Vec<usize>)> {
    let (m, k1, a_vec) = match a {
        [k] => (1, *k, true),
        [m, k] => (*m, *k, false),
        _ => return None,
    };
    let (k2, n, b_vec) = match b {
        [k] => (*k, 1, true),
        [k, n] => (*k, *n, false),
        _ => return None,
    };
    if k1 != k2 {
        return None;
    }
    let shape = match (a_vec, b_vec) {
        (true, true) => vec![1],
        (true, false) => vec![n],
        (false, true) => vec![m],
        (false, false) => vec![m, n],
    };
    Some((m, k1, n, shape))
}

fn eval_op(i: usize, op: &Op, values: &[Tensor]) -> Result<Tensor, TensorError> {
    Ok(match op {
        Op::Input(_) => unreachable!(),
        Op::MatMul(a, b) => {
            let (a, b) = (&values[a.0], &values[b.0]);
            let (m, k, n, shape) = matmul_dims(a.shape(), b.shape()).ok_or_else(|| {
                mismatch(i, op, format!("{:?} x {:?}", a.shape(), b.shape()))
            })?;
            let (ad, bd) = (a.data(), b.data());
            let mut out = vec![0.0; m * n];
            for r in 0..m {
                let orow = &mut out[r * n..(r + 1) * n];
                for p in 0..k {
                    let av = ad[r * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &bd[p * n..(p + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
            Tensor::from_vec(&shape, out)
        }
        Op::Add(a, b) | Op::Mul(a, b) => {
            let (a, b) = (&values[a.0], &values[b.0]);
            let shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| {
                mismatch(i, op, format!("cannot broadcast {:?} with {:?}", a.shape(), b.shape()))
            })?;
            let len: usize = shape.iter().product();
            let (ad, bd) = (a.data(), b.data());
            let (la, lb) = (ad.len(), bd.len());
            let is_add = matches!(op, Op::Add(..));
            let out = (0..len)
                .map(|j| {
                    let (x, y) = (ad[j % la], bd[j % lb]);
                    if is_add {
                        x + y
                    } else {
                        x * y
                    }
                })
                .collect();
            Tensor::from_vec(&shape, out)
        }
        Op::Affine { x, scale, shift } => values[x.0].map(|v| scale * v + shift),
        Op::Pointwise(x, act) => values[x.0].map(|v| act.apply(v)),
        Op::Sum(x) => Tensor::scalar(values[x.0].data().iter().sum()),
        Op::Mean(x) => {
            let v = &values[x.0];
            Tensor::scalar(v.data().iter().sum::<f64>() / v.len() as f64)
        }
        Op::Concat(parts) => {
            let first = &values[parts[0].0];
            let lead = &first.shape()[..first.shape().len() - 1];
            let rows: usize = lead.iter().product();
            let mut width = 0;
            for p in parts {
                let s = values[p.0].shape();
                if &s[..s.len() - 1] != lead {
                    return Err(mismatch(
                        i,
                        op,
                        format!("leading dims {:?} vs {:?}", &s[..s.len() - 1], lead),
                    ));
                }
                width += s[s.len() - 1];
            }
            let mut out = Vec::with_capacity(rows * width);
            for r in 0..rows {
                for p in parts {
                    let v = &values[p.0];
                    let c = v.cols();
                    out.extend_from_slice(&v.data()[r * c..(r + 1) * c]);
                }
            }
            let mut shape = lead.to_vec();
            shape.push(width);
            Tensor::from_vec(&shape, out)
        }
        Op::Gather { table, index } => {
            let (t, idx) = (&values[table.0], &values[index.0]);
            if t.shape().len() != 2 {
                return Err(mismatch(i, op, format!("table must be 2-D, got {:?}", t.shape())));
            }
            let (rows, d) = (t.shape()[0], t.shape()[1]);
            let mut out = Vec::with_capacity(idx.len() * d);
            for &raw in idx.data() {
                let r = raw as usize;
                if raw < 0.0 || raw.fract() != 0.0 || r >= rows {
                    return Err(TensorError::IndexOutOfRange {
                        node: i,
                        index: raw,
                        rows,
                    });
                }
                out.extend_from_slice(t.row(r));
            }
            let mut shape = idx.shape().to_vec();
            shape.push(d);
            Tensor::from_vec(&shape, out)
        }
    })
}

fn backprop_op(
    op: &Op,
    g: &[f64],
    values: &[Tensor],
    needs_grad: &[bool],
    grads: &mut [Option<Vec<f64>>],
) {
    match op {
        Op::Input(_) => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (&values[a.0], &values[b.0]);
            let (m, k, n, _) = matmul_dims(av.shape(), bv.shape()).unwrap();
            let (ad, bd) = (av.data(), bv.data());
            if needs_grad[a.0] {
                // dA = G B^T
                let mut da = vec![0.0; m * k];
                for r in 0..m {
                    let grow = &g[r * n..(r + 1) * n];
                    for p in 0..k {
                        let brow = &bd[p * n..(p + 1) * n];
                        da[r * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                    }
                }
                accumulate(&mut grads[a.0], &da);
            }
            if needs_grad[b.0] {
                // dB = A^T G
                let mut db = vec![0.0; k * n];
                for r in 0..m {
                    let grow = &g[r * n..(r + 1) * n];
                    for p in 0..k {
                        let av = ad[r * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        for (o, &gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                            *o += av * gv;
                        }
                    }
                }
                accumulate(&mut grads[b.0], &db);
            }
        }
        Op::Add(a, b) | Op::Mul(a, b) => {
            let (ad, bd) = (values[a.0].data(), values[b.0].data());
            let (la, lb) = (ad.len(), bd.len());
            let is_add = matches!(op, Op::Add(..));
            if needs_grad[a.0] {
                let mut da = vec![0.0; la];
                for (j, &gv) in g.iter().enumerate() {
                    da[j % la] += if is_add { gv } else { gv * bd[j % lb] };
                }
                accumulate(&mut grads[a.0], &da);
            }
            if needs_grad[b.0] {
                let mut db = vec![0.0; lb];
                for (j, &gv) in g.iter().enumerate() {
                    db[j % lb] += if is_add { gv } else { gv * ad[j % la] };
                }
                accumulate(&mut grads[b.0], &db);
            }
        }
        Op::Affine { x, scale, .. } => {
            if needs_grad[x.0] {
                let dx: Vec<f64> = g.iter().map(|v| v * scale).collect();
                accumulate(&mut grads[x.0], &dx);
            }
        }
        Op::Pointwise(x, act) => {
            if needs_grad[x.0] {
                let xs = values[x.0].data();
                // The output value is recomputed; cheaper than indexing the child.
                let dx: Vec<f64> = g
                    .iter()
                    .zip(xs)
                    .map(|(&gv, &xv)| gv * act.derivative(xv, act.apply(xv)))
                    .collect();
                accumulate(&mut grads[x.0], &dx);
            }
        }
        Op::Sum(x) | Op::Mean(x) => {
            if needs_grad[x.0] {
                let len = values[x.0].len();
                let scale = if matches!(op, Op::Mean(_)) {
                    1.0 / len as f64
                } else {
                    1.0
                };
                accumulate(&mut grads[x.0], &vec![g[0] * scale; len]);
            }
        }
        Op::Concat(parts) => {
            let width: usize = parts.iter().map(|p| values[p.0].cols()).sum();
            let rows = g.len() / width;
            let mut offset = 0;
            for p in parts {
                let c = values[p.0].cols();
                if needs_grad[p.0] {
                    let mut dp = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        dp.extend_from_slice(&g[r * width + offset..r * width + offset + c]);
                    }
                    accumulate(&mut grads[p.0], &dp);
                }
                offset += c;
            }
        }
        Op::Gather { table, index } => {
            if needs_grad[table.0] {
                let t = &values[table.0];
                let d = t.cols();
                let mut dt = vec![0.0; t.len()];
                for (j, &raw) in values[index.0].data().iter().enumerate() {
                    let r = raw as usize;
                    for (o, &gv) in dt[r * d..(r + 1) * d].iter_mut().zip(&g[j * d..(j + 1) * d]) {
                        *o += gv;
                    }
                }
                accumulate(&mut grads[table.0], &dt);
            }
        }
    }
}
