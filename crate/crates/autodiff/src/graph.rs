use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{AutodiffError, Result};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    Gelu(NodeId),
    Clamp { x: NodeId, lo: f64, hi: f64 },
    Minimum(NodeId, NodeId),
    Maximum(NodeId, NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding { table: NodeId, ids: Vec<usize> },
    Concat { parts: Vec<NodeId>, axis: usize },
    Slice {
        x: NodeId,
        axis: usize,
        start: usize,
        len: usize,
    },
    Sum(NodeId),
    Mean(NodeId),
    Gather { x: NodeId, index: Vec<usize> },
    CausalMask(NodeId),
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias(..) => "add_bias",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softplus(_) => "softplus",
            Op::Gelu(_) => "gelu",
            Op::Clamp { .. } => "clamp",
            Op::Minimum(..) => "minimum",
            Op::Maximum(..) => "maximum",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Embedding { .. } => "embedding_lookup",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Gather { .. } => "gather",
            Op::CausalMask(_) => "causal_mask",
        }
    }

    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddBias(a, b)
            | Op::Minimum(a, b)
            | Op::Maximum(a, b) => vec![*a, *b],
            Op::Transpose(x)
            | Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Sigmoid(x)
            | Op::Softplus(x)
            | Op::Gelu(x)
            | Op::Softmax(x)
            | Op::LogSoftmax(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::CausalMask(x) => vec![*x],
            Op::Clamp { x, .. } | Op::Slice { x, .. } | Op::Gather { x, .. } => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Embedding { table, .. } => vec![*table],
            Op::Concat { parts, .. } => parts.clone(),
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// A tape of tensor nodes in creation (and therefore topological) order.
#[derive(Debug, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    rng: ChaCha8Rng,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new(0)
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().unwrap_or(&1)
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) || numel(shape) != len {
        return Err(AutodiffError::DataLength {
            shape: shape.to_vec(),
            len,
        });
    }
    Ok(())
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
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

fn row_max(row: &[f64]) -> f64 {
    row.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

fn parent_slot<'a>(up: &'a mut [Vec<f64>], nodes: &[Node], p: NodeId) -> &'a mut [f64] {
    let slot = &mut up[p.0];
    if slot.is_empty() {
        *slot = vec![0.0; nodes[p.0].data.len()];
    }
    slot.as_mut_slice()
}

impl Graph {
    pub fn new(seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn grad(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].grad
    }

    /// Scalar value of a single-element node.
    pub fn value(&self, id: NodeId) -> f64 {
        self.nodes[id.0].data[0]
    }

    pub fn op_tag(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.tag()
    }

    pub fn parents(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes[id.0].op.parents()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> NodeId {
        debug_assert_eq!(numel(&shape), data.len());
        let requires_grad = match &op {
            Op::Leaf => false,
            other => other
                .parents()
                .iter()
                .any(|p| self.nodes[p.0].requires_grad),
        };
        let grad = vec![0.0; data.len()];
        self.nodes.push(Node {
            shape,
            data,
            grad,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn leaf(&mut self, data: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<NodeId> {
        check_shape(shape, data.len())?;
        let id = self.push(shape.to_vec(), data, Op::Leaf);
        self.nodes[id.0].requires_grad = requires_grad;
        Ok(id)
    }

    /// Leaf that accumulates gradient.
    pub fn param(&mut self, data: Vec<f64>, shape: &[usize]) -> Result<NodeId> {
        self.leaf(data, shape, true)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, data: Vec<f64>, shape: &[usize]) -> Result<NodeId> {
        self.leaf(data, shape, false)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.push(vec![1], vec![v], Op::Leaf)
    }

    /// Trainable leaf filled from the graph's seeded normal generator.
    pub fn randn(&mut self, shape: &[usize], std: f64) -> Result<NodeId> {
        let n = numel(shape);
        let normal = Normal::new(0.0, std).map_err(|e| AutodiffError::InvalidArgument {
            op: "randn",
            msg: e.to_string(),
        })?;
        let data: Vec<f64> = (0..n).map(|_| normal.sample(&mut self.rng)).collect();
        self.param(data, shape)
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(AutodiffError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip(&mut self, op: Op, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Result<NodeId> {
        self.same_shape(op.tag(), a, b)?;
        let data = self.data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, data, op))
    }

    fn map(&mut self, op: Op, x: NodeId, f: impl Fn(f64) -> f64) -> NodeId {
        let data = self.data(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, data, op)
    }

    fn as_matrix(&self, op: &'static str, x: NodeId) -> Result<(usize, usize)> {
        match self.shape(x) {
            [r, c] => Ok((*r, *c)),
            s => Err(AutodiffError::InvalidArgument {
                op,
                msg: format!("expected a 2-d tensor, got shape {s:?}"),
            }),
        }
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.as_matrix("matmul", a)?;
        let (k2, n) = self.as_matrix("matmul", b)?;
        if k != k2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        {
            let (ad, bd) = (self.data(a), self.data(b));
            for i in 0..m {
                let row = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = ad[i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &bd[p * n..(p + 1) * n];
                    for (o, &bv) in row.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.as_matrix("transpose", x)?;
        let xd = self.data(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xd[i * c + j];
            }
        }
        Ok(self.push(vec![c, r], out, Op::Transpose(x)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip(Op::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip(Op::Sub(a, b), a, b, |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip(Op::Mul(a, b), a, b, |x, y| x * y)
    }

    pub fn minimum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip(Op::Minimum(a, b), a, b, f64::min)
    }

    pub fn maximum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip(Op::Maximum(a, b), a, b, f64::max)
    }

    /// Adds a vector of length `last_dim(x)` to every row of `x`. The only
    /// broadcast the graph supports.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let c = last_dim(self.shape(x));
        if self.shape(bias) != [c] {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let bd = self.data(bias);
        let data = self
            .data(x)
            .chunks(c)
            .flat_map(|row| row.iter().zip(bd).map(|(a, b)| a + b))
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, data, Op::AddBias(x, bias)))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        self.map(Op::Scale(x, c), x, |v| v * c)
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        self.map(Op::AddScalar(x), x, |v| v + c)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.map(Op::Exp(x), x, f64::exp)
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        self.map(Op::Log(x), x, f64::ln)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.map(Op::Sigmoid(x), x, sigmoid)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        self.map(Op::Softplus(x), x, softplus)
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        self.map(Op::Gelu(x), x, |v| {
            let t = (SQRT_2_OVER_PI * (v + GELU_C * v * v * v)).tanh();
            0.5 * v * (1.0 + t)
        })
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        if lo > hi || lo.is_nan() || hi.is_nan() {
            return Err(AutodiffError::InvalidArgument {
                op: "clamp",
                msg: format!("empty interval [{lo}, {hi}]"),
            });
        }
        Ok(self.map(Op::Clamp { x, lo, hi }, x, |v| v.clamp(lo, hi)))
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let c = last_dim(self.shape(x));
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(c) {
            let m = row_max(row);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Softmax(x))
    }

    pub fn log_softmax(&mut self, x: NodeId) -> NodeId {
        let c = last_dim(self.shape(x));
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(c) {
            let m = row_max(row);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::LogSoftmax(x))
    }

    /// Normalizes each row of `x`, then applies the affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let c = last_dim(self.shape(x));
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(AutodiffError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let xd = self.data(x);
        let (gd, bd) = (self.data(gamma), self.data(beta));
        let rows = xd.len() / c;
        let mut xhat = vec![0.0; xd.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gd[j] + bd[j];
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Rows of `table` (`[vocab, dim]`) selected by `ids`, giving `[ids.len(), dim]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (v, d) = self.as_matrix("embedding_lookup", table)?;
        if ids.is_empty() {
            return Err(AutodiffError::InvalidArgument {
                op: "embedding_lookup",
                msg: "no ids".into(),
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(AutodiffError::InvalidArgument {
                op: "embedding_lookup",
                msg: format!("id {bad} out of range for table of {v} rows"),
            });
        }
        let td = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Concatenates 1-d tensors, or 2-d tensors along `axis` 0 or 1.
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = *parts.first().ok_or(AutodiffError::InvalidArgument {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let rank = self.shape(first).len();
        if axis >= rank || rank > 2 {
            return Err(AutodiffError::InvalidArgument {
                op: "concat",
                msg: format!("axis {axis} invalid for rank {rank}"),
            });
        }
        let base = self.shape(first).to_vec();
        for &p in &parts[1..] {
            let s = self.shape(p);
            let ok = s.len() == rank && (0..rank).all(|d| d == axis || s[d] == base[d]);
            if !ok {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
        }
        let total: usize = parts.iter().map(|&p| self.shape(p)[axis]).sum();
        let mut shape = base.clone();
        shape[axis] = total;
        let mut out = Vec::with_capacity(numel(&shape));
        if axis == 0 {
            for &p in parts {
                out.extend_from_slice(self.data(p));
            }
        } else {
            let rows = base[0];
            for r in 0..rows {
                for &p in parts {
                    let w = self.shape(p)[1];
                    out.extend_from_slice(&self.data(p)[r * w..(r + 1) * w]);
                }
            }
        }
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// `len` entries starting at `start` along `axis` of a 1-d or 2-d tensor.
    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape.len() > 2 || len == 0 || start + len > shape[axis] {
            return Err(AutodiffError::InvalidArgument {
                op: "slice",
                msg: format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            });
        }
        let xd = self.data(x);
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let out = if axis == 0 {
            let w = if shape.len() == 2 { shape[1] } else { 1 };
            xd[start * w..(start + len) * w].to_vec()
        } else {
            let c = shape[1];
            xd.chunks(c)
                .flat_map(|row| row[start..start + len].iter().copied())
                .collect()
        };
        Ok(self.push(
            out_shape,
            out,
            Op::Slice {
                x,
                axis,
                start,
                len,
            },
        ))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.data(x).iter().sum();
        self.push(vec![1], vec![s], Op::Sum(x))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let d = self.data(x);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        self.push(vec![1], vec![s], Op::Mean(x))
    }

    /// Picks `x[r, index[r]]` from each row, giving a 1-d tensor of row count.
    pub fn gather(&mut self, x: NodeId, index: &[usize]) -> Result<NodeId> {
        let c = last_dim(self.shape(x));
        let rows = self.data(x).len() / c;
        if index.len() != rows {
            return Err(AutodiffError::ShapeMismatch {
                op: "gather",
                lhs: self.shape(x).to_vec(),
                rhs: vec![index.len()],
            });
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= c) {
            return Err(AutodiffError::InvalidArgument {
                op: "gather",
                msg: format!("index {bad} out of range for {c} columns"),
            });
        }
        let xd = self.data(x);
        let out = index.iter().enumerate().map(|(r, &i)| xd[r * c + i]).collect();
        Ok(self.push(
            vec![rows],
            out,
            Op::Gather {
                x,
                index: index.to_vec(),
            },
        ))
    }

    /// Sets entries above the diagonal of a square matrix to `-inf`.
    pub fn causal_mask(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.as_matrix("causal_mask", x)?;
        if r != c {
            return Err(AutodiffError::ShapeMismatch {
                op: "causal_mask",
                lhs: vec![r, c],
                rhs: vec![c, c],
            });
        }
        let mut out = self.data(x).to_vec();
        for i in 0..r {
            for v in &mut out[i * c + i + 1..(i + 1) * c] {
                *v = f64::NEG_INFINITY;
            }
        }
        Ok(self.push(vec![r, c], out, Op::CausalMask(x)))
    }

    /// Accumulates `d loss / d node` into every node's gradient.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if numel(self.shape(loss)) != 1 {
            return Err(AutodiffError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let n = loss.0 + 1;
        let mut up: Vec<Vec<f64>> = vec![Vec::new(); n];
        up[loss.0] = vec![1.0];
        for i in (0..n).rev() {
            if up[i].is_empty() || !self.nodes[i].requires_grad {
                continue;
            }
            let gout = std::mem::take(&mut up[i]);
            self.propagate(i, &gout, &mut up);
            for (g, d) in self.nodes[i].grad.iter_mut().zip(&gout) {
                *g += d;
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, gout: &[f64], up: &mut [Vec<f64>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        let wants = |p: NodeId| nodes[p.0].requires_grad;
        macro_rules! slot {
            ($p:expr) => {
                parent_slot(up, nodes, $p)
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let nn = nodes[b.0].shape[1];
                if wants(*a) {
                    let bd = &nodes[b.0].data;
                    let ga = slot!(*a);
                    for r in 0..m {
                        let grow = &gout[r * nn..(r + 1) * nn];
                        for p in 0..k {
                            let brow = &bd[p * nn..(p + 1) * nn];
                            let s: f64 = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                            ga[r * k + p] += s;
                        }
                    }
                }
                if wants(*b) {
                    let ad = &nodes[a.0].data;
                    let gb = slot!(*b);
                    for r in 0..m {
                        let grow = &gout[r * nn..(r + 1) * nn];
                        for p in 0..k {
                            let av = ad[r * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (g, &x) in gb[p * nn..(p + 1) * nn].iter_mut().zip(grow) {
                                *g += av * x;
                            }
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                if wants(*x) {
                    let (r, c) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
                    let gx = slot!(*x);
                    for a in 0..r {
                        for b in 0..c {
                            gx[a * c + b] += gout[b * r + a];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for (p, sign) in [(*a, 1.0), (*b, 1.0)] {
                    if wants(p) {
                        slot!(p).iter_mut().zip(gout).for_each(|(g, d)| *g += sign * d);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (p, sign) in [(*a, 1.0), (*b, -1.0)] {
                    if wants(p) {
                        slot!(p).iter_mut().zip(gout).for_each(|(g, d)| *g += sign * d);
                    }
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let bd = &nodes[b.0].data;
                    let ga = slot!(*a);
                    for j in 0..gout.len() {
                        ga[j] += gout[j] * bd[j];
                    }
                }
                if wants(*b) {
                    let ad = &nodes[a.0].data;
                    let gb = slot!(*b);
                    for j in 0..gout.len() {
                        gb[j] += gout[j] * ad[j];
                    }
                }
            }
            Op::Minimum(a, b) | Op::Maximum(a, b) => {
                let is_min = matches!(node.op, Op::Minimum(..));
                let (ad, bd) = (&nodes[a.0].data, &nodes[b.0].data);
                let pick_a = |j: usize| if is_min { ad[j] <= bd[j] } else { ad[j] >= bd[j] };
                if wants(*a) {
                    let ga = slot!(*a);
                    for j in 0..gout.len() {
                        if pick_a(j) {
                            ga[j] += gout[j];
                        }
                    }
                }
                if wants(*b) {
                    let gb = slot!(*b);
                    for j in 0..gout.len() {
                        if !pick_a(j) {
                            gb[j] += gout[j];
                        }
                    }
                }
            }
            Op::AddBias(x, bias) => {
                if wants(*x) {
                    slot!(*x).iter_mut().zip(gout).for_each(|(g, d)| *g += d);
                }
                if wants(*bias) {
                    let gb = slot!(*bias);
                    let c = gb.len();
                    for row in gout.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(g, d)| *g += d);
                    }
                }
            }
            Op::Scale(x, c) => {
                if wants(*x) {
                    slot!(*x).iter_mut().zip(gout).for_each(|(g, d)| *g += c * d);
                }
            }
            Op::AddScalar(x) => {
                if wants(*x) {
                    slot!(*x).iter_mut().zip(gout).for_each(|(g, d)| *g += d);
                }
            }
            Op::Exp(x) => {
                let y = &node.data;
                let gx = slot!(*x);
                for j in 0..gout.len() {
                    gx[j] += gout[j] * y[j];
                }
            }
            Op::Log(x) => {
                let xd = &nodes[x.0].data;
                let gx = slot!(*x);
                for j in 0..gout.len() {
                    gx[j] += gout[j] / xd[j];
                }
            }
            Op::Sigmoid(x) => {
                let y = &node.data;
                let gx = slot!(*x);
                for j in 0..gout.len() {
                    gx[j] += gout[j] * y[j] * (1.0 - y[j]);
                }
            }
            Op::Softplus(x) => {
                let xd = &nodes[x.0].data;
                let gx = slot!(*x);
                for j in 0..gout.len() {
                    gx[j] += gout[j] * sigmoid(xd[j]);
                }
            }
            Op::Gelu(x) => {
                let xd = &nodes[x.0].data;
                let gx = slot!(*x);
                for j in 0..gout.len() {
                    let v = xd[j];
                    let u = SQRT_2_OVER_PI * (v + GELU_C * v * v * v);
                    let t = u.tanh();
                    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * v * v);
                    gx[j] += gout[j] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xd = &nodes[x.0].data;
                let gx = slot!(*x);
                for j in 0..gout.len() {
                    if xd[j] >= *lo && xd[j] <= *hi {
                        gx[j] += gout[j];
                    }
                }
            }
            Op::Softmax(x) => {
                let y = &node.data;
                let c = last_dim(&node.shape);
                let gx = slot!(*x);
                for r in 0..y.len() / c {
                    let (yr, gr) = (&y[r * c..(r + 1) * c], &gout[r * c..(r + 1) * c]);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        gx[r * c + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let y = &node.data;
                let c = last_dim(&node.shape);
                let gx = slot!(*x);
                for r in 0..y.len() / c {
                    let gr = &gout[r * c..(r + 1) * c];
                    let s: f64 = gr.iter().sum();
                    for j in 0..c {
                        gx[r * c + j] += gr[j] - y[r * c + j].exp() * s;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = last_dim(&node.shape);
                let rows = gout.len() / c;
                if wants(*gamma) {
                    let gg = slot!(*gamma);
                    for r in 0..rows {
                        for j in 0..c {
                            gg[j] += gout[r * c + j] * xhat[r * c + j];
                        }
                    }
                }
                if wants(*beta) {
                    let gb = slot!(*beta);
                    for r in 0..rows {
                        for j in 0..c {
                            gb[j] += gout[r * c + j];
                        }
                    }
                }
                if wants(*x) {
                    let gd = &nodes[gamma.0].data;
                    let gx = slot!(*x);
                    let mut dxhat = vec![0.0; c];
                    for r in 0..rows {
                        let xh = &xhat[r * c..(r + 1) * c];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            dxhat[j] = gout[r * c + j] * gd[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * xh[j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            gx[r * c + j] += rstd[r] * (dxhat[j] - m1 - xh[j] * m2);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = node.shape[1];
                let gt = slot!(*table);
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += gout[r * d + j];
                    }
                }
            }
            Op::Concat { parts, axis } => {
                if *axis == 0 {
                    let mut off = 0;
                    for &p in parts {
                        let len = nodes[p.0].data.len();
                        if wants(p) {
                            slot!(p).iter_mut().zip(&gout[off..off + len]).for_each(|(g, d)| *g += d);
                        }
                        off += len;
                    }
                } else {
                    let total = node.shape[1];
                    let mut col = 0;
                    for &p in parts {
                        let w = nodes[p.0].shape[1];
                        if wants(p) {
                            let gp = slot!(p);
                            for r in 0..node.shape[0] {
                                for j in 0..w {
                                    gp[r * w + j] += gout[r * total + col + j];
                                }
                            }
                        }
                        col += w;
                    }
                }
            }
            Op::Slice {
                x,
                axis,
                start,
                len,
            } => {
                let shape = &nodes[x.0].shape;
                let gx = slot!(*x);
                if *axis == 0 {
                    let w = if shape.len() == 2 { shape[1] } else { 1 };
                    gx[start * w..(start + len) * w]
                        .iter_mut()
                        .zip(gout)
                        .for_each(|(g, d)| *g += d);
                } else {
                    let c = shape[1];
                    for r in 0..shape[0] {
                        for j in 0..*len {
                            gx[r * c + start + j] += gout[r * len + j];
                        }
                    }
                }
            }
            Op::Sum(x) => {
                let d = gout[0];
                slot!(*x).iter_mut().for_each(|g| *g += d);
            }
            Op::Mean(x) => {
                let gx = slot!(*x);
                let d = gout[0] / gx.len() as f64;
                gx.iter_mut().for_each(|g| *g += d);
            }
            Op::Gather { x, index } => {
                let c = last_dim(&nodes[x.0].shape);
                let gx = slot!(*x);
                for (r, &i) in index.iter().enumerate() {
                    gx[r * c + i] += gout[r];
                }
            }
            Op::CausalMask(x) => {
                let c = node.shape[1];
                let gx = slot!(*x);
                for r in 0..node.shape[0] {
                    for j in 0..=r {
                        gx[r * c + j] += gout[r * c + j];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_uniform_logits_is_uniform() {
        let mut g = Graph::new(0);
        let x = g.constant(vec![0.0; 4], &[4]).unwrap();
        let y = g.softmax(x);
        assert_eq!(g.data(y), &[0.25; 4]);
    }

    #[test]
    fn identity_matmul_returns_operand() {
        let mut g = Graph::new(1);
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let i3 = g.constant(eye, &[3, 3]).unwrap();
        let a = g.randn(&[3, 3], 1.0).unwrap();
        let y = g.matmul(i3, a).unwrap();
        assert_eq!(g.data(y), g.data(a));
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut g = Graph::new(0);
        let w = g.param(vec![0.0], &[1]).unwrap();
        let s = g.sigmoid(w);
        assert_eq!(g.value(s), 0.5);
        g.backward(s).unwrap();
        assert_eq!(g.grad(w), &[0.25]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new(0);
        let x = g.param(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        assert!(g.grad(x).iter().all(|&v| v == 0.0));
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_accumulates_until_zero_grad() {
        let mut g = Graph::new(0);
        let x = g.param(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x), &[4.0, 8.0, 12.0]);
        g.zero_grad();
        assert!(g.grad(x).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new(0);
        let x = g.param(vec![1.0, 2.0], &[2]).unwrap();
        assert_eq!(g.backward(x), Err(AutodiffError::NonScalarLoss(vec![2])));
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut g = Graph::new(0);
        let a = g.randn(&[2, 3], 1.0).unwrap();
        let b = g.randn(&[2, 3], 1.0).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3],
            }
        );
        assert!(err.to_string().contains("matmul"));
    }

    #[test]
    fn bad_leaf_shape_is_rejected() {
        let mut g = Graph::new(0);
        assert!(g.param(vec![1.0; 5], &[2, 3]).is_err());
        assert!(g.param(vec![], &[0]).is_err());
    }

    #[test]
    fn parents_precede_children() {
        let mut g = Graph::new(3);
        let a = g.randn(&[2, 2], 1.0).unwrap();
        let b = g.randn(&[2, 2], 1.0).unwrap();
        let c = g.matmul(a, b).unwrap();
        let d = g.gelu(c);
        let e = g.sum(d);
        for id in [c, d, e] {
            assert!(g.parents(id).iter().all(|p| p.index() < id.index()));
        }
        assert_eq!(g.op_tag(c), "matmul");
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new(0);
        let w = g.param(vec![2.0], &[1]).unwrap();
        let c = g.constant(vec![3.0], &[1]).unwrap();
        let y = g.mul(w, c).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(w), &[3.0]);
        assert_eq!(g.grad(c), &[0.0]);
    }

    #[test]
    fn softplus_does_not_overflow() {
        let mut g = Graph::new(0);
        let x = g.constant(vec![50.0, -800.0, 800.0], &[3]).unwrap();
        let y = g.softplus(x);
        let d = g.data(y);
        assert!((d[0] - 50.0).abs() < 1e-12);
        assert_eq!(d[1], 0.0);
        assert_eq!(d[2], 800.0);
    }

    #[test]
    fn causal_mask_blocks_future_positions() {
        let mut g = Graph::new(0);
        let x = g.constant(vec![0.0; 9], &[3, 3]).unwrap();
        let m = g.causal_mask(x).unwrap();
        let p = g.softmax(m);
        assert_eq!(&g.data(p)[0..3], &[1.0, 0.0, 0.0]);
        assert_eq!(&g.data(p)[3..6], &[0.5, 0.5, 0.0]);
    }
}
