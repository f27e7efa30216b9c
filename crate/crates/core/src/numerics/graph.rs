use std::collections::HashMap;

use super::kernels::{self, matmul_acc, matmul_grad_lhs, matmul_grad_rhs};
use super::{Element, NumericsError, Tensor};

/// Handle to a node inside one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

/// Handle to a bindable input (parameter or data) of one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LeafId(pub(crate) usize);

impl LeafId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf(LeafId),
    Constant(Tensor<T>),
    MatMul(NodeId, NodeId),
    Outer(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    RowSoftmax(NodeId),
    CausalSoftmax(NodeId),
    LogSoftmax(NodeId),
    Sum(NodeId),
    Scale(NodeId, T),
    OneMinus(NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    Permute(NodeId, Vec<usize>),
    Select(NodeId, usize),
    Stack(Vec<NodeId>),
    ScaleCols(NodeId, NodeId),
    ScaleMat(NodeId, NodeId),
    BroadcastRows(NodeId),
    RmsNorm(NodeId, T),
    L2Normalize(NodeId),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf(_) => "leaf",
            Op::Constant(_) => "constant",
            Op::MatMul(..) => "matmul",
            Op::Outer(..) => "outer",
            Op::Mul(..) => "mul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Sigmoid(_) => "sigmoid",
            Op::Exp(_) => "exp",
            Op::RowSoftmax(_) => "row_softmax",
            Op::CausalSoftmax(_) => "causal_softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Sum(_) => "sum",
            Op::Scale(..) => "scale",
            Op::OneMinus(_) => "one_minus",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Permute(..) => "permute",
            Op::Select(..) => "select",
            Op::Stack(_) => "stack",
            Op::ScaleCols(..) => "scale_cols",
            Op::ScaleMat(..) => "scale_mat",
            Op::BroadcastRows(_) => "broadcast_rows",
            Op::RmsNorm(..) => "rms_norm",
            Op::L2Normalize(_) => "l2_normalize",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf(_) | Op::Constant(_) => vec![],
            Op::MatMul(a, b)
            | Op::Outer(a, b)
            | Op::Mul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::ScaleCols(a, b)
            | Op::ScaleMat(a, b) => vec![*a, *b],
            Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::RowSoftmax(a)
            | Op::CausalSoftmax(a)
            | Op::LogSoftmax(a)
            | Op::Sum(a)
            | Op::Scale(a, _)
            | Op::OneMinus(a)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::Permute(a, _)
            | Op::Select(a, _)
            | Op::BroadcastRows(a)
            | Op::RmsNorm(a, _)
            | Op::L2Normalize(a) => vec![*a],
            Op::Stack(xs) => xs.clone(),
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T> {
    op: Op<T>,
    shape: Vec<usize>,
}

#[derive(Clone, Debug)]
struct LeafSpec {
    name: String,
    shape: Vec<usize>,
    node: NodeId,
}

/// Splits a rank >= 2 shape into (batch, rows, cols).
fn mat_dims(shape: &[usize]) -> Option<(usize, usize, usize)> {
    let r = shape.len();
    (r >= 2).then(|| (shape[..r - 2].iter().product(), shape[r - 2], shape[r - 1]))
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Statically shaped computation graph over a fixed primitive set.
///
/// Nodes are appended in topological order, so the graph is acyclic by
/// construction and every node's shape is checked when it is added.
/// Broadcasting never happens implicitly; the few primitives that expand a
/// row or scale a matrix spell the expected shapes out.
#[derive(Clone, Debug, Default)]
pub struct Graph<T = f64> {
    nodes: Vec<Node<T>>,
    leaves: Vec<LeafSpec>,
    root: Option<NodeId>,
}

/// Leaf values supplied to [`Graph::evaluate`] and friends.
#[derive(Clone, Debug)]
pub struct Bindings<T = f64> {
    values: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Bindings<T> {
    pub fn new(graph: &Graph<T>) -> Self {
        Self {
            values: vec![None; graph.leaves.len()],
        }
    }

    pub fn set(&mut self, leaf: LeafId, value: Tensor<T>) -> &mut Self {
        self.values[leaf.0] = Some(value);
        self
    }

    pub fn get(&self, leaf: LeafId) -> Option<&Tensor<T>> {
        self.values.get(leaf.0).and_then(Option::as_ref)
    }

    pub fn get_mut(&mut self, leaf: LeafId) -> Option<&mut Tensor<T>> {
        self.values.get_mut(leaf.0).and_then(Option::as_mut)
    }
}

/// Every node value from one forward pass.
#[derive(Clone, Debug)]
pub struct Values<T = f64> {
    data: Vec<Vec<T>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Element> Values<T> {
    pub fn get(&self, node: NodeId) -> Tensor<T> {
        Tensor::new(&self.shapes[node.0], self.data[node.0].clone())
            .expect("graph-produced value is well shaped")
    }

    pub fn slice(&self, node: NodeId) -> &[T] {
        &self.data[node.0]
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaves: Vec::new(),
            root: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, node: NodeId) -> &[usize] {
        &self.nodes[node.0].shape
    }

    pub fn leaf_count(&self) -> usize {
        self.leaves.len()
    }

    pub fn leaf_name(&self, leaf: LeafId) -> &str {
        &self.leaves[leaf.0].name
    }

    pub fn leaf_shape(&self, leaf: LeafId) -> &[usize] {
        &self.leaves[leaf.0].shape
    }

    pub fn leaf_node(&self, leaf: LeafId) -> NodeId {
        self.leaves[leaf.0].node
    }

    pub fn leaf_by_name(&self, name: &str) -> Option<LeafId> {
        self.leaves.iter().position(|l| l.name == name).map(LeafId)
    }

    pub fn leaves(&self) -> impl Iterator<Item = LeafId> + '_ {
        (0..self.leaves.len()).map(LeafId)
    }

    pub fn root(&self) -> Option<NodeId> {
        self.root
    }

    pub fn set_root(&mut self, node: NodeId) {
        self.root = Some(node);
    }

    fn push(&mut self, op: Op<T>, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node { op, shape });
        NodeId(self.nodes.len() - 1)
    }

    fn mismatch(op: &str, detail: String) -> NumericsError {
        NumericsError::ShapeMismatch {
            op: op.to_string(),
            detail,
        }
    }

    /// Declares a bindable input. Returns both handles.
    pub fn leaf(&mut self, name: &str, shape: &[usize]) -> (LeafId, NodeId) {
        let leaf = LeafId(self.leaves.len());
        let node = self.push(Op::Leaf(leaf), shape.to_vec());
        self.leaves.push(LeafSpec {
            name: name.to_string(),
            shape: shape.to_vec(),
            node,
        });
        (leaf, node)
    }

    /// Shorthand for [`Graph::leaf`] when only the node is needed.
    pub fn input(&mut self, name: &str, shape: &[usize]) -> NodeId {
        self.leaf(name, shape).1
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Constant(value), shape)
    }

    /// Batched matrix product `[.., m, k] x [.., k, n] -> [.., m, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() >= 2
            && sa.len() == sb.len()
            && sa[..sa.len() - 2] == sb[..sb.len() - 2]
            && sa[sa.len() - 1] == sb[sb.len() - 2];
        if !ok {
            return Err(Self::mismatch("matmul", format!("{sa:?} x {sb:?}")));
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = sb[sb.len() - 1];
        Ok(self.push(Op::MatMul(a, b), shape))
    }

    /// Outer product of the last axes: `[m] x [n] -> [m, n]`, or row vectors
    /// `[.., 1, m] x [.., 1, n] -> [.., m, n]`.
    pub fn outer(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let shape = match (sa.len(), sb.len()) {
            (1, 1) => vec![sa[0], sb[0]],
            (ra, rb) if ra == rb && ra >= 2 && sa[ra - 2] == 1 && sb[rb - 2] == 1 => {
                if sa[..ra - 2] != sb[..rb - 2] {
                    return Err(Self::mismatch("outer", format!("{sa:?} x {sb:?}")));
                }
                let mut s = sa[..ra - 2].to_vec();
                s.push(sa[ra - 1]);
                s.push(sb[rb - 1]);
                s
            }
            _ => return Err(Self::mismatch("outer", format!("{sa:?} x {sb:?}"))),
        };
        Ok(self.push(Op::Outer(a, b), shape))
    }

    fn same_shape(&self, op: &str, a: NodeId, b: NodeId) -> Result<Vec<usize>, NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(Self::mismatch(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(self.shape(a).to_vec())
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let shape = self.same_shape("mul", a, b)?;
        Ok(self.push(Op::Mul(a, b), shape))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let shape = self.same_shape("add", a, b)?;
        Ok(self.push(Op::Add(a, b), shape))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let shape = self.same_shape("sub", a, b)?;
        Ok(self.push(Op::Sub(a, b), shape))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Sigmoid(a), shape)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Exp(a), shape)
    }

    /// Softmax along the last axis.
    pub fn row_softmax(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::RowSoftmax(a), shape)
    }

    /// Softmax over the last axis of `[.., rows, cols]` where row `i` only sees
    /// columns `j <= i + (cols - rows)`.
    pub fn causal_softmax(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let shape = self.shape(a).to_vec();
        match mat_dims(&shape) {
            Some((_, r, c)) if r <= c => Ok(self.push(Op::CausalSoftmax(a), shape)),
            _ => Err(Self::mismatch("causal_softmax", format!("{shape:?}"))),
        }
    }

    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::LogSoftmax(a), shape)
    }

    /// Sum of every element, producing a scalar.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a), Vec::new())
    }

    pub fn scale(&mut self, a: NodeId, factor: T) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Scale(a, factor), shape)
    }

    /// Elementwise `1 - a`.
    pub fn one_minus(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::OneMinus(a), shape)
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let mut shape = self.shape(a).to_vec();
        let r = shape.len();
        if r < 2 {
            return Err(Self::mismatch("transpose", format!("{shape:?}")));
        }
        shape.swap(r - 1, r - 2);
        Ok(self.push(Op::Transpose(a), shape))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, NumericsError> {
        if numel(shape) != numel(self.shape(a)) || shape.contains(&0) {
            return Err(Self::mismatch(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(a)),
            ));
        }
        Ok(self.push(Op::Reshape(a), shape.to_vec()))
    }

    /// Reorders axes so output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: NodeId, axes: &[usize]) -> Result<NodeId, NumericsError> {
        let src = self.shape(a).to_vec();
        let mut seen = vec![false; src.len()];
        let valid = axes.len() == src.len()
            && axes
                .iter()
                .all(|&ax| ax < src.len() && !std::mem::replace(&mut seen[ax], true));
        if !valid {
            return Err(Self::mismatch("permute", format!("{src:?} by {axes:?}")));
        }
        let shape = axes.iter().map(|&ax| src[ax]).collect();
        Ok(self.push(Op::Permute(a, axes.to_vec()), shape))
    }

    /// Picks slab `index` along the leading axis.
    pub fn select(&mut self, a: NodeId, index: usize) -> Result<NodeId, NumericsError> {
        let src = self.shape(a).to_vec();
        if src.len() < 2 || index >= src[0] {
            return Err(Self::mismatch("select", format!("{src:?} at {index}")));
        }
        Ok(self.push(Op::Select(a, index), src[1..].to_vec()))
    }

    /// Stacks equally shaped nodes along a new leading axis.
    pub fn stack(&mut self, parts: &[NodeId]) -> Result<NodeId, NumericsError> {
        let first = parts
            .first()
            .ok_or_else(|| Self::mismatch("stack", "no inputs".into()))?;
        let inner = self.shape(*first).to_vec();
        if parts.iter().any(|p| self.shape(*p) != inner.as_slice()) {
            return Err(Self::mismatch("stack", "inputs differ in shape".into()));
        }
        let mut shape = vec![parts.len()];
        shape.extend(inner);
        Ok(self.push(Op::Stack(parts.to_vec()), shape))
    }

    /// `m · Diag(a)`: scales column `j` of every `[r, c]` matrix by `a[.., 0, j]`.
    pub fn scale_cols(&mut self, m: NodeId, a: NodeId) -> Result<NodeId, NumericsError> {
        let (sm, sa) = (self.shape(m).to_vec(), self.shape(a).to_vec());
        let ok = sm.len() >= 2
            && sa.len() == sm.len()
            && sa[..sa.len() - 2] == sm[..sm.len() - 2]
            && sa[sa.len() - 2] == 1
            && sa[sa.len() - 1] == sm[sm.len() - 1];
        if !ok {
            return Err(Self::mismatch("scale_cols", format!("{sm:?} by {sa:?}")));
        }
        Ok(self.push(Op::ScaleCols(m, a), sm))
    }

    /// Scales every `[r, c]` matrix by its own scalar `s[.., 0, 0]`.
    pub fn scale_mat(&mut self, m: NodeId, s: NodeId) -> Result<NodeId, NumericsError> {
        let (sm, ss) = (self.shape(m).to_vec(), self.shape(s).to_vec());
        let ok = sm.len() >= 2
            && ss.len() == sm.len()
            && ss[..ss.len() - 2] == sm[..sm.len() - 2]
            && ss[ss.len() - 2..] == [1, 1];
        if !ok {
            return Err(Self::mismatch("scale_mat", format!("{sm:?} by {ss:?}")));
        }
        Ok(self.push(Op::ScaleMat(m, s), sm))
    }

    /// Repeats a `[.., 1, c]` row `rows` times into `[.., rows, c]`.
    pub fn broadcast_rows(&mut self, a: NodeId, rows: usize) -> Result<NodeId, NumericsError> {
        let mut shape = self.shape(a).to_vec();
        let r = shape.len();
        if r < 2 || shape[r - 2] != 1 || rows == 0 {
            return Err(Self::mismatch("broadcast_rows", format!("{shape:?}")));
        }
        shape[r - 2] = rows;
        Ok(self.push(Op::BroadcastRows(a), shape))
    }

    /// `x / sqrt(mean(x^2) + eps)` along the last axis.
    pub fn rms_norm(&mut self, a: NodeId, eps: T) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::RmsNorm(a, eps), shape)
    }

    /// `x / ||x||_2` along the last axis.
    pub fn l2_normalize(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::L2Normalize(a), shape)
    }

    /// Softmax cross-entropy summed over rows, with `targets` given as a
    /// (possibly all-zero, for ignored rows) one-hot matrix of the same shape.
    pub fn cross_entropy_sum(
        &mut self,
        logits: NodeId,
        targets: NodeId,
    ) -> Result<NodeId, NumericsError> {
        let logp = self.log_softmax(logits);
        let picked = self.mul(logp, targets)?;
        let total = self.sum(picked);
        Ok(self.scale(total, -T::one()))
    }

    fn check_bindings(&self, bindings: &Bindings<T>) -> Result<(), NumericsError> {
        if bindings.values.len() != self.leaves.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "bind".into(),
                detail: "bindings were built for another graph".into(),
            });
        }
        for (spec, value) in self.leaves.iter().zip(&bindings.values) {
            let value = value
                .as_ref()
                .ok_or_else(|| NumericsError::UnboundLeaf(spec.name.clone()))?;
            if value.shape() != spec.shape.as_slice() {
                return Err(NumericsError::ShapeMismatch {
                    op: "bind".into(),
                    detail: format!(
                        "leaf `{}` expects {:?}, got {:?}",
                        spec.name,
                        spec.shape,
                        value.shape()
                    ),
                });
            }
        }
        Ok(())
    }

    /// Value of the root node.
    pub fn evaluate(&self, bindings: &Bindings<T>) -> Result<Tensor<T>, NumericsError> {
        let root = self.root.ok_or(NumericsError::NoRoot)?;
        Ok(self.forward(bindings)?.get(root))
    }

    /// Computes every node. Fails on the first non-finite intermediate.
    pub fn forward(&self, bindings: &Bindings<T>) -> Result<Values<T>, NumericsError> {
        self.check_bindings(bindings)?;
        let mut data: Vec<Vec<T>> = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            let out = self.forward_node(node, &data, bindings);
            if out.iter().any(|v| !v.is_finite()) {
                return Err(NumericsError::NonFinite {
                    op: node.op.name().to_string(),
                    node: idx,
                });
            }
            data.push(out);
        }
        Ok(Values {
            data,
            shapes: self.nodes.iter().map(|n| n.shape.clone()).collect(),
        })
    }

    fn forward_node(&self, node: &Node<T>, vals: &[Vec<T>], bindings: &Bindings<T>) -> Vec<T> {
        let shape_of = |id: NodeId| self.nodes[id.0].shape.as_slice();
        match &node.op {
            Op::Leaf(leaf) => bindings.values[leaf.0]
                .as_ref()
                .expect("checked")
                .data()
                .to_vec(),
            Op::Constant(t) => t.data().to_vec(),
            Op::MatMul(a, b) => {
                let (batch, m, k) = mat_dims(shape_of(*a)).unwrap();
                let n = last_dim(shape_of(*b));
                let mut out = vec![T::zero(); batch * m * n];
                matmul_acc(&vals[a.0], &vals[b.0], &mut out, batch, m, k, n);
                out
            }
            Op::Outer(a, b) => {
                let (m, n) = (last_dim(shape_of(*a)), last_dim(shape_of(*b)));
                let (va, vb) = (&vals[a.0], &vals[b.0]);
                let batch = va.len() / m;
                let mut out = Vec::with_capacity(batch * m * n);
                for p in 0..batch {
                    for i in 0..m {
                        let ai = va[p * m + i];
                        out.extend(vb[p * n..(p + 1) * n].iter().map(|&bj| ai * bj));
                    }
                }
                out
            }
            Op::Mul(a, b) => zip_map(&vals[a.0], &vals[b.0], |x, y| x * y),
            Op::Add(a, b) => zip_map(&vals[a.0], &vals[b.0], |x, y| x + y),
            Op::Sub(a, b) => zip_map(&vals[a.0], &vals[b.0], |x, y| x - y),
            Op::Sigmoid(a) => vals[a.0].iter().map(|&x| kernels::sigmoid(x)).collect(),
            Op::Exp(a) => vals[a.0].iter().map(|&x| x.exp()).collect(),
            Op::RowSoftmax(a) => {
                let n = last_dim(shape_of(*a));
                let x = &vals[a.0];
                let mut out = vec![T::zero(); x.len()];
                for (xr, or) in x.chunks(n).zip(out.chunks_mut(n)) {
                    kernels::softmax_row(xr, or, n);
                }
                out
            }
            Op::CausalSoftmax(a) => {
                let (_, r, c) = mat_dims(shape_of(*a)).unwrap();
                let x = &vals[a.0];
                let mut out = vec![T::zero(); x.len()];
                for (row, (xr, or)) in x.chunks(c).zip(out.chunks_mut(c)).enumerate() {
                    let visible = row % r + 1 + (c - r);
                    kernels::softmax_row(xr, or, visible);
                }
                out
            }
            Op::LogSoftmax(a) => {
                let n = last_dim(shape_of(*a));
                let mut out = Vec::with_capacity(vals[a.0].len());
                for xr in vals[a.0].chunks(n) {
                    let max = xr.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
                    let lse = max + xr.iter().fold(T::zero(), |s, &v| s + (v - max).exp()).ln();
                    out.extend(xr.iter().map(|&v| v - lse));
                }
                out
            }
            Op::Sum(a) => vec![vals[a.0].iter().fold(T::zero(), |s, &v| s + v)],
            Op::Scale(a, f) => vals[a.0].iter().map(|&x| x * *f).collect(),
            Op::OneMinus(a) => vals[a.0].iter().map(|&x| T::one() - x).collect(),
            Op::Transpose(a) => {
                let s = shape_of(*a);
                let r = s.len();
                let mut axes: Vec<usize> = (0..r).collect();
                axes.swap(r - 1, r - 2);
                kernels::permute(&vals[a.0], s, &axes)
            }
            Op::Reshape(a) => vals[a.0].clone(),
            Op::Permute(a, axes) => kernels::permute(&vals[a.0], shape_of(*a), axes),
            Op::Select(a, index) => {
                let slab = numel(&node.shape);
                vals[a.0][index * slab..(index + 1) * slab].to_vec()
            }
            Op::Stack(parts) => {
                let mut out = Vec::with_capacity(numel(&node.shape));
                for p in parts {
                    out.extend_from_slice(&vals[p.0]);
                }
                out
            }
            Op::ScaleCols(m, a) => {
                let c = last_dim(&node.shape);
                let (_, r, _) = mat_dims(&node.shape).unwrap();
                let (vm, va) = (&vals[m.0], &vals[a.0]);
                vm.iter()
                    .enumerate()
                    .map(|(i, &x)| x * va[(i / (r * c)) * c + i % c])
                    .collect()
            }
            Op::ScaleMat(m, s) => {
                let (_, r, c) = mat_dims(&node.shape).unwrap();
                let (vm, vs) = (&vals[m.0], &vals[s.0]);
                vm.iter()
                    .enumerate()
                    .map(|(i, &x)| x * vs[i / (r * c)])
                    .collect()
            }
            Op::BroadcastRows(a) => {
                let (batch, r, c) = mat_dims(&node.shape).unwrap();
                let va = &vals[a.0];
                let mut out = Vec::with_capacity(batch * r * c);
                for p in 0..batch {
                    for _ in 0..r {
                        out.extend_from_slice(&va[p * c..(p + 1) * c]);
                    }
                }
                out
            }
            Op::RmsNorm(a, eps) => {
                let n = last_dim(&node.shape);
                let nf = T::from_f64(n as f64);
                let mut out = Vec::with_capacity(vals[a.0].len());
                for xr in vals[a.0].chunks(n) {
                    let ms = xr.iter().fold(T::zero(), |s, &v| s + v * v) / nf;
                    let inv = T::one() / (ms + *eps).sqrt();
                    out.extend(xr.iter().map(|&v| v * inv));
                }
                out
            }
            Op::L2Normalize(a) => {
                let n = last_dim(&node.shape);
                let mut out = Vec::with_capacity(vals[a.0].len());
                for xr in vals[a.0].chunks(n) {
                    let norm = xr.iter().fold(T::zero(), |s, &v| s + v * v).sqrt();
                    out.extend(xr.iter().map(|&v| v / norm));
                }
                out
            }
        }
    }

    /// `∂root/∂leaf` for each requested leaf, in the order given.
    pub fn gradient(
        &self,
        bindings: &Bindings<T>,
        wrt: &[LeafId],
    ) -> Result<Vec<Tensor<T>>, NumericsError> {
        Ok(self.value_and_gradient(bindings, wrt)?.1)
    }

    /// Root value together with the gradients of [`Graph::gradient`].
    pub fn value_and_gradient(
        &self,
        bindings: &Bindings<T>,
        wrt: &[LeafId],
    ) -> Result<(T, Vec<Tensor<T>>), NumericsError> {
        let root = self.root.ok_or(NumericsError::NoRoot)?;
        if !self.nodes[root.0].shape.is_empty() && numel(&self.nodes[root.0].shape) != 1 {
            return Err(NumericsError::NonScalarRoot(self.nodes[root.0].shape.clone()));
        }
        if let Some(bad) = wrt.iter().find(|l| l.0 >= self.leaves.len()) {
            return Err(NumericsError::UnboundLeaf(format!("leaf #{}", bad.0)));
        }
        let values = self.forward(bindings)?;
        let grads = self.backward(&values, root, wrt);
        Ok((values.data[root.0][0], grads))
    }

    fn backward(&self, values: &Values<T>, root: NodeId, wrt: &[LeafId]) -> Vec<Tensor<T>> {
        let n = self.nodes.len();
        let mut needs = vec![false; n];
        for leaf in wrt {
            needs[self.leaves[leaf.0].node.0] = true;
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if !needs[idx] {
                needs[idx] = node.op.inputs().iter().any(|i| needs[i.0]);
            }
        }

        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        grads[root.0] = Some(vec![T::one()]);
        for idx in (0..=root.0).rev() {
            if !needs[idx] {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf(_)) {
                grads[idx] = Some(g);
                continue;
            }
            self.backward_node(node, idx, &g, values, &needs, &mut grads);
        }

        wrt.iter()
            .map(|leaf| {
                let spec = &self.leaves[leaf.0];
                let data = grads[spec.node.0]
                    .clone()
                    .unwrap_or_else(|| vec![T::zero(); numel(&spec.shape)]);
                Tensor::new(&spec.shape, data).expect("gradient matches leaf shape")
            })
            .collect()
    }

    fn backward_node(
        &self,
        node: &Node<T>,
        idx: usize,
        g: &[T],
        values: &Values<T>,
        needs: &[bool],
        grads: &mut [Option<Vec<T>>],
    ) {
        let vals = &values.data;
        let out = &vals[idx];
        let shape_of = |id: NodeId| self.nodes[id.0].shape.as_slice();
        let acc = |id: NodeId, grads: &mut [Option<Vec<T>>], f: &mut dyn FnMut(&mut [T])| {
            if needs[id.0] {
                let len = vals[id.0].len();
                let buf = grads[id.0].get_or_insert_with(|| vec![T::zero(); len]);
                f(buf);
            }
        };
        match &node.op {
            Op::Leaf(_) | Op::Constant(_) => {}
            Op::MatMul(a, b) => {
                let (batch, m, k) = mat_dims(shape_of(*a)).unwrap();
                let nn = last_dim(shape_of(*b));
                acc(*a, grads, &mut |da| {
                    matmul_grad_lhs(g, &vals[b.0], da, batch, m, k, nn)
                });
                acc(*b, grads, &mut |db| {
                    matmul_grad_rhs(&vals[a.0], g, db, batch, m, k, nn)
                });
            }
            Op::Outer(a, b) => {
                let (m, nn) = (last_dim(shape_of(*a)), last_dim(shape_of(*b)));
                let batch = vals[a.0].len() / m;
                acc(*a, grads, &mut |da| {
                    let vb = &vals[b.0];
                    for p in 0..batch {
                        for i in 0..m {
                            let grow = &g[(p * m + i) * nn..(p * m + i + 1) * nn];
                            let dot = grow
                                .iter()
                                .zip(&vb[p * nn..(p + 1) * nn])
                                .fold(T::zero(), |s, (&x, &y)| s + x * y);
                            da[p * m + i] = da[p * m + i] + dot;
                        }
                    }
                });
                acc(*b, grads, &mut |db| {
                    let va = &vals[a.0];
                    for p in 0..batch {
                        for i in 0..m {
                            let ai = va[p * m + i];
                            let grow = &g[(p * m + i) * nn..(p * m + i + 1) * nn];
                            for (d, &gv) in db[p * nn..(p + 1) * nn].iter_mut().zip(grow) {
                                *d = *d + ai * gv;
                            }
                        }
                    }
                });
            }
            Op::Mul(a, b) => {
                acc(*a, grads, &mut |da| add_zip(da, g, &vals[b.0], |x, y| x * y));
                acc(*b, grads, &mut |db| add_zip(db, g, &vals[a.0], |x, y| x * y));
            }
            Op::Add(a, b) => {
                acc(*a, grads, &mut |da| add_into(da, g));
                acc(*b, grads, &mut |db| add_into(db, g));
            }
            Op::Sub(a, b) => {
                acc(*a, grads, &mut |da| add_into(da, g));
                acc(*b, grads, &mut |db| add_zip(db, g, g, |x, _| -x));
            }
            Op::Sigmoid(a) => acc(*a, grads, &mut |da| {
                add_zip(da, g, out, |gv, y| gv * y * (T::one() - y))
            }),
            Op::Exp(a) => acc(*a, grads, &mut |da| add_zip(da, g, out, |gv, y| gv * y)),
            Op::RowSoftmax(a) | Op::CausalSoftmax(a) => {
                let n = last_dim(&node.shape);
                acc(*a, grads, &mut |da| {
                    for ((dr, gr), yr) in da.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                        let dot = gr
                            .iter()
                            .zip(yr)
                            .fold(T::zero(), |s, (&x, &y)| s + x * y);
                        for ((d, &gv), &y) in dr.iter_mut().zip(gr).zip(yr) {
                            *d = *d + y * (gv - dot);
                        }
                    }
                })
            }
            Op::LogSoftmax(a) => {
                let n = last_dim(&node.shape);
                acc(*a, grads, &mut |da| {
                    for ((dr, gr), yr) in da.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                        let total = gr.iter().fold(T::zero(), |s, &x| s + x);
                        for ((d, &gv), &y) in dr.iter_mut().zip(gr).zip(yr) {
                            *d = *d + gv - y.exp() * total;
                        }
                    }
                })
            }
            Op::Sum(a) => acc(*a, grads, &mut |da| {
                for d in da.iter_mut() {
                    *d = *d + g[0];
                }
            }),
            Op::Scale(a, f) => acc(*a, grads, &mut |da| add_zip(da, g, g, |x, _| x * *f)),
            Op::OneMinus(a) => acc(*a, grads, &mut |da| add_zip(da, g, g, |x, _| -x)),
            Op::Transpose(a) => acc(*a, grads, &mut |da| {
                let r = node.shape.len();
                let mut axes: Vec<usize> = (0..r).collect();
                axes.swap(r - 1, r - 2);
                add_into(da, &kernels::permute(g, &node.shape, &axes));
            }),
            Op::Reshape(a) => acc(*a, grads, &mut |da| add_into(da, g)),
            Op::Permute(a, axes) => acc(*a, grads, &mut |da| {
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                add_into(da, &kernels::permute(g, &node.shape, &inverse));
            }),
            Op::Select(a, index) => acc(*a, grads, &mut |da| {
                let slab = g.len();
                add_into(&mut da[index * slab..(index + 1) * slab], g);
            }),
            Op::Stack(parts) => {
                let slab = g.len() / parts.len();
                for (i, p) in parts.iter().enumerate() {
                    acc(*p, grads, &mut |dp| add_into(dp, &g[i * slab..(i + 1) * slab]));
                }
            }
            Op::ScaleCols(m, a) => {
                let (_, r, c) = mat_dims(&node.shape).unwrap();
                acc(*m, grads, &mut |dm| {
                    let va = &vals[a.0];
                    for (i, d) in dm.iter_mut().enumerate() {
                        *d = *d + g[i] * va[(i / (r * c)) * c + i % c];
                    }
                });
                acc(*a, grads, &mut |da| {
                    let vm = &vals[m.0];
                    for (i, (&gv, &mv)) in g.iter().zip(vm).enumerate() {
                        let j = (i / (r * c)) * c + i % c;
                        da[j] = da[j] + gv * mv;
                    }
                });
            }
            Op::ScaleMat(m, s) => {
                let (_, r, c) = mat_dims(&node.shape).unwrap();
                acc(*m, grads, &mut |dm| {
                    let vs = &vals[s.0];
                    for (i, d) in dm.iter_mut().enumerate() {
                        *d = *d + g[i] * vs[i / (r * c)];
                    }
                });
                acc(*s, grads, &mut |ds| {
                    let vm = &vals[m.0];
                    for (i, (&gv, &mv)) in g.iter().zip(vm).enumerate() {
                        ds[i / (r * c)] = ds[i / (r * c)] + gv * mv;
                    }
                });
            }
            Op::BroadcastRows(a) => {
                let (_, r, c) = mat_dims(&node.shape).unwrap();
                acc(*a, grads, &mut |da| {
                    for (i, &gv) in g.iter().enumerate() {
                        let j = (i / (r * c)) * c + i % c;
                        da[j] = da[j] + gv;
                    }
                });
            }
            Op::RmsNorm(a, eps) => {
                let n = last_dim(&node.shape);
                let nf = T::from_f64(n as f64);
                acc(*a, grads, &mut |da| {
                    let x = &vals[a.0];
                    for (((dr, gr), yr), xr) in da
                        .chunks_mut(n)
                        .zip(g.chunks(n))
                        .zip(out.chunks(n))
                        .zip(x.chunks(n))
                    {
                        let ms = xr.iter().fold(T::zero(), |s, &v| s + v * v) / nf;
                        let inv = T::one() / (ms + *eps).sqrt();
                        let dot = gr.iter().zip(yr).fold(T::zero(), |s, (&p, &q)| s + p * q) / nf;
                        for ((d, &gv), &y) in dr.iter_mut().zip(gr).zip(yr) {
                            *d = *d + (gv - y * dot) * inv;
                        }
                    }
                })
            }
            Op::L2Normalize(a) => {
                let n = last_dim(&node.shape);
                acc(*a, grads, &mut |da| {
                    let x = &vals[a.0];
                    for (((dr, gr), yr), xr) in da
                        .chunks_mut(n)
                        .zip(g.chunks(n))
                        .zip(out.chunks(n))
                        .zip(x.chunks(n))
                    {
                        let norm = xr.iter().fold(T::zero(), |s, &v| s + v * v).sqrt();
                        let dot = gr.iter().zip(yr).fold(T::zero(), |s, (&p, &q)| s + p * q);
                        for ((d, &gv), &y) in dr.iter_mut().zip(gr).zip(yr) {
                            *d = *d + (gv - y * dot) / norm;
                        }
                    }
                })
            }
        }
    }
}

fn zip_map<T: Element>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn add_into<T: Element>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn add_zip<T: Element>(dst: &mut [T], a: &[T], b: &[T], f: impl Fn(T, T) -> T) {
    for ((d, &x), &y) in dst.iter_mut().zip(a).zip(b) {
        *d = *d + f(x, y);
    }
}

/// Convenience for binding leaves by name.
pub fn bind_named<T: Element>(
    graph: &Graph<T>,
    named: HashMap<&str, Tensor<T>>,
) -> Result<Bindings<T>, NumericsError> {
    let mut b = Bindings::new(graph);
    for (name, value) in named {
        let leaf = graph
            .leaf_by_name(name)
            .ok_or_else(|| NumericsError::UnboundLeaf(name.to_string()))?;
        b.set(leaf, value);
    }
    Ok(b)
}
