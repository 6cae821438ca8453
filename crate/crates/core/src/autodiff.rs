//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a define-by-run tape: every operation appends a node,
//! evaluates its value eagerly, and records the dependency so that
//! [`Graph::backward`] can replay the tape in reverse. Graphs are rebuilt
//! per forward pass and never mutated after construction, so parents always
//! precede children and reverse index order is a valid topological order.
//!
//! Binary ops broadcast only scalar-vs-tensor (rank-0 against anything) or
//! identical shapes; everything else is a shape error.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`]. Only valid for the graph that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddScalar(NodeId),
    MulScalar(NodeId, f64),
    Neg(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Matmul(NodeId, NodeId),
    ReduceSum(NodeId, Vec<usize>),
    Reshape(NodeId),
    Transpose(NodeId),
    Concat(Vec<NodeId>, usize),
    Slice(NodeId, usize, usize, usize),
    Gather(NodeId, usize, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Define-by-run computation tape over [`Tensor`] values.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

// Broadcast-aware elementwise kernels used by both forward and backward.
fn badd(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() == b.shape() {
        a.add(b)
    } else if b.rank() == 0 {
        a.add_scalar(b.item()?)
    } else if a.rank() == 0 {
        b.add_scalar(a.item()?)
    } else {
        Err(Error::shape("add", format!("{:?} vs {:?}", a.shape(), b.shape())))
    }
}

fn bsub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() == b.shape() {
        a.sub(b)
    } else if b.rank() == 0 {
        a.sub_scalar(b.item()?)
    } else if a.rank() == 0 {
        b.neg()?.add_scalar(a.item()?)
    } else {
        Err(Error::shape("sub", format!("{:?} vs {:?}", a.shape(), b.shape())))
    }
}

fn bmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() == b.shape() {
        a.mul(b)
    } else if b.rank() == 0 {
        a.mul_scalar(b.item()?)
    } else if a.rank() == 0 {
        b.mul_scalar(a.item()?)
    } else {
        Err(Error::shape("mul", format!("{:?} vs {:?}", a.shape(), b.shape())))
    }
}

fn bdiv(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() == b.shape() {
        a.div(b)
    } else if b.rank() == 0 {
        a.div_scalar(b.item()?)
    } else if a.rank() == 0 {
        Tensor::full(b.shape(), a.item()?).div(b)
    } else {
        Err(Error::shape("div", format!("{:?} vs {:?}", a.shape(), b.shape())))
    }
}

/// Sums `g` down to `shape` when the forward op broadcast a rank-0 operand.
fn reduce_to(g: Tensor, shape: &[usize]) -> Result<Tensor> {
    if g.shape() == shape {
        Ok(g)
    } else {
        let axes: Vec<usize> = (0..g.rank()).collect();
        g.reduce_sum(&axes)
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    /// Inserts a leaf holding `value`. Gradients are available for every
    /// leaf reachable from the backward root.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = badd(self.value(a), self.value(b))?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = bsub(self.value(a), self.value(b))?;
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = bmul(self.value(a), self.value(b))?;
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = bdiv(self.value(a), self.value(b))?;
        Ok(self.push(Op::Div(a, b), v))
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        let v = self.value(a).add_scalar(s)?;
        Ok(self.push(Op::AddScalar(a), v))
    }

    pub fn sub_scalar(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        self.add_scalar(a, -s)
    }

    pub fn mul_scalar(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        let v = self.value(a).mul_scalar(s)?;
        Ok(self.push(Op::MulScalar(a, s), v))
    }

    pub fn div_scalar(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        if s == 0.0 {
            return Err(Error::domain("div", "division by zero"));
        }
        self.mul_scalar(a, 1.0 / s)
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).neg()?;
        Ok(self.push(Op::Neg(a), v))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).exp()?;
        Ok(self.push(Op::Exp(a), v))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).ln()?;
        Ok(self.push(Op::Log(a), v))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).tanh()?;
        Ok(self.push(Op::Tanh(a), v))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).sigmoid()?;
        Ok(self.push(Op::Sigmoid(a), v))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::Matmul(a, b), v))
    }

    pub fn reduce_sum(&mut self, a: NodeId, axes: &[usize]) -> Result<NodeId> {
        let v = self.value(a).reduce_sum(axes)?;
        Ok(self.push(Op::ReduceSum(a, axes.to_vec()), v))
    }

    /// Sums over every axis, yielding a rank-0 scalar node.
    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let axes: Vec<usize> = (0..self.value(a).rank()).collect();
        self.reduce_sum(a, &axes)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(Op::Reshape(a), v))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).transpose()?;
        Ok(self.push(Op::Transpose(a), v))
    }

    pub fn concat(&mut self, axis: usize, parts: &[NodeId]) -> Result<NodeId> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat(axis, &tensors)?;
        Ok(self.push(Op::Concat(parts.to_vec(), axis), v))
    }

    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, end: usize) -> Result<NodeId> {
        let v = self.value(a).slice(axis, start, end)?;
        Ok(self.push(Op::Slice(a, axis, start, end), v))
    }

    pub fn gather(&mut self, a: NodeId, axis: usize, indices: &[usize]) -> Result<NodeId> {
        let v = self.value(a).gather(axis, indices)?;
        Ok(self.push(Op::Gather(a, axis, indices.to_vec()), v))
    }

    /// Reverse-mode sweep from a scalar `root`. Returns the gradient of
    /// `root` with respect to every reachable node; traversal order is the
    /// reverse of insertion order, which is deterministic and topological.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let root_val = self.value(root);
        if root_val.numel() != 1 {
            return Err(Error::NonScalarRoot { shape: root_val.shape().to_vec() });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::ones(root_val.shape()));

        for i in (0..=root.0).rev() {
            let dz = match &grads[i] {
                Some(g) => g.clone(),
                None => continue,
            };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accum(&mut grads, *a, reduce_to(dz.clone(), self.value(*a).shape())?)?;
                    self.accum(&mut grads, *b, reduce_to(dz.clone(), self.value(*b).shape())?)?;
                }
                Op::Sub(a, b) => {
                    self.accum(&mut grads, *a, reduce_to(dz.clone(), self.value(*a).shape())?)?;
                    self.accum(&mut grads, *b, reduce_to(dz.neg()?, self.value(*b).shape())?)?;
                }
                Op::Mul(a, b) => {
                    let ga = reduce_to(bmul(&dz, self.value(*b))?, self.value(*a).shape())?;
                    let gb = reduce_to(bmul(&dz, self.value(*a))?, self.value(*b).shape())?;
                    self.accum(&mut grads, *a, ga)?;
                    self.accum(&mut grads, *b, gb)?;
                }
                Op::Div(a, b) => {
                    // z = a/b: ∂z/∂a = 1/b, ∂z/∂b = -z/b
                    let ga = reduce_to(bdiv(&dz, self.value(*b))?, self.value(*a).shape())?;
                    let gb = reduce_to(
                        bdiv(&bmul(&dz, &node.value)?, self.value(*b))?.neg()?,
                        self.value(*b).shape(),
                    )?;
                    self.accum(&mut grads, *a, ga)?;
                    self.accum(&mut grads, *b, gb)?;
                }
                Op::AddScalar(a) => self.accum(&mut grads, *a, dz)?,
                Op::MulScalar(a, s) => self.accum(&mut grads, *a, dz.mul_scalar(*s)?)?,
                Op::Neg(a) => self.accum(&mut grads, *a, dz.neg()?)?,
                Op::Exp(a) => self.accum(&mut grads, *a, dz.mul(&node.value)?)?,
                Op::Log(a) => self.accum(&mut grads, *a, dz.div(self.value(*a))?)?,
                Op::Tanh(a) => {
                    let one_minus_sq = node.value.mul(&node.value)?.neg()?.add_scalar(1.0)?;
                    self.accum(&mut grads, *a, dz.mul(&one_minus_sq)?)?;
                }
                Op::Sigmoid(a) => {
                    let one_minus = node.value.neg()?.add_scalar(1.0)?;
                    let local = node.value.mul(&one_minus)?;
                    self.accum(&mut grads, *a, dz.mul(&local)?)?;
                }
                Op::Matmul(a, b) => {
                    let ga = dz.matmul(&self.value(*b).transpose()?)?;
                    let gb = self.value(*a).transpose()?.matmul(&dz)?;
                    self.accum(&mut grads, *a, ga)?;
                    self.accum(&mut grads, *b, gb)?;
                }
                Op::ReduceSum(a, axes) => {
                    let ga = dz.broadcast_over_axes(self.value(*a).shape(), axes)?;
                    self.accum(&mut grads, *a, ga)?;
                }
                Op::Reshape(a) => {
                    self.accum(&mut grads, *a, dz.reshape(self.value(*a).shape())?)?;
                }
                Op::Transpose(a) => self.accum(&mut grads, *a, dz.transpose()?)?,
                Op::Concat(parts, axis) => {
                    let mut off = 0;
                    for &p in parts {
                        let extent = self.value(p).shape()[*axis];
                        let gp = dz.slice(*axis, off, off + extent)?;
                        self.accum(&mut grads, p, gp)?;
                        off += extent;
                    }
                }
                Op::Slice(a, axis, start, end) => {
                    let indices: Vec<usize> = (*start..*end).collect();
                    let extent = self.value(*a).shape()[*axis];
                    self.accum(&mut grads, *a, dz.scatter_add(*axis, &indices, extent)?)?;
                }
                Op::Gather(a, axis, indices) => {
                    let extent = self.value(*a).shape()[*axis];
                    self.accum(&mut grads, *a, dz.scatter_add(*axis, indices, extent)?)?;
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn accum(&self, grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) -> Result<()> {
        debug_assert_eq!(g.shape(), self.value(id).shape(), "gradient shape mismatch");
        grads[id.0] = Some(match grads[id.0].take() {
            None => g,
            Some(old) => old.add(&g)?,
        });
        Ok(())
    }
}

/// Result of a backward sweep: one optional gradient per node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `id`, or `None` if the node does not influence the root.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

/// Handle to a parameter registered in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

struct ParamEntry {
    name: String,
    value: Tensor,
    decay: bool,
}

/// Flat, ordered collection of named model parameters. Registration order is
/// the canonical order used for optimizer state and serialization.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    /// Registers a parameter; `decay` marks it as subject to L2 weight decay
    /// (weight matrices yes, biases no).
    pub fn register(&mut self, name: impl Into<String>, value: Tensor, decay: bool) -> ParamId {
        self.entries.push(ParamEntry { name: name.into(), value, decay });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn decays(&self, id: ParamId) -> bool {
        self.entries[id.0].decay
    }

    /// Replaces a parameter value; the shape is invariant for the lifetime
    /// of the store.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) {
        debug_assert_eq!(value.shape(), self.entries[id.0].value.shape());
        self.entries[id.0].value = value;
    }

    /// Inserts every parameter into `g` as a leaf, in registration order.
    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        let nodes = self.entries.iter().map(|e| g.input(e.value.clone())).collect();
        BoundParams { nodes }
    }
}

/// Mapping from [`ParamId`] to the [`NodeId`] of one graph's bound leaves.
pub struct BoundParams {
    nodes: Vec<NodeId>,
}

impl BoundParams {
    /// Wraps externally created leaves (one per parameter, in store order),
    /// e.g. the perturbed leaves of [`grad_check`].
    pub fn from_nodes(nodes: Vec<NodeId>) -> BoundParams {
        BoundParams { nodes }
    }

    pub fn node(&self, id: ParamId) -> NodeId {
        self.nodes[id.index()]
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }
}

/// Compares the engine's analytic gradients of a scalar function against
/// central finite differences with step `eps`. Returns the max over all
/// coordinates of |analytic − fd| / max(|analytic|, |fd|, 1e-8).
///
/// `f` must build the same computation whenever it is called with the same
/// leaf values; it is re-invoked once per perturbed coordinate.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let eval = |inputs: &[Tensor]| -> Result<(f64, Vec<Option<Tensor>>)> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|p| g.input(p.clone())).collect();
        let root = f(&mut g, &ids)?;
        let value = self_item(&g, root)?;
        let grads = g.backward(root)?;
        let out = ids.iter().map(|&id| grads.get(id).cloned()).collect();
        Ok((value, out))
    };

    let (_, analytic) = eval(params)?;
    let mut worst: f64 = 0.0;
    for (pi, p) in params.iter().enumerate() {
        let a = match &analytic[pi] {
            Some(t) => t.clone(),
            None => Tensor::zeros(p.shape()),
        };
        for ci in 0..p.numel() {
            let mut plus = p.data().to_vec();
            plus[ci] += eps;
            let mut minus = p.data().to_vec();
            minus[ci] -= eps;
            let mut params_p = params.to_vec();
            params_p[pi] = Tensor::new(p.shape().to_vec(), plus)?;
            let mut params_m = params.to_vec();
            params_m[pi] = Tensor::new(p.shape().to_vec(), minus)?;
            let fp = eval(&params_p)?.0;
            let fm = eval(&params_m)?.0;
            let fd = (fp - fm) / (2.0 * eps);
            let an = a.data()[ci];
            let err = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn self_item(g: &Graph, root: NodeId) -> Result<f64> {
    g.value(root).item()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn rand_tensor(rng: &mut ChaCha12Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn backward_sum_is_ones() {
        let mut g = Graph::new();
        let p = g.input(Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 9.0, 4.0, -0.1]).unwrap());
        let root = g.sum_all(p).unwrap();
        let grads = g.backward(root).unwrap();
        assert_eq!(grads.get(p).unwrap(), &Tensor::ones(&[2, 3]));
    }

    #[test]
    fn backward_square() {
        let mut g = Graph::new();
        let p = g.input(Tensor::new(vec![1], vec![3.0]).unwrap());
        let sq = g.mul(p, p).unwrap();
        let root = g.sum_all(sq).unwrap();
        let grads = g.backward(root).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[6.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::new();
        let p = g.input(Tensor::ones(&[2]));
        assert!(matches!(g.backward(p), Err(Error::NonScalarRoot { .. })));
    }

    #[test]
    fn two_layer_tanh_network_matches_fd() {
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let x = rand_tensor(&mut rng, &[2, 3], -1.0, 1.0);
        let w1 = rand_tensor(&mut rng, &[3, 4], -0.8, 0.8);
        let b1 = rand_tensor(&mut rng, &[1, 4], -0.2, 0.2);
        let w2 = rand_tensor(&mut rng, &[4, 1], -0.8, 0.8);
        let params = vec![x, w1, b1, w2];
        let err = grad_check(
            |g, ids| {
                let h = g.matmul(ids[0], ids[1])?;
                // replicate the bias row over the batch via ones-column matmul
                let ones = g.input(Tensor::ones(&[2, 1]));
                let bias = g.matmul(ones, ids[2])?;
                let h = g.add(h, bias)?;
                let h = g.tanh(h)?;
                let y = g.matmul(h, ids[3])?;
                g.sum_all(y)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn grad_check_trivial_cases() {
        let x = Tensor::new(vec![3], vec![0.3, -1.2, 2.0]).unwrap();
        let err = grad_check(|g, ids| g.sum_all(ids[0]), &[x], 1e-5).unwrap();
        assert!(err < 1e-10, "sum: {err}");

        let zero = Tensor::zeros(&[4]);
        let err = grad_check(
            |g, ids| {
                let e = g.exp(ids[0])?;
                g.sum_all(e)
            },
            &[zero],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "sum(exp) at 0: {err}");
    }

    /// Every op-tag's backward rule against central finite differences,
    /// 50 random seeds each.
    #[test]
    fn per_op_gradients_match_fd() {
        type Case = (&'static str, fn(&mut Graph, &[NodeId]) -> Result<NodeId>, Vec<Vec<usize>>, f64, f64);
        let cases: Vec<Case> = vec![
            ("add", |g, ids| { let y = g.add(ids[0], ids[1])?; g.sum_all(y) }, vec![vec![2, 3], vec![2, 3]], -2.0, 2.0),
            ("add_bcast", |g, ids| { let y = g.add(ids[0], ids[1])?; g.sum_all(y) }, vec![vec![2, 3], vec![]], -2.0, 2.0),
            ("sub", |g, ids| { let y = g.sub(ids[0], ids[1])?; g.sum_all(y) }, vec![vec![2, 3], vec![2, 3]], -2.0, 2.0),
            ("sub_bcast", |g, ids| { let y = g.sub(ids[0], ids[1])?; g.sum_all(y) }, vec![vec![], vec![2, 3]], -2.0, 2.0),
            ("mul", |g, ids| { let y = g.mul(ids[0], ids[1])?; g.sum_all(y) }, vec![vec![2, 3], vec![2, 3]], -2.0, 2.0),
            ("mul_bcast", |g, ids| { let y = g.mul(ids[0], ids[1])?; g.sum_all(y) }, vec![vec![], vec![2, 3]], -2.0, 2.0),
            ("div", |g, ids| { let y = g.div(ids[0], ids[1])?; g.sum_all(y) }, vec![vec![2, 3], vec![2, 3]], 0.5, 2.5),
            ("div_bcast", |g, ids| { let y = g.div(ids[0], ids[1])?; g.sum_all(y) }, vec![vec![2, 3], vec![]], 0.5, 2.5),
            ("add_scalar", |g, ids| { let y = g.add_scalar(ids[0], 1.7)?; let y = g.mul(y, y)?; g.sum_all(y) }, vec![vec![4]], -2.0, 2.0),
            ("sub_scalar", |g, ids| { let y = g.sub_scalar(ids[0], 0.4)?; let y = g.mul(y, y)?; g.sum_all(y) }, vec![vec![4]], -2.0, 2.0),
            ("mul_scalar", |g, ids| { let y = g.mul_scalar(ids[0], -2.5)?; let y = g.mul(y, y)?; g.sum_all(y) }, vec![vec![4]], -2.0, 2.0),
            ("div_scalar", |g, ids| { let y = g.div_scalar(ids[0], 3.0)?; let y = g.mul(y, y)?; g.sum_all(y) }, vec![vec![4]], -2.0, 2.0),
            ("neg", |g, ids| { let y = g.neg(ids[0])?; let y = g.exp(y)?; g.sum_all(y) }, vec![vec![4]], -2.0, 2.0),
            ("exp", |g, ids| { let y = g.exp(ids[0])?; g.sum_all(y) }, vec![vec![4]], -2.0, 2.0),
            ("log", |g, ids| { let y = g.log(ids[0])?; g.sum_all(y) }, vec![vec![4]], 0.5, 3.0),
            ("tanh", |g, ids| { let y = g.tanh(ids[0])?; g.sum_all(y) }, vec![vec![4]], -2.0, 2.0),
            ("sigmoid", |g, ids| { let y = g.sigmoid(ids[0])?; g.sum_all(y) }, vec![vec![4]], -2.0, 2.0),
            ("matmul", |g, ids| { let y = g.matmul(ids[0], ids[1])?; let y = g.mul(y, y)?; g.sum_all(y) }, vec![vec![2, 3], vec![3, 2]], -1.0, 1.0),
            ("reduce_sum", |g, ids| { let y = g.reduce_sum(ids[0], &[1])?; let y = g.mul(y, y)?; g.sum_all(y) }, vec![vec![2, 3]], -1.0, 1.0),
            ("reshape", |g, ids| { let y = g.reshape(ids[0], &[3, 2])?; let y = g.mul(y, y)?; g.sum_all(y) }, vec![vec![2, 3]], -1.0, 1.0),
            ("transpose", |g, ids| { let y = g.transpose(ids[0])?; let z = g.matmul(ids[0], y)?; g.sum_all(z) }, vec![vec![2, 3]], -1.0, 1.0),
            ("concat", |g, ids| { let y = g.concat(1, &[ids[0], ids[1]])?; let y = g.mul(y, y)?; g.sum_all(y) }, vec![vec![2, 2], vec![2, 3]], -1.0, 1.0),
            ("slice", |g, ids| { let y = g.slice(ids[0], 1, 1, 3)?; let y = g.mul(y, y)?; g.sum_all(y) }, vec![vec![2, 4]], -1.0, 1.0),
            ("gather", |g, ids| { let y = g.gather(ids[0], 1, &[2, 0, 2])?; let y = g.mul(y, y)?; g.sum_all(y) }, vec![vec![2, 3]], -1.0, 1.0),
        ];
        for (name, f, shapes, lo, hi) in cases {
            for seed in 0..50u64 {
                let mut rng = ChaCha12Rng::seed_from_u64(1000 + seed);
                let params: Vec<Tensor> =
                    shapes.iter().map(|s| rand_tensor(&mut rng, s, lo, hi)).collect();
                let err = grad_check(f, &params, 1e-5).unwrap();
                assert!(err < 1e-5, "op {name} seed {seed}: rel err {err}");
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let build = || {
            let mut g = Graph::new();
            let a = g.input(Tensor::new(vec![2, 2], vec![0.1, 0.7, -0.3, 1.9]).unwrap());
            let b = g.input(Tensor::new(vec![2, 2], vec![1.1, -0.2, 0.4, 0.9]).unwrap());
            let c = g.matmul(a, b).unwrap();
            let c = g.tanh(c).unwrap();
            let root = g.sum_all(c).unwrap();
            let grads = g.backward(root).unwrap();
            (g.value(root).item().unwrap(), grads.get(a).unwrap().clone())
        };
        let (v1, g1) = build();
        let (v2, g2) = build();
        assert_eq!(v1.to_bits(), v2.to_bits());
        assert_eq!(g1, g2);
    }

    #[test]
    fn gradient_accumulates_on_reuse() {
        // y = p·p + p ⇒ dy/dp = 2p + 1
        let mut g = Graph::new();
        let p = g.input(Tensor::new(vec![2], vec![1.5, -2.0]).unwrap());
        let sq = g.mul(p, p).unwrap();
        let s = g.add(sq, p).unwrap();
        let root = g.sum_all(s).unwrap();
        let grads = g.backward(root).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[4.0, -3.0]);
    }

    #[test]
    fn param_store_bind_and_grads() {
        let mut store = ParamStore::new();
        let w = store.register("w", Tensor::new(vec![2], vec![2.0, 3.0]).unwrap(), true);
        let b = store.register("b", Tensor::new(vec![2], vec![0.5, -0.5]).unwrap(), false);
        assert!(store.decays(w) && !store.decays(b));
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let y = g.mul(bound.node(w), bound.node(b)).unwrap();
        let root = g.sum_all(y).unwrap();
        let grads = g.backward(root).unwrap();
        assert_eq!(grads.get(bound.node(w)).unwrap().data(), &[0.5, -0.5]);
        assert_eq!(grads.get(bound.node(b)).unwrap().data(), &[2.0, 3.0]);
    }
}
