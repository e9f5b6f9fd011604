use crate::autodiff::GradientStore;
use crate::error::{Error, Result};
use crate::labels::{LabelMask, OneHotMask};
use crate::loss::{self, DiceReduction};
use crate::numeric::{self, matmul, matmul_nt, matmul_tn, softmax_channels, Element, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Differentiable operations, one per backward rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    MatMul,
    Transpose,
    Reshape,
    Add,
    Mul,
    Scale,
    AddRowBias,
    Relu,
    Conv2d,
    SoftmaxChannels,
    Sigmoid,
    GroupLinear,
    RowSum,
    DivRows,
    Sum,
    CrossEntropy,
    SoftDice,
    Bce,
}

impl OpKind {
    pub const ALL: [OpKind; 18] = [
        OpKind::MatMul,
        OpKind::Transpose,
        OpKind::Reshape,
        OpKind::Add,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::AddRowBias,
        OpKind::Relu,
        OpKind::Conv2d,
        OpKind::SoftmaxChannels,
        OpKind::Sigmoid,
        OpKind::GroupLinear,
        OpKind::RowSum,
        OpKind::DivRows,
        OpKind::Sum,
        OpKind::CrossEntropy,
        OpKind::SoftDice,
        OpKind::Bce,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Reshape => "reshape",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::AddRowBias => "add_row_bias",
            OpKind::Relu => "relu",
            OpKind::Conv2d => "conv2d",
            OpKind::SoftmaxChannels => "softmax_channels",
            OpKind::Sigmoid => "sigmoid",
            OpKind::GroupLinear => "group_linear",
            OpKind::RowSum => "row_sum",
            OpKind::DivRows => "div_rows",
            OpKind::Sum => "sum",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::SoftDice => "soft_dice",
            OpKind::Bce => "bce",
        }
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Constant,
    /// Copy of a node's value with the gradient path cut.
    Detach,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    AddRowBias(NodeId, NodeId),
    Relu(NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        padding: usize,
    },
    SoftmaxChannels(NodeId),
    Sigmoid(NodeId),
    GroupLinear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    RowSum(NodeId),
    DivRows {
        x: NodeId,
        m: NodeId,
        eps: T,
    },
    Sum(NodeId),
    CrossEntropy {
        logits: NodeId,
        labels: LabelMask,
        probs: Tensor<T>,
    },
    SoftDice {
        p: NodeId,
        q: OneHotMask<T>,
        eps: f64,
        reduction: DiceReduction,
    },
    Bce {
        p: NodeId,
        q: OneHotMask<T>,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf | Op::Constant | Op::Detach => return None,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddRowBias(..) => OpKind::AddRowBias,
            Op::Relu(_) => OpKind::Relu,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::SoftmaxChannels(_) => OpKind::SoftmaxChannels,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::GroupLinear { .. } => OpKind::GroupLinear,
            Op::RowSum(_) => OpKind::RowSum,
            Op::DivRows { .. } => OpKind::DivRows,
            Op::Sum(_) => OpKind::Sum,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::SoftDice { .. } => OpKind::SoftDice,
            Op::Bce { .. } => OpKind::Bce,
        })
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf | Op::Constant | Op::Detach => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) | Op::AddRowBias(a, b) => vec![*a, *b],
            Op::Transpose(x)
            | Op::Reshape(x)
            | Op::Scale(x, _)
            | Op::Relu(x)
            | Op::SoftmaxChannels(x)
            | Op::Sigmoid(x)
            | Op::RowSum(x)
            | Op::Sum(x) => vec![*x],
            Op::Conv2d { x, w, b, .. } | Op::GroupLinear { x, w, b } => vec![*x, *w, *b],
            Op::DivRows { x, m, .. } => vec![*x, *m],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::SoftDice { p, .. } | Op::Bce { p, .. } => vec![*p],
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    name: Option<String>,
}

/// Reverse-mode tape. Nodes are appended in creation order, which is a
/// topological order of the computation; `backward` walks it in reverse.
#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Adjoints of every node reached by a backward pass.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    names: Vec<Option<String>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient of `id`, zeros of `shape` when nothing reached it.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor<T> {
        self.get(id).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    /// Gradients of the named parameter leaves.
    pub fn into_store(self) -> GradientStore<T> {
        let mut store = GradientStore::new();
        for (g, name) in self.grads.into_iter().zip(self.names) {
            if let (Some(g), Some(name)) = (g, name) {
                store.insert(name, g);
            }
        }
        store
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            name: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push_leaf(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool, name: Option<String>) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            name,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Named trainable leaf; its gradient lands in the [`GradientStore`].
    pub fn param(&mut self, name: impl Into<String>, value: Tensor<T>) -> NodeId {
        self.push_leaf(value, Op::Leaf, true, Some(name.into()))
    }

    /// Unnamed differentiable leaf (an input whose gradient is wanted).
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push_leaf(value, Op::Leaf, true, None)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push_leaf(value, Op::Constant, false, None)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn kind(&self, id: NodeId) -> Option<OpKind> {
        self.nodes[id.0].op.kind()
    }

    /// Kinds of all differentiable ops recorded so far.
    pub fn recorded_kinds(&self) -> Vec<OpKind> {
        self.nodes.iter().filter_map(|n| n.op.kind()).collect()
    }

    /// Same value, no gradient flows back through it.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).clone();
        self.push_leaf(v, Op::Detach, false, None)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).transpose2()?;
        Ok(self.push(v, Op::Transpose(x)))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(x).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: NodeId, k: T) -> Result<NodeId> {
        let v = self.value(x).scale(k)?;
        Ok(self.push(v, Op::Scale(x, k)))
    }

    /// `x[r, ...] + b[r]` for `x` of any rank >= 1.
    pub fn add_row_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let v = add_row_bias(self.value(x), self.value(b))?;
        Ok(self.push(v, Op::AddRowBias(x, b)))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).relu();
        self.push(v, Op::Relu(x))
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        let v = numeric::conv2d_forward(self.value(x), self.value(w), self.value(b), stride, padding)?;
        Ok(self.push(
            v,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            },
        ))
    }

    pub fn softmax_channels(&mut self, x: NodeId) -> Result<NodeId> {
        let v = softmax_channels(self.value(x))?;
        Ok(self.push(v, Op::SoftmaxChannels(x)))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).sigmoid()?;
        Ok(self.push(v, Op::Sigmoid(x)))
    }

    /// Per-group affine map: `out[g] = w[g] × x[g] + b[g]` with
    /// `x: [G×D]`, `w: [G×E×D]`, `b: [G×E]`.
    pub fn group_linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let v = group_linear(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(v, Op::GroupLinear { x, w, b }))
    }

    /// `[R×K] -> [R]`.
    pub fn row_sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.value(x).expect_rank("row_sum", 2)?;
        let v = self.value(x).sum_axis(1)?;
        Ok(self.push(v, Op::RowSum(x)))
    }

    /// `x[r, k] / (m[r] + eps)`.
    pub fn div_rows(&mut self, x: NodeId, m: NodeId, eps: T) -> Result<NodeId> {
        let v = div_rows(self.value(x), self.value(m), eps)?;
        Ok(self.push(v, Op::DivRows { x, m, eps }))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(x).sum_all()).check_finite("sum")?;
        Ok(self.push(v, Op::Sum(x)))
    }

    pub fn cross_entropy(&mut self, logits: NodeId, labels: &LabelMask) -> Result<NodeId> {
        let (l, probs) = loss::cross_entropy_parts(self.value(logits), labels)?;
        Ok(self.push(
            Tensor::scalar(l),
            Op::CrossEntropy {
                logits,
                labels: labels.clone(),
                probs,
            },
        ))
    }

    pub fn soft_dice(&mut self, p: NodeId, q: &OneHotMask<T>, eps: f64, reduction: DiceReduction) -> Result<NodeId> {
        let l = loss::soft_dice(self.value(p), q, eps, reduction)?;
        Ok(self.push(
            Tensor::scalar(l),
            Op::SoftDice {
                p,
                q: q.clone(),
                eps,
                reduction,
            },
        ))
    }

    pub fn bce(&mut self, p: NodeId, q: &OneHotMask<T>) -> Result<NodeId> {
        let l = loss::bce_probmap(self.value(p), q)?;
        Ok(self.push(Tensor::scalar(l), Op::Bce { p, q: q.clone() }))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let seed = &self.nodes[loss.0].value;
        if seed.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                seed.shape()
            )));
        }
        let mut adj: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Tensor::full(seed.shape(), T::one()));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = adj[id].take() else { continue };
            self.propagate(node, &dy, &mut adj)?;
            adj[id] = Some(dy);
        }
        adj.resize(self.nodes.len(), None);
        Ok(Gradients {
            grads: adj,
            names: self.nodes.iter().map(|n| n.name.clone()).collect(),
        })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&self, node: &Node<T>, dy: &Tensor<T>, adj: &mut [Option<Tensor<T>>]) -> Result<()> {
        let val = |id: NodeId| &self.nodes[id.0].value;
        let mut send = |id: NodeId, g: Tensor<T>| -> Result<()> {
            if !self.wants(id) {
                return Ok(());
            }
            let slot = &mut adj[id.0];
            *slot = Some(match slot.take() {
                Some(acc) => acc.add(&g)?,
                None => g,
            });
            Ok(())
        };
        match &node.op {
            Op::Leaf | Op::Constant | Op::Detach => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    send(*a, matmul_nt(dy, val(*b))?)?;
                }
                if self.wants(*b) {
                    send(*b, matmul_tn(val(*a), dy)?)?;
                }
            }
            Op::Transpose(x) => send(*x, dy.transpose2()?)?,
            Op::Reshape(x) => send(*x, dy.reshape(val(*x).shape())?)?,
            Op::Add(a, b) => {
                send(*a, dy.clone())?;
                send(*b, dy.clone())?;
            }
            Op::Mul(a, b) => {
                let (ga, gb) = (dy.mul(val(*b))?, dy.mul(val(*a))?);
                send(*a, ga)?;
                send(*b, gb)?;
            }
            Op::Scale(x, k) => send(*x, dy.scale(*k)?)?,
            Op::AddRowBias(x, b) => {
                send(*x, dy.clone())?;
                if self.wants(*b) {
                    let rows = dy.shape()[0];
                    let flat = dy.reshape(&[rows, dy.numel() / rows])?;
                    send(*b, flat.sum_axis(1)?)?;
                }
            }
            Op::Relu(x) => {
                let g = dy
                    .data()
                    .iter()
                    .zip(val(*x).data())
                    .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                    .collect();
                send(*x, Tensor::from_parts(dy.shape().to_vec(), g))?;
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            } => {
                let (dx, dw, db) = numeric::conv2d_backward(val(*x), val(*w), val(*b), *stride, *padding, dy)?;
                send(*x, dx)?;
                send(*w, dw)?;
                send(*b, db)?;
            }
            Op::SoftmaxChannels(x) => send(*x, softmax_backward(&node.value, dy))?,
            Op::Sigmoid(x) => {
                let g = dy
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(&d, &s)| d * s * (T::one() - s))
                    .collect();
                send(*x, Tensor::from_parts(dy.shape().to_vec(), g))?;
            }
            Op::GroupLinear { x, w, b } => {
                let (dx, dw, db) = group_linear_backward(val(*x), val(*w), dy);
                send(*x, dx)?;
                send(*w, dw)?;
                send(*b, db)?;
            }
            Op::RowSum(x) => {
                let (r, k) = (val(*x).shape()[0], val(*x).shape()[1]);
                let g = (0..r * k).map(|i| dy.data()[i / k]).collect();
                send(*x, Tensor::from_parts(vec![r, k], g))?;
            }
            Op::DivRows { x, m, eps } => {
                let (xv, mv) = (val(*x), val(*m));
                let (r, k) = (xv.shape()[0], xv.shape()[1]);
                let mut dx = vec![T::zero(); r * k];
                let mut dm = vec![T::zero(); r];
                for i in 0..r {
                    let den = mv.data()[i] + *eps;
                    for j in 0..k {
                        let d = dy.data()[i * k + j];
                        dx[i * k + j] = d / den;
                        dm[i] = dm[i] - d * xv.data()[i * k + j] / (den * den);
                    }
                }
                send(*x, Tensor::from_parts(vec![r, k], dx))?;
                send(*m, Tensor::from_parts(vec![r], dm).check_finite("div_rows")?)?;
            }
            Op::Sum(x) => {
                let s = dy.data()[0];
                send(*x, Tensor::full(val(*x).shape(), s))?;
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let g = loss::cross_entropy_grad(probs, labels).scale(dy.data()[0])?;
                send(*logits, g)?;
            }
            Op::SoftDice { p, q, eps, reduction } => {
                let g = loss::soft_dice_grad(val(*p), q, *eps, *reduction)?.scale(dy.data()[0])?;
                send(*p, g)?;
            }
            Op::Bce { p, q } => {
                let g = loss::bce_probmap_grad(val(*p), q).scale(dy.data()[0])?;
                send(*p, g)?;
            }
        }
        Ok(())
    }
}

pub(crate) fn add_row_bias<T: Element>(x: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() == 0 {
        return Err(Error::dim("add_row_bias", "rank >= 1", "scalar"));
    }
    let rows = x.shape()[0];
    b.expect_shape("add_row_bias", &[rows])?;
    let inner = x.numel() / rows.max(1);
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| v + b.data()[i / inner])
        .collect();
    Tensor::from_parts(x.shape().to_vec(), data).check_finite("add_row_bias")
}

pub(crate) fn group_linear<T: Element>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    x.expect_rank("group_linear", 2)?;
    w.expect_rank("group_linear", 3)?;
    let (g, d) = (x.shape()[0], x.shape()[1]);
    if w.shape()[0] != g || w.shape()[2] != d {
        return Err(Error::dim(
            "group_linear",
            format!("[{g}, E, {d}] weights"),
            format!("{:?}", w.shape()),
        ));
    }
    let e = w.shape()[1];
    b.expect_shape("group_linear", &[g, e])?;
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    let mut out = vec![T::zero(); g * e];
    for gi in 0..g {
        for o in 0..e {
            let mut acc = T::zero();
            for i in 0..d {
                acc = acc + wd[(gi * e + o) * d + i] * xd[gi * d + i];
            }
            out[gi * e + o] = acc + bd[gi * e + o];
        }
    }
    Tensor::from_parts(vec![g, e], out).check_finite("group_linear")
}

fn group_linear_backward<T: Element>(x: &Tensor<T>, w: &Tensor<T>, dy: &Tensor<T>) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (g, d) = (x.shape()[0], x.shape()[1]);
    let e = w.shape()[1];
    let (xd, wd, dyd) = (x.data(), w.data(), dy.data());
    let mut dx = vec![T::zero(); g * d];
    let mut dw = vec![T::zero(); g * e * d];
    for gi in 0..g {
        for o in 0..e {
            let dv = dyd[gi * e + o];
            for i in 0..d {
                dx[gi * d + i] = dx[gi * d + i] + wd[(gi * e + o) * d + i] * dv;
                dw[(gi * e + o) * d + i] = dv * xd[gi * d + i];
            }
        }
    }
    (
        Tensor::from_parts(vec![g, d], dx),
        Tensor::from_parts(vec![g, e, d], dw),
        dy.clone(),
    )
}

pub(crate) fn div_rows<T: Element>(x: &Tensor<T>, m: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    x.expect_rank("div_rows", 2)?;
    let (r, k) = (x.shape()[0], x.shape()[1]);
    m.expect_shape("div_rows", &[r])?;
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| v / (m.data()[i / k.max(1)] + eps))
        .collect();
    Tensor::from_parts(vec![r, k], data).check_finite("div_rows")
}

/// `dx_c = y_c (dy_c - Σ_k y_k dy_k)` at every position.
fn softmax_backward<T: Element>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let c = y.shape()[0];
    let n = y.numel() / c;
    let (yd, dd) = (y.data(), dy.data());
    let mut g = vec![T::zero(); y.numel()];
    for j in 0..n {
        let mut dot = T::zero();
        for ch in 0..c {
            dot = dot + yd[ch * n + j] * dd[ch * n + j];
        }
        for ch in 0..c {
            g[ch * n + j] = yd[ch * n + j] * (dd[ch * n + j] - dot);
        }
    }
    Tensor::from_parts(y.shape().to_vec(), g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{finite_diff_gradient, Rng, DEFAULT_STEP};

    #[test]
    fn linear_loss_gradient_is_exact() {
        let mut g = Graph::<f64>::new();
        let x = Tensor::new(&[3], vec![1.5, -2.0, 0.25]).unwrap();
        let w = g.param("w", Tensor::new(&[3], vec![0.3, 0.1, -0.7]).unwrap());
        let xc = g.constant(x.clone());
        let prod = g.mul(w, xc).unwrap();
        let loss = g.sum(prod).unwrap();
        let store = g.backward(loss).unwrap().into_store();
        assert_eq!(store.get("w").unwrap(), &x);
    }

    #[test]
    fn unused_parameter_has_no_entry() {
        let mut g = Graph::<f64>::new();
        let a = g.param("a", Tensor::full(&[2], 1.0));
        let _b = g.param("b", Tensor::full(&[2], 1.0));
        let loss = g.sum(a).unwrap();
        let store = g.backward(loss).unwrap().into_store();
        assert!(store.get("b").is_none());
        assert_eq!(store.get("a").unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn non_scalar_seed_is_rejected() {
        let mut g = Graph::<f64>::new();
        let a = g.param("a", Tensor::full(&[2], 1.0));
        assert!(matches!(g.backward(a), Err(Error::Contract(_))));
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.param("a", Tensor::full(&[2], 3.0));
        let d = g.detach(a);
        let m = g.mul(a, d).unwrap();
        let loss = g.sum(m).unwrap();
        let store = g.backward(loss).unwrap().into_store();
        // only the non-detached path: d(a*c)/da = c = 3
        assert_eq!(store.get("a").unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn shared_weight_accumulates_both_paths() {
        // loss = sum(W x) + sum(W y) with a single W node
        let mut rng = Rng::new(8);
        let w0 = Tensor::<f64>::randn(&[2, 3], 1.0, &mut rng);
        let x = Tensor::<f64>::randn(&[3, 2], 1.0, &mut rng);
        let y = Tensor::<f64>::randn(&[3, 2], 1.0, &mut rng);
        let build = |w: &Tensor<f64>| -> (Graph<f64>, NodeId) {
            let mut g = Graph::new();
            let wn = g.param("w", w.clone());
            let xn = g.constant(x.clone());
            let yn = g.constant(y.clone());
            let a = g.matmul(wn, xn).unwrap();
            let b = g.matmul(wn, yn).unwrap();
            let a = g.relu(a);
            let s = g.add(a, b).unwrap();
            let s = g.mul(s, s).unwrap();
            let l = g.sum(s).unwrap();
            (g, l)
        };
        let (g, l) = build(&w0);
        let analytic = g.backward(l).unwrap().into_store().get("w").unwrap().clone();
        let numeric = finite_diff_gradient(
            |w| {
                let (g, l) = build(w);
                Ok(g.value(l).data()[0])
            },
            &w0,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(analytic.max_abs_diff(&numeric) < 1e-6);
    }
}
