use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, ConvGeometry};
use super::params::{Gradients, ParamId, ParamStore};
use super::{invalid, Result, Tensor, TensorError};

/// Index of a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// An op whose forward value is computed by the caller and whose backward
/// rule is supplied here. Losses live outside this module and use this hook.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Gradient w.r.t. each input given the upstream gradient. `None` means
    /// the input receives no gradient.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &Tensor)
        -> Vec<Option<Tensor>>;

    /// Which smooth piece of the op the inputs fall in, for ops with
    /// kinks. Two evaluations with equal regimes are on the same piece.
    fn regime(&self, _inputs: &[&Tensor]) -> Vec<bool> {
        Vec::new()
    }
}

enum Op {
    Input,
    Leaf,
    Param(ParamId),
    Conv2d(ConvGeometry),
    MaxPool { argmax: Vec<usize> },
    Linear,
    Relu,
    Dropout { mask: Vec<f32> },
    Reshape,
    Scale(f32),
    Add,
    Sub,
    Mul,
    Sum,
    Custom(Box<dyn CustomOp>),
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    requires_grad: bool,
    /// Persistent accumulator, only kept for leaves, parameters and
    /// retained nodes.
    grad: Option<Tensor>,
    retain: bool,
}

/// Append-only tape. Nodes are stored in creation order, which is a valid
/// topological order because an op can only reference existing nodes.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        let requires_grad = match op {
            Op::Input => false,
            Op::Leaf => true,
            _ => inputs.iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
            grad: None,
            retain: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Input, vec![], value)
    }

    /// Free variable that accumulates a gradient.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, vec![], value)
    }

    /// Reads a parameter. Frozen parameters enter as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId, trainable: bool) -> NodeId {
        let value = store.get(id).clone();
        let idx = self.push(Op::Param(id), vec![], value);
        self.nodes[idx.0].requires_grad = trainable;
        idx
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Keeps the gradient of an intermediate node after `backward`.
    pub fn retain_grad(&mut self, id: NodeId) {
        self.nodes[id.0].retain = true;
    }

    /// Accumulated gradient of a leaf, parameter or retained node.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let (xs, ws, bs) = (
            self.value(x).shape().to_vec(),
            self.value(w).shape().to_vec(),
            self.value(b).shape().to_vec(),
        );
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                left: xs,
                right: ws,
            });
        }
        if bs != [ws[0]] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d bias",
                left: ws,
                right: bs,
            });
        }
        if stride == 0 {
            return Err(invalid("conv2d", "stride must be at least 1"));
        }
        if ws[2] > xs[2] + 2 * pad || ws[3] > xs[3] + 2 * pad {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d kernel larger than padded input",
                left: xs,
                right: ws,
            });
        }
        let geom = ConvGeometry {
            batch: xs[0],
            in_channels: xs[1],
            height: xs[2],
            width: xs[3],
            out_channels: ws[0],
            kernel_h: ws[2],
            kernel_w: ws[3],
            stride,
            pad,
        };
        let out = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let value = Tensor::new(vec![xs[0], ws[0], geom.out_h(), geom.out_w()], out)?;
        Ok(self.push(Op::Conv2d(geom), vec![x, w, b], value))
    }

    pub fn maxpool2d(&mut self, x: NodeId, k: usize, stride: usize) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(invalid("maxpool2d", format!("expected NCHW input, got {xs:?}")));
        }
        if k == 0 || stride == 0 {
            return Err(invalid("maxpool2d", "window and stride must be at least 1"));
        }
        if k > xs[2] || k > xs[3] {
            return Err(invalid(
                "maxpool2d",
                format!("window {k} larger than spatial extent {}x{}", xs[2], xs[3]),
            ));
        }
        let (out, argmax) =
            kernels::maxpool_forward(self.value(x).data(), xs[0] * xs[1], xs[2], xs[3], k, stride);
        let shape = vec![xs[0], xs[1], (xs[2] - k) / stride + 1, (xs[3] - k) / stride + 1];
        let value = Tensor::new(shape, out)?;
        Ok(self.push(Op::MaxPool { argmax }, vec![x], value))
    }

    /// `x · wᵀ + b` for `x: [N, F]`, `w: [G, F]`, `b: [G]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xs, ws, bs) = (
            self.value(x).shape().to_vec(),
            self.value(w).shape().to_vec(),
            self.value(b).shape().to_vec(),
        );
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                left: xs,
                right: ws,
            });
        }
        if bs != [ws[0]] {
            return Err(TensorError::ShapeMismatch {
                op: "linear bias",
                left: ws,
                right: bs,
            });
        }
        let (n, f, g) = (xs[0], xs[1], ws[0]);
        let mut out = Vec::with_capacity(n * g);
        let bias = self.value(b).data();
        for _ in 0..n {
            out.extend_from_slice(bias);
        }
        kernels::gemm(n, f, g, self.value(x).data(), false, self.value(w).data(), true, &mut out, 1.0);
        let value = Tensor::new(vec![n, g], out)?;
        Ok(self.push(Op::Linear, vec![x, w, b], value))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let out = Tensor::from_fn(v.shape(), |i| v.data()[i].max(0.0));
        self.push(Op::Relu, vec![x], out)
    }

    /// Inverted dropout with a seeded mask.
    pub fn dropout(&mut self, x: NodeId, p: f32, seed: u64) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(invalid("dropout", format!("probability {p} outside [0, 1)")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 / (1.0 - p);
        let v = self.value(x);
        let mask: Vec<f32> = (0..v.len())
            .map(|_| if rng.random::<f32>() < p { 0.0 } else { keep })
            .collect();
        let out = Tensor::from_fn(v.shape(), |i| v.data()[i] * mask[i]);
        Ok(self.push(Op::Dropout { mask }, vec![x], out))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(Op::Reshape, vec![x], value))
    }

    /// `[N, ...] -> [N, rest]`.
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).shape();
        let n = s[0];
        let rest = s[1..].iter().product();
        self.reshape(x, &[n, rest])
    }

    pub fn scale(&mut self, x: NodeId, s: f32) -> NodeId {
        let v = self.value(x);
        let out = Tensor::from_fn(v.shape(), |i| v.data()[i] * s);
        self.push(Op::Scale(s), vec![x], out)
    }

    fn binary(&mut self, op: Op, name: &'static str, a: NodeId, b: NodeId, f: fn(f32, f32) -> f32) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: name,
                left: va.shape().to_vec(),
                right: vb.shape().to_vec(),
            });
        }
        let out = Tensor::from_fn(va.shape(), |i| f(va.data()[i], vb.data()[i]));
        Ok(self.push(op, vec![a, b], out))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Add, "add", a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Sub, "sub", a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Mul, "mul", a, b, |x, y| x * y)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f32 = self.value(x).data().iter().sum();
        self.push(Op::Sum, vec![x], Tensor::scalar(s))
    }

    /// Registers an op whose forward value the caller already computed.
    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[NodeId], value: Tensor) -> NodeId {
        self.push(Op::Custom(op), inputs.to_vec(), value)
    }

    /// Reverse-mode sweep from a scalar node. Gradients of leaves and
    /// parameters accumulate across calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let shape = self.value(loss).shape().to_vec();
        if !self.value(loss).is_scalar() {
            return Err(TensorError::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(&shape, 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let input_grads = self.local_backward(node, &g)?;
            for (input, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&ig),
                    slot => *slot = Some(ig),
                }
            }
            if node.retain || matches!(node.op, Op::Leaf | Op::Param(_)) {
                let node = &mut self.nodes[idx];
                match &mut node.grad {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn local_backward(&self, node: &Node, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let input = |i: usize| &self.nodes[node.inputs[i].0];
        Ok(match &node.op {
            Op::Input | Op::Leaf | Op::Param(_) => vec![],
            Op::Conv2d(geom) => {
                let (x, w) = (input(0), input(1));
                let grads = kernels::conv2d_backward(
                    geom,
                    x.value.data(),
                    w.value.data(),
                    g.data(),
                    x.requires_grad,
                );
                vec![
                    grads
                        .dx
                        .map(|d| Tensor::new(x.value.shape().to_vec(), d))
                        .transpose()?,
                    Some(Tensor::new(w.value.shape().to_vec(), grads.dw)?),
                    Some(Tensor::new(vec![geom.out_channels], grads.db)?),
                ]
            }
            Op::MaxPool { argmax } => {
                let x = input(0);
                let mut dx = Tensor::zeros(x.value.shape());
                let d = dx.data_mut();
                for (&a, &v) in argmax.iter().zip(g.data()) {
                    d[a] += v;
                }
                vec![Some(dx)]
            }
            Op::Linear => {
                let (x, w) = (input(0), input(1));
                let (n, f) = (x.value.shape()[0], x.value.shape()[1]);
                let gdim = w.value.shape()[0];
                let dx = x.requires_grad.then(|| {
                    let mut dx = vec![0.0; n * f];
                    kernels::gemm(n, gdim, f, g.data(), false, w.value.data(), false, &mut dx, 0.0);
                    Tensor::new(vec![n, f], dx)
                });
                let mut dw = vec![0.0; gdim * f];
                kernels::gemm(gdim, n, f, g.data(), true, x.value.data(), false, &mut dw, 0.0);
                let mut db = vec![0.0; gdim];
                for row in g.data().chunks(gdim) {
                    db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                vec![
                    dx.transpose()?,
                    Some(Tensor::new(vec![gdim, f], dw)?),
                    Some(Tensor::new(vec![gdim], db)?),
                ]
            }
            Op::Relu => {
                let x = &input(0).value;
                vec![Some(Tensor::from_fn(x.shape(), |i| {
                    if x.data()[i] > 0.0 {
                        g.data()[i]
                    } else {
                        0.0
                    }
                }))]
            }
            Op::Dropout { mask } => {
                vec![Some(Tensor::from_fn(g.shape(), |i| g.data()[i] * mask[i]))]
            }
            Op::Reshape => vec![Some(g.clone().reshape(input(0).value.shape())?)],
            Op::Scale(s) => vec![Some(Tensor::from_fn(g.shape(), |i| g.data()[i] * s))],
            Op::Add => vec![Some(g.clone()), Some(g.clone())],
            Op::Sub => vec![
                Some(g.clone()),
                Some(Tensor::from_fn(g.shape(), |i| -g.data()[i])),
            ],
            Op::Mul => {
                let (a, b) = (&input(0).value, &input(1).value);
                vec![
                    Some(Tensor::from_fn(g.shape(), |i| g.data()[i] * b.data()[i])),
                    Some(Tensor::from_fn(g.shape(), |i| g.data()[i] * a.data()[i])),
                ]
            }
            Op::Sum => {
                let x = &input(0).value;
                vec![Some(Tensor::full(x.shape(), g.item()))]
            }
            Op::Custom(op) => {
                let inputs: Vec<&Tensor> = node.inputs.iter().map(|i| &self.nodes[i.0].value).collect();
                let out = op.backward(&inputs, &node.value, g);
                if out.len() != inputs.len() {
                    return Err(invalid(
                        "backward",
                        format!("custom op `{}` returned {} gradients for {} inputs", op.name(), out.len(), inputs.len()),
                    ));
                }
                out
            }
        })
    }

    /// Hash of every discrete choice made in the forward pass: ReLU signs,
    /// max-pool winners and custom-op regimes.
    pub fn regime(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Relu => {
                    i.hash(&mut h);
                    for &v in self.nodes[node.inputs[0].0].value.data() {
                        (v > 0.0).hash(&mut h);
                    }
                }
                Op::MaxPool { argmax } => {
                    i.hash(&mut h);
                    argmax.hash(&mut h);
                }
                Op::Custom(op) => {
                    let inputs: Vec<&Tensor> = node.inputs.iter().map(|i| &self.nodes[i.0].value).collect();
                    i.hash(&mut h);
                    op.regime(&inputs).hash(&mut h);
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Gradients summed per parameter over every node that read it. Shared
    /// layers read through several branches therefore receive the total.
    pub fn param_grads(&self) -> Gradients {
        let mut out = Gradients::new();
        for node in &self.nodes {
            if let (Op::Param(id), Some(g)) = (&node.op, &node.grad) {
                out.accumulate(*id, g);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_fn(&[2, 3], |i| i as f32));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn sum_of_squares_gives_twice_x() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![3], vec![-1.5, 0.0, 2.0]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[-3.0, 0.0, 4.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[2], 1.0));
        let s = g.sum(x);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 2.0]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[2], 1.0));
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn conv_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[1, 2, 5, 5]));
        let w = g.input(Tensor::zeros(&[3, 1, 3, 3]));
        let b = g.input(Tensor::zeros(&[3]));
        let msg = g.conv2d(x, w, b, 1, 0).unwrap_err().to_string();
        assert!(msg.contains("[1, 2, 5, 5]") && msg.contains("[3, 1, 3, 3]"), "{msg}");
    }

    #[test]
    fn maxpool_rejects_oversized_window() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[1, 1, 2, 2]));
        assert!(g.maxpool2d(x, 3, 1).is_err());
    }

    #[test]
    fn linear_rejects_inner_dim_mismatch() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[2, 3]));
        let w = g.input(Tensor::zeros(&[4, 2]));
        let b = g.input(Tensor::zeros(&[4]));
        assert!(g.linear(x, w, b).is_err());
    }

    #[test]
    fn relu_values_and_zero_subgradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn relu_all_negative_is_dead() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[4], -0.5));
        let y = g.relu(x);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn frozen_param_gets_no_gradient() {
        let mut store = ParamStore::new();
        let w = store.insert("w", Tensor::full(&[2, 2], 1.0)).unwrap();
        let b = store.insert("b", Tensor::zeros(&[2])).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::full(&[1, 2], 1.0));
        let wn = g.param(&store, w, false);
        let bn = g.param(&store, b, true);
        let y = g.linear(x, wn, bn).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        let grads = g.param_grads();
        assert!(grads.get(w).is_none());
        assert_eq!(grads.get(b).unwrap().data(), &[1.0, 1.0]);
    }
}
