//! Reverse-mode automatic differentiation for dense MLPs.
//!
//! Values are two-dimensional tensors recorded on a [`Tape`]; every
//! operation appends a node referencing its parents, so the graph is
//! topologically ordered by construction. The backward pass appends its
//! vector-Jacobian products onto the same tape as ordinary nodes, which
//! makes second-order quantities (the critic's gradient-penalty term needs
//! the parameter gradient of an input-gradient norm) a second backward walk
//! over the extended tape rather than a separate mechanism.

use crate::{Error, Result};
use ndarray::{concatenate, s, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::io::{Read as IoRead, Write as IoWrite};
use std::path::Path;

/// Dense row-major matrix of activations or parameters. Row vectors are the
/// batch convention: a batch of n inputs of width d is an `n x d` tensor.
pub type Tensor = Array2<f64>;

/// Guard added under the square root of the gradient norm so the derivative
/// stays finite (and exactly zero) at a zero gradient, while perturbing the
/// norm itself by far less than any tested tolerance.
pub const NORM_EPS: f64 = 1e-30;

/// Index of a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Recip(NodeId),
    Sqrt(NodeId),
    Tanh(NodeId),
    LeakyRectifier(NodeId, f64),
    /// Elementwise `1` where its source is positive, `slope` elsewhere.
    /// Its derivative is zero almost everywhere and is treated as such: the
    /// node is gradient-constant, so no parent link is recorded.
    StepMask,
    SumAll(NodeId),
    RowSums(NodeId),
    ColSums(NodeId),
    BroadcastRows(NodeId),
    BroadcastCols(NodeId),
    BroadcastAll(NodeId),
    HStack(NodeId, NodeId),
    SliceCols(NodeId, usize),
    PadCols(NodeId, usize),
    Transpose(NodeId),
    Reshape(NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Append-only record of a computation. All shape requirements are
/// programming invariants of the caller and violations panic; data-driven
/// failures surface as `Result` from the model-level entry points instead.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        debug_assert!(value.iter().all(|v| !v.is_nan()), "NaN entered the tape");
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add shapes");
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "sub shapes");
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "mul shapes");
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a) + c;
        self.push(v, Op::AddScalar(a))
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::recip);
        self.push(v, Op::Recip(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn leaky_rectifier(&mut self, a: NodeId, slope: f64) -> NodeId {
        let v = self.value(a).mapv(|x| if x > 0.0 { x } else { slope * x });
        self.push(v, Op::LeakyRectifier(a, slope))
    }

    pub fn step_mask(&mut self, a: NodeId, slope: f64) -> NodeId {
        let v = self.value(a).mapv(|x| if x > 0.0 { 1.0 } else { slope });
        self.push(v, Op::StepMask)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    pub fn row_sums(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(v, Op::RowSums(a))
    }

    pub fn col_sums(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(v, Op::ColSums(a))
    }

    /// `1 x d` replicated to `n x d`.
    pub fn broadcast_rows(&mut self, a: NodeId, n: usize) -> NodeId {
        let av = self.value(a);
        assert_eq!(av.nrows(), 1, "broadcast_rows wants a row vector");
        let v = av.broadcast((n, av.ncols())).expect("broadcast").to_owned();
        self.push(v, Op::BroadcastRows(a))
    }

    /// `n x 1` replicated to `n x d`.
    pub fn broadcast_cols(&mut self, a: NodeId, d: usize) -> NodeId {
        let av = self.value(a);
        assert_eq!(av.ncols(), 1, "broadcast_cols wants a column vector");
        let col = av.index_axis(Axis(1), 0).to_owned();
        let v = Array2::from_shape_fn((av.nrows(), d), |(i, _)| col[i]);
        self.push(v, Op::BroadcastCols(a))
    }

    /// `1 x 1` replicated to `n x d`.
    pub fn broadcast_all(&mut self, a: NodeId, shape: (usize, usize)) -> NodeId {
        let av = self.value(a);
        assert_eq!(av.dim(), (1, 1), "broadcast_all wants a scalar node");
        let v = Array2::from_elem(shape, av[[0, 0]]);
        self.push(v, Op::BroadcastAll(a))
    }

    pub fn hstack(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).nrows(), self.value(b).nrows(), "hstack rows");
        let v = concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("hstack");
        self.push(v, Op::HStack(a, b))
    }

    pub fn slice_cols(&mut self, a: NodeId, lo: usize, hi: usize) -> NodeId {
        let v = self.value(a).slice(s![.., lo..hi]).to_owned();
        self.push(v, Op::SliceCols(a, lo))
    }

    /// Embed into `total` columns of zeros starting at column `left`.
    pub fn pad_cols(&mut self, a: NodeId, left: usize, total: usize) -> NodeId {
        let av = self.value(a);
        let (n, d) = av.dim();
        assert!(left + d <= total, "pad_cols bounds");
        let mut v = Array2::zeros((n, total));
        v.slice_mut(s![.., left..left + d]).assign(av);
        self.push(v, Op::PadCols(a, left))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    /// Row-major reinterpretation to a new shape with the same element count.
    pub fn reshape(&mut self, a: NodeId, shape: (usize, usize)) -> NodeId {
        let av = self.value(a);
        assert_eq!(av.len(), shape.0 * shape.1, "reshape element count");
        let v = av
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(shape)
            .expect("reshape");
        self.push(v, Op::Reshape(a))
    }

    /// Backward walk from `output`, seeded with the given cotangent. Returns
    /// the adjoint node of every pre-existing tape node (`None` where no
    /// gradient flows). The vector-Jacobian products are appended to the
    /// tape, so any returned adjoint can itself be differentiated by a
    /// second call.
    pub fn backward(&mut self, output: NodeId, seed: Tensor) -> Result<Vec<Option<NodeId>>> {
        if seed.dim() != self.value(output).dim() {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", self.value(output).dim()),
                got: format!("{:?}", seed.dim()),
            });
        }
        let horizon = output.0;
        let mut adjoint: Vec<Option<NodeId>> = vec![None; horizon + 1];
        adjoint[horizon] = Some(self.leaf(seed));

        let accumulate = |tape: &mut Tape, adj: &mut Vec<Option<NodeId>>, target: NodeId, contribution: NodeId| {
            adj[target.0] = Some(match adj[target.0] {
                None => contribution,
                Some(existing) => tape.add(existing, contribution),
            });
        };

        for i in (0..=horizon).rev() {
            let Some(grad) = adjoint[i] else { continue };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf | Op::StepMask => {}
                Op::MatMul(a, b) => {
                    let bt = self.transpose(b);
                    let ga = self.matmul(grad, bt);
                    accumulate(self, &mut adjoint, a, ga);
                    let at = self.transpose(a);
                    let gb = self.matmul(at, grad);
                    accumulate(self, &mut adjoint, b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(self, &mut adjoint, a, grad);
                    accumulate(self, &mut adjoint, b, grad);
                }
                Op::Sub(a, b) => {
                    accumulate(self, &mut adjoint, a, grad);
                    let neg = self.scale(grad, -1.0);
                    accumulate(self, &mut adjoint, b, neg);
                }
                Op::Mul(a, b) => {
                    let ga = self.mul(grad, b);
                    accumulate(self, &mut adjoint, a, ga);
                    let gb = self.mul(grad, a);
                    accumulate(self, &mut adjoint, b, gb);
                }
                Op::Scale(a, c) => {
                    let ga = self.scale(grad, c);
                    accumulate(self, &mut adjoint, a, ga);
                }
                Op::AddScalar(a) => accumulate(self, &mut adjoint, a, grad),
                Op::Recip(a) => {
                    // d(1/x)/dx = -(1/x)^2, expressed through this node's
                    // own output so the rule stays differentiable.
                    let v2 = self.mul(NodeId(i), NodeId(i));
                    let gv = self.mul(grad, v2);
                    let ga = self.scale(gv, -1.0);
                    accumulate(self, &mut adjoint, a, ga);
                }
                Op::Sqrt(a) => {
                    let inv = self.recip(NodeId(i));
                    let gv = self.mul(grad, inv);
                    let ga = self.scale(gv, 0.5);
                    accumulate(self, &mut adjoint, a, ga);
                }
                Op::Tanh(a) => {
                    let v2 = self.mul(NodeId(i), NodeId(i));
                    let neg = self.scale(v2, -1.0);
                    let sech2 = self.add_scalar(neg, 1.0);
                    let ga = self.mul(grad, sech2);
                    accumulate(self, &mut adjoint, a, ga);
                }
                Op::LeakyRectifier(a, slope) => {
                    let mask = self.step_mask(a, slope);
                    let ga = self.mul(grad, mask);
                    accumulate(self, &mut adjoint, a, ga);
                }
                Op::SumAll(a) => {
                    let shape = self.value(a).dim();
                    let ga = self.broadcast_all(grad, shape);
                    accumulate(self, &mut adjoint, a, ga);
                }
                Op::RowSums(a) => {
                    let d = self.value(a).ncols();
                    let ga = self.broadcast_cols(grad, d);
                    accumulate(self, &mut adjoint, a, ga);
                }
                Op::ColSums(a) => {
                    let n = self.value(a).nrows();
                    let ga = self.broadcast_rows(grad, n);
                    accumulate(self, &mut adjoint, a, ga);
                }
                Op::BroadcastRows(a) => {
                    let ga = self.col_sums(grad);
                    accumulate(self, &mut adjoint, a, ga);
                }
                Op::BroadcastCols(a) => {
                    let ga = self.row_sums(grad);
                    accumulate(self, &mut adjoint, a, ga);
                }
                Op::BroadcastAll(a) => {
                    let ga = self.sum_all(grad);
                    accumulate(self, &mut adjoint, a, ga);
                }
                Op::HStack(a, b) => {
                    let da = self.value(a).ncols();
                    let db = self.value(b).ncols();
                    let ga = self.slice_cols(grad, 0, da);
                    accumulate(self, &mut adjoint, a, ga);
                    let gb = self.slice_cols(grad, da, da + db);
                    accumulate(self, &mut adjoint, b, gb);
                }
                Op::SliceCols(a, lo) => {
                    let total = self.value(a).ncols();
                    let ga = self.pad_cols(grad, lo, total);
                    accumulate(self, &mut adjoint, a, ga);
                }
                Op::PadCols(a, left) => {
                    let d = self.value(a).ncols();
                    let ga = self.slice_cols(grad, left, left + d);
                    accumulate(self, &mut adjoint, a, ga);
                }
                Op::Transpose(a) => {
                    let ga = self.transpose(grad);
                    accumulate(self, &mut adjoint, a, ga);
                }
                Op::Reshape(a) => {
                    let shape = self.value(a).dim();
                    let ga = self.reshape(grad, shape);
                    accumulate(self, &mut adjoint, a, ga);
                }
            }
        }
        Ok(adjoint)
    }

    /// Adjoints of `wrt` for a scalar (`1 x 1`) output, seeded with one.
    /// Nodes receiving no gradient get a zero leaf of their own shape.
    pub fn grad(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
        let dim = self.value(output).dim();
        if dim != (1, 1) {
            return Err(Error::NonScalarOutput(dim.0 * dim.1));
        }
        let adjoint = self.backward(output, Array2::from_elem((1, 1), 1.0))?;
        Ok(wrt
            .iter()
            .map(|id| match adjoint[id.0] {
                Some(g) => g,
                None => {
                    let z = Array2::zeros(self.value(*id).dim());
                    self.leaf(z)
                }
            })
            .collect())
    }
}

/// Activation applied after a dense layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    /// Piecewise-linear rectifier with the given negative-side slope.
    LeakyRectifier(f64),
    /// Hyperbolic tangent; smooth, used wherever finite-difference
    /// validation needs twice-differentiable nets.
    SmoothTanh,
    Identity,
}

/// One structural piece of an MLP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Segment {
    Dense { output: usize, activation: Activation },
    /// Skip connection around a stack of dense layers; the stack must return
    /// to the width it entered with.
    Residual { layers: Vec<(usize, Activation)> },
}

/// Architecture of a fully connected network with optional residual blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input: usize,
    pub segments: Vec<Segment>,
}

impl MlpSpec {
    /// Plain feedforward stack without residual blocks.
    pub fn feedforward(input: usize, layers: &[(usize, Activation)]) -> Self {
        MlpSpec {
            input,
            segments: layers
                .iter()
                .map(|&(output, activation)| Segment::Dense { output, activation })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input == 0 {
            return Err(Error::InvalidConfig("input width must be positive".into()));
        }
        let mut width = self.input;
        for seg in &self.segments {
            match seg {
                Segment::Dense { output, .. } => {
                    if *output == 0 {
                        return Err(Error::InvalidConfig("layer width must be positive".into()));
                    }
                    width = *output;
                }
                Segment::Residual { layers } => {
                    if layers.is_empty() {
                        return Err(Error::InvalidConfig("empty residual block".into()));
                    }
                    let inner_out = layers.last().map(|l| l.0).unwrap_or(width);
                    if layers.iter().any(|l| l.0 == 0) {
                        return Err(Error::InvalidConfig("layer width must be positive".into()));
                    }
                    if inner_out != width {
                        return Err(Error::ShapeMismatch {
                            expected: format!("residual block returning to width {width}"),
                            got: format!("{inner_out}"),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn output_width(&self) -> usize {
        let mut width = self.input;
        for seg in &self.segments {
            if let Segment::Dense { output, .. } = seg {
                width = *output;
            }
        }
        width
    }

    /// `(input, output, activation, last_of_residual)` for each dense layer
    /// in order, flattening residual blocks.
    fn layer_plan(&self) -> Vec<(usize, usize, Activation, bool)> {
        let mut plan = Vec::new();
        let mut width = self.input;
        for seg in &self.segments {
            match seg {
                Segment::Dense { output, activation } => {
                    plan.push((width, *output, *activation, false));
                    width = *output;
                }
                Segment::Residual { layers } => {
                    let mut w = width;
                    for (k, &(out, act)) in layers.iter().enumerate() {
                        plan.push((w, out, act, k + 1 == layers.len()));
                        w = out;
                    }
                }
            }
        }
        plan
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_plan()
            .iter()
            .map(|(i, o, _, _)| i * o + o)
            .sum()
    }
}

/// Weights and biases in layer order: `W0, b0, W1, b1, ...` with `W` of
/// shape `in x out` and `b` of shape `1 x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub tensors: Vec<Tensor>,
}

impl MlpParams {
    /// Scaled-normal initialization (variance `2/fan_in` for rectifiers,
    /// `1/fan_in` otherwise), zero biases. The closing layer of every
    /// residual block is zeroed so each block starts as the identity.
    pub fn init(spec: &MlpSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let mut tensors = Vec::new();
        for (fan_in, fan_out, act, closes_residual) in spec.layer_plan() {
            let std = match act {
                Activation::LeakyRectifier(_) => (2.0 / fan_in as f64).sqrt(),
                _ => (1.0 / fan_in as f64).sqrt(),
            };
            let w = if closes_residual {
                Array2::zeros((fan_in, fan_out))
            } else {
                Array2::from_shape_fn((fan_in, fan_out), |_| {
                    let z: f64 = StandardNormal.sample(rng);
                    std * z
                })
            };
            tensors.push(w);
            tensors.push(Array2::zeros((1, fan_out)));
        }
        Ok(MlpParams { tensors })
    }

    pub fn zeros(spec: &MlpSpec) -> Result<Self> {
        spec.validate()?;
        let tensors = spec
            .layer_plan()
            .iter()
            .flat_map(|&(i, o, _, _)| [Array2::zeros((i, o)), Array2::zeros((1, o))])
            .collect();
        Ok(MlpParams { tensors })
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Record every parameter tensor as a leaf on the tape.
    pub fn insert(&self, tape: &mut Tape) -> Vec<NodeId> {
        self.tensors.iter().map(|t| tape.leaf(t.clone())).collect()
    }
}

/// Run the network on a batch already on the tape. Returns the output node.
pub fn forward(
    spec: &MlpSpec,
    params: &[NodeId],
    tape: &mut Tape,
    input: NodeId,
) -> Result<NodeId> {
    spec.validate()?;
    let plan = spec.layer_plan();
    if params.len() != 2 * plan.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} parameter tensors", 2 * plan.len()),
            got: format!("{}", params.len()),
        });
    }
    if tape.value(input).ncols() != spec.input {
        return Err(Error::ShapeMismatch {
            expected: format!("input width {}", spec.input),
            got: format!("{}", tape.value(input).ncols()),
        });
    }
    let n = tape.value(input).nrows();
    let mut x = input;
    let mut layer = 0usize;
    let mut width = spec.input;
    for seg in &spec.segments {
        match seg {
            Segment::Dense { output, activation } => {
                x = dense(tape, x, params[2 * layer], params[2 * layer + 1], *activation, n);
                layer += 1;
                width = *output;
            }
            Segment::Residual { layers } => {
                let entry = x;
                let mut y = x;
                for &(_, act) in layers {
                    y = dense(tape, y, params[2 * layer], params[2 * layer + 1], act, n);
                    layer += 1;
                }
                x = tape.add(entry, y);
            }
        }
    }
    let _ = width;
    Ok(x)
}

fn dense(
    tape: &mut Tape,
    x: NodeId,
    w: NodeId,
    b: NodeId,
    activation: Activation,
    n: usize,
) -> NodeId {
    let z = tape.matmul(x, w);
    let bias = tape.broadcast_rows(b, n);
    let pre = tape.add(z, bias);
    match activation {
        Activation::LeakyRectifier(slope) => tape.leaky_rectifier(pre, slope),
        Activation::SmoothTanh => tape.tanh(pre),
        Activation::Identity => pre,
    }
}

/// Gradient of the summed scalar outputs with respect to the input batch.
/// Rows are independent, so row i of the result is the gradient of the
/// critic value at row i.
pub fn input_gradient(spec: &MlpSpec, params: &MlpParams, x: &Tensor) -> Result<Tensor> {
    if spec.output_width() != 1 {
        return Err(Error::NonScalarOutput(spec.output_width()));
    }
    let mut tape = Tape::new();
    let ids = params.insert(&mut tape);
    let xid = tape.leaf(x.clone());
    let out = forward(spec, &ids, &mut tape, xid)?;
    let total = tape.sum_all(out);
    let grads = tape.grad(total, &[xid])?;
    Ok(tape.value(grads[0]).clone())
}

/// Value and parameter gradients of the mean squared deviation of the
/// critic's input-gradient norm from one:
/// `mean_i (||grad_x D(x_i)|| - 1)^2` over the batch.
/// This is the double-backprop path: the first backward pass is recorded on
/// the tape and differentiated again.
pub fn grad_penalty_backward(
    spec: &MlpSpec,
    params: &MlpParams,
    x_hat: &Tensor,
) -> Result<(f64, Vec<Tensor>)> {
    if spec.output_width() != 1 {
        return Err(Error::NonScalarOutput(spec.output_width()));
    }
    let mut tape = Tape::new();
    let ids = params.insert(&mut tape);
    let xid = tape.leaf(x_hat.clone());
    let penalty = penalty_node(spec, &ids, &mut tape, xid)?;
    let grads = tape.grad(penalty, &ids)?;
    let value = tape.value(penalty)[[0, 0]];
    Ok((value, grads.iter().map(|g| tape.value(*g).clone()).collect()))
}

/// Build the gradient-penalty scalar node on an existing tape. Exposed for
/// the training loop, which combines it with other loss terms before the
/// parameter backward pass.
pub fn penalty_node(
    spec: &MlpSpec,
    params: &[NodeId],
    tape: &mut Tape,
    x_hat: NodeId,
) -> Result<NodeId> {
    let n = tape.value(x_hat).nrows();
    let out = forward(spec, params, tape, x_hat)?;
    let total = tape.sum_all(out);
    let grads = tape.grad(total, &[x_hat])?;
    penalty_of_gradient(tape, grads[0], n)
}

/// `mean_i (||g_i|| - 1)^2` for a batch of gradient rows already on the tape.
pub fn penalty_of_gradient(tape: &mut Tape, g: NodeId, n: usize) -> Result<NodeId> {
    let sq = tape.mul(g, g);
    let rs = tape.row_sums(sq);
    let guarded = tape.add_scalar(rs, NORM_EPS);
    let norm = tape.sqrt(guarded);
    let dev = tape.add_scalar(norm, -1.0);
    let dev2 = tape.mul(dev, dev);
    let total = tape.sum_all(dev2);
    Ok(tape.scale(total, 1.0 / n as f64))
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"MLPCKPT\0";
const CHECKPOINT_VERSION: u32 = 1;

/// `rows, cols` as u64 little-endian, then row-major f64 little-endian.
pub(crate) fn write_tensor(out: &mut impl IoWrite, t: &Tensor) -> std::io::Result<()> {
    out.write_all(&(t.nrows() as u64).to_le_bytes())?;
    out.write_all(&(t.ncols() as u64).to_le_bytes())?;
    for v in t.iter() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Counterpart of [`write_tensor`]; rejects absurd sizes and non-finite
/// values so a truncated or corrupted file fails loudly.
pub(crate) fn read_tensor(file: &mut impl IoRead) -> Result<Tensor> {
    let mut u64buf = [0u8; 8];
    let io_err = |e| Error::MalformedCheckpoint(format!("tensor read: {e}"));
    file.read_exact(&mut u64buf).map_err(io_err)?;
    let rows = u64::from_le_bytes(u64buf) as usize;
    file.read_exact(&mut u64buf).map_err(io_err)?;
    let cols = u64::from_le_bytes(u64buf) as usize;
    if rows.saturating_mul(cols) > 1 << 26 {
        return Err(Error::MalformedCheckpoint("oversized tensor".into()));
    }
    let mut data = Vec::with_capacity(rows * cols);
    let mut f64buf = [0u8; 8];
    for _ in 0..rows * cols {
        file.read_exact(&mut f64buf).map_err(io_err)?;
        let v = f64::from_le_bytes(f64buf);
        if !v.is_finite() {
            return Err(Error::MalformedCheckpoint("non-finite parameter".into()));
        }
        data.push(v);
    }
    Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::MalformedCheckpoint(e.to_string()))
}

/// Serialize spec and parameters: magic, version, JSON-encoded spec, then
/// each tensor as `rows, cols, row-major f64` values, all little-endian.
pub fn write_checkpoint(path: impl AsRef<Path>, spec: &MlpSpec, params: &MlpParams) -> Result<()> {
    let path = path.as_ref();
    let err = |e| Error::io(path.display().to_string(), e);
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(err)?);
    let mut write = |bytes: &[u8]| out.write_all(bytes).map_err(err);
    write(CHECKPOINT_MAGIC)?;
    write(&CHECKPOINT_VERSION.to_le_bytes())?;
    let spec_json = serde_json::to_vec(spec).expect("spec serializes");
    write(&(spec_json.len() as u64).to_le_bytes())?;
    write(&spec_json)?;
    write(&(params.tensors.len() as u64).to_le_bytes())?;
    for t in &params.tensors {
        write_tensor(&mut out, t).map_err(err)?;
    }
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<(MlpSpec, MlpParams)> {
    let path = path.as_ref();
    let err = |e| Error::io(path.display().to_string(), e);
    let mut file = std::io::BufReader::new(std::fs::File::open(path).map_err(err)?);
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic).map_err(err)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::MalformedCheckpoint("bad magic".into()));
    }
    let mut u32buf = [0u8; 4];
    file.read_exact(&mut u32buf).map_err(err)?;
    let version = u32::from_le_bytes(u32buf);
    if version != CHECKPOINT_VERSION {
        return Err(Error::MalformedCheckpoint(format!(
            "unsupported version {version}"
        )));
    }
    let mut u64buf = [0u8; 8];
    let mut read_u64 = |file: &mut std::io::BufReader<std::fs::File>| -> Result<u64> {
        file.read_exact(&mut u64buf).map_err(err)?;
        Ok(u64::from_le_bytes(u64buf))
    };
    let spec_len = read_u64(&mut file)? as usize;
    if spec_len > 1 << 20 {
        return Err(Error::MalformedCheckpoint("oversized spec header".into()));
    }
    let mut spec_json = vec![0u8; spec_len];
    file.read_exact(&mut spec_json).map_err(err)?;
    let spec: MlpSpec = serde_json::from_slice(&spec_json)
        .map_err(|e| Error::MalformedCheckpoint(format!("spec: {e}")))?;
    spec.validate()
        .map_err(|e| Error::MalformedCheckpoint(format!("spec: {e}")))?;
    let count = read_u64(&mut file)? as usize;
    if count != 2 * spec.layer_plan().len() {
        return Err(Error::MalformedCheckpoint(format!(
            "expected {} tensors, header says {count}",
            2 * spec.layer_plan().len()
        )));
    }
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        tensors.push(read_tensor(&mut file)?);
    }
    let params = MlpParams { tensors };
    let expected: Vec<(usize, usize)> = spec
        .layer_plan()
        .iter()
        .flat_map(|&(i, o, _, _)| [(i, o), (1, o)])
        .collect();
    for (t, want) in params.tensors.iter().zip(&expected) {
        if t.dim() != *want {
            return Err(Error::MalformedCheckpoint(format!(
                "tensor shape {:?} does not match spec {:?}",
                t.dim(),
                want
            )));
        }
    }
    Ok((spec, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn smooth_spec(input: usize) -> MlpSpec {
        MlpSpec::feedforward(
            input,
            &[
                (7, Activation::SmoothTanh),
                (5, Activation::SmoothTanh),
                (1, Activation::Identity),
            ],
        )
    }

    fn random_input(rng: &mut ChaCha20Rng, n: usize, d: usize) -> Tensor {
        Array2::from_shape_fn((n, d), |_| {
            let z: f64 = StandardNormal.sample(rng);
            z
        })
    }

    /// Scalar loss as a plain function of flat parameters, for
    /// finite-difference oracles.
    fn loss_value(spec: &MlpSpec, params: &MlpParams, x: &Tensor, loss: LossKind) -> f64 {
        match loss {
            LossKind::SumOutputs => {
                let mut tape = Tape::new();
                let ids = params.insert(&mut tape);
                let xid = tape.leaf(x.clone());
                let out = forward(spec, &ids, &mut tape, xid).unwrap();
                tape.value(out).sum()
            }
            LossKind::GradPenalty => {
                let (v, _) = grad_penalty_backward(spec, params, x).unwrap();
                v
            }
        }
    }

    #[derive(Clone, Copy)]
    enum LossKind {
        SumOutputs,
        GradPenalty,
    }

    fn central_difference(
        spec: &MlpSpec,
        params: &MlpParams,
        x: &Tensor,
        loss: LossKind,
    ) -> Vec<Tensor> {
        let h = 1e-4;
        let mut grads = Vec::new();
        for ti in 0..params.tensors.len() {
            let mut g = Array2::zeros(params.tensors[ti].dim());
            for idx in 0..params.tensors[ti].len() {
                let (r, c) = (idx / g.ncols(), idx % g.ncols());
                let mut plus = params.clone();
                plus.tensors[ti][[r, c]] += h;
                let mut minus = params.clone();
                minus.tensors[ti][[r, c]] -= h;
                g[[r, c]] =
                    (loss_value(spec, &plus, x, loss) - loss_value(spec, &minus, x, loss))
                        / (2.0 * h);
            }
            grads.push(g);
        }
        grads
    }

    fn assert_grads_close(got: &[Tensor], want: &[Tensor], tol: f64) {
        for (g, w) in got.iter().zip(want) {
            for (a, b) in g.iter().zip(w.iter()) {
                let denom = b.abs().max(1e-6);
                assert!(
                    (a - b).abs() / denom <= tol,
                    "gradient mismatch: {a} vs finite difference {b}"
                );
            }
        }
    }

    #[test]
    fn square_function_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(array![[3.0]]);
        let y = tape.mul(x, x);
        let g = tape.grad(y, &[x]).unwrap();
        assert_eq!(tape.value(g[0])[[0, 0]], 6.0);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(array![[1.0, 2.0]]);
        let c = tape.leaf(array![[5.0]]);
        let y = tape.sum_all(c);
        let g = tape.grad(y, &[x]).unwrap();
        assert_eq!(tape.value(g[0]), &array![[0.0, 0.0]]);
    }

    #[test]
    fn identity_layer_is_matrix_product() {
        let spec = MlpSpec::feedforward(3, &[(2, Activation::Identity)]);
        let mut params = MlpParams::zeros(&spec).unwrap();
        params.tensors[0] = array![[1.0, 4.0], [2.0, 5.0], [3.0, 6.0]];
        let mut tape = Tape::new();
        let ids = params.insert(&mut tape);
        let x = tape.leaf(array![[1.0, 1.0, 1.0], [0.0, 1.0, 0.0]]);
        let out = forward(&spec, &ids, &mut tape, x).unwrap();
        assert_eq!(tape.value(out), &array![[6.0, 15.0], [2.0, 5.0]]);
    }

    #[test]
    fn two_layer_forward_matches_straight_line_arithmetic() {
        let mut rng = ChaCha20Rng::seed_from_u64(42);
        let spec = MlpSpec::feedforward(
            3,
            &[(4, Activation::SmoothTanh), (2, Activation::Identity)],
        );
        let params = MlpParams::init(&spec, &mut rng).unwrap();
        let x = random_input(&mut rng, 5, 3);

        let mut tape = Tape::new();
        let ids = params.insert(&mut tape);
        let xid = tape.leaf(x.clone());
        let out = forward(&spec, &ids, &mut tape, xid).unwrap();

        let h = x.dot(&params.tensors[0]) + &params.tensors[1].broadcast((5, 4)).unwrap();
        let h = h.mapv(f64::tanh);
        let y = h.dot(&params.tensors[2]) + &params.tensors[3].broadcast((5, 2)).unwrap();
        for (a, b) in tape.value(out).iter().zip(y.iter()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn residual_block_with_zero_closing_layer_is_identity() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let spec = MlpSpec {
            input: 4,
            segments: vec![Segment::Residual {
                layers: vec![(8, Activation::SmoothTanh), (4, Activation::Identity)],
            }],
        };
        let params = MlpParams::init(&spec, &mut rng).unwrap();
        let x = random_input(&mut rng, 3, 4);
        let mut tape = Tape::new();
        let ids = params.insert(&mut tape);
        let xid = tape.leaf(x.clone());
        let out = forward(&spec, &ids, &mut tape, xid).unwrap();
        assert_eq!(tape.value(out), &x);

        // The gradient through the identity block equals the seed exactly.
        let total = tape.sum_all(out);
        let g = tape.grad(total, &[xid]).unwrap();
        assert_eq!(tape.value(g[0]), &Array2::from_elem((3, 4), 1.0));
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        for seed in 0..10u64 {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let spec = smooth_spec(4);
            let params = MlpParams::init(&spec, &mut rng).unwrap();
            let x = random_input(&mut rng, 3, 4);

            let mut tape = Tape::new();
            let ids = params.insert(&mut tape);
            let xid = tape.leaf(x.clone());
            let out = forward(&spec, &ids, &mut tape, xid).unwrap();
            let total = tape.sum_all(out);
            let grads = tape.grad(total, &ids).unwrap();
            let got: Vec<Tensor> = grads.iter().map(|g| tape.value(*g).clone()).collect();

            let fd = central_difference(&spec, &params, &x, LossKind::SumOutputs);
            assert_grads_close(&got, &fd, 1e-5);
        }
    }

    #[test]
    fn leaky_rectifier_gradients_match_away_from_kinks() {
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        let spec = MlpSpec::feedforward(
            3,
            &[(6, Activation::LeakyRectifier(0.2)), (1, Activation::Identity)],
        );
        'outer: for _attempt in 0..50 {
            let params = MlpParams::init(&spec, &mut rng).unwrap();
            let x = random_input(&mut rng, 2, 3);
            // Resample when any pre-activation sits near the kink, where
            // finite differences straddle the nondifferentiable point.
            let pre = x.dot(&params.tensors[0]);
            if pre.iter().any(|v| v.abs() < 1e-3) {
                continue 'outer;
            }
            let mut tape = Tape::new();
            let ids = params.insert(&mut tape);
            let xid = tape.leaf(x.clone());
            let out = forward(&spec, &ids, &mut tape, xid).unwrap();
            let total = tape.sum_all(out);
            let grads = tape.grad(total, &ids).unwrap();
            let got: Vec<Tensor> = grads.iter().map(|g| tape.value(*g).clone()).collect();
            let fd = central_difference(&spec, &params, &x, LossKind::SumOutputs);
            assert_grads_close(&got, &fd, 1e-5);
            return;
        }
        panic!("could not sample a kink-free configuration");
    }

    #[test]
    fn input_gradient_of_linear_critic_is_weight_vector() {
        let spec = MlpSpec::feedforward(3, &[(1, Activation::Identity)]);
        let mut params = MlpParams::zeros(&spec).unwrap();
        params.tensors[0] = array![[0.5], [-1.0], [2.0]];
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let x = random_input(&mut rng, 4, 3);
        let g = input_gradient(&spec, &params, &x).unwrap();
        for i in 0..4 {
            assert_eq!(g.row(i).to_vec(), vec![0.5, -1.0, 2.0]);
        }
    }

    #[test]
    fn input_gradient_of_half_squared_norm_is_input() {
        // D(x) = ||x||^2 / 2 expressed on the tape directly.
        let x = array![[1.0, -2.0], [0.5, 3.0]];
        let mut tape = Tape::new();
        let xid = tape.leaf(x.clone());
        let sq = tape.mul(xid, xid);
        let total = tape.sum_all(sq);
        let half = tape.scale(total, 0.5);
        let g = tape.grad(half, &[xid]).unwrap();
        assert_eq!(tape.value(g[0]), &x);
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(23);
        let spec = smooth_spec(4);
        let params = MlpParams::init(&spec, &mut rng).unwrap();
        let x = random_input(&mut rng, 1, 4);
        let g = input_gradient(&spec, &params, &x).unwrap();
        let h = 1e-4;
        for j in 0..4 {
            let mut plus = x.clone();
            plus[[0, j]] += h;
            let mut minus = x.clone();
            minus[[0, j]] -= h;
            let out = |x: &Tensor| {
                let mut tape = Tape::new();
                let ids = params.insert(&mut tape);
                let xid = tape.leaf(x.clone());
                let o = forward(&spec, &ids, &mut tape, xid).unwrap();
                tape.value(o)[[0, 0]]
            };
            let fd = (out(&plus) - out(&minus)) / (2.0 * h);
            assert_relative_eq!(g[[0, j]], fd, max_relative = 1e-5, epsilon = 1e-9);
        }
    }

    #[test]
    fn unit_norm_linear_critic_has_zero_penalty_and_gradients() {
        let spec = MlpSpec::feedforward(2, &[(1, Activation::Identity)]);
        let mut params = MlpParams::zeros(&spec).unwrap();
        let inv = 1.0 / 2.0f64.sqrt();
        params.tensors[0] = array![[inv], [inv]];
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let x = random_input(&mut rng, 6, 2);
        let (value, grads) = grad_penalty_backward(&spec, &params, &x).unwrap();
        assert!(value.abs() <= 1e-12, "penalty {value}");
        for g in &grads {
            assert!(g.iter().all(|v| v.abs() <= 1e-10), "nonzero gradient {g:?}");
        }
    }

    #[test]
    fn one_dimensional_scaling_critic_penalty_by_hand() {
        // D(x) = a x with a = 2: penalty (|a|-1)^2 = 1, d/da = 2(|a|-1) = 2.
        let spec = MlpSpec::feedforward(1, &[(1, Activation::Identity)]);
        let mut params = MlpParams::zeros(&spec).unwrap();
        params.tensors[0] = array![[2.0]];
        let x = array![[0.3], [-1.7], [4.0]];
        let (value, grads) = grad_penalty_backward(&spec, &params, &x).unwrap();
        assert!((value - 1.0).abs() <= 1e-12);
        assert!((grads[0][[0, 0]] - 2.0).abs() <= 1e-9);
        assert!(grads[1][[0, 0]].abs() <= 1e-12);
    }

    #[test]
    fn penalty_parameter_gradients_match_finite_differences() {
        for seed in 0..10u64 {
            let mut rng = ChaCha20Rng::seed_from_u64(100 + seed);
            let spec = smooth_spec(3);
            let params = MlpParams::init(&spec, &mut rng).unwrap();
            let x = random_input(&mut rng, 4, 3);
            let (_, got) = grad_penalty_backward(&spec, &params, &x).unwrap();
            let fd = central_difference(&spec, &params, &x, LossKind::GradPenalty);
            assert_grads_close(&got, &fd, 1e-4);
        }
    }

    #[test]
    fn backward_is_linear_in_seed() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let spec = smooth_spec(3);
        let params = MlpParams::init(&spec, &mut rng).unwrap();
        let x = random_input(&mut rng, 2, 3);

        let run = |factor: f64| -> Vec<Tensor> {
            let mut tape = Tape::new();
            let ids = params.insert(&mut tape);
            let xid = tape.leaf(x.clone());
            let out = forward(&spec, &ids, &mut tape, xid).unwrap();
            let seed = Array2::from_elem(tape.value(out).dim(), factor);
            let adj = tape.backward(out, seed).unwrap();
            ids.iter()
                .map(|id| tape.value(adj[id.0].unwrap()).clone())
                .collect()
        };
        let g1 = run(1.0);
        let g2 = run(2.0);
        for (a, b) in g1.iter().zip(&g2) {
            // Doubling is exact in binary floating point.
            assert_eq!(&(a * 2.0), b);
        }
    }

    #[test]
    fn gradients_are_bit_deterministic() {
        let mut rng = ChaCha20Rng::seed_from_u64(31);
        let spec = smooth_spec(5);
        let params = MlpParams::init(&spec, &mut rng).unwrap();
        let x = random_input(&mut rng, 3, 5);
        let (v1, g1) = grad_penalty_backward(&spec, &params, &x).unwrap();
        let (v2, g2) = grad_penalty_backward(&spec, &params, &x).unwrap();
        assert_eq!(v1.to_bits(), v2.to_bits());
        for (a, b) in g1.iter().zip(&g2) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn reshape_round_trips_values_and_gradients() {
        let mut tape = Tape::new();
        let x = tape.leaf(array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        let r = tape.reshape(x, (1, 6));
        assert_eq!(tape.value(r), &array![[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]]);
        let w = tape.leaf(array![[1.0], [2.0], [3.0], [4.0], [5.0], [6.0]]);
        let y = tape.matmul(r, w);
        let g = tape.grad(y, &[x]).unwrap();
        assert_eq!(tape.value(g[0]), &array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
    }

    #[test]
    fn nonscalar_output_is_rejected() {
        let spec = MlpSpec::feedforward(3, &[(2, Activation::Identity)]);
        let params = MlpParams::zeros(&spec).unwrap();
        let x = Array2::zeros((2, 3));
        assert!(matches!(
            input_gradient(&spec, &params, &x),
            Err(Error::NonScalarOutput(2))
        ));
    }

    #[test]
    fn spec_validation_rejects_unbalanced_residual() {
        let spec = MlpSpec {
            input: 4,
            segments: vec![Segment::Residual {
                layers: vec![(8, Activation::SmoothTanh), (5, Activation::Identity)],
            }],
        };
        assert!(matches!(spec.validate(), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let mut rng = ChaCha20Rng::seed_from_u64(77);
        let spec = MlpSpec {
            input: 6,
            segments: vec![
                Segment::Dense {
                    output: 8,
                    activation: Activation::LeakyRectifier(0.2),
                },
                Segment::Residual {
                    layers: vec![(8, Activation::SmoothTanh), (8, Activation::Identity)],
                },
                Segment::Dense {
                    output: 1,
                    activation: Activation::Identity,
                },
            ],
        };
        let params = MlpParams::init(&spec, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("critic.ckpt");
        write_checkpoint(&path, &spec, &params).unwrap();
        let (spec2, params2) = read_checkpoint(&path).unwrap();
        assert_eq!(spec, spec2);
        assert_eq!(params, params2);
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let spec = MlpSpec::feedforward(2, &[(1, Activation::Identity)]);
        let params = MlpParams::zeros(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        write_checkpoint(&path, &spec, &params).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] ^= 0xFF;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_checkpoint(&path),
            Err(Error::MalformedCheckpoint(_))
        ));
    }
}
