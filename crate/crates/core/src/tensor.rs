//! Dense f64 tensors and a define-by-run reverse-mode differentiation tape.
//!
//! Every operation appends a node to a [`Tape`]; [`Tape::backward`] walks the
//! nodes in reverse creation order (which is a valid topological order, since
//! inputs always precede the ops that consume them) and accumulates adjoints.
//! There is no implicit broadcasting: shapes must line up exactly, and the
//! few shape-changing ops the models need (`tile_rows`, `concat_cols`,
//! `gather_rows`, `reshape`) are explicit tape operations with explicit
//! backward rules.
//!
//! All arithmetic is f64 and all iteration orders are fixed, so identical
//! inputs produce bitwise identical values and gradients on every run.

use thiserror::Error;

/// Errors produced by tensor construction and tape operations.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} holds {expected} values, got {actual}")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("shape {0:?} contains a zero dimension")]
    ZeroDim(Vec<usize>),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("expected rank {expected} tensor, got shape {shape:?}")]
    RankMismatch { expected: usize, shape: Vec<usize> },
    #[error("matmul inner dimensions disagree: {0:?} x {1:?}")]
    MatmulDims(Vec<usize>, Vec<usize>),
    #[error("conv2d input has {input} channels, kernel expects {kernel}")]
    ChannelMismatch { input: usize, kernel: usize },
    #[error(
        "conv2d geometry is invalid: input {h}x{w}, kernel {kh}x{kw}, stride {stride}, padding {padding}"
    )]
    ConvGeometry {
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: usize,
    },
    #[error("maxpool2 needs even spatial dims, got {h}x{w}")]
    OddPoolInput { h: usize, w: usize },
    #[error("target {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },
    #[error("row index {row} out of range for {rows} rows")]
    RowOutOfRange { row: usize, rows: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("node {0} does not belong to this tape")]
    UnknownNode(usize),
    #[error("tensor is not attached to a tape")]
    Detached,
    #[error("no gradient was recorded for node {0}")]
    MissingGradient(usize),
    #[error("learning rate must be non-negative and finite, got {0}")]
    BadLearningRate(f64),
    #[error("finite-difference eps must lie in (0, 1e-2], got {0}")]
    BadEps(f64),
    #[error("scale factor must be finite, got {0}")]
    BadScale(f64),
}

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    /// Position of the node in its tape's creation order.
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a loss-style operation reduces over its batch dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

/// A dense row-major f64 tensor.
///
/// `grad` and `node_id` are bookkeeping for the most recent tape the tensor
/// was registered on: [`Tape::leaf`] sets `node_id`, and [`sgd_step`] copies
/// the applied gradient into `grad` before updating `data`.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    node_id: Option<NodeId>,
}

fn element_count(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Builds a tensor, checking that `values` matches the shape's element
    /// count, that no dimension is zero, and that every value is finite.
    pub fn from_values(shape: &[usize], values: Vec<f64>) -> Result<Self, TensorError> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ZeroDim(shape.to_vec()));
        }
        let expected = element_count(shape);
        if values.len() != expected {
            return Err(TensorError::LengthMismatch {
                shape: shape.to_vec(),
                expected,
                actual: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite("tensor construction"));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: values,
            grad: None,
            node_id: None,
        })
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Result<Self, TensorError> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ZeroDim(shape.to_vec()));
        }
        Ok(Tensor {
            data: vec![0.0; element_count(shape)],
            shape: shape.to_vec(),
            grad: None,
            node_id: None,
        })
    }

    /// Single-element tensor of shape `[1]`.
    pub fn scalar(value: f64) -> Result<Self, TensorError> {
        Tensor::from_values(&[1], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable view of the values. The shape is fixed at construction.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Gradient recorded by the last [`sgd_step`] that touched this tensor.
    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Node handle from the last [`Tape::leaf`] registration, if any.
    pub fn node_id(&self) -> Option<NodeId> {
        self.node_id
    }
}

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Matmul(NodeId, NodeId),
    Relu(NodeId),
    Conv2d {
        input: NodeId,
        weights: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    },
    MaxPool2 {
        input: NodeId,
        // Flat index into the input for each output element; ties resolve to
        // the first maximum in row-major window order.
        argmax: Vec<usize>,
    },
    Reshape(NodeId),
    TileRows {
        input: NodeId,
        rows: usize,
    },
    ConcatCols(NodeId, NodeId),
    GatherRows {
        input: NodeId,
        rows: Vec<usize>,
    },
    SmoothL1(NodeId),
    Sum(NodeId),
    Scale {
        input: NodeId,
        factor: f64,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        reduction: Reduction,
    },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
    needs_grad: bool,
}

/// Gradients for every reachable node of one backward pass, indexed by node.
pub struct Gradients {
    slots: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for a node, if the node lies on a path to the loss.
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.slots.get(id.0).and_then(|s| s.as_deref())
    }

    /// Gradient for a tensor registered with [`Tape::leaf`].
    pub fn for_tensor(&self, tensor: &Tensor) -> Result<&[f64], TensorError> {
        let id = tensor.node_id.ok_or(TensorError::Detached)?;
        self.get(id).ok_or(TensorError::MissingGradient(id.0))
    }
}

/// Append-only record of operations for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>, needs_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            shape,
            value,
            needs_grad,
        });
        id
    }

    fn node(&self, id: NodeId) -> Result<&Node, TensorError> {
        self.nodes.get(id.0).ok_or(TensorError::UnknownNode(id.0))
    }

    /// Shape of a node's value.
    pub fn shape(&self, id: NodeId) -> Result<&[usize], TensorError> {
        Ok(&self.node(id)?.shape)
    }

    /// Value of a node as a fresh tensor.
    pub fn value(&self, id: NodeId) -> Result<Tensor, TensorError> {
        let n = self.node(id)?;
        Ok(Tensor {
            shape: n.shape.clone(),
            data: n.value.clone(),
            grad: None,
            node_id: Some(id),
        })
    }

    /// Raw value slice of a node.
    pub fn value_data(&self, id: NodeId) -> Result<&[f64], TensorError> {
        Ok(&self.node(id)?.value)
    }

    /// Registers a trainable tensor. Copies the current values onto the tape
    /// and stamps the tensor with its node handle so gradients can be looked
    /// up after [`Tape::backward`].
    pub fn leaf(&mut self, tensor: &mut Tensor) -> NodeId {
        let id = self.push(Op::Leaf, tensor.shape.clone(), tensor.data.clone(), true);
        tensor.node_id = Some(id);
        id
    }

    /// Registers a non-trainable input. Backward never propagates into it.
    pub fn constant(&mut self, tensor: &Tensor) -> NodeId {
        self.push(Op::Leaf, tensor.shape.clone(), tensor.data.clone(), false)
    }

    fn binary_same_shape(
        &mut self,
        a: NodeId,
        b: NodeId,
        make: fn(NodeId, NodeId) -> Op,
        eval: fn(f64, f64) -> f64,
    ) -> Result<NodeId, TensorError> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        if na.shape != nb.shape {
            return Err(TensorError::ShapeMismatch(
                na.shape.clone(),
                nb.shape.clone(),
            ));
        }
        let value: Vec<f64> = na
            .value
            .iter()
            .zip(&nb.value)
            .map(|(&x, &y)| eval(x, y))
            .collect();
        let shape = na.shape.clone();
        let needs = na.needs_grad || nb.needs_grad;
        Ok(self.push(make(a, b), shape, value, needs))
    }

    /// Elementwise sum. Shapes must match exactly.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary_same_shape(a, b, Op::Add, |x, y| x + y)
    }

    /// Elementwise difference.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary_same_shape(a, b, Op::Sub, |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary_same_shape(a, b, Op::Mul, |x, y| x * y)
    }

    /// Rank-2 matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        if na.shape.len() != 2 {
            return Err(TensorError::RankMismatch {
                expected: 2,
                shape: na.shape.clone(),
            });
        }
        if nb.shape.len() != 2 {
            return Err(TensorError::RankMismatch {
                expected: 2,
                shape: nb.shape.clone(),
            });
        }
        let (m, k) = (na.shape[0], na.shape[1]);
        let (k2, n) = (nb.shape[0], nb.shape[1]);
        if k != k2 {
            return Err(TensorError::MatmulDims(na.shape.clone(), nb.shape.clone()));
        }
        let value = matmul_raw(&na.value, &nb.value, m, k, n);
        let needs = na.needs_grad || nb.needs_grad;
        Ok(self.push(Op::Matmul(a, b), vec![m, n], value, needs))
    }

    /// Elementwise `max(x, 0)`.
    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let nx = self.node(x)?;
        let value: Vec<f64> = nx.value.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let shape = nx.shape.clone();
        let needs = nx.needs_grad;
        Ok(self.push(Op::Relu(x), shape, value, needs))
    }

    /// 2-d cross-correlation over `[B,C,H,W]` input with `[OC,IC,KH,KW]`
    /// kernels and an `[OC]` bias added to every output position.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        weights: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId, TensorError> {
        let (nx, nw, nb) = (self.node(input)?, self.node(weights)?, self.node(bias)?);
        if nx.shape.len() != 4 {
            return Err(TensorError::RankMismatch {
                expected: 4,
                shape: nx.shape.clone(),
            });
        }
        if nw.shape.len() != 4 {
            return Err(TensorError::RankMismatch {
                expected: 4,
                shape: nw.shape.clone(),
            });
        }
        if nb.shape.len() != 1 {
            return Err(TensorError::RankMismatch {
                expected: 1,
                shape: nb.shape.clone(),
            });
        }
        let dims = ConvDims::resolve(&nx.shape, &nw.shape, &nb.shape, stride, padding)?;
        let value = conv2d_raw(&nx.value, &nw.value, &nb.value, &dims);
        let needs = nx.needs_grad || nw.needs_grad || nb.needs_grad;
        Ok(self.push(
            Op::Conv2d {
                input,
                weights,
                bias,
                stride,
                padding,
            },
            vec![dims.batch, dims.oc, dims.oh, dims.ow],
            value,
            needs,
        ))
    }

    /// 2x2 max pooling with stride 2 over `[B,C,H,W]`. H and W must be even.
    pub fn maxpool2(&mut self, input: NodeId) -> Result<NodeId, TensorError> {
        let nx = self.node(input)?;
        if nx.shape.len() != 4 {
            return Err(TensorError::RankMismatch {
                expected: 4,
                shape: nx.shape.clone(),
            });
        }
        let (b, c, h, w) = (nx.shape[0], nx.shape[1], nx.shape[2], nx.shape[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::OddPoolInput { h, w });
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut value = vec![0.0; b * c * oh * ow];
        let mut argmax = vec![0usize; value.len()];
        for img in 0..b * c {
            let base = img * h * w;
            let obase = img * oh * ow;
            for y in 0..oh {
                for x in 0..ow {
                    let i00 = base + (2 * y) * w + 2 * x;
                    // Row-major window order; strict > keeps the first max.
                    let candidates = [i00, i00 + 1, i00 + w, i00 + w + 1];
                    let mut best = candidates[0];
                    for &idx in &candidates[1..] {
                        if nx.value[idx] > nx.value[best] {
                            best = idx;
                        }
                    }
                    value[obase + y * ow + x] = nx.value[best];
                    argmax[obase + y * ow + x] = best;
                }
            }
        }
        let needs = nx.needs_grad;
        Ok(self.push(
            Op::MaxPool2 { input, argmax },
            vec![b, c, oh, ow],
            value,
            needs,
        ))
    }

    /// Reinterprets a node's values under a new shape with the same element
    /// count.
    pub fn reshape(&mut self, input: NodeId, shape: &[usize]) -> Result<NodeId, TensorError> {
        let nx = self.node(input)?;
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ZeroDim(shape.to_vec()));
        }
        if element_count(shape) != nx.value.len() {
            return Err(TensorError::ShapeMismatch(
                nx.shape.clone(),
                shape.to_vec(),
            ));
        }
        let value = nx.value.clone();
        let needs = nx.needs_grad;
        Ok(self.push(Op::Reshape(input), shape.to_vec(), value, needs))
    }

    /// Repeats a rank-1 tensor `[n]` as every row of a `[rows, n]` matrix.
    /// This is the explicit form of bias broadcasting.
    pub fn tile_rows(&mut self, input: NodeId, rows: usize) -> Result<NodeId, TensorError> {
        let nx = self.node(input)?;
        if nx.shape.len() != 1 {
            return Err(TensorError::RankMismatch {
                expected: 1,
                shape: nx.shape.clone(),
            });
        }
        if rows == 0 {
            return Err(TensorError::ZeroDim(vec![rows]));
        }
        let n = nx.shape[0];
        let mut value = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            value.extend_from_slice(&nx.value);
        }
        let needs = nx.needs_grad;
        Ok(self.push(Op::TileRows { input, rows }, vec![rows, n], value, needs))
    }

    /// Concatenates two rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        if na.shape.len() != 2 {
            return Err(TensorError::RankMismatch {
                expected: 2,
                shape: na.shape.clone(),
            });
        }
        if nb.shape.len() != 2 {
            return Err(TensorError::RankMismatch {
                expected: 2,
                shape: nb.shape.clone(),
            });
        }
        if na.shape[0] != nb.shape[0] {
            return Err(TensorError::ShapeMismatch(
                na.shape.clone(),
                nb.shape.clone(),
            ));
        }
        let rows = na.shape[0];
        let (ca, cb) = (na.shape[1], nb.shape[1]);
        let mut value = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            value.extend_from_slice(&na.value[r * ca..(r + 1) * ca]);
            value.extend_from_slice(&nb.value[r * cb..(r + 1) * cb]);
        }
        let needs = na.needs_grad || nb.needs_grad;
        Ok(self.push(Op::ConcatCols(a, b), vec![rows, ca + cb], value, needs))
    }

    /// Selects rows of a rank-2 tensor. Indices may repeat; backward
    /// scatter-adds into the source rows.
    pub fn gather_rows(&mut self, input: NodeId, rows: &[usize]) -> Result<NodeId, TensorError> {
        let nx = self.node(input)?;
        if nx.shape.len() != 2 {
            return Err(TensorError::RankMismatch {
                expected: 2,
                shape: nx.shape.clone(),
            });
        }
        if rows.is_empty() {
            return Err(TensorError::ZeroDim(vec![0]));
        }
        let (n, cols) = (nx.shape[0], nx.shape[1]);
        let mut value = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if r >= n {
                return Err(TensorError::RowOutOfRange { row: r, rows: n });
            }
            value.extend_from_slice(&nx.value[r * cols..(r + 1) * cols]);
        }
        let needs = nx.needs_grad;
        Ok(self.push(
            Op::GatherRows {
                input,
                rows: rows.to_vec(),
            },
            vec![rows.len(), cols],
            value,
            needs,
        ))
    }

    /// Elementwise smooth L1: `0.5 t^2` for `|t| < 1`, else `|t| - 0.5`.
    pub fn smooth_l1(&mut self, input: NodeId) -> Result<NodeId, TensorError> {
        let nx = self.node(input)?;
        let value: Vec<f64> = nx.value.iter().map(|&t| smooth_l1_value(t)).collect();
        let shape = nx.shape.clone();
        let needs = nx.needs_grad;
        Ok(self.push(Op::SmoothL1(input), shape, value, needs))
    }

    /// Sum of all elements, as a `[1]` scalar.
    pub fn sum(&mut self, input: NodeId) -> Result<NodeId, TensorError> {
        let nx = self.node(input)?;
        let total: f64 = nx.value.iter().sum();
        let needs = nx.needs_grad;
        Ok(self.push(Op::Sum(input), vec![1], vec![total], needs))
    }

    /// Multiplies every element by a finite constant.
    pub fn scale(&mut self, input: NodeId, factor: f64) -> Result<NodeId, TensorError> {
        if !factor.is_finite() {
            return Err(TensorError::BadScale(factor));
        }
        let nx = self.node(input)?;
        let value: Vec<f64> = nx.value.iter().map(|&v| v * factor).collect();
        let shape = nx.shape.clone();
        let needs = nx.needs_grad;
        Ok(self.push(Op::Scale { input, factor }, shape, value, needs))
    }

    /// Softmax cross-entropy over `[B,C]` logits against integer targets,
    /// reduced to a `[1]` scalar. Rows are shifted by their max before
    /// exponentiation, so large logits stay finite.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        reduction: Reduction,
    ) -> Result<NodeId, TensorError> {
        let nx = self.node(logits)?;
        if nx.shape.len() != 2 {
            return Err(TensorError::RankMismatch {
                expected: 2,
                shape: nx.shape.clone(),
            });
        }
        let (batch, classes) = (nx.shape[0], nx.shape[1]);
        if targets.len() != batch {
            return Err(TensorError::ShapeMismatch(
                vec![batch],
                vec![targets.len()],
            ));
        }
        for &t in targets {
            if t >= classes {
                return Err(TensorError::TargetOutOfRange {
                    target: t,
                    classes,
                });
            }
        }
        let mut total = 0.0;
        for (row, &t) in targets.iter().enumerate() {
            let r = &nx.value[row * classes..(row + 1) * classes];
            total += log_sum_exp(r) - r[t];
        }
        if reduction == Reduction::Mean {
            total /= batch as f64;
        }
        let needs = nx.needs_grad;
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                reduction,
            },
            vec![1],
            vec![total],
            needs,
        ))
    }

    /// Reverse-mode pass from a scalar loss node. Returns per-node gradients;
    /// look up a parameter's slice through [`Gradients::for_tensor`].
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, TensorError> {
        let ln = self.node(loss)?;
        if ln.value.len() != 1 {
            return Err(TensorError::NonScalarLoss(ln.shape.clone()));
        }
        if !ln.value[0].is_finite() {
            return Err(TensorError::NonFinite("loss"));
        }
        let mut slots: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        slots[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(grad) = slots[idx].take() else {
                continue;
            };
            self.accumulate_inputs(node, &grad, &mut slots);
            slots[idx] = Some(grad);
        }
        Ok(Gradients { slots })
    }

    fn add_grad(&self, slots: &mut [Option<Vec<f64>>], id: NodeId, update: impl FnOnce(&mut [f64])) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let slot = slots[id.0].get_or_insert_with(|| vec![0.0; self.nodes[id.0].value.len()]);
        update(slot);
    }

    fn accumulate_inputs(&self, node: &Node, grad: &[f64], slots: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.add_grad(slots, *a, |g| {
                    for (gi, &d) in g.iter_mut().zip(grad) {
                        *gi += d;
                    }
                });
                self.add_grad(slots, *b, |g| {
                    for (gi, &d) in g.iter_mut().zip(grad) {
                        *gi += d;
                    }
                });
            }
            Op::Sub(a, b) => {
                self.add_grad(slots, *a, |g| {
                    for (gi, &d) in g.iter_mut().zip(grad) {
                        *gi += d;
                    }
                });
                self.add_grad(slots, *b, |g| {
                    for (gi, &d) in g.iter_mut().zip(grad) {
                        *gi -= d;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                self.add_grad(slots, *a, |g| {
                    for i in 0..g.len() {
                        g[i] += grad[i] * vb[i];
                    }
                });
                self.add_grad(slots, *b, |g| {
                    for i in 0..g.len() {
                        g[i] += grad[i] * va[i];
                    }
                });
            }
            Op::Matmul(a, b) => {
                let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
                let (m, k) = (na.shape[0], na.shape[1]);
                let n = nb.shape[1];
                // dA[i,kk] = dot(row i of G, row kk of B); both contiguous.
                self.add_grad(slots, *a, |g| {
                    for i in 0..m {
                        let grow = &grad[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let brow = &nb.value[kk * n..(kk + 1) * n];
                            g[i * k + kk] += dot_chunked(grow, brow);
                        }
                    }
                });
                // dB = A^T G.
                self.add_grad(slots, *b, |g| {
                    for i in 0..m {
                        for kk in 0..k {
                            let aik = na.value[i * k + kk];
                            if aik == 0.0 {
                                continue;
                            }
                            let grow = &grad[i * n..(i + 1) * n];
                            let gdst = &mut g[kk * n..(kk + 1) * n];
                            for (gd, &gv) in gdst.iter_mut().zip(grow) {
                                *gd += aik * gv;
                            }
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let vx = &self.nodes[x.0].value;
                self.add_grad(slots, *x, |g| {
                    for i in 0..g.len() {
                        // Subgradient 0 at exactly zero.
                        if vx[i] > 0.0 {
                            g[i] += grad[i];
                        }
                    }
                });
            }
            Op::Conv2d {
                input,
                weights,
                bias,
                stride,
                padding,
            } => {
                let (nx, nw, nb) = (
                    &self.nodes[input.0],
                    &self.nodes[weights.0],
                    &self.nodes[bias.0],
                );
                let dims = ConvDims::resolve(&nx.shape, &nw.shape, &nb.shape, *stride, *padding)
                    .expect("validated at forward time");
                let want_dx = self.nodes[input.0].needs_grad;
                let want_dw = self.nodes[weights.0].needs_grad;
                let want_db = self.nodes[bias.0].needs_grad;
                let (dx, dw, db) =
                    conv2d_backward_raw(&nx.value, &nw.value, grad, &dims, want_dx, want_dw, want_db);
                if let Some(dx) = dx {
                    self.add_grad(slots, *input, |g| {
                        for (gi, d) in g.iter_mut().zip(dx) {
                            *gi += d;
                        }
                    });
                }
                if let Some(dw) = dw {
                    self.add_grad(slots, *weights, |g| {
                        for (gi, d) in g.iter_mut().zip(dw) {
                            *gi += d;
                        }
                    });
                }
                if let Some(db) = db {
                    self.add_grad(slots, *bias, |g| {
                        for (gi, d) in g.iter_mut().zip(db) {
                            *gi += d;
                        }
                    });
                }
            }
            Op::MaxPool2 { input, argmax } => {
                self.add_grad(slots, *input, |g| {
                    for (out_idx, &src) in argmax.iter().enumerate() {
                        g[src] += grad[out_idx];
                    }
                });
            }
            Op::Reshape(x) => {
                self.add_grad(slots, *x, |g| {
                    for (gi, &d) in g.iter_mut().zip(grad) {
                        *gi += d;
                    }
                });
            }
            Op::TileRows { input, rows } => {
                let n = self.nodes[input.0].value.len();
                self.add_grad(slots, *input, |g| {
                    for r in 0..*rows {
                        for j in 0..n {
                            g[j] += grad[r * n + j];
                        }
                    }
                });
            }
            Op::ConcatCols(a, b) => {
                let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
                let rows = na.shape[0];
                let (ca, cb) = (na.shape[1], nb.shape[1]);
                self.add_grad(slots, *a, |g| {
                    for r in 0..rows {
                        let src = &grad[r * (ca + cb)..r * (ca + cb) + ca];
                        let dst = &mut g[r * ca..(r + 1) * ca];
                        for (gd, &gv) in dst.iter_mut().zip(src) {
                            *gd += gv;
                        }
                    }
                });
                self.add_grad(slots, *b, |g| {
                    for r in 0..rows {
                        let src = &grad[r * (ca + cb) + ca..(r + 1) * (ca + cb)];
                        let dst = &mut g[r * cb..(r + 1) * cb];
                        for (gd, &gv) in dst.iter_mut().zip(src) {
                            *gd += gv;
                        }
                    }
                });
            }
            Op::GatherRows { input, rows } => {
                let cols = self.nodes[input.0].shape[1];
                self.add_grad(slots, *input, |g| {
                    for (out_r, &src_r) in rows.iter().enumerate() {
                        let src = &grad[out_r * cols..(out_r + 1) * cols];
                        let dst = &mut g[src_r * cols..(src_r + 1) * cols];
                        for (gd, &gv) in dst.iter_mut().zip(src) {
                            *gd += gv;
                        }
                    }
                });
            }
            Op::SmoothL1(x) => {
                let vx = &self.nodes[x.0].value;
                self.add_grad(slots, *x, |g| {
                    for i in 0..g.len() {
                        let t = vx[i];
                        let slope = if t.abs() < 1.0 { t } else { t.signum() };
                        g[i] += grad[i] * slope;
                    }
                });
            }
            Op::Sum(x) => {
                let d = grad[0];
                self.add_grad(slots, *x, |g| {
                    for gi in g.iter_mut() {
                        *gi += d;
                    }
                });
            }
            Op::Scale { input, factor } => {
                let f = *factor;
                self.add_grad(slots, *input, |g| {
                    for (gi, &d) in g.iter_mut().zip(grad) {
                        *gi += d * f;
                    }
                });
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                reduction,
            } => {
                let nl = &self.nodes[logits.0];
                let classes = nl.shape[1];
                let scale = match reduction {
                    Reduction::Mean => grad[0] / targets.len() as f64,
                    Reduction::Sum => grad[0],
                };
                self.add_grad(slots, *logits, |g| {
                    for (row, &t) in targets.iter().enumerate() {
                        let r = &nl.value[row * classes..(row + 1) * classes];
                        let m = row_max(r);
                        let denom: f64 = r.iter().map(|&v| (v - m).exp()).sum();
                        for c in 0..classes {
                            let p = (r[c] - m).exp() / denom;
                            let indicator = if c == t { 1.0 } else { 0.0 };
                            g[row * classes + c] += scale * (p - indicator);
                        }
                    }
                });
            }
        }
    }
}

/// One plain SGD update: `p <- p - lr * grad`. Each tensor must have been
/// registered on the tape that produced `grads` and must have received a
/// gradient. The applied gradient is copied into each tensor's `grad` field.
pub fn sgd_step(
    params: &mut [&mut Tensor],
    grads: &Gradients,
    learning_rate: f64,
) -> Result<(), TensorError> {
    if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
        return Err(TensorError::BadLearningRate(learning_rate));
    }
    // Validate everything before mutating anything.
    for p in params.iter() {
        let g = grads.for_tensor(p)?;
        if g.len() != p.data.len() {
            return Err(TensorError::ShapeMismatch(
                p.shape.clone(),
                vec![g.len()],
            ));
        }
    }
    for p in params.iter_mut() {
        let g = grads.for_tensor(p)?.to_vec();
        for (v, &d) in p.data.iter_mut().zip(&g) {
            *v -= learning_rate * d;
        }
        p.grad = Some(g);
    }
    Ok(())
}

/// Compares tape gradients against central finite differences.
///
/// `f` rebuilds the computation on a fresh tape from leaf handles for
/// `params` (in order) and returns the scalar loss node. The check runs `f`
/// once for the analytic gradients, then twice per parameter coordinate with
/// that coordinate shifted by `±eps`, and reports the maximum over all
/// coordinates of `|analytic - numeric| / max(1, |analytic|)`.
pub fn finite_difference_check<F>(
    params: &[Tensor],
    eps: f64,
    f: F,
) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId, TensorError>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(TensorError::BadEps(eps));
    }
    let eval = |ps: &[Tensor]| -> Result<(f64, Option<Gradients>, Vec<NodeId>), TensorError> {
        let mut tape = Tape::new();
        let mut owned: Vec<Tensor> = ps.to_vec();
        let ids: Vec<NodeId> = owned.iter_mut().map(|p| tape.leaf(p)).collect();
        let loss = f(&mut tape, &ids)?;
        let ln = tape.node(loss)?;
        if ln.value.len() != 1 {
            return Err(TensorError::NonScalarLoss(ln.shape.clone()));
        }
        let v = ln.value[0];
        if !v.is_finite() {
            return Err(TensorError::NonFinite("finite-difference loss"));
        }
        let grads = tape.backward(loss)?;
        Ok((v, Some(grads), ids))
    };

    let (_, grads, ids) = eval(params)?;
    let grads = grads.expect("eval always returns gradients");
    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, base) in params.iter().enumerate() {
        let analytic = grads
            .get(ids[pi])
            .ok_or(TensorError::MissingGradient(ids[pi].0))?
            .to_vec();
        for j in 0..base.data.len() {
            let orig = base.data[j];
            work[pi].data[j] = orig + eps;
            let (plus, _, _) = eval_loss_only(&work, &f)?;
            work[pi].data[j] = orig - eps;
            let (minus, _, _) = eval_loss_only(&work, &f)?;
            work[pi].data[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[j];
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

fn eval_loss_only<F>(ps: &[Tensor], f: &F) -> Result<(f64, (), ()), TensorError>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId, TensorError>,
{
    let mut tape = Tape::new();
    let mut owned: Vec<Tensor> = ps.to_vec();
    let ids: Vec<NodeId> = owned.iter_mut().map(|p| tape.leaf(p)).collect();
    let loss = f(&mut tape, &ids)?;
    let ln = tape.node(loss)?;
    if ln.value.len() != 1 {
        return Err(TensorError::NonScalarLoss(ln.shape.clone()));
    }
    let v = ln.value[0];
    if !v.is_finite() {
        return Err(TensorError::NonFinite("finite-difference loss"));
    }
    Ok((v, (), ()))
}

/// Dot product with four independent accumulator lanes. The lane split gives
/// the optimizer instruction-level parallelism without reassociating floats
/// behind our back; the evaluation order is fixed, so results are
/// reproducible bit for bit.
pub(crate) fn dot_chunked(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n4 = a.len() - a.len() % 4;
    let mut acc = [0.0f64; 4];
    for (x4, y4) in a[..n4].chunks_exact(4).zip(b[..n4].chunks_exact(4)) {
        acc[0] += x4[0] * y4[0];
        acc[1] += x4[1] * y4[1];
        acc[2] += x4[2] * y4[2];
        acc[3] += x4[3] * y4[3];
    }
    let mut tail = 0.0;
    for (x, y) in a[n4..].iter().zip(&b[n4..]) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub(crate) fn smooth_l1_value(t: f64) -> f64 {
    if t.abs() < 1.0 {
        0.5 * t * t
    } else {
        t.abs() - 0.5
    }
}

fn row_max(row: &[f64]) -> f64 {
    row.iter().fold(f64::NEG_INFINITY, |m, &v| if v > m { v } else { m })
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row_max(row);
    let s: f64 = row.iter().map(|&v| (v - m).exp()).sum();
    m + s.ln()
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    out
}

struct ConvDims {
    batch: usize,
    ic: usize,
    h: usize,
    w: usize,
    oc: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
}

impl ConvDims {
    fn resolve(
        xs: &[usize],
        ws: &[usize],
        bs: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<ConvDims, TensorError> {
        let (batch, ic, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oc, kic, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if ic != kic {
            return Err(TensorError::ChannelMismatch {
                input: ic,
                kernel: kic,
            });
        }
        if bs[0] != oc {
            return Err(TensorError::ShapeMismatch(bs.to_vec(), vec![oc]));
        }
        let geom = TensorError::ConvGeometry {
            h,
            w,
            kh,
            kw,
            stride,
            padding,
        };
        if stride == 0 || kh == 0 || kw == 0 {
            return Err(geom);
        }
        let ph = h + 2 * padding;
        let pw = w + 2 * padding;
        if ph < kh || pw < kw {
            return Err(geom);
        }
        if (ph - kh) % stride != 0 || (pw - kw) % stride != 0 {
            return Err(geom);
        }
        let oh = (ph - kh) / stride + 1;
        let ow = (pw - kw) / stride + 1;
        Ok(ConvDims {
            batch,
            ic,
            h,
            w,
            oc,
            kh,
            kw,
            stride,
            padding,
            oh,
            ow,
        })
    }

    fn padded(&self) -> (usize, usize) {
        (self.h + 2 * self.padding, self.w + 2 * self.padding)
    }
}

fn pad_image(x: &[f64], dims: &ConvDims, item: usize, out: &mut [f64]) {
    let (ph, pw) = dims.padded();
    let p = dims.padding;
    out.fill(0.0);
    let base = item * dims.ic * dims.h * dims.w;
    for c in 0..dims.ic {
        for y in 0..dims.h {
            let src = base + (c * dims.h + y) * dims.w;
            let dst = (c * ph + y + p) * pw + p;
            out[dst..dst + dims.w].copy_from_slice(&x[src..src + dims.w]);
        }
    }
}

fn conv2d_raw(x: &[f64], wt: &[f64], bias: &[f64], dims: &ConvDims) -> Vec<f64> {
    let (ph, pw) = dims.padded();
    let mut padded = vec![0.0; dims.ic * ph * pw];
    let mut out = vec![0.0; dims.batch * dims.oc * dims.oh * dims.ow];
    let (oh, ow) = (dims.oh, dims.ow);
    for b in 0..dims.batch {
        pad_image(x, dims, b, &mut padded);
        for o in 0..dims.oc {
            let obase = ((b * dims.oc) + o) * oh * ow;
            out[obase..obase + oh * ow].fill(bias[o]);
            for c in 0..dims.ic {
                for r in 0..dims.kh {
                    for s in 0..dims.kw {
                        let wv = wt[(((o * dims.ic) + c) * dims.kh + r) * dims.kw + s];
                        for y in 0..oh {
                            let irow = (c * ph + y * dims.stride + r) * pw + s;
                            let orow = obase + y * ow;
                            if dims.stride == 1 {
                                let src = &padded[irow..irow + ow];
                                let dst = &mut out[orow..orow + ow];
                                for (d, &v) in dst.iter_mut().zip(src) {
                                    *d += wv * v;
                                }
                            } else {
                                for xo in 0..ow {
                                    out[orow + xo] += wv * padded[irow + xo * dims.stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::type_complexity)]
fn conv2d_backward_raw(
    x: &[f64],
    wt: &[f64],
    gout: &[f64],
    dims: &ConvDims,
    want_dx: bool,
    want_dw: bool,
    want_db: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let (ph, pw) = dims.padded();
    let (oh, ow) = (dims.oh, dims.ow);
    let mut padded = vec![0.0; dims.ic * ph * pw];
    let mut dpad = vec![0.0; dims.ic * ph * pw];
    let mut dx = want_dx.then(|| vec![0.0; dims.batch * dims.ic * dims.h * dims.w]);
    let mut dw = want_dw.then(|| vec![0.0; wt.len()]);
    let mut db = want_db.then(|| vec![0.0; dims.oc]);
    for b in 0..dims.batch {
        if want_dx || want_dw {
            pad_image(x, dims, b, &mut padded);
        }
        if want_dx {
            dpad.fill(0.0);
        }
        for o in 0..dims.oc {
            let obase = ((b * dims.oc) + o) * oh * ow;
            if let Some(db) = db.as_deref_mut() {
                db[o] += gout[obase..obase + oh * ow].iter().sum::<f64>();
            }
            for c in 0..dims.ic {
                for r in 0..dims.kh {
                    for s in 0..dims.kw {
                        let widx = (((o * dims.ic) + c) * dims.kh + r) * dims.kw + s;
                        let wv = wt[widx];
                        let mut wacc = 0.0;
                        for y in 0..oh {
                            let irow = (c * ph + y * dims.stride + r) * pw + s;
                            let grow = &gout[obase + y * ow..obase + (y + 1) * ow];
                            if dims.stride == 1 {
                                if want_dw {
                                    wacc += dot_chunked(grow, &padded[irow..irow + ow]);
                                }
                                if want_dx {
                                    let dst = &mut dpad[irow..irow + ow];
                                    for (d, &g) in dst.iter_mut().zip(grow) {
                                        *d += wv * g;
                                    }
                                }
                            } else {
                                for xo in 0..ow {
                                    let ii = irow + xo * dims.stride;
                                    if want_dw {
                                        wacc += grow[xo] * padded[ii];
                                    }
                                    if want_dx {
                                        dpad[ii] += wv * grow[xo];
                                    }
                                }
                            }
                        }
                        if let Some(dw) = dw.as_deref_mut() {
                            dw[widx] += wacc;
                        }
                    }
                }
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            // Crop the padding ring back off.
            let p = dims.padding;
            let base = b * dims.ic * dims.h * dims.w;
            for c in 0..dims.ic {
                for y in 0..dims.h {
                    let src = (c * ph + y + p) * pw + p;
                    let dst = base + (c * dims.h + y) * dims.w;
                    for i in 0..dims.w {
                        dx[dst + i] += dpad[src + i];
                    }
                }
            }
        }
    }
    (dx, dw, db)
}
