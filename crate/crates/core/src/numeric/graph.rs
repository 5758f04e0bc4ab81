//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends one node holding its output value. Inputs always
//! precede their consumers, so the tape is a topological order and the
//! backward pass walks it in exact reverse construction order.

use serde::{Deserialize, Serialize};

use super::rng::SeededRng;
use super::sum::exact_sum;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// SELU saturation value `-lambda * alpha`, the value dropped units take in
/// alpha dropout.
pub const ALPHA_PRIME: f64 = -1.758_099_340_847_376_6;

/// Floor applied inside the survival log-likelihood.
pub const LOG_CLAMP: f64 = 1e-12;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Tanh,
    Sigmoid,
    Elu,
    Relu,
    LeakyRelu(f64),
    /// Softmax over the last dimension.
    Softmax,
}

impl Activation {
    pub const LEAKY_SLOPE: f64 = 0.01;

    pub fn leaky_relu() -> Self {
        Activation::LeakyRelu(Self::LEAKY_SLOPE)
    }
}

/// The four outer arithmetic interactions, in channel order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OuterKind {
    Product,
    Division,
    Addition,
    Subtraction,
}

impl OuterKind {
    pub const ALL: [OuterKind; 4] = [
        OuterKind::Product,
        OuterKind::Division,
        OuterKind::Addition,
        OuterKind::Subtraction,
    ];

    /// The constant prepended to both operands before this interaction.
    pub fn appended_constant(self) -> f64 {
        match self {
            OuterKind::Product | OuterKind::Division => 1.0,
            OuterKind::Addition | OuterKind::Subtraction => 0.0,
        }
    }

    #[inline]
    pub fn apply(self, w: f64, o: f64, epsilon: f64) -> f64 {
        match self {
            OuterKind::Product => w * o,
            OuterKind::Division => w / (o + epsilon),
            OuterKind::Addition => w + o,
            OuterKind::Subtraction => w - o,
        }
    }
}

/// Per-patient survival target: event bin and censorship flag (1 = censored).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BinTarget {
    pub bin: usize,
    pub censored: bool,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    AddBias { x: Var, bias: Var, cols: usize },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    Elementwise { x: Var, kind: Activation },
    Softmax { x: Var, cols: usize },
    Conv2d(Box<ConvRecord>),
    Affine { x: Var, gain: Vec<f64> },
    ConcatCols { a: Var, b: Var, rows: usize, ca: usize, cb: usize },
    RepeatRows { x: Var, rows: usize },
    AppendConstant { x: Var },
    Outer { w: Var, o: Var, kind: OuterKind, epsilon: f64 },
    Stack { parts: Vec<Var> },
    Reshape { x: Var },
    AttentionPool { weights: Var, values: Var, n: usize, d: usize },
    Sum { x: Var },
    CrossEntropy { logits: Var, probs: Vec<f64>, target: usize, weight: f64 },
    SurvivalNll { logits: Var, bins: usize, targets: Vec<BinTarget> },
}

#[derive(Clone, Debug)]
struct ConvRecord {
    x: Var,
    kernel: Var,
    bias: Option<Var>,
    geom: ConvGeometry,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeometry {
    /// Calls `f(x_index, kernel_index, out_index)` for every contributing
    /// (input, weight, output) triple.
    #[inline]
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let g = *self;
        for co in 0..g.c_out {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let out = (co * g.oh + oy) * g.ow + ox;
                    for ci in 0..g.c_in {
                        for ky in 0..g.kh {
                            let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            for kx in 0..g.kw {
                                let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                if ix < 0 || ix >= g.w as isize {
                                    continue;
                                }
                                let xi = (ci * g.h + iy as usize) * g.w + ix as usize;
                                let ki = ((co * g.c_in + ci) * g.kh + ky) * g.kw + kx;
                                f(xi, ki, out);
                            }
                        }
                    }
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracks_grad: bool,
    requires_grad: bool,
    grad: Option<Tensor>,
    label: Option<String>,
}

/// A tape of tensor operations supporting one or more backward passes.
#[derive(Default, Debug)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input; no gradient is collected for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_node(value, Op::Leaf, false, None)
    }

    /// A leaf that receives a gradient on backward.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_node(value, Op::Leaf, true, None)
    }

    pub fn named_param(&mut self, name: &str, value: Tensor) -> Var {
        self.push_node(value, Op::Leaf, true, Some(name.to_string()))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Attaches a diagnostic label to a node.
    pub fn set_label(&mut self, v: Var, label: &str) {
        self.nodes[v.0].label = Some(label.to_string());
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Describes the first node (in construction order) holding a non-finite
    /// value, if any.
    pub fn first_non_finite(&self) -> Option<String> {
        self.nodes.iter().enumerate().find_map(|(i, node)| {
            (!node.value.is_finite()).then(|| {
                let name = node.label.clone().unwrap_or_else(|| op_name(&node.op).to_string());
                format!("node {i} ({name}) shape {:?}", node.value.shape())
            })
        })
    }

    fn push_node(&mut self, value: Tensor, op: Op, requires_grad: bool, label: Option<String>) -> Var {
        let tracks_grad = requires_grad || op_inputs(&op).iter().any(|v| self.nodes[v.0].tracks_grad);
        self.nodes.push(Node {
            value,
            op,
            tracks_grad,
            requires_grad,
            grad: None,
            label,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.push_node(value, op, false, None)
    }

    // ----------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => {
                return Err(Error::shape(format!(
                    "matmul of {sa:?} by {sb:?}: inner dimensions must agree"
                )))
            }
        };
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, m, k, n }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "add")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "mul")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Mul { a, b }))
    }

    /// Adds a bias vector of length `cols` to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let cols = *self.shape(x).last().unwrap_or(&1);
        if self.value(bias).numel() != cols {
            return Err(Error::shape(format!(
                "bias {:?} does not match last dimension of {:?}",
                self.shape(bias),
                self.shape(x)
            )));
        }
        let b = self.value(bias).data().to_vec();
        let data: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % cols])
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(t, Op::AddBias { x, bias, cols }))
    }

    /// `x · weight + bias` with `weight` stored as `[in, out]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        self.add_bias(y, bias)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let data = self.value(x).data().iter().map(|v| v * factor).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push(t, Op::Scale { x, factor })
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        if kind == Activation::Softmax {
            return Ok(self.softmax(x));
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| activate(kind, v))
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(t, Op::Elementwise { x, kind }))
    }

    /// Softmax along the last dimension, max-shifted, with a correctly
    /// rounded normalizer.
    pub fn softmax(&mut self, x: Var) -> Var {
        let cols = (*self.shape(x).last().unwrap_or(&1)).max(1);
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push(t, Op::Softmax { x, cols })
    }

    /// Cross-correlation of `x: [C_in, H, W]` with `kernel: [C_out, C_in, kh, kw]`,
    /// plus an optional per-output-channel `bias: [C_out]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        let geom = conv_geometry(&sx, &sk, stride, padding)?;
        if let Some(b) = bias {
            if self.value(b).numel() != geom.c_out {
                return Err(Error::shape(format!(
                    "conv bias {:?} does not match {} output channels",
                    self.shape(b),
                    geom.c_out
                )));
            }
        }
        let xd = self.value(x).data();
        let kd = self.value(kernel).data();
        let mut out = vec![0.0; geom.c_out * geom.oh * geom.ow];
        geom.for_each(|xi, ki, oi| out[oi] += kd[ki] * xd[xi]);
        if let Some(b) = bias {
            let bd = self.value(b).data();
            let plane = geom.oh * geom.ow;
            for (i, v) in out.iter_mut().enumerate() {
                *v += bd[i / plane];
            }
        }
        let t = Tensor::new(vec![geom.c_out, geom.oh, geom.ow], out)?;
        Ok(self.push(
            t,
            Op::Conv2d(Box::new(ConvRecord {
                x,
                kernel,
                bias,
                geom,
            })),
        ))
    }

    /// Inverted dropout: zeroes each element with probability `p` and scales
    /// survivors by `1/(1-p)`. Identity outside training.
    pub fn dropout(&mut self, x: Var, p: f64, training: bool, rng: &mut SeededRng) -> Result<Var> {
        check_probability(p)?;
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let gain: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.bernoulli(p) { 0.0 } else { keep })
            .collect();
        let data = zip_map(self.value(x).data(), &gain, |v, g| v * g);
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(t, Op::Affine { x, gain }))
    }

    /// Self-normalizing dropout: dropped units take [`ALPHA_PRIME`], then the
    /// tensor is mapped by `a*x + b` so zero-mean unit-variance input keeps its
    /// first two moments. Identity outside training.
    pub fn alpha_dropout(&mut self, x: Var, p: f64, training: bool, rng: &mut SeededRng) -> Result<Var> {
        check_probability(p)?;
        if !training || p == 0.0 {
            return Ok(x);
        }
        let (a, b) = alpha_dropout_affine(p);
        let n = self.value(x).numel();
        let mut gain = Vec::with_capacity(n);
        let mut data = Vec::with_capacity(n);
        for &v in self.value(x).data() {
            if rng.bernoulli(p) {
                gain.push(0.0);
                data.push(a * ALPHA_PRIME + b);
            } else {
                gain.push(a);
                data.push(a * v + b);
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(t, Op::Affine { x, gain }))
    }

    /// `[a | b]` along columns for matrices with equal row counts.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.value(a).as_matrix_dims()?;
        let (rb, cb) = self.value(b).as_matrix_dims()?;
        if ra != rb {
            return Err(Error::shape(format!(
                "concat of {:?} and {:?}: row counts differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            data.extend_from_slice(&self.value(a).data()[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&self.value(b).data()[r * cb..(r + 1) * cb]);
        }
        let t = Tensor::new(vec![ra, ca + cb], data)?;
        Ok(self.push(t, Op::ConcatCols { a, b, rows: ra, ca, cb }))
    }

    /// Replicates a vector (or single-row matrix) into `rows` identical rows.
    pub fn repeat_rows(&mut self, x: Var, rows: usize) -> Result<Var> {
        let (r, c) = self.value(x).as_matrix_dims()?;
        if r != 1 {
            return Err(Error::shape(format!(
                "repeat_rows expects a single row, got {:?}",
                self.shape(x)
            )));
        }
        let row = self.value(x).data().to_vec();
        let mut data = Vec::with_capacity(rows * c);
        for _ in 0..rows {
            data.extend_from_slice(&row);
        }
        let t = Tensor::new(vec![rows, c], data)?;
        Ok(self.push(t, Op::RepeatRows { x, rows }))
    }

    /// `[c; v]` for a vector `v`.
    pub fn append_constant(&mut self, x: Var, c: f64) -> Var {
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(src.len() + 1);
        data.push(c);
        data.extend_from_slice(src);
        self.push(Tensor::vector(data), Op::AppendConstant { x })
    }

    /// Outer interaction matrix with entry `(i, j) = w_i ∘ o_j`.
    pub fn outer(&mut self, w: Var, o: Var, kind: OuterKind, epsilon: f64) -> Result<Var> {
        if self.value(w).ndim() != 1 || self.value(o).ndim() != 1 {
            return Err(Error::shape(format!(
                "outer operands must be vectors, got {:?} and {:?}",
                self.shape(w),
                self.shape(o)
            )));
        }
        let data = outer_raw(self.value(w).data(), self.value(o).data(), kind, epsilon)?;
        let t = Tensor::new(vec![self.value(w).numel(), self.value(o).numel()], data)?;
        Ok(self.push(t, Op::Outer { w, o, kind, epsilon }))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("stack of zero tensors"))?;
        let inner = self.shape(*first).to_vec();
        let mut data = Vec::with_capacity(parts.len() * self.value(*first).numel());
        for p in parts {
            if self.shape(*p) != inner.as_slice() {
                return Err(Error::shape(format!(
                    "stack of {:?} with {:?}",
                    inner,
                    self.shape(*p)
                )));
            }
            data.extend_from_slice(self.value(*p).data());
        }
        let mut shape = vec![parts.len()];
        shape.extend(inner);
        Ok(self.push(Tensor::new(shape, data)?, Op::Stack { parts: parts.to_vec() }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        Ok(self.push(t, Op::Reshape { x }))
    }

    pub fn flatten(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        self.reshape(x, &[n]).expect("flatten preserves numel")
    }

    /// `Σ_n weights[n] · values[n, :]`, summed exactly per column so the result
    /// is independent of row order.
    pub fn attention_pool(&mut self, weights: Var, values: Var) -> Result<Var> {
        let n = self.value(weights).numel();
        let (rows, d) = self.value(values).as_matrix_dims()?;
        if rows != n {
            return Err(Error::shape(format!(
                "attention weights {:?} do not match values {:?}",
                self.shape(weights),
                self.shape(values)
            )));
        }
        let a = self.value(weights).data();
        let v = self.value(values).data();
        let out = (0..d)
            .map(|c| exact_sum((0..n).map(|r| a[r] * v[r * d + c])))
            .collect();
        Ok(self.push(Tensor::vector(out), Op::AttentionPool { weights, values, n, d }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = exact_sum(self.value(x).data().iter().copied());
        self.push(Tensor::scalar(s), Op::Sum { x })
    }

    /// Weighted softmax cross-entropy of a single logit vector.
    pub fn cross_entropy(&mut self, logits: Var, target: usize, weight: f64) -> Result<Var> {
        let z = self.value(logits).data();
        if target >= z.len() {
            return Err(Error::shape(format!(
                "target class {target} out of range for {} logits",
                z.len()
            )));
        }
        let mut probs = z.to_vec();
        softmax_in_place(&mut probs);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = weight * (lse - z[target]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                probs,
                target,
                weight,
            },
        ))
    }

    /// Mean discrete-time censored negative log-likelihood over a batch of
    /// hazard logits `[B, bins]` (a single vector counts as `B = 1`).
    pub fn survival_nll(&mut self, logits: Var, targets: &[BinTarget]) -> Result<Var> {
        let (b, bins) = self.value(logits).as_matrix_dims()?;
        if b != targets.len() {
            return Err(Error::shape(format!(
                "{} logit rows for {} survival targets",
                b,
                targets.len()
            )));
        }
        if let Some(t) = targets.iter().find(|t| t.bin >= bins) {
            return Err(Error::shape(format!("bin {} out of range for {bins} bins", t.bin)));
        }
        let data = self.value(logits).data();
        let losses: Vec<f64> = targets
            .iter()
            .enumerate()
            .map(|(i, t)| survival_nll_row(&data[i * bins..(i + 1) * bins], *t).0)
            .collect();
        let loss = exact_sum(losses) / b as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SurvivalNll {
                logits,
                bins,
                targets: targets.to_vec(),
            },
        ))
    }

    // ------------------------------------------------------------ backward

    /// Accumulates `d loss / d leaf` into every leaf created with
    /// [`Graph::param`]. Leaves the loss does not reach receive zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(dy) = adj[i].take() else { continue };
            if !self.nodes[i].tracks_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                adj[i] = Some(dy);
                continue;
            }
            self.propagate(i, &dy, &mut adj);
        }

        for (i, node) in self.nodes.iter_mut().enumerate() {
            if !node.requires_grad {
                continue;
            }
            let contribution = adj.get_mut(i).and_then(Option::take);
            let grad = node
                .grad
                .get_or_insert_with(|| Tensor::zeros(node.value.shape()));
            if let Some(c) = contribution {
                for (g, d) in grad.data_mut().iter_mut().zip(c) {
                    *g += d;
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, dy: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let tracks = |v: Var| self.nodes[v.0].tracks_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if tracks(*a) {
                    // dA = dY · Bᵀ
                    let bd = val(*b);
                    let mut da = vec![0.0; m * k];
                    for r in 0..m {
                        for c in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += dy[r * n + j] * bd[c * n + j];
                            }
                            da[r * k + c] = s;
                        }
                    }
                    accumulate(adj, *a, da);
                }
                if tracks(*b) {
                    // dB = Aᵀ · dY
                    let ad = val(*a);
                    let mut db = vec![0.0; k * n];
                    for r in 0..m {
                        for c in 0..k {
                            let av = ad[r * k + c];
                            if av == 0.0 {
                                continue;
                            }
                            let row = &mut db[c * n..(c + 1) * n];
                            for (d, g) in row.iter_mut().zip(&dy[r * n..(r + 1) * n]) {
                                *d += av * g;
                            }
                        }
                    }
                    accumulate(adj, *b, db);
                }
            }
            Op::Add { a, b } => {
                if tracks(*a) {
                    accumulate(adj, *a, dy.to_vec());
                }
                if tracks(*b) {
                    accumulate(adj, *b, dy.to_vec());
                }
            }
            Op::AddBias { x, bias, cols } => {
                if tracks(*x) {
                    accumulate(adj, *x, dy.to_vec());
                }
                if tracks(*bias) {
                    let mut db = vec![0.0; *cols];
                    for (i, g) in dy.iter().enumerate() {
                        db[i % cols] += g;
                    }
                    accumulate(adj, *bias, db);
                }
            }
            Op::Mul { a, b } => {
                if tracks(*a) {
                    accumulate(adj, *a, zip_map(dy, val(*b), |g, v| g * v));
                }
                if tracks(*b) {
                    accumulate(adj, *b, zip_map(dy, val(*a), |g, v| g * v));
                }
            }
            Op::Scale { x, factor } => {
                accumulate(adj, *x, dy.iter().map(|g| g * factor).collect());
            }
            Op::Elementwise { x, kind } => {
                let xs = val(*x);
                let ys = node.value.data();
                let dx = dy
                    .iter()
                    .zip(xs.iter().zip(ys))
                    .map(|(g, (&xv, &yv))| g * activation_derivative(*kind, xv, yv))
                    .collect();
                accumulate(adj, *x, dx);
            }
            Op::Softmax { x, cols } => {
                let ys = node.value.data();
                let mut dx = vec![0.0; ys.len()];
                for ((drow, yrow), grow) in dx.chunks_mut(*cols).zip(ys.chunks(*cols)).zip(dy.chunks(*cols)) {
                    let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                    for ((d, y), g) in drow.iter_mut().zip(yrow).zip(grow) {
                        *d = y * (g - dot);
                    }
                }
                accumulate(adj, *x, dx);
            }
            Op::Conv2d(rec) => {
                let geom = rec.geom;
                if tracks(rec.x) {
                    let kd = val(rec.kernel);
                    let mut dx = vec![0.0; geom.c_in * geom.h * geom.w];
                    geom.for_each(|xi, ki, oi| dx[xi] += kd[ki] * dy[oi]);
                    accumulate(adj, rec.x, dx);
                }
                if tracks(rec.kernel) {
                    let xd = val(rec.x);
                    let mut dk = vec![0.0; geom.c_out * geom.c_in * geom.kh * geom.kw];
                    geom.for_each(|xi, ki, oi| dk[ki] += xd[xi] * dy[oi]);
                    accumulate(adj, rec.kernel, dk);
                }
                if let Some(b) = rec.bias {
                    if tracks(b) {
                        let plane = geom.oh * geom.ow;
                        let db = dy.chunks(plane).map(|c| c.iter().sum()).collect();
                        accumulate(adj, b, db);
                    }
                }
            }
            Op::Affine { x, gain } => {
                accumulate(adj, *x, zip_map(dy, gain, |g, k| g * k));
            }
            Op::ConcatCols { a, b, rows, ca, cb } => {
                let w = ca + cb;
                if tracks(*a) {
                    let mut da = Vec::with_capacity(rows * ca);
                    for r in 0..*rows {
                        da.extend_from_slice(&dy[r * w..r * w + ca]);
                    }
                    accumulate(adj, *a, da);
                }
                if tracks(*b) {
                    let mut db = Vec::with_capacity(rows * cb);
                    for r in 0..*rows {
                        db.extend_from_slice(&dy[r * w + ca..(r + 1) * w]);
                    }
                    accumulate(adj, *b, db);
                }
            }
            Op::RepeatRows { x, rows } => {
                let c = dy.len() / rows;
                let mut dx = vec![0.0; c];
                for chunk in dy.chunks(c) {
                    for (d, g) in dx.iter_mut().zip(chunk) {
                        *d += g;
                    }
                }
                accumulate(adj, *x, dx);
            }
            Op::AppendConstant { x } => {
                accumulate(adj, *x, dy[1..].to_vec());
            }
            Op::Outer { w, o, kind, epsilon } => {
                let (wd, od) = (val(*w), val(*o));
                let m = od.len();
                if tracks(*w) {
                    let dw = (0..wd.len())
                        .map(|i| {
                            let row = &dy[i * m..(i + 1) * m];
                            match kind {
                                OuterKind::Product => row.iter().zip(od).map(|(g, o)| g * o).sum(),
                                OuterKind::Division => row.iter().zip(od).map(|(g, o)| g / (o + epsilon)).sum(),
                                OuterKind::Addition | OuterKind::Subtraction => row.iter().sum(),
                            }
                        })
                        .collect();
                    accumulate(adj, *w, dw);
                }
                if tracks(*o) {
                    let d_o = (0..m)
                        .map(|j| {
                            let col = (0..wd.len()).map(|i| (dy[i * m + j], wd[i]));
                            match kind {
                                OuterKind::Product => col.map(|(g, w)| g * w).sum(),
                                OuterKind::Division => {
                                    let den = od[j] + epsilon;
                                    -col.map(|(g, w)| g * w).sum::<f64>() / (den * den)
                                }
                                OuterKind::Addition => col.map(|(g, _)| g).sum(),
                                OuterKind::Subtraction => -col.map(|(g, _)| g).sum::<f64>(),
                            }
                        })
                        .collect();
                    accumulate(adj, *o, d_o);
                }
            }
            Op::Stack { parts } => {
                let size = dy.len() / parts.len();
                for (p, chunk) in parts.iter().zip(dy.chunks(size)) {
                    if tracks(*p) {
                        accumulate(adj, *p, chunk.to_vec());
                    }
                }
            }
            Op::Reshape { x } => accumulate(adj, *x, dy.to_vec()),
            Op::AttentionPool { weights, values, n, d } => {
                let (a, v) = (val(*weights), val(*values));
                if tracks(*weights) {
                    let da = (0..*n)
                        .map(|r| (0..*d).map(|c| dy[c] * v[r * d + c]).sum())
                        .collect();
                    accumulate(adj, *weights, da);
                }
                if tracks(*values) {
                    let mut dv = vec![0.0; n * d];
                    for r in 0..*n {
                        for c in 0..*d {
                            dv[r * d + c] = dy[c] * a[r];
                        }
                    }
                    accumulate(adj, *values, dv);
                }
            }
            Op::Sum { x } => {
                let n = self.nodes[x.0].value.numel();
                accumulate(adj, *x, vec![dy[0]; n]);
            }
            Op::CrossEntropy {
                logits,
                probs,
                target,
                weight,
            } => {
                let dx = probs
                    .iter()
                    .enumerate()
                    .map(|(k, p)| {
                        let onehot = if k == *target { 1.0 } else { 0.0 };
                        dy[0] * weight * (p - onehot)
                    })
                    .collect();
                accumulate(adj, *logits, dx);
            }
            Op::SurvivalNll { logits, bins, targets } => {
                let data = val(*logits);
                let scale = dy[0] / targets.len() as f64;
                let mut dx = Vec::with_capacity(data.len());
                for (i, t) in targets.iter().enumerate() {
                    let (_, g) = survival_nll_row(&data[i * bins..(i + 1) * bins], *t);
                    dx.extend(g.into_iter().map(|v| v * scale));
                }
                accumulate(adj, *logits, dx);
            }
        }
    }

    fn check_same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what} of {:?} and {:?}: shapes differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], v: Var, contribution: Vec<f64>) {
    match &mut adj[v.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

fn op_inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul { a, b, .. } | Op::Add { a, b } | Op::Mul { a, b } | Op::ConcatCols { a, b, .. } => {
            vec![*a, *b]
        }
        Op::AddBias { x, bias, .. } => vec![*x, *bias],
        Op::Scale { x, .. }
        | Op::Elementwise { x, .. }
        | Op::Softmax { x, .. }
        | Op::Affine { x, .. }
        | Op::RepeatRows { x, .. }
        | Op::AppendConstant { x }
        | Op::Reshape { x }
        | Op::Sum { x } => vec![*x],
        Op::Conv2d(rec) => {
            let mut v = vec![rec.x, rec.kernel];
            v.extend(rec.bias);
            v
        }
        Op::Outer { w, o, .. } => vec![*w, *o],
        Op::Stack { parts } => parts.clone(),
        Op::AttentionPool { weights, values, .. } => vec![*weights, *values],
        Op::CrossEntropy { logits, .. } | Op::SurvivalNll { logits, .. } => vec![*logits],
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul { .. } => "matmul",
        Op::Add { .. } => "add",
        Op::AddBias { .. } => "add_bias",
        Op::Mul { .. } => "mul",
        Op::Scale { .. } => "scale",
        Op::Elementwise { .. } => "activation",
        Op::Softmax { .. } => "softmax",
        Op::Conv2d(_) => "conv2d",
        Op::Affine { .. } => "dropout",
        Op::ConcatCols { .. } => "concat",
        Op::RepeatRows { .. } => "repeat_rows",
        Op::AppendConstant { .. } => "append_constant",
        Op::Outer { .. } => "outer",
        Op::Stack { .. } => "stack",
        Op::Reshape { .. } => "reshape",
        Op::AttentionPool { .. } => "attention_pool",
        Op::Sum { .. } => "sum",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::SurvivalNll { .. } => "survival_nll",
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
}

/// Row-major `[m, k] · [k, n]`. Each output row depends only on its own input
/// row and is accumulated in a fixed order.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        let orow = &mut out[r * n..(r + 1) * n];
        for c in 0..k {
            let av = a[r * k + c];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[c * n..(c + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn outer_raw(w: &[f64], o: &[f64], kind: OuterKind, epsilon: f64) -> Result<Vec<f64>> {
    if kind == OuterKind::Division {
        if let Some(index) = o.iter().position(|v| v + epsilon == 0.0) {
            return Err(Error::Singularity { index });
        }
    }
    let mut out = Vec::with_capacity(w.len() * o.len());
    for &wi in w {
        out.extend(o.iter().map(|&oj| kind.apply(wi, oj, epsilon)));
    }
    Ok(out)
}

fn conv_geometry(sx: &[usize], sk: &[usize], stride: usize, padding: usize) -> Result<ConvGeometry> {
    let (c_in, h, w) = match sx {
        [c, h, w] => (*c, *h, *w),
        _ => return Err(Error::shape(format!("conv2d input must be [C, H, W], got {sx:?}"))),
    };
    let (c_out, kc, kh, kw) = match sk {
        [o, c, kh, kw] => (*o, *c, *kh, *kw),
        _ => {
            return Err(Error::shape(format!(
                "conv2d kernel must be [C_out, C_in, kh, kw], got {sk:?}"
            )))
        }
    };
    if kc != c_in {
        return Err(Error::shape(format!(
            "conv2d kernel {sk:?} expects {kc} input channels, input {sx:?} has {c_in}"
        )));
    }
    if stride == 0 {
        return Err(Error::shape("conv2d stride must be positive"));
    }
    let (ph, pw) = (h + 2 * padding, w + 2 * padding);
    if kh > ph || kw > pw {
        return Err(Error::shape(format!(
            "conv2d kernel {kh}x{kw} larger than padded input {ph}x{pw}"
        )));
    }
    if (ph - kh) % stride != 0 || (pw - kw) % stride != 0 {
        return Err(Error::shape(format!(
            "conv2d output size not integral: ({ph}-{kh})/{stride}, ({pw}-{kw})/{stride}"
        )));
    }
    Ok(ConvGeometry {
        c_in,
        h,
        w,
        c_out,
        kh,
        kw,
        stride,
        padding,
        oh: (ph - kh) / stride + 1,
        ow: (pw - kw) / stride + 1,
    })
}

fn check_probability(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Parameter(format!("dropout probability {p} not in [0, 1)")));
    }
    Ok(())
}

/// The `(a, b)` correction applied after alpha dropout with drop rate `p`.
pub fn alpha_dropout_affine(p: f64) -> (f64, f64) {
    let a = ((1.0 - p) * (1.0 + p * ALPHA_PRIME * ALPHA_PRIME)).powf(-0.5);
    let b = -a * ALPHA_PRIME * p;
    (a, b)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn activate(kind: Activation, x: f64) -> f64 {
    match kind {
        Activation::Tanh => x.tanh(),
        Activation::Sigmoid => sigmoid(x),
        Activation::Elu => {
            if x > 0.0 {
                x
            } else {
                x.exp_m1()
            }
        }
        Activation::Relu => x.max(0.0),
        Activation::LeakyRelu(slope) => {
            if x >= 0.0 {
                x
            } else {
                slope * x
            }
        }
        Activation::Softmax => unreachable!("softmax is not elementwise"),
    }
}

fn activation_derivative(kind: Activation, x: f64, y: f64) -> f64 {
    match kind {
        Activation::Tanh => 1.0 - y * y,
        Activation::Sigmoid => y * (1.0 - y),
        Activation::Elu => {
            if x > 0.0 {
                1.0
            } else {
                y + 1.0
            }
        }
        Activation::Relu => {
            if x >= 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Activation::LeakyRelu(slope) => {
            if x >= 0.0 {
                1.0
            } else {
                slope
            }
        }
        Activation::Softmax => unreachable!("softmax is not elementwise"),
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for v in row.iter_mut() {
        *v = (*v - max).exp();
    }
    let total = exact_sum(row.iter().copied());
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Loss and logit gradient for one patient.
fn survival_nll_row(logits: &[f64], target: BinTarget) -> (f64, Vec<f64>) {
    let hazards: Vec<f64> = logits.iter().map(|&l| sigmoid(l)).collect();
    let y = target.bin;
    let mut grad = vec![0.0; logits.len()];
    let mut loss = 0.0;

    // log S(k) = Σ_{j≤k} log(1 - h_j); d/dl_j = -h_j
    let log_surv_term = |upto: Option<usize>, loss: &mut f64, grad: &mut [f64]| {
        let Some(k) = upto else { return };
        let surv: f64 = hazards[..=k].iter().map(|h| 1.0 - h).product();
        if surv < LOG_CLAMP {
            *loss -= LOG_CLAMP.ln();
        } else {
            *loss -= surv.ln();
            for j in 0..=k {
                grad[j] += hazards[j];
            }
        }
    };

    if target.censored {
        log_surv_term(Some(y), &mut loss, &mut grad);
    } else {
        log_surv_term(y.checked_sub(1), &mut loss, &mut grad);
        let h = hazards[y];
        if h < LOG_CLAMP {
            loss -= LOG_CLAMP.ln();
        } else {
            loss -= h.ln();
            grad[y] -= 1.0 - h;
        }
    }
    (loss, grad)
}
