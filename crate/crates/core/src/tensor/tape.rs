use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use super::kernels::{self, ConvGeometry};
use super::Tensor;
use crate::error::{Error, NumericStage, Result};
use crate::graph::Csr;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryKind {
    Relu,
    Sigmoid,
    Softplus,
    Exp,
    Neg,
    /// Subgradient 0 at 0.
    Abs,
    Scale(f64),
    AddScalar(f64),
    Clamp { lo: f64, hi: f64 },
}

impl UnaryKind {
    fn name(self) -> &'static str {
        match self {
            UnaryKind::Relu => "relu",
            UnaryKind::Sigmoid => "sigmoid",
            UnaryKind::Softplus => "softplus",
            UnaryKind::Exp => "exp",
            UnaryKind::Neg => "neg",
            UnaryKind::Abs => "abs",
            UnaryKind::Scale(_) => "scale",
            UnaryKind::AddScalar(_) => "add_scalar",
            UnaryKind::Clamp { .. } => "clamp",
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            UnaryKind::Relu => x.max(0.0),
            UnaryKind::Sigmoid => sigmoid(x),
            UnaryKind::Softplus => {
                if x > 0.0 {
                    x + (-x).exp().ln_1p()
                } else {
                    x.exp().ln_1p()
                }
            }
            UnaryKind::Exp => x.exp(),
            UnaryKind::Neg => -x,
            UnaryKind::Abs => x.abs(),
            UnaryKind::Scale(s) => s * x,
            UnaryKind::AddScalar(s) => x + s,
            UnaryKind::Clamp { lo, hi } => x.clamp(lo, hi),
        }
    }

    /// d(out)/d(in) given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            UnaryKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            UnaryKind::Sigmoid => y * (1.0 - y),
            UnaryKind::Softplus => sigmoid(x),
            UnaryKind::Exp => y,
            UnaryKind::Neg => -1.0,
            UnaryKind::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            UnaryKind::Scale(s) => s,
            UnaryKind::AddScalar(_) => 1.0,
            UnaryKind::Clamp { lo, hi } => {
                if x >= lo && x <= hi {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary { x: Var, kind: UnaryKind },
    Binary { a: Var, b: Var, kind: BinaryKind },
    Conv2d { x: Var, kernel: Var, bias: Var, geom: ConvGeometry },
    GlobalAvgPool { x: Var },
    Upsample { x: Var, factor: usize },
    Reshape { x: Var },
    ConcatChannels { parts: Vec<(Var, usize)> },
    SliceChannels { x: Var, start: usize },
    ConcatCols { a: Var, b: Var },
    MatMul { a: Var, b: Var },
    Linear { x: Var, w: Var, bias: Var },
    ToRows { x: Var },
    FromRows { x: Var },
    ScatterMean { x: Var, graph: Arc<Csr> },
    ScatterMax { x: Var, arg: Vec<u32> },
    MulChannel { x: Var, gate: Var },
    Sum { x: Var },
    Mean { x: Var },
    MaskedSum { x: Var, mask: Arc<[bool]> },
    DiffX { x: Var },
    DiffY { x: Var },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Unary { kind, .. } => kind.name(),
            Op::Binary { kind, .. } => match kind {
                BinaryKind::Add => "add",
                BinaryKind::Sub => "sub",
                BinaryKind::Mul => "mul",
            },
            Op::Conv2d { .. } => "conv2d",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::Upsample { .. } => "upsample_bilinear",
            Op::Reshape { .. } => "reshape",
            Op::ConcatChannels { .. } => "concat_channels",
            Op::SliceChannels { .. } => "slice_channels",
            Op::ConcatCols { .. } => "concat_cols",
            Op::MatMul { .. } => "matmul",
            Op::Linear { .. } => "linear",
            Op::ToRows { .. } => "to_rows",
            Op::FromRows { .. } => "from_rows",
            Op::ScatterMean { .. } => "scatter_mean",
            Op::ScatterMax { .. } => "scatter_max",
            Op::MulChannel { .. } => "mul_channel",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::MaskedSum { .. } => "masked_sum",
            Op::DiffX { .. } => "diff_x",
            Op::DiffY { .. } => "diff_y",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive applications.
///
/// Record order is a topological order, so backward simply walks the record
/// in reverse. A tape belongs to a single execution context.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradient store produced by [`Tape::backward`], keyed by tape id.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of length `len` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; len])
    }
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

    /// Differentiable leaf (parameters, inputs under test).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient (data, targets).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        let id = self.nodes.len();
        if !value.all_finite() {
            return Err(Error::NonFinite {
                op: op.name(),
                tensor: id,
                stage: NumericStage::Forward,
            });
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            _ => self.inputs_of(&op).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(id))
    }

    fn inputs_of(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Unary { x, .. }
            | Op::GlobalAvgPool { x }
            | Op::Upsample { x, .. }
            | Op::Reshape { x }
            | Op::SliceChannels { x, .. }
            | Op::ToRows { x }
            | Op::FromRows { x }
            | Op::ScatterMean { x, .. }
            | Op::ScatterMax { x, .. }
            | Op::Sum { x }
            | Op::Mean { x }
            | Op::MaskedSum { x, .. }
            | Op::DiffX { x }
            | Op::DiffY { x } => vec![*x],
            Op::Binary { a, b, .. } | Op::ConcatCols { a, b } | Op::MatMul { a, b } => vec![*a, *b],
            Op::Conv2d { x, kernel, bias, .. } => vec![*x, *kernel, *bias],
            Op::Linear { x, w, bias } => vec![*x, *w, *bias],
            Op::ConcatChannels { parts } => parts.iter().map(|(v, _)| *v).collect(),
            Op::MulChannel { x, gate } => vec![*x, *gate],
        }
    }

    // ---- pointwise ----

    pub fn unary(&mut self, x: Var, kind: UnaryKind) -> Result<Var> {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| kind.apply(v)).collect();
        let out = Tensor::new(src.shape(), data)?;
        self.push(out, Op::Unary { x, kind })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Sigmoid)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Softplus)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Exp)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Neg)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Abs)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary(x, UnaryKind::Scale(s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary(x, UnaryKind::AddScalar(s))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(Error::config(format!("clamp bounds reversed: [{lo}, {hi}]")));
        }
        self.unary(x, UnaryKind::Clamp { lo, hi })
    }

    fn binary(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
        };
        let out = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape(), data)?
        } else if tb.is_scalar() {
            let y = tb.data()[0];
            Tensor::new(ta.shape(), ta.data().iter().map(|&x| f(x, y)).collect())?
        } else if ta.is_scalar() {
            let x = ta.data()[0];
            Tensor::new(tb.shape(), tb.data().iter().map(|&y| f(x, y)).collect())?
        } else {
            return Err(Error::config(format!(
                "elementwise shape mismatch: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        };
        self.push(out, Op::Binary { a, b, kind })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Mul)
    }

    // ---- convolution, pooling, resizing ----

    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let [b, cin, h, w] = self.value(x).dims4()?;
        let [cout, kcin, kh, kw] = self.value(kernel).dims4()?;
        if kcin != cin {
            return Err(Error::config(format!(
                "conv2d kernel expects {kcin} input channels, input has {cin}"
            )));
        }
        if kh != kw || !(kh == 1 || kh == 3) {
            return Err(Error::config(format!("conv2d supports 1x1 and 3x3 kernels, got {kh}x{kw}")));
        }
        if self.value(bias).numel() != cout {
            return Err(Error::config(format!(
                "conv2d bias has {} entries for {cout} output channels",
                self.value(bias).numel()
            )));
        }
        let geom = ConvGeometry {
            batch: b,
            in_channels: cin,
            height: h,
            width: w,
            out_channels: cout,
            kernel: kh,
            stride,
            padding,
        };
        let (ho, wo) = geom.output_hw().ok_or_else(|| {
            Error::config(format!(
                "conv2d {kh}x{kh} stride {stride} padding {padding} does not fit a {h}x{w} map"
            ))
        })?;
        let data = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
            &geom,
        );
        let out = Tensor::new(&[b, cout, ho, wo], data)?;
        self.push(out, Op::Conv2d { x, kernel, bias, geom })
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = self.value(x).dims4()?;
        if h == 0 || w == 0 {
            return Err(Error::config("global average pool over an empty map"));
        }
        let hw = h * w;
        let data = self
            .value(x)
            .data()
            .chunks_exact(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        let out = Tensor::new(&[b, c, 1, 1], data)?;
        self.push(out, Op::GlobalAvgPool { x })
    }

    /// Bilinear upsampling by an integer factor (half-pixel centers, edge clamped).
    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        let [b, c, h, w] = self.value(x).dims4()?;
        if h == 0 || w == 0 || factor == 0 {
            return Err(Error::config("bilinear upsampling of an empty map"));
        }
        let data = kernels::upsample_bilinear(self.value(x).data(), b * c, h, w, factor);
        let out = Tensor::new(&[b, c, h * factor, w * factor], data)?;
        self.push(out, Op::Upsample { x, factor })
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        self.upsample_bilinear(x, 2)
    }

    // ---- structural ----

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshaped(shape)?;
        self.push(out, Op::Reshape { x })
    }

    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::config("concat_channels needs at least one input"))?;
        let [b, _, h, w] = self.value(first).dims4()?;
        let mut parts = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let [vb, vc, vh, vw] = self.value(v).dims4()?;
            if (vb, vh, vw) != (b, h, w) {
                return Err(Error::config(format!(
                    "concat_channels extent mismatch: {:?} vs {:?}",
                    self.value(first).shape(),
                    self.value(v).shape()
                )));
            }
            parts.push((v, vc));
        }
        let c_total: usize = parts.iter().map(|p| p.1).sum();
        let hw = h * w;
        let mut data = Vec::with_capacity(b * c_total * hw);
        for bi in 0..b {
            for &(v, c) in &parts {
                data.extend_from_slice(&self.value(v).data()[bi * c * hw..][..c * hw]);
            }
        }
        let out = Tensor::new(&[b, c_total, h, w], data)?;
        self.push(out, Op::ConcatChannels { parts })
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [b, c, h, w] = self.value(x).dims4()?;
        if start + len > c {
            return Err(Error::config(format!(
                "channel slice {start}..{} exceeds {c} channels",
                start + len
            )));
        }
        let hw = h * w;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(b * len * hw);
        for bi in 0..b {
            data.extend_from_slice(&src[(bi * c + start) * hw..][..len * hw]);
        }
        let out = Tensor::new(&[b, len, h, w], data)?;
        self.push(out, Op::SliceChannels { x, start })
    }

    /// Column concatenation of two matrices with equal row counts.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let [ra, ca] = self.value(a).dims2()?;
        let [rb, cb] = self.value(b).dims2()?;
        if ra != rb {
            return Err(Error::config(format!("concat_cols row mismatch: {ra} vs {rb}")));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            data.extend_from_slice(&da[r * ca..][..ca]);
            data.extend_from_slice(&db[r * cb..][..cb]);
        }
        let out = Tensor::new(&[ra, ca + cb], data)?;
        self.push(out, Op::ConcatCols { a, b })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let [m, k] = self.value(a).dims2()?;
        let [k2, n] = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::config(format!("matmul inner extent mismatch: {m}x{k} · {k2}x{n}")));
        }
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let out = Tensor::new(&[m, n], data)?;
        self.push(out, Op::MatMul { a, b })
    }

    /// Affine map `x · wᵀ + bias` with `x: rows x in`, `w: out x in`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let [rows, din] = self.value(x).dims2()?;
        let [dout, win] = self.value(w).dims2()?;
        if win != din || self.value(bias).numel() != dout {
            return Err(Error::config(format!(
                "linear: input has {din} features, weight is {dout}x{win}, bias has {}",
                self.value(bias).numel()
            )));
        }
        let data = kernels::linear_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(bias).data(),
            rows,
            din,
            dout,
        );
        let out = Tensor::new(&[rows, dout], data)?;
        self.push(out, Op::Linear { x, w, bias })
    }

    /// `B x C x H x W` to node rows `(B·H·W) x C`, node id `b·H·W + y·W + x`.
    pub fn to_rows(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = self.value(x).dims4()?;
        let data = kernels::nchw_to_rows(self.value(x).data(), b, c, h, w);
        let out = Tensor::new(&[b * h * w, c], data)?;
        self.push(out, Op::ToRows { x })
    }

    pub fn from_rows(&mut self, x: Var, b: usize, h: usize, w: usize) -> Result<Var> {
        let [n, c] = self.value(x).dims2()?;
        if n != b * h * w {
            return Err(Error::config(format!("{n} node rows cannot fill a {b}x{h}x{w} map")));
        }
        let data = kernels::rows_to_nchw(self.value(x).data(), b, c, h, w);
        let out = Tensor::new(&[b, c, h, w], data)?;
        self.push(out, Op::FromRows { x })
    }

    /// Mean of neighbor rows per destination node.
    pub fn scatter_mean(&mut self, x: Var, graph: &Arc<Csr>) -> Result<Var> {
        let [n, c] = self.value(x).dims2()?;
        if n != graph.n_nodes() {
            return Err(Error::config(format!(
                "scatter_mean: {n} feature rows for a {}-node graph",
                graph.n_nodes()
            )));
        }
        let data = kernels::scatter_mean(self.value(x).data(), c, graph.offsets(), graph.sources(), false);
        let out = Tensor::new(&[n, c], data)?;
        self.push(out, Op::ScatterMean {
            x,
            graph: Arc::clone(graph),
        })
    }

    /// Elementwise max of neighbor rows per destination node (zero when empty).
    pub fn scatter_max(&mut self, x: Var, graph: &Arc<Csr>) -> Result<Var> {
        let [n, c] = self.value(x).dims2()?;
        if n != graph.n_nodes() {
            return Err(Error::config(format!(
                "scatter_max: {n} feature rows for a {}-node graph",
                graph.n_nodes()
            )));
        }
        let (data, arg) = kernels::scatter_max(self.value(x).data(), c, graph.offsets(), graph.sources());
        let out = Tensor::new(&[n, c], data)?;
        self.push(out, Op::ScatterMax { x, arg })
    }

    /// Scales every `H x W` plane of `x` by the matching entry of `gate` (`B·C` values).
    pub fn mul_channel(&mut self, x: Var, gate: Var) -> Result<Var> {
        let [b, c, h, w] = self.value(x).dims4()?;
        if self.value(gate).numel() != b * c {
            return Err(Error::config(format!(
                "channel gate has {} entries for {b}x{c} planes",
                self.value(gate).numel()
            )));
        }
        let hw = h * w;
        let g = self.value(gate).data();
        let data = self
            .value(x)
            .data()
            .chunks_exact(hw)
            .zip(g)
            .flat_map(|(plane, &s)| plane.iter().map(move |&v| v * s))
            .collect();
        let out = Tensor::new(&[b, c, h, w], data)?;
        self.push(out, Op::MulChannel { x, gate })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(Error::usage("mean of an empty tensor"));
        }
        let out = Tensor::scalar(t.sum() / t.numel() as f64);
        self.push(out, Op::Mean { x })
    }

    /// Sum of the entries where `mask` is true.
    pub fn masked_sum(&mut self, x: Var, mask: &Arc<[bool]>) -> Result<Var> {
        let t = self.value(x);
        if mask.len() != t.numel() {
            return Err(Error::config(format!(
                "mask has {} entries for a tensor of {}",
                mask.len(),
                t.numel()
            )));
        }
        let s = t.data().iter().zip(mask.iter()).filter(|(_, &m)| m).map(|(v, _)| v).sum();
        self.push(Tensor::scalar(s), Op::MaskedSum {
            x,
            mask: Arc::clone(mask),
        })
    }

    /// Mean over the entries where `mask` is true.
    pub fn masked_mean(&mut self, x: Var, mask: &Arc<[bool]>) -> Result<Var> {
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::usage("masked mean over zero valid entries"));
        }
        let s = self.masked_sum(x, mask)?;
        self.scale(s, 1.0 / count as f64)
    }

    /// Forward difference along W: `x[.., y, i+1] - x[.., y, i]`.
    pub fn diff_x(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = self.value(x).dims4()?;
        if w < 2 {
            return Err(Error::config("diff_x needs width >= 2"));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(b * c * h * (w - 1));
        for row in src.chunks_exact(w) {
            data.extend(row.windows(2).map(|p| p[1] - p[0]));
        }
        let out = Tensor::new(&[b, c, h, w - 1], data)?;
        self.push(out, Op::DiffX { x })
    }

    /// Forward difference along H: `x[.., i+1, x] - x[.., i, x]`.
    pub fn diff_y(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = self.value(x).dims4()?;
        if h < 2 {
            return Err(Error::config("diff_y needs height >= 2"));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(b * c * (h - 1) * w);
        for plane in src.chunks_exact(h * w) {
            for y in 0..h - 1 {
                data.extend((0..w).map(|i| plane[(y + 1) * w + i] - plane[y * w + i]));
            }
        }
        let out = Tensor::new(&[b, c, h - 1, w], data)?;
        self.push(out, Op::DiffY { x })
    }

    /// Fingerprint of every piecewise branch taken on this tape (relu/abs
    /// sign patterns, clamp regions, max-aggregation winners). Two tapes
    /// recorded by the same program agree on it iff no kink was crossed.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Unary { x, kind } => {
                    let xs = self.nodes[x.0].value.data();
                    match kind {
                        UnaryKind::Relu => xs.iter().for_each(|&v| (v > 0.0).hash(&mut h)),
                        UnaryKind::Abs => xs.iter().for_each(|&v| (v.partial_cmp(&0.0)).hash(&mut h)),
                        UnaryKind::Clamp { lo, hi } => {
                            xs.iter().for_each(|&v| ((v < *lo) as u8 + 2 * (v > *hi) as u8).hash(&mut h))
                        }
                        _ => {}
                    }
                }
                Op::ScatterMax { arg, .. } => arg.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse sweep from a scalar `loss`; gradient seed is 1.0 and fan-out
    /// contributions are summed.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let contributions = self.node_backward(node, &g);
            grads[id] = Some(g);
            for (v, cg) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                if cg.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite {
                        op: node.op.name(),
                        tensor: id,
                        stage: NumericStage::Gradient,
                    });
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&cg).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(cg),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn node_backward(&self, node: &Node, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => vec![],
            Op::Unary { x, kind } => {
                let xs = val(*x);
                let ys = node.value.data();
                let gx = g
                    .iter()
                    .zip(xs.iter().zip(ys))
                    .map(|(&gv, (&xv, &yv))| gv * kind.derivative(xv, yv))
                    .collect();
                vec![(*x, gx)]
            }
            Op::Binary { a, b, kind } => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let n = node.value.numel();
                // per-output partials, then reduce if the operand was a broadcast scalar
                let at = |t: &Tensor, i: usize| if t.numel() == n { t.data()[i] } else { t.data()[0] };
                let (ga, gb): (Vec<f64>, Vec<f64>) = (0..n)
                    .map(|i| match kind {
                        BinaryKind::Add => (g[i], g[i]),
                        BinaryKind::Sub => (g[i], -g[i]),
                        BinaryKind::Mul => (g[i] * at(tb, i), g[i] * at(ta, i)),
                    })
                    .unzip();
                let reduce = |t: &Tensor, full: Vec<f64>| {
                    if t.numel() == n {
                        full
                    } else {
                        vec![full.iter().sum()]
                    }
                };
                vec![(*a, reduce(ta, ga)), (*b, reduce(tb, gb))]
            }
            Op::Conv2d { x, kernel, bias, geom } => {
                let (gx, gk, gb) = kernels::conv2d_backward(val(*x), val(*kernel), g, geom);
                vec![(*x, gx), (*kernel, gk), (*bias, gb)]
            }
            Op::GlobalAvgPool { x } => {
                let [_, _, h, w] = self.nodes[x.0].value.dims4().expect("checked in forward");
                let hw = h * w;
                let inv = 1.0 / hw as f64;
                let gx = g.iter().flat_map(|&gv| std::iter::repeat_n(gv * inv, hw)).collect();
                vec![(*x, gx)]
            }
            Op::Upsample { x, factor } => {
                let [b, c, h, w] = self.nodes[x.0].value.dims4().expect("checked in forward");
                vec![(*x, kernels::upsample_bilinear_backward(g, b * c, h, w, *factor))]
            }
            Op::Reshape { x } => vec![(*x, g.to_vec())],
            Op::ConcatChannels { parts } => {
                let [b, c_total, h, w] = node.value.dims4().expect("4-D by construction");
                let hw = h * w;
                let mut out: Vec<(Var, Vec<f64>)> =
                    parts.iter().map(|&(v, c)| (v, Vec::with_capacity(b * c * hw))).collect();
                for bi in 0..b {
                    let mut offset = bi * c_total * hw;
                    for (slot, &(_, c)) in out.iter_mut().zip(parts) {
                        slot.1.extend_from_slice(&g[offset..offset + c * hw]);
                        offset += c * hw;
                    }
                }
                out
            }
            Op::SliceChannels { x, start } => {
                let [b, c, h, w] = self.nodes[x.0].value.dims4().expect("checked in forward");
                let len = node.value.shape()[1];
                let hw = h * w;
                let mut gx = vec![0.0; b * c * hw];
                for bi in 0..b {
                    gx[(bi * c + start) * hw..][..len * hw].copy_from_slice(&g[bi * len * hw..][..len * hw]);
                }
                vec![(*x, gx)]
            }
            Op::ConcatCols { a, b } => {
                let [rows, ca] = self.nodes[a.0].value.dims2().expect("checked in forward");
                let cb = self.nodes[b.0].value.shape()[1];
                let mut ga = Vec::with_capacity(rows * ca);
                let mut gb = Vec::with_capacity(rows * cb);
                for row in g.chunks_exact(ca + cb) {
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..]);
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::MatMul { a, b } => {
                let [m, k] = self.nodes[a.0].value.dims2().expect("checked in forward");
                let n = self.nodes[b.0].value.shape()[1];
                let mut out = Vec::new();
                if self.needs(*a) {
                    let bt = kernels::transpose(val(*b), k, n);
                    out.push((*a, kernels::matmul(g, &bt, m, n, k)));
                }
                if self.needs(*b) {
                    let at = kernels::transpose(val(*a), m, k);
                    out.push((*b, kernels::matmul(&at, g, k, m, n)));
                }
                out
            }
            Op::Linear { x, w, bias } => {
                let [rows, din] = self.nodes[x.0].value.dims2().expect("checked in forward");
                let dout = self.nodes[w.0].value.shape()[0];
                let (gx, gw, gb) = kernels::linear_backward(val(*x), val(*w), g, rows, din, dout);
                vec![(*x, gx), (*w, gw), (*bias, gb)]
            }
            Op::ToRows { x } => {
                let [b, c, h, w] = self.nodes[x.0].value.dims4().expect("checked in forward");
                vec![(*x, kernels::rows_to_nchw(g, b, c, h, w))]
            }
            Op::FromRows { x } => {
                let [b, c, h, w] = node.value.dims4().expect("4-D by construction");
                vec![(*x, kernels::nchw_to_rows(g, b, c, h, w))]
            }
            Op::ScatterMean { x, graph } => {
                let c = node.value.shape()[1];
                vec![(*x, kernels::scatter_mean_backward(g, c, graph.offsets(), graph.sources()))]
            }
            Op::ScatterMax { x, arg } => {
                let c = node.value.shape()[1];
                let mut gx = vec![0.0; self.nodes[x.0].value.numel()];
                for (slot, (&src, &gv)) in arg.iter().zip(g).enumerate() {
                    if src != u32::MAX {
                        gx[src as usize * c + slot % c] += gv;
                    }
                }
                vec![(*x, gx)]
            }
            Op::MulChannel { x, gate } => {
                let [_, _, h, w] = node.value.dims4().expect("4-D by construction");
                let hw = h * w;
                let (xs, gs) = (val(*x), val(*gate));
                let mut gx = Vec::with_capacity(xs.len());
                let mut gg = Vec::with_capacity(gs.len());
                for ((xp, gp), &s) in xs.chunks_exact(hw).zip(g.chunks_exact(hw)).zip(gs) {
                    gx.extend(gp.iter().map(|&gv| gv * s));
                    gg.push(xp.iter().zip(gp).map(|(a, b)| a * b).sum());
                }
                vec![(*x, gx), (*gate, gg)]
            }
            Op::Sum { x } => vec![(*x, vec![g[0]; self.nodes[x.0].value.numel()])],
            Op::Mean { x } => {
                let n = self.nodes[x.0].value.numel();
                vec![(*x, vec![g[0] / n as f64; n])]
            }
            Op::MaskedSum { x, mask } => {
                vec![(*x, mask.iter().map(|&m| if m { g[0] } else { 0.0 }).collect())]
            }
            Op::DiffX { x } => {
                let w = self.nodes[x.0].value.shape()[3];
                let mut gx = vec![0.0; self.nodes[x.0].value.numel()];
                for (gi_row, go_row) in gx.chunks_exact_mut(w).zip(g.chunks_exact(w - 1)) {
                    for (i, &gv) in go_row.iter().enumerate() {
                        gi_row[i + 1] += gv;
                        gi_row[i] -= gv;
                    }
                }
                vec![(*x, gx)]
            }
            Op::DiffY { x } => {
                let [_, _, h, w] = self.nodes[x.0].value.dims4().expect("checked in forward");
                let mut gx = vec![0.0; self.nodes[x.0].value.numel()];
                for (gi, go) in gx.chunks_exact_mut(h * w).zip(g.chunks_exact((h - 1) * w)) {
                    for y in 0..h - 1 {
                        for i in 0..w {
                            let gv = go[y * w + i];
                            gi[(y + 1) * w + i] += gv;
                            gi[y * w + i] -= gv;
                        }
                    }
                }
                vec![(*x, gx)]
            }
        }
    }
}
