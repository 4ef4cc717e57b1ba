// Reverse-mode differentiation over an append-only node list.
//
// Every node stores its forward value. Nodes produced while recording from
// at least one grad-requiring input also store the rule needed to push a
// gradient back to their inputs; everything else is a constant leaf.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, Activation};
use super::{Result, Tensor, TensorError};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value living on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

/// Backward-rule identifier for every recorded operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Scale,
    AddScalar,
    Matmul,
    Permute,
    Reshape,
    Concat,
    Slice,
    Roll,
    BroadcastTo,
    Relu,
    Sigmoid,
    Tanh,
    Softmax,
    Mean,
    Sum,
    Upsample,
    Linear,
    BatchNorm,
    BatchNormEval,
    LayerNorm,
}

impl OpKind {
    pub const ALL: [OpKind; 25] = [
        OpKind::Leaf,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::Matmul,
        OpKind::Permute,
        OpKind::Reshape,
        OpKind::Concat,
        OpKind::Slice,
        OpKind::Roll,
        OpKind::BroadcastTo,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::Tanh,
        OpKind::Softmax,
        OpKind::Mean,
        OpKind::Sum,
        OpKind::Upsample,
        OpKind::Linear,
        OpKind::BatchNorm,
        OpKind::BatchNormEval,
        OpKind::LayerNorm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::Matmul => "matmul",
            OpKind::Permute => "permute",
            OpKind::Reshape => "reshape",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::Roll => "roll",
            OpKind::BroadcastTo => "broadcast_to",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Softmax => "softmax",
            OpKind::Mean => "avg_pool",
            OpKind::Sum => "sum",
            OpKind::Upsample => "upsample_bilinear",
            OpKind::Linear => "linear",
            OpKind::BatchNorm => "batch_norm",
            OpKind::BatchNormEval => "batch_norm_eval",
            OpKind::LayerNorm => "layer_norm",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl From<Activation> for OpKind {
    fn from(a: Activation) -> Self {
        match a {
            Activation::Relu => OpKind::Relu,
            Activation::Sigmoid => OpKind::Sigmoid,
            Activation::Tanh => OpKind::Tanh,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Matmul(usize, usize),
    Permute(usize, Vec<usize>),
    Reshape(usize),
    Concat {
        parts: Vec<usize>,
        axis: usize,
        sizes: Vec<usize>,
    },
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
    Roll {
        x: usize,
        axis: usize,
        shift: isize,
    },
    BroadcastTo(usize),
    Act(usize, Activation),
    Softmax(usize),
    Mean(usize, Vec<usize>),
    Sum(usize),
    Upsample(usize, usize),
    Linear {
        x: usize,
        w: usize,
        b: usize,
    },
    Norm {
        kind: OpKind,
        x: usize,
        scale: usize,
        offset: usize,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Div(..) => OpKind::Div,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::Matmul(..) => OpKind::Matmul,
            Op::Permute(..) => OpKind::Permute,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Concat { .. } => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::Roll { .. } => OpKind::Roll,
            Op::BroadcastTo(..) => OpKind::BroadcastTo,
            Op::Act(_, a) => (*a).into(),
            Op::Softmax(..) => OpKind::Softmax,
            Op::Mean(..) => OpKind::Mean,
            Op::Sum(..) => OpKind::Sum,
            Op::Upsample(..) => OpKind::Upsample,
            Op::Linear { .. } => OpKind::Linear,
            Op::Norm { kind, .. } => *kind,
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Append-only record of a forward computation.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    recording: bool,
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    fault: Option<OpKind>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape that records backward rules.
    pub fn new() -> Self {
        Self::with_recording(true)
    }

    /// A tape that only evaluates; every value is a constant.
    pub fn inference() -> Self {
        Self::with_recording(false)
    }

    fn with_recording(recording: bool) -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            recording,
            nodes: Vec::new(),
            params: HashMap::new(),
            fault: None,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Corrupt the backward rule of one op kind by scaling every gradient it
    /// emits by 1.5. Exists so gradient checks can be shown to catch errors.
    pub fn inject_fault(&mut self, kind: Option<OpKind>) {
        self.fault = kind;
    }

    fn idx(&self, v: Var) -> usize {
        assert_eq!(v.tape, self.id, "Var used on a tape it does not belong to");
        v.index
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[self.idx(v)].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[self.idx(v)].requires_grad
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn record(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        let needs = self.recording && inputs.iter().any(|&v| self.requires_grad(v));
        if needs {
            self.push(value, true, op)
        } else {
            self.push(value, false, Op::Leaf)
        }
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let rg = requires_grad && self.recording;
        self.push(value, rg, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Named trainable leaf. Binding the same name twice returns the first
    /// handle, so gradients from repeated use accumulate into one entry.
    pub fn param(&mut self, name: &str, value: &Tensor) -> Var {
        if let Some(&v) = self.params.get(name) {
            debug_assert_eq!(self.value(v).shape(), value.shape());
            return v;
        }
        let v = self.leaf(value.clone(), true);
        self.params.insert(name.to_string(), v);
        v
    }

    // -- elementwise ------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::add(self.value(a), self.value(b))?;
        Ok(self.record(v, &[a, b], Op::Add(a.index, b.index)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::sub(self.value(a), self.value(b))?;
        Ok(self.record(v, &[a, b], Op::Sub(a.index, b.index)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::mul(self.value(a), self.value(b))?;
        Ok(self.record(v, &[a, b], Op::Mul(a.index, b.index)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::div(self.value(a), self.value(b))?;
        Ok(self.record(v, &[a, b], Op::Div(a.index, b.index)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let v = kernels::scale(self.value(x), factor);
        self.record(v, &[x], Op::Scale(x.index, factor))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|e| e + c);
        self.record(v, &[x], Op::AddScalar(x.index))
    }

    pub fn activation(&mut self, kind: Activation, x: Var) -> Var {
        let v = kernels::activation(kind, self.value(x));
        self.record(v, &[x], Op::Act(x.index, kind))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(Activation::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(Activation::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(Activation::Tanh, x)
    }

    // -- products and layout ------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::matmul(self.value(a), self.value(b))?;
        Ok(self.record(v, &[a, b], Op::Matmul(a.index, b.index)))
    }

    pub fn permute(&mut self, x: Var, order: &[usize]) -> Result<Var> {
        let v = kernels::permute(self.value(x), order)?;
        Ok(self.record(v, &[x], Op::Permute(x.index, order.to_vec())))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        Ok(self.record(v, &[x], Op::Reshape(x.index)))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = kernels::concat(&values, axis)?;
        let sizes = values.iter().map(|t| t.shape()[axis]).collect();
        let op = Op::Concat {
            parts: parts.iter().map(|p| p.index).collect(),
            axis,
            sizes,
        };
        Ok(self.record(v, parts, op))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = kernels::slice(self.value(x), axis, start, len)?;
        Ok(self.record(
            v,
            &[x],
            Op::Slice {
                x: x.index,
                axis,
                start,
            },
        ))
    }

    pub fn roll(&mut self, x: Var, axis: usize, shift: isize) -> Result<Var> {
        let v = kernels::roll(self.value(x), axis, shift)?;
        Ok(self.record(
            v,
            &[x],
            Op::Roll {
                x: x.index,
                axis,
                shift,
            },
        ))
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = kernels::broadcast_to(self.value(x), shape)?;
        Ok(self.record(v, &[x], Op::BroadcastTo(x.index)))
    }

    // -- reductions -----------------------------------------------------------

    pub fn softmax_lastaxis(&mut self, x: Var) -> Var {
        let v = kernels::softmax_lastaxis(self.value(x));
        self.record(v, &[x], Op::Softmax(x.index))
    }

    /// Average over `axes`, removing them from the shape.
    pub fn avg_pool(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let v = kernels::mean_axes(self.value(x), axes)?;
        Ok(self.record(v, &[x], Op::Mean(x.index, axes.to_vec())))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = kernels::sum_all(self.value(x));
        self.record(v, &[x], Op::Sum(x.index))
    }

    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        let v = kernels::upsample_bilinear(self.value(x), factor)?;
        Ok(self.record(v, &[x], Op::Upsample(x.index, factor)))
    }

    // -- learned maps ---------------------------------------------------------

    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let v = kernels::linear(self.value(x), self.value(weight), self.value(bias))?;
        let op = Op::Linear {
            x: x.index,
            w: weight.index,
            b: bias.index,
        };
        Ok(self.record(v, &[x, weight, bias], op))
    }

    /// Batch normalization with statistics of this call. Returns the output
    /// and the statistics so callers can update running estimates.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        scale: Var,
        offset: Var,
    ) -> Result<(Var, kernels::ChannelStats)> {
        let stats = kernels::channel_stats(self.value(x));
        let (y, xhat) = kernels::channel_affine_norm(
            self.value(x),
            &stats.mean,
            &stats.var,
            self.value(scale),
            self.value(offset),
        )?;
        let inv_std = stats
            .var
            .iter()
            .map(|v| 1.0 / (v + kernels::NORM_EPS).sqrt())
            .collect();
        let op = Op::Norm {
            kind: OpKind::BatchNorm,
            x: x.index,
            scale: scale.index,
            offset: offset.index,
            xhat,
            inv_std,
        };
        Ok((self.record(y, &[x, scale, offset], op), stats))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        scale: Var,
        offset: Var,
        mean: &[f64],
        var: &[f64],
    ) -> Result<Var> {
        let (y, xhat) = kernels::channel_affine_norm(
            self.value(x),
            mean,
            var,
            self.value(scale),
            self.value(offset),
        )?;
        let inv_std = var
            .iter()
            .map(|v| 1.0 / (v + kernels::NORM_EPS).sqrt())
            .collect();
        let op = Op::Norm {
            kind: OpKind::BatchNormEval,
            x: x.index,
            scale: scale.index,
            offset: offset.index,
            xhat,
            inv_std,
        };
        Ok(self.record(y, &[x, scale, offset], op))
    }

    pub fn layer_norm(&mut self, x: Var, scale: Var, offset: Var) -> Result<Var> {
        let (y, xhat, inv_std) =
            kernels::layer_norm(self.value(x), self.value(scale), self.value(offset))?;
        let op = Op::Norm {
            kind: OpKind::LayerNorm,
            x: x.index,
            scale: scale.index,
            offset: offset.index,
            xhat,
            inv_std,
        };
        Ok(self.record(y, &[x, scale, offset], op))
    }

    // -- backward -------------------------------------------------------------

    /// Gradients of a single-element `loss` with respect to every
    /// grad-requiring leaf that contributes to it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.tape != self.id || loss.index >= self.nodes.len() {
            return Err(TensorError::Detached);
        }
        let root = &self.nodes[loss.index];
        if root.value.len() != 1 {
            return Err(TensorError::NonScalarLoss(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Err(TensorError::Detached);
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.index + 1];
        grads[loss.index] = Some(Tensor::full(root.value.shape(), 1.0)?);
        let mut leaves = HashMap::new();
        for i in (0..=loss.index).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                leaves.insert(i, g);
                continue;
            }
            let mut contributions = self.backward_rule(node, &g)?;
            if self.fault == Some(node.op.kind()) {
                for (_, c) in contributions.iter_mut() {
                    *c = kernels::scale(c, 1.5);
                }
            }
            for (input, contrib) in contributions {
                if !self.nodes[input].requires_grad {
                    continue;
                }
                debug_assert_eq!(contrib.shape(), self.nodes[input].value.shape());
                grads[input] = Some(match grads[input].take() {
                    Some(acc) => kernels::add(&acc, &contrib)?,
                    None => contrib,
                });
            }
        }
        let names = self
            .params
            .iter()
            .filter(|(_, v)| leaves.contains_key(&v.index))
            .map(|(k, v)| (k.clone(), v.index))
            .collect();
        Ok(Gradients {
            tape: self.id,
            leaves,
            names,
        })
    }

    fn backward_rule(&self, node: &Node, g: &Tensor) -> Result<Vec<(usize, Tensor)>> {
        let val = |i: usize| &self.nodes[i].value;
        let shape = |i: usize| self.nodes[i].value.shape();
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![
                (*a, kernels::reduce_to(g, shape(*a))?),
                (*b, kernels::reduce_to(g, shape(*b))?),
            ],
            Op::Sub(a, b) => vec![
                (*a, kernels::reduce_to(g, shape(*a))?),
                (*b, kernels::scale(&kernels::reduce_to(g, shape(*b))?, -1.0)),
            ],
            Op::Mul(a, b) => vec![
                (
                    *a,
                    kernels::reduce_to(&kernels::mul(g, val(*b))?, shape(*a))?,
                ),
                (
                    *b,
                    kernels::reduce_to(&kernels::mul(g, val(*a))?, shape(*b))?,
                ),
            ],
            Op::Div(a, b) => {
                let ga = kernels::div(g, val(*b))?;
                // d(a/b)/db = -(a/b)/b
                let q = kernels::div(&node.value, val(*b))?;
                let gb = kernels::scale(&kernels::mul(g, &q)?, -1.0);
                vec![
                    (*a, kernels::reduce_to(&ga, shape(*a))?),
                    (*b, kernels::reduce_to(&gb, shape(*b))?),
                ]
            }
            Op::Scale(x, f) => vec![(*x, kernels::scale(g, *f))],
            Op::AddScalar(x) => vec![(*x, g.clone())],
            Op::Matmul(a, b) => {
                let ga = kernels::matmul(g, &kernels::transpose_last2(val(*b))?)?;
                let gb = kernels::matmul(&kernels::transpose_last2(val(*a))?, g)?;
                vec![
                    (*a, kernels::reduce_to(&ga, shape(*a))?),
                    (*b, kernels::reduce_to(&gb, shape(*b))?),
                ]
            }
            Op::Permute(x, order) => {
                vec![(
                    *x,
                    kernels::permute(g, &kernels::inverse_permutation(order))?,
                )]
            }
            Op::Reshape(x) => vec![(*x, g.reshape(shape(*x))?)],
            Op::Concat { parts, axis, sizes } => {
                let mut out = Vec::with_capacity(parts.len());
                let mut start = 0;
                for (&p, &len) in parts.iter().zip(sizes) {
                    out.push((p, kernels::slice(g, *axis, start, len)?));
                    start += len;
                }
                out
            }
            Op::Slice { x, axis, start } => {
                vec![(*x, kernels::unslice(g, *axis, *start, shape(*x)[*axis])?)]
            }
            Op::Roll { x, axis, shift } => vec![(*x, kernels::roll(g, *axis, -shift)?)],
            Op::BroadcastTo(x) => vec![(*x, kernels::reduce_to(g, shape(*x))?)],
            Op::Act(x, kind) => {
                let d = node.value.map(|y| kind.derivative_from_output(y));
                vec![(*x, kernels::mul(g, &d)?)]
            }
            Op::Softmax(x) => {
                let n = *node.value.shape().last().expect("rank >= 1");
                let mut out = Vec::with_capacity(g.len());
                for (yr, gr) in node.value.data().chunks(n).zip(g.data().chunks(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    out.extend(yr.iter().zip(gr).map(|(y, g)| y * (g - dot)));
                }
                vec![(*x, Tensor::new(shape(*x), out)?)]
            }
            Op::Mean(x, axes) => {
                let count: usize = axes.iter().map(|&a| shape(*x)[a]).product();
                let keep = kernels::keepdim_shape(shape(*x), axes);
                let gk = g.reshape(&keep)?;
                let spread = kernels::broadcast_to(&gk, shape(*x))?;
                vec![(*x, kernels::scale(&spread, 1.0 / count as f64))]
            }
            Op::Sum(x) => vec![(*x, Tensor::full(shape(*x), g.item())?)],
            Op::Upsample(x, factor) => {
                let s = shape(*x);
                vec![(
                    *x,
                    kernels::upsample_bilinear_adjoint(g, s[0], s[1], *factor)?,
                )]
            }
            Op::Linear { x, w, b } => {
                let (wt, xt) = (val(*w), val(*x));
                let (out_f, in_f) = (wt.shape()[0], wt.shape()[1]);
                let rows = xt.len() / in_f;
                let g2 = g.reshape(&[rows, out_f])?;
                let gx = kernels::matmul(&g2, wt)?.reshape(xt.shape())?;
                let x2 = xt.reshape(&[rows, in_f])?;
                let gw = kernels::matmul(&kernels::transpose_last2(&g2)?, &x2)?;
                let gb = kernels::reduce_to(&g2, &[out_f])?;
                vec![(*x, gx), (*w, gw), (*b, gb)]
            }
            Op::Norm {
                kind,
                x,
                scale,
                offset,
                xhat,
                inv_std,
            } => {
                let c = *shape(*x).last().expect("rank >= 1");
                let sc = val(*scale).data();
                let gd = g.data();
                let xh = xhat.data();
                let mut g_scale = vec![0.0; c];
                let mut g_offset = vec![0.0; c];
                let mut gx = vec![0.0; gd.len()];
                match kind {
                    OpKind::LayerNorm => {
                        for (r, ((gr, xr), inv)) in
                            gd.chunks(c).zip(xh.chunks(c)).zip(inv_std).enumerate()
                        {
                            let mut s1 = 0.0;
                            let mut s2 = 0.0;
                            for ch in 0..c {
                                g_scale[ch] += gr[ch] * xr[ch];
                                g_offset[ch] += gr[ch];
                                let d = gr[ch] * sc[ch];
                                s1 += d;
                                s2 += d * xr[ch];
                            }
                            let n = c as f64;
                            for ch in 0..c {
                                let d = gr[ch] * sc[ch];
                                gx[r * c + ch] = inv / n * (n * d - s1 - xr[ch] * s2);
                            }
                        }
                    }
                    OpKind::BatchNorm => {
                        let rows = gd.len() / c;
                        for (gr, xr) in gd.chunks(c).zip(xh.chunks(c)) {
                            for ch in 0..c {
                                g_scale[ch] += gr[ch] * xr[ch];
                                g_offset[ch] += gr[ch];
                            }
                        }
                        let n = rows as f64;
                        for (r, (gr, xr)) in gd.chunks(c).zip(xh.chunks(c)).enumerate() {
                            for ch in 0..c {
                                gx[r * c + ch] = sc[ch] * inv_std[ch] / n
                                    * (n * gr[ch] - g_offset[ch] - xr[ch] * g_scale[ch]);
                            }
                        }
                    }
                    _ => {
                        for (r, (gr, xr)) in gd.chunks(c).zip(xh.chunks(c)).enumerate() {
                            for ch in 0..c {
                                g_scale[ch] += gr[ch] * xr[ch];
                                g_offset[ch] += gr[ch];
                                gx[r * c + ch] = gr[ch] * sc[ch] * inv_std[ch];
                            }
                        }
                    }
                }
                vec![
                    (*x, Tensor::new(shape(*x), gx)?),
                    (*scale, Tensor::new(&[c], g_scale)?),
                    (*offset, Tensor::new(&[c], g_offset)?),
                ]
            }
        })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    tape: u64,
    leaves: HashMap<usize, Tensor>,
    names: HashMap<String, usize>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.leaves.get(&v.index)
    }

    /// Gradient of a leaf bound through [`Tape::param`].
    pub fn named(&self, name: &str) -> Option<&Tensor> {
        self.names.get(name).and_then(|i| self.leaves.get(i))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.keys().map(String::as_str)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_sum_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(&[3.0]), true);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(&[0.0]), true);
        let s = tape.sigmoid(x);
        let loss = tape.sum(s);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.25]);
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(&[1.0, 2.0]), true);
        assert!(matches!(tape.backward(x), Err(TensorError::NonScalarLoss(s)) if s == vec![2]));
        let c = tape.constant(Tensor::scalar(1.0));
        assert!(matches!(tape.backward(c), Err(TensorError::Detached)));
        let other = Tape::new();
        let s = tape.sum(x);
        assert!(matches!(other.backward(s), Err(TensorError::Detached)));
    }

    #[test]
    fn inference_tape_records_nothing() {
        let mut tape = Tape::inference();
        let x = tape.leaf(Tensor::vector(&[1.0]), true);
        let y = tape.tanh(x);
        assert!(!tape.requires_grad(y));
        assert!(matches!(tape.backward(y), Err(TensorError::Detached)));
    }

    #[test]
    fn params_are_deduplicated_by_name() {
        let mut tape = Tape::new();
        let w = Tensor::vector(&[2.0]);
        let a = tape.param("w", &w);
        let b = tape.param("w", &w);
        assert_eq!(a, b);
        let p = tape.mul(a, b).unwrap();
        let loss = tape.sum(p);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.named("w").unwrap().data(), &[4.0]);
    }

    #[test]
    fn op_names_round_trip() {
        for k in OpKind::ALL {
            assert_eq!(OpKind::from_name(k.name()), Some(k));
        }
    }
}
