//! Dense row-major tensors and a single-pass reverse-mode tape.
//!
//! The primitive set is the fixed vocabulary the smoothed losses are built
//! from: add, sub, scalar-mul, elementwise-mul, matmul, valid convolution,
//! square, sqrt, exp, erf, relu, sum, mean, squared Frobenius norm, average
//! pooling, flatten and diag-embed. Every op validates shapes, records onto
//! the tape when any input requires a gradient, and rejects non-finite
//! outputs.
//!
//! Tape policy: one `backward` per tape. Optimizer steps build a fresh tape
//! per iteration; a second `backward` on the same tape is an error.

pub mod kernels;

use crate::error::{Error, Result};
use std::f64::consts::FRAC_2_SQRT_PI;

/// Dense row-major tensor of 64-bit reals. A scalar has the empty shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, enforcing `product(shape) == data.len()` and finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() || shape.contains(&0) {
            return Err(Error::InvalidShape {
                op: "tensor",
                shape,
                reason: format!("shape product must equal data length {}", data.len()),
            });
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: "tensor".into(),
                detail: format!("input value {bad}"),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.data.len() == 1);
        self.data[0]
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    AddBias,
    ScalarMul(f64),
    MatMul,
    Conv2dValid { stride: usize },
    Square,
    Sqrt,
    Exp,
    Erf,
    Relu,
    SmoothRelu,
    SmoothReluSq,
    Sum,
    Mean,
    FrobeniusNormSq,
    AvgPool { window: usize, stride: usize },
    Flatten,
    DiagEmbed,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::AddBias => "add_bias",
            Op::ScalarMul(_) => "scalar_mul",
            Op::MatMul => "matmul",
            Op::Conv2dValid { .. } => "conv2d_valid",
            Op::Square => "square",
            Op::Sqrt => "sqrt",
            Op::Exp => "exp",
            Op::Erf => "erf",
            Op::Relu => "relu",
            Op::SmoothRelu => "smooth_relu",
            Op::SmoothReluSq => "smooth_relu_sq",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::FrobeniusNormSq => "frobenius_norm_sq",
            Op::AvgPool { .. } => "avg_pool",
            Op::Flatten => "flatten",
            Op::DiagEmbed => "diag_embed",
        }
    }
}

struct Node {
    op: Op,
    inputs: Vec<ValueId>,
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    /// Per-element backward factors saved by fused ops (e.g. the smoothed
    /// relu derivative), avoiding transcendental recomputation.
    aux: Option<Vec<f64>>,
}

/// Records primitives in topological order and replays them in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
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

    /// Registers a leaf tensor. Parameters pass `requires_grad = true`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> ValueId {
        self.push(Op::Leaf, vec![], value, requires_grad)
    }

    /// Registers a constant (no gradient tracked).
    pub fn constant(&mut self, value: Tensor) -> ValueId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient buffer of `id` after `backward`; `None` for untracked nodes.
    pub fn grad(&self, id: ValueId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn push(&mut self, op: Op, inputs: Vec<ValueId>, value: Tensor, requires_grad: bool) -> ValueId {
        let id = ValueId(self.nodes.len());
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
            grad: None,
            aux: None,
        });
        id
    }

    fn any_requires(&self, ids: &[ValueId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn check_finite(&self, op: &Op, data: &[f64]) -> Result<()> {
        if let Some((i, bad)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: op.name().into(),
                detail: format!("output[{i}] = {bad}"),
            });
        }
        Ok(())
    }

    fn record(&mut self, op: Op, inputs: Vec<ValueId>, shape: Vec<usize>, data: Vec<f64>) -> Result<ValueId> {
        self.check_finite(&op, &data)?;
        let rg = self.any_requires(&inputs);
        Ok(self.push(op, inputs, Tensor { shape, data }, rg))
    }

    fn binary_same_shape(&mut self, op: Op, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape != tb.shape {
            return Err(Error::ShapeMismatch {
                op: op.name(),
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let data: Vec<f64> = match op {
            Op::Add => ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect(),
            Op::Sub => ta.data.iter().zip(&tb.data).map(|(x, y)| x - y).collect(),
            Op::Mul => ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect(),
            _ => unreachable!(),
        };
        let shape = ta.shape.clone();
        self.record(op, vec![a, b], shape, data)
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary_same_shape(Op::Add, a, b)
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary_same_shape(Op::Sub, a, b)
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary_same_shape(Op::Mul, a, b)
    }

    /// Bias broadcast: `[b, d] + [d]` or `[b, c, h, w] + [c]`. The only
    /// broadcasting form the tape supports.
    pub fn add_bias(&mut self, x: ValueId, bias: ValueId) -> Result<ValueId> {
        let (tx, tb) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        let ok = match (tx.shape.as_slice(), tb.shape.as_slice()) {
            ([_, d], [db]) => d == db,
            ([_, c, _, _], [cb]) => c == cb,
            _ => false,
        };
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: tx.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let mut data = tx.data.clone();
        match tx.shape.as_slice() {
            [b, d] => {
                for row in 0..*b {
                    for j in 0..*d {
                        data[row * d + j] += tb.data[j];
                    }
                }
            }
            [b, c, h, w] => {
                let plane = h * w;
                for img in 0..*b {
                    for ch in 0..*c {
                        let base = (img * c + ch) * plane;
                        let bv = tb.data[ch];
                        for v in &mut data[base..base + plane] {
                            *v += bv;
                        }
                    }
                }
            }
            _ => unreachable!(),
        }
        let shape = tx.shape.clone();
        self.record(Op::AddBias, vec![x, bias], shape, data)
    }

    pub fn scalar_mul(&mut self, a: ValueId, c: f64) -> Result<ValueId> {
        let ta = &self.nodes[a.0].value;
        let data: Vec<f64> = ta.data.iter().map(|x| c * x).collect();
        let shape = ta.shape.clone();
        self.record(Op::ScalarMul(c), vec![a], shape, data)
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k) = match ta.shape.as_slice() {
            [m, k] => (*m, *k),
            _ => {
                return Err(Error::InvalidShape {
                    op: "matmul",
                    shape: ta.shape.clone(),
                    reason: "expected a rank-2 left operand".into(),
                })
            }
        };
        let (k2, n) = match tb.shape.as_slice() {
            [k2, n] => (*k2, *n),
            _ => {
                return Err(Error::InvalidShape {
                    op: "matmul",
                    shape: tb.shape.clone(),
                    reason: "expected a rank-2 right operand".into(),
                })
            }
        };
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let mut data = vec![0.0; m * n];
        kernels::matmul_acc(&ta.data, &tb.data, &mut data, m, k, n);
        self.record(Op::MatMul, vec![a, b], vec![m, n], data)
    }

    /// Valid (no padding) 2-D convolution with a square kernel.
    /// `x`: `[batch, cin, h, w]`, `kernel`: `[cout, cin, k, k]`.
    pub fn conv2d_valid(&mut self, x: ValueId, kernel: ValueId, stride: usize) -> Result<ValueId> {
        let (tx, tk) = (&self.nodes[x.0].value, &self.nodes[kernel.0].value);
        let (b, cin, h, w) = match tx.shape.as_slice() {
            [b, c, h, w] => (*b, *c, *h, *w),
            _ => {
                return Err(Error::InvalidShape {
                    op: "conv2d_valid",
                    shape: tx.shape.clone(),
                    reason: "expected input [batch, cin, h, w]".into(),
                })
            }
        };
        let (cout, cin2, k, k2) = match tk.shape.as_slice() {
            [o, c, k, k2] => (*o, *c, *k, *k2),
            _ => {
                return Err(Error::InvalidShape {
                    op: "conv2d_valid",
                    shape: tk.shape.clone(),
                    reason: "expected kernel [cout, cin, k, k]".into(),
                })
            }
        };
        if cin != cin2 || k != k2 {
            return Err(Error::ShapeMismatch {
                op: "conv2d_valid",
                lhs: tx.shape.clone(),
                rhs: tk.shape.clone(),
            });
        }
        if stride == 0 || k > h || k > w {
            return Err(Error::InvalidShape {
                op: "conv2d_valid",
                shape: tx.shape.clone(),
                reason: format!("kernel {k} with stride {stride} does not fit input {h}x{w}"),
            });
        }
        let ho = kernels::valid_out_extent(h, k, stride);
        let wo = kernels::valid_out_extent(w, k, stride);
        let mut data = vec![0.0; b * cout * ho * wo];
        for img in 0..b {
            kernels::conv2d_forward(
                &tx.data[img * cin * h * w..(img + 1) * cin * h * w],
                &tk.data,
                &mut data[img * cout * ho * wo..(img + 1) * cout * ho * wo],
                cin,
                h,
                w,
                cout,
                k,
                stride,
            );
        }
        self.record(Op::Conv2dValid { stride }, vec![x, kernel], vec![b, cout, ho, wo], data)
    }

    fn unary<F: Fn(f64) -> f64>(&mut self, op: Op, a: ValueId, f: F) -> Result<ValueId> {
        let ta = &self.nodes[a.0].value;
        let data: Vec<f64> = ta.data.iter().map(|&x| f(x)).collect();
        let shape = ta.shape.clone();
        self.record(op, vec![a], shape, data)
    }

    pub fn square(&mut self, a: ValueId) -> Result<ValueId> {
        self.unary(Op::Square, a, |x| x * x)
    }

    pub fn sqrt(&mut self, a: ValueId) -> Result<ValueId> {
        self.unary(Op::Sqrt, a, f64::sqrt)
    }

    pub fn exp(&mut self, a: ValueId) -> Result<ValueId> {
        self.unary(Op::Exp, a, f64::exp)
    }

    pub fn erf(&mut self, a: ValueId) -> Result<ValueId> {
        self.unary(Op::Erf, a, libm::erf)
    }

    pub fn relu(&mut self, a: ValueId) -> Result<ValueId> {
        self.unary(Op::Relu, a, |x| x.max(0.0))
    }

    /// Fused erf-form smoothed relu at `sigma > 0` (use `relu` at zero).
    /// Backward is the exact identity `d/dx relu_sigma(x) = (1 + erf(x/sigma))/2`,
    /// whose value is already computed here and cached on the node.
    pub fn smooth_relu(&mut self, a: ValueId, sigma: f64) -> Result<ValueId> {
        if sigma <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "smooth_relu primitive needs sigma > 0, got {sigma}"
            )));
        }
        let ta = &self.nodes[a.0].value;
        let n = ta.len();
        let gauss_coeff = sigma / (2.0 * std::f64::consts::PI.sqrt());
        let mut data = Vec::with_capacity(n);
        let mut aux = Vec::with_capacity(n);
        for &x in &ta.data {
            let t = x / sigma;
            let cdf = 0.5 * (1.0 + libm::erf(t));
            data.push(x * cdf + gauss_coeff * (-t * t).exp());
            aux.push(cdf);
        }
        let shape = ta.shape.clone();
        let id = self.record(Op::SmoothRelu, vec![a], shape, data)?;
        self.nodes[id.0].aux = Some(aux);
        Ok(id)
    }

    /// Fused smoothed squared relu at `sigma > 0`. Backward uses
    /// `d/dx (relu^2)_sigma(x) = 2 relu_sigma(x)`, cached on the node.
    /// The value is clamped at zero where far-tail cancellation rounds the
    /// expectation of a square negative.
    pub fn smooth_relu_sq(&mut self, a: ValueId, sigma: f64) -> Result<ValueId> {
        if sigma <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "smooth_relu_sq primitive needs sigma > 0, got {sigma}"
            )));
        }
        let ta = &self.nodes[a.0].value;
        let n = ta.len();
        let gauss_coeff = sigma / (2.0 * std::f64::consts::PI.sqrt());
        let sigma_sq = sigma * sigma;
        let mut data = Vec::with_capacity(n);
        let mut aux = Vec::with_capacity(n);
        for &x in &ta.data {
            let t = x / sigma;
            let cdf = 0.5 * (1.0 + libm::erf(t));
            let gauss = (-t * t).exp();
            let val = 0.5 * cdf * (sigma_sq + 2.0 * x * x) + gauss_coeff * x * gauss;
            data.push(val.max(0.0));
            aux.push(2.0 * (x * cdf + gauss_coeff * gauss));
        }
        let shape = ta.shape.clone();
        let id = self.record(Op::SmoothReluSq, vec![a], shape, data)?;
        self.nodes[id.0].aux = Some(aux);
        Ok(id)
    }

    pub fn sum(&mut self, a: ValueId) -> Result<ValueId> {
        let s: f64 = self.nodes[a.0].value.data.iter().sum();
        self.record(Op::Sum, vec![a], vec![], vec![s])
    }

    pub fn mean(&mut self, a: ValueId) -> Result<ValueId> {
        let t = &self.nodes[a.0].value;
        let s: f64 = t.data.iter().sum::<f64>() / t.data.len() as f64;
        self.record(Op::Mean, vec![a], vec![], vec![s])
    }

    /// Sum of squared entries (any rank).
    pub fn frobenius_norm_sq(&mut self, a: ValueId) -> Result<ValueId> {
        let s: f64 = self.nodes[a.0].value.data.iter().map(|x| x * x).sum();
        self.record(Op::FrobeniusNormSq, vec![a], vec![], vec![s])
    }

    /// Average pooling over `[batch, c, h, w]` with a square window.
    pub fn avg_pool(&mut self, x: ValueId, window: usize, stride: usize) -> Result<ValueId> {
        let tx = &self.nodes[x.0].value;
        let (b, c, h, w) = match tx.shape.as_slice() {
            [b, c, h, w] => (*b, *c, *h, *w),
            _ => {
                return Err(Error::InvalidShape {
                    op: "avg_pool",
                    shape: tx.shape.clone(),
                    reason: "expected input [batch, c, h, w]".into(),
                })
            }
        };
        if stride == 0 || window > h || window > w {
            return Err(Error::InvalidShape {
                op: "avg_pool",
                shape: tx.shape.clone(),
                reason: format!("window {window} with stride {stride} does not fit {h}x{w}"),
            });
        }
        let ho = kernels::valid_out_extent(h, window, stride);
        let wo = kernels::valid_out_extent(w, window, stride);
        let mut data = vec![0.0; b * c * ho * wo];
        for img in 0..b {
            kernels::avg_pool_forward(
                &tx.data[img * c * h * w..(img + 1) * c * h * w],
                &mut data[img * c * ho * wo..(img + 1) * c * ho * wo],
                c,
                h,
                w,
                window,
                stride,
            );
        }
        self.record(Op::AvgPool { window, stride }, vec![x], vec![b, c, ho, wo], data)
    }

    /// Collapses all trailing dimensions: `[b, ...] -> [b, n]`.
    pub fn flatten(&mut self, x: ValueId) -> Result<ValueId> {
        let tx = &self.nodes[x.0].value;
        if tx.rank() < 2 {
            return Err(Error::InvalidShape {
                op: "flatten",
                shape: tx.shape.clone(),
                reason: "expected rank >= 2".into(),
            });
        }
        let b = tx.shape[0];
        let rest: usize = tx.shape[1..].iter().product();
        let data = tx.data.clone();
        self.record(Op::Flatten, vec![x], vec![b, rest], data)
    }

    /// Embeds a vector as the diagonal of a square matrix.
    pub fn diag_embed(&mut self, v: ValueId) -> Result<ValueId> {
        let tv = &self.nodes[v.0].value;
        let n = match tv.shape.as_slice() {
            [n] => *n,
            _ => {
                return Err(Error::InvalidShape {
                    op: "diag_embed",
                    shape: tv.shape.clone(),
                    reason: "expected a rank-1 input".into(),
                })
            }
        };
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = tv.data[i];
        }
        self.record(Op::DiagEmbed, vec![v], vec![n, n], data)
    }

    /// Reverse pass from a scalar loss. Populates `grad` on every node that
    /// requires a gradient and is reachable from `loss`.
    pub fn backward(&mut self, loss: ValueId) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let lt = &self.nodes[loss.0].value;
        if !lt.is_scalar() {
            return Err(Error::BackwardNonScalar {
                shape: lt.shape.clone(),
            });
        }
        self.backward_done = true;

        let n = self.nodes.len();
        let mut adjoint: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        adjoint[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let g = match adjoint[idx].take() {
                Some(g) => g,
                None => continue,
            };
            if matches!(self.nodes[idx].op, Op::Leaf) {
                self.nodes[idx].grad = Some(g);
                continue;
            }
            propagate(&self.nodes, idx, &g, &mut adjoint);
        }
        Ok(())
    }
}

fn accum(
    nodes: &[Node],
    adjoint: &mut [Option<Vec<f64>>],
    id: ValueId,
    contrib: impl FnOnce(&mut [f64]),
) {
    if !nodes[id.0].requires_grad {
        return;
    }
    let slot = &mut adjoint[id.0];
    if slot.is_none() {
        *slot = Some(vec![0.0; nodes[id.0].value.len()]);
    }
    contrib(slot.as_mut().unwrap());
}

#[allow(clippy::needless_range_loop)] // window loops mirror the layout math
fn propagate(nodes: &[Node], idx: usize, g: &[f64], adjoint: &mut [Option<Vec<f64>>]) {
    let node = &nodes[idx];
    let inputs = &node.inputs;
    let out_value = &node.value.data;
    match &node.op {
        Op::Leaf => unreachable!(),
        Op::Add => {
            accum(nodes, adjoint, inputs[0], |a| {
                for (av, gv) in a.iter_mut().zip(g) {
                    *av += gv;
                }
            });
            accum(nodes, adjoint, inputs[1], |a| {
                for (av, gv) in a.iter_mut().zip(g) {
                    *av += gv;
                }
            });
        }
        Op::Sub => {
            accum(nodes, adjoint, inputs[0], |a| {
                for (av, gv) in a.iter_mut().zip(g) {
                    *av += gv;
                }
            });
            accum(nodes, adjoint, inputs[1], |a| {
                for (av, gv) in a.iter_mut().zip(g) {
                    *av -= gv;
                }
            });
        }
        Op::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            let bd = &nodes[b.0].value.data;
            accum(nodes, adjoint, a, |acc| {
                for ((av, gv), bv) in acc.iter_mut().zip(g).zip(bd) {
                    *av += gv * bv;
                }
            });
            let ad = &nodes[a.0].value.data;
            accum(nodes, adjoint, b, |acc| {
                for ((bv, gv), av) in acc.iter_mut().zip(g).zip(ad) {
                    *bv += gv * av;
                }
            });
        }
        Op::AddBias => {
            let (x, bias) = (inputs[0], inputs[1]);
            accum(nodes, adjoint, x, |a| {
                for (av, gv) in a.iter_mut().zip(g) {
                    *av += gv;
                }
            });
            let xshape = &nodes[x.0].value.shape;
            accum(nodes, adjoint, bias, |a| match xshape.as_slice() {
                [b, d] => {
                    for row in 0..*b {
                        for j in 0..*d {
                            a[j] += g[row * d + j];
                        }
                    }
                }
                [b, c, h, w] => {
                    let plane = h * w;
                    for img in 0..*b {
                        for ch in 0..*c {
                            let base = (img * c + ch) * plane;
                            a[ch] += g[base..base + plane].iter().sum::<f64>();
                        }
                    }
                }
                _ => unreachable!(),
            });
        }
        Op::ScalarMul(c) => {
            let c = *c;
            accum(nodes, adjoint, inputs[0], |a| {
                for (av, gv) in a.iter_mut().zip(g) {
                    *av += c * gv;
                }
            });
        }
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k) = {
                let s = &nodes[a.0].value.shape;
                (s[0], s[1])
            };
            let n = nodes[b.0].value.shape[1];
            let bd = &nodes[b.0].value.data;
            accum(nodes, adjoint, a, |acc| {
                kernels::matmul_acc_bt(g, bd, acc, m, n, k);
            });
            let ad = &nodes[a.0].value.data;
            accum(nodes, adjoint, b, |acc| {
                kernels::matmul_acc_at(ad, g, acc, m, k, n);
            });
        }
        Op::Conv2dValid { stride } => {
            let (x, ker) = (inputs[0], inputs[1]);
            let (b, cin, h, w) = {
                let s = &nodes[x.0].value.shape;
                (s[0], s[1], s[2], s[3])
            };
            let (cout, k) = {
                let s = &nodes[ker.0].value.shape;
                (s[0], s[2])
            };
            let ho = kernels::valid_out_extent(h, k, *stride);
            let wo = kernels::valid_out_extent(w, k, *stride);
            let stride = *stride;
            let kd = &nodes[ker.0].value.data;
            accum(nodes, adjoint, x, |acc| {
                for img in 0..b {
                    kernels::conv2d_backward_input(
                        &g[img * cout * ho * wo..(img + 1) * cout * ho * wo],
                        kd,
                        &mut acc[img * cin * h * w..(img + 1) * cin * h * w],
                        cin,
                        h,
                        w,
                        cout,
                        k,
                        stride,
                    );
                }
            });
            let xd = &nodes[x.0].value.data;
            accum(nodes, adjoint, ker, |acc| {
                for img in 0..b {
                    kernels::conv2d_backward_kernel(
                        &g[img * cout * ho * wo..(img + 1) * cout * ho * wo],
                        &xd[img * cin * h * w..(img + 1) * cin * h * w],
                        acc,
                        cin,
                        h,
                        w,
                        cout,
                        k,
                        stride,
                    );
                }
            });
        }
        Op::Square => {
            let ad = &nodes[inputs[0].0].value.data;
            accum(nodes, adjoint, inputs[0], |acc| {
                for ((av, gv), xv) in acc.iter_mut().zip(g).zip(ad) {
                    *av += 2.0 * xv * gv;
                }
            });
        }
        Op::Sqrt => {
            accum(nodes, adjoint, inputs[0], |acc| {
                for ((av, gv), yv) in acc.iter_mut().zip(g).zip(out_value) {
                    *av += gv / (2.0 * yv);
                }
            });
        }
        Op::Exp => {
            accum(nodes, adjoint, inputs[0], |acc| {
                for ((av, gv), yv) in acc.iter_mut().zip(g).zip(out_value) {
                    *av += gv * yv;
                }
            });
        }
        Op::Erf => {
            let ad = &nodes[inputs[0].0].value.data;
            accum(nodes, adjoint, inputs[0], |acc| {
                for ((av, gv), xv) in acc.iter_mut().zip(g).zip(ad) {
                    *av += gv * FRAC_2_SQRT_PI * (-xv * xv).exp();
                }
            });
        }
        Op::Relu => {
            let ad = &nodes[inputs[0].0].value.data;
            accum(nodes, adjoint, inputs[0], |acc| {
                for ((av, gv), xv) in acc.iter_mut().zip(g).zip(ad) {
                    if *xv > 0.0 {
                        *av += gv;
                    }
                }
            });
        }
        Op::SmoothRelu | Op::SmoothReluSq => {
            let aux = nodes[idx].aux.as_ref().expect("fused op saved factors");
            accum(nodes, adjoint, inputs[0], |acc| {
                for ((av, gv), f) in acc.iter_mut().zip(g).zip(aux) {
                    *av += gv * f;
                }
            });
        }
        Op::Sum => {
            let gs = g[0];
            accum(nodes, adjoint, inputs[0], |acc| {
                for av in acc.iter_mut() {
                    *av += gs;
                }
            });
        }
        Op::Mean => {
            let n = nodes[inputs[0].0].value.len() as f64;
            let gs = g[0] / n;
            accum(nodes, adjoint, inputs[0], |acc| {
                for av in acc.iter_mut() {
                    *av += gs;
                }
            });
        }
        Op::FrobeniusNormSq => {
            let gs = g[0];
            let ad = &nodes[inputs[0].0].value.data;
            accum(nodes, adjoint, inputs[0], |acc| {
                for (av, xv) in acc.iter_mut().zip(ad) {
                    *av += 2.0 * xv * gs;
                }
            });
        }
        Op::AvgPool { window, stride } => {
            let (b, c, h, w) = {
                let s = &nodes[inputs[0].0].value.shape;
                (s[0], s[1], s[2], s[3])
            };
            let ho = kernels::valid_out_extent(h, *window, *stride);
            let wo = kernels::valid_out_extent(w, *window, *stride);
            let (window, stride) = (*window, *stride);
            accum(nodes, adjoint, inputs[0], |acc| {
                for img in 0..b {
                    kernels::avg_pool_backward(
                        &g[img * c * ho * wo..(img + 1) * c * ho * wo],
                        &mut acc[img * c * h * w..(img + 1) * c * h * w],
                        c,
                        h,
                        w,
                        window,
                        stride,
                    );
                }
            });
        }
        Op::Flatten => {
            accum(nodes, adjoint, inputs[0], |acc| {
                for (av, gv) in acc.iter_mut().zip(g) {
                    *av += gv;
                }
            });
        }
        Op::DiagEmbed => {
            let n = nodes[inputs[0].0].value.len();
            accum(nodes, adjoint, inputs[0], |acc| {
                for i in 0..n {
                    acc[i] += g[i * n + i];
                }
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fdcheck::central_gradient;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_small() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), false);
        let b = tape.leaf(t(&[2, 1], &[1.0, 1.0]), false);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
        assert_eq!(tape.value(c).shape(), &[2, 1]);
    }

    #[test]
    fn conv_all_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 3, 3], &[1.0; 9]), false);
        let k = tape.leaf(t(&[1, 1, 2, 2], &[1.0; 4]), false);
        let y = tape.conv2d_valid(x, k, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 2, 2]);
        assert_eq!(tape.value(y).data(), &[4.0; 4]);
    }

    #[test]
    fn elementwise_identities() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1], &[0.0]), false);
        let e = tape.erf(x).unwrap();
        let ex = tape.exp(x).unwrap();
        assert_eq!(tape.value(e).data(), &[0.0]);
        assert_eq!(tape.value(ex).data(), &[1.0]);
    }

    #[test]
    fn shape_mismatch_names_op() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2], &[1.0, 2.0]), false);
        let b = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]), false);
        let err = tape.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add"), "{err}");
        assert!(err.contains("[2]") && err.contains("[3]"), "{err}");

        let m = tape.leaf(t(&[2, 2], &[1.0; 4]), false);
        let v = tape.leaf(t(&[3, 1], &[1.0; 3]), false);
        let err = tape.matmul(m, v).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
    }

    #[test]
    fn conv_width_formula() {
        // (input - k)/s + 1 for every fitting combination
        for w in 2..10usize {
            for k in 1..=w {
                for s in 1..4usize {
                    let mut tape = Tape::new();
                    let x = tape.leaf(Tensor::filled(vec![1, 1, w, w], 1.0), false);
                    let ker = tape.leaf(Tensor::filled(vec![1, 1, k, k], 1.0), false);
                    let y = tape.conv2d_valid(x, ker, s).unwrap();
                    let expect = (w - k) / s + 1;
                    assert_eq!(tape.value(y).shape(), &[1, 1, expect, expect]);
                }
            }
        }
    }

    #[test]
    fn backward_quadratic_norm() {
        // loss = 1/2 ||x||^2 -> grad = x
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[3.0, 4.0]), true);
        let n = tape.frobenius_norm_sq(x).unwrap();
        let loss = tape.scalar_mul(n, 0.5).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[3.0, 4.0]);
    }

    #[test]
    fn backward_erf_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1], &[0.0]), true);
        let e = tape.erf(x).unwrap();
        let loss = tape.sum(e).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(x).unwrap();
        assert!((g[0] - FRAC_2_SQRT_PI).abs() < 1e-15);
    }

    #[test]
    fn backward_non_scalar_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let y = tape.square(x).unwrap();
        assert!(matches!(
            tape.backward(y),
            Err(Error::BackwardNonScalar { .. })
        ));
    }

    #[test]
    fn backward_twice_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1], &[2.0]), true);
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::BackwardTwice)));
    }

    #[test]
    fn non_finite_output_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1], &[800.0]), false);
        let err = tape.exp(x).unwrap_err().to_string();
        assert!(err.contains("exp"), "{err}");
    }

    #[test]
    fn avg_pool_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(
            t(&[1, 1, 2, 4], &[1.0, 3.0, 5.0, 7.0, 2.0, 4.0, 6.0, 8.0]),
            false,
        );
        let y = tape.avg_pool(x, 2, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[2.5, 6.5]);
    }

    #[test]
    fn diag_embed_roundtrip() {
        let mut tape = Tape::new();
        let v = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
        let d = tape.diag_embed(v).unwrap();
        assert_eq!(
            tape.value(d).data(),
            &[1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 3.0]
        );
        let loss = tape.frobenius_norm_sq(d).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(v).unwrap(), &[2.0, 4.0, 6.0]);
    }

    /// Analytic backward vs central finite differences for every primitive,
    /// over randomized inputs. 1e-6 relative, 1e-9 absolute floor.
    #[test]
    fn primitives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let names: Vec<&str> = vec![
            "add", "sub", "mul", "add_bias", "scalar_mul", "matmul", "conv2d_valid", "square",
            "sqrt", "exp", "erf", "relu", "smooth_relu", "smooth_relu_sq", "sum", "mean",
            "frobenius_norm_sq", "avg_pool", "flatten", "diag_embed",
        ];
        for name in names {
            for _ in 0..6 {
                check_primitive_fd(name, &mut rng);
            }
        }
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(lo..hi)).collect()
    }

    #[allow(clippy::type_complexity)]
    fn check_primitive_fd(name: &str, rng: &mut ChaCha8Rng) {
        // Builds loss(x) = weighted sum of primitive output, differentiates
        // wrt the primary input, compares against central differences.
        let (x0, aux, build): (
            Vec<f64>,
            Vec<f64>,
            Box<dyn Fn(&mut Tape, ValueId, Option<ValueId>) -> ValueId>,
        ) = match name {
            "add" => (
                rand_vec(rng, 6, -2.0, 2.0),
                rand_vec(rng, 6, -2.0, 2.0),
                Box::new(|tp, x, a| {
                    let y = tp.add(x, a.unwrap()).unwrap();
                    tp.sum(y).unwrap()
                }),
            ),
            "sub" => (
                rand_vec(rng, 6, -2.0, 2.0),
                rand_vec(rng, 6, -2.0, 2.0),
                Box::new(|tp, x, a| {
                    let y = tp.sub(x, a.unwrap()).unwrap();
                    let z = tp.square(y).unwrap();
                    tp.sum(z).unwrap()
                }),
            ),
            "mul" => (
                rand_vec(rng, 6, -2.0, 2.0),
                rand_vec(rng, 6, -2.0, 2.0),
                Box::new(|tp, x, a| {
                    let y = tp.mul(x, a.unwrap()).unwrap();
                    tp.sum(y).unwrap()
                }),
            ),
            "scalar_mul" => (
                rand_vec(rng, 5, -2.0, 2.0),
                vec![],
                Box::new(|tp, x, _| {
                    let y = tp.scalar_mul(x, -1.7).unwrap();
                    let z = tp.square(y).unwrap();
                    tp.sum(z).unwrap()
                }),
            ),
            "square" => (
                rand_vec(rng, 5, -2.0, 2.0),
                vec![],
                Box::new(|tp, x, _| {
                    let y = tp.square(x).unwrap();
                    tp.sum(y).unwrap()
                }),
            ),
            "sqrt" => (
                rand_vec(rng, 5, 0.5, 3.0),
                vec![],
                Box::new(|tp, x, _| {
                    let y = tp.sqrt(x).unwrap();
                    tp.sum(y).unwrap()
                }),
            ),
            "exp" => (
                rand_vec(rng, 5, -1.0, 1.0),
                vec![],
                Box::new(|tp, x, _| {
                    let y = tp.exp(x).unwrap();
                    tp.sum(y).unwrap()
                }),
            ),
            "erf" => (
                rand_vec(rng, 5, -2.0, 2.0),
                vec![],
                Box::new(|tp, x, _| {
                    let y = tp.erf(x).unwrap();
                    tp.sum(y).unwrap()
                }),
            ),
            "relu" => (
                // keep inputs away from the kink
                rand_vec(rng, 5, 0.2, 2.0)
                    .into_iter()
                    .enumerate()
                    .map(|(i, v)| if i % 2 == 0 { v } else { -v })
                    .collect(),
                vec![],
                Box::new(|tp, x, _| {
                    let y = tp.relu(x).unwrap();
                    tp.sum(y).unwrap()
                }),
            ),
            "smooth_relu" => (
                rand_vec(rng, 6, -2.0, 2.0),
                vec![],
                Box::new(|tp, x, _| {
                    let y = tp.smooth_relu(x, 0.37).unwrap();
                    let s = tp.square(y).unwrap();
                    tp.sum(s).unwrap()
                }),
            ),
            "smooth_relu_sq" => (
                rand_vec(rng, 6, -2.0, 2.0),
                vec![],
                Box::new(|tp, x, _| {
                    let y = tp.smooth_relu_sq(x, 0.61).unwrap();
                    tp.sum(y).unwrap()
                }),
            ),
            "sum" => (
                rand_vec(rng, 7, -2.0, 2.0),
                vec![],
                Box::new(|tp, x, _| tp.sum(x).unwrap()),
            ),
            "mean" => (
                rand_vec(rng, 7, -2.0, 2.0),
                vec![],
                Box::new(|tp, x, _| {
                    let m = tp.mean(x).unwrap();
                    let s = tp.square(m).unwrap();
                    tp.sum(s).unwrap()
                }),
            ),
            "frobenius_norm_sq" => (
                rand_vec(rng, 7, -2.0, 2.0),
                vec![],
                Box::new(|tp, x, _| tp.frobenius_norm_sq(x).unwrap()),
            ),
            "diag_embed" => (
                rand_vec(rng, 4, -2.0, 2.0),
                vec![],
                Box::new(|tp, x, _| {
                    let d = tp.diag_embed(x).unwrap();
                    tp.frobenius_norm_sq(d).unwrap()
                }),
            ),
            _ => (vec![], vec![], Box::new(|_, _, _| unreachable!())),
        };

        // Structured cases share one code path below.
        match name {
            "matmul" => {
                let a0 = rand_vec(rng, 6, -2.0, 2.0);
                let b0 = rand_vec(rng, 8, -2.0, 2.0);
                let f = |v: &[f64]| {
                    let mut tp = Tape::new();
                    let a = tp.leaf(Tensor::new(vec![3, 2], v.to_vec()).unwrap(), true);
                    let b = tp.leaf(Tensor::new(vec![2, 4], b0.clone()).unwrap(), false);
                    let m = tp.matmul(a, b).unwrap();
                    let l = tp.frobenius_norm_sq(m).unwrap();
                    tp.value(l).item()
                };
                let fd = central_gradient(f, &a0, 1e-5);
                let mut tp = Tape::new();
                let a = tp.leaf(Tensor::new(vec![3, 2], a0.clone()).unwrap(), true);
                let b = tp.leaf(Tensor::new(vec![2, 4], b0.clone()).unwrap(), true);
                let m = tp.matmul(a, b).unwrap();
                let l = tp.frobenius_norm_sq(m).unwrap();
                tp.backward(l).unwrap();
                assert_grad_close(tp.grad(a).unwrap(), &fd);
                // right-operand gradient too
                let fb = |v: &[f64]| {
                    let mut tp = Tape::new();
                    let a = tp.leaf(Tensor::new(vec![3, 2], a0.clone()).unwrap(), false);
                    let b = tp.leaf(Tensor::new(vec![2, 4], v.to_vec()).unwrap(), true);
                    let m = tp.matmul(a, b).unwrap();
                    let l = tp.frobenius_norm_sq(m).unwrap();
                    tp.value(l).item()
                };
                let fdb = central_gradient(fb, &b0, 1e-5);
                assert_grad_close(tp.grad(b).unwrap(), &fdb);
                return;
            }
            "conv2d_valid" => {
                let x0 = rand_vec(rng, 2 * 5 * 5, -1.5, 1.5);
                let k0 = rand_vec(rng, 3 * 2 * 2 * 2, -1.5, 1.5);
                let stride = 1 + (rng.gen_range(0..2usize));
                let f = |v: &[f64]| {
                    let mut tp = Tape::new();
                    let x = tp.leaf(Tensor::new(vec![1, 2, 5, 5], v.to_vec()).unwrap(), true);
                    let k = tp.leaf(Tensor::new(vec![3, 2, 2, 2], k0.clone()).unwrap(), false);
                    let y = tp.conv2d_valid(x, k, stride).unwrap();
                    let l = tp.frobenius_norm_sq(y).unwrap();
                    tp.value(l).item()
                };
                let fd = central_gradient(f, &x0, 1e-5);
                let mut tp = Tape::new();
                let x = tp.leaf(Tensor::new(vec![1, 2, 5, 5], x0.clone()).unwrap(), true);
                let k = tp.leaf(Tensor::new(vec![3, 2, 2, 2], k0.clone()).unwrap(), true);
                let y = tp.conv2d_valid(x, k, stride).unwrap();
                let l = tp.frobenius_norm_sq(y).unwrap();
                tp.backward(l).unwrap();
                assert_grad_close(tp.grad(x).unwrap(), &fd);
                let fk = |v: &[f64]| {
                    let mut tp = Tape::new();
                    let x = tp.leaf(Tensor::new(vec![1, 2, 5, 5], x0.clone()).unwrap(), false);
                    let k = tp.leaf(Tensor::new(vec![3, 2, 2, 2], v.to_vec()).unwrap(), true);
                    let y = tp.conv2d_valid(x, k, stride).unwrap();
                    let l = tp.frobenius_norm_sq(y).unwrap();
                    tp.value(l).item()
                };
                let fdk = central_gradient(fk, &k0, 1e-5);
                assert_grad_close(tp.grad(k).unwrap(), &fdk);
                return;
            }
            "avg_pool" => {
                let x0 = rand_vec(rng, 2 * 5 * 5, -1.5, 1.5);
                let f = |v: &[f64]| {
                    let mut tp = Tape::new();
                    let x = tp.leaf(Tensor::new(vec![1, 2, 5, 5], v.to_vec()).unwrap(), true);
                    let y = tp.avg_pool(x, 2, 2).unwrap();
                    let l = tp.frobenius_norm_sq(y).unwrap();
                    tp.value(l).item()
                };
                let fd = central_gradient(f, &x0, 1e-5);
                let mut tp = Tape::new();
                let x = tp.leaf(Tensor::new(vec![1, 2, 5, 5], x0.clone()).unwrap(), true);
                let y = tp.avg_pool(x, 2, 2).unwrap();
                let l = tp.frobenius_norm_sq(y).unwrap();
                tp.backward(l).unwrap();
                assert_grad_close(tp.grad(x).unwrap(), &fd);
                return;
            }
            "flatten" => {
                let x0 = rand_vec(rng, 12, -1.5, 1.5);
                let f = |v: &[f64]| {
                    let mut tp = Tape::new();
                    let x = tp.leaf(Tensor::new(vec![2, 3, 2, 1], v.to_vec()).unwrap(), true);
                    let y = tp.flatten(x).unwrap();
                    let s = tp.square(y).unwrap();
                    let l = tp.sum(s).unwrap();
                    tp.value(l).item()
                };
                let fd = central_gradient(f, &x0, 1e-5);
                let mut tp = Tape::new();
                let x = tp.leaf(Tensor::new(vec![2, 3, 2, 1], x0.clone()).unwrap(), true);
                let y = tp.flatten(x).unwrap();
                let s = tp.square(y).unwrap();
                let l = tp.sum(s).unwrap();
                tp.backward(l).unwrap();
                assert_grad_close(tp.grad(x).unwrap(), &fd);
                return;
            }
            "add_bias" => {
                let x0 = rand_vec(rng, 6, -2.0, 2.0);
                let b0 = rand_vec(rng, 3, -2.0, 2.0);
                let f = |v: &[f64]| {
                    let mut tp = Tape::new();
                    let x = tp.leaf(Tensor::new(vec![2, 3], v.to_vec()).unwrap(), true);
                    let b = tp.leaf(Tensor::from_vec(b0.clone()), false);
                    let y = tp.add_bias(x, b).unwrap();
                    let s = tp.square(y).unwrap();
                    let l = tp.sum(s).unwrap();
                    tp.value(l).item()
                };
                let fd = central_gradient(f, &x0, 1e-5);
                let mut tp = Tape::new();
                let x = tp.leaf(Tensor::new(vec![2, 3], x0.clone()).unwrap(), true);
                let b = tp.leaf(Tensor::from_vec(b0.clone()), true);
                let y = tp.add_bias(x, b).unwrap();
                let s = tp.square(y).unwrap();
                let l = tp.sum(s).unwrap();
                tp.backward(l).unwrap();
                assert_grad_close(tp.grad(x).unwrap(), &fd);
                let fb = |v: &[f64]| {
                    let mut tp = Tape::new();
                    let x = tp.leaf(Tensor::new(vec![2, 3], x0.clone()).unwrap(), false);
                    let b = tp.leaf(Tensor::from_vec(v.to_vec()), true);
                    let y = tp.add_bias(x, b).unwrap();
                    let s = tp.square(y).unwrap();
                    let l = tp.sum(s).unwrap();
                    tp.value(l).item()
                };
                let fdb = central_gradient(fb, &b0, 1e-5);
                assert_grad_close(tp.grad(b).unwrap(), &fdb);
                return;
            }
            _ => {}
        }

        let f = |v: &[f64]| {
            let mut tp = Tape::new();
            let x = tp.leaf(Tensor::from_vec(v.to_vec()), true);
            let a = if aux.is_empty() {
                None
            } else {
                Some(tp.leaf(Tensor::from_vec(aux.clone()), false))
            };
            let l = build(&mut tp, x, a);
            tp.value(l).item()
        };
        let fd = central_gradient(f, &x0, 1e-5);
        let mut tp = Tape::new();
        let x = tp.leaf(Tensor::from_vec(x0.clone()), true);
        let a = if aux.is_empty() {
            None
        } else {
            Some(tp.leaf(Tensor::from_vec(aux.clone()), false))
        };
        let l = build(&mut tp, x, a);
        tp.backward(l).unwrap();
        assert_grad_close(tp.grad(x).unwrap(), &fd);
    }

    fn assert_grad_close(analytic: &[f64], fd: &[f64]) {
        for (i, (a, f)) in analytic.iter().zip(fd).enumerate() {
            let tol = (1e-6 * f.abs()).max(1e-9);
            assert!(
                (a - f).abs() <= tol.max(1e-6 * a.abs()),
                "coord {i}: analytic {a} vs fd {f}"
            );
        }
    }

    /// backward(a*f + b*g) == a*grad(f) + b*grad(g) within 1e-12.
    #[test]
    fn backward_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let x0 = rand_vec(&mut rng, 6, -2.0, 2.0);
            let (a, b) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));

            let grad_of = |wa: f64, wb: f64, x0: &[f64]| -> Vec<f64> {
                let mut tp = Tape::new();
                let x = tp.leaf(Tensor::from_vec(x0.to_vec()), true);
                // f = sum(erf(x)), g = ||x||^2
                let e = tp.erf(x).unwrap();
                let f = tp.sum(e).unwrap();
                let g = tp.frobenius_norm_sq(x).unwrap();
                let fa = tp.scalar_mul(f, wa).unwrap();
                let gb = tp.scalar_mul(g, wb).unwrap();
                let l = tp.add(fa, gb).unwrap();
                tp.backward(l).unwrap();
                tp.grad(x).unwrap().to_vec()
            };

            let gf = grad_of(1.0, 0.0, &x0);
            let gg = grad_of(0.0, 1.0, &x0);
            let gab = grad_of(a, b, &x0);
            for i in 0..x0.len() {
                let expect = a * gf[i] + b * gg[i];
                assert!(
                    (gab[i] - expect).abs() <= 1e-12 * (1.0 + expect.abs()),
                    "coord {i}: {} vs {}",
                    gab[i],
                    expect
                );
            }
        }
    }
}
