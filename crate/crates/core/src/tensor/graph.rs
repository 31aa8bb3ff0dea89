use std::fmt;

use super::conv::{self, ConvGeom};
use super::gemm::{gemm, Mat};
use super::optim::{ParamId, ParamStore};
use super::{axis_split, broadcast_index_map, broadcast_shape, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation defined outside this module.
///
/// `backward` receives the input values, the output value and the upstream
/// gradient, and returns one gradient buffer per input (`None` to skip).
pub trait CustomOp {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Abs(Var),
    Clamp(Var, f64, f64),
    Matmul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    BroadcastTo(Var),
    SumAll(Var),
    SumAxis(Var, usize),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        axis: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    Conv3d {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        batch: usize,
    },
    ConvT3d {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        batch: usize,
    },
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | Matmul(a, b) => vec![*a, *b],
            Scale(a, _) | Offset(a) | Relu(a) | Sigmoid(a) | Tanh(a) | Softplus(a) | Exp(a)
            | Log(a) | Sqrt(a) | Abs(a) | Clamp(a, _, _) | Transpose(a) | Reshape(a) | BroadcastTo(a)
            | SumAll(a) | SumAxis(a, _) | Softmax(a, _) | LogSoftmax(a, _) | Slice(a, _, _) => {
                vec![*a]
            }
            LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Concat(vs, _) => vs.clone(),
            Conv3d { x, kernel, bias, .. } | ConvT3d { x, kernel, bias, .. } => {
                let mut v = vec![*x, *kernel];
                v.extend(bias.iter().copied());
                v
            }
            Custom(vs, _) => vs.clone(),
        }
    }

    fn name(&self) -> &'static str {
        use Op::*;
        match self {
            Leaf => "leaf",
            Add(..) => "add",
            Sub(..) => "sub",
            Mul(..) => "mul",
            Div(..) => "div",
            Scale(..) => "scale",
            Offset(..) => "offset",
            Relu(..) => "relu",
            Sigmoid(..) => "sigmoid",
            Tanh(..) => "tanh",
            Softplus(..) => "softplus",
            Exp(..) => "exp",
            Log(..) => "log",
            Sqrt(..) => "sqrt",
            Abs(..) => "abs",
            Clamp(..) => "clamp",
            Matmul(..) => "matmul",
            Transpose(..) => "transpose",
            Reshape(..) => "reshape",
            BroadcastTo(..) => "broadcast",
            SumAll(..) => "reduce_sum",
            SumAxis(..) => "reduce_sum_axis",
            Softmax(..) => "softmax",
            LogSoftmax(..) => "log_softmax",
            LayerNorm { .. } => "layer_norm",
            Concat(..) => "concat",
            Slice(..) => "slice",
            Conv3d { .. } => "conv3d",
            ConvT3d { .. } => "conv_transpose3d",
            Custom(_, op) => op.name(),
        }
    }
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// GRU weights: each gate matrix is `[2d, d]` applied to `[x, h]`.
#[derive(Clone, Copy, Debug)]
pub struct GruWeights {
    pub w_z: Var,
    pub b_z: Var,
    pub w_r: Var,
    pub b_r: Var,
    pub w_h: Var,
    pub b_h: Var,
}

/// Recording of differentiable operations (the tape).
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(Var, ParamId)>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.len())
            .field("params", &self.params.len())
            .finish()
    }
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

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Tensor::from_parts(shape, data),
            grad: None,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// A leaf that accumulates a gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Loads a parameter from `store` as a gradient-tracking leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.leaf(store.get(id).value().clone(), true);
        self.params.push((v, id));
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Adds the gradients of every parameter leaf into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for &(v, id) in &self.params {
            if let Some(g) = &self.nodes[v.0].grad {
                store.get_mut(id).accumulate_grad(g);
            }
        }
    }

    // ---------------------------------------------------------------- pointwise

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let (shape, data) = if sa == sb {
            (sa, va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect())
        } else {
            let shape = broadcast_shape(&sa, &sb)
                .ok_or_else(|| shape_err(name, format!("cannot broadcast {sa:?} with {sb:?}")))?;
            let ma = broadcast_index_map(&sa, &shape);
            let mb = broadcast_index_map(&sb, &shape);
            let data = ma.iter().zip(&mb).map(|(&i, &j)| f(va[i], vb[j])).collect();
            (shape, data)
        };
        self.push(op, shape, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let t = self.value(a);
        let shape = t.shape().to_vec();
        let data = t.data().iter().map(|&x| f(x)).collect();
        self.push(op, shape, data)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    /// `a + c` for a constant `c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Op::Offset(a), |x| x + c)
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        let n = self.neg(a)?;
        self.offset(n, 1.0)
    }

    /// Rectifier; the subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    /// Absolute value; the subgradient at 0 is 0.
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    // ------------------------------------------------------------ linear algebra

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            Mat::new(self.value(a).data(), m, k),
            Mat::new(self.value(b).data(), k, n),
            &mut out,
            0.0,
        );
        self.push(Op::Matmul(a, b), vec![m, n], out)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(shape_err("transpose", format!("rank {} input", s.len())));
        }
        let (r, c) = (s[0], s[1]);
        let d = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        self.push(Op::Transpose(a), vec![c, r], out)
    }

    /// `x @ w + b` with `x: [n, i]`, `w: [i, o]`, `b: [o]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    // ------------------------------------------------------------------ shapes

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(a)),
            ));
        }
        let data = self.value(a).data().to_vec();
        self.push(Op::Reshape(a), shape.to_vec(), data)
    }

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if broadcast_shape(&sa, shape).as_deref() != Some(shape) {
            return Err(shape_err("broadcast", format!("{sa:?} -> {shape:?}")));
        }
        let map = broadcast_index_map(&sa, shape);
        let d = self.value(a).data();
        let data = map.iter().map(|&i| d[i]).collect();
        self.push(Op::BroadcastTo(a), shape.to_vec(), data)
    }

    pub fn concat(&mut self, vars: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*vars.first().ok_or_else(|| shape_err("concat", "no inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", format!("axis {axis} on {first:?}")));
        }
        let mut total = 0;
        for &v in vars {
            let s = self.shape(v);
            if s.len() != first.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(shape_err("concat", format!("{first:?} vs {s:?}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in vars {
                let ext = self.shape(v)[axis];
                let d = self.value(v).data();
                out.extend_from_slice(&d[o * ext * inner..(o + 1) * ext * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.push(Op::Concat(vars.to_vec(), axis), shape, out)
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start + len > s[axis] || len == 0 {
            return Err(shape_err(
                "slice",
                format!("[{start}, {}) on axis {axis} of {s:?}", start + len),
            ));
        }
        let (outer, ext, inner) = axis_split(&s, axis);
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * ext * inner + start * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        self.push(Op::Slice(a, axis, start), shape, out)
    }

    // -------------------------------------------------------------- reductions

    pub fn reduce_sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push(Op::SumAll(a), vec![1], vec![s])
    }

    pub fn reduce_mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.reduce_sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Sums over `axis`, removing it (a rank-1 input yields shape `[1]`).
    pub fn reduce_sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(shape_err("reduce_sum_axis", format!("axis {axis} on {s:?}")));
        }
        let (outer, ext, inner) = axis_split(&s, axis);
        let d = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for e in 0..ext {
                let src = &d[(o * ext + e) * inner..(o * ext + e + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let mut shape: Vec<usize> = s[..axis].iter().chain(&s[axis + 1..]).copied().collect();
        if shape.is_empty() {
            shape.push(1);
        }
        self.push(Op::SumAxis(a, axis), shape, out)
    }

    pub fn reduce_mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ext = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| shape_err("reduce_mean_axis", format!("axis {axis}")))?;
        let s = self.reduce_sum_axis(a, axis)?;
        self.scale(s, 1.0 / ext as f64)
    }

    // ------------------------------------------------------------ normalizers

    /// Softmax along `axis`, stabilized by subtracting the lane maximum.
    pub fn softmax_along(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(shape_err("softmax", format!("axis {axis} on {s:?}")));
        }
        let out = softmax_lanes(self.value(a).data(), &s, axis, false);
        self.push(Op::Softmax(a, axis), s, out)
    }

    pub fn log_softmax_along(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(shape_err("log_softmax", format!("axis {axis} on {s:?}")));
        }
        let out = softmax_lanes(self.value(a).data(), &s, axis, true);
        self.push(Op::LogSoftmax(a, axis), s, out)
    }

    /// Normalizes to zero mean, unit variance along `axis` (variance
    /// regularized by `1e-5`), then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, axis: usize, gain: Var, bias: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(shape_err("layer_norm", format!("axis {axis} on {s:?}")));
        }
        let (outer, ext, inner) = axis_split(&s, axis);
        if self.value(gain).len() != ext || self.value(bias).len() != ext {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "gain/bias lengths {}/{} vs extent {ext}",
                    self.value(gain).len(),
                    self.value(bias).len()
                ),
            ));
        }
        let d = self.value(x).data();
        let (gv, bv) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![0.0; d.len()];
        let mut inv_std = vec![0.0; outer * inner];
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |e: usize| (o * ext + e) * inner + i;
                let mean = (0..ext).map(|e| d[idx(e)]).sum::<f64>() / ext as f64;
                let var = (0..ext).map(|e| (d[idx(e)] - mean).powi(2)).sum::<f64>() / ext as f64;
                let is = 1.0 / (var + EPS).sqrt();
                inv_std[o * inner + i] = is;
                for e in 0..ext {
                    let xh = (d[idx(e)] - mean) * is;
                    xhat[idx(e)] = xh;
                    out[idx(e)] = xh * gv[e] + bv[e];
                }
            }
        }
        self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                axis,
                xhat,
                inv_std,
            },
            s,
            out,
        )
    }

    // ----------------------------------------------------------- convolutions

    fn conv_operands(
        &self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        op: &'static str,
    ) -> Result<(bool, usize, Vec<usize>, Vec<usize>)> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernel).to_vec();
        let batched = match xs.len() {
            4 => false,
            5 => true,
            r => return Err(shape_err(op, format!("input rank {r}, expected 4 or 5"))),
        };
        if ks.len() != 5 || ks[2] != ks[3] || ks[3] != ks[4] {
            return Err(shape_err(op, format!("kernel shape {ks:?} is not [co, ci, k, k, k]")));
        }
        let batch = if batched { xs[0] } else { 1 };
        let spatial = xs[xs.len() - 4..].to_vec();
        if let Some(b) = bias {
            let want = if op == "conv3d" { ks[0] } else { ks[1] };
            if self.value(b).len() != want {
                return Err(shape_err(op, format!("bias length {} != {want}", self.value(b).len())));
            }
        }
        Ok((batched, batch, spatial, ks))
    }

    /// Cross-correlation of `x: [c_in, d, h, w]` (or `[b, c_in, d, h, w]`)
    /// with `kernel: [c_out, c_in, k, k, k]`.
    pub fn conv3d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (batched, batch, cdhw, ks) = self.conv_operands(x, kernel, bias, "conv3d")?;
        if cdhw[0] != ks[1] {
            return Err(shape_err("conv3d", format!("input channels {} != kernel {}", cdhw[0], ks[1])));
        }
        let k = ks[2];
        let mut out_dims = [0; 3];
        for i in 0..3 {
            out_dims[i] = conv::conv_out_dim(cdhw[i + 1], k, stride, pad).ok_or_else(|| {
                shape_err("conv3d", format!("non-positive output extent for {cdhw:?}, k={k}, s={stride}, p={pad}"))
            })?;
        }
        let geom = ConvGeom {
            c_in: ks[1],
            c_out: ks[0],
            k,
            stride,
            pad,
            in_dims: [cdhw[1], cdhw[2], cdhw[3]],
            out_dims,
        };
        let out = conv::conv3d_forward(
            self.value(x).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
            batch,
        );
        let mut shape = vec![geom.c_out, out_dims[0], out_dims[1], out_dims[2]];
        if batched {
            shape.insert(0, batch);
        }
        self.push(
            Op::Conv3d {
                x,
                kernel,
                bias,
                geom,
                batch,
            },
            shape,
            out,
        )
    }

    /// Adjoint of [`Graph::conv3d`]: `x: [c, d, h, w]` with `kernel:
    /// [c, c_out, k, k, k]` produces `[c_out, (d-1)s - 2p + k, ...]`.
    pub fn conv_transpose3d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (batched, batch, cdhw, ks) = self.conv_operands(x, kernel, bias, "conv_transpose3d")?;
        if cdhw[0] != ks[0] {
            return Err(shape_err(
                "conv_transpose3d",
                format!("input channels {} != kernel {}", cdhw[0], ks[0]),
            ));
        }
        let k = ks[2];
        let mut in_dims = [0; 3];
        for i in 0..3 {
            let n = cdhw[i + 1];
            let full = (n - 1) * stride + k;
            if stride == 0 || full <= 2 * pad {
                return Err(shape_err("conv_transpose3d", "non-positive output extent"));
            }
            in_dims[i] = full - 2 * pad;
        }
        let geom = ConvGeom {
            c_in: ks[1],
            c_out: ks[0],
            k,
            stride,
            pad,
            in_dims,
            out_dims: [cdhw[1], cdhw[2], cdhw[3]],
        };
        let out = conv::conv_t3d_forward(
            self.value(x).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
            batch,
        );
        let mut shape = vec![geom.c_in, in_dims[0], in_dims[1], in_dims[2]];
        if batched {
            shape.insert(0, batch);
        }
        self.push(
            Op::ConvT3d {
                x,
                kernel,
                bias,
                geom,
                batch,
            },
            shape,
            out,
        )
    }

    // -------------------------------------------------------------- composites

    /// Gated recurrent update, `h' = (1 - z) * h + z * h~` with
    /// `z = sigmoid([x, h] Wz + bz)`, `r = sigmoid([x, h] Wr + br)` and
    /// `h~ = tanh([x, r * h] Wh + bh)`.
    pub fn gru_cell(&mut self, x: Var, h: Var, w: &GruWeights) -> Result<Var> {
        if self.shape(x).len() != 2 || self.shape(x) != self.shape(h) {
            return Err(shape_err(
                "gru_cell",
                format!("{:?} vs {:?}", self.shape(x), self.shape(h)),
            ));
        }
        let xh = self.concat(&[x, h], 1)?;
        let z = self.linear(xh, w.w_z, Some(w.b_z))?;
        let z = self.sigmoid(z)?;
        let r = self.linear(xh, w.w_r, Some(w.b_r))?;
        let r = self.sigmoid(r)?;
        let rh = self.mul(r, h)?;
        let xrh = self.concat(&[x, rh], 1)?;
        let cand = self.linear(xrh, w.w_h, Some(w.b_h))?;
        let cand = self.tanh(cand)?;
        let keep = self.one_minus(z)?;
        let kept = self.mul(keep, h)?;
        let upd = self.mul(z, cand)?;
        self.add(kept, upd)
    }

    /// Registers an externally defined operation whose forward value has
    /// already been computed.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, op: Box<dyn CustomOp>) -> Result<Var> {
        let (shape, data) = (value.shape().to_vec(), value.into_data());
        self.push(Op::Custom(inputs.to_vec(), op), shape, data)
    }

    // ---------------------------------------------------------------- backward

    /// Reverse sweep from the scalar `loss`. Leaf gradients accumulate across
    /// calls; intermediate gradients are recomputed each time.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        for node in &mut self.nodes[..=loss.0] {
            if !matches!(node.op, Op::Leaf) {
                node.grad = None;
            }
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let seed = match self.nodes[loss.0].grad.take() {
            Some(mut g) if matches!(self.nodes[loss.0].op, Op::Leaf) => {
                g[0] += 1.0;
                g
            }
            _ => vec![1.0],
        };
        self.nodes[loss.0].grad = Some(seed);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contribs = self.local_grads(i, &g);
            self.nodes[i].grad = Some(g);
            for (v, cg) in contribs {
                let node = &mut self.nodes[v.0];
                if !node.requires_grad {
                    continue;
                }
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&cg).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(cg),
                }
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn reduce_broadcast(&self, g: &[f64], out_shape: &[usize], target: Var) -> Vec<f64> {
        let ts = self.shape(target);
        if ts == out_shape {
            return g.to_vec();
        }
        let map = broadcast_index_map(ts, out_shape);
        let mut r = vec![0.0; self.value(target).len()];
        for (&i, &gv) in map.iter().zip(g) {
            r[i] += gv;
        }
        r
    }

    fn broadcast_operand(&self, v: Var, out_shape: &[usize]) -> Vec<f64> {
        let s = self.shape(v);
        if s == out_shape {
            return self.value(v).data().to_vec();
        }
        let d = self.value(v).data();
        broadcast_index_map(s, out_shape).iter().map(|&i| d[i]).collect()
    }

    fn local_grads(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let out = &node.value;
        let os = out.shape();
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &v in [a, b] {
                    if self.needs(v) {
                        res.push((v, self.reduce_broadcast(g, os, v)));
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    res.push((*a, self.reduce_broadcast(g, os, *a)));
                }
                if self.needs(*b) {
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    res.push((*b, self.reduce_broadcast(&neg, os, *b)));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let bv = self.broadcast_operand(*b, os);
                    let ga: Vec<f64> = g.iter().zip(&bv).map(|(x, y)| x * y).collect();
                    res.push((*a, self.reduce_broadcast(&ga, os, *a)));
                }
                if self.needs(*b) {
                    let av = self.broadcast_operand(*a, os);
                    let gb: Vec<f64> = g.iter().zip(&av).map(|(x, y)| x * y).collect();
                    res.push((*b, self.reduce_broadcast(&gb, os, *b)));
                }
            }
            Op::Div(a, b) => {
                let bv = self.broadcast_operand(*b, os);
                if self.needs(*a) {
                    let ga: Vec<f64> = g.iter().zip(&bv).map(|(x, y)| x / y).collect();
                    res.push((*a, self.reduce_broadcast(&ga, os, *a)));
                }
                if self.needs(*b) {
                    // d(a/b)/db = -(a/b)/b
                    let gb: Vec<f64> = g
                        .iter()
                        .zip(out.data())
                        .zip(&bv)
                        .map(|((x, q), y)| -x * q / y)
                        .collect();
                    res.push((*b, self.reduce_broadcast(&gb, os, *b)));
                }
            }
            Op::Scale(a, c) => res.push((*a, g.iter().map(|x| x * c).collect())),
            Op::Offset(a) | Op::Reshape(a) => res.push((*a, g.to_vec())),
            Op::Relu(a) => {
                let x = self.value(*a).data();
                res.push((*a, g.iter().zip(x).map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 }).collect()));
            }
            Op::Sigmoid(a) => {
                res.push((*a, g.iter().zip(out.data()).map(|(gv, y)| gv * y * (1.0 - y)).collect()));
            }
            Op::Tanh(a) => {
                res.push((*a, g.iter().zip(out.data()).map(|(gv, y)| gv * (1.0 - y * y)).collect()));
            }
            Op::Softplus(a) => {
                let x = self.value(*a).data();
                res.push((*a, g.iter().zip(x).map(|(gv, &xv)| gv * sigmoid(xv)).collect()));
            }
            Op::Exp(a) => {
                res.push((*a, g.iter().zip(out.data()).map(|(gv, y)| gv * y).collect()));
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                res.push((*a, g.iter().zip(x).map(|(gv, xv)| gv / xv).collect()));
            }
            Op::Sqrt(a) => {
                res.push((*a, g.iter().zip(out.data()).map(|(gv, y)| gv * 0.5 / y).collect()));
            }
            Op::Abs(a) => {
                let x = self.value(*a).data();
                res.push((*a, g.iter().zip(x).map(|(gv, &xv)| gv * sign(xv)).collect()));
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a).data();
                res.push((
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(gv, &xv)| if xv >= *lo && xv <= *hi { *gv } else { 0.0 })
                        .collect(),
                ));
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let gm = Mat::new(g, m, n);
                if self.needs(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(gm, Mat::new(self.value(*b).data(), k, n).t(), &mut ga, 0.0);
                    res.push((*a, ga));
                }
                if self.needs(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(Mat::new(self.value(*a).data(), m, k).t(), gm, &mut gb, 0.0);
                    res.push((*b, gb));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (os[0], os[1]);
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        ga[j * r + i] = g[i * c + j];
                    }
                }
                res.push((*a, ga));
            }
            Op::BroadcastTo(a) => res.push((*a, self.reduce_broadcast(g, os, *a))),
            Op::SumAll(a) => res.push((*a, vec![g[0]; self.value(*a).len()])),
            Op::SumAxis(a, axis) => {
                let (outer, ext, inner) = axis_split(self.shape(*a), *axis);
                let mut ga = vec![0.0; outer * ext * inner];
                for o in 0..outer {
                    for e in 0..ext {
                        ga[(o * ext + e) * inner..(o * ext + e + 1) * inner]
                            .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                res.push((*a, ga));
            }
            Op::Softmax(a, axis) => {
                let (outer, ext, inner) = axis_split(os, *axis);
                let y = out.data();
                let mut ga = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |e: usize| (o * ext + e) * inner + i;
                        let dot: f64 = (0..ext).map(|e| g[idx(e)] * y[idx(e)]).sum();
                        for e in 0..ext {
                            ga[idx(e)] = y[idx(e)] * (g[idx(e)] - dot);
                        }
                    }
                }
                res.push((*a, ga));
            }
            Op::LogSoftmax(a, axis) => {
                let (outer, ext, inner) = axis_split(os, *axis);
                let y = out.data();
                let mut ga = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |e: usize| (o * ext + e) * inner + i;
                        let gs: f64 = (0..ext).map(|e| g[idx(e)]).sum();
                        for e in 0..ext {
                            ga[idx(e)] = g[idx(e)] - y[idx(e)].exp() * gs;
                        }
                    }
                }
                res.push((*a, ga));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                axis,
                xhat,
                inv_std,
            } => {
                let (outer, ext, inner) = axis_split(os, *axis);
                let gv = self.value(*gain).data();
                if self.needs(*x) {
                    let mut gx = vec![0.0; xhat.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |e: usize| (o * ext + e) * inner + i;
                            let n = ext as f64;
                            let dxh = |e: usize| g[idx(e)] * gv[e];
                            let m1: f64 = (0..ext).map(dxh).sum::<f64>() / n;
                            let m2: f64 = (0..ext).map(|e| dxh(e) * xhat[idx(e)]).sum::<f64>() / n;
                            let is = inv_std[o * inner + i];
                            for e in 0..ext {
                                gx[idx(e)] = is * (dxh(e) - m1 - xhat[idx(e)] * m2);
                            }
                        }
                    }
                    res.push((*x, gx));
                }
                let mut gg = vec![0.0; ext];
                let mut gb = vec![0.0; ext];
                for o in 0..outer {
                    for e in 0..ext {
                        for i in 0..inner {
                            let j = (o * ext + e) * inner + i;
                            gg[e] += g[j] * xhat[j];
                            gb[e] += g[j];
                        }
                    }
                }
                if self.needs(*gain) {
                    res.push((*gain, gg));
                }
                if self.needs(*bias) {
                    res.push((*bias, gb));
                }
            }
            Op::Concat(vars, axis) => {
                let (outer, total, inner) = axis_split(os, *axis);
                let mut offset = 0;
                for &v in vars {
                    let ext = self.shape(v)[*axis];
                    if self.needs(v) {
                        let mut gv = Vec::with_capacity(outer * ext * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            gv.extend_from_slice(&g[base..base + ext * inner]);
                        }
                        res.push((v, gv));
                    }
                    offset += ext;
                }
            }
            Op::Slice(a, axis, start) => {
                let (outer, ext, inner) = axis_split(self.shape(*a), *axis);
                let len = os[*axis];
                let mut ga = vec![0.0; outer * ext * inner];
                for o in 0..outer {
                    let base = (o * ext + start) * inner;
                    ga[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                res.push((*a, ga));
            }
            Op::Conv3d {
                x,
                kernel,
                bias,
                geom,
                batch,
            } => {
                let want = [
                    self.needs(*x),
                    self.needs(*kernel),
                    bias.is_some_and(|b| self.needs(b)),
                ];
                let (dx, dk, db) = conv::conv3d_backward(
                    self.value(*x).data(),
                    self.value(*kernel).data(),
                    g,
                    geom,
                    *batch,
                    want,
                );
                push_opt(&mut res, *x, dx);
                push_opt(&mut res, *kernel, dk);
                if let Some(b) = bias {
                    push_opt(&mut res, *b, db);
                }
            }
            Op::ConvT3d {
                x,
                kernel,
                bias,
                geom,
                batch,
            } => {
                let want = [
                    self.needs(*x),
                    self.needs(*kernel),
                    bias.is_some_and(|b| self.needs(b)),
                ];
                let (dx, dk, db) = conv::conv_t3d_backward(
                    self.value(*x).data(),
                    self.value(*kernel).data(),
                    g,
                    geom,
                    *batch,
                    want,
                );
                push_opt(&mut res, *x, dx);
                push_opt(&mut res, *kernel, dk);
                if let Some(b) = bias {
                    push_opt(&mut res, *b, db);
                }
            }
            Op::Custom(vars, op) => {
                let inputs: Vec<&Tensor> = vars.iter().map(|&v| self.value(v)).collect();
                for (v, gv) in vars.iter().zip(op.backward(&inputs, out, g)) {
                    if self.needs(*v) {
                        push_opt(&mut res, *v, gv);
                    }
                }
            }
        }
        res
    }
}

fn push_opt(res: &mut Vec<(Var, Vec<f64>)>, v: Var, g: Option<Vec<f64>>) {
    if let Some(g) = g {
        res.push((v, g));
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
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

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

fn softmax_lanes(d: &[f64], shape: &[usize], axis: usize, log: bool) -> Vec<f64> {
    let (outer, ext, inner) = axis_split(shape, axis);
    let mut out = vec![0.0; d.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |e: usize| (o * ext + e) * inner + i;
            let max = (0..ext).map(|e| d[idx(e)]).fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = (0..ext).map(|e| (d[idx(e)] - max).exp()).sum();
            if log {
                let lse = sum.ln();
                for e in 0..ext {
                    out[idx(e)] = d[idx(e)] - max - lse;
                }
            } else {
                for e in 0..ext {
                    out[idx(e)] = (d[idx(e)] - max).exp() / sum;
                }
            }
        }
    }
    out
}
