//! Reverse-mode differentiation over a linear op tape.
//!
//! Every op appends one record holding its output value and the ids of its
//! inputs. Records are therefore in topological order, and [`Tape::backward`]
//! visits each of them once, in reverse.

use crate::error::{invalid, mismatch, Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::scalar::Real;
use crate::tensor::{numel, permute_data, strides, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Index of a tensor in a [`crate::optim::ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum UnOp<T> {
    Exp,
    Log,
    Neg,
    Abs,
    Scale(T),
    AddScalar(T),
    ClampMin(T),
    Sigmoid,
    Relu,
    Leaky(T),
    Elu1,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Binary(BinOp, Var, Var),
    Unary(UnOp<T>, Var),
    ScLeaky(Var, Var),
    Reduce {
        kind: ReduceKind,
        input: Var,
        /// input flat index -> output flat index
        map: Vec<usize>,
        /// for `Max`, the winning input index of every output cell
        argmax: Vec<usize>,
        count: usize,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Expand(Var, Vec<usize>),
    Narrow {
        input: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    PixelShuffle(Var, usize),
    PixelUnshuffle(Var, usize),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Binary(..) => "binary",
            Op::Unary(..) => "unary",
            Op::ScLeaky(..) => "sc_leaky_relu",
            Op::Reduce { .. } => "reduce",
            Op::Reshape(_) => "reshape",
            Op::Permute(..) => "permute",
            Op::Expand(..) => "expand",
            Op::Narrow { .. } => "narrow",
            Op::Concat { .. } => "concat",
            Op::Conv2d { .. } => "conv2d",
            Op::PixelShuffle(..) => "pixel_shuffle",
            Op::PixelUnshuffle(..) => "pixel_unshuffle",
            Op::LayerNorm { .. } => "layer_norm",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Binary(_, a, b) | Op::ScLeaky(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Unary(_, a)
            | Op::Reshape(a)
            | Op::Permute(a, _)
            | Op::Expand(a, _)
            | Op::PixelShuffle(a, _)
            | Op::PixelUnshuffle(a, _) => vec![*a],
            Op::Reduce { input, .. } | Op::Narrow { input, .. } => vec![*input],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// One executed op as seen from outside the tape.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub op: &'static str,
    pub inputs: Vec<Var>,
    pub output: Var,
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    params: Vec<(Var, ParamId)>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// For every index of `out_shape`, the flat index of `in_shape` it reads when
/// singleton axes of `in_shape` are repeated. Ranks must agree.
fn broadcast_map(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let in_strides = strides(in_shape);
    let eff: Vec<usize> = in_shape
        .iter()
        .zip(&in_strides)
        .map(|(&d, &s)| if d == 1 { 0 } else { s })
        .collect();
    let n = numel(out_shape);
    let nd = out_shape.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(off);
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            off += eff[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= eff[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Whether gradients will flow into `v`.
    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn records(&self) -> Vec<Record> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| Record {
                op: n.op.name(),
                inputs: n.op.inputs(),
                output: Var(i),
            })
            .collect()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let tracked = op.inputs().iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient when `t.requires_grad()` is set.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let tracked = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, mut t: Tensor<T>) -> Var {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    /// Leaf copied from a parameter. Frozen parameters are recorded but never
    /// receive gradient; gradient still flows through ops that consume them.
    pub fn param(&mut self, id: ParamId, value: &Tensor<T>, trainable: bool) -> Var {
        let mut t = value.clone();
        t.set_requires_grad(trainable);
        let v = self.leaf(t);
        if trainable {
            self.params.push((v, id));
        }
        v
    }

    pub fn scalar(&mut self, x: T) -> Var {
        self.constant(Tensor::scalar(x))
    }

    // ---------------------------------------------------------------- linear algebra

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, p) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * p];
        kernels::gemm_nn(m, k, p, self.value(a).data(), self.value(b).data(), &mut out);
        let t = Tensor::new(vec![m, p], out)?;
        Ok(self.push(t, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(invalid("transpose", format!("expected 2-D, got {s:?}")));
        }
        let t = self.value(a).permute(&[1, 0])?;
        Ok(self.push(t, Op::Transpose(a)))
    }

    /// `x·w + b` for `x: [N×F]`, `w: [F×D]`, `b: [D]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            None => Ok(y),
            Some(b) => {
                let d = self.shape(b).to_vec();
                let n = self.shape(y)[0];
                let b2 = self.reshape(b, vec![1, numel(&d)])?;
                let be = self.expand(b2, vec![n, numel(&d)])?;
                self.add(y, be)
            }
        }
    }

    // ---------------------------------------------------------------- elementwise

    fn binary(&mut self, op: BinOp, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = if ta.shape() == tb.shape() || tb.numel() == 1 {
            ta.shape().to_vec()
        } else if ta.numel() == 1 {
            tb.shape().to_vec()
        } else {
            return Err(mismatch("elementwise", ta.shape(), tb.shape()));
        };
        let n = numel(&shape);
        let ia = |i: usize| if ta.numel() == 1 { 0 } else { i };
        let ib = |i: usize| if tb.numel() == 1 { 0 } else { i };
        let (da, db) = (ta.data(), tb.data());
        if op == BinOp::Div && db.iter().any(|x| *x == T::zero()) {
            return Err(Error::DivisionByZero("div"));
        }
        let data: Vec<T> = (0..n)
            .map(|i| {
                let (x, y) = (da[ia(i)], db[ib(i)]);
                match op {
                    BinOp::Add => x + y,
                    BinOp::Sub => x - y,
                    BinOp::Mul => x * y,
                    BinOp::Div => x / y,
                }
            })
            .collect();
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::Binary(op, a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Mul, a, b)
    }

    /// Errors if any divisor element is exactly zero.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Div, a, b)
    }

    fn unary(&mut self, op: UnOp<T>, a: Var) -> Result<Var> {
        let x = self.value(a);
        if op == UnOp::Log && x.data().iter().any(|v| *v <= T::zero()) {
            return Err(Error::LogDomain);
        }
        let one = T::one();
        let t = x.map(|v| match op {
            UnOp::Exp => v.exp(),
            UnOp::Log => v.ln(),
            UnOp::Neg => -v,
            UnOp::Abs => v.abs(),
            UnOp::Scale(c) => v * c,
            UnOp::AddScalar(c) => v + c,
            UnOp::ClampMin(c) => v.max(c),
            UnOp::Sigmoid => one / (one + (-v).exp()),
            UnOp::Relu => v.max(T::zero()),
            UnOp::Leaky(s) => {
                if v > T::zero() {
                    v
                } else {
                    s * v
                }
            }
            UnOp::Elu1 => {
                if v > T::zero() {
                    v + one
                } else {
                    v.exp()
                }
            }
        });
        Ok(self.push(t, Op::Unary(op, a)))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnOp::Exp, a)
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnOp::Log, a)
    }
    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(UnOp::Neg, a)
    }
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(UnOp::Abs, a)
    }
    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        self.unary(UnOp::Scale(c), a)
    }
    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        self.unary(UnOp::AddScalar(c), a)
    }
    pub fn clamp_min(&mut self, a: Var, c: T) -> Result<Var> {
        self.unary(UnOp::ClampMin(c), a)
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(UnOp::Sigmoid, a)
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnOp::Relu, a)
    }
    /// `max(0,x) + slope·min(0,x)`
    pub fn leaky(&mut self, a: Var, slope: T) -> Result<Var> {
        self.unary(UnOp::Leaky(slope), a)
    }
    /// `elu(x) + 1`
    pub fn elu1(&mut self, a: Var) -> Result<Var> {
        self.unary(UnOp::Elu1, a)
    }

    /// Shifted and clipped leaky activation with offset 1 and truncation rate
    /// taken from the one-element `alpha`.
    pub fn sc_leaky_relu(&mut self, x: Var, alpha: Var) -> Result<Var> {
        if self.value(alpha).numel() != 1 {
            return Err(mismatch("sc_leaky_relu", self.shape(x), self.shape(alpha)));
        }
        let a = self.value(alpha).item();
        if a <= T::zero() {
            return Err(invalid("sc_leaky_relu", "alpha must be positive"));
        }
        let t = self.value(x).map(|v| sc_leaky(v, a));
        Ok(self.push(t, Op::ScLeaky(x, alpha)))
    }

    // ---------------------------------------------------------------- reductions

    /// Reduces over `axes`, dropping them from the shape.
    pub fn reduce(&mut self, kind: ReduceKind, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut keep = shape.clone();
        let mut count = 1;
        for &ax in axes {
            if ax >= shape.len() {
                return Err(invalid("reduce", format!("axis {ax} out of range for {shape:?}")));
            }
            if shape[ax] == 0 {
                return Err(invalid("reduce", "empty reduction axis"));
            }
            if keep[ax] == 1 && shape[ax] != 1 {
                return Err(invalid("reduce", format!("axis {ax} repeated")));
            }
            count *= shape[ax];
            keep[ax] = 1;
        }
        if axes.is_empty() {
            return Err(invalid("reduce", "no axes"));
        }
        let out_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|(i, _)| !axes.contains(i))
            .map(|(_, &d)| d)
            .collect();
        let map = broadcast_map(&keep, &shape);
        let x = self.value(a).data();
        let nout = numel(&out_shape);
        let mut out = vec![T::zero(); nout];
        let mut argmax = Vec::new();
        match kind {
            ReduceKind::Sum | ReduceKind::Mean => {
                for (i, &o) in map.iter().enumerate() {
                    out[o] += x[i];
                }
                if kind == ReduceKind::Mean {
                    let inv = T::one() / T::of(count as f64);
                    out.iter_mut().for_each(|v| *v *= inv);
                }
            }
            ReduceKind::Max => {
                argmax = vec![usize::MAX; nout];
                for (i, &o) in map.iter().enumerate() {
                    // strict comparison keeps the first occurrence on ties
                    if argmax[o] == usize::MAX || x[i] > out[o] {
                        out[o] = x[i];
                        argmax[o] = i;
                    }
                }
            }
        }
        let t = Tensor::new(out_shape, out)?;
        Ok(self.push(
            t,
            Op::Reduce {
                kind,
                input: a,
                map,
                argmax,
                count,
            },
        ))
    }

    pub fn sum(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(ReduceKind::Sum, a, axes)
    }

    pub fn mean(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(ReduceKind::Mean, a, axes)
    }

    pub fn max(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(ReduceKind::Max, a, axes)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        if axes.is_empty() {
            return Ok(a);
        }
        self.sum(a, &axes)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        if axes.is_empty() {
            return Ok(a);
        }
        self.mean(a, &axes)
    }

    // ---------------------------------------------------------------- shape ops

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a)))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let t = self.value(a).permute(axes)?;
        Ok(self.push(t, Op::Permute(a, axes.to_vec())))
    }

    /// Explicitly repeats singleton axes up to `shape` (same rank).
    pub fn expand(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let src = self.shape(a).to_vec();
        if src.len() != shape.len() || src.iter().zip(&shape).any(|(&s, &d)| s != d && s != 1) {
            return Err(mismatch("expand", &src, &shape));
        }
        let map = broadcast_map(&src, &shape);
        let x = self.value(a).data();
        let data = map.iter().map(|&i| x[i]).collect();
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::Expand(a, src)))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(invalid(
                "narrow",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            ));
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let x = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let t = Tensor::new(out_shape, data)?;
        Ok(self.push(t, Op::Narrow { input: a, axis, start }))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| invalid("concat", "no inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(invalid("concat", format!("axis {axis} for {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(mismatch("concat", &first, s));
            }
            total += s[axis];
        }
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let t = Tensor::new(shape, data)?;
        Ok(self.push(
            t,
            Op::Concat {
                inputs: parts.to_vec(),
                axis,
            },
        ))
    }

    // ---------------------------------------------------------------- convolution & friends

    /// 2-D cross-correlation. `x: [B×C×H×W]`, `w: [O×C/groups×k×k]`, optional `b: [O]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] || stride == 0 || groups == 0 {
            return Err(mismatch("conv2d", &xs, &ws));
        }
        let geom = ConvGeom {
            batch: xs[0],
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout: ws[0],
            k: ws[2],
            stride,
            pad: padding,
            groups,
        };
        if xs[1] % groups != 0 || ws[0] % groups != 0 || ws[1] != xs[1] / groups {
            return Err(invalid(
                "conv2d",
                format!("channels {} / weight {:?} incompatible with groups {groups}", xs[1], ws),
            ));
        }
        if xs[2] + 2 * padding < ws[2] || xs[3] + 2 * padding < ws[2] {
            return Err(mismatch("conv2d", &xs, &ws));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(mismatch("conv2d bias", self.shape(b), &[ws[0]]));
            }
        }
        let mut out = vec![T::zero(); numel(&geom.out_shape())];
        kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &mut out,
        );
        let t = Tensor::new(geom.out_shape().to_vec(), out)?;
        Ok(self.push(t, Op::Conv2d { x, w, b, geom }))
    }

    /// `[B×C·r²×H×W] -> [B×C×rH×rW]` with
    /// `out[b, c, r·h+dy, r·w+dx] = in[b, c·r²+dy·r+dx, h, w]`.
    pub fn pixel_shuffle(&mut self, a: Var, r: usize) -> Result<Var> {
        let t = pixel_shuffle(self.value(a), r)?;
        Ok(self.push(t, Op::PixelShuffle(a, r)))
    }

    pub fn pixel_unshuffle(&mut self, a: Var, r: usize) -> Result<Var> {
        let t = pixel_unshuffle(self.value(a), r)?;
        Ok(self.push(t, Op::PixelUnshuffle(a, r)))
    }

    /// Normalizes over the last axis, then applies per-feature `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().ok_or_else(|| invalid("layer_norm", "scalar input"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(mismatch("layer_norm", &xs, self.shape(gamma)));
        }
        let rows = numel(&xs) / d;
        let xv = self.value(x).data();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![T::zero(); rows * d];
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        let inv_d = T::one() / T::of(d as f64);
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + bt[j];
            }
        }
        let t = Tensor::new(xs, out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    // ---------------------------------------------------------------- backward

    /// Propagates d(root)/d(·) back to every tracked leaf. Consumes the tape.
    pub fn backward(self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).numel() != 1 {
            return Err(invalid(
                "backward",
                format!("root must be scalar, got shape {:?}", self.shape(root)),
            ));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        let nodes = &self.nodes;

        fn acc<T: Real>(grads: &mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var, g: Vec<T>) {
            if !nodes[v.0].tracked {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(g).for_each(|(e, x)| *e += x),
                slot @ None => *slot = Some(g),
            }
        }

        fn sum_to<T: Real>(g: &[T], len: usize) -> Vec<T> {
            if len == 1 && g.len() != 1 {
                vec![g.iter().copied().sum()]
            } else {
                g.to_vec()
            }
        }

        for i in (0..n).rev() {
            let node = &nodes[i];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let val = |v: Var| nodes[v.0].value.data();
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                    let (m, k, p) = (sa[0], sa[1], sb[1]);
                    if nodes[a.0].tracked {
                        let mut da = vec![T::zero(); m * k];
                        kernels::gemm_nt(m, p, k, &g, val(*b), &mut da);
                        acc(&mut grads, nodes, *a, da);
                    }
                    if nodes[b.0].tracked {
                        let mut db = vec![T::zero(); k * p];
                        kernels::gemm_tn(m, k, p, val(*a), &g, &mut db);
                        acc(&mut grads, nodes, *b, db);
                    }
                }
                Op::Transpose(a) => {
                    let s = node.value.shape();
                    let gt = permute_data(&g, s, &[1, 0])?;
                    acc(&mut grads, nodes, *a, gt);
                }
                Op::Binary(op, a, b) => {
                    let (xa, xb) = (val(*a), val(*b));
                    let (la, lb) = (xa.len(), xb.len());
                    let ia = |j: usize| if la == 1 { 0 } else { j };
                    let ib = |j: usize| if lb == 1 { 0 } else { j };
                    let (ga, gb): (Vec<T>, Vec<T>) = match op {
                        BinOp::Add => (g.clone(), g.clone()),
                        BinOp::Sub => (g.clone(), g.iter().map(|&x| -x).collect()),
                        BinOp::Mul => (
                            g.iter().enumerate().map(|(j, &x)| x * xb[ib(j)]).collect(),
                            g.iter().enumerate().map(|(j, &x)| x * xa[ia(j)]).collect(),
                        ),
                        BinOp::Div => (
                            g.iter().enumerate().map(|(j, &x)| x / xb[ib(j)]).collect(),
                            g.iter()
                                .enumerate()
                                .map(|(j, &x)| {
                                    let d = xb[ib(j)];
                                    -x * xa[ia(j)] / (d * d)
                                })
                                .collect(),
                        ),
                    };
                    acc(&mut grads, nodes, *a, sum_to(&ga, la));
                    acc(&mut grads, nodes, *b, sum_to(&gb, lb));
                }
                Op::Unary(op, a) => {
                    let x = val(*a);
                    let y = node.value.data();
                    let one = T::one();
                    let zero = T::zero();
                    let dx: Vec<T> = g
                        .iter()
                        .enumerate()
                        .map(|(j, &gj)| {
                            let (xj, yj) = (x[j], y[j]);
                            gj * match *op {
                                UnOp::Exp => yj,
                                UnOp::Log => one / xj,
                                UnOp::Neg => -one,
                                UnOp::Abs => {
                                    if xj > zero {
                                        one
                                    } else if xj < zero {
                                        -one
                                    } else {
                                        zero
                                    }
                                }
                                UnOp::Scale(c) => c,
                                UnOp::AddScalar(_) => one,
                                UnOp::ClampMin(c) => {
                                    if xj >= c {
                                        one
                                    } else {
                                        zero
                                    }
                                }
                                UnOp::Sigmoid => yj * (one - yj),
                                UnOp::Relu => {
                                    if xj > zero {
                                        one
                                    } else {
                                        zero
                                    }
                                }
                                UnOp::Leaky(s) => {
                                    if xj > zero {
                                        one
                                    } else {
                                        s
                                    }
                                }
                                UnOp::Elu1 => {
                                    if xj > zero {
                                        one
                                    } else {
                                        yj
                                    }
                                }
                            }
                        })
                        .collect();
                    acc(&mut grads, nodes, *a, dx);
                }
                Op::ScLeaky(x, alpha) => {
                    let a = nodes[alpha.0].value.item();
                    let xv = val(*x);
                    let mut dalpha = T::zero();
                    let dx: Vec<T> = g
                        .iter()
                        .zip(xv)
                        .map(|(&gj, &xj)| match sc_leaky_branch(xj, a) {
                            Branch::Linear => gj,
                            Branch::Leaky => {
                                dalpha += gj * xj;
                                gj * a
                            }
                            Branch::Clipped => T::zero(),
                        })
                        .collect();
                    acc(&mut grads, nodes, *x, dx);
                    acc(&mut grads, nodes, *alpha, vec![dalpha]);
                }
                Op::Reduce {
                    kind,
                    input,
                    map,
                    argmax,
                    count,
                } => {
                    let mut dx = vec![T::zero(); map.len()];
                    match kind {
                        ReduceKind::Sum => {
                            for (j, &o) in map.iter().enumerate() {
                                dx[j] = g[o];
                            }
                        }
                        ReduceKind::Mean => {
                            let inv = T::one() / T::of(*count as f64);
                            for (j, &o) in map.iter().enumerate() {
                                dx[j] = g[o] * inv;
                            }
                        }
                        ReduceKind::Max => {
                            for (o, &j) in argmax.iter().enumerate() {
                                dx[j] += g[o];
                            }
                        }
                    }
                    acc(&mut grads, nodes, *input, dx);
                }
                Op::Reshape(a) => acc(&mut grads, nodes, *a, g),
                Op::Permute(a, axes) => {
                    let mut inv = vec![0; axes.len()];
                    for (i, &ax) in axes.iter().enumerate() {
                        inv[ax] = i;
                    }
                    let gx = permute_data(&g, node.value.shape(), &inv)?;
                    acc(&mut grads, nodes, *a, gx);
                }
                Op::Expand(a, src) => {
                    let map = broadcast_map(src, node.value.shape());
                    let mut dx = vec![T::zero(); numel(src)];
                    for (j, &s) in map.iter().enumerate() {
                        dx[s] += g[j];
                    }
                    acc(&mut grads, nodes, *a, dx);
                }
                Op::Narrow { input, axis, start } => {
                    let src = nodes[input.0].value.shape();
                    let len = node.value.shape()[*axis];
                    let outer = numel(&src[..*axis]);
                    let inner = numel(&src[*axis + 1..]);
                    let mut dx = vec![T::zero(); numel(src)];
                    for o in 0..outer {
                        let base = (o * src[*axis] + start) * inner;
                        dx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                    }
                    acc(&mut grads, nodes, *input, dx);
                }
                Op::Concat { inputs, axis } => {
                    let shape = node.value.shape();
                    let outer = numel(&shape[..*axis]);
                    let inner = numel(&shape[*axis + 1..]);
                    let row = shape[*axis] * inner;
                    let mut offset = 0;
                    for &p in inputs {
                        let len = nodes[p.0].value.shape()[*axis] * inner;
                        let mut dp = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            dp.extend_from_slice(&g[o * row + offset..o * row + offset + len]);
                        }
                        offset += len;
                        acc(&mut grads, nodes, p, dp);
                    }
                }
                Op::Conv2d { x, w, b, geom } => {
                    if nodes[x.0].tracked {
                        let mut dx = vec![T::zero(); nodes[x.0].value.numel()];
                        kernels::conv2d_backward_input(geom, &g, val(*w), &mut dx);
                        acc(&mut grads, nodes, *x, dx);
                    }
                    if nodes[w.0].tracked {
                        let mut dw = vec![T::zero(); nodes[w.0].value.numel()];
                        kernels::conv2d_backward_weight(geom, &g, val(*x), &mut dw);
                        acc(&mut grads, nodes, *w, dw);
                    }
                    if let Some(b) = b {
                        if nodes[b.0].tracked {
                            let mut db = vec![T::zero(); geom.cout];
                            kernels::conv2d_backward_bias(geom, &g, &mut db);
                            acc(&mut grads, nodes, *b, db);
                        }
                    }
                }
                Op::PixelShuffle(a, r) => {
                    let gt = Tensor::new(node.value.shape().to_vec(), g)?;
                    let dx = pixel_unshuffle(&gt, *r)?;
                    acc(&mut grads, nodes, *a, dx.into_data());
                }
                Op::PixelUnshuffle(a, r) => {
                    let gt = Tensor::new(node.value.shape().to_vec(), g)?;
                    let dx = pixel_shuffle(&gt, *r)?;
                    acc(&mut grads, nodes, *a, dx.into_data());
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let d = nodes[gamma.0].value.numel();
                    let gm = val(*gamma);
                    let rows = rstd.len();
                    let mut dgamma = vec![T::zero(); d];
                    let mut dbeta = vec![T::zero(); d];
                    let mut dx = vec![T::zero(); rows * d];
                    let inv_d = T::one() / T::of(d as f64);
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            dgamma[j] += gr[j] * xh[j];
                            dbeta[j] += gr[j];
                            let dxh = gr[j] * gm[j];
                            m1 += dxh;
                            m2 += dxh * xh[j];
                        }
                        m1 *= inv_d;
                        m2 *= inv_d;
                        for j in 0..d {
                            let dxh = gr[j] * gm[j];
                            dx[r * d + j] = rstd[r] * (dxh - m1 - xh[j] * m2);
                        }
                    }
                    acc(&mut grads, nodes, *x, dx);
                    acc(&mut grads, nodes, *gamma, dgamma);
                    acc(&mut grads, nodes, *beta, dbeta);
                }
            }
        }

        let mut leaf_grads = Vec::with_capacity(n);
        for (i, (node, g)) in self.nodes.iter().zip(grads).enumerate() {
            let keep = matches!(node.op, Op::Leaf) && node.tracked;
            leaf_grads.push(if keep {
                let g = g.unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
                Some(Tensor::new(self.nodes[i].value.shape().to_vec(), g)?)
            } else {
                None
            });
        }
        Ok(Gradients {
            grads: leaf_grads,
            params: self.params,
        })
    }
}

/// Gradients of a scalar root with respect to tracked leaves.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(Var, ParamId)>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a parameter, summed over every leaf that copied it.
    pub fn param(&self, id: ParamId) -> Option<Tensor<T>> {
        let mut out: Option<Tensor<T>> = None;
        for (v, p) in &self.params {
            if *p != id {
                continue;
            }
            if let Some(g) = self.wrt(*v) {
                match &mut out {
                    None => out = Some(g.clone()),
                    Some(o) => o.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += *b),
                }
            }
        }
        out
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.params.iter().map(|(_, p)| *p).collect();
        ids.sort();
        ids.dedup();
        ids
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Branch {
    Linear,
    Leaky,
    Clipped,
}

/// Branch of the shifted-clipped leaky activation; `x = 0` falls on the leaky branch.
#[inline]
pub(crate) fn sc_leaky_branch<T: Real>(x: T, alpha: T) -> Branch {
    if x > T::zero() {
        Branch::Linear
    } else if x >= -T::one() / alpha {
        Branch::Leaky
    } else {
        Branch::Clipped
    }
}

/// `x+1` for `x>0`, `αx+1` for `−1/α ≤ x ≤ 0`, `0` below.
#[inline]
pub fn sc_leaky<T: Real>(x: T, alpha: T) -> T {
    match sc_leaky_branch(x, alpha) {
        Branch::Linear => x + T::one(),
        Branch::Leaky => alpha * x + T::one(),
        Branch::Clipped => T::zero(),
    }
}

pub fn pixel_shuffle<T: Real>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 4 || r == 0 || !s[1].is_multiple_of(r * r) {
        return Err(invalid(
            "pixel_shuffle",
            format!("shape {s:?} not divisible by r²={}", r * r),
        ));
    }
    let (b, c, h, w) = (s[0], s[1] / (r * r), s[2], s[3]);
    let (oh, ow) = (h * r, w * r);
    let xd = x.data();
    let mut out = vec![T::zero(); xd.len()];
    for bi in 0..b {
        for ci in 0..c {
            for dy in 0..r {
                for dx in 0..r {
                    let src_c = ci * r * r + dy * r + dx;
                    let src = &xd[((bi * c * r * r + src_c) * h) * w..][..h * w];
                    let dst = &mut out[(bi * c + ci) * oh * ow..][..oh * ow];
                    for y in 0..h {
                        for xx in 0..w {
                            dst[(y * r + dy) * ow + xx * r + dx] = src[y * w + xx];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, c, oh, ow], out)
}

pub fn pixel_unshuffle<T: Real>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 4 || r == 0 || !s[2].is_multiple_of(r) || !s[3].is_multiple_of(r) {
        return Err(invalid(
            "pixel_unshuffle",
            format!("shape {s:?} not divisible by r={r}"),
        ));
    }
    let (b, c, oh, ow) = (s[0], s[1], s[2], s[3]);
    let (h, w) = (oh / r, ow / r);
    let xd = x.data();
    let mut out = vec![T::zero(); xd.len()];
    for bi in 0..b {
        for ci in 0..c {
            let src = &xd[(bi * c + ci) * oh * ow..][..oh * ow];
            for dy in 0..r {
                for dx in 0..r {
                    let dst_c = ci * r * r + dy * r + dx;
                    let dst = &mut out[((bi * c * r * r + dst_c) * h) * w..][..h * w];
                    for y in 0..h {
                        for xx in 0..w {
                            dst[y * w + xx] = src[(y * r + dy) * ow + xx * r + dx];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, c * r * r, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_direct() {
        let mut tape = Tape::<f64>::new();
        let i = tape.constant(Tensor::eye(2));
        let p = tape.matmul(i, i).unwrap();
        assert_eq!(tape.value(p), &Tensor::eye(2));
        let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = tape.constant(t(&[2, 1], &[0., 1.]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[2., 4.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn elementwise_identities() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[0.5, -1.0, 2.0]));
        let zero = tape.scalar(0.0);
        let one = tape.scalar(1.0);
        let s = tape.add(x, zero).unwrap();
        let m = tape.mul(x, one).unwrap();
        assert_eq!(tape.value(s), tape.value(x));
        assert_eq!(tape.value(m), tape.value(x));
    }

    #[test]
    fn exp_log_inverse() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[4], &[0.1, 1.0, 3.7, 42.0]));
        let l = tape.log(x).unwrap();
        let e = tape.exp(l).unwrap();
        for (a, b) in tape.value(e).data().iter().zip(tape.value(x).data()) {
            assert!(((a - b) / b).abs() < 1e-12);
        }
    }

    #[test]
    fn div_by_zero_and_log_domain_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2], &[1.0, 2.0]));
        let z = tape.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(tape.div(x, z), Err(Error::DivisionByZero(_))));
        assert!(matches!(tape.log(z), Err(Error::LogDomain)));
    }

    #[test]
    fn reductions() {
        let mut tape = Tape::<f64>::new();
        let ones = tape.constant(Tensor::ones(vec![3, 4]));
        let s = tape.sum(ones, &[0, 1]).unwrap();
        assert_eq!(tape.value(s).item(), 12.0);
        let v = tape.constant(t(&[2], &[2.0, 4.0]));
        let m = tape.mean(v, &[0]).unwrap();
        assert_eq!(tape.value(m).item(), 3.0);
        let e = tape.constant(Tensor::zeros(vec![0, 2]));
        assert!(tape.sum(e, &[0]).is_err());
        let rows = tape.constant(t(&[2, 3], &[1., 5., 2., 7., 0., 3.]));
        let r = tape.max(rows, &[1]).unwrap();
        assert_eq!(tape.value(r).data(), &[5., 7.]);
    }

    #[test]
    fn max_ties_route_to_first() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[4], &[1.0, 3.0, 3.0, 0.0]).with_grad());
        let m = tape.max(x, &[0]).unwrap();
        let g = tape.backward(m).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_of_sum_and_square() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 0.5]).with_grad());
        let s = tape.sum_all(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 0.5]).with_grad());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum_all(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(vec![2]).with_grad());
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn conv_simple_cases() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(vec![1, 1, 3, 3], |i| i as f64));
        let w = tape.constant(t(&[1, 1, 1, 1], &[2.0]));
        let y = tape.conv2d(x, w, None, 1, 0, 1).unwrap();
        let doubled: Vec<f64> = (0..9).map(|i| 2.0 * i as f64).collect();
        assert_eq!(tape.value(y).data(), doubled.as_slice());

        let ones = tape.constant(Tensor::ones(vec![1, 1, 3, 3]));
        let k = tape.constant(Tensor::ones(vec![1, 1, 3, 3]));
        let y = tape.conv2d(ones, k, None, 1, 1, 1).unwrap();
        assert_eq!(tape.value(y).at(&[0, 0, 1, 1]), 9.0);
        assert_eq!(tape.value(y).at(&[0, 0, 0, 0]), 4.0);
    }

    #[test]
    fn conv_group_mismatch() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(vec![1, 3, 4, 4]));
        let w = tape.constant(Tensor::ones(vec![2, 1, 3, 3]));
        assert!(tape.conv2d(x, w, None, 1, 1, 2).is_err());
    }

    #[test]
    fn records_are_topological() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(vec![2, 2]).with_grad());
        let y = tape.matmul(x, x).unwrap();
        let z = tape.sigmoid(y).unwrap();
        let _ = tape.sum_all(z).unwrap();
        for r in tape.records() {
            assert!(r.inputs.iter().all(|i| i.index() < r.output.index()));
        }
    }

    #[test]
    fn pixel_shuffle_ordering() {
        let x = t(&[1, 4, 1, 1], &[1., 2., 3., 4.]);
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[1., 2., 3., 4.]);
        assert_eq!(pixel_shuffle(&x, 1).unwrap(), x);
        assert!(pixel_shuffle(&t(&[1, 3, 1, 1], &[1., 2., 3.]), 2).is_err());
    }

    #[test]
    fn sc_leaky_values() {
        assert_eq!(sc_leaky(2.0, 0.01), 3.0);
        assert!((sc_leaky(-50.0, 0.01) - 0.5f64).abs() < 1e-15);
        assert_eq!(sc_leaky(-150.0, 0.01), 0.0);
        assert_eq!(sc_leaky(0.0, 0.01), 1.0);
    }
}
