//! Operator kernels, generic over the element type.
//!
//! Every kernel computes in `T`: the reference interpreter instantiates them
//! at `f64`, the optimizing executor at `f32` or `bf16`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::graph::{op_output_shape, pooled_extent, Edge, EdgeId, Merge, OperatorKind, Padding, Params, ShapeError, Site};
use crate::scalar::{DType, Scalar};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ExecErrorKind {
    ShapeMismatch,
    UnsupportedDType,
    NumericDomain,
    InternalInvariant,
}

impl ExecErrorKind {
    pub fn name(self) -> &'static str {
        match self {
            ExecErrorKind::ShapeMismatch => "ShapeMismatch",
            ExecErrorKind::UnsupportedDType => "UnsupportedDType",
            ExecErrorKind::NumericDomain => "NumericDomain",
            ExecErrorKind::InternalInvariant => "InternalInvariant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecError {
    pub kind: ExecErrorKind,
    pub edge: Option<EdgeId>,
    /// Operator involved, when known.
    pub op: Option<OperatorKind>,
    pub message: String,
}

impl ExecError {
    pub fn new(kind: ExecErrorKind, message: impl Into<String>) -> ExecError {
        ExecError {
            kind,
            edge: None,
            op: None,
            message: message.into(),
        }
    }

    pub fn at(mut self, edge: &Edge) -> ExecError {
        self.edge = Some(edge.id);
        self.op = Some(edge.op);
        self
    }

    pub fn with_op(mut self, op: OperatorKind) -> ExecError {
        self.op = Some(op);
        self
    }
}

impl fmt::Display for ExecError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.kind.name())?;
        if let Some(e) = self.edge {
            write!(f, " at edge {e}")?;
        }
        if let Some(op) = self.op {
            write!(f, " ({op})")?;
        }
        write!(f, ": {}", self.message)
    }
}

impl std::error::Error for ExecError {}

impl From<ShapeError> for ExecError {
    fn from(e: ShapeError) -> ExecError {
        let mut out = ExecError::new(ExecErrorKind::ShapeMismatch, e.reason);
        if let Site::Edge(id) = e.site {
            out.edge = Some(id);
        }
        out
    }
}

/// A dense NCHW array of `T` used during execution.
#[derive(Debug, Clone, PartialEq)]
pub struct Buffer<T> {
    pub shape: Shape,
    pub data: Vec<T>,
}

impl<T: Scalar> Buffer<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Buffer<T> {
        assert_eq!(shape.element_count(), data.len(), "buffer length mismatch");
        Buffer { shape, data }
    }

    pub fn filled(shape: Shape, v: T) -> Buffer<T> {
        Buffer {
            shape,
            data: vec![v; shape.element_count()],
        }
    }

    pub fn from_tensor(t: &Tensor) -> Buffer<T> {
        Buffer {
            shape: t.shape(),
            data: t.to_scalars(),
        }
    }

    pub fn to_tensor(&self, dtype: DType) -> Tensor {
        Tensor::from_scalars(self.shape, dtype, &self.data).expect("buffer shape is valid")
    }

    pub fn byte_size(&self) -> usize {
        self.data.len() * T::DTYPE.byte_width()
    }

    fn at(&self, i: [usize; 4]) -> T {
        self.data[self.shape.offset_of(i)]
    }

    fn map(&self, f: impl Fn(T) -> T) -> Buffer<T> {
        Buffer {
            shape: self.shape,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Per-channel affine `y = x * scale[c] + shift[c]`.
    fn per_channel(&self, f: impl Fn(usize, T) -> T) -> Buffer<T> {
        let s = self.shape;
        let plane = s.h * s.w;
        Buffer {
            shape: s,
            data: self.data.iter().enumerate().map(|(i, &x)| f((i / plane) % s.c, x)).collect(),
        }
    }
}

fn param<T: Scalar>(params: &Params, name: &str) -> Result<Buffer<T>, ExecError> {
    params
        .get(name)
        .map(Buffer::from_tensor)
        .ok_or_else(|| ExecError::new(ExecErrorKind::InternalInvariant, format!("missing param {name}")))
}

fn lit<T: Scalar>(x: f64) -> T {
    T::narrow(x)
}

struct Window {
    kernel: (usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
    out: (usize, usize),
}

fn window(shape: Shape, kernel: (usize, usize), stride: (usize, usize), padding: Padding) -> Result<Window, ExecError> {
    let (oh, ph) = pooled_extent(shape.h, kernel.0, stride.0, padding)
        .ok_or_else(|| ExecError::new(ExecErrorKind::ShapeMismatch, format!("window {kernel:?} does not fit {shape}")))?;
    let (ow, pw) = pooled_extent(shape.w, kernel.1, stride.1, padding)
        .ok_or_else(|| ExecError::new(ExecErrorKind::ShapeMismatch, format!("window {kernel:?} does not fit {shape}")))?;
    Ok(Window {
        kernel,
        stride,
        pad: (ph, pw),
        out: (oh, ow),
    })
}

impl Window {
    /// Input coordinates covered by output position (oh, ow), row-major,
    /// padded positions skipped.
    fn taps(&self, shape: Shape, oh: usize, ow: usize) -> impl Iterator<Item = (usize, usize, usize, usize)> + '_ {
        let base_h = (oh * self.stride.0) as isize - self.pad.0 as isize;
        let base_w = (ow * self.stride.1) as isize - self.pad.1 as isize;
        (0..self.kernel.0).flat_map(move |kh| {
            (0..self.kernel.1).filter_map(move |kw| {
                let h = base_h + kh as isize;
                let w = base_w + kw as isize;
                (h >= 0 && w >= 0 && (h as usize) < shape.h && (w as usize) < shape.w).then_some((kh, kw, h as usize, w as usize))
            })
        })
    }
}

/// Grouped cross-correlation. `weight` is (O, C/groups, kh, kw); the bias is
/// added after accumulation.
pub fn conv2d<T: Scalar>(x: &Buffer<T>, weight: &Buffer<T>, bias: &Buffer<T>, groups: usize, stride: (usize, usize), padding: Padding) -> Result<Buffer<T>, ExecError> {
    let s = x.shape;
    let ws = weight.shape;
    if s.c % groups != 0 || ws.n % groups != 0 || ws.c * groups != s.c {
        return Err(ExecError::new(ExecErrorKind::ShapeMismatch, format!("weight {ws} incompatible with input {s} in {groups} groups")));
    }
    if bias.shape.dims() != [1, ws.n, 1, 1] {
        return Err(ExecError::new(ExecErrorKind::ShapeMismatch, format!("bias {} does not match {} output channels", bias.shape, ws.n)));
    }
    let win = window(s, (ws.h, ws.w), stride, padding)?;
    let out_shape = Shape::new(s.n, ws.n, win.out.0, win.out.1).map_err(|e| ExecError::new(ExecErrorKind::ShapeMismatch, e.to_string()))?;
    let per_group_out = ws.n / groups;
    let mut out = Vec::with_capacity(out_shape.element_count());
    for n in 0..s.n {
        for o in 0..ws.n {
            let g = o / per_group_out;
            for oh in 0..win.out.0 {
                for ow in 0..win.out.1 {
                    let mut acc = T::zero();
                    for ic in 0..ws.c {
                        let c = g * ws.c + ic;
                        for (kh, kw, h, w) in win.taps(s, oh, ow) {
                            acc = acc + x.at([n, c, h, w]) * weight.at([o, ic, kh, kw]);
                        }
                    }
                    out.push(acc + bias.data[o]);
                }
            }
        }
    }
    Ok(Buffer::new(out_shape, out))
}

pub fn batch_norm<T: Scalar>(x: &Buffer<T>, params: &Params, epsilon: f64) -> Result<Buffer<T>, ExecError> {
    let gamma = param::<T>(params, "gamma")?;
    let beta = param::<T>(params, "beta")?;
    let mean = param::<T>(params, "mean")?;
    let var = param::<T>(params, "var")?;
    let eps = lit::<T>(epsilon);
    Ok(x.per_channel(|c, v| gamma.data[c] * (v - mean.data[c]) / (var.data[c] + eps).sqrt() + beta.data[c]))
}

fn relu<T: Scalar>(v: T) -> T {
    if v < T::zero() {
        T::zero()
    } else {
        v
    }
}

fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

fn softmax_c<T: Scalar>(x: &Buffer<T>) -> Buffer<T> {
    let s = x.shape;
    let mut out = x.clone();
    for n in 0..s.n {
        for h in 0..s.h {
            for w in 0..s.w {
                let idx: Vec<usize> = (0..s.c).map(|c| s.offset(n, c, h, w)).collect();
                let m = idx.iter().map(|&i| x.data[i]).fold(T::neg_infinity(), T::max);
                let e: Vec<T> = idx.iter().map(|&i| (x.data[i] - m).exp()).collect();
                let total = e.iter().fold(T::zero(), |a, &b| a + b);
                for (k, &i) in idx.iter().enumerate() {
                    out.data[i] = e[k] / total;
                }
            }
        }
    }
    out
}

fn pool<T: Scalar>(x: &Buffer<T>, e: &Edge, max: bool) -> Result<Buffer<T>, ExecError> {
    let s = x.shape;
    let (kernel, stride, padding) = match (e.attrs.kernel, e.attrs.stride, e.attrs.padding) {
        (Some(k), Some(st), Some(p)) => (k, st, p),
        _ => return Err(ExecError::new(ExecErrorKind::InternalInvariant, "pool attrs missing")),
    };
    let win = window(s, kernel, stride, padding)?;
    let out_shape = Shape::new(s.n, s.c, win.out.0, win.out.1).map_err(|e| ExecError::new(ExecErrorKind::ShapeMismatch, e.to_string()))?;
    let mut out = Vec::with_capacity(out_shape.element_count());
    for n in 0..s.n {
        for c in 0..s.c {
            for oh in 0..win.out.0 {
                for ow in 0..win.out.1 {
                    let mut taps = win.taps(s, oh, ow).map(|(_, _, h, w)| x.at([n, c, h, w]));
                    let v = if max {
                        let first = taps.next().expect("window has a tap");
                        taps.fold(first, |m, v| if v > m || v.is_nan() { v } else { m })
                    } else {
                        let (sum, count) = taps.fold((T::zero(), 0usize), |(a, k), v| (a + v, k + 1));
                        sum / lit::<T>(count as f64)
                    };
                    out.push(v);
                }
            }
        }
    }
    Ok(Buffer::new(out_shape, out))
}

fn reduce_mean_hw<T: Scalar>(x: &Buffer<T>) -> Buffer<T> {
    let s = x.shape;
    let plane = s.h * s.w;
    let data = x
        .data
        .chunks(plane)
        .map(|p| p.iter().fold(T::zero(), |a, &b| a + b) / lit::<T>(plane as f64))
        .collect();
    Buffer::new(Shape::new(s.n, s.c, 1, 1).unwrap(), data)
}

fn transpose<T: Scalar>(x: &Buffer<T>, perm: [usize; 4]) -> Buffer<T> {
    let d = x.shape.dims();
    let out_shape = Shape::from_dims([d[perm[0]], d[perm[1]], d[perm[2]], d[perm[3]]]).unwrap();
    let data = out_shape
        .indices()
        .map(|o| {
            let mut i = [0; 4];
            for a in 0..4 {
                i[perm[a]] = o[a];
            }
            x.at(i)
        })
        .collect();
    Buffer::new(out_shape, data)
}

/// Batched product over the last two axes, broadcasting N and C.
pub fn matmul<T: Scalar>(a: &Buffer<T>, b: &Buffer<T>) -> Result<Buffer<T>, ExecError> {
    let (sa, sb) = (a.shape, b.shape);
    let out_shape = crate::graph::merge_shape(0, &Merge::MatMul, &[sa, sb]).map_err(|e| ExecError::new(ExecErrorKind::ShapeMismatch, e.reason))?;
    let pick = |extent: usize, i: usize| if extent == 1 { 0 } else { i };
    let mut out = Vec::with_capacity(out_shape.element_count());
    for n in 0..out_shape.n {
        for c in 0..out_shape.c {
            for i in 0..sa.h {
                for j in 0..sb.w {
                    let mut acc = T::zero();
                    for k in 0..sa.w {
                        acc = acc + a.at([pick(sa.n, n), pick(sa.c, c), i, k]) * b.at([pick(sb.n, n), pick(sb.c, c), k, j]);
                    }
                    out.push(acc);
                }
            }
        }
    }
    Ok(Buffer::new(out_shape, out))
}

/// Evaluates the operator on edge `e`.
pub fn eval_edge<T: Scalar>(e: &Edge, x: &Buffer<T>) -> Result<Buffer<T>, ExecError> {
    use OperatorKind::*;
    let expected = op_output_shape(e, x.shape).map_err(|err| ExecError::from(err).at(e))?;
    let stride = e.attrs.stride.unwrap_or((1, 1));
    let padding = e.attrs.padding.unwrap_or(Padding::Valid);
    let out = match e.op {
        Identity | NoneOp | Dropout => Ok(x.clone()),
        Conv2D => conv2d(x, &param(&e.params, "weight")?, &param(&e.params, "bias")?, 1, stride, padding),
        FusedCBR => conv2d(x, &param(&e.params, "weight")?, &param(&e.params, "bias")?, 1, stride, padding).map(|y| y.map(relu)),
        DepthwiseConv2D => conv2d(x, &param(&e.params, "weight")?, &param(&e.params, "bias")?, x.shape.c, stride, padding),
        SeparableConv2D => {
            let dw = conv2d(x, &param(&e.params, "depthwise")?, &param(&e.params, "depthwise_bias")?, x.shape.c, stride, padding)?;
            conv2d(&dw, &param(&e.params, "pointwise")?, &param(&e.params, "bias")?, 1, (1, 1), Padding::Valid)
        }
        BatchNorm => batch_norm(x, &e.params, e.attrs.bn_epsilon.unwrap_or(crate::graph::BN_EPSILON)),
        Scale => {
            let alpha = param::<T>(&e.params, "alpha")?;
            let beta = param::<T>(&e.params, "beta")?;
            Ok(x.per_channel(|c, v| alpha.data[c] * v + beta.data[c]))
        }
        ReLU => Ok(x.map(relu)),
        Sigmoid => Ok(x.map(sigmoid)),
        Softmax => Ok(softmax_c(x)),
        MaxPool => pool(x, e, true),
        AveragePool => pool(x, e, false),
        ReduceMeanHW => Ok(reduce_mean_hw(x)),
        Transpose => Ok(transpose(x, e.attrs.permutation.unwrap_or([0, 1, 2, 3]))),
        Reshape => Ok(Buffer::new(expected, x.data.clone())),
        ScalarAdd | ScalarMul => {
            let s = lit::<T>(e.attrs.scalar.map_or(0.0, |s| s.value()));
            Ok(if e.op == ScalarAdd { x.map(|v| v + s) } else { x.map(|v| v * s) })
        }
        MatMul | Add => Err(ExecError::new(ExecErrorKind::InternalInvariant, "merge operator on an edge")),
    }
    .map_err(|err| err.at(e))?;
    if out.shape != expected {
        return Err(ExecError::new(ExecErrorKind::InternalInvariant, format!("kernel produced {} but {} was declared", out.shape, expected)).at(e));
    }
    Ok(out)
}

/// Evaluates a merge over its operands, given in edge-id order.
pub fn eval_merge<T: Scalar>(merge: &Merge, inputs: &[&Buffer<T>]) -> Result<Buffer<T>, ExecError> {
    match merge {
        Merge::MatMul => match inputs {
            [a, b] => matmul(a, b).map_err(|e| e.with_op(OperatorKind::MatMul)),
            _ => Err(ExecError::new(ExecErrorKind::ShapeMismatch, "MatMul needs two operands").with_op(OperatorKind::MatMul)),
        },
        Merge::AddBatchNorm { epsilon, params } => {
            let first = inputs[0];
            let mut acc = first.clone();
            for b in &inputs[1..] {
                if b.shape != first.shape {
                    return Err(ExecError::new(ExecErrorKind::ShapeMismatch, format!("Add operands differ: {} vs {}", first.shape, b.shape)).with_op(OperatorKind::Add));
                }
                for (a, &v) in acc.data.iter_mut().zip(&b.data) {
                    *a = *a + v;
                }
            }
            batch_norm(&acc, params, *epsilon).map_err(|e| e.with_op(OperatorKind::Add))
        }
    }
}
