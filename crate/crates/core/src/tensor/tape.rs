use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// The closed set of differentiable operations.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// Broadcasting elementwise sum.
    Add,
    /// Broadcasting elementwise difference.
    Sub,
    /// Broadcasting elementwise product.
    Mul,
    /// `[m,k] × [k,n]`.
    MatMul,
    /// Input `[N,C,H,W]`, kernel `[F,C,kh,kw]`, cross-correlation.
    Conv2d {
        stride: usize,
        padding: usize,
    },
    /// Input `[N,C,H,W]`, kernel `[C,F,kh,kw]`; adjoint of `Conv2d`.
    ConvTranspose2d {
        stride: usize,
        padding: usize,
    },
    Relu,
    Sigmoid,
    /// Over axis 1 (axis 0 for rank-1 inputs).
    Softmax,
    Log,
    Exp,
    /// Mean over `axes`; empty means all axes (scalar result).
    Mean {
        axes: Vec<usize>,
    },
    /// Sum over `axes`; empty means all axes (scalar result).
    Sum {
        axes: Vec<usize>,
    },
    Reshape {
        shape: Vec<usize>,
    },
    /// Concatenation along axis 1 of any number of inputs.
    ConcatChannels,
    Scale(f64),
    /// `x ⊙ mask` with a precomputed dropout mask as second input.
    DropoutApply,
    /// Mean squared error of two equally shaped tensors.
    Mse,
    /// Mean over positions of `-Σ_c target_c · log softmax(logits)_c`, classes on axis 1.
    CrossEntropy,
    /// Identity forward, gradient scaled by `-lambda` backward.
    GradReverse {
        lambda: f64,
    },
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::MatMul => "matmul",
            Primitive::Conv2d { .. } => "conv2d",
            Primitive::ConvTranspose2d { .. } => "transposed_conv2d",
            Primitive::Relu => "relu",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Softmax => "softmax",
            Primitive::Log => "log",
            Primitive::Exp => "exp",
            Primitive::Mean { .. } => "mean",
            Primitive::Sum { .. } => "sum",
            Primitive::Reshape { .. } => "reshape",
            Primitive::ConcatChannels => "concat_channels",
            Primitive::Scale(_) => "scale",
            Primitive::DropoutApply => "dropout_apply",
            Primitive::Mse => "mse",
            Primitive::CrossEntropy => "cross_entropy",
            Primitive::GradReverse { .. } => "grad_reverse",
        }
    }
}

impl FromStr for Primitive {
    type Err = Error;

    /// Parses a primitive id; parameterised primitives get neutral defaults
    /// (stride 1, no padding, full reduction, unit scale, lambda 1).
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "add" => Primitive::Add,
            "sub" => Primitive::Sub,
            "mul" => Primitive::Mul,
            "matmul" => Primitive::MatMul,
            "conv2d" => Primitive::Conv2d {
                stride: 1,
                padding: 0,
            },
            "transposed_conv2d" => Primitive::ConvTranspose2d {
                stride: 1,
                padding: 0,
            },
            "relu" => Primitive::Relu,
            "sigmoid" => Primitive::Sigmoid,
            "softmax" => Primitive::Softmax,
            "log" => Primitive::Log,
            "exp" => Primitive::Exp,
            "mean" => Primitive::Mean { axes: Vec::new() },
            "sum" => Primitive::Sum { axes: Vec::new() },
            "concat_channels" => Primitive::ConcatChannels,
            "scale" => Primitive::Scale(1.0),
            "dropout_apply" => Primitive::DropoutApply,
            "mse" => Primitive::Mse,
            "cross_entropy" => Primitive::CrossEntropy,
            "grad_reverse" => Primitive::GradReverse { lambda: 1.0 },
            other => return Err(Error::UnknownPrimitive(other.to_string())),
        })
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

struct Node {
    op: Primitive,
    inputs: Vec<usize>,
    output: usize,
}

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Arena of values plus the ordered list of differentiable nodes.
///
/// Nodes are appended as primitives run, so the list is topologically
/// ordered by construction. A tape supports exactly one backward pass.
pub struct Tape {
    id: u64,
    values: Vec<Tensor>,
    requires_grad: Vec<bool>,
    is_leaf: Vec<bool>,
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            values: Vec::new(),
            requires_grad: Vec::new(),
            is_leaf: Vec::new(),
            nodes: Vec::new(),
            consumed: false,
        }
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, leaf: bool) -> Var {
        self.values.push(value);
        self.requires_grad.push(requires_grad);
        self.is_leaf.push(leaf);
        Var {
            tape: self.id,
            index: self.values.len() - 1,
        }
    }

    /// Records a constant (no gradient is tracked through it).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, true)
    }

    /// Records a trainable leaf whose gradient `backward` will report.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, true)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        assert_eq!(var.tape, self.id, "variable used on a foreign tape");
        &self.values[var.index]
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.requires_grad[var.index]
    }

    /// Number of recorded differentiable nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, var: Var) -> Result<usize> {
        if var.tape != self.id || var.index >= self.values.len() {
            return Err(Error::ForeignVar);
        }
        Ok(var.index)
    }

    /// Runs `op` on `inputs`, appending a node when any input requires a gradient.
    pub fn apply(&mut self, op: Primitive, inputs: &[Var]) -> Result<Var> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let idx = inputs
            .iter()
            .map(|&v| self.check(v))
            .collect::<Result<Vec<_>>>()?;
        let args: Vec<&Tensor> = idx.iter().map(|&i| &self.values[i]).collect();
        let out = forward(&op, &args)?;
        if !out.all_finite() {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        let track = idx.iter().any(|&i| self.requires_grad[i]);
        let var = self.push(out, track, false);
        if track {
            self.nodes.push(Node {
                op,
                inputs: idx,
                output: var.index,
            });
        }
        Ok(var)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul, &[a, b])
    }

    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        self.apply(Primitive::Conv2d { stride, padding }, &[x, kernel])
    }

    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        self.apply(Primitive::ConvTranspose2d { stride, padding }, &[x, kernel])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Relu, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Sigmoid, &[x])
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Softmax, &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Log, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Exp, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Mean { axes: Vec::new() }, &[x])
    }

    pub fn mean_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.apply(
            Primitive::Mean {
                axes: axes.to_vec(),
            },
            &[x],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Sum { axes: Vec::new() }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.apply(
            Primitive::Reshape {
                shape: shape.to_vec(),
            },
            &[x],
        )
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        self.apply(Primitive::ConcatChannels, parts)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.apply(Primitive::Scale(factor), &[x])
    }

    pub fn dropout_apply(&mut self, x: Var, mask: Var) -> Result<Var> {
        self.apply(Primitive::DropoutApply, &[x, mask])
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mse, &[a, b])
    }

    pub fn cross_entropy(&mut self, logits: Var, target: Var) -> Result<Var> {
        self.apply(Primitive::CrossEntropy, &[logits, target])
    }

    pub fn grad_reverse(&mut self, x: Var, lambda: f64) -> Result<Var> {
        self.apply(Primitive::GradReverse { lambda }, &[x])
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape's recording.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let li = self.check(loss)?;
        if !self.values[li].is_scalar() {
            return Err(Error::NotScalar(self.values[li].shape().to_vec()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.values.len()];
        grads[li] = Some(vec![1.0]);
        for node in self.nodes.iter().rev() {
            let Some(upstream) = grads[node.output].take() else {
                continue;
            };
            let args: Vec<&Tensor> = node.inputs.iter().map(|&i| &self.values[i]).collect();
            let out = &self.values[node.output];
            let wants: Vec<bool> = node.inputs.iter().map(|&i| self.requires_grad[i]).collect();
            let input_grads = backward_op(&node.op, &args, out, &upstream, &wants)?;
            for ((&i, g), want) in node.inputs.iter().zip(input_grads).zip(wants) {
                let (Some(g), true) = (g, want) else { continue };
                match &mut grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }

        let mut out = Vec::new();
        for i in 0..self.values.len() {
            if self.is_leaf[i] && self.requires_grad[i] {
                let shape = self.values[i].shape().to_vec();
                let g = grads[i]
                    .take()
                    .unwrap_or_else(|| vec![0.0; self.values[i].numel()]);
                let t = Tensor::from_parts(shape, g);
                if !t.all_finite() {
                    return Err(Error::NonFinite("backward".into()));
                }
                out.push((i, t));
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads: out,
        })
    }
}

/// Gradients of every trainable leaf of one tape.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<(usize, Tensor)>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        if var.tape != self.tape {
            return None;
        }
        self.grads
            .binary_search_by_key(&var.index, |(i, _)| *i)
            .ok()
            .map(|k| &self.grads[k].1)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        if var.tape != self.tape {
            return None;
        }
        let k = self
            .grads
            .binary_search_by_key(&var.index, |(i, _)| *i)
            .ok()?;
        Some(std::mem::replace(&mut self.grads[k].1, Tensor::scalar(0.0)))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn arity(op: &Primitive, n: usize) -> Result<()> {
    let ok = match op {
        Primitive::Add
        | Primitive::Sub
        | Primitive::Mul
        | Primitive::MatMul
        | Primitive::Conv2d { .. }
        | Primitive::ConvTranspose2d { .. }
        | Primitive::DropoutApply
        | Primitive::Mse
        | Primitive::CrossEntropy => n == 2,
        Primitive::ConcatChannels => n >= 1,
        _ => n == 1,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::shape(
            op.name(),
            format!("wrong number of inputs: {n}"),
        ))
    }
}

fn same_shape(op: &Primitive, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op.name(),
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn conv_geom(
    op: &Primitive,
    x: &[usize],
    k: &[usize],
    stride: usize,
    pad: usize,
) -> Result<ConvGeom> {
    if x.len() != 4 || k.len() != 4 {
        return Err(Error::shape(
            op.name(),
            format!("need 4-d input and kernel, got {x:?}, {k:?}"),
        ));
    }
    if stride == 0 {
        return Err(Error::shape(op.name(), "stride must be at least 1"));
    }
    if x[1] != k[1] {
        return Err(Error::shape(
            op.name(),
            format!("input channels {} vs kernel {}", x[1], k[1]),
        ));
    }
    let (h, w, kh, kw) = (x[2], x[3], k[2], k[3]);
    if kh > h + 2 * pad || kw > w + 2 * pad {
        return Err(Error::shape(
            op.name(),
            format!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            ),
        ));
    }
    Ok(ConvGeom {
        c: x[1],
        h,
        w,
        kh,
        kw,
        stride,
        pad,
        oh: (h + 2 * pad - kh) / stride + 1,
        ow: (w + 2 * pad - kw) / stride + 1,
    })
}

/// Geometry of a transposed convolution, expressed as the forward
/// correlation whose adjoint it is (the "image" is the transposed output).
fn conv_t_geom(x: &[usize], k: &[usize], stride: usize, pad: usize) -> Result<ConvGeom> {
    let name = "transposed_conv2d";
    if x.len() != 4 || k.len() != 4 {
        return Err(Error::shape(
            name,
            format!("need 4-d input and kernel, got {x:?}, {k:?}"),
        ));
    }
    if stride == 0 {
        return Err(Error::shape(name, "stride must be at least 1"));
    }
    if x[1] != k[0] {
        return Err(Error::shape(
            name,
            format!("input channels {} vs kernel {}", x[1], k[0]),
        ));
    }
    let (h, w, kh, kw) = (x[2], x[3], k[2], k[3]);
    let full_h = (h - 1) * stride + kh;
    let full_w = (w - 1) * stride + kw;
    if full_h <= 2 * pad || full_w <= 2 * pad {
        return Err(Error::shape(name, "padding removes the whole output"));
    }
    Ok(ConvGeom {
        c: k[1],
        h: full_h - 2 * pad,
        w: full_w - 2 * pad,
        kh,
        kw,
        stride,
        pad,
        oh: h,
        ow: w,
    })
}

fn check_axes(op: &Primitive, axes: &[usize], rank: usize) -> Result<Vec<usize>> {
    if axes.is_empty() {
        return Ok((0..rank).collect());
    }
    let mut sorted = axes.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != axes.len() || sorted.iter().any(|&a| a >= rank) {
        return Err(Error::shape(
            op.name(),
            format!("bad axes {axes:?} for rank {rank}"),
        ));
    }
    Ok(sorted)
}

/// Shape with reduced axes kept as size 1, and the shape with them dropped.
fn reduced_shapes(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let keep: Vec<usize> = shape
        .iter()
        .enumerate()
        .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
        .collect();
    let dropped = shape
        .iter()
        .enumerate()
        .filter(|(i, _)| !axes.contains(i))
        .map(|(_, &d)| d)
        .collect();
    (keep, dropped)
}

fn forward(op: &Primitive, args: &[&Tensor]) -> Result<Tensor> {
    arity(op, args.len())?;
    let x = args[0];
    Ok(match op {
        Primitive::Add | Primitive::Sub | Primitive::Mul => {
            let b = args[1];
            let shape = kernels::broadcast_shape(x.shape(), b.shape()).ok_or_else(|| {
                Error::shape(op.name(), format!("{:?} vs {:?}", x.shape(), b.shape()))
            })?;
            let f: fn(f64, f64) -> f64 = match op {
                Primitive::Add => |a, b| a + b,
                Primitive::Sub => |a, b| a - b,
                _ => |a, b| a * b,
            };
            let data =
                kernels::broadcast_binary(x.data(), x.shape(), b.data(), b.shape(), &shape, f);
            Tensor::from_parts(shape, data)
        }
        Primitive::MatMul => {
            let b = args[1];
            let (xs, bs) = (x.shape(), b.shape());
            if xs.len() != 2 || bs.len() != 2 || xs[1] != bs[0] {
                return Err(Error::shape("matmul", format!("{xs:?} x {bs:?}")));
            }
            let (m, k, n) = (xs[0], xs[1], bs[1]);
            let mut out = vec![0.0; m * n];
            kernels::gemm(m, k, n, x.data(), (k, 1), b.data(), (n, 1), 0.0, &mut out);
            Tensor::from_parts(vec![m, n], out)
        }
        Primitive::Conv2d { stride, padding } => {
            let k = args[1];
            let g = conv_geom(op, x.shape(), k.shape(), *stride, *padding)?;
            let (n, f) = (x.shape()[0], k.shape()[0]);
            let in_sz = g.c * g.h * g.w;
            let out_sz = f * g.cols();
            let mut out = vec![0.0; n * out_sz];
            let mut cols = vec![0.0; g.rows() * g.cols()];
            for b in 0..n {
                kernels::im2col(&x.data()[b * in_sz..(b + 1) * in_sz], &g, &mut cols);
                kernels::gemm(
                    f,
                    g.rows(),
                    g.cols(),
                    k.data(),
                    (g.rows(), 1),
                    &cols,
                    (g.cols(), 1),
                    0.0,
                    &mut out[b * out_sz..(b + 1) * out_sz],
                );
            }
            Tensor::from_parts(vec![n, f, g.oh, g.ow], out)
        }
        Primitive::ConvTranspose2d { stride, padding } => {
            let k = args[1];
            let g = conv_t_geom(x.shape(), k.shape(), *stride, *padding)?;
            let (n, c) = (x.shape()[0], x.shape()[1]);
            let in_sz = c * g.cols();
            let out_sz = g.c * g.h * g.w;
            let mut out = vec![0.0; n * out_sz];
            let mut cols = vec![0.0; g.rows() * g.cols()];
            for b in 0..n {
                // cols = Kᵀ · x_b with K viewed as [C, F·kh·kw]
                kernels::gemm(
                    g.rows(),
                    c,
                    g.cols(),
                    k.data(),
                    (1, g.rows()),
                    &x.data()[b * in_sz..(b + 1) * in_sz],
                    (g.cols(), 1),
                    0.0,
                    &mut cols,
                );
                kernels::col2im(&cols, &g, &mut out[b * out_sz..(b + 1) * out_sz]);
            }
            Tensor::from_parts(vec![n, g.c, g.h, g.w], out)
        }
        Primitive::Relu => x.map(|v| v.max(0.0)),
        Primitive::Sigmoid => x.map(|v| 1.0 / (1.0 + (-v).exp())),
        Primitive::Softmax => {
            Tensor::from_parts(x.shape().to_vec(), kernels::softmax(x.data(), x.shape()))
        }
        Primitive::Log => x.map(f64::ln),
        Primitive::Exp => x.map(f64::exp),
        Primitive::Mean { axes } | Primitive::Sum { axes } => {
            let axes = check_axes(op, axes, x.shape().len())?;
            let (keep, dropped) = reduced_shapes(x.shape(), &axes);
            let mut data = kernels::reduce_to_shape(x.data(), x.shape(), &keep);
            if matches!(op, Primitive::Mean { .. }) {
                let count = (x.numel() / data.len()) as f64;
                data.iter_mut().for_each(|v| *v /= count);
            }
            Tensor::from_parts(dropped, data)
        }
        Primitive::Reshape { shape } => x.reshape(shape)?,
        Primitive::ConcatChannels => {
            let first = x.shape();
            if first.len() < 2 {
                return Err(Error::shape("concat_channels", "inputs need rank >= 2"));
            }
            for a in args {
                let s = a.shape();
                if s.len() != first.len() || s[0] != first[0] || s[2..] != first[2..] {
                    return Err(Error::shape(
                        "concat_channels",
                        format!("{s:?} vs {first:?}"),
                    ));
                }
            }
            let outer = first[0];
            let inner: usize = first[2..].iter().product();
            let channels: usize = args.iter().map(|a| a.shape()[1]).sum();
            let mut data = Vec::with_capacity(outer * channels * inner);
            for o in 0..outer {
                for a in args {
                    let block = a.shape()[1] * inner;
                    data.extend_from_slice(&a.data()[o * block..(o + 1) * block]);
                }
            }
            let mut shape = first.to_vec();
            shape[1] = channels;
            Tensor::from_parts(shape, data)
        }
        Primitive::Scale(c) => x.map(|v| v * c),
        Primitive::DropoutApply => {
            same_shape(op, x, args[1])?;
            let data = x
                .data()
                .iter()
                .zip(args[1].data())
                .map(|(a, m)| a * m)
                .collect();
            Tensor::from_parts(x.shape().to_vec(), data)
        }
        Primitive::Mse => {
            same_shape(op, x, args[1])?;
            let sum: f64 = x
                .data()
                .iter()
                .zip(args[1].data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            Tensor::scalar(sum / x.numel() as f64)
        }
        Primitive::CrossEntropy => {
            same_shape(op, x, args[1])?;
            let (_, classes, _) = kernels::class_axis_layout(x.shape());
            let positions = (x.numel() / classes) as f64;
            let ls = kernels::log_softmax(x.data(), x.shape());
            let total: f64 = ls.iter().zip(args[1].data()).map(|(l, t)| -t * l).sum();
            Tensor::scalar(total / positions)
        }
        Primitive::GradReverse { lambda } => {
            if !(*lambda >= 0.0) {
                return Err(Error::invalid(format!(
                    "gradient reversal lambda {lambda} < 0"
                )));
            }
            x.clone()
        }
    })
}

/// Returns one optional gradient per input (None where not requested).
fn backward_op(
    op: &Primitive,
    args: &[&Tensor],
    out: &Tensor,
    g: &[f64],
    wants: &[bool],
) -> Result<Vec<Option<Vec<f64>>>> {
    let x = args[0];
    let want = |i: usize| wants.get(i).copied().unwrap_or(false);
    Ok(match op {
        Primitive::Add | Primitive::Sub | Primitive::Mul => {
            let b = args[1];
            let os = out.shape();
            let ga = want(0).then(|| match op {
                Primitive::Mul => {
                    let bb = kernels::expand_to_shape(b.data(), b.shape(), os);
                    let prod: Vec<f64> = g.iter().zip(&bb).map(|(g, b)| g * b).collect();
                    kernels::reduce_to_shape(&prod, os, x.shape())
                }
                _ => kernels::reduce_to_shape(g, os, x.shape()),
            });
            let gb = want(1).then(|| match op {
                Primitive::Mul => {
                    let aa = kernels::expand_to_shape(x.data(), x.shape(), os);
                    let prod: Vec<f64> = g.iter().zip(&aa).map(|(g, a)| g * a).collect();
                    kernels::reduce_to_shape(&prod, os, b.shape())
                }
                Primitive::Sub => {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    kernels::reduce_to_shape(&neg, os, b.shape())
                }
                _ => kernels::reduce_to_shape(g, os, b.shape()),
            });
            vec![ga, gb]
        }
        Primitive::MatMul => {
            let b = args[1];
            let (m, k, n) = (x.shape()[0], x.shape()[1], b.shape()[1]);
            let ga = want(0).then(|| {
                let mut ga = vec![0.0; m * k];
                // dA = dC · Bᵀ
                kernels::gemm(m, n, k, g, (n, 1), b.data(), (1, n), 0.0, &mut ga);
                ga
            });
            let gb = want(1).then(|| {
                let mut gb = vec![0.0; k * n];
                // dB = Aᵀ · dC
                kernels::gemm(k, m, n, x.data(), (1, k), g, (n, 1), 0.0, &mut gb);
                gb
            });
            vec![ga, gb]
        }
        Primitive::Conv2d { stride, padding } => {
            let k = args[1];
            let geom = conv_geom(op, x.shape(), k.shape(), *stride, *padding)?;
            let (n, f) = (x.shape()[0], k.shape()[0]);
            let in_sz = geom.c * geom.h * geom.w;
            let out_sz = f * geom.cols();
            let mut gx = want(0).then(|| vec![0.0; x.numel()]);
            let mut gk = want(1).then(|| vec![0.0; k.numel()]);
            let mut cols = vec![0.0; geom.rows() * geom.cols()];
            for b in 0..n {
                let gout = &g[b * out_sz..(b + 1) * out_sz];
                if let Some(gk) = gk.as_mut() {
                    kernels::im2col(&x.data()[b * in_sz..(b + 1) * in_sz], &geom, &mut cols);
                    // dK += dOut_b · colsᵀ
                    kernels::gemm(
                        f,
                        geom.cols(),
                        geom.rows(),
                        gout,
                        (geom.cols(), 1),
                        &cols,
                        (1, geom.cols()),
                        1.0,
                        gk,
                    );
                }
                if let Some(gx) = gx.as_mut() {
                    // dcols = Kᵀ · dOut_b
                    kernels::gemm(
                        geom.rows(),
                        f,
                        geom.cols(),
                        k.data(),
                        (1, geom.rows()),
                        gout,
                        (geom.cols(), 1),
                        0.0,
                        &mut cols,
                    );
                    kernels::col2im(&cols, &geom, &mut gx[b * in_sz..(b + 1) * in_sz]);
                }
            }
            vec![gx, gk]
        }
        Primitive::ConvTranspose2d { stride, padding } => {
            let k = args[1];
            let geom = conv_t_geom(x.shape(), k.shape(), *stride, *padding)?;
            let (n, c) = (x.shape()[0], x.shape()[1]);
            let in_sz = c * geom.cols();
            let out_sz = geom.c * geom.h * geom.w;
            let mut gx = want(0).then(|| vec![0.0; x.numel()]);
            let mut gk = want(1).then(|| vec![0.0; k.numel()]);
            let mut cols = vec![0.0; geom.rows() * geom.cols()];
            for b in 0..n {
                kernels::im2col(&g[b * out_sz..(b + 1) * out_sz], &geom, &mut cols);
                if let Some(gx) = gx.as_mut() {
                    // dx_b = K · dcols
                    kernels::gemm(
                        c,
                        geom.rows(),
                        geom.cols(),
                        k.data(),
                        (geom.rows(), 1),
                        &cols,
                        (geom.cols(), 1),
                        0.0,
                        &mut gx[b * in_sz..(b + 1) * in_sz],
                    );
                }
                if let Some(gk) = gk.as_mut() {
                    // dK += x_b · dcolsᵀ
                    kernels::gemm(
                        c,
                        geom.cols(),
                        geom.rows(),
                        &x.data()[b * in_sz..(b + 1) * in_sz],
                        (geom.cols(), 1),
                        &cols,
                        (1, geom.cols()),
                        1.0,
                        gk,
                    );
                }
            }
            vec![gx, gk]
        }
        Primitive::Relu => vec![Some(
            g.iter()
                .zip(x.data())
                .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                .collect(),
        )],
        Primitive::Sigmoid => vec![Some(
            g.iter()
                .zip(out.data())
                .map(|(g, &y)| g * y * (1.0 - y))
                .collect(),
        )],
        Primitive::Softmax => {
            let y = out.data();
            let (outer, classes, inner) = kernels::class_axis_layout(x.shape());
            let mut gx = vec![0.0; x.numel()];
            for o in 0..outer {
                let base = o * classes * inner;
                for i in 0..inner {
                    let dot: f64 = (0..classes)
                        .map(|c| g[base + c * inner + i] * y[base + c * inner + i])
                        .sum();
                    for c in 0..classes {
                        let at = base + c * inner + i;
                        gx[at] = y[at] * (g[at] - dot);
                    }
                }
            }
            vec![Some(gx)]
        }
        Primitive::Log => vec![Some(g.iter().zip(x.data()).map(|(g, v)| g / v).collect())],
        Primitive::Exp => vec![Some(g.iter().zip(out.data()).map(|(g, y)| g * y).collect())],
        Primitive::Mean { axes } | Primitive::Sum { axes } => {
            let axes = check_axes(op, axes, x.shape().len())?;
            let (keep, _) = reduced_shapes(x.shape(), &axes);
            let mut gx = kernels::expand_to_shape(g, &keep, x.shape());
            if matches!(op, Primitive::Mean { .. }) {
                let count = (x.numel() / out.numel()) as f64;
                gx.iter_mut().for_each(|v| *v /= count);
            }
            vec![Some(gx)]
        }
        Primitive::Reshape { .. } => vec![Some(g.to_vec())],
        Primitive::ConcatChannels => {
            let outer = x.shape()[0];
            let inner: usize = x.shape()[2..].iter().product();
            let total_c = out.shape()[1];
            let mut offset = 0;
            let mut grads = Vec::with_capacity(args.len());
            for (i, a) in args.iter().enumerate() {
                let ca = a.shape()[1];
                if want(i) {
                    let mut ga = Vec::with_capacity(a.numel());
                    for o in 0..outer {
                        let start = (o * total_c + offset) * inner;
                        ga.extend_from_slice(&g[start..start + ca * inner]);
                    }
                    grads.push(Some(ga));
                } else {
                    grads.push(None);
                }
                offset += ca;
            }
            grads
        }
        Primitive::Scale(c) => vec![Some(g.iter().map(|v| v * c).collect())],
        Primitive::DropoutApply => {
            let m = args[1];
            vec![
                want(0).then(|| g.iter().zip(m.data()).map(|(g, m)| g * m).collect()),
                want(1).then(|| g.iter().zip(x.data()).map(|(g, a)| g * a).collect()),
            ]
        }
        Primitive::Mse => {
            let b = args[1];
            let s = 2.0 * g[0] / x.numel() as f64;
            vec![
                want(0).then(|| {
                    x.data()
                        .iter()
                        .zip(b.data())
                        .map(|(a, b)| s * (a - b))
                        .collect()
                }),
                want(1).then(|| {
                    x.data()
                        .iter()
                        .zip(b.data())
                        .map(|(a, b)| s * (b - a))
                        .collect()
                }),
            ]
        }
        Primitive::CrossEntropy => {
            let t = args[1];
            let (outer, classes, inner) = kernels::class_axis_layout(x.shape());
            let s = g[0] / (outer * inner) as f64;
            let gl = want(0).then(|| {
                let p = kernels::softmax(x.data(), x.shape());
                let mut gl = vec![0.0; x.numel()];
                for o in 0..outer {
                    let base = o * classes * inner;
                    for i in 0..inner {
                        let tsum: f64 = (0..classes).map(|c| t.data()[base + c * inner + i]).sum();
                        for c in 0..classes {
                            let at = base + c * inner + i;
                            gl[at] = s * (p[at] * tsum - t.data()[at]);
                        }
                    }
                }
                gl
            });
            let gt = want(1).then(|| {
                kernels::log_softmax(x.data(), x.shape())
                    .into_iter()
                    .map(|l| -s * l)
                    .collect()
            });
            vec![gl, gt]
        }
        Primitive::GradReverse { lambda } => vec![Some(g.iter().map(|v| -lambda * v).collect())],
    })
}
