//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only list of nodes. Every node is created after
//! its inputs, so the node order is a topological order and backward simply
//! walks it in reverse.

use crate::error::{TensorError, TensorResult};
use crate::kernels::{self, ConvGeom, GroupNormCache};
use crate::tensor::{strides, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Lower clamp applied to `log` inputs.
pub const LOG_FLOOR: f64 = 1e-30;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    SumAxes(Var, Vec<usize>),
    MeanAxes(Var, Vec<usize>),
    L2Norm(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    BroadcastTo(Var),
    Concat(Vec<Var>, usize),
    Gather(Var, Vec<usize>),
    Conv3d(Var, Var, ConvGeom),
    ConvTranspose3d(Var, Var, ConvGeom),
    Conv1d(Var, Var, ConvGeom),
    Linear(Var, Var, Var),
    GroupNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        cache: GroupNormCache,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) | Op::AddScalar(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) | Op::MulScalar(..) => "mul",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Square(_) => "square",
            Op::Sum(_) | Op::SumAxes(..) => "sum",
            Op::Mean(_) | Op::MeanAxes(..) => "mean",
            Op::L2Norm(_) => "l2_norm",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Reshape(_) => "reshape",
            Op::Permute(..) => "permute",
            Op::BroadcastTo(_) => "broadcast_to",
            Op::Concat(..) => "concat",
            Op::Gather(..) => "gather",
            Op::Conv3d(..) => "conv3d",
            Op::ConvTranspose3d(..) => "conv_transpose3d",
            Op::Conv1d(..) => "conv1d",
            Op::Linear(..) => "linear",
            Op::GroupNorm { .. } => "group_norm",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Names of every differentiable operation the graph records.
pub const OP_NAMES: &[&str] = &[
    "add",
    "sub",
    "mul",
    "sigmoid",
    "relu",
    "exp",
    "log",
    "square",
    "sum",
    "mean",
    "l2_norm",
    "softmax",
    "log_softmax",
    "reshape",
    "permute",
    "broadcast_to",
    "concat",
    "gather",
    "conv3d",
    "conv_transpose3d",
    "conv1d",
    "linear",
    "group_norm",
];

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fault: Option<String>,
}

fn conv_axis_len(op: &'static str, axis: &str, inn: usize, k: usize, s: usize, p: usize) -> TensorResult<usize> {
    if s == 0 {
        return Err(TensorError::Config {
            op,
            msg: format!("stride on axis {axis} must be >= 1"),
        });
    }
    if k > inn + 2 * p {
        return Err(TensorError::Dimension {
            op,
            axis: axis.to_string(),
            expected: k,
            got: inn + 2 * p,
        });
    }
    Ok((inn + 2 * p - k) / s + 1)
}

fn transposed_axis_len(op: &'static str, axis: &str, inn: usize, k: usize, s: usize, p: usize) -> TensorResult<usize> {
    if s == 0 {
        return Err(TensorError::Config {
            op,
            msg: format!("stride on axis {axis} must be >= 1"),
        });
    }
    let full = (inn - 1) * s + k;
    if full <= 2 * p {
        return Err(TensorError::Dimension {
            op,
            axis: axis.to_string(),
            expected: 2 * p + 1,
            got: full,
        });
    }
    Ok(full - 2 * p)
}

const AXES_3D: [&str; 3] = ["T", "H", "W"];

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Test fixture: scale the backward contribution of the named operation
    /// so the gradient checker can demonstrate that it catches broken rules.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, op: &str) {
        self.fault = Some(op.to_string());
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        if requires_grad {
            self.param(t)
        } else {
            self.constant(t)
        }
    }

    /// Copy of `v` cut off from the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ---- elementwise -------------------------------------------------------

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> TensorResult<(Tensor, Var, Var)> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape().to_vec(), data)?
        } else if tb.numel() == 1 {
            let y = tb.data()[0];
            ta.map(|x| f(x, y))
        } else if ta.numel() == 1 {
            let x = ta.data()[0];
            tb.map(|y| f(x, y))
        } else {
            let axis = ta
                .shape()
                .iter()
                .zip(tb.shape())
                .position(|(x, y)| x != y)
                .unwrap_or(ta.rank().min(tb.rank()));
            return Err(TensorError::Dimension {
                op,
                axis: axis.to_string(),
                expected: ta.shape().get(axis).copied().unwrap_or(0),
                got: tb.shape().get(axis).copied().unwrap_or(0),
            });
        };
        Ok((out, a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        let (out, a, b) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        let (out, a, b) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        let (out, a, b) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.nodes[a.0].value.map(|x| x + c);
        self.push(out, Op::AddScalar(a), &[a])
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.nodes[a.0].value.map(|x| x * c);
        self.push(out, Op::MulScalar(a, c), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.map(sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.map(|x| x.max(0.0));
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.map(f64::exp);
        self.push(out, Op::Exp(a), &[a])
    }

    /// Natural log with the input clamped to at least [`LOG_FLOOR`].
    pub fn log(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.map(|x| x.max(LOG_FLOOR).ln());
        self.push(out, Op::Log(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.map(|x| x * x);
        self.push(out, Op::Square(a), &[a])
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.nodes[a.0].value.sum());
        self.push(out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let out = Tensor::scalar(t.sum() / t.numel() as f64);
        self.push(out, Op::Mean(a), &[a])
    }

    fn reduce_axes(&self, op: &'static str, a: Var, axes: &[usize]) -> TensorResult<(Vec<usize>, Vec<usize>)> {
        let shape = self.shape(a);
        if axes.is_empty() {
            return Err(TensorError::Usage(format!("{op}: empty axis list")));
        }
        for &ax in axes {
            if ax >= shape.len() {
                return Err(TensorError::Rank {
                    op,
                    expected: ax + 1,
                    got: shape.len(),
                });
            }
        }
        let out_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|(i, _)| !axes.contains(i))
            .map(|(_, &d)| d)
            .collect();
        Ok((out_shape, reduce_map(shape, axes)))
    }

    /// Sum over `axes`, removing them from the shape.
    pub fn sum_axes(&mut self, a: Var, axes: &[usize]) -> TensorResult<Var> {
        let (out_shape, map) = self.reduce_axes("sum", a, axes)?;
        let n_out = out_shape.iter().product();
        let mut data = vec![0.0; n_out];
        for (x, &o) in self.nodes[a.0].value.data().iter().zip(&map) {
            data[o] += x;
        }
        let out = Tensor::new(out_shape, data)?;
        Ok(self.push(out, Op::SumAxes(a, axes.to_vec()), &[a]))
    }

    /// Mean over `axes`, removing them from the shape.
    pub fn mean_axes(&mut self, a: Var, axes: &[usize]) -> TensorResult<Var> {
        let (out_shape, map) = self.reduce_axes("mean", a, axes)?;
        let n_out: usize = out_shape.iter().product();
        let count = (self.nodes[a.0].value.numel() / n_out) as f64;
        let mut data = vec![0.0; n_out];
        for (x, &o) in self.nodes[a.0].value.data().iter().zip(&map) {
            data[o] += x;
        }
        for d in &mut data {
            *d /= count;
        }
        let out = Tensor::new(out_shape, data)?;
        Ok(self.push(out, Op::MeanAxes(a, axes.to_vec()), &[a]))
    }

    /// Frobenius norm over all elements.
    pub fn l2_norm(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.nodes[a.0].value.norm_sq().sqrt());
        self.push(out, Op::L2Norm(a), &[a])
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> TensorResult<Var> {
        let t = &self.nodes[a.0].value;
        let k = last_dim("softmax", t)?;
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(k) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Softmax(a), &[a]))
    }

    /// Log-softmax along the last axis, computed with max subtraction.
    pub fn log_softmax(&mut self, a: Var) -> TensorResult<Var> {
        let t = &self.nodes[a.0].value;
        let k = last_dim("log_softmax", t)?;
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(k) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v = *v - m - lse;
            }
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(out, Op::LogSoftmax(a), &[a]))
    }

    // ---- shape ---------------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> TensorResult<Var> {
        let out = self.nodes[a.0].value.reshape(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    /// Materialized axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> TensorResult<Var> {
        let t = &self.nodes[a.0].value;
        let map = permute_map(t.shape(), perm)?;
        let out_shape: Vec<usize> = perm.iter().map(|&p| t.shape()[p]).collect();
        let data = map.iter().map(|&i| t.data()[i]).collect();
        let out = Tensor::new(out_shape, data)?;
        Ok(self.push(out, Op::Permute(a, perm.to_vec()), &[a]))
    }

    /// Repeat size-1 axes up to `shape`; ranks must already agree.
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> TensorResult<Var> {
        let t = &self.nodes[a.0].value;
        let map = broadcast_map("broadcast_to", t.shape(), shape)?;
        let data = map.iter().map(|&i| t.data()[i]).collect();
        let out = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(out, Op::BroadcastTo(a), &[a]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> TensorResult<Var> {
        if parts.is_empty() {
            return Err(TensorError::Usage("concat of zero tensors".into()));
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(TensorError::Rank {
                op: "concat",
                expected: axis + 1,
                got: first.len(),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() {
                return Err(TensorError::Rank {
                    op: "concat",
                    expected: first.len(),
                    got: s.len(),
                });
            }
            for (i, (&x, &y)) in first.iter().zip(s).enumerate() {
                if i != axis && x != y {
                    return Err(TensorError::Dimension {
                        op: "concat",
                        axis: i.to_string(),
                        expected: x,
                        got: y,
                    });
                }
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = &self.nodes[p.0].value;
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis), parts))
    }

    /// Picks `a[i, idx[i]]` from a rank-2 tensor, giving shape `(n,)`.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> TensorResult<Var> {
        let t = &self.nodes[a.0].value;
        if t.rank() != 2 {
            return Err(TensorError::Rank {
                op: "gather",
                expected: 2,
                got: t.rank(),
            });
        }
        let (n, k) = (t.shape()[0], t.shape()[1]);
        if idx.len() != n {
            return Err(TensorError::Dimension {
                op: "gather",
                axis: "0".into(),
                expected: n,
                got: idx.len(),
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= k) {
            return Err(TensorError::Domain {
                op: "gather",
                msg: format!("index {bad} out of range for {k} columns"),
            });
        }
        let data = idx.iter().enumerate().map(|(i, &j)| t.data()[i * k + j]).collect();
        let out = Tensor::new([n], data)?;
        Ok(self.push(out, Op::Gather(a, idx.to_vec()), &[a]))
    }

    // ---- layers --------------------------------------------------------------

    fn conv_geom(
        &self,
        op: &'static str,
        input: Var,
        kernel: Var,
        stride: [usize; 3],
        pad: [usize; 3],
        transposed: bool,
    ) -> TensorResult<ConvGeom> {
        let xs = self.shape(input);
        let ks = self.shape(kernel);
        if xs.len() != 5 {
            return Err(TensorError::Rank { op, expected: 5, got: xs.len() });
        }
        if ks.len() != 5 {
            return Err(TensorError::Rank { op, expected: 5, got: ks.len() });
        }
        // A transposed convolution runs the forward geometry backwards: its
        // input plays the role of the forward output.
        let (c_out, c_in) = (ks[0], ks[1]);
        let x_channels = if transposed { c_out } else { c_in };
        if xs[1] != x_channels {
            return Err(TensorError::Dimension {
                op,
                axis: "C_in".into(),
                expected: x_channels,
                got: xs[1],
            });
        }
        let mut other = [0; 3];
        for i in 0..3 {
            other[i] = if transposed {
                transposed_axis_len(op, AXES_3D[i], xs[2 + i], ks[2 + i], stride[i], pad[i])?
            } else {
                conv_axis_len(op, AXES_3D[i], xs[2 + i], ks[2 + i], stride[i], pad[i])?
            };
        }
        let spatial = [xs[2], xs[3], xs[4]];
        let (input_dims, output_dims) = if transposed { (other, spatial) } else { (spatial, other) };
        Ok(ConvGeom {
            batch: xs[0],
            c_in,
            c_out,
            input: input_dims,
            kernel: [ks[2], ks[3], ks[4]],
            output: output_dims,
            stride,
            pad,
        })
    }

    /// 3-D cross-correlation of `input (N,Ci,T,H,W)` with `kernel (Co,Ci,kT,kH,kW)`.
    pub fn conv3d(&mut self, input: Var, kernel: Var, stride: [usize; 3], pad: [usize; 3]) -> TensorResult<Var> {
        let geom = self.conv_geom("conv3d", input, kernel, stride, pad, false)?;
        let data = geom.forward(self.value(input).data(), self.value(kernel).data());
        let [a, b, c] = geom.output;
        let out = Tensor::new([geom.batch, geom.c_out, a, b, c], data)?;
        Ok(self.push(out, Op::Conv3d(input, kernel, geom), &[input, kernel]))
    }

    /// Adjoint of [`Graph::conv3d`]: `input (N,Co,...)` is mapped back to
    /// `(N,Ci,...)` through a kernel laid out as `(Co,Ci,kT,kH,kW)`.
    pub fn conv_transpose3d(
        &mut self,
        input: Var,
        kernel: Var,
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> TensorResult<Var> {
        let geom = self.conv_geom("conv_transpose3d", input, kernel, stride, pad, true)?;
        let data = geom.scatter(self.value(input).data(), self.value(kernel).data());
        let [a, b, c] = geom.input;
        let out = Tensor::new([geom.batch, geom.c_in, a, b, c], data)?;
        Ok(self.push(out, Op::ConvTranspose3d(input, kernel, geom), &[input, kernel]))
    }

    /// 1-D cross-correlation of `input (N,Ci,L)` with `kernel (Co,Ci,k)`.
    pub fn conv1d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> TensorResult<Var> {
        let xs = self.shape(input).to_vec();
        let ks = self.shape(kernel).to_vec();
        if xs.len() != 3 {
            return Err(TensorError::Rank { op: "conv1d", expected: 3, got: xs.len() });
        }
        if ks.len() != 3 {
            return Err(TensorError::Rank { op: "conv1d", expected: 3, got: ks.len() });
        }
        if xs[1] != ks[1] {
            return Err(TensorError::Dimension {
                op: "conv1d",
                axis: "C_in".into(),
                expected: ks[1],
                got: xs[1],
            });
        }
        let len = conv_axis_len("conv1d", "L", xs[2], ks[2], stride, pad)?;
        // (N,C,L) shares its memory layout with (N,C,L,1,1).
        let geom = ConvGeom {
            batch: xs[0],
            c_in: ks[1],
            c_out: ks[0],
            input: [xs[2], 1, 1],
            kernel: [ks[2], 1, 1],
            output: [len, 1, 1],
            stride: [stride, 1, 1],
            pad: [pad, 0, 0],
        };
        let data = geom.forward(self.value(input).data(), self.value(kernel).data());
        let out = Tensor::new([xs[0], ks[0], len], data)?;
        Ok(self.push(out, Op::Conv1d(input, kernel, geom), &[input, kernel]))
    }

    /// `input (N,D_in) · weight(D_out,D_in)^T + bias(D_out)`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> TensorResult<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        let bs = self.shape(bias).to_vec();
        if xs.len() != 2 {
            return Err(TensorError::Rank { op: "linear", expected: 2, got: xs.len() });
        }
        if ws.len() != 2 {
            return Err(TensorError::Rank { op: "linear", expected: 2, got: ws.len() });
        }
        if xs[1] != ws[1] {
            return Err(TensorError::Dimension {
                op: "linear",
                axis: "D_in".into(),
                expected: ws[1],
                got: xs[1],
            });
        }
        if bs != [ws[0]] {
            return Err(TensorError::Dimension {
                op: "linear",
                axis: "D_out".into(),
                expected: ws[0],
                got: bs.first().copied().unwrap_or(0),
            });
        }
        let data = kernels::linear_forward(
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            xs[0],
            ws[1],
            ws[0],
        );
        let out = Tensor::new([xs[0], ws[0]], data)?;
        Ok(self.push(out, Op::Linear(input, weight, bias), &[input, weight, bias]))
    }

    /// Group normalization of `input (N,C,...)` with per-channel affine.
    pub fn group_norm(&mut self, input: Var, groups: usize, gamma: Var, beta: Var, eps: f64) -> TensorResult<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() < 2 {
            return Err(TensorError::Rank { op: "group_norm", expected: 2, got: xs.len() });
        }
        let c = xs[1];
        if groups == 0 || c % groups != 0 {
            return Err(TensorError::Config {
                op: "group_norm",
                msg: format!("{c} channels are not divisible into {groups} groups"),
            });
        }
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(TensorError::Dimension {
                    op: "group_norm",
                    axis: name.into(),
                    expected: c,
                    got: self.value(v).numel(),
                });
            }
        }
        let (data, cache) = kernels::group_norm_forward(
            self.value(input).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            xs[0],
            c,
            groups,
            eps,
        );
        let out = Tensor::new(xs, data)?;
        Ok(self.push(
            out,
            Op::GroupNorm {
                input,
                gamma,
                beta,
                groups,
                cache,
            },
            &[input, gamma, beta],
        ))
    }

    // ---- backward ------------------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> TensorResult<Gradients> {
        let lt = &self.nodes[loss.0].value;
        if lt.numel() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            let scale = match &self.fault {
                Some(f) if f == node.op.name() => 1.5,
                _ => 1.0,
            };
            let mut acc = Acc {
                nodes: &self.nodes,
                grads: &mut grads,
                scale,
            };
            self.backward_node(node, &gy, &mut acc);
            grads[i] = Some(gy);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|d| Tensor::new(self.nodes[i].value.shape().to_vec(), d).expect("gradient shape")))
            .collect();
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, gy: &[f64], acc: &mut Acc<'_>) {
        let val = |v: Var| &self.nodes[v.0].value;
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc.broadcast_back(*a, gy, 1.0);
                acc.broadcast_back(*b, gy, 1.0);
            }
            Op::Sub(a, b) => {
                acc.broadcast_back(*a, gy, 1.0);
                acc.broadcast_back(*b, gy, -1.0);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if acc.wants(*a) {
                    let g = elementwise_with(gy, tb);
                    acc.reduce_into(*a, g);
                }
                if acc.wants(*b) {
                    let g = elementwise_with(gy, ta);
                    acc.reduce_into(*b, g);
                }
            }
            Op::AddScalar(a) => acc.add(*a, gy.to_vec()),
            Op::MulScalar(a, c) => acc.add(*a, gy.iter().map(|g| g * c).collect()),
            Op::Sigmoid(a) => acc.add(*a, gy.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect()),
            Op::Relu(a) => {
                let x = val(*a).data();
                acc.add(*a, gy.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect())
            }
            Op::Exp(a) => acc.add(*a, gy.iter().zip(y).map(|(g, e)| g * e).collect()),
            Op::Log(a) => {
                let x = val(*a).data();
                acc.add(
                    *a,
                    gy.iter()
                        .zip(x)
                        .map(|(g, &x)| if x > LOG_FLOOR { g / x } else { 0.0 })
                        .collect(),
                )
            }
            Op::Square(a) => {
                let x = val(*a).data();
                acc.add(*a, gy.iter().zip(x).map(|(g, x)| 2.0 * g * x).collect())
            }
            Op::Sum(a) => acc.add(*a, vec![gy[0]; val(*a).numel()]),
            Op::Mean(a) => {
                let n = val(*a).numel();
                acc.add(*a, vec![gy[0] / n as f64; n])
            }
            Op::SumAxes(a, axes) | Op::MeanAxes(a, axes) => {
                let t = val(*a);
                let map = reduce_map(t.shape(), axes);
                let scale = if matches!(node.op, Op::MeanAxes(..)) {
                    (gy.len() as f64) / t.numel() as f64
                } else {
                    1.0
                };
                acc.add(*a, map.iter().map(|&o| gy[o] * scale).collect())
            }
            Op::L2Norm(a) => {
                let x = val(*a).data();
                let n = y[0];
                let g = if n > 0.0 {
                    x.iter().map(|v| gy[0] * v / n).collect()
                } else {
                    vec![0.0; x.len()]
                };
                acc.add(*a, g)
            }
            Op::Softmax(a) => {
                let k = *node.value.shape().last().expect("rank >= 1");
                let mut g = vec![0.0; y.len()];
                for ((gr, yr), out) in gy.chunks(k).zip(y.chunks(k)).zip(g.chunks_mut(k)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..k {
                        out[j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc.add(*a, g)
            }
            Op::LogSoftmax(a) => {
                let k = *node.value.shape().last().expect("rank >= 1");
                let mut g = vec![0.0; y.len()];
                for ((gr, yr), out) in gy.chunks(k).zip(y.chunks(k)).zip(g.chunks_mut(k)) {
                    let total: f64 = gr.iter().sum();
                    for j in 0..k {
                        out[j] = gr[j] - yr[j].exp() * total;
                    }
                }
                acc.add(*a, g)
            }
            Op::Reshape(a) => acc.add(*a, gy.to_vec()),
            Op::Permute(a, perm) => {
                let map = permute_map(val(*a).shape(), perm).expect("validated at construction");
                let mut g = vec![0.0; gy.len()];
                for (o, &i) in map.iter().enumerate() {
                    g[i] = gy[o];
                }
                acc.add(*a, g)
            }
            Op::BroadcastTo(a) => {
                let t = val(*a);
                let map = broadcast_map("broadcast_to", t.shape(), node.value.shape()).expect("validated at construction");
                let mut g = vec![0.0; t.numel()];
                for (o, &i) in map.iter().enumerate() {
                    g[i] += gy[o];
                }
                acc.add(*a, g)
            }
            Op::Concat(parts, axis) => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let row = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let chunk = val(p).shape()[*axis] * inner;
                    if acc.wants(p) {
                        let mut g = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            g.extend_from_slice(&gy[o * row + offset..o * row + offset + chunk]);
                        }
                        acc.add(p, g);
                    }
                    offset += chunk;
                }
            }
            Op::Gather(a, idx) => {
                let t = val(*a);
                let k = t.shape()[1];
                let mut g = vec![0.0; t.numel()];
                for (i, &j) in idx.iter().enumerate() {
                    g[i * k + j] += gy[i];
                }
                acc.add(*a, g)
            }
            Op::Conv3d(x, k, geom) | Op::Conv1d(x, k, geom) => {
                if acc.wants(*x) {
                    acc.add(*x, geom.scatter(gy, val(*k).data()));
                }
                if acc.wants(*k) {
                    acc.add(*k, geom.kernel_grad(val(*x).data(), gy));
                }
            }
            Op::ConvTranspose3d(x, k, geom) => {
                if acc.wants(*x) {
                    acc.add(*x, geom.forward(gy, val(*k).data()));
                }
                if acc.wants(*k) {
                    acc.add(*k, geom.kernel_grad(gy, val(*x).data()));
                }
            }
            Op::Linear(x, w, b) => {
                let (n, d_in) = (val(*x).shape()[0], val(*x).shape()[1]);
                let d_out = val(*w).shape()[0];
                if acc.wants(*x) {
                    let wd = val(*w).data();
                    let mut g = vec![0.0; n * d_in];
                    for i in 0..n {
                        for o in 0..d_out {
                            let go = gy[i * d_out + o];
                            if go == 0.0 {
                                continue;
                            }
                            for j in 0..d_in {
                                g[i * d_in + j] += go * wd[o * d_in + j];
                            }
                        }
                    }
                    acc.add(*x, g);
                }
                if acc.wants(*w) {
                    let xd = val(*x).data();
                    let mut g = vec![0.0; d_out * d_in];
                    for i in 0..n {
                        for o in 0..d_out {
                            let go = gy[i * d_out + o];
                            if go == 0.0 {
                                continue;
                            }
                            for j in 0..d_in {
                                g[o * d_in + j] += go * xd[i * d_in + j];
                            }
                        }
                    }
                    acc.add(*w, g);
                }
                if acc.wants(*b) {
                    let mut g = vec![0.0; d_out];
                    for i in 0..n {
                        for o in 0..d_out {
                            g[o] += gy[i * d_out + o];
                        }
                    }
                    acc.add(*b, g);
                }
            }
            Op::GroupNorm {
                input,
                gamma,
                beta,
                groups,
                cache,
            } => {
                let shape = val(*input).shape();
                let (gx, ggamma, gbeta) =
                    kernels::group_norm_backward(gy, val(*gamma).data(), cache, shape[0], shape[1], *groups);
                acc.add(*input, gx);
                acc.add(*gamma, ggamma);
                acc.add(*beta, gbeta);
            }
        }
    }
}

struct Acc<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Vec<f64>>],
    scale: f64,
}

impl Acc<'_> {
    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn add(&mut self, v: Var, g: Vec<f64>) {
        if !self.wants(v) {
            return;
        }
        let slot = &mut self.grads[v.0];
        match slot {
            Some(existing) => {
                for (e, x) in existing.iter_mut().zip(&g) {
                    *e += self.scale * x;
                }
            }
            None => {
                *slot = Some(if self.scale == 1.0 {
                    g
                } else {
                    g.into_iter().map(|x| x * self.scale).collect()
                });
            }
        }
    }

    /// `g` has the broadcast output's shape; sum it down if `v` is a scalar operand.
    fn reduce_into(&mut self, v: Var, g: Vec<f64>) {
        if self.nodes[v.0].value.numel() == 1 && g.len() != 1 {
            let s = g.iter().sum();
            self.add(v, vec![s]);
        } else {
            self.add(v, g);
        }
    }

    fn broadcast_back(&mut self, v: Var, gy: &[f64], sign: f64) {
        if !self.wants(v) {
            return;
        }
        let g = gy.iter().map(|x| sign * x).collect();
        self.reduce_into(v, g);
    }
}

/// `gy * other`, where `other` may be a scalar broadcast against `gy`.
fn elementwise_with(gy: &[f64], other: &Tensor) -> Vec<f64> {
    if other.numel() == 1 {
        let c = other.data()[0];
        gy.iter().map(|g| g * c).collect()
    } else {
        gy.iter().zip(other.data()).map(|(g, o)| g * o).collect()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn last_dim(op: &'static str, t: &Tensor) -> TensorResult<usize> {
    t.shape()
        .last()
        .copied()
        .ok_or(TensorError::Rank { op, expected: 1, got: 0 })
}

/// For each input flat index, the flat index of its reduction target.
fn reduce_map(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let out_shape: Vec<usize> = shape
        .iter()
        .enumerate()
        .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
        .collect();
    let out_strides = strides(&out_shape);
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..n {
        let o: usize = idx
            .iter()
            .zip(&out_strides)
            .enumerate()
            .map(|(i, (&x, &s))| if axes.contains(&i) { 0 } else { x * s })
            .sum();
        map.push(o);
        increment(&mut idx, shape);
    }
    map
}

/// For each output flat index of the permuted tensor, the input flat index.
fn permute_map(shape: &[usize], perm: &[usize]) -> TensorResult<Vec<usize>> {
    let mut seen = vec![false; shape.len()];
    if perm.len() != shape.len() {
        return Err(TensorError::Rank {
            op: "permute",
            expected: shape.len(),
            got: perm.len(),
        });
    }
    for &p in perm {
        if p >= shape.len() || seen[p] {
            return Err(TensorError::Usage(format!("invalid permutation {perm:?}")));
        }
        seen[p] = true;
    }
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..n {
        map.push(idx.iter().zip(perm).map(|(&x, &p)| x * in_strides[p]).sum());
        increment(&mut idx, &out_shape);
    }
    Ok(map)
}

/// For each output flat index, the input flat index it copies.
fn broadcast_map(op: &'static str, from: &[usize], to: &[usize]) -> TensorResult<Vec<usize>> {
    if from.len() != to.len() {
        return Err(TensorError::Rank {
            op,
            expected: to.len(),
            got: from.len(),
        });
    }
    for (i, (&f, &t)) in from.iter().zip(to).enumerate() {
        if f != t && f != 1 {
            return Err(TensorError::Dimension {
                op,
                axis: i.to_string(),
                expected: t,
                got: f,
            });
        }
    }
    let in_strides = strides(from);
    let n: usize = to.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; to.len()];
    for _ in 0..n {
        map.push(
            idx.iter()
                .zip(from)
                .zip(&in_strides)
                .map(|((&x, &f), &s)| if f == 1 { 0 } else { x * s })
                .sum(),
        );
        increment(&mut idx, to);
    }
    Ok(map)
}

fn increment(idx: &mut [usize], shape: &[usize]) {
    for i in (0..idx.len()).rev() {
        idx[i] += 1;
        if idx[i] < shape[i] {
            return;
        }
        idx[i] = 0;
    }
}
