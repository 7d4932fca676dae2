use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

use super::kernels::{self, NormStats, Pad2d};
use super::{dim_err, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type ElemFn = Rc<dyn Fn(f64) -> f64>;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Gelu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    /// Elementwise map with a caller-supplied derivative.
    Map(Var, ElemFn),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: Pad2d,
    },
    ConvTranspose2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
    },
    Upsample(Var),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Gelu(..) => "gelu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softplus(..) => "softplus",
            Op::Exp(..) => "exp",
            Op::Map(..) => "map",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Reshape(..) => "reshape",
            Op::Permute(..) => "permute",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::LayerNorm { .. } => "layernorm",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::Upsample(..) => "upsample",
            Op::Narrow { .. } => "narrow",
            Op::Concat { .. } => "concat",
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records operations for one forward pass and replays them backwards.
///
/// Nodes are appended in execution order, so index order is a topological
/// order and the backward sweep simply walks it in reverse. A tape supports
/// exactly one backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Tensor>>>,
    consumed: Cell<bool>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.borrow().len())
            .field("consumed", &self.consumed.get())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        let value = value.check_finite(op.name())?;
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Ok(Var(nodes.len() - 1))
    }

    /// Record a leaf. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn rg(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    fn unary(&self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let out = self.value(x).map(f);
        self.push(out, op, self.rg(&[x]))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(&self.value(b))?;
        self.push(out, Op::Add(a, b), self.rg(&[a, b]))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(&self.value(b))?;
        self.push(out, Op::Sub(a, b), self.rg(&[a, b]))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(&self.value(b))?;
        self.push(out, Op::Mul(a, b), self.rg(&[a, b]))
    }

    pub fn scale(&self, x: Var, s: f64) -> Result<Var> {
        self.unary(x, Op::Scale(x, s), |v| v * s)
    }

    pub fn neg(&self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&self, x: Var, s: f64) -> Result<Var> {
        self.unary(x, Op::AddScalar(x), |v| v + s)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(&self.value(a), &self.value(b))?;
        self.push(out, Op::MatMul(a, b), self.rg(&[a, b]))
    }

    /// `x @ w + b` with `w: [in, out]` and `b: [out]`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    pub fn gelu(&self, x: Var) -> Result<Var> {
        self.unary(x, Op::Gelu(x), kernels::gelu)
    }

    pub fn sigmoid(&self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sigmoid(x), kernels::sigmoid)
    }

    pub fn softplus(&self, x: Var) -> Result<Var> {
        self.unary(x, Op::Softplus(x), kernels::softplus)
    }

    pub fn exp(&self, x: Var) -> Result<Var> {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    /// Elementwise `f` whose derivative is `df`. The backward rule trusts
    /// `df`; this is how test harnesses inject custom or faulty rules.
    pub fn map(
        &self,
        x: Var,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64) -> f64 + 'static,
    ) -> Result<Var> {
        self.unary(x, Op::Map(x, Rc::new(df)), f)
    }

    pub fn sum(&self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), self.rg(&[x]))
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let m = t.sum() / t.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean(x), self.rg(&[x]))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        self.push(out, Op::Reshape(x), self.rg(&[x]))
    }

    pub fn permute(&self, x: Var, axes: &[usize]) -> Result<Var> {
        let out = kernels::permute(&self.value(x), axes)?;
        self.push(out, Op::Permute(x, axes.to_vec()), self.rg(&[x]))
    }

    /// Swap the last two axes.
    pub fn transpose(&self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(dim_err("transpose", "rank < 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let out = kernels::softmax(&self.value(x), axis)?;
        self.push(out, Op::Softmax(x, axis), self.rg(&[x]))
    }

    pub fn log_softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let out = kernels::log_softmax(&self.value(x), axis)?;
        self.push(out, Op::LogSoftmax(x, axis), self.rg(&[x]))
    }

    /// Layer norm over the last axis with affine `gamma`, `beta`.
    pub fn layernorm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (out, stats) =
            kernels::layernorm(&self.value(x), &self.value(gamma), &self.value(beta), eps)?;
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            },
            self.rg(&[x, gamma, beta]),
        )
    }

    pub fn conv2d(
        &self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        self.conv2d_padded(input, kernel, bias, stride, Pad2d::uniform(padding))
    }

    pub fn conv2d_padded(
        &self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: Pad2d,
    ) -> Result<Var> {
        let bias_val = bias.map(|b| self.value(b));
        let out = kernels::conv2d(
            &self.value(input),
            &self.value(kernel),
            bias_val.as_deref(),
            stride,
            pad,
        )?;
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                pad,
            },
            self.rg(&deps),
        )
    }

    pub fn conv_transpose2d(
        &self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
    ) -> Result<Var> {
        let bias_val = bias.map(|b| self.value(b));
        let out = kernels::conv_transpose2d(
            &self.value(input),
            &self.value(kernel),
            bias_val.as_deref(),
            stride,
        )?;
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        self.push(
            out,
            Op::ConvTranspose2d {
                input,
                kernel,
                bias,
                stride,
            },
            self.rg(&deps),
        )
    }

    pub fn upsample_bilinear(&self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let out = kernels::upsample_bilinear(&self.value(x), out_h, out_w)?;
        self.push(out, Op::Upsample(x), self.rg(&[x]))
    }

    pub fn narrow(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = kernels::narrow(&self.value(x), axis, start, len)?;
        self.push(out, Op::Narrow { x, axis, start }, self.rg(&[x]))
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let vals: Vec<Rc<Tensor>> = parts.iter().map(|&p| self.value(p)).collect();
        let refs: Vec<&Tensor> = vals.iter().map(|v| v.as_ref()).collect();
        let out = kernels::concat(&refs, axis)?;
        self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            self.rg(parts),
        )
    }

    /// Reverse sweep from a scalar output. Gradients are then available via
    /// [`Tape::grad`]. A second call fails with [`TensorError::BackwardTwice`].
    pub fn backward(&self, output: Var) -> Result<()> {
        if self.consumed.get() {
            return Err(TensorError::BackwardTwice);
        }
        let nodes = self.nodes.borrow();
        let out_len = nodes[output.0].value.len();
        if out_len != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                nodes[output.0].value.shape()
            )));
        }
        self.consumed.set(true);
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[output.0] = Some(Tensor::from_parts(
            nodes[output.0].value.shape().to_vec(),
            vec![1.0],
        ));
        for i in (0..=output.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let contribs = backward_rule(&nodes, node, &g)?;
            for (v, dg) in contribs {
                if !nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(dg.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(dg),
                }
            }
            // keep gradients of leaves for later inspection
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        *self.grads.borrow_mut() = grads;
        Ok(())
    }

    /// Gradient of the backward output with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads.borrow().get(v.0).cloned().flatten()
    }
}

fn val(nodes: &[Node], v: Var) -> &Tensor {
    &nodes[v.0].value
}

fn elementwise(x: &Tensor, g: &Tensor, df: impl Fn(f64) -> f64) -> Tensor {
    let data = x.data().iter().zip(g.data()).map(|(&x, &g)| g * df(x)).collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

fn backward_rule(nodes: &[Node], node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
    use kernels::reduce_to_shape as reduce;
    let out = &node.value;
    Ok(match &node.op {
        Op::Leaf => vec![],
        Op::Add(a, b) => vec![
            (*a, reduce(g, val(nodes, *a).shape())),
            (*b, reduce(g, val(nodes, *b).shape())),
        ],
        Op::Sub(a, b) => vec![
            (*a, reduce(g, val(nodes, *a).shape())),
            (*b, reduce(&g.scale(-1.0), val(nodes, *b).shape())),
        ],
        Op::Mul(a, b) => {
            let (va, vb) = (val(nodes, *a), val(nodes, *b));
            let ga = g.mul(vb)?;
            let gb = g.mul(va)?;
            vec![(*a, reduce(&ga, va.shape())), (*b, reduce(&gb, vb.shape()))]
        }
        Op::Scale(x, s) => vec![(*x, g.scale(*s))],
        Op::AddScalar(x) => vec![(*x, g.clone())],
        Op::MatMul(a, b) => {
            let (da, db) = kernels::matmul_backward(val(nodes, *a), val(nodes, *b), g)?;
            vec![(*a, da), (*b, db)]
        }
        Op::Gelu(x) => vec![(*x, elementwise(val(nodes, *x), g, kernels::gelu_grad))],
        Op::Sigmoid(x) => {
            let data = out.data().iter().zip(g.data()).map(|(&y, &g)| g * y * (1.0 - y)).collect();
            vec![(*x, Tensor::from_parts(out.shape().to_vec(), data))]
        }
        Op::Softplus(x) => vec![(*x, elementwise(val(nodes, *x), g, kernels::sigmoid))],
        Op::Exp(x) => {
            let data = out.data().iter().zip(g.data()).map(|(&y, &g)| g * y).collect();
            vec![(*x, Tensor::from_parts(out.shape().to_vec(), data))]
        }
        Op::Map(x, df) => vec![(*x, elementwise(val(nodes, *x), g, |v| df(v)))],
        Op::Sum(x) => {
            let shape = val(nodes, *x).shape();
            vec![(*x, Tensor::full(shape, g.item()))]
        }
        Op::Mean(x) => {
            let t = val(nodes, *x);
            vec![(*x, Tensor::full(t.shape(), g.item() / t.len() as f64))]
        }
        Op::Reshape(x) => vec![(*x, g.reshape(val(nodes, *x).shape())?)],
        Op::Permute(x, axes) => {
            vec![(*x, kernels::permute(g, &kernels::inverse_permutation(axes))?)]
        }
        Op::Softmax(x, axis) => vec![(*x, kernels::softmax_backward(out, g, *axis))],
        Op::LogSoftmax(x, axis) => vec![(*x, kernels::log_softmax_backward(out, g, *axis))],
        Op::LayerNorm {
            x,
            gamma,
            beta,
            stats,
        } => {
            let (dx, dg, db) = kernels::layernorm_backward(stats, val(nodes, *gamma), g);
            vec![(*x, dx), (*gamma, dg), (*beta, db)]
        }
        Op::Conv2d {
            input,
            kernel,
            bias,
            stride,
            pad,
        } => {
            let (di, dk, db) =
                kernels::conv2d_backward(val(nodes, *input), val(nodes, *kernel), *stride, *pad, g)?;
            let mut v = vec![(*input, di), (*kernel, dk)];
            if let Some(b) = bias {
                v.push((*b, db));
            }
            v
        }
        Op::ConvTranspose2d {
            input,
            kernel,
            bias,
            stride,
        } => {
            let (di, dk, db) = kernels::conv_transpose2d_backward(
                val(nodes, *input),
                val(nodes, *kernel),
                *stride,
                g,
            )?;
            let mut v = vec![(*input, di), (*kernel, dk)];
            if let Some(b) = bias {
                v.push((*b, db));
            }
            v
        }
        Op::Upsample(x) => vec![(*x, kernels::upsample_bilinear_backward(val(nodes, *x).shape(), g))],
        Op::Narrow { x, axis, start } => {
            vec![(*x, kernels::narrow_backward(val(nodes, *x).shape(), *axis, *start, g))]
        }
        Op::Concat { parts, axis } => {
            let mut start = 0;
            let mut v = Vec::with_capacity(parts.len());
            for p in parts {
                let len = val(nodes, *p).shape()[*axis];
                v.push((*p, kernels::narrow(g, *axis, start, len)?));
                start += len;
            }
            v
        }
    })
}
