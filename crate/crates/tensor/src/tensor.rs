use std::cell::Cell;
use std::fmt;
use std::rc::Rc;

use crate::array::{numel, Array};
use crate::kernels::{self, ConvGeom};

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(Cell::get)
}

/// Disables graph recording on this thread until dropped.
pub struct NoGradGuard {
    prev: bool,
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|c| c.set(self.prev));
    }
}

pub fn no_grad() -> NoGradGuard {
    let prev = GRAD_ENABLED.with(|c| c.replace(false));
    NoGradGuard { prev }
}

/// Runs `f` with graph recording disabled.
pub fn without_grad<R>(f: impl FnOnce() -> R) -> R {
    let _guard = no_grad();
    f()
}

pub(crate) enum Op {
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Div(Tensor, Tensor),
    Neg(Tensor),
    Scale(Tensor, f64),
    Exp(Tensor),
    Log(Tensor),
    Sqrt(Tensor),
    SumTo(Tensor),
    BroadcastTo(Tensor),
    Reshape(Tensor),
    Transpose(Tensor),
    MatMul(Tensor, Tensor),
    Conv { x: Tensor, w: Tensor, pad: usize },
    ConvInputGrad { gy: Tensor, w: Tensor, pad: usize },
    ConvWeightGrad { x: Tensor, gy: Tensor, pad: usize },
    Gather(Tensor, Rc<[usize]>),
    ScatterAdd(Tensor, Rc<[usize]>),
}

impl Op {
    pub(crate) fn parents(&self) -> Vec<&Tensor> {
        match self {
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => vec![a, b],
            Op::Conv { x, w, .. } => vec![x, w],
            Op::ConvInputGrad { gy, w, .. } => vec![gy, w],
            Op::ConvWeightGrad { x, gy, .. } => vec![x, gy],
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sqrt(a)
            | Op::SumTo(a)
            | Op::BroadcastTo(a)
            | Op::Reshape(a)
            | Op::Transpose(a)
            | Op::Gather(a, _)
            | Op::ScatterAdd(a, _) => vec![a],
        }
    }

    fn into_parents(self, out: &mut Vec<Tensor>) {
        match self {
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => {
                out.push(a);
                out.push(b);
            }
            Op::Conv { x, w, .. } => out.extend([x, w]),
            Op::ConvInputGrad { gy, w, .. } => out.extend([gy, w]),
            Op::ConvWeightGrad { x, gy, .. } => out.extend([x, gy]),
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sqrt(a)
            | Op::SumTo(a)
            | Op::BroadcastTo(a)
            | Op::Reshape(a)
            | Op::Transpose(a)
            | Op::Gather(a, _)
            | Op::ScatterAdd(a, _) => out.push(a),
        }
    }
}

pub(crate) struct Node {
    pub(crate) id: u64,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<f64>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Option<Op>,
}

impl Drop for Node {
    // Long unrolled graphs would otherwise recurse once per node on drop.
    fn drop(&mut self) {
        let mut stack = Vec::new();
        if let Some(op) = self.op.take() {
            op.into_parents(&mut stack);
        }
        while let Some(t) = stack.pop() {
            if let Ok(mut node) = Rc::try_unwrap(t.0) {
                if let Some(op) = node.op.take() {
                    op.into_parents(&mut stack);
                }
            }
        }
    }
}

/// A node in a dynamically recorded computation graph.
///
/// Cloning is cheap (reference counted). Gradients computed by
/// [`crate::grad`] are themselves tensors, so with `create_graph` they can be
/// differentiated again.
#[derive(Clone)]
pub struct Tensor(pub(crate) Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl Tensor {
    fn leaf(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Self {
        assert_eq!(numel(&shape), data.len(), "shape {shape:?} does not match {} elements", data.len());
        Tensor(Rc::new(Node { id: next_id(), shape, data, requires_grad, op: None }))
    }

    /// A constant: never receives gradients.
    pub fn constant(shape: Vec<usize>, data: Vec<f64>) -> Self {
        Self::leaf(shape, data, false)
    }

    /// A differentiable leaf.
    pub fn variable(shape: Vec<usize>, data: Vec<f64>) -> Self {
        Self::leaf(shape, data, true)
    }

    pub fn scalar(v: f64) -> Self {
        Self::constant(vec![], vec![v])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::constant(shape.to_vec(), vec![0.0; numel(shape)])
    }

    pub fn from_array(a: &Array, requires_grad: bool) -> Self {
        Self::leaf(a.shape.clone(), a.data.clone(), requires_grad)
    }

    pub fn to_array(&self) -> Array {
        Array::new(self.0.shape.clone(), self.0.data.clone())
    }

    fn from_op(shape: Vec<usize>, data: Vec<f64>, op: Op) -> Self {
        let requires_grad = is_grad_enabled() && op.parents().iter().any(|p| p.requires_grad());
        let op = if requires_grad { Some(op) } else { None };
        Tensor(Rc::new(Node { id: next_id(), shape, data, requires_grad, op }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub(crate) fn id(&self) -> u64 {
        self.0.id
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::constant(self.0.shape.clone(), self.0.data.clone())
    }

    fn binary(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64, op: fn(Tensor, Tensor) -> Op) -> Tensor {
        let shape = kernels::broadcast_shape(self.shape(), other.shape()).unwrap_or_else(|| {
            panic!("shapes {:?} and {:?} do not broadcast", self.shape(), other.shape())
        });
        let data = kernels::zip_broadcast(self.data(), self.shape(), other.data(), other.shape(), &shape, f);
        Tensor::from_op(shape, data, op(self.clone(), other.clone()))
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.binary(other, |a, b| a + b, Op::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.binary(other, |a, b| a - b, Op::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.binary(other, |a, b| a * b, Op::Mul)
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        self.binary(other, |a, b| a / b, Op::Div)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.add(&Tensor::scalar(c))
    }

    pub fn neg(&self) -> Tensor {
        let data = self.data().iter().map(|v| -v).collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::Neg(self.clone()))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|v| v * c).collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::Scale(self.clone(), c))
    }

    pub fn exp(&self) -> Tensor {
        let data = self.data().iter().map(|v| v.exp()).collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::Exp(self.clone()))
    }

    pub fn ln(&self) -> Tensor {
        let data = self.data().iter().map(|v| v.ln()).collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::Log(self.clone()))
    }

    pub fn sqrt(&self) -> Tensor {
        let data = self.data().iter().map(|v| v.sqrt()).collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::Sqrt(self.clone()))
    }

    pub fn square(&self) -> Tensor {
        self.mul(self)
    }

    /// max(x, 0), with a zero subgradient at the kink.
    pub fn relu(&self) -> Tensor {
        let mask: Vec<f64> = self.data().iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
        self.mul(&Tensor::constant(self.shape().to_vec(), mask))
    }

    /// Sums broadcast axes away so the result has `shape`.
    pub fn sum_to(&self, shape: &[usize]) -> Tensor {
        if self.shape() == shape {
            return self.clone();
        }
        assert!(
            kernels::broadcasts_to(shape, self.shape()),
            "cannot sum {:?} down to {:?}",
            self.shape(),
            shape
        );
        let data = kernels::reduce_to(self.data(), self.shape(), shape);
        Tensor::from_op(shape.to_vec(), data, Op::SumTo(self.clone()))
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Tensor {
        if self.shape() == shape {
            return self.clone();
        }
        assert!(
            kernels::broadcasts_to(self.shape(), shape),
            "cannot broadcast {:?} to {:?}",
            self.shape(),
            shape
        );
        let data = kernels::expand(self.data(), self.shape(), shape);
        Tensor::from_op(shape.to_vec(), data, Op::BroadcastTo(self.clone()))
    }

    /// Sum over every element, as a `[]`-shaped tensor.
    pub fn sum(&self) -> Tensor {
        self.sum_to(&[]).reshape(&[])
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sums the listed axes, keeping them as size-1 dimensions.
    pub fn sum_axes_keepdim(&self, axes: &[usize]) -> Tensor {
        let mut shape = self.shape().to_vec();
        for &a in axes {
            shape[a] = 1;
        }
        self.sum_to(&shape)
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(numel(shape), self.numel(), "cannot reshape {:?} to {:?}", self.shape(), shape);
        if self.shape() == shape {
            return self.clone();
        }
        Tensor::from_op(shape.to_vec(), self.data().to_vec(), Op::Reshape(self.clone()))
    }

    /// Transpose of a 2-D tensor.
    pub fn t(&self) -> Tensor {
        let [r, c] = self.dims2();
        let data = kernels::transpose2(self.data(), r, c);
        Tensor::from_op(vec![c, r], data, Op::Transpose(self.clone()))
    }

    fn dims2(&self) -> [usize; 2] {
        match *self.shape() {
            [r, c] => [r, c],
            _ => panic!("expected a 2-D tensor, got {:?}", self.shape()),
        }
    }

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let [m, k] = self.dims2();
        let [k2, n] = other.dims2();
        assert_eq!(k, k2, "matmul inner dimensions {:?} x {:?}", self.shape(), other.shape());
        let data = kernels::matmul(self.data(), other.data(), m, k, n);
        Tensor::from_op(vec![m, n], data, Op::MatMul(self.clone(), other.clone()))
    }

    fn conv_geom(x_shape: &[usize], w_shape: &[usize], pad: usize) -> ConvGeom {
        let (&[b, c, h, wd], &[o, ci, kh, kw]) = (x_shape, w_shape) else {
            panic!("conv expects NCHW input and OIHW weight, got {x_shape:?} and {w_shape:?}");
        };
        assert_eq!(c, ci, "conv channel mismatch: input {x_shape:?}, weight {w_shape:?}");
        assert_eq!(kh, kw, "conv kernels must be square");
        assert!(h + 2 * pad >= kh && wd + 2 * pad >= kw, "kernel larger than padded input");
        ConvGeom { batch: b, in_ch: c, out_ch: o, height: h, width: wd, kernel: kh, pad }
    }

    /// Stride-1 cross-correlation of NCHW `self` with OIHW `w`, zero padding `pad`.
    pub fn conv2d(&self, w: &Tensor, pad: usize) -> Tensor {
        let g = Self::conv_geom(self.shape(), w.shape(), pad);
        let data = kernels::conv_forward(&g, self.data(), w.data());
        let shape = vec![g.batch, g.out_ch, g.out_h(), g.out_w()];
        Tensor::from_op(shape, data, Op::Conv { x: self.clone(), w: w.clone(), pad })
    }

    /// Adjoint of `conv2d` in its input: maps an output-shaped `gy` back to `x_shape`.
    pub fn conv2d_input_grad(gy: &Tensor, w: &Tensor, pad: usize, x_shape: &[usize]) -> Tensor {
        let g = Self::conv_geom(x_shape, w.shape(), pad);
        assert_eq!(gy.shape(), [g.batch, g.out_ch, g.out_h(), g.out_w()]);
        let data = kernels::conv_input_grad(&g, gy.data(), w.data());
        Tensor::from_op(x_shape.to_vec(), data, Op::ConvInputGrad { gy: gy.clone(), w: w.clone(), pad })
    }

    /// Adjoint of `conv2d` in its weight.
    pub fn conv2d_weight_grad(x: &Tensor, gy: &Tensor, pad: usize, w_shape: &[usize]) -> Tensor {
        let g = Self::conv_geom(x.shape(), w_shape, pad);
        assert_eq!(gy.shape(), [g.batch, g.out_ch, g.out_h(), g.out_w()]);
        let data = kernels::conv_weight_grad(&g, x.data(), gy.data());
        Tensor::from_op(w_shape.to_vec(), data, Op::ConvWeightGrad { x: x.clone(), gy: gy.clone(), pad })
    }

    /// `out.flat[i] = self.flat[idx[i]]`, reshaped to `shape`.
    pub fn gather(&self, idx: Rc<[usize]>, shape: &[usize]) -> Tensor {
        assert_eq!(numel(shape), idx.len());
        let data = kernels::gather(self.data(), &idx);
        Tensor::from_op(shape.to_vec(), data, Op::Gather(self.clone(), idx))
    }

    /// `out.flat[idx[i]] += self.flat[i]` into zeros of `shape`.
    pub fn scatter_add(&self, idx: Rc<[usize]>, shape: &[usize]) -> Tensor {
        assert_eq!(self.numel(), idx.len());
        let data = kernels::scatter_add(self.data(), &idx, numel(shape));
        Tensor::from_op(shape.to_vec(), data, Op::ScatterAdd(self.clone(), idx))
    }

    /// 2×2 max-pool with stride 2 on NCHW input; odd trailing rows/columns are dropped.
    pub fn max_pool2x2(&self) -> Tensor {
        let &[b, c, h, w] = self.shape() else {
            panic!("max_pool2x2 expects NCHW input, got {:?}", self.shape());
        };
        let (oh, ow) = (h / 2, w / 2);
        let x = self.data();
        let mut idx = Vec::with_capacity(b * c * oh * ow);
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let j = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if x[j] > x[best] {
                            best = j;
                        }
                    }
                    idx.push(best);
                }
            }
        }
        self.gather(idx.into(), &[b, c, oh, ow])
    }

    /// Row-wise log-softmax of a 2-D tensor.
    pub fn log_softmax(&self) -> Tensor {
        let [r, c] = self.dims2();
        let maxes: Vec<f64> = self
            .data()
            .chunks(c)
            .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let shift = Tensor::constant(vec![r, 1], maxes);
        let z = self.sub(&shift);
        let lse = z.exp().sum_to(&[r, 1]).ln();
        z.sub(&lse)
    }

    pub fn softmax(&self) -> Tensor {
        self.log_softmax().exp()
    }
}

impl std::ops::Add for &Tensor {
    type Output = Tensor;
    fn add(self, rhs: &Tensor) -> Tensor {
        Tensor::add(self, rhs)
    }
}

impl std::ops::Sub for &Tensor {
    type Output = Tensor;
    fn sub(self, rhs: &Tensor) -> Tensor {
        Tensor::sub(self, rhs)
    }
}

impl std::ops::Mul for &Tensor {
    type Output = Tensor;
    fn mul(self, rhs: &Tensor) -> Tensor {
        Tensor::mul(self, rhs)
    }
}

impl std::ops::Div for &Tensor {
    type Output = Tensor;
    fn div(self, rhs: &Tensor) -> Tensor {
        Tensor::div(self, rhs)
    }
}

impl std::ops::Neg for &Tensor {
    type Output = Tensor;
    fn neg(self) -> Tensor {
        Tensor::neg(self)
    }
}
