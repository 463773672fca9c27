//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and enough
//! saved state to apply its backward rule. Inputs are always recorded
//! before the operations that consume them, so a single reverse sweep
//! over the node list visits each op once in a valid order.

mod attention;
mod conv;
mod elementwise;
mod linalg;
mod normalize;
mod resample;
mod shape;

pub use conv::ConvGeom;
pub use resample::ResampleMode;
pub use elementwise::MASK_SENTINEL;

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Boolean companion of [`Tensor`], used for score masks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoolTensor {
    shape: Vec<usize>,
    data: Vec<bool>,
}

impl BoolTensor {
    pub fn new(shape: &[usize], data: Vec<bool>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Contract(format!(
                "bool tensor shape {shape:?} does not hold {} values",
                data.len()
            )));
        }
        Ok(BoolTensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> bool) -> Self {
        let n = shape.iter().product();
        BoolTensor {
            shape: shape.to_vec(),
            data: (0..n).map(f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn any(&self) -> bool {
        self.data.iter().any(|&b| b)
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Clamp(Var, T, T),
    Sum(Var),
    Mean(Var),
    MeanAxis(Var, usize),
    MaxAxis(Var, usize, Vec<usize>),
    MaskedFill(Var, Rc<BoolTensor>),
    MatMul(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Narrow(Var, usize, usize),
    Concat(Vec<Var>, usize),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    MaskedSoftmax(Var, T),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        probs: Tensor<T>,
        scale: T,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Tensor<T>,
        inv_std: Vec<T>,
    },
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Resample {
        x: Var,
        mode: ResampleMode,
        argmax: Vec<usize>,
    },
}

pub(crate) struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Single-owner recording of a forward computation.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    /// Records the result of an op; it requires grad when any input does.
    pub(crate) fn record(&self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let rg = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.0].requires_grad)
        };
        self.push(value, op, rg)
    }

    /// A differentiable leaf (parameter or input under test).
    pub fn leaf(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Same value as `v`, cut off from the gradient path.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v);
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Propagates d(root)/d(node) to every leaf reachable from `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root_shape = nodes[root.0].value.shape();
        if root_shape.iter().product::<usize>() != 1 {
            return Err(Error::Contract(format!(
                "backward() needs a scalar root, got shape {root_shape:?}"
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(root_shape, T::one()));

        for i in (0..=root.0).rev() {
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            let needs = |v: Var| nodes[v.0].requires_grad;
            for (v, contribution) in backward_rule(&nodes, node, &g, &needs) {
                debug_assert!(v.0 < i, "tape order violated");
                if !nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.accumulate(&contribution),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let leaf_grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| if matches!(n.op, Op::Leaf) { g } else { None })
            .collect();
        Ok(Gradients {
            grads: leaf_grads,
            shapes,
        })
    }
}

type Contributions<T> = Vec<(Var, Tensor<T>)>;

fn backward_rule<T: Scalar>(
    nodes: &[Node<T>],
    node: &Node<T>,
    g: &Tensor<T>,
    needs: &dyn Fn(Var) -> bool,
) -> Contributions<T> {
    let val = |v: Var| -> &Tensor<T> { &nodes[v.0].value };
    let out = &*node.value;
    match &node.op {
        Op::Leaf => Vec::new(),
        Op::Add(a, b) => elementwise::add_backward(val(*a), val(*b), *a, *b, g, T::one(), needs),
        Op::Sub(a, b) => {
            elementwise::add_backward(val(*a), val(*b), *a, *b, g, -T::one(), needs)
        }
        Op::Mul(a, b) => elementwise::mul_backward(val(*a), val(*b), *a, *b, g, needs),
        Op::Scale(a, s) => vec![(*a, g.map(|x| x * *s))],
        Op::AddScalar(a) => vec![(*a, g.clone())],
        Op::Relu(a)
        | Op::Gelu(a)
        | Op::Sigmoid(a)
        | Op::Exp(a)
        | Op::Log(a)
        | Op::Abs(a)
        | Op::Clamp(a, _, _) => vec![(*a, elementwise::unary_backward(&node.op, val(*a), out, g))],
        Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), g.item()))],
        Op::Mean(a) => {
            let n = T::lit(val(*a).numel() as f64);
            vec![(*a, Tensor::full(val(*a).shape(), g.item() / n))]
        }
        Op::MeanAxis(a, axis) => vec![(*a, elementwise::mean_axis_backward(val(*a), *axis, g))],
        Op::MaxAxis(a, axis, arg) => {
            vec![(*a, elementwise::max_axis_backward(val(*a), *axis, arg, g))]
        }
        Op::MaskedFill(a, mask) => vec![(
            *a,
            Tensor::from_parts(
                g.shape().to_vec(),
                g.data()
                    .iter()
                    .zip(mask.data())
                    .map(|(&x, &m)| if m { T::zero() } else { x })
                    .collect(),
            ),
        )],
        Op::MatMul(a, b) => linalg::matmul_backward(val(*a), val(*b), *a, *b, g, needs),
        Op::Reshape(a) => vec![(*a, g.clone().reshaped(val(*a).shape()).expect("reshape"))],
        Op::Permute(a, perm) => vec![(*a, shape::permute_backward(g, perm))],
        Op::Narrow(a, dim, start) => {
            vec![(*a, shape::narrow_backward(val(*a).shape(), *dim, *start, g))]
        }
        Op::Concat(parts, dim) => shape::concat_backward(parts, |v| val(v).shape(), *dim, g),
        Op::Softmax(a, axis) => vec![(*a, normalize::softmax_backward(out, *axis, g))],
        Op::LogSoftmax(a, axis) => vec![(*a, normalize::log_softmax_backward(out, *axis, g))],
        Op::MaskedSoftmax(a, scale) => {
            let last = out.rank() - 1;
            let mut d = normalize::softmax_backward(out, last, g);
            d.data_mut().iter_mut().for_each(|x| *x *= *scale);
            vec![(*a, d)]
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            normalized,
            inv_std,
        } => normalize::layer_norm_backward(
            normalized,
            inv_std,
            val(*gamma),
            (*x, *gamma, *beta),
            g,
            needs,
        ),
        Op::Attention { q, k, v, probs, scale } => attention::attention_backward(
            (*q, val(*q)),
            (*k, val(*k)),
            (*v, val(*v)),
            probs,
            *scale,
            g,
        ),
        Op::Conv { x, w, b, geom } => {
            conv::conv_backward(val(*x), val(*w), (*x, *w, *b), geom, g, needs)
        }
        Op::Resample { x, mode, argmax } => {
            vec![(*x, resample::resample_backward(val(*x).shape(), *mode, argmax, g))]
        }
    }
}

/// Gradients of a scalar root with respect to the leaves of a tape.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`, or `None` when `v` was not reached.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`; unreachable leaves yield zeros.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}
