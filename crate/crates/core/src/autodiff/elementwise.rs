use std::rc::Rc;

use super::{BoolTensor, Contributions, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{strides, Scalar, Tensor};

/// Value written by the default masked fill. Finite so a max-subtracted
/// softmax never evaluates `inf - inf`.
pub const MASK_SENTINEL: f64 = -1e9;

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` right-aligned to `out`, zero on broadcast dims.
fn aligned_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let offset = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < offset || shape[i - offset] == 1 {
                0
            } else {
                own[i - offset]
            }
        })
        .collect()
}

/// Calls `f(out_index, a_index, b_index)` for every output element.
fn zip_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = out.len();
    let inner = out[rank - 1];
    let (ia_step, ib_step) = (sa[rank - 1], sb[rank - 1]);
    let outer: usize = out[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    let mut pos = 0;
    for _ in 0..outer {
        let mut ia = 0;
        let mut ib = 0;
        for d in 0..rank - 1 {
            ia += idx[d] * sa[d];
            ib += idx[d] * sb[d];
        }
        for k in 0..inner {
            f(pos + k, ia + k * ia_step, ib + k * ib_step);
        }
        pos += inner;
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

enum BinaryKind {
    Add,
    Sub,
    Mul,
}

fn binary<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, kind: &BinaryKind, op: &'static str) -> Result<Tensor<T>> {
    let apply = |x: T, y: T| match kind {
        BinaryKind::Add => x + y,
        BinaryKind::Sub => x - y,
        BinaryKind::Mul => x * y,
    };
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| apply(x, y)).collect();
        return Ok(Tensor::from_parts(a.shape().to_vec(), data));
    }
    let out = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| Error::dim(op, a.shape(), b.shape()))?;
    let sa = aligned_strides(a.shape(), &out);
    let sb = aligned_strides(b.shape(), &out);
    let n = out.iter().product();
    let mut data = vec![T::zero(); n];
    let (ad, bd) = (a.data(), b.data());
    zip_broadcast(&out, &sa, &sb, |i, ia, ib| data[i] = apply(ad[ia], bd[ib]));
    Ok(Tensor::from_parts(out, data))
}

/// Gradient of `a + sign * b` under broadcasting.
pub(super) fn add_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    va: Var,
    vb: Var,
    g: &Tensor<T>,
    sign: T,
    needs: &dyn Fn(Var) -> bool,
) -> Contributions<T> {
    let mut out = Vec::new();
    if a.shape() == b.shape() {
        if needs(va) {
            out.push((va, g.clone()));
        }
        if needs(vb) {
            out.push((vb, g.map(|x| x * sign)));
        }
        return out;
    }
    let sa = aligned_strides(a.shape(), g.shape());
    let sb = aligned_strides(b.shape(), g.shape());
    let mut ga = vec![T::zero(); a.numel()];
    let mut gb = vec![T::zero(); b.numel()];
    let gd = g.data();
    zip_broadcast(g.shape(), &sa, &sb, |i, ia, ib| {
        ga[ia] += gd[i];
        gb[ib] += gd[i] * sign;
    });
    if needs(va) {
        out.push((va, Tensor::from_parts(a.shape().to_vec(), ga)));
    }
    if needs(vb) {
        out.push((vb, Tensor::from_parts(b.shape().to_vec(), gb)));
    }
    out
}

pub(super) fn mul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    va: Var,
    vb: Var,
    g: &Tensor<T>,
    needs: &dyn Fn(Var) -> bool,
) -> Contributions<T> {
    let mut out = Vec::new();
    let gd = g.data();
    if a.shape() == b.shape() {
        if needs(va) {
            let d = gd.iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
            out.push((va, Tensor::from_parts(a.shape().to_vec(), d)));
        }
        if needs(vb) {
            let d = gd.iter().zip(a.data()).map(|(&x, &y)| x * y).collect();
            out.push((vb, Tensor::from_parts(b.shape().to_vec(), d)));
        }
        return out;
    }
    let sa = aligned_strides(a.shape(), g.shape());
    let sb = aligned_strides(b.shape(), g.shape());
    let mut ga = vec![T::zero(); a.numel()];
    let mut gb = vec![T::zero(); b.numel()];
    let (ad, bd) = (a.data(), b.data());
    zip_broadcast(g.shape(), &sa, &sb, |i, ia, ib| {
        ga[ia] += gd[i] * bd[ib];
        gb[ib] += gd[i] * ad[ia];
    });
    if needs(va) {
        out.push((va, Tensor::from_parts(a.shape().to_vec(), ga)));
    }
    if needs(vb) {
        out.push((vb, Tensor::from_parts(b.shape().to_vec(), gb)));
    }
    out
}

const GELU_K: f64 = 0.044715;

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    // tanh approximation
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(GELU_K);
    let half = T::lit(0.5);
    let inner = c * (x + k * x * x * x);
    let th = inner.tanh();
    let value = half * x * (T::one() + th);
    let dinner = c * (T::one() + T::lit(3.0) * k * x * x);
    let deriv = half * (T::one() + th) + half * x * (T::one() - th * th) * dinner;
    (value, deriv)
}

pub(super) fn unary_backward<T: Scalar>(op: &Op<T>, x: &Tensor<T>, y: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let gd = g.data();
    let xd = x.data();
    let yd = y.data();
    let data: Vec<T> = match op {
        Op::Relu(_) => (0..gd.len())
            .map(|i| if xd[i] > T::zero() { gd[i] } else { T::zero() })
            .collect(),
        Op::Gelu(_) => (0..gd.len()).map(|i| gd[i] * gelu_parts(xd[i]).1).collect(),
        Op::Sigmoid(_) => (0..gd.len()).map(|i| gd[i] * yd[i] * (T::one() - yd[i])).collect(),
        Op::Exp(_) => (0..gd.len()).map(|i| gd[i] * yd[i]).collect(),
        Op::Log(_) => (0..gd.len()).map(|i| gd[i] / xd[i]).collect(),
        Op::Abs(_) => (0..gd.len())
            .map(|i| {
                if xd[i] > T::zero() {
                    gd[i]
                } else if xd[i] < T::zero() {
                    -gd[i]
                } else {
                    T::zero()
                }
            })
            .collect(),
        Op::Clamp(_, lo, hi) => (0..gd.len())
            .map(|i| if xd[i] >= *lo && xd[i] <= *hi { gd[i] } else { T::zero() })
            .collect(),
        _ => unreachable!("not a unary op"),
    };
    Tensor::from_parts(x.shape().to_vec(), data)
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(super) fn mean_axis_backward<T: Scalar>(x: &Tensor<T>, axis: usize, g: &Tensor<T>) -> Tensor<T> {
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let scale = T::one() / T::lit(len as f64);
    let mut d = vec![T::zero(); x.numel()];
    for o in 0..outer {
        for k in 0..len {
            for i in 0..inner {
                d[(o * len + k) * inner + i] = g.data()[o * inner + i] * scale;
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), d)
}

pub(super) fn max_axis_backward<T: Scalar>(
    x: &Tensor<T>,
    axis: usize,
    argmax: &[usize],
    g: &Tensor<T>,
) -> Tensor<T> {
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let mut d = vec![T::zero(); x.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let j = o * inner + i;
            d[(o * len + argmax[j]) * inner + i] += g.data()[j];
        }
    }
    Tensor::from_parts(x.shape().to_vec(), d)
}

impl<T: Scalar> Tape<T> {
    fn binary_op(&self, a: Var, b: Var, kind: BinaryKind, name: &'static str) -> Result<Var> {
        let value = binary(&self.value(a), &self.value(b), &kind, name)?;
        let op = match kind {
            BinaryKind::Add => Op::Add(a, b),
            BinaryKind::Sub => Op::Sub(a, b),
            BinaryKind::Mul => Op::Mul(a, b),
        };
        Ok(self.record(value, op, &[a, b]))
    }

    /// Broadcasting addition.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_op(a, b, BinaryKind::Add, "add")
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_op(a, b, BinaryKind::Sub, "sub")
    }

    /// Broadcasting elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_op(a, b, BinaryKind::Mul, "mul")
    }

    pub fn scale(&self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x * s);
        self.record(value, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x + s);
        self.record(value, Op::AddScalar(a), &[a])
    }

    fn unary(&self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let value = self.value(a).map(f);
        self.record(value, op, &[a])
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(T::zero()))
    }

    pub fn gelu(&self, a: Var) -> Var {
        self.unary(a, Op::Gelu(a), |x| gelu_parts(x).0)
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), |x| x.exp())
    }

    pub fn log(&self, a: Var) -> Var {
        self.unary(a, Op::Log(a), |x| x.ln())
    }

    pub fn abs(&self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), |x| x.abs())
    }

    pub fn clamp(&self, a: Var, lo: T, hi: T) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.max(lo).min(hi))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.record(value, Op::Sum(a), &[a])
    }

    pub fn mean(&self, a: Var) -> Var {
        let x = self.value(a);
        let value = Tensor::scalar(x.sum() / T::lit(x.numel() as f64));
        self.record(value, Op::Mean(a), &[a])
    }

    /// Mean over `axis`, keeping it as a size-1 dim.
    pub fn mean_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        if axis >= x.rank() {
            return Err(Error::Contract(format!("axis {axis} out of range for {:?}", x.shape())));
        }
        let (outer, len, inner) = axis_split(x.shape(), axis);
        let scale = T::one() / T::lit(len as f64);
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..len {
                for i in 0..inner {
                    data[o * inner + i] += x.data()[(o * len + k) * inner + i];
                }
            }
        }
        data.iter_mut().for_each(|v| *v *= scale);
        let mut shape = x.shape().to_vec();
        shape[axis] = 1;
        Ok(self.record(Tensor::from_parts(shape, data), Op::MeanAxis(a, axis), &[a]))
    }

    /// Max over `axis`, keeping it as a size-1 dim. Ties route gradient
    /// to the first maximal entry.
    pub fn max_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        if axis >= x.rank() {
            return Err(Error::Contract(format!("axis {axis} out of range for {:?}", x.shape())));
        }
        let (outer, len, inner) = axis_split(x.shape(), axis);
        let mut data = vec![T::neg_infinity(); outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                for i in 0..inner {
                    let v = x.data()[(o * len + k) * inner + i];
                    let j = o * inner + i;
                    if v > data[j] {
                        data[j] = v;
                        arg[j] = k;
                    }
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = 1;
        Ok(self.record(Tensor::from_parts(shape, data), Op::MaxAxis(a, axis, arg), &[a]))
    }

    /// Writes `sentinel` wherever `mask` is set. Gradient is blocked at
    /// substituted entries and passes unchanged elsewhere.
    pub fn masked_fill(&self, s: Var, mask: Rc<BoolTensor>, sentinel: T) -> Result<Var> {
        let x = self.value(s);
        if x.shape() != mask.shape() {
            return Err(Error::dim("masked_fill", x.shape(), mask.shape()));
        }
        let data = x
            .data()
            .iter()
            .zip(mask.data())
            .map(|(&v, &m)| if m { sentinel } else { v })
            .collect();
        let value = Tensor::from_parts(x.shape().to_vec(), data);
        Ok(self.record(value, Op::MaskedFill(s, mask), &[s]))
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2], &[-1.0, 2.0]));
        assert_eq!(tape.value(tape.relu(x)).data(), &[0.0, 2.0]);
        let z = tape.constant(Tensor::scalar(0.0));
        assert_eq!(tape.value(tape.sigmoid(z)).item(), 0.5);
    }

    #[test]
    fn broadcast_bias_add_and_grad() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = tape.leaf(t(&[3], &[10.0, 20.0, 30.0]));
        let y = tape.add(x, b).unwrap();
        assert_eq!(tape.value(y).data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(b).data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn channel_gate_broadcast() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(&[2, 2, 3]));
        let gate = tape.leaf(t(&[2, 1, 1], &[0.5, 2.0]));
        let y = tape.mul(x, gate).unwrap();
        let v = tape.value(y);
        assert!(v.data()[..6].iter().all(|&z| z == 0.5));
        assert!(v.data()[6..].iter().all(|&z| z == 2.0));
        let g = tape.backward(tape.sum(y)).unwrap();
        assert_eq!(g.wrt(gate).data(), &[6.0, 6.0]);
    }

    #[test]
    fn incompatible_shapes_error() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::ones(&[2, 3]));
        let b = tape.constant(Tensor::ones(&[4]));
        assert!(matches!(tape.add(a, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn masked_fill_examples() {
        let tape = Tape::<f64>::new();
        let s = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let m = Rc::new(BoolTensor::new(&[2, 2], vec![false, true, false, false]).unwrap());
        let y = tape.masked_fill(s, m, MASK_SENTINEL).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, -1e9, 3.0, 4.0]);

        let none = Rc::new(BoolTensor::from_fn(&[2, 2], |_| false));
        let y = tape.masked_fill(s, none, MASK_SENTINEL).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

        let all = Rc::new(BoolTensor::from_fn(&[2, 2], |_| true));
        let y = tape.masked_fill(s, all, MASK_SENTINEL).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == -1e9));
    }

    #[test]
    fn masked_fill_blocks_gradient() {
        let tape = Tape::<f64>::new();
        let s = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let m = Rc::new(BoolTensor::new(&[3], vec![false, true, false]).unwrap());
        let y = tape.masked_fill(s, m, MASK_SENTINEL).unwrap();
        let y = tape.mul(y, y).unwrap();
        let g = tape.backward(tape.sum(y)).unwrap();
        assert_eq!(g.wrt(s).data(), &[2.0, 0.0, 6.0]);
    }

    #[test]
    fn axis_reductions() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2, 3], &[1.0, 5.0, 3.0, 4.0, 2.0, 6.0]));
        let m = tape.mean_axis(x, 0).unwrap();
        assert_eq!(tape.value(m).data(), &[2.5, 3.5, 4.5]);
        let mx = tape.max_axis(x, 1).unwrap();
        assert_eq!(tape.value(mx).shape(), &[2, 1]);
        assert_eq!(tape.value(mx).data(), &[5.0, 6.0]);
        let g = tape.backward(tape.sum(mx)).unwrap();
        assert_eq!(g.wrt(x).data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    }
}
