use std::rc::Rc;

use super::{BoolTensor, Contributions, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn split<T: Scalar>(x: &Tensor<T>, axis: usize) -> (usize, usize, usize) {
    let s = x.shape();
    (s[..axis].iter().product(), s[axis], s[axis + 1..].iter().product())
}

/// Max-subtracted softmax of one strided slice, written into `out`.
#[inline]
fn softmax_slice<T: Scalar>(x: &[T], out: &mut [T], base: usize, len: usize, stride: usize) {
    let mut m = T::neg_infinity();
    for k in 0..len {
        m = m.max(x[base + k * stride]);
    }
    let mut total = T::zero();
    for k in 0..len {
        let e = (x[base + k * stride] - m).exp();
        out[base + k * stride] = e;
        total += e;
    }
    for k in 0..len {
        out[base + k * stride] = out[base + k * stride] / total;
    }
}

/// Eight-lane reduction so the loop vectorises.
#[inline]
fn reduce8<T: Scalar>(xs: &[T], init: T, f: impl Fn(T, T) -> T) -> T {
    let mut lanes = [init; 8];
    let mut chunks = xs.chunks_exact(8);
    for c in &mut chunks {
        for (l, &v) in lanes.iter_mut().zip(c) {
            *l = f(*l, v);
        }
    }
    let tail = chunks.remainder().iter().fold(init, |a, &v| f(a, v));
    lanes.iter().fold(tail, |a, &v| f(a, v))
}

#[inline]
pub(super) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: T = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            lanes[k] += x[k] * y[k];
        }
    }
    lanes.iter().fold(tail, |s, &v| s + v)
}

/// Softmax of `scale * x` over one contiguous row. Masked entries take the
/// sentinel, whose exponential underflows to zero against any finite
/// unmasked maximum, so they are written as zero directly. An empty `mask`
/// masks nothing; a fully masked row stays zero.
pub(super) fn masked_row<T: Scalar>(x: &[T], mask: &[bool], scale: T, out: &mut [T]) {
    let low = T::neg_infinity();
    if mask.is_empty() {
        out.iter_mut().zip(x).for_each(|(o, &v)| *o = v * scale);
    } else {
        for ((o, &v), &b) in out.iter_mut().zip(x).zip(mask) {
            *o = if b { low } else { v * scale };
        }
    }
    let m = reduce8(out, low, |a, b| if b > a { b } else { a });
    if m == low {
        out.iter_mut().for_each(|o| *o = T::zero());
        return;
    }
    let floor = T::lit(-1e30);
    out.iter_mut().for_each(|o| *o = if *o > floor { *o - m } else { floor });
    T::exp_in_place(out);
    let total = reduce8(out, T::zero(), |a, b| a + b);
    let inv = T::one() / total;
    out.iter_mut().for_each(|o| *o *= inv);
}

fn softmax_forward<T: Scalar>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, len, inner) = split(x, axis);
    let mut out = vec![T::zero(); x.numel()];
    for o in 0..outer {
        for i in 0..inner {
            softmax_slice(x.data(), &mut out, o * len * inner + i, len, inner);
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

pub(super) fn softmax_backward<T: Scalar>(y: &Tensor<T>, axis: usize, g: &Tensor<T>) -> Tensor<T> {
    let (outer, len, inner) = split(y, axis);
    let (yd, gd) = (y.data(), g.data());
    let mut d = vec![T::zero(); y.numel()];
    if inner == 1 {
        for ((ys, gs), ds) in yd.chunks_exact(len).zip(gd.chunks_exact(len)).zip(d.chunks_exact_mut(len)) {
            let dot: T = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum();
            for ((o, &a), &b) in ds.iter_mut().zip(ys).zip(gs) {
                *o = a * (b - dot);
            }
        }
        return Tensor::from_parts(y.shape().to_vec(), d);
    }
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = T::zero();
            for k in 0..len {
                let j = base + k * inner;
                dot += gd[j] * yd[j];
            }
            for k in 0..len {
                let j = base + k * inner;
                d[j] = yd[j] * (gd[j] - dot);
            }
        }
    }
    Tensor::from_parts(y.shape().to_vec(), d)
}

pub(super) fn log_softmax_backward<T: Scalar>(y: &Tensor<T>, axis: usize, g: &Tensor<T>) -> Tensor<T> {
    let (outer, len, inner) = split(y, axis);
    let (yd, gd) = (y.data(), g.data());
    let mut d = vec![T::zero(); y.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let total: T = (0..len).map(|k| gd[base + k * inner]).sum();
            for k in 0..len {
                let j = base + k * inner;
                d[j] = gd[j] - yd[j].exp() * total;
            }
        }
    }
    Tensor::from_parts(y.shape().to_vec(), d)
}

pub(super) fn layer_norm_backward<T: Scalar>(
    normalized: &Tensor<T>,
    inv_std: &[T],
    gamma: &Tensor<T>,
    (vx, vgamma, vbeta): (Var, Var, Var),
    g: &Tensor<T>,
    needs: &dyn Fn(Var) -> bool,
) -> Contributions<T> {
    let c = gamma.numel();
    let rows = normalized.numel() / c;
    let (xh, gd, gam) = (normalized.data(), g.data(), gamma.data());
    let mut dx = vec![T::zero(); normalized.numel()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let cn = T::lit(c as f64);
    for r in 0..rows {
        let row = r * c..(r + 1) * c;
        let (xr, gr) = (&xh[row.clone()], &gd[row.clone()]);
        let mut mean_d = T::zero();
        let mut mean_dx = T::zero();
        for k in 0..c {
            let dxh = gr[k] * gam[k];
            mean_d += dxh;
            mean_dx += dxh * xr[k];
            dgamma[k] += gr[k] * xr[k];
            dbeta[k] += gr[k];
        }
        mean_d = mean_d / cn;
        mean_dx = mean_dx / cn;
        for k in 0..c {
            dx[r * c + k] = inv_std[r] * (gr[k] * gam[k] - mean_d - xr[k] * mean_dx);
        }
    }
    let mut out = Vec::new();
    if needs(vx) {
        out.push((vx, Tensor::from_parts(normalized.shape().to_vec(), dx)));
    }
    if needs(vgamma) {
        out.push((vgamma, Tensor::from_parts(vec![c], dgamma)));
    }
    if needs(vbeta) {
        out.push((vbeta, Tensor::from_parts(vec![c], dbeta)));
    }
    out
}

impl<T: Scalar> Tape<T> {
    pub fn softmax(&self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        if axis >= x.rank() {
            return Err(Error::Contract(format!("softmax axis {axis} out of range for {:?}", x.shape())));
        }
        Ok(self.record(softmax_forward(&x, axis), Op::Softmax(a, axis), &[a]))
    }

    pub fn log_softmax(&self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        if axis >= x.rank() {
            return Err(Error::Contract(format!("log_softmax axis {axis} out of range for {:?}", x.shape())));
        }
        let (outer, len, inner) = split(&x, axis);
        let xd = x.data();
        let mut out = vec![T::zero(); x.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let m = (0..len).map(|k| xd[base + k * inner]).fold(T::neg_infinity(), T::max);
                let lse = m + (0..len).map(|k| (xd[base + k * inner] - m).exp()).sum::<T>().ln();
                for k in 0..len {
                    out[base + k * inner] = xd[base + k * inner] - lse;
                }
            }
        }
        Ok(self.record(Tensor::from_parts(x.shape().to_vec(), out), Op::LogSoftmax(a, axis), &[a]))
    }

    /// Row softmax over the last axis of `scale * s`, with masked entries
    /// replaced by the sentinel first. Rows whose entries are all masked
    /// produce zeros. Numerically identical to `scale`, `masked_fill`,
    /// `softmax` and a zeroing of fully masked rows applied in sequence.
    pub fn masked_softmax(&self, s: Var, mask: Option<Rc<BoolTensor>>, scale: T) -> Result<Var> {
        let x = self.value(s);
        if let Some(m) = &mask {
            if m.shape() != x.shape() {
                return Err(Error::dim("masked_softmax", x.shape(), m.shape()));
            }
        }
        let cols = *x.shape().last().expect("rank >= 1");
        let mut out = vec![T::zero(); x.numel()];
        for (r, (xs, ys)) in x.data().chunks_exact(cols).zip(out.chunks_exact_mut(cols)).enumerate() {
            match &mask {
                Some(m) => masked_row(xs, &m.data()[r * cols..(r + 1) * cols], scale, ys),
                None => masked_row(xs, &[], scale, ys),
            }
        }
        let value = Tensor::from_parts(x.shape().to_vec(), out);
        Ok(self.record(value, Op::MaskedSoftmax(s, scale), &[s]))
    }

    /// Layer normalisation over the last dim with population variance.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let c = *xv.shape().last().expect("rank >= 1");
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(Error::dim("layer_norm", xv.shape(), gv.shape()));
        }
        let rows = xv.numel() / c;
        let cn = T::lit(c as f64);
        let mut normalized = vec![T::zero(); xv.numel()];
        let mut out = vec![T::zero(); xv.numel()];
        let mut inv_std = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &xv.data()[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() / cn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cn;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for k in 0..c {
                let nh = (row[k] - mean) * is;
                normalized[r * c + k] = nh;
                out[r * c + k] = nh * gv.data()[k] + bv.data()[k];
            }
        }
        let shape = xv.shape().to_vec();
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            normalized: Tensor::from_parts(shape.clone(), normalized),
            inv_std,
        };
        Ok(self.record(Tensor::from_parts(shape, out), op, &[x, gamma, beta]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row(tape: &Tape<f64>, v: &[f64]) -> Var {
        tape.constant(Tensor::new(&[v.len()], v.to_vec()).unwrap())
    }

    #[test]
    fn softmax_examples() {
        let tape = Tape::new();
        let y = tape.softmax(row(&tape, &[0.0, 0.0, 0.0]), 0).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = tape.softmax(row(&tape, &[0.0, 2f64.ln()]), 0).unwrap();
        let v = tape.value(y);
        assert!((v.data()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((v.data()[1] - 2.0 / 3.0).abs() < 1e-15);
        let y = tape.softmax(row(&tape, &[2.0, 2.0 - 1e9]), 0).unwrap();
        let v = tape.value(y);
        assert!((v.data()[0] - 1.0).abs() <= 1e-12);
        assert!(v.data()[1].abs() <= 1e-12);
    }

    #[test]
    fn softmax_along_leading_axis() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[3, 2], |i| i as f64 * 0.3));
        let y = tape.value(tape.softmax(x, 0).unwrap());
        for col in 0..2 {
            let s: f64 = (0..3).map(|r| y.data()[r * 2 + col]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_examples() {
        let tape = Tape::<f64>::new();
        let ones = tape.constant(Tensor::ones(&[2]));
        let zeros = tape.constant(Tensor::zeros(&[2]));
        let y = tape.layer_norm(row(&tape, &[1.0, 3.0]), ones, zeros, 0.0).unwrap();
        assert_eq!(tape.value(y).data(), &[-1.0, 1.0]);

        let ones3 = tape.constant(Tensor::ones(&[3]));
        let zeros3 = tape.constant(Tensor::zeros(&[3]));
        let y = tape.layer_norm(row(&tape, &[5.0, 5.0, 5.0]), ones3, zeros3, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0]);

        let sevens = tape.constant(Tensor::full(&[3], 7.0));
        let y = tape.layer_norm(row(&tape, &[1.0, -4.0, 9.0]), zeros3, sevens, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[7.0, 7.0, 7.0]);
    }

    #[test]
    fn masked_softmax_all_masked_row_is_zero() {
        let tape = Tape::<f64>::new();
        let s = tape.leaf(Tensor::from_fn(&[2, 3], |i| i as f64));
        let m = Rc::new(BoolTensor::new(&[2, 3], vec![true, true, true, false, true, false]).unwrap());
        let p = tape.masked_softmax(s, Some(m), 1.0).unwrap();
        let v = tape.value(p);
        assert_eq!(&v.data()[..3], &[0.0, 0.0, 0.0]);
        assert_eq!(v.data()[4], 0.0);
        assert!((v.data()[3] + v.data()[5] - 1.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one_and_shift_invariant(
            xs in proptest::collection::vec(-30.0f64..30.0, 1..12),
            c in -100.0f64..100.0,
        ) {
            let tape = Tape::<f64>::new();
            let a = row(&tape, &xs);
            let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
            let b = row(&tape, &shifted);
            let ya = tape.value(tape.softmax(a, 0).unwrap());
            let yb = tape.value(tape.softmax(b, 0).unwrap());
            prop_assert!((ya.sum() - 1.0).abs() <= 1e-6);
            prop_assert!(ya.max_abs_diff(&yb) <= 1e-6);
        }

        #[test]
        fn softmax_is_monotone(xs in proptest::collection::vec(-10.0f64..10.0, 2..8)) {
            let tape = Tape::<f64>::new();
            let y = tape.value(tape.softmax(row(&tape, &xs), 0).unwrap());
            for i in 0..xs.len() {
                for j in 0..xs.len() {
                    if xs[i] < xs[j] {
                        prop_assert!(y.data()[i] <= y.data()[j]);
                    }
                }
            }
        }
    }
}
