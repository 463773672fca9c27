//! Fused scaled dot-product attention for one head.
//!
//! Works row by row on transposed keys and values so every inner loop runs
//! over a contiguous key axis. Only the attention weights are kept for the
//! backward pass.

use std::rc::Rc;

use super::normalize::{dot, masked_row};
use super::{BoolTensor, Contributions, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn transpose<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

#[inline]
fn axpy<T: Scalar>(y: &mut [T], a: T, x: &[T]) {
    y.iter_mut().zip(x).for_each(|(y, &x)| *y += a * x);
}

pub(super) fn attention_backward<T: Scalar>(
    q: (Var, &Tensor<T>),
    k: (Var, &Tensor<T>),
    v: (Var, &Tensor<T>),
    probs: &Tensor<T>,
    scale: T,
    g: &Tensor<T>,
) -> Contributions<T> {
    let (n, d) = (q.1.shape()[0], q.1.shape()[1]);
    let (m, e) = (v.1.shape()[0], v.1.shape()[1]);
    let kt = transpose(k.1.data(), m, d);
    let vt = transpose(v.1.data(), m, e);
    let (qd, gd) = (q.1.data(), g.data());
    let mut dq = vec![T::zero(); n * d];
    let mut dkt = vec![T::zero(); d * m];
    let mut dvt = vec![T::zero(); e * m];
    let mut ds = vec![T::zero(); m];
    for i in 0..n {
        let p = &probs.data()[i * m..(i + 1) * m];
        let gi = &gd[i * e..(i + 1) * e];
        ds.iter_mut().for_each(|x| *x = T::zero());
        for c in 0..e {
            axpy(&mut ds, gi[c], &vt[c * m..(c + 1) * m]);
            axpy(&mut dvt[c * m..(c + 1) * m], gi[c], p);
        }
        let centre = dot(p, &ds);
        ds.iter_mut().zip(p).for_each(|(s, &p)| *s = p * (*s - centre) * scale);
        for c in 0..d {
            dq[i * d + c] = dot(&ds, &kt[c * m..(c + 1) * m]);
            axpy(&mut dkt[c * m..(c + 1) * m], qd[i * d + c], &ds);
        }
    }
    vec![
        (q.0, Tensor::from_parts(vec![n, d], dq)),
        (k.0, Tensor::from_parts(vec![m, d], transpose(&dkt, d, m))),
        (v.0, Tensor::from_parts(vec![m, e], transpose(&dvt, e, m))),
    ]
}

impl<T: Scalar> Tape<T> {
    /// `softmax(scale * q kᵀ) v` for `q: [N, d]`, `k: [M, d]`, `v: [M, e]`.
    /// Masked score entries get zero weight; a query whose keys are all
    /// masked yields a zero row.
    pub fn attention(&self, q: Var, k: Var, v: Var, mask: Option<Rc<BoolTensor>>, scale: T) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let ok = qv.rank() == 2
            && kv.rank() == 2
            && vv.rank() == 2
            && qv.shape()[1] == kv.shape()[1]
            && kv.shape()[0] == vv.shape()[0];
        if !ok {
            return Err(Error::dim("attention", qv.shape(), kv.shape()));
        }
        let (n, d) = (qv.shape()[0], qv.shape()[1]);
        let (m, e) = (vv.shape()[0], vv.shape()[1]);
        if let Some(mk) = &mask {
            if mk.shape() != [n, m] {
                return Err(Error::dim("attention", &[n, m], mk.shape()));
            }
        }
        let kt = transpose(kv.data(), m, d);
        let vt = transpose(vv.data(), m, e);
        let mut probs = vec![T::zero(); n * m];
        let mut out = vec![T::zero(); n * e];
        let mut s = vec![T::zero(); m];
        for i in 0..n {
            s.iter_mut().for_each(|x| *x = T::zero());
            for c in 0..d {
                axpy(&mut s, qv.data()[i * d + c], &kt[c * m..(c + 1) * m]);
            }
            let bits = mask.as_ref().map_or(&[][..], |mk| &mk.data()[i * m..(i + 1) * m]);
            let p = &mut probs[i * m..(i + 1) * m];
            masked_row(&s, bits, scale, p);
            for c in 0..e {
                out[i * e + c] = dot(p, &vt[c * m..(c + 1) * m]);
            }
        }
        let op = Op::Attention {
            q,
            k,
            v,
            probs: Tensor::from_parts(vec![n, m], probs),
            scale,
        };
        Ok(self.record(Tensor::from_parts(vec![n, e], out), op, &[q, k, v]))
    }

    /// Weights kept by an [`attention`](Self::attention) node.
    pub fn attention_weights(&self, v: Var) -> Option<Tensor<T>> {
        match &self.nodes.borrow()[v.index()].op {
            Op::Attention { probs, .. } => Some(probs.clone()),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;

    fn data(shape: &[usize], seed: usize) -> Tensor<f64> {
        Tensor::from_fn(shape, |i| ((i * 7 + seed * 13) as f64 * 0.61).sin())
    }

    fn mask(n: usize, m: usize) -> Rc<BoolTensor> {
        Rc::new(BoolTensor::from_fn(&[n, m], |i| i % m == 1 || i / m == 2))
    }

    /// The same computation from separate tape ops.
    fn composed(t: &Tape<f64>, q: Var, k: Var, v: Var, mask: Option<Rc<BoolTensor>>, scale: f64) -> Var {
        let s = t.matmul(q, t.transpose(k).unwrap()).unwrap();
        let p = t.masked_softmax(s, mask, scale).unwrap();
        t.matmul(p, v).unwrap()
    }

    #[test]
    fn matches_composed_ops() {
        let (q, k, v) = (data(&[5, 3], 1), data(&[7, 3], 2), data(&[7, 4], 3));
        for mk in [None, Some(Rc::new(BoolTensor::from_fn(&[5, 7], |i| i % 7 < 2))), Some(mask(5, 7))] {
            let t = Tape::new();
            let (a, b, c) = (t.leaf(q.clone()), t.leaf(k.clone()), t.leaf(v.clone()));
            let fused = t.attention(a, b, c, mk.clone(), 0.7).unwrap();
            let plain = composed(&t, a, b, c, mk.clone(), 0.7);
            assert!(t.value(fused).max_abs_diff(&t.value(plain)) < 1e-12);
            let w = data(&[5, 4], 9);
            let lf = t.sum(t.mul(fused, t.constant(w.clone())).unwrap());
            let lp = t.sum(t.mul(plain, t.constant(w)).unwrap());
            let (gf, gp) = (t.backward(lf).unwrap(), t.backward(lp).unwrap());
            for x in [a, b, c] {
                assert!(gf.wrt(x).max_abs_diff(&gp.wrt(x)) < 1e-12);
            }
        }
    }

    #[test]
    fn masked_weights_are_zero_and_rows_sum_to_one() {
        let t = Tape::new();
        let (q, k, v) = (t.constant(data(&[5, 3], 1)), t.constant(data(&[7, 3], 2)), t.constant(data(&[7, 2], 3)));
        let o = t.attention(q, k, v, Some(mask(5, 7)), 1.0).unwrap();
        let p = t.attention_weights(o).unwrap();
        for i in 0..5 {
            let row = &p.data()[i * 7..(i + 1) * 7];
            if i == 2 {
                assert!(row.iter().all(|&x| x == 0.0));
                assert!(t.value(o).data()[4..6].iter().all(|&x| x == 0.0));
            } else {
                assert_eq!(row[1], 0.0);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        assert!(t.attention_weights(q).is_none());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (k, v) = (data(&[6, 3], 2), data(&[6, 2], 3));
        let w = data(&[4, 2], 5);
        let loss = |t: &Tape<f64>, q: Var, k: Var, v: Var| {
            let o = t.attention(q, k, v, Some(mask(4, 6)), 0.8)?;
            Ok(t.sum(t.mul(o, t.constant(w.clone()))?))
        };
        let q0 = data(&[4, 3], 1);
        let (kk, vv) = (k.clone(), v.clone());
        let err = grad_check(|t, q| loss(t, q, t.constant(kk.clone()), t.constant(vv.clone())), &q0, 1e-5).unwrap();
        assert!(err <= 1e-4, "q {err}");
        let err = grad_check(|t, k| loss(t, t.constant(q0.clone()), k, t.constant(v.clone())), &k, 1e-5).unwrap();
        assert!(err <= 1e-4, "k {err}");
        let err = grad_check(|t, v| loss(t, t.constant(q0.clone()), t.constant(k.clone()), v), &v, 1e-5).unwrap();
        assert!(err <= 1e-4, "v {err}");
    }

    #[test]
    fn rejects_bad_shapes() {
        let t = Tape::<f64>::new();
        let (q, k) = (t.constant(data(&[2, 3], 1)), t.constant(data(&[4, 2], 1)));
        assert!(t.attention(q, k, k, None, 1.0).is_err());
        let k = t.constant(data(&[4, 3], 1));
        assert!(t.attention(q, k, k, Some(mask(3, 4)), 1.0).is_err());
    }
}
