//! Central-difference verification of tape gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Max over coordinates of `|analytic - numeric| / max(1, |analytic|)` for
/// the scalar function `f` at `x`, using central differences with step `h`.
///
/// `f` records its computation on the tape it is handed and returns a
/// one-element result.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&Tape<f64>, Var) -> Result<Var>,
{
    let eval = |point: Tensor<f64>| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.constant(point);
        let y = tape.value(f(&tape, v)?).item();
        if !y.is_finite() {
            return Err(Error::Evaluation(format!("f evaluated to {y}")));
        }
        Ok(y)
    };

    let tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let root = f(&tape, leaf)?;
    if !tape.value(root).item().is_finite() {
        return Err(Error::Evaluation("f is not finite at x".into()));
    }
    let analytic = tape.backward(root)?.wrt(leaf);

    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::BoolTensor;
    use std::rc::Rc;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.37).sin() * 2.0);
        let err = grad_check(|t, x| Ok(t.sum(t.mul(x, x)?)), &x, 1e-5).unwrap();
        assert!(err <= 1e-8, "{err}");
    }

    #[test]
    fn softmax_matmul_chain() {
        let x = Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.91).cos());
        let w = Tensor::from_fn(&[4, 2], |i| (i as f64 * 1.3).sin());
        let err = grad_check(
            |t, x| {
                let p = t.softmax(x, 1)?;
                let y = t.matmul(p, t.constant(w.clone()))?;
                Ok(t.sum(t.mul(y, y)?))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn masked_coordinate_has_zero_gradient() {
        let mask = Rc::new(BoolTensor::new(&[4], vec![false, true, false, false]).unwrap());
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(&[4], |i| i as f64 * 0.5));
        let m = tape.masked_fill(x, mask, -1e9).unwrap();
        let p = tape.softmax(m, 0).unwrap();
        let w = tape.constant(Tensor::from_fn(&[4], |i| i as f64 + 1.0));
        let y = tape.sum(tape.mul(p, w).unwrap());
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).data()[1], 0.0);
    }

    #[test]
    fn non_finite_is_an_evaluation_error() {
        let x = Tensor::from_fn(&[2], |_| 0.0);
        let r = grad_check(|t, x| Ok(t.sum(t.log(x))), &x, 1e-5);
        assert!(matches!(r, Err(Error::Evaluation(_))));
    }
}
