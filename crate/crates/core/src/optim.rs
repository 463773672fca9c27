use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam over an ordered list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig, params: &[Tensor<T>]) -> Self {
        AdamState {
            config,
            step: 0,
            first: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            second: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn update(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::Contract(format!(
                "adam tracks {} tensors, got {} params and {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::dim("adam_step", p.shape(), g.shape()));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let (inv_bc1, inv_bc2) = (T::lit(1.0 / bc1), T::lit(1.0 / bc2));
        let (lr, eps) = (T::lit(c.lr), T::lit(c.eps));
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            let (pd, gd) = (p.data_mut(), g.data());
            let (md, vd) = (m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                md[i] = b1 * md[i] + one_b1 * gd[i];
                vd[i] = b2 * vd[i] + one_b2 * gd[i] * gd[i];
                let mh = md[i] * inv_bc1;
                let vh = vd[i] * inv_bc2;
                pd[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = vec![Tensor::<f64>::zeros(&[4])];
        let g = vec![Tensor::new(&[4], vec![3.0, -0.01, 250.0, -7.0]).unwrap()];
        let mut adam = AdamState::new(AdamConfig::default(), &p);
        adam.update(&mut p, &g).unwrap();
        for (&delta, &gi) in p[0].data().iter().zip(g[0].data()) {
            let expect = -1e-4 * gi.signum();
            assert!((delta - expect).abs() <= 1e-4 * 1e-5, "{delta} vs {expect}");
        }
    }

    #[test]
    fn zero_grad_leaves_params_and_decays_moments() {
        let mut p = vec![Tensor::<f64>::ones(&[2])];
        let mut adam = AdamState::new(AdamConfig::default(), &p);
        adam.update(&mut p, &[Tensor::zeros(&[2])]).unwrap();
        assert_eq!(p[0], Tensor::ones(&[2]));

        adam.update(&mut p, &[Tensor::ones(&[2])]).unwrap();
        let (m, v) = (adam.first[0].clone(), adam.second[0].clone());
        adam.update(&mut p, &[Tensor::zeros(&[2])]).unwrap();
        assert_eq!(adam.first[0], m.map(|x| 0.9 * x));
        assert_eq!(adam.second[0], v.map(|x| 0.999 * x));
        assert_eq!(adam.step, 3);
    }

    #[test]
    fn constant_grad_steps_are_bounded_by_lr() {
        // closed form: with constant g, m_hat = g and v_hat = g^2 at every t,
        // so each step is lr * |g| / (|g| + eps) <= lr.
        let mut p = vec![Tensor::<f64>::zeros(&[3])];
        let g = vec![Tensor::new(&[3], vec![0.5, -2.0, 1e-3]).unwrap()];
        let mut adam = AdamState::new(AdamConfig::default(), &p);
        for _ in 0..2 {
            let before = p[0].clone();
            adam.update(&mut p, &g).unwrap();
            for (a, b) in p[0].data().iter().zip(before.data()) {
                assert!((a - b).abs() <= 1e-4 * (1.0 + 1e-6));
            }
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = vec![Tensor::<f32>::zeros(&[2])];
        let mut adam = AdamState::new(AdamConfig::default(), &p);
        assert!(matches!(
            adam.update(&mut p, &[Tensor::zeros(&[3])]),
            Err(Error::Dimension { .. })
        ));
    }
}
