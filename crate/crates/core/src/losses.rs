//! Training objectives and the spatio-temporal discriminator.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Linear, RELU_GAIN};
use crate::params::{Bound, ParamBuilder, ParamId};
use crate::tensor::{Scalar, Tensor};

/// Discriminator outputs are clamped to `[D_EPS, 1 - D_EPS]` before logs.
pub const D_EPS: f64 = 1e-6;

/// Scalar losses of one step. `l_total` is always
/// `((l_mask + l_object) + l_valid) + l_adv`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBundle {
    pub l_mask: f64,
    pub l_object: f64,
    pub l_valid: f64,
    pub l_adv: f64,
    pub l_dis: f64,
    pub l_total: f64,
}

impl LossBundle {
    pub fn new(l_mask: f64, l_object: f64, l_valid: f64, l_adv: f64, l_dis: f64) -> Self {
        LossBundle {
            l_mask,
            l_object,
            l_valid,
            l_adv,
            l_dis,
            l_total: l_mask + l_object + l_valid + l_adv,
        }
    }

    /// Component-wise mean; the total is re-derived from the means.
    pub fn mean(items: &[LossBundle]) -> LossBundle {
        let n = items.len().max(1) as f64;
        let avg = |f: fn(&LossBundle) -> f64| items.iter().map(f).sum::<f64>() / n;
        LossBundle::new(
            avg(|b| b.l_mask),
            avg(|b| b.l_object),
            avg(|b| b.l_valid),
            avg(|b| b.l_adv),
            avg(|b| b.l_dis),
        )
    }

    pub fn is_additive(&self) -> bool {
        self.l_total == self.l_mask + self.l_object + self.l_valid + self.l_adv
    }

    pub fn named(&self) -> [(&'static str, f64); 6] {
        [
            ("l_mask", self.l_mask),
            ("l_object", self.l_object),
            ("l_valid", self.l_valid),
            ("l_adv", self.l_adv),
            ("l_dis", self.l_dis),
            ("l_total", self.l_total),
        ]
    }

    /// First non-finite component, if any.
    pub fn check_finite(&self) -> Result<()> {
        match self.named().iter().find(|(_, v)| !v.is_finite()) {
            Some((name, _)) => Err(Error::NonFinite { name: name.to_string() }),
            None => Ok(()),
        }
    }

    /// Tab-separated log line: `step l_mask l_object l_valid l_adv l_dis l_total`.
    pub fn log_line(&self, step: u64) -> String {
        let mut s = step.to_string();
        for (_, v) in self.named() {
            s.push('\t');
            s.push_str(&format!("{v:e}"));
        }
        s
    }
}

/// Mean per-pixel cross-entropy of `[2, H, W]` logits against binary
/// `[H, W]` masks, averaged over every given frame.
pub fn mask_loss<T: Scalar>(tape: &Tape<T>, logits: &[Var], gt: &[Tensor<T>]) -> Result<Var> {
    if logits.len() != gt.len() || logits.is_empty() {
        return Err(Error::Contract(format!(
            "{} logit frames for {} masks",
            logits.len(),
            gt.len()
        )));
    }
    let mut total: Option<Var> = None;
    let mut pixels = 0usize;
    for (&l, m) in logits.iter().zip(gt) {
        let shape = tape.shape(l);
        if shape.len() != 3 || shape[0] != 2 || shape[1..] != *m.shape() {
            return Err(Error::dim("mask_loss", &shape, m.shape()));
        }
        let hw = m.numel();
        let onehot = Tensor::from_fn(&shape, |i| {
            let fg = m.data()[i % hw];
            if i < hw {
                T::one() - fg
            } else {
                fg
            }
        });
        let logp = tape.log_softmax(l, 0)?;
        let picked = tape.sum(tape.mul(logp, tape.constant(onehot))?);
        total = Some(match total {
            Some(t) => tape.add(t, picked)?,
            None => picked,
        });
        pixels += hw;
    }
    Ok(tape.scale(total.expect("at least one frame"), T::lit(-1.0 / pixels as f64)))
}

/// L1 errors inside and outside the mask, each normalised by the size of
/// its region over all pixels and channels. `pred` and `gt` are
/// `[T, C, H, W]`; `mask` is `[T, H, W]`. An empty region contributes 0.
pub fn region_losses<T: Scalar>(tape: &Tape<T>, pred: Var, gt: &Tensor<T>, mask: &Tensor<T>) -> Result<(Var, Var)> {
    let shape = tape.shape(pred);
    if shape != gt.shape() {
        return Err(Error::dim("region_losses", &shape, gt.shape()));
    }
    if shape.len() != 4 || mask.shape() != [shape[0], shape[2], shape[3]] {
        return Err(Error::dim("region_losses", &shape, mask.shape()));
    }
    let (c, hw) = (shape[1], shape[2] * shape[3]);
    let inside = Tensor::from_fn(&shape, |i| mask.data()[(i / (c * hw)) * hw + i % hw]);
    let outside = inside.map(|m| T::one() - m);
    let err = tape.abs(tape.sub(pred, tape.constant(gt.clone()))?);
    let term = |weights: Tensor<T>| -> Result<Var> {
        let area = weights.data().iter().map(|v| v.as_f64()).sum::<f64>();
        if area == 0.0 {
            return Ok(tape.constant(Tensor::scalar(T::zero())));
        }
        let s = tape.sum(tape.mul(err, tape.constant(weights))?);
        Ok(tape.scale(s, T::lit(1.0 / area)))
    };
    Ok((term(inside)?, term(outside)?))
}

/// Discriminator criterion `log D(real) + log(1 - D(fake))`, which the
/// discriminator maximises.
pub fn dis_loss<T: Scalar>(tape: &Tape<T>, d_real: Var, d_fake: Var) -> Result<Var> {
    let fake = tape.add_scalar(tape.scale(d_fake, T::lit(-1.0)), T::one());
    tape.add(tape.log(d_real), tape.log(fake))
}

/// Non-saturating generator loss `-log D(fake)`.
pub fn adv_loss<T: Scalar>(tape: &Tape<T>, d_fake: Var) -> Var {
    tape.scale(tape.log(d_fake), T::lit(-1.0))
}

#[derive(Clone, Debug)]
struct Conv3d {
    weight: ParamId,
    bias: ParamId,
    stride: [usize; 3],
}

impl Conv3d {
    fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, cin: usize, cout: usize, stride: [usize; 3]) -> Self {
        Conv3d {
            weight: pb.uniform("weight", &[cout, cin, 3, 3, 3], cin * 27, RELU_GAIN),
            bias: pb.constant("bias", &[cout], 0.0),
            stride,
        }
    }

    fn forward<T: Scalar>(&self, cx: &Bound<'_, T>, x: Var) -> Result<Var> {
        cx.tape
            .conv3d(x, cx.p(self.weight), Some(cx.p(self.bias)), self.stride, [1, 1, 1])
    }
}

/// Three 3x3x3 conv stages, a global average and a sigmoid score.
#[derive(Clone, Debug)]
pub struct Discriminator {
    c1: Conv3d,
    c2: Conv3d,
    c3: Conv3d,
    fc: Linear,
}

impl Discriminator {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>) -> Self {
        Discriminator {
            c1: Conv3d::new(&mut pb.scope("c1"), 3, 8, [1, 1, 1]),
            c2: Conv3d::new(&mut pb.scope("c2"), 8, 16, [1, 2, 2]),
            c3: Conv3d::new(&mut pb.scope("c3"), 16, 16, [2, 2, 2]),
            fc: Linear::new(&mut pb.scope("fc"), 16, 1, 1.0),
        }
    }

    /// Probability that the `[T, 3, H, W]` clip is real, clamped away
    /// from 0 and 1. Returns a `[1, 1]` tensor.
    pub fn forward<T: Scalar>(&self, cx: &Bound<'_, T>, video: Var) -> Result<Var> {
        let t = cx.tape;
        let x = t.permute(video, &[1, 0, 2, 3])?;
        let x = t.relu(self.c1.forward(cx, x)?);
        let x = t.relu(self.c2.forward(cx, x)?);
        let x = t.relu(self.c3.forward(cx, x)?);
        let s = t.shape(x);
        let x = t.reshape(x, &[s[0], s[1] * s[2] * s[3]])?;
        let pooled = t.mean_axis(x, 1)?;
        let pooled = t.reshape(pooled, &[1, s[0]])?;
        let p = t.sigmoid(self.fc.forward(cx, pooled)?);
        Ok(t.clamp(p, T::lit(D_EPS), T::lit(1.0 - D_EPS)))
    }
}
