//! Parameterised layers shared by the networks.

use crate::autodiff::{ResampleMode, Var};
use crate::error::Result;
use crate::params::{Bound, ParamBuilder, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const LN_EPS: f64 = 1e-5;

/// Gain for layers feeding a ReLU.
pub const RELU_GAIN: f64 = 2.0;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, cin: usize, cout: usize, k: usize, stride: usize, gain: f64) -> Self {
        let weight = pb.uniform("weight", &[cout, cin, k, k], cin * k * k, gain);
        let bias = pb.constant("bias", &[cout], 0.0);
        Conv2d {
            weight,
            bias,
            stride,
            pad: k / 2,
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &Bound<'_, T>, x: Var) -> Result<Var> {
        cx.tape
            .conv2d(x, cx.p(self.weight), Some(cx.p(self.bias)), self.stride, self.pad)
    }

    pub fn zero<T: Scalar>(&self, store: &mut ParamStore<T>) {
        for id in [self.weight, self.bias] {
            store.get_mut(id).data_mut().fill(T::zero());
        }
    }
}

/// Dense layer over the last dim: `[N, in] -> [N, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, cin: usize, cout: usize, gain: f64) -> Self {
        let weight = pb.uniform("weight", &[cin, cout], cin, gain);
        let bias = pb.constant("bias", &[cout], 0.0);
        Linear { weight, bias }
    }

    pub fn forward<T: Scalar>(&self, cx: &Bound<'_, T>, x: Var) -> Result<Var> {
        let y = cx.tape.matmul(x, cx.p(self.weight))?;
        cx.tape.add(y, cx.p(self.bias))
    }

    pub fn zero<T: Scalar>(&self, store: &mut ParamStore<T>) {
        for id in [self.weight, self.bias] {
            store.get_mut(id).data_mut().fill(T::zero());
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, c: usize) -> Self {
        LayerNorm {
            gamma: pb.constant("gamma", &[c], 1.0),
            beta: pb.constant("beta", &[c], 0.0),
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &Bound<'_, T>, x: Var) -> Result<Var> {
        cx.tape
            .layer_norm(x, cx.p(self.gamma), cx.p(self.beta), T::lit(LN_EPS))
    }
}

/// Convolutional block attention: a channel gate from a shared MLP over
/// average- and max-pooled descriptors, then a spatial gate from a 7x7
/// convolution over channel-wise average and max maps.
#[derive(Clone, Debug)]
pub struct Cbam {
    pub fc1: Linear,
    pub fc2: Linear,
    pub spatial: Conv2d,
}

impl Cbam {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, c: usize) -> Self {
        let hidden = (c / 4).max(1);
        Cbam {
            fc1: Linear::new(&mut pb.scope("fc1"), c, hidden, RELU_GAIN),
            fc2: Linear::new(&mut pb.scope("fc2"), hidden, c, 1.0),
            spatial: Conv2d::new(&mut pb.scope("spatial"), 2, 1, 7, 1, 1.0),
        }
    }

    /// `x` is `[C, H, W]`.
    pub fn forward<T: Scalar>(&self, cx: &Bound<'_, T>, x: Var) -> Result<Var> {
        let t = cx.tape;
        let c = t.shape(x)[0];
        let descriptor = |mode| -> Result<Var> {
            let pooled = t.resample(x, (1, 1), mode)?;
            let row = t.reshape(pooled, &[1, c])?;
            let h = t.relu(self.fc1.forward(cx, row)?);
            self.fc2.forward(cx, h)
        };
        let avg = descriptor(ResampleMode::AdaptiveAvgPool)?;
        let max = descriptor(ResampleMode::MaxPool)?;
        let channel_gate = t.sigmoid(t.add(avg, max)?);
        let channel_gate = t.reshape(channel_gate, &[c, 1, 1])?;
        let x = t.mul(x, channel_gate)?;

        let avg_map = t.mean_axis(x, 0)?;
        let max_map = t.max_axis(x, 0)?;
        let maps = t.concat(&[avg_map, max_map], 0)?;
        let spatial_gate = t.sigmoid(self.spatial.forward(cx, maps)?);
        t.mul(x, spatial_gate)
    }

    /// Zeroes both attention nets so each gate is exactly one half.
    pub fn zero<T: Scalar>(&self, store: &mut ParamStore<T>) {
        self.fc1.zero(store);
        self.fc2.zero(store);
        self.spatial.zero(store);
    }
}

/// Fixed 2-D sinusoidal encoding of a `h x w` grid over `c` channels:
/// the first half of the channels encodes rows, the second half columns.
pub fn spatial_encoding(h: usize, w: usize, c: usize) -> Tensor<f64> {
    let half = c / 2;
    Tensor::from_fn(&[h * w, c], |i| {
        let (pos, ch) = (i / c, i % c);
        let (coord, k, span) = if ch < half {
            ((pos / w) as f64, ch, half)
        } else {
            ((pos % w) as f64, ch - half, c - half)
        };
        sinusoid(coord, k, span)
    })
}

/// Fixed 1-D sinusoidal encoding of frame index `t` over `c` channels.
pub fn temporal_encoding(t: usize, c: usize) -> Vec<f64> {
    (0..c).map(|k| sinusoid(t as f64, k, c)).collect()
}

fn sinusoid(pos: f64, k: usize, span: usize) -> f64 {
    let freq = 1.0 / 100f64.powf((2 * (k / 2)) as f64 / span.max(1) as f64);
    if k.is_multiple_of(2) {
        (pos * freq).sin()
    } else {
        (pos * freq).cos()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cbam_with_zeroed_nets_quarters_input() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cbam = Cbam::new(&mut ParamBuilder::new(&mut store, &mut rng), 8);
        cbam.zero(&mut store);
        let tape = Tape::new();
        let cx = store.bind(&tape);
        let xt = Tensor::from_fn(&[8, 5, 6], |i| (i as f64 * 0.13).sin());
        let x = tape.constant(xt.clone());
        let y = tape.value(cbam.forward(&cx, x).unwrap());
        // channel gate 0.5, then spatial gate 0.5
        assert_eq!(*y, xt.map(|v| v * 0.5 * 0.5));
    }

    #[test]
    fn position_encodings_are_bounded_and_distinct() {
        let pe = spatial_encoding(3, 4, 8);
        assert_eq!(pe.shape(), &[12, 8]);
        assert!(pe.data().iter().all(|v| v.abs() <= 1.0));
        let rows: Vec<&[f64]> = pe.data().chunks(8).collect();
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                assert_ne!(rows[i], rows[j]);
            }
        }
        assert_ne!(temporal_encoding(0, 8), temporal_encoding(1, 8));
    }
}
