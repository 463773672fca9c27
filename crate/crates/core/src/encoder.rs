//! Frame encoder shared by the mask and completion heads, plus the
//! key/value projections and mask downsampling used on its features.

use crate::autodiff::{ResampleMode, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, RELU_GAIN};
use crate::params::{Bound, ParamBuilder};
use crate::tensor::Scalar;

/// Spatial stride of the base features relative to the frame.
pub const BASE_STRIDE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub skip1: usize,
    pub skip2: usize,
    pub base: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            skip1: 16,
            skip2: 24,
            base: 32,
        }
    }
}

/// Features of one frame: base `X` at stride 4 plus skips at strides 1 and 2.
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    pub base: Var,
    pub skip1: Var,
    pub skip2: Var,
}

/// Encoder outputs for every frame of a clip, stacked on a leading axis.
#[derive(Clone, Copy, Debug)]
pub struct FeatureBank {
    pub base: Var,
    pub skip1: Var,
    pub skip2: Var,
    pub frames: usize,
}

impl FeatureBank {
    pub fn frame<T: Scalar>(&self, tape: &Tape<T>, t: usize) -> Result<EncoderOutput> {
        let pick = |v: Var| -> Result<Var> {
            let mut shape = tape.shape(v);
            let one = tape.narrow(v, 0, t, 1)?;
            shape.remove(0);
            tape.reshape(one, &shape)
        };
        Ok(EncoderOutput {
            base: pick(self.base)?,
            skip1: pick(self.skip1)?,
            skip2: pick(self.skip2)?,
        })
    }
}

pub fn check_geometry(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(BASE_STRIDE) || !w.is_multiple_of(BASE_STRIDE) {
        return Err(Error::Geometry(format!(
            "frame size {h}x{w} must be a positive multiple of {BASE_STRIDE}"
        )));
    }
    Ok(())
}

/// Three conv stages (stride 1, 2, 2) with ReLU.
#[derive(Clone, Debug)]
pub struct SharedEncoder {
    pub stage1: Conv2d,
    pub stage2: Conv2d,
    pub stage3: Conv2d,
    pub config: EncoderConfig,
}

impl SharedEncoder {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, config: EncoderConfig) -> Self {
        SharedEncoder {
            stage1: Conv2d::new(&mut pb.scope("stage1"), 3, config.skip1, 3, 1, RELU_GAIN),
            stage2: Conv2d::new(&mut pb.scope("stage2"), config.skip1, config.skip2, 3, 2, RELU_GAIN),
            stage3: Conv2d::new(&mut pb.scope("stage3"), config.skip2, config.base, 3, 2, RELU_GAIN),
            config,
        }
    }

    fn stages<T: Scalar>(&self, cx: &Bound<'_, T>, x: Var) -> Result<(Var, Var, Var)> {
        let t = cx.tape;
        let skip1 = t.relu(self.stage1.forward(cx, x)?);
        let skip2 = t.relu(self.stage2.forward(cx, skip1)?);
        let base = t.relu(self.stage3.forward(cx, skip2)?);
        Ok((base, skip1, skip2))
    }

    /// `frame` is `[3, H, W]` with values in `[0, 1]`.
    pub fn encode_frame<T: Scalar>(&self, cx: &Bound<'_, T>, frame: Var) -> Result<EncoderOutput> {
        let shape = cx.tape.shape(frame);
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::Geometry(format!("expected a [3, H, W] frame, got {shape:?}")));
        }
        check_geometry(shape[1], shape[2])?;
        let (base, skip1, skip2) = self.stages(cx, frame)?;
        Ok(EncoderOutput { base, skip1, skip2 })
    }

    /// `video` is `[T, 3, H, W]`; frames are encoded in one batched pass.
    pub fn encode_clip<T: Scalar>(&self, cx: &Bound<'_, T>, video: Var) -> Result<FeatureBank> {
        let shape = cx.tape.shape(video);
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::Geometry(format!("expected a [T, 3, H, W] clip, got {shape:?}")));
        }
        check_geometry(shape[2], shape[3])?;
        let (base, skip1, skip2) = self.stages(cx, video)?;
        Ok(FeatureBank {
            base,
            skip1,
            skip2,
            frames: shape[0],
        })
    }
}

/// Key and value projections of base features.
#[derive(Clone, Debug)]
pub struct KeyValueHead {
    pub key: Conv2d,
    pub value: Conv2d,
}

impl KeyValueHead {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, base: usize, key_dim: usize, value_dim: usize) -> Self {
        KeyValueHead {
            key: Conv2d::new(&mut pb.scope("key"), base, key_dim, 3, 1, 1.0),
            value: Conv2d::new(&mut pb.scope("value"), base + 1, value_dim, 3, 1, 1.0),
        }
    }

    /// `[C_K, H'W']` key from a 3x3 conv of the base features.
    pub fn project_key<T: Scalar>(&self, cx: &Bound<'_, T>, enc: &EncoderOutput) -> Result<Var> {
        let k = self.key.forward(cx, enc.base)?;
        flatten_spatial(cx.tape, k)
    }

    /// `[C_V, H'W']` value from the base features concatenated with the
    /// mask average-pooled to token resolution. `mask` is `[H, W]`.
    pub fn project_value<T: Scalar>(&self, cx: &Bound<'_, T>, enc: &EncoderOutput, mask: Var) -> Result<Var> {
        let t = cx.tape;
        let frame = t.shape(enc.skip1);
        let mshape = t.shape(mask);
        if mshape != frame[1..] {
            return Err(Error::Geometry(format!(
                "mask {mshape:?} does not match frame size {:?}",
                &frame[1..]
            )));
        }
        let base = t.shape(enc.base);
        let pooled = t.resample(mask, (base[1], base[2]), ResampleMode::AdaptiveAvgPool)?;
        let pooled = t.reshape(pooled, &[1, base[1], base[2]])?;
        let input = t.concat(&[enc.base, pooled], 0)?;
        let v = self.value.forward(cx, input)?;
        flatten_spatial(t, v)
    }
}

/// `[C, H, W] -> [C, H*W]`.
pub fn flatten_spatial<T: Scalar>(tape: &Tape<T>, x: Var) -> Result<Var> {
    let s = tape.shape(x);
    tape.reshape(x, &[s[0], s[1] * s[2]])
}

/// Token-resolution guidance: max-pool of a `[H, W]` mask to the base grid,
/// flattened to `[H'W']`. A token is as object-like as its most
/// object-like pixel.
pub fn downsample_mask_guidance<T: Scalar>(tape: &Tape<T>, mask: Var) -> Result<Var> {
    let s = tape.shape(mask);
    if s.len() != 2 {
        return Err(Error::Geometry(format!("expected a [H, W] mask, got {s:?}")));
    }
    check_geometry(s[0], s[1])?;
    let pooled = tape.resample(mask, (s[0] / BASE_STRIDE, s[1] / BASE_STRIDE), ResampleMode::MaxPool)?;
    tape.reshape(pooled, &[(s[0] / BASE_STRIDE) * (s[1] / BASE_STRIDE)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ParamStore<f64>, SharedEncoder, KeyValueHead) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let enc = SharedEncoder::new(&mut pb.scope("encoder"), EncoderConfig::default());
        let kv = KeyValueHead::new(&mut pb.scope("kv"), 32, 16, 32);
        (store, enc, kv)
    }

    fn frame(seed: u64) -> Tensor<f64> {
        Tensor::from_fn(&[3, 48, 80], |i| (((i as u64 * 2654435761) ^ seed) % 256) as f64 / 255.0)
    }

    #[test]
    fn shape_contract() {
        let (store, enc, kv) = setup();
        let tape = Tape::new();
        let cx = store.bind_frozen(&tape);
        let out = enc.encode_frame(&cx, tape.constant(frame(1))).unwrap();
        assert_eq!(tape.shape(out.base), vec![32, 12, 20]);
        assert_eq!(tape.shape(out.skip1), vec![16, 48, 80]);
        assert_eq!(tape.shape(out.skip2), vec![24, 24, 40]);
        let key = kv.project_key(&cx, &out).unwrap();
        assert_eq!(tape.shape(key), vec![16, 240]);
        let mask = tape.constant(Tensor::zeros(&[48, 80]));
        let value = kv.project_value(&cx, &out, mask).unwrap();
        assert_eq!(tape.shape(value), vec![32, 240]);
    }

    #[test]
    fn deterministic_and_batched_consistent() {
        let (store, enc, _) = setup();
        let tape = Tape::new();
        let cx = store.bind_frozen(&tape);
        let a = enc.encode_frame(&cx, tape.constant(frame(3))).unwrap();
        let b = enc.encode_frame(&cx, tape.constant(frame(3))).unwrap();
        assert_eq!(*tape.value(a.base), *tape.value(b.base));

        let clip = Tensor::new(&[2, 3, 48, 80], [frame(5).into_data(), frame(3).into_data()].concat()).unwrap();
        let bank = enc.encode_clip(&cx, tape.constant(clip)).unwrap();
        let f1 = bank.frame(&tape, 1).unwrap();
        assert_eq!(*tape.value(f1.base), *tape.value(a.base));
        assert_eq!(*tape.value(f1.skip2), *tape.value(a.skip2));
    }

    #[test]
    fn zero_frame_zero_features() {
        let (store, enc, kv) = setup();
        let tape = Tape::new();
        let cx = store.bind_frozen(&tape);
        let out = enc.encode_frame(&cx, tape.constant(Tensor::zeros(&[3, 48, 80]))).unwrap();
        assert!(tape.value(out.base).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(kv.project_key(&cx, &out).unwrap()).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn indivisible_frame_is_geometry_error() {
        let (store, enc, _) = setup();
        let tape = Tape::new();
        let cx = store.bind_frozen(&tape);
        let r = enc.encode_frame(&cx, tape.constant(Tensor::zeros(&[3, 50, 80])));
        assert!(matches!(r, Err(Error::Geometry(_))));
    }

    #[test]
    fn key_projection_is_linear_without_bias() {
        let (store, enc, kv) = setup();
        let tape = Tape::new();
        let cx = store.bind_frozen(&tape);
        let out = enc.encode_frame(&cx, tape.constant(frame(9))).unwrap();
        let doubled = EncoderOutput {
            base: tape.scale(out.base, 2.0),
            ..out
        };
        let k1 = tape.value(kv.project_key(&cx, &out).unwrap());
        let k2 = tape.value(kv.project_key(&cx, &doubled).unwrap());
        assert!(k2.max_abs_diff(&k1.map(|v| 2.0 * v)) < 1e-12);
    }

    #[test]
    fn mask_channel_changes_value() {
        let (store, enc, kv) = setup();
        let tape = Tape::new();
        let cx = store.bind_frozen(&tape);
        let out = enc.encode_frame(&cx, tape.constant(frame(2))).unwrap();
        let v0 = tape.value(kv.project_value(&cx, &out, tape.constant(Tensor::zeros(&[48, 80]))).unwrap());
        let v1 = tape.value(kv.project_value(&cx, &out, tape.constant(Tensor::ones(&[48, 80]))).unwrap());
        assert!(v0.max_abs_diff(&v1) > 1e-3);
    }

    #[test]
    fn value_rejects_mismatched_mask() {
        let (store, enc, kv) = setup();
        let tape = Tape::new();
        let cx = store.bind_frozen(&tape);
        let out = enc.encode_frame(&cx, tape.constant(frame(2))).unwrap();
        let bad = tape.constant(Tensor::zeros(&[40, 80]));
        assert!(matches!(kv.project_value(&cx, &out, bad), Err(Error::Geometry(_))));
    }

    #[test]
    fn guidance_examples() {
        let tape = Tape::<f64>::new();
        let mut m = Tensor::zeros(&[8, 8]);
        m.data_mut()[5 * 8 + 6] = 1.0;
        m.data_mut()[1] = 0.7;
        let g = tape.value(downsample_mask_guidance(&tape, tape.constant(m)).unwrap());
        assert_eq!(g.data(), &[0.7, 0.0, 0.0, 1.0]);
        let g = tape.value(downsample_mask_guidance(&tape, tape.constant(Tensor::zeros(&[8, 8]))).unwrap());
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    proptest! {
        #[test]
        fn guidance_is_monotone(
            base in proptest::collection::vec(0.0f64..1.0, 64),
            extra in proptest::collection::vec(any::<bool>(), 64),
        ) {
            let tape = Tape::<f64>::new();
            let grown: Vec<f64> = base.iter().zip(&extra).map(|(&b, &e)| if e { 1.0 } else { b }).collect();
            let a = tape.value(downsample_mask_guidance(&tape, tape.constant(Tensor::new(&[8, 8], base).unwrap())).unwrap());
            let b = tape.value(downsample_mask_guidance(&tape, tape.constant(Tensor::new(&[8, 8], grown).unwrap())).unwrap());
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!(y >= x);
            }
        }

        #[test]
        fn constant_mask_pools_to_constant(c in 0.0f64..1.0) {
            let tape = Tape::<f64>::new();
            let m = tape.constant(Tensor::full(&[48, 80], c));
            let p = tape.value(tape.resample(m, (12, 20), ResampleMode::AdaptiveAvgPool).unwrap());
            prop_assert!(p.data().iter().all(|&v| (v - c).abs() < 1e-12));
        }
    }
}
