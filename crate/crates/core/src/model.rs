//! The full generator: shared encoder, mask propagation and completion.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::completion::{composite, CompletionNet, Guidance};
use crate::config::ModelConfig;
use crate::encoder::{check_geometry, EncoderConfig, SharedEncoder};
use crate::error::{Error, Result};
use crate::mask::{MaskHead, MaskPrediction};
use crate::params::{Bound, ParamBuilder, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct Generator {
    pub config: ModelConfig,
    pub encoder: SharedEncoder,
    pub completion_encoder: Option<SharedEncoder>,
    pub mask: MaskHead,
    pub completion: CompletionNet,
}

#[derive(Clone, Debug)]
pub struct GeneratorOutput {
    /// One prediction per frame; frame 0 is the given annotation.
    pub masks: Vec<MaskPrediction>,
    /// `[T, 3, H, W]` completed clip.
    pub frames: Var,
    pub memory_frames: Vec<usize>,
    pub guidance: Guidance,
}

impl Generator {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, config: ModelConfig) -> Result<Self> {
        let enc = EncoderConfig::default();
        let mut pb = ParamBuilder::new(store, rng);
        let encoder = SharedEncoder::new(&mut pb.scope("encoder"), enc);
        let completion_encoder = config
            .separate_encoders
            .then(|| SharedEncoder::new(&mut pb.scope("completion_encoder"), enc));
        let mask = MaskHead::new(&mut pb.scope("mask"), enc.base, enc.skip2, enc.skip1);
        let completion = CompletionNet::new(&mut pb.scope("completion"), config.completion, enc.base, enc.skip2, enc.skip1)?;
        Ok(Generator {
            config,
            encoder,
            completion_encoder,
            mask,
            completion,
        })
    }

    /// Parameters of the mask head (key/value projections and decoder).
    pub fn mask_params<T: Scalar>(store: &ParamStore<T>) -> Vec<ParamId> {
        store.ids_with_prefix("mask.").collect()
    }

    /// Parameters of the encoder shared by both heads.
    pub fn encoder_params<T: Scalar>(store: &ParamStore<T>) -> Vec<ParamId> {
        store.ids_with_prefix("encoder.").collect()
    }

    /// `video` is `[T, 3, H, W]` in `[0, 1]`; `m0` is the binary `[H, W]`
    /// mask of frame 0.
    pub fn forward<T: Scalar>(&self, cx: &Bound<'_, T>, video: &Tensor<T>, m0: &Tensor<T>) -> Result<GeneratorOutput> {
        let t = cx.tape;
        let s = video.shape();
        if s.len() != 4 || s[1] != 3 || s[0] == 0 {
            return Err(Error::Geometry(format!("expected a [T, 3, H, W] clip, got {s:?}")));
        }
        check_geometry(s[2], s[3])?;
        if m0.shape() != [s[2], s[3]] {
            return Err(Error::dim("generator", s, m0.shape()));
        }
        let clip = t.constant(video.clone());
        let bank = self.encoder.encode_clip(cx, clip)?;
        let m0 = t.constant(m0.clone());
        let (masks, memory) = self.mask.predict_sequence(cx, &bank, m0, self.config.memory)?;

        let soft: Vec<Var> = masks
            .iter()
            .map(|p| if self.config.detach_masks { t.detach(p.soft) } else { p.soft })
            .collect();
        let completion_bank = match &self.completion_encoder {
            Some(enc) => enc.encode_clip(cx, clip)?,
            None => bank,
        };
        let (frames, tokens) = self.completion.forward(cx, &completion_bank, &soft, video)?;
        Ok(GeneratorOutput {
            masks,
            frames,
            memory_frames: memory.frame_indices().to_vec(),
            guidance: tokens.guidance,
        })
    }
}

/// Result of running a trained generator on one clip.
#[derive(Clone, Debug)]
pub struct Inference {
    /// `[T, 3, H, W]`.
    pub frames: Tensor<f32>,
    /// `[T, H, W]` soft masks.
    pub masks: Tensor<f32>,
    pub memory_frames: Vec<usize>,
}

/// Forward pass without gradients. With `blend`, pixels outside the
/// predicted mask keep their input values.
pub fn infer(gen: &Generator, store: &ParamStore<f32>, video: &Tensor<f32>, m0: &Tensor<f32>, blend: bool) -> Result<Inference> {
    let tape = Tape::new();
    let cx = store.bind_frozen(&tape);
    let out = gen.forward(&cx, video, m0)?;
    let s = video.shape();
    let mut masks = Vec::with_capacity(s[0] * s[2] * s[3]);
    for p in &out.masks {
        masks.extend_from_slice(tape.value(p.soft).data());
    }
    let masks = Tensor::new(&[s[0], s[2], s[3]], masks)?;
    let mut frames = tape.value(out.frames).as_ref().clone();
    if blend {
        frames = composite(&frames, video, &masks)?;
    }
    Ok(Inference {
        frames,
        masks,
        memory_frames: out.memory_frames,
    })
}
