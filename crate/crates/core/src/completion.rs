//! Token-level video completion: temporal blocks with mask-guided
//! attention, spatial blocks with per-frame attention, and a decoder back
//! to pixels.
//!
//! Tokens are laid out frame-major: token `t * H'W' + s` is spatial
//! position `s` (row-major over the base grid) of frame `t`.

use std::rc::Rc;

use crate::autodiff::{BoolTensor, ResampleMode, Tape, Var, MASK_SENTINEL};
use crate::encoder::{downsample_mask_guidance, FeatureBank};
use crate::error::{Error, Result};
use crate::nn::{spatial_encoding, temporal_encoding, Conv2d, LayerNorm, Linear, RELU_GAIN};
use crate::params::{Bound, ParamBuilder, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Guidance threshold on the downsampled mask.
pub const OBJECT_THRESHOLD: f64 = 0.5;

/// Input clipping before the logit in the output parameterisation.
const LOGIT_EPS: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MaskingMode {
    /// No query may attend to an object key.
    #[default]
    KeySide,
    /// Mask where `1 - (1 - m)(1 - m)^T < 0.5`.
    PaperLiteral,
}

impl std::str::FromStr for MaskingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "key-side" => Ok(MaskingMode::KeySide),
            "paper-literal" => Ok(MaskingMode::PaperLiteral),
            _ => Err(Error::Contract(format!(
                "unknown masking mode `{s}` (expected key-side or paper-literal)"
            ))),
        }
    }
}

impl std::fmt::Display for MaskingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MaskingMode::KeySide => "key-side",
            MaskingMode::PaperLiteral => "paper-literal",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CompletionConfig {
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_hidden: usize,
    pub masking: MaskingMode,
    /// Apply the guidance at all; off reduces every block to plain attention.
    pub guidance: bool,
    /// Use guided full attention in place of per-frame attention.
    pub stb_masked: bool,
}

impl Default for CompletionConfig {
    fn default() -> Self {
        CompletionConfig {
            dim: 32,
            heads: 4,
            blocks: 4,
            mlp_hidden: 64,
            masking: MaskingMode::KeySide,
            guidance: true,
            stb_masked: false,
        }
    }
}

impl CompletionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Contract(format!(
                "token dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.mlp_hidden == 0 {
            return Err(Error::Contract("mlp hidden size must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Which token pairs are hidden from attention.
#[derive(Clone, Debug, PartialEq)]
pub struct Guidance {
    pub token_object: Vec<bool>,
    pub mode: MaskingMode,
    /// Pairwise object involvement, only materialised in paper-literal mode.
    pub g: Option<Tensor<f64>>,
    scores: Option<Rc<BoolTensor>>,
}

impl Guidance {
    pub fn build(m_hat: &[f64], mode: MaskingMode) -> Result<Self> {
        if let Some(v) = m_hat.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Contract(format!("guidance value {v} outside [0, 1]")));
        }
        let token_object = m_hat.iter().map(|&v| v >= OBJECT_THRESHOLD).collect();
        let g = match mode {
            MaskingMode::KeySide => None,
            MaskingMode::PaperLiteral => {
                let n = m_hat.len();
                Some(Tensor::from_fn(&[n, n], |k| {
                    1.0 - (1.0 - m_hat[k / n]) * (1.0 - m_hat[k % n])
                }))
            }
        };
        Ok(Guidance::assemble(token_object, mode, g))
    }

    fn assemble(token_object: Vec<bool>, mode: MaskingMode, g: Option<Tensor<f64>>) -> Self {
        let mut out = Guidance {
            token_object,
            mode,
            g,
            scores: None,
        };
        let n = out.len();
        let m = BoolTensor::from_fn(&[n, n], |k| out.masked(k / n, k % n));
        out.scores = m.any().then(|| Rc::new(m));
        out
    }

    /// Guidance that hides nothing.
    pub fn none(tokens: usize) -> Self {
        Guidance::assemble(vec![false; tokens], MaskingMode::KeySide, None)
    }

    pub fn len(&self) -> usize {
        self.token_object.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_object.is_empty()
    }

    pub fn masked(&self, i: usize, j: usize) -> bool {
        match &self.g {
            Some(g) => g.data()[i * self.len() + j] < OBJECT_THRESHOLD,
            None => self.token_object[j],
        }
    }

    /// Score mask for all token pairs, or `None` when nothing is masked.
    pub fn score_mask(&self) -> Option<Rc<BoolTensor>> {
        self.scores.clone()
    }
}

/// Replaces masked scores with the sentinel.
pub fn mask_scores<T: Scalar>(tape: &Tape<T>, s: Var, g: &Guidance) -> Result<Var> {
    let shape = tape.shape(s);
    if shape != [g.len(), g.len()] {
        return Err(Error::dim("mask_scores", &shape, &[g.len(), g.len()]));
    }
    match g.score_mask() {
        Some(m) => tape.masked_fill(s, m, T::lit(MASK_SENTINEL)),
        None => Ok(s),
    }
}

/// Multi-head scaled dot-product attention over `[N, C]` projections.
/// Returns the concatenated head outputs and each head's attention node,
/// whose weights [`Tape::attention_weights`] reads back.
pub fn attend<T: Scalar>(
    tape: &Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    mask: Option<Rc<BoolTensor>>,
) -> Result<(Var, Vec<Var>)> {
    let c = tape.shape(q)[1];
    let d = c / heads;
    let scale = T::lit(1.0 / (d as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let col = |x: Var| if heads == 1 { Ok(x) } else { tape.narrow(x, 1, h * d, d) };
        outs.push(tape.attention(col(q)?, col(k)?, col(v)?, mask.clone(), scale)?);
    }
    let out = if heads == 1 { outs[0] } else { tape.concat(&outs, 1)? };
    Ok((out, outs))
}

#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

/// Intermediate tensors of one attention call, kept for inspection.
#[derive(Clone, Debug)]
pub struct AttentionTrace {
    pub output: Var,
    /// One attention node per head.
    pub heads: Vec<Var>,
}

impl Attention {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, c: usize, heads: usize) -> Self {
        Attention {
            q: Linear::new(&mut pb.scope("q"), c, c, 1.0),
            k: Linear::new(&mut pb.scope("k"), c, c, 1.0),
            v: Linear::new(&mut pb.scope("v"), c, c, 1.0),
            out: Linear::new(&mut pb.scope("out"), c, c, 1.0),
            heads,
        }
    }

    /// Attention across all tokens of `x` (`[N, C]`) under `g`.
    pub fn masked<T: Scalar>(&self, cx: &Bound<'_, T>, x: Var, g: &Guidance) -> Result<Var> {
        self.masked_trace(cx, x, g).map(|t| t.output)
    }

    pub fn masked_trace<T: Scalar>(&self, cx: &Bound<'_, T>, x: Var, g: &Guidance) -> Result<AttentionTrace> {
        let t = cx.tape;
        let (q, k, v) = (self.q.forward(cx, x)?, self.k.forward(cx, x)?, self.v.forward(cx, x)?);
        let (joined, heads) = attend(t, q, k, v, self.heads, g.score_mask())?;
        Ok(AttentionTrace {
            output: self.out.forward(cx, joined)?,
            heads,
        })
    }

    /// Unmasked attention restricted to each frame's `per_frame` tokens.
    pub fn spatial<T: Scalar>(&self, cx: &Bound<'_, T>, x: Var, per_frame: usize) -> Result<Var> {
        let t = cx.tape;
        let n = t.shape(x)[0];
        let (q, k, v) = (self.q.forward(cx, x)?, self.k.forward(cx, x)?, self.v.forward(cx, x)?);
        let mut frames = Vec::with_capacity(n / per_frame);
        for f in 0..n / per_frame {
            let rows = |z: Var| t.narrow(z, 0, f * per_frame, per_frame);
            frames.push(attend(t, rows(q)?, rows(k)?, rows(v)?, self.heads, None)?.0);
        }
        let heads = if frames.len() == 1 { frames[0] } else { t.concat(&frames, 0)? };
        self.out.forward(cx, heads)
    }

    pub fn zero_output<T: Scalar>(&self, store: &mut ParamStore<T>) {
        self.out.zero(store);
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, c: usize, hidden: usize) -> Self {
        Mlp {
            fc1: Linear::new(&mut pb.scope("fc1"), c, hidden, RELU_GAIN),
            fc2: Linear::new(&mut pb.scope("fc2"), hidden, c, 1.0),
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &Bound<'_, T>, x: Var) -> Result<Var> {
        let h = cx.tape.gelu(self.fc1.forward(cx, x)?);
        self.fc2.forward(cx, h)
    }
}

/// One temporal block followed by one spatial block, both pre-norm.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub temporal: Attention,
    pub ln2: LayerNorm,
    pub mlp1: Mlp,
    pub ln3: LayerNorm,
    pub spatial: Attention,
    pub ln4: LayerNorm,
    pub mlp2: Mlp,
}

impl TransformerBlock {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, cfg: &CompletionConfig) -> Self {
        let c = cfg.dim;
        TransformerBlock {
            ln1: LayerNorm::new(&mut pb.scope("ln1"), c),
            temporal: Attention::new(&mut pb.scope("temporal"), c, cfg.heads),
            ln2: LayerNorm::new(&mut pb.scope("ln2"), c),
            mlp1: Mlp::new(&mut pb.scope("mlp1"), c, cfg.mlp_hidden),
            ln3: LayerNorm::new(&mut pb.scope("ln3"), c),
            spatial: Attention::new(&mut pb.scope("spatial"), c, cfg.heads),
            ln4: LayerNorm::new(&mut pb.scope("ln4"), c),
            mlp2: Mlp::new(&mut pb.scope("mlp2"), c, cfg.mlp_hidden),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        cx: &Bound<'_, T>,
        f: Var,
        g: &Guidance,
        per_frame: usize,
        stb_masked: bool,
    ) -> Result<Var> {
        let t = cx.tape;
        let a = self.temporal.masked(cx, self.ln1.forward(cx, f)?, g)?;
        let f1 = t.add(a, f)?;
        let f2 = t.add(self.mlp1.forward(cx, self.ln2.forward(cx, f1)?)?, f1)?;
        let n3 = self.ln3.forward(cx, f2)?;
        let s = if stb_masked {
            self.spatial.masked(cx, n3, g)?
        } else {
            self.spatial.spatial(cx, n3, per_frame)?
        };
        let f3 = t.add(s, f2)?;
        t.add(self.mlp2.forward(cx, self.ln4.forward(cx, f3)?)?, f3)
    }

    /// Zeroes every residual branch's last projection.
    pub fn zero_residuals<T: Scalar>(&self, store: &mut ParamStore<T>) {
        self.temporal.zero_output(store);
        self.spatial.zero_output(store);
        self.mlp1.fc2.zero(store);
        self.mlp2.fc2.zero(store);
    }
}

/// Output of [`CompletionNet::tokenize`].
#[derive(Clone, Debug)]
pub struct Tokens {
    /// `[T*H'W', C_T]`.
    pub f0: Var,
    pub guidance: Guidance,
    pub frames: usize,
    pub grid: (usize, usize),
}

#[derive(Clone, Debug)]
pub struct CompletionNet {
    pub config: CompletionConfig,
    pub embed: Linear,
    pub blocks: Vec<TransformerBlock>,
    pub fuse2: Conv2d,
    pub fuse1: Conv2d,
    pub head: Conv2d,
}

impl CompletionNet {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, cfg: CompletionConfig, base: usize, skip2: usize, skip1: usize) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.dim;
        let blocks = (0..cfg.blocks)
            .map(|l| TransformerBlock::new(&mut pb.scope(&format!("block{l}")), &cfg))
            .collect();
        Ok(CompletionNet {
            config: cfg,
            embed: Linear::new(&mut pb.scope("embed"), base + 1, c, 1.0),
            blocks,
            fuse2: Conv2d::new(&mut pb.scope("fuse2"), c + skip2, 16, 3, 1, RELU_GAIN),
            fuse1: Conv2d::new(&mut pb.scope("fuse1"), 16 + skip1 + 3, 16, 3, 1, RELU_GAIN),
            head: Conv2d::new(&mut pb.scope("head"), 16, 3, 3, 1, 0.01),
        })
    }

    /// Projects base features (plus each token's mask value) to tokens,
    /// adds position encodings and derives the guidance. `masks` holds one
    /// `[H, W]` soft mask per frame.
    pub fn tokenize<T: Scalar>(&self, cx: &Bound<'_, T>, bank: &FeatureBank, masks: &[Var]) -> Result<Tokens> {
        let t = cx.tape;
        if masks.len() != bank.frames {
            return Err(Error::Contract(format!(
                "{} masks for {} frames",
                masks.len(),
                bank.frames
            )));
        }
        let s = t.shape(bank.base);
        let (frames, c, h, w) = (s[0], s[1], s[2], s[3]);
        let hw = h * w;
        let feats = t.reshape(bank.base, &[frames, c, hw])?;
        let feats = t.permute(feats, &[0, 2, 1])?;
        let feats = t.reshape(feats, &[frames * hw, c])?;

        let pooled = masks
            .iter()
            .map(|&m| downsample_mask_guidance(t, m))
            .collect::<Result<Vec<_>>>()?;
        let m_hat = if frames == 1 { pooled[0] } else { t.concat(&pooled, 0)? };
        let m_hat = t.reshape(m_hat, &[frames * hw, 1])?;
        let m_vals: Vec<f64> = t.value(m_hat).data().iter().map(|v| v.as_f64()).collect();
        let mode = self.config.masking;
        let guidance = if self.config.guidance {
            Guidance::build(&m_vals, mode)?
        } else {
            Guidance::none(m_vals.len())
        };

        let x = self.embed.forward(cx, t.concat(&[feats, m_hat], 1)?)?;
        let pe = t.constant(position_encoding(frames, h, w, self.config.dim).cast());
        let f0 = t.add(x, pe)?;
        Ok(Tokens {
            f0,
            guidance,
            frames,
            grid: (h, w),
        })
    }

    pub fn transform<T: Scalar>(&self, cx: &Bound<'_, T>, tokens: &Tokens) -> Result<Var> {
        let per_frame = tokens.grid.0 * tokens.grid.1;
        let mut f = tokens.f0;
        for block in &self.blocks {
            f = block.forward(cx, f, &tokens.guidance, per_frame, self.config.stb_masked)?;
        }
        Ok(f)
    }

    /// Decodes `[T*H'W', C_T]` tokens to `[T, 3, H, W]` frames in `(0, 1)`.
    /// `video` is the `[T, 3, H, W]` input clip and `masks` its `[H, W]`
    /// soft masks. The head predicts a logit offset from the input, faded
    /// out where the mask marks the object.
    pub fn decode<T: Scalar>(&self, cx: &Bound<'_, T>, f: Var, bank: &FeatureBank, video: &Tensor<T>, masks: &[Var]) -> Result<Var> {
        let t = cx.tape;
        let b = t.shape(bank.base);
        let (s2, s1) = (t.shape(bank.skip2), t.shape(bank.skip1));
        let (frames, h, w) = (b[0], b[2], b[3]);
        let c = self.config.dim;
        let x = t.reshape(f, &[frames, h * w, c])?;
        let x = t.permute(x, &[0, 2, 1])?;
        let x = t.reshape(x, &[frames, c, h, w])?;

        let x = t.resample(x, (s2[2], s2[3]), ResampleMode::BilinearUp)?;
        let x = t.relu(self.fuse2.forward(cx, t.concat(&[x, bank.skip2], 1)?)?);
        let x = t.resample(x, (s1[2], s1[3]), ResampleMode::BilinearUp)?;
        let input = t.constant(video.clone());
        let x = t.relu(self.fuse1.forward(cx, t.concat(&[x, bank.skip1, input], 1)?)?);
        let delta = self.head.forward(cx, x)?;

        let (lo, hi) = (LOGIT_EPS, 1.0 - LOGIT_EPS);
        let prior = video.map(|v| {
            let p = v.as_f64().clamp(lo, hi);
            T::lit((p / (1.0 - p)).ln())
        });
        let (vh, vw) = (video.shape()[2], video.shape()[3]);
        let planes = masks
            .iter()
            .map(|&m| {
                let m = t.reshape(m, &[1, 1, vh, vw])?;
                t.concat(&[m, m, m], 1)
            })
            .collect::<Result<Vec<_>>>()?;
        let object = if planes.len() == 1 { planes[0] } else { t.concat(&planes, 0)? };
        let valid = t.add_scalar(t.scale(object, T::lit(-1.0)), T::one());
        let z = t.add(delta, t.mul(valid, t.constant(prior))?)?;
        Ok(t.sigmoid(z))
    }

    pub fn forward<T: Scalar>(
        &self,
        cx: &Bound<'_, T>,
        bank: &FeatureBank,
        masks: &[Var],
        video: &Tensor<T>,
    ) -> Result<(Var, Tokens)> {
        let tokens = self.tokenize(cx, bank, masks)?;
        let f = self.transform(cx, &tokens)?;
        Ok((self.decode(cx, f, bank, video, masks)?, tokens))
    }
}

/// Spatial plus temporal sinusoidal encoding for a frame-major token grid.
pub fn position_encoding(frames: usize, h: usize, w: usize, c: usize) -> Tensor<f64> {
    let spatial = spatial_encoding(h, w, c);
    let hw = h * w;
    let temporal: Vec<Vec<f64>> = (0..frames).map(|t| temporal_encoding(t, c)).collect();
    Tensor::from_fn(&[frames * hw, c], |i| {
        let (tok, ch) = (i / c, i % c);
        spatial.data()[(tok % hw) * c + ch] + temporal[tok / hw][ch]
    })
}

/// Keeps the network output inside `mask >= 0.5` and the input elsewhere.
/// `frames` and `input` are `[T, 3, H, W]`, `masks` is `[T, H, W]`.
pub fn composite<T: Scalar>(frames: &Tensor<T>, input: &Tensor<T>, masks: &Tensor<T>) -> Result<Tensor<T>> {
    if frames.shape() != input.shape() {
        return Err(Error::dim("composite", frames.shape(), input.shape()));
    }
    let s = frames.shape();
    if masks.shape() != [s[0], s[2], s[3]] {
        return Err(Error::dim("composite", s, masks.shape()));
    }
    let (c, hw) = (s[1], s[2] * s[3]);
    let half = T::lit(OBJECT_THRESHOLD);
    Ok(Tensor::from_fn(s, |i| {
        let (f, p) = (i / (c * hw), i % hw);
        if masks.data()[f * hw + p] >= half {
            frames.data()[i]
        } else {
            input.data()[i]
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderConfig, SharedEncoder};
    use crate::gradcheck::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> CompletionConfig {
        CompletionConfig {
            dim: 8,
            heads: 2,
            blocks: 2,
            mlp_hidden: 16,
            ..CompletionConfig::default()
        }
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn guidance_matrix_examples() {
        let g = Guidance::build(&[0.0, 1.0], MaskingMode::PaperLiteral).unwrap();
        assert_eq!(g.g.as_ref().unwrap().data(), &[0.0, 1.0, 1.0, 1.0]);
        let g = Guidance::build(&[0.0; 3], MaskingMode::PaperLiteral).unwrap();
        assert!(g.g.unwrap().data().iter().all(|&v| v == 0.0));
        let g = Guidance::build(&[1.0; 3], MaskingMode::PaperLiteral).unwrap();
        assert!(g.g.unwrap().data().iter().all(|&v| v == 1.0));
        assert!(Guidance::build(&[0.0; 3], MaskingMode::KeySide).unwrap().score_mask().is_none());
        let all = Guidance::build(&[1.0; 3], MaskingMode::KeySide).unwrap();
        assert!(all.score_mask().unwrap().data().iter().all(|&b| b));
        assert!(matches!(Guidance::build(&[1.5], MaskingMode::KeySide), Err(Error::Contract(_))));
    }

    #[test]
    fn guidance_matrix_is_symmetric_and_dominates() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m: Vec<f64> = (0..9).map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 }).collect();
        let g = Guidance::build(&m, MaskingMode::PaperLiteral).unwrap().g.unwrap();
        for i in 0..9 {
            for j in 0..9 {
                let v = g.data()[i * 9 + j];
                assert_eq!(v, g.data()[j * 9 + i]);
                assert!(v >= m[i].max(m[j]) && (0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn mask_scores_examples() {
        let tape = Tape::<f64>::new();
        let s = tape.constant(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let key = Guidance::build(&[0.0, 1.0], MaskingMode::KeySide).unwrap();
        let out = tape.value(mask_scores(&tape, s, &key).unwrap());
        assert_eq!(out.data(), &[1.0, -1e9, 3.0, -1e9]);
        let lit = Guidance::build(&[0.0, 1.0], MaskingMode::PaperLiteral).unwrap();
        let out = tape.value(mask_scores(&tape, s, &lit).unwrap());
        assert_eq!(out.data(), &[-1e9, 2.0, 3.0, 4.0]);
        let out = tape.value(mask_scores(&tape, s, &Guidance::none(2)).unwrap());
        assert_eq!(out.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    fn attention() -> (ParamStore<f64>, Attention) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let att = Attention::new(&mut ParamBuilder::new(&mut store, &mut rng), 8, 2);
        (store, att)
    }

    #[test]
    fn unmasked_guidance_is_plain_attention() {
        let (store, att) = attention();
        let tape = Tape::new();
        let cx = store.bind_frozen(&tape);
        let x = tape.constant(random(&[6, 8], &mut ChaCha8Rng::seed_from_u64(2)));
        let g = Guidance::build(&[0.2; 6], MaskingMode::KeySide).unwrap();
        let a = tape.value(att.masked(&cx, x, &g).unwrap());
        let (q, k, v) = (att.q.forward(&cx, x).unwrap(), att.k.forward(&cx, x).unwrap(), att.v.forward(&cx, x).unwrap());
        let plain = att.out.forward(&cx, attend(&tape, q, k, v, 2, None).unwrap().0).unwrap();
        assert_eq!(*a, *tape.value(plain));
    }

    #[test]
    fn single_background_key_is_copied() {
        let tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (q, k, v) = (random(&[5, 4], &mut rng), random(&[5, 4], &mut rng), random(&[5, 4], &mut rng));
        let g = Guidance::build(&[1.0, 1.0, 0.0, 1.0, 1.0], MaskingMode::KeySide).unwrap();
        let (out, _) = attend(&tape, tape.constant(q), tape.constant(k), tape.constant(v.clone()), 2, g.score_mask()).unwrap();
        let out = tape.value(out);
        for i in 0..5 {
            assert_eq!(&out.data()[i * 4..i * 4 + 4], &v.data()[8..12]);
        }
    }

    #[test]
    fn fully_masked_queries_output_zero() {
        let tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = tape.constant(random(&[3, 4], &mut rng));
        let g = Guidance::build(&[1.0; 3], MaskingMode::KeySide).unwrap();
        let (out, w) = attend(&tape, x, x, x, 2, g.score_mask()).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
        assert!(w.iter().all(|&p| tape.attention_weights(p).unwrap().data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn object_keys_and_values_do_not_leak() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (q, k, v) = (random(&[8, 4], &mut rng), random(&[8, 4], &mut rng), random(&[8, 4], &mut rng));
        let object = [false, true, false, false, true, true, false, false];
        let m: Vec<f64> = object.iter().map(|&o| if o { 0.9 } else { 0.1 }).collect();
        let g = Guidance::build(&m, MaskingMode::KeySide).unwrap();
        let run = |k: &Tensor<f64>, v: &Tensor<f64>| {
            let tape = Tape::new();
            let (qv, kv, vv) = (tape.leaf(q.clone()), tape.leaf(k.clone()), tape.leaf(v.clone()));
            let (out, w) = attend(&tape, qv, kv, vv, 2, g.score_mask()).unwrap();
            for p in w {
                let p = tape.attention_weights(p).unwrap();
                for i in 0..8 {
                    for (j, &o) in object.iter().enumerate() {
                        if o {
                            assert_eq!(p.data()[i * 8 + j], 0.0);
                        }
                    }
                }
            }
            let loss = tape.sum(tape.mul(out, out).unwrap());
            let grads = tape.backward(loss).unwrap();
            (tape.value(out).as_ref().clone(), grads.wrt(qv))
        };
        let (o1, g1) = run(&k, &v);
        let perturb = |t: &Tensor<f64>, rng: &mut ChaCha8Rng| {
            Tensor::from_fn(t.shape(), |i| if object[i / 4] { rng.gen_range(-9.0..9.0) } else { t.data()[i] })
        };
        let (k2, v2) = (perturb(&k, &mut rng), perturb(&v, &mut rng));
        let (o2, g2) = run(&k2, &v2);
        assert_eq!(o1, o2);
        assert_eq!(g1, g2);
    }

    #[test]
    fn spatial_attention_single_frame_is_full_attention() {
        let (store, att) = attention();
        let tape = Tape::new();
        let cx = store.bind_frozen(&tape);
        let x = tape.constant(random(&[6, 8], &mut ChaCha8Rng::seed_from_u64(7)));
        let s = tape.value(att.spatial(&cx, x, 6).unwrap());
        let f = tape.value(att.masked(&cx, x, &Guidance::none(6)).unwrap());
        assert_eq!(*s, *f);
    }

    #[test]
    fn spatial_attention_isolates_frames() {
        let (store, att) = attention();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random(&[12, 8], &mut rng);
        let mut b = a.clone();
        for v in &mut b.data_mut()[4 * 8..8 * 8] {
            *v += rng.gen_range(-2.0..2.0);
        }
        let tape = Tape::new();
        let cx = store.bind_frozen(&tape);
        let ya = tape.value(att.spatial(&cx, tape.constant(a), 4).unwrap());
        let yb = tape.value(att.spatial(&cx, tape.constant(b), 4).unwrap());
        assert_eq!(&ya.data()[..32], &yb.data()[..32]);
        assert_eq!(&ya.data()[64..], &yb.data()[64..]);
        assert_ne!(&ya.data()[32..64], &yb.data()[32..64]);
    }

    #[test]
    fn spatial_attention_symmetric_tokens() {
        let (store, att) = attention();
        let tape = Tape::new();
        let cx = store.bind_frozen(&tape);
        let row: Vec<f64> = (0..8).map(|i| i as f64 * 0.1 - 0.3).collect();
        let x = tape.constant(Tensor::new(&[4, 8], row.repeat(4)).unwrap());
        let y = tape.value(att.spatial(&cx, x, 4).unwrap());
        for r in 1..4 {
            assert_eq!(&y.data()[r * 8..r * 8 + 8], &y.data()[..8]);
        }
    }

    fn block(cfg: &CompletionConfig, seed: u64) -> (ParamStore<f64>, TransformerBlock) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = TransformerBlock::new(&mut ParamBuilder::new(&mut store, &mut rng), cfg);
        (store, b)
    }

    #[test]
    fn zeroed_residual_branches_are_identity() {
        for stb_masked in [false, true] {
            let cfg = small_cfg();
            let (mut store, b) = block(&cfg, 9);
            b.zero_residuals(&mut store);
            let tape = Tape::new();
            let cx = store.bind_frozen(&tape);
            let f = random(&[24, 8], &mut ChaCha8Rng::seed_from_u64(10));
            let g = Guidance::build(&[0.0, 1.0, 0.0].repeat(8), MaskingMode::KeySide).unwrap();
            let out = tape.value(b.forward(&cx, tape.constant(f.clone()), &g, 12, stb_masked).unwrap());
            assert_eq!(*out, f);
        }
    }

    #[test]
    fn block_gradient_matches_finite_differences() {
        let cfg = small_cfg();
        let (store, b) = block(&cfg, 12);
        let g = Guidance::build(&[0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0], MaskingMode::KeySide).unwrap();
        let x = random(&[12, 8], &mut ChaCha8Rng::seed_from_u64(13));
        let err = grad_check(
            |tape, x| {
                let cx = store.bind_frozen(tape);
                let y = b.forward(&cx, x, &g, 6, false)?;
                let w = tape.constant(Tensor::from_fn(&[12, 8], |i| (i as f64 * 0.37).sin()));
                Ok(tape.sum(tape.mul(y, w)?))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "relative error {err}");
    }

    fn encoder_and_net(cfg: CompletionConfig) -> (ParamStore<f64>, SharedEncoder, CompletionNet) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let enc = SharedEncoder::new(&mut pb.scope("encoder"), EncoderConfig::default());
        let net = CompletionNet::new(&mut pb.scope("completion"), cfg, 32, 24, 16).unwrap();
        (store, enc, net)
    }

    #[test]
    fn token_count_and_zero_feature_tokens() {
        let (store, enc, net) = encoder_and_net(CompletionConfig::default());
        let tape = Tape::new();
        let cx = store.bind_frozen(&tape);
        let bank = enc.encode_clip(&cx, tape.constant(Tensor::zeros(&[7, 3, 48, 80]))).unwrap();
        let masks: Vec<Var> = (0..7).map(|_| tape.constant(Tensor::zeros(&[48, 80]))).collect();
        let tokens = net.tokenize(&cx, &bank, &masks).unwrap();
        assert_eq!(tape.shape(tokens.f0), vec![1680, 32]);
        assert_eq!(*tape.value(tokens.f0), position_encoding(7, 12, 20, 32));
        assert!(tokens.guidance.token_object.iter().all(|&o| !o));
        assert!(matches!(net.tokenize(&cx, &bank, &masks[..6]), Err(Error::Contract(_))));
    }

    #[test]
    fn decoded_frames_shape_and_range() {
        let cfg = CompletionConfig { blocks: 1, ..CompletionConfig::default() };
        let (store, enc, net) = encoder_and_net(cfg);
        let tape = Tape::new();
        let cx = store.bind_frozen(&tape);
        let video = Tensor::from_fn(&[2, 3, 48, 80], |i| ((i * 13) % 256) as f64 / 255.0);
        let bank = enc.encode_clip(&cx, tape.constant(video.clone())).unwrap();
        let masks: Vec<Var> = (0..2)
            .map(|_| tape.constant(Tensor::from_fn(&[48, 80], |i| if i % 80 < 10 { 1.0 } else { 0.0 })))
            .collect();
        let (out, _) = net.forward(&cx, &bank, &masks, &video).unwrap();
        let out = tape.value(out);
        assert_eq!(out.shape(), &[2, 3, 48, 80]);
        assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn composite_with_empty_mask_is_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let input = Tensor::from_fn(&[2, 3, 4, 4], |_| rng.gen_range(0.0..1.0));
        let net = Tensor::from_fn(&[2, 3, 4, 4], |_| rng.gen_range(0.0..1.0));
        assert_eq!(composite(&net, &input, &Tensor::zeros(&[2, 4, 4])).unwrap(), input);
        assert_eq!(composite(&net, &input, &Tensor::ones(&[2, 4, 4])).unwrap(), net);
    }
}
