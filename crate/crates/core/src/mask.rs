//! Mask propagation through a key/value memory of past frames.

use crate::autodiff::{ResampleMode, Tape, Var};
use crate::encoder::{EncoderOutput, FeatureBank, KeyValueHead};
use crate::error::{Error, Result};
use crate::nn::{Cbam, Conv2d, RELU_GAIN};
use crate::params::{Bound, ParamBuilder};
use crate::tensor::Scalar;

/// Which frames are written to memory.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MemoryPolicy {
    pub every: usize,
}

impl Default for MemoryPolicy {
    fn default() -> Self {
        MemoryPolicy { every: 5 }
    }
}

impl MemoryPolicy {
    pub fn stores(&self, frame: usize) -> bool {
        frame.is_multiple_of(self.every.max(1))
    }

    /// Memory contents after a clip of `frames` frames has been processed.
    pub fn memory_frames(&self, frames: usize) -> Vec<usize> {
        (0..frames.max(1)).filter(|&t| self.stores(t)).collect()
    }
}

/// Keys `[C_K, N*H'W']` and values `[C_V, N*H'W']` of stored frames.
#[derive(Clone, Debug, Default)]
pub struct KeyValueMemory {
    keys: Option<Var>,
    values: Option<Var>,
    frame_indices: Vec<usize>,
    tokens_per_frame: usize,
}

impl KeyValueMemory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn frame_indices(&self) -> &[usize] {
        &self.frame_indices
    }

    pub fn len(&self) -> usize {
        self.frame_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_indices.is_empty()
    }

    pub fn keys(&self) -> Option<Var> {
        self.keys
    }

    pub fn values(&self) -> Option<Var> {
        self.values
    }

    pub fn tokens(&self) -> usize {
        self.tokens_per_frame * self.frame_indices.len()
    }

    /// Appends already projected `[C_K, H'W']` key and `[C_V, H'W']` value.
    pub fn push<T: Scalar>(&mut self, tape: &Tape<T>, key: Var, value: Var, frame: usize) -> Result<()> {
        if let Some(&last) = self.frame_indices.last() {
            if frame <= last {
                return Err(Error::Contract(format!(
                    "frame {frame} cannot follow frame {last} in memory"
                )));
            }
        }
        let (ks, vs) = (tape.shape(key), tape.shape(value));
        if ks.len() != 2 || vs.len() != 2 || ks[1] != vs[1] {
            return Err(Error::dim("memory_append", &ks, &vs));
        }
        if !self.is_empty() && ks[1] != self.tokens_per_frame {
            return Err(Error::Geometry(format!(
                "frame has {} tokens, memory holds {} per frame",
                ks[1], self.tokens_per_frame
            )));
        }
        self.keys = Some(match self.keys {
            Some(k) => tape.concat(&[k, key], 1)?,
            None => key,
        });
        self.values = Some(match self.values {
            Some(v) => tape.concat(&[v, value], 1)?,
            None => value,
        });
        self.tokens_per_frame = ks[1];
        self.frame_indices.push(frame);
        Ok(())
    }

    /// Projects `enc` and `mask` (`[H, W]`) and stores them as `frame`.
    pub fn append<T: Scalar>(
        &mut self,
        cx: &Bound<'_, T>,
        head: &KeyValueHead,
        enc: &EncoderOutput,
        mask: Var,
        frame: usize,
    ) -> Result<()> {
        if self.frame_indices.contains(&frame) {
            return Err(Error::Contract(format!("frame {frame} is already in memory")));
        }
        let key = head.project_key(cx, enc)?;
        let value = head.project_value(cx, enc, mask)?;
        self.push(cx.tape, key, value, frame)
    }

    /// `[N*H'W', H'W']` affinities; every query column sums to one.
    pub fn similarity<T: Scalar>(&self, tape: &Tape<T>, query_key: Var) -> Result<Var> {
        let keys = self
            .keys
            .ok_or_else(|| Error::Contract("memory read from an empty memory".into()))?;
        let (ks, qs) = (tape.shape(keys), tape.shape(query_key));
        if qs.len() != 2 || qs[0] != ks[0] {
            return Err(Error::dim("memory_read", &ks, &qs));
        }
        let scores = tape.matmul(tape.transpose(keys)?, query_key)?;
        tape.softmax(scores, 0)
    }

    /// `[C_V, H'W']` values for the query frame.
    pub fn read<T: Scalar>(&self, tape: &Tape<T>, query_key: Var) -> Result<Var> {
        let sim = self.similarity(tape, query_key)?;
        let values = self.values.expect("values are stored with keys");
        tape.matmul(values, sim)
    }
}

#[derive(Clone, Debug)]
pub struct MaskPrediction {
    /// `[H, W]` foreground probability.
    pub soft: Var,
    /// `[2, H, W]` class logits; absent for the annotated frame.
    pub logits: Option<Var>,
}

/// Upsampling decoder from memory readout to two-class logits.
#[derive(Clone, Debug)]
pub struct MaskDecoder {
    pub fuse: Conv2d,
    pub refine2: Conv2d,
    pub cbam2: Cbam,
    pub refine1: Conv2d,
    pub cbam1: Cbam,
    pub head: Conv2d,
}

impl MaskDecoder {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, value_dim: usize, base: usize, skip2: usize, skip1: usize) -> Self {
        MaskDecoder {
            fuse: Conv2d::new(&mut pb.scope("fuse"), value_dim + base, 32, 3, 1, RELU_GAIN),
            refine2: Conv2d::new(&mut pb.scope("refine2"), 32 + skip2, 16, 3, 1, RELU_GAIN),
            cbam2: Cbam::new(&mut pb.scope("cbam2"), 16),
            refine1: Conv2d::new(&mut pb.scope("refine1"), 16 + skip1, 8, 3, 1, RELU_GAIN),
            cbam1: Cbam::new(&mut pb.scope("cbam1"), 8),
            head: Conv2d::new(&mut pb.scope("head"), 8, 2, 3, 1, 1.0),
        }
    }

    pub fn decode<T: Scalar>(&self, cx: &Bound<'_, T>, vq: Var, enc: &EncoderOutput) -> Result<MaskPrediction> {
        let t = cx.tape;
        let base = t.shape(enc.base);
        let (s2, s1) = (t.shape(enc.skip2), t.shape(enc.skip1));
        let vs = t.shape(vq);
        if vs.len() != 2 || vs[1] != base[1] * base[2] {
            return Err(Error::Geometry(format!(
                "readout {vs:?} does not match base grid {}x{}",
                base[1], base[2]
            )));
        }
        if s2[1] != 2 * base[1] || s2[2] != 2 * base[2] || s1[1] != 2 * s2[1] || s1[2] != 2 * s2[2] {
            return Err(Error::Geometry(format!(
                "skip scales {s1:?}, {s2:?} do not double the base {base:?}"
            )));
        }
        let vq = t.reshape(vq, &[vs[0], base[1], base[2]])?;
        let x = t.relu(self.fuse.forward(cx, t.concat(&[vq, enc.base], 0)?)?);

        let x = t.resample(x, (s2[1], s2[2]), ResampleMode::BilinearUp)?;
        let x = t.relu(self.refine2.forward(cx, t.concat(&[x, enc.skip2], 0)?)?);
        let x = self.cbam2.forward(cx, x)?;

        let x = t.resample(x, (s1[1], s1[2]), ResampleMode::BilinearUp)?;
        let x = t.relu(self.refine1.forward(cx, t.concat(&[x, enc.skip1], 0)?)?);
        let x = self.cbam1.forward(cx, x)?;

        let logits = self.head.forward(cx, x)?;
        let probs = t.softmax(logits, 0)?;
        let soft = t.narrow(probs, 0, 1, 1)?;
        let soft = t.reshape(soft, &[s1[1], s1[2]])?;
        Ok(MaskPrediction {
            soft,
            logits: Some(logits),
        })
    }
}

/// Key/value head plus decoder.
#[derive(Clone, Debug)]
pub struct MaskHead {
    pub kv: KeyValueHead,
    pub decoder: MaskDecoder,
}

impl MaskHead {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, base: usize, skip2: usize, skip1: usize) -> Self {
        MaskHead {
            kv: KeyValueHead::new(&mut pb.scope("kv"), base, 16, 32),
            decoder: MaskDecoder::new(&mut pb.scope("decoder"), 32, base, skip2, skip1),
        }
    }

    /// Propagates `m0` (`[H, W]`, binary) through the clip. Frame 0 is
    /// returned as given; later frames are decoded from memory, and frames
    /// selected by `policy` are written back with their predicted mask.
    pub fn predict_sequence<T: Scalar>(
        &self,
        cx: &Bound<'_, T>,
        bank: &FeatureBank,
        m0: Var,
        policy: MemoryPolicy,
    ) -> Result<(Vec<MaskPrediction>, KeyValueMemory)> {
        let mut memory = KeyValueMemory::new();
        let mut out = Vec::with_capacity(bank.frames);
        let first = bank.frame(cx.tape, 0)?;
        memory.append(cx, &self.kv, &first, m0, 0)?;
        out.push(MaskPrediction { soft: m0, logits: None });
        for t in 1..bank.frames {
            let enc = bank.frame(cx.tape, t)?;
            let query = self.kv.project_key(cx, &enc)?;
            let vq = memory.read(cx.tape, query)?;
            let pred = self.decoder.decode(cx, vq, &enc)?;
            if policy.stores(t) {
                let value = self.kv.project_value(cx, &enc, pred.soft)?;
                memory.push(cx.tape, query, value, t)?;
            }
            out.push(pred);
        }
        Ok((out, memory))
    }
}
