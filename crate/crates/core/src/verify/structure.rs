//! Structural identities of the network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{uniform, Check, SEEDS};
use crate::autodiff::Tape;
use crate::completion::{Attention, CompletionConfig, Guidance, MaskingMode, TransformerBlock};
use crate::config::ModelConfig;
use crate::encoder::{EncoderConfig, SharedEncoder};
use crate::error::Result;
use crate::mask::{KeyValueMemory, MaskHead};
use crate::model::{infer, Generator};
use crate::params::{ParamBuilder, ParamStore};
use crate::tensor::Tensor;

const GRID: usize = 12;
const FRAMES: usize = 3;
const DIM: usize = 8;

fn random_mask(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 }).collect()
}

fn residual_identity() -> Result<(bool, String)> {
    let cfg = CompletionConfig { dim: DIM, heads: 2, blocks: 1, mlp_hidden: 16, ..CompletionConfig::default() };
    let mut worst = 0.0f64;
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let block = TransformerBlock::new(&mut ParamBuilder::new(&mut store, &mut rng), &cfg);
        block.zero_residuals(&mut store);
        let f = uniform(&[FRAMES * GRID, DIM], -3.0, 3.0, &mut rng);
        let g = Guidance::build(&random_mask(&mut rng, FRAMES * GRID), MaskingMode::KeySide)?;
        for stb_masked in [false, true] {
            let tape = Tape::new();
            let cx = store.bind_frozen(&tape);
            let out = tape.value(block.forward(&cx, tape.constant(f.clone()), &g, GRID, stb_masked)?);
            worst = worst.max(out.max_abs_diff(&f));
        }
    }
    Ok((worst == 0.0, format!("max deviation from identity {worst:e}")))
}

/// Perturbing one frame's tokens changes only that frame's outputs.
fn frame_isolation() -> Result<(bool, String)> {
    let (mut leaked, mut unchanged) = (0.0f64, 0usize);
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let att = Attention::new(&mut ParamBuilder::new(&mut store, &mut rng), DIM, 2);
        let a = uniform(&[FRAMES * GRID, DIM], -1.0, 1.0, &mut rng);
        let frame = rng.gen_range(0..FRAMES);
        let span = frame * GRID * DIM..(frame + 1) * GRID * DIM;
        let mut b = a.clone();
        for v in &mut b.data_mut()[span.clone()] {
            *v += rng.gen_range(-2.0..2.0);
        }
        let tape = Tape::new();
        let cx = store.bind_frozen(&tape);
        let ya = tape.value(att.spatial(&cx, tape.constant(a), GRID)?);
        let yb = tape.value(att.spatial(&cx, tape.constant(b), GRID)?);
        for (i, (x, y)) in ya.data().iter().zip(yb.data()).enumerate() {
            if !span.contains(&i) {
                leaked = leaked.max((x - y).abs());
            }
        }
        if ya.data()[span.clone()] == yb.data()[span] {
            unchanged += 1;
        }
    }
    Ok((
        leaked == 0.0 && unchanged == 0,
        format!("max change outside the perturbed frame {leaked:e}, perturbed frames left unchanged {unchanged}"),
    ))
}

/// Memory affinities from the real encoder and key head.
fn memory_columns() -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let enc_cfg = EncoderConfig::default();
        let enc = SharedEncoder::new(&mut pb.scope("encoder"), enc_cfg);
        let head = MaskHead::new(&mut pb.scope("mask"), enc_cfg.base, enc_cfg.skip2, enc_cfg.skip1);
        let clip = uniform(&[3, 3, 16, 24], 0.0, 1.0, &mut rng);
        let tape = Tape::new();
        let cx = store.bind_frozen(&tape);
        let bank = enc.encode_clip(&cx, tape.constant(clip))?;
        let mut mem = KeyValueMemory::new();
        for f in 0..2 {
            let m = tape.constant(Tensor::from_fn(&[16, 24], |_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 }));
            mem.append(&cx, &head.kv, &bank.frame(&tape, f)?, m, f)?;
        }
        let q = head.kv.project_key(&cx, &bank.frame(&tape, 2)?)?;
        let sim = tape.value(mem.similarity(&tape, q)?);
        let (n, m) = (sim.shape()[0], sim.shape()[1]);
        for j in 0..m {
            let s: f64 = (0..n).map(|i| sim.data()[i * m + j]).sum();
            worst = worst.max((s - 1.0).abs());
        }
    }
    Ok((worst <= 1e-6, format!("max |column sum - 1| {worst:e}")))
}

fn first_frame_passthrough() -> Result<(bool, String)> {
    let mut cfg = ModelConfig::default();
    cfg.completion.blocks = 1;
    cfg.completion.heads = 2;
    let mut mismatched = 0usize;
    for seed in SEEDS.take(3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f32>::new();
        let gen = Generator::new(&mut store, &mut rng, cfg)?;
        let video = Tensor::from_fn(&[3, 3, 16, 24], |_| rng.gen_range(0.0f32..1.0));
        let m0 = Tensor::from_fn(&[16, 24], |_| if rng.gen_bool(0.3) { 1.0f32 } else { 0.0 });
        let out = infer(&gen, &store, &video, &m0, false)?;
        if out.masks.data()[..16 * 24] != *m0.data() {
            mismatched += 1;
        }
    }
    Ok((mismatched == 0, format!("{mismatched} of 3 clips altered the frame-0 mask")))
}

pub(super) fn checks() -> Vec<Check> {
    vec![
        Check::from_result("zeroed residual branches are identity", residual_identity()),
        Check::from_result("spatial attention isolates frames", frame_isolation()),
        Check::from_result("memory similarity columns sum to one", memory_columns()),
        Check::from_result("frame-0 mask passes through", first_frame_passthrough()),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_structure_checks_pass() {
        for c in checks() {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
