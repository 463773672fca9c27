//! Object tokens must be invisible to masked attention.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{uniform, Check, SEEDS};
use crate::autodiff::Tape;
use crate::completion::{attend, Guidance, MaskingMode};
use crate::error::Result;
use crate::tensor::Tensor;

/// Tokens, channels and heads of the probe attention.
const TOKENS: usize = 36;
const CHANNELS: usize = 8;
const HEADS: usize = 2;

/// Per-token object flags with at least one object and one background token.
fn object_tokens(rng: &mut ChaCha8Rng) -> Vec<bool> {
    let mut o: Vec<bool> = (0..TOKENS).map(|_| rng.gen_bool(0.3)).collect();
    o[0] = true;
    o[1] = false;
    o
}

struct Run {
    output: Tensor<f64>,
    /// Per head `[N, N]` weights.
    weights: Vec<Tensor<f64>>,
    grad_q: Tensor<f64>,
    grad_k: Tensor<f64>,
    grad_v: Tensor<f64>,
}

fn run(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, g: &Guidance, mask: bool) -> Result<Run> {
    let tape = Tape::new();
    let (qv, kv, vv) = (tape.leaf(q.clone()), tape.leaf(k.clone()), tape.leaf(v.clone()));
    let (out, heads) = attend(&tape, qv, kv, vv, HEADS, if mask { g.score_mask() } else { None })?;
    let w = Tensor::from_fn(&tape.shape(out), |i| (i as f64 * 0.37).cos());
    let loss = tape.sum(tape.mul(tape.mul(out, out)?, tape.constant(w))?);
    let grads = tape.backward(loss)?;
    Ok(Run {
        output: tape.value(out).as_ref().clone(),
        weights: heads.iter().filter_map(|&h| tape.attention_weights(h)).collect(),
        grad_q: grads.wrt(qv),
        grad_k: grads.wrt(kv),
        grad_v: grads.wrt(vv),
    })
}

fn max_object_weight(r: &Run, object: &[bool]) -> f64 {
    let mut worst = 0.0f64;
    for w in &r.weights {
        for i in 0..TOKENS {
            for (j, &o) in object.iter().enumerate() {
                if o {
                    worst = worst.max(w.data()[i * TOKENS + j]);
                }
            }
        }
    }
    worst
}

fn rows(t: &Tensor<f64>, keep: impl Fn(usize) -> bool) -> Vec<f64> {
    let c = t.shape()[1];
    t.data().iter().enumerate().filter(|(i, _)| keep(i / c)).map(|(_, &v)| v).collect()
}

fn linf(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

struct Trial {
    object: Vec<bool>,
    guidance: Guidance,
    q: Tensor<f64>,
    k: Tensor<f64>,
    v: Tensor<f64>,
    k_swapped: Tensor<f64>,
    v_swapped: Tensor<f64>,
}

impl Trial {
    fn new(seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let object = object_tokens(&mut rng);
        let m: Vec<f64> = object.iter().map(|&o| if o { rng.gen_range(0.5..=1.0) } else { rng.gen_range(0.0..0.5) }).collect();
        let guidance = Guidance::build(&m, MaskingMode::KeySide)?;
        let shape = [TOKENS, CHANNELS];
        let (q, k, v) = (uniform(&shape, -2.0, 2.0, &mut rng), uniform(&shape, -2.0, 2.0, &mut rng), uniform(&shape, -2.0, 2.0, &mut rng));
        let mut swap = |t: &Tensor<f64>| Tensor::from_fn(&shape, |i| if object[i / CHANNELS] { rng.gen_range(-50.0..50.0) } else { t.data()[i] });
        let (k_swapped, v_swapped) = (swap(&k), swap(&v));
        Ok(Trial { object, guidance, q, k, v, k_swapped, v_swapped })
    }
}

fn zero_weight_check() -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for seed in SEEDS {
        let t = Trial::new(seed)?;
        worst = worst.max(max_object_weight(&run(&t.q, &t.k, &t.v, &t.guidance, true)?, &t.object));
    }
    Ok((worst == 0.0, format!("max weight on an object key {worst:e}")))
}

fn randomised_object_check() -> Result<(bool, String)> {
    let (mut out, mut grad, mut object_grad) = (0.0f64, 0.0f64, 0.0f64);
    for seed in SEEDS {
        let t = Trial::new(seed)?;
        let a = run(&t.q, &t.k, &t.v, &t.guidance, true)?;
        let b = run(&t.q, &t.k_swapped, &t.v_swapped, &t.guidance, true)?;
        out = out.max(linf(a.output.data(), b.output.data()));
        let background = |j: usize| !t.object[j];
        grad = grad
            .max(linf(a.grad_q.data(), b.grad_q.data()))
            .max(linf(&rows(&a.grad_k, background), &rows(&b.grad_k, background)))
            .max(linf(&rows(&a.grad_v, background), &rows(&b.grad_v, background)));
        for r in [&a, &b] {
            for g in [&r.grad_k, &r.grad_v] {
                object_grad = object_grad.max(rows(g, |j| t.object[j]).iter().fold(0.0, |m, v| m.max(v.abs())));
            }
        }
    }
    Ok((
        out == 0.0 && grad == 0.0 && object_grad == 0.0,
        format!("output L-inf {out:e}, gradient L-inf {grad:e}, object key/value gradient {object_grad:e}"),
    ))
}

fn unguided_check() -> Result<(bool, String)> {
    let mut least = f64::INFINITY;
    for seed in SEEDS {
        let t = Trial::new(seed)?;
        let none = Guidance::none(TOKENS);
        least = least.min(max_object_weight(&run(&t.q, &t.k, &t.v, &none, true)?, &t.object));
    }
    Ok((least > 1e-6, format!("smallest per-trial max object-key weight {least:.3e}")))
}

pub(super) fn checks() -> Vec<Check> {
    vec![
        Check::from_result("object keys get zero weight", zero_weight_check()),
        Check::from_result("randomised object keys/values change nothing", randomised_object_check()),
        Check::from_result("without guidance object keys are attended", unguided_check()),
    ]
}
