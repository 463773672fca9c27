//! Composition of the training objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{uniform, Check, SEEDS};
use crate::autodiff::Tape;
use crate::config::TrainConfig;
use crate::data::{synthesize_snippet, Snippet, SynthConfig};
use crate::error::Result;
use crate::losses::{region_losses, LossBundle};
use crate::model::Generator;
use crate::tensor::Tensor;
use crate::train::Trainer;

fn small(seed: u64) -> TrainConfig {
    let mut c = TrainConfig::default();
    c.seed = seed;
    c.model.completion.blocks = 1;
    c.model.completion.heads = 2;
    c
}

fn snippet(seed: u64) -> Result<Snippet> {
    synthesize_snippet(seed, &SynthConfig { frames: 3, height: 16, width: 24, ..SynthConfig::default() })
}

fn additivity() -> Result<(bool, String)> {
    let mut failures = Vec::new();
    for seed in SEEDS {
        let trainer = Trainer::new(small(seed))?;
        let s = snippet(seed)?;
        let tape = Tape::new();
        let (gcx, dcx) = (trainer.gen_params.bind(&tape), trainer.disc_params.bind(&tape));
        let l = trainer.snippet_losses(&tape, &gcx, &dcx, &s)?;
        let v = |x| tape.value(x).item();
        let summed = ((v(l.mask) + v(l.object)) + v(l.valid)) + v(l.adv);
        if v(l.total) != summed || !l.bundle.is_additive() {
            failures.push(seed);
        }
    }
    let mean = LossBundle::mean(&[LossBundle::new(0.1, 0.2, 0.3, 0.4, 0.5), LossBundle::new(1.0, 3.0, 7.0, 9.0, 0.0)]);
    let ok = failures.is_empty() && mean.is_additive();
    Ok((ok, format!("non-additive seeds {failures:?}, batch mean additive {}", mean.is_additive())))
}

/// A uniform absolute error `e` yields `e` in both regions whatever their sizes.
fn region_cancellation() -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (t, h, w) = (3, 8, 12);
        let gt = uniform(&[t, 3, h, w], 0.2, 0.8, &mut rng);
        let p = rng.gen_range(0.05..0.6);
        let mut mask = Tensor::from_fn(&[t, h, w], |_| if rng.gen_bool(p) { 1.0 } else { 0.0 });
        mask.data_mut()[0] = 1.0;
        mask.data_mut()[1] = 0.0;
        let e = rng.gen_range(0.01..0.2);
        let pred = Tensor::from_fn(gt.shape(), |i| gt.data()[i] + if rng.gen_bool(0.5) { e } else { -e });
        let tape = Tape::<f64>::new();
        let (object, valid) = region_losses(&tape, tape.constant(pred), &gt, &mask)?;
        let err = (tape.value(object).item() - e).abs().max((tape.value(valid).item() - e).abs());
        worst = worst.max(err);
    }
    Ok((worst <= 1e-7, format!("max |loss - e| {worst:e}")))
}

/// Largest mask-head gradient from the completion losses alone.
fn mask_head_gradient(detach: bool, seed: u64) -> Result<f64> {
    let mut cfg = small(seed);
    cfg.model.detach_masks = detach;
    let trainer = Trainer::new(cfg)?;
    let s = snippet(seed)?;
    let tape = Tape::new();
    let (gcx, dcx) = (trainer.gen_params.bind(&tape), trainer.disc_params.bind(&tape));
    let l = trainer.snippet_losses(&tape, &gcx, &dcx, &s)?;
    let completion = tape.add(tape.add(l.object, l.valid)?, l.adv)?;
    let grads = tape.backward(completion)?;
    let mut worst = 0.0f64;
    for id in Generator::mask_params(&trainer.gen_params) {
        if let Some(g) = grads.get(gcx.p(id)) {
            worst = g.data().iter().fold(worst, |m, v| m.max(v.abs() as f64));
        }
    }
    Ok(worst)
}

fn detached_masks() -> Result<(bool, String)> {
    let mut detached = 0.0f64;
    for seed in SEEDS.take(3) {
        detached = detached.max(mask_head_gradient(true, seed)?);
    }
    let attached = mask_head_gradient(false, 0)?;
    Ok((
        detached == 0.0 && attached > 0.0,
        format!("detached max gradient {detached:e}, attached control {attached:e}"),
    ))
}

pub(super) fn checks() -> Vec<Check> {
    vec![
        Check::from_result("total loss is the exact sum of its terms", additivity()),
        Check::from_result("region losses cancel area", region_cancellation()),
        Check::from_result("detached masks receive no completion gradient", detached_masks()),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_loss_checks_pass() {
        for c in checks() {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
