//! Analytic gradients against central differences in 64-bit.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{uniform, Check, SEEDS};
use crate::autodiff::{BoolTensor, ResampleMode, Tape, Var};
use crate::completion::CompletionConfig;
use crate::config::ModelConfig;
use crate::error::Result;
use crate::gradcheck::grad_check;
use crate::losses::{adv_loss, mask_loss, region_losses, Discriminator};
use crate::model::Generator;
use crate::params::{ParamBuilder, ParamStore};
use crate::tensor::Tensor;

pub const TOLERANCE: f64 = 1e-4;
pub const STEP: f64 = 1e-5;

type Scalarised = Box<dyn Fn(&Tape<f64>, Var) -> Result<Var>>;

/// Contracts `y` with fixed weights so every output coordinate matters.
fn project(t: &Tape<f64>, y: Var) -> Result<Var> {
    let w = Tensor::from_fn(&t.shape(y), |i| (i as f64 * 0.71 + 0.3).sin());
    Ok(t.sum(t.mul(y, t.constant(w))?))
}

struct OpCase {
    name: &'static str,
    shape: &'static [usize],
    range: (f64, f64),
    build: fn(&mut ChaCha8Rng) -> Scalarised,
}

fn op<F>(f: F) -> Scalarised
where
    F: Fn(&Tape<f64>, Var) -> Result<Var> + 'static,
{
    Box::new(move |t, x| {
        let y = f(t, x)?;
        project(t, y)
    })
}

fn random_mask(shape: &[usize], rng: &mut ChaCha8Rng) -> Rc<BoolTensor> {
    let mut m = BoolTensor::from_fn(shape, |_| rng.gen_bool(0.3));
    if m.data().iter().all(|&b| b) {
        m = BoolTensor::from_fn(shape, |i| i != 0);
    }
    Rc::new(m)
}

fn cases() -> Vec<OpCase> {
    const M: &[usize] = &[3, 4];
    const SYM: (f64, f64) = (-1.0, 1.0);
    vec![
        OpCase { name: "add", shape: M, range: SYM, build: |r| { let c = uniform(&[3, 4], -1.0, 1.0, r); op(move |t, x| t.add(x, t.constant(c.clone()))) } },
        OpCase { name: "sub", shape: M, range: SYM, build: |r| { let c = uniform(&[3, 4], -1.0, 1.0, r); op(move |t, x| t.sub(t.constant(c.clone()), x)) } },
        OpCase { name: "mul", shape: M, range: SYM, build: |r| { let c = uniform(&[3, 4], -1.0, 1.0, r); op(move |t, x| t.mul(x, t.constant(c.clone()))) } },
        OpCase { name: "square", shape: M, range: SYM, build: |_| op(|t, x| t.mul(x, x)) },
        OpCase { name: "scale", shape: M, range: SYM, build: |_| op(|t, x| Ok(t.scale(x, -1.7))) },
        OpCase { name: "add_scalar", shape: M, range: SYM, build: |_| op(|t, x| Ok(t.add_scalar(x, 0.4))) },
        OpCase { name: "relu", shape: M, range: SYM, build: |_| op(|t, x| Ok(t.relu(x))) },
        OpCase { name: "gelu", shape: M, range: (-3.0, 3.0), build: |_| op(|t, x| Ok(t.gelu(x))) },
        OpCase { name: "sigmoid", shape: M, range: (-4.0, 4.0), build: |_| op(|t, x| Ok(t.sigmoid(x))) },
        OpCase { name: "exp", shape: M, range: SYM, build: |_| op(|t, x| Ok(t.exp(x))) },
        OpCase { name: "log", shape: M, range: (0.5, 2.0), build: |_| op(|t, x| Ok(t.log(x))) },
        OpCase { name: "abs", shape: M, range: SYM, build: |_| op(|t, x| Ok(t.abs(x))) },
        OpCase { name: "clamp", shape: M, range: SYM, build: |_| op(|t, x| Ok(t.clamp(x, -0.5, 0.5))) },
        OpCase { name: "sum", shape: M, range: SYM, build: |_| Box::new(|t, x| Ok(t.sum(t.mul(x, x)?))) },
        OpCase { name: "mean", shape: M, range: SYM, build: |_| Box::new(|t, x| Ok(t.mean(t.mul(x, x)?))) },
        OpCase { name: "mean_axis", shape: &[2, 3, 4], range: SYM, build: |_| op(|t, x| t.mean_axis(x, 1)) },
        OpCase { name: "max_axis", shape: &[2, 3, 4], range: SYM, build: |_| op(|t, x| t.max_axis(x, 2)) },
        OpCase { name: "masked_fill", shape: M, range: SYM, build: |r| { let m = random_mask(&[3, 4], r); op(move |t, x| t.masked_fill(x, m.clone(), -3.0)) } },
        OpCase { name: "matmul_left", shape: M, range: SYM, build: |r| { let c = uniform(&[4, 5], -1.0, 1.0, r); op(move |t, x| t.matmul(x, t.constant(c.clone()))) } },
        OpCase { name: "matmul_right", shape: M, range: SYM, build: |r| { let c = uniform(&[2, 3], -1.0, 1.0, r); op(move |t, x| t.matmul(t.constant(c.clone()), x)) } },
        OpCase { name: "reshape", shape: M, range: SYM, build: |_| op(|t, x| t.reshape(x, &[2, 6])) },
        OpCase { name: "permute", shape: &[2, 3, 4], range: SYM, build: |_| op(|t, x| t.permute(x, &[2, 0, 1])) },
        OpCase { name: "transpose", shape: M, range: SYM, build: |_| op(|t, x| t.transpose(x)) },
        OpCase { name: "narrow", shape: &[2, 5, 3], range: SYM, build: |_| op(|t, x| t.narrow(x, 1, 1, 3)) },
        OpCase { name: "concat", shape: M, range: SYM, build: |r| { let c = uniform(&[3, 2], -1.0, 1.0, r); op(move |t, x| t.concat(&[t.constant(c.clone()), x], 1)) } },
        OpCase { name: "softmax_rows", shape: M, range: (-2.0, 2.0), build: |_| op(|t, x| t.softmax(x, 1)) },
        OpCase { name: "softmax_columns", shape: M, range: (-2.0, 2.0), build: |_| op(|t, x| t.softmax(x, 0)) },
        OpCase { name: "log_softmax", shape: &[2, 3, 4], range: (-2.0, 2.0), build: |_| op(|t, x| t.log_softmax(x, 1)) },
        OpCase { name: "masked_softmax", shape: M, range: (-2.0, 2.0), build: |r| { let m = random_mask(&[3, 4], r); op(move |t, x| t.masked_softmax(x, Some(m.clone()), 0.6)) } },
        OpCase { name: "attention_query", shape: &[4, 3], range: SYM, build: |r| {
            let (k, v, m) = (uniform(&[5, 3], -1.0, 1.0, r), uniform(&[5, 2], -1.0, 1.0, r), random_mask(&[4, 5], r));
            op(move |t, x| t.attention(x, t.constant(k.clone()), t.constant(v.clone()), Some(m.clone()), 0.6))
        } },
        OpCase { name: "attention_key", shape: &[5, 3], range: SYM, build: |r| {
            let (q, v, m) = (uniform(&[4, 3], -1.0, 1.0, r), uniform(&[5, 2], -1.0, 1.0, r), random_mask(&[4, 5], r));
            op(move |t, x| t.attention(t.constant(q.clone()), x, t.constant(v.clone()), Some(m.clone()), 0.6))
        } },
        OpCase { name: "attention_value", shape: &[5, 2], range: SYM, build: |r| {
            let (q, k, m) = (uniform(&[4, 3], -1.0, 1.0, r), uniform(&[5, 3], -1.0, 1.0, r), random_mask(&[4, 5], r));
            op(move |t, x| t.attention(t.constant(q.clone()), t.constant(k.clone()), x, Some(m.clone()), 0.6))
        } },
        OpCase { name: "layer_norm_input", shape: &[3, 5], range: SYM, build: |r| {
            let (g, b) = (uniform(&[5], 0.5, 1.5, r), uniform(&[5], -0.5, 0.5, r));
            op(move |t, x| t.layer_norm(x, t.constant(g.clone()), t.constant(b.clone()), 1e-5))
        } },
        OpCase { name: "layer_norm_affine", shape: &[5], range: (0.5, 1.5), build: |r| {
            let (x, b) = (uniform(&[3, 5], -1.0, 1.0, r), uniform(&[5], -0.5, 0.5, r));
            op(move |t, g| t.layer_norm(t.constant(x.clone()), g, t.constant(b.clone()), 1e-5))
        } },
        OpCase { name: "conv2d_input", shape: &[2, 5, 6], range: SYM, build: |r| {
            let (w, b) = (uniform(&[3, 2, 3, 3], -0.5, 0.5, r), uniform(&[3], -0.5, 0.5, r));
            op(move |t, x| t.conv2d(x, t.constant(w.clone()), Some(t.constant(b.clone())), 1, 1))
        } },
        OpCase { name: "conv2d_weight_strided", shape: &[3, 2, 3, 3], range: (-0.5, 0.5), build: |r| {
            let x = uniform(&[2, 2, 7, 6], -1.0, 1.0, r);
            op(move |t, w| t.conv2d(t.constant(x.clone()), w, None, 2, 1))
        } },
        OpCase { name: "conv2d_bias", shape: &[3], range: (-0.5, 0.5), build: |r| {
            let (x, w) = (uniform(&[2, 4, 5], -1.0, 1.0, r), uniform(&[3, 2, 1, 1], -0.5, 0.5, r));
            op(move |t, b| t.conv2d(t.constant(x.clone()), t.constant(w.clone()), Some(b), 1, 0))
        } },
        OpCase { name: "conv3d_input", shape: &[2, 3, 4, 5], range: SYM, build: |r| {
            let w = uniform(&[2, 2, 3, 3, 3], -0.5, 0.5, r);
            op(move |t, x| t.conv3d(x, t.constant(w.clone()), None, [1, 2, 2], [1, 1, 1]))
        } },
        OpCase { name: "conv3d_weight", shape: &[2, 2, 3, 3, 3], range: (-0.5, 0.5), build: |r| {
            let x = uniform(&[2, 3, 4, 5], -1.0, 1.0, r);
            op(move |t, w| t.conv3d(t.constant(x.clone()), w, None, [2, 1, 1], [1, 1, 1]))
        } },
        OpCase { name: "avg_pool", shape: &[2, 6, 7], range: SYM, build: |_| op(|t, x| t.resample(x, (3, 3), ResampleMode::AdaptiveAvgPool)) },
        OpCase { name: "max_pool", shape: &[2, 6, 7], range: SYM, build: |_| op(|t, x| t.resample(x, (3, 3), ResampleMode::MaxPool)) },
        OpCase { name: "bilinear_up", shape: &[2, 3, 4], range: SYM, build: |_| op(|t, x| t.resample(x, (6, 8), ResampleMode::BilinearUp)) },
        OpCase { name: "nearest_up", shape: &[2, 3, 4], range: SYM, build: |_| op(|t, x| t.resample(x, (6, 8), ResampleMode::NearestUp)) },
    ]
}

fn op_check(case: &OpCase) -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = (case.build)(&mut rng);
        let x = uniform(case.shape, case.range.0, case.range.1, &mut rng);
        worst = worst.max(grad_check(&f, &x, STEP)?);
    }
    Ok((worst <= TOLERANCE, format!("max relative error {worst:.2e}")))
}

/// A small end-to-end generator plus discriminator in 64-bit: two blocks,
/// two frames, a 3x4 token grid.
fn end_to_end_config() -> ModelConfig {
    ModelConfig {
        completion: CompletionConfig {
            dim: 8,
            heads: 2,
            blocks: 2,
            mlp_hidden: 16,
            ..CompletionConfig::default()
        },
        ..ModelConfig::default()
    }
}

struct EndToEnd {
    store: ParamStore<f64>,
    gen: Generator,
    disc: Discriminator,
    video: Tensor<f64>,
    clean: Tensor<f64>,
    masks: Tensor<f64>,
}

impl EndToEnd {
    fn new(seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let gen = Generator::new(&mut store, &mut rng, end_to_end_config())?;
        let disc = Discriminator::new(&mut ParamBuilder::new(&mut store, &mut rng).scope("disc"));
        let (t, h, w) = (2, 12, 16);
        let video = uniform(&[t, 3, h, w], 0.05, 0.95, &mut rng);
        let clean = uniform(&[t, 3, h, w], 0.05, 0.95, &mut rng);
        let (r0, c0) = (rng.gen_range(0..6), rng.gen_range(0..8));
        let masks = Tensor::from_fn(&[t, h, w], |i| {
            let (f, y, x) = (i / (h * w), (i / w) % h, i % w);
            let (y0, x0) = (r0 + f, c0 + f);
            (y >= y0 && y < y0 + 5 && x >= x0 && x < x0 + 6) as u8 as f64
        });
        Ok(EndToEnd { store, gen, disc, video, clean, masks })
    }

    /// Sum of every generator loss term.
    fn loss(&self, tape: &Tape<f64>, store: &ParamStore<f64>, trainable: bool) -> Result<(Var, Vec<Var>)> {
        let cx = if trainable { store.bind(tape) } else { store.bind_frozen(tape) };
        let m0 = self.masks.narrow(0, 0, 1)?.reshaped(&self.masks.shape()[1..])?;
        let out = self.gen.forward(&cx, &self.video, &m0)?;
        let logits: Vec<Var> = out.masks[1..].iter().filter_map(|p| p.logits).collect();
        let gt = vec![self.masks.narrow(0, 1, 1)?.reshaped(&self.masks.shape()[1..])?];
        let l_mask = mask_loss(tape, &logits, &gt)?;
        let (object, valid) = region_losses(tape, out.frames, &self.clean, &self.masks)?;
        let adv = adv_loss(tape, tape.sum(self.disc.forward(&cx, out.frames)?));
        let total = tape.add(tape.add(tape.add(l_mask, object)?, valid)?, adv)?;
        Ok((total, cx.vars().to_vec()))
    }

    fn eval(&self, store: &ParamStore<f64>) -> Result<f64> {
        let tape = Tape::new();
        Ok(tape.value(self.loss(&tape, store, false)?.0).item())
    }

    /// Checks `per_tensor` seeded coordinates of every parameter tensor.
    fn worst_error(&self, per_tensor: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
        let tape = Tape::new();
        let (root, vars) = self.loss(&tape, &self.store, true)?;
        let grads = tape.backward(root)?;
        let mut worst = 0.0f64;
        let mut probe = self.store.clone();
        for (i, &v) in vars.iter().enumerate() {
            let analytic = grads.wrt(v);
            for _ in 0..per_tensor {
                let j = rng.gen_range(0..analytic.numel());
                let x0 = self.store.tensors()[i].data()[j];
                probe.tensors_mut()[i].data_mut()[j] = x0 + STEP;
                let plus = self.eval(&probe)?;
                probe.tensors_mut()[i].data_mut()[j] = x0 - STEP;
                let minus = self.eval(&probe)?;
                probe.tensors_mut()[i].data_mut()[j] = x0;
                let numeric = (plus - minus) / (2.0 * STEP);
                let a = analytic.data()[j];
                worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
            }
        }
        Ok(worst)
    }
}

fn end_to_end_check() -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for seed in SEEDS {
        let model = EndToEnd::new(seed)?;
        worst = worst.max(model.worst_error(8, &mut ChaCha8Rng::seed_from_u64(100 + seed))?);
    }
    Ok((worst <= TOLERANCE, format!("max relative error {worst:.2e} over sampled parameters")))
}

pub(super) fn checks() -> Vec<Check> {
    let mut out: Vec<Check> = cases().iter().map(|c| Check::from_result(format!("op {}", c.name), op_check(c))).collect();
    out.push(Check::from_result("end-to-end model", end_to_end_check()));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_case_passes() {
        for c in cases() {
            let (ok, detail) = op_check(&c).unwrap();
            assert!(ok, "{}: {detail}", c.name);
        }
    }

    #[test]
    fn end_to_end_loss_reaches_the_first_encoder_layer() {
        let model = EndToEnd::new(0).unwrap();
        let tape = Tape::new();
        let (root, vars) = model.loss(&tape, &model.store, true).unwrap();
        let g = tape.backward(root).unwrap().wrt(vars[0]);
        assert!(g.data().iter().any(|&v| v != 0.0));
    }
}
