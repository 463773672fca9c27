//! Joint training of generator and discriminator.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::config::TrainConfig;
use crate::data::Snippet;
use crate::error::{Error, Result};
use crate::losses::{adv_loss, dis_loss, mask_loss, region_losses, Discriminator, LossBundle};
use crate::model::Generator;
use crate::optim::{AdamConfig, AdamState};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Losses of one snippet on its tape, plus the roots to differentiate.
pub struct SnippetLosses {
    pub bundle: LossBundle,
    pub total: Var,
    /// Negated discriminator criterion; `None` without the adversarial term.
    pub dis_objective: Option<Var>,
    pub object: Var,
    pub valid: Var,
    pub adv: Var,
    pub mask: Var,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub gen_params: ParamStore<f32>,
    pub disc_params: ParamStore<f32>,
    pub gen_adam: AdamState<f32>,
    pub disc_adam: AdamState<f32>,
    pub step: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut gen_params = ParamStore::new();
        let generator = Generator::new(&mut gen_params, &mut rng, config.model)?;
        let mut disc_params = ParamStore::new();
        let discriminator = Discriminator::new(&mut crate::params::ParamBuilder::new(&mut disc_params, &mut rng).scope("disc"));
        let adam = AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        };
        Ok(Trainer {
            gen_adam: AdamState::new(adam, gen_params.tensors()),
            disc_adam: AdamState::new(adam, disc_params.tensors()),
            config,
            generator,
            discriminator,
            gen_params,
            disc_params,
            step: 0,
        })
    }

    /// Snippet indices used at `step`: a fresh permutation per step drawn
    /// from a stream keyed by the step, so resumption needs no RNG state.
    pub fn batch_indices(&self, step: u64, available: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x05ee_d0fb_a7c4);
        rng.set_stream(step);
        let mut out = Vec::with_capacity(self.config.batch);
        while out.len() < self.config.batch {
            let mut perm: Vec<usize> = (0..available).collect();
            perm.shuffle(&mut rng);
            out.extend(perm.into_iter().take(self.config.batch - out.len()));
        }
        out
    }

    /// Builds every loss for one snippet on `tape`.
    pub fn snippet_losses(
        &self,
        tape: &Tape<f32>,
        gcx: &crate::params::Bound<'_, f32>,
        dcx: &crate::params::Bound<'_, f32>,
        s: &Snippet,
    ) -> Result<SnippetLosses> {
        let out = self.generator.forward(gcx, &s.input, &s.first_mask())?;
        let frames = s.frames();
        let zero = || tape.constant(Tensor::scalar(0.0f32));

        let mask = if self.config.no_mask_loss || frames < 2 {
            zero()
        } else {
            let logits: Vec<Var> = out.masks[1..].iter().map(|p| p.logits.expect("decoded frame")).collect();
            let gt: Vec<Tensor<f32>> = (1..frames)
                .map(|t| {
                    let m = s.masks.narrow(0, t, 1)?;
                    let sh = m.shape()[1..].to_vec();
                    m.reshaped(&sh)
                })
                .collect::<Result<_>>()?;
            mask_loss(tape, &logits, &gt)?
        };
        let (object, valid) = region_losses(tape, out.frames, &s.clean, &s.masks)?;

        let (adv, dis) = if self.config.no_gan {
            (zero(), None)
        } else {
            let d_fake = self.discriminator.forward(dcx, out.frames)?;
            let adv = adv_loss(tape, tape.sum(d_fake));
            let d_real = self.discriminator.forward(dcx, tape.constant(s.clean.clone()))?;
            let d_fake_det = self.discriminator.forward(dcx, tape.detach(out.frames))?;
            let l_dis = dis_loss(tape, tape.sum(d_real), tape.sum(d_fake_det))?;
            (adv, Some(l_dis))
        };
        let total = tape.add(tape.add(tape.add(mask, object)?, valid)?, adv)?;

        let v = |x: Var| tape.value(x).item() as f64;
        let bundle = LossBundle::new(v(mask), v(object), v(valid), v(adv), dis.map_or(0.0, v));
        let named = [("l_mask", mask), ("l_object", object), ("l_valid", valid), ("l_adv", adv), ("l_total", total)];
        for (name, x) in named.into_iter().chain(dis.map(|d| ("l_dis", d))) {
            if !tape.value(x).is_finite() {
                return Err(Error::NonFinite { name: name.into() });
            }
        }
        Ok(SnippetLosses {
            bundle,
            total,
            dis_objective: dis.map(|d| tape.scale(d, -1.0)),
            object,
            valid,
            adv,
            mask,
        })
    }

    /// One optimisation step on `batch`. Both gradients come from the
    /// current parameters; the discriminator update is applied first.
    pub fn train_step(&mut self, batch: &[&Snippet]) -> Result<LossBundle> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let scale = 1.0 / batch.len() as f32;
        let mut gen_grads = self.gen_params.zeros_like();
        let mut disc_grads = self.disc_params.zeros_like();
        let mut bundles = Vec::with_capacity(batch.len());
        for s in batch {
            let tape = Tape::new();
            let gcx = self.gen_params.bind(&tape);
            let dcx = self.disc_params.bind(&tape);
            let l = self.snippet_losses(&tape, &gcx, &dcx, s)?;
            let g = tape.backward(l.total)?;
            accumulate(&mut gen_grads, gcx.vars().iter().map(|&v| g.get(v)), scale, "generator")?;
            drop(g);
            if let Some(d) = l.dis_objective {
                let g = tape.backward(d)?;
                accumulate(&mut disc_grads, dcx.vars().iter().map(|&v| g.get(v)), scale, "discriminator")?;
            }
            bundles.push(l.bundle);
        }
        if !self.config.no_gan {
            self.disc_adam.update(self.disc_params.tensors_mut(), &disc_grads)?;
        }
        self.gen_adam.update(self.gen_params.tensors_mut(), &gen_grads)?;
        self.step += 1;
        let bundle = LossBundle::mean(&bundles);
        bundle.check_finite()?;
        Ok(bundle)
    }

    /// Runs the step for `self.step` on the configured batch selection.
    pub fn step_on(&mut self, data: &[Snippet]) -> Result<LossBundle> {
        if data.is_empty() {
            return Err(Error::Contract("no snippets to train on".into()));
        }
        let idx = self.batch_indices(self.step, data.len());
        let batch: Vec<&Snippet> = idx.iter().map(|&i| &data[i]).collect();
        self.train_step(&batch)
    }
}

pub const LOG_FILE: &str = "train.log";
pub const CHECKPOINT_FILE: &str = "checkpoint.osvc";

/// Keeps the log lines of steps before `step`, so a resumed run appends
/// exactly where its checkpoint left off.
fn truncate_log(path: &Path, step: u64) -> Result<()> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(Error::io(path, e)),
    };
    let kept: String = text
        .lines()
        .filter(|l| l.split('\t').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s < step))
        .map(|l| format!("{l}\n"))
        .collect();
    std::fs::write(path, kept).map_err(|e| Error::io(path, e))
}

/// Trains from `trainer.step` up to `config.iterations`, writing one log
/// line per step to `out_dir/train.log` and to `echo`, and a checkpoint
/// every `checkpoint_every` steps and after the last one.
pub fn run(trainer: &mut Trainer, data: &[Snippet], out_dir: &Path, echo: &mut dyn Write) -> Result<Option<LossBundle>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join(LOG_FILE);
    let ckpt = out_dir.join(CHECKPOINT_FILE);
    truncate_log(&log_path, trainer.step)?;
    let mut log = std::fs::OpenOptions::new()
        .append(true)
        .create(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut last = None;
    while trainer.step < trainer.config.iterations {
        let step = trainer.step;
        let bundle = trainer.step_on(data)?;
        let line = bundle.log_line(step);
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
        let _ = writeln!(echo, "{line}");
        last = Some(bundle);
        let every = trainer.config.checkpoint_every;
        if every > 0 && trainer.step.is_multiple_of(every) {
            crate::checkpoint::save(trainer, &ckpt)?;
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    crate::checkpoint::save(trainer, &ckpt)?;
    Ok(last)
}

fn accumulate<'a>(
    acc: &mut [Tensor<f32>],
    grads: impl Iterator<Item = Option<&'a Tensor<f32>>>,
    scale: f32,
    what: &str,
) -> Result<()> {
    for (a, g) in acc.iter_mut().zip(grads) {
        if let Some(g) = g {
            if !g.is_finite() {
                return Err(Error::NonFinite {
                    name: format!("{what} gradient"),
                });
            }
            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                *x += scale * y;
            }
        }
    }
    Ok(())
}
