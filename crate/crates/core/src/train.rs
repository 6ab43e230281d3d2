//! Symmetric contrastive objective, AdamW with per-group decay, the
//! warmup/cosine schedule and the training loop.

use std::io::Write;
use std::path::PathBuf;

use msclip_numerics::{NumericsError, Scalar, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::config::{ExperimentConfig, OptimConfig, ScheduleConfig};
use crate::data::stack_images;
use crate::error::{config, input, io_err, MsClipError, Result};
use crate::model::{MsClipModel, Trace};
use crate::params::{Group, ParamStore};
use crate::tokenizer::{TokenIds, Tokenizer};

/// Largest tolerated deviation of an embedding row norm from 1.
pub const NORM_TOLERANCE: f64 = 1e-3;

fn check_normalized<T: Scalar>(tape: &Tape<'_, T>, v: Var, which: &str) -> Result<()> {
    let shape = tape.shape(v);
    let d = *shape.last().unwrap_or(&1);
    for (i, row) in tape.value(v).chunks(d.max(1)).enumerate() {
        let n = row.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt();
        if (n - 1.0).abs() > NORM_TOLERANCE {
            return Err(MsClipError::Contract(format!("{which} row {i} has norm {n}, expected 1")));
        }
    }
    Ok(())
}

/// Mean of the image→text and text→image cross-entropies over the
/// `exp(logit_scale)`-scaled cosine similarities, with matching rows as
/// targets.
pub fn contrastive_loss<T: Scalar>(tape: &mut Tape<'_, T>, img: Var, txt: Var, logit_scale: Var) -> Result<Var> {
    let (si, st) = (tape.shape(img).to_vec(), tape.shape(txt).to_vec());
    if si.len() != 2 || si != st {
        return Err(MsClipError::Contract(format!("embedding shapes {si:?} and {st:?} must be equal [N, D]")));
    }
    if si[0] < 2 {
        return Err(MsClipError::Contract(format!("contrastive loss needs N >= 2, got {}", si[0])));
    }
    check_normalized(tape, img, "image embedding")?;
    check_normalized(tape, txt, "text embedding")?;
    let n = si[0];
    let targets: Vec<usize> = (0..n).collect();
    let txt_t = tape.transpose(txt)?;
    let sims = tape.matmul(img, txt_t)?;
    let scale = tape.exp(logit_scale)?;
    let logits = tape.mul_scalar(sims, scale)?;
    let i2t = tape.cross_entropy(logits, &targets)?;
    let logits_t = tape.transpose(logits)?;
    let t2i = tape.cross_entropy(logits_t, &targets)?;
    let both = tape.add(i2t, t2i)?;
    Ok(tape.scale(both, 0.5)?)
}

/// Contrastive loss of fixed embedding tensors.
pub fn contrastive_loss_value<T: Scalar>(img: &Tensor<T>, txt: &Tensor<T>, logit_scale: f64) -> Result<f64> {
    let mut tape = Tape::inference();
    let (i, t) = (tape.constant(img.clone()), tape.constant(txt.clone()));
    let s = tape.constant(Tensor::scalar(T::of(logit_scale)));
    let l = contrastive_loss(&mut tape, i, t, s)?;
    Ok(tape.item(l)?.as_f64())
}

/// Linear warmup from 0 to `lr_max`, then cosine decay to `lr_min`.
pub fn lr_at(step: usize, s: &ScheduleConfig) -> Result<f64> {
    let total = s.total_steps();
    let warm = s.warmup_steps();
    if step > total {
        return Err(MsClipError::Contract(format!("step {step} beyond schedule end {total}")));
    }
    if step < warm {
        return Ok(s.lr_max * step as f64 / warm as f64);
    }
    if total == warm {
        return Ok(s.lr_min);
    }
    let progress = (step - warm) as f64 / (total - warm) as f64;
    Ok(s.lr_min + (s.lr_max - s.lr_min) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Decoupled-decay Adam with one decay rate per parameter group.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub cfg: OptimConfig,
    pub step: usize,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: OptimConfig, store: &ParamStore<T>) -> Self {
        let zeros = |p: &crate::params::Param<T>| vec![T::zero(); p.tensor.numel()];
        Self {
            cfg,
            step: 0,
            m: store.params().iter().map(zeros).collect(),
            v: store.params().iter().map(zeros).collect(),
        }
    }

    /// Shared weights decay at the shared rate, modality-specific ones at
    /// the specific rate; the temperature is not decayed.
    pub fn decay_rate(&self, g: Group) -> f64 {
        match g {
            Group::Shared => self.cfg.weight_decay_shared,
            Group::Vision | Group::Text => self.cfg.weight_decay_specific,
            Group::Global => 0.0,
        }
    }

    /// Applies one update from the gradients held in `store`. Every
    /// parameter must carry a gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if let Some(p) = store.params().iter().find(|p| p.tensor.grad().is_none()) {
            return Err(MsClipError::Contract(format!("parameter {} has no gradient", p.name)));
        }
        if self.m.len() != store.len() {
            return Err(MsClipError::Contract("optimizer state does not match the parameter store".into()));
        }
        self.step += 1;
        let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let rates: Vec<f64> = store.params().iter().map(|p| self.decay_rate(p.group)).collect();
        for (i, p) in store.params_mut().iter_mut().enumerate() {
            let grad: Vec<T> = p.tensor.grad().expect("checked above").to_vec();
            let shrink = 1.0 - lr * rates[i];
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.tensor.data_mut().iter_mut().enumerate() {
                let g = grad[j].as_f64();
                let mj = b1 * m[j].as_f64() + (1.0 - b1) * g;
                let vj = b2 * v[j].as_f64() + (1.0 - b2) * g * g;
                m[j] = T::of(mj);
                v[j] = T::of(vj);
                let update = (mj / c1) / ((vj / c2).sqrt() + eps);
                *w = T::of(w.as_f64() * shrink - lr * update);
            }
        }
        Ok(())
    }
}

/// One optimizer step as written to the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    /// Softmax temperature `exp(-logit_scale)`.
    pub temp: f64,
}

/// In-memory training pairs.
#[derive(Clone, Debug, Default)]
pub struct TrainData {
    pub images: Vec<Tensor<f32>>,
    pub tokens: Vec<TokenIds>,
}

impl TrainData {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Called with the zero-based epoch index and the model after each epoch.
pub type EpochHook<'a> = Box<dyn FnMut(usize, &MsClipModel<f32>) -> Result<()> + 'a>;

/// Optional outputs of [`train`].
#[derive(Default)]
pub struct TrainOutputs<'a> {
    /// Receives one JSON record per optimizer step.
    pub log: Option<&'a mut dyn Write>,
    /// Directory for `epoch-NNN.ckpt` files.
    pub checkpoint_dir: Option<PathBuf>,
    pub tokenizer: Option<&'a Tokenizer>,
    /// Called after every epoch.
    pub on_epoch: Option<EpochHook<'a>>,
}

/// Micro-batches of one epoch: a seeded shuffle cut into `batch`-sized
/// chunks, dropping a final chunk smaller than 2.
pub fn epoch_batches(n: usize, batch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    order.shuffle(&mut rng);
    order.chunks(batch).filter(|c| c.len() >= 2).map(<[usize]>::to_vec).collect()
}

/// Optimizer steps per epoch for `n` pairs.
pub fn steps_per_epoch(n: usize, cfg: &ExperimentConfig) -> usize {
    epoch_batches(n, cfg.train.batch_size, 0, 0).len().div_ceil(cfg.train.accum_steps)
}

/// Trains `model` in place and returns the per-step log. Deterministic for
/// a fixed `cfg.seed`.
pub fn train(
    model: &mut MsClipModel<f32>,
    data: &TrainData,
    cfg: &ExperimentConfig,
    mut out: TrainOutputs<'_>,
) -> Result<Vec<LogRecord>> {
    if data.is_empty() || data.images.len() != data.tokens.len() {
        return Err(input("training needs a non-empty set of image/caption pairs"));
    }
    if cfg.train.batch_size < 2 {
        return Err(config("batch_size must be at least 2"));
    }
    let accum = cfg.train.accum_steps.max(1);
    let mut sched = cfg.schedule.clone();
    sched.steps_per_epoch = steps_per_epoch(data.len(), cfg);
    if sched.steps_per_epoch == 0 {
        return Err(input("not enough pairs for one batch of 2"));
    }
    if let Some(dir) = &out.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    model.store.set_requires_grad(true);
    model.store.zero_grads();
    let mut opt = AdamW::new(cfg.optim.clone(), &model.store);
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 0..sched.total_epochs {
        let batches = epoch_batches(data.len(), cfg.train.batch_size, cfg.seed, epoch);
        for group in batches.chunks(accum) {
            let mut loss_sum = 0.0;
            for idx in group {
                let imgs: Vec<&Tensor<f32>> = idx.iter().map(|&i| &data.images[i]).collect();
                let images = stack_images(&imgs)?;
                let tokens: Vec<TokenIds> = idx.iter().map(|&i| data.tokens[i].clone()).collect();
                let mut trace = Trace::train();
                let (loss, grads) = (|| -> Result<_> {
                    let mut tape = Tape::new();
                    let x = tape.constant(images);
                    let ie = model.vision_forward(&mut tape, x, &mut trace)?;
                    let te = model.text_forward(&mut tape, &tokens, &mut trace)?;
                    let ls = model.store.var(&mut tape, model.arch.logit_scale);
                    let loss = contrastive_loss(&mut tape, ie, te, ls)?;
                    let scaled = tape.scale(loss, 1.0 / group.len() as f64)?;
                    let value = tape.item(loss)?.as_f64();
                    Ok((value, tape.backward(scaled)?))
                })()
                .map_err(|e| match e {
                    MsClipError::Numerics(NumericsError::Numeric { op, msg }) => {
                        MsClipError::Diverged { step, msg: format!("{op}: {msg} in epoch {epoch}") }
                    }
                    other => other,
                })?;
                if !loss.is_finite() {
                    return Err(MsClipError::Diverged { step, msg: format!("loss is {loss} in epoch {epoch}") });
                }
                for i in 0..model.store.len() {
                    if let Some(g) = grads.keyed(i) {
                        model.store.params_mut()[i].tensor.accumulate_grad(g)?;
                    }
                }
                model.apply_bn_updates(&mut trace);
                loss_sum += loss;
            }
            let lr = lr_at(step, &sched)?;
            opt.step(&mut model.store, lr)?;
            model.store.zero_grads();
            model.clamp_logit_scale();
            step += 1;
            let rec = LogRecord {
                step,
                epoch,
                loss: loss_sum / group.len() as f64,
                lr,
                temp: (-model.logit_scale().as_f64()).exp(),
            };
            if let Some(w) = out.log.as_mut() {
                let line = serde_json::to_string(&rec).expect("log record serializes");
                writeln!(w, "{line}").map_err(io_err("training log"))?;
            }
            log.push(rec);
        }
        if let Some(dir) = &out.checkpoint_dir {
            if cfg.train.checkpoint_every_epoch || epoch + 1 == sched.total_epochs {
                save_checkpoint(&dir.join(format!("epoch-{:03}.ckpt", epoch + 1)), model, out.tokenizer)?;
            }
        }
        if let Some(f) = out.on_epoch.as_mut() {
            f(epoch, model)?;
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched() -> ScheduleConfig {
        ScheduleConfig { lr_max: 1.6e-3, lr_min: 1.6e-4, warmup_epochs: 5, total_epochs: 30, steps_per_epoch: 10 }
    }

    #[test]
    fn schedule_landmarks() {
        let s = sched();
        assert_eq!(lr_at(0, &s).unwrap(), 0.0);
        assert!((lr_at(50, &s).unwrap() - 1.6e-3).abs() < 1e-15);
        assert!((lr_at(175, &s).unwrap() - 8.8e-4).abs() < 1e-12);
        assert!((lr_at(300, &s).unwrap() - 1.6e-4).abs() < 1e-15);
        assert!(lr_at(301, &s).is_err());
    }

    #[test]
    fn uniform_embeddings_give_ln_n() {
        let e = Tensor::<f64>::from_fn([4, 2], |i| if i % 2 == 0 { 1.0 } else { 0.0 });
        let l = contrastive_loss_value(&e, &e, 0.0).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn rejects_unnormalized_rows() {
        let e = Tensor::<f64>::from_fn([2, 2], |_| 1.0);
        assert!(matches!(contrastive_loss_value(&e, &e, 0.0), Err(MsClipError::Contract(_))));
    }

    #[test]
    fn batches_are_deterministic_and_cover_data() {
        let a = epoch_batches(10, 4, 3, 1);
        assert_eq!(a, epoch_batches(10, 4, 3, 1));
        assert_ne!(a, epoch_batches(10, 4, 3, 2));
        let mut all: Vec<usize> = a.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        // a trailing single pair is dropped
        assert_eq!(epoch_batches(9, 4, 0, 0).concat().len(), 8);
    }
}
