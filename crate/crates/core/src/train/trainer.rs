use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::mask::{apply_mask, MaskConfig};
use crate::augment::{augment_sample, AugmentConfig};
use crate::autodiff::{adamw_step, onecycle_lr, AdamWConfig, Graph, LrSchedule, OptimizerState, Var};
use crate::error::{Error, Result};
use crate::model::{ArchConfig, Model, ModelSpec};
use crate::rng::derive_rng;
use crate::signal::Dataset;

const MASK_SALT: u64 = 0x6d61_736b;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: u64,
    pub batch_size: usize,
    pub warmup_steps: u64,
    pub min_lr: f64,
    pub max_lr: f64,
    pub adamw: AdamWConfig,
    pub augment: AugmentConfig,
    pub mask: MaskConfig,
    /// Reconstruction loss over every token instead of masked ones only.
    pub recon_all_positions: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            batch_size: 16,
            warmup_steps: 100,
            min_lr: 1e-4,
            max_lr: 1e-3,
            adamw: AdamWConfig::default(),
            augment: AugmentConfig::default(),
            mask: MaskConfig::default(),
            recon_all_positions: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        self.augment.validate()?;
        self.mask.validate()?;
        LrSchedule::new(1, self.min_lr, self.max_lr, 2).map(|_| ())
    }

    /// One-cycle schedule over `total_steps`. Warmup is capped at a tenth of
    /// the run so short runs still spend most steps decaying.
    pub fn schedule(&self, total_steps: u64) -> Result<LrSchedule> {
        let total = total_steps.max(2);
        let warmup = self.warmup_steps.min(total / 10).max(1);
        LrSchedule::new(warmup, self.min_lr, self.max_lr, total)
    }
}

/// Held-out evaluation result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub loss: f64,
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
}

impl EvalMetrics {
    pub fn total(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub epoch: u64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test: Option<EvalMetrics>,
    pub lr: f64,
    pub wall_seconds: f64,
}

impl TrainMetrics {
    pub fn test_accuracy(&self) -> Option<f64> {
        self.test.as_ref().map(|t| t.accuracy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Pretrain,
    Finetune,
}

/// A model with its optimizer, schedule and random state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub opt: OptimizerState,
    pub schedule: LrSchedule,
    pub rng: ChaCha8Rng,
    pub seed: u64,
    /// Completed epochs.
    pub epoch: u64,
    pub config: TrainConfig,
}

pub fn steps_per_epoch(n_samples: usize, batch_size: usize) -> u64 {
    n_samples.div_ceil(batch_size.max(1)) as u64
}

fn label_of(data: &Dataset, i: usize) -> Result<usize> {
    let s = data
        .samples
        .get(i)
        .ok_or_else(|| Error::Data(format!("sample index {i} out of range")))?;
    s.label
        .map(usize::from)
        .ok_or_else(|| Error::Data(format!("sample {i} has no label")))
}

fn argmax(z: &[f64]) -> usize {
    z.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
        .0
}

fn cross_entropy_value(z: &[f64], target: usize) -> f64 {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln() - z[target]
}

/// Accuracy, mean loss and confusion matrix with dropout off and no
/// augmentation.
pub fn evaluate(model: &Model, data: &Dataset, indices: &[usize]) -> Result<EvalMetrics> {
    if indices.is_empty() {
        return Err(Error::Contract("evaluation on an empty test set".into()));
    }
    let k = model.n_classes();
    let mut confusion = vec![vec![0u64; k]; k];
    let mut loss = 0.0;
    for &i in indices {
        let y = label_of(data, i)?;
        if y >= k {
            return Err(Error::Data(format!("label {y} out of range for {k} classes")));
        }
        let z = model.predict(&data.samples[i].values)?;
        loss += cross_entropy_value(&z, y);
        confusion[y][argmax(&z)] += 1;
    }
    let correct: u64 = (0..k).map(|c| confusion[c][c]).sum();
    Ok(EvalMetrics {
        loss: loss / indices.len() as f64,
        accuracy: correct as f64 / indices.len() as f64,
        confusion,
    })
}

impl Trainer {
    /// `total_steps` sizes the learning-rate schedule.
    pub fn new(model: Model, config: TrainConfig, seed: u64, total_steps: u64) -> Result<Self> {
        config.validate()?;
        let schedule = config.schedule(total_steps)?;
        let opt = OptimizerState::new(&model.store, schedule.min_lr, config.adamw);
        Ok(Self {
            model,
            opt,
            schedule,
            rng: ChaCha8Rng::seed_from_u64(seed),
            seed,
            epoch: 0,
            config,
        })
    }

    /// Schedule sized for `config.epochs` passes over `n_samples`.
    pub fn for_epochs(model: Model, config: TrainConfig, seed: u64, n_samples: usize) -> Result<Self> {
        let total = config.epochs * steps_per_epoch(n_samples, config.batch_size);
        Self::new(model, config, seed, total)
    }

    fn set_phase(&mut self, phase: Phase) {
        let store = &mut self.model.store;
        let (on, off): (&[&str], &[&str]) = match phase {
            Phase::Finetune => (&["embed", "cls_token", "layers.", "head.", "tokenizer.", "cnn.", "mlp."], &["recon."]),
            Phase::Pretrain => (&["embed", "layers.", "recon.", "tokenizer."], &["head.", "cls_token"]),
        };
        for p in on {
            store.set_trainable(p, true);
        }
        for p in off {
            store.set_trainable(p, false);
        }
    }

    fn check_finite(&self, g: &Graph, loss: Var) -> Result<()> {
        if let Some((node, op)) = g.first_non_finite() {
            return Err(Error::Training {
                step: self.opt.step,
                detail: format!("non-finite value produced by {op} (node {node})"),
            });
        }
        if !g.scalar(loss).is_finite() {
            return Err(Error::Training {
                step: self.opt.step,
                detail: "non-finite loss".into(),
            });
        }
        Ok(())
    }

    fn apply_update(&mut self, grads: &crate::autodiff::Gradients) -> Result<()> {
        self.model.store.zero_grad();
        self.model.store.accumulate(grads);
        self.opt.lr = onecycle_lr(self.opt.step, &self.schedule);
        adamw_step(&mut self.model.store, &mut self.opt)?;
        if let Some(name) = self
            .model
            .store
            .iter()
            .find(|(_, _, t)| t.data().iter().any(|v| !v.is_finite()))
            .map(|(_, n, _)| n.to_string())
        {
            return Err(Error::Training {
                step: self.opt.step,
                detail: format!("parameter {name} became non-finite"),
            });
        }
        Ok(())
    }

    /// Cross-entropy step on one minibatch; returns (mean loss, correct count).
    pub fn finetune_step(&mut self, data: &Dataset, batch: &[usize]) -> Result<(f64, usize)> {
        self.set_phase(Phase::Finetune);
        let epoch = self.epoch;
        let abort = numeric_abort(self.opt.step);
        let (loss, correct, grads) = {
            let model = &self.model;
            let mut g = Graph::with_params(&model.store);
            let mut terms = Vec::with_capacity(batch.len());
            let mut correct = 0;
            for &i in batch {
                let y = label_of(data, i)?;
                let mut arng = derive_rng(self.seed, epoch, i as u64);
                let x = augment_sample(&data.samples[i].values, &self.config.augment, &mut arng);
                let z = model.logits(&mut g, &x, true, &mut self.rng).map_err(&abort)?;
                if argmax(g.value(z)) == y {
                    correct += 1;
                }
                terms.push(g.cross_entropy(z, y).map_err(&abort)?);
            }
            let loss = g.mean_of(&terms)?;
            self.check_finite(&g, loss)?;
            (g.scalar(loss), correct, g.backward(loss)?)
        };
        self.apply_update(&grads)?;
        Ok((loss, correct))
    }

    /// One shuffled pass of supervised training; returns (mean loss, train accuracy).
    pub fn finetune_epoch(&mut self, data: &Dataset, train: &[usize]) -> Result<(f64, f64)> {
        if train.is_empty() {
            return Err(Error::Contract("empty training set".into()));
        }
        let mut order = train.to_vec();
        order.shuffle(&mut self.rng);
        let (mut total, mut correct) = (0.0, 0);
        for batch in order.chunks(self.config.batch_size) {
            let (l, c) = self.finetune_step(data, batch)?;
            total += l * batch.len() as f64;
            correct += c;
        }
        self.end_epoch();
        Ok((total / train.len() as f64, correct as f64 / train.len() as f64))
    }

    /// Masked-reconstruction step on one minibatch; returns the mean loss.
    /// A batch without any masked token leaves the parameters untouched.
    pub fn pretrain_step(&mut self, data: &Dataset, batch: &[usize]) -> Result<f64> {
        if self.model.spec.tokenizer.is_trainable() {
            return Err(Error::Config("pretraining needs a fixed (constant or Fourier) tokenizer".into()));
        }
        self.set_phase(Phase::Pretrain);
        let step = self.opt.step;
        let abort = numeric_abort(step);
        let (loss, any_masked, grads) = {
            let model = &self.model;
            let mut g = Graph::with_params(&model.store);
            let mut terms = Vec::with_capacity(batch.len());
            let mut any_masked = false;
            for &i in batch {
                let x = &data
                    .samples
                    .get(i)
                    .ok_or_else(|| Error::Data(format!("sample index {i} out of range")))?
                    .values;
                let tokens = model.tokenizer.tokenize_fixed(x)?;
                let mut mrng = derive_rng(self.seed ^ MASK_SALT, step, i as u64);
                let (corrupted, plan) = apply_mask(&tokens, &self.config.mask, &mut mrng);
                let rows = if self.config.recon_all_positions {
                    vec![true; tokens.n_tokens]
                } else {
                    plan.masked
                };
                any_masked |= rows.iter().any(|&r| r);
                let input = g.constant(&[tokens.n_tokens, tokens.token_dim], corrupted.tokens)?;
                let rec = model.reconstruct(&mut g, input, true, &mut self.rng).map_err(&abort)?;
                terms.push(g.masked_mse(rec, &tokens.tokens, &rows).map_err(&abort)?);
            }
            let loss = g.mean_of(&terms)?;
            self.check_finite(&g, loss)?;
            let grads = if any_masked { Some(g.backward(loss)?) } else { None };
            (g.scalar(loss), any_masked, grads)
        };
        if any_masked {
            self.apply_update(&grads.expect("computed when masked"))?;
        }
        Ok(loss)
    }

    /// One shuffled pass of masked pretraining; returns the mean loss.
    pub fn pretrain_epoch(&mut self, data: &Dataset, pool: &[usize]) -> Result<f64> {
        if pool.is_empty() {
            return Err(Error::Contract("empty pretraining pool".into()));
        }
        let mut order = pool.to_vec();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        for batch in order.chunks(self.config.batch_size) {
            total += self.pretrain_step(data, batch)? * batch.len() as f64;
        }
        self.end_epoch();
        Ok(total / pool.len() as f64)
    }

    /// Epoch boundary: state is snapped to 32-bit precision so that a run
    /// resumed from a checkpoint continues exactly like an uninterrupted one.
    fn end_epoch(&mut self) {
        self.epoch += 1;
        self.model.store.round_to_f32();
        self.opt.round_to_f32();
    }

    /// Runs `epochs` supervised epochs, evaluating on `test` after each.
    pub fn fit(
        &mut self,
        data: &Dataset,
        train: &[usize],
        test: &[usize],
        epochs: u64,
        mut on_epoch: impl FnMut(&TrainMetrics) -> Result<()>,
    ) -> Result<Vec<TrainMetrics>> {
        let mut out = Vec::new();
        for _ in 0..epochs {
            let t0 = Instant::now();
            let (loss, acc) = self.finetune_epoch(data, train)?;
            let test = if test.is_empty() {
                None
            } else {
                Some(evaluate(&self.model, data, test)?)
            };
            let m = TrainMetrics {
                epoch: self.epoch,
                train_loss: loss,
                train_accuracy: acc,
                test,
                lr: self.opt.lr,
                wall_seconds: t0.elapsed().as_secs_f64(),
            };
            on_epoch(&m)?;
            out.push(m);
        }
        Ok(out)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_model(&self.model).with_optimizer(&self.opt);
        ck.descriptor.seed = self.seed;
        ck.descriptor.epoch = self.epoch;
        ck.descriptor.step = self.opt.step;
        ck.descriptor.schedule = Some(self.schedule);
        ck.rng = Some(self.rng.clone());
        ck
    }

    /// Continues a run from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ckpt: &Checkpoint, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = ckpt.to_model()?;
        let d = &ckpt.descriptor;
        let schedule = d
            .schedule
            .ok_or_else(|| Error::Config("checkpoint has no learning-rate schedule".into()))?;
        let opt = ckpt
            .optimizer()
            .ok_or_else(|| Error::Config("checkpoint has no optimizer state".into()))?;
        let rng = ckpt
            .rng
            .clone()
            .ok_or_else(|| Error::Config("checkpoint has no RNG state".into()))?;
        Ok(Self {
            model,
            opt,
            schedule,
            rng,
            seed: d.seed,
            epoch: d.epoch,
            config,
        })
    }
}

/// Field-by-field compatibility of a pretrained encoder with a fine-tuning
/// spec. Returns the names of mismatched fields.
fn transfer_mismatches(from: &ModelSpec, to: &ModelSpec) -> Vec<String> {
    let mut bad = Vec::new();
    if from.tokenizer != to.tokenizer {
        bad.push("tokenizer".to_string());
    }
    match (&from.arch, &to.arch) {
        (ArchConfig::Transformer(a), ArchConfig::Transformer(b)) => {
            let fields: [(&str, bool); 7] = [
                ("input_dim", a.input_dim == b.input_dim),
                ("model_dim", a.model_dim == b.model_dim),
                ("n_heads", a.n_heads == b.n_heads),
                ("n_layers", a.n_layers == b.n_layers),
                ("ff_hidden_dim", a.ff_hidden() == b.ff_hidden()),
                ("ff_variant", a.ff_variant == b.ff_variant),
                ("mlp_embedder", a.mlp_embedder == b.mlp_embedder),
            ];
            bad.extend(fields.iter().filter(|(_, ok)| !ok).map(|(n, _)| n.to_string()));
        }
        _ => bad.push("arch".to_string()),
    }
    bad
}

/// New model for `target` whose embedder, encoder layers and tokenizer come
/// from `pretrained`; the class token and classification head are fresh.
pub fn transfer_for_finetune(pretrained: &Checkpoint, target: ModelSpec, seed: u64) -> Result<Model> {
    let bad = transfer_mismatches(&pretrained.descriptor.spec, &target);
    if !bad.is_empty() {
        return Err(Error::Transfer(bad));
    }
    let mut model = Model::seeded(target, seed)?;
    for (name, t) in &pretrained.params {
        if name.starts_with("embed") || name.starts_with("layers.") || name.starts_with("tokenizer.") {
            model.store.set_value(name, t.data(), t.shape())?;
        }
    }
    Ok(model)
}

/// Masked-reconstruction MSE of one window with dropout off; the mask is
/// drawn from `rng`. Returns 0 when nothing is masked.
pub fn reconstruction_error(model: &Model, x: &[f64], mask: &MaskConfig, rng: &mut ChaCha8Rng) -> Result<f64> {
    let tokens = model.tokenizer.tokenize_fixed(x)?;
    let (corrupted, plan) = apply_mask(&tokens, mask, rng);
    let mut g = Graph::with_params(&model.store);
    let input = g.constant(&[tokens.n_tokens, tokens.token_dim], corrupted.tokens)?;
    let rec = model.reconstruct(&mut g, input, false, rng)?;
    let loss = g.masked_mse(rec, &tokens.tokens, &plan.masked)?;
    Ok(g.scalar(loss))
}

/// NaN caught inside a forward op still aborts the run as a training error.
fn numeric_abort(step: u64) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Numeric { op, detail } => Error::Training {
            step,
            detail: format!("non-finite value reached {op}: {detail}"),
        },
        other => other,
    }
}
