//! Total objective, the training loop and its per-step log.

use std::collections::HashMap;

use log::debug;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::emotion::{ENCODER_PREFIX, FUSION_PREFIX};
use crate::error::{Error, Result};
use crate::heads::{build_negatives, ContrastiveForm, NegativePair, Reservoir, ReservoirEntry};
use crate::model::{Batch, Components, Example, LossSpec, Sevlm};
use crate::optim::{clip_global_norm, AdamW, AdamWConfig};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the contrastive term.
    pub alpha: f64,
    pub lr_main: f64,
    /// Learning rate of the emotion encoder and the fusion layer.
    pub lr_emotion: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub flags: Components,
    pub contrastive_form: ContrastiveForm,
    pub optimizer: AdamWConfig,
    /// Global gradient-norm limit; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub reservoir_capacity: usize,
    pub log_every: usize,
    pub checkpoint_every: Option<usize>,
}

impl TrainConfig {
    /// Full-size optimizer settings.
    pub fn full() -> Self {
        TrainConfig {
            alpha: 2.0,
            lr_main: 2e-5,
            lr_emotion: 4e-5,
            batch_size: 32,
            steps: 1000,
            seed: 0,
            flags: Components::ALL,
            contrastive_form: ContrastiveForm::AsPrinted,
            optimizer: AdamWConfig::default(),
            grad_clip: Some(1.0),
            reservoir_capacity: 64,
            log_every: 1,
            checkpoint_every: None,
        }
    }

    /// Desk-scale settings: batch 8 and learning rates raised for a model
    /// trained from scratch, keeping the 1:2 ratio.
    pub fn toy() -> Self {
        TrainConfig {
            lr_main: 1e-3,
            lr_emotion: 2e-3,
            batch_size: 8,
            ..Self::full()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "full" => Ok(Self::full()),
            other => Err(Error::Config(format!("unknown training preset `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.lr_main > 0.0 && self.lr_emotion > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be positive".into()));
        }
        if matches!(self.grad_clip, Some(c) if c <= 0.0) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_for(&self, param: &str) -> f64 {
        if param.starts_with(ENCODER_PREFIX) || param.starts_with(FUSION_PREFIX) {
            self.lr_emotion
        } else {
            self.lr_main
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::toy()
    }
}

/// `L_lang + L_emo + α·L_con` with disabled terms contributing nothing.
pub fn total_loss(language: f64, emotion: f64, contrastive: f64, alpha: f64, flags: Components) -> Result<f64> {
    let mut total = language;
    let check = |name: &str, v: f64| {
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite(format!("{name} loss ({v})")))
        }
    };
    check("language", language)?;
    if flags.vad_head {
        total += check("emotion", emotion)?;
    }
    if flags.contrastive {
        total += alpha * check("contrastive", contrastive)?;
    }
    Ok(total)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub language: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub emotion: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub contrastive: Option<f64>,
    pub total: f64,
    pub grad_norm: f64,
    pub lr_main: f64,
    pub lr_emotion: f64,
    /// Batch elements left out of the contrastive term for lack of negatives.
    pub unscored: usize,
}

const STREAM_SHUFFLE: u64 = 1;
const STREAM_NEGATIVES: u64 = 2;
const STREAM_DROPOUT: u64 = 3;

/// Randomness is a pure function of `(seed, purpose, index)`, so a resumed
/// run draws exactly what an uninterrupted one would.
pub fn derived_rng(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index);
    rng
}

#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub model: Sevlm<T>,
    pub config: TrainConfig,
    pub optimizer: AdamW<T>,
    pub reservoir: Reservoir<T>,
    perms: HashMap<u64, Vec<usize>>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Sevlm<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        model.active(config.flags)?;
        Ok(Trainer {
            model,
            optimizer: AdamW::new(config.optimizer),
            reservoir: Reservoir::new(config.reservoir_capacity),
            config,
            perms: HashMap::new(),
        })
    }

    /// Completed optimizer steps.
    pub fn step(&self) -> u64 {
        self.optimizer.step
    }

    /// Indices of the batch for `step`: consecutive slices of a stream formed
    /// by one seeded permutation of the data per epoch.
    pub fn batch_indices(&mut self, n: usize, step: u64) -> Vec<usize> {
        let b = self.config.batch_size.min(n);
        let seed = self.config.seed;
        (0..b)
            .map(|k| {
                let i = step * b as u64 + k as u64;
                let epoch = i / n as u64;
                let perm = self.perms.entry(epoch).or_insert_with(|| {
                    let mut p: Vec<usize> = (0..n).collect();
                    p.shuffle(&mut derived_rng(seed, STREAM_SHUFFLE, epoch));
                    p
                });
                perm[(i % n as u64) as usize]
            })
            .collect()
    }

    /// Negatives drawn for a batch at the current step.
    pub fn negatives_for(&self, batch: &Batch<T>) -> Vec<Option<NegativePair>> {
        let mut rng = derived_rng(self.config.seed, STREAM_NEGATIVES, self.step());
        build_negatives(&batch.labels(), &batch.image_ids, &self.reservoir, &mut rng)
    }

    /// Forward, backward and one optimizer update on `examples[indices]`.
    pub fn train_batch(&mut self, examples: &[Example<T>], indices: &[usize]) -> Result<StepLog> {
        let refs: Vec<&Example<T>> = indices.iter().map(|&i| &examples[i]).collect();
        let batch = Batch::new(&refs)?;
        let flags = self.config.flags;
        let negatives = if flags.contrastive {
            self.negatives_for(&batch)
        } else {
            vec![None; batch.len()]
        };
        let spec = LossSpec {
            flags,
            alpha: self.config.alpha,
            form: self.config.contrastive_form,
            negatives: &negatives,
            reservoir: &self.reservoir,
        };
        let rng = derived_rng(self.config.seed, STREAM_DROPOUT, self.step());
        let mut ctx = self.model.train_ctx(rng);
        let losses = self.model.losses(&mut ctx, &batch, &spec)?;
        let value = |v| ctx.tape.value(v).item().as_f64();
        let language = value(losses.language);
        let emotion = losses.emotion.map(value);
        let contrastive = losses.contrastive.map(value);
        let total = value(losses.total);
        if !total.is_finite() {
            return Err(Error::NonFinite(format!(
                "total loss at step {}: language {language}, emotion {emotion:?}, contrastive {contrastive:?}",
                self.step() + 1
            )));
        }
        let pooled = losses.pooled_explanation.map(|p| ctx.tape.value(p).clone());
        ctx.tape.backward(losses.total)?;
        let mut grads = ctx.param_grads();
        drop(ctx);
        let grad_norm = match self.config.grad_clip {
            Some(c) => clip_global_norm(&mut grads, c),
            None => crate::optim::global_norm(&grads),
        };
        let config = &self.config;
        self.optimizer.update(&mut self.model.params, &grads, |n| config.lr_for(n))?;
        if let Some(p) = pooled {
            let d = p.last_dim();
            for (i, s) in batch.sentences.iter().enumerate() {
                self.reservoir.push(ReservoirEntry {
                    label: s.label,
                    image_id: batch.image_ids[i].clone(),
                    pooled: p.data()[i * d..(i + 1) * d].to_vec(),
                });
            }
        }
        let unscored = negatives.iter().filter(|n| n.is_none()).count();
        if flags.contrastive && unscored > 0 {
            debug!("step {}: {unscored} elements without negatives", self.step());
        }
        Ok(StepLog {
            step: self.step(),
            language,
            emotion,
            contrastive,
            total,
            grad_norm,
            lr_main: self.config.lr_main,
            lr_emotion: self.config.lr_emotion,
            unscored: if flags.contrastive { unscored } else { 0 },
        })
    }

    /// One step on the next batch of the shuffled stream.
    pub fn train_step(&mut self, examples: &[Example<T>]) -> Result<StepLog> {
        if examples.is_empty() {
            return Err(Error::EmptySequence("training set"));
        }
        let idx = self.batch_indices(examples.len(), self.step());
        // Old epochs are never revisited.
        let keep_from = (self.step() * self.config.batch_size as u64) / examples.len() as u64;
        self.perms.retain(|&e, _| e >= keep_from);
        self.train_batch(examples, &idx)
    }

    /// Trains until `config.steps` updates have been applied, calling `log`
    /// every `log_every` steps and `checkpoint` on the configured schedule.
    pub fn run(
        &mut self,
        examples: &[Example<T>],
        mut log: impl FnMut(&StepLog),
        mut checkpoint: impl FnMut(&Self) -> Result<()>,
    ) -> Result<Vec<StepLog>> {
        let mut logs = Vec::new();
        while (self.step() as usize) < self.config.steps {
            let entry = self.train_step(examples)?;
            if (entry.step as usize).is_multiple_of(self.config.log_every) || entry.step as usize == self.config.steps {
                log(&entry);
            }
            if let Some(every) = self.config.checkpoint_every {
                if every > 0 && (entry.step as usize).is_multiple_of(every) {
                    checkpoint(self)?;
                }
            }
            logs.push(entry);
        }
        Ok(logs)
    }
}
