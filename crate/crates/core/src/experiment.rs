//! Train on the training split of a corpus and score generations on its test split.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{build_vocab, encode_samples, split_dataset, Sample};
use crate::error::{Error, Result};
use crate::generation::{GenerationConfig, Generator};
use crate::lexicon::VadLexicon;
use crate::metrics::{evaluate, EaClassifier, EvalReport, Prediction};
use crate::model::{Components, Example, ModelConfig, Sevlm};
use crate::text::Vocab;
use crate::training::{StepLog, TrainConfig, Trainer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub generation: GenerationConfig,
    pub split_seed: u64,
    pub threads: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelConfig::toy(),
            train: TrainConfig::toy(),
            generation: GenerationConfig {
                greedy: true,
                ..GenerationConfig::default()
            },
            split_seed: 0,
            threads: 1,
        }
    }
}

impl ExperimentConfig {
    /// Same settings with `components` both built and switched on, and with
    /// model, training and split seeds set to `seed`.
    pub fn arm(&self, components: Components, seed: u64) -> Self {
        let mut c = self.clone();
        c.model.components = components;
        c.train.flags = components;
        c.model.seed = seed;
        c.train.seed = seed;
        c.split_seed = seed;
        c
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub trainer: Trainer<f32>,
    pub vocab: Vocab,
    pub logs: Vec<StepLog>,
    pub test: EvalReport,
    pub seconds: f64,
}

/// Generates one prediction per sample with `model`.
#[allow(clippy::too_many_arguments)]
pub fn predict(
    model: &Sevlm<f32>,
    vocab: &Vocab,
    lexicon: &VadLexicon,
    samples: &[Sample],
    examples: &[Example<f32>],
    fusion: bool,
    cfg: &GenerationConfig,
    threads: usize,
) -> Result<Vec<Prediction>> {
    if samples.len() != examples.len() {
        return Err(Error::LengthMismatch(samples.len(), examples.len()));
    }
    let generator = Generator::new(model, vocab, lexicon, fusion);
    let images: Vec<_> = examples.iter().map(|e| (&e.image, e.is_patches)).collect();
    let results = generator.generate_many(&images, cfg, threads)?;
    samples
        .iter()
        .zip(results)
        .map(|(s, r)| {
            let emotion = r
                .emotion
                .ok_or_else(|| Error::Validation(format!("no class token generated for `{}`", s.image_id)))?;
            Ok(Prediction {
                image_id: s.image_id.clone(),
                emotion,
                explanation: r.explanation,
            })
        })
        .collect()
}

pub fn train_and_evaluate(samples: &[Sample], lexicon: &VadLexicon, cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    let start = Instant::now();
    let split = split_dataset(samples, cfg.split_seed)?;
    let pick = |idx: &[usize]| -> Vec<Sample> { idx.iter().map(|&i| samples[i].clone()).collect() };
    let (train, test) = (pick(&split.train), pick(&split.test));
    if train.is_empty() || test.is_empty() {
        return Err(Error::EmptySequence("train or test split"));
    }
    let vocab = build_vocab(&train);
    let train_ex: Vec<Example<f32>> = encode_samples(&train, &vocab, lexicon, &cfg.model)?;
    let test_ex: Vec<Example<f32>> = encode_samples(&test, &vocab, lexicon, &cfg.model)?;
    let model = Sevlm::<f32>::new(cfg.model.clone(), vocab.len())?;
    let mut trainer = Trainer::new(model, cfg.train.clone())?;
    let logs = trainer.run(&train_ex, |_| {}, |_| Ok(()))?;
    let fusion = trainer.model.active(cfg.train.flags)?.vad_fusion;
    let preds = predict(&trainer.model, &vocab, lexicon, &test, &test_ex, fusion, &cfg.generation, cfg.threads)?;
    let report = evaluate(&preds, &test, &EaClassifier::new(lexicon.clone()))?;
    Ok(ExperimentResult {
        trainer,
        vocab,
        logs,
        test: report,
        seconds: start.elapsed().as_secs_f64(),
    })
}
