//! Whole-model gradient verification in double precision.

use std::time::Instant;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::classes::EmotionClass;
use crate::data::{build_vocab, Sample, encode_samples, generate_synthetic, SyntheticSpec};
use crate::error::{Error, Result};
use crate::heads::{build_negatives, ContrastiveForm, NegSource, Reservoir, ReservoirEntry};
use crate::lexicon::VadLexicon;
use crate::model::{Batch, Components, Example, LossSpec, ModelConfig, Sevlm};
use crate::tensor::gradcheck::{check_named, GradCheckReport};
use crate::tensor::Tensor;
use crate::text::Vocab;
use crate::training::derived_rng;

/// Central-difference step for the whole objective. Many parameter gradients
/// of a freshly initialized model are below 1e-7 while the loss is near 3, so
/// the roundoff term of a smaller step would dominate them.
pub const MODEL_EPS: f64 = 1e-4;

/// Settings of [`gradcheck_model`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub model: ModelConfig,
    /// The corpus vocabulary is padded with filler words up to this size.
    pub vocab_size: usize,
    pub batch_size: usize,
    pub alpha: f64,
    pub contrastive_form: ContrastiveForm,
    pub flags: Components,
    /// Coordinates sampled per parameter tensor; `None` checks all of them.
    pub coords_per_param: Option<usize>,
    pub eps: f64,
    pub seed: u64,
    /// Reported pass threshold on the maximum relative error.
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            model: ModelConfig {
                dropout: 0.0,
                ..ModelConfig::toy()
            },
            vocab_size: 200,
            batch_size: 4,
            alpha: 2.0,
            contrastive_form: ContrastiveForm::AsPrinted,
            flags: Components::ALL,
            coords_per_param: Some(16),
            eps: MODEL_EPS,
            seed: 0,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckOutcome {
    #[serde(flatten)]
    pub report: GradCheckReport,
    pub vocab_size: usize,
    pub parameters: usize,
    pub loss: f64,
    pub seconds: f64,
    pub passed: bool,
}

/// Compares backpropagated gradients of the full objective against central
/// differences, one sampled coordinate of every parameter tensor at a time.
///
/// The batch holds distinct labels and images so every element has in-batch
/// negatives; the first element's wrong-label negative is taken from a
/// one-entry reservoir to cover that path as well.
pub fn gradcheck_model(cfg: &GradcheckConfig) -> Result<GradcheckOutcome> {
    let start = Instant::now();
    if cfg.batch_size < 2 || cfg.batch_size > EmotionClass::ALL.len() {
        return Err(Error::Config(format!(
            "gradcheck batch_size must be within 2..={}",
            EmotionClass::ALL.len()
        )));
    }
    let samples = generate_synthetic(&SyntheticSpec {
        seed: cfg.seed,
        size: 64,
        ..SyntheticSpec::default()
    });
    let mut chosen = Vec::new();
    for s in &samples {
        if chosen.len() < cfg.batch_size && chosen.iter().all(|c: &&Sample| c.emotion != s.emotion) {
            chosen.push(s);
        }
    }
    let chosen: Vec<_> = chosen.into_iter().cloned().collect();
    let base = build_vocab(&chosen);
    let mut words = base.words().to_vec();
    let mut k = 0;
    while words.len() < cfg.vocab_size {
        words.push(format!("filler{k}"));
        k += 1;
    }
    let vocab = Vocab::from_words(words)?;
    let lexicon = VadLexicon::bundled();
    let examples: Vec<Example<f64>> = encode_samples(&chosen, &vocab, &lexicon, &cfg.model)?;
    let model = Sevlm::<f64>::new(cfg.model.clone(), vocab.len())?;
    let flags = model.active(cfg.flags)?;

    let refs: Vec<&Example<f64>> = examples.iter().collect();
    let batch = Batch::new(&refs)?;
    let mut reservoir = Reservoir::new(4);
    let spare = EmotionClass::ALL
        .iter()
        .copied()
        .find(|c| !batch.labels().contains(c))
        .unwrap_or(EmotionClass::ALL[0]);
    let mut rng = derived_rng(cfg.seed, 0, 0);
    let d = cfg.model.d_model;
    let normal = Normal::new(0.0, 0.5).expect("valid std");
    reservoir.push(ReservoirEntry {
        label: spare,
        image_id: "reservoir".into(),
        pooled: (0..d).map(|_| normal.sample(&mut rng)).collect(),
    });
    let mut negatives = build_negatives(&batch.labels(), &batch.image_ids, &reservoir, &mut rng);
    if let Some(Some(n)) = negatives.first_mut() {
        n.wrong_label = NegSource::Reservoir(0);
    }

    let spec = LossSpec {
        flags,
        alpha: cfg.alpha,
        form: cfg.contrastive_form,
        negatives: &negatives,
        reservoir: &reservoir,
    };
    let eval = |m: &Sevlm<f64>| -> Result<f64> {
        let mut ctx = m.eval_ctx();
        let l = m.losses(&mut ctx, &batch, &spec)?;
        Ok(ctx.tape.value(l.total).item())
    };

    let (loss, grads) = {
        let mut ctx = model.eval_ctx();
        let l = model.losses(&mut ctx, &batch, &spec)?;
        let loss = ctx.tape.value(l.total).item();
        ctx.tape.backward(l.total)?;
        (loss, ctx.param_grads())
    };
    let mut inputs: Vec<(String, Tensor<f64>)> = Vec::new();
    let mut analytic = Vec::new();
    for (name, value) in model.params.iter() {
        if let Some(g) = grads.get(name) {
            inputs.push((name.to_string(), value.clone()));
            analytic.push(g.clone());
        }
    }
    let parameters = inputs.len();
    let mut probe = model.clone();
    let report = check_named(&mut inputs, &analytic, cfg.eps, cfg.coords_per_param, cfg.seed, |ins| {
        for (name, t) in ins {
            probe.params.get_mut(name)?.data_mut().copy_from_slice(t.data());
        }
        eval(&probe)
    })?;
    let passed = report.max_rel_err < cfg.tolerance;
    Ok(GradcheckOutcome {
        report,
        vocab_size: vocab.len(),
        parameters,
        loss,
        seconds: start.elapsed().as_secs_f64(),
        passed,
    })
}
