//! Language head and the ternary contrastive head.

use std::collections::VecDeque;

use log::{debug, warn};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::classes::EmotionClass;
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{Ctx, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, Var};
use crate::text::{FullSentence, Vocab};

pub const CONTRASTIVE_PREFIX: &str = "contrastive.";

/// Logits `[.., V]` from hidden states `[.., d]` through the transposed word
/// embedding table `[V, d]`.
pub fn language_logits<T: Scalar>(ctx: &mut Ctx<'_, T>, hidden: Var, word_table: Var) -> Result<Var> {
    ctx.tape.matmul_nt(hidden, word_table)
}

/// Next-token targets: position `i` predicts token `i + 1`; padding targets
/// and the last position are masked.
pub fn next_token_targets(sentences: &[FullSentence]) -> (Vec<usize>, Vec<bool>) {
    let mut targets = Vec::new();
    let mut mask = Vec::new();
    for s in sentences {
        let l = s.len();
        for i in 0..l {
            let next = if i + 1 < l { s.token_ids[i + 1] } else { Vocab::PAD_ID };
            targets.push(next);
            mask.push(i + 1 < l && next != Vocab::PAD_ID);
        }
    }
    (targets, mask)
}

/// Teacher-forced cross-entropy of logits `[B, L, V]`.
pub fn language_loss<T: Scalar>(ctx: &mut Ctx<'_, T>, logits: Var, sentences: &[FullSentence]) -> Result<Var> {
    let (targets, mask) = next_token_targets(sentences);
    ctx.tape.cross_entropy(logits, &targets, &mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContrastiveForm {
    /// `-Σ_b softmax(scores_b)[pos]`, ratio without a logarithm.
    #[default]
    AsPrinted,
    /// `-Σ_b log softmax(scores_b)[pos]`.
    NegLog,
}

impl std::str::FromStr for ContrastiveForm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "as-printed" => Ok(ContrastiveForm::AsPrinted),
            "neg-log" => Ok(ContrastiveForm::NegLog),
            other => Err(Error::Config(format!("unknown contrastive form `{other}`"))),
        }
    }
}

/// MLP scoring `μ(image) ⊕ μ(prompt hidden) ⊕ μ(explanation hidden)`.
#[derive(Debug, Clone)]
pub struct ContrastiveHead {
    /// Present when the image width differs from the model width.
    pub adapter: Option<Linear>,
    pub fc: Linear,
    pub out: Linear,
}

impl ContrastiveHead {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, d_model: usize, d_vision: usize) -> Self {
        let adapter = (d_vision != d_model).then(|| Linear::new(store, "contrastive.adapter", d_vision, d_model));
        ContrastiveHead {
            adapter,
            fc: Linear::new(store, "contrastive.fc", 3 * d_model, d_model),
            out: Linear::new(store, "contrastive.out", d_model, 1),
        }
    }

    /// Scores `[N, 1]` from pooled rows `[N, d_v]`, `[N, d]`, `[N, d]`.
    pub fn score<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, image: Var, prompt: Var, explanation: Var) -> Result<Var> {
        let image = match &self.adapter {
            Some(a) => a.forward(ctx, image)?,
            None => image,
        };
        let x = ctx.tape.concat_last(image, prompt)?;
        let x = ctx.tape.concat_last(x, explanation)?;
        let h = self.fc.forward(ctx, x)?;
        let h = ctx.tape.gelu(h);
        self.out.forward(ctx, h)
    }

    /// Alignment score of one sample: image features `[K, d_v]`, prompt hidden
    /// states `[Lm, d]` and explanation hidden states `[T, d]`, each averaged
    /// over its unmasked rows.
    pub fn alignment_score<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        image: Var,
        prompt: Var,
        prompt_mask: &[bool],
        explanation: Var,
        explanation_mask: &[bool],
    ) -> Result<Var> {
        let mi = ctx.tape.mean_axis(image, 0)?;
        let dv = ctx.tape.shape(mi)[0];
        let mi = ctx.tape.reshape(mi, &[1, dv])?;
        let mm = masked_mean_rows(ctx, prompt, prompt_mask)?;
        let mx = masked_mean_rows(ctx, explanation, explanation_mask)?;
        self.score(ctx, mi, mm, mx)
    }
}

/// Mean of the unmasked rows of `[n, d]` → `[1, d]`.
pub fn masked_mean_rows<T: Scalar>(ctx: &mut Ctx<'_, T>, x: Var, mask: &[bool]) -> Result<Var> {
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(Error::EmptyReduction("masked mean"));
    }
    let w = T::one() / T::lit(n as f64);
    let weights = Tensor::new(vec![1, mask.len()], mask.iter().map(|&m| if m { w } else { T::zero() }).collect())?;
    let weights = ctx.tape.constant(weights);
    ctx.tape.matmul(weights, x)
}

/// Contrastive loss over scores `[B, 3]` with the matched triple in column 0.
pub fn contrastive_loss<T: Scalar>(ctx: &mut Ctx<'_, T>, scores: Var, form: ContrastiveForm) -> Result<Var> {
    let s = ctx.tape.shape(scores).to_vec();
    if s.len() != 2 || s[1] != 3 || s[0] == 0 {
        return Err(Error::Shape(format!("contrastive scores must be [B, 3] with B >= 1, got {s:?}")));
    }
    let probs = match form {
        ContrastiveForm::AsPrinted => ctx.tape.softmax_last(scores, None)?,
        ContrastiveForm::NegLog => ctx.tape.log_softmax_last(scores)?,
    };
    let pick = ctx.tape.constant(Tensor::from_f64(&[3, 1], &[1.0, 0.0, 0.0])?);
    let pos = ctx.tape.matmul(probs, pick)?;
    let total = ctx.tape.sum_all(pos);
    Ok(ctx.tape.scale(total, -T::one()))
}

/// Plain-number version of [`contrastive_loss`] for one batch of score triples.
pub fn contrastive_loss_value(scores: &[[f64; 3]], form: ContrastiveForm) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::EmptySequence("contrastive scores"));
    }
    Ok(-scores
        .iter()
        .map(|s| {
            let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
            let lp = s[0] - m - z.ln();
            match form {
                ContrastiveForm::AsPrinted => lp.exp(),
                ContrastiveForm::NegLog => lp,
            }
        })
        .sum::<f64>())
}

/// Where a negative explanation comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NegSource {
    /// Another element of the current batch.
    Batch(usize),
    /// A stored entry of the [`Reservoir`].
    Reservoir(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NegativePair {
    /// Explanation whose gold emotion differs from the anchor's.
    pub wrong_label: NegSource,
    /// Explanation of a different image.
    pub wrong_image: NegSource,
}

/// Pooled explanation features of earlier batches, used when the current
/// batch has no suitable negative.
#[derive(Debug, Clone, PartialEq)]
pub struct ReservoirEntry<T> {
    pub label: EmotionClass,
    pub image_id: String,
    pub pooled: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reservoir<T> {
    pub capacity: usize,
    pub entries: VecDeque<ReservoirEntry<T>>,
}

impl<T: Scalar> Reservoir<T> {
    pub fn new(capacity: usize) -> Self {
        Reservoir {
            capacity,
            entries: VecDeque::new(),
        }
    }

    pub fn push(&mut self, entry: ReservoirEntry<T>) {
        if self.capacity == 0 {
            return;
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(entry);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Chooses one wrong-label and one wrong-image negative per batch element.
///
/// In-batch candidates are preferred, then reservoir entries. When only one
/// kind exists it stands in for the other. Elements with no candidate at all
/// get `None` and are left out of the contrastive term.
pub fn build_negatives<T: Scalar, R: Rng>(
    labels: &[EmotionClass],
    image_ids: &[String],
    reservoir: &Reservoir<T>,
    rng: &mut R,
) -> Vec<Option<NegativePair>> {
    let b = labels.len();
    (0..b)
        .map(|i| {
            let in_batch_label: Vec<usize> = (0..b).filter(|&j| j != i && labels[j] != labels[i]).collect();
            let in_batch_image: Vec<usize> = (0..b).filter(|&j| j != i && image_ids[j] != image_ids[i]).collect();
            let pick = |batch: &[usize], keep: &dyn Fn(&ReservoirEntry<T>) -> bool, rng: &mut R| {
                if let Some(&j) = batch.choose(rng) {
                    return Some(NegSource::Batch(j));
                }
                let pool: Vec<usize> = (0..reservoir.len()).filter(|&r| keep(&reservoir.entries[r])).collect();
                pool.choose(rng).map(|&r| NegSource::Reservoir(r))
            };
            let wl = pick(&in_batch_label, &|e| e.label != labels[i], rng);
            let wi = pick(&in_batch_image, &|e| e.image_id != image_ids[i], rng);
            match (wl, wi) {
                (Some(a), Some(c)) => Some(NegativePair {
                    wrong_label: a,
                    wrong_image: c,
                }),
                (Some(a), None) => {
                    debug!("batch element {i}: no wrong-image negative, reusing the wrong-label one");
                    Some(NegativePair {
                        wrong_label: a,
                        wrong_image: a,
                    })
                }
                (None, Some(c)) => {
                    debug!("batch element {i}: no wrong-label negative, reusing the wrong-image one");
                    Some(NegativePair {
                        wrong_label: c,
                        wrong_image: c,
                    })
                }
                (None, None) => {
                    warn!("batch element {i}: no negative available; contrastive term skipped for it");
                    None
                }
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use EmotionClass::*;

    #[test]
    fn symmetric_scores() {
        let v = contrastive_loss_value(&[[0.3, 0.3, 0.3]], ContrastiveForm::AsPrinted).unwrap();
        assert!((v + 1.0 / 3.0).abs() < 1e-15);
        let v = contrastive_loss_value(&[[0.3, 0.3, 0.3]], ContrastiveForm::NegLog).unwrap();
        assert!((v - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn saturation() {
        let v = contrastive_loss_value(&[[60.0, 0.0, 0.0]], ContrastiveForm::AsPrinted).unwrap();
        assert!((v + 1.0).abs() < 1e-12);
        let v = contrastive_loss_value(&[[60.0, 0.0, 0.0]], ContrastiveForm::NegLog).unwrap();
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn tape_matches_plain() {
        let scores = [[0.2, -0.5, 1.1], [0.0, 0.4, -0.3]];
        for form in [ContrastiveForm::AsPrinted, ContrastiveForm::NegLog] {
            let store = ParamStore::<f64>::new(0);
            let mut ctx = Ctx::eval(&store);
            let s = ctx.tape.constant(Tensor::from_f64(&[2, 3], &scores.concat()).unwrap());
            let l = contrastive_loss(&mut ctx, s, form).unwrap();
            let expect = contrastive_loss_value(&scores, form).unwrap();
            assert!((ctx.tape.value(l).item() - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn negatives_from_batch() {
        let labels = [Fear, Fear, Awe, Sadness];
        let ids: Vec<String> = (0..4).map(|i| format!("img{i}")).collect();
        let res = Reservoir::<f32>::new(4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let negs = build_negatives(&labels, &ids, &res, &mut rng);
            let p = negs[0].unwrap();
            assert!(matches!(p.wrong_label, NegSource::Batch(2 | 3)));
            assert!(matches!(p.wrong_image, NegSource::Batch(1..=3)));
        }
    }

    #[test]
    fn same_label_batch_uses_reservoir() {
        let labels = [Awe, Awe];
        let ids: Vec<String> = vec!["a".into(), "b".into()];
        let mut res = Reservoir::<f32>::new(4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let negs = build_negatives(&labels, &ids, &res, &mut rng);
        // No wrong-label candidate anywhere: the wrong-image one stands in.
        assert_eq!(negs[0].unwrap().wrong_label, NegSource::Batch(1));
        res.push(ReservoirEntry {
            label: Fear,
            image_id: "z".into(),
            pooled: vec![0.0; 2],
        });
        let negs = build_negatives(&labels, &ids, &res, &mut rng);
        assert_eq!(negs[0].unwrap().wrong_label, NegSource::Reservoir(0));
    }

    #[test]
    fn single_element_without_reservoir_is_skipped() {
        let res = Reservoir::<f32>::new(4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let negs = build_negatives(&[Awe], &["a".to_string()], &res, &mut rng);
        assert_eq!(negs, vec![None]);
    }

    #[test]
    fn next_token_targets_shift_and_mask() {
        let v = Vocab::build(std::iter::empty::<&[String]>());
        let s = crate::text::build_full_sentence(&v, Awe, &["the"], 9).unwrap();
        let (t, m) = next_token_targets(std::slice::from_ref(&s));
        assert_eq!(t[0], s.token_ids[1]);
        assert_eq!(t[5], Vocab::EOS_ID);
        assert_eq!(m, [true, true, true, true, true, true, false, false, false]);
    }
}
