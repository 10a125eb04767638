//! ACC, emotion alignment, BLEU, ROUGE-L, Unique and paired-bootstrap
//! significance.

use std::collections::{HashMap, HashSet};

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classes::EmotionClass;
use crate::data::{Sample, CLASS_KEYWORDS};
use crate::error::{Error, Result};
use crate::lexicon::VadLexicon;
use crate::text::{normalize, tokenize};

/// `β` of the ROUGE-L F-measure.
pub const ROUGE_BETA: f64 = 1.2;

pub fn accuracy(preds: &[EmotionClass], golds: &[EmotionClass]) -> Result<f64> {
    if preds.len() != golds.len() {
        return Err(Error::LengthMismatch(preds.len(), golds.len()));
    }
    if preds.is_empty() {
        return Err(Error::EmptySequence("accuracy inputs"));
    }
    Ok(preds.iter().zip(golds).filter(|(a, b)| a == b).count() as f64 / preds.len() as f64)
}

/// Deterministic text → emotion classifier: keyword votes, then closeness
/// of the text's mean valence to the class word's valence, then class order.
#[derive(Debug, Clone)]
pub struct EaClassifier {
    keywords: HashMap<String, EmotionClass>,
    lexicon: VadLexicon,
}

impl Default for EaClassifier {
    fn default() -> Self {
        Self::new(VadLexicon::bundled())
    }
}

impl EaClassifier {
    /// Class of an empty explanation.
    pub const FALLBACK: EmotionClass = EmotionClass::Contentment;

    pub fn new(lexicon: VadLexicon) -> Self {
        let keywords = CLASS_KEYWORDS
            .iter()
            .flat_map(|(c, ws)| ws.iter().map(move |w| (w.to_string(), *c)))
            .collect();
        EaClassifier { keywords, lexicon }
    }

    pub fn classify(&self, text: &str) -> EmotionClass {
        let toks = tokenize(text);
        if toks.is_empty() {
            return Self::FALLBACK;
        }
        let mut votes = [0usize; EmotionClass::COUNT];
        for t in &toks {
            if let Some(c) = self.keywords.get(t) {
                votes[c.index()] += 1;
            }
        }
        let top = *votes.iter().max().expect("eight classes");
        let tied: Vec<EmotionClass> = EmotionClass::ALL.iter().copied().filter(|c| votes[c.index()] == top).collect();
        if tied.len() == 1 {
            return tied[0];
        }
        let vals: Vec<f64> = toks.iter().filter_map(|t| self.lexicon.get(t)).map(|v| v.valence).collect();
        let mean = if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        };
        let dist = |c: &EmotionClass| (self.lexicon.lookup(c.name()).valence - mean).abs();
        let mut best = tied[0];
        for c in &tied[1..] {
            if dist(c) < dist(&best) {
                best = *c;
            }
        }
        best
    }
}

pub fn emotion_alignment(explanations: &[String], golds: &[EmotionClass], classifier: &EaClassifier) -> Result<f64> {
    let preds: Vec<EmotionClass> = explanations.iter().map(|e| classifier.classify(e)).collect();
    accuracy(&preds, golds)
}

fn ngram_counts(toks: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU-`n`: clipped i-gram precisions for `i ≤ n` pooled over the
/// corpus, combined by geometric mean and scaled by the brevity penalty.
/// Without smoothing any zero precision gives 0; with smoothing orders above
/// one use add-one counts.
pub fn corpus_bleu(candidates: &[Vec<String>], references: &[Vec<Vec<String>>], n: usize, smoothing: bool) -> Result<f64> {
    if !(1..=4).contains(&n) {
        return Err(Error::Config(format!("BLEU order must be 1..=4, got {n}")));
    }
    if candidates.len() != references.len() {
        return Err(Error::LengthMismatch(candidates.len(), references.len()));
    }
    let mut matched = vec![0usize; n];
    let mut total = vec![0usize; n];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (cand, refs) in candidates.iter().zip(references) {
        c_len += cand.len();
        r_len += refs
            .iter()
            .map(Vec::len)
            .min_by_key(|&l| (l.abs_diff(cand.len()), l))
            .unwrap_or(0);
        for i in 1..=n {
            let cc = ngram_counts(cand, i);
            let mut max_ref: HashMap<&[String], usize> = HashMap::new();
            for r in refs {
                for (g, k) in ngram_counts(r, i) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(k);
                }
            }
            for (g, k) in &cc {
                matched[i - 1] += (*k).min(max_ref.get(g).copied().unwrap_or(0));
            }
            total[i - 1] += cand.len().saturating_sub(i - 1);
        }
    }
    if c_len == 0 {
        warn!("BLEU over empty candidates is 0");
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for i in 0..n {
        let (m, t) = if smoothing && i > 0 {
            (matched[i] + 1, total[i] + 1)
        } else {
            (matched[i], total[i])
        };
        if m == 0 || t == 0 {
            return Ok(0.0);
        }
        log_sum += (m as f64 / t as f64).ln();
    }
    let bp = if c_len > r_len {
        1.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };
    Ok(bp * (log_sum / n as f64).exp())
}

/// BLEU of a single candidate.
pub fn bleu(candidate: &[String], references: &[Vec<String>], n: usize) -> Result<f64> {
    corpus_bleu(&[candidate.to_vec()], &[references.to_vec()], n, false)
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

/// LCS-based F-measure `(1+β²)PR / (R + β²P)` with `β = 1.2`.
pub fn rouge_l(candidate: &[String], reference: &[String]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let l = lcs(candidate, reference) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let p = l / candidate.len() as f64;
    let r = l / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// Mean over samples of the best ROUGE-L against any reference.
pub fn corpus_rouge_l(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::LengthMismatch(candidates.len(), references.len()));
    }
    if candidates.is_empty() {
        return Err(Error::EmptySequence("ROUGE-L inputs"));
    }
    let sum: f64 = candidates
        .iter()
        .zip(references)
        .map(|(c, rs)| rs.iter().map(|r| rouge_l(c, r)).fold(0.0, f64::max))
        .sum();
    Ok(sum / candidates.len() as f64)
}

/// Fraction of distinct explanations after normalization.
pub fn unique_fraction(explanations: &[String]) -> Result<f64> {
    if explanations.is_empty() {
        return Err(Error::EmptySequence("explanations"));
    }
    let distinct: HashSet<String> = explanations.iter().map(|e| normalize(e)).collect();
    Ok(distinct.len() as f64 / explanations.len() as f64)
}

/// One-sided paired bootstrap testing whether system A beats system B.
/// `metric(indices)` scores both systems on a resample and returns `(a, b)`;
/// the p-value is the fraction of resamples where `b >= a`.
pub fn paired_bootstrap(n: usize, iters: usize, seed: u64, mut metric: impl FnMut(&[usize]) -> (f64, f64)) -> Result<f64> {
    if n == 0 || iters == 0 {
        return Err(Error::EmptySequence("bootstrap sample"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = vec![0usize; n];
    let mut not_better = 0usize;
    for _ in 0..iters {
        for x in idx.iter_mut() {
            *x = rng.gen_range(0..n);
        }
        let (a, b) = metric(&idx);
        if b >= a {
            not_better += 1;
        }
    }
    Ok(not_better as f64 / iters as f64)
}

/// Paired bootstrap over per-sample scores with the mean as the metric.
pub fn paired_bootstrap_scores(a: &[f64], b: &[f64], iters: usize, seed: u64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    paired_bootstrap(a.len(), iters, seed, |idx| {
        let (sa, sb) = idx.iter().fold((0.0, 0.0), |(x, y), &i| (x + a[i], y + b[i]));
        (sa / idx.len() as f64, sb / idx.len() as f64)
    })
}

/// One generated output, as written by `generate` and read by `eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prediction {
    pub image_id: String,
    pub emotion: EmotionClass,
    pub explanation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub image_id: String,
    pub gold: EmotionClass,
    pub predicted: EmotionClass,
    pub deduced: EmotionClass,
    pub explanation: String,
    pub rouge_l: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub acc: f64,
    pub ea: f64,
    /// BLEU-1 through BLEU-4.
    pub bleu: [f64; 4],
    pub rouge_l: f64,
    pub unique: f64,
    pub records: Vec<EvalRecord>,
}

/// Scores one prediction per gold sample, matched by image id. All gold
/// explanations of an image serve as references.
pub fn evaluate(preds: &[Prediction], golds: &[Sample], classifier: &EaClassifier) -> Result<EvalReport> {
    if golds.is_empty() {
        return Err(Error::EmptySequence("gold samples"));
    }
    let by_id: HashMap<&str, &Prediction> = preds.iter().map(|p| (p.image_id.as_str(), p)).collect();
    let mut refs_of: HashMap<&str, Vec<Vec<String>>> = HashMap::new();
    for g in golds {
        refs_of.entry(g.image_id.as_str()).or_default().push(g.tokens());
    }
    let mut cands = Vec::new();
    let mut refs = Vec::new();
    let mut records = Vec::new();
    for g in golds {
        let p = by_id
            .get(g.image_id.as_str())
            .ok_or_else(|| Error::Validation(format!("no prediction for image `{}`", g.image_id)))?;
        let cand = tokenize(&p.explanation);
        let r = refs_of[g.image_id.as_str()].clone();
        let rl = r.iter().map(|x| rouge_l(&cand, x)).fold(0.0, f64::max);
        records.push(EvalRecord {
            image_id: g.image_id.clone(),
            gold: g.emotion,
            predicted: p.emotion,
            deduced: classifier.classify(&p.explanation),
            explanation: p.explanation.clone(),
            rouge_l: rl,
        });
        cands.push(cand);
        refs.push(r);
    }
    let n = records.len();
    let acc = records.iter().filter(|r| r.predicted == r.gold).count() as f64 / n as f64;
    let ea = records.iter().filter(|r| r.deduced == r.gold).count() as f64 / n as f64;
    let mut bleu = [0.0; 4];
    for (i, b) in bleu.iter_mut().enumerate() {
        *b = corpus_bleu(&cands, &refs, i + 1, false)?;
    }
    let explanations: Vec<String> = records.iter().map(|r| r.explanation.clone()).collect();
    Ok(EvalReport {
        n,
        acc,
        ea,
        bleu,
        rouge_l: records.iter().map(|r| r.rouge_l).sum::<f64>() / n as f64,
        unique: unique_fraction(&explanations)?,
        records,
    })
}
