//! Inference: image + prompt → emotion class and explanation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classes::EmotionClass;
use crate::error::{Error, Result};
use crate::lexicon::{VadLexicon, VadVector};
use crate::model::{sentence_vad, ImageInput, Sevlm};
use crate::nn::BlockCache;
use crate::scalar::Scalar;
use crate::tensor::{Tensor, Var};
use crate::text::{detokenize, FullSentence, Vocab, PROMPT_LEN, PROMPT_WORDS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    pub top_p: f64,
    /// Explanation tokens including `<eos>`; `None` fills the sequence length.
    pub max_new_tokens: Option<usize>,
    pub temperature: f64,
    pub seed: u64,
    pub greedy: bool,
    /// Restrict the class slot to the eight class tokens.
    pub constrain_class: bool,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            top_p: 0.9,
            max_new_tokens: None,
            temperature: 1.0,
            seed: 0,
            greedy: false,
            constrain_class: true,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config(format!("top_p must be in (0, 1], got {}", self.top_p)));
        }
        if self.max_new_tokens == Some(0) {
            return Err(Error::Config("max_new_tokens must be at least 1".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    /// `None` only in unconstrained mode when a non-class token was emitted.
    pub emotion: Option<EmotionClass>,
    pub explanation: String,
    pub tokens: Vec<String>,
    /// Log-probability of each emitted token (class token first) under the
    /// temperature-scaled model distribution.
    pub token_logprobs: Vec<f64>,
}

/// Token ids kept by nucleus filtering, in descending probability with ties
/// broken by ascending id: the shortest such prefix whose mass reaches `p`.
pub fn nucleus_keep(probs: &[f64], p: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut mass = 0.0;
    let mut kept = Vec::new();
    for i in order {
        kept.push(i);
        mass += probs[i];
        if mass >= p {
            break;
        }
    }
    kept
}

/// Zeroes everything outside the nucleus and renormalizes.
pub fn nucleus_filter(probs: &[f64], p: f64) -> Vec<f64> {
    if p >= 1.0 {
        return probs.to_vec();
    }
    let kept = nucleus_keep(probs, p);
    let z: f64 = kept.iter().map(|&i| probs[i]).sum();
    let mut out = vec![0.0; probs.len()];
    for i in kept {
        out[i] = probs[i] / z;
    }
    out
}

fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| ((l - m) / temperature).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in p.iter().enumerate() {
        if x > p[best] {
            best = i;
        }
    }
    best
}

fn sample(p: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &x) in p.iter().enumerate() {
        if x > 0.0 {
            acc += x;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Incremental decoding state for one image.
pub struct Session<'m, T: Scalar> {
    model: &'m Sevlm<T>,
    image: ImageInput<T>,
    image_done: bool,
    fusion: bool,
    dec: Vec<BlockCache<T>>,
    enc: Vec<BlockCache<T>>,
    pos: usize,
}

impl<'m, T: Scalar> Session<'m, T> {
    /// `image` is `[K, ·]`, patches when `is_patches`.
    pub fn new(model: &'m Sevlm<T>, image: &Tensor<T>, is_patches: bool, fusion: bool) -> Result<Self> {
        if fusion && model.emotion_encoder.is_none() {
            return Err(Error::Config("VAD fusion requested but not built".into()));
        }
        let mut shape = vec![1];
        shape.extend_from_slice(image.shape());
        let t = image.clone().reshape(&shape)?;
        Ok(Session {
            model,
            image: if is_patches {
                ImageInput::Patches(t)
            } else {
                ImageInput::Features(t)
            },
            image_done: false,
            fusion,
            dec: model.decoder.new_cache(),
            enc: model.emotion_encoder.as_ref().map(|e| e.new_cache()).unwrap_or_default(),
            pos: 0,
        })
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    /// Feeds one token at the next position and returns next-token logits.
    /// `vad` is the token's lexicon VAD when it belongs to the explanation.
    pub fn feed(&mut self, token: usize, vad: Option<VadVector>) -> Result<Vec<T>> {
        let m = self.model;
        if self.pos >= m.config.max_len {
            return Err(Error::Config(format!("sequence length {} exhausted", m.config.max_len)));
        }
        let mut ctx = m.eval_ctx();
        let f_i: Option<Var> = if self.image_done {
            None
        } else {
            Some(m.image_features(&mut ctx, &self.image)?)
        };
        let segment = usize::from(self.pos >= PROMPT_LEN);
        let mut x = m.embeddings.embed(&mut ctx, &[token], &[self.pos], &[segment], &[1, 1])?;
        if let (true, Some(v)) = (self.fusion, vad) {
            let (enc, fu) = (m.emotion_encoder.as_ref().expect("checked"), m.fusion.as_ref().expect("checked"));
            let row = Tensor::new(vec![1, 1, 3], v.as_array().iter().map(|&c| T::lit(c)).collect())?;
            let row = ctx.tape.constant(row);
            let t = self.pos - PROMPT_LEN;
            let f_e = enc.forward_cached(&mut ctx, row, t, &mut self.enc)?;
            x = fu.fuse(&mut ctx, x, f_e)?;
        }
        let h = m.decoder.forward_cached(&mut ctx, x, f_i, &mut self.dec)?;
        let logits = m.logits(&mut ctx, h)?;
        self.image_done = true;
        self.pos += 1;
        Ok(ctx.tape.value(logits).data().to_vec())
    }
}

/// Logits of the last position from a full (uncached) forward over `ids`.
/// Positions from [`PROMPT_LEN`] on are treated as explanation.
pub fn full_logits<T: Scalar>(
    model: &Sevlm<T>,
    vocab: &Vocab,
    lexicon: &VadLexicon,
    ids: &[usize],
    image: &Tensor<T>,
    is_patches: bool,
    fusion: bool,
) -> Result<Vec<T>> {
    let l = ids.len();
    if l == 0 {
        return Err(Error::EmptySequence("decode prefix"));
    }
    let label = ids
        .get(PROMPT_LEN - 1)
        .and_then(|&c| vocab.class_of(c))
        .unwrap_or(EmotionClass::Contentment);
    let sentence = FullSentence {
        token_ids: ids.to_vec(),
        segment_ids: (0..l).map(|i| usize::from(i >= PROMPT_LEN)).collect(),
        position_ids: (0..l).collect(),
        explanation_span: (PROMPT_LEN.min(l), l),
        label,
    };
    let vad = sentence_vad::<T>(&sentence, vocab, lexicon).reshape(&[1, l, 3])?;
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    let img = image.clone().reshape(&shape)?;
    let images = if is_patches {
        ImageInput::Patches(img)
    } else {
        ImageInput::Features(img)
    };
    let mut ctx = model.eval_ctx();
    let sentences = [sentence];
    let (h, _) = model.hidden(&mut ctx, &sentences, &vad, &images, fusion && l > PROMPT_LEN)?;
    let logits = model.logits(&mut ctx, h)?;
    let v = model.vocab_size();
    Ok(ctx.tape.value(logits).data()[(l - 1) * v..].to_vec())
}

pub struct Generator<'m, T: Scalar> {
    pub model: &'m Sevlm<T>,
    pub vocab: &'m Vocab,
    pub lexicon: &'m VadLexicon,
    /// Apply VAD fusion to emitted explanation tokens.
    pub fusion: bool,
}

impl<'m, T: Scalar> Generator<'m, T> {
    pub fn new(model: &'m Sevlm<T>, vocab: &'m Vocab, lexicon: &'m VadLexicon, fusion: bool) -> Self {
        Generator {
            model,
            vocab,
            lexicon,
            fusion,
        }
    }

    fn vad_of(&self, id: usize) -> VadVector {
        self.vocab.lexicon_key(id).map_or(VadVector::NEUTRAL, |k| self.lexicon.lookup(k))
    }

    /// Prompt ids `<bos> the emotion is`.
    pub fn prompt_ids(&self) -> Vec<usize> {
        let mut ids = vec![Vocab::BOS_ID];
        ids.extend(PROMPT_WORDS.iter().map(|w| self.vocab.id(w)));
        ids
    }

    pub fn generate(&self, image: &Tensor<T>, is_patches: bool, cfg: &GenerationConfig) -> Result<GenerationResult> {
        cfg.validate()?;
        if self.vocab.len() != self.model.vocab_size() {
            return Err(Error::Config("vocabulary does not match the model".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut session = Session::new(self.model, image, is_patches, self.fusion)?;
        let mut logits = Vec::new();
        for id in self.prompt_ids() {
            logits = session.feed(id, None)?;
        }
        let mut logprobs = Vec::new();

        // Class slot.
        let logits64: Vec<f64> = logits.iter().map(|x| x.as_f64()).collect();
        let full = softmax(&logits64, cfg.temperature);
        let class_id = if cfg.constrain_class {
            let ids = self.vocab.class_ids();
            let sub: Vec<f64> = ids.iter().map(|&i| logits64[i]).collect();
            let p = softmax(&sub, cfg.temperature);
            let k = if cfg.greedy {
                argmax(&p)
            } else {
                sample(&nucleus_filter(&p, cfg.top_p), &mut rng)
            };
            ids[k]
        } else {
            self.pick(&full, cfg, &mut rng)
        };
        logprobs.push(full[class_id].ln());
        let emotion = self.vocab.class_of(class_id);

        let budget = cfg
            .max_new_tokens
            .unwrap_or(usize::MAX)
            .min(self.model.config.max_len - PROMPT_LEN);
        let mut tokens = Vec::new();
        let mut prev = class_id;
        let mut prev_vad = None;
        for _ in 0..budget {
            let logits = session.feed(prev, prev_vad)?;
            let l64: Vec<f64> = logits.iter().map(|x| x.as_f64()).collect();
            let mut p = softmax(&l64, cfg.temperature);
            for banned in [Vocab::BOS_ID, Vocab::PAD_ID] {
                p[banned] = 0.0;
            }
            let z: f64 = p.iter().sum();
            p.iter_mut().for_each(|x| *x /= z);
            let id = self.pick(&p, cfg, &mut rng);
            logprobs.push(p[id].ln());
            if id == Vocab::EOS_ID {
                break;
            }
            tokens.push(self.vocab.word(id).to_string());
            prev = id;
            prev_vad = Some(self.vad_of(id));
            if session.position() >= self.model.config.max_len {
                break;
            }
        }
        Ok(GenerationResult {
            emotion,
            explanation: detokenize(&tokens),
            tokens,
            token_logprobs: logprobs,
        })
    }

    /// Generates for every image, item `i` seeded with `cfg.seed + i`, so the
    /// output does not depend on `threads`.
    pub fn generate_many(&self, images: &[(&Tensor<T>, bool)], cfg: &GenerationConfig, threads: usize) -> Result<Vec<GenerationResult>>
    where
        T: Send + Sync,
    {
        cfg.validate()?;
        let one = |i: usize| {
            let (image, is_patches) = images[i];
            let c = GenerationConfig {
                seed: cfg.seed.wrapping_add(i as u64),
                ..cfg.clone()
            };
            self.generate(image, is_patches, &c)
        };
        let threads = threads.clamp(1, images.len().max(1));
        if threads == 1 {
            return (0..images.len()).map(one).collect();
        }
        let chunk = images.len().div_ceil(threads);
        let parts: Vec<Result<Vec<GenerationResult>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..threads)
                .map(|t| {
                    let one = &one;
                    scope.spawn(move || (t * chunk..((t + 1) * chunk).min(images.len())).map(one).collect())
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("generation worker panicked")).collect()
        });
        let mut out = Vec::with_capacity(images.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    fn pick(&self, p: &[f64], cfg: &GenerationConfig, rng: &mut ChaCha8Rng) -> usize {
        if cfg.greedy {
            argmax(p)
        } else {
            sample(&nucleus_filter(p, cfg.top_p), rng)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nucleus_example() {
        let p = [0.5, 0.3, 0.15, 0.05];
        assert_eq!(nucleus_keep(&p, 0.9), vec![0, 1, 2]);
        let f = nucleus_filter(&p, 0.9);
        assert!((f[0] - 0.5 / 0.95).abs() < 1e-15);
        assert_eq!(f[3], 0.0);
        assert_eq!(nucleus_filter(&p, 1.0), p.to_vec());
    }

    #[test]
    fn ties_prefer_low_ids() {
        assert_eq!(nucleus_keep(&[0.25; 4], 0.5), vec![0, 1]);
    }
}
