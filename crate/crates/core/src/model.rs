//! The full model: text embeddings, image features, optional VAD fusion,
//! the cross-attending decoder and the three heads.

use log::warn;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classes::EmotionClass;
use crate::decoder::{Decoder, DecoderConfig};
use crate::emotion::{emotion_loss, EmotionEncoder, EmotionEncoderConfig, Fusion, VadHead};
use crate::error::{Error, Result};
use crate::heads::{
    contrastive_loss, language_logits, language_loss, ContrastiveForm, ContrastiveHead, NegSource, NegativePair, Reservoir,
};
use crate::lexicon::VadLexicon;
use crate::params::{Ctx, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, Var};
use crate::text::{FullSentence, TextEmbeddings, Vocab, PROMPT_LEN};
use crate::vision::{ToyFeaturizer, ToyVisionConfig, VISION_PREFIX};

/// The three proposed components on top of the captioning baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Components {
    pub vad_fusion: bool,
    pub vad_head: bool,
    pub contrastive: bool,
}

impl Components {
    pub const ALL: Components = Components {
        vad_fusion: true,
        vad_head: true,
        contrastive: true,
    };
    pub const NONE: Components = Components {
        vad_fusion: false,
        vad_head: false,
        contrastive: false,
    };

    pub fn and(self, other: Components) -> Components {
        Components {
            vad_fusion: self.vad_fusion && other.vad_fusion,
            vad_head: self.vad_head && other.vad_head,
            contrastive: self.contrastive && other.contrastive,
        }
    }

    pub fn any(self) -> bool {
        self.vad_fusion || self.vad_head || self.contrastive
    }
}

impl Default for Components {
    fn default() -> Self {
        Components::ALL
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Sequence length `L` including the five prompt positions.
    pub max_len: usize,
    pub d_vision: usize,
    pub num_patches: usize,
    /// Built-in patch featurizer; `None` when features are precomputed.
    pub vision: Option<ToyVisionConfig>,
    pub freeze_vision: bool,
    pub emotion_encoder: EmotionEncoderConfig,
    /// Components constructed at build time.
    pub components: Components,
    pub dropout: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale configuration: 16×16 toy images cut into 4×4 patches.
    pub fn toy() -> Self {
        ModelConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            max_len: 30,
            d_vision: 64,
            num_patches: 16,
            vision: Some(ToyVisionConfig {
                image_size: 16,
                patch_size: 4,
                hidden: 0,
            }),
            freeze_vision: false,
            emotion_encoder: EmotionEncoderConfig::default(),
            components: Components::ALL,
            dropout: 0.1,
            seed: 0,
        }
    }

    /// Full-size model fed by precomputed 196×768 patch features.
    pub fn full() -> Self {
        ModelConfig {
            d_model: 768,
            n_layers: 6,
            n_heads: 12,
            max_len: 30,
            d_vision: 768,
            num_patches: 196,
            vision: None,
            freeze_vision: true,
            emotion_encoder: EmotionEncoderConfig::default(),
            components: Components::ALL,
            dropout: 0.1,
            seed: 0,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "full" => Ok(Self::full()),
            other => Err(Error::Config(format!("unknown model preset `{other}`"))),
        }
    }

    pub fn decoder(&self, vocab_size: usize) -> DecoderConfig {
        DecoderConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_model: self.d_model,
            d_vision: self.d_vision,
            max_len: self.max_len,
            vocab_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.decoder(1).validate()?;
        if self.max_len < PROMPT_LEN + 2 {
            return Err(Error::Config(format!("max_len {} leaves no room for an explanation", self.max_len)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if let Some(v) = &self.vision {
            if v.patch_size == 0 || v.image_size % v.patch_size != 0 {
                return Err(Error::Config("image size must be a multiple of the patch size".into()));
            }
            if v.num_patches() != self.num_patches {
                return Err(Error::Config(format!(
                    "featurizer yields {} patches but num_patches is {}",
                    v.num_patches(),
                    self.num_patches
                )));
            }
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

/// Image side of a batch, `[B, K, ·]`.
#[derive(Debug, Clone, PartialEq)]
pub enum ImageInput<T> {
    /// Raw toy-image patches `[B, K, p·p·3]` for the built-in featurizer.
    Patches(Tensor<T>),
    /// Precomputed features `[B, K, d_v]`.
    Features(Tensor<T>),
}

impl<T: Scalar> ImageInput<T> {
    pub fn batch_size(&self) -> usize {
        match self {
            ImageInput::Patches(t) | ImageInput::Features(t) => t.shape()[0],
        }
    }
}

/// One training or evaluation example after tokenization.
#[derive(Debug, Clone, PartialEq)]
pub struct Example<T> {
    pub image_id: String,
    pub sentence: FullSentence,
    /// `[K, p·p·3]` patches or `[K, d_v]` features, matching `is_patches`.
    pub image: Tensor<T>,
    pub is_patches: bool,
    /// Lexicon VAD of every position `[L, 3]`; zero outside the explanation.
    pub vad: Tensor<T>,
}

impl<T: Scalar> Example<T> {
    pub fn new(
        image_id: impl Into<String>,
        sentence: FullSentence,
        image: Tensor<T>,
        is_patches: bool,
        vocab: &Vocab,
        lexicon: &VadLexicon,
    ) -> Result<Self> {
        let vad = sentence_vad(&sentence, vocab, lexicon);
        Ok(Example {
            image_id: image_id.into(),
            sentence,
            image,
            is_patches,
            vad,
        })
    }

    pub fn label(&self) -> EmotionClass {
        self.sentence.label
    }
}

/// Per-position lexicon VAD `[L, 3]` with zeros outside the explanation span.
pub fn sentence_vad<T: Scalar>(sentence: &FullSentence, vocab: &Vocab, lexicon: &VadLexicon) -> Tensor<T> {
    let (st, en) = sentence.explanation_span;
    let mut data = vec![T::zero(); sentence.len() * 3];
    for t in st..en {
        let v = vocab.lexicon_key(sentence.token_ids[t]).map_or(crate::lexicon::VadVector::NEUTRAL, |k| lexicon.lookup(k));
        for (c, x) in v.as_array().into_iter().enumerate() {
            data[t * 3 + c] = T::lit(x);
        }
    }
    Tensor::new(vec![sentence.len(), 3], data).expect("vad shape")
}

/// A stacked batch. Sequences are trimmed to the longest non-padding length.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub sentences: Vec<FullSentence>,
    pub image_ids: Vec<String>,
    pub images: ImageInput<T>,
    /// `[B, L, 3]`.
    pub vad: Tensor<T>,
}

impl<T: Scalar> Batch<T> {
    pub fn new(examples: &[&Example<T>]) -> Result<Self> {
        let first = examples.first().ok_or(Error::EmptySequence("batch"))?;
        let l = examples
            .iter()
            .map(|e| e.sentence.token_ids.iter().rposition(|&t| t != Vocab::PAD_ID).map_or(1, |p| p + 1))
            .max()
            .unwrap_or(1);
        let mut sentences = Vec::with_capacity(examples.len());
        let mut vad = Vec::with_capacity(examples.len() * l * 3);
        let mut img = Vec::new();
        for e in examples {
            if e.is_patches != first.is_patches || e.image.shape() != first.image.shape() {
                return Err(Error::Shape("batch mixes image kinds or shapes".into()));
            }
            let mut s = e.sentence.clone();
            s.token_ids.truncate(l);
            s.segment_ids.truncate(l);
            s.position_ids.truncate(l);
            sentences.push(s);
            vad.extend_from_slice(&e.vad.data()[..l * 3]);
            img.extend_from_slice(e.image.data());
        }
        let mut shape = vec![examples.len()];
        shape.extend_from_slice(first.image.shape());
        let img = Tensor::new(shape, img)?;
        Ok(Batch {
            sentences,
            image_ids: examples.iter().map(|e| e.image_id.clone()).collect(),
            images: if first.is_patches {
                ImageInput::Patches(img)
            } else {
                ImageInput::Features(img)
            },
            vad: Tensor::new(vec![examples.len(), l, 3], vad)?,
        })
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.sentences.first().map_or(0, FullSentence::len)
    }

    pub fn labels(&self) -> Vec<EmotionClass> {
        self.sentences.iter().map(|s| s.label).collect()
    }
}

/// Loss nodes of one forward pass. Disabled terms are `None`.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub language: Var,
    pub emotion: Option<Var>,
    pub contrastive: Option<Var>,
    pub total: Var,
    /// `[B', 3]` scores `(pos, wrong label, wrong image)` of the scored elements.
    pub scores: Option<Var>,
    /// `[B, d]` pooled explanation states.
    pub pooled_explanation: Option<Var>,
    pub hidden: Var,
    pub logits: Var,
}

/// Everything the loss needs besides the batch.
#[derive(Debug, Clone, Copy)]
pub struct LossSpec<'a, T> {
    pub flags: Components,
    pub alpha: f64,
    pub form: ContrastiveForm,
    /// One entry per batch element; ignored when contrastive is off.
    pub negatives: &'a [Option<NegativePair>],
    pub reservoir: &'a Reservoir<T>,
}

#[derive(Debug, Clone)]
pub struct Sevlm<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub embeddings: TextEmbeddings,
    pub featurizer: Option<ToyFeaturizer>,
    pub decoder: Decoder,
    pub emotion_encoder: Option<EmotionEncoder>,
    pub fusion: Option<Fusion>,
    pub vad_head: Option<VadHead>,
    pub contrastive: Option<ContrastiveHead>,
}

impl<T: Scalar> Sevlm<T> {
    pub fn new(config: ModelConfig, vocab_size: usize) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new(config.seed);
        let embeddings = TextEmbeddings::new(&mut params, vocab_size, config.max_len, config.d_model);
        let featurizer = match config.vision {
            Some(v) => Some(ToyFeaturizer::new(&mut params, v, config.d_vision)?),
            None => None,
        };
        let decoder = Decoder::new(&mut params, config.decoder(vocab_size))?;
        let c = config.components;
        let (emotion_encoder, fusion) = if c.vad_fusion {
            (
                Some(EmotionEncoder::new(&mut params, config.emotion_encoder)?),
                Some(Fusion::new(&mut params, config.d_model)),
            )
        } else {
            (None, None)
        };
        let vad_head = c.vad_head.then(|| VadHead::new(&mut params, config.d_model));
        let contrastive = c
            .contrastive
            .then(|| ContrastiveHead::new(&mut params, config.d_model, config.d_vision));
        Ok(Sevlm {
            config,
            params,
            embeddings,
            featurizer,
            decoder,
            emotion_encoder,
            fusion,
            vad_head,
            contrastive,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.decoder.config.vocab_size
    }

    /// Components that are both built and requested.
    pub fn active(&self, flags: Components) -> Result<Components> {
        let built = self.config.components;
        if (flags.vad_fusion && !built.vad_fusion) || (flags.vad_head && !built.vad_head) || (flags.contrastive && !built.contrastive) {
            return Err(Error::Config(format!("requested components {flags:?} but the model was built with {built:?}")));
        }
        Ok(flags)
    }

    pub fn eval_ctx(&self) -> Ctx<'_, T> {
        let mut ctx = Ctx::eval(&self.params);
        if self.config.freeze_vision {
            ctx.freeze_prefix(VISION_PREFIX);
        }
        ctx
    }

    pub fn train_ctx(&self, rng: ChaCha8Rng) -> Ctx<'_, T> {
        let mut ctx = Ctx::train(&self.params, self.config.dropout, rng);
        if self.config.freeze_vision {
            ctx.freeze_prefix(VISION_PREFIX);
        }
        ctx
    }

    /// Image features `f^I` `[B, K, d_v]`.
    pub fn image_features(&self, ctx: &mut Ctx<'_, T>, images: &ImageInput<T>) -> Result<Var> {
        match images {
            ImageInput::Patches(p) => {
                let fz = self
                    .featurizer
                    .as_ref()
                    .ok_or_else(|| Error::Config("raw image patches given but the model has no featurizer".into()))?;
                let x = ctx.tape.constant(p.clone());
                fz.forward(ctx, x)
            }
            ImageInput::Features(f) => {
                if f.rank() != 3 || f.shape()[2] != self.config.d_vision {
                    return Err(Error::Config(format!(
                        "expected [B, K, {}] image features, got {:?}",
                        self.config.d_vision,
                        f.shape()
                    )));
                }
                Ok(ctx.tape.constant(f.clone()))
            }
        }
    }

    /// Input embeddings `f^S` `[B, L, d]`, with explanation rows replaced by
    /// their VAD-fused version when fusion is on.
    pub fn embed(&self, ctx: &mut Ctx<'_, T>, sentences: &[FullSentence], vad: &Tensor<T>, fusion: bool) -> Result<Var> {
        let f_s = self.embeddings.embed_sentences(ctx, sentences)?;
        if !fusion {
            return Ok(f_s);
        }
        let (enc, fu) = match (&self.emotion_encoder, &self.fusion) {
            (Some(e), Some(f)) => (e, f),
            _ => return Err(Error::Config("VAD fusion requested but not built".into())),
        };
        let spans: Vec<(usize, usize)> = sentences.iter().map(|s| s.explanation_span).collect();
        if spans.iter().all(|&(st, en)| st >= en) {
            return Ok(f_s);
        }
        let vad = ctx.tape.constant(vad.clone());
        let f_e = enc.forward(ctx, vad, &spans)?;
        let fused = fu.fuse(ctx, f_s, f_e)?;
        let mask: Vec<bool> = sentences
            .iter()
            .flat_map(|s| (0..s.len()).map(move |t| (s.explanation_span.0..s.explanation_span.1).contains(&t)))
            .collect();
        ctx.tape.where_rows(&mask, fused, f_s)
    }

    /// Decoder hidden states `f'^S` and the image features they attended to.
    pub fn hidden(&self, ctx: &mut Ctx<'_, T>, sentences: &[FullSentence], vad: &Tensor<T>, images: &ImageInput<T>, fusion: bool) -> Result<(Var, Var)> {
        let f_i = self.image_features(ctx, images)?;
        let f_s = self.embed(ctx, sentences, vad, fusion)?;
        let valid: Vec<Vec<bool>> = sentences.iter().map(FullSentence::valid_mask).collect();
        let h = self.decoder.forward(ctx, f_s, f_i, &valid)?;
        Ok((h.full, f_i))
    }

    pub fn logits(&self, ctx: &mut Ctx<'_, T>, hidden: Var) -> Result<Var> {
        let table = ctx.p(&self.embeddings.word)?;
        language_logits(ctx, hidden, table)
    }

    /// Pooled views `μ(f^I)` `[B, d_v]`, `μ(f'^M)` `[B, d]`, `μ(f'^X)` `[B, d]`.
    pub fn pooled(&self, ctx: &mut Ctx<'_, T>, hidden: Var, f_i: Var, sentences: &[FullSentence]) -> Result<(Var, Var, Var)> {
        let b = sentences.len();
        let l = ctx.tape.shape(hidden)[1];
        let d = self.config.d_model;
        let pool = |ctx: &mut Ctx<'_, T>, range: &dyn Fn(&FullSentence) -> (usize, usize)| -> Result<Var> {
            let mut w = vec![T::zero(); b * l];
            for (i, s) in sentences.iter().enumerate() {
                let (st, en) = range(s);
                if st >= en {
                    return Err(Error::EmptyReduction("pooled text view"));
                }
                let inv = T::one() / T::lit((en - st) as f64);
                for t in st..en {
                    w[i * l + t] = inv;
                }
            }
            let w = ctx.tape.constant(Tensor::new(vec![b, 1, l], w)?);
            let m = ctx.tape.matmul(w, hidden)?;
            ctx.tape.reshape(m, &[b, d])
        };
        let m = pool(ctx, &|_| (0, PROMPT_LEN))?;
        let x = pool(ctx, &|s| s.explanation_span)?;
        let i = ctx.tape.mean_axis(f_i, 1)?;
        Ok((i, m, x))
    }

    /// Full objective `L_lang + L_emo + α·L_con` for one batch.
    pub fn losses(&self, ctx: &mut Ctx<'_, T>, batch: &Batch<T>, spec: &LossSpec<'_, T>) -> Result<LossVars> {
        let flags = self.active(spec.flags)?;
        let (hidden, f_i) = self.hidden(ctx, &batch.sentences, &batch.vad, &batch.images, flags.vad_fusion)?;
        let logits = self.logits(ctx, hidden)?;
        let language = language_loss(ctx, logits, &batch.sentences)?;
        let mut total = language;

        let mut emotion = None;
        if flags.vad_head {
            let head = self.vad_head.as_ref().expect("checked by active");
            let pred = head.forward(ctx, hidden)?;
            let (target, mask) = shifted_vad_targets(batch);
            let e = emotion_loss(ctx, pred, target, &mask)?;
            total = ctx.tape.add(total, e)?;
            emotion = Some(e);
        }

        let (mut contrastive, mut scores, mut pooled_explanation) = (None, None, None);
        if flags.contrastive {
            let head = self.contrastive.as_ref().expect("checked by active");
            let (pi, pm, px) = self.pooled(ctx, hidden, f_i, &batch.sentences)?;
            pooled_explanation = Some(px);
            if spec.negatives.len() != batch.len() {
                return Err(Error::LengthMismatch(batch.len(), spec.negatives.len()));
            }
            let anchors: Vec<(usize, NegativePair)> =
                spec.negatives.iter().enumerate().filter_map(|(i, n)| n.map(|n| (i, n))).collect();
            if anchors.is_empty() {
                warn!("no batch element has a negative; contrastive term skipped");
            } else {
                let b = batch.len();
                let r = spec.reservoir.len();
                let mut bank = px;
                if anchors
                    .iter()
                    .any(|(_, n)| matches!(n.wrong_label, NegSource::Reservoir(_)) || matches!(n.wrong_image, NegSource::Reservoir(_)))
                {
                    let d = self.config.d_model;
                    let mut data = Vec::with_capacity(r * d);
                    for e in &spec.reservoir.entries {
                        if e.pooled.len() != d {
                            return Err(Error::Shape("reservoir entry width".into()));
                        }
                        data.extend_from_slice(&e.pooled);
                    }
                    let stored = ctx.tape.constant(Tensor::new(vec![r, d], data)?);
                    bank = ctx.tape.concat_rows(px, stored)?;
                }
                let src = |s: NegSource| match s {
                    NegSource::Batch(j) => j,
                    NegSource::Reservoir(k) => b + k,
                };
                let mut ai = Vec::with_capacity(3 * anchors.len());
                let mut xi = Vec::with_capacity(3 * anchors.len());
                for &(i, n) in &anchors {
                    ai.extend([i, i, i]);
                    xi.extend([i, src(n.wrong_label), src(n.wrong_image)]);
                }
                let ii = ctx.tape.index_rows(pi, &ai)?;
                let mm = ctx.tape.index_rows(pm, &ai)?;
                let xx = ctx.tape.index_rows(bank, &xi)?;
                let s = head.score(ctx, ii, mm, xx)?;
                let s = ctx.tape.reshape(s, &[anchors.len(), 3])?;
                let c = contrastive_loss(ctx, s, spec.form)?;
                let weighted = ctx.tape.scale(c, T::lit(spec.alpha));
                total = ctx.tape.add(total, weighted)?;
                contrastive = Some(c);
                scores = Some(s);
            }
        }

        Ok(LossVars {
            language,
            emotion,
            contrastive,
            total,
            scores,
            pooled_explanation,
            hidden,
            logits,
        })
    }
}

/// VAD targets aligned with the language head: the state at position `t - 1`
/// (which predicts token `t`) regresses that token's VAD. Returns `[B, L, 3]`
/// targets and the row mask.
pub fn shifted_vad_targets<T: Scalar>(batch: &Batch<T>) -> (Tensor<T>, Vec<bool>) {
    let l = batch.seq_len();
    let mut target = vec![T::zero(); batch.len() * l * 3];
    let mut mask = vec![false; batch.len() * l];
    let vad = batch.vad.data();
    for (b, s) in batch.sentences.iter().enumerate() {
        let (st, en) = s.explanation_span;
        for t in st..en {
            let row = b * l + t - 1;
            mask[row] = true;
            target[row * 3..row * 3 + 3].copy_from_slice(&vad[(b * l + t) * 3..(b * l + t) * 3 + 3]);
        }
    }
    (Tensor::new(vec![batch.len(), l, 3], target).expect("target shape"), mask)
}
