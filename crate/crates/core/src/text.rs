//! Word-level tokenizer, vocabulary, full-sentence layout and text embeddings.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::classes::EmotionClass;
use crate::error::{Error, Result};
use crate::params::{Ctx, Init, ParamStore, INIT_STD};
use crate::scalar::Scalar;
use crate::tensor::Var;

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";

/// Words of the classification prompt preceding the class slot.
pub const PROMPT_WORDS: [&str; 3] = ["the", "emotion", "is"];

/// Positions taken by `<bos> the emotion is <class>`.
pub const PROMPT_LEN: usize = 5;

/// Lowercases and splits into words; every punctuation character becomes
/// its own token. Apostrophes stay inside words.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() || ch == '\'' {
            cur.push(ch);
            continue;
        }
        if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_string());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    tokens.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(" ")
}

/// Canonical text form: lowercase tokens joined by single spaces.
pub fn normalize(text: &str) -> String {
    detokenize(&tokenize(text))
}

pub fn class_token(class: EmotionClass) -> String {
    format!("<{}>", class.name())
}

/// Bidirectional word/id map. Ids are contiguous from zero: the four
/// reserved tokens, the eight class tokens, the prompt words, then corpus
/// words in lexicographic order.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub const BOS_ID: usize = 0;
    pub const EOS_ID: usize = 1;
    pub const PAD_ID: usize = 2;
    pub const UNK_ID: usize = 3;
    const CLASS_BASE: usize = 4;

    fn reserved() -> Vec<String> {
        let mut v: Vec<String> = [BOS, EOS, PAD, UNK].iter().map(|s| s.to_string()).collect();
        v.extend(EmotionClass::ALL.iter().map(|&c| class_token(c)));
        v.extend(PROMPT_WORDS.iter().map(|s| s.to_string()));
        v
    }

    /// Builds a vocabulary covering every word of `sentences`.
    pub fn build<'a, I, S>(sentences: I) -> Self
    where
        I: IntoIterator<Item = &'a [S]>,
        S: AsRef<str> + 'a,
    {
        let mut words = Self::reserved();
        let fixed: BTreeSet<String> = words.iter().cloned().collect();
        let corpus: BTreeSet<String> = sentences
            .into_iter()
            .flat_map(|s| s.iter().map(|w| w.as_ref().to_string()))
            .filter(|w| !fixed.contains(w))
            .collect();
        words.extend(corpus);
        Self::from_words(words).expect("reserved tokens are unique")
    }

    pub fn from_words(words: Vec<String>) -> Result<Self> {
        let reserved = Self::reserved();
        if words.len() < reserved.len() || words[..reserved.len()] != reserved[..] {
            return Err(Error::Format("vocabulary must start with the reserved tokens".into()));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() {
                return Err(Error::Format(format!("empty vocabulary entry at id {i}")));
            }
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary entry `{w}`")));
            }
        }
        Ok(Vocab { words, index })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn get(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    /// Id of `word`, or `<unk>`.
    pub fn id(&self, word: &str) -> usize {
        self.get(word).unwrap_or(Self::UNK_ID)
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn class_id(&self, class: EmotionClass) -> usize {
        Self::CLASS_BASE + class.index()
    }

    pub fn class_ids(&self) -> Vec<usize> {
        EmotionClass::ALL.iter().map(|&c| self.class_id(c)).collect()
    }

    pub fn class_of(&self, id: usize) -> Option<EmotionClass> {
        id.checked_sub(Self::CLASS_BASE).and_then(EmotionClass::from_index)
    }

    pub fn is_special(&self, id: usize) -> bool {
        id < Self::CLASS_BASE
    }

    /// Word used to look the token up in a VAD lexicon: the class word for
    /// class tokens, nothing for the reserved tokens.
    pub fn lexicon_key(&self, id: usize) -> Option<&str> {
        if let Some(c) = self.class_of(id) {
            return Some(c.name());
        }
        if self.is_special(id) {
            return None;
        }
        self.words.get(id).map(String::as_str)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from(
            "# vocabulary: one token per line, id = index among non-comment lines;\n\
             # <bos> <eos> <pad> <unk>, the eight class tokens and the prompt words come first\n",
        );
        for w in &self.words {
            let _ = writeln!(out, "{w}");
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let words = text
            .lines()
            .filter(|l| !l.starts_with('#'))
            .map(|l| l.trim_end_matches('\r').to_string())
            .collect();
        Self::from_words(words)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Prompt plus explanation laid out over exactly `L` positions.
#[derive(Debug, Clone, PartialEq)]
pub struct FullSentence {
    pub token_ids: Vec<usize>,
    pub segment_ids: Vec<usize>,
    pub position_ids: Vec<usize>,
    /// Half-open range of the explanation tokens (excludes `<eos>`).
    pub explanation_span: (usize, usize),
    pub label: EmotionClass,
}

impl FullSentence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Explanation length `T`.
    pub fn explanation_len(&self) -> usize {
        self.explanation_span.1 - self.explanation_span.0
    }

    /// `true` on every non-padding position.
    pub fn valid_mask(&self) -> Vec<bool> {
        self.token_ids.iter().map(|&t| t != Vocab::PAD_ID).collect()
    }

    pub fn explanation_ids(&self) -> &[usize] {
        &self.token_ids[self.explanation_span.0..self.explanation_span.1]
    }
}

/// Layout `<bos> the emotion is <class> x₁ … x_T <eos> <pad> …`.
///
/// Explanations that do not fit are truncated at the tail; `<eos>` is always
/// kept. Segment ids are 0 on the prompt and 1 everywhere after it.
pub fn build_full_sentence<S: AsRef<str>>(
    vocab: &Vocab,
    label: EmotionClass,
    explanation: &[S],
    max_len: usize,
) -> Result<FullSentence> {
    if max_len < PROMPT_LEN + 2 {
        return Err(Error::Config(format!(
            "sequence length {max_len} cannot hold the prompt, one explanation token and <eos>"
        )));
    }
    if explanation.is_empty() {
        return Err(Error::EmptySequence("explanation"));
    }
    let mut ids = vec![Vocab::BOS_ID];
    ids.extend(PROMPT_WORDS.iter().map(|w| vocab.id(w)));
    ids.push(vocab.class_id(label));
    let keep = explanation.len().min(max_len - PROMPT_LEN - 1);
    ids.extend(explanation[..keep].iter().map(|w| vocab.id(w.as_ref())));
    ids.push(Vocab::EOS_ID);
    ids.resize(max_len, Vocab::PAD_ID);
    let segment_ids = (0..max_len).map(|i| usize::from(i >= PROMPT_LEN)).collect();
    Ok(FullSentence {
        token_ids: ids,
        segment_ids,
        position_ids: (0..max_len).collect(),
        explanation_span: (PROMPT_LEN, PROMPT_LEN + keep),
        label,
    })
}

/// Word, position and segment embedding tables.
#[derive(Debug, Clone)]
pub struct TextEmbeddings {
    pub word: String,
    pub position: String,
    pub segment: String,
}

impl TextEmbeddings {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, vocab_size: usize, max_len: usize, d: usize) -> Self {
        TextEmbeddings {
            word: store.register("text.word", &[vocab_size, d], Init::Normal(INIT_STD)),
            position: store.register("text.position", &[max_len, d], Init::Normal(INIT_STD)),
            segment: store.register("text.segment", &[2, d], Init::Normal(INIT_STD)),
        }
    }

    /// `word[id] + position[pos] + segment[seg]` for each row; the result has
    /// shape `shape ++ [d]`.
    pub fn embed<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        ids: &[usize],
        positions: &[usize],
        segments: &[usize],
        shape: &[usize],
    ) -> Result<Var> {
        let (w, p, s) = (ctx.p(&self.word)?, ctx.p(&self.position)?, ctx.p(&self.segment)?);
        let we = ctx.tape.embedding(w, ids, shape)?;
        let pe = ctx.tape.embedding(p, positions, shape)?;
        let se = ctx.tape.embedding(s, segments, shape)?;
        let x = ctx.tape.add(we, pe)?;
        ctx.tape.add(x, se)
    }

    pub fn embed_sentences<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, sentences: &[FullSentence]) -> Result<Var> {
        let b = sentences.len();
        let l = sentences.first().map_or(0, FullSentence::len);
        let ids: Vec<usize> = sentences.iter().flat_map(|s| s.token_ids.iter().copied()).collect();
        let pos: Vec<usize> = sentences.iter().flat_map(|s| s.position_ids.iter().copied()).collect();
        let seg: Vec<usize> = sentences.iter().flat_map(|s| s.segment_ids.iter().copied()).collect();
        self.embed(ctx, &ids, &pos, &seg, &[b, l])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("The man is fighting!"), toks("the man is fighting !"));
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("  It's  DARK,ok"), toks("it's dark , ok"));
    }

    #[test]
    fn full_sentence_layout() {
        let v = Vocab::build([toks("dark trees").as_slice()]);
        let s = build_full_sentence(&v, EmotionClass::Fear, &["dark", "trees"], 12).unwrap();
        let words: Vec<&str> = s.token_ids.iter().map(|&i| v.word(i)).collect();
        assert_eq!(
            words,
            ["<bos>", "the", "emotion", "is", "<fear>", "dark", "trees", "<eos>", "<pad>", "<pad>", "<pad>", "<pad>"]
        );
        assert_eq!(s.segment_ids, [0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1, 1]);
        assert_eq!(s.explanation_span, (5, 7));
        assert_eq!(s.position_ids, (0..12).collect::<Vec<_>>());
    }

    #[test]
    fn long_explanation_is_truncated() {
        let long: Vec<String> = (0..100).map(|i| format!("w{i}")).collect();
        let v = Vocab::build([long.as_slice()]);
        let s = build_full_sentence(&v, EmotionClass::Awe, &long, 30).unwrap();
        assert_eq!(s.explanation_len(), 30 - 6);
        assert_eq!(s.token_ids[29], Vocab::EOS_ID);
        assert_eq!(s.len(), 30);
    }

    #[test]
    fn empty_explanation_rejected() {
        let v = Vocab::build(std::iter::empty::<&[String]>());
        assert!(build_full_sentence::<&str>(&v, EmotionClass::Awe, &[], 30).is_err());
    }

    #[test]
    fn vocab_reserved_ids_and_round_trip() {
        let v = Vocab::build([toks("zebra apple").as_slice()]);
        assert_eq!(v.word(Vocab::BOS_ID), BOS);
        assert_eq!(v.word(v.class_id(EmotionClass::Disgust)), "<disgust>");
        assert_eq!(v.lexicon_key(v.class_id(EmotionClass::Fear)), Some("fear"));
        assert_eq!(v.lexicon_key(Vocab::PAD_ID), None);
        assert_eq!(v.id("never-seen"), Vocab::UNK_ID);
        let back = Vocab::parse(&v.to_text()).unwrap();
        assert_eq!(back, v);
        assert!(v.get("apple").unwrap() < v.get("zebra").unwrap());
    }
}
