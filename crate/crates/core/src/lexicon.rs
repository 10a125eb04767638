//! Word → valence/arousal/dominance lexicon.
//!
//! The on-disk format is one entry per line, `word<TAB>v<TAB>a<TAB>d`, with
//! every rating in `[-1, 1]`. Blank lines and lines starting with `#` are
//! ignored. Words missing from the lexicon are emotionally neutral and map to
//! `(0, 0, 0)`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::warn;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Small lexicon shipped with the crate; used by tests and the synthetic corpus.
pub const BUNDLED_LEXICON: &str = include_str!("../data/mini_lexicon.tsv");

#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct VadVector {
    pub valence: f64,
    pub arousal: f64,
    pub dominance: f64,
}

impl VadVector {
    pub const NEUTRAL: VadVector = VadVector {
        valence: 0.0,
        arousal: 0.0,
        dominance: 0.0,
    };

    pub fn new(valence: f64, arousal: f64, dominance: f64) -> Result<Self> {
        let v = VadVector {
            valence,
            arousal,
            dominance,
        };
        if v.as_array().iter().any(|x| !(-1.0..=1.0).contains(x)) {
            return Err(Error::Validation(format!(
                "VAD components must lie in [-1, 1], got ({valence}, {arousal}, {dominance})"
            )));
        }
        Ok(v)
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.valence, self.arousal, self.dominance]
    }
}

#[derive(Debug, Clone, Default)]
pub struct VadLexicon {
    entries: HashMap<String, VadVector>,
    source: Option<PathBuf>,
}

impl VadLexicon {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lex = Self::parse(&text, &path.display().to_string())?;
        lex.source = Some(path.to_path_buf());
        Ok(lex)
    }

    pub fn bundled() -> Self {
        Self::parse(BUNDLED_LEXICON, "<bundled>").expect("bundled lexicon is valid")
    }

    /// Parses TSV text; `origin` names the source in error messages.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut entries = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            let trimmed = line.trim_end_matches('\r');
            if trimmed.trim().is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: origin.to_string(),
                line: lineno,
                msg,
            };
            let fields: Vec<&str> = trimmed.split('\t').collect();
            if fields.len() != 4 {
                return Err(err(format!("expected 4 tab-separated fields, found {}", fields.len())));
            }
            let word = fields[0].trim().to_lowercase();
            if word.is_empty() {
                return Err(err("empty word".into()));
            }
            let mut vals = [0.0; 3];
            for (slot, raw) in vals.iter_mut().zip(&fields[1..]) {
                *slot = raw
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| err(format!("bad number `{raw}`: {e}")))?;
            }
            let vad = VadVector::new(vals[0], vals[1], vals[2])
                .map_err(|e| Error::Validation(format!("{origin}:{lineno}: {e}")))?;
            if entries.insert(word.clone(), vad).is_some() {
                warn!("{origin}:{lineno}: duplicate lexicon entry `{word}`; keeping the last one");
            }
        }
        Ok(VadLexicon {
            entries,
            source: None,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn source(&self) -> Option<&Path> {
        self.source.as_deref()
    }

    pub fn get(&self, word: &str) -> Option<VadVector> {
        self.entries
            .get(word)
            .or_else(|| self.entries.get(&word.to_lowercase()))
            .copied()
    }

    /// Case-insensitive lookup; unknown words are neutral.
    pub fn lookup(&self, word: &str) -> VadVector {
        self.get(word).unwrap_or(VadVector::NEUTRAL)
    }

    /// One row per token, `[T, 3]`.
    pub fn vad_sequence<T: Scalar, S: AsRef<str>>(&self, tokens: &[S]) -> Result<Tensor<T>> {
        if tokens.is_empty() {
            return Err(Error::EmptySequence("vad_sequence needs at least one token"));
        }
        let data = tokens
            .iter()
            .flat_map(|t| self.lookup(t.as_ref()).as_array())
            .map(T::lit)
            .collect();
        Tensor::new(vec![tokens.len(), 3], data)
    }

    /// Entries sorted by word.
    pub fn entries(&self) -> Vec<(&str, VadVector)> {
        let mut v: Vec<_> = self.entries.iter().map(|(k, v)| (k.as_str(), *v)).collect();
        v.sort_by(|a, b| a.0.cmp(b.0));
        v
    }

    /// Subset containing only the given words (missing ones are skipped).
    pub fn restrict<'a>(&self, words: impl IntoIterator<Item = &'a str>) -> Self {
        let entries = words
            .into_iter()
            .filter_map(|w| self.get(w).map(|v| (w.to_lowercase(), v)))
            .collect();
        VadLexicon {
            entries,
            source: self.source.clone(),
        }
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (w, v) in self.entries() {
            // `{}` on f64 prints the shortest string that parses back exactly.
            let _ = writeln!(out, "{w}\t{}\t{}\t{}", v.valence, v.arousal, v.dominance);
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_single_lines() {
        let lex = VadLexicon::parse("banquet\t0.53\t0.142\t0.2\nfuneral\t-0.854\t-0.24\t-0.214\n", "t").unwrap();
        assert_eq!(lex.lookup("banquet").as_array(), [0.53, 0.142, 0.2]);
        assert_eq!(lex.lookup("funeral").as_array(), [-0.854, -0.24, -0.214]);
        assert_eq!(lex.len(), 2);
    }

    #[test]
    fn rejects_out_of_range() {
        let err = VadLexicon::parse("bad\t2.0\t0\t0", "t").unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = VadLexicon::parse("ok\t0\t0\t0\nbroken\t0.1\n", "lex.tsv").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
        let err = VadLexicon::parse("x\tnan-ish\t0\t0", "t").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn duplicates_keep_last() {
        let lex = VadLexicon::parse("a\t0.1\t0\t0\nA\t0.2\t0\t0\n", "t").unwrap();
        assert_eq!(lex.len(), 1);
        assert_eq!(lex.lookup("a").valence, 0.2);
    }

    #[test]
    fn oov_and_case() {
        let lex = VadLexicon::bundled();
        assert_eq!(lex.lookup("zzqx"), VadVector::NEUTRAL);
        assert_eq!(lex.lookup("BANQUET"), lex.lookup("banquet"));
        assert_eq!(lex.lookup("<bos>"), VadVector::NEUTRAL);
    }

    #[test]
    fn vad_sequence_rows() {
        let lex = VadLexicon::bundled();
        let s: Tensor<f64> = lex.vad_sequence(&["banquet", "funeral"]).unwrap();
        assert_eq!(s.shape(), &[2, 3]);
        assert_eq!(s.data(), &[0.53, 0.142, 0.2, -0.854, -0.24, -0.214]);
        let z: Tensor<f64> = lex.vad_sequence(&["qq"; 4]).unwrap();
        assert!(z.data().iter().all(|&x| x == 0.0));
        assert!(matches!(
            lex.vad_sequence::<f64, &str>(&[]),
            Err(Error::EmptySequence(_))
        ));
    }
}
