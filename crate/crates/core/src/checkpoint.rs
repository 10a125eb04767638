//! Binary checkpoints.
//!
//! Layout: the 8-byte magic `SEVLMCKP`, a little-endian `u32` format version,
//! a `u64` header length, the JSON header, then little-endian `f32` blobs in
//! the order the header lists them: parameters, first moments, second
//! moments, reservoir vectors.

use std::io::Write as _;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::classes::EmotionClass;
use crate::error::{Error, Result};
use crate::heads::{Reservoir, ReservoirEntry};
use crate::lexicon::VadLexicon;
use crate::model::{ModelConfig, Sevlm};
use crate::optim::AdamW;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::text::Vocab;
use crate::training::{TrainConfig, Trainer};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SEVLMCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    vocab: Vec<String>,
    lexicon: String,
    optimizer_step: u64,
    params: Vec<(String, Vec<usize>)>,
    moments: Vec<(String, Vec<usize>)>,
    reservoir: Vec<(EmotionClass, String, usize)>,
}

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub trainer: Trainer<T>,
    pub vocab: Vocab,
    /// Lexicon restricted to the vocabulary.
    pub lexicon: VadLexicon,
}

fn put(out: &mut Vec<u8>, t: &[impl Scalar]) {
    for &x in t {
        out.extend_from_slice(&x.as_f32().to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn floats<T: Scalar>(&mut self, n: usize) -> Result<Vec<T>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("blob size overflow".into()))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect())
    }

    fn tensor<T: Scalar>(&mut self, shape: &[usize]) -> Result<Tensor<T>> {
        let data = self.floats(shape.iter().product())?;
        Tensor::new(shape.to_vec(), data)
    }
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(trainer: Trainer<T>, vocab: Vocab, lexicon: &VadLexicon) -> Self {
        let keys = vocab.words().iter().map(String::as_str).chain(EmotionClass::ALL.iter().map(|c| c.name()));
        let lexicon = lexicon.restrict(keys);
        Checkpoint { trainer, vocab, lexicon }
    }

    pub fn model(&self) -> &Sevlm<T> {
        &self.trainer.model
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let t = &self.trainer;
        let opt = &t.optimizer;
        let header = Header {
            model: t.model.config.clone(),
            train: t.config.clone(),
            vocab: self.vocab.words().to_vec(),
            lexicon: self.lexicon.to_tsv(),
            optimizer_step: opt.step,
            params: t.model.params.iter().map(|(n, v)| (n.to_string(), v.shape().to_vec())).collect(),
            moments: opt.m.iter().map(|(n, v)| (n.clone(), v.shape().to_vec())).collect(),
            reservoir: t
                .reservoir
                .entries
                .iter()
                .map(|e| (e.label, e.image_id.clone(), e.pooled.len()))
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, v) in t.model.params.iter() {
            put(&mut out, v.data());
        }
        for (n, m) in &opt.m {
            put(&mut out, m.data());
            let v = opt.v.get(n).ok_or_else(|| Error::Format(format!("second moment of {n} missing")))?;
            put(&mut out, v.data());
        }
        for e in &t.reservoir.entries {
            put(&mut out, &e.pooled);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
        let header: Header = serde_json::from_slice(r.take(len)?)?;
        let vocab = Vocab::from_words(header.vocab)?;
        let lexicon = VadLexicon::parse(&header.lexicon, "checkpoint")?;
        let mut model = Sevlm::<T>::new(header.model, vocab.len())?;
        if model.params.len() != header.params.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} parameters, model defines {}",
                header.params.len(),
                model.params.len()
            )));
        }
        for (name, shape) in &header.params {
            let t = r.tensor(shape)?;
            model.params.set(name, t)?;
        }
        let mut optimizer = AdamW::new(header.train.optimizer);
        optimizer.step = header.optimizer_step;
        for (name, shape) in &header.moments {
            optimizer.m.insert(name.clone(), r.tensor(shape)?);
            optimizer.v.insert(name.clone(), r.tensor(shape)?);
        }
        let mut reservoir = Reservoir::new(header.train.reservoir_capacity);
        let mut entries = Vec::new();
        for (label, image_id, width) in header.reservoir {
            entries.push(ReservoirEntry {
                label,
                image_id,
                pooled: r.floats(width)?,
            });
        }
        reservoir.entries = entries.into();
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
        }
        let mut trainer = Trainer::new(model, header.train)?;
        trainer.optimizer = optimizer;
        trainer.reservoir = reservoir;
        Ok(Checkpoint { trainer, vocab, lexicon })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

/// Named parameter tensors of a model, for comparisons in tests and tools.
pub fn param_map<T: Scalar>(model: &Sevlm<T>) -> IndexMap<String, Tensor<T>> {
    model.params.iter().map(|(n, v)| (n.to_string(), v.clone())).collect()
}
