#![allow(dead_code)]

use sevlm::data::{build_vocab, encode_samples, generate_synthetic, Sample, SyntheticSpec};
use sevlm::model::Example;
use sevlm::{ModelConfig, Scalar, VadLexicon, Vocab};

pub struct Corpus<T> {
    pub samples: Vec<Sample>,
    pub vocab: Vocab,
    pub lexicon: VadLexicon,
    pub examples: Vec<Example<T>>,
}

/// `n` synthetic samples encoded for `config`.
pub fn corpus<T: Scalar>(n: usize, config: &ModelConfig) -> Corpus<T> {
    let samples = generate_synthetic(&SyntheticSpec {
        size: n,
        ..SyntheticSpec::default()
    });
    let vocab = build_vocab(&samples);
    let lexicon = VadLexicon::bundled();
    let examples = encode_samples(&samples, &vocab, &lexicon, config).expect("encode");
    Corpus {
        samples,
        vocab,
        lexicon,
        examples,
    }
}

pub fn bits<T: Scalar>(xs: &[T]) -> Vec<u64> {
    xs.iter().map(|x| x.as_f64().to_bits()).collect()
}
