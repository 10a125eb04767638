//! Structural properties of the full model: causality, patch-order
//! invariance, incremental decoding, optional components and persistence.

mod common;

use common::{bits, corpus};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sevlm::checkpoint::param_map;
use sevlm::generation::{full_logits, GenerationConfig, Generator, Session};
use sevlm::heads::Reservoir;
use sevlm::model::{sentence_vad, Batch, Example, ImageInput, LossSpec};
use sevlm::text::PROMPT_LEN;
use sevlm::{Checkpoint, Components, ModelConfig, Sevlm, Tensor, TrainConfig, Trainer};

fn eval_config() -> ModelConfig {
    ModelConfig {
        dropout: 0.0,
        ..ModelConfig::toy()
    }
}

/// Logits `[L, V]` of one example from a full forward pass.
fn logits_of(model: &Sevlm<f64>, ex: &Example<f64>, images: &ImageInput<f64>, fusion: bool) -> Vec<f64> {
    let l = ex.sentence.len();
    let vad = ex.vad.clone().reshape(&[1, l, 3]).unwrap();
    let mut ctx = model.eval_ctx();
    let (h, _) = model.hidden(&mut ctx, std::slice::from_ref(&ex.sentence), &vad, images, fusion).unwrap();
    let logits = model.logits(&mut ctx, h).unwrap();
    ctx.tape.value(logits).data().to_vec()
}

fn patches(ex: &Example<f64>) -> ImageInput<f64> {
    let mut shape = vec![1];
    shape.extend_from_slice(ex.image.shape());
    ImageInput::Patches(ex.image.clone().reshape(&shape).unwrap())
}

#[test]
fn decoder_is_causal_with_fusion() {
    let c = corpus::<f64>(4, &eval_config());
    let model = Sevlm::<f64>::new(eval_config(), c.vocab.len()).unwrap();
    let ex = &c.examples[0];
    let v = model.vocab_size();
    let t = PROMPT_LEN + 3;
    let before = logits_of(&model, ex, &patches(ex), true);

    let mut changed = ex.clone();
    let span_end = changed.sentence.explanation_span.1;
    for p in t + 1..span_end {
        let id = changed.sentence.token_ids[p];
        changed.sentence.token_ids[p] = if id + 1 < v { id + 1 } else { id - 1 };
    }
    changed.vad = sentence_vad(&changed.sentence, &c.vocab, &c.lexicon);
    assert_ne!(changed.vad, ex.vad, "edit should reach the emotion encoder");
    let after = logits_of(&model, &changed, &patches(ex), true);
    assert_eq!(bits(&before[..(t + 1) * v]), bits(&after[..(t + 1) * v]));
    assert_ne!(bits(&before[(t + 1) * v..]), bits(&after[(t + 1) * v..]));
}

#[test]
fn patch_order_does_not_matter() {
    let cfg = eval_config();
    let c = corpus::<f64>(2, &cfg);
    let model = Sevlm::<f64>::new(cfg.clone(), c.vocab.len()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let (k, d) = (cfg.num_patches, cfg.d_vision);
    let feats = Tensor::<f64>::from_fn(&[1, k, d], |_| normal.sample(&mut rng));
    let perm: Vec<usize> = (0..k).rev().collect();
    let mut shuffled = Vec::with_capacity(k * d);
    for &r in &perm {
        shuffled.extend_from_slice(&feats.data()[r * d..(r + 1) * d]);
    }
    let shuffled = Tensor::new(vec![1, k, d], shuffled).unwrap();
    let a = logits_of(&model, &c.examples[0], &ImageInput::Features(feats), true);
    let b = logits_of(&model, &c.examples[0], &ImageInput::Features(shuffled), true);
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-12, "{x} vs {y}");
    }
}

#[test]
fn cached_decoding_matches_full_forward() {
    let cfg = eval_config();
    let c = corpus::<f64>(2, &cfg);
    let model = Sevlm::<f64>::new(cfg, c.vocab.len()).unwrap();
    let ex = &c.examples[1];
    let ids: Vec<usize> = ex.sentence.token_ids[..ex.sentence.explanation_span.1].to_vec();
    for fusion in [false, true] {
        let mut session = Session::new(&model, &ex.image, true, fusion).unwrap();
        for (i, &id) in ids.iter().enumerate() {
            let vad = (i >= PROMPT_LEN).then(|| c.vocab.lexicon_key(id).map_or(sevlm::VadVector::NEUTRAL, |k| c.lexicon.lookup(k)));
            let cached = session.feed(id, vad).unwrap();
            let full = full_logits(&model, &c.vocab, &c.lexicon, &ids[..=i], &ex.image, true, fusion).unwrap();
            for (x, y) in cached.iter().zip(&full) {
                assert!((x - y).abs() < 1e-10, "position {i}, fusion {fusion}: {x} vs {y}");
            }
        }
    }
}

fn trainer(components: Components, flags: Components, seed: u64) -> (Trainer<f32>, Vec<Example<f32>>) {
    let cfg = ModelConfig {
        components,
        seed,
        ..ModelConfig::toy()
    };
    let c = corpus::<f32>(24, &cfg);
    let model = Sevlm::<f32>::new(cfg, c.vocab.len()).unwrap();
    let tc = TrainConfig {
        flags,
        seed,
        steps: 4,
        ..TrainConfig::toy()
    };
    (Trainer::new(model, tc).unwrap(), c.examples)
}

#[test]
fn switched_off_components_leave_no_trace() {
    let (mut lean, ex) = trainer(Components::NONE, Components::NONE, 5);
    let (mut full, _) = trainer(Components::ALL, Components::NONE, 5);

    for prefix in ["emotion_encoder.", "fusion.", "vad_head.", "contrastive."] {
        assert!(lean.model.params.names().all(|n| !n.starts_with(prefix)), "{prefix}");
        assert!(full.model.params.names().any(|n| n.starts_with(prefix)), "{prefix}");
    }
    let lean_params = param_map(&lean.model);
    let full_params = param_map(&full.model);
    for (name, t) in &lean_params {
        assert_eq!(bits(t.data()), bits(full_params[name].data()), "{name} at init");
    }

    // Forward pass of one batch.
    let refs: Vec<&Example<f32>> = ex.iter().take(8).collect();
    let batch = Batch::new(&refs).unwrap();
    let reservoir = Reservoir::new(0);
    let spec = LossSpec {
        flags: Components::NONE,
        alpha: 2.0,
        form: Default::default(),
        negatives: &vec![None; batch.len()],
        reservoir: &reservoir,
    };
    let forward = |m: &Sevlm<f32>| {
        let mut ctx = m.train_ctx(sevlm::training::derived_rng(1, 2, 3));
        let l = m.losses(&mut ctx, &batch, &spec).unwrap();
        (bits(ctx.tape.value(l.logits).data()), ctx.tape.value(l.total).item().to_bits())
    };
    assert_eq!(forward(&lean.model), forward(&full.model));

    // Training: identical logs and identical shared parameters.
    let a = lean.run(&ex, |_| {}, |_| Ok(())).unwrap();
    let b = full.run(&ex, |_| {}, |_| Ok(())).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    let full_params = param_map(&full.model);
    for (name, t) in param_map(&lean.model) {
        assert_eq!(bits(t.data()), bits(full_params[&name].data()), "{name} after training");
    }
    // The unused components were not touched either.
    let fresh = Sevlm::<f32>::new(full.model.config.clone(), full.model.vocab_size()).unwrap();
    let fresh = param_map(&fresh);
    for (name, t) in &full_params {
        if !lean_params.contains_key(name) {
            assert_eq!(bits(t.data()), bits(fresh[name].data()), "{name}");
        }
    }
}

#[test]
fn requesting_unbuilt_component_is_an_error() {
    let cfg = ModelConfig {
        components: Components::NONE,
        ..ModelConfig::toy()
    };
    let model = Sevlm::<f32>::new(cfg, 40).unwrap();
    assert!(Trainer::new(model, TrainConfig::toy()).is_err());
}

#[test]
fn same_seed_same_logs() {
    let run = || {
        let (mut t, ex) = trainer(Components::ALL, Components::ALL, 9);
        serde_json::to_string(&t.run(&ex, |_| {}, |_| Ok(())).unwrap()).unwrap()
    };
    let a = run();
    assert_eq!(a, run());
    let (mut t, ex) = trainer(Components::ALL, Components::ALL, 10);
    assert_ne!(a, serde_json::to_string(&t.run(&ex, |_| {}, |_| Ok(())).unwrap()).unwrap());
}

#[test]
fn checkpoint_resume_matches_uninterrupted_run() {
    let (mut t, ex) = trainer(Components::ALL, Components::ALL, 2);
    for _ in 0..3 {
        t.train_step(&ex).unwrap();
    }
    let c = corpus::<f32>(24, &t.model.config);
    let bytes = Checkpoint::new(t.clone(), c.vocab.clone(), &c.lexicon).to_bytes().unwrap();
    let mut resumed = Checkpoint::<f32>::from_bytes(&bytes).unwrap().trainer;
    assert_eq!(resumed.step(), 3);
    assert_eq!(resumed.reservoir, t.reservoir);

    let next = t.train_step(&ex).unwrap();
    let again = resumed.train_step(&ex).unwrap();
    assert_eq!(serde_json::to_string(&next).unwrap(), serde_json::to_string(&again).unwrap());
    let p = param_map(&t.model);
    for (name, x) in param_map(&resumed.model) {
        assert_eq!(bits(x.data()), bits(p[&name].data()), "{name}");
    }

    assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    let mut bad = bytes.clone();
    bad[0] ^= 1;
    assert!(Checkpoint::<f32>::from_bytes(&bad).is_err());
}

#[test]
fn batched_generation_is_thread_independent() {
    let cfg = eval_config();
    let c = corpus::<f32>(10, &cfg);
    let model = Sevlm::<f32>::new(cfg, c.vocab.len()).unwrap();
    let g = Generator::new(&model, &c.vocab, &c.lexicon, true);
    let images: Vec<_> = c.examples.iter().map(|e| (&e.image, e.is_patches)).collect();
    let gc = GenerationConfig {
        seed: 4,
        ..GenerationConfig::default()
    };
    let one = g.generate_many(&images, &gc, 1).unwrap();
    assert_eq!(one, g.generate_many(&images, &gc, 3).unwrap());
    assert_eq!(one[2], g.generate(&c.examples[2].image, true, &GenerationConfig { seed: 6, ..gc.clone() }).unwrap());
    for r in &one {
        assert!(r.emotion.is_some());
        // Class token, explanation tokens, then `<eos>` unless the length ran out.
        let extra = r.token_logprobs.len() - r.tokens.len();
        assert!(extra == 1 || extra == 2, "{extra}");
    }
}
