//! Dataset schema, JSONL loading, seeded splits and the synthetic corpus.
//!
//! One sample per line:
//!
//! ```json
//! {"image_id": "s0001", "image": {"toy": {...}}, "emotion": "fear", "explanation": "..."}
//! {"image_id": "a17", "image": {"features": "feats/a17.svf"}, "emotion": "awe", "explanation": "...", "split": "test"}
//! ```
//!
//! `image` is either a toy-image spec rendered on the fly or a path to a
//! feature file (relative paths resolve against the dataset's directory).
//! `split` is optional; when every line omits it a seeded 85/5/10 split over
//! image ids is drawn.

use std::collections::BTreeSet;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classes::EmotionClass;
use crate::error::{Error, Result};
use crate::lexicon::VadLexicon;
use crate::model::{Example, ModelConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::text::{build_full_sentence, tokenize, Vocab};
use crate::vision::{ImageFeatures, ToyImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Cross];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Cross => "cross",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Blue,
    Green,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Blue, Color::Green, Color::Yellow];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Blue => "blue",
            Color::Green => "green",
            Color::Yellow => "yellow",
        }
    }

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [0.9, 0.15, 0.1],
            Color::Blue => [0.1, 0.2, 0.9],
            Color::Green => [0.15, 0.8, 0.2],
            Color::Yellow => [0.9, 0.85, 0.1],
        }
    }
}

/// Procedural description of a toy image: one colored shape on a gray
/// background with seeded pixel noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToySpec {
    pub size: usize,
    pub shape: Shape,
    pub color: Color,
    /// Shape center in pixels.
    pub cx: f32,
    pub cy: f32,
    /// Half-extent in pixels.
    pub radius: f32,
    /// Background gray level in `[0, 1]`.
    pub background: f32,
    /// Standard deviation of the additive pixel noise.
    pub noise: f32,
    pub noise_seed: u64,
}

impl ToySpec {
    fn inside(&self, y: f32, x: f32) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let r = self.radius;
        match self.shape {
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= r * 0.85 && dy.abs() <= r * 0.85,
            Shape::Triangle => dy <= r && dy >= -r && dx.abs() <= (dy + r) * 0.5,
            Shape::Cross => (dx.abs() <= r * 0.35 && dy.abs() <= r) || (dy.abs() <= r * 0.35 && dx.abs() <= r),
        }
    }

    pub fn render(&self) -> ToyImage {
        let mut img = ToyImage::blank(self.size, self.size);
        let mut rng = ChaCha8Rng::seed_from_u64(self.noise_seed);
        let rgb = self.color.rgb();
        for y in 0..self.size {
            for x in 0..self.size {
                let base = if self.inside(y as f32 + 0.5, x as f32 + 0.5) {
                    rgb
                } else {
                    [self.background; 3]
                };
                let px = base.map(|c| (c + self.noise * (rng.gen::<f32>() * 2.0 - 1.0)).clamp(0.0, 1.0));
                img.set(y, x, px);
            }
        }
        img
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageSource {
    Toy(ToySpec),
    Features(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub image_id: String,
    pub image: ImageSource,
    pub emotion: EmotionClass,
    pub explanation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

impl Sample {
    pub fn tokens(&self) -> Vec<String> {
        tokenize(&self.explanation)
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.image_id.trim().is_empty() {
            return Err("empty image_id".into());
        }
        if self.tokens().is_empty() {
            return Err("empty explanation".into());
        }
        match &self.image {
            ImageSource::Toy(spec) => {
                if spec.size == 0 || !spec.radius.is_finite() || !spec.noise.is_finite() || !(0.0..=1.0).contains(&spec.background) {
                    return Err("invalid toy image spec".into());
                }
            }
            ImageSource::Features(p) => {
                if !p.is_file() {
                    return Err(format!("feature file {} not found", p.display()));
                }
            }
        }
        Ok(())
    }
}

/// Parses JSONL text; `base` resolves relative feature paths.
pub fn parse_dataset(text: &str, origin: &str, base: Option<&Path>) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: origin.to_string(),
            line: i + 1,
            msg,
        };
        let mut s: Sample = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        if let (ImageSource::Features(p), Some(base)) = (&mut s.image, base) {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        s.validate().map_err(err)?;
        out.push(s);
    }
    if out.is_empty() {
        return Err(Error::EmptySequence("dataset"));
    }
    Ok(out)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, &path.display().to_string(), path.parent())
}

pub fn write_dataset(path: impl AsRef<Path>, samples: &[Sample]) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for s in samples {
        serde_json::to_writer(&mut f, s)?;
        f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

/// Sample indices of each partition.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct SplitSets {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Uses the pre-assigned splits when every sample has one; otherwise shuffles
/// the distinct image ids with `seed` and assigns the first ⌊85%⌋ to train,
/// the next ⌊5%⌋ to validation and the rest to test, so that no image
/// appears in two partitions.
pub fn split_dataset(samples: &[Sample], seed: u64) -> Result<SplitSets> {
    let assigned = samples.iter().filter(|s| s.split.is_some()).count();
    let mut sets = SplitSets::default();
    if assigned == samples.len() {
        for (i, s) in samples.iter().enumerate() {
            match s.split.expect("checked") {
                Split::Train => sets.train.push(i),
                Split::Val => sets.val.push(i),
                Split::Test => sets.test.push(i),
            }
        }
        return Ok(sets);
    }
    if assigned != 0 {
        return Err(Error::Validation(format!(
            "{assigned} of {} samples carry a split; assign all or none",
            samples.len()
        )));
    }
    let ids: BTreeSet<&str> = samples.iter().map(|s| s.image_id.as_str()).collect();
    let mut ids: Vec<&str> = ids.into_iter().collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = ids.len();
    let n_train = n * 85 / 100;
    let n_val = n * 5 / 100;
    let lookup: std::collections::HashMap<&str, Split> = ids
        .iter()
        .enumerate()
        .map(|(pos, &id)| {
            let split = if pos < n_train {
                Split::Train
            } else if pos < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            (id, split)
        })
        .collect();
    for (i, s) in samples.iter().enumerate() {
        match lookup[s.image_id.as_str()] {
            Split::Train => sets.train.push(i),
            Split::Val => sets.val.push(i),
            Split::Test => sets.test.push(i),
        }
    }
    Ok(sets)
}

/// Vocabulary over every explanation word of `samples`.
pub fn build_vocab(samples: &[Sample]) -> Vocab {
    let toks: Vec<Vec<String>> = samples.iter().map(Sample::tokens).collect();
    Vocab::build(toks.iter().map(Vec::as_slice))
}

/// Tokenizes samples and loads or renders their images for `config`.
pub fn encode_samples<T: Scalar>(
    samples: &[Sample],
    vocab: &Vocab,
    lexicon: &VadLexicon,
    config: &ModelConfig,
) -> Result<Vec<Example<T>>> {
    samples
        .iter()
        .map(|s| {
            let sentence = build_full_sentence(vocab, s.emotion, &s.tokens(), config.max_len)?;
            let (image, is_patches) = load_image::<T>(&s.image, config)?;
            Example::new(s.image_id.clone(), sentence, image, is_patches, vocab, lexicon)
        })
        .collect()
}

/// Patches `[K, p·p·3]` for toy specs, features `[K, d_v]` for feature files.
pub fn load_image<T: Scalar>(source: &ImageSource, config: &ModelConfig) -> Result<(Tensor<T>, bool)> {
    match source {
        ImageSource::Toy(spec) => {
            let v = config
                .vision
                .ok_or_else(|| Error::Config("toy image given but the model has no featurizer".into()))?;
            if spec.size != v.image_size {
                return Err(Error::Config(format!("toy image is {0}x{0}, model expects {1}x{1}", spec.size, v.image_size)));
            }
            Ok((spec.render().patches(v.patch_size)?, true))
        }
        ImageSource::Features(path) => {
            let f = ImageFeatures::<T>::load(path)?;
            if f.width() != config.d_vision || f.num_patches() != config.num_patches {
                return Err(Error::Config(format!(
                    "{}: features are {}x{}, model expects {}x{}",
                    path.display(),
                    f.num_patches(),
                    f.width(),
                    config.num_patches,
                    config.d_vision
                )));
            }
            Ok((f.patches, false))
        }
    }
}

/// Five emotionally colored words per class, disjoint across classes and all
/// present in the bundled lexicon.
pub const CLASS_KEYWORDS: [(EmotionClass, [&str; 5]); 8] = [
    (EmotionClass::Amusement, ["funny", "playful", "silly", "joke", "laughing"]),
    (EmotionClass::Awe, ["majestic", "magnificent", "grand", "vast", "sublime"]),
    (EmotionClass::Contentment, ["calm", "peaceful", "relaxed", "cozy", "gentle"]),
    (EmotionClass::Excitement, ["thrilling", "energetic", "dynamic", "vibrant", "adventure"]),
    (EmotionClass::Fear, ["scary", "terrifying", "ominous", "creepy", "threatening"]),
    (EmotionClass::Sadness, ["lonely", "gloomy", "mournful", "sorrow", "melancholy"]),
    (EmotionClass::Anger, ["furious", "violent", "hostile", "rage", "aggressive"]),
    (EmotionClass::Disgust, ["gross", "repulsive", "rotten", "filthy", "nasty"]),
];

pub fn keywords(class: EmotionClass) -> &'static [&'static str; 5] {
    &CLASS_KEYWORDS[class.index()].1
}

/// Gold emotion of a (color, shape) pair. Every class owns exactly two
/// pairs and neither attribute alone decides the class.
pub fn rule_class(color: Color, shape: Shape) -> EmotionClass {
    let c = Color::ALL.iter().position(|&x| x == color).expect("color");
    let s = Shape::ALL.iter().position(|&x| x == shape).expect("shape");
    EmotionClass::from_index((2 * c + s) % 8).expect("class index")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub size: usize,
    pub image_size: usize,
    pub noise: f32,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            seed: 7,
            size: 512,
            image_size: 16,
            noise: 0.05,
        }
    }
}

/// Seeded corpus of toy images with rule-determined emotions and templated
/// explanations built from the class keywords and the image attributes.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.image_size as f32;
    (0..spec.size)
        .map(|i| {
            // Cycle through the 16 attribute pairs so small corpora cover all classes.
            let pair = if i < 16 { i } else { rng.gen_range(0..16) };
            let color = Color::ALL[pair / 4];
            let shape = Shape::ALL[pair % 4];
            let emotion = rule_class(color, shape);
            let radius = rng.gen_range(0.22..0.32) * n;
            let margin = radius + 0.5;
            let toy = ToySpec {
                size: spec.image_size,
                shape,
                color,
                cx: rng.gen_range(margin..n - margin),
                cy: rng.gen_range(margin..n - margin),
                radius,
                background: rng.gen_range(0.0..0.35),
                noise: spec.noise,
                noise_seed: rng.gen(),
            };
            let tone = if toy.background < 0.15 { "dark" } else { "bright" };
            let kw = keywords(emotion);
            let k1 = kw[rng.gen_range(0..5)];
            let k2 = kw[rng.gen_range(0..5)];
            let (c, s) = (color.name(), shape.name());
            let explanation = match rng.gen_range(0..4) {
                0 => format!("the {tone} {c} {s} makes me feel {k1}"),
                1 => format!("this {c} {s} looks {k1}"),
                2 => format!("a {k1} {c} {s} on a {tone} background"),
                _ => format!("the {s} feels {k1} and {k2}"),
            };
            Sample {
                image_id: format!("syn{:05}", i),
                image: ImageSource::Toy(toy),
                emotion,
                explanation,
                split: None,
            }
        })
        .collect()
}
