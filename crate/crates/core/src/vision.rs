//! Image patch features: binary feature-file ingestion and a small trainable
//! patch featurizer for rendered toy images.

use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{Ctx, Init, ParamStore, INIT_STD};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, Var};

/// Leading bytes of a feature file.
pub const FEATURE_MAGIC: &[u8; 4] = b"SVF1";

/// Patch features of one image, `[K, d_v]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeatures<T> {
    pub image_id: String,
    pub patches: Tensor<T>,
}

impl<T: Scalar> ImageFeatures<T> {
    pub fn new(image_id: impl Into<String>, patches: Tensor<T>) -> Result<Self> {
        if patches.rank() != 2 || patches.shape()[0] == 0 || patches.shape()[1] == 0 {
            return Err(Error::Format(format!("image features must be [K, d_v] with K, d_v >= 1, got {:?}", patches.shape())));
        }
        if !patches.all_finite() {
            return Err(Error::NonFinite("image features".into()));
        }
        Ok(ImageFeatures {
            image_id: image_id.into(),
            patches,
        })
    }

    pub fn num_patches(&self) -> usize {
        self.patches.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.patches.shape()[1]
    }

    /// Encodes as `magic, K: u32, d_v: u32`, then `K·d_v` little-endian `f32`
    /// values in row-major order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.patches.numel());
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&(self.num_patches() as u32).to_le_bytes());
        out.extend_from_slice(&(self.width() as u32).to_le_bytes());
        for &x in self.patches.data() {
            out.extend_from_slice(&x.as_f32().to_le_bytes());
        }
        out
    }

    pub fn from_bytes(image_id: impl Into<String>, bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != FEATURE_MAGIC {
            return Err(Error::Format("missing feature-file magic".into()));
        }
        let k = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if k == 0 || d == 0 {
            return Err(Error::Format(format!("invalid feature dims K={k}, d_v={d}")));
        }
        let payload = &bytes[12..];
        if payload.len() != 4 * k * d {
            return Err(Error::Format(format!(
                "payload holds {} bytes, header promises {}",
                payload.len(),
                4 * k * d
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        Self::new(image_id, Tensor::new(vec![k, d], data)?)
    }

    /// Reads a feature file; the image id is the file stem.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Self::from_bytes(id, &bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// `H × W × 3` image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl ToyImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            return Err(Error::Shape(format!("{height}x{width}x3 image needs {} values, got {}", height * width * 3, pixels.len())));
        }
        Ok(ToyImage { height, width, pixels })
    }

    pub fn blank(height: usize, width: usize) -> Self {
        ToyImage {
            height,
            width,
            pixels: vec![0.0; height * width * 3],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> [f32; 3] {
        let o = (y * self.width + x) * 3;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    pub fn set(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let o = (y * self.width + x) * 3;
        self.pixels[o..o + 3].copy_from_slice(&rgb);
    }

    /// Non-overlapping `p × p` patches in raster order, each flattened as
    /// (row, column, channel): `[K, p·p·3]`.
    pub fn patches<T: Scalar>(&self, p: usize) -> Result<Tensor<T>> {
        if p == 0 || !self.height.is_multiple_of(p) || !self.width.is_multiple_of(p) {
            return Err(Error::Shape(format!(
                "{}x{} image is not divisible into {p}x{p} patches",
                self.height, self.width
            )));
        }
        let (gh, gw) = (self.height / p, self.width / p);
        let mut data = Vec::with_capacity(self.pixels.len());
        for py in 0..gh {
            for px in 0..gw {
                for dy in 0..p {
                    for dx in 0..p {
                        let rgb = self.get(py * p + dy, px * p + dx);
                        data.extend(rgb.iter().map(|&c| T::lit(c as f64)));
                    }
                }
            }
        }
        Tensor::new(vec![gh * gw, p * p * 3], data)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyVisionConfig {
    pub image_size: usize,
    pub patch_size: usize,
    /// Width of a GELU hidden layer applied to each patch; 0 keeps the
    /// featurizer linear.
    #[serde(default)]
    pub hidden: usize,
}

impl ToyVisionConfig {
    pub fn num_patches(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }
}

/// Per-patch projection (linear, or a one-hidden-layer GELU MLP) plus a
/// learned per-patch position embedding.
#[derive(Debug, Clone)]
pub struct ToyFeaturizer {
    pub proj: Linear,
    pub out: Option<Linear>,
    pub position: String,
    pub config: ToyVisionConfig,
    pub d_v: usize,
}

pub const VISION_PREFIX: &str = "vision.";

impl ToyFeaturizer {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, config: ToyVisionConfig, d_v: usize) -> Result<Self> {
        if config.patch_size == 0 || !config.image_size.is_multiple_of(config.patch_size) {
            return Err(Error::Config(format!(
                "image size {} is not a multiple of patch size {}",
                config.image_size, config.patch_size
            )));
        }
        Ok(ToyFeaturizer {
            proj: Linear::new(store, "vision.proj", config.patch_dim(), if config.hidden > 0 { config.hidden } else { d_v }),
            out: (config.hidden > 0).then(|| Linear::new(store, "vision.out", config.hidden, d_v)),
            position: store.register("vision.position", &[config.num_patches(), d_v], Init::Normal(INIT_STD)),
            config,
            d_v,
        })
    }

    /// `[B, K, p·p·3]` patches → `[B, K, d_v]` features.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, patches: Var) -> Result<Var> {
        let mut y = self.proj.forward(ctx, patches)?;
        if let Some(out) = &self.out {
            let h = ctx.tape.gelu(y);
            y = out.forward(ctx, h)?;
        }
        let pos = ctx.p(&self.position)?;
        ctx.tape.add(y, pos)
    }

    /// Featurizes one image outside of training.
    pub fn featurize<T: Scalar>(&self, params: &ParamStore<T>, image_id: &str, img: &ToyImage) -> Result<ImageFeatures<T>> {
        if img.height != self.config.image_size || img.width != self.config.image_size {
            return Err(Error::Shape(format!(
                "featurizer expects {0}x{0} images, got {1}x{2}",
                self.config.image_size, img.height, img.width
            )));
        }
        let patches = img.patches::<T>(self.config.patch_size)?;
        let k = patches.shape()[0];
        let mut ctx = Ctx::eval(params);
        let x = ctx.tape.constant(patches.reshape(&[1, k, self.config.patch_dim()])?);
        let y = self.forward(&mut ctx, x)?;
        let out = ctx.tape.value(y).clone().reshape(&[k, self.d_v])?;
        ImageFeatures::new(image_id, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn direct_read() {
        let f = ImageFeatures::<f32>::new("x", Tensor::from_f64(&[2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap()).unwrap();
        let bytes = f.to_bytes();
        let back = ImageFeatures::<f32>::from_bytes("x", &bytes).unwrap();
        assert_eq!(back.patches.shape(), &[2, 3]);
        assert_eq!(back.patches.data(), &[1., 2., 3., 4., 5., 6.]);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn rejects_bad_files() {
        let f = ImageFeatures::<f32>::new("x", Tensor::from_f64(&[2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap()).unwrap();
        let bytes = f.to_bytes();
        assert!(ImageFeatures::<f32>::from_bytes("x", &bytes[..bytes.len() - 2]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(ImageFeatures::<f32>::from_bytes("x", &bad).is_err());
        let mut nan = bytes.clone();
        nan[12..16].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(ImageFeatures::<f32>::from_bytes("x", &nan), Err(Error::NonFinite(_))));
        let mut zero = bytes;
        zero[4..8].copy_from_slice(&0u32.to_le_bytes());
        assert!(ImageFeatures::<f32>::from_bytes("x", &zero).is_err());
    }

    #[test]
    fn patch_grid() {
        let img = ToyImage::blank(8, 8);
        let p: Tensor<f32> = img.patches(4).unwrap();
        assert_eq!(p.shape(), &[4, 48]);
        assert!(ToyImage::blank(8, 6).patches::<f32>(4).is_err());
    }

    #[test]
    fn zero_image_gives_position_embeddings() {
        let mut store = ParamStore::<f64>::new(5);
        let cfg = ToyVisionConfig {
            image_size: 8,
            patch_size: 4,
            hidden: 0,
        };
        let fz = ToyFeaturizer::new(&mut store, cfg, 6).unwrap();
        let out = fz.featurize(&store, "z", &ToyImage::blank(8, 8)).unwrap();
        assert_eq!(out.patches.shape(), &[4, 6]);
        assert_eq!(out.patches.data(), store.get("vision.position").unwrap().data());
    }
}
