//! Image inputs accepted by `generate --image`.

use std::path::Path;

use anyhow::{anyhow, bail, Context};
use sevlm::data::{load_image, ImageSource, ToySpec};
use sevlm::vision::{ToyImage, FEATURE_MAGIC};
use sevlm::{ModelConfig, Tensor};

/// Loads `path` as precomputed features (`SVF1` magic), a toy-image spec
/// (`.json`) or a binary PPM (`P6`). Returns the model input and whether it
/// holds raw patches.
pub fn load_input(path: &Path, config: &ModelConfig) -> anyhow::Result<(Tensor<f32>, bool)> {
    let bytes = std::fs::read(path).with_context(|| format!("reading image {}", path.display()))?;
    if bytes.starts_with(FEATURE_MAGIC) {
        return Ok(load_image(&ImageSource::Features(path.to_path_buf()), config)?);
    }
    if bytes.starts_with(b"P6") {
        let img = parse_ppm(&bytes).with_context(|| format!("parsing {}", path.display()))?;
        let v = config
            .vision
            .ok_or_else(|| anyhow!("pixel image given but the checkpoint has no featurizer"))?;
        if img.height != v.image_size || img.width != v.image_size {
            bail!(
                "image is {}x{}, the featurizer expects {}x{}",
                img.width,
                img.height,
                v.image_size,
                v.image_size
            );
        }
        return Ok((img.patches(v.patch_size)?, true));
    }
    let spec: ToySpec = serde_json::from_slice(&bytes)
        .with_context(|| format!("{} is neither a feature file, a PPM image nor a toy-image spec", path.display()))?;
    Ok(load_image(&ImageSource::Toy(spec), config)?)
}

/// Binary PPM with 8-bit channels, scaled to `[0, 1]`.
pub fn parse_ppm(bytes: &[u8]) -> anyhow::Result<ToyImage> {
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => bail!("truncated PPM header"),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *f = std::str::from_utf8(&bytes[start..pos])?
            .parse()
            .map_err(|_| anyhow!("bad PPM header field"))?;
    }
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        bail!("only 8-bit PPM images are supported (maxval {maxval})");
    }
    pos += 1;
    let n = width * height * 3;
    let raster = bytes
        .get(pos..pos + n)
        .ok_or_else(|| anyhow!("PPM raster holds fewer than {n} bytes"))?;
    let pixels = raster.iter().map(|&b| b as f32 / maxval as f32).collect();
    Ok(ToyImage::new(height, width, pixels)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_with_comment() {
        let mut bytes = b"P6\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0, 0, 0, 255]);
        let img = parse_ppm(&bytes).unwrap();
        assert_eq!((img.width, img.height), (2, 1));
        assert_eq!(img.get(0, 0), [1.0, 0.0, 0.0]);
        assert_eq!(img.get(0, 1), [0.0, 0.0, 1.0]);
    }

    #[test]
    fn truncated_ppm() {
        assert!(parse_ppm(b"P6 4 4 255\n\x00").is_err());
    }
}
