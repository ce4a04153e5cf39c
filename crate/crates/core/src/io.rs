//! On-disk formats: dataset directories, mask PNGs, and raw logit grids.
//!
//! Dataset layout:
//! ```text
//! <dir>/manifest.json
//! <dir>/<split>/<id:06>/image.png      8-bit RGB
//! <dir>/<split>/<id:06>/mask_<k:02>.png 8-bit gray, 255 = foreground
//! <dir>/<split>/<id:06>/meta.json
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::scenes::{DomainTag, Mask, SceneSample};

pub const MANIFEST_VERSION: u32 = 1;

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image(format!("{}: {e}", path.display()))
}

pub fn save_image_png(image: &Array3<f64>, path: &Path) -> Result<()> {
    let (h, w, _) = image.dim();
    let img = RgbImage::from_fn(w as u32, h as u32, |c, r| {
        let px = |ch: usize| (image[[r as usize, c as usize, ch]].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    });
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| image_err(path, e))
}

pub fn save_rgb_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| image_err(path, e))
}

pub fn load_image_png(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((h as usize, w as usize, 3), |(r, c, ch)| {
        img.get_pixel(c as u32, r as u32)[ch] as f64 / 255.0
    }))
}

pub fn save_mask_png(mask: &Mask, path: &Path) -> Result<()> {
    let (h, w) = mask.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |c, r| Luma([if mask[[r as usize, c as usize]] { 255 } else { 0 }]));
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| image_err(path, e))
}

pub fn load_mask_png(path: &Path) -> Result<Mask> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(r, c)| img.get_pixel(c as u32, r as u32)[0] >= 128))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub seed: u64,
    pub domain_tag: DomainTag,
    pub object_count: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub splits: Vec<(Split, Vec<ManifestEntry>)>,
}

impl Manifest {
    pub fn of(dataset: &Dataset, seed: u64) -> Self {
        Self {
            version: MANIFEST_VERSION,
            seed,
            splits: Split::ALL
                .iter()
                .map(|&s| {
                    let entries = dataset
                        .split(s)
                        .iter()
                        .enumerate()
                        .map(|(id, x)| ManifestEntry { id, seed: x.seed })
                        .collect();
                    (s, entries)
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serialises")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    pub fn len(&self) -> usize {
        self.splits.iter().map(|(_, e)| e.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn sample_dir(root: &Path, split: Split, id: usize) -> PathBuf {
    root.join(split.name()).join(format!("{id:06}"))
}

pub fn save_sample(sample: &SceneSample, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_image_png(&sample.image, &dir.join("image.png"))?;
    for (k, m) in sample.instance_masks.iter().enumerate() {
        save_mask_png(m, &dir.join(format!("mask_{k:02}.png")))?;
    }
    let meta = SampleMeta {
        seed: sample.seed,
        domain_tag: sample.domain_tag,
        object_count: sample.object_count,
    };
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn load_sample(dir: &Path) -> Result<SceneSample> {
    let meta: SampleMeta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
    let image = load_image_png(&dir.join("image.png"))?;
    let instance_masks = (0..meta.object_count)
        .map(|k| load_mask_png(&dir.join(format!("mask_{k:02}.png"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(SceneSample {
        image,
        instance_masks,
        object_count: meta.object_count,
        seed: meta.seed,
        domain_tag: meta.domain_tag,
    })
}

/// Write every split plus the manifest; returns the manifest.
pub fn save_dataset(dataset: &Dataset, seed: u64, root: &Path) -> Result<Manifest> {
    fs::create_dir_all(root)?;
    for s in Split::ALL {
        for (id, sample) in dataset.split(s).iter().enumerate() {
            save_sample(sample, &sample_dir(root, s, id))?;
        }
    }
    let manifest = Manifest::of(dataset, seed);
    fs::write(root.join("manifest.json"), manifest.to_json())?;
    Ok(manifest)
}

pub fn load_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join("manifest.json");
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Precondition(format!("no dataset at {} ({e}); run gen-data first", root.display())))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest = load_manifest(root)?;
    let mut d = Dataset {
        source_train: vec![],
        target_train: vec![],
        target_val: vec![],
        target_test: vec![],
    };
    for (split, entries) in &manifest.splits {
        let out = d.split_mut(*split);
        for e in entries {
            let s = load_sample(&sample_dir(root, *split, e.id))?;
            if s.seed != e.seed {
                return Err(Error::Precondition(format!("{} sample {} seed differs from manifest", split.name(), e.id)));
            }
            out.push(s);
        }
    }
    Ok(d)
}

/// Raw logits: 16-byte header `b"SLGT"`, rows u32, cols u32, dtype u32
/// (1 = f32, 2 = f64), then row-major little-endian values.
pub const LOGITS_MAGIC: &[u8; 4] = b"SLGT";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LogitsDtype {
    F32 = 1,
    F64 = 2,
}

pub fn encode_logits(logits: &Array2<f64>, dtype: LogitsDtype) -> Vec<u8> {
    let (h, w) = logits.dim();
    let mut out = Vec::with_capacity(16 + h * w * 8);
    out.extend_from_slice(LOGITS_MAGIC);
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.extend_from_slice(&(dtype as u32).to_le_bytes());
    for &v in logits.iter() {
        match dtype {
            LogitsDtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            LogitsDtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    out
}

pub fn decode_logits(bytes: &[u8]) -> Result<Array2<f64>> {
    if bytes.len() < 16 || &bytes[..4] != LOGITS_MAGIC {
        return Err(Error::Precondition("not a logits file".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (h, w, code) = (word(4), word(8), word(12));
    let size = match code {
        1 => 4,
        2 => 8,
        c => return Err(Error::Precondition(format!("unknown logits dtype code {c}"))),
    };
    let body = &bytes[16..];
    if body.len() != h * w * size {
        return Err(Error::Shape(format!("logits body has {} bytes, header says {h}x{w}", body.len())));
    }
    let values = body
        .chunks_exact(size)
        .map(|c| match size {
            4 => f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64,
            _ => f64::from_le_bytes(c.try_into().expect("8 bytes")),
        })
        .collect();
    Ok(Array2::from_shape_vec((h, w), values).expect("length checked"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DataConfig;
    use crate::scenes::{SceneConfig, ShiftConfig};
    use ndarray::array;

    #[test]
    fn dataset_round_trips_exactly() {
        let cfg = DataConfig {
            source_train: 2,
            target_train: 1,
            target_val: 1,
            target_test: 1,
        };
        let d = Dataset::generate(9, &cfg, &SceneConfig::default(), &ShiftConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let m = save_dataset(&d, 9, dir.path()).unwrap();
        assert_eq!(m.len(), 5);
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, d);
        let again = Manifest::of(&Dataset::generate(9, &cfg, &SceneConfig::default(), &ShiftConfig::default()).unwrap(), 9);
        assert_eq!(again.hash(), m.hash());
    }

    #[test]
    fn logits_round_trip() {
        let l = array![[0.5, -1.25, 3.0], [1e-9, 0.0, -7.0]];
        let bytes = encode_logits(&l, LogitsDtype::F64);
        assert_eq!(bytes.len(), 16 + 6 * 8);
        assert_eq!(decode_logits(&bytes).unwrap(), l);
        let f = decode_logits(&encode_logits(&l, LogitsDtype::F32)).unwrap();
        assert_eq!(f[[0, 1]], -1.25);
        assert!(decode_logits(&bytes[..20]).is_err());
        assert!(decode_logits(b"nope").is_err());
    }

    #[test]
    fn missing_dataset_explains_itself() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("gen-data"));
    }
}
