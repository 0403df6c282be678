//! Image files, dataset folder layouts and the generation manifest.

use std::io::{Cursor, Write};
use std::path::{Path, PathBuf};

use cmaae_core::segmentation::ScoreMap;
use cmaae_core::synthesis::{AnomalySample, TextureSpec};
use cmaae_core::{Image, Mask};
use image::{DynamicImage, ImageBuffer, ImageFormat, ImageReader, Luma, Rgb};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::config::{DataConfig, Layout};
use crate::error::{Result, ToolkitError};

const MAX_SIDE: u32 = 16_384;

/// Decodes PNG bytes into a gray or RGB image with values in `[0, 1]`.
pub fn decode_image(bytes: &[u8]) -> Result<Image> {
    let mut reader = ImageReader::with_format(Cursor::new(bytes), ImageFormat::Png);
    let mut limits = image::Limits::default();
    limits.max_image_width = Some(MAX_SIDE);
    limits.max_image_height = Some(MAX_SIDE);
    limits.max_alloc = Some(1 << 30);
    reader.limits(limits);
    let img = reader
        .decode()
        .map_err(|e| ToolkitError::Data(format!("cannot decode image: {e}")))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if img.color().has_color() {
        let rgb = img.to_rgb32f();
        let data = Array3::from_shape_fn((3, h, w), |(c, y, x)| rgb.get_pixel(x as u32, y as u32)[c]);
        Ok(Image::new(data))
    } else {
        let luma = img.to_luma32f();
        let plane = Array2::from_shape_vec((h, w), luma.into_raw()).expect("buffer matches dimensions");
        Ok(Image::from_plane(plane))
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| ToolkitError::io(path, e))
}

/// Loads an image, converts it to `channels` and resizes it to `size` when
/// given.
pub fn load_image(path: &Path, channels: usize, size: Option<usize>) -> Result<Image> {
    let img = decode_image(&read(path)?).map_err(|e| ToolkitError::Data(format!("{}: {e}", path.display())))?;
    let img = img.to_channels(channels)?;
    Ok(match size {
        Some(s) if (img.height(), img.width()) != (s, s) => img.resize_bilinear(s, s),
        _ => img,
    })
}

/// Loads a mask; any non-zero pixel is foreground.
pub fn load_mask(path: &Path, size: Option<usize>) -> Result<Mask> {
    let img = decode_image(&read(path)?).map_err(|e| ToolkitError::Data(format!("{}: {e}", path.display())))?;
    let gray = img.to_channels(1)?;
    let mask = Mask::new(gray.data().index_axis(ndarray::Axis(0), 0).mapv(|v| v > 0.0));
    Ok(match size {
        Some(s) if (mask.height(), mask.width()) != (s, s) => mask.resize_nearest(s, s),
        _ => mask,
    })
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_image(img: &Image) -> Result<Vec<u8>> {
    let (h, w) = (img.height() as u32, img.width() as u32);
    let d = img.data();
    let dynimg = match img.channels() {
        1 => DynamicImage::ImageLuma8(ImageBuffer::from_fn(w, h, |x, y| {
            Luma([to_u8(d[[0, y as usize, x as usize]])])
        })),
        3 => DynamicImage::ImageRgb8(ImageBuffer::from_fn(w, h, |x, y| {
            let p = |c| to_u8(d[[c, y as usize, x as usize]]);
            Rgb([p(0), p(1), p(2)])
        })),
        c => return Err(ToolkitError::Data(format!("cannot write a {c}-channel image"))),
    };
    png_bytes(&dynimg)
}

pub fn encode_mask(mask: &Mask) -> Result<Vec<u8>> {
    let (h, w) = (mask.height() as u32, mask.width() as u32);
    let buf = ImageBuffer::from_fn(w, h, |x, y| Luma([if mask.data()[[y as usize, x as usize]] { 255u8 } else { 0 }]));
    png_bytes(&DynamicImage::ImageLuma8(buf))
}

/// 16-bit PNG of a score map normalized to its own `[min, max]`.
pub fn encode_score_map(score: &ScoreMap) -> Result<(Vec<u8>, f64, f64)> {
    let (lo, hi) = (score.min(), score.max());
    let span = if hi > lo { hi - lo } else { 1.0 };
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_fn(score.width() as u32, score.height() as u32, |x, y| {
            let v = (score.data[[y as usize, x as usize]] - lo) / span;
            Luma([(v.clamp(0.0, 1.0) * 65535.0).round() as u16])
        });
    Ok((png_bytes(&DynamicImage::ImageLuma16(buf))?, lo, hi))
}

fn png_bytes(img: &DynamicImage) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| ToolkitError::Data(format!("cannot encode PNG: {e}")))?;
    Ok(out.into_inner())
}

/// Writes through a temporary file in the same directory and renames it
/// into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| ToolkitError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| ToolkitError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| ToolkitError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| ToolkitError::io(path, e))?;
    tmp.persist(path).map_err(|e| ToolkitError::io(path, e.error))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    TrainGood,
    TrainSynthetic,
    TestGood,
    TestDefect,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub split: Split,
    /// Path relative to the dataset root.
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    /// Clean image an artificial negative was made from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub seed: u64,
    pub texture: TextureSpec,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        let m: Manifest =
            serde_json::from_str(text).map_err(|e| ToolkitError::Data(format!("bad manifest: {e}")))?;
        for e in &m.entries {
            for p in std::iter::once(&e.image).chain(&e.mask).chain(&e.source) {
                check_relative(p)?;
            }
            if e.split == Split::TestDefect && e.mask.is_none() {
                return Err(ToolkitError::Data(format!("defect image {} has no mask", e.image)));
            }
            if e.split == Split::TrainSynthetic && (e.mask.is_none() || e.source.is_none()) {
                return Err(ToolkitError::Data(format!(
                    "synthetic negative {} needs a mask and a source",
                    e.image
                )));
            }
        }
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| ToolkitError::io(&path, e))?;
        Manifest::parse(&text)
    }
}

/// Rejects absolute paths and parent references so a manifest cannot point
/// outside its dataset.
fn check_relative(p: &str) -> Result<()> {
    let path = Path::new(p);
    let ok = !p.is_empty()
        && path
            .components()
            .all(|c| matches!(c, std::path::Component::Normal(_)));
    if ok {
        Ok(())
    } else {
        Err(ToolkitError::Data(format!("manifest path `{p}` must be relative to the dataset root")))
    }
}

/// One test image with its ground truth (empty for good images).
#[derive(Debug, Clone)]
pub struct TestItem {
    pub name: String,
    pub image: Image,
    pub mask: Mask,
}

#[derive(Debug, Clone)]
pub struct TestSet {
    pub items: Vec<TestItem>,
    /// Defect images without masks, left out of the evaluation.
    pub skipped: Vec<String>,
}

fn has_png_ext(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// PNG files of a directory in name order.
fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| ToolkitError::io(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let p = entry.map_err(|e| ToolkitError::io(dir, e))?.path();
        if p.is_file() && has_png_ext(&p) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn category_root(cfg: &DataConfig) -> PathBuf {
    match &cfg.category {
        Some(c) => cfg.root.join(c),
        None => cfg.root.clone(),
    }
}

fn dagm_label(dir: &Path, image: &Path) -> Option<PathBuf> {
    let label_dir = dir.join("Label");
    let s = stem(image);
    ["PNG", "png"]
        .iter()
        .map(|ext| label_dir.join(format!("{s}_label.{ext}")))
        .find(|p| p.is_file())
}

fn require_nonempty<T>(v: Vec<T>, what: &str, root: &Path) -> Result<Vec<T>> {
    if v.is_empty() {
        Err(ToolkitError::Data(format!("no {what} found under {}", root.display())))
    } else {
        Ok(v)
    }
}

/// Normal training images, resized to the configured size.
pub fn load_train(cfg: &DataConfig, channels: usize) -> Result<Vec<(String, Image)>> {
    let size = Some(cfg.image_size);
    let root = category_root(cfg);
    let paths: Vec<PathBuf> = match cfg.layout {
        Layout::Synthetic => Manifest::load(&root)?
            .entries
            .iter()
            .filter(|e| e.split == Split::TrainGood)
            .map(|e| root.join(&e.image))
            .collect(),
        Layout::Mvtec => list_pngs(&root.join("train").join("good"))?,
        Layout::Dagm => {
            let dir = root.join("Train");
            list_pngs(&dir)?
                .into_iter()
                .filter(|p| dagm_label(&dir, p).is_none())
                .collect()
        }
    };
    let paths = require_nonempty(paths, "training images", &root)?;
    paths
        .iter()
        .map(|p| Ok((stem(p), load_image(p, channels, size)?)))
        .collect()
}

/// Artificial negatives recorded in a synthetic dataset manifest; empty for
/// other layouts.
pub fn load_synthetic(cfg: &DataConfig, channels: usize) -> Result<Vec<AnomalySample>> {
    if cfg.layout != Layout::Synthetic {
        return Ok(Vec::new());
    }
    let root = category_root(cfg);
    let size = Some(cfg.image_size);
    let manifest = Manifest::load(&root)?;
    manifest
        .entries
        .iter()
        .filter(|e| e.split == Split::TrainSynthetic)
        .map(|e| {
            let anomalous = load_image(&root.join(&e.image), channels, size)?;
            let clean = load_image(&root.join(e.source.as_ref().expect("validated")), channels, size)?;
            let mask = load_mask(&root.join(e.mask.as_ref().expect("validated")), size)?;
            Ok(AnomalySample { anomalous, clean, mask })
        })
        .collect()
}

/// Test images with masks, resized to the configured size.
pub fn load_test(cfg: &DataConfig, channels: usize) -> Result<TestSet> {
    let size = Some(cfg.image_size);
    let root = category_root(cfg);
    // (name, image path, mask path, is defect)
    let mut listing: Vec<(String, PathBuf, Option<PathBuf>, bool)> = Vec::new();
    match cfg.layout {
        Layout::Synthetic => {
            for e in Manifest::load(&root)?.entries {
                let defect = match e.split {
                    Split::TestGood => false,
                    Split::TestDefect => true,
                    _ => continue,
                };
                let name = stem(Path::new(&e.image));
                listing.push((name, root.join(&e.image), e.mask.map(|m| root.join(m)), defect));
            }
        }
        Layout::Mvtec => {
            let test = root.join("test");
            let rd = std::fs::read_dir(&test).map_err(|e| ToolkitError::io(&test, e))?;
            let mut kinds: Vec<String> = rd
                .filter_map(|e| e.ok())
                .filter(|e| e.path().is_dir())
                .map(|e| e.file_name().to_string_lossy().into_owned())
                .collect();
            kinds.sort();
            for kind in kinds {
                for p in list_pngs(&test.join(&kind))? {
                    let s = stem(&p);
                    let defect = kind != "good";
                    let mask = root.join("ground_truth").join(&kind).join(format!("{s}_mask.png"));
                    let mask = (defect && mask.is_file()).then_some(mask);
                    listing.push((format!("{kind}/{s}"), p, mask, defect));
                }
            }
        }
        Layout::Dagm => {
            let dir = root.join("Test");
            for p in list_pngs(&dir)? {
                let mask = dagm_label(&dir, &p);
                let defect = mask.is_some();
                listing.push((stem(&p), p, mask, defect));
            }
        }
    }
    let listing = require_nonempty(listing, "test images", &root)?;
    let mut items = Vec::new();
    let mut skipped = Vec::new();
    for (name, path, mask_path, defect) in listing {
        let image = load_image(&path, channels, size)?;
        let mask = match (defect, mask_path) {
            (false, _) => Mask::empty(image.height(), image.width()),
            (true, Some(m)) => load_mask(&m, size)?,
            (true, None) if cfg.allow_maskless => {
                skipped.push(name);
                continue;
            }
            (true, None) => {
                return Err(ToolkitError::Data(format!(
                    "defect image {name} has no ground-truth mask"
                )))
            }
        };
        items.push(TestItem { name, image, mask });
    }
    Ok(TestSet { items, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip() {
        let plane = Array2::from_shape_fn((5, 7), |(y, x)| ((y * 7 + x) * 6) as f32 / 255.0);
        let img = Image::from_plane(plane);
        let back = decode_image(&encode_image(&img).unwrap()).unwrap();
        assert_eq!(back.data().dim(), (1, 5, 7));
        for (a, b) in img.data().iter().zip(back.data().iter()) {
            assert!((a - b).abs() < 1e-6);
        }
        let rgb = Image::filled(3, 4, 4, 0.5).to_channels(3).unwrap();
        assert_eq!(decode_image(&encode_image(&rgb).unwrap()).unwrap().channels(), 3);
        assert!(decode_image(b"not a png").is_err());
    }

    #[test]
    fn score_map_png_is_16_bit() {
        let s = ScoreMap {
            data: Array2::from_shape_fn((3, 3), |(y, x)| (y * 3 + x) as f64),
        };
        let (bytes, lo, hi) = encode_score_map(&s).unwrap();
        assert_eq!((lo, hi), (0.0, 8.0));
        let img = image::load_from_memory(&bytes).unwrap();
        assert_eq!(img.color(), image::ColorType::L16);
        assert_eq!(img.to_luma16().get_pixel(2, 2)[0], 65535);
    }

    #[test]
    fn manifest_rejects_escaping_paths() {
        let ok = r#"{"schema_version":1,"seed":0,"texture":{"pattern":"stripes","period":16.0,"orientation":0.0,"noise_sigma":0.0,"height":64,"width":64},"entries":[{"split":"train-good","image":"train/good/a.png"}]}"#;
        assert!(Manifest::parse(ok).is_ok());
        assert!(Manifest::parse(&ok.replace("train/good/a.png", "../a.png")).is_err());
        assert!(Manifest::parse(&ok.replace("train/good/a.png", "/etc/a.png")).is_err());
        assert!(Manifest::parse(&ok.replace("train-good", "test-defect")).is_err());
    }
}
