//! Artificial anomaly generation and synthetic texture datasets.
//!
//! [`generate`] builds an artificial negative from a normal image by hard
//! pasting a crop of a natural texture and a resized, blurred crop of the
//! normal image itself at random locations. [`synth_texture`] and
//! [`inject_synthetic_defect`] produce small labelled datasets for
//! end-to-end runs without external data.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Mask};

/// Artificial negative with its clean source and paste mask.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalySample {
    pub anomalous: Image,
    pub clean: Image,
    pub mask: Mask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PasteMode {
    /// Paste the natural crop and the degraded self crop.
    #[default]
    Both,
    /// Paste one of the two, chosen uniformly.
    OneOf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaagaConfig {
    /// Side of both pasted patches.
    pub paste_size: usize,
    pub blur_sigma_min: f64,
    pub blur_sigma_max: f64,
    /// Smallest side of the self crop, as a fraction of `paste_size`.
    pub min_crop_fraction: f64,
    pub paste_mode: PasteMode,
}

impl Default for GaagaConfig {
    fn default() -> Self {
        GaagaConfig {
            paste_size: 256,
            blur_sigma_min: 2.0,
            blur_sigma_max: 6.0,
            min_crop_fraction: 0.25,
            paste_mode: PasteMode::Both,
        }
    }
}

impl GaagaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.paste_size == 0 {
            return Err(Error::Config("paste_size must be positive".into()));
        }
        if !(self.blur_sigma_min >= 0.0 && self.blur_sigma_min <= self.blur_sigma_max) {
            return Err(Error::Config("blur sigma range is empty".into()));
        }
        if !(self.min_crop_fraction > 0.0 && self.min_crop_fraction <= 1.0) {
            return Err(Error::Config("min_crop_fraction must lie in (0, 1]".into()));
        }
        Ok(())
    }

    /// Smallest positive image side accepted by [`generate`].
    pub fn min_image_side(&self) -> usize {
        self.paste_size + self.paste_size / 4
    }
}

/// Collection of natural-texture source images.
#[derive(Debug, Clone, PartialEq)]
pub struct NaturalPool {
    images: Vec<Image>,
}

impl NaturalPool {
    pub fn new(images: Vec<Image>, min_side: usize) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Data("natural pool is empty".into()));
        }
        if let Some((i, img)) = images
            .iter()
            .enumerate()
            .find(|(_, img)| img.height() < min_side || img.width() < min_side)
        {
            return Err(Error::Size(format!(
                "natural image {i} is {}x{}, smaller than {min_side}x{min_side}",
                img.height(),
                img.width()
            )));
        }
        Ok(NaturalPool { images })
    }

    /// Deterministic procedural textures: value noise, random ellipses,
    /// rotated gratings and their mixtures.
    pub fn procedural(count: usize, side: usize, seed: u64) -> Result<Self> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut images = Vec::with_capacity(count);
        for k in 0..count {
            let img = match k % 4 {
                0 => value_noise_image(side, rng.random_range(8.0..48.0), 4, rng.random()),
                1 => ellipse_image(side, &mut rng),
                2 => {
                    let spec = TextureSpec {
                        pattern: Pattern::Stripes,
                        period: rng.random_range(6.0..40.0),
                        orientation: rng.random_range(0.0..180.0),
                        noise_sigma: 0.03,
                        height: side,
                        width: side,
                        pattern_seed: rng.random(),
                        random_phase: true,
                        brightness_jitter: 0.0,
                    };
                    synth_texture(&spec, &mut rng)?
                }
                _ => {
                    let a = value_noise_image(side, rng.random_range(4.0..16.0), 3, rng.random());
                    let b = ellipse_image(side, &mut rng);
                    let mut d = a.into_data();
                    d.zip_mut_with(b.data(), |x, &y| *x = 0.5 * (*x + y));
                    Image::new(d)
                }
            };
            images.push(img);
        }
        NaturalPool::new(images, side)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }
}

fn ellipse_image(side: usize, rng: &mut impl Rng) -> Image {
    let mut plane = Array2::from_elem((side, side), rng.random_range(0.2f32..0.8));
    let n = rng.random_range(10..40);
    for _ in 0..n {
        let cy = rng.random_range(0.0..side as f64);
        let cx = rng.random_range(0.0..side as f64);
        let ry = rng.random_range(4.0..side as f64 / 4.0);
        let rx = rng.random_range(4.0..side as f64 / 4.0);
        let v: f32 = rng.random();
        for ((y, x), p) in plane.indexed_iter_mut() {
            let dy = (y as f64 - cy) / ry;
            let dx = (x as f64 - cx) / rx;
            if dy * dy + dx * dx <= 1.0 {
                *p = v;
            }
        }
    }
    Image::from_plane(plane)
}

/// Pseudo-random lattice value in `[0, 1)` for integer coordinates.
fn lattice(seed: u64, ix: i64, iy: i64) -> f64 {
    let mut h = seed ^ (ix as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (iy as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    h ^= h >> 33;
    h = h.wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    h ^= h >> 33;
    h = h.wrapping_mul(0xC4CE_B9FE_1A85_EC53);
    h ^= h >> 33;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn value_noise(seed: u64, x: f64, y: f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let (sx, sy) = (smooth(fx), smooth(fy));
    let (ix, iy) = (x0 as i64, y0 as i64);
    let a = lattice(seed, ix, iy);
    let b = lattice(seed, ix + 1, iy);
    let c = lattice(seed, ix, iy + 1);
    let d = lattice(seed, ix + 1, iy + 1);
    let top = a + (b - a) * sx;
    let bottom = c + (d - c) * sx;
    top + (bottom - top) * sy
}

fn fractal_noise(seed: u64, x: f64, y: f64, octaves: u32) -> f64 {
    let mut amp = 1.0;
    let mut freq = 1.0;
    let mut sum = 0.0;
    let mut norm = 0.0;
    for o in 0..octaves {
        sum += amp * value_noise(seed.wrapping_add(o as u64), x * freq, y * freq);
        norm += amp;
        amp *= 0.5;
        freq *= 2.0;
    }
    sum / norm
}

fn value_noise_image(side: usize, cell: f64, octaves: u32, seed: u64) -> Image {
    let plane = Array2::from_shape_fn((side, side), |(y, x)| {
        fractal_noise(seed, x as f64 / cell, y as f64 / cell, octaves) as f32
    });
    Image::from_plane(plane)
}

/// Uniformly placed crop of `height x width`; returns the crop and its
/// top-left corner.
pub fn crop_random(image: &Image, height: usize, width: usize, rng: &mut impl Rng) -> Result<(Image, (usize, usize))> {
    if image.height() < height || image.width() < width {
        return Err(Error::Size(format!(
            "cannot crop {height}x{width} from {}x{}",
            image.height(),
            image.width()
        )));
    }
    let y = rng.random_range(0..=image.height() - height);
    let x = rng.random_range(0..=image.width() - width);
    Ok((image.crop(y, x, height, width)?, (y, x)))
}

/// Resizes a crop of a normal image to the paste size and blurs it.
pub fn degrade_patch(patch: &Image, cfg: &GaagaConfig, rng: &mut impl Rng) -> Image {
    let sigma = if cfg.blur_sigma_max > cfg.blur_sigma_min {
        rng.random_range(cfg.blur_sigma_min..cfg.blur_sigma_max)
    } else {
        cfg.blur_sigma_min
    };
    patch
        .resize_bilinear(cfg.paste_size, cfg.paste_size)
        .gaussian_blur(sigma)
}

/// Builds one artificial negative from `positive`.
pub fn generate(positive: &Image, pool: &NaturalPool, cfg: &GaagaConfig, rng: &mut impl Rng) -> Result<AnomalySample> {
    cfg.validate()?;
    let side = cfg.paste_size;
    let min = cfg.min_image_side();
    if positive.height() < min || positive.width() < min {
        return Err(Error::Size(format!(
            "positive image of {}x{} is smaller than {min}x{min}",
            positive.height(),
            positive.width()
        )));
    }
    let (use_natural, use_self) = match cfg.paste_mode {
        PasteMode::Both => (true, true),
        PasteMode::OneOf => {
            let natural = rng.random_bool(0.5);
            (natural, !natural)
        }
    };
    let mut anomalous = positive.clone();
    let mut mask = Mask::empty(positive.height(), positive.width());

    if use_natural {
        let source = &pool.images()[rng.random_range(0..pool.len())];
        let (crop, _) = crop_random(source, side, side, rng)?;
        let crop = crop.to_channels(positive.channels())?;
        let y = rng.random_range(0..=positive.height() - side);
        let x = rng.random_range(0..=positive.width() - side);
        anomalous.paste(&crop, y, x)?;
        mask.fill_rect(y, x, side, side);
    }
    if use_self {
        let lo = ((side as f64 * cfg.min_crop_fraction).round() as usize).max(1);
        let ch = rng.random_range(lo..=side);
        let cw = rng.random_range(lo..=side);
        let (crop, _) = crop_random(positive, ch, cw, rng)?;
        let degraded = degrade_patch(&crop, cfg, rng);
        let y = rng.random_range(0..=positive.height() - side);
        let x = rng.random_range(0..=positive.width() - side);
        anomalous.paste(&degraded, y, x)?;
        mask.fill_rect(y, x, side, side);
    }
    Ok(AnomalySample {
        anomalous,
        clean: positive.clone(),
        mask,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pattern {
    Stripes,
    Checker,
    PerlinLike,
}

/// Parameters of a periodic grayscale texture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextureSpec {
    pub pattern: Pattern,
    /// Period in pixels (lattice spacing for `perlin-like`).
    pub period: f64,
    /// Orientation of the stripe lines in degrees; 0 gives horizontal lines.
    pub orientation: f64,
    /// Standard deviation of additive Gaussian noise.
    pub noise_sigma: f64,
    pub height: usize,
    pub width: usize,
    /// Lattice seed of the `perlin-like` pattern; unused otherwise.
    #[serde(default)]
    pub pattern_seed: u64,
    /// Shift each image by a uniform random offset across the pattern.
    #[serde(default)]
    pub random_phase: bool,
    /// Half-width of a uniform per-image brightness offset.
    #[serde(default)]
    pub brightness_jitter: f64,
}

impl TextureSpec {
    pub fn stripes(period: f64, size: usize) -> Self {
        TextureSpec {
            pattern: Pattern::Stripes,
            period,
            orientation: 0.0,
            noise_sigma: 0.0,
            height: size,
            width: size,
            pattern_seed: 0,
            random_phase: false,
            brightness_jitter: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.period >= 4.0 && self.period.is_finite()) {
            return Err(Error::Validation(format!("period must be >= 4, got {}", self.period)));
        }
        if self.height < 64 || self.width < 64 {
            return Err(Error::Validation(format!(
                "texture size {}x{} is below 64x64",
                self.height, self.width
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Validation("noise_sigma must be non-negative".into()));
        }
        if !(0.0..=0.5).contains(&self.brightness_jitter) {
            return Err(Error::Validation("brightness_jitter must lie in [0, 0.5]".into()));
        }
        if !self.orientation.is_finite() {
            return Err(Error::Validation("orientation must be finite".into()));
        }
        Ok(())
    }
}

const TEXTURE_MEAN: f64 = 0.5;
const TEXTURE_AMPLITUDE: f64 = 0.3;

/// Noise-free texture value at pixel `(y, x)`, with the pattern moved by
/// `offset` pixels across its lines.
fn texture_value(spec: &TextureSpec, y: usize, x: usize, offset: f64) -> f64 {
    let theta = spec.orientation.to_radians();
    let (sin, cos) = theta.sin_cos();
    let (yf, xf) = (y as f64, x as f64);
    // u runs across the stripe lines, v along them
    let (u, v) = if spec.orientation == 0.0 {
        (yf, xf)
    } else {
        (yf * cos - xf * sin, yf * sin + xf * cos)
    };
    let (u, v) = (u + offset, v + offset);
    let phase = |t: f64| t.rem_euclid(spec.period) / spec.period;
    match spec.pattern {
        Pattern::Stripes => {
            TEXTURE_MEAN + TEXTURE_AMPLITUDE * (2.0 * std::f64::consts::PI * phase(u)).sin()
        }
        Pattern::Checker => {
            let a = phase(u) < 0.5;
            let b = phase(v) < 0.5;
            TEXTURE_MEAN + if a == b { TEXTURE_AMPLITUDE } else { -TEXTURE_AMPLITUDE }
        }
        Pattern::PerlinLike => {
            let n = fractal_noise(spec.pattern_seed, v / spec.period, u / spec.period, 3);
            TEXTURE_MEAN + 2.0 * TEXTURE_AMPLITUDE * (n - 0.5)
        }
    }
}

/// Periodic texture plus i.i.d. Gaussian noise drawn from `rng`.
pub fn synth_texture(spec: &TextureSpec, rng: &mut impl Rng) -> Result<Image> {
    spec.validate()?;
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Validation(e.to_string()))?;
    let offset = if spec.random_phase {
        rng.random_range(0.0..spec.period)
    } else {
        0.0
    };
    let brightness = if spec.brightness_jitter > 0.0 {
        rng.random_range(-spec.brightness_jitter..spec.brightness_jitter)
    } else {
        0.0
    };
    let plane = Array2::from_shape_fn((spec.height, spec.width), |(y, x)| {
        let mut v = texture_value(spec, y, x, offset) + brightness;
        if spec.noise_sigma > 0.0 {
            v += noise.sample(rng);
        }
        v.clamp(0.0, 1.0) as f32
    });
    Ok(Image::from_plane(plane))
}

/// Defect area bounds for [`inject_synthetic_defect`], in pixels.
pub const DEFECT_MIN_PIXELS: usize = 30;
pub const DEFECT_MAX_PIXELS: usize = 2000;

/// Intensity change applied inside an injected defect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DefectSpec {
    pub min_shift: f64,
    pub max_shift: f64,
}

impl Default for DefectSpec {
    fn default() -> Self {
        DefectSpec {
            min_shift: 0.25,
            max_shift: 0.45,
        }
    }
}

impl DefectSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_shift > 0.0 && self.min_shift <= self.max_shift && self.max_shift <= 1.0) {
            return Err(Error::Validation(format!(
                "defect shift range [{}, {}] must lie in (0, 1]",
                self.min_shift, self.max_shift
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DefectKind {
    Blob,
    Scratch,
}

/// Inserts one blob or scratch with an intensity shift; returns the edited
/// image and the defect mask.
pub fn inject_synthetic_defect(image: &Image, spec: &DefectSpec, rng: &mut impl Rng) -> Result<(Image, Mask)> {
    let kind = if rng.random_bool(0.5) {
        DefectKind::Blob
    } else {
        DefectKind::Scratch
    };
    inject_defect_of_kind(image, kind, spec, rng)
}

pub fn inject_defect_of_kind(image: &Image, kind: DefectKind, spec: &DefectSpec, rng: &mut impl Rng) -> Result<(Image, Mask)> {
    spec.validate()?;
    let (h, w) = (image.height(), image.width());
    if h < 64 || w < 64 {
        return Err(Error::Size(format!("defect injection needs >= 64x64, got {h}x{w}")));
    }
    let cap = DEFECT_MAX_PIXELS.min(h * w / 4);
    let target = rng.random_range(DEFECT_MIN_PIXELS..=cap);
    let margin = 8.0;
    let mut y = rng.random_range(h as f64 / 4.0..3.0 * h as f64 / 4.0);
    let mut x = rng.random_range(w as f64 / 4.0..3.0 * w as f64 / 4.0);
    let (brush, turn, step) = match kind {
        DefectKind::Blob => (rng.random_range(2..=4) as isize, std::f64::consts::PI, 1.5),
        DefectKind::Scratch => (rng.random_range(0..=1) as isize, 0.15, 1.0),
    };
    let mut angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let mut mask = Mask::empty(h, w);
    let mut area = 0usize;
    let mut guard = 0;
    'walk: while area < target && guard < 100_000 {
        guard += 1;
        let (cy, cx) = (y.round() as isize, x.round() as isize);
        for dy in -brush..=brush {
            for dx in -brush..=brush {
                if kind == DefectKind::Blob && dy * dy + dx * dx > brush * brush {
                    continue;
                }
                let (py, px) = (cy + dy, cx + dx);
                if py < 0 || px < 0 || py >= h as isize || px >= w as isize {
                    continue;
                }
                let cell = &mut mask.data_mut()[[py as usize, px as usize]];
                if !*cell {
                    *cell = true;
                    area += 1;
                    if area >= target {
                        break 'walk;
                    }
                }
            }
        }
        angle += rng.random_range(-turn..=turn);
        y += step * angle.sin();
        x += step * angle.cos();
        // reflect off a margin so the walk stays inside the image
        if y < margin || y > h as f64 - margin {
            angle = -angle;
            y = y.clamp(margin, h as f64 - margin);
        }
        if x < margin || x > w as f64 - margin {
            angle = std::f64::consts::PI - angle;
            x = x.clamp(margin, w as f64 - margin);
        }
    }

    let mut sum = 0.0;
    for ((yy, xx), &m) in mask.data().indexed_iter() {
        if m {
            for c in 0..image.channels() {
                sum += f64::from(image.data()[[c, yy, xx]]);
            }
        }
    }
    let mean = sum / (area.max(1) * image.channels()) as f64;
    let magnitude = if spec.max_shift > spec.min_shift {
        rng.random_range(spec.min_shift..spec.max_shift)
    } else {
        spec.min_shift
    };
    let shift = if mean > 0.5 { -magnitude } else { magnitude } as f32;
    let mut out = image.clone();
    for ((yy, xx), &m) in mask.data().indexed_iter() {
        if m {
            for c in 0..image.channels() {
                let v = &mut out.data_mut()[[c, yy, xx]];
                *v = (*v + shift).clamp(0.0, 1.0);
            }
        }
    }
    Ok((out, mask))
}
