//! Multi-scale feature residual scoring.
//!
//! The image and its reconstruction are passed through the encoder's
//! convolution stack. At each selected scale the squared feature difference
//! is upsampled to the image size and averaged over channels; scales are
//! combined with weights proportional to the squared receptive field.

use ndarray::{Array2, ArrayView3, Axis};

use crate::error::{Error, Result};
use crate::image::{resize_bilinear, Image, Mask};
use crate::model::{ArchConfig, CmaAe};

/// Receptive field side of every encoder layer, first layer first.
pub fn receptive_fields(arch: &ArchConfig) -> Vec<usize> {
    let mut rf = 1;
    let mut jump = 1;
    arch.layers
        .iter()
        .map(|l| {
            rf += (l.kernel - 1) * jump;
            jump *= l.stride;
            rf
        })
        .collect()
}

/// Checks a 1-based scale selection against the encoder depth.
pub fn validate_scales(arch: &ArchConfig, scales: &[usize]) -> Result<()> {
    if scales.is_empty() {
        return Err(Error::Config("at least one scale is required".into()));
    }
    for (i, &s) in scales.iter().enumerate() {
        if s == 0 || s > arch.layers.len() {
            return Err(Error::Config(format!(
                "scale {s} is outside 1..={}",
                arch.layers.len()
            )));
        }
        if scales[..i].contains(&s) {
            return Err(Error::Config(format!("scale {s} is listed twice")));
        }
    }
    Ok(())
}

/// Normalized weights `RF_l^2 / sum RF^2` over the selected scales.
pub fn scale_weights(arch: &ArchConfig, scales: &[usize]) -> Result<Vec<f64>> {
    validate_scales(arch, scales)?;
    let rf = receptive_fields(arch);
    let sq: Vec<f64> = scales.iter().map(|&s| (rf[s - 1] * rf[s - 1]) as f64).collect();
    let total: f64 = sq.iter().sum();
    Ok(sq.into_iter().map(|v| v / total).collect())
}

fn check_pair(f: &ArrayView3<f64>, g: &ArrayView3<f64>) -> Result<()> {
    if f.dim() != g.dim() {
        return Err(Error::dim(format!("{:?}", f.dim()), format!("{:?}", g.dim())));
    }
    if f.dim().0 == 0 {
        return Err(Error::Degenerate("feature map has no channels".into()));
    }
    Ok(())
}

/// Squared residual upsampled per channel, then averaged over channels.
pub fn scale_residual_reference(f: ArrayView3<f64>, g: ArrayView3<f64>, height: usize, width: usize) -> Result<Array2<f64>> {
    check_pair(&f, &g)?;
    let c = f.dim().0;
    let mut acc = Array2::zeros((height, width));
    for k in 0..c {
        let d = (&f.index_axis(Axis(0), k) - &g.index_axis(Axis(0), k)).mapv(|v| v * v);
        acc += &resize_bilinear(d.view(), height, width);
    }
    Ok(acc / c as f64)
}

/// Same result as [`scale_residual_reference`]: bilinear resampling is
/// linear, so the channel mean is taken before the single upsample.
pub fn scale_residual(f: ArrayView3<f64>, g: ArrayView3<f64>, height: usize, width: usize) -> Result<Array2<f64>> {
    check_pair(&f, &g)?;
    let mut mean = Array2::<f64>::zeros((f.dim().1, f.dim().2));
    for (a, b) in f.outer_iter().zip(g.outer_iter()) {
        ndarray::Zip::from(&mut mean)
            .and(&a)
            .and(&b)
            .for_each(|m, &x, &y| *m += (x - y) * (x - y));
    }
    mean /= f.dim().0 as f64;
    Ok(resize_bilinear(mean.view(), height, width))
}

/// Per-pixel anomaly scores of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    pub data: Array2<f64>,
}

impl ScoreMap {
    pub fn height(&self) -> usize {
        self.data.nrows()
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Pixels with a score strictly above `threshold`.
    pub fn threshold(&self, threshold: f64) -> Mask {
        Mask::new(self.data.mapv(|v| v > threshold))
    }
}

/// Scores `image` against its reconstruction `recon` at the given 1-based
/// encoder scales.
pub fn msfr(model: &CmaAe, image: &Image, recon: &Image, scales: &[usize]) -> Result<ScoreMap> {
    if image.data().dim() != recon.data().dim() {
        return Err(Error::dim(
            format!("{:?}", image.data().dim()),
            format!("{:?}", recon.data().dim()),
        ));
    }
    let weights = scale_weights(&model.arch, scales)?;
    let (h, w) = (image.height(), image.width());
    let fa = model.image_features(image.data().mapv(f64::from).view())?;
    let fb = model.image_features(recon.data().mapv(f64::from).view())?;
    let mut out = Array2::zeros((h, w));
    for (&s, wt) in scales.iter().zip(weights) {
        let r = scale_residual(fa[s - 1].view(), fb[s - 1].view(), h, w)?;
        out.scaled_add(wt, &r);
    }
    Ok(ScoreMap { data: out })
}

/// Channel mean of `|image - recon|`, the single-scale pixel baseline.
pub fn pixel_residual(image: &Image, recon: &Image) -> Result<ScoreMap> {
    if image.data().dim() != recon.data().dim() {
        return Err(Error::dim(
            format!("{:?}", image.data().dim()),
            format!("{:?}", recon.data().dim()),
        ));
    }
    let diff = (image.data() - recon.data()).mapv(|v| f64::from(v.abs()));
    let data = diff.mean_axis(Axis(0)).expect("at least one channel");
    Ok(ScoreMap { data })
}

/// Reconstructs `image` tile by tile and scores it.
pub fn segment(model: &CmaAe, image: &Image, scales: &[usize]) -> Result<(Image, ScoreMap)> {
    let recon = model.reconstruct_image(image)?;
    let score = msfr(model, image, &recon, scales)?;
    Ok((recon, score))
}
