//! Channel-first raster images with values in `[0, 1]` and the resampling
//! primitives shared by synthesis, segmentation and the toolkit.

use ndarray::{s, Array2, Array3, ArrayView2, Axis};

use crate::error::{Error, Result};

/// A `(channels, height, width)` image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    data: Array3<f32>,
}

impl Image {
    pub fn new(data: Array3<f32>) -> Self {
        Image { data }
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Image::new(Array3::zeros((channels, height, width)))
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Image::new(Array3::from_elem((channels, height, width), value))
    }

    pub fn from_plane(plane: Array2<f32>) -> Self {
        Image::new(plane.insert_axis(Axis(0)))
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<f32> {
        &mut self.data
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }

    pub fn clamp_unit(&mut self) {
        self.data.mapv_inplace(|v| v.clamp(0.0, 1.0));
    }

    pub fn crop(&self, y: usize, x: usize, height: usize, width: usize) -> Result<Image> {
        if y + height > self.height() || x + width > self.width() {
            return Err(Error::Size(format!(
                "crop {height}x{width} at ({y}, {x}) exceeds image {}x{}",
                self.height(),
                self.width()
            )));
        }
        Ok(Image::new(
            self.data
                .slice(s![.., y..y + height, x..x + width])
                .to_owned(),
        ))
    }

    /// Hard paste of `patch` with its top-left corner at `(y, x)`.
    pub fn paste(&mut self, patch: &Image, y: usize, x: usize) -> Result<()> {
        if patch.channels() != self.channels() {
            return Err(Error::dim(
                format!("{} channels", self.channels()),
                format!("{} channels", patch.channels()),
            ));
        }
        if y + patch.height() > self.height() || x + patch.width() > self.width() {
            return Err(Error::Size(format!(
                "paste of {}x{} at ({y}, {x}) exceeds image {}x{}",
                patch.height(),
                patch.width(),
                self.height(),
                self.width()
            )));
        }
        self.data
            .slice_mut(s![.., y..y + patch.height(), x..x + patch.width()])
            .assign(&patch.data);
        Ok(())
    }

    pub fn resize_bilinear(&self, height: usize, width: usize) -> Image {
        if height == self.height() && width == self.width() {
            return self.clone();
        }
        let mut out = Array3::zeros((self.channels(), height, width));
        for (c, plane) in self.data.outer_iter().enumerate() {
            let src = plane.mapv(f64::from);
            let dst = resize_bilinear(src.view(), height, width);
            out.index_axis_mut(Axis(0), c)
                .assign(&dst.mapv(|v| v as f32));
        }
        Image::new(out)
    }

    /// Converts between grayscale and multi-channel layouts. Reducing to one
    /// channel averages; expanding from one channel replicates.
    pub fn to_channels(&self, channels: usize) -> Result<Image> {
        let have = self.channels();
        if have == channels {
            return Ok(self.clone());
        }
        if channels == 1 {
            return Ok(Image::new(
                self.data.mean_axis(Axis(0)).unwrap().insert_axis(Axis(0)),
            ));
        }
        if have == 1 {
            let plane = self.data.index_axis(Axis(0), 0);
            let mut out = Array3::zeros((channels, self.height(), self.width()));
            for mut ch in out.outer_iter_mut() {
                ch.assign(&plane);
            }
            return Ok(Image::new(out));
        }
        Err(Error::dim(
            format!("1 or {channels} channels"),
            format!("{have} channels"),
        ))
    }

    /// Separable Gaussian blur with kernel radius `ceil(3 sigma)` and
    /// edge-replicating borders.
    pub fn gaussian_blur(&self, sigma: f64) -> Image {
        if sigma <= 0.0 {
            return self.clone();
        }
        let kernel = gaussian_kernel(sigma);
        let radius = (kernel.len() / 2) as isize;
        let (channels, h, w) = self.data.dim();
        let mut tmp = Array3::<f64>::zeros((channels, h, w));
        for c in 0..channels {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (t, &k) in kernel.iter().enumerate() {
                        let xx = (x as isize + t as isize - radius).clamp(0, w as isize - 1);
                        acc += k * f64::from(self.data[[c, y, xx as usize]]);
                    }
                    tmp[[c, y, x]] = acc;
                }
            }
        }
        let mut out = Array3::<f32>::zeros((channels, h, w));
        for c in 0..channels {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (t, &k) in kernel.iter().enumerate() {
                        let yy = (y as isize + t as isize - radius).clamp(0, h as isize - 1);
                        acc += k * tmp[[c, yy as usize, x]];
                    }
                    out[[c, y, x]] = (acc as f32).clamp(0.0, 1.0);
                }
            }
        }
        Image::new(out)
    }

    /// Anisotropic total variation: sum of absolute horizontal and vertical
    /// neighbour differences over all channels.
    pub fn total_variation(&self) -> f64 {
        let d = &self.data;
        let (channels, h, w) = d.dim();
        let mut tv = 0.0;
        for c in 0..channels {
            for y in 0..h {
                for x in 0..w {
                    let v = f64::from(d[[c, y, x]]);
                    if x + 1 < w {
                        tv += (f64::from(d[[c, y, x + 1]]) - v).abs();
                    }
                    if y + 1 < h {
                        tv += (f64::from(d[[c, y + 1, x]]) - v).abs();
                    }
                }
            }
        }
        tv
    }
}

/// Binary pixel mask, `true` marks anomalous pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    data: Array2<bool>,
}

impl Mask {
    pub fn new(data: Array2<bool>) -> Self {
        Mask { data }
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Mask::new(Array2::from_elem((height, width), false))
    }

    pub fn height(&self) -> usize {
        self.data.nrows()
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &Array2<bool> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array2<bool> {
        &mut self.data
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn fill_rect(&mut self, y: usize, x: usize, height: usize, width: usize) {
        self.data
            .slice_mut(s![y..y + height, x..x + width])
            .fill(true);
    }

    pub fn resize_nearest(&self, height: usize, width: usize) -> Mask {
        if height == self.height() && width == self.width() {
            return self.clone();
        }
        let (sh, sw) = (self.height(), self.width());
        Mask::new(Array2::from_shape_fn((height, width), |(y, x)| {
            let sy = ((y * sh) / height).min(sh - 1);
            let sx = ((x * sw) / width).min(sw - 1);
            self.data[[sy, sx]]
        }))
    }

    /// Binary dilation with a square structuring element of the given radius.
    pub fn dilate(&self, radius: usize) -> Mask {
        let (h, w) = self.data.dim();
        let mut out = Array2::from_elem((h, w), false);
        for ((y, x), &v) in self.data.indexed_iter() {
            if v {
                let y0 = y.saturating_sub(radius);
                let x0 = x.saturating_sub(radius);
                let y1 = (y + radius + 1).min(h);
                let x1 = (x + radius + 1).min(w);
                out.slice_mut(s![y0..y1, x0..x1]).fill(true);
            }
        }
        Mask::new(out)
    }
}

pub(crate) fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|t| (-((t * t) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Source coordinate and interpolation weight for one output index under
/// half-pixel-centre bilinear resampling.
#[inline]
fn bilinear_source(dst: usize, src_len: usize, dst_len: usize) -> (usize, usize, f64) {
    let scale = src_len as f64 / dst_len as f64;
    let pos = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (pos.floor() as usize).min(src_len - 1);
    let i1 = (i0 + 1).min(src_len - 1);
    (i0, i1, pos - i0 as f64)
}

/// Bilinear resize of one plane with half-pixel centres and clamped borders.
pub fn resize_bilinear(src: ArrayView2<f64>, height: usize, width: usize) -> Array2<f64> {
    let (sh, sw) = src.dim();
    let cols: Vec<_> = (0..width).map(|x| bilinear_source(x, sw, width)).collect();
    let mut out = Array2::zeros((height, width));
    for y in 0..height {
        let (y0, y1, ly) = bilinear_source(y, sh, height);
        for (x, &(x0, x1, lx)) in cols.iter().enumerate() {
            let top = src[[y0, x0]] * (1.0 - lx) + src[[y0, x1]] * lx;
            let bottom = src[[y1, x0]] * (1.0 - lx) + src[[y1, x1]] * lx;
            out[[y, x]] = top * (1.0 - ly) + bottom * ly;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_identity_and_constant() {
        let src = Array2::from_shape_fn((4, 5), |(y, x)| (y * 5 + x) as f64);
        assert_eq!(resize_bilinear(src.view(), 4, 5), src);
        let c = Array2::from_elem((3, 3), 0.25);
        let up = resize_bilinear(c.view(), 7, 11);
        assert!(up.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn bilinear_doubling_interpolates_between_samples() {
        let src = ndarray::arr2(&[[0.0, 1.0]]);
        let up = resize_bilinear(src.view(), 1, 4);
        assert_eq!(up.row(0).to_vec(), vec![0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn blur_preserves_constant() {
        let img = Image::filled(1, 20, 20, 0.3);
        let b = img.gaussian_blur(4.0);
        assert!(b.data().iter().all(|&v| (v - 0.3).abs() < 1e-6));
    }

    #[test]
    fn crop_and_paste_bounds() {
        let mut img = Image::zeros(1, 8, 8);
        assert!(img.crop(4, 4, 5, 4).is_err());
        let patch = Image::filled(1, 2, 2, 1.0);
        img.paste(&patch, 6, 6).unwrap();
        assert!(img.paste(&patch, 7, 0).is_err());
        assert_eq!(img.data().sum(), 4.0);
    }

    #[test]
    fn mask_dilate_and_resize() {
        let mut m = Mask::empty(5, 5);
        m.data_mut()[[2, 2]] = true;
        assert_eq!(m.dilate(1).area(), 9);
        assert_eq!(m.resize_nearest(10, 10).area(), 4);
    }

    #[test]
    fn channel_conversion() {
        let g = Image::filled(1, 2, 2, 0.5);
        let rgb = g.to_channels(3).unwrap();
        assert_eq!(rgb.channels(), 3);
        assert_eq!(rgb.to_channels(1).unwrap(), g);
        assert!(rgb.to_channels(2).is_err());
    }
}
