//! Layers with explicit backward passes.
//!
//! Activations travel between layers as [`Maps`]: a channel-major
//! `(channels, batch * height * width)` matrix. Convolutions lower to one
//! GEMM over the whole batch via im2col; the transposed convolution is the
//! exact adjoint of the strided convolution with the same geometry.

use ndarray::{Array1, Array2, Array3, ArrayView3, Axis};
use rand::Rng;

use crate::error::{Error, Result};

/// Batched feature maps.
#[derive(Debug, Clone, PartialEq)]
pub struct Maps {
    pub data: Array2<f64>,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
}

impl Maps {
    pub fn channels(&self) -> usize {
        self.data.nrows()
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn from_samples(samples: &[ArrayView3<f64>]) -> Result<Maps> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Data("empty batch".into()))?;
        let (c, h, w) = first.dim();
        let plane = h * w;
        let mut data = Array2::zeros((c, samples.len() * plane));
        for (b, s) in samples.iter().enumerate() {
            if s.dim() != (c, h, w) {
                return Err(Error::dim(format!("{:?}", (c, h, w)), format!("{:?}", s.dim())));
            }
            for ch in 0..c {
                let mut dst = data.row_mut(ch);
                let dst = dst.as_slice_mut().unwrap();
                for (d, v) in dst[b * plane..(b + 1) * plane]
                    .iter_mut()
                    .zip(s.index_axis(Axis(0), ch).iter())
                {
                    *d = *v;
                }
            }
        }
        Ok(Maps {
            data,
            batch: samples.len(),
            height: h,
            width: w,
        })
    }

    pub fn sample(&self, b: usize) -> Array3<f64> {
        let plane = self.plane_len();
        let c = self.channels();
        let mut out = Array3::zeros((c, self.height, self.width));
        for ch in 0..c {
            let row = self.data.row(ch);
            let src = &row.as_slice().unwrap()[b * plane..(b + 1) * plane];
            out.index_axis_mut(Axis(0), ch)
                .as_slice_mut()
                .unwrap()
                .copy_from_slice(src);
        }
        out
    }

    /// Flattens each sample to a row of length `channels * height * width`
    /// in `(channel, y, x)` order.
    pub fn to_rows(&self) -> Array2<f64> {
        let plane = self.plane_len();
        let c = self.channels();
        let mut out = Array2::zeros((self.batch, c * plane));
        for b in 0..self.batch {
            let mut row = out.row_mut(b);
            let dst = row.as_slice_mut().unwrap();
            for ch in 0..c {
                let src = self.data.row(ch);
                dst[ch * plane..(ch + 1) * plane]
                    .copy_from_slice(&src.as_slice().unwrap()[b * plane..(b + 1) * plane]);
            }
        }
        out
    }

    /// Inverse of [`Maps::to_rows`].
    pub fn from_rows(rows: &Array2<f64>, channels: usize, height: usize, width: usize) -> Maps {
        let rows = rows.as_standard_layout();
        let batch = rows.nrows();
        let plane = height * width;
        let mut data = Array2::zeros((channels, batch * plane));
        for b in 0..batch {
            let row = rows.row(b);
            let row = row.as_slice().unwrap();
            for ch in 0..channels {
                let mut dst = data.row_mut(ch);
                dst.as_slice_mut().unwrap()[b * plane..(b + 1) * plane]
                    .copy_from_slice(&row[ch * plane..(ch + 1) * plane]);
            }
        }
        Maps {
            data,
            batch,
            height,
            width,
        }
    }
}

/// Patch-extraction geometry shared by im2col and col2im: an image of
/// `height x width` read by a `kernel x kernel` window on a
/// `grid_h x grid_w` grid of positions.
#[derive(Debug, Clone, Copy)]
struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    grid_h: usize,
    grid_w: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    /// Grid column range `[lo, hi)` whose input coordinate
    /// `o * stride + k - padding` lands inside `[0, len)`.
    #[inline]
    fn valid_range(&self, k: usize, grid: usize, len: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = k as isize - self.padding as isize;
        // smallest o with o*s + off >= 0
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // largest o with o*s + off <= len-1
        let hi_incl = (len as isize - 1 - off).div_euclid(s);
        let hi = (hi_incl + 1).clamp(0, grid as isize);
        (lo.min(grid as isize) as usize, hi.max(lo.min(grid as isize)) as usize)
    }
}

fn im2col(x: &Array2<f64>, batch: usize, g: Geometry) -> Array2<f64> {
    let grid = g.grid_h * g.grid_w;
    let plane = g.height * g.width;
    let mut cols = Array2::zeros((g.rows(), batch * grid));
    let xs = x.as_slice().expect("standard layout");
    let cs = cols.as_slice_mut().unwrap();
    let ncol = batch * grid;
    for c in 0..g.channels {
        let src = &xs[c * batch * plane..(c + 1) * batch * plane];
        for ky in 0..g.kernel {
            let (oy0, oy1) = g.valid_range(ky, g.grid_h, g.height);
            for kx in 0..g.kernel {
                let (ox0, ox1) = g.valid_range(kx, g.grid_w, g.width);
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut cs[row * ncol..(row + 1) * ncol];
                for b in 0..batch {
                    let sb = &src[b * plane..(b + 1) * plane];
                    let db = &mut dst[b * grid..(b + 1) * grid];
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.padding;
                        let srow = &sb[iy * g.width..(iy + 1) * g.width];
                        let drow = &mut db[oy * g.grid_w..(oy + 1) * g.grid_w];
                        for ox in ox0..ox1 {
                            drow[ox] = srow[ox * g.stride + kx - g.padding];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &Array2<f64>, batch: usize, g: Geometry) -> Array2<f64> {
    let grid = g.grid_h * g.grid_w;
    let plane = g.height * g.width;
    let mut x = Array2::zeros((g.channels, batch * plane));
    let xs = x.as_slice_mut().unwrap();
    let cs = cols.as_slice().expect("standard layout");
    let ncol = batch * grid;
    for c in 0..g.channels {
        let dst = &mut xs[c * batch * plane..(c + 1) * batch * plane];
        for ky in 0..g.kernel {
            let (oy0, oy1) = g.valid_range(ky, g.grid_h, g.height);
            for kx in 0..g.kernel {
                let (ox0, ox1) = g.valid_range(kx, g.grid_w, g.width);
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &cs[row * ncol..(row + 1) * ncol];
                for b in 0..batch {
                    let sb = &src[b * grid..(b + 1) * grid];
                    let db = &mut dst[b * plane..(b + 1) * plane];
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.padding;
                        let srow = &sb[oy * g.grid_w..(oy + 1) * g.grid_w];
                        let drow = &mut db[iy * g.width..(iy + 1) * g.width];
                        for ox in ox0..ox1 {
                            drow[ox * g.stride + kx - g.padding] += srow[ox];
                        }
                    }
                }
            }
        }
    }
    x
}

fn add_channel_bias(data: &mut Array2<f64>, bias: &Array1<f64>) {
    for (mut row, &b) in data.outer_iter_mut().zip(bias.iter()) {
        row.mapv_inplace(|v| v + b);
    }
}

fn uniform(rng: &mut impl Rng, shape: (usize, usize), bound: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || rng.random_range(-bound..bound))
}

fn uniform1(rng: &mut impl Rng, len: usize, bound: f64) -> Array1<f64> {
    Array1::from_shape_simple_fn(len, || rng.random_range(-bound..bound))
}

/// Strided 2-D convolution with symmetric zero padding. The weight is
/// stored as `(out_channels, in_channels * kernel * kernel)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Conv2d {
            weight: Array2::zeros((out_channels, in_channels * kernel * kernel)),
            bias: Array1::zeros(out_channels),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    /// He-uniform weights, small uniform biases.
    pub fn init(&mut self, rng: &mut impl Rng) {
        let fan_in = (self.in_channels * self.kernel * self.kernel) as f64;
        self.weight = uniform(rng, self.weight.dim(), (6.0 / fan_in).sqrt());
        self.bias = uniform1(rng, self.out_channels, 1.0 / fan_in.sqrt());
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let f = |n: usize| (n + 2 * self.padding).saturating_sub(self.kernel) / self.stride + 1;
        (f(h), f(w))
    }

    fn geometry(&self, h: usize, w: usize) -> Geometry {
        let (gh, gw) = self.output_size(h, w);
        Geometry {
            channels: self.in_channels,
            height: h,
            width: w,
            grid_h: gh,
            grid_w: gw,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
        }
    }

    /// Returns the output together with the im2col matrix needed by
    /// [`Conv2d::backward`].
    pub fn forward(&self, x: &Maps) -> Result<(Maps, Array2<f64>)> {
        if x.channels() != self.in_channels {
            return Err(Error::dim(
                format!("{} input channels", self.in_channels),
                format!("{} input channels", x.channels()),
            ));
        }
        if x.height + 2 * self.padding < self.kernel || x.width + 2 * self.padding < self.kernel {
            return Err(Error::dim(
                format!("spatial size >= {}", self.kernel - 2 * self.padding),
                format!("{}x{}", x.height, x.width),
            ));
        }
        let g = self.geometry(x.height, x.width);
        let cols = im2col(&x.data, x.batch, g);
        let mut out = self.weight.dot(&cols);
        add_channel_bias(&mut out, &self.bias);
        Ok((
            Maps {
                data: out,
                batch: x.batch,
                height: g.grid_h,
                width: g.grid_w,
            },
            cols,
        ))
    }

    /// Accumulates weight and bias gradients into `grad` and returns the
    /// gradient with respect to the input (skipped when `need_input` is false).
    pub fn backward(
        &self,
        input: (usize, usize, usize),
        cols: &Array2<f64>,
        dout: &Maps,
        grad: &mut Conv2d,
        need_input: bool,
    ) -> Option<Maps> {
        let (batch, h, w) = input;
        grad.weight += &dout.data.dot(&cols.t());
        grad.bias += &dout.data.sum_axis(Axis(1));
        if !need_input {
            return None;
        }
        let dcols = self.weight.t().dot(&dout.data);
        let dx = col2im(&dcols, batch, self.geometry(h, w));
        Some(Maps {
            data: dx,
            batch,
            height: h,
            width: w,
        })
    }
}

/// Transposed convolution, the adjoint of [`Conv2d`] with the same kernel,
/// stride and padding. The weight is `(in_channels, out_channels * kernel * kernel)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTranspose2d {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvTranspose2d {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        ConvTranspose2d {
            weight: Array2::zeros((in_channels, out_channels * kernel * kernel)),
            bias: Array1::zeros(out_channels),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn init(&mut self, rng: &mut impl Rng) {
        let fan_in = (self.in_channels * self.kernel * self.kernel) as f64
            / (self.stride * self.stride) as f64;
        self.weight = uniform(rng, self.weight.dim(), (6.0 / fan_in).sqrt());
        self.bias = uniform1(rng, self.out_channels, 1.0 / fan_in.sqrt());
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let f = |n: usize| ((n - 1) * self.stride + self.kernel).saturating_sub(2 * self.padding);
        (f(h), f(w))
    }

    fn geometry(&self, h: usize, w: usize) -> Geometry {
        let (oh, ow) = self.output_size(h, w);
        Geometry {
            channels: self.out_channels,
            height: oh,
            width: ow,
            grid_h: h,
            grid_w: w,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
        }
    }

    pub fn forward(&self, x: &Maps) -> Result<Maps> {
        if x.channels() != self.in_channels {
            return Err(Error::dim(
                format!("{} input channels", self.in_channels),
                format!("{} input channels", x.channels()),
            ));
        }
        let g = self.geometry(x.height, x.width);
        let cols = self.weight.t().dot(&x.data);
        let mut out = col2im(&cols, x.batch, g);
        add_channel_bias(&mut out, &self.bias);
        Ok(Maps {
            data: out,
            batch: x.batch,
            height: g.height,
            width: g.width,
        })
    }

    pub fn backward(&self, x: &Maps, dout: &Maps, grad: &mut ConvTranspose2d, need_input: bool) -> Option<Maps> {
        let g = self.geometry(x.height, x.width);
        let dcols = im2col(&dout.data, dout.batch, g);
        grad.weight += &x.data.dot(&dcols.t());
        grad.bias += &dout.data.sum_axis(Axis(1));
        if !need_input {
            return None;
        }
        Some(Maps {
            data: self.weight.dot(&dcols),
            batch: x.batch,
            height: x.height,
            width: x.width,
        })
    }
}

/// Fully connected layer acting on rows: `y = x W^T + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(in_features: usize, out_features: usize) -> Self {
        Linear {
            weight: Array2::zeros((out_features, in_features)),
            bias: Array1::zeros(out_features),
        }
    }

    pub fn init(&mut self, rng: &mut impl Rng, gain: f64) {
        let fan_in = self.in_features() as f64;
        self.weight = uniform(rng, self.weight.dim(), gain * (3.0 / fan_in).sqrt());
        self.bias = uniform1(rng, self.out_features(), 1.0 / fan_in.sqrt());
    }

    pub fn in_features(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_features(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.in_features() {
            return Err(Error::dim(
                format!("{} features", self.in_features()),
                format!("{} features", x.ncols()),
            ));
        }
        Ok(x.dot(&self.weight.t()) + &self.bias)
    }

    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.weight += &dy.t().dot(x);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight)
    }
}

pub const LEAKY_SLOPE: f64 = 0.2;

#[inline]
pub fn leaky_relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        LEAKY_SLOPE * v
    }
}

#[inline]
pub fn relu(v: f64) -> f64 {
    v.max(0.0)
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
