//! Patch encoder, decoder and the clear memory-augmented module composed
//! into a single autoencoder.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frm::{FrmUpdate, Repair, RepairMode, RepairPass};
use crate::image::Image;
use crate::memory::{Addressing, AttentionWeights, MemoryBank, Renormalization};
use crate::nn::{leaky_relu, relu, sigmoid, Conv2d, ConvTranspose2d, Linear, Maps, LEAKY_SLOPE};

/// One encoder convolution; the decoder mirrors it with a transposed
/// convolution of the same kernel and stride.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub kernel: usize,
    pub stride: usize,
    pub channels: usize,
}

impl LayerSpec {
    pub const fn new(kernel: usize, stride: usize, channels: usize) -> Self {
        LayerSpec {
            kernel,
            stride,
            channels,
        }
    }

    pub fn padding(&self) -> usize {
        (self.kernel - self.stride) / 2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub in_channels: usize,
    pub patch_size: usize,
    pub layers: Vec<LayerSpec>,
    /// Latent code length `C`.
    pub latent_dim: usize,
    /// Number of memory items `N`.
    pub memory_items: usize,
    pub shrink_eps: f64,
    pub renormalization: Renormalization,
    pub repair: RepairMode,
    pub frm_update: FrmUpdate,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            in_channels: 1,
            patch_size: 64,
            layers: vec![
                LayerSpec::new(4, 2, 32),
                LayerSpec::new(3, 1, 32),
                LayerSpec::new(4, 2, 64),
                LayerSpec::new(4, 2, 128),
                LayerSpec::new(4, 2, 256),
                LayerSpec::new(4, 2, 256),
            ],
            latent_dim: 256,
            memory_items: 100,
            shrink_eps: 1e-12,
            renormalization: Renormalization::L1,
            repair: RepairMode::Gated,
            frm_update: FrmUpdate::Forgotten,
        }
    }
}

impl ArchConfig {
    /// Same layer schedule with narrower channels, sized for CPU-only runs.
    pub fn desk() -> Self {
        let widths = [16, 16, 32, 32, 64, 64];
        let mut arch = ArchConfig::default();
        for (l, w) in arch.layers.iter_mut().zip(widths) {
            l.channels = w;
        }
        arch.latent_dim = 64;
        arch.memory_items = 50;
        arch
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.in_channels == 0 {
            return bad("in_channels must be positive".into());
        }
        if self.layers.is_empty() {
            return bad("at least one encoder layer is required".into());
        }
        if self.latent_dim == 0 {
            return bad("latent_dim must be positive".into());
        }
        if self.memory_items < 2 {
            return bad(format!("memory_items must be >= 2, got {}", self.memory_items));
        }
        if !(self.shrink_eps > 0.0 && self.shrink_eps.is_finite()) {
            return bad(format!("shrink_eps must be a small positive number, got {}", self.shrink_eps));
        }
        let mut size = self.patch_size;
        for (i, l) in self.layers.iter().enumerate() {
            if l.kernel == 0 || l.stride == 0 || l.channels == 0 {
                return bad(format!("layer {} has a zero kernel, stride or width", i + 1));
            }
            if l.kernel < l.stride || (l.kernel - l.stride) % 2 != 0 {
                return bad(format!(
                    "layer {}: kernel {} and stride {} admit no symmetric padding",
                    i + 1,
                    l.kernel,
                    l.stride
                ));
            }
            if size % l.stride != 0 || size / l.stride == 0 {
                return bad(format!(
                    "patch size {} is not reducible by the stride schedule (layer {} sees {size})",
                    self.patch_size,
                    i + 1
                ));
            }
            size /= l.stride;
        }
        Ok(())
    }

    /// Spatial size of each encoder output for a `size x size` input.
    pub fn feature_sizes(&self, size: usize) -> Vec<usize> {
        let mut s = size;
        self.layers
            .iter()
            .map(|l| {
                s /= l.stride;
                s
            })
            .collect()
    }

    fn bottleneck(&self) -> (usize, usize) {
        let last = self.layers.last().expect("validated");
        let side = *self.feature_sizes(self.patch_size).last().unwrap();
        (last.channels, side)
    }
}

/// Coarse grouping of parameters, used to freeze parts of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder,
    Decoder,
    Memory,
    Repair,
}

/// All trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub encoder: Vec<Conv2d>,
    pub encoder_fc: Linear,
    pub decoder_fc: Linear,
    pub decoder: Vec<ConvTranspose2d>,
    pub memory: MemoryBank,
    pub repair: Repair,
}

/// Gradients with the same layout as [`Params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub encoder: Vec<Conv2d>,
    pub encoder_fc: Linear,
    pub decoder_fc: Linear,
    pub decoder: Vec<ConvTranspose2d>,
    pub memory: Array2<f64>,
    pub repair: Repair,
}

struct Layout {
    encoder: Vec<Conv2d>,
    encoder_fc: Linear,
    decoder_fc: Linear,
    decoder: Vec<ConvTranspose2d>,
}

fn zero_layout(arch: &ArchConfig) -> Layout {
    let mut encoder = Vec::new();
    let mut in_ch = arch.in_channels;
    for l in &arch.layers {
        encoder.push(Conv2d::zeros(in_ch, l.channels, l.kernel, l.stride, l.padding()));
        in_ch = l.channels;
    }
    let (ch, side) = arch.bottleneck();
    let flat = ch * side * side;
    let mut decoder = Vec::new();
    for (i, l) in arch.layers.iter().enumerate().rev() {
        let out_ch = if i == 0 {
            arch.in_channels
        } else {
            arch.layers[i - 1].channels
        };
        decoder.push(ConvTranspose2d::zeros(l.channels, out_ch, l.kernel, l.stride, l.padding()));
    }
    Layout {
        encoder,
        encoder_fc: Linear::zeros(flat, arch.latent_dim),
        decoder_fc: Linear::zeros(arch.latent_dim, flat),
        decoder,
    }
}

impl Params {
    /// All-zero layers; the memory bank is supplied by the caller.
    pub fn zeros(arch: &ArchConfig, memory: MemoryBank) -> Result<Self> {
        arch.validate()?;
        if memory.len() != arch.memory_items || memory.dim() != arch.latent_dim {
            return Err(Error::dim(
                format!("memory of {}x{}", arch.memory_items, arch.latent_dim),
                format!("{}x{}", memory.len(), memory.dim()),
            ));
        }
        let l = zero_layout(arch);
        Ok(Params {
            encoder: l.encoder,
            encoder_fc: l.encoder_fc,
            decoder_fc: l.decoder_fc,
            decoder: l.decoder,
            memory,
            repair: Repair::zeros(arch.repair, arch.latent_dim),
        })
    }

    pub fn init(arch: &ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let memory = MemoryBank::random(arch.memory_items, arch.latent_dim, &mut rng)?;
        let mut p = Params::zeros(arch, memory)?;
        for c in &mut p.encoder {
            c.init(&mut rng);
        }
        p.encoder_fc.init(&mut rng, 1.0);
        p.decoder_fc.init(&mut rng, 2f64.sqrt());
        for d in &mut p.decoder {
            d.init(&mut rng);
        }
        p.repair.init(&mut rng);
        Ok(p)
    }

    /// Parameter tensors in a fixed order shared with [`Grads::tensors`].
    /// The memory bank is omitted while it is frozen.
    pub fn tensors_mut(&mut self) -> Vec<(ParamGroup, &mut [f64])> {
        let mut out: Vec<(ParamGroup, &mut [f64])> = Vec::new();
        for c in &mut self.encoder {
            out.push((ParamGroup::Encoder, c.weight.as_slice_mut().unwrap()));
            out.push((ParamGroup::Encoder, c.bias.as_slice_mut().unwrap()));
        }
        out.push((ParamGroup::Encoder, self.encoder_fc.weight.as_slice_mut().unwrap()));
        out.push((ParamGroup::Encoder, self.encoder_fc.bias.as_slice_mut().unwrap()));
        out.push((ParamGroup::Decoder, self.decoder_fc.weight.as_slice_mut().unwrap()));
        out.push((ParamGroup::Decoder, self.decoder_fc.bias.as_slice_mut().unwrap()));
        for d in &mut self.decoder {
            out.push((ParamGroup::Decoder, d.weight.as_slice_mut().unwrap()));
            out.push((ParamGroup::Decoder, d.bias.as_slice_mut().unwrap()));
        }
        if let Some(m) = self.memory.items_mut() {
            out.push((ParamGroup::Memory, m.as_slice_mut().unwrap()));
        }
        for l in self.repair.linears_mut() {
            out.push((ParamGroup::Repair, l.weight.as_slice_mut().unwrap()));
            out.push((ParamGroup::Repair, l.bias.as_slice_mut().unwrap()));
        }
        out
    }

    /// Read-only tensors in checkpoint order (memory always included).
    pub fn tensors(&self) -> Vec<(ParamGroup, &[f64])> {
        let mut out: Vec<(ParamGroup, &[f64])> = Vec::new();
        for c in &self.encoder {
            out.push((ParamGroup::Encoder, c.weight.as_slice().unwrap()));
            out.push((ParamGroup::Encoder, c.bias.as_slice().unwrap()));
        }
        out.push((ParamGroup::Encoder, self.encoder_fc.weight.as_slice().unwrap()));
        out.push((ParamGroup::Encoder, self.encoder_fc.bias.as_slice().unwrap()));
        out.push((ParamGroup::Decoder, self.decoder_fc.weight.as_slice().unwrap()));
        out.push((ParamGroup::Decoder, self.decoder_fc.bias.as_slice().unwrap()));
        for d in &self.decoder {
            out.push((ParamGroup::Decoder, d.weight.as_slice().unwrap()));
            out.push((ParamGroup::Decoder, d.bias.as_slice().unwrap()));
        }
        out.push((ParamGroup::Memory, self.memory.items().as_slice().unwrap()));
        for l in self.repair.linears() {
            out.push((ParamGroup::Repair, l.weight.as_slice().unwrap()));
            out.push((ParamGroup::Repair, l.bias.as_slice().unwrap()));
        }
        out
    }

    /// Mutable tensors in checkpoint order. Unfreezes the memory bank; the
    /// caller restores the flag.
    pub(crate) fn tensors_for_restore(&mut self) -> Vec<&mut [f64]> {
        self.memory.unfreeze();
        let mut out: Vec<&mut [f64]> = Vec::new();
        for c in &mut self.encoder {
            out.push(c.weight.as_slice_mut().unwrap());
            out.push(c.bias.as_slice_mut().unwrap());
        }
        out.push(self.encoder_fc.weight.as_slice_mut().unwrap());
        out.push(self.encoder_fc.bias.as_slice_mut().unwrap());
        out.push(self.decoder_fc.weight.as_slice_mut().unwrap());
        out.push(self.decoder_fc.bias.as_slice_mut().unwrap());
        for d in &mut self.decoder {
            out.push(d.weight.as_slice_mut().unwrap());
            out.push(d.bias.as_slice_mut().unwrap());
        }
        let repair = &mut self.repair;
        let memory = &mut self.memory;
        let items = memory.items_mut().expect("unfrozen above");
        out.push(items.as_slice_mut().unwrap());
        for l in repair.linears_mut() {
            out.push(l.weight.as_slice_mut().unwrap());
            out.push(l.bias.as_slice_mut().unwrap());
        }
        out
    }
}

impl Grads {
    pub fn zeros(arch: &ArchConfig) -> Self {
        let l = zero_layout(arch);
        Grads {
            encoder: l.encoder,
            encoder_fc: l.encoder_fc,
            decoder_fc: l.decoder_fc,
            decoder: l.decoder,
            memory: Array2::zeros((arch.memory_items, arch.latent_dim)),
            repair: Repair::zeros(arch.repair, arch.latent_dim),
        }
    }

    /// Gradient tensors matching [`Params::tensors_mut`]; `include_memory`
    /// must agree with whether the bank is frozen.
    pub fn tensors(&self, include_memory: bool) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for c in &self.encoder {
            out.push(c.weight.as_slice().unwrap());
            out.push(c.bias.as_slice().unwrap());
        }
        out.push(self.encoder_fc.weight.as_slice().unwrap());
        out.push(self.encoder_fc.bias.as_slice().unwrap());
        out.push(self.decoder_fc.weight.as_slice().unwrap());
        out.push(self.decoder_fc.bias.as_slice().unwrap());
        for d in &self.decoder {
            out.push(d.weight.as_slice().unwrap());
            out.push(d.bias.as_slice().unwrap());
        }
        if include_memory {
            out.push(self.memory.as_slice().unwrap());
        }
        for l in self.repair.linears() {
            out.push(l.weight.as_slice().unwrap());
            out.push(l.bias.as_slice().unwrap());
        }
        out
    }
}

/// Training progress recorded in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Initialized,
    Stage1Complete,
    Stage2Complete,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Initialized => "initialized",
            Stage::Stage1Complete => "stage1-complete",
            Stage::Stage2Complete => "stage2-complete",
        })
    }
}

/// A `(channels, patch, patch)` input in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchTensor(Array3<f64>);

impl PatchTensor {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::Validation(format!("patch value {v} outside [0, 1]")));
        }
        Ok(PatchTensor(data))
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array3<f64> {
        self.0
    }
}

/// Encoder outputs for one input: one map per convolution layer and the
/// latent code.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub maps: Vec<Array3<f64>>,
    pub latent: Array1<f64>,
}

/// Everything retained from a forward pass for the backward pass.
pub(crate) struct ForwardPass {
    input_dims: (usize, usize, usize),
    enc_cols: Vec<Array2<f64>>,
    enc_out: Vec<Maps>,
    flat: Array2<f64>,
    pub addressing: Addressing,
    repair: RepairPass,
    dec_in: Vec<Maps>,
    pub output: Maps,
}

/// The clear memory-augmented autoencoder.
#[derive(Debug, Clone, PartialEq)]
pub struct CmaAe {
    pub arch: ArchConfig,
    pub params: Params,
    pub stage: Stage,
}

fn leaky_inplace(m: &mut Maps) {
    m.data.mapv_inplace(leaky_relu);
}

impl CmaAe {
    pub fn new(arch: ArchConfig, seed: u64) -> Result<Self> {
        let params = Params::init(&arch, seed)?;
        Ok(CmaAe {
            arch,
            params,
            stage: Stage::Initialized,
        })
    }

    pub fn from_params(arch: ArchConfig, params: Params, stage: Stage) -> Result<Self> {
        arch.validate()?;
        let shape = Params::zeros(&arch, params.memory.clone())?;
        let dims_ok = shape
            .tensors()
            .iter()
            .zip(params.tensors().iter())
            .all(|(a, b)| a.1.len() == b.1.len())
            && shape.tensors().len() == params.tensors().len();
        if !dims_ok || shape.repair.mode() != params.repair.mode() {
            return Err(Error::Config("parameters do not match architecture".into()));
        }
        Ok(CmaAe { arch, params, stage })
    }

    fn check_patch(&self, d: (usize, usize, usize)) -> Result<()> {
        let want = (self.arch.in_channels, self.arch.patch_size, self.arch.patch_size);
        if d != want {
            return Err(Error::Config(format!(
                "patch of shape {d:?} does not match the configured {want:?}"
            )));
        }
        Ok(())
    }

    /// Convolutional feature maps of a batch of any spatial size.
    pub(crate) fn conv_features(&self, x: &Maps) -> Result<(Vec<Array2<f64>>, Vec<Maps>)> {
        let mut cols = Vec::with_capacity(self.params.encoder.len());
        let mut outs: Vec<Maps> = Vec::with_capacity(self.params.encoder.len());
        for conv in &self.params.encoder {
            let input = outs.last().unwrap_or(x);
            let (mut out, c) = conv.forward(input)?;
            leaky_inplace(&mut out);
            cols.push(c);
            outs.push(out);
        }
        Ok((cols, outs))
    }

    /// Encoder feature maps of a full image, without the final projection.
    pub fn image_features(&self, image: ArrayView3<f64>) -> Result<Vec<Array3<f64>>> {
        if image.dim().0 != self.arch.in_channels {
            return Err(Error::dim(
                format!("{} channels", self.arch.in_channels),
                format!("{} channels", image.dim().0),
            ));
        }
        let x = Maps::from_samples(&[image])?;
        let (_, outs) = self.conv_features(&x)?;
        Ok(outs.iter().map(|m| m.sample(0)).collect())
    }

    pub fn encode(&self, patch: &PatchTensor) -> Result<FeaturePyramid> {
        self.check_patch(patch.data().dim())?;
        let x = Maps::from_samples(&[patch.data().view()])?;
        let (_, outs) = self.conv_features(&x)?;
        let flat = outs.last().unwrap().to_rows();
        let latent = self.params.encoder_fc.forward(&flat)?;
        Ok(FeaturePyramid {
            maps: outs.iter().map(|m| m.sample(0)).collect(),
            latent: latent.row(0).to_owned(),
        })
    }

    fn decode_rows(&self, codes: &Array2<f64>) -> Result<(Array2<f64>, Vec<Maps>, Maps)> {
        let (ch, side) = self.arch.bottleneck();
        let fc_out = self.params.decoder_fc.forward(codes)?.mapv(relu);
        let mut inputs = Vec::with_capacity(self.params.decoder.len());
        let mut x = Maps::from_rows(&fc_out, ch, side, side);
        let last = self.params.decoder.len() - 1;
        for (j, d) in self.params.decoder.iter().enumerate() {
            let mut y = d.forward(&x)?;
            if j == last {
                y.data.mapv_inplace(sigmoid);
            } else {
                y.data.mapv_inplace(relu);
            }
            inputs.push(std::mem::replace(&mut x, y));
        }
        Ok((fc_out, inputs, x))
    }

    pub fn decode(&self, code: ArrayView1<f64>) -> Result<PatchTensor> {
        if code.len() != self.arch.latent_dim {
            return Err(Error::dim(format!("code length {}", self.arch.latent_dim), code.len()));
        }
        let (_, _, out) = self.decode_rows(&code.to_owned().insert_axis(Axis(0)))?;
        Ok(PatchTensor(out.sample(0)))
    }

    /// Memory addressing followed by repair for one latent code.
    pub fn cmam(&self, z: ArrayView1<f64>) -> Result<(Array1<f64>, AttentionWeights)> {
        let z2 = z.insert_axis(Axis(0));
        let addressing = Addressing::forward(
            z2,
            &self.params.memory,
            self.arch.shrink_eps,
            self.arch.renormalization,
        )?;
        let repair = RepairPass::forward(
            &self.params.repair,
            z2,
            addressing.read.view(),
            self.arch.frm_update,
        )?;
        let weights = AttentionWeights {
            raw: addressing.raw().row(0).to_owned(),
            shrunk: addressing.shrunk.row(0).to_owned(),
        };
        Ok((repair.output.row(0).to_owned(), weights))
    }

    /// Full forward pass over a batch of patches.
    pub(crate) fn forward(&self, x: &Maps) -> Result<ForwardPass> {
        self.check_patch((x.channels(), x.height, x.width))?;
        let (enc_cols, enc_out) = self.conv_features(x)?;
        let flat = enc_out.last().unwrap().to_rows();
        let latent = self.params.encoder_fc.forward(&flat)?;
        let addressing = Addressing::forward(
            latent.view(),
            &self.params.memory,
            self.arch.shrink_eps,
            self.arch.renormalization,
        )?;
        let repair = RepairPass::forward(
            &self.params.repair,
            latent.view(),
            addressing.read.view(),
            self.arch.frm_update,
        )?;
        let (_, dec_in, output) = self.decode_rows(&repair.output)?;
        Ok(ForwardPass {
            input_dims: (x.batch, x.height, x.width),
            enc_cols,
            enc_out,
            flat,
            addressing,
            repair,
            dec_in,
            output,
        })
    }

    /// Backpropagates `d_output` (gradient w.r.t. the reconstruction) and an
    /// optional gradient on the shrunk attention weights.
    pub(crate) fn backward(&self, pass: &ForwardPass, d_output: &Maps, d_shrunk: Option<&Array2<f64>>) -> Grads {
        let mut g = Grads::zeros(&self.arch);
        let p = &self.params;

        let mut d = d_output.clone();
        d.data.zip_mut_with(&pass.output.data, |g, &o| *g *= o * (1.0 - o));
        let last = p.decoder.len() - 1;
        for j in (0..=last).rev() {
            let input = &pass.dec_in[j];
            let mut dx = p.decoder[j]
                .backward(input, &d, &mut g.decoder[j], true)
                .unwrap();
            // every decoder input came out of a ReLU
            dx.data.zip_mut_with(&input.data, |g, &v| {
                if v <= 0.0 {
                    *g = 0.0
                }
            });
            d = dx;
        }
        let d_fc_out = d.to_rows();
        let d_code = p.decoder_fc.backward(&pass.repair.output, &d_fc_out, &mut g.decoder_fc);

        let (dz_repair, d_read) = pass.repair.backward(&p.repair, &d_code, &mut g.repair);
        let (dz_addr, d_mem) = pass.addressing.backward(&p.memory, &d_read, d_shrunk);
        g.memory = d_mem;
        let dz = dz_repair + dz_addr;

        let d_flat = p.encoder_fc.backward(&pass.flat, &dz, &mut g.encoder_fc);
        let top = pass.enc_out.last().unwrap();
        let mut d = Maps::from_rows(&d_flat, top.channels(), top.height, top.width);
        for i in (0..p.encoder.len()).rev() {
            d.data.zip_mut_with(&pass.enc_out[i].data, |g, &v| {
                if v <= 0.0 {
                    *g *= LEAKY_SLOPE
                }
            });
            let input_dims = if i == 0 {
                pass.input_dims
            } else {
                let m = &pass.enc_out[i - 1];
                (m.batch, m.height, m.width)
            };
            match p.encoder[i].backward(input_dims, &pass.enc_cols[i], &d, &mut g.encoder[i], i > 0) {
                Some(dx) => d = dx,
                None => break,
            }
        }
        g
    }

    /// Reconstructs a batch of patches.
    pub fn reconstruct_patches(&self, patches: &[ArrayView3<f64>]) -> Result<Vec<Array3<f64>>> {
        let x = Maps::from_samples(patches)?;
        let pass = self.forward(&x)?;
        Ok((0..x.batch).map(|b| pass.output.sample(b)).collect())
    }

    /// Tiles the image into non-overlapping patches, reconstructs each one
    /// and stitches the results.
    pub fn reconstruct_image(&self, image: &Image) -> Result<Image> {
        let p = self.arch.patch_size;
        self.reconstruct_tiled(image, p)
    }

    /// Like [`CmaAe::reconstruct_image`] but with overlapping tiles placed
    /// every `stride` pixels; overlapping predictions are averaged.
    pub fn reconstruct_image_overlapped(&self, image: &Image, stride: usize) -> Result<Image> {
        let p = self.arch.patch_size;
        if stride == 0 || stride > p || p % stride != 0 {
            return Err(Error::Config(format!(
                "overlap stride {stride} must divide the patch size {p}"
            )));
        }
        self.reconstruct_tiled(image, stride)
    }

    fn reconstruct_tiled(&self, image: &Image, stride: usize) -> Result<Image> {
        let p = self.arch.patch_size;
        let (h, w) = (image.height(), image.width());
        if h % p != 0 || w % p != 0 || h == 0 || w == 0 {
            return Err(Error::ResizeRequired {
                height: h,
                width: w,
                patch: p,
            });
        }
        if image.channels() != self.arch.in_channels {
            return Err(Error::dim(
                format!("{} channels", self.arch.in_channels),
                format!("{} channels", image.channels()),
            ));
        }
        let src = image.data().mapv(f64::from);
        let mut acc = Array3::<f64>::zeros(src.dim());
        let mut count = Array3::<f64>::zeros(src.dim());
        let positions: Vec<(usize, usize)> = (0..=(h - p) / stride)
            .flat_map(|ty| (0..=(w - p) / stride).map(move |tx| (ty * stride, tx * stride)))
            .collect();
        const CHUNK: usize = 16;
        for chunk in positions.chunks(CHUNK) {
            let views: Vec<_> = chunk
                .iter()
                .map(|&(y, x)| src.slice(ndarray::s![.., y..y + p, x..x + p]))
                .collect();
            let outs = self.reconstruct_patches(&views)?;
            for (&(y, x), out) in chunk.iter().zip(outs) {
                let mut a = acc.slice_mut(ndarray::s![.., y..y + p, x..x + p]);
                a += &out;
                count
                    .slice_mut(ndarray::s![.., y..y + p, x..x + p])
                    .mapv_inplace(|c| c + 1.0);
            }
        }
        let out = (&acc / &count).mapv(|v| v.clamp(0.0, 1.0) as f32);
        Ok(Image::new(out))
    }
}
