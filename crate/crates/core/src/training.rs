//! Losses and the two-stage training procedure.
//!
//! Stage 1 fits encoder, decoder, memory and repair parameters to patches of
//! normal images. Stage 2 freezes the memory bank and trains the remaining
//! parameters to map artificial anomalies back to their clean source.

use std::time::Instant;

use ndarray::{s, Array2, Array3, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{CmaAe, Grads, Stage};
use crate::nn::Maps;
use crate::synthesis::AnomalySample;

/// Reconstruction target used in stage 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Stage2Target {
    /// The pre-paste image: the model learns to repair pasted regions.
    #[default]
    Clean,
    /// The anomalous image itself.
    Anomalous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the reconstruction term.
    pub w1: f64,
    /// Weight of the sparsity term.
    pub w2: f64,
    pub learning_rate: f64,
    /// Stage-2 learning rate; `learning_rate` is used when unset.
    pub stage2_learning_rate: Option<f64>,
    pub t1: usize,
    pub t2: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub use_stage2: bool,
    pub stage2_target: Stage2Target,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Emit a progress log line every this many steps (0 disables).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            w1: 50.0,
            w2: 0.01,
            learning_rate: 1e-4,
            stage2_learning_rate: None,
            t1: 20_000,
            t2: 10_000,
            batch_size: 32,
            seed: 0,
            use_stage2: true,
            stage2_target: Stage2Target::Clean,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            log_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        positive("w1", self.w1)?;
        positive("w2", self.w2)?;
        positive("learning_rate", self.learning_rate)?;
        if let Some(lr) = self.stage2_learning_rate {
            positive("stage2_learning_rate", lr)?;
        }
        positive("adam_eps", self.adam_eps)?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Loss components of one optimisation step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub rec: f64,
    pub sparse: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: Stage,
    pub losses: Vec<StepLoss>,
    pub seconds: f64,
}

impl TrainReport {
    /// CSV with header `step,l_rec,l_s,total`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,l_rec,l_s,total\n");
        for (i, l) in self.losses.iter().enumerate() {
            out.push_str(&format!("{},{},{},{}\n", i + 1, l.rec, l.sparse, l.total));
        }
        out
    }
}

/// Entropy of the shrunk attention weights summed over codes, with
/// `0 log 0 = 0`.
pub fn sparsity_loss(weights: &[ArrayView1<f64>]) -> Result<f64> {
    let mut total = 0.0;
    for w in weights {
        for &v in w.iter() {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::Validation(format!("attention weight {v} is negative")));
            }
            if v > 0.0 {
                total -= v * v.ln();
            }
        }
    }
    Ok(total)
}

/// Mean absolute difference over every element.
pub fn reconstruction_loss(x: &Array3<f64>, y: &Array3<f64>) -> Result<f64> {
    if x.dim() != y.dim() {
        return Err(Error::dim(format!("{:?}", x.dim()), format!("{:?}", y.dim())));
    }
    Ok(mean_abs(x.as_slice().unwrap(), y.as_slice().unwrap()))
}

/// Batch form of [`reconstruction_loss`].
pub fn batch_reconstruction_loss(x: &[Array3<f64>], y: &[Array3<f64>]) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::dim(format!("batch of {}", x.len()), y.len()));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (a, b) in x.iter().zip(y) {
        if a.dim() != b.dim() {
            return Err(Error::dim(format!("{:?}", a.dim()), format!("{:?}", b.dim())));
        }
        sum += a.iter().zip(b.iter()).map(|(p, q)| (p - q).abs()).sum::<f64>();
        count += a.len();
    }
    Ok(sum / count as f64)
}

fn mean_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).abs()).sum::<f64>() / a.len() as f64
}

pub fn stage1_total_loss(rec: f64, sparse: f64, cfg: &TrainConfig) -> f64 {
    cfg.w1 * rec + cfg.w2 * sparse
}

/// Forward and backward pass of the joint loss on one batch.
pub fn loss_and_grads(model: &CmaAe, input: &Maps, target: &Maps, cfg: &TrainConfig) -> Result<(StepLoss, Grads)> {
    if input.data.dim() != target.data.dim() {
        return Err(Error::dim(
            format!("{:?}", input.data.dim()),
            format!("{:?}", target.data.dim()),
        ));
    }
    let pass = model.forward(input)?;
    let out = pass.output.data.as_slice().unwrap();
    let tgt = target.data.as_slice().unwrap();
    let n = out.len() as f64;
    let rec = mean_abs(out, tgt);
    let shrunk = &pass.addressing.shrunk;
    let rows: Vec<_> = shrunk.outer_iter().collect();
    let sparse = sparsity_loss(&rows)?;
    let total = stage1_total_loss(rec, sparse, cfg);

    let mut d_out = pass.output.clone();
    let scale = cfg.w1 / n;
    d_out
        .data
        .zip_mut_with(&target.data, |o, &t| *o = scale * sign(*o - t));
    let d_shrunk: Array2<f64> = shrunk.mapv(|w| if w > 0.0 { -cfg.w2 * (w.ln() + 1.0) } else { 0.0 });
    let grads = model.backward(&pass, &d_out, Some(&d_shrunk));
    Ok((StepLoss { rec, sparse, total }, grads))
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Adam with bias correction and a constant learning rate.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig) -> Self {
        Adam {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Updates every unfrozen parameter tensor of `model`.
    pub fn step(&mut self, model: &mut CmaAe, grads: &Grads) {
        let include_memory = !model.params.memory.is_frozen();
        let g = grads.tensors(include_memory);
        let mut p = model.params.tensors_mut();
        assert_eq!(g.len(), p.len(), "gradient layout mismatch");
        if self.m.is_empty() {
            self.m = g.iter().map(|t| vec![0.0; t.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (k, ((_, param), grad)) in p.iter_mut().zip(g).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..param.len() {
                let gi = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                param[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

fn patch_of(img: &Image, y: usize, x: usize, size: usize) -> Array3<f64> {
    img.data()
        .slice(s![.., y..y + size, x..x + size])
        .mapv(f64::from)
}

fn check_images<'a>(model: &CmaAe, images: impl Iterator<Item = &'a Image>) -> Result<usize> {
    let p = model.arch.patch_size;
    let mut n = 0;
    for img in images {
        if img.height() < p || img.width() < p {
            return Err(Error::Data(format!(
                "training image of {}x{} is smaller than the {p}x{p} patch",
                img.height(),
                img.width()
            )));
        }
        if img.channels() != model.arch.in_channels {
            return Err(Error::Data(format!(
                "training image has {} channels, model expects {}",
                img.channels(),
                model.arch.in_channels
            )));
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Data("training set is empty".into()));
    }
    Ok(n)
}

/// Draws a batch of `(image index, y, x)` patch locations.
fn sample_locations(rng: &mut ChaCha8Rng, dims: &[(usize, usize)], patch: usize, batch: usize) -> Vec<(usize, usize, usize)> {
    (0..batch)
        .map(|_| {
            let i = rng.random_range(0..dims.len());
            let (h, w) = dims[i];
            let y = rng.random_range(0..=h - patch);
            let x = rng.random_range(0..=w - patch);
            (i, y, x)
        })
        .collect()
}

fn run_steps(
    model: &mut CmaAe,
    cfg: &TrainConfig,
    steps: usize,
    stage: &'static str,
    mut batch: impl FnMut(&mut ChaCha8Rng) -> (Vec<Array3<f64>>, Vec<Array3<f64>>),
    seed: u64,
) -> Result<Vec<StepLoss>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = Adam::new(cfg);
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let (inputs, targets) = batch(&mut rng);
        let iv: Vec<_> = inputs.iter().map(|a| a.view()).collect();
        let tv: Vec<_> = targets.iter().map(|a| a.view()).collect();
        let x = Maps::from_samples(&iv)?;
        let y = Maps::from_samples(&tv)?;
        let (loss, grads) = loss_and_grads(model, &x, &y, cfg)?;
        if !loss.total.is_finite() {
            return Err(Error::Divergence { stage, step });
        }
        adam.step(model, &grads);
        if cfg.log_every > 0 && (step + 1) % cfg.log_every == 0 {
            log::info!(
                "{stage} step {}/{steps}: l_rec {:.5} l_s {:.4} total {:.4}",
                step + 1,
                loss.rec,
                loss.sparse,
                loss.total
            );
        }
        losses.push(loss);
    }
    Ok(losses)
}

/// Trains on random patches of normal images; every parameter group,
/// including the memory bank, is updated.
pub fn train_stage1(model: &mut CmaAe, positives: &[Image], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    check_images(model, positives.iter())?;
    let start = Instant::now();
    let p = model.arch.patch_size;
    let dims: Vec<_> = positives.iter().map(|i| (i.height(), i.width())).collect();
    model.params.memory.unfreeze();
    let losses = run_steps(
        model,
        cfg,
        cfg.t1,
        "stage 1",
        |rng| {
            let locs = sample_locations(rng, &dims, p, cfg.batch_size);
            let patches: Vec<_> = locs
                .iter()
                .map(|&(i, y, x)| patch_of(&positives[i], y, x, p))
                .collect();
            (patches.clone(), patches)
        },
        cfg.seed,
    )?;
    model.stage = Stage::Stage1Complete;
    Ok(TrainReport {
        stage: Stage::Stage1Complete,
        losses,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Trains on artificial anomalies with the memory bank frozen.
pub fn train_stage2(model: &mut CmaAe, samples: &[AnomalySample], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if model.stage != Stage::Stage1Complete {
        return Err(Error::Ordering(format!(
            "stage 2 requires a stage1-complete model, found {}",
            model.stage
        )));
    }
    check_images(model, samples.iter().map(|s| &s.anomalous))?;
    let start = Instant::now();
    let p = model.arch.patch_size;
    let dims: Vec<_> = samples
        .iter()
        .map(|s| (s.anomalous.height(), s.anomalous.width()))
        .collect();
    model.params.memory.freeze();
    let stage2_cfg = TrainConfig {
        learning_rate: cfg.stage2_learning_rate.unwrap_or(cfg.learning_rate),
        ..cfg.clone()
    };
    let cfg = &stage2_cfg;
    let losses = run_steps(
        model,
        cfg,
        cfg.t2,
        "stage 2",
        |rng| {
            let locs = sample_locations(rng, &dims, p, cfg.batch_size);
            let inputs = locs
                .iter()
                .map(|&(i, y, x)| patch_of(&samples[i].anomalous, y, x, p))
                .collect();
            let targets = locs
                .iter()
                .map(|&(i, y, x)| {
                    let t = match cfg.stage2_target {
                        Stage2Target::Clean => &samples[i].clean,
                        Stage2Target::Anomalous => &samples[i].anomalous,
                    };
                    patch_of(t, y, x, p)
                })
                .collect();
            (inputs, targets)
        },
        cfg.seed.wrapping_add(0x5eed_0002),
    )?;
    model.stage = Stage::Stage2Complete;
    Ok(TrainReport {
        stage: Stage::Stage2Complete,
        losses,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Mean reconstruction loss of a fixed set of patches, without updates.
pub fn evaluate_reconstruction(model: &CmaAe, inputs: &[Array3<f64>], targets: &[Array3<f64>]) -> Result<f64> {
    let views: Vec<_> = inputs.iter().map(|a| a.view()).collect();
    let outs = model.reconstruct_patches(&views)?;
    batch_reconstruction_loss(&outs, targets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn sparsity_examples() {
        let one_hot = arr1(&[0.0, 1.0, 0.0]);
        assert_eq!(sparsity_loss(&[one_hot.view()]).unwrap(), 0.0);
        assert_eq!(sparsity_loss(&[one_hot.view(), one_hot.view()]).unwrap(), 0.0);
        let half = arr1(&[0.5, 0.5]);
        let l = sparsity_loss(&[half.view()]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(sparsity_loss(&[arr1(&[-0.1, 1.1]).view()]).is_err());
    }

    #[test]
    fn reconstruction_examples() {
        let x = Array3::from_shape_fn((1, 4, 4), |(_, y, x)| (y * 4 + x) as f64 / 20.0);
        assert_eq!(reconstruction_loss(&x, &x).unwrap(), 0.0);
        let y = &x + 0.1;
        let l = reconstruction_loss(&x, &y).unwrap();
        assert!((l - 0.1).abs() < 1e-12);
        assert_eq!(l, reconstruction_loss(&y, &x).unwrap());
        assert!(reconstruction_loss(&x, &Array3::zeros((1, 4, 3))).is_err());
    }

    #[test]
    fn total_loss_weights() {
        let cfg = TrainConfig::default();
        assert_eq!(stage1_total_loss(0.0, 0.0, &cfg), 0.0);
        assert!((stage1_total_loss(1.0, 1.0, &cfg) - 50.01).abs() < 1e-12);
        let base = stage1_total_loss(0.3, 0.2, &cfg);
        assert!((stage1_total_loss(0.6, 0.2, &cfg) - base - cfg.w1 * 0.3).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.w2 = 0.0;
        assert!(c.validate().is_err());
        let c = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
