//! Run configuration, read from TOML.

use std::path::{Path, PathBuf};

use cmaae_core::model::ArchConfig;
use cmaae_core::synthesis::{DefectSpec, GaagaConfig, Pattern, TextureSpec};
use cmaae_core::training::TrainConfig;
use cmaae_core::RepairMode;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ToolkitError};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    /// Folders written by `cmaae generate`.
    #[default]
    Synthetic,
    /// `<category>/{train,test,ground_truth}` as distributed by MVTec-AD.
    Mvtec,
    /// `Class<k>/{Train,Test}` with `Label/` subfolders, as in DAGM 2007.
    Dagm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub root: PathBuf,
    pub layout: Layout,
    /// MVTec category or DAGM class folder; unused for synthetic data.
    pub category: Option<String>,
    /// Every image is resized to `image_size x image_size`.
    pub image_size: usize,
    /// Skip defect images without a mask instead of failing.
    pub allow_maskless: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: PathBuf::from("data"),
            layout: Layout::Synthetic,
            category: None,
            image_size: 512,
            allow_maskless: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateConfig {
    pub texture: TextureSpec,
    pub defect: DefectSpec,
    pub train_good: usize,
    pub test_good: usize,
    pub test_defect: usize,
    /// Artificial negatives written to `train/synthetic` per normal image.
    pub augment_per_image: usize,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            texture: TextureSpec {
                pattern: Pattern::Stripes,
                period: 16.0,
                orientation: 0.0,
                noise_sigma: 0.03,
                height: 256,
                width: 256,
                pattern_seed: 0,
                random_phase: false,
                brightness_jitter: 0.0,
            },
            defect: DefectSpec::default(),
            train_good: 40,
            test_good: 20,
            test_defect: 20,
            augment_per_image: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Artificial negatives generated in memory when the dataset has none.
    pub samples: usize,
    /// Folder of natural texture images; a procedural pool is used when unset.
    pub natural_dir: Option<PathBuf>,
    pub natural_count: usize,
    pub gaaga: GaagaConfig,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            samples: 80,
            natural_dir: None,
            natural_count: 8,
            gaaga: GaagaConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Scoring {
    /// Multi-scale feature residual.
    #[default]
    Msfr,
    /// Channel mean of the absolute pixel residual.
    Pixel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub scales: Vec<usize>,
    pub scoring: Scoring,
    /// Overlapping reconstruction with this tile stride; off when unset.
    pub overlap_stride: Option<usize>,
    pub roc_csv: bool,
    /// Write a score map PNG for every test image.
    pub save_maps: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            scales: vec![1, 2, 3],
            scoring: Scoring::Msfr,
            overlap_stride: None,
            roc_csv: false,
            save_maps: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Seed for data generation and augmentation.
    #[serde(default)]
    pub seed: u64,
    /// Directory receiving checkpoints, traces and reports.
    #[serde(default = "default_output")]
    pub output: PathBuf,
    /// Resume training from checkpoints found in `output`.
    #[serde(default)]
    pub resume: bool,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub generate: GenerateConfig,
    #[serde(default)]
    pub arch: ArchConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_output() -> PathBuf {
    PathBuf::from("runs/default")
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            output: default_output(),
            resume: false,
            data: DataConfig::default(),
            generate: GenerateConfig::default(),
            arch: ArchConfig::default(),
            train: TrainConfig::default(),
            augment: AugmentConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Model variants compared in ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// Gated repair, two stages, feature-residual scoring.
    Full,
    NoStage2,
    Cat,
    Mam,
    NoMsfr,
}

impl std::str::FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "full" | "cmam" => Ablation::Full,
            "no-stage2" => Ablation::NoStage2,
            "cat" => Ablation::Cat,
            "mam" => Ablation::Mam,
            "no-msfr" => Ablation::NoMsfr,
            _ => return Err(format!("unknown ablation `{s}`")),
        })
    }
}

/// Command-line overrides applied after parsing.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub t1: Option<usize>,
    pub t2: Option<usize>,
    pub seed: Option<u64>,
    pub ablation: Option<Ablation>,
    pub output: Option<PathBuf>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ToolkitError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ToolkitError::io(path, e))?;
        RunConfig::parse(&text).map_err(|e| match e {
            ToolkitError::Config(m) => ToolkitError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(t1) = o.t1 {
            self.train.t1 = t1;
        }
        if let Some(t2) = o.t2 {
            self.train.t2 = t2;
        }
        if let Some(seed) = o.seed {
            self.seed = seed;
            self.train.seed = seed;
        }
        if let Some(out) = &o.output {
            self.output = out.clone();
        }
        match o.ablation {
            None | Some(Ablation::Full) => {}
            Some(Ablation::NoStage2) => self.train.use_stage2 = false,
            Some(Ablation::Cat) => self.arch.repair = RepairMode::Concat,
            Some(Ablation::Mam) => self.arch.repair = RepairMode::MemoryOnly,
            Some(Ablation::NoMsfr) => self.eval.scoring = Scoring::Pixel,
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(ToolkitError::Config(format!(
                "unsupported schema_version {}, expected {SCHEMA_VERSION}",
                self.schema_version
            )));
        }
        self.arch.validate()?;
        self.train.validate()?;
        self.augment.gaaga.validate()?;
        self.generate.texture.validate()?;
        self.generate.defect.validate()?;
        cmaae_core::segmentation::validate_scales(&self.arch, &self.eval.scales)?;
        let p = self.arch.patch_size;
        let size = self.data.image_size;
        if size == 0 || size % p != 0 {
            return Err(ToolkitError::Config(format!(
                "image_size {size} is not a multiple of the patch size {p}"
            )));
        }
        if let Some(s) = self.eval.overlap_stride {
            if s == 0 || p % s != 0 {
                return Err(ToolkitError::Config(format!(
                    "overlap_stride {s} must divide the patch size {p}"
                )));
            }
        }
        if self.train.use_stage2 && self.train.t2 > 0 && size < self.augment.gaaga.min_image_side() {
            return Err(ToolkitError::Config(format!(
                "image_size {size} is too small for {}-pixel pastes (needs {})",
                self.augment.gaaga.paste_size,
                self.augment.gaaga.min_image_side()
            )));
        }
        if self.data.layout != Layout::Synthetic && self.data.category.is_none() {
            return Err(ToolkitError::Config("data.category is required for mvtec and dagm layouts".into()));
        }
        Ok(())
    }
}
