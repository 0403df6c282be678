//! Clear memory-augmented autoencoder (CMA-AE) for unsupervised surface
//! defect detection.
//!
//! The crate covers the full pipeline: artificial anomaly synthesis,
//! the memory-augmented autoencoder with forget/input gated feature repair,
//! two-stage training, multi-scale feature residual scoring and pixel-level
//! AuROC evaluation.

pub mod checkpoint;
pub mod error;
pub mod evaluation;
pub mod frm;
pub mod image;
pub mod memory;
pub mod model;
pub mod nn;
pub mod segmentation;
pub mod synthesis;
pub mod training;

pub use error::{Error, Result};
pub use frm::{frm, FrmUpdate, GateParams, Repair, RepairMode};
pub use image::{Image, Mask};
pub use memory::{
    cosine_attention, hard_shrink_renormalize, memory_read, AttentionWeights, MemoryBank,
    Renormalization,
};
pub use model::{ArchConfig, CmaAe, FeaturePyramid, LayerSpec, PatchTensor, Stage};
