//! The `generate`, `train`, `infer` and `eval` commands.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use cmaae_core::checkpoint;
use cmaae_core::evaluation::{evaluate, roc_curve, EvalReport, Scored};
use cmaae_core::segmentation::{msfr, pixel_residual, ScoreMap};
use cmaae_core::synthesis::{self, AnomalySample, NaturalPool};
use cmaae_core::training::{train_stage1, train_stage2, StepLoss, TrainReport};
use cmaae_core::{CmaAe, Image, Stage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{EvalConfig, Layout, RunConfig, Scoring};
use crate::dataset::{self, Manifest, ManifestEntry, Split, MANIFEST_FILE};
use crate::error::{Result, ToolkitError};

pub const STAGE1_CHECKPOINT: &str = "stage1.ckpt";
pub const STAGE2_CHECKPOINT: &str = "stage2.ckpt";
pub const MODEL_CHECKPOINT: &str = "model.ckpt";

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn natural_pool(cfg: &RunConfig, channels: usize) -> Result<NaturalPool> {
    let side = cfg.augment.gaaga.paste_size;
    match &cfg.augment.natural_dir {
        Some(dir) => {
            let mut images = Vec::new();
            let rd = std::fs::read_dir(dir).map_err(|e| ToolkitError::io(dir, e))?;
            let mut paths: Vec<PathBuf> = rd.filter_map(|e| e.ok().map(|e| e.path())).collect();
            paths.sort();
            for p in paths.iter().filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))) {
                images.push(dataset::load_image(p, channels, None)?);
            }
            Ok(NaturalPool::new(images, side)?)
        }
        None => Ok(NaturalPool::procedural(cfg.augment.natural_count.max(1), side, cfg.seed ^ 0x4e41_5455)?),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerateSummary {
    pub images: usize,
    pub masks: usize,
}

/// Writes a synthetic texture dataset (and optional artificial negatives)
/// under `data.root`.
pub fn cmd_generate(cfg: &RunConfig) -> Result<GenerateSummary> {
    cfg.validate()?;
    if cfg.data.layout != Layout::Synthetic {
        return Err(ToolkitError::Config("generate writes the synthetic layout only".into()));
    }
    let root = &cfg.data.root;
    let g = &cfg.generate;
    let mut entries = Vec::new();
    let mut masks = 0;

    let mut rng = rng_for(cfg.seed, 1);
    let mut train = Vec::new();
    for k in 0..g.train_good {
        let img = synthesis::synth_texture(&g.texture, &mut rng)?;
        let rel = format!("train/good/train_{k:04}.png");
        dataset::write_atomic(&root.join(&rel), &dataset::encode_image(&img)?)?;
        entries.push(ManifestEntry { split: Split::TrainGood, image: rel.clone(), mask: None, source: None });
        train.push((rel, img));
    }
    let mut rng = rng_for(cfg.seed, 2);
    for k in 0..g.test_good {
        let img = synthesis::synth_texture(&g.texture, &mut rng)?;
        let rel = format!("test/good/good_{k:04}.png");
        dataset::write_atomic(&root.join(&rel), &dataset::encode_image(&img)?)?;
        entries.push(ManifestEntry { split: Split::TestGood, image: rel, mask: None, source: None });
    }
    let mut rng = rng_for(cfg.seed, 3);
    for k in 0..g.test_defect {
        let clean = synthesis::synth_texture(&g.texture, &mut rng)?;
        let (img, mask) = synthesis::inject_synthetic_defect(&clean, &g.defect, &mut rng)?;
        let rel = format!("test/defect/defect_{k:04}.png");
        let mrel = format!("ground_truth/defect/defect_{k:04}_mask.png");
        dataset::write_atomic(&root.join(&rel), &dataset::encode_image(&img)?)?;
        dataset::write_atomic(&root.join(&mrel), &dataset::encode_mask(&mask)?)?;
        masks += 1;
        entries.push(ManifestEntry { split: Split::TestDefect, image: rel, mask: Some(mrel), source: None });
    }
    if g.augment_per_image > 0 && !train.is_empty() {
        let pool = natural_pool(cfg, 1)?;
        let mut rng = rng_for(cfg.seed, 4);
        let size = cfg.data.image_size;
        let mut n = 0;
        for (src, img) in &train {
            // negatives are produced at the training resolution
            let img = img.resize_bilinear(size, size);
            for _ in 0..g.augment_per_image {
                let s = synthesis::generate(&img, &pool, &cfg.augment.gaaga, &mut rng)?;
                let rel = format!("train/synthetic/syn_{n:04}.png");
                let mrel = format!("train/synthetic/syn_{n:04}_mask.png");
                dataset::write_atomic(&root.join(&rel), &dataset::encode_image(&s.anomalous)?)?;
                dataset::write_atomic(&root.join(&mrel), &dataset::encode_mask(&s.mask)?)?;
                masks += 1;
                entries.push(ManifestEntry {
                    split: Split::TrainSynthetic,
                    image: rel,
                    mask: Some(mrel),
                    source: Some(src.clone()),
                });
                n += 1;
            }
        }
    }
    let images = entries.len();
    let manifest = Manifest {
        schema_version: crate::config::SCHEMA_VERSION,
        seed: cfg.seed,
        texture: g.texture.clone(),
        entries,
    };
    dataset::write_atomic(&root.join(MANIFEST_FILE), manifest.to_json().as_bytes())?;
    Ok(GenerateSummary { images, masks })
}

fn save_checkpoint(path: &Path, model: &CmaAe, cfg: &RunConfig) -> Result<()> {
    let mut meta = BTreeMap::new();
    meta.insert("train".to_string(), serde_json::to_string(&cfg.train).expect("serializes"));
    dataset::write_atomic(path, &checkpoint::encode(model, &meta))
}

pub fn load_checkpoint(path: &Path) -> Result<CmaAe> {
    let bytes = std::fs::read(path).map_err(|e| ToolkitError::io(path, e))?;
    let (model, _) = checkpoint::decode(&bytes).map_err(|e| ToolkitError::Data(format!("{}: {e}", path.display())))?;
    Ok(model)
}

fn trace_csv(losses: &[StepLoss]) -> String {
    TrainReport {
        stage: Stage::Initialized,
        losses: losses.to_vec(),
        seconds: 0.0,
    }
    .to_csv()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub stage: Stage,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub final_loss: Option<f64>,
    pub checkpoint: String,
}

/// Builds artificial negatives for stage 2 from the normal images.
pub fn synthesize_negatives(cfg: &RunConfig, train: &[Image]) -> Result<Vec<AnomalySample>> {
    let pool = natural_pool(cfg, cfg.arch.in_channels)?;
    let mut rng = rng_for(cfg.seed, 5);
    (0..cfg.augment.samples)
        .map(|k| Ok(synthesis::generate(&train[k % train.len()], &pool, &cfg.augment.gaaga, &mut rng)?))
        .collect()
}

/// Runs stage 1 and stage 2 as configured and writes checkpoints and loss
/// traces into `output`.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let out = &cfg.output;
    let tc = &cfg.train;
    let want_stage2 = tc.use_stage2 && tc.t2 > 0;

    let mut resumed: Option<CmaAe> = None;
    if cfg.resume {
        for name in [STAGE2_CHECKPOINT, STAGE1_CHECKPOINT] {
            let p = out.join(name);
            if p.is_file() {
                let m = load_checkpoint(&p)?;
                if m.arch != cfg.arch {
                    return Err(ToolkitError::Config(format!(
                        "{} was trained with a different architecture",
                        p.display()
                    )));
                }
                log::info!("resuming from {}", p.display());
                resumed = Some(m);
                break;
            }
        }
    }

    let train: Vec<Image> = dataset::load_train(&cfg.data, cfg.arch.in_channels)?
        .into_iter()
        .map(|(_, i)| i)
        .collect();
    let mut model = match resumed {
        Some(m) => m,
        None => CmaAe::new(cfg.arch.clone(), tc.seed)?,
    };

    let mut stage1_steps = 0;
    let mut final_loss = None;
    if model.stage == Stage::Initialized && tc.t1 > 0 {
        let r = train_stage1(&mut model, &train, tc)?;
        log::info!("stage 1 finished in {:.1}s", r.seconds);
        stage1_steps = r.losses.len();
        final_loss = r.losses.last().map(|l| l.total);
        dataset::write_atomic(&out.join("loss_stage1.csv"), trace_csv(&r.losses).as_bytes())?;
        save_checkpoint(&out.join(STAGE1_CHECKPOINT), &model, cfg)?;
    } else if model.stage == Stage::Initialized {
        dataset::write_atomic(&out.join("loss_stage1.csv"), trace_csv(&[]).as_bytes())?;
    }

    let mut stage2_steps = 0;
    if want_stage2 && model.stage == Stage::Stage1Complete {
        let mut samples = dataset::load_synthetic(&cfg.data, cfg.arch.in_channels)?;
        if samples.is_empty() {
            samples = synthesize_negatives(cfg, &train)?;
        }
        let r = train_stage2(&mut model, &samples, tc)?;
        log::info!("stage 2 finished in {:.1}s", r.seconds);
        stage2_steps = r.losses.len();
        final_loss = r.losses.last().map(|l| l.total);
        dataset::write_atomic(&out.join("loss_stage2.csv"), trace_csv(&r.losses).as_bytes())?;
        save_checkpoint(&out.join(STAGE2_CHECKPOINT), &model, cfg)?;
    } else if want_stage2 && model.stage == Stage::Initialized {
        return Err(ToolkitError::Config("stage 2 needs stage 1 (set t1 > 0)".into()));
    } else if model.stage != Stage::Stage2Complete {
        dataset::write_atomic(&out.join("loss_stage2.csv"), trace_csv(&[]).as_bytes())?;
    }

    let ckpt = out.join(MODEL_CHECKPOINT);
    save_checkpoint(&ckpt, &model, cfg)?;
    let summary = TrainSummary {
        stage: model.stage,
        stage1_steps,
        stage2_steps,
        final_loss,
        checkpoint: MODEL_CHECKPOINT.to_string(),
    };
    let json = serde_json::to_string_pretty(&summary).expect("serializes") + "\n";
    dataset::write_atomic(&out.join("train_summary.json"), json.as_bytes())?;
    Ok(summary)
}

/// Reconstruction and anomaly scores of one image.
pub fn score_image(model: &CmaAe, image: &Image, eval: &EvalConfig) -> Result<(Image, ScoreMap)> {
    let recon = match eval.overlap_stride {
        Some(s) => model.reconstruct_image_overlapped(image, s)?,
        None => model.reconstruct_image(image)?,
    };
    let score = match eval.scoring {
        Scoring::Msfr => msfr(model, image, &recon, &eval.scales)?,
        Scoring::Pixel => pixel_residual(image, &recon)?,
    };
    Ok((recon, score))
}

fn checkpoint_path(cfg: &RunConfig, explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.output.join(MODEL_CHECKPOINT))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferSummary {
    pub image: String,
    /// Maximum of the score map.
    pub image_score: f64,
    pub original_size: (usize, usize),
    pub resized: bool,
}

fn score_sidecar(score: &ScoreMap, lo: f64, hi: f64, note: &str) -> String {
    let mut s = String::new();
    writeln!(s, "height {}", score.height()).unwrap();
    writeln!(s, "width {}", score.width()).unwrap();
    writeln!(s, "min {lo:e}").unwrap();
    writeln!(s, "max {hi:e}").unwrap();
    if !note.is_empty() {
        writeln!(s, "note {note}").unwrap();
    }
    s
}

fn raw_scores(score: &ScoreMap) -> Vec<u8> {
    score.data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn write_score_files(dir: &Path, stem: &str, score: &ScoreMap, note: &str) -> Result<()> {
    let (png, lo, hi) = dataset::encode_score_map(score)?;
    dataset::write_atomic(&dir.join(format!("{stem}_score.png")), &png)?;
    dataset::write_atomic(
        &dir.join(format!("{stem}_score.txt")),
        score_sidecar(score, lo, hi, note).as_bytes(),
    )?;
    dataset::write_atomic(&dir.join(format!("{stem}_score.f64")), &raw_scores(score))
}

/// Reconstructs and scores a single image; outputs go to `output/infer`.
pub fn cmd_infer(cfg: &RunConfig, image_path: &Path, ckpt: Option<&Path>) -> Result<InferSummary> {
    cfg.validate()?;
    let model = load_checkpoint(&checkpoint_path(cfg, ckpt))?;
    let original = dataset::load_image(image_path, model.arch.in_channels, None)?;
    let (h, w) = (original.height(), original.width());
    let p = model.arch.patch_size;
    let resized = h % p != 0 || w % p != 0;
    let image = if resized {
        original.resize_bilinear(cfg.data.image_size, cfg.data.image_size)
    } else {
        original
    };
    let (recon, score) = score_image(&model, &image, &cfg.eval)?;
    let dir = cfg.output.join("infer");
    let stem = image_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    dataset::write_atomic(&dir.join(format!("{stem}_recon.png")), &dataset::encode_image(&recon)?)?;
    let note = if resized {
        format!("input of {h}x{w} resized to {}x{}", image.height(), image.width())
    } else {
        String::new()
    };
    write_score_files(&dir, &stem, &score, &note)?;
    Ok(InferSummary {
        image: image_path.display().to_string(),
        image_score: score.max(),
        original_size: (h, w),
        resized,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub category: String,
    pub checkpoint: String,
    pub checkpoint_sha256: String,
    pub stage: Stage,
    pub repair: cmaae_core::RepairMode,
    pub scoring: Scoring,
    pub scales: Vec<usize>,
    pub image_size: usize,
    pub skipped_maskless: Vec<String>,
    pub report: EvalReport,
}

impl RunReport {
    pub fn to_text(&self) -> String {
        format!(
            "category: {}\ncheckpoint: {} ({})\nstage: {}\nrepair: {:?}\nscoring: {:?} scales {:?}\n{}",
            self.category,
            self.checkpoint,
            &self.checkpoint_sha256[..16],
            self.stage,
            self.repair,
            self.scoring,
            self.scales,
            self.report.to_text()
        )
    }
}

/// Scores every test image and writes `eval_report.json` and
/// `eval_report.txt` (plus ROC points and score maps when enabled).
pub fn cmd_eval(cfg: &RunConfig, ckpt: Option<&Path>) -> Result<RunReport> {
    cfg.validate()?;
    let path = checkpoint_path(cfg, ckpt);
    let bytes = std::fs::read(&path).map_err(|e| ToolkitError::io(&path, e))?;
    let (model, _) = checkpoint::decode(&bytes).map_err(|e| ToolkitError::Data(format!("{}: {e}", path.display())))?;
    let test = dataset::load_test(&cfg.data, model.arch.in_channels)?;
    let mut scores = Vec::with_capacity(test.items.len());
    for item in &test.items {
        let (_, s) = score_image(&model, &item.image, &cfg.eval)?;
        scores.push(s);
    }
    let scored: Vec<Scored> = test
        .items
        .iter()
        .zip(&scores)
        .map(|(it, s)| Scored { name: &it.name, score: s, mask: &it.mask })
        .collect();
    let report = evaluate(&scored)?;
    let out = &cfg.output;
    if cfg.eval.roc_csv {
        let mut all_s = Vec::new();
        let mut all_l = Vec::new();
        for sc in &scored {
            all_s.extend(sc.score.data.iter().copied());
            all_l.extend(sc.mask.data().iter().copied());
        }
        let mut csv = String::from("fpr,tpr\n");
        for (f, t) in roc_curve(&all_s, &all_l)? {
            writeln!(csv, "{f},{t}").unwrap();
        }
        dataset::write_atomic(&out.join("roc.csv"), csv.as_bytes())?;
    }
    if cfg.eval.save_maps {
        let dir = out.join("maps");
        for (it, s) in test.items.iter().zip(&scores) {
            write_score_files(&dir, &it.name.replace('/', "_"), s, "")?;
        }
    }
    let run = RunReport {
        category: cfg.data.category.clone().unwrap_or_else(|| "synthetic".into()),
        checkpoint: path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        checkpoint_sha256: format!("{:x}", Sha256::digest(&bytes)),
        stage: model.stage,
        repair: model.arch.repair,
        scoring: cfg.eval.scoring,
        scales: cfg.eval.scales.clone(),
        image_size: cfg.data.image_size,
        skipped_maskless: test.skipped,
        report,
    };
    let json = serde_json::to_string_pretty(&run).expect("serializes") + "\n";
    dataset::write_atomic(&out.join("eval_report.json"), json.as_bytes())?;
    dataset::write_atomic(&out.join("eval_report.txt"), run.to_text().as_bytes())?;
    Ok(run)
}
