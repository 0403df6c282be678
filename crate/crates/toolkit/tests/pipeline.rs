use std::path::Path;

use cmaae_core::synthesis::{GaagaConfig, TextureSpec};
use cmaae_core::{checkpoint, ArchConfig, LayerSpec, Stage};
use cmaae_toolkit::commands::{cmd_eval, cmd_generate, cmd_infer, cmd_train, MODEL_CHECKPOINT, STAGE1_CHECKPOINT};
use cmaae_toolkit::dataset::{Manifest, MANIFEST_FILE};
use cmaae_toolkit::{Ablation, Overrides, RunConfig};

/// Small enough that a full generate/train/eval cycle takes well under a
/// second.
fn tiny_config(root: &Path) -> RunConfig {
    let mut cfg = RunConfig {
        seed: 7,
        output: root.join("run"),
        ..RunConfig::default()
    };
    cfg.data.root = root.join("data");
    cfg.data.image_size = 64;
    cfg.generate.texture = TextureSpec {
        noise_sigma: 0.02,
        random_phase: true,
        ..TextureSpec::stripes(8.0, 64)
    };
    cfg.generate.train_good = 3;
    cfg.generate.test_good = 2;
    cfg.generate.test_defect = 2;
    cfg.arch = ArchConfig {
        patch_size: 16,
        layers: vec![
            LayerSpec::new(4, 2, 2),
            LayerSpec::new(3, 1, 2),
            LayerSpec::new(4, 2, 3),
            LayerSpec::new(4, 2, 3),
        ],
        latent_dim: 4,
        memory_items: 3,
        ..ArchConfig::default()
    };
    cfg.train.t1 = 4;
    cfg.train.t2 = 3;
    cfg.train.batch_size = 2;
    cfg.train.learning_rate = 1e-3;
    cfg.augment.samples = 3;
    cfg.augment.natural_count = 2;
    cfg.augment.gaaga = GaagaConfig {
        paste_size: 32,
        ..GaagaConfig::default()
    };
    cfg.eval.scales = vec![1, 2, 3];
    cfg.validate().unwrap();
    cfg
}

fn run_all(root: &Path) -> (RunConfig, String, String) {
    let cfg = tiny_config(root);
    cmd_generate(&cfg).unwrap();
    cmd_train(&cfg).unwrap();
    cmd_eval(&cfg, None).unwrap();
    let manifest = std::fs::read_to_string(cfg.data.root.join(MANIFEST_FILE)).unwrap();
    let report = std::fs::read_to_string(cfg.output.join("eval_report.json")).unwrap();
    (cfg, manifest, report)
}

#[test]
fn full_cycle_writes_expected_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, manifest, _) = run_all(dir.path());
    let m = Manifest::parse(&manifest).unwrap();
    assert_eq!(m.entries.len(), 7);
    for name in [
        "stage1.ckpt",
        "stage2.ckpt",
        "model.ckpt",
        "loss_stage1.csv",
        "loss_stage2.csv",
        "train_summary.json",
        "eval_report.txt",
    ] {
        assert!(cfg.output.join(name).is_file(), "{name} missing");
    }
    let trace = std::fs::read_to_string(cfg.output.join("loss_stage1.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 4);

    let bytes = std::fs::read(cfg.output.join(MODEL_CHECKPOINT)).unwrap();
    let (model, _) = checkpoint::decode(&bytes).unwrap();
    assert_eq!(model.stage, Stage::Stage2Complete);
    let (s1, _) = checkpoint::decode(&std::fs::read(cfg.output.join(STAGE1_CHECKPOINT)).unwrap()).unwrap();
    assert_eq!(s1.params.memory.to_bytes(), model.params.memory.to_bytes());

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(cfg.output.join("eval_report.json")).unwrap()).unwrap();
    let auc = report["report"]["pixel_auroc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auc));
    assert_eq!(report["report"]["images"].as_array().unwrap().len(), 4);
}

#[test]
fn runs_are_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (cfg_a, manifest_a, report_a) = run_all(a.path());
    let (cfg_b, manifest_b, report_b) = run_all(b.path());
    assert_eq!(manifest_a, manifest_b);
    assert_eq!(report_a, report_b);
    for name in ["model.ckpt", "loss_stage2.csv"] {
        assert_eq!(
            std::fs::read(cfg_a.output.join(name)).unwrap(),
            std::fs::read(cfg_b.output.join(name)).unwrap()
        );
    }
    let img = "test/defect/defect_0000.png";
    assert_eq!(
        std::fs::read(cfg_a.data.root.join(img)).unwrap(),
        std::fs::read(cfg_b.data.root.join(img)).unwrap()
    );
}

#[test]
fn zero_steps_give_an_untrained_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cmd_generate(&cfg).unwrap();
    cfg.apply(&Overrides { t1: Some(0), t2: Some(0), ..Overrides::default() }).unwrap();
    let s = cmd_train(&cfg).unwrap();
    assert_eq!((s.stage, s.stage1_steps, s.stage2_steps), (Stage::Initialized, 0, 0));
    for name in ["loss_stage1.csv", "loss_stage2.csv"] {
        let t = std::fs::read_to_string(cfg.output.join(name)).unwrap();
        assert_eq!(t.lines().count(), 1, "{name} should hold only a header");
    }
    assert!(!cfg.output.join(STAGE1_CHECKPOINT).exists());
    // An untrained model can still be evaluated.
    let r = cmd_eval(&cfg, None).unwrap();
    assert_eq!(r.stage, Stage::Initialized);
}

#[test]
fn stage2_without_stage1_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cmd_generate(&cfg).unwrap();
    cfg.train.t1 = 0;
    let e = cmd_train(&cfg).unwrap_err();
    assert_eq!(e.exit_code(), 2);
}

#[test]
fn no_stage2_ablation_stops_after_stage1() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cmd_generate(&cfg).unwrap();
    cfg.apply(&Overrides { ablation: Some(Ablation::NoStage2), ..Overrides::default() }).unwrap();
    let s = cmd_train(&cfg).unwrap();
    assert_eq!(s.stage, Stage::Stage1Complete);
    assert_eq!(s.stage2_steps, 0);
}

#[test]
fn resume_continues_from_stage1() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cmd_generate(&cfg).unwrap();
    cfg.train.use_stage2 = false;
    cmd_train(&cfg).unwrap();
    let s1 = std::fs::read(cfg.output.join(STAGE1_CHECKPOINT)).unwrap();
    cfg.train.use_stage2 = true;
    cfg.resume = true;
    let s = cmd_train(&cfg).unwrap();
    assert_eq!((s.stage, s.stage1_steps, s.stage2_steps), (Stage::Stage2Complete, 0, 3));
    assert_eq!(std::fs::read(cfg.output.join(STAGE1_CHECKPOINT)).unwrap(), s1);
}

#[test]
fn infer_resizes_odd_inputs_and_writes_scores() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, _, _) = run_all(dir.path());
    let src = cfg.data.root.join("test/defect/defect_0001.png");
    let s = cmd_infer(&cfg, &src, None).unwrap();
    assert!(!s.resized);
    assert_eq!(s.original_size, (64, 64));
    let raw = std::fs::read(cfg.output.join("infer/defect_0001_score.f64")).unwrap();
    assert_eq!(raw.len(), 64 * 64 * 8);
    let max = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(max, s.image_score);

    let img = image::GrayImage::from_fn(50, 70, |x, y| image::Luma([((x * 3 + y) % 256) as u8]));
    let odd = dir.path().join("odd.png");
    img.save(&odd).unwrap();
    let s = cmd_infer(&cfg, &odd, None).unwrap();
    assert!(s.resized);
    assert_eq!(s.original_size, (70, 50));
    let note = std::fs::read_to_string(cfg.output.join("infer/odd_score.txt")).unwrap();
    assert!(note.contains("resized to 64x64"));
}

#[test]
fn corrupt_checkpoint_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    cmd_generate(&cfg).unwrap();
    std::fs::create_dir_all(&cfg.output).unwrap();
    let bad = cfg.output.join(MODEL_CHECKPOINT);
    std::fs::write(&bad, b"CMAAECK\0garbage").unwrap();
    assert_eq!(cmd_eval(&cfg, None).unwrap_err().exit_code(), 3);
    assert_eq!(cmd_eval(&cfg, Some(&dir.path().join("missing.ckpt"))).unwrap_err().exit_code(), 1);
}
