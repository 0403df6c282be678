//! Replays the checked-in fuzz seeds through the same entry points as the
//! fuzz targets, so the corpora stay valid without a nightly toolchain.

use std::path::PathBuf;

use cmaae_core::checkpoint;
use cmaae_toolkit::dataset::{decode_image, Manifest};
use cmaae_toolkit::RunConfig;

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds in {}", dir.display());
    out
}

#[test]
fn checkpoint_seeds() {
    for (name, bytes) in seeds("checkpoint_decode") {
        let r = checkpoint::decode(&bytes);
        assert_eq!(r.is_ok(), !name.starts_with("truncated"), "{name}");
        if let Ok((model, meta)) = r {
            assert_eq!(checkpoint::encode(&model, &meta), bytes);
        }
    }
}

#[test]
fn config_seeds() {
    for (name, bytes) in seeds("config_parse") {
        let cfg = RunConfig::parse(std::str::from_utf8(&bytes).unwrap()).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }
}

#[test]
fn manifest_seeds() {
    for (name, bytes) in seeds("manifest_parse") {
        let m = Manifest::parse(std::str::from_utf8(&bytes).unwrap()).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert!(Manifest::parse(&m.to_json()).is_ok());
    }
}

#[test]
fn png_seeds() {
    for (name, bytes) in seeds("png_decode") {
        let img = decode_image(&bytes).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)), "{name}");
        let mut cut = bytes.clone();
        cut.truncate(bytes.len() / 2);
        assert!(decode_image(&cut).is_err(), "{name} truncated");
    }
}
