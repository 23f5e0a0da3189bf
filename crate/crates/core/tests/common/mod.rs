#![allow(dead_code)]

use std::path::PathBuf;

use ggvit_core::init::Init;
use ggvit_core::{ggt, Tensor};

pub const GOLDEN_TOL: f64 = 1e-10;

/// Uniform `[0, 1)` images `[b, 3, side, side]`.
pub fn uniform_images(b: usize, side: usize, seed: u64) -> Tensor<f64> {
    Init::new(seed).uniform::<f64>(&[b, 3, side, side], 0.5).map(|v| v + 0.5)
}

fn golden_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(format!("{name}.ggt"))
}

/// Compares against a stored tensor; `GGVIT_BLESS=1` rewrites it instead.
pub fn golden(name: &str, actual: &Tensor<f64>) {
    let path = golden_path(name);
    if std::env::var_os("GGVIT_BLESS").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, ggt::encode(actual).unwrap()).unwrap();
        return;
    }
    let bytes = std::fs::read(&path).unwrap_or_else(|e| panic!("reading {}: {e}", path.display()));
    let stored = ggt::decode(&bytes).unwrap();
    assert_eq!(stored.dtype(), 1, "{name} golden is not 64-bit");
    let stored = stored.into_real::<f64>();
    assert_eq!(stored.shape(), actual.shape(), "{name} shape");
    let diff = stored.max_abs_diff(actual).unwrap();
    assert!(diff < GOLDEN_TOL, "{name} differs from golden by {diff:e}");
}
