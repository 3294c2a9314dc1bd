//! Shared helpers for integration tests.

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use starpose::{tnsr, Tensor};

/// Set to regenerate golden files instead of comparing against them.
pub const BLESS_ENV: &str = "STARPOSE_BLESS";

pub fn tests_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests")
}

pub fn golden_path(name: &str) -> PathBuf {
    tests_dir().join("golden").join(format!("{name}.tnsr"))
}

pub fn pose_fixture() -> PathBuf {
    tests_dir().join("fixtures").join("pose_head.stck")
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Compares `actual` with the frozen golden `name` at absolute tolerance
/// `tol`, or rewrites the golden when blessing.
pub fn check_golden(name: &str, actual: &Tensor<f64>, tol: f64) {
    let path = golden_path(name);
    if std::env::var_os(BLESS_ENV).is_some() {
        tnsr::save(&path, actual).unwrap();
        eprintln!("blessed {}", path.display());
        return;
    }
    let expected: Tensor<f64> = tnsr::load(&path)
        .unwrap_or_else(|e| panic!("golden {} unreadable ({e}); rerun with {BLESS_ENV}=1", path.display()));
    assert_eq!(expected.shape(), actual.shape(), "{name}: shape");
    let err = expected.max_abs_diff(actual);
    assert!(err <= tol, "{name}: max abs diff {err:e} > {tol:e}");
}
