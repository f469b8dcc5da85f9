#![allow(dead_code)]

pub mod market;
pub mod newton;
pub mod qp;

use std::path::PathBuf;

pub fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data")
}
