#![allow(dead_code)]

use std::path::{Path, PathBuf};

pub const PDP_URL: &str = "http://shop.test/dp/physical-goods/900653";
pub const REGEN_CONTEXT: &str = "The button is hidden, not disabled";

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}
