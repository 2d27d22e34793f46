//! Benchmarks for the core crate; see `benches/`.
//!
//! Shared fixtures live here so each bench target builds the same inputs.

use maevit_core::vit::{build_vit_config, Preset, VitConfig};
use maevit_core::Tensor;

/// Deterministic pseudo-random tensor in `[0, 1)`.
pub fn fixture(shape: &[usize], salt: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n as u64)
        .map(|i| {
            let x = (i ^ salt).wrapping_mul(0x9E37_79B9_7F4A_7C15) >> 11;
            x as f64 / (1u64 << 53) as f64
        })
        .collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// ViT-T width at a reduced resolution with `blocks` encoder blocks.
pub fn small_vit(image_size: usize, blocks: usize, classes: usize) -> VitConfig {
    VitConfig {
        blocks,
        ..build_vit_config(Preset::Tiny, image_size, classes).expect("valid preset")
    }
}
