//! Fixtures shared by the benchmarks.

use segpatch::model_zoo::{generate_synthetic_dataset, make_toy_cnn, make_toy_vit, SegmentationSample, SurrogateHandle};
use segpatch::placement::BinaryMask;

pub const CLASSES: usize = 8;

/// Desk-sized scenes: 128×256.
pub fn desk_data(n: usize) -> Vec<SegmentationSample> {
    generate_synthetic_dataset(n, (128, 256), CLASSES, 7).expect("synthetic data")
}

pub fn desk_models() -> (SurrogateHandle, SurrogateHandle) {
    let vit = make_toy_vit(8, 2, CLASSES, 1).and_then(|m| m.with_downscale(0.75)).expect("vit");
    let cnn = make_toy_cnn(8, CLASSES, 2).expect("cnn");
    (vit, cnn)
}

/// A scattered mask with roughly `density` of pixels set.
pub fn speckle_mask(h: usize, w: usize, density: f64) -> BinaryMask {
    let mut state = 0x9e37_79b9_7f4a_7c15u64;
    let data = (0..h * w)
        .map(|_| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 <= density
        })
        .collect();
    BinaryMask::new(h, w, data)
}
