//! Patch persistence: an 8-bit RGB PNG plus a JSON sidecar.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{EotParams, PatchState, Stage};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchSidecar {
    pub size: usize,
    pub stage: Stage,
    pub step_count: u64,
    /// SHA-256 of the resolved run configuration.
    pub config_hash: String,
    pub eot: EotParams,
}

/// `patch.png` → `patch.json`
pub fn sidecar_path(png: &Path) -> PathBuf {
    png.with_extension("json")
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_patch(path: &Path, patch: &PatchState, config_hash: &str, eot: &EotParams) -> Result<()> {
    let s = patch.size;
    let d = patch.pixels.data();
    let plane = s * s;
    let img = RgbImage::from_fn(s as u32, s as u32, |x, y| {
        let i = y as usize * s + x as usize;
        Rgb([quantize(d[i]), quantize(d[plane + i]), quantize(d[2 * plane + i])])
    });
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    img.save_with_format(path, image::ImageFormat::Png)?;
    let side = PatchSidecar {
        size: s,
        stage: patch.stage,
        step_count: patch.step_count,
        config_hash: config_hash.to_string(),
        eot: eot.clone(),
    };
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&side)?)?;
    Ok(())
}

/// Reads a patch raster; the sidecar is optional but must agree when present.
pub fn load_patch(path: &Path) -> Result<(PatchState, Option<PatchSidecar>)> {
    let bad = |reason: String| Error::PatchFormat {
        path: path.to_path_buf(),
        reason,
    };
    let bytes = std::fs::read(path).map_err(|e| bad(e.to_string()))?;
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| bad(format!("not a PNG image: {e}")))?;
    if img.color() != image::ColorType::Rgb8 {
        return Err(bad(format!("expected 8-bit RGB, found {:?}", img.color())));
    }
    let img = img.to_rgb8();
    let (w, h) = img.dimensions();
    if w != h || w == 0 {
        return Err(bad(format!("patch must be square, found {w}x{h}")));
    }
    let s = w as usize;
    let plane = s * s;
    let mut data = vec![0.0; 3 * plane];
    for (x, y, p) in img.enumerate_pixels() {
        let i = y as usize * s + x as usize;
        for c in 0..3 {
            data[c * plane + i] = p[c] as f64 / 255.0;
        }
    }
    let mut patch = PatchState::new(Tensor::from_vec(&[3, s, s], data))?;
    let side_path = sidecar_path(path);
    let sidecar = if side_path.exists() {
        let text = std::fs::read_to_string(&side_path)?;
        let side: PatchSidecar =
            serde_json::from_str(&text).map_err(|e| bad(format!("sidecar {}: {e}", side_path.display())))?;
        if side.size != s {
            return Err(bad(format!("sidecar says size {} but raster is {s}", side.size)));
        }
        patch.stage = side.stage;
        patch.step_count = side.step_count;
        Some(side)
    } else {
        None
    };
    Ok((patch, sidecar))
}
