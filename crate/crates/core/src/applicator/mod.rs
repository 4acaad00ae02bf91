//! Differentiable patch compositing under random geometric transforms.
//!
//! A transform scales and rotates the patch about its own center and then
//! shifts it by whole pixels. Each output pixel inverse-maps into patch
//! coordinates and samples `θ` bilinearly; pixels whose resampled coverage
//! reaches 0.5 are overwritten, everything else keeps the image value. The
//! overwrite mask is piecewise constant, so gradients reach `θ` only through
//! the sampled colors.

mod io;

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::CompositeMap;
use crate::error::{Error, Result};
use crate::placement::{BinaryMask, Placement};
use crate::rng::rng_for;
use crate::tensor::Tensor;

pub use io::{load_patch, save_patch, sidecar_path, PatchSidecar};

/// Resampled coverage at or above which a pixel counts as overwritten.
pub const COVERAGE_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    #[default]
    Stage1,
    Stage2,
}

/// The optimized patch.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchState {
    /// Channel-planar `[3, S, S]`, values in `[0, 1]`.
    pub pixels: Tensor<f64>,
    pub size: usize,
    pub stage: Stage,
    pub step_count: u64,
}

impl PatchState {
    pub fn new(pixels: Tensor<f64>) -> Result<Self> {
        let s = pixels.shape();
        if s.len() != 3 || s[0] != 3 || s[1] != s[2] || s[1] == 0 {
            return Err(Error::Parameter(format!("patch must be [3, S, S], got {s:?}")));
        }
        if pixels.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Parameter("patch values must lie in [0, 1]".into()));
        }
        Ok(Self {
            size: s[1],
            pixels,
            stage: Stage::Stage1,
            step_count: 0,
        })
    }

    pub fn filled(size: usize, v: f64) -> Result<Self> {
        Self::new(Tensor::full(&[3, size, size], v))
    }
}

/// Ranges for the random transform. All draws are uniform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EotParams {
    pub enabled: bool,
    pub scale_range: [f64; 2],
    pub rotation_range_deg: [f64; 2],
    /// Whole-pixel shift ranges, inclusive.
    pub translate_y_px: [i64; 2],
    pub translate_x_px: [i64; 2],
}

impl Default for EotParams {
    fn default() -> Self {
        Self {
            enabled: true,
            scale_range: [0.9, 1.1],
            rotation_range_deg: [-10.0, 10.0],
            translate_y_px: [-10, 10],
            translate_x_px: [-10, 10],
        }
    }
}

impl EotParams {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [slo, shi] = self.scale_range;
        if !(slo > 0.0 && slo <= shi && shi.is_finite()) {
            return Err(Error::Parameter(format!("scale range {:?} must satisfy 0 < lo <= hi", self.scale_range)));
        }
        let [rlo, rhi] = self.rotation_range_deg;
        if !(rlo <= rhi && rlo.is_finite() && rhi.is_finite()) {
            return Err(Error::Parameter(format!("rotation range {:?} is not ordered", self.rotation_range_deg)));
        }
        for r in [self.translate_y_px, self.translate_x_px] {
            if r[0] > r[1] {
                return Err(Error::Parameter(format!("translation range {r:?} is not ordered")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transform {
    pub scale: f64,
    pub angle_deg: f64,
    pub dy: i64,
    pub dx: i64,
}

impl Transform {
    pub const IDENTITY: Transform = Transform {
        scale: 1.0,
        angle_deg: 0.0,
        dy: 0,
        dx: 0,
    };
}

fn draw_f64(rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

pub fn sample_transform(params: &EotParams, rng_seed: u64) -> Result<Transform> {
    params.validate()?;
    if !params.enabled {
        return Ok(Transform::IDENTITY);
    }
    let mut rng = rng_for(rng_seed, &[]);
    Ok(Transform {
        scale: draw_f64(&mut rng, params.scale_range),
        angle_deg: draw_f64(&mut rng, params.rotation_range_deg),
        dy: rng.gen_range(params.translate_y_px[0]..=params.translate_y_px[1]),
        dx: rng.gen_range(params.translate_x_px[0]..=params.translate_x_px[1]),
    })
}

/// Pixel routing for one (placement, transform) pair on an `H × W` image.
#[derive(Clone, Debug)]
pub struct Warp {
    pub map: Arc<CompositeMap>,
    pub footprint: BinaryMask,
}

/// Inverse-maps every candidate output pixel into patch coordinates.
pub fn build_warp(image_dims: (usize, usize), placement: &Placement, transform: &Transform) -> Result<Warp> {
    let (h, w) = image_dims;
    let s = placement.patch_size;
    if !placement.fits(image_dims) {
        return Err(Error::Parameter(format!(
            "placement {:?} with size {s} leaves the {h}x{w} image",
            placement.top_left
        )));
    }
    if !(transform.scale > 0.0 && transform.scale.is_finite() && transform.angle_deg.is_finite()) {
        return Err(Error::Parameter(format!("invalid transform {transform:?}")));
    }
    let half = s as f64 / 2.0;
    let cy = placement.top_left.0 as f64 + half + transform.dy as f64;
    let cx = placement.top_left.1 as f64 + half + transform.dx as f64;
    let (sin, cos) = transform.angle_deg.to_radians().sin_cos();
    let scale = transform.scale;

    // Bounding box of the transformed square, padded by one pixel.
    let reach = half * scale * (cos.abs() + sin.abs()) + 1.0;
    let y_lo = (cy - reach).floor().max(0.0) as usize;
    let y_hi = ((cy + reach).ceil().max(0.0) as usize).min(h);
    let x_lo = (cx - reach).floor().max(0.0) as usize;
    let x_hi = ((cx + reach).ceil().max(0.0) as usize).min(w);

    let mut entries = Vec::new();
    let mut footprint = BinaryMask::empty(h, w);
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            let ry = y as f64 + 0.5 - cy;
            let rx = x as f64 + 0.5 - cx;
            // inverse rotation, then inverse scale; result in patch pixel-index coordinates
            let u = (cos * ry - sin * rx) / scale + half - 0.5;
            let v = (sin * ry + cos * rx) / scale + half - 0.5;
            let (u0, v0) = (u.floor(), v.floor());
            let (fu, fv) = (u - u0, v - v0);
            let mut taps = [(0usize, 0.0f64); 4];
            let mut alpha = 0.0;
            let mut n = 0;
            for (du, wu) in [(0.0, 1.0 - fu), (1.0, fu)] {
                for (dv, wv) in [(0.0, 1.0 - fv), (1.0, fv)] {
                    let (iu, iv) = (u0 + du, v0 + dv);
                    let wt = wu * wv;
                    if wt > 0.0 && iu >= 0.0 && iv >= 0.0 && iu < s as f64 && iv < s as f64 {
                        taps[n] = (iu as usize * s + iv as usize, wt);
                        alpha += wt;
                        n += 1;
                    }
                }
            }
            if alpha >= COVERAGE_THRESHOLD {
                // Renormalize so the overwrite never fades toward black at the rim.
                for t in &mut taps[..n] {
                    t.1 /= alpha;
                }
                entries.push((y * w + x, taps));
                footprint.set(y, x, true);
            }
        }
    }
    Ok(Warp {
        map: Arc::new(CompositeMap {
            channels: 3,
            height: h,
            width: w,
            patch_size: s,
            entries,
        }),
        footprint,
    })
}

#[derive(Clone, Debug)]
pub struct AppliedPatch {
    pub image: Tensor<f64>,
    pub footprint_mask: BinaryMask,
    pub transform_used: Transform,
}

/// Composites the patch onto an image (no gradient tracking; the trainer
/// records the same operation on its graph via [`build_warp`]).
pub fn apply_patch(image: &Tensor<f64>, patch: &PatchState, placement: &Placement, transform: &Transform) -> Result<AppliedPatch> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Parameter(format!("image must be [3, H, W], got {s:?}")));
    }
    if placement.patch_size != patch.size {
        return Err(Error::Parameter(format!(
            "placement is for size {} but the patch is {}",
            placement.patch_size, patch.size
        )));
    }
    let warp = build_warp((s[1], s[2]), placement, transform)?;
    let mut g = crate::autograd::Graph::<f64>::new();
    let theta = g.constant(patch.pixels.clone());
    let base = g.constant(image.clone());
    let out = g.composite(theta, base, warp.map.clone());
    Ok(AppliedPatch {
        image: g.value(out).clone(),
        footprint_mask: warp.footprint,
        transform_used: *transform,
    })
}

/// Marks a token iff any footprint pixel falls inside its cell.
pub fn footprint_token_mask(footprint: &BinaryMask, token_size: usize) -> Result<BinaryMask> {
    let (h, w) = (footprint.height, footprint.width);
    if token_size == 0 || h % token_size != 0 || w % token_size != 0 {
        return Err(Error::Parameter(format!("{h}x{w} is not divisible by token size {token_size}")));
    }
    let (gh, gw) = (h / token_size, w / token_size);
    let mut out = BinaryMask::empty(gh, gw);
    for y in 0..h {
        for x in 0..w {
            if footprint.get(y, x) {
                out.set(y / token_size, x / token_size, true);
            }
        }
    }
    Ok(out)
}

/// Token mask for a model that resamples `H × W` inputs to `working` before
/// tokenizing: each covered pixel marks the token its nearest working-grid
/// position falls in.
pub fn footprint_token_mask_at(footprint: &BinaryMask, working: (usize, usize), token_size: usize) -> Result<BinaryMask> {
    let (h, w) = (footprint.height, footprint.width);
    let (wh, ww) = working;
    if (wh, ww) == (h, w) {
        return footprint_token_mask(footprint, token_size);
    }
    if token_size == 0 || wh % token_size != 0 || ww % token_size != 0 {
        return Err(Error::Parameter(format!("{wh}x{ww} is not divisible by token size {token_size}")));
    }
    let mut out = BinaryMask::empty(wh / token_size, ww / token_size);
    for y in 0..h {
        let ty = ((((y as f64 + 0.5) * wh as f64 / h as f64) as usize).min(wh - 1)) / token_size;
        for x in 0..w {
            if footprint.get(y, x) {
                let tx = ((((x as f64 + 0.5) * ww as f64 / w as f64) as usize).min(ww - 1)) / token_size;
                out.set(ty, tx, true);
            }
        }
    }
    Ok(out)
}
