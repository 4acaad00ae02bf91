use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_zoo::LabelMap;
use crate::rng::rng_for;

use super::EntropyMap;

/// Row-major binary raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Self {
        assert_eq!(height * width, data.len());
        Self { height, width, data }
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self::new(height, width, vec![false; height * width])
    }

    pub fn from_labels(labels: &LabelMap, class_id: usize) -> Self {
        Self::new(
            labels.height,
            labels.width,
            labels.data.iter().map(|&l| l == class_id).collect(),
        )
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// `self ⊆ other`
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }
}

/// Binary max-pool with a `k × k` window, stride 1, zero padding.
///
/// A square structuring element is separable, so this runs as a row pass
/// followed by a column pass.
pub fn dilate_mask(mask: &BinaryMask, k: usize) -> Result<BinaryMask> {
    if k == 0 || k.is_multiple_of(2) {
        return Err(Error::Parameter(format!("dilation kernel must be odd and positive, got {k}")));
    }
    let (h, w) = (mask.height, mask.width);
    let r = k / 2;
    let mut rows = vec![false; h * w];
    for y in 0..h {
        let line = &mask.data[y * w..(y + 1) * w];
        // prefix counts: set iff any pixel in [x-r, x+r] is set
        let mut prefix = vec![0usize; w + 1];
        for x in 0..w {
            prefix[x + 1] = prefix[x] + line[x] as usize;
        }
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r + 1).min(w);
            rows[y * w + x] = prefix[hi] > prefix[lo];
        }
    }
    let mut out = vec![false; h * w];
    let mut prefix = vec![0usize; h + 1];
    for x in 0..w {
        for y in 0..h {
            prefix[y + 1] = prefix[y] + rows[y * w + x] as usize;
        }
        for y in 0..h {
            let lo = y.saturating_sub(r);
            let hi = (y + r + 1).min(h);
            out[y * w + x] = prefix[hi] > prefix[lo];
        }
    }
    Ok(BinaryMask::new(h, w, out))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Sensitive,
    Center,
    Random,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Sensitive => "sensitive",
            Strategy::Center => "center",
            Strategy::Random => "random",
        }
    }
}

/// Candidate patch centers for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct PlacementRegion {
    /// Dilated class mask.
    pub mask: BinaryMask,
    pub dilation_k: usize,
    pub patch_size: usize,
    /// Centers inside the dilated mask whose patch fits in the image.
    pub feasible_centers: Vec<(usize, usize)>,
    /// Feasible centers with entropy ≥ `quantile_tau`.
    pub top_centers: Vec<(usize, usize)>,
    /// `None` when there are no feasible centers.
    pub quantile_tau: Option<f64>,
    pub sample_fraction: f64,
}

/// Dilates `mask`, keeps centers whose `S × S` patch fits
/// (`S/2 ≤ y ≤ H − S/2`, same for `x`), and retains the most uncertain
/// fraction `p` of them.
///
/// The threshold `τ` is the nearest-rank `(1−p)` quantile: the
/// `⌈p·|V|⌉`-th largest center entropy. Every center tying with `τ` is kept,
/// so at least `⌈p·|V|⌉` centers survive.
pub fn build_region(mask: &BinaryMask, entropy: &EntropyMap, patch_size: usize, k: usize, p: f64) -> Result<PlacementRegion> {
    let (h, w) = (mask.height, mask.width);
    if (entropy.height, entropy.width) != (h, w) {
        return Err(Error::Parameter("mask and entropy map differ in size".into()));
    }
    if patch_size == 0 || patch_size > h.min(w) {
        return Err(Error::Parameter(format!("patch size {patch_size} does not fit a {h}x{w} image")));
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Parameter(format!("sample fraction {p} not in (0, 1]")));
    }
    let dilated = dilate_mask(mask, k)?;
    let s = patch_size;
    let fits = |v: usize, extent: usize| 2 * v >= s && 2 * v + s <= 2 * extent;
    let mut feasible = Vec::new();
    for y in (0..h).filter(|&y| fits(y, h)) {
        for x in (0..w).filter(|&x| fits(x, w)) {
            if dilated.get(y, x) {
                feasible.push((y, x));
            }
        }
    }
    let (tau, top) = if feasible.is_empty() {
        (None, Vec::new())
    } else {
        let mut vals: Vec<f64> = feasible.iter().map(|&(y, x)| entropy.get(y, x)).collect();
        vals.sort_by(|a, b| b.total_cmp(a));
        let keep = ((p * vals.len() as f64 - 1e-9).ceil() as usize).clamp(1, vals.len());
        let tau = vals[keep - 1];
        let top = feasible
            .iter()
            .copied()
            .filter(|&(y, x)| entropy.get(y, x) >= tau)
            .collect();
        (Some(tau), top)
    };
    Ok(PlacementRegion {
        mask: dilated,
        dilation_k: k,
        patch_size,
        feasible_centers: feasible,
        top_centers: top,
        quantile_tau: tau,
        sample_fraction: p,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    /// `(y0, x0)` of the untransformed footprint.
    pub top_left: (usize, usize),
    pub patch_size: usize,
    pub strategy: Strategy,
}

impl Placement {
    pub fn center(image: (usize, usize), patch_size: usize) -> Self {
        Self {
            top_left: ((image.0 - patch_size) / 2, (image.1 - patch_size) / 2),
            patch_size,
            strategy: Strategy::Center,
        }
    }

    pub fn fits(&self, image: (usize, usize)) -> bool {
        self.top_left.0 + self.patch_size <= image.0 && self.top_left.1 + self.patch_size <= image.1
    }
}

/// Draws a placement. `region` may be `None` for the center and random
/// strategies; for the sensitive strategy an absent or empty top set falls
/// back to a uniform in-bounds placement.
pub fn sample_placement(
    region: Option<&PlacementRegion>,
    rng_seed: u64,
    image_dims: (usize, usize),
    patch_size: usize,
    strategy: Strategy,
) -> Result<Placement> {
    let (h, w) = image_dims;
    if patch_size == 0 || patch_size > h.min(w) {
        return Err(Error::Parameter(format!("patch size {patch_size} does not fit a {h}x{w} image")));
    }
    if let Some(r) = region {
        if r.patch_size != patch_size {
            return Err(Error::Parameter(format!(
                "region was built for patch size {} but {patch_size} was requested",
                r.patch_size
            )));
        }
    }
    let mut rng = rng_for(rng_seed, &[]);
    let uniform = |rng: &mut rand_chacha::ChaCha8Rng| (rng.gen_range(0..=h - patch_size), rng.gen_range(0..=w - patch_size));
    let top_left = match strategy {
        Strategy::Center => Placement::center(image_dims, patch_size).top_left,
        Strategy::Random => uniform(&mut rng),
        Strategy::Sensitive => match region.filter(|r| !r.top_centers.is_empty()) {
            Some(r) => {
                let (yc, xc) = r.top_centers[rng.gen_range(0..r.top_centers.len())];
                (yc - patch_size / 2, xc - patch_size / 2)
            }
            None => uniform(&mut rng),
        },
    };
    Ok(Placement {
        top_left,
        patch_size,
        strategy,
    })
}
