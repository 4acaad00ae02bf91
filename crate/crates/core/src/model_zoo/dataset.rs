//! Synthetic street scenes and on-disk dataset ingestion.
//!
//! On-disk layout: `<root>/images/<split>/<stem>.png` (RGB) mirrored by
//! `<root>/labels/<split>/<stem>.png` (8-bit single channel, class id per
//! pixel, 255 = ignore).

use std::collections::BTreeMap;
use std::path::Path;

use image::imageops::FilterType;
use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::tensor::Tensor;

use super::{LabelMap, SegmentationSample, IGNORE_LABEL};

/// What a synthetic class depicts. The last class id is always [`SceneRole::Pole`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SceneRole {
    Road,
    Building,
    Sky,
    Sidewalk,
    Vegetation,
    Car,
    Sign,
    Terrain,
    Person,
    Blob(usize),
    Pole,
}

impl SceneRole {
    pub fn name(self) -> String {
        match self {
            SceneRole::Blob(k) => format!("blob{k}"),
            other => format!("{other:?}").to_lowercase(),
        }
    }

    fn color(self) -> [f64; 3] {
        let rgb = |r: u8, g: u8, b: u8| [r as f64 / 255.0, g as f64 / 255.0, b as f64 / 255.0];
        match self {
            SceneRole::Road => rgb(128, 64, 128),
            SceneRole::Building => rgb(90, 90, 96),
            SceneRole::Sky => rgb(70, 130, 180),
            SceneRole::Sidewalk => rgb(232, 60, 220),
            SceneRole::Vegetation => rgb(107, 142, 35),
            SceneRole::Car => rgb(0, 0, 142),
            SceneRole::Sign => rgb(220, 220, 0),
            SceneRole::Terrain => rgb(152, 251, 152),
            SceneRole::Person => rgb(220, 20, 60),
            SceneRole::Pole => rgb(125, 125, 125),
            SceneRole::Blob(k) => {
                let h = crate::rng::derive_seed(k as u64, &[17]);
                rgb((h & 0xff) as u8, ((h >> 8) & 0xff) as u8, ((h >> 16) & 0xff) as u8)
            }
        }
    }
}

/// Class id → role for a `num_classes`-class scene.
pub fn scene_roles(num_classes: usize) -> Vec<SceneRole> {
    use SceneRole::*;
    let mut roles: Vec<SceneRole> = [Road, Building, Sky, Sidewalk, Vegetation, Car, Sign, Terrain, Person]
        .into_iter()
        .take(num_classes - 1)
        .collect();
    let mut k = 0;
    while roles.len() < num_classes - 1 {
        roles.push(Blob(k));
        k += 1;
    }
    roles.push(Pole);
    roles
}

struct Canvas {
    h: usize,
    w: usize,
    labels: Vec<usize>,
    roles: Vec<SceneRole>,
}

impl Canvas {
    fn class_of(&self, role: SceneRole) -> Option<usize> {
        self.roles.iter().position(|&r| r == role)
    }

    fn fill(&mut self, y0: usize, y1: usize, x0: usize, x1: usize, role: SceneRole) {
        let Some(c) = self.class_of(role) else { return };
        for y in y0.min(self.h)..y1.min(self.h) {
            for x in x0.min(self.w)..x1.min(self.w) {
                self.labels[y * self.w + x] = c;
            }
        }
    }
}

/// Deterministic street-like scenes: sky, a building/vegetation band,
/// sidewalk and road, with cars, people, signs and thin poles on top.
///
/// Poles are a few pixels wide, so that class covers well under 2% of the
/// image on average.
pub fn generate_synthetic_dataset(
    num_images: usize,
    size: (usize, usize),
    num_classes: usize,
    seed: u64,
) -> Result<Vec<SegmentationSample>> {
    if num_images == 0 {
        return Err(Error::Parameter("num_images must be positive".into()));
    }
    if num_classes < 4 {
        return Err(Error::Parameter(format!("synthetic scenes need >= 4 classes, got {num_classes}")));
    }
    if num_classes > 255 {
        return Err(Error::Parameter("at most 255 classes fit an 8-bit label raster".into()));
    }
    let (h, w) = size;
    if h < 16 || w < 16 {
        return Err(Error::Parameter(format!("synthetic images must be at least 16x16, got {h}x{w}")));
    }
    let roles = scene_roles(num_classes);
    (0..num_images)
        .map(|i| Ok(synthesize(h, w, &roles, seed, i as u64)))
        .collect()
}

fn synthesize(h: usize, w: usize, roles: &[SceneRole], seed: u64, index: u64) -> SegmentationSample {
    use SceneRole::*;
    let mut rng = rng_for(seed, &[index]);
    let hf = h as f64;
    let wf = w as f64;
    let mut cv = Canvas {
        h,
        w,
        labels: vec![0; h * w],
        roles: roles.to_vec(),
    };

    let horizon = (hf * rng.gen_range(0.25..0.40)) as usize;
    let ground = (hf * rng.gen_range(0.55..0.65)) as usize;
    let curb = ground + (hf * rng.gen_range(0.06..0.12)) as usize;

    cv.fill(0, horizon, 0, w, Sky);
    // Building / vegetation blocks in the middle band.
    let mut x = 0;
    let mut veg = rng.gen_bool(0.5);
    while x < w {
        let bw = (wf * rng.gen_range(0.12..0.35)) as usize + 1;
        let top = horizon.saturating_sub((hf * rng.gen_range(0.0..0.12)) as usize);
        cv.fill(top, ground, x, x + bw, if veg && cv.class_of(Vegetation).is_some() { Vegetation } else { Building });
        x += bw;
        veg = !veg;
    }
    let sidewalk = if cv.class_of(Sidewalk).is_some() { Sidewalk } else { Road };
    cv.fill(ground, curb, 0, w, sidewalk);
    cv.fill(curb, h, 0, w, Road);
    if cv.class_of(Terrain).is_some() {
        let tx = rng.gen_range(0..w);
        cv.fill(ground, curb, tx, tx + (wf * 0.1) as usize, Terrain);
    }
    for k in 0..roles.len() {
        if let Blob(_) = roles[k] {
            let bh = (hf * rng.gen_range(0.04..0.10)) as usize + 1;
            let bw = (wf * rng.gen_range(0.04..0.10)) as usize + 1;
            let by = rng.gen_range(horizon..ground.max(horizon + 1));
            let bx = rng.gen_range(0..w);
            cv.fill(by, by + bh, bx, bx + bw, roles[k]);
        }
    }
    let cars = rng.gen_range(1..=3);
    for _ in 0..cars {
        let cw = (wf * rng.gen_range(0.08..0.15)) as usize + 1;
        let ch = (hf * rng.gen_range(0.08..0.14)) as usize + 1;
        let bottom = rng.gen_range(curb..h.max(curb + 1));
        let cx = rng.gen_range(0..w);
        cv.fill(bottom.saturating_sub(ch), bottom, cx, cx + cw, Car);
    }
    if cv.class_of(Person).is_some() {
        let pw = (w / 60).max(2);
        let ph = (h / 8).max(3);
        let px = rng.gen_range(0..w);
        cv.fill(curb.saturating_sub(ph), curb, px, px + pw, Person);
    }
    let pole_w = (w / 128).max(1);
    let poles = ((wf / 128.0) * rng.gen_range(1.0..2.0)).round().max(1.0) as usize;
    for _ in 0..poles {
        let px = rng.gen_range(0..w.saturating_sub(pole_w).max(1));
        let top = horizon.saturating_sub((hf * rng.gen_range(0.0..0.08)) as usize);
        let bottom = ground + (curb - ground) / 2;
        cv.fill(top, bottom, px, px + pole_w, Pole);
        if cv.class_of(Sign).is_some() {
            let s = (w / 40).max(3);
            let sx = (px + pole_w / 2).saturating_sub(s / 2);
            cv.fill(top, top + s, sx, sx + s, Sign);
        }
    }
    let ignore_rows = (h / 32).max(1);
    for v in &mut cv.labels[(h - ignore_rows) * w..] {
        *v = IGNORE_LABEL;
    }

    // Render colors: per-image illumination, per-class tint, texture and noise.
    let illum: f64 = rng.gen_range(0.85..1.15);
    let tints: Vec<[f64; 3]> = roles
        .iter()
        .map(|r| {
            let base = r.color();
            let j: f64 = rng.gen_range(-0.05..0.05);
            [base[0] + j, base[1] + j, base[2] + j]
        })
        .collect();
    let mut img = vec![0.0; 3 * h * w];
    let plane = h * w;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let l = cv.labels[i];
            let mut rgb = if l == IGNORE_LABEL { [0.1, 0.1, 0.1] } else { tints[l] };
            let texture = match if l == IGNORE_LABEL { None } else { Some(roles[l]) } {
                Some(Building) => {
                    if (y / 4) % 3 == 0 && (x / 4) % 3 == 1 {
                        0.12
                    } else {
                        0.0
                    }
                }
                Some(Vegetation) => 0.08 * ((x as f64 * 0.9).sin() * (y as f64 * 1.3).cos()),
                Some(Road) => 0.03 * ((x + y) % 2) as f64,
                _ => 0.0,
            };
            for (c, v) in rgb.iter_mut().enumerate() {
                let noise = 0.06 * (rng.gen::<f64>() + rng.gen::<f64>() - 1.0);
                img[c * plane + i] = ((*v + texture) * illum + noise).clamp(0.0, 1.0);
            }
        }
    }
    SegmentationSample {
        image: Tensor::from_vec(&[3, h, w], img),
        labels: LabelMap::new(h, w, cv.labels),
        ignore_value: IGNORE_LABEL,
    }
}

/// Writes one sample in the on-disk layout.
pub fn write_sample(root: &Path, split: &str, stem: &str, sample: &SegmentationSample) -> Result<()> {
    let (h, w) = (sample.height(), sample.width());
    let img_dir = root.join("images").join(split);
    let lbl_dir = root.join("labels").join(split);
    std::fs::create_dir_all(&img_dir)?;
    std::fs::create_dir_all(&lbl_dir)?;
    let plane = h * w;
    let d = sample.image.data();
    let rgb: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let q = |v: f64| (v * 255.0).round().clamp(0.0, 255.0) as u8;
        Rgb([q(d[i]), q(d[plane + i]), q(d[2 * plane + i])])
    });
    rgb.save(img_dir.join(format!("{stem}.png")))?;
    let lbl: GrayImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([sample.labels.get(y as usize, x as usize).min(255) as u8])
    });
    lbl.save(lbl_dir.join(format!("{stem}.png")))?;
    Ok(())
}

fn stems(dir: &Path) -> Result<BTreeMap<String, std::path::PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_file() {
            if let Some(stem) = path.file_stem() {
                out.insert(stem.to_string_lossy().into_owned(), path);
            }
        }
    }
    Ok(out)
}

/// Loads paired image/label files, resizing images bilinearly and labels
/// with nearest neighbour.
pub fn load_dataset(root: &Path, split: &str, resolution: (usize, usize)) -> Result<Vec<SegmentationSample>> {
    let (h, w) = resolution;
    if h == 0 || w == 0 {
        return Err(Error::Parameter("resolution must be positive".into()));
    }
    let images = stems(&root.join("images").join(split))?;
    let labels = stems(&root.join("labels").join(split))?;
    if images.is_empty() && labels.is_empty() {
        return Err(Error::Ingestion(format!(
            "no image/label files under {} for split {split:?}",
            root.display()
        )));
    }
    let mut unpaired: Vec<String> = images
        .keys()
        .filter(|k| !labels.contains_key(*k))
        .map(|k| format!("images/{split}/{k} (no label)"))
        .collect();
    unpaired.extend(
        labels
            .keys()
            .filter(|k| !images.contains_key(*k))
            .map(|k| format!("labels/{split}/{k} (no image)")),
    );
    if !unpaired.is_empty() {
        return Err(Error::Ingestion(format!("unpaired files: {}", unpaired.join(", "))));
    }
    let mut out = Vec::with_capacity(images.len());
    for (stem, img_path) in &images {
        let rgb = image::open(img_path)?.to_rgb8();
        let rgb = if rgb.dimensions() != (w as u32, h as u32) {
            image::imageops::resize(&rgb, w as u32, h as u32, FilterType::Triangle)
        } else {
            rgb
        };
        let lbl = image::open(&labels[stem])?.to_luma8();
        let lbl = if lbl.dimensions() != (w as u32, h as u32) {
            image::imageops::resize(&lbl, w as u32, h as u32, FilterType::Nearest)
        } else {
            lbl
        };
        let plane = h * w;
        let mut data = vec![0.0; 3 * plane];
        for (x, y, p) in rgb.enumerate_pixels() {
            let i = y as usize * w + x as usize;
            for c in 0..3 {
                data[c * plane + i] = p[c] as f64 / 255.0;
            }
        }
        let label_data = lbl.pixels().map(|p| p[0] as usize).collect();
        out.push(SegmentationSample::new(
            Tensor::from_vec(&[3, h, w], data),
            LabelMap::new(h, w, label_data),
        )?);
    }
    Ok(out)
}
