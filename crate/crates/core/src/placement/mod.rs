//! Entropy-guided patch placement.
//!
//! The most attack-sensitive class is the one whose pixels carry the highest
//! mean normalized predictive entropy. Its (dilated) mask restricts where the
//! patch center may go, and within that region only the most uncertain
//! centers are sampled.

mod chart;
mod region;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_zoo::{LabelMap, ModelOutput, SegmentationSample, SurrogateHandle};
use crate::tensor::Tensor;

pub use chart::write_bar_chart;
pub use region::{build_region, dilate_mask, sample_placement, BinaryMask, Placement, PlacementRegion, Strategy};

/// Stabilizer inside the entropy logarithm and the class-mean denominator.
pub const ENTROPY_EPS: f64 = 1e-12;

/// Normalized per-pixel entropy, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EntropyMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl EntropyMap {
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * k).collect(),
            ..self.clone()
        }
    }
}

/// `H = −(1/log C) Σ_c p_c log(p_c + ε)`, clamped to `[0, 1]`.
pub fn compute_entropy_map(probabilities: &Tensor<f64>) -> Result<EntropyMap> {
    let s = probabilities.shape();
    if s.len() != 3 {
        return Err(Error::Domain(format!("expected a [C, H, W] distribution, got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if c < 2 {
        return Err(Error::Domain(format!("entropy needs at least 2 classes, got {c}")));
    }
    let n = h * w;
    let d = probabilities.data();
    let norm = 1.0 / (c as f64).ln();
    let mut values = Vec::with_capacity(n);
    for i in 0..n {
        let mut sum = 0.0;
        let mut acc = 0.0;
        for k in 0..c {
            let p = d[k * n + i];
            sum += p;
            acc -= p * (p + ENTROPY_EPS).ln();
        }
        if (sum - 1.0).abs() > 1e-4 {
            return Err(Error::Domain(format!("pixel {i} distribution sums to {sum}")));
        }
        values.push((acc * norm).clamp(0.0, 1.0));
    }
    Ok(EntropyMap { height: h, width: w, values })
}

/// `Σ 1{y=c}·H / (Σ 1{y=c} + ε)`.
pub fn class_mean_entropy(entropy: &EntropyMap, labels: &LabelMap, class_id: usize) -> f64 {
    assert_eq!(entropy.values.len(), labels.data.len(), "entropy and labels differ in size");
    let (mut s, mut n) = (0.0, 0usize);
    for (&v, &l) in entropy.values.iter().zip(&labels.data) {
        if l == class_id {
            s += v;
            n += 1;
        }
    }
    s / (n as f64 + ENTROPY_EPS)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    /// The model's own clean argmax predictions.
    #[default]
    Predicted,
    GroundTruth,
}

/// How per-image class means are averaged into `S_c`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Average only over images where the class appears.
    #[default]
    Presence,
    /// Divide by the total image count, absent classes contributing 0.
    AllImages,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    /// `S_c` per class.
    pub per_class_scores: Vec<f64>,
    pub selected_class: usize,
    /// `H̄_{b,c}`; absent classes hold 0.
    pub per_image_means: Vec<Vec<f64>>,
    pub images_counted: usize,
    /// Number of images in which each class appears.
    pub presence_counts: Vec<usize>,
}

impl SensitivityReport {
    /// Plain-text table, one row per class, `*` marking the selected class.
    pub fn to_table(&self, class_names: Option<&[String]>) -> String {
        let mut out = format!("# images: {}\nclass\tname\tscore\timages_present\n", self.images_counted);
        for (c, s) in self.per_class_scores.iter().enumerate() {
            let name = class_names
                .and_then(|n| n.get(c).cloned())
                .unwrap_or_else(|| format!("class{c}"));
            let mark = if c == self.selected_class { "*" } else { "" };
            out.push_str(&format!("{c}{mark}\t{name}\t{s:.6}\t{}\n", self.presence_counts[c]));
        }
        out
    }
}

/// Aggregates per-image entropy maps into class sensitivity scores.
///
/// `c★` is the highest-scoring present class, ties going to the lowest id.
pub fn sensitivity_from_maps(
    maps: &[(EntropyMap, LabelMap)],
    num_classes: usize,
    averaging: Averaging,
) -> Result<SensitivityReport> {
    if maps.is_empty() {
        return Err(Error::Parameter("sensitivity scan needs at least one image".into()));
    }
    let mut per_image = Vec::with_capacity(maps.len());
    let mut presence = vec![0usize; num_classes];
    let mut sums = vec![0.0; num_classes];
    for (e, l) in maps {
        let mut counts = vec![0usize; num_classes];
        let mut acc = vec![0.0; num_classes];
        for (&v, &y) in e.values.iter().zip(&l.data) {
            if y < num_classes {
                counts[y] += 1;
                acc[y] += v;
            }
        }
        let means: Vec<f64> = acc
            .iter()
            .zip(&counts)
            .map(|(&a, &n)| a / (n as f64 + ENTROPY_EPS))
            .collect();
        for c in 0..num_classes {
            if counts[c] > 0 {
                presence[c] += 1;
                sums[c] += means[c];
            }
        }
        per_image.push(means);
    }
    let scores: Vec<f64> = (0..num_classes)
        .map(|c| match (presence[c], averaging) {
            (0, _) => 0.0,
            (n, Averaging::Presence) => sums[c] / n as f64,
            (_, Averaging::AllImages) => sums[c] / maps.len() as f64,
        })
        .collect();
    let mut selected: Option<usize> = None;
    for c in (0..num_classes).filter(|&c| presence[c] > 0) {
        if selected.is_none_or(|b| scores[c] > scores[b]) {
            selected = Some(c);
        }
    }
    let selected_class = selected.ok_or_else(|| Error::Undefined("no class is present in any image".into()))?;
    Ok(SensitivityReport {
        per_class_scores: scores,
        selected_class,
        per_image_means: per_image,
        images_counted: maps.len(),
        presence_counts: presence,
    })
}

/// Entropy map plus the labels it is averaged against, for one clean output.
pub fn entropy_and_labels(out: &ModelOutput, sample: &SegmentationSample, source: LabelSource) -> Result<(EntropyMap, LabelMap)> {
    let e = compute_entropy_map(&out.probabilities)?;
    if (e.height, e.width) != (sample.height(), sample.width()) {
        return Err(Error::Contract(format!(
            "probabilities are {}x{} but the sample is {}x{}",
            e.height,
            e.width,
            sample.height(),
            sample.width()
        )));
    }
    let labels = match source {
        LabelSource::Predicted => out.prediction(),
        LabelSource::GroundTruth => sample.labels.clone(),
    };
    Ok((e, labels))
}

pub fn sensitivity_scan(
    model: &SurrogateHandle,
    dataset: &[SegmentationSample],
    label_source: LabelSource,
) -> Result<SensitivityReport> {
    sensitivity_scan_with(model, dataset, label_source, Averaging::default())
}

pub fn sensitivity_scan_with(
    model: &SurrogateHandle,
    dataset: &[SegmentationSample],
    label_source: LabelSource,
    averaging: Averaging,
) -> Result<SensitivityReport> {
    if dataset.is_empty() {
        return Err(Error::Parameter("sensitivity scan needs a nonempty dataset".into()));
    }
    let maps = dataset
        .iter()
        .map(|s| entropy_and_labels(&model.forward(&s.image)?, s, label_source))
        .collect::<Result<Vec<_>>>()?;
    sensitivity_from_maps(&maps, model.num_classes(), averaging)
}

/// Placement knobs shared by training and evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlacementConfig {
    pub strategy: Strategy,
    /// Dilation kernel for the class mask.
    pub dilation_k: usize,
    /// Fraction `p` of the most uncertain feasible centers kept.
    pub sample_fraction: f64,
    pub label_source: LabelSource,
    pub averaging: Averaging,
}

impl Default for PlacementConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Sensitive,
            dilation_k: 5,
            sample_fraction: 0.2,
            label_source: LabelSource::Predicted,
            averaging: Averaging::Presence,
        }
    }
}

impl PlacementConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dilation_k == 0 || self.dilation_k.is_multiple_of(2) {
            return Err(Error::Config(format!("dilation_k = {} must be odd and positive", self.dilation_k)));
        }
        if !(self.sample_fraction > 0.0 && self.sample_fraction <= 1.0) {
            return Err(Error::Config(format!("sample_fraction = {} not in (0, 1]", self.sample_fraction)));
        }
        Ok(())
    }
}

/// Places a patch on one image from its clean prediction and entropy.
///
/// For the sensitive strategy the region is the dilated mask of
/// `target_class` in `prediction`. Returns the placement and whether the
/// sensitive strategy had to fall back to a uniform draw.
pub fn plan_placement(
    prediction: &LabelMap,
    entropy: &EntropyMap,
    target_class: usize,
    patch_size: usize,
    cfg: &PlacementConfig,
    seed: u64,
) -> Result<(Placement, bool)> {
    let dims = (prediction.height, prediction.width);
    match cfg.strategy {
        Strategy::Sensitive => {
            let mask = BinaryMask::from_labels(prediction, target_class);
            let region = build_region(&mask, entropy, patch_size, cfg.dilation_k, cfg.sample_fraction)?;
            let fallback = region.top_centers.is_empty();
            Ok((sample_placement(Some(&region), seed, dims, patch_size, Strategy::Sensitive)?, fallback))
        }
        s => Ok((sample_placement(None, seed, dims, patch_size, s)?, false)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(c: usize, pixels: &[Vec<f64>]) -> Tensor<f64> {
        let n = pixels.len();
        let mut d = vec![0.0; c * n];
        for (i, p) in pixels.iter().enumerate() {
            for k in 0..c {
                d[k * n + i] = p[k];
            }
        }
        Tensor::from_vec(&[c, 1, n], d)
    }

    #[test]
    fn entropy_reference_values() {
        let e = compute_entropy_map(&dist(
            4,
            &[vec![0.25; 4], vec![1.0, 0.0, 0.0, 0.0], vec![0.5, 0.5, 0.0, 0.0]],
        ))
        .unwrap();
        assert!((e.values[0] - 1.0).abs() < 1e-6);
        assert!(e.values[1] <= 1e-9);
        assert!((e.values[2] - 2f64.ln() / 4f64.ln()).abs() < 1e-6);
        assert!(matches!(compute_entropy_map(&dist(1, &[vec![1.0]])), Err(Error::Domain(_))));
    }

    #[test]
    fn class_mean_cases() {
        let e = EntropyMap {
            height: 2,
            width: 2,
            values: vec![0.2, 0.4, 0.9, 0.9],
        };
        let l = LabelMap::new(2, 2, vec![3, 3, 1, 1]);
        assert!((class_mean_entropy(&e, &l, 3) - 0.3).abs() < 1e-6);
        assert!(class_mean_entropy(&e, &l, 0) < 1e-6);
        let c = EntropyMap {
            height: 2,
            width: 2,
            values: vec![0.3; 4],
        };
        assert!((class_mean_entropy(&c, &LabelMap::filled(2, 2, 5), 5) - 0.3).abs() < 1e-6);
    }

    #[test]
    fn single_image_reduces_to_class_mean() {
        let e = EntropyMap {
            height: 1,
            width: 4,
            values: vec![0.1, 0.3, 0.5, 0.7],
        };
        let l = LabelMap::new(1, 4, vec![2; 4]);
        let r = sensitivity_from_maps(&[(e.clone(), l.clone())], 3, Averaging::Presence).unwrap();
        assert_eq!(r.selected_class, 2);
        assert!((r.per_class_scores[2] - class_mean_entropy(&e, &l, 2)).abs() < 1e-12);
        assert_eq!(r.per_class_scores[0], 0.0);
    }

    #[test]
    fn absent_classes_never_win_and_ties_go_low() {
        let e = EntropyMap {
            height: 1,
            width: 2,
            values: vec![0.0, 0.0],
        };
        let l = LabelMap::new(1, 2, vec![1, 2]);
        let r = sensitivity_from_maps(&[(e, l)], 4, Averaging::Presence).unwrap();
        assert_eq!(r.selected_class, 1);
    }

    #[test]
    fn presence_vs_all_images_averaging() {
        let mk = |v: f64, lab: usize| {
            (
                EntropyMap {
                    height: 1,
                    width: 1,
                    values: vec![v],
                },
                LabelMap::new(1, 1, vec![lab]),
            )
        };
        let maps = vec![mk(0.8, 0), mk(0.5, 1), mk(0.5, 1)];
        let p = sensitivity_from_maps(&maps, 2, Averaging::Presence).unwrap();
        assert_eq!(p.selected_class, 0);
        let a = sensitivity_from_maps(&maps, 2, Averaging::AllImages).unwrap();
        assert!((a.per_class_scores[0] - 0.8 / 3.0).abs() < 1e-9);
        assert_eq!(a.selected_class, 1);
    }
}
