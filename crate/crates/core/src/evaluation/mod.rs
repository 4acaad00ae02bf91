//! mIoU measurement under clean, random-noise and trained-patch conditions.
//!
//! All three conditions of one image share a placement, so differences
//! between them come only from what is pasted.

mod ablation;
mod report;

use serde::{Deserialize, Serialize};

use crate::applicator::{apply_patch, sample_transform, EotParams, PatchState, Transform};
use crate::error::{Error, Result};
use crate::model_zoo::{LabelMap, SegmentationSample, SurrogateHandle};
use crate::placement::{
    compute_entropy_map, plan_placement, sensitivity_from_maps, EntropyMap, Placement, PlacementConfig,
};
use crate::rng::{derive_seed, rng_for};
use crate::tensor::Tensor;

pub use ablation::{run_ablations, AblationOptions, AblationRow, AblationSuite, AblationTable};
pub use report::{ConditionMeta, EvaluationReport, ModelReport, ModelScores};

const STREAM_PLACE: u64 = 11;
const STREAM_NOISE: u64 = 12;
const STREAM_EOT: u64 = 13;

/// Rows are ground truth, columns predictions. Ignored pixels are skipped.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.num_classes + predicted]
    }

    /// Adds every pixel whose label is a valid class.
    pub fn accumulate(&mut self, labels: &LabelMap, prediction: &LabelMap) {
        assert_eq!(labels.data.len(), prediction.data.len());
        let c = self.num_classes;
        for (&t, &p) in labels.data.iter().zip(&prediction.data) {
            if t < c && p < c {
                self.counts[t * c + p] += 1;
            }
        }
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.num_classes, other.num_classes);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// IoU per class; `None` where the class has zero union.
    pub fn class_iou(&self) -> Vec<Option<f64>> {
        let c = self.num_classes;
        (0..c)
            .map(|k| {
                let tp = self.get(k, k);
                let row: u64 = (0..c).map(|j| self.get(k, j)).sum();
                let col: u64 = (0..c).map(|i| self.get(i, k)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }
}

/// Mean IoU over classes with nonzero union.
pub fn miou(cm: &ConfusionMatrix) -> Result<f64> {
    let ious: Vec<f64> = cm.class_iou().into_iter().flatten().collect();
    if ious.is_empty() {
        return Err(Error::Undefined("mIoU of an empty confusion matrix".into()));
    }
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

/// Clean predictions and entropy of the model that decides placements.
#[derive(Clone, Debug)]
pub struct PlacementGuide {
    pub predictions: Vec<LabelMap>,
    pub entropies: Vec<EntropyMap>,
    pub target_class: usize,
}

impl PlacementGuide {
    /// Runs `model` over `dataset`. Without `target_class`, the most
    /// sensitive class on this data is used.
    pub fn from_model(
        model: &SurrogateHandle,
        dataset: &[SegmentationSample],
        target_class: Option<usize>,
        placement: &PlacementConfig,
    ) -> Result<Self> {
        let mut predictions = Vec::with_capacity(dataset.len());
        let mut entropies = Vec::with_capacity(dataset.len());
        for s in dataset {
            let out = model.forward(&s.image)?;
            predictions.push(out.prediction());
            entropies.push(compute_entropy_map(&out.probabilities)?);
        }
        let target_class = match target_class {
            Some(c) if c >= model.num_classes() => {
                return Err(Error::Parameter(format!("target class {c} out of range")));
            }
            Some(c) => c,
            None => {
                let maps: Vec<(EntropyMap, LabelMap)> = match placement.label_source {
                    crate::placement::LabelSource::Predicted => {
                        entropies.iter().cloned().zip(predictions.iter().cloned()).collect()
                    }
                    crate::placement::LabelSource::GroundTruth => {
                        entropies.iter().cloned().zip(dataset.iter().map(|s| s.labels.clone())).collect()
                    }
                };
                sensitivity_from_maps(&maps, model.num_classes(), placement.averaging)?.selected_class
            }
        };
        Ok(Self {
            predictions,
            entropies,
            target_class,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub placement: PlacementConfig,
    pub seed: u64,
    /// Disabled by default: evaluation pastes the patch untransformed.
    pub eot: EotParams,
    /// Worker threads; images are split between them.
    pub threads: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            placement: PlacementConfig::default(),
            seed: 0,
            eot: EotParams::disabled(),
            threads: 1,
        }
    }
}

/// What is pasted on one image in each condition.
struct ImagePlan {
    placement: Placement,
    transform: Transform,
    noise: Option<PatchState>,
}

fn plan_image(
    i: usize,
    guide: &PlacementGuide,
    patch_size: usize,
    opts: &EvalOptions,
    with_noise: bool,
) -> Result<ImagePlan> {
    let (placement, _) = plan_placement(
        &guide.predictions[i],
        &guide.entropies[i],
        guide.target_class,
        patch_size,
        &opts.placement,
        derive_seed(opts.seed, &[STREAM_PLACE, i as u64]),
    )?;
    let transform = sample_transform(&opts.eot, derive_seed(opts.seed, &[STREAM_EOT, i as u64]))?;
    let noise = if with_noise {
        use rand::Rng;
        let mut rng = rng_for(opts.seed, &[STREAM_NOISE, i as u64]);
        let data = (0..3 * patch_size * patch_size).map(|_| rng.gen::<f64>()).collect();
        Some(PatchState::new(Tensor::from_vec(&[3, patch_size, patch_size], data))?)
    } else {
        None
    };
    Ok(ImagePlan {
        placement,
        transform,
        noise,
    })
}

/// Per-condition matrices and per-image mIoUs for one model over a slice
/// of images.
#[derive(Clone)]
struct Partial {
    cms: [ConfusionMatrix; 3],
    per_image: [Vec<(usize, f64)>; 3],
}

fn image_miou(labels: &LabelMap, pred: &LabelMap, c: usize) -> f64 {
    let mut cm = ConfusionMatrix::new(c);
    cm.accumulate(labels, pred);
    miou(&cm).unwrap_or(f64::NAN)
}

fn eval_model_on(
    model: &SurrogateHandle,
    dataset: &[SegmentationSample],
    images: &[usize],
    plans: &[ImagePlan],
    patch: Option<&PatchState>,
) -> Result<Partial> {
    let c = model.num_classes();
    let mut out = Partial {
        cms: [ConfusionMatrix::new(c), ConfusionMatrix::new(c), ConfusionMatrix::new(c)],
        per_image: [Vec::new(), Vec::new(), Vec::new()],
    };
    for &i in images {
        let s = &dataset[i];
        let plan = &plans[i];
        let clean = model.forward(&s.image)?.prediction();
        let (random, patched) = match (patch, &plan.noise) {
            (Some(p), Some(noise)) => {
                let r = apply_patch(&s.image, noise, &plan.placement, &plan.transform)?;
                let a = apply_patch(&s.image, p, &plan.placement, &plan.transform)?;
                (model.forward(&r.image)?.prediction(), model.forward(&a.image)?.prediction())
            }
            _ => (clean.clone(), clean.clone()),
        };
        for (k, pred) in [clean, random, patched].iter().enumerate() {
            out.cms[k].accumulate(&s.labels, pred);
            out.per_image[k].push((i, image_miou(&s.labels, pred, c)));
        }
    }
    Ok(out)
}

/// Evaluates each model under clean / random-noise / patch conditions.
///
/// Without a patch the random and patch conditions paste nothing and
/// reproduce the clean numbers. A failing model is recorded in its report
/// entry and the others still run.
pub fn evaluate_patch(
    patch: Option<&PatchState>,
    models: &[&SurrogateHandle],
    dataset: &[SegmentationSample],
    guide: &PlacementGuide,
    opts: &EvalOptions,
) -> Result<EvaluationReport> {
    if dataset.is_empty() {
        return Err(Error::Parameter("evaluation needs a nonempty dataset".into()));
    }
    if guide.predictions.len() != dataset.len() {
        return Err(Error::Contract(format!(
            "placement guide covers {} images, dataset has {}",
            guide.predictions.len(),
            dataset.len()
        )));
    }
    opts.placement.validate()?;
    opts.eot.validate()?;
    // Without a patch the placement is irrelevant; any size that fits works.
    let patch_size = patch.map(|p| p.size).unwrap_or(8.min(dataset[0].height()).min(dataset[0].width()));
    let plans = (0..dataset.len())
        .map(|i| plan_image(i, guide, patch_size, opts, patch.is_some()))
        .collect::<Result<Vec<_>>>()?;

    let threads = opts.threads.max(1).min(dataset.len());
    let chunks: Vec<Vec<usize>> = (0..threads)
        .map(|t| (0..dataset.len()).filter(|i| i % threads == t).collect())
        .collect();

    let mut reports = Vec::with_capacity(models.len());
    for &model in models {
        let result = if threads == 1 {
            eval_model_on(model, dataset, &chunks[0], &plans, patch)
        } else {
            std::thread::scope(|scope| {
                let handles: Vec<_> = chunks
                    .iter()
                    .map(|chunk| {
                        let plans = &plans;
                        scope.spawn(move || eval_model_on(model, dataset, chunk, plans, patch))
                    })
                    .collect();
                let mut parts = Vec::with_capacity(handles.len());
                for h in handles {
                    parts.push(h.join().map_err(|_| Error::Contract("evaluation worker panicked".into()))??);
                }
                let mut acc = parts.remove(0);
                for p in parts {
                    for k in 0..3 {
                        acc.cms[k].merge(&p.cms[k]);
                        acc.per_image[k].extend(p.per_image[k].iter().copied());
                    }
                }
                Ok(acc)
            })
        };
        reports.push(match result.and_then(ModelScores::from_partial) {
            Ok(scores) => ModelReport {
                model: model.name.clone(),
                family: model.family,
                scores: Some(scores),
                error: None,
            },
            Err(e) => ModelReport {
                model: model.name.clone(),
                family: model.family,
                scores: None,
                error: Some(e.to_string()),
            },
        });
    }
    Ok(EvaluationReport {
        meta: ConditionMeta {
            patched: patch.is_some(),
            patch_size: patch.map(|p| p.size),
            strategy: opts.placement.strategy,
            target_class: guide.target_class,
            seed: opts.seed,
            divergence: None,
            align: None,
        },
        models: reports,
    })
}

impl ModelScores {
    fn from_partial(mut p: Partial) -> Result<Self> {
        for v in &mut p.per_image {
            v.sort_by_key(|&(i, _)| i);
        }
        let [clean_cm, random_cm, patch_cm] = p.cms;
        let [a, b, c] = p.per_image;
        let strip = |v: Vec<(usize, f64)>| v.into_iter().map(|(_, m)| m).collect();
        Ok(Self {
            clean: miou(&clean_cm)?,
            random: miou(&random_cm)?,
            patch: miou(&patch_cm)?,
            per_image_clean: strip(a),
            per_image_random: strip(b),
            per_image_patch: strip(c),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn miou_reference_values() {
        let mut cm = ConfusionMatrix::new(2);
        cm.counts = vec![3, 1, 1, 3];
        assert!((miou(&cm).unwrap() - 0.6).abs() < 1e-9);
        let mut diag = ConfusionMatrix::new(3);
        diag.counts = vec![5, 0, 0, 0, 2, 0, 0, 0, 0];
        assert_eq!(miou(&diag).unwrap(), 1.0);
        assert!(matches!(miou(&ConfusionMatrix::new(4)), Err(Error::Undefined(_))));
    }

    #[test]
    fn accumulate_skips_ignored_pixels() {
        let labels = LabelMap::new(1, 4, vec![0, 1, 255, 1]);
        let pred = LabelMap::new(1, 4, vec![0, 0, 1, 1]);
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&labels, &pred);
        assert_eq!(cm.total(), 3);
        assert_eq!(cm.counts, vec![1, 0, 1, 1]);
    }
}
