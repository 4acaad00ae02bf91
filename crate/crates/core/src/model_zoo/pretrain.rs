//! Short supervised warm-up for the toy models on synthetic scenes.
//!
//! Untrained toy segmenters predict near-constant maps, which makes
//! placement and mIoU comparisons uninformative. A few Adam epochs of
//! class-balanced cross-entropy give them street-scene structure.

use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::rng::rng_for;
use crate::tensor::Tensor;

use super::{SegmentationSample, SurrogateHandle};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainOptions {
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self {
            epochs: 4,
            learning_rate: 0.01,
            seed: 0,
        }
    }
}

/// Per-class weights ∝ 1/√frequency over the valid pixels of `data`,
/// normalized so the weighted mean over valid pixels is 1.
pub fn balanced_class_weights(data: &[SegmentationSample], num_classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; num_classes];
    for s in data {
        for &l in &s.labels.data {
            if l < num_classes {
                counts[l] += 1;
            }
        }
    }
    let total: usize = counts.iter().sum();
    let raw: Vec<f64> = counts
        .iter()
        .map(|&c| if c == 0 { 0.0 } else { 1.0 / (c as f64 / total as f64).sqrt() })
        .collect();
    let mean: f64 = raw.iter().zip(&counts).map(|(w, &c)| w * c as f64).sum::<f64>() / total.max(1) as f64;
    raw.iter().map(|w| w / mean.max(f64::MIN_POSITIVE)).collect()
}

/// Fits the handle's parameters to `data` with per-image Adam steps and
/// returns a new handle (the input handle is untouched).
pub fn pretrain(handle: &SurrogateHandle, data: &[SegmentationSample], opts: &PretrainOptions) -> Result<SurrogateHandle> {
    if data.is_empty() {
        return Err(Error::Parameter("pretraining needs at least one sample".into()));
    }
    let c = handle.num_classes();
    for s in data {
        s.validate(Some(c))?;
    }
    let class_w = balanced_class_weights(data, c);
    let mut params: Vec<Tensor<f64>> = handle.architecture().params().to_vec();
    let sizes: Vec<usize> = params.iter().map(|t| t.len()).collect();
    let mut adam = AdamState::new(sizes.iter().sum());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut current = handle.clone();

    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng_for(opts.seed, &[epoch as u64]));
        for &i in &order {
            let s = &data[i];
            let n_valid = s.labels.data.iter().filter(|&&l| l < c).count();
            if n_valid == 0 {
                continue;
            }
            let targets: Vec<usize> = s.labels.data.iter().map(|&l| if l < c { l } else { 0 }).collect();
            let weights: Vec<f64> = s
                .labels
                .data
                .iter()
                .map(|&l| if l < c { class_w[l] / n_valid as f64 } else { 0.0 })
                .collect();
            let mut g = Graph::<f64>::new();
            let x = g.constant(s.image.clone());
            let fv = current.forward_graph(&mut g, x, true)?;
            let loss = g.weighted_cross_entropy(fv.logits, Arc::new(targets), Arc::new(weights));
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Numeric(format!("pretraining loss became {value} at epoch {epoch}")));
            }
            let mut grads = g.backward(loss);
            let mut flat = Vec::with_capacity(adam.m.len());
            for (&v, &n) in fv.params.iter().zip(&sizes) {
                match grads.take(v) {
                    Some(t) => flat.extend_from_slice(t.data()),
                    None => flat.extend(std::iter::repeat_n(0.0, n)),
                }
            }
            let dir = adam.direction(&flat);
            let mut off = 0;
            for p in params.iter_mut() {
                for v in p.data_mut() {
                    *v -= opts.learning_rate * dir[off];
                    off += 1;
                }
            }
            current = handle.with_params(params.clone());
        }
    }
    Ok(current)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_zoo::{generate_synthetic_dataset, make_toy_cnn};

    fn pixel_accuracy(h: &SurrogateHandle, data: &[SegmentationSample]) -> f64 {
        let (mut hit, mut n) = (0usize, 0usize);
        for s in data {
            let pred = h.forward(&s.image).unwrap().prediction();
            for (p, l) in pred.data.iter().zip(&s.labels.data) {
                if *l != s.ignore_value {
                    n += 1;
                    hit += (p == l) as usize;
                }
            }
        }
        hit as f64 / n as f64
    }

    #[test]
    fn pretraining_improves_accuracy() {
        let data = generate_synthetic_dataset(6, (32, 64), 5, 9).unwrap();
        let m = make_toy_cnn(6, 5, 1).unwrap();
        let before = pixel_accuracy(&m, &data);
        let opts = PretrainOptions {
            epochs: 6,
            learning_rate: 0.02,
            seed: 0,
        };
        let trained = pretrain(&m, &data, &opts).unwrap();
        let after = pixel_accuracy(&trained, &data);
        assert!(after > before + 0.1, "accuracy {before} -> {after}");
        // the original handle is unchanged
        assert_eq!(pixel_accuracy(&m, &data), before);
    }

    #[test]
    fn balanced_weights_have_unit_pixel_mean() {
        let data = generate_synthetic_dataset(3, (32, 32), 4, 0).unwrap();
        let w = balanced_class_weights(&data, 4);
        let (mut s, mut n) = (0.0, 0usize);
        for d in &data {
            for &l in &d.labels.data {
                if l < 4 {
                    s += w[l];
                    n += 1;
                }
            }
        }
        assert!((s / n as f64 - 1.0).abs() < 1e-12);
    }
}
