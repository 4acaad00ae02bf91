use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_zoo::LabelMap;
use crate::tensor::Tensor;

/// Stabilizer inside divergence logarithms.
pub const DIVERGENCE_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Divergence {
    #[default]
    Js,
    /// `KL(clean ‖ adversarial)`
    Kl,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdScope {
    #[default]
    Batch,
    Image,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    CleanCorrectness,
    Divergence(Divergence),
}

/// Two disjoint pixel sets covering every valid pixel of one image.
///
/// For stage 1, `set_a` holds pixels the clean model classifies correctly
/// and `set_b` the rest. For stage 2, `set_a` holds pixels whose divergence
/// exceeds the threshold and `set_b` the rest.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelPartition {
    pub in_a: Vec<bool>,
    pub valid: Vec<bool>,
    pub criterion: Criterion,
    /// Divergence threshold (strictly-greater rule); `None` for clean correctness.
    pub threshold: Option<f64>,
}

impl PixelPartition {
    pub fn from_clean_correctness(labels: &LabelMap, clean_prediction: &LabelMap, num_classes: usize) -> Self {
        assert_eq!(labels.data.len(), clean_prediction.data.len());
        let valid: Vec<bool> = labels.data.iter().map(|&l| l < num_classes).collect();
        let in_a = labels
            .data
            .iter()
            .zip(&clean_prediction.data)
            .zip(&valid)
            .map(|((l, p), &v)| v && l == p)
            .collect();
        Self {
            in_a,
            valid,
            criterion: Criterion::CleanCorrectness,
            threshold: None,
        }
    }

    pub fn set_a(&self) -> Vec<usize> {
        (0..self.valid.len()).filter(|&i| self.valid[i] && self.in_a[i]).collect()
    }

    pub fn set_b(&self) -> Vec<usize> {
        (0..self.valid.len()).filter(|&i| self.valid[i] && !self.in_a[i]).collect()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Per-pixel `−log softmax(logits)[label]`; 0 where the label is ignored.
pub fn cross_entropy_map(logits: &Tensor<f64>, labels: &LabelMap) -> Vec<f64> {
    let c = logits.shape()[0];
    let n = logits.len() / c;
    assert_eq!(n, labels.data.len(), "logits and labels differ in size");
    let d = logits.data();
    (0..n)
        .map(|i| {
            let y = labels.data[i];
            if y >= c {
                return 0.0;
            }
            let m = (0..c).map(|k| d[k * n + i]).fold(f64::NEG_INFINITY, f64::max);
            let lse = m + (0..c).map(|k| (d[k * n + i] - m).exp()).sum::<f64>().ln();
            lse - d[y * n + i]
        })
        .collect()
}

fn weighted_sets(parts: &[&PixelPartition], w_a: f64, w_b: f64, denom: f64) -> Vec<Vec<f64>> {
    parts
        .iter()
        .map(|p| {
            p.in_a
                .iter()
                .zip(&p.valid)
                .map(|(&a, &v)| match (v, a) {
                    (false, _) => 0.0,
                    (true, true) => w_a / denom,
                    (true, false) => w_b / denom,
                })
                .collect()
        })
        .collect()
}

/// Per-pixel CE weights of the stage-1 objective over a batch:
/// `[(1−γ)·Σ_C CE + γ·Σ_I CE] / (|C| + |I|)`.
pub fn stage1_weights(parts: &[&PixelPartition], gamma: f64) -> Result<Vec<Vec<f64>>> {
    let n: usize = parts.iter().map(|p| p.valid_count()).sum();
    if n == 0 {
        return Err(Error::Undefined("stage-1 loss: every pixel is ignored".into()));
    }
    Ok(weighted_sets(parts, 1.0 - gamma, gamma, n as f64))
}

/// Per-pixel CE weights of the stage-2 objective (applied to each surrogate):
/// `1/(|S|·(|X|+|Y|)) · Σ_s [(1−β)·Σ_X CE_s + β·Σ_Y CE_s]`. With two
/// surrogates the prefactor is `1/(2(|X|+|Y|))`.
pub fn stage2_weights(parts: &[&PixelPartition], beta: f64, num_surrogates: usize) -> Result<Vec<Vec<f64>>> {
    if num_surrogates == 0 {
        return Err(Error::Contract("stage-2 loss needs at least one surrogate".into()));
    }
    let n: usize = parts.iter().map(|p| p.valid_count()).sum();
    if n == 0 {
        return Err(Error::Undefined("stage-2 loss: every pixel is ignored".into()));
    }
    Ok(weighted_sets(parts, 1.0 - beta, beta, (num_surrogates * n) as f64))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Stage-1 objective for one image (adversarial logits vs. labels; the
/// split comes from the clean prediction).
pub fn stage1_loss(logits: &Tensor<f64>, labels: &LabelMap, clean_prediction: &LabelMap, gamma: f64) -> Result<f64> {
    let c = logits.shape()[0];
    let part = PixelPartition::from_clean_correctness(labels, clean_prediction, c);
    let w = stage1_weights(&[&part], gamma)?;
    Ok(dot(&w[0], &cross_entropy_map(logits, labels)))
}

/// Stage-2 objective for one image across surrogates.
pub fn stage2_loss(logits: &[Tensor<f64>], labels: &LabelMap, partition: &PixelPartition, beta: f64) -> Result<f64> {
    let w = stage2_weights(&[partition], beta, logits.len())?;
    Ok(logits.iter().map(|l| dot(&w[0], &cross_entropy_map(l, labels))).sum())
}

/// `Σ p log((p+ε)/(q+ε))`, natural log.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| a * ((a + DIVERGENCE_EPS).ln() - (b + DIVERGENCE_EPS).ln()))
        .sum()
}

/// `½KL(p‖m) + ½KL(q‖m)` with `m = (p+q)/2`, in `[0, log 2]`.
pub fn js_divergence(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len());
    let mut s = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let lm = (0.5 * (a + b) + DIVERGENCE_EPS).ln();
        s += 0.5 * a * ((a + DIVERGENCE_EPS).ln() - lm) + 0.5 * b * ((b + DIVERGENCE_EPS).ln() - lm);
    }
    s.clamp(0.0, std::f64::consts::LN_2)
}

/// Per-pixel divergence between a clean and an adversarial `[C, H, W]`
/// distribution.
pub fn divergence_map(clean: &Tensor<f64>, adv: &Tensor<f64>, kind: Divergence) -> Result<Vec<f64>> {
    if clean.shape() != adv.shape() {
        return Err(Error::Parameter(format!(
            "clean {:?} and adversarial {:?} shapes differ",
            clean.shape(),
            adv.shape()
        )));
    }
    let c = clean.shape()[0];
    let n = clean.len() / c;
    let (dc, da) = (clean.data(), adv.data());
    let mut p = vec![0.0; c];
    let mut q = vec![0.0; c];
    Ok((0..n)
        .map(|i| {
            for k in 0..c {
                p[k] = dc[k * n + i];
                q[k] = da[k * n + i];
            }
            match kind {
                Divergence::Js => js_divergence(&p, &q),
                Divergence::Kl => kl_divergence(&p, &q),
            }
        })
        .collect())
}

/// Divergence averaged across surrogates, per pixel.
pub fn partition_scores(clean: &[&Tensor<f64>], adv: &[&Tensor<f64>], kind: Divergence) -> Result<Vec<f64>> {
    if clean.is_empty() || clean.len() != adv.len() {
        return Err(Error::Contract(format!(
            "need matching nonempty surrogate lists, got {} clean and {} adversarial",
            clean.len(),
            adv.len()
        )));
    }
    let mut acc = divergence_map(clean[0], adv[0], kind)?;
    for (c, a) in clean.iter().zip(adv).skip(1) {
        for (s, v) in acc.iter_mut().zip(divergence_map(c, a, kind)?) {
            *s += v;
        }
    }
    let k = clean.len() as f64;
    acc.iter_mut().for_each(|v| *v /= k);
    Ok(acc)
}

/// Splits valid pixels at the mean score (strictly greater goes to set A).
///
/// With [`ThresholdScope::Batch`] one mean is taken over all images' valid
/// pixels; with [`ThresholdScope::Image`] each image uses its own mean.
pub fn partition_by_divergence(
    scores: &[Vec<f64>],
    valid: &[Vec<bool>],
    scope: ThresholdScope,
    kind: Divergence,
) -> Vec<PixelPartition> {
    assert_eq!(scores.len(), valid.len());
    let mean_of = |idx: &mut dyn Iterator<Item = usize>| {
        let (mut s, mut n) = (0.0, 0usize);
        for b in idx {
            for (v, &ok) in scores[b].iter().zip(&valid[b]) {
                if ok {
                    s += v;
                    n += 1;
                }
            }
        }
        if n == 0 {
            0.0
        } else {
            s / n as f64
        }
    };
    let batch_mean = mean_of(&mut (0..scores.len()));
    (0..scores.len())
        .map(|b| {
            let t = match scope {
                ThresholdScope::Batch => batch_mean,
                ThresholdScope::Image => mean_of(&mut std::iter::once(b)),
            };
            PixelPartition {
                in_a: scores[b].iter().zip(&valid[b]).map(|(&s, &ok)| ok && s > t).collect(),
                valid: valid[b].clone(),
                criterion: Criterion::Divergence(kind),
                threshold: Some(t),
            }
        })
        .collect()
}

/// Single-image JS split; every pixel counts as valid unless `valid` says
/// otherwise.
pub fn partition_by_js(clean: &[Tensor<f64>], adv: &[Tensor<f64>], valid: Option<&[bool]>) -> Result<PixelPartition> {
    let cr: Vec<&Tensor<f64>> = clean.iter().collect();
    let ar: Vec<&Tensor<f64>> = adv.iter().collect();
    let scores = partition_scores(&cr, &ar, Divergence::Js)?;
    let valid = valid.map(|v| v.to_vec()).unwrap_or_else(|| vec![true; scores.len()]);
    Ok(partition_by_divergence(&[scores], &[valid], ThresholdScope::Batch, Divergence::Js).remove(0))
}
