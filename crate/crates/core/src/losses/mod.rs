//! Attack objectives.
//!
//! Every cross-entropy objective is expressed as a per-pixel weight vector:
//! the loss is `Σ_i w_i · CE_i`. The same weights drive the scalar
//! evaluations here and the recorded graph operations in the trainer, so
//! there is exactly one definition of each objective.
//!
//! Sign convention: the attack *maximizes* the stage objectives. Auxiliary
//! terms are stated in minimization form, and [`total_loss`] combines
//! everything into one quantity to minimize.

mod align;
mod attack;
mod auxiliary;

use serde::{Deserialize, Serialize};

use crate::applicator::Stage;
use crate::error::{Error, Result};

pub use align::{alignment_cotangents, gradient_alignment};
pub use attack::{
    cross_entropy_map, divergence_map, Criterion, js_divergence, kl_divergence, partition_by_divergence, partition_by_js,
    partition_scores, stage1_loss, stage1_weights, stage2_loss, stage2_weights, Divergence, PixelPartition,
    ThresholdScope, DIVERGENCE_EPS,
};
pub use auxiliary::{
    attention_hijack_loss, attention_hijack_weights, boundary_disruption_loss, boundary_weights, signed_distance_map,
    squared_distance_transform, total_variation, total_variation_grad,
};

/// Every weight of the unified objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Stage-1 weight on pixels the clean model already gets wrong.
    pub gamma: f64,
    /// Stage-2 weight on low-divergence pixels.
    pub beta: f64,
    pub lambda_attn: f64,
    pub lambda_boundary: f64,
    pub lambda_tv: f64,
    pub lambda_align: f64,
    /// Divergence used to split stage-2 pixels.
    pub divergence: Divergence,
    /// Whether the split threshold is the batch mean or each image's mean.
    pub threshold_scope: ThresholdScope,
    /// Differentiate through both surrogate gradients (`true`) or treat the
    /// alignment term as a constant for the update (`false`).
    pub second_order_align: bool,
    /// Transformer layers used by the attention term; empty means all.
    pub attention_layers: Vec<usize>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 0.7,
            beta: 0.3,
            lambda_attn: 0.1,
            lambda_boundary: 0.2,
            lambda_tv: 1e-4,
            lambda_align: 0.1,
            divergence: Divergence::Js,
            threshold_scope: ThresholdScope::Batch,
            second_order_align: true,
            attention_layers: Vec::new(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("gamma", self.gamma), ("beta", self.beta)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} must lie in [0, 1]")));
            }
        }
        for (name, v) in [
            ("lambda_attn", self.lambda_attn),
            ("lambda_boundary", self.lambda_boundary),
            ("lambda_tv", self.lambda_tv),
            ("lambda_align", self.lambda_align),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} = {v} must be finite and nonnegative")));
            }
        }
        Ok(())
    }
}

/// Unweighted components that [`total_loss`] combines.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    /// Stage objective in minimization form (the negated CE objective).
    pub attack: f64,
    pub attn: f64,
    pub boundary: f64,
    pub tv: f64,
    /// Must be `None` in stage 1.
    pub align: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub attack: f64,
    pub attn: f64,
    pub boundary: f64,
    pub tv: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub align: Option<f64>,
    pub total: f64,
}

/// `attack + λ_attn·attn + λ_b·boundary + λ_tv·tv + 1{stage 2}·λ_align·align`
pub fn total_loss(parts: &LossParts, config: &LossConfig, stage: Stage) -> Result<LossBreakdown> {
    if stage == Stage::Stage1 && parts.align.is_some() {
        return Err(Error::Contract("the alignment term is only defined in stage 2".into()));
    }
    let mut total = parts.attack
        + config.lambda_attn * parts.attn
        + config.lambda_boundary * parts.boundary
        + config.lambda_tv * parts.tv;
    if let Some(a) = parts.align {
        total += config.lambda_align * a;
    }
    if !total.is_finite() {
        return Err(Error::Numeric(format!("total loss is {total}")));
    }
    Ok(LossBreakdown {
        attack: parts.attack,
        attn: parts.attn,
        boundary: parts.boundary,
        tv: parts.tv,
        align: parts.align,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weights_leave_attack_only() {
        let cfg = LossConfig {
            lambda_attn: 0.0,
            lambda_boundary: 0.0,
            lambda_tv: 0.0,
            lambda_align: 0.0,
            ..LossConfig::default()
        };
        let parts = LossParts {
            attack: -1.25,
            attn: -0.3,
            boundary: 4.0,
            tv: 0.2,
            align: Some(0.5),
        };
        assert_eq!(total_loss(&parts, &cfg, Stage::Stage2).unwrap().total, -1.25);
    }

    #[test]
    fn stage1_rejects_alignment() {
        let parts = LossParts {
            align: Some(0.0),
            ..LossParts::default()
        };
        assert!(matches!(
            total_loss(&parts, &LossConfig::default(), Stage::Stage1),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let bad = LossConfig {
            gamma: 1.5,
            ..LossConfig::default()
        };
        assert!(bad.validate().is_err());
        let neg = LossConfig {
            lambda_tv: -1.0,
            ..LossConfig::default()
        };
        assert!(neg.validate().is_err());
    }
}
