//! One optimizer step over a batch.

use std::sync::Arc;

use crate::applicator::{apply_patch, build_warp, footprint_token_mask_at, Stage, Transform, Warp};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::losses::{
    alignment_cotangents, attention_hijack_weights, gradient_alignment, partition_by_divergence, partition_scores,
    stage1_weights, stage2_weights, total_loss, total_variation, total_variation_grad, LossBreakdown, LossParts,
    PixelPartition,
};
use crate::model_zoo::{ForwardVars, SurrogateHandle};
use crate::optim::sign;
use crate::placement::Placement;
use crate::tensor::{Dual, Scalar, Tensor};

use super::{OptimizerKind, Trainer, CNN, VIT};

/// Graphs for a whole batch are kept between the partition pass and the
/// gradient pass only while `pixels × batch` stays under this.
const RETAIN_PIXELS: usize = 1 << 20;

/// One image of a batch with its placement and sampled transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageDraw {
    pub image: usize,
    pub placement: Placement,
    pub transform: Transform,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    /// Loss terms evaluated at the patch before the update.
    pub losses: LossBreakdown,
}

struct Recorded<T: Scalar> {
    g: Graph<T>,
    theta: Var,
    fv: ForwardVars,
}

fn record<T: Scalar>(model: &SurrogateHandle, image: &Tensor<f64>, theta: Tensor<T>, warp: &Warp) -> Result<Recorded<T>> {
    let mut g = Graph::new();
    let th = g.leaf(theta, true);
    let base = g.constant(image.cast());
    let x = g.composite(th, base, warp.map.clone());
    let fv = model.forward_graph(&mut g, x, false)?;
    Ok(Recorded { g, theta: th, fv })
}

/// What one (image, surrogate) graph contributes.
struct GraphEval {
    ce: f64,
    attn: f64,
    boundary: f64,
    /// Gradient of this graph's share of the minimized objective.
    total_grad: Vec<f64>,
    /// Gradient of the CE term alone (stage 2 only).
    ce_grad: Option<Vec<f64>>,
}

struct AuxScales {
    attn: f64,
    boundary: f64,
}

fn flat(g: Option<Tensor<f64>>, len: usize) -> Vec<f64> {
    g.map(|t| t.into_data()).unwrap_or_else(|| vec![0.0; len])
}

impl Trainer<'_> {
    /// Computes the objective's gradient at the current patch and takes one
    /// optimizer step.
    pub fn attack_iteration(&mut self, draws: &[ImageDraw], stage: Stage) -> Result<StepOutcome> {
        let (grad, losses) = self.objective_gradient(draws, stage)?;
        let plen = grad.len();
        let eta = self.opts.schedule.step_size;
        let dir: Vec<f64> = match self.opts.schedule.optimizer {
            OptimizerKind::SignedGradient => grad.iter().map(|&g| sign(g)).collect(),
            OptimizerKind::Adam => self.adam.get_or_insert_with(|| crate::optim::AdamState::new(plen)).direction(&grad),
        };
        for (p, d) in self.patch.pixels.data_mut().iter_mut().zip(&dir) {
            *p = (*p - eta * d).clamp(0.0, 1.0);
        }
        self.patch.step_count += 1;
        Ok(StepOutcome { losses })
    }

    /// Replaces the patch pixels, e.g. to probe the objective elsewhere.
    pub fn set_patch_pixels(&mut self, pixels: Tensor<f64>) -> Result<()> {
        if pixels.shape() != self.patch.pixels.shape() {
            return Err(Error::Parameter(format!(
                "patch shape {:?} does not match {:?}",
                pixels.shape(),
                self.patch.pixels.shape()
            )));
        }
        if pixels.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Domain("patch pixels must lie in [0, 1]".into()));
        }
        self.patch.pixels = pixels;
        Ok(())
    }

    /// Gradient of the minimized objective with respect to the patch, and
    /// the loss terms, at the current patch. Does not update anything.
    pub fn objective_gradient(&mut self, draws: &[ImageDraw], stage: Stage) -> Result<(Vec<f64>, LossBreakdown)> {
        if draws.is_empty() {
            return Err(Error::Parameter("empty batch".into()));
        }
        let theta = self.patch.pixels.clone();
        let plen = theta.len();
        let b = draws.len();
        let c = self.models[VIT].num_classes();
        let cfg = self.opts.loss.clone();

        let mut warps = Vec::with_capacity(b);
        for d in draws {
            let s = &self.dataset[d.image];
            warps.push(build_warp((s.height(), s.width()), &d.placement, &d.transform)?);
        }
        let targets: Vec<Arc<Vec<usize>>> = draws
            .iter()
            .map(|d| Arc::new(self.dataset[d.image].labels.data.iter().map(|&l| if l < c { l } else { 0 }).collect()))
            .collect();

        let active: &[usize] = match stage {
            Stage::Stage1 => &[VIT],
            Stage::Stage2 => &[VIT, CNN],
        };
        let pixels: usize = draws.iter().map(|d| self.dataset[d.image].labels.data.len()).sum();
        let retain = pixels <= RETAIN_PIXELS;

        // CE weights per image (shared by every active surrogate).
        let mut retained: Vec<Vec<Option<Recorded<f64>>>> = (0..b).map(|_| Vec::new()).collect();
        let weights: Vec<Arc<Vec<f64>>> = match stage {
            Stage::Stage1 => {
                let mut parts = Vec::with_capacity(b);
                for d in draws {
                    let clean = self.clean(d.image, VIT)?;
                    parts.push(PixelPartition::from_clean_correctness(&self.dataset[d.image].labels, &clean.prediction, c));
                }
                let refs: Vec<&PixelPartition> = parts.iter().collect();
                stage1_weights(&refs, cfg.gamma)?.into_iter().map(Arc::new).collect()
            }
            Stage::Stage2 => {
                let mut scores = Vec::with_capacity(b);
                let mut valid = Vec::with_capacity(b);
                for (i, d) in draws.iter().enumerate() {
                    let sample = &self.dataset[d.image];
                    let mut clean = Vec::new();
                    let mut adv = Vec::new();
                    for &m in active {
                        clean.push(self.clean(d.image, m)?);
                        if retain {
                            let rec = record(self.models[m], &sample.image, theta.clone(), &warps[i])?;
                            let mut g2 = Graph::<f64>::new();
                            let l = g2.constant(rec.g.value(rec.fv.logits).clone());
                            let p = g2.softmax(l, 0);
                            adv.push(g2.value(p).clone());
                            retained[i].push(Some(rec));
                        } else {
                            let applied = apply_patch(&sample.image, &self.patch, &d.placement, &d.transform)?;
                            adv.push(self.models[m].forward(&applied.image)?.probabilities);
                        }
                    }
                    let cr: Vec<&Tensor<f64>> = clean.iter().map(|c| &c.probs).collect();
                    let ar: Vec<&Tensor<f64>> = adv.iter().collect();
                    scores.push(partition_scores(&cr, &ar, cfg.divergence)?);
                    valid.push(sample.labels.data.iter().map(|&l| l < c).collect::<Vec<bool>>());
                }
                let parts = partition_by_divergence(&scores, &valid, cfg.threshold_scope, cfg.divergence);
                let refs: Vec<&PixelPartition> = parts.iter().collect();
                stage2_weights(&refs, cfg.beta, active.len())?.into_iter().map(Arc::new).collect()
            }
        };

        let split = stage == Stage::Stage2;
        let scales = AuxScales {
            attn: 1.0 / b as f64,
            boundary: 1.0 / (b * active.len()) as f64,
        };
        let mut grad = vec![0.0; plen];
        let mut ce_grads = vec![vec![0.0; plen]; active.len()];
        let (mut ce_total, mut attn_total, mut boundary_total) = (0.0, 0.0, 0.0);
        for (i, d) in draws.iter().enumerate() {
            for (k, &m) in active.iter().enumerate() {
                let rec = match retained[i].get_mut(k).and_then(|r| r.take()) {
                    Some(r) => r,
                    None => record(self.models[m], &self.dataset[d.image].image, theta.clone(), &warps[i])?,
                };
                let bw = self.boundary_weights(d.image)?;
                let ev = self.eval_graph(rec, m, &warps[i], &targets[i], &weights[i], &bw, &scales, split)?;
                ce_total += ev.ce;
                attn_total += ev.attn;
                boundary_total += ev.boundary;
                for (a, v) in grad.iter_mut().zip(&ev.total_grad) {
                    *a += v;
                }
                if let Some(g) = ev.ce_grad {
                    for (a, v) in ce_grads[k].iter_mut().zip(&g) {
                        *a += v;
                    }
                }
            }
        }

        let align = if split {
            let a = gradient_alignment(&ce_grads[0], &ce_grads[1])?;
            if cfg.lambda_align > 0.0 {
                let (da, db) = alignment_cotangents(&ce_grads[0], &ce_grads[1])?;
                let mut hv = vec![0.0; plen];
                let sides: &[(usize, &Vec<f64>)] = if cfg.second_order_align {
                    &[(VIT, &da), (CNN, &db)]
                } else {
                    &[(VIT, &da)]
                };
                for &(m, v) in sides {
                    for (i, d) in draws.iter().enumerate() {
                        let h = self.hessian_vector(m, d.image, &theta, v, &warps[i], &targets[i], &weights[i])?;
                        for (a, x) in hv.iter_mut().zip(&h) {
                            *a += x;
                        }
                    }
                }
                for (a, x) in grad.iter_mut().zip(&hv) {
                    *a += cfg.lambda_align * x;
                }
            }
            Some(a)
        } else {
            None
        };

        let tv = total_variation(&theta);
        if cfg.lambda_tv > 0.0 {
            for (a, x) in grad.iter_mut().zip(total_variation_grad(&theta).data()) {
                *a += cfg.lambda_tv * x;
            }
        }
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite patch gradient".into()));
        }

        let parts = LossParts {
            attack: -ce_total,
            attn: attn_total,
            boundary: boundary_total,
            tv,
            align,
        };
        Ok((grad, total_loss(&parts, &cfg, stage)?))
    }

    #[allow(clippy::too_many_arguments)]
    fn eval_graph(
        &self,
        rec: Recorded<f64>,
        model: usize,
        warp: &Warp,
        targets: &Arc<Vec<usize>>,
        weights: &Arc<Vec<f64>>,
        boundary_weights: &Arc<Vec<f64>>,
        scales: &AuxScales,
        split: bool,
    ) -> Result<GraphEval> {
        let Recorded { mut g, theta, fv } = rec;
        let plen = g.value(theta).len();
        let cfg = &self.opts.loss;
        let ce = g.weighted_cross_entropy(fv.logits, targets.clone(), weights.clone());
        let ce_value = g.value(ce).data()[0];

        let mut aux: Option<Var> = None;
        let mut push = |g: &mut Graph<f64>, v: Var, k: f64| {
            if k != 0.0 {
                let s = g.scale(v, k);
                aux = Some(match aux {
                    Some(a) => g.add(a, s),
                    None => s,
                });
            }
        };

        let mut attn_value = 0.0;
        if model == VIT && !fv.attention.is_empty() {
            if let Some((rows, cols)) = fv.token_grid {
                let m = self.models[VIT];
                let ts = m.token_size().unwrap_or(1);
                let working = m.working_size(warp.footprint.height, warp.footprint.width);
                let mask = footprint_token_mask_at(&warp.footprint, working, ts)?;
                if (mask.height, mask.width) != (rows, cols) {
                    return Err(Error::Contract(format!(
                        "token mask {}x{} does not match the {rows}x{cols} grid",
                        mask.height, mask.width
                    )));
                }
                if mask.count() > 0 {
                    let layers: Vec<usize> = if cfg.attention_layers.is_empty() {
                        (0..fv.attention.len()).collect()
                    } else {
                        cfg.attention_layers.clone()
                    };
                    let w = attention_hijack_weights(rows * cols, &mask.data, layers.len());
                    let mut acc: Option<Var> = None;
                    for &l in &layers {
                        let d = g.dot_const(fv.attention[l], w.clone());
                        acc = Some(match acc {
                            Some(a) => g.add(a, d),
                            None => d,
                        });
                    }
                    if let Some(a) = acc {
                        attn_value = g.value(a).data()[0] * scales.attn;
                        push(&mut g, a, cfg.lambda_attn * scales.attn);
                    }
                }
            }
        }

        let probs = g.softmax(fv.logits, 0);
        let bnd = g.dot_const(probs, boundary_weights.clone());
        let boundary_value = g.value(bnd).data()[0] * scales.boundary;
        push(&mut g, bnd, cfg.lambda_boundary * scales.boundary);

        let (total_grad, ce_grad) = if split {
            let gc = flat(g.backward(ce).take(theta), plen);
            let mut total: Vec<f64> = gc.iter().map(|v| -v).collect();
            if let Some(a) = aux {
                for (t, v) in total.iter_mut().zip(flat(g.backward(a).take(theta), plen)) {
                    *t += v;
                }
            }
            (total, Some(gc))
        } else {
            let neg = g.scale(ce, -1.0);
            let obj = match aux {
                Some(a) => g.add(neg, a),
                None => neg,
            };
            (flat(g.backward(obj).take(theta), plen), None)
        };
        Ok(GraphEval {
            ce: ce_value,
            attn: attn_value,
            boundary: boundary_value,
            total_grad,
            ce_grad,
        })
    }

    /// `H·v` of one surrogate's weighted CE with respect to the patch,
    /// via reverse mode over dual numbers.
    #[allow(clippy::too_many_arguments)]
    fn hessian_vector(
        &self,
        model: usize,
        image: usize,
        theta: &Tensor<f64>,
        v: &[f64],
        warp: &Warp,
        targets: &Arc<Vec<usize>>,
        weights: &Arc<Vec<f64>>,
    ) -> Result<Vec<f64>> {
        let rec = record::<Dual>(self.models[model], &self.dataset[image].image, theta.with_tangent(v), warp)?;
        let Recorded { mut g, theta, fv } = rec;
        let ce = g.weighted_cross_entropy(fv.logits, targets.clone(), weights.clone());
        let mut grads = g.backward(ce);
        Ok(grads
            .take(theta)
            .map(|t| t.tangent().into_data())
            .unwrap_or_else(|| vec![0.0; v.len()]))
    }
}
