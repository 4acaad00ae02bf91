//! Two-stage patch optimization.
//!
//! Stage 1 attacks the transformer surrogate alone. Stage 2 attacks the
//! transformer and the CNN together, splitting pixels by how far the patch
//! already moved each prediction, and (optionally) penalizing disagreement
//! between the two surrogates' patch gradients. Every optimizer step draws
//! a fresh random transform per image.
//!
//! All randomness is derived from the schedule seed and the position in the
//! schedule, so a run restarted from a checkpoint replays exactly.

mod checkpoint;
mod log;
mod step;

use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::applicator::{sample_transform, EotParams, PatchState, Stage};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model_zoo::{Family, LabelMap, SegmentationSample, SurrogateHandle};
use crate::optim::AdamState;
use crate::placement::{
    entropy_and_labels, plan_placement, sensitivity_from_maps, EntropyMap, Placement, PlacementConfig,
    SensitivityReport,
};
use crate::rng::{derive_seed, rng_for};
use crate::tensor::Tensor;

pub use checkpoint::Checkpoint;
pub use log::{mean_breakdown, EpochSummary, LogRecord, PlacementRecord, StageBoundary, StepRecord, TrainLog};
pub use step::{ImageDraw, StepOutcome};

// Seed streams.
const STREAM_BATCH: u64 = 1;
const STREAM_PLACEMENT: u64 = 2;
const STREAM_EOT: u64 = 3;
const STREAM_INIT: u64 = 4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// `θ ← clip(θ − η·sign(∇))`
    #[default]
    SignedGradient,
    Adam,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchInit {
    #[default]
    UniformRandom,
    Gray,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    /// Optimizer steps per batch.
    pub attack_iterations: usize,
    pub optimizer: OptimizerKind,
    pub step_size: f64,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            stage1_epochs: 10,
            stage2_epochs: 10,
            batches_per_epoch: 150,
            batch_size: 2,
            attack_iterations: 7,
            optimizer: OptimizerKind::SignedGradient,
            step_size: 1.0 / 255.0,
            seed: 0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.stage1_epochs + self.stage2_epochs == 0 {
            return Err(Error::Config("schedule has no epochs".into()));
        }
        for (name, v) in [
            ("batches_per_epoch", self.batches_per_epoch),
            ("batch_size", self.batch_size),
            ("attack_iterations", self.attack_iterations),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.step_size.is_finite() && self.step_size >= 0.0) {
            return Err(Error::Config(format!("step_size = {} must be finite and nonnegative", self.step_size)));
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.stage1_epochs + self.stage2_epochs
    }

    pub fn stage_of(&self, epoch: usize) -> Stage {
        if epoch < self.stage1_epochs {
            Stage::Stage1
        } else {
            Stage::Stage2
        }
    }

    /// Optimizer steps in one epoch.
    pub fn steps_per_epoch(&self) -> usize {
        self.batches_per_epoch * self.attack_iterations
    }
}

/// Everything a training run needs besides data and models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainOptions {
    pub loss: LossConfig,
    pub schedule: TrainSchedule,
    pub placement: PlacementConfig,
    pub eot: EotParams,
    pub patch_size: usize,
    pub init: PatchInit,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            schedule: TrainSchedule::default(),
            placement: PlacementConfig::default(),
            eot: EotParams::default(),
            patch_size: 200,
            init: PatchInit::UniformRandom,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.schedule.validate()?;
        self.placement.validate()?;
        self.eot.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.patch_size < 8 {
            return Err(Error::Config(format!("patch_size = {} must be at least 8", self.patch_size)));
        }
        Ok(())
    }
}

/// A fresh patch: i.i.d. uniform noise or flat gray.
pub fn initialize_patch(size: usize, mode: PatchInit, seed: u64) -> Result<PatchState> {
    if size < 8 {
        return Err(Error::Parameter(format!("patch size {size} must be at least 8")));
    }
    match mode {
        PatchInit::Gray => PatchState::filled(size, 0.5),
        PatchInit::UniformRandom => {
            let mut rng = rng_for(seed, &[STREAM_INIT]);
            let data = (0..3 * size * size).map(|_| rng.gen::<f64>()).collect();
            PatchState::new(Tensor::from_vec(&[3, size, size], data))
        }
    }
}

/// Clean-image quantities reused across the run.
pub(crate) struct CleanView {
    pub probs: Tensor<f64>,
    pub prediction: LabelMap,
}

/// Owns the patch and drives the schedule.
pub struct Trainer<'a> {
    opts: TrainOptions,
    dataset: &'a [SegmentationSample],
    models: [&'a SurrogateHandle; 2],
    /// `[image][model]`, filled lazily.
    clean: Vec<[Option<Arc<CleanView>>; 2]>,
    entropy: Vec<Option<Arc<EntropyMap>>>,
    boundary: Vec<Option<Arc<Vec<f64>>>>,
    patch: PatchState,
    adam: Option<AdamState>,
    next_epoch: usize,
    selected_class: usize,
    sensitivity: Option<SensitivityReport>,
    log: TrainLog,
}

pub(crate) const VIT: usize = 0;
pub(crate) const CNN: usize = 1;

impl<'a> Trainer<'a> {
    pub fn new(
        opts: TrainOptions,
        dataset: &'a [SegmentationSample],
        vit: &'a SurrogateHandle,
        cnn: &'a SurrogateHandle,
    ) -> Result<Self> {
        opts.validate()?;
        check_models(vit, cnn, dataset, &opts)?;
        let patch = initialize_patch(opts.patch_size, opts.init, opts.schedule.seed)?;
        let mut t = Self::bare(opts, dataset, vit, cnn, patch);
        t.scan()?;
        Ok(t)
    }

    fn bare(
        opts: TrainOptions,
        dataset: &'a [SegmentationSample],
        vit: &'a SurrogateHandle,
        cnn: &'a SurrogateHandle,
        patch: PatchState,
    ) -> Self {
        let adam = (opts.schedule.optimizer == OptimizerKind::Adam).then(|| AdamState::new(patch.pixels.len()));
        let n = dataset.len();
        Self {
            opts,
            dataset,
            models: [vit, cnn],
            clean: (0..n).map(|_| [None, None]).collect(),
            entropy: vec![None; n],
            boundary: vec![None; n],
            patch,
            adam,
            next_epoch: 0,
            selected_class: 0,
            sensitivity: None,
            log: TrainLog::default(),
        }
    }

    /// Most sensitive class under the transformer surrogate.
    fn scan(&mut self) -> Result<()> {
        let mut maps = Vec::with_capacity(self.dataset.len());
        for i in 0..self.dataset.len() {
            let out = self.models[VIT].forward(&self.dataset[i].image)?;
            let (e, labels) = entropy_and_labels(&out, &self.dataset[i], self.opts.placement.label_source)?;
            let pred = out.prediction();
            self.store_clean(i, VIT, out.probabilities, pred);
            self.entropy[i] = Some(Arc::new(e.clone()));
            maps.push((e, labels));
        }
        let report = sensitivity_from_maps(&maps, self.models[VIT].num_classes(), self.opts.placement.averaging)?;
        self.selected_class = report.selected_class;
        self.log.selected_class = report.selected_class;
        self.sensitivity = Some(report);
        Ok(())
    }

    fn store_clean(&mut self, image: usize, model: usize, probs: Tensor<f64>, prediction: LabelMap) {
        self.clean[image][model] = Some(Arc::new(CleanView { probs, prediction }));
    }

    pub(crate) fn clean(&mut self, image: usize, model: usize) -> Result<Arc<CleanView>> {
        if let Some(c) = &self.clean[image][model] {
            return Ok(c.clone());
        }
        let out = self.models[model].forward(&self.dataset[image].image)?;
        let pred = out.prediction();
        self.store_clean(image, model, out.probabilities, pred);
        Ok(self.clean[image][model].clone().expect("just stored"))
    }

    fn entropy(&mut self, image: usize) -> Result<Arc<EntropyMap>> {
        if let Some(e) = &self.entropy[image] {
            return Ok(e.clone());
        }
        let c = self.clean(image, VIT)?;
        let e = Arc::new(crate::placement::compute_entropy_map(&c.probs)?);
        self.entropy[image] = Some(e.clone());
        Ok(e)
    }

    pub(crate) fn boundary_weights(&mut self, image: usize) -> Result<Arc<Vec<f64>>> {
        if let Some(b) = &self.boundary[image] {
            return Ok(b.clone());
        }
        let w = crate::losses::boundary_weights(&self.dataset[image].labels, self.models[VIT].num_classes())?;
        self.boundary[image] = Some(w.clone());
        Ok(w)
    }

    pub fn patch(&self) -> &PatchState {
        &self.patch
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    pub fn options(&self) -> &TrainOptions {
        &self.opts
    }

    pub fn selected_class(&self) -> usize {
        self.selected_class
    }

    pub fn sensitivity(&self) -> Option<&SensitivityReport> {
        self.sensitivity.as_ref()
    }

    pub fn next_epoch(&self) -> usize {
        self.next_epoch
    }

    pub fn is_finished(&self) -> bool {
        self.next_epoch >= self.opts.schedule.total_epochs()
    }

    /// Placement for one image in one epoch (shared by every step of that
    /// epoch), and whether the sensitive strategy fell back to a uniform draw.
    pub fn placement_for(&mut self, epoch: usize, image: usize) -> Result<(Placement, bool)> {
        let clean = self.clean(image, VIT)?;
        let entropy = self.entropy(image)?;
        let seed = derive_seed(self.opts.schedule.seed, &[STREAM_PLACEMENT, epoch as u64, image as u64]);
        plan_placement(
            &clean.prediction,
            &entropy,
            self.selected_class,
            self.opts.patch_size,
            &self.opts.placement,
            seed,
        )
    }

    /// Image indices for every batch of `epoch`, drawn uniformly.
    pub fn epoch_batches(&self, epoch: usize) -> Vec<Vec<usize>> {
        let s = &self.opts.schedule;
        let mut rng = rng_for(s.seed, &[STREAM_BATCH, epoch as u64]);
        (0..s.batches_per_epoch)
            .map(|_| (0..s.batch_size).map(|_| rng.gen_range(0..self.dataset.len())).collect())
            .collect()
    }

    /// Runs one epoch.
    pub fn run_epoch(&mut self) -> Result<()> {
        if self.is_finished() {
            return Err(Error::Contract("schedule already complete".into()));
        }
        let epoch = self.next_epoch;
        let schedule = self.opts.schedule.clone();
        let stage = schedule.stage_of(epoch);
        if stage != self.patch.stage || self.log.stage_boundaries.is_empty() {
            self.log.stage_boundaries.push(StageBoundary {
                stage,
                epoch,
                first_step: self.log.steps.len(),
            });
        }
        self.patch.stage = stage;
        let started = Instant::now();
        let first_step = self.log.steps.len();

        let batches = self.epoch_batches(epoch);
        let mut placements = std::collections::BTreeMap::new();
        for (b, batch) in batches.iter().enumerate() {
            let mut draws_base = Vec::with_capacity(batch.len());
            for &img in batch {
                let placed = match placements.get(&img) {
                    Some(p) => *p,
                    None => {
                        let p = self.placement_for(epoch, img)?;
                        placements.insert(img, p);
                        self.log.placements.push(PlacementRecord {
                            epoch,
                            image: img,
                            top_left: p.0.top_left,
                            strategy: p.0.strategy,
                            fallback: p.1,
                        });
                        p
                    }
                };
                draws_base.push((img, placed.0));
            }
            for it in 0..schedule.attack_iterations {
                let draws = draws_base
                    .iter()
                    .enumerate()
                    .map(|(slot, &(image, placement))| {
                        let seed = derive_seed(
                            schedule.seed,
                            &[STREAM_EOT, epoch as u64, b as u64, it as u64, slot as u64],
                        );
                        Ok(ImageDraw {
                            image,
                            placement,
                            transform: sample_transform(&self.opts.eot, seed)?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let outcome = self.attack_iteration(&draws, stage).map_err(|e| match e {
                    Error::Numeric(reason) => Error::Diverged {
                        epoch,
                        batch: b,
                        iteration: it,
                        reason,
                    },
                    other => other,
                })?;
                self.log.steps.push(StepRecord {
                    step: self.log.steps.len(),
                    epoch,
                    batch: b,
                    iteration: it,
                    stage,
                    losses: outcome.losses,
                });
            }
        }
        let steps = &self.log.steps[first_step..];
        self.log.epochs.push(EpochSummary {
            epoch,
            stage,
            steps: steps.len(),
            mean: mean_breakdown(steps.iter().map(|s| &s.losses)),
            wall_clock_secs: started.elapsed().as_secs_f64(),
        });
        self.next_epoch += 1;
        Ok(())
    }

    /// Runs the remaining schedule, calling `on_epoch` after every epoch.
    pub fn run_with(&mut self, mut on_epoch: impl FnMut(&Trainer<'a>) -> Result<()>) -> Result<()> {
        while !self.is_finished() {
            self.run_epoch()?;
            on_epoch(self)?;
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_with(|_| Ok(()))
    }

    pub fn into_parts(self) -> (PatchState, TrainLog) {
        (self.patch, self.log)
    }
}

fn check_models(vit: &SurrogateHandle, cnn: &SurrogateHandle, dataset: &[SegmentationSample], opts: &TrainOptions) -> Result<()> {
    if vit.family != Family::Vit {
        return Err(Error::Contract(format!("{} is not a transformer surrogate", vit.name)));
    }
    if cnn.family != Family::Cnn {
        return Err(Error::Contract(format!("{} is not a CNN surrogate", cnn.name)));
    }
    if vit.num_classes() != cnn.num_classes() {
        return Err(Error::Contract(format!(
            "surrogates disagree on class count ({} vs {})",
            vit.num_classes(),
            cnn.num_classes()
        )));
    }
    if dataset.is_empty() {
        return Err(Error::Parameter("training needs a nonempty dataset".into()));
    }
    let layers = match vit.architecture() {
        crate::model_zoo::Architecture::Vit(v) => v.layers,
        _ => 0,
    };
    if let Some(&l) = opts.loss.attention_layers.iter().find(|&&l| l >= layers) {
        return Err(Error::Config(format!("attention layer {l} does not exist ({layers} layers)")));
    }
    for s in dataset {
        s.validate(Some(vit.num_classes()))?;
        let (h, w) = (s.height(), s.width());
        if opts.patch_size > h.min(w) {
            return Err(Error::Config(format!("patch size {} does not fit {h}x{w} images", opts.patch_size)));
        }
        vit.check_input(h, w)?;
        cnn.check_input(h, w)?;
    }
    Ok(())
}

/// Runs the full schedule.
pub fn train(
    opts: &TrainOptions,
    dataset: &[SegmentationSample],
    vit: &SurrogateHandle,
    cnn: &SurrogateHandle,
) -> Result<(PatchState, TrainLog)> {
    let mut t = Trainer::new(opts.clone(), dataset, vit, cnn)?;
    t.run()?;
    Ok(t.into_parts())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_modes() {
        let g = initialize_patch(16, PatchInit::Gray, 0).unwrap();
        assert!(g.pixels.data().iter().all(|&v| v == 0.5));
        let a = initialize_patch(200, PatchInit::UniformRandom, 3).unwrap();
        let b = initialize_patch(200, PatchInit::UniformRandom, 3).unwrap();
        assert_eq!(a, b);
        let mean = a.pixels.sum() / a.pixels.len() as f64;
        assert!((mean - 0.5).abs() < 0.01);
        assert!(initialize_patch(4, PatchInit::Gray, 0).is_err());
    }

    #[test]
    fn schedule_defaults_and_stage_switch() {
        let s = TrainSchedule::default();
        assert_eq!(s.total_epochs(), 20);
        assert_eq!(s.stage_of(9), Stage::Stage1);
        assert_eq!(s.stage_of(10), Stage::Stage2);
        assert_eq!((s.batches_per_epoch, s.batch_size, s.attack_iterations), (150, 2, 7));
    }

    fn fixture() -> (Vec<SegmentationSample>, SurrogateHandle, SurrogateHandle) {
        (
            crate::model_zoo::generate_synthetic_dataset(3, (32, 32), 5, 21).unwrap(),
            crate::model_zoo::make_toy_vit(8, 2, 5, 22).unwrap(),
            crate::model_zoo::make_toy_cnn(6, 5, 23).unwrap(),
        )
    }

    fn small(optimizer: OptimizerKind) -> TrainOptions {
        TrainOptions {
            schedule: TrainSchedule {
                stage1_epochs: 2,
                stage2_epochs: 2,
                batches_per_epoch: 2,
                batch_size: 2,
                attack_iterations: 2,
                optimizer,
                step_size: 0.01,
                seed: 9,
            },
            patch_size: 10,
            ..TrainOptions::default()
        }
    }

    fn strip_clock(mut log: TrainLog) -> TrainLog {
        log.epochs.iter_mut().for_each(|e| e.wall_clock_secs = 0.0);
        log
    }

    #[test]
    fn step_accounting_and_stage_logging() {
        let (data, vit, cnn) = fixture();
        let (patch, log) = train(&small(OptimizerKind::SignedGradient), &data, &vit, &cnn).unwrap();
        assert_eq!(log.steps.len(), 4 * 2 * 2);
        assert_eq!(patch.step_count, 16);
        assert_eq!(patch.stage, Stage::Stage2);
        assert_eq!(log.stage_boundaries.len(), 2);
        assert_eq!(log.stage_boundaries[1].first_step, 8);
        assert!(log.stage_steps(Stage::Stage1).all(|s| s.losses.align.is_none()));
        assert!(log.stage_steps(Stage::Stage2).all(|s| s.losses.align.is_some()));
        assert_eq!(log.epochs.len(), 4);
        assert!(patch.pixels.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn runs_are_deterministic() {
        let (data, vit, cnn) = fixture();
        let o = small(OptimizerKind::SignedGradient);
        let (p1, l1) = train(&o, &data, &vit, &cnn).unwrap();
        let (p2, l2) = train(&o, &data, &vit, &cnn).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(strip_clock(l1), strip_clock(l2));
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (data, vit, cnn) = fixture();
        for opt in [OptimizerKind::SignedGradient, OptimizerKind::Adam] {
            let o = small(opt);
            let (full, full_log) = train(&o, &data, &vit, &cnn).unwrap();

            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("ckpt.json");
            let mut t = Trainer::new(o.clone(), &data, &vit, &cnn).unwrap();
            t.run_epoch().unwrap();
            t.run_epoch().unwrap();
            t.run_epoch().unwrap();
            t.checkpoint("abc").save(&path).unwrap();
            drop(t);

            let ck = Checkpoint::load(&path).unwrap();
            assert_eq!(ck.config_hash, "abc");
            let mut r = Trainer::resume(&ck, &data, &vit, &cnn).unwrap();
            assert_eq!(r.next_epoch(), 3);
            r.run().unwrap();
            let (p, l) = r.into_parts();
            assert_eq!(p, full, "{opt:?}");
            assert_eq!(strip_clock(l), strip_clock(full_log.clone()));
        }
    }

    #[test]
    fn rejects_mismatched_surrogates() {
        let (data, vit, cnn) = fixture();
        let o = small(OptimizerKind::SignedGradient);
        assert!(matches!(Trainer::new(o.clone(), &data, &cnn, &vit), Err(Error::Contract(_))));
        let other = crate::model_zoo::make_toy_cnn(6, 4, 1).unwrap();
        assert!(matches!(Trainer::new(o.clone(), &data, &vit, &other), Err(Error::Contract(_))));
        let mut big = o;
        big.patch_size = 40;
        assert!(matches!(Trainer::new(big, &data, &vit, &cnn), Err(Error::Config(_))));
    }
}
