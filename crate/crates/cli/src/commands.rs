use std::path::{Path, PathBuf};

use segpatch::applicator::{load_patch, save_patch, PatchState};
use segpatch::evaluation::{evaluate_patch, run_ablations, AblationSuite, EvaluationReport, PlacementGuide};
use segpatch::model_zoo::{
    generate_synthetic_dataset, load_adapter_config, load_dataset, make_toy_cnn, make_toy_vit_with_dim, pretrain,
    scene_roles, Family, ModelWeights, Preprocessing, SegmentationSample, SurrogateHandle,
};
use segpatch::placement::{sensitivity_scan_with, write_bar_chart, SensitivityReport};
use segpatch::trainer::{Checkpoint, LogRecord, TrainLog, TrainSchedule, Trainer};
use segpatch::{Error, Result};

use crate::config::{sha256_hex, DataSource, ModelKind, ModelSpec, RunConfig};

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum Failure {
    /// Bad input detected before any work; nothing was written.
    Validation(Error),
    Runtime(Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }

    pub fn error(&self) -> &Error {
        match self {
            Failure::Validation(e) | Failure::Runtime(e) => e,
        }
    }
}

fn is_validation(e: &Error) -> bool {
    matches!(
        e,
        Error::Config(_) | Error::Parameter(_) | Error::Load { .. } | Error::Ingestion(_) | Error::PatchFormat { .. } | Error::Contract(_)
    )
}

/// Classifies by error kind: input problems are validation failures.
fn classify(e: Error) -> Failure {
    if is_validation(&e) {
        Failure::Validation(e)
    } else {
        Failure::Runtime(e)
    }
}

fn runtime(e: Error) -> Failure {
    Failure::Runtime(e)
}

pub type CmdResult<T = ()> = std::result::Result<T, Failure>;

pub struct Data {
    pub train: Vec<SegmentationSample>,
    pub eval: Vec<SegmentationSample>,
}

/// Loads both splits. `cap` limits how many images of each split are read
/// or generated.
pub fn load_data(cfg: &RunConfig, cap: Option<(usize, usize)>) -> Result<Data> {
    let d = &cfg.data;
    let (mut train, mut eval) = match d.source {
        DataSource::Synthetic => {
            let (nt, ne) = cap.map_or((d.train_images, d.eval_images), |(a, b)| (a.min(d.train_images), b.min(d.eval_images)));
            (
                generate_synthetic_dataset(nt, (d.height, d.width), d.num_classes, d.train_seed)?,
                generate_synthetic_dataset(ne, (d.height, d.width), d.num_classes, d.eval_seed)?,
            )
        }
        DataSource::Directory => {
            let root = d.root.as_ref().ok_or_else(|| Error::Config("data.root is required".into()))?;
            (
                load_dataset(root, &d.train_split, (d.height, d.width))?,
                load_dataset(root, &d.eval_split, (d.height, d.width))?,
            )
        }
    };
    if let Some((a, b)) = cap {
        train.truncate(a);
        eval.truncate(b);
    }
    for s in train.iter().chain(&eval) {
        s.validate(Some(d.num_classes)).map_err(|e| Error::Ingestion(e.to_string()))?;
    }
    Ok(Data { train, eval })
}

pub struct Models {
    pub vit: SurrogateHandle,
    pub cnn: SurrogateHandle,
    pub targets: Vec<SurrogateHandle>,
}

impl Models {
    /// Surrogates first, then held-out targets.
    pub fn all(&self) -> Vec<&SurrogateHandle> {
        let mut v = vec![&self.vit, &self.cnn];
        v.extend(&self.targets);
        v
    }
}

fn build_untrained(spec: &ModelSpec, num_classes: usize) -> Result<SurrogateHandle> {
    let seed = spec.seed.unwrap_or(0);
    let h = match spec.kind {
        ModelKind::ToyVit => make_toy_vit_with_dim(
            spec.token_size.unwrap_or(32),
            spec.layers.unwrap_or(2),
            spec.dim.unwrap_or(32),
            num_classes,
            seed,
        )?,
        ModelKind::ToyCnn => make_toy_cnn(spec.channels.unwrap_or(8), num_classes, seed)?,
        ModelKind::Adapter => unreachable!("adapters are loaded, not built"),
    };
    h.with_downscale(spec.downscale.unwrap_or(1.0))
}

/// Builds one model. Toy models marked for pretraining are trained on
/// `train` once and cached under `<out>/models`.
pub fn build_model(cfg: &RunConfig, spec: &ModelSpec, train: &[SegmentationSample], allow_pretrain: bool) -> Result<SurrogateHandle> {
    let name = spec.display_name();
    if spec.kind == ModelKind::Adapter {
        let path = spec.adapter.as_ref().expect("validated");
        let h = load_adapter_config(path)?.build()?;
        if h.num_classes() != cfg.data.num_classes {
            return Err(Error::Contract(format!(
                "{name}: model predicts {} classes, data has {}",
                h.num_classes(),
                cfg.data.num_classes
            )));
        }
        return Ok(h.with_name(name));
    }
    let base = build_untrained(spec, cfg.data.num_classes)?.with_name(name.clone());
    if !(allow_pretrain && spec.pretrain.unwrap_or(false)) {
        return Ok(base);
    }
    let mut opts = cfg.pretrain.clone();
    if let Some(s) = spec.pretrain_seed {
        opts.seed = s;
    }
    let key = sha256_hex(
        format!(
            "{}\n{}\n{}",
            toml::to_string(spec).expect("spec serializes"),
            toml::to_string(&opts).expect("options serialize"),
            toml::to_string(&cfg.data).expect("data serializes"),
        )
        .as_bytes(),
    );
    let cache = cfg.out_dir.join("models").join(format!("{name}-{}.json", &key[..16]));
    if cache.exists() {
        let w = ModelWeights::load(&cache)?;
        let arch = w.into_architecture()?;
        return SurrogateHandle::new(name, arch, Preprocessing::default()).with_downscale(spec.downscale.unwrap_or(1.0));
    }
    let trained = pretrain(&base, train, &opts)?;
    std::fs::create_dir_all(cache.parent().expect("has parent"))?;
    ModelWeights::from_handle(&trained).save(&cache)?;
    Ok(trained)
}

pub fn build_models(cfg: &RunConfig, train: &[SegmentationSample], allow_pretrain: bool) -> Result<Models> {
    let vit = build_model(cfg, &cfg.models.vit, train, allow_pretrain)?;
    let cnn = build_model(cfg, &cfg.models.cnn, train, allow_pretrain)?;
    if vit.family != Family::Vit || cnn.family != Family::Cnn {
        return Err(Error::Contract("models.vit must be a transformer and models.cnn a CNN".into()));
    }
    let targets = cfg
        .models
        .targets
        .iter()
        .map(|t| build_model(cfg, t, train, allow_pretrain))
        .collect::<Result<Vec<_>>>()?;
    Ok(Models { vit, cnn, targets })
}

fn class_names(n: usize) -> Vec<String> {
    if n >= 4 {
        scene_roles(n).into_iter().map(|r| r.name()).collect()
    } else {
        (0..n).map(|c| format!("class{c}")).collect()
    }
}

/// Creates the output directory and writes the resolved config there.
fn prepare_out(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    let text = format!("# config hash {}\n{}", cfg.hash(), cfg.to_toml());
    std::fs::write(cfg.out_dir.join("resolved_config.toml"), text)?;
    Ok(())
}

fn scan(cfg: &RunConfig, vit: &SurrogateHandle, train: &[SegmentationSample]) -> Result<SensitivityReport> {
    sensitivity_scan_with(vit, train, cfg.placement.label_source, cfg.placement.averaging)
}

pub fn cmd_sensitivity(cfg: &RunConfig) -> CmdResult {
    let data = load_data(cfg, None).map_err(classify)?;
    let vit = build_vit(cfg, &data.train).map_err(classify)?;
    let report = scan(cfg, &vit, &data.train).map_err(runtime)?;
    let names = class_names(cfg.data.num_classes);
    (|| -> Result<()> {
        prepare_out(cfg)?;
        let out = &cfg.out_dir;
        std::fs::write(out.join("sensitivity.txt"), report.to_table(Some(&names)))?;
        let mut csv = String::from("class,name,score,images_present\n");
        for (c, s) in report.per_class_scores.iter().enumerate() {
            csv.push_str(&format!("{c},{},{s:.6},{}\n", names[c], report.presence_counts[c]));
        }
        std::fs::write(out.join("sensitivity.csv"), csv)?;
        std::fs::write(out.join("sensitivity.json"), serde_json::to_string_pretty(&report)?)?;
        write_bar_chart(&out.join("sensitivity.png"), &report.per_class_scores, Some(report.selected_class))?;
        Ok(())
    })()
    .map_err(runtime)?;
    print!("{}", report.to_table(Some(&names)));
    println!("selected class: {} ({})", report.selected_class, names[report.selected_class]);
    Ok(())
}

fn build_vit(cfg: &RunConfig, train: &[SegmentationSample]) -> Result<SurrogateHandle> {
    let vit = build_model(cfg, &cfg.models.vit, train, true)?;
    if vit.family != Family::Vit {
        return Err(Error::Contract("models.vit must be a transformer".into()));
    }
    Ok(vit)
}

fn log_header(cfg: &RunConfig) -> LogRecord {
    LogRecord::Config {
        hash: cfg.hash(),
        config: serde_json::to_value(cfg).expect("config serializes"),
    }
}

fn write_train_outputs(cfg: &RunConfig, dir: &Path, patch: &PatchState, log: &TrainLog) -> Result<()> {
    save_patch(&dir.join("patch.png"), patch, &cfg.hash(), &cfg.eot)?;
    log.write_jsonl(&dir.join("train_log.jsonl"), Some(log_header(cfg)))?;
    Ok(())
}

pub struct TrainArgs {
    pub resume: Option<PathBuf>,
    pub dry_run: bool,
    /// Stop after this many epochs of this invocation.
    pub max_epochs: Option<usize>,
}

/// Trains a patch, checkpointing after every epoch. On failure the last
/// checkpoint and the log so far are kept.
pub fn cmd_train(cfg: &RunConfig, args: &TrainArgs) -> CmdResult {
    if args.dry_run {
        return dry_run(cfg);
    }
    let ckpt = match &args.resume {
        Some(p) => {
            let c = Checkpoint::load(p).map_err(classify)?;
            if c.options != cfg.train_options() {
                return Err(Failure::Validation(Error::Config(format!(
                    "checkpoint {} was written with different training options",
                    p.display()
                ))));
            }
            Some(c)
        }
        None => None,
    };
    let data = load_data(cfg, None).map_err(classify)?;
    let models = build_models(cfg, &data.train, true).map_err(classify)?;
    let hash = cfg.hash();
    let mut trainer = match &ckpt {
        Some(c) => Trainer::resume(c, &data.train, &models.vit, &models.cnn),
        None => Trainer::new(cfg.train_options(), &data.train, &models.vit, &models.cnn),
    }
    .map_err(classify)?;
    prepare_out(cfg).map_err(runtime)?;
    let out = cfg.out_dir.clone();
    let ckpt_path = out.join("checkpoint.json");
    let names = class_names(cfg.data.num_classes);
    println!("target class: {} ({})", trainer.selected_class(), names[trainer.selected_class()]);
    let mut result = Ok(());
    let mut ran = 0;
    while !trainer.is_finished() && args.max_epochs.is_none_or(|m| ran < m) {
        result = trainer.run_epoch().and_then(|_| trainer.checkpoint(&hash).save(&ckpt_path));
        if result.is_err() {
            break;
        }
        ran += 1;
        if let Some(e) = trainer.log().epochs.last() {
            println!(
                "epoch {:>3} {:?}  attack {:.4}  total {:.4}{}  {:.1}s",
                e.epoch,
                e.stage,
                e.mean.attack,
                e.mean.total,
                e.mean.align.map(|a| format!("  -cos {a:.4}")).unwrap_or_default(),
                e.wall_clock_secs
            );
        }
    }
    let written = write_train_outputs(cfg, &out, trainer.patch(), trainer.log());
    result.map_err(runtime)?;
    written.map_err(runtime)?;
    if trainer.is_finished() {
        println!("patch written to {}", out.join("patch.png").display());
    } else {
        println!("stopped before epoch {}; resume from {}", trainer.next_epoch(), ckpt_path.display());
    }
    Ok(())
}

/// One stage-1 and one stage-2 batch at the configured resolution, then an
/// evaluation on up to two images. Validates the full recipe without the
/// cost of running it; toy models are used untrained.
fn dry_run(cfg: &RunConfig) -> CmdResult {
    let full = cfg.train_options();
    let bs = full.schedule.batch_size;
    let data = load_data(cfg, Some((bs, 2))).map_err(classify)?;
    let models = build_models(cfg, &data.train, false).map_err(classify)?;
    let mut opts = full.clone();
    opts.schedule = TrainSchedule {
        stage1_epochs: 1,
        stage2_epochs: 1,
        batches_per_epoch: 1,
        ..full.schedule.clone()
    };
    let mut trainer = Trainer::new(opts, &data.train, &models.vit, &models.cnn).map_err(classify)?;
    prepare_out(cfg).map_err(runtime)?;
    let s = &full.schedule;
    println!(
        "recipe: {}x{} images, patch {}, {} epochs (stage switch at epoch {}), {} batches of {} per epoch, {} iterations",
        cfg.data.width,
        cfg.data.height,
        full.patch_size,
        s.total_epochs(),
        s.stage1_epochs,
        s.batches_per_epoch,
        s.batch_size,
        s.attack_iterations
    );
    let run = trainer.run_with(|t| {
        if let Some(e) = t.log().epochs.last() {
            println!("dry-run batch {:?}: {} steps, {:.1}s", e.stage, e.steps, e.wall_clock_secs);
        }
        Ok(())
    });
    let dir = cfg.out_dir.join("dry_run");
    (|| -> Result<()> {
        std::fs::create_dir_all(&dir)?;
        write_train_outputs(cfg, &dir, trainer.patch(), trainer.log())
    })()
    .map_err(runtime)?;
    run.map_err(runtime)?;
    let (patch, log) = trainer.into_parts();
    let eval = cfg.eval_options();
    let guide = PlacementGuide::from_model(&models.vit, &data.eval, Some(log.selected_class), &eval.placement).map_err(runtime)?;
    let report = evaluate_patch(Some(&patch), &models.all(), &data.eval, &guide, &eval).map_err(runtime)?;
    report.write(&dir, "eval_report").map_err(runtime)?;
    print!("{}", report.to_table());
    println!("dry run complete: {} steps", log.steps.len());
    Ok(())
}

pub struct EvaluateArgs {
    pub patch: Option<PathBuf>,
    /// Overrides the class the placement guide targets.
    pub target_class: Option<usize>,
}

pub fn cmd_evaluate(cfg: &RunConfig, args: &EvaluateArgs) -> CmdResult {
    let patch = match &args.patch {
        Some(p) => {
            let (patch, side) = load_patch(p).map_err(classify)?;
            if let Some(side) = side {
                if side.config_hash != cfg.hash() {
                    eprintln!("note: patch was trained under config {}", side.config_hash);
                }
            }
            if patch.size > cfg.data.height.min(cfg.data.width) {
                return Err(Failure::Validation(Error::Config(format!(
                    "{}x{} patch does not fit the evaluation images",
                    patch.size, patch.size
                ))));
            }
            Some(patch)
        }
        None => None,
    };
    if let Some(c) = args.target_class {
        if c >= cfg.data.num_classes {
            return Err(Failure::Validation(Error::Parameter(format!("target class {c} out of range"))));
        }
    }
    let data = load_data(cfg, None).map_err(classify)?;
    let models = build_models(cfg, &data.train, true).map_err(classify)?;
    let target = match args.target_class {
        Some(c) => c,
        None => scan(cfg, &models.vit, &data.train).map_err(runtime)?.selected_class,
    };
    let eval = cfg.eval_options();
    let guide = PlacementGuide::from_model(&models.vit, &data.eval, Some(target), &eval.placement).map_err(runtime)?;
    let mut report: EvaluationReport =
        evaluate_patch(patch.as_ref(), &models.all(), &data.eval, &guide, &eval).map_err(runtime)?;
    report.meta.divergence = patch.as_ref().map(|_| cfg.loss.divergence);
    report.meta.align = patch.as_ref().map(|_| cfg.loss.lambda_align > 0.0);
    (|| -> Result<()> {
        prepare_out(cfg)?;
        report.write(&cfg.out_dir, "eval_report")
    })()
    .map_err(runtime)?;
    print!("{}", report.to_table());
    Ok(())
}

pub fn cmd_ablate(cfg: &RunConfig, suite: &str) -> CmdResult {
    let suite: AblationSuite = suite.parse().map_err(Failure::Validation)?;
    if suite == AblationSuite::PatchSize {
        let fit = cfg.data.height.min(cfg.data.width);
        if let Some(&s) = cfg.ablation.patch_sizes.iter().find(|&&s| s > fit || s < 8) {
            return Err(Failure::Validation(Error::Config(format!("ablation patch size {s} does not fit"))));
        }
    }
    let data = load_data(cfg, None).map_err(classify)?;
    let models = build_models(cfg, &data.train, true).map_err(classify)?;
    let table = run_ablations(
        suite,
        &cfg.train_options(),
        &cfg.eval_options(),
        &cfg.ablation,
        &data.train,
        &data.eval,
        &models.vit,
        &models.cnn,
        &models.all(),
    )
    .map_err(classify)?;
    (|| -> Result<()> {
        prepare_out(cfg)?;
        table.write(&cfg.out_dir)?;
        // Mean patched mIoU per variant; failed variants draw as empty bars.
        let bars: Vec<f64> = table
            .rows
            .iter()
            .map(|r| {
                let v: Vec<f64> = r
                    .report
                    .iter()
                    .flat_map(|rep| rep.models.iter().filter_map(|m| m.scores.as_ref().map(|s| s.patch)))
                    .collect();
                if v.is_empty() {
                    0.0
                } else {
                    v.iter().sum::<f64>() / v.len() as f64
                }
            })
            .collect();
        write_bar_chart(&cfg.out_dir.join(format!("ablation_{}.png", suite.name())), &bars, None)?;
        let patches = cfg.out_dir.join(format!("ablation_{}", suite.name()));
        std::fs::create_dir_all(&patches)?;
        for r in &table.rows {
            if let Some(p) = &r.patch {
                save_patch(&patches.join(format!("{}.png", r.variant)), p, &cfg.hash(), &cfg.eot)?;
            }
        }
        Ok(())
    })()
    .map_err(runtime)?;
    print!("{}", table.to_table());
    Ok(())
}
