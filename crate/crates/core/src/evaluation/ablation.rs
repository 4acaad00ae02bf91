use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::applicator::{PatchState, Stage};
use crate::error::{Error, Result};
use crate::losses::Divergence;
use crate::model_zoo::{SegmentationSample, SurrogateHandle};
use crate::placement::Strategy;
use crate::trainer::{train, TrainLog, TrainOptions};

use super::report::family_name;
use super::{evaluate_patch, EvalOptions, EvaluationReport, PlacementGuide};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationSuite {
    Placement,
    PatchSize,
    Divergence,
    GradAlign,
}

impl AblationSuite {
    pub const ALL: [AblationSuite; 4] = [Self::Placement, Self::PatchSize, Self::Divergence, Self::GradAlign];

    pub fn name(self) -> &'static str {
        match self {
            Self::Placement => "placement",
            Self::PatchSize => "patch_size",
            Self::Divergence => "divergence",
            Self::GradAlign => "grad_align",
        }
    }
}

impl FromStr for AblationSuite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation suite {s:?} (expected placement, patch_size, divergence or grad_align)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationOptions {
    /// Sizes compared by the patch-size suite.
    pub patch_sizes: Vec<usize>,
    /// Alignment weight of the "on" variant when the base config has none.
    pub align_on_weight: f64,
}

impl Default for AblationOptions {
    fn default() -> Self {
        Self {
            patch_sizes: vec![200, 300, 400],
            align_on_weight: 0.1,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub report: Option<EvaluationReport>,
    /// Mean `−cos(g_vit, g_cnn)` over the last stage-2 epoch.
    pub final_align: Option<f64>,
    pub error: Option<String>,
    #[serde(skip)]
    pub patch: Option<PatchState>,
    #[serde(skip)]
    pub log: Option<TrainLog>,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationTable {
    pub suite: AblationSuite,
    pub rows: Vec<AblationRow>,
}

fn variants(suite: AblationSuite, base: &TrainOptions, eval: &EvalOptions, opts: &AblationOptions) -> Vec<(String, TrainOptions, EvalOptions)> {
    let mut out = Vec::new();
    match suite {
        AblationSuite::Placement => {
            for s in [Strategy::Center, Strategy::Random, Strategy::Sensitive] {
                let mut t = base.clone();
                let mut e = eval.clone();
                t.placement.strategy = s;
                e.placement.strategy = s;
                out.push((s.name().to_string(), t, e));
            }
        }
        AblationSuite::PatchSize => {
            for &size in &opts.patch_sizes {
                let mut t = base.clone();
                t.patch_size = size;
                out.push((format!("patch_{size}"), t, eval.clone()));
            }
        }
        AblationSuite::Divergence => {
            for (name, d) in [("kl", Divergence::Kl), ("js", Divergence::Js)] {
                let mut t = base.clone();
                t.loss.divergence = d;
                out.push((name.to_string(), t, eval.clone()));
            }
        }
        AblationSuite::GradAlign => {
            let on = if base.loss.lambda_align > 0.0 {
                base.loss.lambda_align
            } else {
                opts.align_on_weight
            };
            for (name, w) in [("align_off", 0.0), ("align_on", on)] {
                let mut t = base.clone();
                t.loss.lambda_align = w;
                out.push((name.to_string(), t, eval.clone()));
            }
        }
    }
    out
}

fn last_stage2_align(log: &TrainLog) -> Option<f64> {
    log.epochs.iter().rev().find(|e| e.stage == Stage::Stage2).and_then(|e| e.mean.align)
}

/// Trains one patch per variant (same seeds otherwise) and evaluates each
/// on `targets`. A failing variant is recorded and the suite continues.
#[allow(clippy::too_many_arguments)]
pub fn run_ablations(
    suite: AblationSuite,
    base: &TrainOptions,
    eval: &EvalOptions,
    opts: &AblationOptions,
    train_data: &[SegmentationSample],
    eval_data: &[SegmentationSample],
    vit: &SurrogateHandle,
    cnn: &SurrogateHandle,
    targets: &[&SurrogateHandle],
) -> Result<AblationTable> {
    if suite == AblationSuite::PatchSize && opts.patch_sizes.is_empty() {
        return Err(Error::Config("patch-size suite needs at least one size".into()));
    }
    let mut rows = Vec::new();
    for (name, t, e) in variants(suite, base, eval, opts) {
        let run = || -> Result<(PatchState, TrainLog, EvaluationReport)> {
            let (patch, log) = train(&t, train_data, vit, cnn)?;
            let guide = PlacementGuide::from_model(vit, eval_data, Some(log.selected_class), &e.placement)?;
            let mut report = evaluate_patch(Some(&patch), targets, eval_data, &guide, &e)?;
            report.meta.divergence = Some(t.loss.divergence);
            report.meta.align = Some(t.loss.lambda_align > 0.0);
            Ok((patch, log, report))
        };
        rows.push(match run() {
            Ok((patch, log, report)) => AblationRow {
                variant: name,
                final_align: last_stage2_align(&log),
                report: Some(report),
                error: None,
                patch: Some(patch),
                log: Some(log),
            },
            Err(err) => AblationRow {
                variant: name,
                report: None,
                final_align: None,
                error: Some(err.to_string()),
                patch: None,
                log: None,
            },
        });
    }
    Ok(AblationTable { suite, rows })
}

impl AblationTable {
    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn to_csv(&self) -> String {
        let mut s =
            String::from("suite,variant,model,family,clean_miou,random_miou,patch_miou,drop_vs_clean_pct,drop_vs_random_pct,final_align,error\n");
        let suite = self.suite.name();
        for r in &self.rows {
            let align = r.final_align.map(|a| format!("{a:.6}")).unwrap_or_default();
            match &r.report {
                None => {
                    let err = r.error.as_deref().unwrap_or("").replace(',', ";");
                    let _ = writeln!(s, "{suite},{},,,,,,,,{align},{err}", r.variant);
                }
                Some(rep) => {
                    for m in &rep.models {
                        let fam = family_name(m.family);
                        match &m.scores {
                            Some(x) => {
                                let _ = writeln!(
                                    s,
                                    "{suite},{},{},{fam},{:.6},{:.6},{:.6},{:.4},{:.4},{align},",
                                    r.variant,
                                    m.model,
                                    x.clean,
                                    x.random,
                                    x.patch,
                                    x.drop_vs_clean(),
                                    x.drop_vs_random()
                                );
                            }
                            None => {
                                let err = m.error.as_deref().unwrap_or("").replace(',', ";");
                                let _ = writeln!(s, "{suite},{},{},{fam},,,,,,{align},{err}", r.variant, m.model);
                            }
                        }
                    }
                }
            }
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "ablation: {}", self.suite.name());
        let _ = writeln!(
            s,
            "{:<12} {:<16} {:>8} {:>8} {:>8} {:>10} {:>11} {:>9}",
            "variant", "model", "clean", "random", "patch", "drop/clean", "drop/random", "-cos"
        );
        for r in &self.rows {
            let align = r.final_align.map(|a| format!("{a:.4}")).unwrap_or_else(|| "-".into());
            match &r.report {
                None => {
                    let _ = writeln!(s, "{:<12} failed: {}", r.variant, r.error.as_deref().unwrap_or("?"));
                }
                Some(rep) => {
                    for m in &rep.models {
                        match &m.scores {
                            Some(x) => {
                                let _ = writeln!(
                                    s,
                                    "{:<12} {:<16} {:>8.4} {:>8.4} {:>8.4} {:>9.2}% {:>10.2}% {:>9}",
                                    r.variant,
                                    m.model,
                                    x.clean,
                                    x.random,
                                    x.patch,
                                    x.drop_vs_clean(),
                                    x.drop_vs_random(),
                                    align
                                );
                            }
                            None => {
                                let _ = writeln!(s, "{:<12} {:<16} failed: {}", r.variant, m.model, m.error.as_deref().unwrap_or("?"));
                            }
                        }
                    }
                }
            }
        }
        s
    }

    /// Writes `ablation_<suite>.{csv,txt,json}` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let stem = format!("ablation_{}", self.suite.name());
        std::fs::write(dir.join(format!("{stem}.csv")), self.to_csv())?;
        std::fs::write(dir.join(format!("{stem}.txt")), self.to_table())?;
        std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
