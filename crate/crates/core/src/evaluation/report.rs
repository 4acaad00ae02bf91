use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::losses::Divergence;
use crate::model_zoo::Family;
use crate::placement::Strategy;

/// mIoU of one model under the three conditions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelScores {
    /// Dataset-wide mIoU (from the summed confusion matrix).
    pub clean: f64,
    pub random: f64,
    pub patch: f64,
    /// Per-image mIoU, in dataset order.
    pub per_image_clean: Vec<f64>,
    pub per_image_random: Vec<f64>,
    pub per_image_patch: Vec<f64>,
}

/// `100·(reference − attacked)/reference`
pub fn drop_percent(reference: f64, attacked: f64) -> f64 {
    100.0 * (reference - attacked) / reference
}

fn mean(v: &[f64]) -> f64 {
    let f: Vec<f64> = v.iter().copied().filter(|x| x.is_finite()).collect();
    f.iter().sum::<f64>() / f.len() as f64
}

impl ModelScores {
    pub fn drop_vs_clean(&self) -> f64 {
        drop_percent(self.clean, self.patch)
    }

    pub fn drop_vs_random(&self) -> f64 {
        drop_percent(self.random, self.patch)
    }

    pub fn mean_image_random(&self) -> f64 {
        mean(&self.per_image_random)
    }

    pub fn mean_image_patch(&self) -> f64 {
        mean(&self.per_image_patch)
    }

    /// Mean over images of `random − patch` per-image mIoU, and its
    /// standard error.
    pub fn paired_margin(&self) -> (f64, f64) {
        let d: Vec<f64> = self
            .per_image_random
            .iter()
            .zip(&self.per_image_patch)
            .map(|(r, p)| r - p)
            .filter(|x| x.is_finite())
            .collect();
        let n = d.len() as f64;
        let m = d.iter().sum::<f64>() / n;
        if d.len() < 2 {
            return (m, f64::NAN);
        }
        let var = d.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, (var / n).sqrt())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub model: String,
    pub family: Family,
    pub scores: Option<ModelScores>,
    /// Set when the model failed; the other models still ran.
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionMeta {
    /// False for a clean-only run.
    pub patched: bool,
    pub patch_size: Option<usize>,
    pub strategy: Strategy,
    pub target_class: usize,
    pub seed: u64,
    pub divergence: Option<Divergence>,
    pub align: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub meta: ConditionMeta,
    pub models: Vec<ModelReport>,
}

impl EvaluationReport {
    pub fn scores(&self, model: &str) -> Option<&ModelScores> {
        self.models.iter().find(|m| m.model == model).and_then(|m| m.scores.as_ref())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        if self.meta.patched {
            s.push_str("model,family,clean_miou,random_miou,patch_miou,drop_vs_clean_pct,drop_vs_random_pct,error\n");
        } else {
            s.push_str("model,family,clean_miou,error\n");
        }
        for m in &self.models {
            let fam = family_name(m.family);
            let err = m.error.as_deref().unwrap_or("").replace(',', ";");
            match (&m.scores, self.meta.patched) {
                (Some(x), true) => {
                    let _ = writeln!(
                        s,
                        "{},{fam},{:.6},{:.6},{:.6},{:.4},{:.4},",
                        m.model,
                        x.clean,
                        x.random,
                        x.patch,
                        x.drop_vs_clean(),
                        x.drop_vs_random()
                    );
                }
                (Some(x), false) => {
                    let _ = writeln!(s, "{},{fam},{:.6},", m.model, x.clean);
                }
                (None, true) => {
                    let _ = writeln!(s, "{},{fam},,,,,,{err}", m.model);
                }
                (None, false) => {
                    let _ = writeln!(s, "{},{fam},,{err}", m.model);
                }
            }
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        if self.meta.patched {
            let _ = writeln!(
                s,
                "{:<16} {:>8} {:>10} {:>10} {:>10} {:>11}",
                "model", "clean", "random", "patch", "drop/clean", "drop/random"
            );
        } else {
            let _ = writeln!(s, "{:<16} {:>8}", "model", "clean");
        }
        for m in &self.models {
            match &m.scores {
                Some(x) if self.meta.patched => {
                    let _ = writeln!(
                        s,
                        "{:<16} {:>8.4} {:>10.4} {:>10.4} {:>9.2}% {:>10.2}%",
                        m.model,
                        x.clean,
                        x.random,
                        x.patch,
                        x.drop_vs_clean(),
                        x.drop_vs_random()
                    );
                }
                Some(x) => {
                    let _ = writeln!(s, "{:<16} {:>8.4}", m.model, x.clean);
                }
                None => {
                    let _ = writeln!(s, "{:<16} failed: {}", m.model, m.error.as_deref().unwrap_or("?"));
                }
            }
        }
        s
    }

    /// Writes `<stem>.csv`, `<stem>.txt` and `<stem>.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::write(dir.join(format!("{stem}.csv")), self.to_csv())?;
        std::fs::write(dir.join(format!("{stem}.txt")), self.to_table())?;
        std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

pub(crate) fn family_name(f: Family) -> &'static str {
    match f {
        Family::Vit => "vit",
        Family::Cnn => "cnn",
    }
}
