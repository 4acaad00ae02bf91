use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::applicator::Stage;
use crate::error::Result;
use crate::losses::LossBreakdown;
use crate::placement::Strategy;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Global optimizer step, from 0.
    pub step: usize,
    pub epoch: usize,
    pub batch: usize,
    pub iteration: usize,
    pub stage: Stage,
    pub losses: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub stage: Stage,
    pub steps: usize,
    pub mean: LossBreakdown,
    pub wall_clock_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacementRecord {
    pub epoch: usize,
    pub image: usize,
    pub top_left: (usize, usize),
    pub strategy: Strategy,
    /// The sensitive strategy found no candidate center and drew uniformly.
    pub fallback: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageBoundary {
    pub stage: Stage,
    pub epoch: usize,
    /// Index of the first step of this stage.
    pub first_step: usize,
}

/// Everything recorded during a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub selected_class: usize,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochSummary>,
    pub placements: Vec<PlacementRecord>,
    pub stage_boundaries: Vec<StageBoundary>,
}

/// One line of the JSONL log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    /// Resolved run configuration, written first.
    Config { hash: String, config: serde_json::Value },
    Stage(StageBoundary),
    Placement(PlacementRecord),
    Step(StepRecord),
    Epoch(EpochSummary),
}

impl TrainLog {
    /// Records in chronological order.
    pub fn records(&self) -> Vec<LogRecord> {
        let mut out = Vec::with_capacity(self.steps.len() + self.epochs.len() + self.placements.len());
        let mut steps = self.steps.iter().peekable();
        let mut placements = self.placements.iter().peekable();
        let mut bounds = self.stage_boundaries.iter().peekable();
        for e in &self.epochs {
            while let Some(b) = bounds.next_if(|b| b.epoch <= e.epoch) {
                out.push(LogRecord::Stage(b.clone()));
            }
            while let Some(p) = placements.next_if(|p| p.epoch <= e.epoch) {
                out.push(LogRecord::Placement(p.clone()));
            }
            while let Some(s) = steps.next_if(|s| s.epoch <= e.epoch) {
                out.push(LogRecord::Step(s.clone()));
            }
            out.push(LogRecord::Epoch(e.clone()));
        }
        out.extend(bounds.map(|b| LogRecord::Stage(b.clone())));
        out.extend(placements.map(|p| LogRecord::Placement(p.clone())));
        out.extend(steps.map(|s| LogRecord::Step(s.clone())));
        out
    }

    /// Writes one record per line, preceded by `header` if given.
    pub fn write_jsonl(&self, path: &Path, header: Option<LogRecord>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for r in header.into_iter().chain(self.records()) {
            serde_json::to_writer(&mut f, &r)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Vec<LogRecord>> {
        let text = std::fs::read_to_string(path)?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| Ok(serde_json::from_str(l)?))
            .collect()
    }

    /// Steps of one stage.
    pub fn stage_steps(&self, stage: Stage) -> impl Iterator<Item = &StepRecord> {
        self.steps.iter().filter(move |s| s.stage == stage)
    }
}

/// Term-wise mean. `align` is averaged over the records that carry it.
pub fn mean_breakdown<'a>(items: impl Iterator<Item = &'a LossBreakdown>) -> LossBreakdown {
    let mut m = LossBreakdown::default();
    let (mut n, mut na, mut align) = (0usize, 0usize, 0.0);
    for b in items {
        m.attack += b.attack;
        m.attn += b.attn;
        m.boundary += b.boundary;
        m.tv += b.tv;
        m.total += b.total;
        if let Some(a) = b.align {
            align += a;
            na += 1;
        }
        n += 1;
    }
    if n > 0 {
        let k = n as f64;
        m.attack /= k;
        m.attn /= k;
        m.boundary /= k;
        m.tv /= k;
        m.total /= k;
    }
    m.align = (na > 0).then(|| align / na as f64);
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_skips_missing_align() {
        let a = LossBreakdown {
            attack: 1.0,
            total: 2.0,
            ..LossBreakdown::default()
        };
        let b = LossBreakdown {
            attack: 3.0,
            total: 4.0,
            align: Some(-0.5),
            ..LossBreakdown::default()
        };
        let m = mean_breakdown([a, b].iter());
        assert_eq!((m.attack, m.total, m.align), (2.0, 3.0, Some(-0.5)));
        assert_eq!(mean_breakdown(std::iter::empty()).align, None);
    }
}
