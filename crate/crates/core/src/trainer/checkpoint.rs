//! Resumable training state.
//!
//! Patch values are stored as raw `f64` bits so a resumed run continues
//! from exactly the same numbers; all later randomness is position-keyed.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::applicator::{PatchState, Stage};
use crate::error::{Error, Result};
use crate::model_zoo::{SegmentationSample, SurrogateHandle};
use crate::optim::AdamState;
use crate::tensor::Tensor;

use super::{check_models, TrainLog, TrainOptions, Trainer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub options: TrainOptions,
    pub config_hash: String,
    pub next_epoch: usize,
    pub selected_class: usize,
    pub patch_size: usize,
    pub stage: Stage,
    pub step_count: u64,
    /// Little-endian `f64` patch values, base64.
    pub patch_bits: String,
    pub adam: Option<AdamState>,
    pub log: TrainLog,
}

fn encode(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

fn decode(s: &str) -> Result<Vec<f64>> {
    let bytes = STANDARD
        .decode(s)
        .map_err(|e| Error::Load {
            path: "<checkpoint>".into(),
            reason: format!("patch bits: {e}"),
        })?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Load {
            path: "<checkpoint>".into(),
            reason: "patch bits are not a whole number of f64 values".into(),
        });
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, serde_json::to_vec(self)?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn patch(&self) -> Result<PatchState> {
        let s = self.patch_size;
        let data = decode(&self.patch_bits)?;
        if data.len() != 3 * s * s {
            return Err(Error::Load {
                path: "<checkpoint>".into(),
                reason: format!("expected {} patch values, found {}", 3 * s * s, data.len()),
            });
        }
        let mut p = PatchState::new(Tensor::from_vec(&[3, s, s], data))?;
        p.stage = self.stage;
        p.step_count = self.step_count;
        Ok(p)
    }
}

impl<'a> Trainer<'a> {
    /// Snapshot at the current epoch boundary.
    pub fn checkpoint(&self, config_hash: &str) -> Checkpoint {
        Checkpoint {
            options: self.opts.clone(),
            config_hash: config_hash.to_string(),
            next_epoch: self.next_epoch,
            selected_class: self.selected_class,
            patch_size: self.patch.size,
            stage: self.patch.stage,
            step_count: self.patch.step_count,
            patch_bits: encode(self.patch.pixels.data()),
            adam: self.adam.clone(),
            log: self.log.clone(),
        }
    }

    /// Continues a run from `ckpt`. The selected class is taken from the
    /// checkpoint rather than rescanned.
    pub fn resume(
        ckpt: &Checkpoint,
        dataset: &'a [SegmentationSample],
        vit: &'a SurrogateHandle,
        cnn: &'a SurrogateHandle,
    ) -> Result<Self> {
        ckpt.options.validate()?;
        check_models(vit, cnn, dataset, &ckpt.options)?;
        if ckpt.next_epoch > ckpt.options.schedule.total_epochs() {
            return Err(Error::Load {
                path: "<checkpoint>".into(),
                reason: format!("next epoch {} is past the schedule", ckpt.next_epoch),
            });
        }
        if ckpt.selected_class >= vit.num_classes() {
            return Err(Error::Load {
                path: "<checkpoint>".into(),
                reason: format!("selected class {} out of range", ckpt.selected_class),
            });
        }
        let patch = ckpt.patch()?;
        let mut t = Self::bare(ckpt.options.clone(), dataset, vit, cnn, patch);
        t.adam = ckpt.adam.clone().or(t.adam);
        t.next_epoch = ckpt.next_epoch;
        t.selected_class = ckpt.selected_class;
        t.log = ckpt.log.clone();
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bits_roundtrip() {
        let v = vec![0.1, 1.0 / 3.0, 0.0, 1.0, 0.123456789012345678];
        assert_eq!(decode(&encode(&v)).unwrap(), v);
        assert!(decode("AAA=").is_err());
    }
}
