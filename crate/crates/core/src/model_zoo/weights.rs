//! Weight files and the external-model adapter.
//!
//! A weight file is JSON: an architecture block plus named tensors in the
//! architecture's canonical parameter order. An adapter config is a TOML file
//! naming the architecture, the weight file, input downscale and input
//! normalization.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Architecture, Family, SurrogateHandle, ToyCnn, ToyVit};

/// Input normalization `(x − mean) / std` per RGB channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Preprocessing {
    pub mean: [f64; 3],
    pub std: [f64; 3],
    #[serde(default = "one")]
    pub downscale: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for Preprocessing {
    fn default() -> Self {
        Self {
            mean: [0.5; 3],
            std: [0.25; 3],
            downscale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum ArchConfig {
    ToyCnn {
        channels: usize,
        num_classes: usize,
    },
    ToyVit {
        token_size: usize,
        layers: usize,
        dim: usize,
        num_classes: usize,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelWeights {
    pub arch: ArchConfig,
    pub tensors: Vec<NamedTensor>,
}

impl ModelWeights {
    pub fn from_handle(handle: &SurrogateHandle) -> Self {
        let arch = match handle.architecture() {
            Architecture::Cnn(m) => ArchConfig::ToyCnn {
                channels: m.channels,
                num_classes: m.num_classes,
            },
            Architecture::Vit(m) => ArchConfig::ToyVit {
                token_size: m.token_size,
                layers: m.layers,
                dim: m.dim,
                num_classes: m.num_classes,
            },
        };
        let tensors = handle
            .architecture()
            .params()
            .iter()
            .enumerate()
            .map(|(i, t)| NamedTensor {
                name: format!("p{i}"),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect();
        Self { arch, tensors }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: format!("corrupt weight file: {e}"),
        })
    }

    pub fn family(&self) -> Family {
        match self.arch {
            ArchConfig::ToyCnn { .. } => Family::Cnn,
            ArchConfig::ToyVit { .. } => Family::Vit,
        }
    }

    pub fn into_architecture(self) -> Result<Architecture> {
        let mut params = Vec::with_capacity(self.tensors.len());
        for t in self.tensors {
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::Contract(format!("tensor {} has inconsistent shape", t.name)));
            }
            params.push(Tensor::from_vec(&t.shape, t.data));
        }
        Ok(match self.arch {
            ArchConfig::ToyCnn { channels, num_classes } => {
                Architecture::Cnn(ToyCnn::from_params(channels, num_classes, params)?)
            }
            ArchConfig::ToyVit {
                token_size,
                layers,
                dim,
                num_classes,
            } => Architecture::Vit(ToyVit::from_params(token_size, layers, dim, num_classes, params)?),
        })
    }
}

/// Adapter description loaded from TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    pub name: String,
    /// Architecture name recorded in the weight file (`toy_cnn`, `toy_vit`).
    pub architecture: String,
    pub family: Family,
    /// Relative paths resolve against the config file's directory.
    pub weights: PathBuf,
    #[serde(default = "one")]
    pub downscale: f64,
    #[serde(default = "default_mean")]
    pub mean: [f64; 3],
    #[serde(default = "default_std")]
    pub std: [f64; 3],
}

fn default_mean() -> [f64; 3] {
    Preprocessing::default().mean
}

fn default_std() -> [f64; 3] {
    Preprocessing::default().std
}

pub fn load_adapter_config(path: &Path) -> Result<AdapterConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut cfg: AdapterConfig = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if cfg.weights.is_relative() {
        if let Some(dir) = path.parent() {
            cfg.weights = dir.join(&cfg.weights);
        }
    }
    Ok(cfg)
}

/// Loads weights and wraps them as a [`SurrogateHandle`].
///
/// Fails with a load error when the file is missing or unparsable, and with a
/// contract error when the declared family disagrees with the weights.
pub fn make_external_adapter(weights_path: &Path, family: Family, preprocessing: Preprocessing) -> Result<SurrogateHandle> {
    if !weights_path.exists() {
        return Err(Error::Load {
            path: weights_path.to_path_buf(),
            reason: "file not found".into(),
        });
    }
    let weights = ModelWeights::load(weights_path)?;
    if weights.family() != family {
        return Err(Error::Contract(format!(
            "declared family {family:?} but weights describe a {:?} model (attention {})",
            weights.family(),
            if weights.family() == Family::Vit { "present" } else { "absent" }
        )));
    }
    for (what, v) in [("mean", preprocessing.mean), ("std", preprocessing.std)] {
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Config(format!("non-finite normalization {what}")));
        }
    }
    if preprocessing.std.iter().any(|&s| s <= 0.0) {
        return Err(Error::Config("normalization std must be positive".into()));
    }
    let arch = weights.into_architecture()?;
    let name = weights_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "external".into());
    let downscale = preprocessing.downscale;
    SurrogateHandle::new(name, arch, preprocessing).with_downscale(downscale)
}

impl AdapterConfig {
    pub fn build(&self) -> Result<SurrogateHandle> {
        let pre = Preprocessing {
            mean: self.mean,
            std: self.std,
            downscale: self.downscale,
        };
        let handle = make_external_adapter(&self.weights, self.family, pre)?;
        let weights_arch = match handle.architecture() {
            Architecture::Cnn(_) => "toy_cnn",
            Architecture::Vit(_) => "toy_vit",
        };
        if weights_arch != self.architecture {
            return Err(Error::Contract(format!(
                "config names architecture {:?} but weights are {weights_arch:?}",
                self.architecture
            )));
        }
        Ok(handle.with_name(self.name.clone()))
    }
}
