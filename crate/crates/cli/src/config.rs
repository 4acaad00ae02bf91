//! Run configuration: one TOML file, `--set` overrides, full validation
//! before any work starts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use segpatch::applicator::EotParams;
use segpatch::evaluation::{AblationOptions, EvalOptions};
use segpatch::losses::LossConfig;
use segpatch::model_zoo::PretrainOptions;
use segpatch::placement::PlacementConfig;
use segpatch::trainer::{PatchInit, TrainOptions, TrainSchedule};
use segpatch::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    #[default]
    Synthetic,
    /// `images/<split>/*.png` and `labels/<split>/*.png` under `root`.
    Directory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub root: Option<PathBuf>,
    pub train_split: String,
    pub eval_split: String,
    /// Images are resampled to this size.
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// Synthetic source only.
    pub train_images: usize,
    pub eval_images: usize,
    pub train_seed: u64,
    pub eval_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            root: None,
            train_split: "train".into(),
            eval_split: "val".into(),
            height: 1024,
            width: 2048,
            num_classes: 19,
            train_images: 300,
            eval_images: 100,
            train_seed: 0,
            eval_seed: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    ToyVit,
    ToyCnn,
    /// Weights described by an adapter TOML file.
    Adapter,
}

/// A surrogate or target model. Unset fields take per-kind defaults in
/// [`ModelSpec::resolve`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub downscale: Option<f64>,
    /// Supervised warm-up on the training split before use.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pretrain: Option<bool>,
    /// Overrides `pretrain.seed` for this model.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pretrain_seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub token_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layers: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub channels: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adapter: Option<PathBuf>,
}

impl ModelSpec {
    pub fn toy_vit(name: &str, seed: u64) -> Self {
        Self::bare(ModelKind::ToyVit, name, seed).resolve()
    }

    pub fn toy_cnn(name: &str, seed: u64) -> Self {
        Self::bare(ModelKind::ToyCnn, name, seed).resolve()
    }

    fn bare(kind: ModelKind, name: &str, seed: u64) -> Self {
        Self {
            kind,
            name: Some(name.into()),
            seed: Some(seed),
            downscale: None,
            pretrain: None,
            pretrain_seed: None,
            token_size: None,
            layers: None,
            dim: None,
            channels: None,
            adapter: None,
        }
    }

    /// Fills unset fields with the defaults of `kind`.
    pub fn resolve(mut self) -> Self {
        match self.kind {
            ModelKind::ToyVit => {
                self.name.get_or_insert_with(|| "toy_vit".into());
                self.seed.get_or_insert(1);
                self.downscale.get_or_insert(0.75);
                self.pretrain.get_or_insert(true);
                self.token_size.get_or_insert(32);
                self.layers.get_or_insert(2);
                self.dim.get_or_insert(32);
            }
            ModelKind::ToyCnn => {
                self.name.get_or_insert_with(|| "toy_cnn".into());
                self.seed.get_or_insert(2);
                self.downscale.get_or_insert(0.5);
                self.pretrain.get_or_insert(true);
                self.channels.get_or_insert(8);
            }
            ModelKind::Adapter => {}
        }
        self
    }

    pub fn display_name(&self) -> String {
        self.name.clone().unwrap_or_else(|| match &self.adapter {
            Some(p) => p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
            None => "model".into(),
        })
    }

    fn validate(&self, role: &str) -> Result<()> {
        let bad = |f: &str| Error::Config(format!("{role}: field `{f}` does not apply to kind {:?}", self.kind));
        match self.kind {
            ModelKind::ToyVit => {
                if self.channels.is_some() {
                    return Err(bad("channels"));
                }
                if self.adapter.is_some() {
                    return Err(bad("adapter"));
                }
            }
            ModelKind::ToyCnn => {
                for (f, set) in [
                    ("token_size", self.token_size.is_some()),
                    ("layers", self.layers.is_some()),
                    ("dim", self.dim.is_some()),
                    ("adapter", self.adapter.is_some()),
                ] {
                    if set {
                        return Err(bad(f));
                    }
                }
            }
            ModelKind::Adapter => {
                let Some(path) = &self.adapter else {
                    return Err(Error::Config(format!("{role}: adapter models need `adapter = <path>`")));
                };
                if !path.exists() {
                    return Err(Error::Load {
                        path: path.clone(),
                        reason: "adapter config not found".into(),
                    });
                }
                for (f, set) in [
                    ("seed", self.seed.is_some()),
                    ("downscale", self.downscale.is_some()),
                    ("pretrain", self.pretrain.is_some()),
                    ("pretrain_seed", self.pretrain_seed.is_some()),
                    ("token_size", self.token_size.is_some()),
                    ("layers", self.layers.is_some()),
                    ("dim", self.dim.is_some()),
                    ("channels", self.channels.is_some()),
                ] {
                    if set {
                        return Err(bad(f));
                    }
                }
            }
        }
        if let Some(d) = self.downscale {
            if !(d > 0.0 && d <= 1.0) {
                return Err(Error::Config(format!("{role}: downscale {d} not in (0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelsConfig {
    pub vit: ModelSpec,
    pub cnn: ModelSpec,
    /// Held-out models used only for evaluation.
    pub targets: Vec<ModelSpec>,
}

impl Default for ModelsConfig {
    fn default() -> Self {
        Self {
            vit: ModelSpec::toy_vit("toy_vit", 1),
            cnn: ModelSpec::toy_cnn("toy_cnn", 2),
            targets: vec![ModelSpec {
                pretrain_seed: Some(3),
                ..ModelSpec::toy_cnn("target_cnn", 3)
            }],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchConfig {
    pub size: usize,
    pub init: PatchInit,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            size: 200,
            init: PatchInit::UniformRandom,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    pub seed: u64,
    /// Apply the training transforms at evaluation too.
    pub eot: bool,
    pub threads: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            eot: false,
            threads: 1,
        }
    }
}

/// Everything one invocation needs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub models: ModelsConfig,
    pub pretrain: PretrainOptions,
    pub loss: LossConfig,
    pub schedule: TrainSchedule,
    pub placement: PlacementConfig,
    pub eot: EotParams,
    pub patch: PatchConfig,
    pub evaluation: EvaluationConfig,
    pub ablation: AblationOptions,
}

/// Parses `value` as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

/// Applies `a.b.c=value` to a table, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: `{p}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Reads `path` (if any), applies overrides, resolves model defaults
    /// and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Load {
                    path: p.to_path_buf(),
                    reason: e.to_string(),
                })?;
                toml::from_str::<toml::Table>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        // A partial surrogate table keeps its slot's default kind.
        if let Some(models) = table.get_mut("models").and_then(|m| m.as_table_mut()) {
            for (slot, kind) in [("vit", "toy_vit"), ("cnn", "toy_cnn")] {
                if let Some(t) = models.get_mut(slot).and_then(|m| m.as_table_mut()) {
                    t.entry("kind").or_insert_with(|| toml::Value::String(kind.into()));
                }
            }
        }
        let mut cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if cfg.out_dir.as_os_str().is_empty() {
            cfg.out_dir = PathBuf::from("runs");
        }
        cfg.models.vit = cfg.models.vit.resolve();
        cfg.models.cnn = cfg.models.cnn.resolve();
        cfg.models.targets = cfg.models.targets.into_iter().map(ModelSpec::resolve).collect();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train_options().validate()?;
        let d = &self.data;
        if d.num_classes < 2 {
            return Err(Error::Config("data.num_classes must be at least 2".into()));
        }
        if d.height == 0 || d.width == 0 {
            return Err(Error::Config("data.height and data.width must be positive".into()));
        }
        match d.source {
            DataSource::Synthetic => {
                if d.train_images == 0 || d.eval_images == 0 {
                    return Err(Error::Config("synthetic data needs train_images and eval_images > 0".into()));
                }
            }
            DataSource::Directory => {
                let root = d
                    .root
                    .as_ref()
                    .ok_or_else(|| Error::Config("data.root is required for source = \"directory\"".into()))?;
                for split in [&d.train_split, &d.eval_split] {
                    let p = root.join("images").join(split);
                    if !p.is_dir() {
                        return Err(Error::Ingestion(format!("missing image directory {}", p.display())));
                    }
                }
            }
        }
        if self.patch.size > d.height.min(d.width) {
            return Err(Error::Config(format!(
                "patch.size {} does not fit {}x{} images",
                self.patch.size, d.height, d.width
            )));
        }
        if self.models.vit.kind == ModelKind::ToyCnn || self.models.cnn.kind == ModelKind::ToyVit {
            return Err(Error::Config("models.vit must be a transformer and models.cnn a CNN".into()));
        }
        self.models.vit.validate("models.vit")?;
        self.models.cnn.validate("models.cnn")?;
        for (i, t) in self.models.targets.iter().enumerate() {
            t.validate(&format!("models.targets[{i}]"))?;
        }
        if self.evaluation.threads == 0 {
            return Err(Error::Config("evaluation.threads must be positive".into()));
        }
        if self.pretrain.learning_rate <= 0.0 || !self.pretrain.learning_rate.is_finite() {
            return Err(Error::Config("pretrain.learning_rate must be positive".into()));
        }
        Ok(())
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            loss: self.loss.clone(),
            schedule: self.schedule.clone(),
            placement: self.placement.clone(),
            eot: self.eot.clone(),
            patch_size: self.patch.size,
            init: self.patch.init,
        }
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            placement: self.placement.clone(),
            seed: self.evaluation.seed,
            eot: if self.evaluation.eot {
                self.eot.clone()
            } else {
                EotParams::disabled()
            },
            threads: self.evaluation.threads,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the resolved config, hex. The output directory is left
    /// out so the same experiment hashes alike wherever it is written.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        sha256_hex(c.to_toml().as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
