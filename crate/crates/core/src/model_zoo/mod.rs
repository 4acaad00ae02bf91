//! Segmentation models behind one differentiable interface, plus data.
//!
//! A [`SurrogateHandle`] wraps either a toy CNN or a toy transformer. Both
//! can be recorded on an autodiff [`Graph`] over any [`Scalar`], so the
//! trainer can take first- and second-order derivatives with respect to the
//! input image.

mod cnn;
mod dataset;
mod pretrain;
mod vit;
mod weights;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ResizePlan, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use cnn::ToyCnn;
pub use dataset::{generate_synthetic_dataset, load_dataset, scene_roles, write_sample, SceneRole};
pub use pretrain::{pretrain, PretrainOptions};
pub use vit::ToyVit;
pub use weights::{
    load_adapter_config, make_external_adapter, AdapterConfig, ArchConfig, ModelWeights, Preprocessing,
};

/// Label id for pixels that carry no ground truth.
pub const IGNORE_LABEL: usize = 255;

/// Integer label raster, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<usize>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<usize>) -> Self {
        assert_eq!(height * width, data.len());
        Self { height, width, data }
    }

    pub fn filled(height: usize, width: usize, v: usize) -> Self {
        Self::new(height, width, vec![v; height * width])
    }

    pub fn get(&self, y: usize, x: usize) -> usize {
        self.data[y * self.width + x]
    }
}

/// One image with its labels.
///
/// `image` is channel-planar `[3, H, W]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationSample {
    pub image: Tensor<f64>,
    pub labels: LabelMap,
    pub ignore_value: usize,
}

impl SegmentationSample {
    pub fn new(image: Tensor<f64>, labels: LabelMap) -> Result<Self> {
        let s = Self {
            image,
            labels,
            ignore_value: IGNORE_LABEL,
        };
        s.validate(None)?;
        Ok(s)
    }

    pub fn height(&self) -> usize {
        self.labels.height
    }

    pub fn width(&self) -> usize {
        self.labels.width
    }

    /// Checks shape agreement, pixel range and (optionally) the label range.
    pub fn validate(&self, num_classes: Option<usize>) -> Result<()> {
        let (h, w) = (self.labels.height, self.labels.width);
        if self.image.shape() != [3, h, w] {
            return Err(Error::Parameter(format!(
                "image shape {:?} does not match labels {h}x{w}",
                self.image.shape()
            )));
        }
        if self.image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Parameter("image values must lie in [0, 1]".into()));
        }
        if let Some(c) = num_classes {
            if let Some(bad) = self
                .labels
                .data
                .iter()
                .find(|&&l| l >= c && l != self.ignore_value)
            {
                return Err(Error::Parameter(format!("label {bad} outside [0, {c})")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Vit,
    Cnn,
}

/// Result of a plain (non-differentiated) forward pass.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// `[C, H, W]` at the input resolution.
    pub logits: Tensor<f64>,
    /// Softmax of `logits` along the class axis.
    pub probabilities: Tensor<f64>,
    /// One `[T, T]` row-stochastic map per transformer layer.
    pub attention: Option<Vec<Tensor<f64>>>,
    /// Ratio of the logit resolution to the input resolution. Logits are
    /// always resampled back to the input, so this is 1.
    pub output_scale: f64,
}

impl ModelOutput {
    pub fn num_classes(&self) -> usize {
        self.logits.shape()[0]
    }

    /// Per-pixel argmax of the probabilities.
    pub fn prediction(&self) -> LabelMap {
        argmax_classes(&self.probabilities)
    }
}

/// Per-pixel argmax over the leading axis of a `[C, H, W]` tensor
/// (lowest class id wins ties).
pub fn argmax_classes(t: &Tensor<f64>) -> LabelMap {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let n = h * w;
    let d = t.data();
    let data = (0..n)
        .map(|i| {
            let mut best = 0;
            for k in 1..c {
                if d[k * n + i] > d[best * n + i] {
                    best = k;
                }
            }
            best
        })
        .collect();
    LabelMap::new(h, w, data)
}

/// Nodes produced when a model is recorded on a graph.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// `[C, H, W]` at the input resolution.
    pub logits: Var,
    pub attention: Vec<Var>,
    /// Token grid `(rows, cols)` for transformer models.
    pub token_grid: Option<(usize, usize)>,
    /// Parameter leaves in the model's canonical order.
    pub params: Vec<Var>,
}

#[derive(Clone, Debug)]
pub enum Architecture {
    Cnn(ToyCnn),
    Vit(ToyVit),
}

impl Architecture {
    pub fn family(&self) -> Family {
        match self {
            Architecture::Cnn(_) => Family::Cnn,
            Architecture::Vit(_) => Family::Vit,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Architecture::Cnn(m) => m.num_classes,
            Architecture::Vit(m) => m.num_classes,
        }
    }

    pub fn params(&self) -> &[Tensor<f64>] {
        match self {
            Architecture::Cnn(m) => &m.params,
            Architecture::Vit(m) => &m.params,
        }
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Tensor<f64>] {
        match self {
            Architecture::Cnn(m) => &mut m.params,
            Architecture::Vit(m) => &mut m.params,
        }
    }
}

/// An immutable, shareable segmentation model.
#[derive(Clone, Debug)]
pub struct SurrogateHandle {
    pub name: String,
    pub family: Family,
    /// Input resize factor in `(0, 1]` applied before the network.
    pub input_downscale: f64,
    pub preprocessing: Preprocessing,
    arch: Arc<Architecture>,
}

impl SurrogateHandle {
    pub fn new(name: impl Into<String>, arch: Architecture, preprocessing: Preprocessing) -> Self {
        Self {
            name: name.into(),
            family: arch.family(),
            input_downscale: 1.0,
            preprocessing,
            arch: Arc::new(arch),
        }
    }

    pub fn with_downscale(mut self, downscale: f64) -> Result<Self> {
        if !(downscale > 0.0 && downscale <= 1.0) {
            return Err(Error::Config(format!("input downscale {downscale} not in (0, 1]")));
        }
        self.input_downscale = downscale;
        self.preprocessing.downscale = downscale;
        Ok(self)
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes()
    }

    pub fn token_size(&self) -> Option<usize> {
        match &*self.arch {
            Architecture::Vit(v) => Some(v.token_size),
            Architecture::Cnn(_) => None,
        }
    }

    /// Resolution the network itself sees for an `h × w` input.
    pub fn working_size(&self, h: usize, w: usize) -> (usize, usize) {
        if self.input_downscale == 1.0 {
            (h, w)
        } else {
            let s = self.input_downscale;
            (((h as f64 * s).round() as usize).max(1), ((w as f64 * s).round() as usize).max(1))
        }
    }

    /// Checks that an `h × w` input is acceptable.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let (wh, ww) = self.working_size(h, w);
        match &*self.arch {
            Architecture::Vit(v) => {
                if wh % v.token_size != 0 || ww % v.token_size != 0 {
                    return Err(Error::Config(format!(
                        "{}: working size {wh}x{ww} not divisible by token size {}",
                        self.name, v.token_size
                    )));
                }
            }
            Architecture::Cnn(_) => {
                if wh < 4 || ww < 4 {
                    return Err(Error::Config(format!("{}: input {wh}x{ww} too small", self.name)));
                }
            }
        }
        Ok(())
    }

    pub(crate) fn with_params(&self, params: Vec<Tensor<f64>>) -> Self {
        let mut arch = (*self.arch).clone();
        for (dst, src) in arch.params_mut().iter_mut().zip(params) {
            *dst = src;
        }
        Self {
            arch: Arc::new(arch),
            ..self.clone()
        }
    }

    /// Records the model on `g`. `image` must be a `[3, H, W]` node.
    pub fn forward_graph<T: Scalar>(&self, g: &mut Graph<T>, image: Var, params_require_grad: bool) -> Result<ForwardVars> {
        let shape = g.shape(image).to_vec();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::Contract(format!("expected a [3, H, W] image, got {shape:?}")));
        }
        let (h, w) = (shape[1], shape[2]);
        self.check_input(h, w)?;
        let (wh, ww) = self.working_size(h, w);
        let mut x = image;
        if (wh, ww) != (h, w) {
            x = g.resize(x, Arc::new(ResizePlan::new(h, w, wh, ww)));
        }
        let p = &self.preprocessing;
        let scale: Vec<f64> = p.std.iter().map(|s| 1.0 / s).collect();
        let shift: Vec<f64> = p.mean.iter().zip(&p.std).map(|(m, s)| -m / s).collect();
        x = g.channel_affine(x, &scale, &shift);
        let params: Vec<Var> = self
            .arch
            .params()
            .iter()
            .map(|t| g.leaf(t.cast(), params_require_grad))
            .collect();
        let (raw, attention, token_grid) = match &*self.arch {
            Architecture::Cnn(m) => (m.forward(g, x, &params), Vec::new(), None),
            Architecture::Vit(m) => {
                let (l, a, grid) = m.forward(g, x, &params);
                (l, a, Some(grid))
            }
        };
        let rs = g.shape(raw).to_vec();
        let logits = if (rs[1], rs[2]) != (h, w) {
            g.resize(raw, Arc::new(ResizePlan::new(rs[1], rs[2], h, w)))
        } else {
            raw
        };
        Ok(ForwardVars {
            logits,
            attention,
            token_grid,
            params,
        })
    }

    /// Plain forward pass without gradient tracking.
    pub fn forward(&self, image: &Tensor<f64>) -> Result<ModelOutput> {
        let mut g = Graph::<f64>::new();
        let x = g.constant(image.clone());
        let fv = self.forward_graph(&mut g, x, false)?;
        let probs = g.softmax(fv.logits, 0);
        let attention = match self.family {
            Family::Vit => Some(fv.attention.iter().map(|&a| g.value(a).clone()).collect()),
            Family::Cnn => None,
        };
        Ok(ModelOutput {
            logits: g.value(fv.logits).clone(),
            probabilities: g.value(probs).clone(),
            attention,
            output_scale: 1.0,
        })
    }
}

/// Seeded toy CNN with default preprocessing.
pub fn make_toy_cnn(channels: usize, num_classes: usize, seed: u64) -> Result<SurrogateHandle> {
    let arch = ToyCnn::new(channels, num_classes, seed)?;
    Ok(SurrogateHandle::new(
        format!("toy-cnn-{seed}"),
        Architecture::Cnn(arch),
        Preprocessing::default(),
    ))
}

/// Seeded toy transformer with default preprocessing and a 32-wide embedding.
pub fn make_toy_vit(patch_token_size: usize, layers: usize, num_classes: usize, seed: u64) -> Result<SurrogateHandle> {
    make_toy_vit_with_dim(patch_token_size, layers, 32, num_classes, seed)
}

pub fn make_toy_vit_with_dim(
    patch_token_size: usize,
    layers: usize,
    dim: usize,
    num_classes: usize,
    seed: u64,
) -> Result<SurrogateHandle> {
    let arch = ToyVit::new(patch_token_size, layers, dim, num_classes, seed)?;
    Ok(SurrogateHandle::new(
        format!("toy-vit-{seed}"),
        Architecture::Vit(arch),
        Preprocessing::default(),
    ))
}

/// Normal(0, std) tensor from a seeded generator (Box–Muller).
pub(crate) fn normal_tensor(rng: &mut impl rand::Rng, shape: &[usize], std: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen();
            std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        })
        .collect();
    Tensor::from_vec(shape, data)
}
