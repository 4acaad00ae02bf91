use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::normal_tensor;

/// Small encoder–decoder segmenter.
///
/// Two stride-2 stages, a refinement conv, a global-context vector added back
/// onto the deep features, and a head that fuses deep and shallow features
/// at half resolution. Logits leave at half resolution; the handle resamples
/// them to the input size.
#[derive(Clone, Debug)]
pub struct ToyCnn {
    pub channels: usize,
    pub num_classes: usize,
    pub(crate) params: Vec<Tensor<f64>>,
}

// Parameter order.
const W1: usize = 0;
const B1: usize = 1;
const W2: usize = 2;
const B2: usize = 3;
const W3: usize = 4;
const B3: usize = 5;
const WCTX: usize = 6;
const BCTX: usize = 7;
const WDEEP: usize = 8;
const WSKIP: usize = 9;
const BHEAD: usize = 10;

impl ToyCnn {
    pub fn new(channels: usize, num_classes: usize, seed: u64) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Config("toy CNN needs at least one channel".into()));
        }
        if num_classes < 2 {
            return Err(Error::Config(format!("num_classes must be >= 2, got {num_classes}")));
        }
        let (c, c2, k) = (channels, 2 * channels, num_classes);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
        let params = vec![
            normal_tensor(&mut rng, &[c, 3, 3, 3], he(27)),
            Tensor::zeros(&[c]),
            normal_tensor(&mut rng, &[c2, c, 3, 3], he(9 * c)),
            Tensor::zeros(&[c2]),
            normal_tensor(&mut rng, &[c2, c2, 3, 3], he(9 * c2)),
            Tensor::zeros(&[c2]),
            normal_tensor(&mut rng, &[c2, c2], he(c2) * 0.5),
            Tensor::zeros(&[c2]),
            normal_tensor(&mut rng, &[k, c2, 1, 1], he(c2)),
            normal_tensor(&mut rng, &[k, c, 1, 1], he(c)),
            Tensor::zeros(&[k]),
        ];
        Ok(Self {
            channels,
            num_classes,
            params,
        })
    }

    pub(crate) fn from_params(channels: usize, num_classes: usize, params: Vec<Tensor<f64>>) -> Result<Self> {
        let reference = Self::new(channels, num_classes, 0)?;
        check_shapes(&reference.params, &params)?;
        Ok(Self {
            channels,
            num_classes,
            params,
        })
    }

    pub(crate) fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var, p: &[Var]) -> Var {
        let c2 = 2 * self.channels;
        let f1 = g.conv2d(x, p[W1], 2, 1);
        let f1 = g.add_channel_bias(f1, p[B1]);
        let f1 = g.relu(f1);
        let f2 = g.conv2d(f1, p[W2], 2, 1);
        let f2 = g.add_channel_bias(f2, p[B2]);
        let f2 = g.relu(f2);
        let f3 = g.conv2d(f2, p[W3], 1, 1);
        let f3 = g.add_channel_bias(f3, p[B3]);
        let f3 = g.relu(f3);

        let ctx = g.mean_spatial(f3);
        let ctx = g.reshape(ctx, &[1, c2]);
        let ctx = g.matmul(ctx, p[WCTX]);
        let ctx = g.reshape(ctx, &[c2]);
        let ctx = g.add(ctx, p[BCTX]);
        let ctx = g.relu(ctx);
        let f3 = g.add_channel_bias(f3, ctx);

        let deep = g.conv2d(f3, p[WDEEP], 1, 0);
        let s1 = g.shape(f1).to_vec();
        let sd = g.shape(deep).to_vec();
        let plan = std::sync::Arc::new(crate::autograd::ResizePlan::new(sd[1], sd[2], s1[1], s1[2]));
        let deep = g.resize(deep, plan);
        let skip = g.conv2d(f1, p[WSKIP], 1, 0);
        let logits = g.add(deep, skip);
        g.add_channel_bias(logits, p[BHEAD])
    }
}

pub(crate) fn check_shapes(reference: &[Tensor<f64>], got: &[Tensor<f64>]) -> Result<()> {
    if reference.len() != got.len() {
        return Err(Error::Contract(format!(
            "expected {} parameter tensors, found {}",
            reference.len(),
            got.len()
        )));
    }
    for (i, (r, t)) in reference.iter().zip(got).enumerate() {
        if r.shape() != t.shape() {
            return Err(Error::Contract(format!(
                "parameter {i}: expected shape {:?}, found {:?}",
                r.shape(),
                t.shape()
            )));
        }
    }
    Ok(())
}
