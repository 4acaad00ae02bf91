use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::cnn::check_shapes;
use super::normal_tensor;

/// Small tokenizing transformer segmenter.
///
/// Non-overlapping `token_size` patches are embedded linearly, summed with a
/// fixed 2-D sinusoidal position code, passed through pre-norm single-head
/// attention blocks and classified per token. Token logits form a coarse grid
/// that the handle upsamples bilinearly.
#[derive(Clone, Debug)]
pub struct ToyVit {
    pub token_size: usize,
    pub layers: usize,
    pub dim: usize,
    pub num_classes: usize,
    pub(crate) params: Vec<Tensor<f64>>,
}

const PER_LAYER: usize = 8;

impl ToyVit {
    pub fn new(token_size: usize, layers: usize, dim: usize, num_classes: usize, seed: u64) -> Result<Self> {
        if token_size == 0 || layers == 0 {
            return Err(Error::Config("token size and layer count must be positive".into()));
        }
        if dim < 4 || !dim.is_multiple_of(4) {
            return Err(Error::Config(format!("embedding width {dim} must be a positive multiple of 4")));
        }
        if num_classes < 2 {
            return Err(Error::Config(format!("num_classes must be >= 2, got {num_classes}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let patch_dim = 3 * token_size * token_size;
        let xavier = |a: usize, b: usize| (2.0 / (a + b) as f64).sqrt();
        let mut params = vec![
            normal_tensor(&mut rng, &[patch_dim, dim], xavier(patch_dim, dim)),
            Tensor::zeros(&[dim]),
        ];
        for _ in 0..layers {
            for _ in 0..4 {
                params.push(normal_tensor(&mut rng, &[dim, dim], xavier(dim, dim)));
            }
            params.push(normal_tensor(&mut rng, &[dim, 2 * dim], xavier(dim, 2 * dim)));
            params.push(Tensor::zeros(&[2 * dim]));
            params.push(normal_tensor(&mut rng, &[2 * dim, dim], xavier(2 * dim, dim)));
            params.push(Tensor::zeros(&[dim]));
        }
        params.push(normal_tensor(&mut rng, &[dim, num_classes], xavier(dim, num_classes)));
        params.push(Tensor::zeros(&[num_classes]));
        Ok(Self {
            token_size,
            layers,
            dim,
            num_classes,
            params,
        })
    }

    pub(crate) fn from_params(
        token_size: usize,
        layers: usize,
        dim: usize,
        num_classes: usize,
        params: Vec<Tensor<f64>>,
    ) -> Result<Self> {
        let reference = Self::new(token_size, layers, dim, num_classes, 0)?;
        check_shapes(&reference.params, &params)?;
        Ok(Self { params, ..reference })
    }

    /// Returns token-grid logits `[C, gh, gw]`, per-layer attention and the grid.
    pub(crate) fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var, p: &[Var]) -> (Var, Vec<Var>, (usize, usize)) {
        let s = g.shape(x).to_vec();
        let (h, w) = (s[1], s[2]);
        let ts = self.token_size;
        let (gh, gw) = (h / ts, w / ts);
        let tokens = gh * gw;
        let patch_dim = 3 * ts * ts;
        let d = self.dim;

        let index = Arc::new(token_index(h, w, ts));
        let t = g.gather(x, index, &[tokens, patch_dim]);
        let e = g.matmul(t, p[0]);
        let e = g.add_row_bias(e, p[1]);
        let mut hcur = g.add_const(e, &position_code(gh, gw, d));

        let inv_sqrt_d = 1.0 / (d as f64).sqrt();
        let mut attention = Vec::with_capacity(self.layers);
        for l in 0..self.layers {
            let q = &p[2 + l * PER_LAYER..2 + (l + 1) * PER_LAYER];
            let n = g.layer_norm(hcur);
            let qv = g.matmul(n, q[0]);
            let kv = g.matmul(n, q[1]);
            let vv = g.matmul(n, q[2]);
            let kt = g.transpose(kv);
            let scores = g.matmul(qv, kt);
            let scores = g.scale(scores, inv_sqrt_d);
            let a = g.softmax(scores, 1);
            attention.push(a);
            let o = g.matmul(a, vv);
            let o = g.matmul(o, q[3]);
            hcur = g.add(hcur, o);
            let n2 = g.layer_norm(hcur);
            let m = g.matmul(n2, q[4]);
            let m = g.add_row_bias(m, q[5]);
            let m = g.relu(m);
            let m = g.matmul(m, q[6]);
            let m = g.add_row_bias(m, q[7]);
            hcur = g.add(hcur, m);
        }
        let head = 2 + self.layers * PER_LAYER;
        let n = g.layer_norm(hcur);
        let lt = g.matmul(n, p[head]);
        let lt = g.add_row_bias(lt, p[head + 1]);
        let l = g.transpose(lt);
        let l = g.reshape(l, &[self.num_classes, gh, gw]);
        (l, attention, (gh, gw))
    }
}

/// Flat source index for every `(token, channel, dy, dx)` feature.
fn token_index(h: usize, w: usize, ts: usize) -> Vec<usize> {
    let (gh, gw) = (h / ts, w / ts);
    let mut idx = Vec::with_capacity(gh * gw * 3 * ts * ts);
    for ty in 0..gh {
        for tx in 0..gw {
            for c in 0..3 {
                for dy in 0..ts {
                    for dx in 0..ts {
                        idx.push(c * h * w + (ty * ts + dy) * w + tx * ts + dx);
                    }
                }
            }
        }
    }
    idx
}

/// 2-D sinusoidal code: first half of the width encodes the row, second half
/// the column.
fn position_code(gh: usize, gw: usize, d: usize) -> Tensor<f64> {
    let half = d / 2;
    let mut data = Vec::with_capacity(gh * gw * d);
    for r in 0..gh {
        for c in 0..gw {
            for pos in [r, c] {
                for j in 0..half {
                    let freq = 1.0 / 100f64.powf((2 * (j / 2)) as f64 / half as f64);
                    let a = pos as f64 * freq;
                    data.push(if j % 2 == 0 { a.sin() } else { a.cos() });
                }
            }
        }
    }
    Tensor::from_vec(&[gh * gw, d], data)
}
