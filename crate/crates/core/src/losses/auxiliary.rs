use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model_zoo::LabelMap;
use crate::optim::sign;
use crate::placement::BinaryMask;
use crate::tensor::Tensor;

/// Dot-product weights over a flattened `[T, T]` attention map such that
/// summing `dot(A_l, w)` over `layers` maps gives the attention term.
pub fn attention_hijack_weights(tokens: usize, patch_tokens: &[bool], layers: usize) -> Arc<Vec<f64>> {
    assert_eq!(patch_tokens.len(), tokens);
    let k = -1.0 / (layers * tokens) as f64;
    let mut w = vec![0.0; tokens * tokens];
    for q in 0..tokens {
        for (t, &p) in patch_tokens.iter().enumerate() {
            if p {
                w[q * tokens + t] = k;
            }
        }
    }
    Arc::new(w)
}

/// Negative mean (over layers and query tokens) of the attention mass that
/// lands on patch tokens. Ranges from −1 (all attention on the patch) to 0.
pub fn attention_hijack_loss(attention: &[Tensor<f64>], patch_tokens: &BinaryMask) -> Result<f64> {
    if attention.is_empty() {
        return Err(Error::Contract("attention term needs a model that exposes attention".into()));
    }
    if patch_tokens.count() == 0 {
        return Err(Error::Parameter("the patch covers no token".into()));
    }
    let t = patch_tokens.data.len();
    let w = attention_hijack_weights(t, &patch_tokens.data, attention.len());
    let mut s = 0.0;
    for a in attention {
        if a.shape() != [t, t] {
            return Err(Error::Contract(format!("attention map {:?} does not match {t} tokens", a.shape())));
        }
        s += a.data().iter().zip(w.iter()).map(|(x, y)| x * y).sum::<f64>();
    }
    Ok(s)
}

/// 1-D lower envelope of parabolas (Felzenszwalb & Huttenlocher); sites
/// with infinite cost are skipped.
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let mut k: isize = -1;
    for q in 0..f.len() {
        if f[q].is_infinite() {
            continue;
        }
        loop {
            if k < 0 {
                k = 0;
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
                break;
            }
            let p = v[k as usize];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            if s <= z[k as usize] {
                k -= 1;
                continue;
            }
            k += 1;
            let ku = k as usize;
            v[ku] = q;
            z[ku] = s;
            z[ku + 1] = f64::INFINITY;
            break;
        }
    }
    if k < 0 {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut j = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[j + 1] < q as f64 {
            j += 1;
        }
        let d = q as f64 - v[j] as f64;
        *o = d * d + f[v[j]];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest set
/// pixel of `mask` (infinite if the mask is empty).
pub fn squared_distance_transform(mask: &BinaryMask) -> Vec<f64> {
    let (h, w) = (mask.height, mask.width);
    let n = h.max(w);
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    let mut grid: Vec<f64> = mask.data.iter().map(|&b| if b { 0.0 } else { f64::INFINITY }).collect();
    let mut col = vec![0.0; h];
    let mut tmp = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = grid[y * w + x];
        }
        edt_1d(&col, &mut tmp, &mut v, &mut z);
        for y in 0..h {
            grid[y * w + x] = tmp[y];
        }
    }
    let mut row = vec![0.0; w];
    for y in 0..h {
        edt_1d(&grid[y * w..(y + 1) * w], &mut row, &mut v, &mut z);
        grid[y * w..(y + 1) * w].copy_from_slice(&row);
    }
    grid
}

/// `φ = −dist(pixel, outside)` inside the region and `+dist(pixel, region)`
/// outside. All zeros when the region is empty or covers the image.
pub fn signed_distance_map(region: &BinaryMask) -> Vec<f64> {
    let n = region.data.len();
    let k = region.count();
    if k == 0 || k == n {
        return vec![0.0; n];
    }
    let to_region = squared_distance_transform(region);
    let outside = BinaryMask::new(region.height, region.width, region.data.iter().map(|b| !b).collect());
    let to_outside = squared_distance_transform(&outside);
    (0..n)
        .map(|i| {
            if region.data[i] {
                -to_outside[i].sqrt()
            } else {
                to_region[i].sqrt()
            }
        })
        .collect()
}

/// Weights `w[c·N + i] = −φ_c(i) / N_valid` over a `[C, H, W]` probability
/// tensor; the boundary term is `Σ w · p`. Ignored pixels get weight 0.
pub fn boundary_weights(labels: &LabelMap, num_classes: usize) -> Result<Arc<Vec<f64>>> {
    let n = labels.data.len();
    let valid = labels.data.iter().filter(|&&l| l < num_classes).count();
    if valid == 0 {
        return Err(Error::Undefined("boundary loss: every pixel is ignored".into()));
    }
    let mut w = vec![0.0; num_classes * n];
    for c in 0..num_classes {
        let phi = signed_distance_map(&BinaryMask::from_labels(labels, c));
        for i in 0..n {
            if labels.data[i] < num_classes {
                w[c * n + i] = -phi[i] / valid as f64;
            }
        }
    }
    Ok(Arc::new(w))
}

/// Negated boundary loss: `−Σ_c Σ_i φ_c(i)·p_c(i) / N_valid`. Lower values
/// mean more probability mass far from each class's true region.
pub fn boundary_disruption_loss(probs: &Tensor<f64>, labels: &LabelMap) -> Result<f64> {
    let c = probs.shape()[0];
    if probs.len() != c * labels.data.len() {
        return Err(Error::Parameter("probabilities and labels differ in size".into()));
    }
    let w = boundary_weights(labels, c)?;
    Ok(probs.data().iter().zip(w.iter()).map(|(p, w)| p * w).sum())
}

/// Anisotropic total variation of a `[3, S, S]` patch divided by `S²`.
pub fn total_variation(patch: &Tensor<f64>) -> f64 {
    let (c, h, w) = (patch.shape()[0], patch.shape()[1], patch.shape()[2]);
    let d = patch.data();
    let mut s = 0.0;
    for k in 0..c {
        let p = &d[k * h * w..(k + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                if y + 1 < h {
                    s += (p[(y + 1) * w + x] - p[y * w + x]).abs();
                }
                if x + 1 < w {
                    s += (p[y * w + x + 1] - p[y * w + x]).abs();
                }
            }
        }
    }
    s / (h * w) as f64
}

/// Subgradient of [`total_variation`] (`sign(0) = 0`).
pub fn total_variation_grad(patch: &Tensor<f64>) -> Tensor<f64> {
    let (c, h, w) = (patch.shape()[0], patch.shape()[1], patch.shape()[2]);
    let d = patch.data();
    let norm = 1.0 / (h * w) as f64;
    let mut g = vec![0.0; d.len()];
    for k in 0..c {
        let off = k * h * w;
        for y in 0..h {
            for x in 0..w {
                let i = off + y * w + x;
                if y + 1 < h {
                    let s = sign(d[i + w] - d[i]) * norm;
                    g[i + w] += s;
                    g[i] -= s;
                }
                if x + 1 < w {
                    let s = sign(d[i + 1] - d[i]) * norm;
                    g[i + 1] += s;
                    g[i] -= s;
                }
            }
        }
    }
    Tensor::from_vec(patch.shape(), g)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_sdt(mask: &BinaryMask) -> Vec<f64> {
        let (h, w) = (mask.height, mask.width);
        let mut out = vec![f64::INFINITY; h * w];
        for y in 0..h {
            for x in 0..w {
                for yy in 0..h {
                    for xx in 0..w {
                        if mask.get(yy, xx) {
                            let d = ((y as f64 - yy as f64).powi(2)) + ((x as f64 - xx as f64).powi(2));
                            out[y * w + x] = out[y * w + x].min(d);
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn edt_matches_brute_force() {
        let mut state = 12345u64;
        for trial in 0..30 {
            let (h, w) = (5 + trial % 7, 4 + trial % 9);
            let data = (0..h * w)
                .map(|_| {
                    state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    (state >> 33) % 5 == 0
                })
                .collect();
            let m = BinaryMask::new(h, w, data);
            assert_eq!(squared_distance_transform(&m), brute_sdt(&m));
        }
    }

    #[test]
    fn symmetric_split_with_uniform_probs_cancels() {
        let labels = LabelMap::new(4, 4, (0..16).map(|i| usize::from(i >= 8)).collect());
        let probs = Tensor::full(&[2, 4, 4], 0.5);
        assert!(boundary_disruption_loss(&probs, &labels).unwrap().abs() < 1e-6);
        let single = LabelMap::filled(4, 4, 1);
        assert!(boundary_disruption_loss(&probs, &single).unwrap().is_finite());
    }

    #[test]
    fn attention_reference_values() {
        let t = 4;
        let mut tokens = BinaryMask::empty(2, 2);
        tokens.set(0, 1, true);
        let uniform = Tensor::full(&[t, t], 0.25);
        assert!((attention_hijack_loss(&[uniform.clone(), uniform], &tokens).unwrap() + 0.25).abs() < 1e-12);
        let mut focus = vec![0.0; t * t];
        for q in 0..t {
            focus[q * t + 1] = 1.0;
        }
        let focus = Tensor::from_vec(&[t, t], focus);
        assert!((attention_hijack_loss(&[focus], &tokens).unwrap() + 1.0).abs() < 1e-12);
        assert!(matches!(attention_hijack_loss(&[], &tokens), Err(Error::Contract(_))));
    }

    #[test]
    fn tv_fixtures() {
        let d = vec![0.1, 0.4, 0.3, 0.9];
        let p = Tensor::from_vec(&[1, 2, 2], d);
        // |0.3-0.1| + |0.9-0.4| + |0.4-0.1| + |0.9-0.3|
        let expect = (0.2 + 0.5 + 0.3 + 0.6) / 4.0;
        assert!((total_variation(&p) - expect).abs() < 1e-9);
        let mut step = vec![0.0; 3 * 36];
        for y in 0..6 {
            for x in 3..6 {
                step[y * 6 + x] = 0.8;
            }
        }
        assert!((total_variation(&Tensor::from_vec(&[3, 6, 6], step)) - 0.8 / 6.0).abs() < 1e-9);
        assert_eq!(total_variation(&Tensor::full(&[3, 5, 5], 0.3)), 0.0);
    }

    #[test]
    fn tv_grad_matches_finite_differences() {
        let d: Vec<f64> = (0..27).map(|i| ((i * 37) % 11) as f64 / 10.0 + 0.013 * i as f64).collect();
        let p = Tensor::from_vec(&[3, 3, 3], d.clone());
        let g = total_variation_grad(&p);
        let h = 1e-7;
        for i in 0..27 {
            let mut a = d.clone();
            let mut b = d.clone();
            a[i] += h;
            b[i] -= h;
            let fd = (total_variation(&Tensor::from_vec(&[3, 3, 3], a)) - total_variation(&Tensor::from_vec(&[3, 3, 3], b))) / (2.0 * h);
            assert!((fd - g.data()[i]).abs() < 1e-6, "{i}: {fd} vs {}", g.data()[i]);
        }
    }
}
