use crate::error::{Error, Result};

fn norms(a: &[f64], b: &[f64]) -> Result<(f64, f64, f64)> {
    if a.len() != b.len() {
        return Err(Error::Parameter(format!("gradient lengths differ: {} vs {}", a.len(), b.len())));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(Error::Numeric("NaN in surrogate gradient".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok((dot, na, nb))
}

/// `−cos(g_vit, g_cnn)`; 0 when either gradient vanishes.
pub fn gradient_alignment(grad_vit: &[f64], grad_cnn: &[f64]) -> Result<f64> {
    let (dot, na, nb) = norms(grad_vit, grad_cnn)?;
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok(-(dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Partial derivatives of [`gradient_alignment`] with respect to each
/// argument: `∂(−cos)/∂a = −(b/(|a||b|) − cos·a/|a|²)` and symmetrically.
/// Both are zero under the zero-gradient guard.
pub fn alignment_cotangents(a: &[f64], b: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let (dot, na, nb) = norms(a, b)?;
    if na == 0.0 || nb == 0.0 {
        return Ok((vec![0.0; a.len()], vec![0.0; b.len()]));
    }
    let cos = dot / (na * nb);
    let inv = 1.0 / (na * nb);
    let da = a.iter().zip(b).map(|(&x, &y)| -(y * inv - cos * x / (na * na))).collect();
    let db = a.iter().zip(b).map(|(&x, &y)| -(x * inv - cos * y / (nb * nb))).collect();
    Ok((da, db))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_cases() {
        let g = [1.0, -2.0, 0.5];
        let twice: Vec<f64> = g.iter().map(|v| 2.0 * v).collect();
        let neg: Vec<f64> = g.iter().map(|v| -v).collect();
        assert!((gradient_alignment(&g, &twice).unwrap() + 1.0).abs() < 1e-6);
        assert!((gradient_alignment(&g, &neg).unwrap() - 1.0).abs() < 1e-6);
        assert!(gradient_alignment(&[1.0, 0.0], &[0.0, 3.0]).unwrap().abs() < 1e-6);
        assert_eq!(gradient_alignment(&[0.0, 0.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!(matches!(gradient_alignment(&[f64::NAN], &[1.0]), Err(Error::Numeric(_))));
    }

    #[test]
    fn cotangents_match_finite_differences() {
        let a = vec![0.3, -1.2, 0.7, 0.1];
        let b = vec![-0.4, 0.9, 1.5, -0.2];
        let (da, db) = alignment_cotangents(&a, &b).unwrap();
        let h = 1e-6;
        for i in 0..4 {
            let mut ap = a.clone();
            let mut am = a.clone();
            ap[i] += h;
            am[i] -= h;
            let fd = (gradient_alignment(&ap, &b).unwrap() - gradient_alignment(&am, &b).unwrap()) / (2.0 * h);
            assert!((fd - da[i]).abs() < 1e-7);
            let mut bp = b.clone();
            let mut bm = b.clone();
            bp[i] += h;
            bm[i] -= h;
            let fd = (gradient_alignment(&a, &bp).unwrap() - gradient_alignment(&a, &bm).unwrap()) / (2.0 * h);
            assert!((fd - db[i]).abs() < 1e-7);
        }
    }
}
