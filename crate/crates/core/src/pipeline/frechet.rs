//! Fréchet distance between Gaussian fits of detector features, the
//! desk-scale analog of FID. All linear algebra runs in f64.

use crate::error::{Error, Result};

/// Sample mean and unbiased covariance (denominator n-1) of row vectors.
pub fn gaussian_stats(features: &[Vec<f32>]) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = features.len();
    if n < 2 {
        return Err(Error::Pipeline(format!("need at least 2 feature vectors, got {n}")));
    }
    let d = features[0].len();
    if d == 0 || features.iter().any(|f| f.len() != d) {
        return Err(Error::Pipeline("feature vectors must share a nonzero length".into()));
    }
    let mut mean = vec![0.0f64; d];
    for f in features {
        for (m, v) in mean.iter_mut().zip(f) {
            *m += *v as f64;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![0.0f64; d * d];
    for f in features {
        let c: Vec<f64> = f.iter().zip(&mean).map(|(v, m)| *v as f64 - m).collect();
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += c[i] * c[j];
            }
        }
    }
    let denom = (n - 1) as f64;
    for v in &mut cov {
        *v /= denom;
    }
    Ok((mean, cov))
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns (eigenvalues, column eigenvectors), unordered.
pub fn jacobi_eigh(a: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(a.len(), d * d);
    let mut m = a.to_vec();
    let mut v = vec![0.0f64; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..d {
            for j in (i + 1)..d {
                off += m[i * d + j] * m[i * d + j];
            }
        }
        if off < 1e-26 {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = m[p * d + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let (app, aqq) = (m[p * d + p], m[q * d + q]);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let (mkp, mkq) = (m[k * d + p], m[k * d + q]);
                    m[k * d + p] = c * mkp - s * mkq;
                    m[k * d + q] = s * mkp + c * mkq;
                }
                for k in 0..d {
                    let (mpk, mqk) = (m[p * d + k], m[q * d + k]);
                    m[p * d + k] = c * mpk - s * mqk;
                    m[q * d + k] = s * mpk + c * mqk;
                }
                for k in 0..d {
                    let (vkp, vkq) = (v[k * d + p], v[k * d + q]);
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eig = (0..d).map(|i| m[i * d + i]).collect();
    (eig, v)
}

fn matmul_f64(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; d * d];
    for i in 0..d {
        for k in 0..d {
            let aik = a[i * d + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..d {
                out[i * d + j] += aik * b[k * d + j];
            }
        }
    }
    out
}

/// Symmetric PSD square root via eigendecomposition; negative eigenvalues
/// are clamped to zero.
pub fn psd_sqrt(a: &[f64], d: usize) -> Vec<f64> {
    let (eig, v) = jacobi_eigh(a, d);
    let mut out = vec![0.0f64; d * d];
    for (k, &lam) in eig.iter().enumerate() {
        let s = lam.max(0.0).sqrt();
        if s == 0.0 {
            continue;
        }
        for i in 0..d {
            let vik = v[i * d + k];
            for j in 0..d {
                out[i * d + j] += s * vik * v[j * d + k];
            }
        }
    }
    out
}

/// Fréchet distance between two Gaussians:
/// `||mu1-mu2||^2 + tr(S1 + S2 - 2 sqrt(S1 S2))`.
///
/// `tr sqrt(S1 S2)` is computed as `tr sqrt(S2^1/2 S1 S2^1/2)`, which is a
/// similarity-equivalent symmetric PSD problem.
pub fn frechet_gaussian(m1: &[f64], c1: &[f64], m2: &[f64], c2: &[f64]) -> f64 {
    let d = m1.len();
    debug_assert_eq!(m2.len(), d);
    debug_assert_eq!(c1.len(), d * d);
    debug_assert_eq!(c2.len(), d * d);
    let mean_term: f64 = m1.iter().zip(m2).map(|(a, b)| (a - b) * (a - b)).sum();
    let s2h = psd_sqrt(c2, d);
    let inner = matmul_f64(&s2h, &matmul_f64(c1, &s2h, d), d);
    // Symmetrize against round-off before the eigensolve.
    let mut sym = inner.clone();
    for i in 0..d {
        for j in 0..d {
            sym[i * d + j] = 0.5 * (inner[i * d + j] + inner[j * d + i]);
        }
    }
    let (eig, _) = jacobi_eigh(&sym, d);
    let tr_sqrt: f64 = eig.iter().map(|l| l.max(0.0).sqrt()).sum();
    let tr1: f64 = (0..d).map(|i| c1[i * d + i]).sum();
    let tr2: f64 = (0..d).map(|i| c2[i * d + i]).sum();
    (mean_term + tr1 + tr2 - 2.0 * tr_sqrt).max(0.0)
}

/// Fréchet feature distance between two feature sets.
pub fn feature_frechet_distance(real: &[Vec<f32>], gen: &[Vec<f32>]) -> Result<f64> {
    let (m1, c1) = gaussian_stats(real)?;
    let (m2, c2) = gaussian_stats(gen)?;
    if m1.len() != m2.len() {
        return Err(Error::Pipeline(format!(
            "feature dims differ: {} vs {}",
            m1.len(),
            m2.len()
        )));
    }
    Ok(frechet_gaussian(&m1, &c1, &m2, &c2))
}
