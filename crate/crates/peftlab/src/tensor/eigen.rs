//! Symmetric eigendecomposition via cyclic Jacobi rotations.
//!
//! Small and exact enough for the metric module's matrix square roots
//! (feature dimensions stay under 64).

use super::Tensor;
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 100;
const OFF_DIAG_TOL: f64 = 1e-12;
const SYMMETRY_TOL: f64 = 1e-9;

/// Decomposes a symmetric matrix as `s = V diag(eigenvalues) V^T`.
///
/// Returns eigenvalues in ascending order with matching eigenvector
/// columns. Input must be symmetric within 1e-9.
pub fn sym_eigen(s: &Tensor) -> Result<(Tensor, Tensor)> {
    let shape = s.shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::Contract(format!(
            "sym_eigen requires a square matrix, got shape {shape:?}"
        )));
    }
    let n = shape[0];
    let data = s.data();
    if !s.is_finite() {
        return Err(Error::Numeric(
            "sym_eigen input has non-finite entries".into(),
        ));
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if (data[i * n + j] - data[j * n + i]).abs() > SYMMETRY_TOL {
                return Err(Error::Contract(format!(
                    "sym_eigen input not symmetric at ({i},{j}): {} vs {}",
                    data[i * n + j],
                    data[j * n + i]
                )));
            }
        }
    }

    // Work on the symmetrized copy; rotations keep it symmetric.
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] = 0.5 * (data[i * n + j] + data[j * n + i]);
        }
    }
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }

    let fro = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let threshold = OFF_DIAG_TOL * fro.max(f64::MIN_POSITIVE);

    for _sweep in 0..MAX_SWEEPS {
        let mut max_off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                max_off = max_off.max(a[p * n + q].abs());
            }
        }
        if max_off <= threshold {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq.abs() <= threshold {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s_rot = t * c;

                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s_rot * akq;
                    a[k * n + q] = s_rot * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s_rot * aqk;
                    a[q * n + k] = s_rot * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s_rot * vkq;
                    v[k * n + q] = s_rot * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[i * n + i].partial_cmp(&a[j * n + j]).unwrap());

    let eigenvalues: Vec<f64> = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vectors = vec![0.0; n * n];
    for (col, &src) in order.iter().enumerate() {
        for row in 0..n {
            vectors[row * n + col] = v[row * n + src];
        }
    }

    Ok((
        Tensor::new(eigenvalues, &[n])?,
        Tensor::new(vectors, &[n, n])?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn reconstruct(values: &Tensor, vectors: &Tensor) -> Vec<f64> {
        let n = values.numel();
        let v = vectors.data();
        let lam = values.data();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for k in 0..n {
                    s += v[i * n + k] * lam[k] * v[j * n + k];
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn diagonal_matrix_eigenvalues_are_sorted_diagonal() {
        let s = Tensor::new(vec![3.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 2.0], &[3, 3]).unwrap();
        let (vals, _) = sym_eigen(&s).unwrap();
        assert_eq!(vals.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn identity_has_unit_eigenvalues() {
        let (vals, _) = sym_eigen(&Tensor::identity(4)).unwrap();
        assert!(vals.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn random_symmetric_reconstructs_within_tolerance() {
        let mut rng = rng::substream(3, "eigen-test", &[]);
        for case in 0..8 {
            let n = 3 + case % 3;
            let raw = rng::randn_vec(&mut rng, n * n, 1.0);
            let mut sym = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    sym[i * n + j] = 0.5 * (raw[i * n + j] + raw[j * n + i]);
                }
            }
            let s = Tensor::new(sym.clone(), &[n, n]).unwrap();
            let (vals, vecs) = sym_eigen(&s).unwrap();
            let rec = reconstruct(&vals, &vecs);
            let norm = sym.iter().map(|x| x * x).sum::<f64>().sqrt();
            let err = rec
                .iter()
                .zip(&sym)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(err <= 1e-8 * norm.max(1.0), "case {case}: err {err}");

            // Eigenvector matrix orthonormal within 1e-8.
            let v = vecs.data();
            for c1 in 0..n {
                for c2 in 0..n {
                    let dot: f64 = (0..n).map(|r| v[r * n + c1] * v[r * n + c2]).sum();
                    let expect = if c1 == c2 { 1.0 } else { 0.0 };
                    assert!((dot - expect).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn asymmetric_input_is_contract_error() {
        let s = Tensor::new(vec![1.0, 2.0, 0.5, 1.0], &[2, 2]).unwrap();
        assert!(matches!(sym_eigen(&s), Err(Error::Contract(_))));
    }

    #[test]
    fn non_finite_input_is_numeric_error() {
        let s = Tensor::new(vec![1.0, f64::NAN, f64::NAN, 1.0], &[2, 2]).unwrap();
        assert!(matches!(sym_eigen(&s), Err(Error::Numeric(_))));
    }

    #[test]
    fn psd_gram_matrix_eigenvalues_nonnegative() {
        let mut rng = rng::substream(11, "eigen-psd", &[]);
        for _ in 0..5 {
            let a = rng::randn_vec(&mut rng, 4 * 4, 1.0);
            // Gram matrix A^T A.
            let mut gram = vec![0.0; 16];
            for i in 0..4 {
                for j in 0..4 {
                    gram[i * 4 + j] = (0..4).map(|k| a[k * 4 + i] * a[k * 4 + j]).sum();
                }
            }
            let (vals, _) = sym_eigen(&Tensor::new(gram, &[4, 4]).unwrap()).unwrap();
            assert!(vals.data().iter().all(|&v| v >= -1e-9));
        }
    }
}
