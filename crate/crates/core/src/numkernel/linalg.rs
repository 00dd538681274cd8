//! Singular-value spectra.
//!
//! Small or square-ish inputs go through one-sided (Hestenes) Jacobi on the
//! columns. Tall, thin inputs are reduced to their Gram matrix first and the
//! symmetric eigenproblem is solved by cyclic Jacobi rotations.

use crate::error::{ElmError, Result};

use super::kernels;
use super::tensor::Tensor;

/// Relative size of the off-diagonal mass at which a Jacobi sweep counts as converged.
const OFF_TOL: f64 = 1e-13;

/// Singular values of an `m×n` matrix, `min(m, n)` of them, descending.
pub fn svd_spectrum(x: &Tensor) -> Result<Vec<f64>> {
    let (m, n) = x.dims2()?;
    // Work on the orientation with fewer columns.
    let (rows, cols, data) = if n > m {
        let t = x.transpose2()?;
        (n, m, t.into_data())
    } else {
        (m, n, x.data().to_vec())
    };
    let mut sv = if rows >= 8 * cols && cols >= 16 {
        gram_route(&data, rows, cols)?
    } else {
        one_sided_jacobi(data, rows, cols)?
    };
    sv.sort_by(|a, b| b.total_cmp(a));
    Ok(sv)
}

fn one_sided_jacobi(mut a: Vec<f64>, m: usize, n: usize) -> Result<Vec<f64>> {
    // Column-major copy makes the rotations contiguous.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a[i * n + j]).collect()).collect();
    a.clear();
    let max_sweeps = 100 * n.max(1);
    let tol = (m as f64 * f64::EPSILON).max(1e-15);
    let mut converged = n < 2;
    for _ in 0..max_sweeps {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (&cols[p], &cols[q]);
                    let mut al = 0.0;
                    let mut be = 0.0;
                    let mut ga = 0.0;
                    for (x, y) in cp.iter().zip(cq) {
                        al += x * x;
                        be += y * y;
                        ga += x * y;
                    }
                    (al, be, ga)
                };
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (left, right) = cols.split_at_mut(q);
                let (cp, cq) = (&mut left[p], &mut right[0]);
                for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
                    let xv = *x;
                    let yv = *y;
                    *x = c * xv - s * yv;
                    *y = s * xv + c * yv;
                }
            }
        }
        if !rotated {
            converged = true;
        }
    }
    if !converged {
        return Err(ElmError::Numeric(format!(
            "one-sided Jacobi did not converge within {max_sweeps} sweeps"
        )));
    }
    Ok(cols
        .iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect())
}

fn gram_route(a: &[f64], m: usize, n: usize) -> Result<Vec<f64>> {
    let mut gram = vec![0.0; n * n];
    kernels::gemm_tn(a, a, &mut gram, m, n, n);
    let eig = symmetric_eigenvalues(gram, n)?;
    Ok(eig.into_iter().map(|l| l.max(0.0).sqrt()).collect())
}

/// Eigenvalues of a symmetric `n×n` matrix by cyclic Jacobi rotations.
pub fn symmetric_eigenvalues(mut s: Vec<f64>, n: usize) -> Result<Vec<f64>> {
    let max_sweeps = 100 * n.max(1);
    for _ in 0..max_sweeps {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| s[i * n + j] * s[i * n + j])
            .sum();
        let diag: f64 = (0..n).map(|i| s[i * n + i] * s[i * n + i]).sum();
        if off == 0.0 || off.sqrt() <= OFF_TOL * (diag + off).sqrt() {
            return Ok((0..n).map(|i| s[i * n + i]).collect());
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = s[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (s[q * n + q] - s[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let skp = s[k * n + p];
                    let skq = s[k * n + q];
                    s[k * n + p] = c * skp - sn * skq;
                    s[k * n + q] = sn * skp + c * skq;
                }
                for k in 0..n {
                    let spk = s[p * n + k];
                    let sqk = s[q * n + k];
                    s[p * n + k] = c * spk - sn * sqk;
                    s[q * n + k] = sn * spk + c * sqk;
                }
            }
        }
    }
    Err(ElmError::Numeric(format!(
        "symmetric Jacobi did not converge within {max_sweeps} sweeps"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_spectrum() {
        let x = Tensor::from_rows(&[&[3.0, 0.0], &[0.0, 1.0]]).unwrap();
        assert_eq!(svd_spectrum(&x).unwrap(), vec![3.0, 1.0]);
    }

    #[test]
    fn rank_one_outer_product() {
        let u = [1.0, 2.0, 2.0];
        let v = [3.0, 4.0];
        let rows: Vec<Vec<f64>> = u.iter().map(|a| v.iter().map(|b| a * b).collect()).collect();
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let s = svd_spectrum(&Tensor::from_rows(&refs).unwrap()).unwrap();
        assert_eq!(s.len(), 2);
        assert!((s[0] - 15.0).abs() < 1e-12);
        assert!(s[1].abs() < 1e-12);
    }

    #[test]
    fn wide_input_is_transposed() {
        let x = Tensor::from_rows(&[&[1.0, 0.0, 0.0, 0.0], &[0.0, 2.0, 0.0, 0.0]]).unwrap();
        assert_eq!(svd_spectrum(&x).unwrap(), vec![2.0, 1.0]);
    }
}
