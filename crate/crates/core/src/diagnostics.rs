//! First-layer kernel geometry: pairwise cosines, angle statistics and the
//! spectrum of the row-normalized Gram matrix.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ortho::{pair_cosines, KernelBank};
use crate::tensor::{self, Tensor};

pub const DEFAULT_TAU_DEG: f64 = 10.0;
pub const JACOBI_MAX_SWEEPS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometrySummary {
    pub k: usize,
    pub cosine_matrix: Vec<Vec<f64>>,
    pub mean_abs_cos: f64,
    pub mean_signed_cos: f64,
    pub min_angle_deg: f64,
    pub max_angle_deg: f64,
    pub tau_deg: f64,
    pub frac_near_orthogonal: f64,
    /// Descending.
    pub gram_eigenvalues: Vec<f64>,
}

/// K×K matrix of ε-guarded cosines. The diagonal is 1 for nonzero kernels
/// and 0 for zero kernels.
pub fn pairwise_cosine_matrix(kb: &KernelBank, epsilon: f64) -> Tensor {
    let k = kb.k();
    let norms = kb.norms();
    let mut m = vec![0.0; k * k];
    let mut pairs = pair_cosines(kb, epsilon).into_iter();
    for i in 0..k {
        m[i * k + i] = if norms[i] > 0.0 { 1.0 } else { 0.0 };
        for j in i + 1..k {
            let c = pairs.next().expect("one cosine per pair");
            m[i * k + j] = c;
            m[j * k + i] = c;
        }
    }
    Tensor::new(vec![k, k], m).expect("finite cosines")
}

/// Angle statistics over the strict upper triangle of a cosine matrix.
///
/// Cosines are clamped to [-1, 1] before `acos`. With fewer than two kernels
/// there are no pairs: means are 0, angles 90° and the near-orthogonal
/// fraction is 1.
pub fn angle_summary(cos_matrix: &Tensor, tau_deg: f64) -> Result<GeometrySummary> {
    let (k, k2) = cos_matrix.dims2()?;
    if k != k2 {
        return Err(Error::Dimension(format!("cosine matrix is {k}×{k2}")));
    }
    let mut sum_abs = 0.0;
    let mut sum_signed = 0.0;
    let mut min_angle = f64::INFINITY;
    let mut max_angle = f64::NEG_INFINITY;
    let mut near = 0usize;
    let mut pairs = 0usize;
    for i in 0..k {
        for j in i + 1..k {
            let c = cos_matrix.at2(i, j);
            sum_abs += c.abs();
            sum_signed += c;
            let angle = c.clamp(-1.0, 1.0).acos().to_degrees();
            min_angle = min_angle.min(angle);
            max_angle = max_angle.max(angle);
            if (angle - 90.0).abs() <= tau_deg {
                near += 1;
            }
            pairs += 1;
        }
    }
    let gram_eigenvalues = symmetric_eigenvalues(cos_matrix)?;
    let (mean_abs_cos, mean_signed_cos, frac_near_orthogonal) = if pairs == 0 {
        min_angle = 90.0;
        max_angle = 90.0;
        (0.0, 0.0, 1.0)
    } else {
        let p = pairs as f64;
        (sum_abs / p, sum_signed / p, near as f64 / p)
    };
    Ok(GeometrySummary {
        k,
        cosine_matrix: cos_matrix.rows().map(<[f64]>::to_vec).collect(),
        mean_abs_cos,
        mean_signed_cos,
        min_angle_deg: min_angle,
        max_angle_deg: max_angle,
        tau_deg,
        frac_near_orthogonal,
        gram_eigenvalues,
    })
}

/// Convenience: cosine matrix and summary of a bank in one call.
pub fn summarize(kb: &KernelBank, epsilon: f64, tau_deg: f64) -> Result<GeometrySummary> {
    angle_summary(&pairwise_cosine_matrix(kb, epsilon), tau_deg)
}

/// Eigenvalues (descending) of the Gram matrix of unit-normalized kernels.
/// Zero kernels contribute a zero row and column.
pub fn gram_spectrum(kb: &KernelBank) -> Result<Vec<f64>> {
    let k = kb.k();
    let units: Vec<Vec<f64>> = (0..k)
        .map(|i| {
            let row = kb.row(i);
            let n = tensor::l2_norm(row);
            if n > 0.0 {
                row.iter().map(|x| x / n).collect()
            } else {
                vec![0.0; row.len()]
            }
        })
        .collect();
    let u = Tensor::from_rows(&units)?;
    symmetric_eigenvalues(&u.matmul_transposed(&u)?)
}

/// Cyclic Jacobi eigenvalue iteration for a symmetric matrix, eigenvalues
/// sorted descending. Fails if the off-diagonal mass has not vanished after
/// [`JACOBI_MAX_SWEEPS`] sweeps.
pub fn symmetric_eigenvalues(m: &Tensor) -> Result<Vec<f64>> {
    let (n, n2) = m.dims2()?;
    if n != n2 {
        return Err(Error::Dimension(format!("eigensolve needs a square matrix, got {n}×{n2}")));
    }
    let mut a = m.data().to_vec();
    let frob = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let tol = 1e-15 * frob.max(f64::MIN_POSITIVE);
    let off_norm = |a: &[f64]| {
        let mut s = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                s += a[i * n + j] * a[i * n + j];
            }
        }
        s.sqrt()
    };
    let mut converged = off_norm(&a) <= tol;
    let mut sweeps = 0;
    while !converged && sweeps < JACOBI_MAX_SWEEPS {
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for r in 0..n {
                    let arp = a[r * n + p];
                    let arq = a[r * n + q];
                    a[r * n + p] = c * arp - s * arq;
                    a[r * n + q] = s * arp + c * arq;
                }
                for r in 0..n {
                    let apr = a[p * n + r];
                    let aqr = a[q * n + r];
                    a[p * n + r] = c * apr - s * aqr;
                    a[q * n + r] = s * apr + c * aqr;
                }
            }
        }
        sweeps += 1;
        converged = off_norm(&a) <= tol;
    }
    if !converged {
        return Err(Error::Numeric(format!("Jacobi did not converge in {JACOBI_MAX_SWEEPS} sweeps")));
    }
    let mut eig: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    eig.sort_by(|x, y| y.total_cmp(x));
    Ok(eig)
}

fn sig9(v: f64) -> String {
    format!("{v:.8e}")
}

/// Row-major CSV, one matrix row per line, 9 significant digits.
pub fn write_matrix_csv(m: &Tensor, out: &mut impl Write) -> std::io::Result<()> {
    for row in m.rows() {
        let line: Vec<String> = row.iter().map(|&v| sig9(v)).collect();
        writeln!(out, "{}", line.join(","))?;
    }
    Ok(())
}

/// One value per line, 9 significant digits.
pub fn write_vector_csv(values: &[f64], out: &mut impl Write) -> std::io::Result<()> {
    for &v in values {
        writeln!(out, "{}", sig9(v))?;
    }
    Ok(())
}
