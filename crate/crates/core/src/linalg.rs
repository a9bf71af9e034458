//! Dense symmetric eigensolver (cyclic Jacobi) and small matrix helpers.

use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{Error, Result};

pub const SYMMETRY_TOL: f64 = 1e-10;
const MAX_SWEEPS: usize = 100;

/// Eigenpairs of a symmetric matrix: `a = vectors * diag(values) * vectors^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricEigen {
    /// Eigenvalues in descending order.
    pub values: Array1<f64>,
    /// Orthonormal eigenvectors stored as columns.
    pub vectors: Array2<f64>,
}

pub fn max_asymmetry(a: ArrayView2<f64>) -> f64 {
    let n = a.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((a[[i, j]] - a[[j, i]]).abs());
        }
    }
    worst
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Eigenvalues come back sorted descending. Each eigenvector is signed so its
/// first non-negligible component is positive, which makes the result
/// reproducible bit for bit across runs.
pub fn eigh(a: ArrayView2<f64>, name: &str) -> Result<SymmetricEigen> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::shape("eigh", format!("{n}x{n}"), format!("{n}x{}", a.ncols())));
    }
    if n == 0 {
        return Err(Error::InvalidInput(format!("{name}: empty matrix")));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("{name}: non-finite entry")));
    }
    let asym = max_asymmetry(a);
    if asym > SYMMETRY_TOL {
        return Err(Error::InvalidInput(format!(
            "{name}: matrix is not symmetric (max |a_ij - a_ji| = {asym:e})"
        )));
    }

    let mut m = a.to_owned();
    // work on the exactly symmetric part
    for i in 0..n {
        for j in (i + 1)..n {
            let s = 0.5 * (m[[i, j]] + m[[j, i]]);
            m[[i, j]] = s;
            m[[j, i]] = s;
        }
    }
    let mut v = Array2::<f64>::eye(n);
    let scale = m.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);

    let off = |m: &Array2<f64>| {
        let mut s = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                s += m[[i, j]] * m[[i, j]];
            }
        }
        (2.0 * s).sqrt()
    };

    let mut sweeps = 0;
    loop {
        let residual = off(&m);
        if residual <= 1e-15 * scale {
            break;
        }
        if sweeps == MAX_SWEEPS {
            return Err(Error::NoConvergence {
                matrix: name.to_string(),
                sweeps,
                residual,
            });
        }
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq == 0.0 {
                    continue;
                }
                let app = m[[p, p]];
                let aqq = m[[q, q]];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                m[[p, q]] = 0.0;
                m[[q, p]] = 0.0;
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[[j, j]].total_cmp(&m[[i, i]]).then(i.cmp(&j)));

    let values = Array1::from_iter(order.iter().map(|&i| m[[i, i]]));
    let mut vectors = Array2::<f64>::zeros((n, n));
    for (col, &src) in order.iter().enumerate() {
        let mut column = v.column(src).to_owned();
        let norm = column.dot(&column).sqrt();
        column /= norm;
        if let Some(first) = column.iter().find(|x| x.abs() > 1e-12) {
            if *first < 0.0 {
                column.mapv_inplace(|x| -x);
            }
        }
        vectors.column_mut(col).assign(&column);
    }
    Ok(SymmetricEigen { values, vectors })
}

/// `p * diag(values) * p^T`, symmetrized exactly.
pub fn compose(p: ArrayView2<f64>, values: &[f64]) -> Result<Array2<f64>> {
    let n = p.nrows();
    if p.ncols() != n || values.len() != n {
        return Err(Error::shape(
            "spectral reconstruction",
            format!("{n}x{n} and {n} values"),
            format!("{}x{} and {} values", p.nrows(), p.ncols(), values.len()),
        ));
    }
    let mut scaled = p.to_owned();
    for (mut col, &l) in scaled.columns_mut().into_iter().zip(values) {
        col *= l;
    }
    let mut out = scaled.dot(&p.t());
    for i in 0..n {
        for j in (i + 1)..n {
            let s = 0.5 * (out[[i, j]] + out[[j, i]]);
            out[[i, j]] = s;
            out[[j, i]] = s;
        }
    }
    Ok(out)
}

pub fn max_abs_diff(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn two_by_two_swap() {
        let a = array![[0.0, 1.0], [1.0, 0.0]];
        let e = eigh(a.view(), "swap").unwrap();
        assert!((e.values[0] - 1.0).abs() < 1e-14);
        assert!((e.values[1] + 1.0).abs() < 1e-14);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((e.vectors[[0, 0]] - h).abs() < 1e-14 && (e.vectors[[1, 0]] - h).abs() < 1e-14);
        assert!((e.vectors[[0, 1]] - h).abs() < 1e-14 && (e.vectors[[1, 1]] + h).abs() < 1e-14);
    }

    #[test]
    fn identity_is_exact() {
        let a = Array2::<f64>::eye(4);
        let e = eigh(a.view(), "eye").unwrap();
        assert!(e.values.iter().all(|&v| v == 1.0));
        let back = compose(e.vectors.view(), e.values.as_slice().unwrap()).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn rejects_asymmetric() {
        let a = array![[1.0, 2.0], [0.0, 1.0]];
        assert!(matches!(eigh(a.view(), "bad"), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn compose_dimension_mismatch() {
        let p = Array2::<f64>::eye(3);
        assert!(compose(p.view(), &[1.0, 2.0]).is_err());
    }
}
