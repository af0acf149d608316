//! Location/scatter model shared by every distance computation.
//!
//! A [`LocationScatter`] holds the center `mu`, the covariance `sigma`, its
//! lower Cholesky factor and the precision matrix `omega = sigma^-1`. The
//! factorization and inverse are computed once at construction; afterwards the
//! model is immutable and can be shared freely across threads.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative pivot tolerance for positive definiteness, scaled by the largest diagonal entry.
pub const PIVOT_TOLERANCE: f64 = 1e-10;
/// Relative symmetry tolerance, scaled by the largest absolute entry.
pub const SYMMETRY_TOLERANCE: f64 = 1e-12;
/// Largest admissible max-abs entry of `omega * sigma - I`.
pub const INVERSE_TOLERANCE: f64 = 1e-8;

pub(crate) fn check_finite(values: &[f64], what: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

pub(crate) fn check_len(values: &[f64], expected: usize) -> Result<()> {
    if values.len() == expected {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            expected,
            found: values.len(),
        })
    }
}

pub(crate) fn check_subset(subset: &[usize], dim: usize) -> Result<()> {
    for &index in subset {
        if index >= dim {
            return Err(Error::IndexOutOfRange { index, dim });
        }
    }
    Ok(())
}

/// Lower Cholesky factor of a symmetric matrix.
///
/// Every pivot `a_jj - sum_k l_jk^2` must exceed `PIVOT_TOLERANCE` times the
/// largest diagonal entry of `a`.
pub fn cholesky_lower(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: a.ncols(),
        });
    }
    let max_diag = (0..n).map(|i| a[(i, i)]).fold(0.0_f64, f64::max);
    let threshold = PIVOT_TOLERANCE * max_diag;
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut pivot = a[(j, j)];
        for k in 0..j {
            pivot -= l[(j, k)] * l[(j, k)];
        }
        if !(pivot > threshold) || max_diag <= 0.0 {
            return Err(Error::NotPositiveDefinite { index: j, pivot });
        }
        let ljj = pivot.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(l)
}

/// Solves `L y = b` in place for lower-triangular `L`.
fn forward_substitute(l: &DMatrix<f64>, b: &mut [f64]) {
    let n = l.nrows();
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[(i, k)] * b[k];
        }
        b[i] = s / l[(i, i)];
    }
}

/// Solves `L' y = b` in place for lower-triangular `L`.
fn back_substitute_transposed(l: &DMatrix<f64>, b: &mut [f64]) {
    let n = l.nrows();
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in (i + 1)..n {
            s -= l[(k, i)] * b[k];
        }
        b[i] = s / l[(i, i)];
    }
}

/// Solves `A x = b` given the lower Cholesky factor of `A`.
pub fn cholesky_solve(l: &DMatrix<f64>, b: &[f64]) -> Vec<f64> {
    let mut x = b.to_vec();
    forward_substitute(l, &mut x);
    back_substitute_transposed(l, &mut x);
    x
}

/// Inverse of `A` from its lower Cholesky factor, symmetrized.
pub fn cholesky_inverse(l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let mut inv = DMatrix::<f64>::zeros(n, n);
    let mut e = vec![0.0; n];
    for col in 0..n {
        e.iter_mut().for_each(|v| *v = 0.0);
        e[col] = 1.0;
        let x = cholesky_solve(l, &e);
        for row in 0..n {
            inv[(row, col)] = x[row];
        }
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let m = 0.5 * (inv[(i, j)] + inv[(j, i)]);
            inv[(i, j)] = m;
            inv[(j, i)] = m;
        }
    }
    inv
}

/// Principal submatrix on `subset` (in the given order).
pub fn submatrix(m: &DMatrix<f64>, subset: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(subset.len(), subset.len(), |i, j| m[(subset[i], subset[j])])
}

/// Center, covariance, factor and precision matrix of a multivariate model.
#[derive(Debug, Clone)]
pub struct LocationScatter {
    mu: DVector<f64>,
    sigma: DMatrix<f64>,
    omega: DMatrix<f64>,
    chol: DMatrix<f64>,
    id: u64,
}

/// Builds a model from a center and a covariance matrix.
pub fn build_model(mu: &[f64], sigma: &DMatrix<f64>) -> Result<LocationScatter> {
    LocationScatter::new(mu, sigma)
}

impl LocationScatter {
    pub fn new(mu: &[f64], sigma: &DMatrix<f64>) -> Result<Self> {
        let p = mu.len();
        if p == 0 {
            return Err(Error::DimensionMismatch {
                expected: 1,
                found: 0,
            });
        }
        if sigma.nrows() != sigma.ncols() {
            return Err(Error::DimensionMismatch {
                expected: sigma.nrows(),
                found: sigma.ncols(),
            });
        }
        if sigma.nrows() != p {
            return Err(Error::DimensionMismatch {
                expected: p,
                found: sigma.nrows(),
            });
        }
        check_finite(mu, "mu")?;
        check_finite(sigma.as_slice(), "sigma")?;

        let scale = sigma.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        for i in 0..p {
            for j in (i + 1)..p {
                let diff = (sigma[(i, j)] - sigma[(j, i)]).abs();
                if diff > SYMMETRY_TOLERANCE * scale {
                    return Err(Error::NotSymmetric {
                        row: i,
                        col: j,
                        diff,
                    });
                }
            }
        }

        let chol = cholesky_lower(sigma)?;
        let omega = cholesky_inverse(&chol);
        let residual = (&omega * sigma - DMatrix::<f64>::identity(p, p)).amax();
        if residual > INVERSE_TOLERANCE {
            return Err(Error::IllConditioned { residual });
        }

        let mut hasher = DefaultHasher::new();
        p.hash(&mut hasher);
        for v in mu.iter().chain(sigma.iter()) {
            v.to_bits().hash(&mut hasher);
        }

        Ok(Self {
            mu: DVector::from_column_slice(mu),
            sigma: sigma.clone(),
            omega,
            chol,
            id: hasher.finish(),
        })
    }

    /// Convenience constructor from row-major nested vectors.
    pub fn from_rows(mu: &[f64], sigma: &[Vec<f64>]) -> Result<Self> {
        let p = sigma.len();
        for row in sigma {
            check_len(row, p)?;
        }
        let m = DMatrix::from_fn(p, p, |i, j| sigma[i][j]);
        Self::new(mu, &m)
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[f64] {
        self.mu.as_slice()
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn omega(&self) -> &DMatrix<f64> {
        &self.omega
    }

    /// Lower-triangular factor `L` with `L L' = sigma`.
    pub fn chol(&self) -> &DMatrix<f64> {
        &self.chol
    }

    /// Opaque fingerprint of `(mu, sigma)`.
    pub fn id(&self) -> u64 {
        self.id
    }

    pub(crate) fn check_point(&self, x: &[f64], what: &'static str) -> Result<()> {
        check_len(x, self.dim())?;
        check_finite(x, what)
    }

    /// `omega * d`.
    pub(crate) fn omega_times(&self, d: &[f64]) -> Vec<f64> {
        let p = self.dim();
        (0..p)
            .map(|k| (0..p).map(|j| self.omega[(k, j)] * d[j]).sum())
            .collect()
    }

    /// `d' omega d`, accumulated as `sum_k d_k (omega d)_k` so that it matches the
    /// sum of the Shapley coordinates term by term.
    pub(crate) fn quad_form(&self, d: &[f64]) -> f64 {
        let od = self.omega_times(d);
        d.iter().zip(&od).map(|(a, b)| a * b).sum()
    }

    /// Squared Mahalanobis distance of `x` from `mu`.
    pub fn md2(&self, x: &[f64]) -> Result<f64> {
        self.md2_from(x, self.mu())
    }

    /// Squared Mahalanobis distance of `x` from an arbitrary `reference` under this scatter.
    pub fn md2_from(&self, x: &[f64], reference: &[f64]) -> Result<f64> {
        self.check_point(x, "x")?;
        self.check_point(reference, "reference")?;
        let d: Vec<f64> = x.iter().zip(reference).map(|(a, b)| a - b).collect();
        Ok(self.quad_form(&d))
    }

    /// Value of the coalition game: `md2` of `x` with coordinates outside `subset` set to `mu`.
    pub fn masked_md2(&self, x: &[f64], subset: &[usize]) -> Result<f64> {
        let masked = MaskedVector::new(x, subset, self)?;
        Ok(self.quad_form(&masked.deviation(self)))
    }

    /// Model restricted to the coordinates in `subset` (in the given order).
    ///
    /// Its distance agrees with [`masked_md2`](Self::masked_md2) only when `sigma`
    /// has no correlation between `subset` and its complement.
    pub fn submodel(&self, subset: &[usize]) -> Result<LocationScatter> {
        check_subset(subset, self.dim())?;
        if subset.is_empty() {
            return Err(Error::EmptySubset);
        }
        let mu: Vec<f64> = subset.iter().map(|&j| self.mu[j]).collect();
        LocationScatter::new(&mu, &submatrix(&self.sigma, subset))
    }
}

/// An observation in which only the coordinates of a coalition keep their values.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedVector {
    pub base: Vec<f64>,
    pub subset: Vec<usize>,
    pub resolved: Vec<f64>,
}

impl MaskedVector {
    pub fn new(x: &[f64], subset: &[usize], model: &LocationScatter) -> Result<Self> {
        model.check_point(x, "x")?;
        check_subset(subset, model.dim())?;
        let mut resolved = model.mu().to_vec();
        for &j in subset {
            resolved[j] = x[j];
        }
        Ok(Self {
            base: x.to_vec(),
            subset: subset.to_vec(),
            resolved,
        })
    }

    fn deviation(&self, model: &LocationScatter) -> Vec<f64> {
        self.resolved
            .iter()
            .zip(model.mu())
            .map(|(a, b)| a - b)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn equicorrelated(p: usize, rho: f64) -> DMatrix<f64> {
        DMatrix::from_fn(p, p, |i, j| if i == j { 1.0 } else { rho })
    }

    #[test]
    fn identity_model_has_identity_precision() {
        let m = build_model(&[0.0, 0.0], &DMatrix::identity(2, 2)).unwrap();
        assert_abs_diff_eq!(m.omega()[(0, 0)], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m.omega()[(0, 1)], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m.omega()[(1, 1)], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn two_by_two_inverse() {
        let m = build_model(&[0.0, 0.0], &equicorrelated(2, 0.8)).unwrap();
        assert_abs_diff_eq!(m.omega()[(0, 0)], 1.0 / 0.36, epsilon = 1e-12);
        assert_abs_diff_eq!(m.omega()[(0, 1)], -0.8 / 0.36, epsilon = 1e-12);
        assert_abs_diff_eq!(m.omega()[(1, 0)], -0.8 / 0.36, epsilon = 1e-12);
    }

    #[test]
    fn indefinite_matrix_is_rejected() {
        let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            build_model(&[0.0, 0.0], &sigma),
            Err(Error::NotPositiveDefinite { index: 1, .. })
        ));
    }

    #[test]
    fn bad_inputs() {
        let sigma = DMatrix::identity(2, 2);
        assert!(matches!(
            build_model(&[0.0, 0.0, 0.0], &sigma),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            build_model(&[f64::NAN, 0.0], &sigma),
            Err(Error::NonFinite(_))
        ));
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.2, 1.0]);
        assert!(matches!(
            build_model(&[0.0, 0.0], &asym),
            Err(Error::NotSymmetric { .. })
        ));
        let m = build_model(&[0.0, 0.0], &sigma).unwrap();
        assert!(matches!(
            m.md2(&[1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            m.md2(&[1.0, f64::INFINITY]),
            Err(Error::NonFinite(_))
        ));
        assert!(matches!(
            m.masked_md2(&[1.0, 1.0], &[2]),
            Err(Error::IndexOutOfRange { index: 2, dim: 2 })
        ));
    }

    #[test]
    fn near_singular_pivot_is_rejected() {
        let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0 + 1e-12]);
        assert!(matches!(
            build_model(&[0.0, 0.0], &sigma),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn worked_observation_distance() {
        let m = build_model(&[0.0; 5], &equicorrelated(5, 0.9)).unwrap();
        let d2 = m.md2(&[0.0, 1.0, 2.0, 2.2, 2.5]).unwrap();
        assert_abs_diff_eq!(d2, 44.90, epsilon = 0.01);
        assert_eq!(m.md2(&[0.0; 5]).unwrap(), 0.0);
    }

    #[test]
    fn identity_distance_is_sum_of_squares() {
        let m = build_model(&[0.0, 0.0], &DMatrix::identity(2, 2)).unwrap();
        assert_abs_diff_eq!(m.md2(&[3.0, 0.0]).unwrap(), 9.0, epsilon = 1e-14);
    }

    #[test]
    fn masked_distance_edge_cases() {
        let m = build_model(&[0.0, 0.0], &equicorrelated(2, 0.8)).unwrap();
        let x = [3.0, 9.0];
        assert_eq!(m.masked_md2(&x, &[]).unwrap(), 0.0);
        assert_abs_diff_eq!(
            m.masked_md2(&x, &[0, 1]).unwrap(),
            m.md2(&x).unwrap(),
            epsilon = 1e-12
        );
        // x1^2 * omega_11 = 9 / 0.36; the 1-D submodel distance x1^2 / sigma_11 = 9 differs
        assert_abs_diff_eq!(m.masked_md2(&x, &[0]).unwrap(), 25.0, epsilon = 1e-12);
        let sub = m.submodel(&[0]).unwrap();
        assert_abs_diff_eq!(sub.md2(&[3.0]).unwrap(), 9.0, epsilon = 1e-12);
    }

    #[test]
    fn masked_vector_resolves_to_mu() {
        let m = build_model(&[1.0, 2.0, 3.0], &DMatrix::identity(3, 3)).unwrap();
        let mv = MaskedVector::new(&[7.0, 8.0, 9.0], &[1], &m).unwrap();
        assert_eq!(mv.resolved, vec![1.0, 8.0, 3.0]);
    }

    #[test]
    fn cholesky_roundtrip() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 2.0, 0.6, 2.0, 5.0, 1.0, 0.6, 1.0, 3.0]);
        let l = cholesky_lower(&a).unwrap();
        assert!((&l * l.transpose() - &a).amax() < 1e-14);
        let x = cholesky_solve(&l, &[1.0, 2.0, 3.0]);
        let back = &a * DVector::from_column_slice(&x);
        assert_abs_diff_eq!(back[2], 3.0, epsilon = 1e-13);
    }
}
