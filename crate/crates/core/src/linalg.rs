//! Small dense linear-algebra helpers shared by the numerical modules.
//!
//! Everything here works on `nalgebra` dynamic matrices. The orthonormal basis
//! of the zero-sum subspace is the Helmert basis, fixed so that restricted
//! eigenvalue computations are reproducible bit-for-bit.

use nalgebra::{DMatrix, DVector};

pub fn ones(k: usize) -> DVector<f64> {
    DVector::from_element(k, 1.0)
}

/// Centering projection `I - 11ᵀ/K` applied to a vector.
pub fn project(v: &DVector<f64>) -> DVector<f64> {
    let mean = v.sum() / v.len() as f64;
    v.map(|x| x - mean)
}

/// Centering projection applied from the left, i.e. every column is centered.
pub fn project_rows(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for mut col in out.column_iter_mut() {
        let mean = col.sum() / col.len() as f64;
        col.add_scalar_mut(-mean);
    }
    out
}

/// Centering projection as an explicit `K x K` matrix.
pub fn projector(k: usize) -> DMatrix<f64> {
    DMatrix::identity(k, k) - DMatrix::from_element(k, k, 1.0 / k as f64)
}

/// Helmert basis of the zero-sum subspace: a `K x (K-1)` matrix with orthonormal columns.
///
/// Column `j` (0-based) puts `1/sqrt((j+1)(j+2))` on the first `j+1` entries and
/// `-(j+1)/sqrt((j+1)(j+2))` on entry `j+1`.
pub fn helmert_basis(k: usize) -> DMatrix<f64> {
    let mut basis = DMatrix::zeros(k, k.saturating_sub(1));
    for j in 0..k.saturating_sub(1) {
        let m = (j + 1) as f64;
        let norm = (m * (m + 1.0)).sqrt();
        for i in 0..=j {
            basis[(i, j)] = 1.0 / norm;
        }
        basis[(j + 1, j)] = -m / norm;
    }
    basis
}

/// Block-diagonal basis of `S = 1⊥ ⊕ 1⊥` inside `R^{2K}`: a `2K x 2(K-1)` matrix.
pub fn channel_basis(k: usize) -> DMatrix<f64> {
    let h = helmert_basis(k);
    let d = k - 1;
    let mut basis = DMatrix::zeros(2 * k, 2 * d);
    basis.view_mut((0, 0), (k, d)).copy_from(&h);
    basis.view_mut((k, d), (k, d)).copy_from(&h);
    basis
}

/// Projector onto `S = 1⊥ ⊕ 1⊥` as a `2K x 2K` matrix.
pub fn channel_projector(k: usize) -> DMatrix<f64> {
    let p = projector(k);
    let mut out = DMatrix::zeros(2 * k, 2 * k);
    out.view_mut((0, 0), (k, k)).copy_from(&p);
    out.view_mut((k, k), (k, k)).copy_from(&p);
    out
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Eigenvalues of a symmetric matrix in ascending order.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut values: Vec<f64> = symmetrize(m)
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .collect();
    values.sort_by(f64::total_cmp);
    values
}

/// Ascending eigenvalues of `Bᵀ M B` for a basis `B` with orthonormal columns.
pub fn restricted_eigenvalues(m: &DMatrix<f64>, basis: &DMatrix<f64>) -> Vec<f64> {
    sym_eigenvalues(&(basis.transpose() * m * basis))
}

/// Largest singular value.
pub fn op_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

/// Operator norm by power iteration on `MᵀM`, stopping once successive
/// estimates differ by less than `tol` (relative).
pub fn power_iteration_norm(m: &DMatrix<f64>, tol: f64, max_iters: usize) -> f64 {
    let n = m.ncols();
    if n == 0 {
        return 0.0;
    }
    let gram = m.transpose() * m;
    // Deterministic, non-degenerate start vector.
    let mut v = DVector::from_fn(n, |i, _| 1.0 + (i as f64 + 1.0).sqrt() * 1e-3);
    v /= v.norm();
    let mut estimate = 0.0;
    for _ in 0..max_iters {
        let w = &gram * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let next = norm.sqrt();
        v = w / norm;
        if (next - estimate).abs() <= tol * next.max(f64::MIN_POSITIVE) {
            return next;
        }
        estimate = next;
    }
    estimate
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

pub fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|x| x.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn helmert_columns_are_orthonormal_and_centered() {
        for k in 2..8 {
            let h = helmert_basis(k);
            let gram = h.transpose() * &h;
            assert!((gram - DMatrix::identity(k - 1, k - 1)).abs().max() < 1e-14);
            assert!((ones(k).transpose() * &h).abs().max() < 1e-14);
        }
    }

    #[test]
    fn projector_matches_vector_projection() {
        let v = DVector::from_vec(vec![3.0, -1.0, 0.5, 2.0]);
        let a = projector(4) * &v;
        assert!((a - project(&v)).abs().max() < 1e-15);
        let m = DMatrix::from_fn(4, 3, |i, j| (i * 3 + j) as f64 - 2.0);
        assert!((projector(4) * &m - project_rows(&m)).abs().max() < 1e-14);
    }

    #[test]
    fn power_iteration_agrees_with_svd() {
        let m = DMatrix::from_fn(5, 5, |i, j| ((i + 2 * j) % 7) as f64 - 3.0);
        let m = &m * m.transpose();
        let pi = power_iteration_norm(&m, 1e-12, 100_000);
        assert!((pi - op_norm(&m)).abs() < 1e-8 * op_norm(&m));
    }
}
