//! Small dense helpers on top of nalgebra. Matrix norms are spectral, vector
//! norms Euclidean.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().svd(false, false).singular_values.max()
}

pub fn min_singular_value(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().svd(false, false).singular_values.min()
}

/// Eigenvalues of the symmetric matrix `m + mᵀ`.
fn sym_part_eigs(m: &DMatrix<f64>) -> DVector<f64> {
    let s = m + m.transpose();
    SymmetricEigen::new(s).eigenvalues
}

/// λ_min(M + Mᵀ).
pub fn lambda_min_sym(m: &DMatrix<f64>) -> f64 {
    sym_part_eigs(m).min()
}

/// λ_max(MᵀM), the squared spectral norm, via the symmetric eigensolver.
pub fn lambda_max_gram(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.transpose() * m).eigenvalues.max()
}

/// Ratio σ_min/σ_max; zero for a zero matrix.
pub fn inverse_condition(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().svd(false, false).singular_values;
    let hi = sv.max();
    if hi == 0.0 {
        0.0
    } else {
        sv.min() / hi
    }
}

pub fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>, String> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(format!("{what}: rows have unequal lengths"));
    }
    if rows.iter().flatten().any(|x| !x.is_finite()) {
        return Err(format!("{what}: non-finite entry"));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn vector_from_slice(v: &[f64], what: &str) -> Result<DVector<f64>, String> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(format!("{what}: non-finite entry"));
    }
    Ok(DVector::from_column_slice(v))
}
