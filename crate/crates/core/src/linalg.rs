//! Small dense helpers on top of faer.

use std::io::Write;
use std::path::Path;

use faer::{Mat, MatRef, Side};

use crate::error::{Error, Result};

/// Eigenvalues (ascending) and eigenvectors of a symmetric matrix.
pub fn sym_eigen(a: MatRef<'_, f64>, what: &'static str) -> Result<(Vec<f64>, Mat<f64>)> {
    let e = a.self_adjoint_eigen(Side::Lower).map_err(|_| Error::EigenSolver(what))?;
    let vals = e.S().column_vector().iter().copied().collect();
    Ok((vals, e.U().to_owned()))
}

pub fn sym_eigenvalues(a: MatRef<'_, f64>, what: &'static str) -> Result<Vec<f64>> {
    a.self_adjoint_eigenvalues(Side::Lower).map_err(|_| Error::EigenSolver(what))
}

/// `(A + Aᵀ) / 2`.
pub fn symmetrize(a: MatRef<'_, f64>) -> Mat<f64> {
    Mat::from_fn(a.nrows(), a.ncols(), |i, j| 0.5 * (a[(i, j)] + a[(j, i)]))
}

pub fn frobenius(a: MatRef<'_, f64>) -> f64 {
    a.norm_l2()
}

pub fn trace(a: MatRef<'_, f64>) -> f64 {
    (0..a.nrows().min(a.ncols())).map(|i| a[(i, i)]).sum()
}

pub fn identity(n: usize) -> Mat<f64> {
    Mat::identity(n, n)
}

/// Smallest eigenvalue of the symmetric part.
pub fn min_eigenvalue(a: MatRef<'_, f64>, what: &'static str) -> Result<f64> {
    let s = symmetrize(a);
    Ok(sym_eigenvalues(s.as_ref(), what)?.into_iter().fold(f64::INFINITY, f64::min))
}

/// PSD test with tolerance `-1e-10 · trace`.
pub fn is_psd(a: MatRef<'_, f64>, what: &'static str) -> Result<bool> {
    let tol = 1e-10 * trace(a).abs().max(f64::MIN_POSITIVE);
    Ok(min_eigenvalue(a, what)? >= -tol)
}

pub fn column(a: MatRef<'_, f64>, j: usize) -> Vec<f64> {
    (0..a.nrows()).map(|i| a[(i, j)]).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Headerless CSV of a matrix, optionally preceded by `#`-comment lines.
pub fn write_matrix_csv(path: &Path, a: MatRef<'_, f64>, comments: &[String]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for c in comments {
        writeln!(f, "# {c}")?;
    }
    for i in 0..a.nrows() {
        let row: Vec<String> = (0..a.ncols()).map(|j| a[(i, j)].to_string()).collect();
        writeln!(f, "{}", row.join(","))?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_matrix_csv(path: &Path) -> Result<Mat<f64>> {
    let text = std::fs::read_to_string(path)?;
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|l| {
            l.split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|e| Error::invalid(format!("{e}"))))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let ncols = rows.first().map(Vec::len).unwrap_or(0);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::invalid(format!("ragged matrix in {}", path.display())));
    }
    Ok(Mat::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}
