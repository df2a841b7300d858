//! Dense linear-algebra helpers shared by the solvers.
//!
//! Everything works on `nalgebra::DMatrix<f64>`. Vectorization is column-major
//! (`vec(M)` stacks columns), which is also nalgebra's storage order.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// `(M + Mᵀ) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Frobenius norm of `M - Mᵀ`.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    (m - m.transpose()).norm()
}

pub fn is_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_symmetric_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return f64::INFINITY;
    }
    symmetrize(m).symmetric_eigenvalues().min()
}

pub fn ensure_square(m: &DMatrix<f64>, what: &str) -> Result<usize> {
    if m.nrows() != m.ncols() {
        return Err(Error::dims(
            what,
            format!("square matrix"),
            format!("{}x{}", m.nrows(), m.ncols()),
        ));
    }
    Ok(m.nrows())
}

pub fn ensure_shape(m: &DMatrix<f64>, rows: usize, cols: usize, what: &str) -> Result<()> {
    if m.nrows() != rows || m.ncols() != cols {
        return Err(Error::dims(
            what,
            format!("{rows}x{cols}"),
            format!("{}x{}", m.nrows(), m.ncols()),
        ));
    }
    Ok(())
}

pub fn ensure_positive_definite(m: &DMatrix<f64>, what: &str) -> Result<()> {
    let min = min_symmetric_eigenvalue(m);
    if !(min > 0.0) {
        return Err(Error::NotPositiveDefinite {
            what: what.to_string(),
            min_eigenvalue: min,
        });
    }
    Ok(())
}

pub fn ensure_positive_semidefinite(m: &DMatrix<f64>, what: &str) -> Result<()> {
    let min = min_symmetric_eigenvalue(m);
    let tol = 1e-12 * m.norm().max(1.0);
    if !(min >= -tol) {
        return Err(Error::NotPositiveSemidefinite {
            what: what.to_string(),
            min_eigenvalue: min,
        });
    }
    Ok(())
}

/// Largest real part over the eigenvalues of `m`.
pub fn spectral_abscissa(m: &DMatrix<f64>) -> Result<f64> {
    ensure_square(m, "spectral abscissa")?;
    if !is_finite(m) {
        return Err(Error::NonFinite {
            what: "eigenvalue input".into(),
        });
    }
    if m.is_empty() {
        return Ok(f64::NEG_INFINITY);
    }
    let eig = m.complex_eigenvalues();
    Ok(eig.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max))
}

/// Column-major vectorization.
pub fn vec_of(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

/// Inverse of [`vec_of`].
pub fn unvec(v: &[f64], rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(rows, cols, v)
}

/// Solves `S X = B` for symmetric positive definite `S`.
pub fn spd_solve(s: &DMatrix<f64>, b: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let chol = s.clone().cholesky().ok_or_else(|| Error::Singular {
        what: what.to_string(),
    })?;
    Ok(chol.solve(b))
}

pub fn inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let inv = m.clone().try_inverse().ok_or_else(|| Error::Singular {
        what: what.to_string(),
    })?;
    if !is_finite(&inv) {
        return Err(Error::Singular {
            what: what.to_string(),
        });
    }
    Ok(inv)
}

/// Solves `Mᵀ P + P M = -W` by the Bartels-Stewart method on the real Schur
/// form of `M`. `M` must be stable, `W` symmetric.
pub fn solve_lyapunov(m: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = check_lyapunov_inputs(m, w)?;
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }

    let (u, t) = m.clone().schur().unpack();
    let c = u.transpose() * w * &u;

    // Diagonal blocks of the quasi-triangular factor. Runs of nonzero
    // subdiagonal entries stay in one block so nothing below the block
    // diagonal is ever dropped.
    let mut blocks = Vec::new();
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && t[(end, end - 1)] != 0.0 {
            end += 1;
        }
        blocks.push((start, end - start));
        start = end;
    }

    // Tᵀ X + X T = -C, solved block by block in row-major block order.
    let mut x = DMatrix::<f64>::zeros(n, n);
    for &(ri, p) in &blocks {
        for &(cj, q) in &blocks {
            let mut rhs = -c.view((ri, cj), (p, q)).clone_owned();
            for &(rk, s) in blocks.iter().take_while(|b| b.0 < ri) {
                rhs -= t.view((rk, ri), (s, p)).transpose() * x.view((rk, cj), (s, q));
            }
            for &(ck, s) in blocks.iter().take_while(|b| b.0 < cj) {
                rhs -= x.view((ri, ck), (p, s)) * t.view((ck, cj), (s, q));
            }
            let t_ii = t.view((ri, ri), (p, p)).transpose();
            let t_jj = t.view((cj, cj), (q, q)).clone_owned();
            let op = DMatrix::<f64>::identity(q, q).kronecker(&t_ii)
                + t_jj.transpose().kronecker(&DMatrix::<f64>::identity(p, p));
            let sol = op
                .lu()
                .solve(&vec_of(&rhs))
                .ok_or_else(|| Error::Singular {
                    what: "Lyapunov block system".into(),
                })?;
            x.view_mut((ri, cj), (p, q))
                .copy_from(&unvec(sol.as_slice(), p, q));
        }
    }

    let p = &u * x * u.transpose();
    if !is_finite(&p) {
        return Err(Error::NonFinite {
            what: "Lyapunov solution".into(),
        });
    }
    Ok(symmetrize(&p))
}

/// Reference path: solves `(I ⊗ Mᵀ + Mᵀ ⊗ I) vec(P) = -vec(W)` directly.
/// Cost is O(n⁶); intended for small systems and cross-checks.
pub fn solve_lyapunov_kronecker(m: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = check_lyapunov_inputs(m, w)?;
    let id = DMatrix::<f64>::identity(n, n);
    let mt = m.transpose();
    let op = id.kronecker(&mt) + mt.kronecker(&id);
    let sol = op
        .lu()
        .solve(&(-vec_of(w)))
        .ok_or_else(|| Error::Singular {
            what: "Kronecker Lyapunov system".into(),
        })?;
    Ok(symmetrize(&unvec(sol.as_slice(), n, n)))
}

fn check_lyapunov_inputs(m: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<usize> {
    let n = ensure_square(m, "Lyapunov operator")?;
    ensure_shape(w, n, n, "Lyapunov right-hand side")?;
    if !is_finite(w) {
        return Err(Error::NonFinite {
            what: "Lyapunov right-hand side".into(),
        });
    }
    let asym = asymmetry(w);
    if asym > 1e-10 * w.norm().max(1.0) {
        return Err(Error::NotSymmetric {
            what: "Lyapunov right-hand side".into(),
            asymmetry: asym,
        });
    }
    let abscissa = spectral_abscissa(m)?;
    if !(abscissa < 0.0) {
        return Err(Error::NotStable { abscissa });
    }
    Ok(n)
}
