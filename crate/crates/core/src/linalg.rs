//! Small dense linear-algebra helpers shared by the estimators.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{FrkError, Result};

pub fn cholesky(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(m.clone())
        .ok_or_else(|| FrkError::Numerical(format!("{what} is not positive definite")))
}

pub fn log_det(ch: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * ch.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Inverse of an SPD matrix from its Cholesky factor, symmetrized.
pub fn spd_inverse(ch: &Cholesky<f64, Dyn>) -> DMatrix<f64> {
    let n = ch.l_dirty().nrows();
    // L^{-1} by forward substitution, then L^{-T} L^{-1}.
    let l = ch.l_dirty();
    let mut linv = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        linv[(j, j)] = 1.0 / l[(j, j)];
        for i in (j + 1)..n {
            let mut acc = 0.0;
            for k in j..i {
                acc += l[(i, k)] * linv[(k, j)];
            }
            linv[(i, j)] = -acc / l[(i, i)];
        }
    }
    let mut inv = linv.transpose() * &linv;
    symmetrize(&mut inv);
    inv
}

/// Inverse and log-determinant of a symmetric positive definite matrix.
#[derive(Debug, Clone)]
pub struct SpdInverse {
    pub inverse: DMatrix<f64>,
    pub log_det: f64,
}

const SPD_BLOCK: usize = 96;

/// Inverts an SPD matrix by recursive 2x2 blocking on its Schur complement,
/// so almost all the work happens in matrix products. Blocks at or below
/// `SPD_BLOCK` go through a plain Cholesky factorization, which also serves as
/// the positive-definiteness check.
pub fn spd_invert(m: &DMatrix<f64>, what: &str) -> Result<SpdInverse> {
    let n = m.nrows();
    if n <= SPD_BLOCK {
        let ch = cholesky(m, what)?;
        return Ok(SpdInverse {
            inverse: spd_inverse(&ch),
            log_det: log_det(&ch),
        });
    }
    let h = n / 2;
    let a = m.view((0, 0), (h, h)).into_owned();
    let b = m.view((0, h), (h, n - h)).into_owned();
    let d = m.view((h, h), (n - h, n - h)).into_owned();

    let top = spd_invert(&a, what)?;
    let x = &top.inverse * &b;
    let mut schur = d - b.transpose() * &x;
    symmetrize(&mut schur);
    let bottom = spd_invert(&schur, what)?;
    let y = &x * &bottom.inverse;

    let mut inv = DMatrix::zeros(n, n);
    inv.view_mut((0, 0), (h, h)).copy_from(&(top.inverse + &y * x.transpose()));
    inv.view_mut((0, h), (h, n - h)).copy_from(&(-&y));
    inv.view_mut((h, 0), (n - h, h)).copy_from(&(-y.transpose()));
    inv.view_mut((h, h), (n - h, n - h)).copy_from(&bottom.inverse);
    symmetrize(&mut inv);
    Ok(SpdInverse {
        inverse: inv,
        log_det: top.log_det + bottom.log_det,
    })
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Tr(AB) without forming the product.
pub fn trace_of_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    debug_assert_eq!(a.ncols(), b.nrows());
    debug_assert_eq!(a.nrows(), b.ncols());
    let mut acc = 0.0;
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            acc += a[(i, j)] * b[(j, i)];
        }
    }
    acc
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Ratio of extreme eigenvalues of a symmetric PSD matrix.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(m.clone()).eigenvalues;
    let max = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

pub fn dot(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.dot(b)
}

/// Guard against materializing observation-sized square matrices in the
/// low-rank code paths. Only active in debug builds.
#[inline]
pub fn guard_not_obs_square(rows: usize, cols: usize, n_obs: usize) {
    debug_assert!(
        !(n_obs > 1 && rows >= n_obs && cols >= n_obs),
        "attempted to allocate a {rows}x{cols} matrix with N = {n_obs} observations"
    );
}
