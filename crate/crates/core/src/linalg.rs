//! Small dense helpers shared by the kernel and solver layers.

use nalgebra::DMatrix;

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    if m.nrows() == 1 {
        return m[(0, 0)];
    }
    let sym = symmetrize(m);
    sym.symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Apply `f` to the eigenvalues of a symmetric matrix.
pub fn sym_fn(m: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    if m.nrows() == 1 {
        return DMatrix::from_element(1, 1, f(m[(0, 0)]));
    }
    let eig = symmetrize(m).symmetric_eigen();
    let d = eig.eigenvalues.map(f);
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

/// Principal square root of a symmetric PSD matrix (negative eigenvalues clipped).
pub fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    sym_fn(m, |x| x.max(0.0).sqrt())
}

/// Copy of block (r, c) of size `j`×`j`.
pub fn block(m: &DMatrix<f64>, j: usize, r: usize, c: usize) -> DMatrix<f64> {
    m.view((r * j, c * j), (j, j)).into_owned()
}

/// Block column `l` (width `j`) of a tall matrix.
pub fn block_col(m: &DMatrix<f64>, j: usize, l: usize) -> DMatrix<f64> {
    m.columns(l * j, j).into_owned()
}

/// Horizontally stack equally tall blocks.
pub fn hstack(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    if blocks.is_empty() {
        return DMatrix::zeros(0, 0);
    }
    let rows = blocks[0].nrows();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut c = 0;
    for b in blocks {
        out.view_mut((0, c), (rows, b.ncols())).copy_from(b);
        c += b.ncols();
    }
    out
}

/// Max absolute entrywise difference.
pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Select rows by index.
pub fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

/// Keep block upper part including diagonal blocks.
pub fn block_upper(m: &DMatrix<f64>, j: usize, strict: bool) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |r, c| {
        let (br, bc) = (r / j, c / j);
        if br < bc || (!strict && br == bc) {
            m[(r, c)]
        } else {
            0.0
        }
    })
}

/// Upper-triangular A with AᵀA = V for a symmetric PSD V that may be singular.
/// A is the R factor of a QR decomposition of the eigen square root, so there
/// are no pivot divisions. Eigenvalues below `-1e-8·scale` are reported as
/// `Err(min_eigenvalue)`; those below `1e-13·scale` are roundoff and clipped to zero.
pub fn psd_upper_factor(v: &DMatrix<f64>) -> std::result::Result<DMatrix<f64>, f64> {
    let n = v.nrows();
    let scale = v.diagonal().amax().max(f64::MIN_POSITIVE);
    let eig = symmetrize(v).symmetric_eigen();
    let lmin = eig.eigenvalues.min();
    if !lmin.is_finite() || lmin < -1e-8 * scale {
        return Err(lmin);
    }
    // F = diag(√λ)Uᵀ has FᵀF = V
    let mut f = eig.eigenvectors.transpose();
    for r in 0..n {
        let lam = eig.eigenvalues[r];
        let w = if lam > 1e-13 * scale { lam.sqrt() } else { 0.0 };
        f.row_mut(r).scale_mut(w);
    }
    let mut a = f.qr().r();
    for r in 0..n {
        if a[(r, r)] < 0.0 {
            a.row_mut(r).neg_mut();
        }
    }
    Ok(a)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sqrt_squares_back() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let s = sym_sqrt(&m);
        assert!(max_abs_diff(&(&s * &s), &m) < 1e-12);
    }

    #[test]
    fn upper_masks() {
        let m = DMatrix::from_element(4, 4, 1.0);
        let u = block_upper(&m, 2, false);
        let s = block_upper(&m, 2, true);
        assert_eq!(u[(1, 0)], 1.0);
        assert_eq!(u[(2, 1)], 0.0);
        assert_eq!(s[(1, 0)], 0.0);
        assert_eq!(s[(0, 3)], 1.0);
    }

    #[test]
    fn psd_factor_handles_rank_deficiency() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 1e-3, 2.0, 1.0, 0.5, -1.0]);
        let v = &x * x.transpose();
        let a = psd_upper_factor(&v).unwrap();
        assert!(max_abs_diff(&(a.transpose() * &a), &v) < 1e-10);
        assert!(a[(2, 2)].abs() < 1e-7 && a[(3, 3)].abs() < 1e-7, "{a}");
        assert_eq!(a, block_upper(&a, 1, false));
        let spd = DMatrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 5.0]);
        let a = psd_upper_factor(&spd).unwrap();
        assert!(max_abs_diff(&a, &DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 0.0, 2.0])) < 1e-12);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(psd_upper_factor(&bad).unwrap_err() < 0.0);
    }
}
