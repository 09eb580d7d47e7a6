//! Small dense linear-algebra helpers on top of nalgebra: sorted symmetric
//! eigendecompositions, a full (square-factor) SVD with a deterministic sign
//! convention, and random orthogonal matrices.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

/// Eigendecomposition of a symmetric matrix with eigenvalues sorted
/// non-increasing. Columns of the returned matrix are the eigenvectors.
pub fn symmetric_eigen_desc(a: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let sym = (a + a.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(a.nrows(), n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(src).into_owned();
        fix_sign(&mut col);
        vectors.set_column(dst, &col);
    }
    (values, vectors)
}

/// Full SVD `m = F · diag(s) · Gᵀ` with square orthogonal `F` (rows×rows) and
/// `G` (cols×cols). Singular values are non-increasing and `min(rows, cols)`
/// long. Each left singular vector has its largest-magnitude entry positive;
/// the matching right vector is flipped with it.
pub fn full_svd(m: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    let (rows, cols) = m.shape();
    let k = rows.min(cols);
    if k == 0 {
        return (DMatrix::identity(rows, rows), Vec::new(), DMatrix::identity(cols, cols));
    }
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("left singular vectors requested");
    let v = svd.v_t.expect("right singular vectors requested").transpose();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));

    let mut u_thin = DMatrix::zeros(rows, k);
    let mut v_thin = DMatrix::zeros(cols, k);
    let mut values = Vec::with_capacity(k);
    for (dst, &src) in order.iter().enumerate() {
        let mut uc = u.column(src).into_owned();
        let mut vc = v.column(src).into_owned();
        if sign_flip_needed(&uc) {
            uc = -uc;
            vc = -vc;
        }
        u_thin.set_column(dst, &uc);
        v_thin.set_column(dst, &vc);
        values.push(svd.singular_values[src].max(0.0));
    }
    (complete_basis(&u_thin), values, complete_basis(&v_thin))
}

/// Extends the orthonormal columns of `basis` (d×k) to a d×d orthogonal
/// matrix whose first k columns are exactly `basis`.
pub fn complete_basis(basis: &DMatrix<f64>) -> DMatrix<f64> {
    let (d, k) = basis.shape();
    if k >= d {
        return basis.columns(0, d).into_owned();
    }
    let mut stacked = DMatrix::zeros(d, k + d);
    stacked.columns_mut(0, k).copy_from(basis);
    stacked.columns_mut(k, d).copy_from(&DMatrix::<f64>::identity(d, d));
    let q = stacked.qr().q();
    let mut full = DMatrix::zeros(d, d);
    full.columns_mut(0, k).copy_from(basis);
    for j in k..d {
        let mut col = q.column(j).into_owned();
        fix_sign(&mut col);
        full.set_column(j, &col);
    }
    full
}

fn sign_flip_needed(v: &DVector<f64>) -> bool {
    let mut best = 0.0f64;
    let mut sign = 1.0;
    for &x in v.iter() {
        if x.abs() > best {
            best = x.abs();
            sign = x.signum();
        }
    }
    sign < 0.0
}

fn fix_sign(v: &mut DVector<f64>) {
    if sign_flip_needed(v) {
        v.neg_mut();
    }
}

/// Singular values sorted non-increasing.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Vec::new();
    }
    let mut s: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Haar-distributed random orthogonal matrix (QR of a Gaussian matrix with
/// the sign of R's diagonal absorbed into Q).
pub fn random_orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DMatrix<f64> {
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let g = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            let neg = -q.column(j).into_owned();
            q.set_column(j, &neg);
        }
    }
    q
}

/// Random orthogonal matrix that commutes with `diag(values)`: a random
/// rotation inside each block of equal values (within `tol`, relative) and the
/// identity across blocks. Values must be sorted so that equal entries are
/// adjacent.
pub fn random_commuting_orthogonal<R: Rng + ?Sized>(
    values: &[f64],
    tol: f64,
    rng: &mut R,
) -> DMatrix<f64> {
    let n = values.len();
    let mut p = DMatrix::zeros(n, n);
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && (values[end] - values[start]).abs() <= tol * values[start].abs().max(1.0) {
            end += 1;
        }
        let block = random_orthogonal(end - start, rng);
        p.view_mut((start, start), (end - start, end - start)).copy_from(&block);
        start = end;
    }
    p
}

pub fn frobenius_sq(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|x| x * x).sum()
}
