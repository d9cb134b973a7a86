//! Small dense linear-algebra helpers shared by the modules.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Relative singular-value threshold below which a direction counts as null.
pub const RANK_TOL: f64 = 1e-8;

/// Singular values sorted descending with matching right singular vectors (as columns).
fn full_svd(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>, DMatrix<f64>) {
    let (r, c) = m.shape();
    // Pad to at least square so that V is complete.
    let rows = r.max(c);
    let mut a = DMatrix::zeros(rows, c);
    a.view_mut((0, 0), (r, c)).copy_from(m);
    let svd = a.svd(true, true);
    let u = svd.u.expect("u requested");
    let vt = svd.v_t.expect("v requested");
    let mut idx: Vec<usize> = (0..svd.singular_values.len()).collect();
    idx.sort_by(|&i, &j| {
        svd.singular_values[j]
            .partial_cmp(&svd.singular_values[i])
            .unwrap()
            .then(i.cmp(&j))
    });
    let s: Vec<f64> = idx.iter().map(|&i| svd.singular_values[i]).collect();
    let mut v = DMatrix::zeros(c, idx.len());
    let mut uu = DMatrix::zeros(rows, idx.len());
    for (k, &i) in idx.iter().enumerate() {
        v.set_column(k, &vt.row(i).transpose());
        uu.set_column(k, &u.column(i));
    }
    let uu = uu.rows(0, r).into_owned();
    (s, uu, v)
}

/// Singular values, descending.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Vec::new();
    }
    let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap());
    s
}

/// Orthonormal basis (columns) of the null space, using `sigma <= tol * sigma_max`.
pub fn null_space(m: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    null_space_scaled(m, tol, 0.0)
}

/// As [`null_space`] with the threshold `tol * max(sigma_max, scale)`, so that a
/// matrix that is tiny relative to `scale` counts as zero.
pub fn null_space_scaled(m: &DMatrix<f64>, tol: f64, scale: f64) -> DMatrix<f64> {
    let c = m.ncols();
    if c == 0 {
        return DMatrix::zeros(0, 0);
    }
    if m.nrows() == 0 {
        return DMatrix::identity(c, c);
    }
    let (s, _, v) = full_svd(m);
    let smax = s.first().copied().unwrap_or(0.0).max(scale);
    let cols: Vec<usize> = (0..c).filter(|&k| smax == 0.0 || s[k] <= tol * smax).collect();
    let mut out = DMatrix::zeros(c, cols.len());
    for (j, &k) in cols.iter().enumerate() {
        out.set_column(j, &v.column(k));
    }
    out
}

/// Numerical rank with the relative threshold `tol`.
pub fn rank(m: &DMatrix<f64>, tol: f64) -> usize {
    rank_scaled(m, tol, 0.0)
}

/// Numerical rank with the threshold `tol * max(sigma_max, scale)`.
pub fn rank_scaled(m: &DMatrix<f64>, tol: f64, scale: f64) -> usize {
    let s = singular_values(m);
    match s.first() {
        None => 0,
        Some(&smax) if smax.max(scale) == 0.0 => 0,
        Some(&smax) => s.iter().filter(|&&x| x > tol * smax.max(scale)).count(),
    }
}

/// 2-norm condition number (infinite when singular).
pub fn condition(m: &DMatrix<f64>) -> f64 {
    let s = singular_values(m);
    match (s.first(), s.last()) {
        (Some(&a), Some(&b)) if b > 0.0 => a / b,
        _ => f64::INFINITY,
    }
}

/// The `k` leading left singular vectors as columns.
pub fn leading_left_singular(m: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let (_, u, _) = full_svd(m);
    u.columns(0, k).into_owned()
}

/// Least-squares / minimum-norm solve via the pseudo-inverse.
pub fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    svd.solve(b, (1e-13 * smax).max(f64::MIN_POSITIVE))
        .expect("svd solve")
}

/// Deterministic RNG used by every seeded procedure in the crate.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vector<R: Rng>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

/// Uniform sample of the closed unit ball in R^n.
pub fn unit_ball<R: Rng>(rng: &mut R, n: usize) -> DVector<f64> {
    loop {
        let v = normal_vector(rng, n);
        let norm = v.norm();
        if norm > 1e-300 {
            let r: f64 = rng.random::<f64>().powf(1.0 / n as f64);
            return v * (r / norm);
        }
    }
}

/// Uniform sample of the unit sphere in R^n.
pub fn unit_sphere<R: Rng>(rng: &mut R, n: usize) -> DVector<f64> {
    loop {
        let v = normal_vector(rng, n);
        let norm = v.norm();
        if norm > 1e-300 {
            return v / norm;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn null_space_of_wide_matrix() {
        let m = DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]);
        let k = null_space(&m, RANK_TOL);
        assert_eq!(k.ncols(), 2);
        assert!((&m * &k).norm() < 1e-14);
        assert!((k.transpose() * &k - DMatrix::identity(2, 2)).norm() < 1e-14);
    }

    #[test]
    fn zero_matrix_is_all_null() {
        let m = DMatrix::zeros(3, 3);
        assert_eq!(null_space(&m, RANK_TOL).ncols(), 3);
        assert_eq!(rank(&m, RANK_TOL), 0);
    }

    #[test]
    fn leading_vectors_span_range() {
        let m = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 2.0, 0.0, 0.0]);
        let u = leading_left_singular(&m, 2);
        let p = &u * u.transpose();
        assert!((&p * &m - &m).norm() < 1e-14);
    }

    #[test]
    fn seeded_rng_is_reproducible() {
        let a = normal_vector(&mut rng(3), 4);
        let b = normal_vector(&mut rng(3), 4);
        assert_eq!(a, b);
    }
}
