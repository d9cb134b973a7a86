//! Real Lie algebras given by structure constants, with the coadjoint
//! machinery built on top of them.
//!
//! Conventions: `[e_i, e_j] = sum_k c[i][j][k] e_k`, covectors are stored in the
//! dual basis, and `<ad*_xi alpha, eta> = <alpha, [xi, eta]>` (see
//! [`AD_STAR_SIGN`]).

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{self, RANK_TOL};

pub type AlgVector = DVector<f64>;
pub type CoVector = DVector<f64>;

/// Sign of the coadjoint representation: `<ad*_xi alpha, eta> = s <alpha, [xi, eta]>`.
/// Pinned by the cotangent sign test.
pub const AD_STAR_SIGN: f64 = 1.0;

const GENERIC_SAMPLES: usize = 256;
const GENERIC_SEED: u64 = 0x1d_0_a1;

#[derive(Debug, Clone, PartialEq)]
pub struct LieAlgebra {
    name: String,
    dim: usize,
    c: Vec<f64>,
    labels: Vec<String>,
    generic_isotropy: usize,
}

impl LieAlgebra {
    /// Builds an algebra from a dense `c[i][j][k]` table (flattened, `i*n*n + j*n + k`).
    pub fn from_constants(name: &str, dim: usize, c: Vec<f64>, labels: Vec<String>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidStructure("dimension must be positive".into()));
        }
        if c.len() != dim * dim * dim {
            return Err(Error::DimensionMismatch { expected: dim * dim * dim, got: c.len() });
        }
        if labels.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: labels.len() });
        }
        let mut a = LieAlgebra { name: name.to_string(), dim, c, labels, generic_isotropy: dim };
        let anti = a.antisymmetry_residual();
        if anti > 1e-12 {
            return Err(Error::InvalidStructure(format!("antisymmetry residual {anti:.3e}")));
        }
        let jac = a.jacobi_residual();
        if jac > 1e-12 {
            return Err(Error::InvalidStructure(format!("Jacobi residual {jac:.3e}")));
        }
        a.generic_isotropy = a.estimate_generic_isotropy();
        Ok(a)
    }

    /// Parses the plain-text format: a `dim n` header, then `i j k value` lines.
    /// Blank lines and `#` comments are ignored; unlisted entries are zero.
    pub fn from_structure_text(name: &str, text: &str) -> Result<Self> {
        let mut dim = None;
        let mut c = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |msg: String| Error::Parse { line: lineno + 1, msg };
            let fields: Vec<&str> = line.split_whitespace().collect();
            match dim {
                None => {
                    if fields.len() != 2 || fields[0] != "dim" {
                        return Err(parse_err("expected header `dim n`".into()));
                    }
                    let n: usize = fields[1]
                        .parse()
                        .map_err(|_| parse_err(format!("bad dimension `{}`", fields[1])))?;
                    if n == 0 {
                        return Err(parse_err("dimension must be positive".into()));
                    }
                    dim = Some(n);
                    c = vec![0.0; n * n * n];
                }
                Some(n) => {
                    if fields.len() != 4 {
                        return Err(parse_err("expected `i j k value`".into()));
                    }
                    let mut idx = [0usize; 3];
                    for (slot, f) in idx.iter_mut().zip(&fields[..3]) {
                        *slot = f.parse().map_err(|_| parse_err(format!("bad index `{f}`")))?;
                        if *slot >= n {
                            return Err(parse_err(format!("index {slot} out of range for dim {n}")));
                        }
                    }
                    let v: f64 = fields[3]
                        .parse()
                        .map_err(|_| parse_err(format!("bad value `{}`", fields[3])))?;
                    c[idx[0] * n * n + idx[1] * n + idx[2]] = v;
                }
            }
        }
        let n = dim.ok_or(Error::Parse { line: 0, msg: "missing `dim n` header".into() })?;
        let labels = (1..=n).map(|i| format!("e{i}")).collect();
        Self::from_constants(name, n, c, labels)
    }

    pub fn from_structure_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Invalid(format!("cannot read {}: {e}", path.display())))?;
        let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("custom");
        Self::from_structure_text(name, &text)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    #[inline]
    pub fn c(&self, i: usize, j: usize, k: usize) -> f64 {
        self.c[(i * self.dim + j) * self.dim + k]
    }

    fn check_len(&self, v: &DVector<f64>) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: v.len() });
        }
        Ok(())
    }

    pub fn zero(&self) -> AlgVector {
        DVector::zeros(self.dim)
    }

    pub fn basis_vector(&self, i: usize) -> AlgVector {
        let mut v = self.zero();
        v[i] = 1.0;
        v
    }

    pub fn bracket(&self, x: &AlgVector, y: &AlgVector) -> Result<AlgVector> {
        self.check_len(x)?;
        self.check_len(y)?;
        Ok(self.bracket_unchecked(x, y))
    }

    pub(crate) fn bracket_unchecked(&self, x: &AlgVector, y: &AlgVector) -> AlgVector {
        let n = self.dim;
        let mut out = DVector::zeros(n);
        for i in 0..n {
            if x[i] == 0.0 {
                continue;
            }
            for j in 0..n {
                let w = x[i] * y[j];
                if w == 0.0 {
                    continue;
                }
                for k in 0..n {
                    out[k] += w * self.c(i, j, k);
                }
            }
        }
        out
    }

    /// Matrix of `ad_xi` acting on algebra coordinates.
    pub fn ad_matrix(&self, xi: &AlgVector) -> DMatrix<f64> {
        let n = self.dim;
        DMatrix::from_fn(n, n, |k, j| (0..n).map(|i| xi[i] * self.c(i, j, k)).sum())
    }

    pub fn ad_star(&self, xi: &AlgVector, alpha: &CoVector) -> Result<CoVector> {
        self.check_len(xi)?;
        self.check_len(alpha)?;
        Ok(self.ad_star_unchecked(xi, alpha))
    }

    pub(crate) fn ad_star_unchecked(&self, xi: &AlgVector, alpha: &CoVector) -> CoVector {
        self.ad_matrix(xi).transpose() * alpha * AD_STAR_SIGN
    }

    /// The matrix `M` with `M xi = ad*_xi alpha`; its kernel is the isotropy algebra.
    pub fn isotropy_matrix(&self, alpha: &CoVector) -> DMatrix<f64> {
        let n = self.dim;
        DMatrix::from_fn(n, n, |j, i| AD_STAR_SIGN * (0..n).map(|k| self.c(i, j, k) * alpha[k]).sum::<f64>())
    }

    /// `P[i][j] = <alpha, [e_i, e_j]>`.
    pub fn pairing_matrix(&self, alpha: &CoVector) -> DMatrix<f64> {
        let n = self.dim;
        DMatrix::from_fn(n, n, |i, j| (0..n).map(|k| self.c(i, j, k) * alpha[k]).sum())
    }

    pub fn killing_form(&self) -> DMatrix<f64> {
        let ads: Vec<DMatrix<f64>> = (0..self.dim).map(|i| self.ad_matrix(&self.basis_vector(i))).collect();
        DMatrix::from_fn(self.dim, self.dim, |i, j| (&ads[i] * &ads[j]).trace())
    }

    pub fn antisymmetry_residual(&self) -> f64 {
        let n = self.dim;
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    worst = worst.max((self.c(i, j, k) + self.c(j, i, k)).abs());
                }
            }
        }
        worst
    }

    pub fn jacobi_residual(&self) -> f64 {
        let n = self.dim;
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    for l in 0..n {
                        let s: f64 = (0..n)
                            .map(|m| {
                                self.c(i, j, m) * self.c(m, k, l)
                                    + self.c(j, k, m) * self.c(m, i, l)
                                    + self.c(k, i, m) * self.c(m, j, l)
                            })
                            .sum();
                        worst = worst.max(s.abs());
                    }
                }
            }
        }
        worst
    }

    /// Max of `|B([x,y],z) + B(y,[x,z])|` over seeded random triples.
    pub fn killing_invariance_residual(&self, samples: usize, seed: u64) -> f64 {
        let b = self.killing_form();
        let mut rng = linalg::rng(seed);
        let mut worst: f64 = 0.0;
        for _ in 0..samples {
            let x = linalg::normal_vector(&mut rng, self.dim);
            let y = linalg::normal_vector(&mut rng, self.dim);
            let z = linalg::normal_vector(&mut rng, self.dim);
            let xy = self.bracket_unchecked(&x, &y);
            let xz = self.bracket_unchecked(&x, &z);
            let r = (xy.transpose() * &b * &z)[0] + (y.transpose() * &b * &xz)[0];
            worst = worst.max(r.abs());
        }
        worst
    }

    /// Size of `M(alpha)` expected at `alpha`: `|c| |alpha|`. Rank decisions are
    /// made relative to this, so round-off components of `alpha` do not count.
    fn isotropy_scale(&self, alpha: &CoVector) -> f64 {
        self.c.iter().map(|x| x * x).sum::<f64>().sqrt() * alpha.norm()
    }

    /// Orthonormal basis (columns) of the isotropy algebra of `alpha`.
    pub fn isotropy_subalgebra(&self, alpha: &CoVector, tol: f64) -> DMatrix<f64> {
        linalg::null_space_scaled(&self.isotropy_matrix(alpha), tol, self.isotropy_scale(alpha))
    }

    pub fn isotropy_dim(&self, alpha: &CoVector) -> usize {
        self.dim - linalg::rank_scaled(&self.isotropy_matrix(alpha), RANK_TOL, self.isotropy_scale(alpha))
    }

    /// Minimal isotropy dimension over the fixed seeded sample.
    pub fn generic_isotropy_dim(&self) -> usize {
        self.generic_isotropy
    }

    fn estimate_generic_isotropy(&self) -> usize {
        let mut rng = linalg::rng(GENERIC_SEED);
        (0..GENERIC_SAMPLES)
            .map(|_| self.isotropy_dim(&linalg::unit_ball(&mut rng, self.dim)))
            .min()
            .unwrap_or(self.dim)
    }

    pub fn is_coadjoint_regular(&self, alpha: &CoVector) -> bool {
        alpha.len() == self.dim && self.isotropy_dim(alpha) == self.generic_isotropy
    }
}

/// Catalogue: `so3`, `su2`, `sl2r`, `heis3`, `rn:<k>`.
pub fn make_algebra(key: &str) -> Result<LieAlgebra> {
    let eps = |n: usize, table: &[(usize, usize, usize, f64)]| {
        let mut c = vec![0.0; n * n * n];
        for &(i, j, k, v) in table {
            c[(i * n + j) * n + k] = v;
            c[(j * n + i) * n + k] = -v;
        }
        c
    };
    let labels = |names: &[&str]| names.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let so3_table = [(0, 1, 2, 1.0), (1, 2, 0, 1.0), (2, 0, 1, 1.0)];
    match key {
        "so3" => LieAlgebra::from_constants("so3", 3, eps(3, &so3_table), labels(&["L1", "L2", "L3"])),
        "su2" => LieAlgebra::from_constants("su2", 3, eps(3, &so3_table), labels(&["e1", "e2", "e3"])),
        "sl2r" => LieAlgebra::from_constants(
            "sl2r",
            3,
            eps(3, &[(0, 1, 1, 2.0), (0, 2, 2, -2.0), (1, 2, 0, 1.0)]),
            labels(&["H", "E", "F"]),
        ),
        "heis3" => {
            LieAlgebra::from_constants("heis3", 3, eps(3, &[(0, 1, 2, 1.0)]), labels(&["xi1", "xi2", "xi3"]))
        }
        _ => {
            let k = key
                .strip_prefix("rn:")
                .and_then(|s| s.parse::<usize>().ok())
                .filter(|&k| k > 0)
                .ok_or_else(|| Error::UnknownCatalogue(key.to_string()))?;
            let names: Vec<String> = (1..=k).map(|i| format!("x{i}")).collect();
            LieAlgebra::from_constants(&format!("rn:{k}"), k, vec![0.0; k * k * k], names)
        }
    }
}

pub type CasimirFn = Arc<dyn Fn(&CoVector) -> AlgVector + Send + Sync>;
pub type ScalarFn = Arc<dyn Fn(&CoVector) -> f64 + Send + Sync>;

/// A map `phi: g* -> g` with `ad*_{phi(alpha)} alpha = 0` on a ball.
#[derive(Clone)]
pub struct CasimirForm {
    evaluator: CasimirFn,
    pub domain_center: CoVector,
    pub domain_radius: f64,
    hamiltonian: Option<ScalarFn>,
    pub label: String,
}

impl fmt::Debug for CasimirForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CasimirForm")
            .field("label", &self.label)
            .field("domain_center", &self.domain_center.as_slice())
            .field("domain_radius", &self.domain_radius)
            .finish()
    }
}

impl CasimirForm {
    pub fn new(label: &str, evaluator: CasimirFn, center: CoVector, radius: f64) -> Self {
        CasimirForm { evaluator, domain_center: center, domain_radius: radius, hamiltonian: None, label: label.into() }
    }

    pub fn zero(dim: usize) -> Self {
        Self::new("zero", Arc::new(move |_| DVector::zeros(dim)), DVector::zeros(dim), f64::INFINITY)
    }

    /// A constant map; only a Casimir where `ad*_xi alpha` vanishes.
    pub fn constant(xi: AlgVector) -> Self {
        let n = xi.len();
        Self::new("constant", Arc::new(move |_| xi.clone()), DVector::zeros(n), f64::INFINITY)
    }

    pub fn with_hamiltonian(mut self, h: ScalarFn) -> Self {
        self.hamiltonian = Some(h);
        self
    }

    pub fn eval(&self, alpha: &CoVector) -> AlgVector {
        (self.evaluator)(alpha)
    }

    /// Scalar potential `h` with `dh = phi`, when known.
    pub fn hamiltonian(&self) -> Option<&ScalarFn> {
        self.hamiltonian.as_ref()
    }

    pub fn contains(&self, alpha: &CoVector) -> bool {
        self.domain_radius.is_infinite() || (alpha - &self.domain_center).norm() <= self.domain_radius
    }

    pub fn scaled(&self, s: f64) -> Self {
        let inner = self.evaluator.clone();
        let mut out = self.clone();
        out.evaluator = Arc::new(move |a| inner(a) * s);
        out.hamiltonian = self.hamiltonian.clone().map(|h| Arc::new(move |a: &CoVector| s * h(a)) as ScalarFn);
        out.label = format!("{}*{s}", self.label);
        out
    }
}

/// Max of `|ad*_{phi(alpha)} alpha|` over the samples.
pub fn casimir_check(a: &LieAlgebra, phi: &CasimirForm, alphas: &[CoVector]) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for alpha in alphas {
        if !phi.contains(alpha) {
            return Err(Error::OutsideDomain {
                distance: (alpha - &phi.domain_center).norm(),
                radius: phi.domain_radius,
            });
        }
        worst = worst.max(a.ad_star(&phi.eval(alpha), alpha)?.norm());
    }
    Ok(worst)
}

/// Local Casimir through `(alpha0, xi)`: `phi(alpha)` is the orthogonal
/// projection of `xi` onto the isotropy algebra of `alpha`.
pub fn casimir_from_point(a: &LieAlgebra, xi: &AlgVector, alpha0: &CoVector) -> Result<CasimirForm> {
    let n = a.dim();
    let dim0 = a.isotropy_dim(alpha0);
    if dim0 != a.generic_isotropy_dim() {
        return Err(Error::NotRegular { dim: dim0, generic: a.generic_isotropy_dim() });
    }
    let residual = a.ad_star(xi, alpha0)?.norm();
    if residual > 1e-9 * (1.0 + xi.norm()) * (1.0 + alpha0.norm()) {
        return Err(Error::NotInIsotropy { residual });
    }
    let mut radius = if alpha0.norm() > 0.0 { 0.5 * alpha0.norm() } else { 1.0 };
    let mut rng = linalg::rng(0xca5);
    let dirs: Vec<DVector<f64>> = (0..64).map(|_| linalg::unit_sphere(&mut rng, n)).collect();
    let mut found = false;
    for _ in 0..40 {
        if dirs.iter().all(|d| a.isotropy_dim(&(alpha0 + d * radius)) == dim0) {
            found = true;
            break;
        }
        radius *= 0.5;
    }
    if !found {
        return Err(Error::NotRegular { dim: dim0, generic: a.generic_isotropy_dim() });
    }
    let alg = a.clone();
    let xi = xi.clone();
    let eval = move |alpha: &CoVector| {
        let q = alg.isotropy_subalgebra(alpha, RANK_TOL);
        &q * (q.transpose() * &xi)
    };
    Ok(CasimirForm::new("isotropy-section", Arc::new(eval), alpha0.clone(), radius))
}

/// `B^#`, the inverse Killing form applied to dual coordinates, with its potential
/// `h(alpha) = 1/2 <alpha, B^# alpha>`.
pub fn bsharp_form(a: &LieAlgebra) -> Result<CasimirForm> {
    let b = a.killing_form();
    let eig = b.clone().symmetric_eigen();
    let max_abs = eig.eigenvalues.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let min_abs = eig.eigenvalues.iter().fold(f64::INFINITY, |m, x| m.min(x.abs()));
    if max_abs == 0.0 || min_abs <= 1e-10 * max_abs {
        return Err(Error::DegenerateKilling { min_abs, max_abs });
    }
    let binv = b.try_inverse().ok_or(Error::DegenerateKilling { min_abs, max_abs })?;
    let binv2 = binv.clone();
    let n = a.dim();
    Ok(CasimirForm::new("bsharp", Arc::new(move |alpha| &binv * alpha), DVector::zeros(n), f64::INFINITY)
        .with_hamiltonian(Arc::new(move |alpha| 0.5 * alpha.dot(&(&binv2 * alpha)))))
}

/// Orthonormal coordinates basis (columns) of the center `{xi : [xi, g] = 0}`.
pub fn center_basis(a: &LieAlgebra) -> DMatrix<f64> {
    let n = a.dim();
    let mut stacked = DMatrix::zeros(n * n, n);
    for i in 0..n {
        stacked.view_mut((i * n, 0), (n, n)).copy_from(&a.ad_matrix(&a.basis_vector(i)));
    }
    linalg::null_space(&stacked, RANK_TOL)
}

/// `phi(alpha) = Q Q^T alpha` onto the center `Q`, with potential `|Q^T alpha|^2 / 2`.
pub fn central_form(a: &LieAlgebra) -> Result<CasimirForm> {
    let q = center_basis(a);
    if q.ncols() == 0 {
        return Err(Error::Invalid(format!("{} has trivial center", a.name())));
    }
    let p = &q * q.transpose();
    let p2 = p.clone();
    Ok(CasimirForm::new("central", Arc::new(move |alpha| &p * alpha), DVector::zeros(a.dim()), f64::INFINITY)
        .with_hamiltonian(Arc::new(move |alpha| 0.5 * alpha.dot(&(&p2 * alpha)))))
}

/// `B^flat(xi) = B xi`.
pub fn bflat(a: &LieAlgebra, xi: &AlgVector) -> CoVector {
    a.killing_form() * xi
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn so3_matrices() -> Vec<DMatrix<f64>> {
        vec![
            DMatrix::from_row_slice(3, 3, &[0., 0., 0., 0., 0., -1., 0., 1., 0.]),
            DMatrix::from_row_slice(3, 3, &[0., 0., 1., 0., 0., 0., -1., 0., 0.]),
            DMatrix::from_row_slice(3, 3, &[0., -1., 0., 1., 0., 0., 0., 0., 0.]),
        ]
    }

    #[test]
    fn so3_constants_match_matrix_commutators() {
        let a = make_algebra("so3").unwrap();
        let m = so3_matrices();
        for i in 0..3 {
            for j in 0..3 {
                let comm = &m[i] * &m[j] - &m[j] * &m[i];
                let mut rebuilt = DMatrix::zeros(3, 3);
                for k in 0..3 {
                    rebuilt += &m[k] * a.c(i, j, k);
                }
                assert!((comm - rebuilt).norm() < 1e-15);
            }
        }
        assert_eq!(a.jacobi_residual(), 0.0);
    }

    #[test]
    fn heis3_bracket() {
        let a = make_algebra("heis3").unwrap();
        let r = a.bracket(&a.basis_vector(0), &a.basis_vector(1)).unwrap();
        assert_eq!(r, a.basis_vector(2));
        let r = a.bracket(&a.basis_vector(1), &a.basis_vector(0)).unwrap();
        assert_eq!(r, -a.basis_vector(2));
    }

    #[test]
    fn rn_is_abelian() {
        let a = make_algebra("rn:3").unwrap();
        assert!(a.c.iter().all(|&x| x == 0.0));
        assert_eq!(a.generic_isotropy_dim(), 3);
        assert!(a.killing_form().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn unknown_key_is_rejected() {
        assert!(matches!(make_algebra("so4"), Err(Error::UnknownCatalogue(_))));
        assert!(matches!(make_algebra("rn:0"), Err(Error::UnknownCatalogue(_))));
    }

    #[test]
    fn so3_bracket_e1_e2() {
        let a = make_algebra("so3").unwrap();
        let r = a.bracket(&a.basis_vector(0), &a.basis_vector(1)).unwrap();
        assert_eq!(r, a.basis_vector(2));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let a = make_algebra("so3").unwrap();
        let e = a.bracket(&DVector::zeros(2), &a.zero()).unwrap_err();
        assert_eq!(e, Error::DimensionMismatch { expected: 3, got: 2 });
    }

    #[test]
    fn heis3_ad_star_examples() {
        let a = make_algebra("heis3").unwrap();
        let alpha = DVector::from_vec(vec![0.3, -1.2, 2.0]);
        assert_eq!(a.ad_star(&a.basis_vector(2), &alpha).unwrap().norm(), 0.0);
        let r = a.ad_star(&a.basis_vector(0), &DVector::from_vec(vec![0., 0., 1.])).unwrap();
        assert_eq!(r, DVector::from_vec(vec![0., AD_STAR_SIGN, 0.]));
        assert_eq!(a.ad_star(&a.zero(), &alpha).unwrap().norm(), 0.0);
    }

    #[test]
    fn killing_forms() {
        let so3 = make_algebra("so3").unwrap();
        assert!((so3.killing_form() + DMatrix::identity(3, 3) * 2.0).norm() < 1e-15);
        let heis = make_algebra("heis3").unwrap();
        assert_eq!(heis.killing_form().norm(), 0.0);
        let sl2 = make_algebra("sl2r").unwrap();
        let expect = DMatrix::from_row_slice(3, 3, &[8., 0., 0., 0., 0., 4., 0., 4., 0.]);
        assert!((sl2.killing_form() - expect).norm() < 1e-14);
    }

    #[test]
    fn heis3_isotropy_examples() {
        let a = make_algebra("heis3").unwrap();
        let q = a.isotropy_subalgebra(&DVector::from_vec(vec![1., 2., 0.]), RANK_TOL);
        assert_eq!(q.ncols(), 3);
        let q = a.isotropy_subalgebra(&DVector::from_vec(vec![0., 0., 1.]), RANK_TOL);
        assert_eq!(q.ncols(), 1);
        assert!((q[(2, 0)].abs() - 1.0).abs() < 1e-14);
        assert_eq!(a.isotropy_subalgebra(&a.zero(), RANK_TOL).ncols(), 3);
    }

    #[test]
    fn regularity_examples() {
        let h = make_algebra("heis3").unwrap();
        assert_eq!(h.generic_isotropy_dim(), 1);
        assert!(h.is_coadjoint_regular(&DVector::from_vec(vec![0., 0., 1.])));
        assert!(!h.is_coadjoint_regular(&DVector::from_vec(vec![1., 0., 0.])));
        let s = make_algebra("so3").unwrap();
        assert!(s.is_coadjoint_regular(&DVector::from_vec(vec![0., 0., 1.])));
        assert!(!s.is_coadjoint_regular(&s.zero()));
    }

    #[test]
    fn casimir_check_examples() {
        let a = make_algebra("so3").unwrap();
        let mut rng = linalg::rng(11);
        let samples: Vec<_> = (0..100).map(|_| linalg::normal_vector(&mut rng, 3)).collect();
        assert_eq!(casimir_check(&a, &CasimirForm::zero(3), &samples).unwrap(), 0.0);
        let b = bsharp_form(&a).unwrap();
        assert!(casimir_check(&a, &b, &samples).unwrap() <= 1e-12);
        let c = CasimirForm::constant(a.basis_vector(0));
        assert!(casimir_check(&a, &c, &[a.basis_vector(1)]).unwrap() > 0.9);
    }

    #[test]
    fn casimir_check_rejects_outside_samples() {
        let a = make_algebra("heis3").unwrap();
        let alpha0 = DVector::from_vec(vec![0., 0., 1.]);
        let phi = casimir_from_point(&a, &a.basis_vector(2), &alpha0).unwrap();
        let far = DVector::from_vec(vec![10., 0., 1.]);
        assert!(matches!(casimir_check(&a, &phi, &[far]), Err(Error::OutsideDomain { .. })));
    }

    #[test]
    fn casimir_from_point_examples() {
        let h = make_algebra("heis3").unwrap();
        let alpha0 = DVector::from_vec(vec![0., 0., 1.]);
        let phi = casimir_from_point(&h, &h.basis_vector(2), &alpha0).unwrap();
        assert!((phi.eval(&alpha0) - h.basis_vector(2)).norm() < 1e-12);
        let mut rng = linalg::rng(5);
        let samples: Vec<_> =
            (0..50).map(|_| &alpha0 + linalg::unit_ball(&mut rng, 3) * phi.domain_radius).collect();
        assert!(casimir_check(&h, &phi, &samples).unwrap() <= 1e-10);

        let s = make_algebra("so3").unwrap();
        let e3 = s.basis_vector(2);
        let phi = casimir_from_point(&s, &e3, &e3).unwrap();
        assert!((phi.eval(&e3) - &e3).norm() < 1e-12);

        let err = casimir_from_point(&h, &h.basis_vector(0), &alpha0).unwrap_err();
        assert!(matches!(err, Error::NotInIsotropy { .. }));
        let err = casimir_from_point(&h, &h.basis_vector(2), &DVector::from_vec(vec![1., 0., 0.])).unwrap_err();
        assert!(matches!(err, Error::NotRegular { .. }));
    }

    #[test]
    fn bsharp_examples() {
        let s = make_algebra("so3").unwrap();
        let b = bsharp_form(&s).unwrap();
        let alpha = DVector::from_vec(vec![1., -2., 0.5]);
        assert!((b.eval(&alpha) + &alpha * 0.5).norm() < 1e-15);
        let h = b.hamiltonian().unwrap();
        assert!((h(&alpha) - 0.5 * alpha.dot(&(-&alpha * 0.5))).abs() < 1e-15);
        assert!(matches!(bsharp_form(&make_algebra("heis3").unwrap()), Err(Error::DegenerateKilling { .. })));
        let sl = make_algebra("sl2r").unwrap();
        let b = bsharp_form(&sl).unwrap();
        let mut rng = linalg::rng(2);
        let samples: Vec<_> = (0..100).map(|_| linalg::normal_vector(&mut rng, 3)).collect();
        assert!(casimir_check(&sl, &b, &samples).unwrap() <= 1e-12);
    }

    #[test]
    fn structure_file_round_trip() {
        let text = "# heisenberg\ndim 3\n0 1 2 1\n1 0 2 -1\n";
        let a = LieAlgebra::from_structure_text("h", text).unwrap();
        assert_eq!(a.c, make_algebra("heis3").unwrap().c);
        let bad = LieAlgebra::from_structure_text("h", "dim 3\n0 1 2 1\n").unwrap_err();
        assert!(matches!(bad, Error::InvalidStructure(_)));
        let bad = LieAlgebra::from_structure_text("h", "dim 3\n0 1 x 1\n").unwrap_err();
        assert!(matches!(bad, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn catalogue_jacobi_and_invariance() {
        for key in ["so3", "su2", "sl2r", "heis3", "rn:4"] {
            let a = make_algebra(key).unwrap();
            assert!(a.jacobi_residual() <= 1e-12, "{key}");
            assert!(a.killing_invariance_residual(50, 1) <= 1e-12, "{key}");
        }
    }

    #[test]
    fn centers() {
        let h = make_algebra("heis3").unwrap();
        let q = center_basis(&h);
        assert_eq!(q.ncols(), 1);
        assert!((q[(2, 0)].abs() - 1.0).abs() < 1e-14);
        let phi = central_form(&h).unwrap();
        assert!((phi.eval(&DVector::from_vec(vec![0.4, -2.0, 0.7])) - DVector::from_vec(vec![0.0, 0.0, 0.7])).norm() < 1e-14);
        assert_eq!(center_basis(&make_algebra("rn:3").unwrap()).ncols(), 3);
        assert!(central_form(&make_algebra("so3").unwrap()).is_err());
    }

    #[test]
    fn bflat_maps_regular_to_regular() {
        for key in ["so3", "sl2r"] {
            let a = make_algebra(key).unwrap();
            let mut rng = linalg::rng(17);
            let mut checked = 0;
            while checked < 100 {
                let xi = linalg::normal_vector(&mut rng, 3);
                // adjoint-regular: centralizer of minimal dimension
                if linalg::rank(&a.ad_matrix(&xi), RANK_TOL) != 2 {
                    continue;
                }
                assert!(a.is_coadjoint_regular(&bflat(&a, &xi)));
                checked += 1;
            }
        }
    }

    #[test]
    fn regular_points_are_dense() {
        for key in ["so3", "su2", "sl2r", "heis3", "rn:3"] {
            let a = make_algebra(key).unwrap();
            let mut rng = linalg::rng(99);
            let regular =
                (0..10_000).filter(|_| a.is_coadjoint_regular(&linalg::unit_ball(&mut rng, a.dim()))).count();
            assert!(regular as f64 / 10_000.0 >= 0.999, "{key}");
        }
    }

    proptest! {
        #[test]
        fn ad_star_is_dual_to_bracket(
            x in proptest::collection::vec(-1.0f64..1.0, 3),
            y in proptest::collection::vec(-1.0f64..1.0, 3),
            al in proptest::collection::vec(-1.0f64..1.0, 3),
            key in proptest::sample::select(vec!["so3", "sl2r", "heis3", "su2"]),
        ) {
            let a = make_algebra(key).unwrap();
            let (x, y, al) = (DVector::from_vec(x), DVector::from_vec(y), DVector::from_vec(al));
            let lhs = a.ad_star(&x, &al).unwrap().dot(&y);
            let rhs = AD_STAR_SIGN * al.dot(&a.bracket(&x, &y).unwrap());
            prop_assert!((lhs - rhs).abs() <= 1e-14);
        }

        #[test]
        fn bracket_is_antisymmetric(
            x in proptest::collection::vec(-3.0f64..3.0, 3),
            y in proptest::collection::vec(-3.0f64..3.0, 3),
        ) {
            let a = make_algebra("sl2r").unwrap();
            let (x, y) = (DVector::from_vec(x), DVector::from_vec(y));
            let s = a.bracket(&x, &y).unwrap() + a.bracket(&y, &x).unwrap();
            prop_assert!(s.norm() <= 1e-13);
            prop_assert!(a.bracket(&x, &x).unwrap().norm() <= 1e-13);
        }
    }
}
