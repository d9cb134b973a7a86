//! Matrix Lie groups paired with their algebras.
//!
//! Elements are stored as complex `N x N` matrices; the real groups simply keep a
//! zero imaginary part. The real vectorization used by charts and output files is
//! row-major real parts (`N^2` entries) for real groups and row-major `(re, im)`
//! pairs (`2 N^2` entries) for SU(2).

use nalgebra::{Complex, DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::liealg::{make_algebra, AlgVector, CoVector, LieAlgebra};
use crate::linalg;

pub type C64 = Complex<f64>;
pub type CMat = DMatrix<C64>;

/// Membership tolerance for a valid [`GroupElement`].
pub const MEMBERSHIP_TOL: f64 = 1e-8;
/// Residuals above this are hard errors rather than re-projected.
pub const REPROJECT_LIMIT: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroupKind {
    SO3,
    SU2,
    SL2R,
    Heis3,
    /// `R^k` realized as translation matrices `[[I, x], [0, 1]]`.
    Translations(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupElement {
    matrix: CMat,
}

impl GroupElement {
    pub fn matrix(&self) -> &CMat {
        &self.matrix
    }
}

#[derive(Clone, Debug)]
pub struct MatrixGroup {
    name: String,
    kind: GroupKind,
    algebra: LieAlgebra,
    rep_dim: usize,
    complex: bool,
    basis: Vec<CMat>,
    basis_vec: DMatrix<f64>,
    expand_pinv: DMatrix<f64>,
}

fn c(re: f64) -> C64 {
    Complex::new(re, 0.0)
}

fn real_mat(n: usize, entries: &[f64]) -> CMat {
    DMatrix::from_row_slice(n, n, entries).map(c)
}

/// Catalogue groups: `so3`, `su2`, `sl2r`, `heis3`, `rn:<k>`.
pub fn make_group(key: &str) -> Result<MatrixGroup> {
    let algebra = make_algebra(key)?;
    let i = Complex::new(0.0, 1.0);
    let (kind, basis) = match key {
        "so3" => (
            GroupKind::SO3,
            vec![
                real_mat(3, &[0., 0., 0., 0., 0., -1., 0., 1., 0.]),
                real_mat(3, &[0., 0., 1., 0., 0., 0., -1., 0., 0.]),
                real_mat(3, &[0., -1., 0., 1., 0., 0., 0., 0., 0.]),
            ],
        ),
        "su2" => {
            // e_j = -(i/2) sigma_j
            let h = Complex::new(0.0, -0.5);
            let s1 = DMatrix::from_row_slice(2, 2, &[c(0.), c(1.), c(1.), c(0.)]);
            let s2 = DMatrix::from_row_slice(2, 2, &[c(0.), -i, i, c(0.)]);
            let s3 = DMatrix::from_row_slice(2, 2, &[c(1.), c(0.), c(0.), c(-1.)]);
            (GroupKind::SU2, vec![s1 * h, s2 * h, s3 * h])
        }
        "sl2r" => (
            GroupKind::SL2R,
            vec![real_mat(2, &[1., 0., 0., -1.]), real_mat(2, &[0., 1., 0., 0.]), real_mat(2, &[0., 0., 1., 0.])],
        ),
        "heis3" => (
            GroupKind::Heis3,
            vec![
                real_mat(3, &[0., 1., 0., 0., 0., 0., 0., 0., 0.]),
                real_mat(3, &[0., 0., 0., 0., 0., 1., 0., 0., 0.]),
                real_mat(3, &[0., 0., 1., 0., 0., 0., 0., 0., 0.]),
            ],
        ),
        _ => {
            let k = algebra.dim();
            let basis = (0..k)
                .map(|j| {
                    let mut m = CMat::zeros(k + 1, k + 1);
                    m[(j, k)] = c(1.0);
                    m
                })
                .collect();
            (GroupKind::Translations(k), basis)
        }
    };
    MatrixGroup::new(key, kind, algebra, basis)
}

impl MatrixGroup {
    fn new(name: &str, kind: GroupKind, algebra: LieAlgebra, basis: Vec<CMat>) -> Result<Self> {
        let rep_dim = basis[0].nrows();
        let complex = kind == GroupKind::SU2;
        let n = algebra.dim();
        let d = if complex { 2 * rep_dim * rep_dim } else { rep_dim * rep_dim };
        let mut basis_vec = DMatrix::zeros(d, n);
        for (j, e) in basis.iter().enumerate() {
            basis_vec.set_column(j, &vectorize_with(e, complex));
        }
        let expand_pinv = basis_vec.clone().pseudo_inverse(1e-14).map_err(|e| Error::Invalid(e.to_string()))?;
        let g = MatrixGroup { name: name.to_string(), kind, algebra, rep_dim, complex, basis, basis_vec, expand_pinv };
        let consistency = g.commutator_consistency();
        if consistency > 1e-12 {
            return Err(Error::InvalidStructure(format!("commutator consistency {consistency:.3e}")));
        }
        Ok(g)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> GroupKind {
        self.kind
    }

    pub fn algebra(&self) -> &LieAlgebra {
        &self.algebra
    }

    pub fn dim(&self) -> usize {
        self.algebra.dim()
    }

    pub fn rep_dim(&self) -> usize {
        self.rep_dim
    }

    pub fn is_complex(&self) -> bool {
        self.complex
    }

    pub fn basis_matrices(&self) -> &[CMat] {
        &self.basis
    }

    /// Length of the real vectorization.
    pub fn vec_len(&self) -> usize {
        self.basis_vec.nrows()
    }

    /// Max deviation between matrix commutators of the basis and the structure constants.
    pub fn commutator_consistency(&self) -> f64 {
        let n = self.dim();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                let comm = &self.basis[i] * &self.basis[j] - &self.basis[j] * &self.basis[i];
                let mut rebuilt = CMat::zeros(self.rep_dim, self.rep_dim);
                for k in 0..n {
                    rebuilt += &self.basis[k] * c(self.algebra.c(i, j, k));
                }
                worst = worst.max((comm - rebuilt).norm());
            }
        }
        worst
    }

    pub fn identity(&self) -> GroupElement {
        GroupElement { matrix: CMat::identity(self.rep_dim, self.rep_dim) }
    }

    /// Validates membership (re-projecting small drift) and wraps the matrix.
    pub fn element(&self, matrix: CMat) -> Result<GroupElement> {
        if matrix.shape() != (self.rep_dim, self.rep_dim) {
            return Err(Error::DimensionMismatch { expected: self.rep_dim, got: matrix.nrows() });
        }
        let r = self.membership_residual(&matrix);
        if r <= MEMBERSHIP_TOL {
            Ok(GroupElement { matrix })
        } else if r <= REPROJECT_LIMIT {
            let projected = self.project(&matrix)?;
            Ok(GroupElement { matrix: projected })
        } else {
            Err(Error::NotInGroup { residual: r })
        }
    }

    pub(crate) fn element_unchecked(&self, matrix: CMat) -> GroupElement {
        GroupElement { matrix }
    }

    pub fn membership_residual(&self, m: &CMat) -> f64 {
        if m.shape() != (self.rep_dim, self.rep_dim) {
            return f64::INFINITY;
        }
        let imag = if self.complex { 0.0 } else { m.map(|z| z.im).norm() };
        let y = vectorize_with(m, self.complex);
        let base = self.constraints(&y).norm() + imag;
        match self.kind {
            GroupKind::SO3 | GroupKind::SU2 => base + (m.determinant() - c(1.0)).norm(),
            _ => base,
        }
    }

    pub fn compose(&self, g: &GroupElement, h: &GroupElement) -> Result<GroupElement> {
        self.element(&g.matrix * &h.matrix)
    }

    pub fn inverse(&self, g: &GroupElement) -> Result<GroupElement> {
        let inv = g.matrix.clone().try_inverse().ok_or(Error::NotInGroup { residual: f64::INFINITY })?;
        self.element(inv)
    }

    /// Nearest-point projection onto the group (polar factor for the compact
    /// groups, minimum-norm Newton on the defining equations otherwise).
    pub fn project(&self, m: &CMat) -> Result<CMat> {
        match self.kind {
            GroupKind::SO3 | GroupKind::SU2 => {
                let svd = m.clone().svd(true, true);
                let mut q = svd.u.unwrap() * svd.v_t.unwrap();
                if self.kind == GroupKind::SU2 {
                    let det = q.determinant();
                    q *= det.sqrt().inv();
                } else if q.determinant().re < 0.0 {
                    return Err(Error::NotInGroup { residual: self.membership_residual(m) });
                }
                Ok(q.map(|z| if self.complex { z } else { c(z.re) }))
            }
            _ => {
                let mut y = vectorize_with(m, self.complex);
                for _ in 0..50 {
                    let r = self.constraints(&y);
                    if r.norm() <= 1e-15 {
                        break;
                    }
                    let j = self.constraint_jacobian(&y);
                    let jjt = &j * j.transpose();
                    let w = jjt.lu().solve(&r).ok_or(Error::NotInGroup { residual: r.norm() })?;
                    y -= j.transpose() * w;
                }
                Ok(self.devectorize(y.as_slice()))
            }
        }
    }

    pub fn vectorize(&self, m: &CMat) -> DVector<f64> {
        vectorize_with(m, self.complex)
    }

    pub fn devectorize(&self, y: &[f64]) -> CMat {
        let n = self.rep_dim;
        if self.complex {
            DMatrix::from_fn(n, n, |r, col| Complex::new(y[2 * (r * n + col)], y[2 * (r * n + col) + 1]))
        } else {
            DMatrix::from_fn(n, n, |r, col| c(y[r * n + col]))
        }
    }

    /// Defining equations, exactly `vec_len - dim` independent ones near the group.
    pub fn constraints(&self, y: &DVector<f64>) -> DVector<f64> {
        match self.kind {
            GroupKind::SO3 => {
                let mut out = DVector::zeros(6);
                let mut idx = 0;
                for a in 0..3 {
                    for b in a..3 {
                        let dot: f64 = (0..3).map(|r| y[r * 3 + a] * y[r * 3 + b]).sum();
                        out[idx] = dot - if a == b { 1.0 } else { 0.0 };
                        idx += 1;
                    }
                }
                out
            }
            GroupKind::SU2 => {
                let (ar, ai, br, bi, cr, ci, dr, di) = (y[0], y[1], y[2], y[3], y[4], y[5], y[6], y[7]);
                DVector::from_vec(vec![
                    ar * ar + ai * ai + cr * cr + ci * ci - 1.0,
                    br * br + bi * bi + dr * dr + di * di - 1.0,
                    ar * br + ai * bi + cr * dr + ci * di,
                    ar * bi - ai * br + cr * di - ci * dr,
                    ar * di + ai * dr - br * ci - bi * cr,
                ])
            }
            GroupKind::SL2R => DVector::from_vec(vec![y[0] * y[3] - y[1] * y[2] - 1.0]),
            GroupKind::Heis3 | GroupKind::Translations(_) => {
                let pat = self.pattern();
                DVector::from_iterator(pat.len(), pat.iter().map(|&(i, v)| y[i] - v))
            }
        }
    }

    pub fn constraint_jacobian(&self, y: &DVector<f64>) -> DMatrix<f64> {
        let d = self.vec_len();
        match self.kind {
            GroupKind::SO3 => {
                let mut j = DMatrix::zeros(6, 9);
                let mut idx = 0;
                for a in 0..3 {
                    for b in a..3 {
                        for r in 0..3 {
                            j[(idx, r * 3 + a)] += y[r * 3 + b];
                            j[(idx, r * 3 + b)] += y[r * 3 + a];
                        }
                        idx += 1;
                    }
                }
                j
            }
            GroupKind::SU2 => {
                let (ar, ai, br, bi, cr, ci, dr, di) = (y[0], y[1], y[2], y[3], y[4], y[5], y[6], y[7]);
                #[rustfmt::skip]
                let rows = [
                    2.0 * ar, 2.0 * ai, 0.0, 0.0, 2.0 * cr, 2.0 * ci, 0.0, 0.0,
                    0.0, 0.0, 2.0 * br, 2.0 * bi, 0.0, 0.0, 2.0 * dr, 2.0 * di,
                    br, bi, ar, ai, dr, di, cr, ci,
                    bi, -br, -ai, ar, di, -dr, -ci, cr,
                    di, dr, -ci, -cr, -bi, -br, ai, ar,
                ];
                DMatrix::from_row_slice(5, 8, &rows)
            }
            GroupKind::SL2R => DMatrix::from_row_slice(1, 4, &[y[3], -y[2], -y[1], y[0]]),
            GroupKind::Heis3 | GroupKind::Translations(_) => {
                let pat = self.pattern();
                let mut j = DMatrix::zeros(pat.len(), d);
                for (row, &(i, _)) in pat.iter().enumerate() {
                    j[(row, i)] = 1.0;
                }
                j
            }
        }
    }

    /// Fixed entries `(index, value)` of the unipotent/translation groups.
    fn pattern(&self) -> Vec<(usize, f64)> {
        let n = self.rep_dim;
        let mut out = Vec::new();
        for r in 0..n {
            for col in 0..n {
                let free = match self.kind {
                    GroupKind::Heis3 => col > r,
                    GroupKind::Translations(k) => col == k && r < k,
                    _ => unreachable!(),
                };
                if !free {
                    out.push((r * n + col, if r == col { 1.0 } else { 0.0 }));
                }
            }
        }
        out
    }

    pub fn algebra_matrix(&self, xi: &AlgVector) -> CMat {
        let mut m = CMat::zeros(self.rep_dim, self.rep_dim);
        for (k, e) in self.basis.iter().enumerate() {
            if xi[k] != 0.0 {
                m += e * c(xi[k]);
            }
        }
        m
    }

    /// Coordinates of a represented algebra element, by least squares.
    pub fn expand(&self, x: &CMat) -> Result<AlgVector> {
        let y = self.vectorize(x);
        let coords = &self.expand_pinv * &y;
        let residual = (&self.basis_vec * &coords - &y).norm();
        if residual > 1e-10 * (1.0 + y.norm()) {
            return Err(Error::Expansion(residual));
        }
        Ok(coords)
    }

    /// Least-squares coordinates and the residual off the algebra.
    pub fn expand_lsq(&self, x: &CMat) -> (AlgVector, f64) {
        let y = self.vectorize(x);
        let coords = &self.expand_pinv * &y;
        let residual = (&self.basis_vec * &coords - &y).norm();
        (coords, residual)
    }

    /// Matrix of `Ad_g` on algebra coordinates.
    pub fn adjoint_matrix(&self, g: &GroupElement) -> Result<DMatrix<f64>> {
        let ginv = g.matrix.clone().try_inverse().ok_or(Error::NotInGroup { residual: f64::INFINITY })?;
        self.conjugation_matrix(&g.matrix, &ginv)
    }

    pub(crate) fn conjugation_matrix(&self, g: &CMat, ginv: &CMat) -> Result<DMatrix<f64>> {
        let mut y = DMatrix::zeros(self.vec_len(), self.dim());
        for (j, e) in self.basis.iter().enumerate() {
            y.set_column(j, &self.vectorize(&(g * e * ginv)));
        }
        let out = &self.expand_pinv * &y;
        let off = &self.basis_vec * &out - &y;
        for j in 0..y.ncols() {
            let residual = off.column(j).norm();
            if residual > 1e-10 * (1.0 + y.column(j).norm()) {
                return Err(Error::Expansion(residual));
            }
        }
        Ok(out)
    }

    pub fn adjoint(&self, g: &GroupElement, xi: &AlgVector) -> Result<AlgVector> {
        let ginv = g.matrix.clone().try_inverse().ok_or(Error::NotInGroup { residual: f64::INFINITY })?;
        self.expand(&(&g.matrix * self.algebra_matrix(xi) * ginv))
    }

    /// `Ad*_g alpha`, defined by `<Ad*_g alpha, eta> = <alpha, Ad_{g^-1} eta>`.
    pub fn coadjoint(&self, g: &GroupElement, alpha: &CoVector) -> Result<CoVector> {
        Ok(self.coadjoint_matrix(g)? * alpha)
    }

    pub fn coadjoint_matrix(&self, g: &GroupElement) -> Result<DMatrix<f64>> {
        let ginv = g.matrix.clone().try_inverse().ok_or(Error::NotInGroup { residual: f64::INFINITY })?;
        Ok(self.conjugation_matrix(&ginv, &g.matrix)?.transpose())
    }

    /// Scaling-and-squaring Taylor exponential of `t xi`. Verification oracle only.
    pub fn matrix_exp_oracle(&self, xi: &AlgVector, t: f64) -> GroupElement {
        purity::record_oracle_call();
        let x = self.algebra_matrix(xi) * c(t);
        let norm = x.norm();
        let mut s = 0i32;
        while norm / 2f64.powi(s) > 0.5 {
            s += 1;
        }
        let y = x * c(2f64.powi(-s));
        let n = self.rep_dim;
        let mut sum = CMat::identity(n, n);
        let mut term = CMat::identity(n, n);
        for k in 1..=18 {
            term = &term * &y * c(1.0 / k as f64);
            sum += &term;
        }
        for _ in 0..s {
            sum = &sum * &sum;
        }
        GroupElement { matrix: sum }
    }

    /// Random element `cay(xi) = (I - xi/2)^{-1} (I + xi/2)` with `|xi| <= scale`.
    /// The Cayley map lands in every catalogue group and avoids the exponential,
    /// so sampling is allowed inside the quadrature path.
    pub fn sample_element<R: Rng>(&self, rng: &mut R, scale: f64) -> GroupElement {
        let xi = linalg::unit_ball(rng, self.dim()) * scale;
        let half = self.algebra_matrix(&xi) * c(0.5);
        let id = CMat::identity(self.rep_dim, self.rep_dim);
        let m = (&id - &half).try_inverse().expect("Cayley denominator is invertible for |xi| <= 2") * (&id + half);
        self.element(m).expect("Cayley image lies in the group")
    }

    pub fn graph_chart(&self, g0: &GroupElement) -> Result<GraphChart> {
        GraphChart::new(self, g0)
    }
}

fn vectorize_with(m: &CMat, complex: bool) -> DVector<f64> {
    let n = m.nrows();
    if complex {
        let mut out = DVector::zeros(2 * n * n);
        for r in 0..n {
            for col in 0..n {
                out[2 * (r * n + col)] = m[(r, col)].re;
                out[2 * (r * n + col) + 1] = m[(r, col)].im;
            }
        }
        out
    } else {
        DVector::from_fn(n * n, |i, _| m[(i / n, i % n)].re)
    }
}

/// Local chart on the embedded group: a selection of `n` matrix entries,
/// inverted by Gauss-Newton on the defining equations.
#[derive(Clone, Debug)]
pub struct GraphChart {
    group: MatrixGroup,
    center: GroupElement,
    y0: DVector<f64>,
    selected: Vec<usize>,
    lift: DMatrix<f64>,
    validity_radius: f64,
}

const CHART_MAX_RADIUS: f64 = 2.0;

impl GraphChart {
    fn new(group: &MatrixGroup, g0: &GroupElement) -> Result<Self> {
        let n = group.dim();
        let tangent = Self::tangent_of(group, &g0.matrix);
        let selected = pivoted_rows(&tangent, n);
        let sub = DMatrix::from_fn(n, n, |i, j| tangent[(selected[i], j)]);
        if linalg::rank(&sub, linalg::RANK_TOL) < n {
            return Err(Error::RankDeficient { expected: n, got: linalg::rank(&sub, linalg::RANK_TOL) });
        }
        let lift = &tangent * sub.try_inverse().expect("full rank");
        let mut chart = GraphChart {
            group: group.clone(),
            center: g0.clone(),
            y0: group.vectorize(&g0.matrix),
            selected,
            lift,
            validity_radius: 0.0,
        };
        chart.validity_radius = chart.estimate_radius();
        Ok(chart)
    }

    /// Columns `vec(g E_i)`.
    fn tangent_of(group: &MatrixGroup, g: &CMat) -> DMatrix<f64> {
        let mut t = DMatrix::zeros(group.vec_len(), group.dim());
        for (j, e) in group.basis.iter().enumerate() {
            t.set_column(j, &group.vectorize(&(g * e)));
        }
        t
    }

    pub fn group(&self) -> &MatrixGroup {
        &self.group
    }

    pub fn center(&self) -> &GroupElement {
        &self.center
    }

    pub fn selected_entries(&self) -> &[usize] {
        &self.selected
    }

    pub fn validity_radius(&self) -> f64 {
        self.validity_radius
    }

    pub fn to_coords(&self, g: &GroupElement) -> DVector<f64> {
        let y = self.group.vectorize(&g.matrix);
        DVector::from_iterator(self.selected.len(), self.selected.iter().map(|&i| y[i] - self.y0[i]))
    }

    /// Chart differential at `g`: body velocity `v` maps to `C(g) v`.
    pub fn differential(&self, g: &GroupElement) -> DMatrix<f64> {
        let t = Self::tangent_of(&self.group, &g.matrix);
        DMatrix::from_fn(self.selected.len(), t.ncols(), |i, j| t[(self.selected[i], j)])
    }

    pub fn from_coords(&self, x: &DVector<f64>, hint: Option<&GroupElement>) -> Result<GroupElement> {
        let n = self.selected.len();
        if x.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: x.len() });
        }
        let target: Vec<f64> = self.selected.iter().enumerate().map(|(k, &i)| self.y0[i] + x[k]).collect();
        let mut y = match hint {
            Some(h) => self.group.vectorize(&h.matrix),
            None => &self.y0 + &self.lift * x,
        };
        let d = y.len();
        let p = d - n;
        let residual = |y: &DVector<f64>| {
            let cons = self.group.constraints(y);
            DVector::from_fn(d, |i, _| if i < p { cons[i] } else { y[self.selected[i - p]] - target[i - p] })
        };
        let mut r = residual(&y);
        let mut rn = r.norm();
        for _ in 0..40 {
            if rn <= 1e-15 {
                break;
            }
            let jc = self.group.constraint_jacobian(&y);
            let mut jac = DMatrix::zeros(d, d);
            jac.view_mut((0, 0), (p, d)).copy_from(&jc);
            for (k, &i) in self.selected.iter().enumerate() {
                jac[(p + k, i)] = 1.0;
            }
            let Some(delta) = jac.lu().solve(&r) else { break };
            let y_new = &y - delta;
            let r_new = residual(&y_new);
            let rn_new = r_new.norm();
            if !(rn_new.is_finite()) || (rn <= 1e-12 && rn_new >= 0.5 * rn) {
                if rn_new < rn {
                    y = y_new;
                    rn = rn_new;
                }
                break;
            }
            y = y_new;
            r = r_new;
            rn = rn_new;
        }
        if !(rn <= 1e-11) {
            return Err(Error::ChartInversion { residual: rn });
        }
        Ok(self.group.element_unchecked(self.group.devectorize(y.as_slice())))
    }

    fn probe(&self, radius: f64, dirs: &[DVector<f64>]) -> bool {
        dirs.iter().all(|d| {
            let x = d * radius;
            match self.from_coords(&x, None) {
                Ok(g) => {
                    (self.to_coords(&g) - &x).norm() <= 1e-10
                        && self.group.membership_residual(&g.matrix) <= 1e-10
                        && linalg::condition(&self.differential(&g)) < 1e8
                }
                Err(_) => false,
            }
        })
    }

    fn estimate_radius(&self) -> f64 {
        let mut rng = linalg::rng(0x9a7);
        let dirs: Vec<DVector<f64>> = (0..16).map(|_| linalg::unit_sphere(&mut rng, self.group.dim())).collect();
        if self.probe(CHART_MAX_RADIUS, &dirs) {
            return CHART_MAX_RADIUS;
        }
        let (mut lo, mut hi) = (0.0, CHART_MAX_RADIUS);
        for _ in 0..8 {
            let mid = 0.5 * (lo + hi);
            if self.probe(mid, &dirs) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }
}

/// Greedy column-pivoted Gram-Schmidt on the rows of `t`: picks `k` rows whose
/// span is best conditioned. Near-ties go to the lowest index.
fn pivoted_rows(t: &DMatrix<f64>, k: usize) -> Vec<usize> {
    let mut rows: Vec<DVector<f64>> = (0..t.nrows()).map(|i| t.row(i).transpose()).collect();
    let mut chosen = Vec::with_capacity(k);
    for _ in 0..k {
        let norms: Vec<f64> = rows.iter().map(|r| r.norm()).collect();
        let best_norm = norms
            .iter()
            .enumerate()
            .filter(|(i, _)| !chosen.contains(i))
            .fold(0.0f64, |m, (_, &v)| m.max(v));
        let pick = (0..rows.len())
            .find(|i| !chosen.contains(i) && norms[*i] >= best_norm * (1.0 - 1e-12))
            .expect("rows available");
        chosen.push(pick);
        let q = &rows[pick] / norms[pick];
        for r in rows.iter_mut() {
            let proj = r.dot(&q);
            *r -= &q * proj;
        }
    }
    chosen
}

/// Instrumentation guarding the quadrature pathway against calls to the
/// exponential oracle.
pub mod purity {
    use std::cell::Cell;
    use std::sync::atomic::{AtomicU64, Ordering};

    thread_local! {
        static DEPTH: Cell<u32> = const { Cell::new(0) };
        static CALLS: Cell<u64> = const { Cell::new(0) };
        static LOCAL_VIOLATIONS: Cell<u64> = const { Cell::new(0) };
    }
    static VIOLATIONS: AtomicU64 = AtomicU64::new(0);

    /// While alive, any oracle call on this thread counts as a violation.
    pub struct QuadratureScope(());

    impl QuadratureScope {
        pub fn enter() -> Self {
            DEPTH.with(|d| d.set(d.get() + 1));
            QuadratureScope(())
        }
    }

    impl Drop for QuadratureScope {
        fn drop(&mut self) {
            DEPTH.with(|d| d.set(d.get() - 1));
        }
    }

    pub(crate) fn record_oracle_call() {
        CALLS.with(|c| c.set(c.get() + 1));
        if DEPTH.with(|d| d.get()) > 0 {
            VIOLATIONS.fetch_add(1, Ordering::SeqCst);
            LOCAL_VIOLATIONS.with(|c| c.set(c.get() + 1));
        }
    }

    pub fn in_quadrature_scope() -> bool {
        DEPTH.with(|d| d.get()) > 0
    }

    /// Oracle calls made inside a quadrature scope, process-wide.
    pub fn violations() -> u64 {
        VIOLATIONS.load(Ordering::SeqCst)
    }

    /// Violations recorded on the current thread.
    pub fn violations_this_thread() -> u64 {
        LOCAL_VIOLATIONS.with(|c| c.get())
    }

    /// Oracle calls made on the current thread.
    pub fn oracle_calls_this_thread() -> u64 {
        CALLS.with(|c| c.get())
    }
}
