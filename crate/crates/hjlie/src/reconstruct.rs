//! Reconstruction of invariant dynamics from a quotient: horizontal submersions,
//! the two-step and usual (connection based) processes, and vertical fields.
//!
//! Points are handled in embedded coordinates: `(vec(g), alpha)` for `T*G` and
//! `(q, p)` for `T*R^3`. In both scenarios the action is linear in these
//! coordinates, so `(rho_g)_* w = rho(g, w)`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Vector3};

use crate::error::{Error, Result};
use crate::expquad::{exp_general, exp_semisimple};
use crate::hjsolver::{interior_rows, QuadratureConfig};
use crate::liealg::{bsharp_form, AlgVector, CoVector};
use crate::liegroup::{GraphChart, GroupElement, MatrixGroup};
use crate::linalg;
use crate::ode::{dopri45, rk4_step};
use crate::trajectory::{stencil_derivative, TrajectorySample};

pub type EmbeddedField = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
/// Left-invariant field on `T*G` in body coordinates, as a function of `alpha`.
pub type BodyField = Arc<dyn Fn(&CoVector) -> (AlgVector, CoVector) + Send + Sync>;
pub type Connection = Arc<dyn Fn(&DVector<f64>, &DVector<f64>) -> AlgVector + Send + Sync>;

/// A `G`-invariant vector field on a phase space with a quotient map and section.
pub trait InvariantSystem: Send + Sync {
    fn name(&self) -> String;
    fn group(&self) -> &MatrixGroup;
    /// Length of the embedded coordinate vector.
    fn dim(&self) -> usize;
    fn quotient_dim(&self) -> usize;
    fn state_labels(&self) -> Vec<String>;
    /// `rho(g, m)`, linear in `m`.
    fn act(&self, g: &GroupElement, m: &DVector<f64>) -> DVector<f64>;
    fn field(&self, m: &DVector<f64>) -> DVector<f64>;
    /// `xi_M(m) = d/ds rho(exp(s xi), m)` at `s = 0`.
    fn fundamental(&self, xi: &AlgVector, m: &DVector<f64>) -> DVector<f64>;
    fn quotient(&self, m: &DVector<f64>) -> DVector<f64>;
    fn quotient_jacobian(&self, m: &DVector<f64>) -> DMatrix<f64>;
    fn section(&self, q: &DVector<f64>) -> Result<DVector<f64>>;
    /// Columns spanning the tangent space at `m`.
    fn tangent_basis(&self, m: &DVector<f64>) -> DMatrix<f64>;
    /// Nearest point of the phase space (identity for open subsets).
    fn retract(&self, m: &DVector<f64>) -> DVector<f64> {
        m.clone()
    }
    /// Closed-form horizontal submersion when the scenario has one.
    fn exact_theta(&self, _m: &DVector<f64>) -> Option<Result<GroupElement>> {
        None
    }
    fn momentum(&self, _m: &DVector<f64>) -> Option<CoVector> {
        None
    }
    fn is_free(&self) -> bool;
    /// Seeded points `rho(g, s(lambda))` with `lambda` near `lambda0`.
    fn sample_near(&self, lambda0: &DVector<f64>, count: usize, seed: u64, spread: f64) -> Result<Vec<DVector<f64>>> {
        let mut rng = linalg::rng(seed);
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let g = self.group().sample_element(&mut rng, spread);
            let lam = lambda0 + linalg::unit_ball(&mut rng, lambda0.len()) * (spread * 0.1 * (1.0 + lambda0.norm()));
            out.push(self.act(&g, &self.section(&lam)?));
        }
        Ok(out)
    }
}

/// Isotropy dimension of the action at `m`: kernel of `xi -> xi_M(m)`.
pub fn isotropy_dim(sys: &dyn InvariantSystem, m: &DVector<f64>) -> usize {
    let n = sys.group().dim();
    let mut map = DMatrix::zeros(sys.dim(), n);
    for i in 0..n {
        map.set_column(i, &sys.fundamental(&sys.group().algebra().basis_vector(i), m));
    }
    n - linalg::rank_scaled(&map, linalg::RANK_TOL, m.norm())
}

/// Sampled residuals of the scenario axioms.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SystemCheck {
    pub identity_action: f64,
    pub composition: f64,
    pub quotient_invariance: f64,
    pub section_identity: f64,
    pub field_invariance: f64,
    pub momentum_map: f64,
}

pub fn check_system(sys: &dyn InvariantSystem, lambda0: &DVector<f64>, samples: usize, seed: u64) -> Result<SystemCheck> {
    let pts = sys.sample_near(lambda0, samples, seed, 0.8)?;
    let mut rng = linalg::rng(seed ^ 0x5eed);
    let e = sys.group().identity();
    let mut out = SystemCheck::default();
    for m in &pts {
        let g = sys.group().sample_element(&mut rng, 1.0);
        let h = sys.group().sample_element(&mut rng, 1.0);
        out.identity_action = out.identity_action.max((sys.act(&e, m) - m).norm());
        let gh = sys.group().compose(&g, &h)?;
        out.composition = out.composition.max((sys.act(&g, &sys.act(&h, m)) - sys.act(&gh, m)).norm());
        let gm = sys.act(&g, m);
        out.quotient_invariance = out.quotient_invariance.max((sys.quotient(&gm) - sys.quotient(m)).norm());
        let lam = sys.quotient(m);
        out.section_identity = out.section_identity.max((sys.quotient(&sys.section(&lam)?) - &lam).norm());
        out.field_invariance = out.field_invariance.max((sys.field(&gm) - sys.act(&g, &sys.field(m))).norm());
        if let Some(k) = sys.momentum(m) {
            // <K_*(w), xi> = omega(xi_M, w) for the flat form dq ^ dp.
            let w = linalg::normal_vector(&mut rng, sys.dim());
            let hs = 1e-6;
            let dk = (sys.momentum(&(m + &w * hs)).unwrap() - sys.momentum(&(m - &w * hs)).unwrap()) / (2.0 * hs);
            for i in 0..sys.group().dim() {
                let xi = sys.group().algebra().basis_vector(i);
                let xm = sys.fundamental(&xi, m);
                let half = sys.dim() / 2;
                let om = xm.rows(0, half).dot(&w.rows(half, half)) - xm.rows(half, half).dot(&w.rows(0, half));
                out.momentum_map = out.momentum_map.max((dk[i] - om).abs() / (1.0 + k.norm()));
            }
        }
    }
    Ok(out)
}

fn hat(v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(3, 3, &[0.0, -v[2], v[1], v[2], 0.0, -v[0], -v[1], v[0], 0.0])
}

/// `T*G` with `rho(h, (g, alpha)) = (h g, alpha)`, `pi(g, alpha) = alpha`,
/// `s(alpha) = (e, alpha)` and `Theta = pi_G`.
#[derive(Clone)]
pub struct TStarSystem {
    group: MatrixGroup,
    body: BodyField,
    label: String,
}

impl TStarSystem {
    pub fn new(group: MatrixGroup, label: &str, body: BodyField) -> Self {
        TStarSystem { group, body, label: label.into() }
    }

    fn split(&self, m: &DVector<f64>) -> (DMatrix<nalgebra::Complex<f64>>, CoVector) {
        let k = self.group.vec_len();
        (self.group.devectorize(&m.as_slice()[..k]), m.rows(k, self.group.dim()).into_owned())
    }

    fn join(&self, g: &DMatrix<nalgebra::Complex<f64>>, alpha: &DVector<f64>) -> DVector<f64> {
        let mut v = self.group.vectorize(g).as_slice().to_vec();
        v.extend(alpha.iter());
        DVector::from_vec(v)
    }

    pub fn body_field(&self, alpha: &CoVector) -> (AlgVector, CoVector) {
        (self.body)(alpha)
    }

    /// Euler-type left-invariant field `(v, beta) = (I alpha, ad*_{I alpha} alpha)`.
    pub fn rigid_body(group: MatrixGroup, inertia: &[f64]) -> Self {
        let alg = group.algebra().clone();
        let i = DVector::from_row_slice(inertia);
        Self::new(
            group,
            "rigid",
            Arc::new(move |a: &CoVector| {
                let v = i.component_mul(a);
                let b = alg.ad_star(&v, a).unwrap_or_else(|_| DVector::from_element(a.len(), f64::NAN));
                (v, b)
            }),
        )
    }

    /// Horizontal field `(0, ad*_{I alpha} alpha)`: only the momentum moves.
    pub fn horizontal_euler(group: MatrixGroup, inertia: &[f64]) -> Self {
        let alg = group.algebra().clone();
        let i = DVector::from_row_slice(inertia);
        Self::new(
            group,
            "horizontal",
            Arc::new(move |a: &CoVector| {
                let v = i.component_mul(a);
                let b = alg.ad_star(&v, a).unwrap_or_else(|_| DVector::from_element(a.len(), f64::NAN));
                (DVector::zeros(a.len()), b)
            }),
        )
    }

    /// Vertical field `(B^# alpha, 0)`.
    pub fn bsharp(group: MatrixGroup) -> Result<Self> {
        let phi = bsharp_form(group.algebra())?;
        Ok(Self::new(group, "casimir:bsharp", Arc::new(move |a: &CoVector| (phi.eval(a), DVector::zeros(a.len())))))
    }

    pub fn zero(group: MatrixGroup) -> Self {
        Self::new(group, "zero", Arc::new(|a: &CoVector| (DVector::zeros(a.len()), DVector::zeros(a.len()))))
    }

    pub fn point(&self, g: &GroupElement, alpha: &CoVector) -> DVector<f64> {
        self.join(g.matrix(), alpha)
    }
}

impl InvariantSystem for TStarSystem {
    fn name(&self) -> String {
        format!("tstar:{}:{}", self.group.name(), self.label)
    }

    fn group(&self) -> &MatrixGroup {
        &self.group
    }

    fn dim(&self) -> usize {
        self.group.vec_len() + self.group.dim()
    }

    fn quotient_dim(&self) -> usize {
        self.group.dim()
    }

    fn state_labels(&self) -> Vec<String> {
        let d = self.group.rep_dim();
        let mut labels = Vec::new();
        for r in 0..d {
            for c in 0..d {
                if self.group.is_complex() {
                    labels.push(format!("g{r}{c}_re"));
                    labels.push(format!("g{r}{c}_im"));
                } else {
                    labels.push(format!("g{r}{c}"));
                }
            }
        }
        labels.extend((0..self.group.dim()).map(|i| format!("alpha{}", i + 1)));
        labels
    }

    fn act(&self, g: &GroupElement, m: &DVector<f64>) -> DVector<f64> {
        let (x, a) = self.split(m);
        self.join(&(g.matrix() * x), &a)
    }

    fn field(&self, m: &DVector<f64>) -> DVector<f64> {
        let (x, a) = self.split(m);
        let (v, b) = (self.body)(&a);
        self.join(&(x * self.group.algebra_matrix(&v)), &b)
    }

    fn fundamental(&self, xi: &AlgVector, m: &DVector<f64>) -> DVector<f64> {
        let (x, _) = self.split(m);
        self.join(&(self.group.algebra_matrix(xi) * x), &DVector::zeros(self.group.dim()))
    }

    fn quotient(&self, m: &DVector<f64>) -> DVector<f64> {
        self.split(m).1
    }

    fn quotient_jacobian(&self, _m: &DVector<f64>) -> DMatrix<f64> {
        let k = self.group.vec_len();
        let n = self.group.dim();
        let mut j = DMatrix::zeros(n, k + n);
        j.view_mut((0, k), (n, n)).fill_with_identity();
        j
    }

    fn section(&self, q: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.join(self.group.identity().matrix(), q))
    }

    fn tangent_basis(&self, m: &DVector<f64>) -> DMatrix<f64> {
        let n = self.group.dim();
        let d = self.dim();
        let (x, _) = self.split(m);
        let mut t = DMatrix::zeros(d, 2 * n);
        for i in 0..n {
            let e = self.group.algebra().basis_vector(i);
            t.set_column(i, &self.join(&(&x * self.group.algebra_matrix(&e)), &DVector::zeros(n)));
            t[(d - n + i, n + i)] = 1.0;
        }
        t
    }

    fn retract(&self, m: &DVector<f64>) -> DVector<f64> {
        let (x, a) = self.split(m);
        match self.group.project(&x) {
            Ok(p) => self.join(&p, &a),
            Err(_) => m.clone(),
        }
    }

    fn exact_theta(&self, m: &DVector<f64>) -> Option<Result<GroupElement>> {
        Some(self.group.element(self.split(m).0))
    }

    fn is_free(&self) -> bool {
        true
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SectionKind {
    /// `q = (sqrt a, 0, 0)`, `p = (c / sqrt a, sqrt(b - c^2 / a), 0)`.
    QAligned,
    /// `p = (sqrt b, 0, 0)`, `q = (c / sqrt b, sqrt(a - c^2 / b), 0)`.
    PAligned,
}

const SECTION_EPS: f64 = 1e-9;

/// `SO(3)` acting diagonally on `T*R^3 = R^3 x R^3` with `K = q x p` and
/// quotient `(|q|^2, |p|^2, q . p)` on non-collinear pairs.
#[derive(Clone)]
pub struct So3R3System {
    group: MatrixGroup,
    section: SectionKind,
    field: EmbeddedField,
    label: String,
}

impl So3R3System {
    pub fn new(section: SectionKind, label: &str, field: EmbeddedField) -> Result<Self> {
        Ok(So3R3System { group: crate::liegroup::make_group("so3")?, section, field, label: label.into() })
    }

    /// Hamiltonian field of `|p|^2 / 2`: `q' = p`, `p' = 0`.
    pub fn free_particle(section: SectionKind) -> Result<Self> {
        Self::new(
            section,
            "free",
            Arc::new(|m: &DVector<f64>| DVector::from_vec(vec![m[3], m[4], m[5], 0.0, 0.0, 0.0])),
        )
    }

    /// Hamiltonian field of `|q x p|^2 / 2`: rotation of `(q, p)` about `L = q x p` at rate `|L|`.
    pub fn rotation(section: SectionKind) -> Result<Self> {
        Self::new(
            section,
            "rotation",
            Arc::new(|m: &DVector<f64>| {
                let q = Vector3::new(m[0], m[1], m[2]);
                let p = Vector3::new(m[3], m[4], m[5]);
                let l = q.cross(&p);
                let (dq, dp) = (l.cross(&q), l.cross(&p));
                DVector::from_vec(vec![dq[0], dq[1], dq[2], dp[0], dp[1], dp[2]])
            }),
        )
    }

    pub fn zero(section: SectionKind) -> Result<Self> {
        Self::new(section, "zero", Arc::new(|_: &DVector<f64>| DVector::zeros(6)))
    }

    pub fn with_field(&self, label: &str, field: EmbeddedField) -> Self {
        So3R3System { group: self.group.clone(), section: self.section, field, label: label.into() }
    }

    pub fn section_kind(&self) -> SectionKind {
        self.section
    }
}

impl InvariantSystem for So3R3System {
    fn name(&self) -> String {
        format!("so3-r3:{}", self.label)
    }

    fn group(&self) -> &MatrixGroup {
        &self.group
    }

    fn dim(&self) -> usize {
        6
    }

    fn quotient_dim(&self) -> usize {
        3
    }

    fn state_labels(&self) -> Vec<String> {
        ["q1", "q2", "q3", "p1", "p2", "p3"].iter().map(|s| s.to_string()).collect()
    }

    fn act(&self, g: &GroupElement, m: &DVector<f64>) -> DVector<f64> {
        let r = g.matrix().map(|z| z.re);
        let q = &r * m.rows(0, 3);
        let p = &r * m.rows(3, 3);
        DVector::from_iterator(6, q.iter().chain(p.iter()).copied())
    }

    fn field(&self, m: &DVector<f64>) -> DVector<f64> {
        (self.field)(m)
    }

    fn fundamental(&self, xi: &AlgVector, m: &DVector<f64>) -> DVector<f64> {
        let x = hat(xi.as_slice());
        let q = &x * m.rows(0, 3);
        let p = &x * m.rows(3, 3);
        DVector::from_iterator(6, q.iter().chain(p.iter()).copied())
    }

    fn quotient(&self, m: &DVector<f64>) -> DVector<f64> {
        let q = m.rows(0, 3);
        let p = m.rows(3, 3);
        DVector::from_vec(vec![q.norm_squared(), p.norm_squared(), q.dot(&p)])
    }

    fn quotient_jacobian(&self, m: &DVector<f64>) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(3, 6);
        for i in 0..3 {
            j[(0, i)] = 2.0 * m[i];
            j[(1, 3 + i)] = 2.0 * m[3 + i];
            j[(2, i)] = m[3 + i];
            j[(2, 3 + i)] = m[i];
        }
        j
    }

    fn section(&self, l: &DVector<f64>) -> Result<DVector<f64>> {
        let (a, b, c) = (l[0], l[1], l[2]);
        let gram = a * b - c * c;
        let lead = match self.section {
            SectionKind::QAligned => a,
            SectionKind::PAligned => b,
        };
        if !(lead > SECTION_EPS) || !(gram > SECTION_EPS) {
            return Err(Error::SectionDomain(lead.min(gram)));
        }
        Ok(match self.section {
            SectionKind::QAligned => {
                let s = a.sqrt();
                DVector::from_vec(vec![s, 0.0, 0.0, c / s, (gram / a).sqrt(), 0.0])
            }
            SectionKind::PAligned => {
                let s = b.sqrt();
                DVector::from_vec(vec![c / s, (gram / b).sqrt(), 0.0, s, 0.0, 0.0])
            }
        })
    }

    fn tangent_basis(&self, _m: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::identity(6, 6)
    }

    fn momentum(&self, m: &DVector<f64>) -> Option<CoVector> {
        let q = Vector3::new(m[0], m[1], m[2]);
        let p = Vector3::new(m[3], m[4], m[5]);
        let l = q.cross(&p);
        Some(DVector::from_vec(vec![l[0], l[1], l[2]]))
    }

    fn is_free(&self) -> bool {
        false
    }
}

/// Scenario lookup: `tstar:<group>` or `so3-r3`, with a field key.
pub fn make_scenario(key: &str, field: &str) -> Result<Arc<dyn InvariantSystem>> {
    if let Some(g) = key.strip_prefix("tstar:") {
        let group = crate::liegroup::make_group(g)?;
        let n = group.dim();
        let inertia: Vec<f64> = (0..n).map(|i| 1.0 + i as f64).collect();
        return Ok(match field {
            "horizontal" => Arc::new(TStarSystem::horizontal_euler(group, &inertia)),
            "rigid" => Arc::new(TStarSystem::rigid_body(group, &inertia)),
            "casimir:bsharp" => Arc::new(TStarSystem::bsharp(group)?),
            "zero" => Arc::new(TStarSystem::zero(group)),
            other => return Err(Error::Invalid(format!("unknown field '{other}' for {key}"))),
        });
    }
    if key == "so3-r3" {
        return Ok(match field {
            "free" => Arc::new(So3R3System::free_particle(SectionKind::PAligned)?),
            "rotation" => Arc::new(So3R3System::rotation(SectionKind::PAligned)?),
            "zero" => Arc::new(So3R3System::zero(SectionKind::PAligned)?),
            other => return Err(Error::Invalid(format!("unknown field '{other}' for {key}"))),
        });
    }
    Err(Error::UnknownCatalogue(key.to_string()))
}

/// `Theta` with `rho(Theta(m), s(pi(m))) = m` and `Theta(m0) = e`.
#[derive(Clone)]
pub struct HorizontalSubmersion {
    sys: Arc<dyn InvariantSystem>,
    chart: GraphChart,
    pub m0: DVector<f64>,
}

impl HorizontalSubmersion {
    pub fn eval(&self, m: &DVector<f64>) -> Result<GroupElement> {
        self.eval_near(m, None)
    }

    /// Gauss-Newton on `rho(g(x), s(pi(m))) - m` in the graph chart at `e`,
    /// with least-norm steps.
    pub fn eval_near(&self, m: &DVector<f64>, hint: Option<&GroupElement>) -> Result<GroupElement> {
        if let Some(exact) = self.sys.exact_theta(m) {
            return exact;
        }
        let sm = self.sys.section(&self.sys.quotient(m))?;
        let mut x = hint.map(|g| self.chart.to_coords(g)).unwrap_or_else(|| DVector::zeros(self.sys.group().dim()));
        let residual = |x: &DVector<f64>| -> Result<(GroupElement, DVector<f64>)> {
            let g = self.chart.from_coords(x, None)?;
            let r = self.sys.act(&g, &sm) - m;
            Ok((g, r))
        };
        let (mut g, mut r) = residual(&x)?;
        let tol = 1e-13 * (1.0 + m.norm());
        for _ in 0..40 {
            if r.norm() <= tol {
                break;
            }
            let n = x.len();
            let mut jac = DMatrix::zeros(m.len(), n);
            for i in 0..n {
                let h = 1e-7;
                let mut xp = x.clone();
                xp[i] += h;
                let mut xm = x.clone();
                xm[i] -= h;
                jac.set_column(i, &((residual(&xp)?.1 - residual(&xm)?.1) / (2.0 * h)));
            }
            let xn = &x - linalg::lstsq(&jac, &r);
            let (gn, rn) = residual(&xn)?;
            let stalled = rn.norm() > 0.5 * r.norm();
            if rn.norm() < r.norm() {
                x = xn;
                g = gn;
                r = rn;
            }
            if stalled {
                break;
            }
        }
        if !(r.norm() <= 1e-10 * (1.0 + m.norm())) {
            return Err(Error::OutsideChart { residual: r.norm() });
        }
        Ok(g)
    }

    /// Right-trivialized differential `(d Theta . w) Theta(m)^{-1}` by central differences.
    pub fn derivative(&self, m: &DVector<f64>, w: &DVector<f64>) -> Result<AlgVector> {
        let h = 1e-6;
        let g = self.eval(m)?;
        let gp = self.eval_near(&self.sys.retract(&(m + w * h)), Some(&g))?;
        let gm = self.eval_near(&self.sys.retract(&(m - w * h)), Some(&g))?;
        let ginv = self.sys.group().inverse(&g)?;
        let dg = (gp.matrix() - gm.matrix()) * nalgebra::Complex::new(1.0 / (2.0 * h), 0.0);
        // Finite differences leave O(h^2 + eps/h) off the algebra.
        let (xi, off) = self.sys.group().expand_lsq(&(dg * ginv.matrix()));
        if off > 1e-6 * (1.0 + xi.norm() + w.norm()) {
            return Err(Error::Expansion(off));
        }
        Ok(xi)
    }

    /// The connection `A(m, w) = (R_{Theta(m)})^{-1}_* Theta_* w`.
    pub fn connection(&self) -> Connection {
        let me = self.clone();
        Arc::new(move |m: &DVector<f64>, w: &DVector<f64>| {
            me.derivative(m, w).unwrap_or_else(|_| DVector::from_element(me.sys.group().dim(), f64::NAN))
        })
    }
}

/// Builds `Theta` around `m0` and checks its defining identities on 64 samples.
pub fn build_theta(sys: Arc<dyn InvariantSystem>, m0: &DVector<f64>) -> Result<HorizontalSubmersion> {
    let lam0 = sys.quotient(m0);
    let back = sys.section(&lam0)?;
    let miss = (&back - m0).norm();
    if miss > 1e-10 * (1.0 + m0.norm()) {
        return Err(Error::Hypothesis { name: "s(pi(m0)) = m0".into(), value: miss, tol: 1e-10 });
    }
    let chart = sys.group().graph_chart(&sys.group().identity())?;
    let theta = HorizontalSubmersion { sys: sys.clone(), chart, m0: m0.clone() };
    let e = sys.group().identity();
    let pts = sys.sample_near(&lam0, 64, 0x7e7a, 0.5)?;
    for m in &pts {
        let g = theta.eval(m)?;
        let rebuilt = sys.act(&g, &sys.section(&sys.quotient(m))?);
        let res = (rebuilt - m).norm();
        if res > 1e-8 * (1.0 + m.norm()) {
            return Err(Error::NotInvariant { name: "rho(Theta(m), s(pi(m))) = m".into(), residual: res });
        }
        let on_section = sys.section(&sys.quotient(m))?;
        let te = (theta.eval(&on_section)?.matrix() - e.matrix()).norm();
        if te > 1e-8 {
            return Err(Error::NotInvariant { name: "Theta(s(lambda)) = e".into(), residual: te });
        }
    }
    // Ker pi_* + Ker Theta_* spans the tangent space at m0.
    let t = sys.tangent_basis(m0);
    let dq = sys.quotient_jacobian(m0) * &t;
    let n = sys.group().dim();
    let mut stacked = DMatrix::zeros(dq.nrows() + n, t.ncols());
    stacked.view_mut((0, 0), dq.shape()).copy_from(&dq);
    for j in 0..t.ncols() {
        let d = theta.derivative(m0, &t.column(j).into_owned())?;
        stacked.view_mut((dq.nrows(), j), (n, 1)).copy_from(&d);
    }
    let r = linalg::rank(&stacked, linalg::RANK_TOL);
    if r < t.ncols() {
        return Err(Error::NotTransversal(linalg::condition(&stacked)));
    }
    Ok(theta)
}

/// Quotient field `Y = pi_* X s`.
pub fn quotient_field(sys: &dyn InvariantSystem, lambda: &DVector<f64>) -> Result<DVector<f64>> {
    let s = sys.section(lambda)?;
    Ok(sys.quotient_jacobian(&s) * sys.field(&s))
}

/// RK45 on the quotient field; stops early if the curve leaves the section domain.
pub fn quotient_curve(sys: &dyn InvariantSystem, lambda0: &DVector<f64>, t_grid: &[f64]) -> Result<Vec<DVector<f64>>> {
    let f = |_t: f64, l: &DVector<f64>| quotient_field(sys, l).unwrap_or_else(|_| DVector::from_element(l.len(), f64::NAN));
    dopri45(f, lambda0, t_grid, 1e-11, 1e-13)
}

fn flow_residual(sys: &dyn InvariantSystem, times: &[f64], states: &[DVector<f64>]) -> Vec<f64> {
    if times.len() < 2 {
        return vec![0.0; times.len()];
    }
    stencil_derivative(times, states).into_iter().zip(states).map(|((d, _), m)| (d - sys.field(m)).norm()).collect()
}

fn sample_from(sys: &dyn InvariantSystem, times: &[f64], states: &[DVector<f64>]) -> TrajectorySample {
    let mut s = TrajectorySample::new(sys.state_labels());
    for (t, m) in times.iter().zip(states) {
        s.push(*t, m.as_slice().to_vec());
    }
    s.set_diagnostic("flow_residual", &flow_residual(sys, times, states));
    for k in 0..sys.quotient_dim() {
        let col: Vec<f64> = states.iter().map(|m| sys.quotient(m)[k]).collect();
        s.set_diagnostic(&format!("pihat{}", k + 1), &col);
    }
    s
}

/// Max flow residual over the rows that use the centered stencil.
pub fn interior_flow_residual(sample: &TrajectorySample) -> f64 {
    let v = sample.diagnostic("flow_residual").unwrap_or_default();
    interior_rows(v.len()).map(|i| v[i]).fold(0.0, f64::max)
}

fn check_grid(t_grid: &[f64]) -> Result<()> {
    if t_grid.len() < 2 || t_grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Invalid("time grid must be strictly increasing with at least two points".into()));
    }
    Ok(())
}

/// `Gamma(t) = rho(Theta(p0), s(gamma(t)))` for a `Theta`-horizontal field.
pub fn two_step_reconstruct(
    sys: Arc<dyn InvariantSystem>,
    theta: &HorizontalSubmersion,
    p0: &DVector<f64>,
    quotient: Option<&[DVector<f64>]>,
    t_grid: &[f64],
) -> Result<TrajectorySample> {
    check_grid(t_grid)?;
    let lam0 = sys.quotient(p0);
    let mut worst: f64 = 0.0;
    for m in std::iter::once(p0.clone()).chain(sys.sample_near(&lam0, 16, 0x4012, 0.3)?) {
        worst = worst.max(theta.derivative(&m, &sys.field(&m))?.norm());
    }
    if worst > 1e-6 {
        return Err(Error::Hypothesis { name: "Theta_* X = 0".into(), value: worst, tol: 1e-6 });
    }
    let g0 = theta.eval(p0)?;
    let gammas: Vec<DVector<f64>> = match quotient {
        Some(q) => q.to_vec(),
        None => quotient_curve(sys.as_ref(), &lam0, t_grid)?,
    };
    let mut states = Vec::new();
    let mut failure = None;
    for (t, gam) in t_grid.iter().zip(&gammas) {
        match sys.section(gam) {
            Ok(s) => states.push(sys.act(&g0, &s)),
            Err(e) => {
                failure = Some(format!("quotient curve left the section domain at t = {t}: {e}"));
                break;
            }
        }
    }
    let times = &t_grid[..states.len()];
    let mut sample = sample_from(sys.as_ref(), times, &states);
    let drift: Vec<f64> = states
        .iter()
        .map(|m| theta.eval_near(m, Some(&g0)).map(|g| (g.matrix() - g0.matrix()).norm()).unwrap_or(f64::NAN))
        .collect();
    sample.set_diagnostic("theta_drift", &drift);
    let qerr: Vec<f64> = states.iter().zip(&gammas).map(|(m, g)| (sys.quotient(m) - g).norm()).collect();
    sample.set_diagnostic("quotient_error", &qerr);
    sample.failure = failure;
    Ok(sample)
}

/// Four-step reconstruction: horizontal lift `d(t)` with `A(d') = 0`, group
/// equation `g' = g A(X(d))`, and `Gamma = rho(g, d)`.
pub fn usual_reconstruct(
    sys: Arc<dyn InvariantSystem>,
    connection: &Connection,
    p0: &DVector<f64>,
    quotient: Option<&[DVector<f64>]>,
    t_grid: &[f64],
) -> Result<TrajectorySample> {
    check_grid(t_grid)?;
    if !sys.is_free() {
        return Err(Error::Invalid(format!("{} has a non-free action; usual reconstruction needs a free action", sys.name())));
    }
    let group = sys.group().clone();
    let n = group.dim();
    // A reproduces generators on fundamental vectors.
    let lam0 = sys.quotient(p0);
    for m in sys.sample_near(&lam0, 8, 0xc0, 0.3)? {
        for i in 0..n {
            let xi = group.algebra().basis_vector(i);
            let err = (connection(&m, &sys.fundamental(&xi, &m)) - &xi).norm();
            if err > 1e-6 {
                return Err(Error::Hypothesis { name: "A(xi_M) = xi".into(), value: err, tol: 1e-6 });
            }
        }
    }
    let d_len = sys.dim();
    let k = group.vec_len();
    let rhs = |y: &DVector<f64>| -> DVector<f64> {
        let d = y.rows(0, d_len).into_owned();
        let g = group.devectorize(&y.as_slice()[d_len..]);
        let x = sys.field(&d);
        let xi = connection(&d, &x);
        let lift = &x - sys.fundamental(&xi, &d);
        let dg = group.vectorize(&(g * group.algebra_matrix(&xi)));
        DVector::from_iterator(d_len + k, lift.iter().chain(dg.iter()).copied())
    };
    let mut y = DVector::from_iterator(d_len + k, p0.iter().chain(group.vectorize(group.identity().matrix()).iter()).copied());
    let mut states = vec![p0.clone()];
    let mut lifts = vec![p0.clone()];
    let mut xis = vec![connection(p0, &sys.field(p0)).norm()];
    const SUBSTEPS: usize = 16;
    for w in t_grid.windows(2) {
        let h = (w[1] - w[0]) / SUBSTEPS as f64;
        for s in 0..SUBSTEPS {
            y = rk4_step(&|_t: f64, v: &DVector<f64>| rhs(v), w[0] + s as f64 * h, &y, h);
            let d = sys.retract(&y.rows(0, d_len).into_owned());
            let g = group.project(&group.devectorize(&y.as_slice()[d_len..]))?;
            y = DVector::from_iterator(d_len + k, d.iter().chain(group.vectorize(&g).iter()).copied());
        }
        let d = y.rows(0, d_len).into_owned();
        let g = group.element(group.devectorize(&y.as_slice()[d_len..]))?;
        states.push(sys.act(&g, &d));
        xis.push(connection(&d, &sys.field(&d)).norm());
        lifts.push(d);
    }
    let mut sample = sample_from(sys.as_ref(), t_grid, &states);
    sample.set_diagnostic("xi_norm", &xis);
    let gammas = match quotient {
        Some(q) => q.to_vec(),
        None => quotient_curve(sys.as_ref(), &lam0, t_grid)?,
    };
    let qerr: Vec<f64> = lifts.iter().zip(&gammas).map(|(d, g)| (sys.quotient(d) - g).norm()).collect();
    sample.set_diagnostic("quotient_error", &qerr);
    Ok(sample)
}

/// Where the group factor of a vertical reconstruction came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Provenance {
    Quadratures,
    Oracle(String),
}

/// `exp(t eta)` by quadratures when possible, otherwise by the oracle.
pub fn group_exponential(group: &MatrixGroup, eta: &AlgVector, t_grid: &[f64], cfg: &QuadratureConfig) -> Result<(Vec<GroupElement>, Provenance)> {
    let attempt = if bsharp_form(group.algebra()).is_ok() {
        exp_semisimple(group, eta, t_grid, cfg)
    } else {
        exp_general(group, eta, t_grid, cfg)
    };
    match attempt {
        Ok(c) => Ok((c.elements, Provenance::Quadratures)),
        Err(e) => Ok((t_grid.iter().map(|&t| group.matrix_exp_oracle(eta, t)).collect(), Provenance::Oracle(e.to_string()))),
    }
}

/// `Gamma(t) = rho(g0 exp(eta t), s(lambda))` for a vertical invariant field,
/// with `eta = Theta_* X(s(lambda))` unless supplied.
pub fn vertical_integrate(
    sys: Arc<dyn InvariantSystem>,
    theta: &HorizontalSubmersion,
    p0: &DVector<f64>,
    eta: Option<AlgVector>,
    t_grid: &[f64],
    cfg: &QuadratureConfig,
) -> Result<TrajectorySample> {
    check_grid(t_grid)?;
    let lam = sys.quotient(p0);
    let mut worst: f64 = 0.0;
    for m in std::iter::once(p0.clone()).chain(sys.sample_near(&lam, 16, 0x7e27, 0.3)?) {
        worst = worst.max((sys.quotient_jacobian(&m) * sys.field(&m)).norm());
    }
    if worst > 1e-6 {
        return Err(Error::Hypothesis { name: "pi_* X = 0".into(), value: worst, tol: 1e-6 });
    }
    let s = sys.section(&lam)?;
    let g0 = theta.eval(p0)?;
    let eta = match eta {
        Some(e) => e,
        None => theta.derivative(&s, &sys.field(&s))?,
    };
    let (gs, provenance) = group_exponential(sys.group(), &eta, t_grid, cfg)?;
    let states: Vec<DVector<f64>> =
        gs.iter().map(|g| sys.group().compose(&g0, g).map(|gg| sys.act(&gg, &s))).collect::<Result<_>>()?;
    let mut sample = sample_from(sys.as_ref(), t_grid, &states);
    let drift: Vec<f64> = states.iter().map(|m| (sys.quotient(m) - &lam).norm()).collect();
    sample.set_diagnostic("quotient_drift", &drift);
    match provenance {
        Provenance::Quadratures => sample.notes.push("group factor by quadratures".into()),
        Provenance::Oracle(why) => sample.notes.push(format!("WARNING: group factor by oracle ({why})")),
    }
    Ok(sample)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::liegroup::make_group;

    fn grid(n: usize) -> Vec<f64> {
        (0..=n).map(|i| i as f64 / n as f64).collect()
    }

    fn rk45(sys: &dyn InvariantSystem, p0: &DVector<f64>, t: &[f64]) -> Vec<DVector<f64>> {
        dopri45(|_t, y: &DVector<f64>| sys.field(y), p0, t, 1e-11, 1e-13).unwrap()
    }

    fn sup(sample: &TrajectorySample, reference: &[DVector<f64>]) -> f64 {
        reference.iter().enumerate().map(|(i, r)| (sample.state(i) - r).amax()).fold(0.0, f64::max)
    }

    #[test]
    fn so3_r3_scenario_identities() {
        let sys = So3R3System::free_particle(SectionKind::QAligned).unwrap();
        let l = DVector::from_vec(vec![2.0, 3.0, 1.0]);
        assert!((sys.quotient(&sys.section(&l).unwrap()) - &l).norm() < 1e-14);
        let c = check_system(&sys, &l, 32, 1).unwrap();
        assert!(c.identity_action < 1e-15 && c.composition < 1e-12 && c.quotient_invariance < 1e-12);
        assert!(c.section_identity < 1e-10 && c.field_invariance < 1e-12);
        assert!(c.momentum_map < 1e-8, "{}", c.momentum_map);
        let mut rng = linalg::rng(4);
        for _ in 0..20 {
            let g = sys.group().sample_element(&mut rng, 1.0);
            let m = linalg::normal_vector(&mut rng, 6);
            let r = g.matrix().map(|z| z.re);
            let lhs = sys.momentum(&sys.act(&g, &m)).unwrap();
            assert!((lhs - r * sys.momentum(&m).unwrap()).norm() <= 1e-12);
        }
        let e1e2 = DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let e1e1 = DVector::from_vec(vec![1.0, 0.0, 0.0, 2.0, 0.0, 0.0]);
        assert_eq!(isotropy_dim(&sys, &e1e2), 0);
        assert_eq!(isotropy_dim(&sys, &e1e1), 1);
        assert!(matches!(sys.section(&DVector::from_vec(vec![1.0, 1.0, 1.0])), Err(Error::SectionDomain(_))));
    }

    #[test]
    fn theta_identities() {
        let tg: Arc<dyn InvariantSystem> = Arc::new(TStarSystem::bsharp(make_group("so3").unwrap()).unwrap());
        let m0 = tg.section(&DVector::from_vec(vec![0.3, 0.2, -0.5])).unwrap();
        let th = build_theta(tg.clone(), &m0).unwrap();
        let mut rng = linalg::rng(3);
        let g = tg.group().sample_element(&mut rng, 1.0);
        let m = tg.act(&g, &m0);
        assert_eq!(th.eval(&m).unwrap(), g);
        assert_eq!(th.eval(&m0).unwrap().matrix(), tg.group().identity().matrix());

        let r3: Arc<dyn InvariantSystem> = Arc::new(So3R3System::free_particle(SectionKind::QAligned).unwrap());
        let m0 = r3.section(&DVector::from_vec(vec![2.0, 3.0, 1.0])).unwrap();
        let th = build_theta(r3.clone(), &m0).unwrap();
        assert!((th.eval(&m0).unwrap().matrix() - r3.group().identity().matrix()).norm() < 1e-12);
        for m in r3.sample_near(&r3.quotient(&m0), 20, 9, 0.6).unwrap() {
            let g = th.eval(&m).unwrap();
            assert!((r3.act(&g, &r3.section(&r3.quotient(&m)).unwrap()) - &m).norm() <= 1e-8);
        }
    }

    #[test]
    fn free_particle_two_step_is_a_straight_line() {
        let sys: Arc<dyn InvariantSystem> = Arc::new(So3R3System::free_particle(SectionKind::PAligned).unwrap());
        let m0 = sys.section(&DVector::from_vec(vec![2.0, 3.0, 1.0])).unwrap();
        let th = build_theta(sys.clone(), &m0).unwrap();
        let mut rng = linalg::rng(12);
        let g = sys.group().sample_element(&mut rng, 0.8);
        let p0 = sys.act(&g, &m0);
        let t = grid(64);
        let s = two_step_reconstruct(sys.clone(), &th, &p0, None, &t).unwrap();
        for (i, ti) in t.iter().enumerate() {
            let st = s.state(i);
            for k in 0..3 {
                assert!((st[k] - (p0[k] + ti * p0[3 + k])).abs() <= 1e-6);
                assert!((st[3 + k] - p0[3 + k]).abs() <= 1e-6);
            }
        }
        assert!(interior_flow_residual(&s) <= 1e-5);
        assert!(s.max_diagnostic("theta_drift") <= 1e-6);
        assert!(s.max_diagnostic("quotient_error") <= 1e-8);
    }

    #[test]
    fn q_aligned_section_is_not_horizontal_for_the_free_particle() {
        let sys: Arc<dyn InvariantSystem> = Arc::new(So3R3System::free_particle(SectionKind::QAligned).unwrap());
        let m0 = sys.section(&DVector::from_vec(vec![2.0, 3.0, 1.0])).unwrap();
        let th = build_theta(sys.clone(), &m0).unwrap();
        let e = two_step_reconstruct(sys, &th, &m0, None, &grid(8)).unwrap_err();
        assert!(matches!(e, Error::Hypothesis { ref name, .. } if name == "Theta_* X = 0"));
    }

    #[test]
    fn injected_vertical_component_is_rejected() {
        let base = So3R3System::free_particle(SectionKind::PAligned).unwrap();
        let bad = base.with_field(
            "free+spin",
            Arc::new(|m: &DVector<f64>| {
                let spin = DVector::from_vec(vec![-m[1], m[0], 0.0, -m[4], m[3], 0.0]);
                DVector::from_vec(vec![m[3], m[4], m[5], 0.0, 0.0, 0.0]) + spin
            }),
        );
        let sys: Arc<dyn InvariantSystem> = Arc::new(bad);
        let m0 = sys.section(&DVector::from_vec(vec![2.0, 3.0, 1.0])).unwrap();
        let th = build_theta(sys.clone(), &m0).unwrap();
        assert!(matches!(two_step_reconstruct(sys, &th, &m0, None, &grid(8)), Err(Error::Hypothesis { .. })));
    }

    #[test]
    fn zero_field_gives_constant_curves() {
        let sys: Arc<dyn InvariantSystem> = Arc::new(So3R3System::zero(SectionKind::PAligned).unwrap());
        let m0 = sys.section(&DVector::from_vec(vec![2.0, 3.0, 1.0])).unwrap();
        let th = build_theta(sys.clone(), &m0).unwrap();
        let s = two_step_reconstruct(sys.clone(), &th, &m0, None, &grid(4)).unwrap();
        for i in 0..s.len() {
            assert!((s.state(i) - &m0).norm() < 1e-14);
        }
        let v = vertical_integrate(sys, &th, &m0, None, &grid(4), &QuadratureConfig::default()).unwrap();
        for i in 0..v.len() {
            assert!((v.state(i) - &m0).norm() < 1e-12);
        }
        assert!(v.notes[0].starts_with("WARNING"));
    }

    #[test]
    fn tstar_horizontal_two_step_and_usual_agree() {
        let tg = Arc::new(TStarSystem::horizontal_euler(make_group("so3").unwrap(), &[1.0, 2.0, 3.0]));
        let sys: Arc<dyn InvariantSystem> = tg.clone();
        let alpha = DVector::from_vec(vec![0.6, -0.3, 0.7]);
        let m0 = sys.section(&alpha).unwrap();
        let th = build_theta(sys.clone(), &m0).unwrap();
        let mut rng = linalg::rng(5);
        let p0 = sys.act(&sys.group().sample_element(&mut rng, 0.9), &m0);
        let t = grid(64);
        let two = two_step_reconstruct(sys.clone(), &th, &p0, None, &t).unwrap();
        let usual = usual_reconstruct(sys.clone(), &th.connection(), &p0, None, &t).unwrap();
        let reference = rk45(sys.as_ref(), &p0, &t);
        let mut agree: f64 = 0.0;
        for i in 0..t.len() {
            agree = agree.max((two.state(i) - usual.state(i)).amax());
        }
        assert!(agree <= 1e-7, "{agree}");
        assert!(sup(&two, &reference) <= 1e-5);
        assert!(sup(&usual, &reference) <= 1e-5);
        assert!(usual.max_diagnostic("xi_norm") <= 1e-8);
    }

    #[test]
    fn usual_reconstruction_of_a_generic_field() {
        let sys: Arc<dyn InvariantSystem> = Arc::new(TStarSystem::rigid_body(make_group("so3").unwrap(), &[1.0, 2.0, 3.0]));
        let m0 = sys.section(&DVector::from_vec(vec![0.6, -0.3, 0.7])).unwrap();
        let th = build_theta(sys.clone(), &m0).unwrap();
        let t = grid(64);
        let s = usual_reconstruct(sys.clone(), &th.connection(), &m0, None, &t).unwrap();
        assert!(sup(&s, &rk45(sys.as_ref(), &m0, &t)) <= 1e-5);
        assert!(interior_flow_residual(&s) <= 1e-5);
        let r3: Arc<dyn InvariantSystem> = Arc::new(So3R3System::free_particle(SectionKind::PAligned).unwrap());
        let m = r3.section(&DVector::from_vec(vec![2.0, 3.0, 1.0])).unwrap();
        let th3 = build_theta(r3.clone(), &m).unwrap();
        assert!(matches!(usual_reconstruct(r3, &th3.connection(), &m, None, &t), Err(Error::Invalid(_))));
    }

    #[test]
    fn vertical_fields_by_quadratures() {
        let sys: Arc<dyn InvariantSystem> = Arc::new(TStarSystem::bsharp(make_group("so3").unwrap()).unwrap());
        let m0 = sys.section(&DVector::from_vec(vec![0.6, -0.3, 0.7])).unwrap();
        let th = build_theta(sys.clone(), &m0).unwrap();
        let mut rng = linalg::rng(8);
        let p0 = sys.act(&sys.group().sample_element(&mut rng, 0.9), &m0);
        let t = grid(32);
        let s = vertical_integrate(sys.clone(), &th, &p0, None, &t, &QuadratureConfig::default()).unwrap();
        assert_eq!(s.notes, vec!["group factor by quadratures".to_string()]);
        assert!(sup(&s, &rk45(sys.as_ref(), &p0, &t)) <= 1e-6);
        assert!(s.max_diagnostic("quotient_drift") <= 1e-12);

        let r3: Arc<dyn InvariantSystem> = Arc::new(So3R3System::rotation(SectionKind::PAligned).unwrap());
        let m = r3.section(&DVector::from_vec(vec![2.0, 3.0, 1.0])).unwrap();
        let th3 = build_theta(r3.clone(), &m).unwrap();
        let p = r3.act(&r3.group().sample_element(&mut rng, 0.5), &m);
        let s3 = vertical_integrate(r3.clone(), &th3, &p, None, &t, &QuadratureConfig::default()).unwrap();
        assert!(sup(&s3, &rk45(r3.as_ref(), &p, &t)) <= 1e-6, "{}", sup(&s3, &rk45(r3.as_ref(), &p, &t)));
        assert!(interior_flow_residual(&s3) <= 1e-5);
    }

    #[test]
    fn isotropy_shift_leaves_the_curve_unchanged() {
        // At a collinear pair the isotropy is rotation about the common line;
        // adding such chi to eta does not move rho(g0 exp((eta + chi) t), m).
        let sys = So3R3System::rotation(SectionKind::PAligned).unwrap();
        let m = DVector::from_vec(vec![1.0, 2.0, 0.5, 2.0, 4.0, 1.0]);
        let chi = DVector::from_vec(vec![1.0, 2.0, 0.5]) * 0.7;
        let eta = DVector::zeros(3);
        for t in grid(8) {
            let a = sys.act(&sys.group().matrix_exp_oracle(&eta, t), &m);
            let b = sys.act(&sys.group().matrix_exp_oracle(&(&eta + &chi), t), &m);
            assert!((a - b).norm() < 1e-12);
        }
    }
}
