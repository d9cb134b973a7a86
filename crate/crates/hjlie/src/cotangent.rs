//! `T*G` in the left trivialization `G x g*`, with body-frame tangent vectors.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::hjsolver::{ChartField, FirstIntegralsMap, PhaseSpace};
use crate::liealg::{casimir_check, AlgVector, CasimirForm, CoVector, ScalarFn};
use crate::liegroup::{GraphChart, GroupElement, MatrixGroup};
use crate::linalg;

#[derive(Clone, Debug, PartialEq)]
pub struct PhasePoint {
    pub g: GroupElement,
    pub alpha: CoVector,
}

/// `(v_body, beta)`: body velocity `g^{-1} v_g` and the `g*` component.
#[derive(Clone, Debug, PartialEq)]
pub struct TangentPhaseVector {
    pub v_body: AlgVector,
    pub beta: CoVector,
}

impl TangentPhaseVector {
    pub fn zero(n: usize) -> Self {
        TangentPhaseVector { v_body: DVector::zeros(n), beta: DVector::zeros(n) }
    }

    pub fn stacked(&self) -> DVector<f64> {
        let n = self.v_body.len();
        DVector::from_fn(2 * n, |i, _| if i < n { self.v_body[i] } else { self.beta[i - n] })
    }

    pub fn from_stacked(x: &DVector<f64>) -> Self {
        let n = x.len() / 2;
        TangentPhaseVector { v_body: x.rows(0, n).into_owned(), beta: x.rows(n, n).into_owned() }
    }
}

/// A covector on `T*G` acting as `(v, beta) -> <a, v> + <beta, b>`.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseCovector {
    pub a: CoVector,
    pub b: AlgVector,
}

impl PhaseCovector {
    pub fn stacked(&self) -> DVector<f64> {
        let n = self.a.len();
        DVector::from_fn(2 * n, |i, _| if i < n { self.a[i] } else { self.b[i - n] })
    }
}

pub type FieldFn = Arc<dyn Fn(&PhasePoint) -> TangentPhaseVector + Send + Sync>;
pub type PhaseScalar = Arc<dyn Fn(&PhasePoint) -> f64 + Send + Sync>;

#[derive(Clone)]
pub struct VerticalField {
    evaluator: FieldFn,
    pub descriptor: String,
}

impl std::fmt::Debug for VerticalField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VerticalField").field("descriptor", &self.descriptor).finish()
    }
}

impl VerticalField {
    pub fn new(descriptor: &str, evaluator: FieldFn) -> Self {
        VerticalField { evaluator, descriptor: descriptor.into() }
    }

    pub fn eval(&self, p: &PhasePoint) -> TangentPhaseVector {
        (self.evaluator)(p)
    }
}

/// An `Ad*`-invariant function on `g*` with an optional analytic gradient.
#[derive(Clone)]
pub struct InvariantFunction {
    pub name: String,
    pub value: ScalarFn,
    pub gradient: Option<Arc<dyn Fn(&CoVector) -> AlgVector + Send + Sync>>,
}

impl InvariantFunction {
    pub fn new(name: &str, value: ScalarFn) -> Self {
        InvariantFunction { name: name.into(), value, gradient: None }
    }

    pub fn with_gradient(mut self, grad: Arc<dyn Fn(&CoVector) -> AlgVector + Send + Sync>) -> Self {
        self.gradient = Some(grad);
        self
    }

    /// Central differences with step `1e-6` and one Richardson level.
    pub fn fd_gradient(&self, alpha: &CoVector) -> AlgVector {
        let h = 1e-6;
        DVector::from_fn(alpha.len(), |i, _| {
            let at = |s: f64| {
                let mut a = alpha.clone();
                a[i] += s;
                (self.value)(&a)
            };
            let d1 = (at(h) - at(-h)) / (2.0 * h);
            let d2 = (at(2.0 * h) - at(-2.0 * h)) / (4.0 * h);
            (4.0 * d1 - d2) / 3.0
        })
    }

    pub fn gradient(&self, alpha: &CoVector) -> AlgVector {
        match &self.gradient {
            Some(g) => g(alpha),
            None => self.fd_gradient(alpha),
        }
    }
}

/// A `rho`-invariant scalar on phase space.
#[derive(Clone)]
pub struct InvariantScalar {
    pub name: String,
    pub value: PhaseScalar,
}

impl InvariantScalar {
    pub fn new(name: &str, value: PhaseScalar) -> Self {
        InvariantScalar { name: name.into(), value }
    }

    pub fn one() -> Self {
        Self::new("one", Arc::new(|_| 1.0))
    }
}

const INVARIANCE_SAMPLES: usize = 64;
const INVARIANCE_TOL: f64 = 1e-8;

/// `T*G = G x g*` for a catalogue matrix group.
#[derive(Clone, Debug)]
pub struct CotangentBundle {
    group: MatrixGroup,
}

impl CotangentBundle {
    pub fn new(group: MatrixGroup) -> Self {
        CotangentBundle { group }
    }

    pub fn group(&self) -> &MatrixGroup {
        &self.group
    }

    pub fn dim(&self) -> usize {
        self.group.dim()
    }

    pub fn point(&self, g: GroupElement, alpha: CoVector) -> Result<PhasePoint> {
        if alpha.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: alpha.len() });
        }
        Ok(PhasePoint { g, alpha })
    }

    /// `theta(g, alpha)(v, beta) = <alpha, v_body>`.
    pub fn theta_at(&self, p: &PhasePoint, w: &TangentPhaseVector) -> f64 {
        p.alpha.dot(&w.v_body)
    }

    /// Matrix `Omega` with `omega(w1, w2) = w1^T Omega w2` on stacked `(v, beta)`.
    pub fn omega_matrix(&self, alpha: &CoVector) -> DMatrix<f64> {
        let n = self.dim();
        let mut om = DMatrix::zeros(2 * n, 2 * n);
        om.view_mut((0, 0), (n, n)).copy_from(&self.group.algebra().pairing_matrix(alpha));
        for i in 0..n {
            om[(i, n + i)] = 1.0;
            om[(n + i, i)] = -1.0;
        }
        om
    }

    /// `omega((v, b), (v', b')) = <b', v> - <b, v'> + <ad*_v alpha, v'>`.
    pub fn omega_at(&self, p: &PhasePoint, w1: &TangentPhaseVector, w2: &TangentPhaseVector) -> f64 {
        w1.stacked().dot(&(self.omega_matrix(&p.alpha) * w2.stacked()))
    }

    /// The vector `X` with `omega(X, .) = kappa`.
    pub fn omega_sharp(&self, p: &PhasePoint, kappa: &PhaseCovector) -> Result<TangentPhaseVector> {
        let om = self.omega_matrix(&p.alpha);
        let cond = linalg::condition(&om);
        if !(cond <= 1e12) {
            return Err(Error::SingularOmega(cond));
        }
        let rhs = kappa.stacked();
        let x = om.transpose().lu().solve(&rhs).ok_or(Error::SingularOmega(cond))?;
        let residual = (om.transpose() * &x - &rhs).norm();
        if residual > 1e-10 * (1.0 + rhs.norm()) {
            return Err(Error::SingularOmega(cond));
        }
        Ok(TangentPhaseVector::from_stacked(&x))
    }

    /// `J(g, alpha) = (Ad_{g^-1})^T alpha`, the coadjoint action of `g` on `alpha`.
    pub fn momentum_j(&self, p: &PhasePoint) -> Result<CoVector> {
        self.group.coadjoint(&p.g, &p.alpha)
    }

    pub fn projection_pi(&self, p: &PhasePoint) -> CoVector {
        p.alpha.clone()
    }

    /// `F = (J, pi)` stacked.
    pub fn fibration_f(&self, p: &PhasePoint) -> Result<DVector<f64>> {
        let j = self.momentum_j(p)?;
        let n = self.dim();
        Ok(DVector::from_fn(2 * n, |i, _| if i < n { j[i] } else { p.alpha[i - n] }))
    }

    /// `F_*` on body vectors: `dJ = A^T (beta - ad*_v alpha)`, `d pi = beta`, `A = Ad_{g^-1}`.
    pub fn f_jacobian_body(&self, p: &PhasePoint) -> Result<DMatrix<f64>> {
        Ok(self.f_jacobian_with(&self.group.coadjoint_matrix(&p.g)?, &p.alpha))
    }

    /// [`Self::f_jacobian_body`] with `Ad_{g^-1}^T` supplied.
    pub(crate) fn f_jacobian_with(&self, at: &DMatrix<f64>, alpha: &CoVector) -> DMatrix<f64> {
        let n = self.dim();
        let m = self.group.algebra().isotropy_matrix(alpha);
        let mut jac = DMatrix::zeros(2 * n, 2 * n);
        jac.view_mut((0, 0), (n, n)).copy_from(&(-at * m));
        jac.view_mut((0, n), (n, n)).copy_from(at);
        for i in 0..n {
            jac[(n + i, n + i)] = 1.0;
        }
        jac
    }

    /// Basis of `Ker F_*` (body coordinates) and the largest `|omega(v_i, v_j)|`.
    pub fn ker_f_isotropy(&self, p: &PhasePoint) -> Result<(DMatrix<f64>, f64)> {
        let k = linalg::null_space(&self.f_jacobian_body(p)?, linalg::RANK_TOL);
        let res = if k.ncols() == 0 { 0.0 } else { (k.transpose() * self.omega_matrix(&p.alpha) * &k).amax() };
        Ok((k, res))
    }

    /// `rho(h, (g, alpha)) = (h g, alpha)`.
    pub fn act(&self, h: &GroupElement, p: &PhasePoint) -> Result<PhasePoint> {
        Ok(PhasePoint { g: self.group.compose(h, &p.g)?, alpha: p.alpha.clone() })
    }

    /// `pi^* phi` as a phase covector: `(0, phi(alpha))`.
    pub fn pullback_pi(&self, phi: &CasimirForm, p: &PhasePoint) -> PhaseCovector {
        PhaseCovector { a: DVector::zeros(self.dim()), b: phi.eval(&p.alpha) }
    }

    /// Seeded sample points `(exp(xi), alpha)` with `alpha` drawn around `center`.
    pub fn sample_points(&self, seed: u64, count: usize, center: &CoVector, radius: f64) -> Vec<PhasePoint> {
        let mut rng = linalg::rng(seed);
        let n = self.dim();
        (0..count)
            .map(|_| {
                let g = self.group.sample_element(&mut rng, 1.0);
                let alpha = center + linalg::unit_ball(&mut rng, n) * radius;
                PhasePoint { g, alpha }
            })
            .collect()
    }

    fn sample_domain(phi: &CasimirForm, n: usize) -> (CoVector, f64) {
        if phi.domain_radius.is_finite() {
            (phi.domain_center.clone(), phi.domain_radius)
        } else {
            (DVector::zeros(n), 2.0)
        }
    }

    /// `X^phi = omega^# (pi^* phi)`, which is `(phi(alpha), 0)` for a Casimir `phi`.
    pub fn build_casimir_field(&self, phi: &CasimirForm) -> Result<VerticalField> {
        let n = self.dim();
        let (center, radius) = Self::sample_domain(phi, n);
        let pts = self.sample_points(0xc1f, INVARIANCE_SAMPLES, &center, radius * 0.999);
        let alphas: Vec<CoVector> = pts.iter().map(|p| p.alpha.clone()).collect();
        let res = casimir_check(self.group.algebra(), phi, &alphas)?;
        if res > 1e-10 {
            return Err(Error::CasimirResidual(res));
        }
        for p in &pts {
            let x = self.omega_sharp(p, &self.pullback_pi(phi, p))?;
            let closed = phi.eval(&p.alpha);
            let diff = (&x.v_body - &closed).norm() + x.beta.norm();
            if diff > 1e-10 * (1.0 + closed.norm()) {
                return Err(Error::NotInvariant { name: format!("omega_sharp(pi*{})", phi.label), residual: diff });
            }
        }
        let phi = phi.clone();
        let descriptor = format!("casimir:{}", phi.label);
        Ok(VerticalField::new(
            &descriptor,
            Arc::new(move |p: &PhasePoint| TangentPhaseVector {
                v_body: phi.eval(&p.alpha),
                beta: DVector::zeros(p.alpha.len()),
            }),
        ))
    }

    /// `K^* dh` as a phase covector, with `K = J`.
    pub fn pulled_back_differential(&self, h: &InvariantFunction, p: &PhasePoint) -> Result<PhaseCovector> {
        let j = self.momentum_j(p)?;
        let grad = h.gradient(&j);
        let n = self.dim();
        let dj = self.f_jacobian_body(p)?.rows(0, n).into_owned();
        let k = dj.transpose() * grad;
        Ok(PhaseCovector { a: k.rows(0, n).into_owned(), b: k.rows(n, n).into_owned() })
    }

    /// `X = sum_i f_i omega^#(K^* dh_i)`.
    pub fn build_mixed_field(&self, h_list: &[InvariantFunction], f_list: &[InvariantScalar]) -> Result<VerticalField> {
        if h_list.len() != f_list.len() {
            return Err(Error::DimensionMismatch { expected: h_list.len(), got: f_list.len() });
        }
        let n = self.dim();
        let pts = self.sample_points(0x31d, INVARIANCE_SAMPLES, &DVector::zeros(n), 2.0);
        let mut rng = linalg::rng(0x31e);
        let movers: Vec<GroupElement> = (0..INVARIANCE_SAMPLES).map(|_| self.group.sample_element(&mut rng, 1.0)).collect();
        for h in h_list {
            let mut worst: f64 = 0.0;
            for (p, g) in pts.iter().zip(&movers) {
                let a = &p.alpha;
                let moved = self.group.coadjoint(g, a)?;
                let (v0, v1) = ((h.value)(a), (h.value)(&moved));
                worst = worst.max((v1 - v0).abs() / (1.0 + v0.abs()));
                if let Some(grad) = &h.gradient {
                    let fd = h.fd_gradient(a);
                    let an = grad(a);
                    let gerr = (&an - &fd).norm() / (1.0 + an.norm());
                    if gerr > 1e-6 {
                        return Err(Error::NotInvariant { name: format!("gradient of {}", h.name), residual: gerr });
                    }
                }
            }
            if worst > INVARIANCE_TOL {
                return Err(Error::NotInvariant { name: h.name.clone(), residual: worst });
            }
        }
        for f in f_list {
            let mut worst: f64 = 0.0;
            for (p, g) in pts.iter().zip(&movers) {
                let v0 = (f.value)(p);
                let v1 = (f.value)(&self.act(g, p)?);
                worst = worst.max((v1 - v0).abs() / (1.0 + v0.abs()));
            }
            if worst > INVARIANCE_TOL {
                return Err(Error::NotInvariant { name: f.name.clone(), residual: worst });
            }
        }
        let bundle = self.clone();
        let hs: Vec<InvariantFunction> = h_list.to_vec();
        let fs: Vec<InvariantScalar> = f_list.to_vec();
        let descriptor = format!(
            "mixed:{}",
            hs.iter().zip(&fs).map(|(h, f)| format!("{}*d{}", f.name, h.name)).collect::<Vec<_>>().join("+")
        );
        let eval = move |p: &PhasePoint| {
            let mut out = DVector::zeros(2 * p.alpha.len());
            for (h, f) in hs.iter().zip(&fs) {
                let c = (f.value)(p);
                if c == 0.0 {
                    continue;
                }
                let x = bundle
                    .pulled_back_differential(h, p)
                    .and_then(|k| bundle.omega_sharp(p, &k))
                    .map(|x| x.stacked())
                    .unwrap_or_else(|_| DVector::from_element(2 * p.alpha.len(), f64::NAN));
                out += x * c;
            }
            TangentPhaseVector::from_stacked(&out)
        };
        let field = VerticalField::new(&descriptor, Arc::new(eval));
        // The left action leaves body coordinates unchanged, so an invariant
        // field has equal body components at p and rho(g, p).
        let mut worst: f64 = 0.0;
        for (p, g) in pts.iter().zip(&movers).take(16) {
            let a = field.eval(p).stacked();
            let b = field.eval(&self.act(g, p)?).stacked();
            worst = worst.max((a - b).norm());
        }
        if !(worst <= INVARIANCE_TOL) {
            return Err(Error::NotInvariant { name: descriptor, residual: worst });
        }
        Ok(field)
    }

    /// Chart of `T*G` around `(g0, .)` built from the group's graph chart.
    pub fn chart(&self, g0: &GroupElement) -> Result<CotangentChart> {
        Ok(CotangentChart { bundle: self.clone(), chart: self.group.graph_chart(g0)? })
    }
}

/// Chart coordinates `z = (x, a)` where `x` are graph coordinates of `g` and
/// `a = alpha`.
#[derive(Clone, Debug)]
pub struct CotangentChart {
    bundle: CotangentBundle,
    chart: GraphChart,
}

#[derive(Clone, Debug)]
pub struct ChartPoint {
    pub z: DVector<f64>,
    pub phase: PhasePoint,
    /// `C(g)`: body velocity to chart velocity.
    pub c: DMatrix<f64>,
    pub c_inv: DMatrix<f64>,
    /// `Ad_{g^-1}^T`, so that `J = ad_star * alpha`.
    pub ad_star: DMatrix<f64>,
}

impl CotangentChart {
    pub fn bundle(&self) -> &CotangentBundle {
        &self.bundle
    }

    pub fn graph(&self) -> &GraphChart {
        &self.chart
    }

    pub fn from_phase(&self, p: &PhasePoint) -> Result<ChartPoint> {
        let n = self.bundle.dim();
        let x = self.chart.to_coords(&p.g);
        let z = DVector::from_fn(2 * n, |i, _| if i < n { x[i] } else { p.alpha[i - n] });
        self.finish(z, p.clone())
    }

    fn finish(&self, z: DVector<f64>, phase: PhasePoint) -> Result<ChartPoint> {
        let c = self.chart.differential(&phase.g);
        let c_inv = c.clone().try_inverse().ok_or(Error::ChartInversion { residual: f64::INFINITY })?;
        let ad_star = self.bundle.group().coadjoint_matrix(&phase.g)?;
        Ok(ChartPoint { z, phase, c, c_inv, ad_star })
    }

    /// Body vector to chart components `(C v, beta)`.
    pub fn to_chart_vector(&self, p: &ChartPoint, w: &TangentPhaseVector) -> DVector<f64> {
        let n = self.bundle.dim();
        let cv = &p.c * &w.v_body;
        DVector::from_fn(2 * n, |i, _| if i < n { cv[i] } else { w.beta[i - n] })
    }

    pub fn to_body_vector(&self, p: &ChartPoint, dz: &DVector<f64>) -> TangentPhaseVector {
        let n = self.bundle.dim();
        TangentPhaseVector { v_body: &p.c_inv * dz.rows(0, n), beta: dz.rows(n, n).into_owned() }
    }

    /// Phase covector to chart components `(C^{-T} a, b)`.
    pub fn to_chart_covector(&self, p: &ChartPoint, k: &PhaseCovector) -> DVector<f64> {
        let n = self.bundle.dim();
        let ca = p.c_inv.transpose() * &k.a;
        DVector::from_fn(2 * n, |i, _| if i < n { ca[i] } else { k.b[i - n] })
    }

    /// Body-to-chart transform `T = diag(C^{-1}, I)` so that body = `T dz`.
    fn body_transform(&self, p: &ChartPoint) -> DMatrix<f64> {
        let n = self.bundle.dim();
        let mut t = DMatrix::identity(2 * n, 2 * n);
        t.view_mut((0, 0), (n, n)).copy_from(&p.c_inv);
        t
    }

    pub fn field(&self, x: &VerticalField) -> ChartField<Self> {
        let me = self.clone();
        let x = x.clone();
        Arc::new(move |p: &ChartPoint| me.to_chart_vector(p, &x.eval(&p.phase)))
    }

    /// `pi^* phi` in chart components.
    pub fn pi_star(&self, phi: &CasimirForm) -> ChartField<Self> {
        let me = self.clone();
        let phi = phi.clone();
        Arc::new(move |p: &ChartPoint| me.to_chart_covector(p, &me.bundle.pullback_pi(&phi, &p.phase)))
    }

    /// Symplectic dual of `X` in chart components.
    pub fn flat(&self, x: &VerticalField) -> ChartField<Self> {
        let me = self.clone();
        let x = x.clone();
        Arc::new(move |p: &ChartPoint| me.omega(p).transpose() * me.to_chart_vector(p, &x.eval(&p.phase)))
    }

    /// `F = (J, pi)` with its analytic chart Jacobian.
    pub fn first_integrals(&self) -> FirstIntegralsMap<Self> {
        let me = self.clone();
        FirstIntegralsMap::new(
            Arc::new(move |p: &ChartPoint| {
                let j = &p.ad_star * &p.phase.alpha;
                let n = j.len();
                DVector::from_fn(2 * n, |i, _| if i < n { j[i] } else { p.phase.alpha[i - n] })
            }),
            2 * self.bundle.dim() - self.bundle.group().algebra().generic_isotropy_dim(),
        )
        .with_jacobian(Arc::new(move |p: &ChartPoint| {
            me.bundle.f_jacobian_with(&p.ad_star, &p.phase.alpha) * me.body_transform(p)
        }))
    }
}

impl PhaseSpace for CotangentChart {
    type Point = ChartPoint;

    fn dim(&self) -> usize {
        2 * self.bundle.dim()
    }

    fn locate(&self, z: &DVector<f64>, near: Option<&ChartPoint>) -> Result<ChartPoint> {
        let n = self.bundle.dim();
        if z.len() != 2 * n {
            return Err(Error::DimensionMismatch { expected: 2 * n, got: z.len() });
        }
        let x = z.rows(0, n).into_owned();
        let g = self.chart.from_coords(&x, near.map(|p| &p.phase.g))?;
        self.finish(z.clone(), PhasePoint { g, alpha: z.rows(n, n).into_owned() })
    }

    fn coords<'a>(&self, p: &'a ChartPoint) -> &'a DVector<f64> {
        &p.z
    }

    fn theta(&self, p: &ChartPoint) -> DVector<f64> {
        let n = self.bundle.dim();
        let t = p.c_inv.transpose() * &p.phase.alpha;
        DVector::from_fn(2 * n, |i, _| if i < n { t[i] } else { 0.0 })
    }

    fn omega(&self, p: &ChartPoint) -> DMatrix<f64> {
        let t = self.body_transform(p);
        t.transpose() * self.bundle.omega_matrix(&p.phase.alpha) * t
    }

    fn state_labels(&self) -> Vec<String> {
        let group = self.bundle.group();
        let d = group.rep_dim();
        let mut labels = Vec::new();
        for r in 0..d {
            for c in 0..d {
                if group.is_complex() {
                    labels.push(format!("g{r}{c}_re"));
                    labels.push(format!("g{r}{c}_im"));
                } else {
                    labels.push(format!("g{r}{c}"));
                }
            }
        }
        labels.extend((0..self.bundle.dim()).map(|i| format!("alpha{}", i + 1)));
        labels
    }

    fn serialize(&self, p: &ChartPoint) -> Vec<f64> {
        serialize_phase(self.bundle.group(), &p.phase)
    }
}

/// Group matrix row-major, then `alpha`.
pub fn serialize_phase(group: &MatrixGroup, p: &PhasePoint) -> Vec<f64> {
    let mut out = group.vectorize(p.g.matrix()).as_slice().to_vec();
    out.extend(p.alpha.iter());
    out
}
