//! Complete solutions from a first-integrals submersion, generating functions
//! by quadrature, and integration along the resulting linear flow.
//!
//! A [`CompleteSolutionChart`] inverts `(Pi, F)` near a center point. The image
//! of `F` is parametrized by `lambda = U^T (F - F(center))`, where the columns of
//! `U` span the range of `F_*` at the center; this keeps `lambda` a coordinate
//! system even when `F` has more components than its rank.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{self, RANK_TOL};
use crate::quadrature;
use crate::trajectory::{stencil_derivative, TrajectorySample};

/// A coordinate patch of a symplectic manifold with a primitive `theta`.
pub trait PhaseSpace: Send + Sync {
    type Point: Clone + Send + Sync;

    fn dim(&self) -> usize;
    /// Point with chart coordinates `z`; `near` is a warm start for any inner solve.
    fn locate(&self, z: &DVector<f64>, near: Option<&Self::Point>) -> Result<Self::Point>;
    fn coords<'a>(&self, p: &'a Self::Point) -> &'a DVector<f64>;
    /// Components of `theta` in chart coordinates.
    fn theta(&self, p: &Self::Point) -> DVector<f64>;
    /// Matrix of `omega`: `omega(u, w) = u^T Omega w`.
    fn omega(&self, p: &Self::Point) -> DMatrix<f64>;
    fn state_labels(&self) -> Vec<String>;
    fn serialize(&self, p: &Self::Point) -> Vec<f64>;
}

pub type PointFn<S, T> = Arc<dyn Fn(&<S as PhaseSpace>::Point) -> T + Send + Sync>;
/// Vector fields and 1-forms, both as chart components.
pub type ChartField<S> = PointFn<S, DVector<f64>>;

pub struct FirstIntegralsMap<S: PhaseSpace> {
    eval: ChartField<S>,
    jacobian: Option<PointFn<S, DMatrix<f64>>>,
    rank: usize,
}

impl<S: PhaseSpace> Clone for FirstIntegralsMap<S> {
    fn clone(&self) -> Self {
        FirstIntegralsMap { eval: self.eval.clone(), jacobian: self.jacobian.clone(), rank: self.rank }
    }
}

impl<S: PhaseSpace> FirstIntegralsMap<S> {
    pub fn new(eval: ChartField<S>, rank: usize) -> Self {
        FirstIntegralsMap { eval, jacobian: None, rank }
    }

    pub fn with_jacobian(mut self, jac: PointFn<S, DMatrix<f64>>) -> Self {
        self.jacobian = Some(jac);
        self
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn eval(&self, p: &S::Point) -> DVector<f64> {
        (self.eval)(p)
    }

    pub fn jacobian(&self, space: &S, p: &S::Point) -> Result<DMatrix<f64>> {
        match &self.jacobian {
            Some(j) => Ok(j(p)),
            None => self.fd_jacobian(space, p),
        }
    }

    /// Central differences on chart coordinates.
    pub fn fd_jacobian(&self, space: &S, p: &S::Point) -> Result<DMatrix<f64>> {
        let z = space.coords(p).clone();
        let m = self.eval(p).len();
        let mut jac = DMatrix::zeros(m, z.len());
        for i in 0..z.len() {
            let h = 1e-6 * (1.0 + z[i].abs());
            let mut zp = z.clone();
            zp[i] += h;
            let mut zm = z.clone();
            zm[i] -= h;
            let fp = self.eval(&space.locate(&zp, Some(p))?);
            let fm = self.eval(&space.locate(&zm, Some(p))?);
            jac.set_column(i, &((fp - fm) / (2.0 * h)));
        }
        Ok(jac)
    }
}

/// `Pi(z) = M (z - z_center)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransversalPi {
    pub matrix: DMatrix<f64>,
    pub offset: DVector<f64>,
}

impl TransversalPi {
    pub fn apply(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.matrix * (z - &self.offset)
    }
}

/// Projection onto `Ker F_*` at the center, which is complementary to `Ker F_*`'s
/// Euclidean orthogonal complement.
pub fn build_transversal<S: PhaseSpace>(
    space: &S,
    f: &FirstIntegralsMap<S>,
    center: &S::Point,
) -> Result<TransversalPi> {
    let df = f.jacobian(space, center)?;
    let r = linalg::rank(&df, RANK_TOL);
    if r != f.rank() {
        return Err(Error::RankDeficient { expected: f.rank(), got: r });
    }
    let kernel = linalg::null_space(&df, RANK_TOL);
    let u = linalg::leading_left_singular(&df, r);
    let stacked = stack_rows(&kernel.transpose(), &(u.transpose() * &df));
    let cond = linalg::condition(&stacked);
    if !(cond < 1e10) {
        return Err(Error::NotTransversal(cond));
    }
    Ok(TransversalPi { matrix: kernel.transpose(), offset: space.coords(center).clone() })
}

fn stack_rows(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows() + b.nrows(), a.ncols());
    out.view_mut((0, 0), a.shape()).copy_from(a);
    out.view_mut((a.nrows(), 0), b.shape()).copy_from(b);
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NewtonConfig {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        NewtonConfig { tol: 1e-12, max_iter: 50 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuadratureConfig {
    pub order: usize,
    pub max_subdivisions: usize,
    pub increment_tol: f64,
    pub fd_step: f64,
    /// Recompute `phi_lambda` from the base point at every accepted time.
    pub audit: bool,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        QuadratureConfig { order: 16, max_subdivisions: 12, increment_tol: 1e-12, fd_step: 1e-6, audit: true }
    }
}

impl QuadratureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.order == 0 || self.max_subdivisions == 0 || !(self.increment_tol > 0.0) || !(self.fd_step > 0.0) {
            return Err(Error::Invalid("quadrature configuration values must be positive".into()));
        }
        Ok(())
    }
}

/// A converged inversion of `(Pi, F)` with the inverse Jacobian `D Sigma`.
#[derive(Clone)]
pub struct Solved<P> {
    pub point: P,
    pub target: DVector<f64>,
    /// `D Sigma` at the solution: columns are `d/dn_i` then `d/dlambda_j`.
    pub dsigma: DMatrix<f64>,
}

pub struct CompleteSolutionChart<S: PhaseSpace> {
    space: Arc<S>,
    f: FirstIntegralsMap<S>,
    pi: TransversalPi,
    center: S::Point,
    f_center: DVector<f64>,
    u: DMatrix<f64>,
    newton: NewtonConfig,
    center_solved: Solved<S::Point>,
    validity_radius: f64,
}

/// Result of continuation along the linear flow.
#[derive(Clone)]
pub struct FlowCurve<P> {
    pub times: Vec<f64>,
    pub gammas: Vec<DVector<f64>>,
    pub points: Vec<P>,
    /// `|phi(gamma(t)) - phi(gamma0) - t beta|` recomputed from the base point,
    /// or the continuation residual when the audit is disabled.
    pub linearity: Vec<f64>,
    pub failure: Option<(f64, String)>,
}

struct PhiState<P> {
    n: DVector<f64>,
    phi: DVector<f64>,
    base: Solved<P>,
}

impl<S: PhaseSpace> CompleteSolutionChart<S> {
    pub fn new(space: Arc<S>, f: FirstIntegralsMap<S>, center: S::Point, newton: NewtonConfig) -> Result<Self> {
        let pi = build_transversal(space.as_ref(), &f, &center)?;
        let df = f.jacobian(space.as_ref(), &center)?;
        let u = linalg::leading_left_singular(&df, f.rank());
        let f_center = f.eval(&center);
        let d = space.dim();
        let stacked = stack_rows(&pi.matrix, &(u.transpose() * &df));
        let dsigma = stacked.try_inverse().ok_or(Error::NotTransversal(f64::INFINITY))?;
        let center_solved = Solved { point: center.clone(), target: DVector::zeros(d), dsigma };
        let mut chart =
            CompleteSolutionChart { space, f, pi, center, f_center, u, newton, center_solved, validity_radius: 0.0 };
        chart.validity_radius = chart.estimate_radius();
        Ok(chart)
    }

    pub fn space(&self) -> &S {
        self.space.as_ref()
    }

    pub fn first_integrals(&self) -> &FirstIntegralsMap<S> {
        &self.f
    }

    pub fn transversal(&self) -> &TransversalPi {
        &self.pi
    }

    pub fn center(&self) -> &S::Point {
        &self.center
    }

    pub fn validity_radius(&self) -> f64 {
        self.validity_radius
    }

    /// Dimension of the `n` (transversal) coordinates.
    pub fn n_dim(&self) -> usize {
        self.pi.matrix.nrows()
    }

    /// Dimension of the `lambda` coordinates.
    pub fn lambda_dim(&self) -> usize {
        self.f.rank()
    }

    pub fn lambda_of(&self, p: &S::Point) -> DVector<f64> {
        self.u.transpose() * (self.f.eval(p) - &self.f_center)
    }

    pub fn pi_of(&self, p: &S::Point) -> DVector<f64> {
        self.pi.apply(self.space.coords(p))
    }

    /// Raw first-integral values for given `lambda` coordinates, to first order
    /// off the image; exact at the center.
    pub fn f_values(&self, p: &S::Point) -> DVector<f64> {
        self.f.eval(p)
    }

    fn stacked_jacobian(&self, p: &S::Point) -> Result<DMatrix<f64>> {
        let df = self.f.jacobian(self.space.as_ref(), p)?;
        Ok(stack_rows(&self.pi.matrix, &(self.u.transpose() * df)))
    }

    fn residual(&self, p: &S::Point, target: &DVector<f64>) -> DVector<f64> {
        let nd = self.n_dim();
        let pi = self.pi_of(p);
        let lam = self.lambda_of(p);
        DVector::from_fn(target.len(), |i, _| if i < nd { pi[i] - target[i] } else { lam[i - nd] - target[i] })
    }

    fn target(n: &DVector<f64>, lambda: &DVector<f64>) -> DVector<f64> {
        let mut t = DVector::zeros(n.len() + lambda.len());
        t.rows_mut(0, n.len()).copy_from(n);
        t.rows_mut(n.len(), lambda.len()).copy_from(lambda);
        t
    }

    /// Newton inversion of `(Pi, F)`, predicted from `guess` (or the center).
    pub fn solve(&self, n: &DVector<f64>, lambda: &DVector<f64>, guess: Option<&Solved<S::Point>>) -> Result<Solved<S::Point>> {
        if n.len() != self.n_dim() {
            return Err(Error::DimensionMismatch { expected: self.n_dim(), got: n.len() });
        }
        if lambda.len() != self.lambda_dim() {
            return Err(Error::DimensionMismatch { expected: self.lambda_dim(), got: lambda.len() });
        }
        let target = Self::target(n, lambda);
        let g = guess.unwrap_or(&self.center_solved);
        let z0 = self.space.coords(&g.point) + &g.dsigma * (&target - &g.target);
        let mut p = match self.space.locate(&z0, Some(&g.point)) {
            Ok(p) => p,
            Err(_) => g.point.clone(),
        };
        let scale = 1.0 + target.norm();
        let tol = self.newton.tol * scale;
        let polish = 4.0 * f64::EPSILON * scale;
        let mut r = self.residual(&p, &target);
        let mut rn = r.norm();
        let mut jac = self.stacked_jacobian(&p)?;
        for _ in 0..self.newton.max_iter {
            if rn <= polish {
                break;
            }
            let Some(delta) = jac.clone().lu().solve(&r) else { break };
            let z = self.space.coords(&p).clone();
            let mut step = 1.0;
            let mut accepted = None;
            for _ in 0..30 {
                let zt = &z - &delta * step;
                if let Ok(pt) = self.space.locate(&zt, Some(&p)) {
                    let rt = self.residual(&pt, &target);
                    let rtn = rt.norm();
                    if rtn.is_finite() && (rtn < (1.0 - 1e-4 * step) * rn || (rn <= tol && step == 1.0)) {
                        accepted = Some((pt, rt, rtn));
                        break;
                    }
                }
                if rn <= tol {
                    break;
                }
                step *= 0.5;
            }
            let Some((pt, rt, rtn)) = accepted else { break };
            let stagnating = rn <= tol && rtn > 0.5 * rn;
            if stagnating && rtn >= rn {
                break;
            }
            p = pt;
            r = rt;
            rn = rtn;
            jac = self.stacked_jacobian(&p)?;
            if stagnating {
                break;
            }
        }
        if !(rn <= tol) {
            return Err(Error::OutsideChart { residual: rn });
        }
        let dsigma = jac.try_inverse().ok_or(Error::NotTransversal(f64::INFINITY))?;
        Ok(Solved { point: p, target, dsigma })
    }

    /// `Sigma(n, lambda)`.
    pub fn sigma_eval(&self, n: &DVector<f64>, lambda: &DVector<f64>) -> Result<S::Point> {
        Ok(self.solve(n, lambda, None)?.point)
    }

    fn estimate_radius(&self) -> f64 {
        let d = self.space.dim();
        let nd = self.n_dim();
        let mut rng = linalg::rng(0x5a1);
        let dirs: Vec<DVector<f64>> = (0..16).map(|_| linalg::unit_sphere(&mut rng, d)).collect();
        let probe = |r: f64| {
            dirs.iter().all(|u| {
                let v = u * r;
                let n = v.rows(0, nd).into_owned();
                let lam = v.rows(nd, d - nd).into_owned();
                self.solve(&n, &lam, None).is_ok()
            })
        };
        const R_MAX: f64 = 1.0;
        if probe(R_MAX) {
            return R_MAX;
        }
        let (mut lo, mut hi) = (0.0, R_MAX);
        for _ in 0..8 {
            let mid = 0.5 * (lo + hi);
            if probe(mid) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }

    /// Pullback of `theta` along the segment direction, at a solved node.
    fn integrand(&self, s: &Solved<S::Point>, dn: &DVector<f64>) -> f64 {
        let nd = self.n_dim();
        let ds = s.dsigma.columns(0, nd) * dn;
        self.space.theta(&s.point).dot(&ds)
    }

    fn gl_panel(
        &self,
        a: &DVector<f64>,
        dn: &DVector<f64>,
        lambda: &DVector<f64>,
        s0: f64,
        s1: f64,
        cfg: &QuadratureConfig,
        warm: &mut Solved<S::Point>,
    ) -> Result<f64> {
        let (x, w) = quadrature::gauss_legendre(cfg.order);
        let mut sum = 0.0;
        for (s, wt) in quadrature::mapped(&x, &w, s0, s1) {
            let sol = self.solve(&(a + dn * s), lambda, Some(warm))?;
            sum += wt * self.integrand(&sol, dn);
            *warm = sol;
        }
        Ok(sum)
    }

    /// Adaptive panel breakpoints on `[0, 1]` for the segment `a -> a + dn`.
    fn plan(
        &self,
        a: &DVector<f64>,
        dn: &DVector<f64>,
        lambda: &DVector<f64>,
        cfg: &QuadratureConfig,
        warm: &Solved<S::Point>,
    ) -> Result<Vec<f64>> {
        let mut warm = warm.clone();
        let whole = self.gl_panel(a, dn, lambda, 0.0, 1.0, cfg, &mut warm)?;
        let mut stack = vec![(0.0, 1.0, whole, 0usize)];
        let mut accepted: Vec<(f64, f64)> = Vec::new();
        while let Some((s0, s1, val, depth)) = stack.pop() {
            let mid = 0.5 * (s0 + s1);
            let left = self.gl_panel(a, dn, lambda, s0, mid, cfg, &mut warm)?;
            let right = self.gl_panel(a, dn, lambda, mid, s1, cfg, &mut warm)?;
            if (left + right - val).abs() <= cfg.increment_tol * (1.0 + val.abs()) || depth + 1 >= cfg.max_subdivisions {
                accepted.push((s0, s1));
            } else {
                stack.push((mid, s1, right, depth + 1));
                stack.push((s0, mid, left, depth + 1));
            }
        }
        accepted.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap());
        let mut bps: Vec<f64> = accepted.iter().map(|p| p.0).collect();
        bps.push(1.0);
        Ok(bps)
    }

    /// Line integrals of the pulled-back `theta` along `a -> a + dn` for
    /// `lambda + offset` for every offset, on a shared panel plan.
    fn bundle(
        &self,
        a: &DVector<f64>,
        dn: &DVector<f64>,
        lambda: &DVector<f64>,
        offsets: &[DVector<f64>],
        cfg: &QuadratureConfig,
        warm: &Solved<S::Point>,
    ) -> Result<Vec<f64>> {
        let plan = self.plan(a, dn, lambda, cfg, warm)?;
        let (x, w) = quadrature::gauss_legendre(cfg.order);
        let mut sums = vec![0.0; offsets.len()];
        let mut base_warm = warm.clone();
        for panel in plan.windows(2) {
            for (s, wt) in quadrature::mapped(&x, &w, panel[0], panel[1]) {
                let n = a + dn * s;
                let base = self.solve(&n, lambda, Some(&base_warm))?;
                for (k, off) in offsets.iter().enumerate() {
                    let sol = self.solve(&n, &(lambda + off), Some(&base))?;
                    sums[k] += wt * self.integrand(&sol, dn);
                }
                base_warm = base;
            }
        }
        Ok(sums)
    }

    fn base_n(&self) -> DVector<f64> {
        DVector::zeros(self.n_dim())
    }

    /// Generating function: line integral of `Sigma_lambda^* theta` from the
    /// center projection `n0 = 0` to `n`.
    pub fn generating_w(&self, n: &DVector<f64>, lambda: &DVector<f64>, cfg: &QuadratureConfig) -> Result<f64> {
        cfg.validate()?;
        if n.norm() == 0.0 {
            return Ok(0.0);
        }
        let warm = self.solve(&self.base_n(), lambda, None)?;
        Ok(self.bundle(&self.base_n(), n, lambda, &[DVector::zeros(self.lambda_dim())], cfg, &warm)?[0])
    }

    /// Generating function along an arbitrary polyline starting at `n0 = 0`.
    pub fn generating_w_path(&self, vertices: &[DVector<f64>], lambda: &DVector<f64>, cfg: &QuadratureConfig) -> Result<f64> {
        let mut total = 0.0;
        let mut prev = self.base_n();
        let mut warm = self.solve(&prev, lambda, None)?;
        for v in vertices {
            let dn = v - &prev;
            if dn.norm() > 0.0 {
                total += self.bundle(&prev, &dn, lambda, &[DVector::zeros(self.lambda_dim())], cfg, &warm)?[0];
            }
            warm = self.solve(v, lambda, Some(&warm))?;
            prev = v.clone();
        }
        Ok(total)
    }

    fn fd_offsets(&self, h: f64) -> Vec<DVector<f64>> {
        let l = self.lambda_dim();
        let mut out = Vec::with_capacity(4 * l);
        for j in 0..l {
            for s in [h, -h, 2.0 * h, -2.0 * h] {
                let mut o = DVector::zeros(l);
                o[j] = s;
                out.push(o);
            }
        }
        out
    }

    /// One Richardson level on central differences laid out as `fd_offsets`.
    fn richardson(values: &[f64], h: f64) -> DVector<f64> {
        DVector::from_fn(values.len() / 4, |j, _| {
            let v = &values[4 * j..4 * j + 4];
            let d1 = (v[0] - v[1]) / (2.0 * h);
            let d2 = (v[2] - v[3]) / (4.0 * h);
            (4.0 * d1 - d2) / 3.0
        })
    }

    /// `d Sigma / d lambda_j` at `(n, lambda)` by central differences of `Sigma`.
    fn dsigma_dlambda_fd(&self, base: &Solved<S::Point>, h: f64) -> Result<DMatrix<f64>> {
        let nd = self.n_dim();
        let n = base.target.rows(0, nd).into_owned();
        let lambda = base.target.rows(nd, self.lambda_dim()).into_owned();
        let offsets = self.fd_offsets(h);
        let zs: Vec<DVector<f64>> = offsets
            .iter()
            .map(|o| Ok(self.space.coords(&self.solve(&n, &(&lambda + o), Some(base))?.point).clone()))
            .collect::<Result<_>>()?;
        let d = self.space.dim();
        let mut out = DMatrix::zeros(d, self.lambda_dim());
        for j in 0..self.lambda_dim() {
            let d1 = (&zs[4 * j] - &zs[4 * j + 1]) / (2.0 * h);
            let d2 = (&zs[4 * j + 2] - &zs[4 * j + 3]) / (4.0 * h);
            out.set_column(j, &((d1 * 4.0 - d2) / 3.0));
        }
        Ok(out)
    }

    fn theta_term(&self, base: &Solved<S::Point>, h: f64) -> Result<DVector<f64>> {
        let ds = self.dsigma_dlambda_fd(base, h)?;
        Ok(ds.transpose() * self.space.theta(&base.point))
    }

    fn omega_panel(
        &self,
        a: &DVector<f64>,
        dn: &DVector<f64>,
        lambda: &DVector<f64>,
        s0: f64,
        s1: f64,
        cfg: &QuadratureConfig,
        warm: &mut Solved<S::Point>,
    ) -> Result<DVector<f64>> {
        let (x, w) = quadrature::gauss_legendre(cfg.order);
        let mut sum = DVector::zeros(self.lambda_dim());
        for (s, wt) in quadrature::mapped(&x, &w, s0, s1) {
            let sol = self.solve(&(a + dn * s), lambda, Some(warm))?;
            sum += self.phi_jacobian(&sol) * dn * wt;
            *warm = sol;
        }
        Ok(sum)
    }

    /// `phi` at `n` from `from` by integrating `D phi` along the segment, on
    /// adaptively bisected Gauss-Legendre panels.
    fn phi_state_step(&self, from: &PhiState<S::Point>, n: &DVector<f64>, lambda: &DVector<f64>, cfg: &QuadratureConfig) -> Result<PhiState<S::Point>> {
        let a = &from.n;
        let dn = n - a;
        let mut phi = from.phi.clone();
        if dn.norm() > 0.0 {
            let mut warm = from.base.clone();
            let whole = self.omega_panel(a, &dn, lambda, 0.0, 1.0, cfg, &mut warm)?;
            let mut stack = vec![(0.0, 1.0, whole, 0usize)];
            while let Some((s0, s1, val, depth)) = stack.pop() {
                let mid = 0.5 * (s0 + s1);
                let left = self.omega_panel(a, &dn, lambda, s0, mid, cfg, &mut warm)?;
                let right = self.omega_panel(a, &dn, lambda, mid, s1, cfg, &mut warm)?;
                let both = &left + &right;
                if (&both - &val).norm() <= cfg.increment_tol * (1.0 + val.norm()) || depth + 1 >= cfg.max_subdivisions {
                    phi += both;
                } else {
                    stack.push((mid, s1, right, depth + 1));
                    stack.push((s0, mid, left, depth + 1));
                }
            }
        }
        let base = self.solve(n, lambda, Some(&from.base))?;
        Ok(PhiState { n: n.clone(), phi, base })
    }

    fn phi_state_at_base(&self, lambda: &DVector<f64>, cfg: &QuadratureConfig) -> Result<PhiState<S::Point>> {
        let base = self.solve(&self.base_n(), lambda, None)?;
        let phi = -self.theta_term(&base, cfg.fd_step)?;
        Ok(PhiState { n: self.base_n(), phi, base })
    }

    /// `phi_lambda(n) . z = d_z W(n, lambda) - theta(d_z Sigma(n, lambda))`.
    pub fn phi_lambda(&self, n: &DVector<f64>, lambda: &DVector<f64>, cfg: &QuadratureConfig) -> Result<DVector<f64>> {
        cfg.validate()?;
        let start = self.solve(&self.base_n(), lambda, None)?;
        let w_grad = if n.norm() == 0.0 {
            DVector::zeros(self.lambda_dim())
        } else {
            let sums = self.bundle(&self.base_n(), n, lambda, &self.fd_offsets(cfg.fd_step), cfg, &start)?;
            Self::richardson(&sums, cfg.fd_step)
        };
        let base = self.solve(n, lambda, Some(&start))?;
        Ok(w_grad - self.theta_term(&base, cfg.fd_step)?)
    }

    /// `phi_lambda(n)` from `phi_lambda(0)` plus the integral of its Jacobian
    /// along the segment `0 -> n`.
    pub fn phi_lambda_by_jacobian(&self, n: &DVector<f64>, lambda: &DVector<f64>, cfg: &QuadratureConfig) -> Result<DVector<f64>> {
        cfg.validate()?;
        let start = self.phi_state_at_base(lambda, cfg)?;
        Ok(self.phi_state_step(&start, n, lambda, cfg)?.phi)
    }

    /// Jacobian of `phi_lambda` in `n`, from `D phi(n)[y] . z = omega(D Sigma (y,0), D Sigma (0,z))`.
    pub fn phi_jacobian(&self, s: &Solved<S::Point>) -> DMatrix<f64> {
        let nd = self.n_dim();
        let l = self.lambda_dim();
        let om = self.space.omega(&s.point);
        let y = s.dsigma.columns(0, nd);
        let z = s.dsigma.columns(nd, l);
        z.transpose() * om.transpose() * y
    }

    pub fn phi_jacobian_at(&self, n: &DVector<f64>, lambda: &DVector<f64>) -> Result<DMatrix<f64>> {
        Ok(self.phi_jacobian(&self.solve(n, lambda, None)?))
    }

    /// `<beta_n(lambda), z> = beta(d_z Sigma(n, lambda))`.
    pub fn beta_n(&self, beta: &ChartField<S>, n: &DVector<f64>, lambda: &DVector<f64>, cfg: &QuadratureConfig) -> Result<DVector<f64>> {
        let base = self.solve(n, lambda, None)?;
        let ds = self.dsigma_dlambda_fd(&base, cfg.fd_step)?;
        Ok(ds.transpose() * beta(&base.point))
    }

    /// Max of `|(sigma_lambda)_* Pi_* X - X|` over the samples.
    pub fn hje_residual(&self, lambda: &DVector<f64>, x: &ChartField<S>, samples: &[DVector<f64>]) -> Result<f64> {
        let section = |n: &DVector<f64>| self.sigma_eval(n, lambda);
        hje_residual_section(self.space.as_ref(), &self.pi, &section, x, samples)
    }

    /// Continuation solve of `phi_lambda(gamma(t)) = phi_lambda(gamma0) + t beta`.
    pub fn linear_flow_solve(
        &self,
        lambda: &DVector<f64>,
        gamma0: &DVector<f64>,
        beta_const: &DVector<f64>,
        t_grid: &[f64],
        cfg: &QuadratureConfig,
    ) -> Result<FlowCurve<S::Point>> {
        cfg.validate()?;
        check_grid(t_grid)?;
        let base = self.phi_state_at_base(lambda, cfg)?;
        let start = self.phi_state_step(&base, gamma0, lambda, cfg)?;
        let phi0 = start.phi.clone();
        let gn_tol = 1e-10 * (1.0 + phi0.norm());
        let accept_tol = 1e-9;
        let mut curve = FlowCurve {
            times: vec![t_grid[0]],
            gammas: vec![gamma0.clone()],
            points: vec![start.base.point.clone()],
            linearity: vec![0.0],
            failure: None,
        };
        let mut current = start;
        let mut t_cur = t_grid[0];
        let mut history: Vec<(f64, DVector<f64>)> = vec![(t_cur, gamma0.clone())];
        'grid: for &t_next in &t_grid[1..] {
            let mut dt = t_next - t_cur;
            let mut halvings = 0;
            let mut last_res = 0.0;
            while t_cur < t_next {
                let t_try = if t_cur + dt >= t_next { t_next } else { t_cur + dt };
                let target = &phi0 + beta_const * (t_try - t_grid[0]);
                match self.flow_step(&current, &history, t_try, &target, lambda, cfg, gn_tol, accept_tol) {
                    Ok((state, res)) => {
                        history.push((t_try, state.n.clone()));
                        if history.len() > 3 {
                            history.remove(0);
                        }
                        current = state;
                        t_cur = t_try;
                        last_res = res;
                    }
                    Err(e) => {
                        halvings += 1;
                        if halvings > 12 {
                            curve.failure = Some((t_cur, e.to_string()));
                            break 'grid;
                        }
                        dt *= 0.5;
                    }
                }
            }
            let lin = if cfg.audit {
                let fresh = self.phi_state_step(&base, &current.n, lambda, cfg)?;
                (&fresh.phi - &phi0 - beta_const * (t_next - t_grid[0])).norm()
            } else {
                last_res
            };
            curve.times.push(t_next);
            curve.gammas.push(current.n.clone());
            curve.points.push(current.base.point.clone());
            curve.linearity.push(lin);
        }
        Ok(curve)
    }

    #[allow(clippy::too_many_arguments)]
    fn flow_step(
        &self,
        current: &PhiState<S::Point>,
        history: &[(f64, DVector<f64>)],
        t_try: f64,
        target: &DVector<f64>,
        lambda: &DVector<f64>,
        cfg: &QuadratureConfig,
        gn_tol: f64,
        accept_tol: f64,
    ) -> Result<(PhiState<S::Point>, f64)> {
        // Predictor: polynomial extrapolation of the accepted history, falling
        // back to a linearized step.
        let mut gamma = if history.len() >= 2 {
            extrapolate(history, t_try)
        } else {
            let jac = self.phi_jacobian(&current.base);
            &current.n + linalg::lstsq(&jac, &(target - &current.phi))
        };
        let mut best: Option<(PhiState<S::Point>, f64)> = None;
        for _ in 0..10 {
            let state = self.phi_state_step(current, &gamma, lambda, cfg)?;
            let r = &state.phi - target;
            let rn = r.norm();
            if rn <= gn_tol {
                return Ok((state, rn));
            }
            let jac = self.phi_jacobian(&state.base);
            let delta = linalg::lstsq(&jac, &r);
            let improving = best.as_ref().map(|b| rn < 0.5 * b.1).unwrap_or(true);
            if !improving && best.as_ref().map(|b| b.1 <= accept_tol).unwrap_or(false) {
                break;
            }
            if best.as_ref().map(|b| rn < b.1).unwrap_or(true) {
                best = Some((state, rn));
            }
            gamma -= delta;
        }
        match best {
            Some((s, rn)) if rn <= accept_tol => Ok((s, rn)),
            Some((_, rn)) => Err(Error::Continuation { t: t_try, reason: format!("Gauss-Newton residual {rn:.3e}") }),
            None => Err(Error::Continuation { t: t_try, reason: "no iterate".into() }),
        }
    }

    /// Integrates `X` through `p0` by quadratures: `Gamma(t) = Sigma(gamma(t), lambda)`.
    pub fn integrate_by_quadratures(
        &self,
        x: &ChartField<S>,
        beta: &ChartField<S>,
        p0: &S::Point,
        t_grid: &[f64],
        cfg: &QuadratureConfig,
    ) -> Result<TrajectorySample> {
        check_grid(t_grid)?;
        self.check_hypotheses(x, beta, p0)?;
        let lambda = self.lambda_of(p0);
        let gamma0 = self.pi_of(p0);
        let beta_const = self.beta_n(beta, &gamma0, &lambda, cfg)?;
        let curve = self.linear_flow_solve(&lambda, &gamma0, &beta_const, t_grid, cfg)?;
        let mut sample = TrajectorySample::new(self.space.state_labels());
        for (t, p) in curve.times.iter().zip(&curve.points) {
            sample.push(*t, self.space.serialize(p));
        }
        let f0 = self.f.eval(p0);
        let drift: Vec<f64> = curve.points.iter().map(|p| (self.f.eval(p) - &f0).norm()).collect();
        let flow = flow_residuals(self.space.as_ref(), &curve.times, &curve.points, x);
        sample.set_diagnostic("flow_residual", &flow);
        sample.set_diagnostic("f_drift", &drift);
        sample.set_diagnostic("linearity_residual", &curve.linearity);
        if let Some((t, reason)) = &curve.failure {
            sample.failure = Some(format!("continuation stopped at t = {t}: {reason}"));
        }
        Ok(sample)
    }

    /// Integrability hypotheses (`F_* X = 0`, isotropic `Ker F_*`, `i_X omega = beta`,
    /// `L_X beta = 0`), checked numerically at `p0` and at the chart center.
    pub fn check_hypotheses(&self, x: &ChartField<S>, beta: &ChartField<S>, p0: &S::Point) -> Result<()> {
        let space = self.space.as_ref();
        let df = self.f.jacobian(space, p0)?;
        let xv = x(p0);
        let fx = (&df * &xv).norm();
        if fx > 1e-8 {
            return Err(Error::Hypothesis { name: "F_* X = 0".into(), value: fx, tol: 1e-8 });
        }
        let iso = isotropy_residual(space, &self.f, &self.center)?;
        if iso > 1e-8 {
            return Err(Error::Hypothesis { name: "Ker F_* isotropic".into(), value: iso, tol: 1e-8 });
        }
        let ix = (self.space.omega(p0).transpose() * &xv - beta(p0)).norm();
        if ix > 1e-8 {
            return Err(Error::Hypothesis { name: "i_X omega = beta".into(), value: ix, tol: 1e-8 });
        }
        let lie = lie_derivative(space, x, beta, p0)?.norm();
        if lie > 1e-5 {
            return Err(Error::Hypothesis { name: "L_X beta = 0".into(), value: lie, tol: 1e-5 });
        }
        Ok(())
    }
}

fn check_grid(t_grid: &[f64]) -> Result<()> {
    if t_grid.len() < 2 || t_grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Invalid("time grid must be strictly increasing with at least two points".into()));
    }
    Ok(())
}

/// Lagrange extrapolation of the last accepted `(t, gamma)` pairs.
fn extrapolate(history: &[(f64, DVector<f64>)], t: f64) -> DVector<f64> {
    let mut out = DVector::zeros(history[0].1.len());
    for (i, (ti, gi)) in history.iter().enumerate() {
        let mut w = 1.0;
        for (j, (tj, _)) in history.iter().enumerate() {
            if i != j {
                w *= (t - tj) / (ti - tj);
            }
        }
        out += gi * w;
    }
    out
}

/// Max pairwise `|omega(v_i, v_j)|` over an SVD basis of `Ker F_*` at `p`.
pub fn isotropy_residual<S: PhaseSpace>(space: &S, f: &FirstIntegralsMap<S>, p: &S::Point) -> Result<f64> {
    let k = linalg::null_space(&f.jacobian(space, p)?, RANK_TOL);
    if k.ncols() == 0 {
        return Ok(0.0);
    }
    let m = k.transpose() * space.omega(p) * &k;
    Ok(m.amax())
}

/// `(L_X beta)_j = X^i d_i beta_j + beta_i d_j X^i`, by central differences.
pub fn lie_derivative<S: PhaseSpace>(space: &S, x: &ChartField<S>, beta: &ChartField<S>, p: &S::Point) -> Result<DVector<f64>> {
    let z = space.coords(p).clone();
    let d = z.len();
    let xv = x(p);
    let bv = beta(p);
    let mut dx = DMatrix::zeros(d, d);
    let mut db = DMatrix::zeros(d, d);
    for i in 0..d {
        let h = 1e-5 * (1.0 + z[i].abs());
        let mut zp = z.clone();
        zp[i] += h;
        let mut zm = z.clone();
        zm[i] -= h;
        let pp = space.locate(&zp, Some(p))?;
        let pm = space.locate(&zm, Some(p))?;
        dx.set_column(i, &((x(&pp) - x(&pm)) / (2.0 * h)));
        db.set_column(i, &((beta(&pp) - beta(&pm)) / (2.0 * h)));
    }
    Ok(db * &xv + dx.transpose() * bv)
}

/// Residual of the Pi-HJE for an arbitrary section `n -> point`.
pub fn hje_residual_section<S: PhaseSpace>(
    space: &S,
    pi: &TransversalPi,
    section: &dyn Fn(&DVector<f64>) -> Result<S::Point>,
    x: &ChartField<S>,
    samples: &[DVector<f64>],
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for n in samples {
        let p = section(n)?;
        let xv = x(&p);
        let u = &pi.matrix * &xv;
        let h = 1e-5;
        let zp = space.coords(&section(&(n + &u * h))?).clone();
        let zm = space.coords(&section(&(n - &u * h))?).clone();
        let push = (zp - zm) / (2.0 * h);
        worst = worst.max((push - xv).norm());
    }
    Ok(worst)
}

/// `|Gamma'(t) - X(Gamma(t))|` with stencil derivatives on chart coordinates;
/// non-interior rows use one-sided stencils.
pub fn flow_residuals<S: PhaseSpace>(space: &S, times: &[f64], points: &[S::Point], x: &ChartField<S>) -> Vec<f64> {
    if times.len() < 2 {
        return vec![0.0; times.len()];
    }
    let zs: Vec<DVector<f64>> = points.iter().map(|p| space.coords(p).clone()).collect();
    stencil_derivative(times, &zs)
        .into_iter()
        .zip(points)
        .map(|((d, _), p)| (d - x(p)).norm())
        .collect()
}

/// Which rows of a trajectory get the centered stencil.
pub fn interior_rows(len: usize) -> std::ops::Range<usize> {
    if len < 5 {
        0..0
    } else {
        2..len - 2
    }
}

/// Flat `R^{2m}` with `omega = dq ^ dp` and `theta = p dq`; coordinates `(q, p)`.
#[derive(Clone, Debug)]
pub struct FlatSpace {
    pub half_dim: usize,
}

impl PhaseSpace for FlatSpace {
    type Point = DVector<f64>;

    fn dim(&self) -> usize {
        2 * self.half_dim
    }

    fn locate(&self, z: &DVector<f64>, _near: Option<&Self::Point>) -> Result<Self::Point> {
        if z.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: z.len() });
        }
        Ok(z.clone())
    }

    fn coords<'a>(&self, p: &'a Self::Point) -> &'a DVector<f64> {
        p
    }

    fn theta(&self, p: &Self::Point) -> DVector<f64> {
        let m = self.half_dim;
        DVector::from_fn(2 * m, |i, _| if i < m { p[m + i] } else { 0.0 })
    }

    fn omega(&self, _p: &Self::Point) -> DMatrix<f64> {
        let m = self.half_dim;
        let mut om = DMatrix::zeros(2 * m, 2 * m);
        for i in 0..m {
            om[(i, m + i)] = 1.0;
            om[(m + i, i)] = -1.0;
        }
        om
    }

    fn state_labels(&self) -> Vec<String> {
        let m = self.half_dim;
        (0..m).map(|i| format!("q{i}")).chain((0..m).map(|i| format!("p{i}"))).collect()
    }

    fn serialize(&self, p: &Self::Point) -> Vec<f64> {
        p.as_slice().to_vec()
    }
}
