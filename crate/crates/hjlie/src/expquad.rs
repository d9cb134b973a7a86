//! Exponential curves computed by quadratures on `T*G`, plus regularity scans.
//!
//! Nothing reachable from [`exp_by_quadratures`] may call the exponential
//! oracle; the whole pass runs inside a [`QuadratureScope`] and a violation is
//! reported as an error.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::cotangent::{CotangentBundle, PhasePoint};
use crate::error::{Error, Result};
use crate::hjsolver::{CompleteSolutionChart, NewtonConfig, QuadratureConfig};
use crate::liealg::{bflat, bsharp_form, casimir_from_point, AlgVector, CasimirForm, CoVector, LieAlgebra};
use crate::liegroup::purity::{self, QuadratureScope};
use crate::liegroup::{GroupElement, MatrixGroup};
use crate::linalg;

/// Sampled curve `t -> exp(t xi)`.
#[derive(Clone, Debug)]
pub struct ExpCurve {
    pub times: Vec<f64>,
    pub elements: Vec<GroupElement>,
    /// Number of squarings used to reach each time (0 for direct continuation).
    pub squarings: Vec<u32>,
    /// Largest time reached by continuation in the chart at `(e, alpha)`.
    pub direct_reach: f64,
    pub flow_residual: f64,
    pub linearity_residual: f64,
}

const CANDIDATES: usize = 1024;

fn check_exp_grid(t_grid: &[f64]) -> Result<()> {
    if t_grid.len() < 2 || t_grid[0] != 0.0 || t_grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Invalid("time grid must start at 0 and increase strictly".into()));
    }
    Ok(())
}

/// `exp(t phi(alpha))` as the group component of the flow of `X^phi` from
/// `(e, alpha)`, integrated by quadratures.
pub fn exp_by_quadratures(
    group: &MatrixGroup,
    phi: &CasimirForm,
    alpha: &CoVector,
    t_grid: &[f64],
    cfg: &QuadratureConfig,
) -> Result<ExpCurve> {
    check_exp_grid(t_grid)?;
    let before = purity::violations_this_thread();
    let result = {
        let _scope = QuadratureScope::enter();
        exp_inner(group, phi, alpha, t_grid, cfg)
    };
    let after = purity::violations_this_thread();
    if after != before {
        return Err(Error::Invalid(format!("{} exponential oracle call(s) inside the quadrature path", after - before)));
    }
    result
}

fn exp_inner(
    group: &MatrixGroup,
    phi: &CasimirForm,
    alpha: &CoVector,
    t_grid: &[f64],
    cfg: &QuadratureConfig,
) -> Result<ExpCurve> {
    let alg = group.algebra();
    if alpha.len() != alg.dim() {
        return Err(Error::DimensionMismatch { expected: alg.dim(), got: alpha.len() });
    }
    if !alg.is_coadjoint_regular(alpha) {
        return Err(Error::NotRegular { dim: alg.isotropy_dim(alpha), generic: alg.generic_isotropy_dim() });
    }
    if !phi.contains(alpha) {
        return Err(Error::OutsideDomain { distance: (alpha - &phi.domain_center).norm(), radius: phi.domain_radius });
    }
    let bundle = CotangentBundle::new(group.clone());
    let field = bundle.build_casimir_field(phi)?;
    let e = group.identity();
    let space = Arc::new(bundle.chart(&e)?);
    let center = space.from_phase(&PhasePoint { g: e.clone(), alpha: alpha.clone() })?;
    let f = space.first_integrals();
    let cs = CompleteSolutionChart::new(space.clone(), f, center.clone(), NewtonConfig::default())?;
    let x = space.field(&field);
    let beta = space.pi_star(phi);

    let m = group.vec_len();
    let element_of = |state: &DVector<f64>| group.element(group.devectorize(&state.as_slice()[..m]));

    let direct = cs.integrate_by_quadratures(&x, &beta, &center, t_grid, cfg)?;
    let reach = *direct.times.last().expect("nonempty");
    let mut flow = interior_max(&direct.diagnostic("flow_residual").unwrap_or_default());
    let mut lin = direct.max_diagnostic("linearity_residual");
    let mut elements = Vec::with_capacity(t_grid.len());
    let mut squarings = Vec::with_capacity(t_grid.len());
    for i in 0..direct.len() {
        elements.push(element_of(&direct.state(i))?);
        squarings.push(0);
    }
    if direct.len() < t_grid.len() {
        if reach <= 0.0 {
            return Err(Error::Continuation {
                t: 0.0,
                reason: direct.failure.clone().unwrap_or_else(|| "no progress".into()),
            });
        }
        // g(t) = g(t / 2^k)^(2^k) with t / 2^k well inside the reached
        // interval; the limit halves if the auxiliary pass still falls short.
        let rest = &t_grid[direct.len()..];
        let mut limit = 0.5 * reach;
        let (plan, aux, extra) = loop {
            let plan: Vec<(f64, u32)> = rest
                .iter()
                .map(|&t| {
                    let mut k = 0u32;
                    let mut s = t;
                    while s > limit {
                        s *= 0.5;
                        k += 1;
                    }
                    (s, k)
                })
                .collect();
            let mut aux: Vec<f64> = plan.iter().map(|p| p.0).collect();
            aux.push(0.0);
            aux.sort_by(|a, b| a.partial_cmp(b).unwrap());
            aux.dedup();
            let extra = cs.integrate_by_quadratures(&x, &beta, &center, &aux, cfg)?;
            if extra.len() == aux.len() {
                break (plan, aux, extra);
            }
            let stopped = *extra.times.last().unwrap();
            if limit < 1e-3 * reach {
                return Err(Error::Continuation {
                    t: stopped,
                    reason: extra.failure.clone().unwrap_or_else(|| "auxiliary pass failed".into()),
                });
            }
            limit *= 0.5;
        };
        flow = flow.max(interior_max(&extra.diagnostic("flow_residual").unwrap_or_default()));
        lin = lin.max(extra.max_diagnostic("linearity_residual"));
        for (s, k) in plan {
            let idx = aux.iter().position(|&a| a == s).expect("planned node");
            let mut g = element_of(&extra.state(idx))?;
            for _ in 0..k {
                g = group.compose(&g, &g)?;
            }
            elements.push(g);
            squarings.push(k);
        }
    }
    Ok(ExpCurve { times: t_grid.to_vec(), elements, squarings, direct_reach: reach, flow_residual: flow, linearity_residual: lin })
}

fn interior_max(values: &[f64]) -> f64 {
    crate::hjsolver::interior_rows(values.len()).map(|i| values[i]).fold(0.0, f64::max)
}

/// `exp(t xi)` via `alpha = B^flat(xi)` and `phi = B^#`, so `phi(alpha) = xi`.
pub fn exp_semisimple(group: &MatrixGroup, xi: &AlgVector, t_grid: &[f64], cfg: &QuadratureConfig) -> Result<ExpCurve> {
    let alg = group.algebra();
    let phi = bsharp_form(alg)?;
    let alpha = bflat(alg, xi);
    if !alg.is_coadjoint_regular(&alpha) {
        return Err(Error::NotRegular { dim: alg.isotropy_dim(&alpha), generic: alg.generic_isotropy_dim() });
    }
    exp_by_quadratures(group, &phi, &alpha, t_grid, cfg)
}

/// Outcome of the search for a regular `alpha0` annihilating `ad_xi(g)`.
#[derive(Clone, Debug, PartialEq)]
pub enum Admissible {
    Found(CoVector),
    ProvenEmpty,
    Exhausted,
}

/// Orthonormal basis of the annihilator of `ad_xi(g)`, i.e. `{alpha : ad*_xi alpha = 0}`.
pub fn annihilator(a: &LieAlgebra, xi: &AlgVector) -> DMatrix<f64> {
    linalg::null_space(&a.ad_matrix(xi).transpose(), linalg::RANK_TOL)
}

/// Seeded search for a coadjoint-regular `alpha0` with `ad*_xi alpha0 = 0`.
///
/// Emptiness is proven when the isotropy matrices of the annihilator basis can
/// not reach the generic rank: `M(alpha)` is linear in `alpha`, so its rank is
/// bounded by the ranks of the stacked `M(q_i)` side by side and on top of each other.
pub fn find_admissible(a: &LieAlgebra, xi: &AlgVector, seed: u64) -> Admissible {
    let q = annihilator(a, xi);
    let n = a.dim();
    let generic_rank = n - a.generic_isotropy_dim();
    if q.ncols() == 0 {
        return Admissible::ProvenEmpty;
    }
    let mats: Vec<DMatrix<f64>> = (0..q.ncols()).map(|i| a.isotropy_matrix(&q.column(i).into_owned())).collect();
    let mut horiz = DMatrix::zeros(n, n * mats.len());
    let mut vert = DMatrix::zeros(n * mats.len(), n);
    for (i, m) in mats.iter().enumerate() {
        horiz.view_mut((0, n * i), (n, n)).copy_from(m);
        vert.view_mut((n * i, 0), (n, n)).copy_from(m);
    }
    let scale = mats.iter().map(|m| m.norm()).fold(0.0, f64::max).max(a.isotropy_matrix(&DVector::from_element(n, 1.0)).norm());
    let bound = linalg::rank_scaled(&horiz, linalg::RANK_TOL, scale).min(linalg::rank_scaled(&vert, linalg::RANK_TOL, scale));
    if bound < generic_rank {
        return Admissible::ProvenEmpty;
    }
    let mut rng = linalg::rng(seed);
    for _ in 0..CANDIDATES {
        let c = linalg::unit_sphere(&mut rng, q.ncols());
        let alpha = &q * c;
        if a.is_coadjoint_regular(&alpha) {
            return Admissible::Found(alpha);
        }
    }
    Admissible::Exhausted
}

pub const ADMISSIBLE_SEED: u64 = 0xad_0;

/// `exp(t xi)` through a local Casimir built at a regular `alpha0` in the
/// annihilator of `ad_xi(g)`.
pub fn exp_general(group: &MatrixGroup, xi: &AlgVector, t_grid: &[f64], cfg: &QuadratureConfig) -> Result<ExpCurve> {
    let alg = group.algebra();
    match find_admissible(alg, xi, ADMISSIBLE_SEED) {
        Admissible::Found(alpha0) => {
            let phi = casimir_from_point(alg, xi, &alpha0)?;
            exp_by_quadratures(group, &phi, &alpha0, t_grid, cfg)
        }
        Admissible::ProvenEmpty => Err(Error::NoAdmissible { proven: true }),
        Admissible::Exhausted => Err(Error::NoAdmissible { proven: false }),
    }
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct ScanReport {
    pub algebra: String,
    pub samples: usize,
    pub seed: u64,
    pub generic_isotropy_dim: usize,
    pub regular_fraction: f64,
    /// Isotropy dimension -> count.
    pub strata: BTreeMap<usize, usize>,
}

/// Deterministic scan points: standard normal samples, with every fourth one
/// placed on a coordinate hyperplane (cycling through coordinates) so that
/// lower strata are visited.
pub fn scan_points(n: usize, samples: usize, seed: u64) -> Vec<CoVector> {
    let mut rng = linalg::rng(seed);
    (0..samples)
        .map(|i| {
            let mut v = linalg::normal_vector(&mut rng, n);
            if i % 4 == 3 {
                v[(i / 4) % n] = 0.0;
            }
            v
        })
        .collect()
}

pub fn regular_scan(a: &LieAlgebra, n_samples: usize, seed: u64) -> ScanReport {
    let mut strata = BTreeMap::new();
    let mut regular = 0;
    let generic = a.generic_isotropy_dim();
    for alpha in scan_points(a.dim(), n_samples, seed) {
        let d = a.isotropy_dim(&alpha);
        *strata.entry(d).or_insert(0) += 1;
        if d == generic {
            regular += 1;
        }
    }
    ScanReport {
        algebra: a.name().to_string(),
        samples: n_samples,
        seed,
        generic_isotropy_dim: generic,
        regular_fraction: if n_samples == 0 { 0.0 } else { regular as f64 / n_samples as f64 },
        strata,
    }
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct XiClassification {
    pub xi: Vec<f64>,
    /// `ad_xi(g)^0` meets the regular set.
    pub nonempty: bool,
    pub proven_empty: bool,
    pub reading_equal: bool,
    pub reading_zero: bool,
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct HeisenbergReport {
    pub samples: usize,
    pub seed: u64,
    /// Agreements of the computed classification with the reading `a1 = a2`.
    pub matches_equal_reading: usize,
    /// Agreements with the reading `a1 = a2 = 0`.
    pub matches_zero_reading: usize,
    pub matching_reading: String,
    pub cases: Vec<XiClassification>,
}

/// Classifies Heisenberg directions `xi = (a1, a2, a3)` by whether the
/// annihilator of `ad_xi(g)` contains regular covectors, and compares the
/// result with both readings of the boundary condition.
pub fn heisenberg_scan(n_xi_samples: usize, seed: u64) -> Result<HeisenbergReport> {
    let a = crate::liealg::make_algebra("heis3")?;
    let mut xis: Vec<DVector<f64>> = [[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 1.0]]
        .iter()
        .map(|v| DVector::from_row_slice(v))
        .collect();
    let mut rng = linalg::rng(seed);
    for i in 0..n_xi_samples {
        let mut v = linalg::normal_vector(&mut rng, 3);
        match i % 3 {
            1 => v[1] = v[0],
            2 if i % 6 == 5 => {
                v[0] = 0.0;
                v[1] = 0.0;
            }
            _ => {}
        }
        xis.push(v);
    }
    let mut cases = Vec::with_capacity(xis.len());
    let (mut eq_ok, mut zero_ok) = (0, 0);
    for xi in xis {
        let found = find_admissible(&a, &xi, ADMISSIBLE_SEED);
        let nonempty = matches!(found, Admissible::Found(_));
        let reading_equal = xi[0] == xi[1];
        let reading_zero = xi[0] == 0.0 && xi[1] == 0.0;
        eq_ok += usize::from(reading_equal == nonempty);
        zero_ok += usize::from(reading_zero == nonempty);
        cases.push(XiClassification {
            xi: xi.as_slice().to_vec(),
            nonempty,
            proven_empty: found == Admissible::ProvenEmpty,
            reading_equal,
            reading_zero,
        });
    }
    let total = cases.len();
    let matching_reading = match (eq_ok == total, zero_ok == total) {
        (true, true) => "both",
        (true, false) => "a1 = a2",
        (false, true) => "a1 = a2 = 0",
        (false, false) => "neither",
    }
    .to_string();
    Ok(HeisenbergReport {
        samples: total,
        seed,
        matches_equal_reading: eq_ok,
        matches_zero_reading: zero_ok,
        matching_reading,
        cases,
    })
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct StrataCheck {
    pub samples: usize,
    pub on_plane: usize,
    pub off_plane: usize,
    /// Points whose isotropy dimension differs from `3 if alpha3 = 0 else 1`.
    pub mismatches: usize,
}

/// Heisenberg strata over [`scan_points`]: dimension 3 exactly on `alpha3 = 0`.
pub fn heisenberg_strata(samples: usize, seed: u64) -> Result<StrataCheck> {
    let a = crate::liealg::make_algebra("heis3")?;
    let mut out = StrataCheck { samples, on_plane: 0, off_plane: 0, mismatches: 0 };
    for alpha in scan_points(3, samples, seed) {
        let on = alpha[2] == 0.0;
        if on {
            out.on_plane += 1;
        } else {
            out.off_plane += 1;
        }
        let expect = if on { 3 } else { 1 };
        if a.isotropy_dim(&alpha) != expect {
            out.mismatches += 1;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::liealg::make_algebra;
    use crate::liegroup::make_group;
    use nalgebra::Complex;

    fn grid(n: usize) -> Vec<f64> {
        (0..=n).map(|i| i as f64 / n as f64).collect()
    }

    fn rodrigues_z(theta: f64) -> DMatrix<f64> {
        let (s, c) = theta.sin_cos();
        DMatrix::from_row_slice(3, 3, &[c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0])
    }

    fn real(g: &GroupElement) -> DMatrix<f64> {
        g.matrix().map(|z| z.re)
    }

    #[test]
    fn so3_rotation_about_z() {
        let g = make_group("so3").unwrap();
        let cfg = QuadratureConfig::default();
        let c = exp_semisimple(&g, &DVector::from_vec(vec![0.0, 0.0, 1.0]), &grid(16), &cfg).unwrap();
        assert!((real(&c.elements[0]) - DMatrix::identity(3, 3)).norm() < 1e-12);
        for (t, e) in c.times.iter().zip(&c.elements) {
            assert!((real(e) - rodrigues_z(*t)).norm() <= 1e-6);
        }
        assert!(c.squarings.iter().all(|&k| k == 0));
    }

    #[test]
    fn bsharp_rescaled_form() {
        // phi = s B^# with s chosen so that phi(alpha) = e3 for alpha = e3*.
        let g = make_group("so3").unwrap();
        let phi = bsharp_form(g.algebra()).unwrap();
        let alpha = DVector::from_vec(vec![0.0, 0.0, 1.0]);
        let s = 1.0 / phi.eval(&alpha)[2];
        let c = exp_by_quadratures(&g, &phi.scaled(s), &alpha, &grid(8), &QuadratureConfig::default()).unwrap();
        for (t, e) in c.times.iter().zip(&c.elements) {
            assert!((real(e) - rodrigues_z(*t)).norm() <= 1e-6);
        }
    }

    #[test]
    fn su2_matches_oracle_and_stays_unitary() {
        let g = make_group("su2").unwrap();
        let xi = DVector::from_vec(vec![0.4, -0.3, 0.5]);
        let c = exp_semisimple(&g, &xi, &grid(8), &QuadratureConfig::default()).unwrap();
        for (t, e) in c.times.iter().zip(&c.elements) {
            let o = g.matrix_exp_oracle(&xi, *t);
            assert!((e.matrix() - o.matrix()).norm() <= 1e-6);
            assert!(g.membership_residual(e.matrix()) <= 1e-8);
        }
    }

    #[test]
    fn sl2r_hyperbolic_direction() {
        let g = make_group("sl2r").unwrap();
        let xi = DVector::from_vec(vec![0.6, 0.2, -0.1]);
        let c = exp_semisimple(&g, &xi, &grid(8), &QuadratureConfig::default()).unwrap();
        for (t, e) in c.times.iter().zip(&c.elements) {
            let o = g.matrix_exp_oracle(&xi, *t);
            assert!((e.matrix() - o.matrix()).norm() <= 1e-6);
            let m = e.matrix();
            let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
            assert!((det - Complex::new(1.0, 0.0)).norm() <= 1e-8);
        }
    }

    #[test]
    fn non_regular_direction_is_rejected() {
        let g = make_group("so3").unwrap();
        let e = exp_semisimple(&g, &DVector::zeros(3), &grid(4), &QuadratureConfig::default()).unwrap_err();
        assert!(matches!(e, Error::NotRegular { dim: 3, generic: 1 }));
    }

    #[test]
    fn heisenberg_general_exponential() {
        let g = make_group("heis3").unwrap();
        let cfg = QuadratureConfig::default();
        let c = exp_general(&g, &DVector::from_vec(vec![0.0, 0.0, 1.0]), &grid(8), &cfg).unwrap();
        for (t, e) in c.times.iter().zip(&c.elements) {
            let mut expect = DMatrix::identity(3, 3);
            expect[(0, 2)] = *t;
            assert!((real(e) - expect).norm() <= 1e-8);
        }
        let err = exp_general(&g, &DVector::from_vec(vec![1.0, 0.0, 0.0]), &grid(4), &cfg).unwrap_err();
        assert_eq!(err, Error::NoAdmissible { proven: true });
    }

    #[test]
    fn general_and_semisimple_agree() {
        let g = make_group("so3").unwrap();
        let xi = DVector::from_vec(vec![0.2, 0.5, -0.4]);
        let cfg = QuadratureConfig::default();
        let a = exp_semisimple(&g, &xi, &grid(8), &cfg).unwrap();
        let b = exp_general(&g, &xi, &grid(8), &cfg).unwrap();
        for (x, y) in a.elements.iter().zip(&b.elements) {
            assert!((x.matrix() - y.matrix()).norm() <= 1e-8);
        }
    }

    #[test]
    fn oracle_is_not_reached_from_quadrature_path() {
        let g = make_group("so3").unwrap();
        let before = purity::oracle_calls_this_thread();
        exp_semisimple(&g, &DVector::from_vec(vec![0.1, 0.2, 0.3]), &grid(4), &QuadratureConfig::default()).unwrap();
        assert_eq!(purity::oracle_calls_this_thread(), before);
    }

    #[test]
    fn squaring_extends_past_the_chart() {
        let g = make_group("so3").unwrap();
        let xi = DVector::from_vec(vec![0.0, 0.0, 1.0]);
        let ts: Vec<f64> = (0..=12).map(|i| i as f64 * 0.5).collect();
        let c = exp_semisimple(&g, &xi, &ts, &QuadratureConfig::default()).unwrap();
        for (t, e) in c.times.iter().zip(&c.elements) {
            assert!((real(e) - rodrigues_z(*t)).norm() <= 1e-6, "t = {t}");
        }
    }

    #[test]
    fn scans() {
        let r = regular_scan(&make_algebra("rn:3").unwrap(), 100, 1);
        assert_eq!(r.regular_fraction, 1.0);
        assert_eq!(r.strata.keys().copied().collect::<Vec<_>>(), vec![3]);
        let s = regular_scan(&make_algebra("so3").unwrap(), 1000, 1);
        assert_eq!(s.generic_isotropy_dim, 1);
        assert_eq!(s.strata.get(&1), Some(&1000));
        let h = regular_scan(&make_algebra("heis3").unwrap(), 10_000, 7);
        assert!(h.regular_fraction > 0.9);
        assert_eq!(h.strata.keys().copied().collect::<Vec<_>>(), vec![1, 3]);
        let st = heisenberg_strata(10_000, 7).unwrap();
        assert_eq!(st.mismatches, 0);
        assert!(st.on_plane > 0);
    }

    #[test]
    fn heisenberg_classification() {
        let r = heisenberg_scan(60, 3).unwrap();
        assert!(r.cases[0].nonempty);
        assert!(!r.cases[1].nonempty && r.cases[1].proven_empty);
        assert!(!r.cases[2].nonempty);
        assert_eq!(r.matching_reading, "a1 = a2 = 0");
    }
}
