//! The `check` command: module invariants over the catalogue.

use std::sync::Arc;

use hjlie::cotangent::{CotangentBundle, PhasePoint};
use hjlie::expquad::{exp_general, exp_semisimple, find_admissible, heisenberg_strata, Admissible};
use hjlie::hjsolver::{hje_residual_section, CompleteSolutionChart, NewtonConfig, QuadratureConfig};
use hjlie::liealg::{bflat, bsharp_form, casimir_check, make_algebra};
use hjlie::liegroup::make_group;
use hjlie::linalg::{self, RANK_TOL};
use hjlie::ode::dopri45;
use hjlie::reconstruct::{
    build_theta, check_system, interior_flow_residual, two_step_reconstruct, usual_reconstruct, vertical_integrate,
    InvariantSystem, SectionKind, So3R3System, TStarSystem,
};
use nalgebra::DVector;
use serde_json::json;

use crate::commands::Outcome;
use crate::config::{Format, RunConfig};
use crate::output::{self, Gate};

pub const ALGEBRAS: &[&str] = &["so3", "su2", "sl2r", "heis3", "rn:3"];
pub const SEMISIMPLE: &[&str] = &["so3", "su2", "sl2r"];

fn push(out: &mut Vec<Gate>, name: String, r: hjlie::Result<Gate>) {
    out.push(r.unwrap_or_else(|e| Gate { name: format!("{name}: {e}"), value: f64::NAN, tol: 0.0, pass: false }));
}

fn grid(n: usize) -> Vec<f64> {
    (0..=n).map(|i| i as f64 / n as f64).collect()
}

/// A regular covector used as the base of phase-space samples.
pub fn base_covector(key: &str) -> DVector<f64> {
    match key {
        "heis3" => DVector::from_vec(vec![0.2, -0.1, 1.0]),
        _ => DVector::from_vec(vec![0.3, -0.5, 0.8]),
    }
}

pub fn algebra_suite(seed: u64) -> Vec<Gate> {
    let mut out = Vec::new();
    for key in ALGEBRAS {
        let a = make_algebra(key).expect("catalogue algebra");
        out.push(Gate::at_most(&format!("liealg.{key}.jacobi"), a.jacobi_residual(), 1e-12));
        out.push(Gate::at_most(&format!("liealg.{key}.killing_invariance"), a.killing_invariance_residual(50, seed), 1e-12));
        let g = make_group(key).expect("catalogue group");
        out.push(Gate::at_most(&format!("liegroup.{key}.commutators"), g.commutator_consistency(), 1e-12));
    }
    for key in SEMISIMPLE {
        let a = make_algebra(key).expect("catalogue algebra");
        let mut rng = linalg::rng(seed);
        let alphas: Vec<_> = (0..100).map(|_| linalg::normal_vector(&mut rng, 3)).collect();
        push(&mut out, format!("liealg.{key}.bsharp_casimir"), (|| {
            let r = casimir_check(&a, &bsharp_form(&a)?, &alphas)?;
            Ok(Gate::at_most(&format!("liealg.{key}.bsharp_casimir"), r, 1e-12))
        })());
    }
    for key in ["so3", "sl2r"] {
        let a = make_algebra(key).expect("catalogue algebra");
        let mut rng = linalg::rng(seed ^ 0xbf);
        let mut bad = 0;
        let mut checked = 0;
        while checked < 100 {
            let xi = linalg::normal_vector(&mut rng, 3);
            let adjoint_regular = linalg::rank(&a.ad_matrix(&xi), RANK_TOL) == 2;
            if adjoint_regular != a.is_coadjoint_regular(&bflat(&a, &xi)) {
                bad += 1;
            }
            checked += 1;
        }
        out.push(Gate::at_most(&format!("liealg.{key}.bflat_regularity"), bad as f64, 0.0));
    }
    out
}

pub fn cotangent_suite(seed: u64, points: usize) -> Vec<Gate> {
    let mut out = Vec::new();
    for key in ALGEBRAS {
        let b = CotangentBundle::new(make_group(key).expect("catalogue group"));
        let name = format!("cotangent.{key}.ker_f_isotropy");
        push(&mut out, name.clone(), (|| {
            let mut worst: f64 = 0.0;
            for p in b.sample_points(seed, points, &base_covector(key), 0.5) {
                worst = worst.max(b.ker_f_isotropy(&p)?.1);
            }
            Ok(Gate::at_most(&name, worst, 1e-8))
        })());
    }
    out
}

pub fn expquad_suite(seed: u64) -> Vec<Gate> {
    let mut out = Vec::new();
    let cfg = QuadratureConfig::default();
    let t = grid(16);
    for key in SEMISIMPLE {
        let g = make_group(key).expect("catalogue group");
        let name = format!("expquad.{key}.oracle");
        push(&mut out, name.clone(), (|| {
            let mut rng = linalg::rng(seed);
            let mut worst: f64 = 0.0;
            for _ in 0..3 {
                let xi = linalg::unit_sphere(&mut rng, 3) * 0.8;
                let c = exp_semisimple(&g, &xi, &t, &cfg)?;
                for (ti, e) in t.iter().zip(&c.elements) {
                    worst = worst.max((e.matrix() - g.matrix_exp_oracle(&xi, *ti).matrix()).norm());
                }
            }
            Ok(Gate::at_most(&name, worst, 1e-6))
        })());
    }
    let heis = make_group("heis3").expect("catalogue group");
    push(&mut out, "expquad.heis3.strata".into(), heisenberg_strata(10_000, seed).map(|s| {
        Gate::at_most("expquad.heis3.strata", s.mismatches as f64, 0.0)
    }));
    let xi1 = DVector::from_vec(vec![1.0, 0.0, 0.0]);
    out.push(Gate::flag(
        "expquad.heis3.xi1_proven_empty",
        find_admissible(heis.algebra(), &xi1, hjlie::expquad::ADMISSIBLE_SEED) == Admissible::ProvenEmpty,
    ));
    push(&mut out, "expquad.heis3.xi3_closed_form".into(), (|| {
        let xi3 = DVector::from_vec(vec![0.0, 0.0, 1.0]);
        let c = exp_general(&heis, &xi3, &t, &cfg)?;
        let mut worst: f64 = 0.0;
        for (ti, e) in t.iter().zip(&c.elements) {
            let mut m = heis.identity().matrix().clone();
            m[(0, 2)] += nalgebra::Complex::new(*ti, 0.0);
            worst = worst.max((e.matrix() - m).norm());
        }
        Ok(Gate::at_most("expquad.heis3.xi3_closed_form", worst, 1e-8))
    })());
    out
}

type So3Chart = CompleteSolutionChart<hjlie::cotangent::CotangentChart>;

/// `T*G` chart centered at `(e, alpha)` with the `F = (J, pi)` first integrals.
pub fn tstar_chart(key: &str, alpha: &DVector<f64>) -> hjlie::Result<(CotangentBundle, So3Chart)> {
    let b = CotangentBundle::new(make_group(key)?);
    let e = b.group().identity();
    let chart = Arc::new(b.chart(&e)?);
    let center = chart.from_phase(&PhasePoint { g: e, alpha: alpha.clone() })?;
    let f = chart.first_integrals();
    let cs = CompleteSolutionChart::new(chart, f, center, NewtonConfig::default())?;
    Ok((b, cs))
}

/// Worst HJE residual of `sigma_0` at `n` samples around the center, and of a
/// section that tilts across the level sets of `F` (negative control).
pub fn hje_pair(cs: &So3Chart, x: &hjlie::hjsolver::ChartField<hjlie::cotangent::CotangentChart>, count: usize) -> hjlie::Result<(f64, f64)> {
    let n0 = cs.pi_of(cs.center());
    let lam = DVector::zeros(cs.lambda_dim());
    let r = 0.3 * cs.validity_radius();
    let mut rng = linalg::rng(0x4a3);
    let samples: Vec<DVector<f64>> = (0..count).map(|_| &n0 + linalg::unit_ball(&mut rng, n0.len()) * r).collect();
    let good = cs.hje_residual(&lam, x, &samples)?;
    let tilt = |n: &DVector<f64>| {
        let mut l = lam.clone();
        l[0] += 2.0 * (n - &n0).sum();
        cs.sigma_eval(n, &l)
    };
    let bad = hje_residual_section(cs.space(), cs.transversal(), &tilt, x, &samples)?;
    Ok((good, bad))
}

pub fn hjsolver_suite() -> Vec<Gate> {
    let alpha = base_covector("so3").normalize();
    let result = (|| -> hjlie::Result<Vec<Gate>> {
        let (b, cs) = tstar_chart("so3", &alpha)?;
        let phi = bsharp_form(b.group().algebra())?;
        let field = b.build_casimir_field(&phi)?;
        let space = cs.space();
        let x = space.field(&field);
        let beta = space.flat(&field);
        let t = grid(32);
        let s = cs.integrate_by_quadratures(&x, &beta, cs.center(), &t, &QuadratureConfig::default())?;
        let g = b.group().clone();
        let a = g.algebra_matrix(&phi.eval(&alpha));
        let reference = dopri45(
            |_t, y: &DVector<f64>| g.vectorize(&(g.devectorize(y.as_slice()) * &a)),
            &g.vectorize(g.identity().matrix()),
            &t,
            1e-10,
            1e-12,
        )?;
        let k = g.vec_len();
        let worst = reference.iter().enumerate().map(|(i, r)| (s.state(i).rows(0, k) - r).amax()).fold(0.0, f64::max);
        let (good, bad) = hje_pair(&cs, &x, 8)?;
        Ok(vec![
            Gate::at_most("hjsolver.so3.bsharp_vs_rk45", worst, 1e-6),
            Gate::at_most("hjsolver.so3.linearity", s.max_diagnostic("linearity_residual"), 1e-9),
            Gate::at_most("hjsolver.so3.f_drift", s.max_diagnostic("f_drift"), 1e-8),
            Gate::at_most("hjsolver.so3.hje_residual", good, 1e-6),
            Gate::above("hjsolver.so3.hje_negative_control", bad, 1e-2),
        ])
    })();
    result.unwrap_or_else(|e| vec![Gate { name: format!("hjsolver.so3.bsharp: {e}"), value: f64::NAN, tol: 0.0, pass: false }])
}

fn rk45_sup(sys: &dyn InvariantSystem, p0: &DVector<f64>, t: &[f64], s: &hjlie::trajectory::TrajectorySample) -> hjlie::Result<f64> {
    let r = dopri45(|_t, y: &DVector<f64>| sys.field(y), p0, t, 1e-11, 1e-13)?;
    Ok(r.iter().enumerate().map(|(i, r)| (s.state(i) - r).amax()).fold(0.0, f64::max))
}

pub fn reconstruct_suite(seed: u64) -> Vec<Gate> {
    let mut out = Vec::new();
    let t = grid(64);
    let lam = DVector::from_vec(vec![2.0, 3.0, 1.0]);
    push(&mut out, "reconstruct.so3r3.system".into(), (|| {
        let sys = So3R3System::free_particle(SectionKind::PAligned)?;
        let c = check_system(&sys, &lam, 32, seed)?;
        let worst = [c.identity_action, c.composition, c.quotient_invariance, c.section_identity, c.field_invariance]
            .into_iter()
            .fold(0.0, f64::max);
        Ok(Gate::at_most("reconstruct.so3r3.system", worst.max(c.momentum_map), 1e-8))
    })());
    push(&mut out, "reconstruct.so3r3.free_particle".into(), (|| {
        let sys: Arc<dyn InvariantSystem> = Arc::new(So3R3System::free_particle(SectionKind::PAligned)?);
        let m0 = sys.section(&lam)?;
        let theta = build_theta(sys.clone(), &m0)?;
        let mut rng = linalg::rng(seed);
        let p0 = sys.act(&sys.group().sample_element(&mut rng, 0.5), &m0);
        let s = two_step_reconstruct(sys, &theta, &p0, None, &t)?;
        let mut worst: f64 = 0.0;
        for (i, ti) in t.iter().enumerate() {
            let st = s.state(i);
            for k in 0..3 {
                worst = worst.max((st[k] - p0[k] - ti * p0[3 + k]).abs()).max((st[3 + k] - p0[3 + k]).abs());
            }
        }
        Ok(Gate::at_most("reconstruct.so3r3.free_particle", worst.max(interior_flow_residual(&s) * 0.1), 1e-6))
    })());
    push(&mut out, "reconstruct.so3r3.rotation".into(), (|| {
        let sys: Arc<dyn InvariantSystem> = Arc::new(So3R3System::rotation(SectionKind::PAligned)?);
        let m0 = sys.section(&lam)?;
        let theta = build_theta(sys.clone(), &m0)?;
        let mut rng = linalg::rng(seed ^ 1);
        let p0 = sys.act(&sys.group().sample_element(&mut rng, 0.5), &m0);
        let s = vertical_integrate(sys.clone(), &theta, &p0, None, &t, &QuadratureConfig::default())?;
        Ok(Gate::at_most("reconstruct.so3r3.rotation", rk45_sup(sys.as_ref(), &p0, &t, &s)?, 1e-6))
    })());
    push(&mut out, "reconstruct.tstar_so3.two_step_vs_usual".into(), (|| {
        let sys: Arc<dyn InvariantSystem> =
            Arc::new(TStarSystem::horizontal_euler(make_group("so3")?, &[1.0, 2.0, 3.0]));
        let m0 = sys.section(&base_covector("so3"))?;
        let theta = build_theta(sys.clone(), &m0)?;
        let mut rng = linalg::rng(seed ^ 2);
        let p0 = sys.act(&sys.group().sample_element(&mut rng, 0.8), &m0);
        let a = two_step_reconstruct(sys.clone(), &theta, &p0, None, &t)?;
        let b = usual_reconstruct(sys.clone(), &theta.connection(), &p0, None, &t)?;
        let agree = (0..t.len()).map(|i| (a.state(i) - b.state(i)).amax()).fold(0.0, f64::max);
        Ok(Gate::at_most("reconstruct.tstar_so3.two_step_vs_usual", agree, 1e-7))
    })());
    out
}

/// All suites, in a fixed order.
pub fn run_suites(seed: u64) -> Vec<Gate> {
    let mut gates = algebra_suite(seed);
    gates.extend(cotangent_suite(seed, 10));
    gates.extend(expquad_suite(seed));
    gates.extend(hjsolver_suite());
    gates.extend(reconstruct_suite(seed));
    gates
}

pub fn run_check(cfg: &RunConfig) -> Outcome {
    let gates = run_suites(cfg.seed);
    let body = json!({ "suites": gates.len() });
    let text = match cfg.format() {
        Format::Json => output::report_json(cfg, body, &gates),
        Format::Csv => {
            let rows: Vec<Vec<String>> = gates
                .iter()
                .map(|g| vec![g.name.clone(), output::num(g.value), output::num(g.tol), g.pass.to_string()])
                .collect();
            output::table_csv(cfg, &["name", "value", "tol", "pass"], &rows, &[])
        }
    };
    Outcome { text, gates }
}
