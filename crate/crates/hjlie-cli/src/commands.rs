//! Command implementations. Library failures during a computation become
//! failed gates (exit 2); bad keys, shapes and IO are configuration errors (exit 1).

use std::sync::Arc;

use hjlie::cotangent::{CotangentBundle, InvariantFunction, InvariantScalar, PhasePoint, VerticalField};
use hjlie::expquad::{exp_general, exp_semisimple, heisenberg_strata, regular_scan};
use hjlie::hjsolver::{interior_rows, CompleteSolutionChart, NewtonConfig};
use hjlie::liealg::{bsharp_form, central_form, make_algebra, CasimirForm, LieAlgebra};
use hjlie::liegroup::{make_group, MatrixGroup};
use hjlie::linalg;
use hjlie::reconstruct::{
    build_theta, interior_flow_residual, make_scenario, two_step_reconstruct, usual_reconstruct, vertical_integrate,
    InvariantSystem,
};
use hjlie::trajectory::TrajectorySample;
use nalgebra::DVector;
use serde_json::json;

use crate::check;
use crate::config::{Command, ConfigError, Format, RunConfig};
use crate::output::{self, Gate};

/// Rendered output and the gates it was judged by.
pub struct Outcome {
    pub text: String,
    pub gates: Vec<Gate>,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.gates.iter().all(|g| g.pass)
    }
}

pub fn run(cfg: &RunConfig) -> Result<Outcome, ConfigError> {
    cfg.validate()?;
    match cfg.command {
        Command::Exp => exp(cfg),
        Command::Integrate => integrate(cfg),
        Command::Reconstruct => reconstruct(cfg),
        Command::Scan => scan(cfg),
        Command::Check => Ok(check::run_check(cfg)),
    }
}

fn config_err(e: hjlie::Error) -> ConfigError {
    ConfigError::new(e.to_string())
}

fn vector_arg(name: &str, v: &Option<Vec<f64>>, n: usize, default: Option<Vec<f64>>) -> Result<DVector<f64>, ConfigError> {
    let v = match (v, default) {
        (Some(v), _) => v.clone(),
        (None, Some(d)) => d,
        (None, None) => return Err(ConfigError { line: None, key: Some(name.into()), message: "required".into() }),
    };
    if v.len() != n {
        return Err(ConfigError {
            line: None,
            key: Some(name.into()),
            message: format!("expected {n} components, got {}", v.len()),
        });
    }
    Ok(DVector::from_vec(v))
}

fn render(cfg: &RunConfig, sample: &TrajectorySample, gates: Vec<Gate>) -> Outcome {
    let text = match cfg.format() {
        Format::Csv => output::trajectory_csv(cfg, sample, &gates),
        Format::Json => output::trajectory_json(cfg, sample, &gates),
    };
    Outcome { text, gates }
}

fn failed(cfg: &RunConfig, labels: Vec<String>, name: &str, e: hjlie::Error) -> Outcome {
    let mut s = TrajectorySample::new(labels);
    s.failure = Some(e.to_string());
    render(cfg, &s, vec![Gate::flag(name, false)])
}

pub fn group_labels(group: &MatrixGroup) -> Vec<String> {
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
    labels
}

fn exp(cfg: &RunConfig) -> Result<Outcome, ConfigError> {
    let group = make_group(&cfg.group).map_err(config_err)?;
    let xi = vector_arg("xi", &cfg.xi, group.dim(), None)?;
    let grid = cfg.grid();
    let curve = if bsharp_form(group.algebra()).is_ok() {
        exp_semisimple(&group, &xi, &grid, &cfg.quad)
    } else {
        exp_general(&group, &xi, &grid, &cfg.quad)
    };
    let curve = match curve {
        Ok(c) => c,
        Err(e) => return Ok(failed(cfg, group_labels(&group), "exp_by_quadratures", e)),
    };
    let mut s = TrajectorySample::new(group_labels(&group));
    let mut err = Vec::with_capacity(grid.len());
    for (t, g) in grid.iter().zip(&curve.elements) {
        s.push(*t, group.vectorize(g.matrix()).as_slice().to_vec());
        err.push((g.matrix() - group.matrix_exp_oracle(&xi, *t).matrix()).norm());
    }
    s.set_diagnostic("oracle_error", &err);
    s.set_diagnostic("squarings", &curve.squarings.iter().map(|&k| k as f64).collect::<Vec<_>>());
    let gates = vec![
        Gate::at_most("oracle_error", s.max_diagnostic("oracle_error"), cfg.tol.oracle),
        Gate::at_most("flow_residual", curve.flow_residual, cfg.tol.flow),
        Gate::at_most("linearity_residual", curve.linearity_residual, cfg.tol.linearity),
    ];
    Ok(render(cfg, &s, gates))
}

fn killing_potential(a: &LieAlgebra) -> Result<InvariantFunction, hjlie::Error> {
    named_potential("killing", bsharp_form(a)?)
}

fn named_potential(name: &str, phi: CasimirForm) -> Result<InvariantFunction, hjlie::Error> {
    let h = phi.hamiltonian().cloned().ok_or_else(|| hjlie::Error::Invalid(format!("{name} has no potential")))?;
    Ok(InvariantFunction::new(name, h).with_gradient(Arc::new(move |a| phi.eval(a))))
}

/// `casimir:bsharp`, `casimir:central`, `mixed:killing`, `mixed:central`.
pub fn build_field(bundle: &CotangentBundle, spec: &str) -> Result<VerticalField, ConfigError> {
    let a = bundle.group().algebra();
    let built = match spec {
        "casimir:bsharp" => bsharp_form(a).and_then(|phi| bundle.build_casimir_field(&phi)),
        "casimir:central" => central_form(a).and_then(|phi| bundle.build_casimir_field(&phi)),
        "mixed:killing" => killing_potential(a).and_then(|h| bundle.build_mixed_field(&[h], &[InvariantScalar::one()])),
        "mixed:central" => central_form(a)
            .and_then(|phi| named_potential("central", phi))
            .and_then(|h| bundle.build_mixed_field(&[h], &[InvariantScalar::one()])),
        _ => {
            return Err(ConfigError {
                line: None,
                key: Some("field".into()),
                message: format!("unknown field '{spec}' (casimir:bsharp | casimir:central | mixed:killing | mixed:central)"),
            })
        }
    };
    built.map_err(|e| ConfigError { line: None, key: Some("field".into()), message: e.to_string() })
}

fn unit_default(n: usize) -> Vec<f64> {
    vec![1.0 / (n as f64).sqrt(); n]
}

fn integrate(cfg: &RunConfig) -> Result<Outcome, ConfigError> {
    let group = make_group(&cfg.group).map_err(config_err)?;
    let n = group.dim();
    let alpha = vector_arg("alpha", &cfg.alpha, n, Some(unit_default(n)))?;
    let bundle = CotangentBundle::new(group.clone());
    let field = build_field(&bundle, &cfg.field)?;
    let e = group.identity();
    let mut labels = group_labels(&group);
    labels.extend((0..n).map(|i| format!("alpha{}", i + 1)));
    let p0 = PhasePoint { g: e.clone(), alpha };
    let attempt = (|| {
        let chart = Arc::new(bundle.chart(&e)?);
        let center = chart.from_phase(&p0)?;
        let f = chart.first_integrals();
        let cs = CompleteSolutionChart::new(chart.clone(), f, center.clone(), NewtonConfig::default())?;
        let x = chart.field(&field);
        let beta = chart.flat(&field);
        cs.integrate_by_quadratures(&x, &beta, &center, &cfg.grid(), &cfg.quad)
    })();
    let s = match attempt {
        Ok(s) => s,
        Err(err) => return Ok(failed(cfg, labels, "integrate_by_quadratures", err)),
    };
    let flow = s.diagnostic("flow_residual").unwrap_or_default();
    let interior = interior_rows(flow.len()).map(|i| flow[i]).fold(0.0, f64::max);
    let gates = vec![
        Gate::flag("completed", s.failure.is_none()),
        Gate::at_most("flow_residual", interior, cfg.tol.flow),
        Gate::at_most("linearity_residual", s.max_diagnostic("linearity_residual"), cfg.tol.linearity),
        Gate::at_most("f_drift", s.max_diagnostic("f_drift"), cfg.tol.drift),
    ];
    Ok(render(cfg, &s, gates))
}

fn reconstruct(cfg: &RunConfig) -> Result<Outcome, ConfigError> {
    let field = if cfg.scenario == "so3-r3" && cfg.field == "casimir:bsharp" { "rotation" } else { cfg.field.as_str() };
    let sys: Arc<dyn InvariantSystem> = make_scenario(&cfg.scenario, field).map_err(config_err)?;
    let q = sys.quotient_dim();
    let default = if cfg.scenario == "so3-r3" { vec![2.0, 3.0, 1.0] } else { unit_default(q) };
    let lambda = vector_arg("alpha", &cfg.alpha, q, Some(default))?;
    let m0 = sys.section(&lambda).map_err(|e| ConfigError { line: None, key: Some("alpha".into()), message: e.to_string() })?;
    let mut rng = linalg::rng(cfg.seed);
    let p0 = sys.act(&sys.group().sample_element(&mut rng, 0.5), &m0);
    let method = match cfg.method.as_str() {
        "auto" => match field {
            "rigid" => "usual",
            "casimir:bsharp" | "rotation" => "vertical",
            _ => "two-step",
        },
        m @ ("two-step" | "usual" | "vertical") => m,
        other => {
            return Err(ConfigError {
                line: None,
                key: Some("method".into()),
                message: format!("unknown method '{other}' (auto | two-step | usual | vertical)"),
            })
        }
    };
    let grid = cfg.grid();
    let attempt = build_theta(sys.clone(), &m0).and_then(|theta| match method {
        "two-step" => two_step_reconstruct(sys.clone(), &theta, &p0, None, &grid),
        "usual" => usual_reconstruct(sys.clone(), &theta.connection(), &p0, None, &grid),
        _ => vertical_integrate(sys.clone(), &theta, &p0, None, &grid, &cfg.quad),
    });
    let s = match attempt {
        Ok(s) => s,
        Err(e) => return Ok(failed(cfg, sys.state_labels(), method, e)),
    };
    let mut gates = vec![
        Gate::flag("completed", s.failure.is_none()),
        Gate::at_most("flow_residual", interior_flow_residual(&s), cfg.tol.flow),
    ];
    if s.diagnostic("theta_drift").is_some() {
        gates.push(Gate::at_most("theta_drift", s.max_diagnostic("theta_drift"), 1e-6));
    }
    if s.diagnostic("quotient_drift").is_some() {
        gates.push(Gate::at_most("quotient_drift", s.max_diagnostic("quotient_drift"), 1e-6));
    }
    Ok(render(cfg, &s, gates))
}

fn scan(cfg: &RunConfig) -> Result<Outcome, ConfigError> {
    let a = make_algebra(&cfg.group).map_err(config_err)?;
    let report = regular_scan(&a, cfg.samples, cfg.seed);
    let mut gates = vec![];
    let mut body = json!({ "scan": report });
    if a.name() == "heis3" {
        let strata = heisenberg_strata(cfg.samples, cfg.seed).map_err(config_err)?;
        gates.push(Gate::at_most("heis3_strata_mismatches", strata.mismatches as f64, 0.0));
        body["heisenberg_strata"] = json!(strata);
        body["expected_regular_set"] = json!("alpha3 != 0");
    }
    let text = match cfg.format() {
        Format::Json => output::report_json(cfg, body, &gates),
        Format::Csv => {
            let rows: Vec<Vec<String>> =
                report.strata.iter().map(|(d, c)| vec![d.to_string(), c.to_string()]).collect();
            output::table_csv(cfg, &["isotropy_dim", "count"], &rows, &gates)
        }
    };
    Ok(Outcome { text, gates })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn field_specs() {
        let b = CotangentBundle::new(make_group("heis3").unwrap());
        assert!(build_field(&b, "casimir:central").is_ok());
        assert!(build_field(&b, "mixed:central").is_ok());
        assert_eq!(build_field(&b, "casimir:bsharp").unwrap_err().key.as_deref(), Some("field"));
        assert!(build_field(&b, "wobble").unwrap_err().message.contains("wobble"));
        let so3 = CotangentBundle::new(make_group("so3").unwrap());
        assert!(build_field(&so3, "mixed:killing").is_ok());
    }

    #[test]
    fn exp_gate_and_rows() {
        let mut cfg = RunConfig::new(Command::Exp);
        cfg.xi = Some(vec![0.0, 0.0, 1.0]);
        cfg.n_steps = 9;
        let out = run(&cfg).unwrap();
        assert!(out.passed());
        assert_eq!(out.text.lines().filter(|l| !l.starts_with('#')).count(), 10);
        cfg.xi = Some(vec![0.0, 0.0]);
        assert_eq!(run(&cfg).err().unwrap().key.as_deref(), Some("xi"));
    }

    #[test]
    fn non_regular_exp_is_a_gate_failure() {
        let mut cfg = RunConfig::new(Command::Exp);
        cfg.group = "heis3".into();
        cfg.xi = Some(vec![1.0, 0.0, 0.0]);
        cfg.n_steps = 5;
        let out = run(&cfg).unwrap();
        assert!(!out.passed());
        assert!(out.text.contains("# failure="));
    }
}
