//! CSV and JSON writers. Output depends only on the config and the results.

use std::io::Write;
use std::path::Path;

use hjlie::trajectory::TrajectorySample;
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::config::RunConfig;

pub const SCHEMA: u32 = 1;

/// A named pass/fail check on a result.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Gate {
    pub name: String,
    pub value: f64,
    pub tol: f64,
    pub pass: bool,
}

impl Gate {
    /// Passes when `value <= tol` (NaN fails).
    pub fn at_most(name: &str, value: f64, tol: f64) -> Self {
        Gate { name: name.into(), value, tol, pass: value <= tol }
    }

    /// Passes when `value > tol` (negative controls).
    pub fn above(name: &str, value: f64, tol: f64) -> Self {
        Gate { name: name.into(), value, tol, pass: value > tol }
    }

    pub fn flag(name: &str, ok: bool) -> Self {
        Gate { name: name.into(), value: if ok { 0.0 } else { 1.0 }, tol: 0.0, pass: ok }
    }
}

pub fn version() -> &'static str {
    env!("CARGO_PKG_VERSION")
}

/// 17 significant digits.
pub fn num(x: f64) -> String {
    if x.is_nan() {
        "NaN".into()
    } else {
        format!("{x:.16e}")
    }
}

fn header_lines(cfg: &RunConfig) -> String {
    let mut s = format!("# hjlie {}\n", version());
    for (k, v) in cfg.entries() {
        s.push_str(&format!("# {k}={v}\n"));
    }
    s
}

fn header_json(cfg: &RunConfig) -> Value {
    let mut config = Map::new();
    for (k, v) in cfg.entries() {
        config.insert(k, Value::String(v));
    }
    json!({ "version": version(), "seed": cfg.seed, "config": config })
}

fn gate_lines(gates: &[Gate]) -> String {
    gates
        .iter()
        .map(|g| format!("# gate {} value={} tol={} {}\n", g.name, num(g.value), num(g.tol), if g.pass { "PASS" } else { "FAIL" }))
        .collect()
}

pub fn trajectory_csv(cfg: &RunConfig, sample: &TrajectorySample, gates: &[Gate]) -> String {
    let mut s = header_lines(cfg);
    if let Some(f) = &sample.failure {
        s.push_str(&format!("# failure={f}\n"));
    }
    for n in &sample.notes {
        s.push_str(&format!("# note={n}\n"));
    }
    s.push_str(&gate_lines(gates));
    let mut cols = vec!["t".to_string()];
    cols.extend(sample.state_labels.iter().cloned());
    cols.extend(sample.diagnostic_labels.iter().cloned());
    s.push_str(&cols.join(","));
    s.push('\n');
    for i in 0..sample.len() {
        let row: Vec<String> = std::iter::once(sample.times[i])
            .chain(sample.states[i].iter().copied())
            .chain(sample.diagnostics[i].iter().copied())
            .map(num)
            .collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

pub fn trajectory_json(cfg: &RunConfig, sample: &TrajectorySample, gates: &[Gate]) -> String {
    let mut cols = vec!["t".to_string()];
    cols.extend(sample.state_labels.iter().cloned());
    cols.extend(sample.diagnostic_labels.iter().cloned());
    let rows: Vec<Vec<f64>> = (0..sample.len())
        .map(|i| {
            std::iter::once(sample.times[i])
                .chain(sample.states[i].iter().copied())
                .chain(sample.diagnostics[i].iter().copied())
                .collect()
        })
        .collect();
    let v = json!({
        "schema": SCHEMA,
        "header": header_json(cfg),
        "columns": cols,
        "rows": rows,
        "failure": sample.failure,
        "notes": sample.notes,
        "gates": gates,
    });
    pretty(&v)
}

/// A JSON report with the standard header and gates.
pub fn report_json(cfg: &RunConfig, body: Value, gates: &[Gate]) -> String {
    let failures: Vec<&str> = gates.iter().filter(|g| !g.pass).map(|g| g.name.as_str()).collect();
    let v = json!({
        "schema": SCHEMA,
        "header": header_json(cfg),
        "report": body,
        "gates": gates,
        "failures": failures,
    });
    pretty(&v)
}

/// A CSV table with the standard header and gates.
pub fn table_csv(cfg: &RunConfig, columns: &[&str], rows: &[Vec<String>], gates: &[Gate]) -> String {
    let mut s = header_lines(cfg);
    s.push_str(&gate_lines(gates));
    s.push_str(&columns.join(","));
    s.push('\n');
    for r in rows {
        s.push_str(&r.join(","));
        s.push('\n');
    }
    s
}

fn pretty(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("JSON values always serialize");
    s.push('\n');
    s
}

/// Writes to `path`, or standard output when absent.
pub fn write_output(text: &str, path: Option<&Path>) -> std::io::Result<()> {
    match path {
        Some(p) => std::fs::write(p, text),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
            out.flush()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Command;

    #[test]
    fn floats_round_trip() {
        for x in [0.1, 1.0 / 3.0, -2.5e-17, 1e300, std::f64::consts::PI] {
            assert_eq!(num(x).parse::<f64>().unwrap(), x);
        }
    }

    #[test]
    fn csv_layout() {
        let cfg = RunConfig::new(Command::Exp);
        let mut s = TrajectorySample::new(vec!["a".into()]);
        s.push(0.0, vec![1.0]);
        s.push(1.0, vec![2.0]);
        s.set_diagnostic("flow_residual", &[0.0, 1e-9]);
        let text = trajectory_csv(&cfg, &s, &[Gate::at_most("flow", 1e-9, 1e-5)]);
        let lines: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(lines[0], "t,a,flow_residual");
        assert_eq!(lines.len(), 3);
        assert!(text.starts_with("# hjlie "));
        assert!(text.contains("# seed=0\n"));
        assert!(text.contains("# gate flow value=1.0000000000000001e-9 tol=1.0000000000000001e-5 PASS"));
    }

    #[test]
    fn json_is_schema_versioned() {
        let cfg = RunConfig::new(Command::Scan);
        let v: Value = serde_json::from_str(&report_json(&cfg, json!({"x": 1}), &[Gate::flag("ok", false)])).unwrap();
        assert_eq!(v["schema"], 1);
        assert_eq!(v["failures"][0], "ok");
        assert_eq!(v["header"]["config"]["command"], "scan");
    }
}
