//! Flat `key = value` run configuration with a typed schema.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use hjlie::hjsolver::QuadratureConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Exp,
    Integrate,
    Reconstruct,
    Scan,
    Check,
}

impl Command {
    pub fn as_str(self) -> &'static str {
        match self {
            Command::Exp => "exp",
            Command::Integrate => "integrate",
            Command::Reconstruct => "reconstruct",
            Command::Scan => "scan",
            Command::Check => "check",
        }
    }
}

impl FromStr for Command {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "exp" => Command::Exp,
            "integrate" => Command::Integrate,
            "reconstruct" => Command::Reconstruct,
            "scan" => Command::Scan,
            "check" => Command::Check,
            _ => return Err(format!("unknown command '{s}'")),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

impl FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            _ => Err(format!("unknown format '{s}' (expected csv or json)")),
        }
    }
}

/// Diagnostic gates applied to command outputs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tolerances {
    pub flow: f64,
    pub oracle: f64,
    pub linearity: f64,
    pub drift: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances { flow: 1e-5, oracle: 1e-6, linearity: 1e-9, drift: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub group: String,
    pub field: String,
    pub scenario: String,
    pub method: String,
    pub xi: Option<Vec<f64>>,
    pub alpha: Option<Vec<f64>>,
    pub t_max: f64,
    pub n_steps: usize,
    pub samples: usize,
    pub seed: u64,
    pub tol: Tolerances,
    pub quad: QuadratureConfig,
    pub output: Option<PathBuf>,
    pub format: Option<Format>,
}

/// Configuration error with the offending line (file input) and key.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub key: Option<String>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(l) = self.line {
            write!(f, "line {l}: ")?;
        }
        if let Some(k) = &self.key {
            write!(f, "field '{k}': ")?;
        }
        f.write_str(&self.message)
    }
}

impl std::error::Error for ConfigError {}

impl ConfigError {
    pub fn new(message: impl Into<String>) -> Self {
        ConfigError { line: None, key: None, message: message.into() }
    }

    fn at(key: &str, message: impl Into<String>) -> Self {
        ConfigError { line: None, key: Some(key.to_string()), message: message.into() }
    }
}

/// Keys accepted in config files and by `--set`.
pub const KEYS: &[&str] = &[
    "command",
    "group",
    "algebra",
    "field",
    "scenario",
    "method",
    "xi",
    "alpha",
    "t_max",
    "n_steps",
    "samples",
    "seed",
    "output",
    "format",
    "tol.flow",
    "tol.oracle",
    "tol.linearity",
    "tol.drift",
    "quad.order",
    "quad.max_subdivisions",
    "quad.increment_tol",
    "quad.fd_step",
    "quad.audit",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::at(key, format!("cannot parse '{value}'")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>, ConfigError> {
    value.split(',').map(|s| parse::<f64>(key, s.trim())).collect()
}

impl RunConfig {
    pub fn new(command: Command) -> Self {
        RunConfig {
            command,
            group: "so3".into(),
            field: "casimir:bsharp".into(),
            scenario: "tstar:so3".into(),
            method: "auto".into(),
            xi: None,
            alpha: None,
            t_max: 1.0,
            n_steps: 65,
            samples: 10_000,
            seed: 0,
            tol: Tolerances::default(),
            quad: QuadratureConfig::default(),
            output: None,
            format: None,
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let value = value.trim();
        match key {
            "command" => {
                let c: Command = value.parse().map_err(|m: String| ConfigError::at(key, m))?;
                if c != self.command {
                    return Err(ConfigError::at(key, format!("file is for '{value}', not '{}'", self.command.as_str())));
                }
            }
            "group" | "algebra" => self.group = value.into(),
            "field" => self.field = value.into(),
            "scenario" => self.scenario = value.into(),
            "method" => self.method = value.into(),
            "xi" => self.xi = Some(parse_list(key, value)?),
            "alpha" => self.alpha = Some(parse_list(key, value)?),
            "t_max" => self.t_max = parse(key, value)?,
            "n_steps" => self.n_steps = parse(key, value)?,
            "samples" => self.samples = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "output" => self.output = Some(PathBuf::from(value)),
            "format" => self.format = Some(value.parse().map_err(|m: String| ConfigError::at(key, m))?),
            "tol.flow" => self.tol.flow = parse(key, value)?,
            "tol.oracle" => self.tol.oracle = parse(key, value)?,
            "tol.linearity" => self.tol.linearity = parse(key, value)?,
            "tol.drift" => self.tol.drift = parse(key, value)?,
            "quad.order" => self.quad.order = parse(key, value)?,
            "quad.max_subdivisions" => self.quad.max_subdivisions = parse(key, value)?,
            "quad.increment_tol" => self.quad.increment_tol = parse(key, value)?,
            "quad.fd_step" => self.quad.fd_step = parse(key, value)?,
            "quad.audit" => self.quad.audit = parse(key, value)?,
            _ => return Err(ConfigError::at(key, format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        let mut seen: Vec<String> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let with_line = |mut e: ConfigError| {
                e.line = Some(i + 1);
                e
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| with_line(ConfigError::new(format!("expected key = value, got '{line}'"))))?;
            let key = key.trim();
            if seen.iter().any(|k| k == key) {
                return Err(with_line(ConfigError::at(key, "duplicate key")));
            }
            seen.push(key.to_string());
            self.set(key, value).map_err(with_line)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.t_max > 0.0) || !self.t_max.is_finite() {
            return Err(ConfigError::at("t_max", format!("must be positive, got {}", self.t_max)));
        }
        if self.n_steps < 2 {
            return Err(ConfigError::at("n_steps", format!("must be at least 2, got {}", self.n_steps)));
        }
        if self.command == Command::Scan && self.samples == 0 {
            return Err(ConfigError::at("samples", "must be positive"));
        }
        let tols = [
            ("tol.flow", self.tol.flow),
            ("tol.oracle", self.tol.oracle),
            ("tol.linearity", self.tol.linearity),
            ("tol.drift", self.tol.drift),
            ("quad.increment_tol", self.quad.increment_tol),
            ("quad.fd_step", self.quad.fd_step),
        ];
        for (k, v) in tols {
            if !(v > 0.0) || !v.is_finite() {
                return Err(ConfigError::at(k, format!("must be positive, got {v}")));
            }
        }
        if self.quad.order == 0 || self.quad.max_subdivisions == 0 {
            return Err(ConfigError::new("quadrature order and subdivisions must be positive"));
        }
        Ok(())
    }

    pub fn format(&self) -> Format {
        self.format.unwrap_or(match self.command {
            Command::Scan | Command::Check => Format::Json,
            _ => Format::Csv,
        })
    }

    /// Every setting in a fixed order, as written to output headers.
    pub fn entries(&self) -> Vec<(String, String)> {
        let list = |v: &Option<Vec<f64>>| {
            v.as_ref().map(|x| x.iter().map(|f| format!("{f:?}")).collect::<Vec<_>>().join(",")).unwrap_or_default()
        };
        let fmt = match self.format() {
            Format::Csv => "csv",
            Format::Json => "json",
        };
        vec![
            ("command".into(), self.command.as_str().into()),
            ("group".into(), self.group.clone()),
            ("field".into(), self.field.clone()),
            ("scenario".into(), self.scenario.clone()),
            ("method".into(), self.method.clone()),
            ("xi".into(), list(&self.xi)),
            ("alpha".into(), list(&self.alpha)),
            ("t_max".into(), format!("{:?}", self.t_max)),
            ("n_steps".into(), self.n_steps.to_string()),
            ("samples".into(), self.samples.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("format".into(), fmt.into()),
            ("tol.flow".into(), format!("{:?}", self.tol.flow)),
            ("tol.oracle".into(), format!("{:?}", self.tol.oracle)),
            ("tol.linearity".into(), format!("{:?}", self.tol.linearity)),
            ("tol.drift".into(), format!("{:?}", self.tol.drift)),
            ("quad.order".into(), self.quad.order.to_string()),
            ("quad.max_subdivisions".into(), self.quad.max_subdivisions.to_string()),
            ("quad.increment_tol".into(), format!("{:?}", self.quad.increment_tol)),
            ("quad.fd_step".into(), format!("{:?}", self.quad.fd_step)),
            ("quad.audit".into(), self.quad.audit.to_string()),
        ]
    }

    /// Equally spaced grid of `n_steps` points on `[0, t_max]`.
    pub fn grid(&self) -> Vec<f64> {
        let n = self.n_steps - 1;
        (0..=n).map(|i| self.t_max * i as f64 / n as f64).collect()
    }
}

/// Reads a config file for `command`; the `output` path is kept as written.
pub fn load_config(path: &Path, command: Command) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::new(format!("cannot read {}: {e}", path.display())))?;
    let mut cfg = RunConfig::new(command);
    cfg.apply_text(&text)?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_parses() {
        let mut c = RunConfig::new(Command::Exp);
        c.apply_text("# comment\ngroup = so3\nxi = 0, 0, 1  # trailing\nt_max=1\nn_steps=64\n").unwrap();
        c.validate().unwrap();
        assert_eq!(c.xi, Some(vec![0.0, 0.0, 1.0]));
        assert_eq!(c.grid().len(), 64);
        assert_eq!(*c.grid().last().unwrap(), 1.0);
    }

    #[test]
    fn unknown_key_is_named_with_line() {
        let mut c = RunConfig::new(Command::Exp);
        let e = c.apply_text("group = so3\n\nspeed = 3\n").unwrap_err();
        assert_eq!(e.line, Some(3));
        assert_eq!(e.key.as_deref(), Some("speed"));
        assert!(e.to_string().contains("unknown key 'speed'"));
    }

    #[test]
    fn out_of_range_values_are_rejected() {
        let mut c = RunConfig::new(Command::Exp);
        c.apply_text("t_max = -1\n").unwrap();
        assert_eq!(c.validate().unwrap_err().key.as_deref(), Some("t_max"));
        let mut c = RunConfig::new(Command::Exp);
        c.apply_text("n_steps = 1\n").unwrap();
        assert_eq!(c.validate().unwrap_err().key.as_deref(), Some("n_steps"));
        let mut c = RunConfig::new(Command::Exp);
        c.apply_text("tol.flow = 0\n").unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn malformed_lines_report_location() {
        let mut c = RunConfig::new(Command::Exp);
        let e = c.apply_text("group = so3\nnonsense\n").unwrap_err();
        assert_eq!(e.line, Some(2));
        let e = RunConfig::new(Command::Exp).apply_text("t_max = abc\n").unwrap_err();
        assert_eq!((e.line, e.key.as_deref()), (Some(1), Some("t_max")));
        let e = RunConfig::new(Command::Exp).apply_text("command = scan\n").unwrap_err();
        assert_eq!(e.key.as_deref(), Some("command"));
        let e = RunConfig::new(Command::Exp).apply_text("seed = 1\nseed = 2\n").unwrap_err();
        assert_eq!(e.line, Some(2));
    }

    #[test]
    fn every_schema_key_is_settable() {
        let sample = |k: &str| match k {
            "command" => "exp",
            "xi" | "alpha" => "1,2,3",
            "format" => "json",
            "quad.audit" => "false",
            "t_max" | "tol.flow" | "tol.oracle" | "tol.linearity" | "tol.drift" | "quad.increment_tol" | "quad.fd_step" => "0.5",
            "n_steps" | "samples" | "seed" | "quad.order" | "quad.max_subdivisions" => "7",
            _ => "x",
        };
        for k in KEYS {
            RunConfig::new(Command::Exp).set(k, sample(k)).unwrap();
        }
    }
}
