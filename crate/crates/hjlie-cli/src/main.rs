use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hjlie_cli::config::{Command, ConfigError, RunConfig};
use hjlie_cli::output::write_output;

#[derive(Parser)]
#[command(name = "hjlie", version, about = "Integration by quadratures on matrix Lie groups")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// exp(t xi) by quadratures, compared with the matrix exponential.
    Exp(Opts),
    /// Integrate a vertical field on T*G by quadratures.
    Integrate(Opts),
    /// Reconstruct invariant dynamics from the quotient.
    Reconstruct(Opts),
    /// Coadjoint isotropy strata of an algebra.
    Scan(Opts),
    /// Run the invariant suites.
    Check(Opts),
}

#[derive(Args, Default)]
struct Opts {
    /// key = value configuration file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    group: Option<String>,
    #[arg(long)]
    algebra: Option<String>,
    #[arg(long)]
    field: Option<String>,
    #[arg(long)]
    scenario: Option<String>,
    /// auto, two-step, usual or vertical.
    #[arg(long)]
    method: Option<String>,
    /// Comma-separated algebra coordinates.
    #[arg(long, allow_hyphen_values = true)]
    xi: Option<String>,
    /// Comma-separated initial covector (or quotient point).
    #[arg(long, allow_hyphen_values = true)]
    alpha: Option<String>,
    #[arg(long = "t-max", allow_hyphen_values = true)]
    t_max: Option<String>,
    /// Number of grid points.
    #[arg(long)]
    steps: Option<String>,
    #[arg(long)]
    samples: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long, short)]
    output: Option<String>,
    /// csv or json.
    #[arg(long)]
    format: Option<String>,
    /// Extra settings as key=value (repeatable), e.g. tol.flow=1e-6.
    #[arg(long = "set")]
    set: Vec<String>,
}

fn build(command: Command, o: &Opts) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::new(command);
    if let Some(path) = &o.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new(format!("cannot read {}: {e}", path.display())))?;
        cfg.apply_text(&text).map_err(|e| ConfigError::new(format!("{}: {e}", path.display())))?;
    }
    let flags = [
        ("group", &o.group),
        ("algebra", &o.algebra),
        ("field", &o.field),
        ("scenario", &o.scenario),
        ("method", &o.method),
        ("xi", &o.xi),
        ("alpha", &o.alpha),
        ("t_max", &o.t_max),
        ("n_steps", &o.steps),
        ("samples", &o.samples),
        ("seed", &o.seed),
        ("output", &o.output),
        ("format", &o.format),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, v)?;
        }
    }
    for kv in &o.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| ConfigError::new(format!("--set expects key=value, got '{kv}'")))?;
        cfg.set(k.trim(), v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, opts) = match &cli.command {
        Cmd::Exp(o) => (Command::Exp, o),
        Cmd::Integrate(o) => (Command::Integrate, o),
        Cmd::Reconstruct(o) => (Command::Reconstruct, o),
        Cmd::Scan(o) => (Command::Scan, o),
        Cmd::Check(o) => (Command::Check, o),
    };
    let cfg = match build(command, opts) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let outcome = match hjlie_cli::run(&cfg) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    if let Err(e) = write_output(&outcome.text, cfg.output.as_deref()) {
        eprintln!("error: cannot write output: {e}");
        return ExitCode::from(1);
    }
    let failed: Vec<&str> = outcome.gates.iter().filter(|g| !g.pass).map(|g| g.name.as_str()).collect();
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        eprintln!("gate failure: {}", failed.join(", "));
        ExitCode::from(2)
    }
}
