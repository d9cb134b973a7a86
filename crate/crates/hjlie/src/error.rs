use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("unknown catalogue key `{0}`")]
    UnknownCatalogue(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid structure constants: {0}")]
    InvalidStructure(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("degenerate Killing form (min |eigenvalue| {min_abs:.3e}, max {max_abs:.3e})")]
    DegenerateKilling { min_abs: f64, max_abs: f64 },
    #[error("covector is not coadjoint-regular (isotropy dim {dim}, generic {generic})")]
    NotRegular { dim: usize, generic: usize },
    #[error("direction is not in the isotropy algebra: |ad*_xi alpha| = {residual:.3e}")]
    NotInIsotropy { residual: f64 },
    #[error("sample outside Casimir domain: distance {distance:.3e} > radius {radius:.3e}")]
    OutsideDomain { distance: f64, radius: f64 },
    #[error("Casimir residual too large: {0:.3e}")]
    CasimirResidual(f64),
    #[error("membership residual {residual:.3e} exceeds tolerance")]
    NotInGroup { residual: f64 },
    #[error("adjoint expansion residual {0:.3e}: representation inconsistent")]
    Expansion(f64),
    #[error("chart inversion failed to converge (residual {residual:.3e})")]
    ChartInversion { residual: f64 },
    #[error("outside chart: Newton residual {residual:.3e}")]
    OutsideChart { residual: f64 },
    #[error("rank deficiency: expected rank {expected}, got {got}")]
    RankDeficient { expected: usize, got: usize },
    #[error("transversality failed: stacked Jacobian condition {0:.3e}")]
    NotTransversal(f64),
    #[error("singular symplectic system (condition {0:.3e})")]
    SingularOmega(f64),
    #[error("invariance check failed for {name}: residual {residual:.3e}")]
    NotInvariant { name: String, residual: f64 },
    #[error("hypothesis check `{name}` failed: {value:.3e} > {tol:.1e}")]
    Hypothesis { name: String, value: f64, tol: f64 },
    #[error("continuation failed at t = {t}: {reason}")]
    Continuation { t: f64, reason: String },
    #[error("no admissible base covector ({})", if *.proven { "proven empty intersection" } else { "search exhausted" })]
    NoAdmissible { proven: bool },
    #[error("point outside the section domain (margin {0:.3e})")]
    SectionDomain(f64),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;
