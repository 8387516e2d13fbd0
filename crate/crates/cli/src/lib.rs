//! Experiment harness for averaged LSA: normal-approximation and coverage
//! studies, stability reports, CSV tables and SVG plots.

pub mod config;
pub mod experiments;
pub mod report;

use config::{ExperimentConfig, ExperimentKind};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Numerical(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    /// 1 for bad input, 2 for numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) | CliError::Io(_) => 1,
            CliError::Numerical(_) => 2,
        }
    }
}

impl From<lsa_bootstrap::Error> for CliError {
    fn from(e: lsa_bootstrap::Error) -> Self {
        use lsa_bootstrap::Error as E;
        match e {
            E::Validation(_) | E::Model(_) => CliError::Validation(e.to_string()),
            E::Stability { .. } | E::NotPsd { .. } | E::Divergence { .. } | E::Numerical(_) => {
                CliError::Numerical(e.to_string())
            }
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

/// Runs one experiment on a dedicated pool of `cfg.workers` threads
/// (all available cores when unset).
pub fn run(kind: ExperimentKind, cfg: &ExperimentConfig) -> Result<String, CliError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(w) = cfg.workers {
        builder = builder.num_threads(w);
    }
    let pool = builder
        .build()
        .map_err(|e| CliError::Validation(format!("cannot start worker pool: {e}")))?;
    pool.install(|| match kind {
        ExperimentKind::NormalApprox => {
            let rows = experiments::run_normal_approx(cfg)?;
            Ok(format!("wrote {} rows to {}", rows.len(), cfg.out_dir.join("normal_approx.csv").display()))
        }
        ExperimentKind::Coverage => {
            let out = experiments::run_coverage(cfg)?;
            Ok(format!("wrote {} rows to {}", out.rows.len(), cfg.out_dir.join("coverage.csv").display()))
        }
        ExperimentKind::Certify => experiments::run_certify(cfg),
    })
}
