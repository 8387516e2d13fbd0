//! Experiment runners behind the `normal-approx`, `coverage` and `certify`
//! subcommands.

use std::path::Path;
use std::time::Instant;

use lsa_bootstrap::bootstrap::{
    coverage_runs, summarize_coverage, BootstrapConfig, CoverageConfig, CoverageRun,
};
use lsa_bootstrap::garnet::{generate_garnet_with_rewards, random_policy, td_certificate, td_constants, GarnetMdp, TdProblem};
use lsa_bootstrap::lsa::{run_lsa_with_burn_in, BurnIn, LsaProblem, SyntheticProblem};
use lsa_bootstrap::numkit::{derive_seed, ks_two_sample, mvn_sample, sqrtm_psd, EmpiricalSample, RngStream};
use lsa_bootstrap::stability::{
    certify_default, check_sample_size, check_schedule, max_admissible_c0, noise_stats, AcceptanceReport,
    StabilityCertificate,
};
use lsa_bootstrap::StepSchedule;
use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{parse_burn_in, ExperimentConfig, InitialPoint, NamedStep, ProblemSpec, StepConstant};
use crate::report::{fmt_f64, line_chart_log_x, write_text, CsvSink, Series};
use crate::CliError;

/// Stream family for the limiting-Gaussian reference draws.
const REFERENCE_TAG: u64 = 0x7265_6665_7265_6e63;
/// Noise-statistics draws for problems without finite support.
const NOISE_DRAWS: usize = 100_000;

pub enum BuiltProblem {
    Td(Box<TdProblem>),
    Synthetic(SyntheticProblem),
}

impl BuiltProblem {
    pub fn as_problem(&self) -> &dyn LsaProblem {
        match self {
            BuiltProblem::Td(p) => p.as_ref(),
            BuiltProblem::Synthetic(p) => p,
        }
    }

    pub fn certificate(&self) -> Result<StabilityCertificate, CliError> {
        match self {
            BuiltProblem::Td(p) => Ok(td_certificate(p.truth(), p.mdp().discount())),
            BuiltProblem::Synthetic(p) => Ok(certify_default(&p.exact().expect("synthetic is exact").a_bar)?),
        }
    }
}

pub fn build_problem(spec: &ProblemSpec) -> Result<BuiltProblem, CliError> {
    match spec {
        ProblemSpec::Garnet {
            n_states,
            n_actions,
            branching,
            discount,
            features,
            rewards,
            mdp_seed,
            mdp_file,
        } => {
            let mut rng = RngStream::new(*mdp_seed, 0);
            let mdp = match mdp_file {
                Some(path) => {
                    let text = std::fs::read_to_string(path)
                        .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))?;
                    let mdp: GarnetMdp = serde_json::from_str(&text)
                        .map_err(|e| CliError::Validation(format!("invalid MDP file {}: {e}", path.display())))?;
                    mdp.with_discount(*discount)?
                }
                None => generate_garnet_with_rewards(*n_states, *n_actions, *branching, *discount, *rewards, &mut rng)?,
            };
            let policy = random_policy(&mdp, &mut RngStream::new(*mdp_seed, 1));
            Ok(BuiltProblem::Td(Box::new(TdProblem::new(mdp, policy, features)?)))
        }
        ProblemSpec::Synthetic {
            dim,
            noise_a,
            noise_b,
            noise,
            instance_seed,
        } => {
            let base = SyntheticProblem::random(*dim, *noise_a, *noise_b, &mut RngStream::new(*instance_seed, 0))?;
            let exact = base.exact().expect("synthetic is exact");
            Ok(BuiltProblem::Synthetic(SyntheticProblem::new(
                exact.a_bar.clone(),
                exact.b_bar.clone(),
                *noise_a,
                *noise_b,
                *noise,
            )?))
        }
    }
}

/// Resolved step schedule for one exponent, with its admissibility report.
pub struct ResolvedSchedule {
    pub schedule: StepSchedule,
    pub report: AcceptanceReport,
}

pub fn resolve_schedule(cfg: &ExperimentConfig, cert: &StabilityCertificate, gamma: f64) -> Result<ResolvedSchedule, CliError> {
    let c0 = match cfg.schedule.c0 {
        StepConstant::Value(c) => c,
        StepConstant::Named(NamedStep::A3Max) => max_admissible_c0(cert, gamma),
    };
    let schedule = StepSchedule::new(c0, gamma)?;
    let report = check_schedule(&schedule, cert);
    if !report.passed {
        for v in &report.violations {
            eprintln!("warning: step schedule with gamma = {gamma} violates {v}");
        }
    }
    Ok(ResolvedSchedule { schedule, report })
}

fn initial_point(cfg: &ExperimentConfig, p: &dyn LsaProblem) -> DVector<f64> {
    match cfg.schedule.theta0 {
        InitialPoint::Zero => DVector::zeros(p.dim()),
        InitialPoint::ThetaStar => p.exact().expect("exact system").theta_star.clone(),
    }
}

fn prepare_out_dir(cfg: &ExperimentConfig) -> Result<&Path, CliError> {
    let dir = cfg.out_dir.as_path();
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    write_text(&dir.join("resolved_config.toml"), &cfg.to_toml())?;
    Ok(dir)
}

fn save_problem(dir: &Path, problem: &BuiltProblem) -> Result<(), CliError> {
    if let BuiltProblem::Td(p) = problem {
        let text = serde_json::to_string_pretty(p.mdp()).map_err(|e| CliError::Io(e.to_string()))?;
        write_text(&dir.join("mdp.json"), &(text + "\n"))?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NormalApproxRow {
    pub gamma: f64,
    pub n: usize,
    pub delta_n: f64,
    pub delta_n_scaled: f64,
    #[serde(skip)]
    pub runtime_seconds: f64,
}

pub const NORMAL_APPROX_HEADER: [&str; 4] = ["gamma", "n", "delta_n", "delta_n_scaled"];

/// Norms `‖Σ∞^{1/2} η‖` of `count` standard Gaussian draws.
pub fn reference_norms(p: &dyn LsaProblem, seed: u64, stream: u64, count: usize) -> Result<EmpiricalSample, CliError> {
    let sigma_inf = p
        .exact()
        .ok_or_else(|| CliError::Validation("problem has no exact ground truth".into()))?
        .sigma_inf()?;
    let root = sqrtm_psd(&sigma_inf)?;
    let mut rng = RngStream::new(derive_seed(seed, REFERENCE_TAG), stream);
    let draws = mvn_sample(&root, &mut rng, count)?;
    Ok(EmpiricalSample::new(draws.iter().map(|v| v.norm()).collect())?)
}

/// `√n ‖θ̄_n - θ*‖` for replicas `0..count`, replica `r` on data stream
/// `(data_seed, r)`.
pub fn trajectory_norms(
    p: &dyn LsaProblem,
    s: &StepSchedule,
    burn_in: BurnIn,
    n: usize,
    theta0: &DVector<f64>,
    data_seed: u64,
    count: usize,
) -> Result<Vec<f64>, CliError> {
    let star = &p.exact().ok_or_else(|| CliError::Validation("problem has no exact ground truth".into()))?.theta_star;
    let root_n = (n as f64).sqrt();
    (0..count)
        .into_par_iter()
        .map(|r| {
            let mut rng = RngStream::new(data_seed, r as u64);
            let run = run_lsa_with_burn_in(p, s, burn_in, n, theta0, &mut rng, false)?;
            Ok(root_n * (&run.theta_bar - star).norm())
        })
        .collect()
}

pub fn run_normal_approx(cfg: &ExperimentConfig) -> Result<Vec<NormalApproxRow>, CliError> {
    cfg.validate()?;
    let dir = prepare_out_dir(cfg)?;
    let problem = build_problem(&cfg.problem)?;
    save_problem(dir, &problem)?;
    let p = problem.as_problem();
    let cert = problem.certificate()?;
    let burn_in = parse_burn_in(&cfg.schedule.burn_in)?;
    let theta0 = initial_point(cfg, p);
    let na = &cfg.normal_approx;

    let reference = reference_norms(p, cfg.seeds.data, 0, na.reference_sample)?;
    let mut sink = CsvSink::create(&dir.join("normal_approx.csv"), &NORMAL_APPROX_HEADER)?;
    let mut rows = Vec::new();
    for &gamma in &cfg.schedule.gammas {
        let resolved = resolve_schedule(cfg, &cert, gamma)?;
        for &n in &na.n_grid {
            let start = Instant::now();
            let sample = if na.self_test {
                reference_norms(p, cfg.seeds.data, 1, na.replicas)?
            } else {
                EmpiricalSample::new(trajectory_norms(p, &resolved.schedule, burn_in, n, &theta0, cfg.seeds.data, na.replicas)?)?
            };
            let delta_n = ks_two_sample(&sample, &reference);
            let row = NormalApproxRow {
                gamma,
                n,
                delta_n,
                delta_n_scaled: delta_n * (n as f64).powf(0.25),
                runtime_seconds: start.elapsed().as_secs_f64(),
            };
            eprintln!(
                "normal-approx gamma = {gamma} n = {n}: delta_n = {:.4} ({:.1} s)",
                row.delta_n, row.runtime_seconds
            );
            sink.row(&[fmt_f64(gamma), n.to_string(), fmt_f64(row.delta_n), fmt_f64(row.delta_n_scaled)])?;
            rows.push(row);
        }
    }
    write_timing(dir, rows.iter().map(|r| (r.gamma, r.n, r.runtime_seconds)))?;
    write_normal_approx_plots(dir, cfg, &rows)?;
    Ok(rows)
}

/// Wall-clock times go to a separate file so the CSV outputs stay
/// byte-identical across runs.
fn write_timing(dir: &Path, entries: impl Iterator<Item = (f64, usize, f64)>) -> Result<(), CliError> {
    let mut text = String::new();
    for (gamma, n, secs) in entries {
        text.push_str(&format!("[[row]]\ngamma = {gamma:?}\nn = {n}\nruntime_seconds = {secs:?}\n\n"));
    }
    write_text(&dir.join("timing.toml"), &text)
}

fn series_by_gamma(cfg: &ExperimentConfig, rows: &[NormalApproxRow], value: impl Fn(&NormalApproxRow) -> f64) -> Vec<Series> {
    cfg.schedule
        .gammas
        .iter()
        .map(|&g| Series {
            label: format!("gamma = {g}"),
            points: rows.iter().filter(|r| r.gamma == g).map(|r| (r.n as f64, value(r))).collect(),
        })
        .collect()
}

fn write_normal_approx_plots(dir: &Path, cfg: &ExperimentConfig, rows: &[NormalApproxRow]) -> Result<(), CliError> {
    let raw = line_chart_log_x("Kolmogorov distance to the Gaussian limit", "n", "delta_n", &series_by_gamma(cfg, rows, |r| r.delta_n));
    write_text(&dir.join("delta_n.svg"), &raw)?;
    let scaled = line_chart_log_x(
        "Rescaled Kolmogorov distance",
        "n",
        "delta_n * n^(1/4)",
        &series_by_gamma(cfg, rows, |r| r.delta_n_scaled),
    );
    write_text(&dir.join("delta_n_scaled.svg"), &scaled)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CoverageRow {
    pub gamma: f64,
    pub level: f64,
    pub n: usize,
    pub b: usize,
    pub runs: usize,
    pub covered: usize,
    pub coverage: f64,
    pub binomial_lo: f64,
    pub binomial_hi: f64,
}

pub const COVERAGE_HEADER: [&str; 9] = ["gamma", "level", "n", "B", "runs", "covered", "coverage", "binomial_lo", "binomial_hi"];
pub const COVERAGE_RUNS_HEADER: [&str; 7] = ["gamma", "run_id", "n", "B", "level", "radius", "covered"];
pub const LAW_MATCH_HEADER: [&str; 5] = ["gamma", "n", "B", "runs", "ks_distance"];

/// KS distance between the pooled bootstrap statistics and the main
/// statistics across outer runs.
pub fn law_match_distance(runs: &[CoverageRun]) -> Result<f64, CliError> {
    let main = EmpiricalSample::new(runs.iter().map(|r| r.main_statistic).collect())?;
    let boot = EmpiricalSample::new(runs.iter().flat_map(|r| r.boot_statistics.iter().copied()).collect())?;
    Ok(ks_two_sample(&boot, &main))
}

#[derive(Clone, Debug)]
pub struct CoverageOutcome {
    pub rows: Vec<CoverageRow>,
    /// `(γ, n, KS distance)`.
    pub law_match: Vec<(f64, usize, f64)>,
}

pub fn coverage_config(cfg: &ExperimentConfig, p: &dyn LsaProblem, schedule: StepSchedule, n: usize) -> CoverageConfig {
    CoverageConfig {
        schedule,
        n,
        theta0: initial_point(cfg, p),
        bootstrap: BootstrapConfig {
            b_count: cfg.bootstrap.b,
            law: cfg.bootstrap.law,
            statistic: cfg.bootstrap.statistic.clone(),
            weight_seed: cfg.seeds.weight,
            retain: false,
        },
        levels: cfg.bootstrap.levels.clone(),
        data_seed: cfg.seeds.data,
    }
}

pub fn run_coverage(cfg: &ExperimentConfig) -> Result<CoverageOutcome, CliError> {
    cfg.validate()?;
    let dir = prepare_out_dir(cfg)?;
    let problem = build_problem(&cfg.problem)?;
    save_problem(dir, &problem)?;
    let p = problem.as_problem();
    let cert = problem.certificate()?;

    let mut summary = CsvSink::create(&dir.join("coverage.csv"), &COVERAGE_HEADER)?;
    let mut per_run = CsvSink::create(&dir.join("coverage_runs.csv"), &COVERAGE_RUNS_HEADER)?;
    let mut law = CsvSink::create(&dir.join("law_match.csv"), &LAW_MATCH_HEADER)?;
    let mut outcome = CoverageOutcome {
        rows: Vec::new(),
        law_match: Vec::new(),
    };
    let mut timing = Vec::new();
    for &gamma in &cfg.schedule.gammas {
        let resolved = resolve_schedule(cfg, &cert, gamma)?;
        for &n in &cfg.coverage.n_grid {
            let start = Instant::now();
            let cc = coverage_config(cfg, p, resolved.schedule, n);
            let runs = coverage_runs(p, &cc, cfg.coverage.runs)?;
            for r in &runs {
                for (i, &level) in cc.levels.iter().enumerate() {
                    per_run.row(&[
                        fmt_f64(gamma),
                        r.run_id.to_string(),
                        n.to_string(),
                        cc.bootstrap.b_count.to_string(),
                        fmt_f64(level),
                        fmt_f64(r.radii[i]),
                        u8::from(r.covered[i]).to_string(),
                    ])?;
                }
            }
            for est in summarize_coverage(&runs, &cc.levels) {
                let row = CoverageRow {
                    gamma,
                    level: est.level,
                    n,
                    b: cc.bootstrap.b_count,
                    runs: est.runs,
                    covered: est.covered,
                    coverage: est.coverage,
                    binomial_lo: est.lo,
                    binomial_hi: est.hi,
                };
                eprintln!(
                    "coverage gamma = {gamma} n = {n} level = {}: {:.4} [{:.4}, {:.4}]",
                    row.level, row.coverage, row.binomial_lo, row.binomial_hi
                );
                summary.row(&[
                    fmt_f64(gamma),
                    fmt_f64(row.level),
                    n.to_string(),
                    row.b.to_string(),
                    row.runs.to_string(),
                    row.covered.to_string(),
                    fmt_f64(row.coverage),
                    fmt_f64(row.binomial_lo),
                    fmt_f64(row.binomial_hi),
                ])?;
                outcome.rows.push(row);
            }
            let ks = law_match_distance(&runs)?;
            law.row(&[
                fmt_f64(gamma),
                n.to_string(),
                cc.bootstrap.b_count.to_string(),
                runs.len().to_string(),
                fmt_f64(ks),
            ])?;
            outcome.law_match.push((gamma, n, ks));
            timing.push((gamma, n, start.elapsed().as_secs_f64()));
        }
    }
    write_timing(dir, timing.into_iter())?;
    let series: Vec<Series> = cfg
        .schedule
        .gammas
        .iter()
        .flat_map(|&g| {
            cfg.bootstrap.levels.iter().map(move |&l| (g, l))
        })
        .map(|(g, l)| Series {
            label: format!("gamma = {g}, level = {l}"),
            points: outcome
                .rows
                .iter()
                .filter(|r| r.gamma == g && r.level == l)
                .map(|r| (r.n as f64, r.coverage))
                .collect(),
        })
        .collect();
    write_text(
        &dir.join("coverage.svg"),
        &line_chart_log_x("Bootstrap coverage", "n", "coverage", &series),
    )?;
    Ok(outcome)
}

/// Certificate, per-exponent schedule checks and sample-size checks as
/// structured text.
pub fn run_certify(cfg: &ExperimentConfig) -> Result<String, CliError> {
    cfg.validate()?;
    let dir = prepare_out_dir(cfg)?;
    let problem = build_problem(&cfg.problem)?;
    save_problem(dir, &problem)?;
    let p = problem.as_problem();
    let cert = problem.certificate()?;
    let noise = noise_stats(p, &mut RngStream::new(cfg.seeds.data, 0), NOISE_DRAWS)?;

    let mut out = String::from("[certificate]\n");
    out.push_str(&cert.to_report());
    out.push_str("\n[noise]\n");
    out.push_str(&format!("b_a = {:?}\neps_inf = {:?}\nlambda_min_eps = {:?}\n", noise.b_a, noise.eps_inf, noise.lambda_min_eps));
    if let BuiltProblem::Td(td) = &problem {
        let c = td_constants(td.truth(), td.mdp().discount());
        out.push_str("\n[td_constants]\n");
        out.push_str(&format!(
            "b_a = {:?}\neps_inf = {:?}\na = {:?}\nalpha_inf = {:?}\n",
            c.b_a, c.eps_inf, c.a, c.alpha_inf
        ));
    }
    let slack = cert.contraction_slack(&p.exact().expect("exact").a_bar, lsa_bootstrap::stability::CONTRACTION_GRID)?;
    out.push_str(&format!("\n[contraction]\nworst_slack = {slack:?}\npassed = {}\n", slack <= 1e-12));
    let d = p.dim() as u64;
    for &gamma in &cfg.schedule.gammas {
        let resolved = resolve_schedule(cfg, &cert, gamma)?;
        out.push_str(&format!("\n[[schedule]]\ngamma = {gamma:?}\nc0 = {:?}\n", resolved.schedule.c0()));
        out.push_str(&resolved.report.to_string());
        for &n in &cfg.normal_approx.n_grid {
            let rep = check_sample_size(&resolved.schedule, &cert, &noise, n as u64, d);
            out.push_str(&format!("\n[[schedule.sample_size]]\nn = {n}\n"));
            out.push_str(&rep.to_string());
            if rep.minimal_n.is_none() {
                out.push_str("minimal_n_found = false\n");
            }
        }
    }
    write_text(&dir.join("certificate.txt"), &out)?;
    Ok(out)
}
