//! Lyapunov stability certificate and the admissibility checks on step
//! sizes and sample size.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lsa::{require_exact, LsaProblem, Observation, StepSchedule};
use crate::numkit::{
    identity, inv_sqrtm_pd, is_symmetric, lambda_max_sym, lambda_min_sym, op_norm, solve_lyapunov,
    RngStream,
};

/// Points on the `[0, α∞]` grid used to verify the contraction bound.
pub const CONTRACTION_GRID: usize = 100;
const CONTRACTION_TOL: f64 = 1e-12;

/// `(P, Q, a, α∞, κ_Q)` with `ĀᵀQ + QĀ = P`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StabilityCertificate {
    pub p: DMatrix<f64>,
    pub q: DMatrix<f64>,
    /// Contraction rate.
    pub a: f64,
    /// Largest admissible constant step.
    pub alpha_inf: f64,
    /// `λ_max(Q) / λ_min(Q)`.
    pub kappa_q: f64,
}

impl StabilityCertificate {
    /// `‖M‖_Q = sqrt(λ_max(Q^{-1/2} Mᵀ Q M Q^{-1/2}))`.
    pub fn q_norm(&self, m: &DMatrix<f64>) -> Result<f64> {
        q_operator_norm(&self.q, m)
    }

    /// Largest `‖I - αĀ‖_Q² - (1 - αa)` over a uniform grid of
    /// `α ∈ [0, α∞]`; non-positive when the contraction bound holds.
    pub fn contraction_slack(&self, a_bar: &DMatrix<f64>, points: usize) -> Result<f64> {
        let d = a_bar.nrows();
        let points = points.max(2);
        let mut worst = f64::NEG_INFINITY;
        for i in 0..points {
            let alpha = self.alpha_inf * i as f64 / (points - 1) as f64;
            let m = identity(d) - a_bar * alpha;
            let lhs = self.q_norm(&m)?.powi(2);
            worst = worst.max(lhs - (1.0 - alpha * self.a));
        }
        Ok(worst)
    }

    /// Structured-text rendering consumed by the CLI.
    pub fn to_report(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("a = {}\n", self.a));
        out.push_str(&format!("alpha_inf = {}\n", self.alpha_inf));
        out.push_str(&format!("kappa_q = {}\n", self.kappa_q));
        out.push_str(&format!("q = {}\n", matrix_literal(&self.q)));
        out.push_str(&format!("p = {}\n", matrix_literal(&self.p)));
        out
    }
}

fn matrix_literal(m: &DMatrix<f64>) -> String {
    let rows: Vec<String> = m
        .row_iter()
        .map(|r| {
            let cells: Vec<String> = r.iter().map(|x| format!("{x:?}")).collect();
            format!("[{}]", cells.join(", "))
        })
        .collect();
    format!("[{}]", rows.join(", "))
}

pub(crate) fn q_operator_norm(q: &DMatrix<f64>, m: &DMatrix<f64>) -> Result<f64> {
    let root_inv = inv_sqrtm_pd(q)?;
    let inner = &root_inv * m.transpose() * q * m * &root_inv;
    Ok(lambda_max_sym(&inner).max(0.0).sqrt())
}

/// Certificate constants from the Lyapunov solution for a given `P ≻ I`,
/// without the numerical contraction check.
pub fn lyapunov_certificate(a_bar: &DMatrix<f64>, p: &DMatrix<f64>) -> Result<StabilityCertificate> {
    if !is_symmetric(p, 1e-10) {
        return Err(Error::validation("P must be symmetric"));
    }
    let p_min = lambda_min_sym(p);
    if p_min <= 1.0 {
        return Err(Error::validation(format!(
            "P must satisfy P > I, smallest eigenvalue {p_min:.6e}"
        )));
    }
    let q = solve_lyapunov(a_bar, p)?;
    let q_max = lambda_max_sym(&q);
    let kappa_q = q_max / lambda_min_sym(&q);
    let a_q = q_operator_norm(&q, a_bar)?;
    let a = p_min / (2.0 * q_max);
    let alpha_inf = (p_min / (2.0 * kappa_q * a_q * a_q)).min(q_max / p_min);

    Ok(StabilityCertificate {
        p: p.clone(),
        q,
        a,
        alpha_inf,
        kappa_q,
    })
}

/// [`lyapunov_certificate`] followed by a grid check of
/// `‖I - αĀ‖_Q² ≤ 1 - αa` on `[0, α∞]`.
pub fn certify(a_bar: &DMatrix<f64>, p: &DMatrix<f64>) -> Result<StabilityCertificate> {
    let cert = lyapunov_certificate(a_bar, p)?;
    let slack = cert.contraction_slack(a_bar, CONTRACTION_GRID)?;
    if slack > CONTRACTION_TOL {
        return Err(Error::Stability {
            reason: format!("contraction check failed by {slack:.3e}"),
            re: slack,
            im: 0.0,
        });
    }
    Ok(cert)
}

/// Certificate with the default `P = 2I`.
pub fn certify_default(a_bar: &DMatrix<f64>) -> Result<StabilityCertificate> {
    certify(a_bar, &(identity(a_bar.nrows()) * 2.0))
}

/// One failed bound in an acceptance report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub bound: String,
    pub value: f64,
    pub limit: f64,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: value {} vs limit {}", self.bound, self.value, self.limit)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceReport {
    pub passed: bool,
    pub violations: Vec<Violation>,
    /// Smallest sample size satisfying the bound, when one was searched for.
    /// `None` after a search means no finite `n` was found.
    pub minimal_n: Option<u64>,
}

impl AcceptanceReport {
    fn from_violations(violations: Vec<Violation>, minimal_n: Option<u64>) -> Self {
        Self {
            passed: violations.is_empty(),
            violations,
            minimal_n,
        }
    }
}

impl fmt::Display for AcceptanceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "passed = {}", self.passed)?;
        if let Some(n) = self.minimal_n {
            writeln!(f, "minimal_n = {n}")?;
        }
        for v in &self.violations {
            writeln!(f, "violation = \"{v}\"")?;
        }
        Ok(())
    }
}

/// Checks `0 < c0 ≤ α∞ ∧ a ∧ (1 - γ)`.
pub fn check_schedule(s: &StepSchedule, cert: &StabilityCertificate) -> AcceptanceReport {
    let c0 = s.c0();
    let mut violations = Vec::new();
    for (bound, limit) in [
        ("c0 <= alpha_inf", cert.alpha_inf),
        ("c0 <= a", cert.a),
        ("c0 <= 1 - gamma", 1.0 - s.gamma()),
    ] {
        if c0 > limit {
            violations.push(Violation {
                bound: bound.into(),
                value: c0,
                limit,
            });
        }
    }
    AcceptanceReport::from_violations(violations, None)
}

/// Largest admissible `c0` for the given exponent.
pub fn max_admissible_c0(cert: &StabilityCertificate, gamma: f64) -> f64 {
    cert.alpha_inf.min(cert.a).min(1.0 - gamma)
}

/// Sup-norm noise constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseStats {
    /// `sup ‖A(z)‖ ∨ sup ‖A(z) - Ā‖`.
    pub b_a: f64,
    /// `sup ‖ε(z)‖`.
    pub eps_inf: f64,
    /// `λ_min(Σε)`.
    pub lambda_min_eps: f64,
}

/// Sample-size condition for a given schedule and noise level.
#[derive(Clone, Copy, Debug)]
struct SampleSizeBound {
    gamma: f64,
    rhs: f64,
}

impl SampleSizeBound {
    fn new(s: &StepSchedule, cert: &StabilityCertificate, noise: &NoiseStats) -> Self {
        let (c0, gamma, a) = (s.c0(), s.gamma(), cert.a);
        let b2 = noise.b_a * noise.b_a;
        let rhs = if gamma == 0.5 {
            let k = 1.0 - std::f64::consts::SQRT_2 / 2.0;
            (c0 * cert.kappa_q * b2 / (a * k)).max(4.0 / (a * c0 * k))
        } else {
            let k = 1.0 - 0.5f64.powf(1.0 - gamma);
            (2.0 * c0 * cert.kappa_q * b2 / (a * (2.0 * gamma - 1.0) * k))
                .max(8.0 * gamma * (1.0 - gamma) / (a * c0 * k))
        };
        Self { gamma, rhs }
    }

    fn lhs(&self, n: u64) -> f64 {
        let nf = n as f64;
        let l = nf.ln();
        if self.gamma == 0.5 {
            nf.sqrt() / ((1.0 + l) * l)
        } else {
            nf.powf(1.0 - self.gamma) / l
        }
    }

    /// The left-hand side decreases up to this size and increases after it;
    /// only the increasing branch is meaningful.
    fn turning_point(&self) -> u64 {
        let log_turn = if self.gamma == 0.5 {
            // Root of L² - 3L - 2 = 0.
            (3.0 + 17f64.sqrt()) / 2.0
        } else {
            1.0 / (1.0 - self.gamma)
        };
        log_turn.exp().ceil() as u64
    }

    fn holds(&self, n: u64) -> bool {
        n >= self.turning_point() && self.lhs(n) >= self.rhs
    }

    /// Smallest `n ≥ floor` with `holds(n)`, by exponential search and bisection.
    fn minimal_n(&self, floor: u64) -> Option<u64> {
        const CAP: u64 = i64::MAX as u64;
        let mut lo = floor.max(self.turning_point()).max(2);
        if self.holds(lo) {
            return Some(lo);
        }
        let mut hi = lo;
        loop {
            if hi >= CAP {
                return None;
            }
            hi = hi.saturating_mul(2).min(CAP);
            if self.holds(hi) {
                break;
            }
            lo = hi;
        }
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            if self.holds(mid) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Some(hi)
    }
}

/// Checks `n ≥ d` and the lower bound on `n` for the schedule's exponent.
pub fn check_sample_size(
    s: &StepSchedule,
    cert: &StabilityCertificate,
    noise: &NoiseStats,
    n: u64,
    d: u64,
) -> AcceptanceReport {
    let bound = SampleSizeBound::new(s, cert, noise);
    let mut violations = Vec::new();
    if n < d {
        violations.push(Violation {
            bound: "n >= d".into(),
            value: n as f64,
            limit: d as f64,
        });
    }
    if !bound.holds(n) {
        violations.push(Violation {
            bound: "sample size bound".into(),
            value: if n >= 2 { bound.lhs(n) } else { 0.0 },
            limit: bound.rhs,
        });
    }
    AcceptanceReport::from_violations(violations, bound.minimal_n(d))
}

/// Noise constants, exact over an enumerable support and empirical otherwise.
pub fn noise_stats(p: &dyn LsaProblem, rng: &mut RngStream, draws: usize) -> Result<NoiseStats> {
    let exact = require_exact(p)?;
    let d = exact.dim();
    let mut b_a = 0.0f64;
    let mut eps_inf = 0.0f64;
    let mut sigma = DMatrix::zeros(d, d);
    let mut visit = |obs: &Observation, weight: f64, sigma: &mut DMatrix<f64>| {
        b_a = b_a.max(op_norm(&obs.a)).max(op_norm(&(&obs.a - &exact.a_bar)));
        let eps: DVector<f64> = exact.noise(obs);
        eps_inf = eps_inf.max(eps.norm());
        sigma.ger(weight, &eps, &eps, 1.0);
    };

    match p.support() {
        Some(support) => {
            for (weight, obs) in &support {
                if *weight > 0.0 {
                    visit(obs, *weight, &mut sigma);
                }
            }
        }
        None => {
            if draws == 0 {
                return Err(Error::validation("noise_stats needs at least one draw"));
            }
            let mut obs = Observation::zeros(d);
            let w = 1.0 / draws as f64;
            for _ in 0..draws {
                p.sample_into(rng, &mut obs);
                visit(&obs, w, &mut sigma);
            }
        }
    }
    if !(b_a.is_finite() && eps_inf.is_finite()) {
        return Err(Error::Numerical("non-finite noise statistics".into()));
    }
    Ok(NoiseStats {
        b_a,
        eps_inf,
        lambda_min_eps: lambda_min_sym(&sigma),
    })
}
