//! Online multiplier bootstrap for the tail-averaged LSA estimator.
//!
//! After a shared burn-in, `B` replicas follow
//! `θ^b_k = θ^b_{k-1} - α_k w_k (A_k θ^b_{k-1} - b_k)` on the same data
//! stream as the main trajectory, each with its own i.i.d. weights of mean
//! one and variance one. The spread of `√n(θ̄^b - θ̄_n)` approximates the law
//! of `√n(θ̄_n - θ*)`.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, ContinuousCDF};

use crate::error::{Error, Result};
use crate::lsa::{
    check_theta0, guard, lsa_step, relative_residual, require_exact, LsaProblem, LsaRun,
    Observation, StepSchedule,
};
use crate::numkit::{
    derive_seed, inv_sqrtm_pd, lambda_max_sym, quantile_rank, KahanVec, RngStream,
};

/// Minimum number of replicas accepted by [`confidence_set`].
pub const MIN_REPLICAS: usize = 20;

/// Law of the bootstrap multipliers. All laws have mean 1 and variance 1
/// except [`WeightLaw::Unit`], which is the degenerate `w ≡ 1` used to test
/// that the perturbed recursion collapses onto the main one.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightLaw {
    #[default]
    GaussianMean1,
    TwoPoint,
    Exponential,
    Unit,
}

impl WeightLaw {
    pub fn mean(self) -> f64 {
        1.0
    }

    pub fn variance(self) -> f64 {
        match self {
            WeightLaw::Unit => 0.0,
            _ => 1.0,
        }
    }
}

pub fn sample_weight(law: WeightLaw, rng: &mut RngStream) -> f64 {
    match law {
        WeightLaw::GaussianMean1 => 1.0 + rng.standard_normal(),
        WeightLaw::TwoPoint => {
            if rng.uniform() < 0.5 {
                0.0
            } else {
                2.0
            }
        }
        WeightLaw::Exponential => Exp1.sample(rng),
        WeightLaw::Unit => 1.0,
    }
}

/// Scalar statistic summarizing a deviation vector.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StatisticKind {
    /// Euclidean norm: confidence sets are balls.
    #[default]
    NormBall,
    /// `|cᵀ v|`: confidence sets are intervals for `cᵀθ`.
    LinearFunctional(Vec<f64>),
}

impl StatisticKind {
    pub fn evaluate(&self, v: &DVector<f64>) -> f64 {
        match self {
            StatisticKind::NormBall => v.norm(),
            StatisticKind::LinearFunctional(c) => {
                c.iter().zip(v.iter()).map(|(a, b)| a * b).sum::<f64>().abs()
            }
        }
    }

    fn validate(&self, d: usize) -> Result<()> {
        match self {
            StatisticKind::LinearFunctional(c) if c.len() != d => Err(Error::validation(format!(
                "linear functional has length {} but the problem has dimension {d}",
                c.len()
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub b_count: usize,
    pub law: WeightLaw,
    pub statistic: StatisticKind,
    /// Replica `j` draws its weights from stream `(weight_seed, j)`.
    pub weight_seed: u64,
    /// Keep trajectories, observations and weights for diagnostics.
    pub retain: bool,
}

impl BootstrapConfig {
    pub fn new(b_count: usize, law: WeightLaw, weight_seed: u64) -> Self {
        Self {
            b_count,
            law,
            statistic: StatisticKind::NormBall,
            weight_seed,
            retain: false,
        }
    }
}

/// Retained path of one bootstrap replica.
#[derive(Clone, Debug)]
pub struct ReplicaTrace {
    /// `θ^b_n … θ^b_{2n}`.
    pub trajectory: Vec<DVector<f64>>,
    /// `w_{n+1} … w_{2n}`.
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct BootstrapEnsemble {
    pub b_count: usize,
    pub main: LsaRun,
    /// `θ̄^b_n` per replica.
    pub boot_averages: Vec<DVector<f64>>,
    pub statistic: StatisticKind,
    pub traces: Option<Vec<ReplicaTrace>>,
}

impl BootstrapEnsemble {
    /// `stat(√n (θ̄^b_j - θ̄_n))` for every replica.
    pub fn statistics(&self) -> Vec<f64> {
        let root_n = (self.main.n as f64).sqrt();
        self.boot_averages
            .iter()
            .map(|avg| self.statistic.evaluate(&((avg - &self.main.theta_bar) * root_n)))
            .collect()
    }
}

/// Runs the main trajectory and `B` bootstrap replicas in one pass over a
/// single stream of `2n` observations.
pub fn run_bootstrap(
    p: &dyn LsaProblem,
    s: &StepSchedule,
    n: usize,
    theta0: &DVector<f64>,
    cfg: &BootstrapConfig,
    data_rng: &mut RngStream,
) -> Result<BootstrapEnsemble> {
    check_theta0(p, theta0)?;
    if n == 0 {
        return Err(Error::validation("averaging length n must be positive"));
    }
    if cfg.b_count == 0 {
        return Err(Error::validation("bootstrap needs at least one replica"));
    }
    cfg.statistic.validate(p.dim())?;
    let d = p.dim();
    let b = cfg.b_count;

    let mut theta = theta0.clone();
    let mut obs = Observation::zeros(d);
    let mut scratch = DVector::zeros(d);
    let mut trajectory = cfg.retain.then(|| vec![theta0.clone()]);
    let mut observations = cfg.retain.then(Vec::new);

    let mut record = |theta: &DVector<f64>, obs: &Observation| {
        if let Some(t) = trajectory.as_mut() {
            t.push(theta.clone());
        }
        if let Some(o) = observations.as_mut() {
            o.push(obs.clone());
        }
    };

    for k in 1..=n {
        p.sample_into(data_rng, &mut obs);
        lsa_step(&mut theta, &obs, s.alpha(k), 1.0, &mut scratch);
        guard(&theta, k, None)?;
        record(&theta, &obs);
    }
    let theta_at_n = theta.clone();

    let mut weight_rngs: Vec<RngStream> = (0..b)
        .map(|j| RngStream::new(cfg.weight_seed, j as u64))
        .collect();
    let mut boot = vec![theta_at_n.clone(); b];
    let mut boot_sums = vec![KahanVec::zeros(d); b];
    let mut main_sum = KahanVec::zeros(d);
    let mut traces = cfg.retain.then(|| {
        (0..b)
            .map(|_| ReplicaTrace {
                trajectory: vec![theta_at_n.clone()],
                weights: Vec::with_capacity(n),
            })
            .collect::<Vec<_>>()
    });

    for k in n + 1..=2 * n {
        // Iterates at k-1 enter the averages over k-1 = n … 2n-1.
        main_sum.add(&theta);
        for (sum, tb) in boot_sums.iter_mut().zip(&boot) {
            sum.add(tb);
        }

        p.sample_into(data_rng, &mut obs);
        let alpha = s.alpha(k);
        for j in 0..b {
            let w = sample_weight(cfg.law, &mut weight_rngs[j]);
            lsa_step(&mut boot[j], &obs, alpha, w, &mut scratch);
            guard(&boot[j], k, Some(j))?;
            if let Some(tr) = traces.as_mut() {
                tr[j].trajectory.push(boot[j].clone());
                tr[j].weights.push(w);
            }
        }
        lsa_step(&mut theta, &obs, alpha, 1.0, &mut scratch);
        guard(&theta, k, None)?;
        record(&theta, &obs);
    }

    let main = LsaRun {
        theta_bar: main_sum.mean(n),
        theta_at_n,
        theta_at_2n: theta,
        n,
        burn_in: n,
        trajectory,
        observations,
    };
    Ok(BootstrapEnsemble {
        b_count: b,
        main,
        boot_averages: boot_sums.iter().map(|s| s.mean(n)).collect(),
        statistic: cfg.statistic.clone(),
        traces,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceSet {
    pub center: DVector<f64>,
    pub radius: f64,
    pub level: f64,
    pub statistic: StatisticKind,
}

impl ConfidenceSet {
    pub fn contains(&self, theta: &DVector<f64>) -> bool {
        self.statistic.evaluate(&(theta - &self.center)) <= self.radius
    }
}

/// Radius `q/√n` from precomputed bootstrap statistics, where `q` is the
/// `⌈level·B⌉`-th order statistic.
pub fn radius_from_statistics(stats: &[f64], n: usize, level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::validation(format!(
            "confidence level must lie in (0,1), got {level}"
        )));
    }
    if stats.is_empty() {
        return Err(Error::validation("no bootstrap statistics"));
    }
    let mut sorted = stats.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[quantile_rank(level, sorted.len()) - 1] / (n as f64).sqrt())
}

pub fn confidence_set(e: &BootstrapEnsemble, level: f64) -> Result<ConfidenceSet> {
    if e.b_count < MIN_REPLICAS {
        return Err(Error::validation(format!(
            "confidence sets need at least {MIN_REPLICAS} replicas, got {}",
            e.b_count
        )));
    }
    Ok(ConfidenceSet {
        center: e.main.theta_bar.clone(),
        radius: radius_from_statistics(&e.statistics(), e.main.n, level)?,
        level,
        statistic: e.statistic.clone(),
    })
}

/// Settings shared by all outer runs of a coverage study.
#[derive(Clone, Debug)]
pub struct CoverageConfig {
    pub schedule: StepSchedule,
    pub n: usize,
    pub theta0: DVector<f64>,
    pub bootstrap: BootstrapConfig,
    pub levels: Vec<f64>,
    /// Outer run `r` reads data from stream `(data_seed, r)`.
    pub data_seed: u64,
}

/// Outcome of a single outer run.
#[derive(Clone, Debug)]
pub struct CoverageRun {
    pub run_id: usize,
    /// `stat(√n (θ̄_n - θ*))`.
    pub main_statistic: f64,
    /// `stat(√n (θ̄^b_j - θ̄_n))` for `j = 1 … B`.
    pub boot_statistics: Vec<f64>,
    /// One radius per configured level.
    pub radii: Vec<f64>,
    pub covered: Vec<bool>,
}

/// Empirical coverage with its exact binomial 95% interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageEstimate {
    pub level: f64,
    pub runs: usize,
    pub covered: usize,
    pub coverage: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Clopper-Pearson interval at confidence `1 - alpha`. A single run carries
/// no information and is reported as `[0, 1]`.
pub fn clopper_pearson(successes: usize, trials: usize, alpha: f64) -> (f64, f64) {
    if trials <= 1 {
        return (0.0, 1.0);
    }
    let (x, n) = (successes as f64, trials as f64);
    let lo = if successes == 0 {
        0.0
    } else {
        Beta::new(x, n - x + 1.0)
            .expect("valid beta parameters")
            .inverse_cdf(alpha / 2.0)
    };
    let hi = if successes == trials {
        1.0
    } else {
        Beta::new(x + 1.0, n - x)
            .expect("valid beta parameters")
            .inverse_cdf(1.0 - alpha / 2.0)
    };
    (lo, hi)
}

/// One outer replication: bootstrap ensemble plus membership tests.
pub fn coverage_run(p: &dyn LsaProblem, cfg: &CoverageConfig, run_id: usize) -> Result<CoverageRun> {
    let exact = require_exact(p)?;
    let mut data_rng = RngStream::new(cfg.data_seed, run_id as u64);
    let boot_cfg = BootstrapConfig {
        weight_seed: derive_seed(cfg.bootstrap.weight_seed, run_id as u64),
        retain: false,
        ..cfg.bootstrap.clone()
    };
    let e = run_bootstrap(p, &cfg.schedule, cfg.n, &cfg.theta0, &boot_cfg, &mut data_rng)?;
    let root_n = (cfg.n as f64).sqrt();
    let main_statistic = e
        .statistic
        .evaluate(&((&e.main.theta_bar - &exact.theta_star) * root_n));
    let boot_statistics = e.statistics();
    let radii = cfg
        .levels
        .iter()
        .map(|&l| radius_from_statistics(&boot_statistics, cfg.n, l))
        .collect::<Result<Vec<_>>>()?;
    let covered = radii
        .iter()
        .map(|&r| main_statistic <= r * root_n)
        .collect();
    Ok(CoverageRun {
        run_id,
        main_statistic,
        boot_statistics,
        radii,
        covered,
    })
}

/// Runs `runs` independent outer replications on the current rayon pool and
/// returns them ordered by run id, so results do not depend on scheduling.
pub fn coverage_runs(p: &dyn LsaProblem, cfg: &CoverageConfig, runs: usize) -> Result<Vec<CoverageRun>> {
    if runs == 0 {
        return Err(Error::validation("coverage needs at least one run"));
    }
    if cfg.bootstrap.b_count < MIN_REPLICAS {
        return Err(Error::validation(format!(
            "coverage needs at least {MIN_REPLICAS} bootstrap replicas"
        )));
    }
    for &l in &cfg.levels {
        if !(l > 0.0 && l < 1.0) {
            return Err(Error::validation(format!("level {l} outside (0,1)")));
        }
    }
    (0..runs)
        .into_par_iter()
        .map(|r| coverage_run(p, cfg, r))
        .collect()
}

pub fn summarize_coverage(runs: &[CoverageRun], levels: &[f64]) -> Vec<CoverageEstimate> {
    levels
        .iter()
        .enumerate()
        .map(|(i, &level)| {
            let covered = runs.iter().filter(|r| r.covered[i]).count();
            let (lo, hi) = clopper_pearson(covered, runs.len(), 0.05);
            CoverageEstimate {
                level,
                runs: runs.len(),
                covered,
                coverage: covered as f64 / runs.len() as f64,
                lo,
                hi,
            }
        })
        .collect()
}

pub fn evaluate_coverage(p: &dyn LsaProblem, cfg: &CoverageConfig, runs: usize) -> Result<Vec<CoverageEstimate>> {
    let results = coverage_runs(p, cfg, runs)?;
    Ok(summarize_coverage(&results, &cfg.levels))
}

/// `√n Ā(θ̄^b - θ̄_n) = -W^b + D₁^b - D₂^b - D₃^b + D₄^b - D₅^b`.
#[derive(Clone, Debug)]
pub struct BootstrapDecomposition {
    pub t_stat: DVector<f64>,
    pub w: DVector<f64>,
    pub d1: DVector<f64>,
    pub d2: DVector<f64>,
    pub d3: DVector<f64>,
    pub d4: DVector<f64>,
    pub d5: DVector<f64>,
}

impl BootstrapDecomposition {
    pub fn reconstruction(&self) -> DVector<f64> {
        -&self.w + &self.d1 - &self.d2 - &self.d3 + &self.d4 - &self.d5
    }

    pub fn residual(&self) -> f64 {
        relative_residual(
            &(&self.t_stat - self.reconstruction()),
            [&self.t_stat, &self.w, &self.d1, &self.d2, &self.d3, &self.d4, &self.d5],
        )
    }
}

pub fn decompose_bootstrap_error(
    e: &BootstrapEnsemble,
    replica: usize,
    p: &dyn LsaProblem,
    s: &StepSchedule,
) -> Result<BootstrapDecomposition> {
    let exact = require_exact(p)?;
    let (traj, obs, trace) = match (&e.main.trajectory, &e.main.observations, &e.traces) {
        (Some(t), Some(o), Some(tr)) => (t, o, tr),
        _ => return Err(Error::validation("ensemble was run without retention")),
    };
    let trace = trace
        .get(replica)
        .ok_or_else(|| Error::validation(format!("replica {replica} out of range")))?;
    let n = e.main.n;
    let d = exact.dim();
    let root_n = (n as f64).sqrt();
    let star = &exact.theta_star;
    // trace.trajectory[i] = θ^b_{n+i}
    let boot_at = |k: usize| &trace.trajectory[k - n];

    let mut w = DVector::zeros(d);
    let mut d3 = DVector::zeros(d);
    let mut d4 = DVector::zeros(d);
    let mut d5 = DVector::zeros(d);
    for k in n + 1..=2 * n {
        let o = &obs[k - 1];
        let wk = trace.weights[k - n - 1] - 1.0;
        let gap = boot_at(k - 1) - &traj[k - 1];
        w += exact.noise(o) * wk;
        d3 += &o.a * (boot_at(k - 1) - star) * wk;
        d4 += &gap * (1.0 / s.alpha(k) - 1.0 / s.alpha(k - 1));
        d5 += (&o.a - &exact.a_bar) * &gap;
    }
    let d1 = (boot_at(n) - &traj[n]) / (root_n * s.alpha(n));
    let d2 = (boot_at(2 * n) - &traj[2 * n]) / (root_n * s.alpha(2 * n));

    Ok(BootstrapDecomposition {
        t_stat: &exact.a_bar * (&e.boot_averages[replica] - &e.main.theta_bar) * root_n,
        w: w / root_n,
        d1,
        d2,
        d3: d3 / root_n,
        d4: d4 / root_n,
        d5: d5 / root_n,
    })
}

/// `n⁻¹ Σ ε_ℓ ε_ℓᵀ` over the given observations.
pub fn empirical_noise_covariance(p: &dyn LsaProblem, observations: &[Observation]) -> Result<DMatrix<f64>> {
    let exact = require_exact(p)?;
    if observations.is_empty() {
        return Err(Error::validation("no observations"));
    }
    let d = exact.dim();
    let mut sigma = DMatrix::zeros(d, d);
    let w = 1.0 / observations.len() as f64;
    for o in observations {
        let eps = exact.noise(o);
        sigma.ger(w, &eps, &eps, 1.0);
    }
    Ok(sigma)
}

/// `(√d / 2) ‖Σε^{-1/2} Σε^b Σε^{-1/2} - I‖`, the comparison bound between
/// `N(0, Σε)` and `N(0, Σε^b)`.
pub fn gaussian_comparison(sigma_eps: &DMatrix<f64>, sigma_eps_boot: &DMatrix<f64>) -> Result<f64> {
    let d = sigma_eps.nrows();
    if sigma_eps_boot.shape() != (d, d) {
        return Err(Error::validation("covariance shapes differ"));
    }
    let root_inv = inv_sqrtm_pd(sigma_eps)?;
    let m = &root_inv * sigma_eps_boot * &root_inv - DMatrix::identity(d, d);
    // m is symmetric, so its operator norm is its spectral radius.
    let spectral = lambda_max_sym(&m).max(-crate::numkit::lambda_min_sym(&m));
    Ok((d as f64).sqrt() / 2.0 * spectral)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lsa::{run_lsa, NoiseKind, SyntheticProblem};
    use crate::numkit::identity;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn toy(d: usize, seed: u64) -> SyntheticProblem {
        SyntheticProblem::random(d, 0.3, 0.5, &mut RngStream::new(seed, 99)).unwrap()
    }

    #[test]
    fn weight_moments() {
        for law in [WeightLaw::GaussianMean1, WeightLaw::TwoPoint, WeightLaw::Exponential] {
            let mut rng = RngStream::new(17, 0);
            let n = 1_000_000;
            let draws: Vec<f64> = (0..n).map(|_| sample_weight(law, &mut rng)).collect();
            let mean = draws.iter().sum::<f64>() / n as f64;
            let var = draws.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            assert!((mean - 1.0).abs() <= 0.004, "{law:?} mean {mean}");
            assert!((var - 1.0).abs() <= 0.01, "{law:?} var {var}");
            assert_eq!((law.mean(), law.variance()), (1.0, 1.0));
        }
        let mut rng = RngStream::new(1, 0);
        assert!((0..1000).all(|_| {
            let w = sample_weight(WeightLaw::TwoPoint, &mut rng);
            w == 0.0 || w == 2.0
        }));
    }

    #[test]
    fn unit_law_reproduces_main_trajectory() {
        let p = toy(3, 1);
        let s = StepSchedule::new(0.5, 0.5).unwrap();
        let theta0 = DVector::zeros(3);
        let mut cfg = BootstrapConfig::new(5, WeightLaw::Unit, 3);
        cfg.retain = true;
        let e = run_bootstrap(&p, &s, 64, &theta0, &cfg, &mut RngStream::new(4, 0)).unwrap();
        for avg in &e.boot_averages {
            assert_eq!(avg, &e.main.theta_bar);
        }
        let main = e.main.trajectory.as_ref().unwrap();
        for tr in e.traces.as_ref().unwrap() {
            assert_eq!(tr.trajectory[..], main[64..]);
        }
        // Same stream without bootstrap gives the same main run.
        let plain = run_lsa(&p, &s, 64, &theta0, &mut RngStream::new(4, 0), false).unwrap();
        assert_eq!(plain.theta_bar, e.main.theta_bar);
    }

    #[test]
    fn zero_noise_at_optimum_stays_put() {
        let p = SyntheticProblem::random(3, 0.0, 0.0, &mut RngStream::new(2, 0)).unwrap();
        let star = p.exact().unwrap().theta_star.clone();
        let s = StepSchedule::new(0.5, 0.5).unwrap();
        for law in [WeightLaw::GaussianMean1, WeightLaw::TwoPoint, WeightLaw::Exponential] {
            let cfg = BootstrapConfig::new(4, law, 1);
            let e = run_bootstrap(&p, &s, 32, &star, &cfg, &mut RngStream::new(0, 0)).unwrap();
            for avg in &e.boot_averages {
                assert!((avg - &star).amax() < 1e-12);
            }
        }
    }

    #[test]
    fn replica_depends_only_on_its_own_stream() {
        let p = toy(2, 3);
        let s = StepSchedule::new(0.5, 0.5).unwrap();
        let theta0 = DVector::zeros(2);
        let e5 = run_bootstrap(&p, &s, 50, &theta0, &BootstrapConfig::new(5, WeightLaw::GaussianMean1, 9), &mut RngStream::new(1, 0)).unwrap();
        let e4 = run_bootstrap(&p, &s, 50, &theta0, &BootstrapConfig::new(4, WeightLaw::GaussianMean1, 9), &mut RngStream::new(1, 0)).unwrap();
        assert_eq!(e5.boot_averages[..4], e4.boot_averages[..]);
    }

    #[test]
    fn weight_seed_changes_replicas_not_main() {
        let p = toy(2, 4);
        let s = StepSchedule::new(0.5, 0.5).unwrap();
        let theta0 = DVector::zeros(2);
        let a = run_bootstrap(&p, &s, 50, &theta0, &BootstrapConfig::new(3, WeightLaw::GaussianMean1, 1), &mut RngStream::new(1, 0)).unwrap();
        let b = run_bootstrap(&p, &s, 50, &theta0, &BootstrapConfig::new(3, WeightLaw::GaussianMean1, 2), &mut RngStream::new(1, 0)).unwrap();
        assert_eq!(a.main.theta_bar, b.main.theta_bar);
        assert_ne!(a.boot_averages, b.boot_averages);
    }

    #[test]
    fn radius_examples() {
        assert_abs_diff_eq!(radius_from_statistics(&[1.0, 2.0, 3.0, 4.0], 4, 0.75).unwrap(), 1.5);
        assert_abs_diff_eq!(radius_from_statistics(&[2.0; 30], 16, 0.3).unwrap(), 0.5);
        assert!(radius_from_statistics(&[1.0], 4, 1.2).is_err());
    }

    #[test]
    fn confidence_set_floor_and_level() {
        let p = toy(2, 5);
        let s = StepSchedule::new(0.5, 0.5).unwrap();
        let theta0 = DVector::zeros(2);
        let small = run_bootstrap(&p, &s, 16, &theta0, &BootstrapConfig::new(4, WeightLaw::GaussianMean1, 1), &mut RngStream::new(0, 0)).unwrap();
        assert!(confidence_set(&small, 0.9).unwrap_err().is_validation());
        let e = run_bootstrap(&p, &s, 16, &theta0, &BootstrapConfig::new(20, WeightLaw::GaussianMean1, 1), &mut RngStream::new(0, 0)).unwrap();
        assert!(confidence_set(&e, 0.0).is_err());
        let lo = confidence_set(&e, 0.5).unwrap();
        let hi = confidence_set(&e, 0.95).unwrap();
        assert!(lo.radius <= hi.radius);
        assert!(hi.contains(&e.main.theta_bar));
    }

    #[test]
    fn linear_functional_sets_are_intervals() {
        let p = toy(3, 6);
        let s = StepSchedule::new(0.5, 0.5).unwrap();
        let mut cfg = BootstrapConfig::new(50, WeightLaw::GaussianMean1, 2);
        cfg.statistic = StatisticKind::LinearFunctional(vec![1.0, 0.0, 0.0]);
        let e = run_bootstrap(&p, &s, 64, &DVector::zeros(3), &cfg, &mut RngStream::new(3, 0)).unwrap();
        let set = confidence_set(&e, 0.9).unwrap();
        let mut probe = e.main.theta_bar.clone();
        probe[1] += 1e6; // orthogonal to c: still inside
        assert!(set.contains(&probe));
        probe[0] += set.radius * 1.01;
        assert!(!set.contains(&probe));
        cfg.statistic = StatisticKind::LinearFunctional(vec![1.0]);
        assert!(run_bootstrap(&p, &s, 8, &DVector::zeros(3), &cfg, &mut RngStream::new(3, 0)).is_err());
    }

    #[test]
    fn unit_law_gives_zero_coverage_under_noise() {
        let p = toy(2, 7);
        let cfg = CoverageConfig {
            schedule: StepSchedule::new(0.5, 0.5).unwrap(),
            n: 32,
            theta0: DVector::zeros(2),
            bootstrap: BootstrapConfig::new(20, WeightLaw::Unit, 0),
            levels: vec![0.9],
            data_seed: 5,
        };
        let est = evaluate_coverage(&p, &cfg, 20).unwrap();
        assert_eq!(est[0].covered, 0);
    }

    #[test]
    fn gaussian_toy_radius_matches_chi_quantile() {
        // A ≡ I, b_k = b̄ + N(0, I): √n(θ̄_n - θ*) ≈ N(0, I).
        let d = 3;
        let p = SyntheticProblem::new(identity(d), DVector::from_element(d, 1.0), 0.0, 1.0, NoiseKind::Gaussian).unwrap();
        let s = StepSchedule::new(0.5, 0.5).unwrap();
        let n = 4096;
        let e = run_bootstrap(&p, &s, n, &DVector::zeros(d), &BootstrapConfig::new(1000, WeightLaw::GaussianMean1, 8), &mut RngStream::new(8, 0)).unwrap();
        let set = confidence_set(&e, 0.9).unwrap();
        // 0.9 quantile of the chi distribution with 3 degrees of freedom.
        let chi_q = 6.251_388_631_170_325f64.sqrt();
        let analytic = chi_q / (n as f64).sqrt();
        assert!((set.radius - analytic).abs() <= 0.1 * analytic, "radius {} vs {analytic}", set.radius);
    }

    #[test]
    fn clopper_pearson_values() {
        assert_eq!(clopper_pearson(0, 1, 0.05), (0.0, 1.0));
        assert_eq!(clopper_pearson(1, 1, 0.05), (0.0, 1.0));
        let (lo, hi) = clopper_pearson(0, 10, 0.05);
        assert_eq!(lo, 0.0);
        assert_abs_diff_eq!(hi, 1.0 - 0.025f64.powf(0.1), epsilon = 1e-8);
        let (lo, hi) = clopper_pearson(450, 500, 0.05);
        assert!(lo < 0.9 && hi > 0.9 && lo > 0.86 && hi < 0.93);
    }

    #[test]
    fn bootstrap_decomposition_examples() {
        let p = toy(3, 8);
        let s = StepSchedule::new(0.5, 0.5).unwrap();
        let mut cfg = BootstrapConfig::new(3, WeightLaw::GaussianMean1, 4);
        cfg.retain = true;
        let e = run_bootstrap(&p, &s, 64, &DVector::from_element(3, 1.0), &cfg, &mut RngStream::new(6, 0)).unwrap();
        for j in 0..3 {
            let dec = decompose_bootstrap_error(&e, j, &p, &s).unwrap();
            assert_eq!(dec.d1.amax(), 0.0);
            assert!(dec.residual() <= 1e-10, "residual {}", dec.residual());
        }
        assert!(decompose_bootstrap_error(&e, 3, &p, &s).is_err());

        cfg.law = WeightLaw::Unit;
        let e = run_bootstrap(&p, &s, 64, &DVector::from_element(3, 1.0), &cfg, &mut RngStream::new(6, 0)).unwrap();
        let dec = decompose_bootstrap_error(&e, 0, &p, &s).unwrap();
        for v in [&dec.t_stat, &dec.w, &dec.d1, &dec.d2, &dec.d3, &dec.d4, &dec.d5] {
            assert_eq!(v.amax(), 0.0);
        }

        cfg.retain = false;
        let e = run_bootstrap(&p, &s, 8, &DVector::zeros(3), &cfg, &mut RngStream::new(6, 0)).unwrap();
        assert!(decompose_bootstrap_error(&e, 0, &p, &s).unwrap_err().is_validation());
    }

    #[test]
    fn gaussian_comparison_examples() {
        let s = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        assert!(gaussian_comparison(&s, &s).unwrap() < 1e-14);
        let v = gaussian_comparison(&identity(1), &(identity(1) * 2.0)).unwrap();
        assert_abs_diff_eq!(v, 0.5, epsilon = 1e-14);
        assert!(gaussian_comparison(&DMatrix::zeros(2, 2), &identity(2)).unwrap_err().is_validation());
    }

    proptest! {
        #[test]
        fn quantile_exchangeable(stats in prop::collection::vec(0.0f64..10.0, 20..60), level in 0.05f64..0.95, shift in 0usize..60) {
            let mut rotated = stats.clone();
            let k = shift % stats.len();
            rotated.rotate_left(k);
            prop_assert_eq!(
                radius_from_statistics(&stats, 9, level).unwrap(),
                radius_from_statistics(&rotated, 9, level).unwrap()
            );
        }

        #[test]
        fn bootstrap_identity_on_random_instances(seed in 0u64..300, d in 1usize..5, n in 1usize..48) {
            let p = toy(d, seed);
            let s = StepSchedule::new(0.5, 0.5).unwrap();
            let mut cfg = BootstrapConfig::new(2, WeightLaw::Exponential, seed);
            cfg.retain = true;
            let e = run_bootstrap(&p, &s, n, &DVector::zeros(d), &cfg, &mut RngStream::new(seed, 1)).unwrap();
            for j in 0..2 {
                let dec = decompose_bootstrap_error(&e, j, &p, &s).unwrap();
                prop_assert_eq!(dec.d1.amax(), 0.0);
                prop_assert!(dec.residual() <= 1e-10);
            }
        }
    }
}
