//! Linear stochastic approximation with Polyak-Ruppert tail averaging.
//!
//! The recursion is `θ_k = θ_{k-1} - α_k (A_k θ_{k-1} - b_k)` for
//! `k = 1 … n0 + n`, and the estimator averages `θ_{n0} … θ_{n0+n-1}`.
//! With the default tail burn-in `n0 = n`, which gives the usual
//! `θ̄_n = n⁻¹ Σ_{k=n}^{2n-1} θ_k`.
//!
//! Index convention: observation `(A_k, b_k)` drives step `k` and is stored
//! at `observations[k - 1]`; trajectories store `θ_0 … θ_{n0+n}` at their
//! own index.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{identity, KahanVec, RngStream};

/// Iterates with norm above this are treated as diverged.
pub const DIVERGENCE_NORM: f64 = 1e12;

/// Polynomial step sizes `α_k = c0 / k^γ` with `γ ∈ [1/2, 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    c0: f64,
    gamma: f64,
}

impl StepSchedule {
    pub fn new(c0: f64, gamma: f64) -> Result<Self> {
        if !(c0.is_finite() && c0 > 0.0) {
            return Err(Error::validation(format!("c0 must be positive, got {c0}")));
        }
        if !(gamma.is_finite() && (0.5..1.0).contains(&gamma)) {
            return Err(Error::validation(format!(
                "step exponent must lie in [1/2, 1), got {gamma}"
            )));
        }
        Ok(Self { c0, gamma })
    }

    pub fn c0(&self) -> f64 {
        self.c0
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn step_at(&self, k: usize) -> Result<f64> {
        if k == 0 {
            return Err(Error::validation("step index starts at 1"));
        }
        Ok(self.alpha(k))
    }

    #[inline]
    pub(crate) fn alpha(&self, k: usize) -> f64 {
        debug_assert!(k >= 1);
        self.c0 / (k as f64).powf(self.gamma)
    }

    /// `Σ_{ℓ=from}^{to} α_ℓ`.
    pub fn step_sum(&self, from: usize, to: usize) -> f64 {
        (from.max(1)..=to).map(|k| self.alpha(k)).sum()
    }
}

/// One observation `(A_k, b_k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl Observation {
    pub fn zeros(d: usize) -> Self {
        Self {
            a: DMatrix::zeros(d, d),
            b: DVector::zeros(d),
        }
    }
}

/// Exact mean system `Ā θ* = b̄` together with the noise covariance `Σε`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExactSystem {
    pub a_bar: DMatrix<f64>,
    pub b_bar: DVector<f64>,
    pub theta_star: DVector<f64>,
    pub sigma_eps: DMatrix<f64>,
}

impl ExactSystem {
    pub fn new(a_bar: DMatrix<f64>, b_bar: DVector<f64>, sigma_eps: DMatrix<f64>) -> Result<Self> {
        let d = a_bar.nrows();
        if !a_bar.is_square() || b_bar.len() != d || sigma_eps.shape() != (d, d) {
            return Err(Error::validation("exact system has inconsistent dimensions"));
        }
        let theta_star = a_bar
            .clone()
            .lu()
            .solve(&b_bar)
            .ok_or_else(|| Error::Model("mean matrix is singular".into()))?;
        Ok(Self {
            a_bar,
            b_bar,
            theta_star,
            sigma_eps,
        })
    }

    pub fn dim(&self) -> usize {
        self.b_bar.len()
    }

    /// `ε = (A - Ā) θ* - (b - b̄)`.
    pub fn noise(&self, obs: &Observation) -> DVector<f64> {
        (&obs.a - &self.a_bar) * &self.theta_star - (&obs.b - &self.b_bar)
    }

    /// `Σ∞ = Ā⁻¹ Σε Ā⁻ᵀ`.
    pub fn sigma_inf(&self) -> Result<DMatrix<f64>> {
        let inv = self
            .a_bar
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Model("mean matrix is singular".into()))?;
        let s = &inv * &self.sigma_eps * inv.transpose();
        Ok((&s + s.transpose()) * 0.5)
    }
}

/// Source of i.i.d. observation pairs for the recursion.
pub trait LsaProblem: Sync {
    fn dim(&self) -> usize;

    /// Writes one draw `(A(Z), b(Z))` into `obs`.
    fn sample_into(&self, rng: &mut RngStream, obs: &mut Observation);

    fn exact(&self) -> Option<&ExactSystem> {
        None
    }

    /// Finite support `(probability, observation)` when the sample space is
    /// small enough to enumerate.
    fn support(&self) -> Option<Vec<(f64, Observation)>> {
        None
    }

    fn sample(&self, rng: &mut RngStream) -> Observation {
        let mut obs = Observation::zeros(self.dim());
        self.sample_into(rng, &mut obs);
        obs
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NoiseKind {
    Gaussian,
    Rademacher,
}

/// `A_k = Ā + σ_A G_k`, `b_k = b̄ + σ_b g_k` with i.i.d. zero-mean,
/// unit-variance entries in `G_k`, `g_k`. Then
/// `Σε = (σ_A² ‖θ*‖² + σ_b²) I`.
#[derive(Clone, Debug)]
pub struct SyntheticProblem {
    exact: ExactSystem,
    noise_a: f64,
    noise_b: f64,
    kind: NoiseKind,
}

impl SyntheticProblem {
    pub fn new(
        a_bar: DMatrix<f64>,
        b_bar: DVector<f64>,
        noise_a: f64,
        noise_b: f64,
        kind: NoiseKind,
    ) -> Result<Self> {
        if !(noise_a >= 0.0 && noise_b >= 0.0) {
            return Err(Error::validation("noise scales must be non-negative"));
        }
        let d = b_bar.len();
        let probe = ExactSystem::new(a_bar.clone(), b_bar.clone(), DMatrix::zeros(d, d))?;
        let level = noise_a.powi(2) * probe.theta_star.norm_squared() + noise_b.powi(2);
        let exact = ExactSystem::new(a_bar, b_bar, identity(d) * level)?;
        Ok(Self {
            exact,
            noise_a,
            noise_b,
            kind,
        })
    }

    /// Random well-conditioned instance: `Ā = I + 0.4 G/‖G‖` so every
    /// eigenvalue of `Ā` lies in the disc of radius 0.4 around 1.
    pub fn random(d: usize, noise_a: f64, noise_b: f64, rng: &mut RngStream) -> Result<Self> {
        let g = DMatrix::from_fn(d, d, |_, _| rng.standard_normal());
        let a_bar = identity(d) + &g * (0.4 / crate::numkit::op_norm(&g).max(1e-12));
        let b_bar = DVector::from_fn(d, |_, _| rng.standard_normal());
        Self::new(a_bar, b_bar, noise_a, noise_b, NoiseKind::Gaussian)
    }

    fn draw(&self, rng: &mut RngStream) -> f64 {
        match self.kind {
            NoiseKind::Gaussian => rng.standard_normal(),
            NoiseKind::Rademacher => {
                if rng.uniform() < 0.5 {
                    -1.0
                } else {
                    1.0
                }
            }
        }
    }
}

impl LsaProblem for SyntheticProblem {
    fn dim(&self) -> usize {
        self.exact.dim()
    }

    fn sample_into(&self, rng: &mut RngStream, obs: &mut Observation) {
        obs.a.copy_from(&self.exact.a_bar);
        obs.b.copy_from(&self.exact.b_bar);
        if self.noise_a > 0.0 {
            for x in obs.a.iter_mut() {
                *x += self.noise_a * self.draw(rng);
            }
        }
        if self.noise_b > 0.0 {
            for x in obs.b.iter_mut() {
                *x += self.noise_b * self.draw(rng);
            }
        }
    }

    fn exact(&self) -> Option<&ExactSystem> {
        Some(&self.exact)
    }
}

/// Length of the burn-in before the averaging window opens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BurnIn {
    /// `n0 = n`: average `θ_n … θ_{2n-1}`.
    Tail,
    /// Fixed `n0`: average `θ_{n0} … θ_{n0+n-1}`.
    Fixed(usize),
}

impl BurnIn {
    pub fn length(self, n: usize) -> usize {
        match self {
            BurnIn::Tail => n,
            BurnIn::Fixed(n0) => n0,
        }
    }
}

/// Result of one LSA trajectory.
#[derive(Clone, Debug)]
pub struct LsaRun {
    /// Average of `θ_{n0} … θ_{n0+n-1}`.
    pub theta_bar: DVector<f64>,
    /// `θ_{n0}`, the first averaged iterate.
    pub theta_at_n: DVector<f64>,
    /// `θ_{n0+n}`, the final iterate.
    pub theta_at_2n: DVector<f64>,
    pub n: usize,
    pub burn_in: usize,
    /// `θ_0 … θ_{n0+n}` when retained.
    pub trajectory: Option<Vec<DVector<f64>>>,
    /// `(A_k, b_k)` for `k = 1 … n0+n` when retained.
    pub observations: Option<Vec<Observation>>,
}

impl LsaRun {
    pub fn total_steps(&self) -> usize {
        self.burn_in + self.n
    }

    fn retained(&self) -> Result<(&[DVector<f64>], &[Observation])> {
        match (&self.trajectory, &self.observations) {
            (Some(t), Some(o)) => Ok((t, o)),
            _ => Err(Error::validation(
                "run did not retain its trajectory and observations",
            )),
        }
    }
}

/// Applies one LSA step in place; `scratch` receives `A θ - b`.
#[inline]
pub(crate) fn lsa_step(
    theta: &mut DVector<f64>,
    obs: &Observation,
    alpha: f64,
    weight: f64,
    scratch: &mut DVector<f64>,
) {
    obs.a.mul_to(theta, scratch);
    *scratch -= &obs.b;
    theta.axpy(-alpha * weight, scratch, 1.0);
}

#[inline]
pub(crate) fn guard(theta: &DVector<f64>, step: usize, replica: Option<usize>) -> Result<()> {
    let norm = theta.norm();
    if norm.is_finite() && norm <= DIVERGENCE_NORM {
        Ok(())
    } else {
        Err(Error::Divergence { step, replica, norm })
    }
}

pub(crate) fn check_theta0(p: &dyn LsaProblem, theta0: &DVector<f64>) -> Result<()> {
    if theta0.len() != p.dim() {
        return Err(Error::validation(format!(
            "theta0 has dimension {} but the problem has dimension {}",
            theta0.len(),
            p.dim()
        )));
    }
    Ok(())
}

/// Runs `2n` steps with tail burn-in `n0 = n`.
pub fn run_lsa(
    p: &dyn LsaProblem,
    s: &StepSchedule,
    n: usize,
    theta0: &DVector<f64>,
    rng: &mut RngStream,
    retain: bool,
) -> Result<LsaRun> {
    run_lsa_with_burn_in(p, s, BurnIn::Tail, n, theta0, rng, retain)
}

pub fn run_lsa_with_burn_in(
    p: &dyn LsaProblem,
    s: &StepSchedule,
    burn_in: BurnIn,
    n: usize,
    theta0: &DVector<f64>,
    rng: &mut RngStream,
    retain: bool,
) -> Result<LsaRun> {
    check_theta0(p, theta0)?;
    if n == 0 {
        return Err(Error::validation("averaging length n must be positive"));
    }
    let n0 = burn_in.length(n);
    let total = n0 + n;
    let d = p.dim();

    let mut theta = theta0.clone();
    let mut obs = Observation::zeros(d);
    let mut scratch = DVector::zeros(d);
    let mut sum = KahanVec::zeros(d);
    let mut theta_at_n = theta0.clone();
    let mut trajectory = retain.then(|| {
        let mut t = Vec::with_capacity(total + 1);
        t.push(theta0.clone());
        t
    });
    let mut observations = retain.then(|| Vec::with_capacity(total));

    if n0 == 0 {
        sum.add(&theta);
    }
    for k in 1..=total {
        p.sample_into(rng, &mut obs);
        lsa_step(&mut theta, &obs, s.alpha(k), 1.0, &mut scratch);
        guard(&theta, k, None)?;
        if k == n0 {
            theta_at_n.copy_from(&theta);
        }
        if k >= n0 && k < total {
            sum.add(&theta);
        }
        if let Some(t) = trajectory.as_mut() {
            t.push(theta.clone());
        }
        if let Some(o) = observations.as_mut() {
            o.push(obs.clone());
        }
    }

    Ok(LsaRun {
        theta_bar: sum.mean(n),
        theta_at_n,
        theta_at_2n: theta,
        n,
        burn_in: n0,
        trajectory,
        observations,
    })
}

/// `√n Ā(θ̄_n - θ*) = -W + D₁ - D₂ - D₃ + D₄`.
#[derive(Clone, Debug)]
pub struct ErrorDecomposition {
    pub t_stat: DVector<f64>,
    pub w: DVector<f64>,
    pub d1: DVector<f64>,
    pub d2: DVector<f64>,
    pub d3: DVector<f64>,
    pub d4: DVector<f64>,
}

impl ErrorDecomposition {
    pub fn reconstruction(&self) -> DVector<f64> {
        -&self.w + &self.d1 - &self.d2 - &self.d3 + &self.d4
    }

    /// Reconstruction error relative to the largest term.
    pub fn residual(&self) -> f64 {
        relative_residual(
            &(&self.t_stat - self.reconstruction()),
            [&self.t_stat, &self.w, &self.d1, &self.d2, &self.d3, &self.d4],
        )
    }
}

pub(crate) fn relative_residual<'a>(
    diff: &DVector<f64>,
    terms: impl IntoIterator<Item = &'a DVector<f64>>,
) -> f64 {
    let num = diff.norm();
    if num == 0.0 {
        return 0.0;
    }
    let scale = terms.into_iter().map(|t| t.norm()).fold(0.0, f64::max);
    if scale == 0.0 {
        f64::INFINITY
    } else {
        num / scale
    }
}

pub(crate) fn require_exact(p: &dyn LsaProblem) -> Result<&ExactSystem> {
    p.exact()
        .ok_or_else(|| Error::validation("problem has no exact mean system"))
}

/// Computes the terms of the error expansion of the averaged iterate over
/// the window `k = n0+1 … n0+n`.
pub fn decompose_error(
    run: &LsaRun,
    p: &dyn LsaProblem,
    s: &StepSchedule,
) -> Result<ErrorDecomposition> {
    let (traj, obs) = run.retained()?;
    let exact = require_exact(p)?;
    let (n0, n) = (run.burn_in, run.n);
    if n0 == 0 {
        return Err(Error::validation("decomposition needs a burn-in of at least one step"));
    }
    let d = exact.dim();
    let root_n = (n as f64).sqrt();
    let star = &exact.theta_star;

    let mut w = DVector::zeros(d);
    let mut d3 = DVector::zeros(d);
    let mut d4 = DVector::zeros(d);
    for k in n0 + 1..=n0 + n {
        let o = &obs[k - 1];
        let err_prev = &traj[k - 1] - star;
        w += exact.noise(o);
        d3 += (&o.a - &exact.a_bar) * &err_prev;
        d4 += err_prev * (1.0 / s.alpha(k) - 1.0 / s.alpha(k - 1));
    }
    let d1 = (&traj[n0] - star) / (root_n * s.alpha(n0));
    let d2 = (&traj[n0 + n] - star) / (root_n * s.alpha(n0 + n));

    Ok(ErrorDecomposition {
        t_stat: &exact.a_bar * (&run.theta_bar - star) * root_n,
        w: w / root_n,
        d1,
        d2,
        d3: d3 / root_n,
        d4: d4 / root_n,
    })
}

/// `Γ_{m:k} = (I - α_k A_k) ⋯ (I - α_m A_m)`, identity when `m > k`.
pub fn gamma_product(
    observations: &[Observation],
    s: &StepSchedule,
    m: usize,
    k: usize,
) -> Result<DMatrix<f64>> {
    if m == 0 {
        return Err(Error::validation("product index m starts at 1"));
    }
    let d = observations
        .first()
        .map(|o| o.b.len())
        .ok_or_else(|| Error::validation("no observations retained"))?;
    if m > k {
        return Ok(identity(d));
    }
    if k > observations.len() {
        return Err(Error::validation(format!(
            "index {k} beyond the {} retained observations",
            observations.len()
        )));
    }
    let mut prod = identity(d);
    for i in m..=k {
        prod = (identity(d) - &observations[i - 1].a * s.alpha(i)) * prod;
    }
    Ok(prod)
}

/// Transient/fluctuation split of the error with the perturbation expansion
/// of the fluctuation up to depth `L`. Each inner vector is indexed by
/// `k = 0 … n0+n`.
#[derive(Clone, Debug)]
pub struct Expansion {
    pub transient: Vec<DVector<f64>>,
    /// `j[ℓ][k] = J^ℓ_k` for `ℓ = 0 … L`.
    pub j: Vec<Vec<DVector<f64>>>,
    /// `h[ℓ][k] = H^ℓ_k` for `ℓ = 0 … L`.
    pub h: Vec<Vec<DVector<f64>>>,
    errors: Vec<DVector<f64>>,
}

impl Expansion {
    pub fn depth(&self) -> usize {
        self.j.len() - 1
    }

    /// `max_k` relative residual of `θ_k - θ* = transient + J⁰ + H⁰`.
    pub fn fluctuation_residual(&self) -> f64 {
        (0..self.errors.len())
            .map(|k| {
                let diff = &self.errors[k] - &self.transient[k] - &self.j[0][k] - &self.h[0][k];
                relative_residual(
                    &diff,
                    [&self.errors[k], &self.transient[k], &self.j[0][k], &self.h[0][k]],
                )
            })
            .fold(0.0, f64::max)
    }

    /// `max_k` relative residual of `θ_k - θ* = transient + Σ_{ℓ≤L} J^ℓ + H^L`
    /// for `L ≤ depth`.
    pub fn full_residual(&self, depth: usize) -> f64 {
        assert!(depth <= self.depth());
        (0..self.errors.len())
            .map(|k| {
                let mut diff = &self.errors[k] - &self.transient[k] - &self.h[depth][k];
                for l in 0..=depth {
                    diff -= &self.j[l][k];
                }
                let terms = std::iter::once(&self.errors[k])
                    .chain(std::iter::once(&self.transient[k]))
                    .chain(self.j[..=depth].iter().map(|jl| &jl[k]))
                    .chain(std::iter::once(&self.h[depth][k]));
                relative_residual(&diff, terms)
            })
            .fold(0.0, f64::max)
    }

    /// `max_k` relative residual of `H⁰_k = Σ_{ℓ=1}^{L} J^ℓ_k + H^L_k`.
    pub fn nested_residual(&self, depth: usize) -> f64 {
        assert!(depth <= self.depth());
        (0..self.errors.len())
            .map(|k| {
                let mut diff = &self.h[0][k] - &self.h[depth][k];
                for l in 1..=depth {
                    diff -= &self.j[l][k];
                }
                let terms = std::iter::once(&self.h[0][k])
                    .chain(self.j[1..=depth].iter().map(|jl| &jl[k]))
                    .chain(std::iter::once(&self.h[depth][k]));
                relative_residual(&diff, terms)
            })
            .fold(0.0, f64::max)
    }
}

pub fn expansion_terms(
    run: &LsaRun,
    p: &dyn LsaProblem,
    s: &StepSchedule,
    depth: usize,
) -> Result<Expansion> {
    let (traj, obs) = run.retained()?;
    let exact = require_exact(p)?;
    let d = exact.dim();
    let steps = traj.len() - 1;
    let star = &exact.theta_star;
    let eye = identity(d);

    let mut transient = Vec::with_capacity(steps + 1);
    transient.push(&traj[0] - star);
    let mut j = vec![vec![DVector::zeros(d)]; depth + 1];
    let mut h = vec![vec![DVector::zeros(d)]; depth + 1];

    for k in 1..=steps {
        let o = &obs[k - 1];
        let alpha = s.alpha(k);
        let contract_mean = &eye - &exact.a_bar * alpha;
        let contract_rand = &eye - &o.a * alpha;
        let centered = &o.a - &exact.a_bar;

        let tr = &contract_rand * &transient[k - 1];
        transient.push(tr);

        // Each level reads only k-1 values, so the update order is free.
        let j_prev: Vec<DVector<f64>> = j.iter().map(|jl| jl[k - 1].clone()).collect();
        for l in 0..=depth {
            let drive = if l == 0 {
                exact.noise(o)
            } else {
                &centered * &j_prev[l - 1]
            };
            let next_j = &contract_mean * &j_prev[l] - drive * alpha;
            let next_h = &contract_rand * &h[l][k - 1] - (&centered * &j_prev[l]) * alpha;
            j[l].push(next_j);
            h[l].push(next_h);
        }
    }

    Ok(Expansion {
        transient,
        j,
        h,
        errors: traj.iter().map(|t| t - star).collect(),
    })
}
