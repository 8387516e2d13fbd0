//! Garnet MDPs, random policies and TD(0) with linear features as an LSA
//! problem under i.i.d. sampling of `(s, a, s')`.

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lsa::{ExactSystem, LsaProblem, Observation};
use crate::numkit::{identity, lambda_min_sym, RngStream};
use crate::stability::StabilityCertificate;

/// Attempts before giving up on drawing an irreducible, aperiodic instance.
pub const MAX_GENERATION_ATTEMPTS: usize = 100;
const ROW_SUM_TOL: f64 = 1e-12;
const STATIONARY_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardMode {
    #[default]
    Uniform,
    Constant(f64),
}

/// One nonzero transition probability `P(next | state, action)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: usize,
    pub action: usize,
    pub next: usize,
    pub prob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct GarnetFile {
    n_states: usize,
    n_actions: usize,
    branching: usize,
    discount: f64,
    seed: Option<u64>,
    transitions: Vec<Transition>,
    rewards: Vec<Vec<f64>>,
}

/// Finite MDP with sparse random transitions. Serializes as a list of
/// transition triples plus the reward table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GarnetFile", into = "GarnetFile")]
pub struct GarnetMdp {
    n_states: usize,
    n_actions: usize,
    branching: usize,
    discount: f64,
    seed: Option<u64>,
    /// Dense `P[(s * n_actions + a) * n_states + s']`.
    p: Vec<f64>,
    /// `r[s * n_actions + a]`.
    r: Vec<f64>,
}

impl TryFrom<GarnetFile> for GarnetMdp {
    type Error = Error;

    fn try_from(f: GarnetFile) -> Result<Self> {
        let (ns, na) = (f.n_states, f.n_actions);
        if ns == 0 || na == 0 {
            return Err(Error::validation("MDP needs at least one state and one action"));
        }
        let mut p = vec![0.0; ns * na * ns];
        for t in &f.transitions {
            if t.state >= ns || t.action >= na || t.next >= ns {
                return Err(Error::validation(format!("transition {t:?} out of range")));
            }
            p[(t.state * na + t.action) * ns + t.next] = t.prob;
        }
        if f.rewards.len() != ns || f.rewards.iter().any(|row| row.len() != na) {
            return Err(Error::validation("reward table must be n_states x n_actions"));
        }
        let mdp = GarnetMdp {
            n_states: ns,
            n_actions: na,
            branching: f.branching,
            discount: f.discount,
            seed: f.seed,
            p,
            r: f.rewards.concat(),
        };
        mdp.validate()?;
        Ok(mdp)
    }
}

impl From<GarnetMdp> for GarnetFile {
    fn from(m: GarnetMdp) -> Self {
        let mut transitions = Vec::new();
        for s in 0..m.n_states {
            for a in 0..m.n_actions {
                for (next, &prob) in m.row(s, a).iter().enumerate() {
                    if prob > 0.0 {
                        transitions.push(Transition {
                            state: s,
                            action: a,
                            next,
                            prob,
                        });
                    }
                }
            }
        }
        GarnetFile {
            n_states: m.n_states,
            n_actions: m.n_actions,
            branching: m.branching,
            discount: m.discount,
            seed: m.seed,
            transitions,
            rewards: m.r.chunks(m.n_actions).map(<[f64]>::to_vec).collect(),
        }
    }
}

impl GarnetMdp {
    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn branching(&self) -> usize {
        self.branching
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    /// `P(· | s, a)`.
    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.p[start..start + self.n_states]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.r[s * self.n_actions + a]
    }

    /// Same MDP with a different discount factor.
    pub fn with_discount(&self, discount: f64) -> Result<Self> {
        let m = GarnetMdp {
            discount,
            ..self.clone()
        };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        if !(self.discount >= 0.0 && self.discount < 1.0) {
            return Err(Error::validation(format!(
                "discount must lie in [0,1), got {}",
                self.discount
            )));
        }
        if self.branching == 0 || self.branching > self.n_states {
            return Err(Error::validation(format!(
                "branching {} must lie in 1..={}",
                self.branching, self.n_states
            )));
        }
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let row = self.row(s, a);
                if row.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
                    return Err(Error::validation(format!("row ({s},{a}) has entries outside [0,1]")));
                }
                let nonzero = row.iter().filter(|&&x| x > 0.0).count();
                if nonzero != self.branching {
                    return Err(Error::validation(format!(
                        "row ({s},{a}) has {nonzero} nonzeros, expected {}",
                        self.branching
                    )));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > ROW_SUM_TOL {
                    return Err(Error::validation(format!("row ({s},{a}) sums to {sum}")));
                }
                let r = self.reward(s, a);
                if !(0.0..=1.0).contains(&r) {
                    return Err(Error::validation(format!("reward r({s},{a}) = {r} outside [0,1]")));
                }
            }
        }
        Ok(())
    }

    /// Transition support graph when every action has positive probability.
    fn full_support(&self) -> Vec<bool> {
        let ns = self.n_states;
        let mut adj = vec![false; ns * ns];
        for s in 0..ns {
            for a in 0..self.n_actions {
                for (t, &p) in self.row(s, a).iter().enumerate() {
                    adj[s * ns + t] |= p > 0.0;
                }
            }
        }
        adj
    }
}

/// Boolean product `x · y` of `n × n` adjacency matrices.
fn bool_product(x: &[bool], y: &[bool], n: usize) -> Vec<bool> {
    let mut out = vec![false; n * n];
    for i in 0..n {
        for k in 0..n {
            if x[i * n + k] {
                for j in 0..n {
                    out[i * n + j] |= y[k * n + j];
                }
            }
        }
    }
    out
}

/// A nonnegative matrix is primitive (irreducible and aperiodic) iff its
/// `(n-1)² + 1`-th power is strictly positive.
fn is_primitive(adj: &[bool], n: usize) -> bool {
    let mut exponent = (n - 1) * (n - 1) + 1;
    let mut base = adj.to_vec();
    let mut acc: Option<Vec<bool>> = None;
    while exponent > 0 {
        if exponent & 1 == 1 {
            acc = Some(match acc {
                None => base.clone(),
                Some(m) => bool_product(&m, &base, n),
            });
        }
        exponent >>= 1;
        if exponent > 0 {
            base = bool_product(&base, &base, n);
        }
    }
    acc.map_or(false, |m| m.iter().all(|&x| x))
}

fn simplex_spacings(k: usize, rng: &mut RngStream) -> Vec<f64> {
    loop {
        let mut cuts: Vec<f64> = (0..k - 1).map(|_| rng.uniform()).collect();
        cuts.push(0.0);
        cuts.push(1.0);
        cuts.sort_by(f64::total_cmp);
        let probs: Vec<f64> = cuts.windows(2).map(|w| w[1] - w[0]).collect();
        if probs.iter().all(|&p| p > 0.0) {
            return probs;
        }
    }
}

pub fn generate_garnet(
    n_states: usize,
    n_actions: usize,
    branching: usize,
    discount: f64,
    rng: &mut RngStream,
) -> Result<GarnetMdp> {
    generate_garnet_with_rewards(n_states, n_actions, branching, discount, RewardMode::Uniform, rng)
}

/// Draws instances until one has a primitive transition graph, giving up
/// after [`MAX_GENERATION_ATTEMPTS`].
pub fn generate_garnet_with_rewards(
    n_states: usize,
    n_actions: usize,
    branching: usize,
    discount: f64,
    rewards: RewardMode,
    rng: &mut RngStream,
) -> Result<GarnetMdp> {
    if n_states == 0 || n_actions == 0 {
        return Err(Error::validation("MDP needs at least one state and one action"));
    }
    if branching == 0 || branching > n_states {
        return Err(Error::validation(format!(
            "branching {branching} must lie in 1..={n_states}"
        )));
    }
    if let RewardMode::Constant(c) = rewards {
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::validation(format!("constant reward {c} outside [0,1]")));
        }
    }
    let seed = Some(rng.seed());
    for _ in 0..MAX_GENERATION_ATTEMPTS {
        let mut p = vec![0.0; n_states * n_actions * n_states];
        let mut r = vec![0.0; n_states * n_actions];
        for sa in 0..n_states * n_actions {
            let mut succ = index::sample(rng, n_states, branching).into_vec();
            succ.sort_unstable();
            let probs = simplex_spacings(branching, rng);
            for (&t, &q) in succ.iter().zip(&probs) {
                p[sa * n_states + t] = q;
            }
            r[sa] = match rewards {
                RewardMode::Uniform => rng.uniform(),
                RewardMode::Constant(c) => c,
            };
        }
        let mdp = GarnetMdp {
            n_states,
            n_actions,
            branching,
            discount,
            seed,
            p,
            r,
        };
        mdp.validate()?;
        if is_primitive(&mdp.full_support(), n_states) {
            return Ok(mdp);
        }
    }
    Err(Error::Model(format!(
        "no irreducible aperiodic instance in {MAX_GENERATION_ATTEMPTS} attempts"
    )))
}

/// `π(a|s)`, one row per state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub probs: Vec<Vec<f64>>,
}

impl Policy {
    pub fn new(probs: Vec<Vec<f64>>) -> Result<Self> {
        for (s, row) in probs.iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&x| !(x >= 0.0)) || (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::validation(format!("policy row {s} is not a distribution")));
            }
        }
        Ok(Self { probs })
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s][a]
    }
}

/// `π(a|s) = U_a / Σ_i U_i` with i.i.d. uniform `U`.
pub fn random_policy(mdp: &GarnetMdp, rng: &mut RngStream) -> Policy {
    let probs = (0..mdp.n_states)
        .map(|_| {
            let u: Vec<f64> = (0..mdp.n_actions).map(|_| rng.uniform()).collect();
            let total: f64 = u.iter().sum();
            if total > 0.0 {
                u.iter().map(|x| x / total).collect()
            } else {
                vec![1.0 / mdp.n_actions as f64; mdp.n_actions]
            }
        })
        .collect();
    Policy { probs }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureMap {
    /// `φ(s) = e_s`.
    Identity,
    /// Gaussian features of dimension `dim`, each `φ(s)` scaled to unit norm.
    RandomProjection { dim: usize, seed: u64 },
}

impl FeatureMap {
    /// Feature matrix with `φ(s)` in row `s`.
    pub fn matrix(&self, n_states: usize) -> Result<DMatrix<f64>> {
        match *self {
            FeatureMap::Identity => Ok(identity(n_states)),
            FeatureMap::RandomProjection { dim, seed } => {
                if dim == 0 {
                    return Err(Error::validation("feature dimension must be positive"));
                }
                let mut rng = RngStream::new(seed, 0);
                let mut phi = DMatrix::from_fn(n_states, dim, |_, _| rng.standard_normal());
                for mut row in phi.row_iter_mut() {
                    let norm = row.norm();
                    if norm > 0.0 {
                        row /= norm;
                    }
                }
                Ok(phi)
            }
        }
    }
}

/// Exact population quantities of TD(0) under the stationary sampling law.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TdGroundTruth {
    pub mu: DVector<f64>,
    pub p_pi: DMatrix<f64>,
    pub sigma_phi: DMatrix<f64>,
    pub a_bar: DMatrix<f64>,
    pub b_bar: DVector<f64>,
    pub theta_star: DVector<f64>,
    pub sigma_eps: DMatrix<f64>,
    pub sigma_inf: DMatrix<f64>,
}

/// `P_π(s, s') = Σ_a π(a|s) P(s'|s,a)`.
pub fn policy_kernel(mdp: &GarnetMdp, policy: &Policy) -> Result<DMatrix<f64>> {
    let ns = mdp.n_states;
    if policy.probs.len() != ns || policy.probs.iter().any(|r| r.len() != mdp.n_actions) {
        return Err(Error::validation("policy shape does not match the MDP"));
    }
    Ok(DMatrix::from_fn(ns, ns, |s, t| {
        (0..mdp.n_actions)
            .map(|a| policy.prob(s, a) * mdp.row(s, a)[t])
            .sum()
    }))
}

/// Stationary law of a primitive stochastic matrix, from
/// `(P_πᵀ - I) μ = 0` with the last equation replaced by `Σ μ = 1`.
pub fn stationary_distribution(p_pi: &DMatrix<f64>) -> Result<DVector<f64>> {
    let n = p_pi.nrows();
    let adj: Vec<bool> = (0..n * n).map(|i| p_pi[(i / n, i % n)] > 0.0).collect();
    if !is_primitive(&adj, n) {
        return Err(Error::Model("policy chain is reducible or periodic".into()));
    }
    let mut m = p_pi.transpose() - identity(n);
    let mut rhs = DVector::zeros(n);
    m.row_mut(n - 1).fill(1.0);
    rhs[n - 1] = 1.0;
    let mu = m
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Model("stationary system is singular".into()))?;
    let drift = (p_pi.transpose() * &mu - &mu).lp_norm(1);
    if mu.iter().any(|&x| !(x > 0.0)) || drift > STATIONARY_TOL {
        return Err(Error::Model(format!(
            "stationary vector is not a positive fixed point (drift {drift:.3e})"
        )));
    }
    Ok(mu)
}

/// Every `(probability, s, a, s')` with positive mass under
/// `μ(s) π(a|s) P(s'|s,a)`.
fn tuple_support(mdp: &GarnetMdp, policy: &Policy, mu: &DVector<f64>) -> Vec<(f64, usize, usize, usize)> {
    let mut out = Vec::new();
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            let w = mu[s] * policy.prob(s, a);
            if w == 0.0 {
                continue;
            }
            for (t, &p) in mdp.row(s, a).iter().enumerate() {
                if p > 0.0 {
                    out.push((w * p, s, a, t));
                }
            }
        }
    }
    out
}

#[inline]
fn td_observation(phi: &DMatrix<f64>, discount: f64, s: usize, next: usize, reward: f64, obs: &mut Observation) {
    let d = phi.ncols();
    for j in 0..d {
        let diff = phi[(s, j)] - discount * phi[(next, j)];
        for i in 0..d {
            obs.a[(i, j)] = phi[(s, i)] * diff;
        }
    }
    for i in 0..d {
        obs.b[i] = phi[(s, i)] * reward;
    }
}

pub fn ground_truth(mdp: &GarnetMdp, policy: &Policy, features: &FeatureMap) -> Result<TdGroundTruth> {
    let phi = features.matrix(mdp.n_states)?;
    let d = phi.ncols();
    let p_pi = policy_kernel(mdp, policy)?;
    let mu = stationary_distribution(&p_pi)?;
    let sigma_phi = phi.transpose() * DMatrix::from_diagonal(&mu) * &phi;

    let support = tuple_support(mdp, policy, &mu);
    let mut obs = Observation::zeros(d);
    let mut a_bar = DMatrix::zeros(d, d);
    let mut b_bar = DVector::zeros(d);
    for &(w, s, a, t) in &support {
        td_observation(&phi, mdp.discount, s, t, mdp.reward(s, a), &mut obs);
        a_bar += &obs.a * w;
        b_bar += &obs.b * w;
    }
    let probe = ExactSystem::new(a_bar.clone(), b_bar.clone(), DMatrix::zeros(d, d))
        .map_err(|e| Error::Model(format!("TD system matrix is singular: {e}")))?;
    let mut sigma_eps = DMatrix::zeros(d, d);
    for &(w, s, a, t) in &support {
        td_observation(&phi, mdp.discount, s, t, mdp.reward(s, a), &mut obs);
        let eps = probe.noise(&obs);
        sigma_eps.ger(w, &eps, &eps, 1.0);
    }
    let exact = ExactSystem::new(a_bar, b_bar, crate::numkit::symmetrize(&sigma_eps))?;
    let sigma_inf = exact.sigma_inf()?;
    Ok(TdGroundTruth {
        mu,
        p_pi,
        sigma_phi,
        a_bar: exact.a_bar,
        b_bar: exact.b_bar,
        theta_star: exact.theta_star,
        sigma_eps: exact.sigma_eps,
        sigma_inf,
    })
}

/// Index drawn from cumulative weights ending at (approximately) one.
fn draw_index(cumulative: &[f64], rng: &mut RngStream) -> usize {
    let u = rng.uniform() * cumulative[cumulative.len() - 1];
    cumulative
        .partition_point(|&c| c <= u)
        .min(cumulative.len() - 1)
}

fn cumulative(weights: impl IntoIterator<Item = f64>) -> Vec<f64> {
    weights
        .into_iter()
        .scan(0.0, |acc, w| {
            *acc += w;
            Some(*acc)
        })
        .collect()
}

/// TD(0) with linear features as an [`LsaProblem`]:
/// `A_k = φ(s)(φ(s) - γφ(s'))ᵀ`, `b_k = φ(s) r(s,a)`.
#[derive(Clone, Debug)]
pub struct TdProblem {
    mdp: GarnetMdp,
    policy: Policy,
    phi: DMatrix<f64>,
    truth: TdGroundTruth,
    exact: ExactSystem,
    state_cdf: Vec<f64>,
    action_cdf: Vec<Vec<f64>>,
    next_cdf: Vec<Vec<f64>>,
}

impl TdProblem {
    pub fn new(mdp: GarnetMdp, policy: Policy, features: &FeatureMap) -> Result<Self> {
        let truth = ground_truth(&mdp, &policy, features)?;
        let phi = features.matrix(mdp.n_states)?;
        let exact = ExactSystem::new(truth.a_bar.clone(), truth.b_bar.clone(), truth.sigma_eps.clone())?;
        let state_cdf = cumulative(truth.mu.iter().copied());
        let action_cdf = policy.probs.iter().map(|r| cumulative(r.iter().copied())).collect();
        let next_cdf = (0..mdp.n_states * mdp.n_actions)
            .map(|sa| cumulative(mdp.row(sa / mdp.n_actions, sa % mdp.n_actions).iter().copied()))
            .collect();
        Ok(Self {
            mdp,
            policy,
            phi,
            truth,
            exact,
            state_cdf,
            action_cdf,
            next_cdf,
        })
    }

    pub fn truth(&self) -> &TdGroundTruth {
        &self.truth
    }

    pub fn mdp(&self) -> &GarnetMdp {
        &self.mdp
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.phi
    }

    /// Draws one `(s, a, s')` tuple.
    pub fn sample_tuple(&self, rng: &mut RngStream) -> (usize, usize, usize) {
        let s = draw_index(&self.state_cdf, rng);
        let a = draw_index(&self.action_cdf[s], rng);
        let t = draw_index(&self.next_cdf[s * self.mdp.n_actions + a], rng);
        (s, a, t)
    }
}

impl LsaProblem for TdProblem {
    fn dim(&self) -> usize {
        self.phi.ncols()
    }

    fn sample_into(&self, rng: &mut RngStream, obs: &mut Observation) {
        let (s, a, t) = self.sample_tuple(rng);
        td_observation(&self.phi, self.mdp.discount, s, t, self.mdp.reward(s, a), obs);
    }

    fn exact(&self) -> Option<&ExactSystem> {
        Some(&self.exact)
    }

    fn support(&self) -> Option<Vec<(f64, Observation)>> {
        let d = self.dim();
        Some(
            tuple_support(&self.mdp, &self.policy, &self.truth.mu)
                .into_iter()
                .map(|(w, s, a, t)| {
                    let mut obs = Observation::zeros(d);
                    td_observation(&self.phi, self.mdp.discount, s, t, self.mdp.reward(s, a), &mut obs);
                    (w, obs)
                })
                .collect(),
        )
    }
}

/// Closed-form noise and stability constants of TD(0).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TdConstants {
    pub b_a: f64,
    pub eps_inf: f64,
    pub a: f64,
    pub alpha_inf: f64,
}

pub fn td_constants(gt: &TdGroundTruth, discount: f64) -> TdConstants {
    let g = discount;
    TdConstants {
        b_a: 2.0 * (1.0 + g),
        eps_inf: 2.0 * (1.0 + g) * (gt.theta_star.norm() + 1.0),
        a: (1.0 - g) * lambda_min_sym(&gt.sigma_phi),
        alpha_inf: (1.0 - g) / ((1.0 + g) * (1.0 + g)),
    }
}

/// Certificate with `Q = I`, `P = Ā + Āᵀ` and the closed-form TD constants.
pub fn td_certificate(gt: &TdGroundTruth, discount: f64) -> StabilityCertificate {
    let c = td_constants(gt, discount);
    let d = gt.a_bar.nrows();
    StabilityCertificate {
        p: &gt.a_bar + gt.a_bar.transpose(),
        q: identity(d),
        a: c.a,
        alpha_inf: c.alpha_inf,
        kappa_q: 1.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{lambda_max_sym, op_norm};
    use crate::stability::CONTRACTION_GRID;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn instance(seed: u64, discount: f64) -> TdProblem {
        let mut rng = RngStream::new(seed, 0);
        let mdp = generate_garnet(10, 2, 3, discount, &mut rng).unwrap();
        let pol = random_policy(&mdp, &mut rng);
        TdProblem::new(mdp, pol, &FeatureMap::Identity).unwrap()
    }

    #[test]
    fn desk_instance_has_three_successors_per_row() {
        let mdp = generate_garnet(10, 2, 3, 0.9, &mut RngStream::new(1, 0)).unwrap();
        for s in 0..10 {
            for a in 0..2 {
                let row = mdp.row(s, a);
                assert_eq!(row.iter().filter(|&&p| p > 0.0).count(), 3);
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                assert!((0.0..=1.0).contains(&mdp.reward(s, a)));
            }
        }
    }

    #[test]
    fn single_state_chain_is_deterministic() {
        let mdp = generate_garnet(1, 1, 1, 0.5, &mut RngStream::new(0, 0)).unwrap();
        assert_eq!(mdp.row(0, 0), &[1.0]);
    }

    #[test]
    fn generation_is_reproducible() {
        let a = generate_garnet(6, 3, 2, 0.8, &mut RngStream::new(5, 2)).unwrap();
        let b = generate_garnet(6, 3, 2, 0.8, &mut RngStream::new(5, 2)).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn generation_rejects_bad_arguments() {
        let mut rng = RngStream::new(0, 0);
        assert!(generate_garnet(3, 2, 4, 0.5, &mut rng).unwrap_err().is_validation());
        assert!(generate_garnet(3, 2, 0, 0.5, &mut rng).unwrap_err().is_validation());
        assert!(generate_garnet(3, 2, 2, 1.0, &mut rng).unwrap_err().is_validation());
    }

    #[test]
    fn branching_one_on_two_states_may_be_periodic() {
        // With b = 1 every state has one successor per action; a single
        // action gives a permutation-like graph that is often rejected.
        let mut rng = RngStream::new(3, 0);
        match generate_garnet(4, 1, 1, 0.5, &mut rng) {
            Ok(m) => assert!(is_primitive(&m.full_support(), 4)),
            Err(e) => assert!(matches!(e, Error::Model(_))),
        }
    }

    #[test]
    fn primitivity_examples() {
        // 2-cycle: irreducible but periodic.
        assert!(!is_primitive(&[false, true, true, false], 2));
        // Disconnected.
        assert!(!is_primitive(&[true, false, false, true], 2));
        assert!(is_primitive(&[true, true, true, false], 2));
        assert!(is_primitive(&[true], 1));
    }

    #[test]
    fn json_round_trip() {
        let mdp = generate_garnet(5, 2, 3, 0.7, &mut RngStream::new(9, 0)).unwrap();
        let text = serde_json::to_string(&mdp).unwrap();
        let back: GarnetMdp = serde_json::from_str(&text).unwrap();
        assert_eq!(back, mdp);
        let broken = text.replacen("\"branching\":3", "\"branching\":2", 1);
        assert!(serde_json::from_str::<GarnetMdp>(&broken).is_err());
    }

    #[test]
    fn policy_rows_and_single_action() {
        let mdp = generate_garnet(4, 3, 2, 0.5, &mut RngStream::new(2, 0)).unwrap();
        let pol = random_policy(&mdp, &mut RngStream::new(2, 1));
        for row in &pol.probs {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
        let one = generate_garnet(3, 1, 2, 0.5, &mut RngStream::new(2, 0)).unwrap();
        assert!(random_policy(&one, &mut RngStream::new(0, 0)).probs.iter().all(|r| r == &[1.0]));
    }

    #[test]
    fn policy_marginals_are_symmetric() {
        let mdp = generate_garnet(2, 3, 2, 0.5, &mut RngStream::new(4, 0)).unwrap();
        let mut rng = RngStream::new(4, 1);
        let count = 100_000;
        let mut total = [0.0; 3];
        for _ in 0..count {
            let pol = random_policy(&mdp, &mut rng);
            for (a, t) in total.iter_mut().enumerate() {
                *t += pol.prob(0, a);
            }
        }
        for t in total {
            assert!((t / count as f64 - 1.0 / 3.0).abs() <= 0.01);
        }
    }

    #[test]
    fn zero_discount_decouples_states() {
        let mut rng = RngStream::new(11, 0);
        let mdp = generate_garnet(6, 2, 3, 0.0, &mut rng).unwrap();
        let pol = random_policy(&mdp, &mut rng);
        let gt = ground_truth(&mdp, &pol, &FeatureMap::Identity).unwrap();
        let diag = DMatrix::from_diagonal(&gt.mu);
        assert!((&gt.a_bar - diag).amax() <= 1e-14);
        for s in 0..6 {
            let r_bar: f64 = (0..2).map(|a| pol.prob(s, a) * mdp.reward(s, a)).sum();
            assert_abs_diff_eq!(gt.theta_star[s], r_bar, epsilon = 1e-12);
        }
    }

    #[test]
    fn tabular_solution_solves_bellman_equation() {
        for (seed, g) in [(1, 0.5), (2, 0.9), (3, 0.99)] {
            let p = instance(seed, g);
            let gt = p.truth();
            let ns = p.mdp().n_states();
            let r_bar = DVector::from_fn(ns, |s, _| {
                (0..2).map(|a| p.policy().prob(s, a) * p.mdp().reward(s, a)).sum()
            });
            let v = (identity(ns) - &gt.p_pi * g).lu().solve(&r_bar).unwrap();
            assert!((&gt.theta_star - &v).amax() <= 1e-9 * v.amax().max(1.0), "discount {g}");
        }
    }

    #[test]
    fn stationary_and_fixed_point_invariants() {
        let p = instance(6, 0.8);
        let gt = p.truth();
        assert!((gt.p_pi.transpose() * &gt.mu - &gt.mu).lp_norm(1) <= 1e-10);
        assert_abs_diff_eq!(gt.mu.sum(), 1.0, epsilon = 1e-12);
        assert!(gt.mu.min() > 0.0);
        assert!((&gt.a_bar * &gt.theta_star - &gt.b_bar).amax() <= 1e-12);
        let recon = gt.a_bar.clone().try_inverse().unwrap();
        let expected = &recon * &gt.sigma_eps * recon.transpose();
        assert!((&gt.sigma_inf - expected).amax() <= 1e-9 * gt.sigma_inf.amax());
        assert!(lambda_min_sym(&gt.sigma_inf) >= -1e-10);
    }

    #[test]
    fn periodic_policy_chain_is_a_model_error() {
        let p = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        assert!(matches!(stationary_distribution(&p), Err(Error::Model(_))));
    }

    #[test]
    fn sampled_matrices_are_rank_one_and_bounded() {
        let g = 0.9;
        let p = instance(7, g);
        let c = td_constants(p.truth(), g);
        let mut rng = RngStream::new(7, 1);
        for _ in 0..2000 {
            let obs = p.sample(&mut rng);
            assert!(op_norm(&obs.a) <= 1.0 + g + 1e-12);
            let sv = obs.a.singular_values();
            assert!(sv.iter().filter(|&&x| x > 1e-12).count() <= 1);
            assert!(p.exact().unwrap().noise(&obs).norm() <= c.eps_inf + 1e-12);
        }
    }

    #[test]
    fn constants_examples() {
        let p = instance(1, 0.9);
        let c = td_constants(p.truth(), 0.9);
        assert_abs_diff_eq!(c.b_a, 3.8, epsilon = 1e-15);
        assert_abs_diff_eq!(c.alpha_inf, 0.1 / 3.61, epsilon = 1e-15);
        assert_abs_diff_eq!(c.a, 0.1 * p.truth().mu.min(), epsilon = 1e-14);
        let c0 = td_constants(p.truth(), 0.0);
        assert_eq!((c0.b_a, c0.alpha_inf), (2.0, 1.0));
    }

    #[test]
    fn matrix_bounds_hold() {
        for (seed, g) in [(1, 0.3), (2, 0.8), (3, 0.95)] {
            let p = instance(seed, g);
            let gt = p.truth();
            let lower = &gt.a_bar + gt.a_bar.transpose() - &gt.sigma_phi * (2.0 * (1.0 - g));
            assert!(lambda_min_sym(&lower) >= -1e-10);
            let upper = &gt.sigma_phi * (1.0 + g).powi(2) - gt.a_bar.transpose() * &gt.a_bar;
            assert!(lambda_min_sym(&upper) >= -1e-10);
        }
    }

    #[test]
    fn euclidean_contraction_on_admissible_steps() {
        for (seed, g) in [(4, 0.5), (5, 0.9)] {
            let p = instance(seed, g);
            let cert = td_certificate(p.truth(), g);
            assert!(cert.contraction_slack(&p.truth().a_bar, CONTRACTION_GRID).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn monte_carlo_moments_match_enumeration() {
        let p = instance(8, 0.8);
        let exact = p.exact().unwrap();
        let mut rng = RngStream::new(8, 1);
        let draws = 1_000_000;
        let mut a_sum = DMatrix::zeros(10, 10);
        for _ in 0..draws {
            a_sum += p.sample(&mut rng).a;
        }
        assert!((a_sum / draws as f64 - &exact.a_bar).norm() <= 5e-3);
    }

    #[test]
    fn support_matches_ground_truth() {
        let p = instance(9, 0.7);
        let support = p.support().unwrap();
        let total: f64 = support.iter().map(|(w, _)| w).sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
        let a: DMatrix<f64> = support.iter().map(|(w, o)| &o.a * *w).sum();
        assert!((a - &p.truth().a_bar).amax() <= 1e-14);
    }

    #[test]
    fn random_projection_features() {
        let f = FeatureMap::RandomProjection { dim: 3, seed: 1 };
        let phi = f.matrix(8).unwrap();
        for row in phi.row_iter() {
            assert_abs_diff_eq!(row.norm(), 1.0, epsilon = 1e-12);
        }
        let mut rng = RngStream::new(12, 0);
        let mdp = generate_garnet(8, 2, 3, 0.6, &mut rng).unwrap();
        let pol = random_policy(&mdp, &mut rng);
        let gt = ground_truth(&mdp, &pol, &f).unwrap();
        assert_eq!(gt.theta_star.len(), 3);
        assert!(lambda_max_sym(&gt.sigma_phi) <= 1.0 + 1e-12);
        assert!((&gt.a_bar * &gt.theta_star - &gt.b_bar).amax() <= 1e-12);
    }

    proptest! {
        #[test]
        fn generated_rows_are_valid(seed in 0u64..500, ns in 1usize..8, na in 1usize..4, frac in 0.0f64..1.0) {
            let b = 1 + ((ns - 1) as f64 * frac) as usize;
            if let Ok(mdp) = generate_garnet(ns, na, b, 0.5, &mut RngStream::new(seed, 0)) {
                for s in 0..ns {
                    for a in 0..na {
                        let row = mdp.row(s, a);
                        prop_assert_eq!(row.iter().filter(|&&p| p > 0.0).count(), b);
                        prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                    }
                }
            }
        }

        #[test]
        fn td_bounds_on_random_instances(seed in 0u64..200, g in 0.0f64..0.99) {
            let mut rng = RngStream::new(seed, 0);
            let mdp = generate_garnet(6, 2, 3, g, &mut rng).unwrap();
            let pol = random_policy(&mdp, &mut rng);
            let gt = ground_truth(&mdp, &pol, &FeatureMap::Identity).unwrap();
            prop_assert!((gt.p_pi.transpose() * &gt.mu - &gt.mu).lp_norm(1) <= 1e-10);
            let lower = &gt.a_bar + gt.a_bar.transpose() - &gt.sigma_phi * (2.0 * (1.0 - g));
            prop_assert!(lambda_min_sym(&lower) >= -1e-10);
            let upper = &gt.sigma_phi * (1.0 + g).powi(2) - gt.a_bar.transpose() * &gt.a_bar;
            prop_assert!(lambda_min_sym(&upper) >= -1e-10);
            let cert = td_certificate(&gt, g);
            prop_assert!(cert.contraction_slack(&gt.a_bar, CONTRACTION_GRID).unwrap() <= 1e-12);
        }
    }
}
