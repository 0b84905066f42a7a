//! Exact finite discounted MDPs and their visitation distributions.
//!
//! Everything here is closed-form: the discounted state occupancy is obtained
//! from a dense linear solve, and every derived distribution (state-action,
//! state-transition, joint and inverse-dynamics) is a product or marginal of
//! that occupancy with the policy and the transition kernel.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance for row-stochastic checks on kernels and policies.
pub const STOCHASTIC_TOL: f64 = 1e-12;

/// Maximum allowed disagreement between the two expected-return formulas.
pub const RETURN_AGREEMENT_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum TabularError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("linear solve failed for the occupancy system")]
    Singular,
    #[error("expected-return formulas disagree: occupancy {occupancy}, bellman {bellman}")]
    Inconsistent { occupancy: f64, bellman: f64 },
}

pub type Result<T> = std::result::Result<T, TabularError>;

/// A finite MDP `(S, A, P, r, d0, gamma)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    /// `P[s][a][s']`, flattened as `(s * A + a) * S + s'`.
    transition: Vec<f64>,
    /// `r[s][a]`, flattened as `s * A + a`.
    reward: Vec<f64>,
    initial: Vec<f64>,
    gamma: f64,
}

fn check_simplex(row: &[f64], what: &str) -> Result<()> {
    if row.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(TabularError::Argument(format!("{what} has a negative or non-finite entry")));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > STOCHASTIC_TOL {
        return Err(TabularError::Argument(format!("{what} sums to {sum}, expected 1")));
    }
    Ok(())
}

impl TabularMdp {
    /// Builds and validates an MDP from nested tables.
    pub fn new(
        transition: Vec<Vec<Vec<f64>>>,
        reward: Vec<Vec<f64>>,
        initial: Vec<f64>,
        gamma: f64,
    ) -> Result<Self> {
        let n_states = transition.len();
        if n_states == 0 {
            return Err(TabularError::Argument("MDP needs at least one state".into()));
        }
        let n_actions = transition[0].len();
        if n_actions == 0 {
            return Err(TabularError::Argument("MDP needs at least one action".into()));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(TabularError::Argument(format!("gamma must lie in [0, 1), got {gamma}")));
        }
        if reward.len() != n_states || initial.len() != n_states {
            return Err(TabularError::Dimension("reward/initial rows must match the state count".into()));
        }
        let mut flat_p = Vec::with_capacity(n_states * n_actions * n_states);
        for (s, rows) in transition.iter().enumerate() {
            if rows.len() != n_actions {
                return Err(TabularError::Dimension(format!("state {s} has {} actions", rows.len())));
            }
            for (a, row) in rows.iter().enumerate() {
                if row.len() != n_states {
                    return Err(TabularError::Dimension(format!("P[{s}][{a}] has length {}", row.len())));
                }
                check_simplex(row, &format!("P[{s}][{a}]"))?;
                flat_p.extend_from_slice(row);
            }
        }
        let mut flat_r = Vec::with_capacity(n_states * n_actions);
        for (s, row) in reward.iter().enumerate() {
            if row.len() != n_actions {
                return Err(TabularError::Dimension(format!("r[{s}] has length {}", row.len())));
            }
            if row.iter().any(|x| !x.is_finite()) {
                return Err(TabularError::Argument(format!("r[{s}] has a non-finite entry")));
            }
            flat_r.extend_from_slice(row);
        }
        check_simplex(&initial, "d0")?;
        Ok(Self { n_states, n_actions, transition: flat_p, reward: flat_r, initial, gamma })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn initial(&self) -> &[f64] {
        &self.initial
    }

    #[inline]
    pub fn p(&self, s: usize, a: usize, next: usize) -> f64 {
        self.transition[(s * self.n_actions + a) * self.n_states + next]
    }

    /// The next-state distribution `P[s][a][..]`.
    pub fn next_row(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.transition[start..start + self.n_states]
    }

    #[inline]
    pub fn r(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }

    /// `R_max = max |r[s][a]|`.
    pub fn r_max(&self) -> f64 {
        self.reward.iter().fold(0.0f64, |m, r| m.max(r.abs()))
    }

    /// The same dynamics with a different reward table.
    pub fn with_reward(&self, reward: Vec<Vec<f64>>) -> Result<Self> {
        let p = (0..self.n_states)
            .map(|s| (0..self.n_actions).map(|a| self.next_row(s, a).to_vec()).collect())
            .collect();
        Self::new(p, reward, self.initial.clone(), self.gamma)
    }

    /// Policy-induced state kernel `P_pi[s][s'] = sum_a pi(a|s) P(s'|s,a)`.
    pub fn policy_kernel(&self, pi: &TabularPolicy) -> Result<Vec<f64>> {
        self.check_policy(pi)?;
        let n = self.n_states;
        let mut k = vec![0.0; n * n];
        for s in 0..n {
            for a in 0..self.n_actions {
                let w = pi.prob(s, a);
                if w == 0.0 {
                    continue;
                }
                for (next, &p) in self.next_row(s, a).iter().enumerate() {
                    k[s * n + next] += w * p;
                }
            }
        }
        Ok(k)
    }

    fn check_policy(&self, pi: &TabularPolicy) -> Result<()> {
        if pi.n_states != self.n_states || pi.n_actions != self.n_actions {
            return Err(TabularError::Dimension(format!(
                "policy is {}x{}, MDP is {}x{}",
                pi.n_states, pi.n_actions, self.n_states, self.n_actions
            )));
        }
        Ok(())
    }
}

/// A stationary policy `pi(a|s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl TabularPolicy {
    pub fn new(probs: Vec<Vec<f64>>) -> Result<Self> {
        let n_states = probs.len();
        if n_states == 0 || probs[0].is_empty() {
            return Err(TabularError::Argument("policy table is empty".into()));
        }
        let n_actions = probs[0].len();
        let mut flat = Vec::with_capacity(n_states * n_actions);
        for (s, row) in probs.iter().enumerate() {
            if row.len() != n_actions {
                return Err(TabularError::Dimension(format!("pi[{s}] has length {}", row.len())));
            }
            check_simplex(row, &format!("pi[{s}]"))?;
            flat.extend_from_slice(row);
        }
        Ok(Self { n_states, n_actions, probs: flat })
    }

    /// Uniform over actions in every state.
    pub fn uniform(n_states: usize, n_actions: usize) -> Result<Self> {
        Self::new(vec![vec![1.0 / n_actions as f64; n_actions]; n_states])
    }

    /// Puts all mass on `actions[s]` in state `s`.
    pub fn deterministic(actions: &[usize], n_actions: usize) -> Result<Self> {
        let rows = actions
            .iter()
            .map(|&a| {
                if a >= n_actions {
                    return Err(TabularError::Argument(format!("action {a} out of range")));
                }
                let mut row = vec![0.0; n_actions];
                row[a] = 1.0;
                Ok(row)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(rows)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    #[inline]
    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }
}

/// Every visitation distribution induced by a policy on an MDP.
///
/// Layouts: `mu[s * A + a]`, `rho_ss[s * S + s']`, `rho_sas[(s * A + a) * S + s']`,
/// `inverse[(s * S + s') * A + a]` for `rho(a | s, s')`, with `inverse_defined[s * S + s']`
/// false wherever `rho_ss` is zero.
#[derive(Debug, Clone)]
pub struct VisitationSet {
    pub n_states: usize,
    pub n_actions: usize,
    pub d: Vec<f64>,
    pub mu: Vec<f64>,
    pub rho_ss: Vec<f64>,
    pub rho_sas: Vec<f64>,
    pub inverse: Vec<f64>,
    pub inverse_defined: Vec<bool>,
}

impl VisitationSet {
    #[inline]
    pub fn mu_at(&self, s: usize, a: usize) -> f64 {
        self.mu[s * self.n_actions + a]
    }

    #[inline]
    pub fn rho_ss_at(&self, s: usize, next: usize) -> f64 {
        self.rho_ss[s * self.n_states + next]
    }

    #[inline]
    pub fn rho_sas_at(&self, s: usize, a: usize, next: usize) -> f64 {
        self.rho_sas[(s * self.n_actions + a) * self.n_states + next]
    }

    /// `rho(a | s, s')`, `None` off-support.
    pub fn inverse_at(&self, s: usize, next: usize, a: usize) -> Option<f64> {
        let pair = s * self.n_states + next;
        self.inverse_defined[pair].then(|| self.inverse[pair * self.n_actions + a])
    }

    /// The conditional action distribution for one `(s, s')` pair, if defined.
    pub fn inverse_row(&self, s: usize, next: usize) -> Option<&[f64]> {
        let pair = s * self.n_states + next;
        self.inverse_defined[pair]
            .then(|| &self.inverse[pair * self.n_actions..(pair + 1) * self.n_actions])
    }
}

/// States reachable from the support of `d0` under the policy kernel.
fn reachable(mdp: &TabularMdp, kernel: &[f64]) -> Vec<bool> {
    let n = mdp.n_states;
    let mut seen: Vec<bool> = mdp.initial.iter().map(|&p| p > 0.0).collect();
    if mdp.gamma == 0.0 {
        return seen;
    }
    let mut stack: Vec<usize> = (0..n).filter(|&s| seen[s]).collect();
    while let Some(s) = stack.pop() {
        for next in 0..n {
            if kernel[s * n + next] > 0.0 && !seen[next] {
                seen[next] = true;
                stack.push(next);
            }
        }
    }
    seen
}

/// Normalized discounted state occupancy
/// `d = (1 - gamma) d0 + gamma P_pi^T d`, by direct solve.
///
/// States that are structurally unreachable get exactly zero mass, so that
/// downstream support tests are not polluted by round-off.
pub fn state_visitation(mdp: &TabularMdp, pi: &TabularPolicy) -> Result<Vec<f64>> {
    let kernel = mdp.policy_kernel(pi)?;
    let n = mdp.n_states;
    let system = DMatrix::from_fn(n, n, |i, j| {
        let id = if i == j { 1.0 } else { 0.0 };
        id - mdp.gamma * kernel[j * n + i]
    });
    let rhs = DVector::from_iterator(n, mdp.initial.iter().map(|&p| (1.0 - mdp.gamma) * p));
    let sol = system.lu().solve(&rhs).ok_or(TabularError::Singular)?;
    let support = reachable(mdp, &kernel);
    let mut d: Vec<f64> = sol
        .iter()
        .zip(&support)
        .map(|(&x, &live)| if live { x.max(0.0) } else { 0.0 })
        .collect();
    let total: f64 = d.iter().sum();
    assert!(total.is_finite() && total > 0.0, "occupancy solve produced no mass");
    d.iter_mut().for_each(|x| *x /= total);
    Ok(d)
}

pub fn visitation_set(mdp: &TabularMdp, pi: &TabularPolicy) -> Result<VisitationSet> {
    let d = state_visitation(mdp, pi)?;
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let mut mu = vec![0.0; ns * na];
    let mut rho_sas = vec![0.0; ns * na * ns];
    let mut rho_ss = vec![0.0; ns * ns];
    let mut inverse = vec![0.0; ns * ns * na];
    let mut inverse_defined = vec![false; ns * ns];
    for s in 0..ns {
        for a in 0..na {
            let m = d[s] * pi.prob(s, a);
            mu[s * na + a] = m;
            for next in 0..ns {
                let p = mdp.p(s, a, next);
                rho_sas[(s * na + a) * ns + next] = m * p;
            }
        }
        for next in 0..ns {
            // sum_a P(s'|s,a) pi(a|s), shared by rho_ss and the inverse model
            let mix: f64 = (0..na).map(|a| mdp.p(s, a, next) * pi.prob(s, a)).sum();
            let pair = s * ns + next;
            rho_ss[pair] = d[s] * mix;
            if rho_ss[pair] > 0.0 {
                inverse_defined[pair] = true;
                for a in 0..na {
                    inverse[pair * na + a] = mdp.p(s, a, next) * pi.prob(s, a) / mix;
                }
            }
        }
    }
    Ok(VisitationSet { n_states: ns, n_actions: na, d, mu, rho_ss, rho_sas, inverse, inverse_defined })
}

/// `J = (1 / (1 - gamma)) sum_{s,a} mu(s,a) r(s,a)`.
pub fn expected_return_occupancy(mdp: &TabularMdp, pi: &TabularPolicy) -> Result<f64> {
    let d = state_visitation(mdp, pi)?;
    let mut acc = 0.0;
    for (s, &ds) in d.iter().enumerate() {
        for a in 0..mdp.n_actions {
            acc += ds * pi.prob(s, a) * mdp.r(s, a);
        }
    }
    Ok(acc / (1.0 - mdp.gamma))
}

/// Value function from the Bellman system `(I - gamma P_pi) V = r_pi`.
pub fn policy_values(mdp: &TabularMdp, pi: &TabularPolicy) -> Result<Vec<f64>> {
    let kernel = mdp.policy_kernel(pi)?;
    let n = mdp.n_states;
    let system = DMatrix::from_fn(n, n, |i, j| {
        let id = if i == j { 1.0 } else { 0.0 };
        id - mdp.gamma * kernel[i * n + j]
    });
    let rhs = DVector::from_fn(n, |s, _| (0..mdp.n_actions).map(|a| pi.prob(s, a) * mdp.r(s, a)).sum());
    let v = system.lu().solve(&rhs).ok_or(TabularError::Singular)?;
    Ok(v.iter().copied().collect())
}

/// `J = d0^T V`.
pub fn expected_return_bellman(mdp: &TabularMdp, pi: &TabularPolicy) -> Result<f64> {
    let v = policy_values(mdp, pi)?;
    Ok(mdp.initial.iter().zip(&v).map(|(p, v)| p * v).sum())
}

/// Expected discounted return, computed through both the occupancy and the
/// Bellman routes; an error is returned if they disagree.
pub fn expected_return(mdp: &TabularMdp, pi: &TabularPolicy) -> Result<f64> {
    let occupancy = expected_return_occupancy(mdp, pi)?;
    let bellman = expected_return_bellman(mdp, pi)?;
    let scale = 1.0f64.max(occupancy.abs());
    if (occupancy - bellman).abs() > RETURN_AGREEMENT_TOL * scale {
        return Err(TabularError::Inconsistent { occupancy, bellman });
    }
    Ok(occupancy)
}

/// A point on the probability simplex with strictly positive coordinates,
/// drawn from the flat Dirichlet via normalized exponentials.
pub fn random_simplex<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n)
        .map(|_| {
            // open interval keeps every coordinate strictly positive
            let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            -u.ln()
        })
        .collect();
    let total: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= total);
    renormalize(&mut v);
    v
}

/// Nudges the largest coordinate so that the sum is 1 to within an ulp or two.
fn renormalize(v: &mut [f64]) {
    let total: f64 = v.iter().sum();
    if let Some(max) = v.iter_mut().max_by(|a, b| a.total_cmp(b)) {
        *max += 1.0 - total;
    }
}

/// Random test instance: strictly positive Dirichlet rows for `P` and `d0`,
/// rewards uniform in `[-1, 1]`. Deterministic in `seed`.
pub fn random_mdp(n_states: usize, n_actions: usize, gamma: f64, seed: u64) -> Result<TabularMdp> {
    if n_states == 0 || n_actions == 0 {
        return Err(TabularError::Argument("random_mdp needs n_states >= 1 and n_actions >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = (0..n_states)
        .map(|_| (0..n_actions).map(|_| random_simplex(&mut rng, n_states)).collect())
        .collect();
    let r = (0..n_states)
        .map(|_| (0..n_actions).map(|_| rng.random_range(-1.0..=1.0)).collect())
        .collect();
    let d0 = random_simplex(&mut rng, n_states);
    TabularMdp::new(p, r, d0, gamma)
}

/// Strictly positive random policy.
pub fn random_policy(n_states: usize, n_actions: usize, seed: u64) -> Result<TabularPolicy> {
    if n_states == 0 || n_actions == 0 {
        return Err(TabularError::Argument("random_policy needs nonzero dimensions".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    TabularPolicy::new((0..n_states).map(|_| random_simplex(&mut rng, n_actions)).collect())
}

#[derive(Serialize, Deserialize)]
struct MdpDocument {
    #[serde(rename = "P")]
    p: Vec<Vec<Vec<f64>>>,
    r: Vec<Vec<f64>>,
    d0: Vec<f64>,
    gamma: f64,
}

#[derive(Serialize, Deserialize)]
struct PolicyDocument {
    pi: Vec<Vec<f64>>,
}

impl Serialize for TabularMdp {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let doc = MdpDocument {
            p: (0..self.n_states)
                .map(|s| (0..self.n_actions).map(|a| self.next_row(s, a).to_vec()).collect())
                .collect(),
            r: self.reward.chunks(self.n_actions).map(<[f64]>::to_vec).collect(),
            d0: self.initial.clone(),
            gamma: self.gamma,
        };
        doc.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for TabularMdp {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let doc = MdpDocument::deserialize(deserializer)?;
        TabularMdp::new(doc.p, doc.r, doc.d0, doc.gamma).map_err(serde::de::Error::custom)
    }
}

impl Serialize for TabularPolicy {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        PolicyDocument { pi: self.probs.chunks(self.n_actions).map(<[f64]>::to_vec).collect() }
            .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for TabularPolicy {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let doc = PolicyDocument::deserialize(deserializer)?;
        TabularPolicy::new(doc.pi).map_err(serde::de::Error::custom)
    }
}
