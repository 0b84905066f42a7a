//! f-divergences between discrete distributions and closed-form checks of the
//! imitation bound chain: Pinsker and the KL/chi-squared ordering, the
//! joint/state-action KL identity, the inverse-dynamics KL decomposition, the
//! return-gap bound, and the LSGAN optimal discriminator with its
//! chi-squared equivalence.
//!
//! Divergences that are infinite because of a support violation are returned
//! as `f64::INFINITY` on purpose; no code path produces it by overflow.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tabular::{
    expected_return, random_mdp, random_policy, random_simplex, visitation_set, TabularError, TabularMdp,
    TabularPolicy, VisitationSet,
};

/// Inequality reports are satisfied when `lhs <= rhs + INEQUALITY_TOL`.
pub const INEQUALITY_TOL: f64 = 1e-9;
/// Tolerance for the KL identities.
pub const KL_EQUALITY_TOL: f64 = 1e-10;
/// Tolerance for the LSGAN / chi-squared identity.
pub const LSGAN_EQUALITY_TOL: f64 = 1e-9;

const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum DivergenceError {
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("not a distribution: {0}")]
    NotDistribution(String),
    #[error(transparent)]
    Tabular(#[from] TabularError),
}

pub type Result<T> = std::result::Result<T, DivergenceError>;

fn check_pair(p: &[f64], q: &[f64]) -> Result<()> {
    if p.len() != q.len() {
        return Err(DivergenceError::Length(p.len(), q.len()));
    }
    for (name, v) in [("p", p), ("q", q)] {
        let sum: f64 = v.iter().sum();
        if v.iter().any(|&x| !(x >= 0.0)) || (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(DivergenceError::NotDistribution(format!("{name} sums to {sum}")));
        }
    }
    Ok(())
}

/// `TV(p, q) = 1/2 sum |p - q|`.
pub fn total_variation(p: &[f64], q: &[f64]) -> Result<f64> {
    check_pair(p, q)?;
    Ok((0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()).min(1.0))
}

/// `KL(p || q) = sum_{p > 0} p log(p / q)`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    check_pair(p, q)?;
    Ok(kl_terms(p, q))
}

/// Pearson `chi2(p || q) = sum_{q > 0} (p - q)^2 / q`.
pub fn chi_squared(p: &[f64], q: &[f64]) -> Result<f64> {
    check_pair(p, q)?;
    Ok(chi2_terms(p, q))
}

/// The expanded form `sum p^2 / q - 1`, valid for normalized inputs.
pub fn chi_squared_expanded(p: &[f64], q: &[f64]) -> Result<f64> {
    check_pair(p, q)?;
    let mut acc = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        if b > 0.0 {
            acc += a * a / b;
        } else if a > 0.0 {
            return Ok(f64::INFINITY);
        }
    }
    Ok(acc - 1.0)
}

// Unchecked kernels: the per-(s,s') conditionals and the scaled LSGAN measures
// go through these without the simplex check.
fn kl_terms(p: &[f64], q: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        if a > 0.0 {
            if b <= 0.0 {
                return f64::INFINITY;
            }
            acc += a * (a / b).ln();
        }
    }
    acc
}

fn chi2_terms(p: &[f64], q: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        if b > 0.0 {
            acc += (a - b) * (a - b) / b;
        } else if a > 0.0 {
            return f64::INFINITY;
        }
    }
    acc
}

/// The divergence kernels used by the certification checks. Swappable so the
/// checker itself can be mutation-tested.
#[derive(Clone, Copy)]
pub struct Kernels {
    pub kl: fn(&[f64], &[f64]) -> f64,
    pub chi2: fn(&[f64], &[f64]) -> f64,
}

impl Default for Kernels {
    fn default() -> Self {
        Self { kl: kl_terms, chi2: chi2_terms }
    }
}

impl Kernels {
    /// A deliberately broken chi-squared (negated) for checker self-tests.
    pub fn negated_chi2() -> Self {
        fn neg(p: &[f64], q: &[f64]) -> f64 {
            -chi2_terms(p, q)
        }
        Self { kl: kl_terms, chi2: neg }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportKind {
    /// `lhs <= rhs + tol`.
    Inequality,
    /// `|lhs - rhs| <= tol`.
    Equality,
}

/// Outcome of one closed-form check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub kind: ReportKind,
    pub lhs: f64,
    pub rhs: f64,
    pub satisfied: bool,
    /// `rhs - lhs`.
    pub slack: f64,
    /// True when an infinite divergence makes the check hold trivially.
    pub vacuous: bool,
    pub detail: BTreeMap<String, f64>,
}

impl DivergenceReport {
    fn inequality(lhs: f64, rhs: f64, detail: BTreeMap<String, f64>) -> Self {
        let vacuous = rhs == f64::INFINITY;
        Self {
            kind: ReportKind::Inequality,
            lhs,
            rhs,
            satisfied: lhs <= rhs + INEQUALITY_TOL,
            slack: rhs - lhs,
            vacuous,
            detail,
        }
    }

    fn equality(lhs: f64, rhs: f64, tol: f64, detail: BTreeMap<String, f64>) -> Self {
        let both_infinite = lhs == f64::INFINITY && rhs == f64::INFINITY;
        Self {
            kind: ReportKind::Equality,
            lhs,
            rhs,
            satisfied: both_infinite || (lhs - rhs).abs() <= tol,
            slack: if both_infinite { 0.0 } else { rhs - lhs },
            vacuous: both_infinite,
            detail,
        }
    }

    /// `|lhs - rhs|`, zero when both sides are infinite.
    pub fn equality_error(&self) -> f64 {
        if self.vacuous && self.kind == ReportKind::Equality {
            0.0
        } else {
            (self.lhs - self.rhs).abs()
        }
    }
}

macro_rules! detail {
    ($($k:expr => $v:expr),* $(,)?) => {{
        let mut m = BTreeMap::new();
        $(m.insert($k.to_string(), $v);)*
        m
    }};
}

/// `2 TV^2 <= KL <= chi2`. The report's `lhs` is `2 TV^2` and `rhs` is `chi2`;
/// both inner slacks are in `detail`.
pub fn check_pinsker_chain(p: &[f64], q: &[f64]) -> Result<DivergenceReport> {
    check_pinsker_chain_with(&Kernels::default(), p, q)
}

pub fn check_pinsker_chain_with(k: &Kernels, p: &[f64], q: &[f64]) -> Result<DivergenceReport> {
    let tv = total_variation(p, q)?;
    let kl = (k.kl)(p, q);
    let chi2 = (k.chi2)(p, q);
    let two_tv2 = 2.0 * tv * tv;
    let pinsker_ok = two_tv2 <= kl + INEQUALITY_TOL;
    let chi_ok = kl <= chi2 + INEQUALITY_TOL;
    let detail = detail! {
        "tv" => tv,
        "kl" => kl,
        "chi2" => chi2,
        "pinsker_slack" => kl - two_tv2,
        "chi2_slack" => chi2 - kl,
        "infinite" => if kl.is_infinite() || chi2.is_infinite() { 1.0 } else { 0.0 },
    };
    let mut report = DivergenceReport::inequality(two_tv2, chi2, detail);
    report.satisfied = pinsker_ok && chi_ok;
    report.vacuous = kl.is_infinite() || chi2.is_infinite();
    Ok(report)
}

fn shared_visitations(
    mdp: &TabularMdp,
    pi_theta: &TabularPolicy,
    pi_e: &TabularPolicy,
) -> Result<(VisitationSet, VisitationSet)> {
    Ok((visitation_set(mdp, pi_theta)?, visitation_set(mdp, pi_e)?))
}

/// Conditional divergence of the inverse-dynamics model, aggregated as the
/// `rho_theta(s, s')`-weighted expectation of the per-pair divergences.
fn conditional_divergence(
    theta: &VisitationSet,
    expert: &VisitationSet,
    kernel: fn(&[f64], &[f64]) -> f64,
) -> f64 {
    let ns = theta.n_states;
    let mut acc = 0.0;
    for s in 0..ns {
        for next in 0..ns {
            let w = theta.rho_ss_at(s, next);
            if w <= 0.0 {
                continue;
            }
            let row_t = theta.inverse_row(s, next).expect("positive rho_ss implies a defined inverse");
            let term = match expert.inverse_row(s, next) {
                Some(row_e) => kernel(row_t, row_e),
                None => f64::INFINITY,
            };
            if term.is_infinite() {
                return f64::INFINITY;
            }
            acc += w * term;
        }
    }
    acc
}

/// `KL(rho_theta(s,a,s') || rho_E(s,a,s')) = KL(mu_theta || mu_E)`.
pub fn lemma2_check(mdp: &TabularMdp, pi_theta: &TabularPolicy, pi_e: &TabularPolicy) -> Result<DivergenceReport> {
    let (t, e) = shared_visitations(mdp, pi_theta, pi_e)?;
    let joint = kl_terms(&t.rho_sas, &e.rho_sas);
    let state_action = kl_terms(&t.mu, &e.mu);
    let detail = detail! {
        "kl_sas" => joint,
        "kl_mu" => state_action,
    };
    Ok(DivergenceReport::equality(joint, state_action, KL_EQUALITY_TOL, detail))
}

/// `KL(mu_theta || mu_E) = KL(rho_theta(a|s,s') || rho_E(a|s,s')) + KL(rho_theta(s,s') || rho_E(s,s'))`,
/// the conditional term being an expectation under `rho_theta(s, a, s')`.
pub fn lemma3_check(mdp: &TabularMdp, pi_theta: &TabularPolicy, pi_e: &TabularPolicy) -> Result<DivergenceReport> {
    let (t, e) = shared_visitations(mdp, pi_theta, pi_e)?;
    let lhs = kl_terms(&t.mu, &e.mu);
    let conditional = conditional_divergence(&t, &e, kl_terms);
    let transition = kl_terms(&t.rho_ss, &e.rho_ss);
    let rhs = conditional + transition;
    let detail = detail! {
        "kl_mu" => lhs,
        "kl_conditional" => conditional,
        "kl_ss" => transition,
    };
    Ok(DivergenceReport::equality(lhs, rhs, KL_EQUALITY_TOL, detail))
}

/// Return-gap bound:
/// `|J(pi_E) - J(pi_theta)| <= sqrt(2) R_max / (1 - gamma) * sqrt(chi2_cond + chi2_ss)`.
pub fn theorem1_bound(mdp: &TabularMdp, pi_theta: &TabularPolicy, pi_e: &TabularPolicy) -> Result<DivergenceReport> {
    theorem1_bound_with(&Kernels::default(), mdp, pi_theta, pi_e)
}

pub fn theorem1_bound_with(
    k: &Kernels,
    mdp: &TabularMdp,
    pi_theta: &TabularPolicy,
    pi_e: &TabularPolicy,
) -> Result<DivergenceReport> {
    let (t, e) = shared_visitations(mdp, pi_theta, pi_e)?;
    let j_theta = expected_return(mdp, pi_theta)?;
    let j_e = expected_return(mdp, pi_e)?;
    let lhs = (j_e - j_theta).abs();
    let chi2_cond = conditional_divergence(&t, &e, k.chi2);
    let chi2_ss = (k.chi2)(&t.rho_ss, &e.rho_ss);
    let scale = std::f64::consts::SQRT_2 * mdp.r_max() / (1.0 - mdp.gamma());
    let inner = chi2_cond + chi2_ss;
    let rhs = if inner.is_infinite() && scale > 0.0 { f64::INFINITY } else { scale * inner.sqrt() };
    let detail = detail! {
        "j_theta" => j_theta,
        "j_expert" => j_e,
        "chi2_conditional" => chi2_cond,
        "chi2_ss" => chi2_ss,
        "tv_mu" => 0.5 * t.mu.iter().zip(&e.mu).map(|(a, b)| (a - b).abs()).sum::<f64>(),
        "kl_mu" => kl_terms(&t.mu, &e.mu),
        "r_max" => mdp.r_max(),
    };
    Ok(DivergenceReport::inequality(lhs, rhs, detail))
}

/// Labels of the generalized least-squares objectives: the discriminator
/// regresses expert pairs onto `b` and agent pairs onto `a`; the generator
/// pushes both onto `c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LsganLabels {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl LsganLabels {
    /// Expert 1, agent -1, generator target 1: the labels of the implemented objective.
    pub const MAIN: Self = Self { a: -1.0, b: 1.0, c: 1.0 };
    /// `b - c = 1`, `b - a = 2`: the labels under which the generator objective is a chi-squared divergence.
    pub const CHI2: Self = Self { a: -1.0, b: 1.0, c: 0.0 };
}

impl Default for LsganLabels {
    fn default() -> Self {
        Self::MAIN
    }
}

/// `D*(s, s') = (b rho_E + a rho_theta) / (rho_E + rho_theta)`, `None` where both vanish.
pub fn lsgan_optimal_discriminator(rho_e: &[f64], rho_theta: &[f64], a: f64, b: f64) -> Result<Vec<Option<f64>>> {
    if rho_e.len() != rho_theta.len() {
        return Err(DivergenceError::Length(rho_e.len(), rho_theta.len()));
    }
    Ok(rho_e
        .iter()
        .zip(rho_theta)
        .map(|(&pe, &pt)| {
            let den = pe + pt;
            (den > 0.0).then(|| (b * pe + a * pt) / den)
        })
        .collect())
}

/// `1/2 sum rho_E (D - b)^2 + 1/2 sum rho_theta (D - a)^2` for a tabular discriminator.
pub fn lsgan_discriminator_objective(rho_e: &[f64], rho_theta: &[f64], d: &[f64], a: f64, b: f64) -> f64 {
    rho_e
        .iter()
        .zip(rho_theta)
        .zip(d)
        .map(|((&pe, &pt), &x)| 0.5 * pe * (x - b).powi(2) + 0.5 * pt * (x - a).powi(2))
        .sum()
}

/// Checks `2 C(pi_theta) = chi2(2 rho_theta || rho_E + rho_theta)` where `C` is
/// the generator objective at the optimal discriminator, labels `b - c = 1`, `b - a = 2`.
pub fn lsgan_chi2_identity(rho_e: &[f64], rho_theta: &[f64]) -> Result<DivergenceReport> {
    lsgan_chi2_identity_with(&Kernels::default(), rho_e, rho_theta, LsganLabels::CHI2)
}

pub fn lsgan_chi2_identity_with(
    k: &Kernels,
    rho_e: &[f64],
    rho_theta: &[f64],
    labels: LsganLabels,
) -> Result<DivergenceReport> {
    check_pair(rho_e, rho_theta)?;
    if ((labels.b - labels.c) - 1.0).abs() > 1e-12 || ((labels.b - labels.a) - 2.0).abs() > 1e-12 {
        return Err(DivergenceError::NotDistribution(
            "the chi-squared identity needs b - c = 1 and b - a = 2".into(),
        ));
    }
    let d_star = lsgan_optimal_discriminator(rho_e, rho_theta, labels.a, labels.b)?;
    let mut two_c = 0.0;
    for ((&pe, &pt), d) in rho_e.iter().zip(rho_theta).zip(&d_star) {
        if let Some(d) = d {
            two_c += (pe + pt) * (d - labels.c).powi(2);
        }
    }
    let twice_theta: Vec<f64> = rho_theta.iter().map(|x| 2.0 * x).collect();
    let mixture: Vec<f64> = rho_e.iter().zip(rho_theta).map(|(a, b)| a + b).collect();
    let chi2 = (k.chi2)(&twice_theta, &mixture);
    let detail = detail! { "two_c" => two_c, "chi2_mixture" => chi2 };
    Ok(DivergenceReport::equality(two_c, chi2, LSGAN_EQUALITY_TOL, detail))
}

/// Settings of the randomized certification sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub instances: usize,
    pub max_states: usize,
    pub max_actions: usize,
    pub gammas: Vec<f64>,
    /// Independent simplex pairs for the Pinsker chain, on top of the MDP-derived pairs.
    pub simplex_pairs: usize,
    pub max_simplex_dim: usize,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            instances: 1000,
            max_states: 10,
            max_actions: 5,
            gammas: vec![0.5, 0.9, 0.95],
            simplex_pairs: 1000,
            max_simplex_dim: 20,
            seed: 0,
        }
    }
}

/// Aggregate over every report of one check.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckSummary {
    pub count: usize,
    pub violations: usize,
    pub vacuous: usize,
    /// Largest `|lhs - rhs|` (equality checks).
    pub max_equality_error: f64,
    /// Smallest `rhs - lhs` over non-vacuous cases (inequality checks).
    pub min_slack: Option<f64>,
    /// Smallest slack among cases where the two policies differ.
    pub min_slack_distinct: Option<f64>,
}

impl CheckSummary {
    fn absorb(&mut self, r: &DivergenceReport, distinct: bool) {
        self.count += 1;
        if !r.satisfied {
            self.violations += 1;
        }
        if r.vacuous {
            self.vacuous += 1;
        }
        match r.kind {
            ReportKind::Equality => {
                let err = r.equality_error();
                if err.is_nan() || err > self.max_equality_error {
                    self.max_equality_error = if err.is_nan() { f64::INFINITY } else { err };
                }
            }
            ReportKind::Inequality if !r.vacuous => {
                let s = if r.slack.is_nan() { f64::NEG_INFINITY } else { r.slack };
                self.min_slack = Some(self.min_slack.map_or(s, |m| m.min(s)));
                if distinct {
                    self.min_slack_distinct = Some(self.min_slack_distinct.map_or(s, |m| m.min(s)));
                }
            }
            ReportKind::Inequality => {}
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CertificationReport {
    pub instances: usize,
    pub pinsker: CheckSummary,
    pub lemma2: CheckSummary,
    pub lemma3: CheckSummary,
    pub theorem1: CheckSummary,
    pub lsgan_chi2: CheckSummary,
    /// Hand-built degenerate cases: deterministic dynamics, identical and
    /// injective-transition instances.
    pub targeted: CheckSummary,
}

impl CertificationReport {
    pub fn total_violations(&self) -> usize {
        [&self.pinsker, &self.lemma2, &self.lemma3, &self.theorem1, &self.lsgan_chi2, &self.targeted]
            .iter()
            .map(|c| c.violations)
            .sum()
    }
}

struct InstanceReports {
    pinsker: Vec<DivergenceReport>,
    lemma2: DivergenceReport,
    lemma3: DivergenceReport,
    theorem1: DivergenceReport,
    lsgan: DivergenceReport,
}

fn instance_shape(cfg: &SweepConfig, index: usize) -> (usize, usize, f64, u64) {
    use rand::Rng;
    let seed = cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ns = rng.random_range(1..=cfg.max_states.max(1));
    let na = rng.random_range(1..=cfg.max_actions.max(1));
    let gamma = cfg.gammas[index % cfg.gammas.len()];
    (ns, na, gamma, rng.random())
}

fn certify_instance(k: &Kernels, cfg: &SweepConfig, index: usize) -> Result<InstanceReports> {
    let (ns, na, gamma, seed) = instance_shape(cfg, index);
    let mdp = random_mdp(ns, na, gamma, seed)?;
    let pi_theta = random_policy(ns, na, seed ^ 0x5151)?;
    let pi_e = random_policy(ns, na, seed ^ 0xA7A7)?;
    let t = visitation_set(&mdp, &pi_theta)?;
    let e = visitation_set(&mdp, &pi_e)?;
    let mut pinsker = vec![
        check_pinsker_chain_with(k, &t.mu, &e.mu)?,
        check_pinsker_chain_with(k, &t.rho_ss, &e.rho_ss)?,
    ];
    if index < cfg.simplex_pairs {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0BAD_5EED);
        let dim = rng.random_range(2..=cfg.max_simplex_dim.max(2));
        let p = random_simplex(&mut rng, dim);
        let q = random_simplex(&mut rng, dim);
        pinsker.push(check_pinsker_chain_with(k, &p, &q)?);
    }
    Ok(InstanceReports {
        pinsker,
        lemma2: lemma2_check(&mdp, &pi_theta, &pi_e)?,
        lemma3: lemma3_check(&mdp, &pi_theta, &pi_e)?,
        theorem1: theorem1_bound_with(k, &mdp, &pi_theta, &pi_e)?,
        lsgan: lsgan_chi2_identity_with(k, &e.rho_ss, &t.rho_ss, LsganLabels::CHI2)?,
    })
}

/// Deterministic-dynamics cycle: action `a` moves `s` to `(s + a) mod n`. With
/// `n_actions <= n_states` every action leads to a distinct next state.
pub fn injective_mdp(n_states: usize, n_actions: usize, gamma: f64, seed: u64) -> Result<TabularMdp> {
    let base = random_mdp(n_states, n_actions, gamma, seed)?;
    let p = (0..n_states)
        .map(|s| {
            (0..n_actions)
                .map(|a| {
                    let mut row = vec![0.0; n_states];
                    row[(s + a) % n_states] = 1.0;
                    row
                })
                .collect()
        })
        .collect();
    let r = (0..n_states).map(|s| (0..n_actions).map(|a| base.r(s, a)).collect()).collect();
    Ok(TabularMdp::new(p, r, base.initial().to_vec(), gamma)?)
}

/// Deterministic dynamics where pairs of actions collide on the same next state.
pub fn colliding_mdp(n_states: usize, n_actions: usize, gamma: f64, seed: u64) -> Result<TabularMdp> {
    let base = random_mdp(n_states, n_actions, gamma, seed)?;
    let p = (0..n_states)
        .map(|s| {
            (0..n_actions)
                .map(|a| {
                    let mut row = vec![0.0; n_states];
                    row[(s + a / 2 + 1) % n_states] = 1.0;
                    row
                })
                .collect()
        })
        .collect();
    let r = (0..n_states).map(|s| (0..n_actions).map(|a| base.r(s, a)).collect()).collect();
    Ok(TabularMdp::new(p, r, base.initial().to_vec(), gamma)?)
}

fn targeted_reports(k: &Kernels, seed: u64) -> Result<Vec<(DivergenceReport, bool)>> {
    let mut out = Vec::new();
    for (i, gamma) in [0.5, 0.9, 0.95].into_iter().enumerate() {
        let s = seed.wrapping_add(i as u64);
        let mdp = random_mdp(6, 3, gamma, s)?;
        let pi = random_policy(6, 3, s + 1)?;
        for r in [lemma2_check(&mdp, &pi, &pi)?, lemma3_check(&mdp, &pi, &pi)?, theorem1_bound_with(k, &mdp, &pi, &pi)?] {
            out.push((r, false));
        }
        for mdp in [injective_mdp(5, 3, gamma, s)?, colliding_mdp(5, 4, gamma, s)?] {
            let na = mdp.n_actions();
            let pt = random_policy(5, na, s + 2)?;
            let pe = random_policy(5, na, s + 3)?;
            out.push((lemma2_check(&mdp, &pt, &pe)?, true));
            out.push((lemma3_check(&mdp, &pt, &pe)?, true));
            out.push((theorem1_bound_with(k, &mdp, &pt, &pe)?, true));
        }
    }
    Ok(out)
}

/// Runs every check over `cfg.instances` random instances plus the targeted
/// degenerate cases. Instances are independent and evaluated in parallel; the
/// reduction is in instance order.
pub fn certify(cfg: &SweepConfig) -> Result<CertificationReport> {
    certify_with(&Kernels::default(), cfg)
}

pub fn certify_with(k: &Kernels, cfg: &SweepConfig) -> Result<CertificationReport> {
    let per_instance: Vec<InstanceReports> =
        (0..cfg.instances).into_par_iter().map(|i| certify_instance(k, cfg, i)).collect::<Result<_>>()?;
    let mut report = CertificationReport { instances: cfg.instances, ..Default::default() };
    for r in &per_instance {
        for p in &r.pinsker {
            report.pinsker.absorb(p, true);
        }
        report.lemma2.absorb(&r.lemma2, true);
        report.lemma3.absorb(&r.lemma3, true);
        report.theorem1.absorb(&r.theorem1, true);
        report.lsgan_chi2.absorb(&r.lsgan, true);
    }
    for (r, distinct) in targeted_reports(k, cfg.seed)? {
        report.targeted.absorb(&r, distinct);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn total_variation_examples() {
        assert_eq!(total_variation(&[0.2, 0.8], &[0.2, 0.8]).unwrap(), 0.0);
        assert_eq!(total_variation(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert!((total_variation(&[0.7, 0.3], &[0.4, 0.6]).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(total_variation(&[1.0], &[0.5, 0.5]), Err(DivergenceError::Length(1, 2)));
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert!((kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(kl_divergence(&[0.5, 0.5], &[1.0, 0.0]).unwrap(), f64::INFINITY);
        assert!(kl_divergence(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn chi2_examples() {
        assert_eq!(chi_squared(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert!((chi_squared(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(chi_squared(&[0.5, 0.5], &[1.0, 0.0]).unwrap(), f64::INFINITY);
        assert_eq!(chi_squared_expanded(&[0.5, 0.5], &[1.0, 0.0]).unwrap(), f64::INFINITY);
    }

    #[test]
    fn chi2_matches_expanded_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for dim in 2..30 {
            let p = random_simplex(&mut rng, dim);
            let q = random_simplex(&mut rng, dim);
            let a = chi_squared(&p, &q).unwrap();
            let b = chi_squared_expanded(&p, &q).unwrap();
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn pinsker_chain_hand_example() {
        let r = check_pinsker_chain(&[0.9, 0.1], &[0.5, 0.5]).unwrap();
        assert!(r.satisfied && !r.vacuous);
        assert!((r.lhs - 0.32).abs() < 1e-12);
        assert!((r.rhs - 0.64).abs() < 1e-12);
        let kl = 0.9 * (1.8f64).ln() + 0.1 * (0.2f64).ln();
        assert!((r.detail["kl"] - kl).abs() < 1e-12);
        assert!((r.detail["kl"] - 0.3681).abs() < 1e-4);
        let same = check_pinsker_chain(&[0.25, 0.75], &[0.25, 0.75]).unwrap();
        assert_eq!((same.lhs, same.detail["kl"], same.rhs), (0.0, 0.0, 0.0));
    }

    #[test]
    fn pinsker_chain_flags_infinite_divergence() {
        let r = check_pinsker_chain(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
        assert!(r.satisfied && r.vacuous);
        assert_eq!(r.detail["infinite"], 1.0);
    }

    #[test]
    fn report_slack_is_rhs_minus_lhs() {
        let r = check_pinsker_chain(&[0.6, 0.3, 0.1], &[0.2, 0.5, 0.3]).unwrap();
        assert!((r.slack - (r.rhs - r.lhs)).abs() <= 1e-12);
        assert_eq!(r.satisfied, r.lhs <= r.rhs + INEQUALITY_TOL);
    }

    #[test]
    fn identical_policies_give_zero_everywhere() {
        let mdp = random_mdp(4, 3, 0.9, 2).unwrap();
        let pi = random_policy(4, 3, 3).unwrap();
        for r in [lemma2_check(&mdp, &pi, &pi).unwrap(), lemma3_check(&mdp, &pi, &pi).unwrap()] {
            assert!(r.satisfied);
            assert_eq!((r.lhs, r.rhs), (0.0, 0.0));
        }
        let t = theorem1_bound(&mdp, &pi, &pi).unwrap();
        assert!(t.satisfied);
        assert_eq!(t.lhs, 0.0);
        assert!(t.rhs.abs() < 1e-12);
    }

    #[test]
    fn lemma_identities_on_random_instances() {
        for seed in 0..100 {
            let mdp = random_mdp(2 + (seed as usize % 8), 1 + (seed as usize % 5), 0.9, seed).unwrap();
            let (ns, na) = (mdp.n_states(), mdp.n_actions());
            let pt = random_policy(ns, na, seed + 500).unwrap();
            let pe = random_policy(ns, na, seed + 900).unwrap();
            let l2 = lemma2_check(&mdp, &pt, &pe).unwrap();
            let l3 = lemma3_check(&mdp, &pt, &pe).unwrap();
            assert!(l2.satisfied && l2.equality_error() < 1e-10, "{l2:?}");
            assert!(l3.satisfied && l3.equality_error() < 1e-10, "{l3:?}");
        }
    }

    #[test]
    fn deterministic_dynamics_lemmas_hold_on_masked_support() {
        for seed in 0..10 {
            let mdp = colliding_mdp(5, 4, 0.9, seed).unwrap();
            let pt = random_policy(5, 4, seed + 1).unwrap();
            let pe = random_policy(5, 4, seed + 2).unwrap();
            assert!(lemma2_check(&mdp, &pt, &pe).unwrap().equality_error() < 1e-10);
            assert!(lemma3_check(&mdp, &pt, &pe).unwrap().equality_error() < 1e-10);
            // deterministic policies leave parts of the inverse model undefined
            let dt = TabularPolicy::deterministic(&[0, 1, 2, 3, 0], 4).unwrap();
            let de = TabularPolicy::deterministic(&[1, 1, 2, 0, 3], 4).unwrap();
            let l2 = lemma2_check(&mdp, &dt, &de).unwrap();
            let l3 = lemma3_check(&mdp, &dt, &de).unwrap();
            assert!(l2.satisfied && l3.satisfied);
        }
    }

    #[test]
    fn injective_dynamics_zero_the_conditional_term() {
        for seed in 0..5 {
            let mdp = injective_mdp(5, 3, 0.9, seed).unwrap();
            let pt = random_policy(5, 3, seed + 10).unwrap();
            let pe = random_policy(5, 3, seed + 20).unwrap();
            let r = theorem1_bound(&mdp, &pt, &pe).unwrap();
            assert!(r.satisfied);
            assert!(r.detail["chi2_conditional"].abs() < 1e-15);
            let l3 = lemma3_check(&mdp, &pt, &pe).unwrap();
            assert!(l3.detail["kl_conditional"].abs() < 1e-15);
        }
    }

    #[test]
    fn theorem1_has_positive_slack_for_distinct_policies() {
        for seed in 0..50 {
            let mdp = random_mdp(5, 3, 0.95, seed).unwrap();
            let pt = random_policy(5, 3, seed + 100).unwrap();
            let pe = random_policy(5, 3, seed + 200).unwrap();
            let r = theorem1_bound(&mdp, &pt, &pe).unwrap();
            assert!(r.satisfied && r.slack > 0.0, "{r:?}");
        }
    }

    #[test]
    fn optimal_discriminator_closed_form() {
        let rho = [0.1, 0.2, 0.7];
        let d = lsgan_optimal_discriminator(&rho, &rho, -1.0, 1.0).unwrap();
        assert!(d.iter().all(|x| x.unwrap().abs() < 1e-15));
        let d = lsgan_optimal_discriminator(&[0.5, 0.5, 0.0], &[0.0, 0.5, 0.5], -1.0, 1.0).unwrap();
        assert_eq!(d[0], Some(1.0));
        assert_eq!(d[1], Some(0.0));
        assert_eq!(d[2], Some(-1.0));
        let d = lsgan_optimal_discriminator(&[1.0, 0.0], &[1.0, 0.0], -1.0, 1.0).unwrap();
        assert_eq!(d[1], None);
    }

    #[test]
    fn optimal_discriminator_beats_perturbations() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let pe = random_simplex(&mut rng, 12);
            let pt = random_simplex(&mut rng, 12);
            let d: Vec<f64> =
                lsgan_optimal_discriminator(&pe, &pt, -1.0, 1.0).unwrap().into_iter().map(Option::unwrap).collect();
            let best = lsgan_discriminator_objective(&pe, &pt, &d, -1.0, 1.0);
            for _ in 0..100 {
                let noisy: Vec<f64> = d.iter().map(|x| x + rng.random_range(-0.1..0.1)).collect();
                assert!(best <= lsgan_discriminator_objective(&pe, &pt, &noisy, -1.0, 1.0));
            }
        }
    }

    #[test]
    fn lsgan_identity_cases() {
        let rho = [0.25, 0.25, 0.5];
        let r = lsgan_chi2_identity(&rho, &rho).unwrap();
        assert!(r.satisfied);
        assert!(r.lhs.abs() < 1e-15 && r.rhs.abs() < 1e-15);
        let disjoint = lsgan_chi2_identity(&[0.5, 0.5, 0.0, 0.0], &[0.0, 0.0, 0.5, 0.5]).unwrap();
        assert!(disjoint.satisfied && disjoint.lhs.is_finite());
        assert!((disjoint.lhs - 2.0).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let pe = random_simplex(&mut rng, 20);
            let pt = random_simplex(&mut rng, 20);
            let r = lsgan_chi2_identity(&pe, &pt).unwrap();
            assert!(r.equality_error() < 1e-9);
        }
        assert!(lsgan_chi2_identity_with(&Kernels::default(), &rho, &rho, LsganLabels::MAIN).is_err());
    }

    #[test]
    fn small_sweep_is_clean_and_mutation_is_caught() {
        let cfg = SweepConfig { instances: 60, simplex_pairs: 60, ..Default::default() };
        let good = certify(&cfg).unwrap();
        assert_eq!(good.total_violations(), 0, "{good:?}");
        assert!(good.lemma2.max_equality_error < 1e-10);
        let bad = certify_with(&Kernels::negated_chi2(), &cfg).unwrap();
        assert!(bad.pinsker.violations > 0);
        assert!(bad.theorem1.violations > 0);
    }
}
