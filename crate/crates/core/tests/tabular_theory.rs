use proptest::prelude::*;
use rand::Rng;

use seqpick::divergence::*;
use seqpick::seed;
use seqpick::tabular::*;

fn sample(weights: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

/// Discounted return of `episodes` rollouts truncated at `horizon`: (mean, standard error).
fn monte_carlo_return(mdp: &TabularMdp, pi: &TabularPolicy, episodes: usize, horizon: usize, seed: u64) -> (f64, f64) {
    let mut rng = seed::rng(seed, 0);
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..episodes {
        let mut s = sample(mdp.initial(), &mut rng);
        let (mut g, mut discount) = (0.0, 1.0);
        for _ in 0..horizon {
            let a = sample(pi.row(s), &mut rng);
            g += discount * mdp.r(s, a);
            discount *= mdp.gamma();
            s = sample(mdp.next_row(s, a), &mut rng);
        }
        sum += g;
        sum_sq += g * g;
    }
    let n = episodes as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean) * n / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[test]
fn expected_return_matches_monte_carlo_rollouts() {
    for (k, &(ns, na, gamma)) in [(4, 2, 0.9), (6, 3, 0.5)].iter().enumerate() {
        let mdp = random_mdp(ns, na, gamma, 40 + k as u64).unwrap();
        let pi = random_policy(ns, na, 60 + k as u64).unwrap();
        let exact = expected_return(&mdp, &pi).unwrap();
        let (mean, se) = monte_carlo_return(&mdp, &pi, 100_000, 500, 7 + k as u64);
        assert!((mean - exact).abs() < 3.0 * se, "J = {exact}, MC = {mean} +- {se}");
    }
}

fn power_iteration(mdp: &TabularMdp, pi: &TabularPolicy, horizon: usize) -> Vec<f64> {
    let n = mdp.n_states();
    let mut p_t = mdp.initial().to_vec();
    let mut d = vec![0.0; n];
    let mut w = 1.0 - mdp.gamma();
    for _ in 0..=horizon {
        for s in 0..n {
            d[s] += w * p_t[s];
        }
        let mut next = vec![0.0; n];
        for s in 0..n {
            for a in 0..mdp.n_actions() {
                for (t, &p) in mdp.next_row(s, a).iter().enumerate() {
                    next[t] += p_t[s] * pi.prob(s, a) * p;
                }
            }
        }
        p_t = next;
        w *= mdp.gamma();
    }
    d
}

fn instance(ns: usize, na: usize, g: usize, seed: u64) -> (TabularMdp, TabularPolicy, TabularPolicy) {
    let gamma = [0.5, 0.9, 0.95][g];
    let mdp = random_mdp(ns, na, gamma, seed).unwrap();
    let theta = random_policy(ns, na, seed ^ 0xA5A5).unwrap();
    let expert = random_policy(ns, na, seed ^ 0x5A5A).unwrap();
    (mdp, theta, expert)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn visitation_invariants(ns in 1usize..8, na in 1usize..5, g in 0usize..3, seed in any::<u64>()) {
        let (mdp, pi, _) = instance(ns, na, g, seed);
        let v = visitation_set(&mdp, &pi).unwrap();
        for dist in [&v.d, &v.mu, &v.rho_ss, &v.rho_sas] {
            prop_assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(dist.iter().all(|&x| x >= 0.0));
        }
        let oracle = power_iteration(&mdp, &pi, 200);
        // the truncated tail carries gamma^201 of the mass
        let tail = mdp.gamma().powi(201);
        for (a, b) in v.d.iter().zip(&oracle) {
            prop_assert!((a - b).abs() < 1e-8 + tail);
        }
        for s in 0..ns {
            for a in 0..na {
                prop_assert!((v.mu_at(s, a) - v.d[s] * pi.prob(s, a)).abs() < 1e-15);
                for t in 0..ns {
                    prop_assert!((v.rho_sas_at(s, a, t) - v.mu_at(s, a) * mdp.p(s, a, t)).abs() < 1e-15);
                }
            }
            for t in 0..ns {
                let marginal: f64 = (0..na).map(|a| v.rho_sas_at(s, a, t)).sum();
                prop_assert!((marginal - v.rho_ss_at(s, t)).abs() < 1e-10);
                match v.inverse_row(s, t) {
                    Some(row) => prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9),
                    None => prop_assert_eq!(v.rho_ss_at(s, t), 0.0),
                }
            }
        }
    }

    #[test]
    fn return_formulas_agree(ns in 1usize..8, na in 1usize..5, g in 0usize..3, seed in any::<u64>()) {
        let (mdp, pi, _) = instance(ns, na, g, seed);
        let a = expected_return_occupancy(&mdp, &pi).unwrap();
        let b = expected_return_bellman(&mdp, &pi).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn random_instances_are_reproducible(ns in 1usize..6, na in 1usize..4, seed in any::<u64>()) {
        let a = serde_json::to_string(&random_mdp(ns, na, 0.9, seed).unwrap()).unwrap();
        let b = serde_json::to_string(&random_mdp(ns, na, 0.9, seed).unwrap()).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn pinsker_chain_on_simplex_pairs(n in 1usize..21, seed in any::<u64>()) {
        let mut rng = seed::rng(seed, 0);
        let p = random_simplex(&mut rng, n);
        let q = random_simplex(&mut rng, n);
        let r = check_pinsker_chain(&p, &q).unwrap();
        prop_assert!(r.satisfied);
        let tv = total_variation(&p, &q).unwrap();
        let kl = kl_divergence(&p, &q).unwrap();
        let chi2 = chi_squared(&p, &q).unwrap();
        prop_assert!((0.0..=1.0).contains(&tv));
        prop_assert!(2.0 * tv * tv <= kl + 1e-12 && kl <= chi2 + 1e-12);
        prop_assert!((chi2 - chi_squared_expanded(&p, &q).unwrap()).abs() < 1e-10 * chi2.max(1.0));
    }

    #[test]
    fn lemma_equalities_and_bound(ns in 1usize..11, na in 1usize..6, g in 0usize..3, seed in any::<u64>()) {
        let (mdp, theta, expert) = instance(ns, na, g, seed);
        let l2 = lemma2_check(&mdp, &theta, &expert).unwrap();
        let l3 = lemma3_check(&mdp, &theta, &expert).unwrap();
        prop_assert!(l2.satisfied && l2.equality_error() < 1e-10);
        prop_assert!(l3.satisfied && l3.equality_error() < 1e-10);
        let t1 = theorem1_bound(&mdp, &theta, &expert).unwrap();
        prop_assert!(t1.satisfied);
        prop_assert!((t1.slack - (t1.rhs - t1.lhs)).abs() <= 1e-12 * t1.rhs.abs().max(1.0));
        let same = theorem1_bound(&mdp, &expert, &expert).unwrap();
        prop_assert!(same.lhs.abs() < 1e-12 && same.rhs.abs() < 1e-12);
    }

    #[test]
    fn lsgan_identity_and_optimality(n in 1usize..21, seed in any::<u64>()) {
        let mut rng = seed::rng(seed, 1);
        let e = random_simplex(&mut rng, n);
        let t = random_simplex(&mut rng, n);
        let id = lsgan_chi2_identity(&e, &t).unwrap();
        prop_assert!(id.satisfied && id.equality_error() < 1e-9);
        let d: Vec<f64> = lsgan_optimal_discriminator(&e, &t, -1.0, 1.0).unwrap().into_iter().map(Option::unwrap).collect();
        let best = lsgan_discriminator_objective(&e, &t, &d, -1.0, 1.0);
        for _ in 0..20 {
            let probe: Vec<f64> = d.iter().map(|x| x + rng.random_range(-0.1..0.1)).collect();
            prop_assert!(best <= lsgan_discriminator_objective(&e, &t, &probe, -1.0, 1.0) + 1e-15);
        }
    }
}

#[test]
fn default_certification_sweep_is_clean() {
    let report = certify(&SweepConfig::default()).unwrap();
    assert_eq!(report.instances, 1000);
    assert_eq!(report.total_violations(), 0);
    assert!(report.lemma2.max_equality_error < 1e-10);
    assert!(report.lemma3.max_equality_error < 1e-10);
    assert!(report.lsgan_chi2.max_equality_error < 1e-9);
    let broken = certify_with(&Kernels::negated_chi2(), &SweepConfig { instances: 20, simplex_pairs: 20, ..Default::default() }).unwrap();
    assert!(broken.total_violations() > 0);
}
