use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use stochadj::baselines::{compute_returns, Beta, KeyExtractor, ReturnMode, ReturnSpec, SingleKey, StepKey};
use stochadj::oracle::{enumerate, exact_optimal_baselines, BetaTable, EnumerationReport};
use stochadj::problems::{default_piecewise_scenario, BanditProblem, CoinFlipKeys, CoinFlipProblem};
use stochadj::Problem64;

fn exact(p: &Problem64) -> EnumerationReport<f64> {
    enumerate(p.model.as_ref(), &p.loss, &p.theta0, &p.x0).unwrap()
}

fn table(values: &[Vec<f64>], per_parameter: bool) -> BetaTable<f64> {
    let entries = values
        .iter()
        .enumerate()
        .map(|(k, v)| (k, if per_parameter { Beta::PerParameter(v.clone()) } else { Beta::Scalar(v[0]) }))
        .collect::<BTreeMap<_, _>>();
    BetaTable { entries, floored: BTreeSet::new() }
}

fn assert_unbiased(rep: &EnumerationReport<f64>, t: &BetaTable<f64>, keys: &dyn KeyExtractor<f64>) -> Result<(), TestCaseError> {
    let b = rep.baselined(t, keys).unwrap();
    for (a, e) in b.mean.iter().zip(&rep.expected_gradient) {
        prop_assert!((a - e).abs() <= 1e-12, "{a} vs {e}");
    }
    Ok(())
}

fn beta_rows(keys: usize, m: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-5.0f64..5.0, m), keys)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn coin_flip_baselines_add_no_bias(rows in beta_rows(3, 2), t2 in 0.0f64..2.0, per in any::<bool>()) {
        let rep = exact(&CoinFlipProblem::default().problem(vec![1.0, t2]));
        assert_unbiased(&rep, &table(&rows, per), &CoinFlipKeys)?;
    }

    #[test]
    fn bandit_baselines_add_no_bias(rows in beta_rows(1, 3), theta in prop::collection::vec(-3.0f64..3.0, 3), per in any::<bool>()) {
        let rep = exact(&BanditProblem::default().problem(theta));
        assert_unbiased(&rep, &table(&rows, per), &SingleKey)?;
    }

    #[test]
    fn step_keyed_baselines_add_no_bias(rows in beta_rows(8, 3), t0 in 1.5f64..2.5) {
        let pw = default_piecewise_scenario::<f64>();
        let rep = exact(&pw.problem(0.0, vec![t0, 0.1, 0.3]));
        assert_unbiased(&rep, &table(&rows, false), &StepKey(8))?;
        assert_unbiased(&rep, &table(&rows, true), &StepKey(8))?;
    }

    #[test]
    fn enumeration_mass_is_one(t in prop::collection::vec(-3.0f64..3.0, 3)) {
        let coin = exact(&CoinFlipProblem::default().problem(t[..2].to_vec()));
        let bandit = exact(&BanditProblem::default().problem(t.clone()));
        let pw = default_piecewise_scenario::<f64>();
        let piece = exact(&pw.problem(0.0, vec![2.0 + 0.1 * t[0], 0.1, 0.3 + 0.05 * t[1]]));
        for rep in [coin, bandit, piece] {
            prop_assert!((rep.probability_mass() - 1.0).abs() <= 1e-12);
            prop_assert!(rep.paths.iter().all(|p| p.probability >= 0.0));
        }
    }

    #[test]
    fn optimal_scalar_table_beats_any_other(rows in beta_rows(3, 1), t2 in 0.0f64..2.0) {
        let rep = exact(&CoinFlipProblem::default().problem(vec![1.0, t2]));
        let opt = exact_optimal_baselines(&rep, &CoinFlipKeys).unwrap();
        let best = rep.baselined(&opt.scalar, &CoinFlipKeys).unwrap().variance;
        let other = rep.baselined(&table(&rows, false), &CoinFlipKeys).unwrap().variance;
        prop_assert!(best <= other + 1e-12);
    }

    /// Independent GAE oracle: `V_i + Σ_l (γκ)^l δ_{i+l}` with
    /// `δ_i = f_i + γV_{i+1} − V_i` and `V_{n+1} = 0`.
    #[test]
    fn gae_matches_advantage_sum(
        pairs in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 1..12),
        gamma in 0.0f64..=1.0,
        kappa in 0.0f64..=1.0,
    ) {
        let (f, v): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let n = f.len();
        let next = |i: usize| if i + 1 < n { v[i + 1] } else { 0.0 };
        let delta: Vec<f64> = (0..n).map(|i| f[i] + gamma * next(i) - v[i]).collect();
        let want: Vec<f64> = (0..n)
            .map(|i| v[i] + (i..n).map(|j| (gamma * kappa).powi((j - i) as i32) * delta[j]).sum::<f64>())
            .collect();
        let got = compute_returns(&f, Some(&v), &ReturnSpec { gamma, kappa, mode: ReturnMode::Gae }).unwrap();
        for (a, b) in got.iter().zip(&want) {
            prop_assert!((a - b).abs() <= 1e-10);
        }

        // κ = 1 is discounted, κ = 0 is bootstrap, γ = 1 discounted is raw
        let ret = |gamma, kappa, mode| compute_returns(&f, Some(&v), &ReturnSpec { gamma, kappa, mode }).unwrap();
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-10);
        prop_assert!(close(&ret(gamma, 1.0, ReturnMode::Gae), &ret(gamma, 1.0, ReturnMode::Discounted)));
        prop_assert!(close(&ret(gamma, 0.0, ReturnMode::Gae), &ret(gamma, 0.0, ReturnMode::Bootstrap)));
        prop_assert!(close(&ret(1.0, kappa, ReturnMode::Discounted), &ret(gamma, kappa, ReturnMode::Raw)));
    }
}

#[test]
fn optimal_baseline_wins_over_the_coin_flip_grid() {
    for j in 0..=8 {
        let rep = exact(&CoinFlipProblem::default().problem(vec![1.0, 0.25 * j as f64]));
        let opt = exact_optimal_baselines(&rep, &CoinFlipKeys).unwrap();
        let v = |t: &BetaTable<f64>| rep.baselined(t, &CoinFlipKeys).unwrap().variance;
        let best = v(&opt.scalar);
        assert!(best <= v(&opt.per_parameter) + 1e-12);
        assert!(best <= v(&opt.value) + 1e-12);
        assert!(best <= v(&opt.q_function) + 1e-12);
        assert!(best <= rep.variance + 1e-12);
        assert!(v(&opt.value) <= rep.variance);
    }
}

fn perturbations_increase_variance(rep: &EnumerationReport<f64>, t: &BetaTable<f64>, keys: &dyn KeyExtractor<f64>, m: usize) {
    let base = rep.baselined(t, keys).unwrap().variance;
    for (&k, beta) in &t.entries {
        let comps = match beta {
            Beta::Scalar(_) => 1,
            Beta::PerParameter(_) => m,
        };
        for c in 0..comps {
            for delta in [-0.01, 0.01] {
                let moved = rep.baselined(&t.perturbed(k, c, delta), keys).unwrap().variance;
                assert!(moved > base, "key {k} comp {c} δ {delta}: {moved} vs {base}");
            }
        }
    }
}

#[test]
fn optimal_tables_are_strict_minima() {
    let rep = exact(&CoinFlipProblem::default().problem(vec![1.0, 1.0]));
    let opt = exact_optimal_baselines(&rep, &CoinFlipKeys).unwrap();
    perturbations_increase_variance(&rep, &opt.scalar, &CoinFlipKeys, 2);

    let rep = exact(&BanditProblem::default().problem(vec![3.0, 2.0, 1.0]));
    let opt = exact_optimal_baselines(&rep, &SingleKey).unwrap();
    perturbations_increase_variance(&rep, &opt.scalar, &SingleKey, 3);
    perturbations_increase_variance(&rep, &opt.per_parameter, &SingleKey, 3);
}

#[test]
fn bandit_variance_ladder() {
    let rep = exact(&BanditProblem::default().problem(vec![3.0, 2.0, 1.0]));
    let opt = exact_optimal_baselines(&rep, &SingleKey).unwrap();
    let v = |t: &BetaTable<f64>| rep.baselined(t, &SingleKey).unwrap().variance;
    let (value, scalar, per) = (v(&opt.value), v(&opt.scalar), v(&opt.per_parameter));
    assert!(per < scalar && scalar < value && value < rep.variance);
}
