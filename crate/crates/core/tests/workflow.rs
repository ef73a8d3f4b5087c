mod common;

use common::{dataset, mean};
use rand::Rng;
use rand_distr::StandardNormal;
use rollcar::data::Dataset;
use rollcar::diagnostics::{deviance_summaries, gelman_rubin, hpd_interval, mc_standard_error, summarize};
use rollcar::graph::{build_type2_weights, ClusterUnit};
use rollcar::models::{Closeness, Hyperparameters, ModelSpec, SlopePrior};
use rollcar::rng::stream;
use rollcar::sampler::{fit, read_chain_csv, run_chains, McmcConfig, Monitor, Sampler};
use rollcar::simstudy::{simulate_replicate, SimScenario};
use rollcar::Error;

fn quick(seed: u64) -> McmcConfig {
    McmcConfig { n_chains: 2, n_iter: 400, burn_in: 200, seed, ..McmcConfig::default() }
}

fn scenario_data(preset: &str, seed: u64) -> Dataset {
    simulate_replicate(&SimScenario::preset(preset).unwrap(), seed, 0).unwrap().0
}

#[test]
fn same_seed_gives_identical_draws() {
    let d = scenario_data("a", 1);
    let spec = ModelSpec::car();
    let a = fit(&d, &spec, &quick(9)).unwrap();
    let b = fit(&d, &spec, &quick(9)).unwrap();
    assert_eq!(a, b);
    let c = fit(&d, &spec, &quick(10)).unwrap();
    assert_ne!(a.chains[0].draws, c.chains[0].draws);
}

#[test]
fn draws_round_trip_through_csv() {
    let d = scenario_data("a", 2);
    let s = fit(&d, &ModelSpec::hlm(), &quick(3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    s.write_draws(dir.path()).unwrap();
    for k in 0..2 {
        let (names, cols) = read_chain_csv(&dir.path().join(format!("chain_{k}.csv"))).unwrap();
        assert_eq!(names, s.quantities);
        assert_eq!(cols, s.chains[k].draws);
    }
    assert!(dir.path().join("manifest.json").exists());
}

#[test]
fn summaries_cover_session_effects_and_patterns() {
    let d = scenario_data("d", 4);
    let car = fit(&d, &ModelSpec::car().with_pmm(), &quick(1)).unwrap();
    let sum = summarize(&car, &d, 0.95).unwrap();
    let gammas = sum.quantities.iter().filter(|q| q.quantity.starts_with("gamma[")).count();
    assert_eq!(gammas, d.n_sessions());
    let p = sum.patterns.as_ref().unwrap();
    assert_eq!(p.n_short + p.n_long, d.n_clients());
    assert!(sum.get("Delta0").unwrap().hpd_lo < sum.get("Delta0").unwrap().hpd_hi);
    assert!(sum.notes.iter().any(|n| n.contains("parameterization")));
    assert_eq!(summarize(&car, &d, 0.95).unwrap(), sum);

    let lgm = fit(&d, &ModelSpec::lgm(), &quick(1)).unwrap();
    let sum = summarize(&lgm, &d, 0.95).unwrap();
    assert!(sum.patterns.is_none());
    assert!(sum.quantities.iter().all(|q| !q.quantity.starts_with("gamma[")));
}

#[test]
fn dbar_is_mean_of_deviance_draws() {
    let d = scenario_data("a", 5);
    let s = fit(&d, &ModelSpec::lgm(), &quick(2)).unwrap();
    let dev = deviance_summaries(&s, &d).unwrap();
    let draws = s.pooled("deviance").unwrap();
    assert_eq!(dev.dbar, draws.iter().sum::<f64>() / draws.len() as f64);
    assert_eq!(dev.dic, dev.dbar + dev.pd);
}

#[test]
fn effective_parameters_of_linear_model() {
    let d = scenario_data("a", 6);
    let mut spec = ModelSpec::lgm().with_hyper(Hyperparameters {
        slope_prior: SlopePrior::FixedVariance(100.0),
        ..Hyperparameters::choice7()
    });
    spec.restrict.client_effects = false;
    spec.restrict.fixed_sigma2_eps = Some(2.0);
    let s = fit(&d, &spec, &McmcConfig { n_iter: 3000, burn_in: 500, ..quick(7) }).unwrap();
    let pd = deviance_summaries(&s, &d).unwrap().pd;
    assert!((pd - 2.0).abs() < 0.4, "pD {pd}");
}

#[test]
fn isolated_units_keep_zero_structured_effect() {
    // Client c is alone in session 3 and attends nothing else in group g.
    let d = dataset(&[
        ("a", "g", 1, 0.0, Some(15.0)),
        ("a", "g", 2, 0.5, Some(14.0)),
        ("b", "g", 1, 0.0, Some(16.0)),
        ("b", "g", 2, 0.5, Some(15.5)),
        ("c", "g", 3, 0.0, Some(13.0)),
        ("d", "h", 1, 0.0, Some(12.0)),
        ("d", "h", 2, 0.5, Some(12.5)),
    ]);
    let g = build_type2_weights(&d, ClusterUnit::Session).unwrap();
    let iso = d.sessions.iter().position(|s| s.id == "g-3").unwrap();
    assert!(g.is_isolated(iso));
    let spec = ModelSpec::car().with_closeness(Closeness::Type2);
    let sampler = Sampler::new(&d, &spec, Some(&g)).unwrap();
    let mut rng = stream(1, 1, 0);
    let mut state = sampler.initialize_state(1, true, &mut rng).unwrap();
    for _ in 0..200 {
        sampler.gibbs_sweep(&mut state, &mut rng, true).unwrap();
        assert_eq!(state.u[iso], 0.0);
        assert!(state.delta.is_finite() && state.delta > 0.0);
    }
}

#[test]
fn slope_needs_two_time_points() {
    let d = dataset(&[("a", "g", 1, 0.0, Some(1.0)), ("b", "g", 1, 0.0, Some(2.0))]);
    let err = fit(&d, &ModelSpec::lgm(), &quick(1)).unwrap_err();
    assert!(matches!(err, Error::Initialization(_)));
}

#[test]
fn pattern_mixture_requires_patterns() {
    let d = dataset(&[("a", "g", 1, 0.0, Some(1.0)), ("a", "g", 2, 0.5, Some(2.0))]);
    assert!(matches!(fit(&d, &ModelSpec::lgm().with_pmm(), &quick(1)), Err(Error::Config(_))));
}

#[test]
fn car_requires_graph() {
    let d = scenario_data("a", 1);
    let spec = ModelSpec::car();
    assert!(matches!(run_chains(&d, None, &spec, &quick(1)), Err(Error::Config(_))));
}

#[test]
fn invalid_mcmc_settings_are_rejected() {
    let d = scenario_data("a", 1);
    for cfg in [
        McmcConfig { n_chains: 0, ..quick(1) },
        McmcConfig { burn_in: 400, ..quick(1) },
        McmcConfig { thin: 0, ..quick(1) },
        McmcConfig { n_iter: 201, ..quick(1) },
    ] {
        assert!(matches!(fit(&d, &ModelSpec::lgm(), &cfg), Err(Error::Config(_))));
    }
}

#[test]
fn thinning_keeps_every_kth_iteration() {
    let d = scenario_data("a", 1);
    let s = fit(&d, &ModelSpec::lgm(), &McmcConfig { thin: 3, ..quick(1) }).unwrap();
    assert_eq!(s.chains[0].iterations[..3], [200, 203, 206]);
    assert_eq!(s.chains[0].iterations.len(), 67);
}

#[test]
fn recentering_is_exact_over_a_run() {
    let d = scenario_data("a", 8);
    let s = fit(&d, &ModelSpec::car(), &McmcConfig { check_recentering: true, ..quick(2) }).unwrap();
    assert!(s.max_recentering_shift() <= 1e-10, "{}", s.max_recentering_shift());
}

#[test]
fn masked_cells_are_recovered() {
    let mut sc = SimScenario::preset("a").unwrap();
    sc.mask_every_other = true;
    let (d, report) = simulate_replicate(&sc, 3, 0).unwrap();
    let cfg = McmcConfig { monitor: vec![Monitor::Fixed, Monitor::Imputed], ..quick(4) };
    let s = fit(&d, &ModelSpec::hlm(), &cfg).unwrap();
    let ypred = s.quantities.iter().filter(|q| q.starts_with("ypred[")).count();
    assert_eq!(ypred, report.n_missing);
}

#[test]
fn psrf_of_independent_normal_streams() {
    let mut a = stream(1, 5, 0);
    let mut b = stream(1, 5, 1);
    let x: Vec<f64> = (0..10_000).map(|_| a.sample(StandardNormal)).collect();
    let y: Vec<f64> = (0..10_000).map(|_| b.sample(StandardNormal)).collect();
    let r = gelman_rubin(&[&x, &y]).unwrap();
    assert!(r > 0.999 && r <= 1.05, "{r}");
}

#[test]
fn hpd_of_normal_draws() {
    let mut rng = stream(2, 5, 0);
    let x: Vec<f64> = (0..10_000).map(|_| rng.sample(StandardNormal)).collect();
    let (lo, hi) = hpd_interval(&x, 0.95).unwrap();
    assert!((lo + 1.96).abs() < 0.1 && (hi - 1.96).abs() < 0.1, "({lo}, {hi})");
    let seq: Vec<f64> = (1..=100).map(f64::from).collect();
    assert_eq!(hpd_interval(&seq, 0.95).unwrap(), (1.0, 95.0));
}

#[test]
fn mcse_of_replicated_means() {
    let mut rng = stream(3, 5, 0);
    let means: Vec<f64> = (0..100)
        .map(|_| {
            let x: Vec<f64> = (0..25).map(|_| rng.sample(StandardNormal)).collect();
            mean(&x)
        })
        .collect();
    let m = mc_standard_error(&means).unwrap();
    assert!((m - 0.02).abs() < 0.005, "{m}");
    assert_eq!(mc_standard_error(&[1.0, 1.0, 1.0]).unwrap(), 0.0);
}
