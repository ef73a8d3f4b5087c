mod common;

use common::{dataset, invert, ks_against_grid, mean, var};
use rollcar::data::{Dataset, Record};
use rollcar::graph::{build_type1_weights, car_conditional, ClusterUnit, SessionGraph};
use rollcar::models::{GammaPrior, Hyperparameters, ModelSpec, SlopePrior};
use rollcar::rng::stream;
use rollcar::sampler::{draw_precision, run_chains, McmcConfig, Sampler};

fn small_panel() -> Dataset {
    dataset(&[
        ("a", "g", 1, 0.0, Some(15.2)),
        ("a", "g", 2, 0.5, Some(14.1)),
        ("a", "g", 3, 1.0, Some(14.4)),
        ("b", "g", 2, 0.0, Some(16.0)),
        ("b", "g", 3, 0.5, Some(15.1)),
        ("c", "g", 1, 0.0, Some(13.7)),
        ("c", "g", 3, 1.0, Some(13.0)),
    ])
}

const DRAWS: usize = 5000;

#[test]
fn client_intercept_conditional_matches_grid() {
    let d = small_panel();
    let spec = ModelSpec::lgm();
    let s = Sampler::new(&d, &spec, None).unwrap();
    let mut rng = stream(11, 1, 0);
    let mut base = s.initialize_state(0, false, &mut rng).unwrap();
    base.beta0 = 14.8;
    base.beta1 = -0.6;
    base.b1 = vec![0.2, -0.1, 0.05];
    base.sigma2_eps = 0.7;
    base.sigma2_0 = 0.4;
    let draws: Vec<f64> = (0..DRAWS)
        .map(|_| {
            let mut st = base.clone();
            s.update_clients(&mut st, &mut rng);
            st.b0[0]
        })
        .collect();
    let obs = [(0.0, 15.2), (0.5, 14.1), (1.0, 14.4)];
    let ld = |x: f64| {
        let prior = -x * x / (2.0 * base.sigma2_0);
        let lik: f64 = obs
            .iter()
            .map(|&(t, y)| -(y - base.beta0 - base.beta1 * t - x - base.b1[0] * t).powi(2) / (2.0 * base.sigma2_eps))
            .sum();
        prior + lik
    };
    let ks = ks_against_grid(&draws, ld, -6.0, 6.0);
    assert!(ks < 0.05, "KS distance {ks}");
}

#[test]
fn structured_effect_conditional_matches_joint_car() {
    let d = small_panel();
    let spec = ModelSpec::car();
    let graph = build_type1_weights(&d, ClusterUnit::Session).unwrap();
    let s = Sampler::new(&d, &spec, Some(&graph)).unwrap();
    let mut rng = stream(12, 1, 0);
    let mut base = s.initialize_state(0, false, &mut rng).unwrap();
    base.beta0 = 15.0;
    base.beta1 = -0.5;
    base.b0 = vec![0.1, 0.5, -0.6];
    base.b1 = vec![0.0; 3];
    base.u = vec![0.0, 0.3, -0.2];
    base.nu = vec![0.1, 0.0, -0.1];
    base.sigma2_eps = 0.5;
    base.delta = 0.8;
    let draws: Vec<f64> = (0..DRAWS)
        .map(|_| {
            let mut st = base.clone();
            s.update_structured(&mut st, &mut rng);
            st.u[0]
        })
        .collect();
    // Session 1 is attended by a (t=0) and c (t=0).
    let cluster0 = [(0usize, 0.0, 15.2), (2usize, 0.0, 13.7)];
    let ld = |x: f64| {
        let mut u = base.u.clone();
        u[0] = x;
        let prior = -graph.pairwise_energy(&u) / (2.0 * base.delta);
        let lik: f64 = cluster0
            .iter()
            .map(|&(i, t, y)| {
                let mu = base.beta0 + base.beta1 * t + base.b0[i] + x + base.nu[0];
                -(y - mu).powi(2) / (2.0 * base.sigma2_eps)
            })
            .sum();
        prior + lik
    };
    let ks = ks_against_grid(&draws, ld, -6.0, 6.0);
    assert!(ks < 0.05, "KS distance {ks}");
}

#[test]
fn unstructured_effect_conditional_matches_grid() {
    let d = small_panel();
    let spec = ModelSpec::hlm();
    let s = Sampler::new(&d, &spec, None).unwrap();
    let mut rng = stream(13, 1, 0);
    let mut base = s.initialize_state(0, false, &mut rng).unwrap();
    base.beta0 = 15.0;
    base.beta1 = -0.5;
    base.b0 = vec![0.1, 0.5, -0.6];
    base.b1 = vec![0.0; 3];
    base.sigma2_eps = 0.9;
    base.sigma2_nu = 0.3;
    let draws: Vec<f64> = (0..DRAWS)
        .map(|_| {
            let mut st = base.clone();
            s.update_unstructured(&mut st, &mut rng);
            st.nu[0]
        })
        .collect();
    let cluster0 = [(0usize, 15.2), (2usize, 13.7)];
    let ld = |x: f64| {
        let lik: f64 = cluster0
            .iter()
            .map(|&(i, y)| -(y - base.beta0 - base.b0[i] - x).powi(2) / (2.0 * base.sigma2_eps))
            .sum();
        lik - x * x / (2.0 * base.sigma2_nu)
    };
    let ks = ks_against_grid(&draws, ld, -5.0, 5.0);
    assert!(ks < 0.05, "KS distance {ks}");
}

#[test]
fn residual_precision_conditional_matches_grid() {
    let d = small_panel();
    let spec = ModelSpec::lgm();
    let s = Sampler::new(&d, &spec, None).unwrap();
    let mut rng = stream(14, 1, 0);
    let mut base = s.initialize_state(0, false, &mut rng).unwrap();
    base.beta0 = 15.0;
    base.beta1 = -1.0;
    base.b0 = vec![0.0; 3];
    base.b1 = vec![0.0; 3];
    let ys: [(f64, f64); 7] = [
        (0.0, 15.2),
        (0.5, 14.1),
        (1.0, 14.4),
        (0.0, 16.0),
        (0.5, 15.1),
        (0.0, 13.7),
        (1.0, 13.0),
    ];
    let ss: f64 = ys.iter().map(|&(t, y)| (y - 15.0 + t).powi(2)).sum();
    let draws: Vec<f64> = (0..DRAWS)
        .map(|_| {
            let mut st = base.clone();
            s.update_variances(&mut st, &mut rng).unwrap();
            1.0 / st.sigma2_eps
        })
        .collect();
    let h = Hyperparameters::choice7();
    let ld = |tau: f64| {
        if tau <= 0.0 {
            return f64::NEG_INFINITY;
        }
        (h.psi_y0 - 1.0) * tau.ln() - h.psi_y1 * tau + 3.5 * tau.ln() - tau * ss / 2.0
    };
    let ks = ks_against_grid(&draws, ld, 0.0, 20.0);
    assert!(ks < 0.05, "KS distance {ks}");
}

#[test]
fn pattern_probability_conditional_matches_grid() {
    let d = small_panel().derive_pattern_indicators(3);
    let spec = ModelSpec::lgm().with_pmm();
    let s = Sampler::new(&d, &spec, None).unwrap();
    let mut rng = stream(15, 1, 0);
    let base = s.initialize_state(0, false, &mut rng).unwrap();
    let draws: Vec<f64> = (0..DRAWS)
        .map(|_| {
            let mut st = base.clone();
            s.update_pi(&mut st, &mut rng);
            st.pi
        })
        .collect();
    // Clients b and c attended 2 sessions (< 3): two short-stay, one long.
    let ld = |p: f64| {
        if p <= 0.0 || p >= 1.0 {
            return f64::NEG_INFINITY;
        }
        2.0 * p.ln() + (1.0 - p).ln()
    };
    let ks = ks_against_grid(&draws, ld, 0.0, 1.0);
    assert!(ks < 0.05, "KS distance {ks}");
}

#[test]
fn prior_only_precision_mean() {
    let mut rng = stream(16, 1, 0);
    let prior = GammaPrior { shape: 2.0, rate: 3.0 };
    let draws: Vec<f64> = (0..50_000).map(|_| draw_precision(&mut rng, prior, 0, 0.0)).collect();
    let m = mean(&draws);
    assert!((m / (2.0 / 3.0) - 1.0).abs() < 0.05, "mean {m}");
}

fn linear_dataset(seed: u64) -> Dataset {
    use rand::Rng;
    let mut rng = stream(seed, 2, 0);
    let mut records = Vec::new();
    for c in 0..30 {
        let x: f64 = rng.random_range(-2.0..2.0);
        for k in 0..4u32 {
            let t = f64::from(k) * 0.5;
            let noise: f64 = rng.random_range(-1.0..1.0);
            records.push(Record {
                client_id: format!("c{c:02}"),
                session_id: format!("s{}", k + 1),
                group_id: "g".into(),
                session_order: k + 1,
                module_index: None,
                time_weeks: t,
                y: Some(10.0 - 0.8 * t + 0.3 * x + noise),
                covariates: vec![x],
            });
        }
    }
    Dataset::from_records(records, vec!["age".into()]).unwrap()
}

#[test]
fn fixed_variance_linear_model_matches_conjugate_posterior() {
    let data = linear_dataset(3);
    let sigma2 = 0.5;
    let slope_var = 4.0;
    let mut spec = ModelSpec::lgm().with_hyper(Hyperparameters {
        slope_prior: SlopePrior::FixedVariance(slope_var),
        ..Hyperparameters::choice7()
    });
    spec.restrict.client_effects = false;
    spec.restrict.fixed_sigma2_eps = Some(sigma2);

    // Closed form: precision X'X/σ² + diag(prior precisions).
    let prior_prec = [1e-8, 1.0 / slope_var, 1.0 / spec.hyper.sigma2_beta];
    let mut a = vec![vec![0.0; 3]; 3];
    let mut rhs = [0.0; 3];
    for o in &data.observations {
        let x = [1.0, o.time_weeks, data.clients[o.client].covariates[0]];
        for r in 0..3 {
            rhs[r] += x[r] * o.outcome.unwrap() / sigma2;
            for c in 0..3 {
                a[r][c] += x[r] * x[c] / sigma2;
            }
        }
    }
    for k in 0..3 {
        a[k][k] += prior_prec[k];
    }
    let cov = invert(&a);
    let mu: Vec<f64> = (0..3).map(|r| (0..3).map(|c| cov[r][c] * rhs[c]).sum()).collect();

    let config = McmcConfig { n_chains: 2, n_iter: 4000, burn_in: 100, seed: 5, ..McmcConfig::default() };
    let samples = run_chains(&data, None, &spec, &config).unwrap();
    let cols: Vec<Vec<f64>> = ["beta0", "beta1", "beta_age"].iter().map(|q| samples.pooled(q).unwrap()).collect();
    let n = cols[0].len() as f64;
    for r in 0..3 {
        let m = mean(&cols[r]);
        let mcse = (cov[r][r] / n).sqrt();
        assert!((m - mu[r]).abs() < 3.0 * mcse, "mean {r}: {m} vs {}", mu[r]);
        for c in 0..=r {
            let mr = mean(&cols[r]);
            let mc = mean(&cols[c]);
            let sample_cov: f64 =
                cols[r].iter().zip(&cols[c]).map(|(x, y)| (x - mr) * (y - mc)).sum::<f64>() / (n - 1.0);
            let mcse = ((cov[r][r] * cov[c][c] + cov[r][c].powi(2)) / n).sqrt();
            assert!((sample_cov - cov[r][c]).abs() < 3.0 * mcse, "cov {r}{c}: {sample_cov} vs {}", cov[r][c]);
        }
    }
    assert!(var(&cols[1]) > 0.0);
}

#[test]
fn car_conditional_agrees_with_dense_precision() {
    let labels: Vec<String> = (0..4).map(|k| format!("s{k}")).collect();
    let g = SessionGraph::from_edges(
        labels,
        ClusterUnit::Session,
        vec![(0, 1, 1.0), (1, 2, 0.5), (0, 2, 2.0)],
    )
    .unwrap();
    let u = [0.4, -1.0, 2.0, 7.0];
    let delta = 1.7;
    // Dense precision (D - W)/δ.
    let mut q = [[0.0; 4]; 4];
    for (s, j, w) in g.edges() {
        q[s][j] -= w / delta;
        q[j][s] -= w / delta;
        q[s][s] += w / delta;
        q[j][j] += w / delta;
    }
    for s in 0..3 {
        let (m, v) = car_conditional(s, &u, &g, delta).unwrap();
        let dense_mean = -(0..4).filter(|&j| j != s).map(|j| q[s][j] * u[j]).sum::<f64>() / q[s][s];
        assert!((m - dense_mean).abs() < 1e-12);
        assert!((v - 1.0 / q[s][s]).abs() < 1e-12);
    }
    assert!(car_conditional(3, &u, &g, delta).is_none());
}

#[test]
fn degenerate_imputation_hits_line() {
    let d = dataset(&[
        ("a", "g", 1, 0.0, Some(15.0)),
        ("a", "g", 2, 1.0, Some(14.5)),
        ("a", "g", 3, 2.0, None),
    ]);
    let spec = ModelSpec::lgm();
    let s = Sampler::new(&d, &spec, None).unwrap();
    let mut rng = stream(1, 1, 0);
    let mut st = s.initialize_state(0, false, &mut rng).unwrap();
    st.beta0 = 15.0;
    st.beta1 = -0.5;
    st.b0 = vec![0.0];
    st.b1 = vec![0.0];
    st.sigma2_eps = 1e-16;
    s.impute_missing_outcomes(&mut st, &mut rng);
    assert!((st.imputed[&2] - 14.0).abs() < 1e-6);
}

#[test]
fn no_missing_cells_leaves_state_unchanged() {
    let d = small_panel();
    let spec = ModelSpec::lgm();
    let s = Sampler::new(&d, &spec, None).unwrap();
    let mut rng = stream(2, 1, 0);
    let st = s.initialize_state(0, false, &mut rng).unwrap();
    let mut after = st.clone();
    s.impute_missing_outcomes(&mut after, &mut rng);
    assert_eq!(st, after);
}
