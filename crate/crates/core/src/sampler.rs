//! Gibbs sampler over [`ParameterState`] for every model family.
//!
//! One sweep updates, in order: fixed effects (jointly), client effects,
//! unstructured session effects, structured CAR effects (single site),
//! translation moves along likelihood-invariant directions, recentering of the
//! structured effects, variance components, δ, π, and finally the imputed
//! outcomes. Imputed outcomes never enter the parameter updates.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Beta, Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Dataset;
use crate::graph::SessionGraph;
use crate::models::{
    deviance, linear_predictor, marginalize_pmm, Design, Family, ModelSpec, ParameterState,
    GammaPrior, SlopePrior, INTERCEPT_PRIOR_VARIANCE,
};
use crate::rng::{stream, StreamRng, TAG_CHAIN};
use crate::{Error, Result};

pub const VARIANCE_MIN: f64 = 1e-10;
pub const VARIANCE_MAX: f64 = 1e10;
const INIT_VARIANCE_MIN: f64 = 1e-4;
const INIT_VARIANCE_MAX: f64 = 1e4;

/// Groups of monitored quantities. Deviance is always recorded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Monitor {
    /// β0, β1, covariate coefficients.
    Fixed,
    /// Variance components and δ.
    Variances,
    /// Total session effects γ_s = u_s + ν_s.
    Gamma,
    /// β*, Δ, π and the per-pattern trajectories.
    Pattern,
    /// Posterior-predictive draws of missing outcomes.
    Imputed,
}

fn default_monitor() -> Vec<Monitor> {
    vec![Monitor::Fixed, Monitor::Variances, Monitor::Gamma, Monitor::Pattern]
}

fn default_true() -> bool {
    true
}

fn default_max_clamps() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McmcConfig {
    pub n_chains: usize,
    pub n_iter: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    #[serde(default = "default_monitor")]
    pub monitor: Vec<Monitor>,
    #[serde(default = "default_true")]
    pub overdispersed_starts: bool,
    /// Joint shifts of a fixed effect and the random effects it is
    /// confounded with; they leave the likelihood unchanged.
    #[serde(default = "default_true")]
    pub translation_moves: bool,
    /// Track the largest change of any linear predictor across recentering.
    #[serde(default)]
    pub check_recentering: bool,
    /// Variance clamp events tolerated before a chain aborts.
    #[serde(default = "default_max_clamps")]
    pub max_clamp_events: usize,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            n_chains: 2,
            n_iter: 5000,
            burn_in: 2500,
            thin: 1,
            seed: 1,
            monitor: default_monitor(),
            overdispersed_starts: true,
            translation_moves: true,
            check_recentering: false,
            max_clamp_events: default_max_clamps(),
        }
    }
}

impl McmcConfig {
    pub fn retained_per_chain(&self) -> usize {
        (self.n_iter - self.burn_in).div_ceil(self.thin)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_chains == 0 {
            return Err(Error::Config("n_chains must be at least 1".into()));
        }
        if self.thin == 0 {
            return Err(Error::Config("thin must be at least 1".into()));
        }
        if self.burn_in >= self.n_iter {
            return Err(Error::Config("burn_in must be smaller than n_iter".into()));
        }
        if self.retained_per_chain() < 2 {
            return Err(Error::Config("at least 2 retained draws per chain are required".into()));
        }
        Ok(())
    }

    fn monitors(&self, m: Monitor) -> bool {
        self.monitor.contains(&m)
    }
}

/// Draws of one chain, stored per quantity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSamples {
    pub chain: usize,
    /// Iteration number of every retained draw.
    pub iterations: Vec<usize>,
    /// `draws[q][k]` is quantity q at retained draw k.
    pub draws: Vec<Vec<f64>>,
    /// Componentwise mean of the retained states.
    pub mean_state: ParameterState,
    pub clamp_events: usize,
    /// Largest |Δ linear predictor| seen across recentering steps.
    pub max_recentering_shift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSamples {
    pub spec: ModelSpec,
    pub config: McmcConfig,
    pub data_hash: String,
    pub quantities: Vec<String>,
    pub chains: Vec<ChainSamples>,
    pub cluster_labels: Vec<String>,
}

impl PosteriorSamples {
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.quantities.iter().position(|q| q == name)
    }

    /// Per-chain draws of one quantity.
    pub fn chains_of(&self, name: &str) -> Option<Vec<&[f64]>> {
        let q = self.index_of(name)?;
        Some(self.chains.iter().map(|c| c.draws[q].as_slice()).collect())
    }

    /// All chains concatenated.
    pub fn pooled(&self, name: &str) -> Option<Vec<f64>> {
        let q = self.index_of(name)?;
        Some(self.chains.iter().flat_map(|c| c.draws[q].iter().copied()).collect())
    }

    /// Mean of the per-chain mean states (chains have equal draw counts).
    pub fn posterior_mean_state(&self) -> ParameterState {
        let m = self.chains.len() as f64;
        let mut acc = StateAccumulator::new(&self.chains[0].mean_state);
        for c in &self.chains {
            acc.add(&c.mean_state);
        }
        let mut out = acc.finish();
        debug_assert!(m >= 1.0);
        out.imputed = self.chains[0].mean_state.imputed.keys().map(|&k| (k, 0.0)).collect();
        for c in &self.chains {
            for (k, v) in &c.mean_state.imputed {
                *out.imputed.get_mut(k).unwrap() += v / m;
            }
        }
        out
    }

    pub fn clamp_events(&self) -> usize {
        self.chains.iter().map(|c| c.clamp_events).sum()
    }

    pub fn max_recentering_shift(&self) -> f64 {
        self.chains
            .iter()
            .map(|c| c.max_recentering_shift)
            .fold(0.0, f64::max)
    }

    /// Writes `iter,quantity,value` rows for one chain.
    pub fn write_chain_csv<W: Write>(&self, chain: usize, writer: W) -> Result<()> {
        let c = &self.chains[chain];
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["iter", "quantity", "value"])?;
        for (k, iter) in c.iterations.iter().enumerate() {
            let iter = iter.to_string();
            for (q, name) in self.quantities.iter().enumerate() {
                w.write_record([iter.as_str(), name.as_str(), &c.draws[q][k].to_string()])?;
            }
        }
        w.flush().map_err(|e| Error::io("<draws>", e))?;
        Ok(())
    }

    /// One `chain_<k>.csv` per chain plus `manifest.json`.
    pub fn write_draws(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for k in 0..self.chains.len() {
            let path = dir.join(format!("chain_{k}.csv"));
            let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
            self.write_chain_csv(k, BufWriter::new(file))?;
        }
        let manifest = DrawManifest {
            seed: self.config.seed,
            config_hash: config_hash(&self.spec, &self.config),
            data_hash: self.data_hash.clone(),
            spec: self.spec.clone(),
            config: self.config.clone(),
            chains: self.chains.len(),
            quantities: self.quantities.clone(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        };
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawManifest {
    pub seed: u64,
    pub config_hash: String,
    pub data_hash: String,
    pub spec: ModelSpec,
    pub config: McmcConfig,
    pub chains: usize,
    pub quantities: Vec<String>,
    pub version: String,
}

pub fn config_hash(spec: &ModelSpec, config: &McmcConfig) -> String {
    let text = serde_json::to_string(&(spec, config)).expect("config serializes");
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Reads one `iter,quantity,value` chain file back into per-quantity columns.
pub fn read_chain_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    let mut names: Vec<String> = Vec::new();
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let name = rec.get(1).unwrap_or("").to_string();
        let value: f64 = rec.get(2).unwrap_or("").parse().map_err(|_| Error::Parse {
            row: row + 2,
            message: "value is not a number".into(),
        })?;
        let q = *index.entry(name.clone()).or_insert_with(|| {
            names.push(name);
            columns.push(Vec::new());
            columns.len() - 1
        });
        columns[q].push(value);
    }
    Ok((names, columns))
}

struct StateAccumulator {
    sum: ParameterState,
    n: f64,
}

impl StateAccumulator {
    fn new(template: &ParameterState) -> Self {
        let mut sum = ParameterState::zeros(template.beta_cov.len(), template.b0.len(), template.u.len());
        sum.sigma2_eps = 0.0;
        sum.sigma2_0 = 0.0;
        sum.sigma2_1 = 0.0;
        sum.sigma2_nu = 0.0;
        sum.delta = 0.0;
        sum.sigma2_beta1 = 0.0;
        sum.imputed = template.imputed.keys().map(|&k| (k, 0.0)).collect();
        Self { sum, n: 0.0 }
    }

    fn add(&mut self, s: &ParameterState) {
        let t = &mut self.sum;
        t.beta0 += s.beta0;
        t.beta1 += s.beta1;
        add_into(&mut t.beta_cov, &s.beta_cov);
        add_into(&mut t.b0, &s.b0);
        add_into(&mut t.b1, &s.b1);
        add_into(&mut t.u, &s.u);
        add_into(&mut t.nu, &s.nu);
        t.sigma2_eps += s.sigma2_eps;
        t.sigma2_0 += s.sigma2_0;
        t.sigma2_1 += s.sigma2_1;
        t.sigma2_nu += s.sigma2_nu;
        t.delta += s.delta;
        t.sigma2_beta1 += s.sigma2_beta1;
        t.offset_intercept += s.offset_intercept;
        t.offset_slope += s.offset_slope;
        t.pi += s.pi;
        for (k, v) in &s.imputed {
            *t.imputed.get_mut(k).expect("imputed cells are fixed") += v;
        }
        self.n += 1.0;
    }

    fn finish(self) -> ParameterState {
        let n = self.n;
        let mut s = self.sum;
        let scale = |v: &mut Vec<f64>| v.iter_mut().for_each(|x| *x /= n);
        s.beta0 /= n;
        s.beta1 /= n;
        scale(&mut s.beta_cov);
        scale(&mut s.b0);
        scale(&mut s.b1);
        scale(&mut s.u);
        scale(&mut s.nu);
        s.sigma2_eps /= n;
        s.sigma2_0 /= n;
        s.sigma2_1 /= n;
        s.sigma2_nu /= n;
        s.delta /= n;
        s.sigma2_beta1 /= n;
        s.offset_intercept /= n;
        s.offset_slope /= n;
        s.pi /= n;
        s.imputed.values_mut().for_each(|v| *v /= n);
        s
    }
}

fn add_into(acc: &mut [f64], x: &[f64]) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

fn std_normal(rng: &mut StreamRng) -> f64 {
    rng.sample(StandardNormal)
}

/// Posterior draw of a precision with a Gamma prior, given `n` zero-mean
/// normal terms whose squares sum to `ss`.
pub fn draw_precision(rng: &mut StreamRng, prior: GammaPrior, n: usize, ss: f64) -> f64 {
    gamma_draw(rng, prior.shape + n as f64 / 2.0, prior.rate + ss / 2.0)
}

/// Draw from the Gamma(shape, rate) distribution.
fn gamma_draw(rng: &mut StreamRng, shape: f64, rate: f64) -> f64 {
    Gamma::new(shape, 1.0 / rate)
        .expect("shape and rate are positive")
        .sample(rng)
}

/// Normal draw with precision `prec` and mean `lin / prec`.
fn normal_canonical(rng: &mut StreamRng, lin: f64, prec: f64) -> f64 {
    lin / prec + std_normal(rng) / prec.sqrt()
}

/// Precomputed structure shared by all chains of one fit.
pub struct Sampler<'a> {
    pub design: Design,
    spec: &'a ModelSpec,
    graph: Option<&'a SessionGraph>,
    /// Observed observation indices.
    observed: Vec<usize>,
    missing: Vec<usize>,
    client_obs: Vec<Vec<usize>>,
    cluster_obs: Vec<Vec<usize>>,
    /// Design rows of the fixed effects, for observed observations only.
    rows: Vec<Vec<f64>>,
    xtx: DMatrix<f64>,
    n_fixed: usize,
    islands: Vec<Vec<usize>>,
    /// Clients whose observations all fall in one island, per island.
    island_clients: Vec<Option<Vec<usize>>>,
    isolated: Vec<usize>,
    isolated_obs: Vec<usize>,
    short_stay: Vec<usize>,
}

impl<'a> Sampler<'a> {
    pub fn new(dataset: &Dataset, spec: &'a ModelSpec, graph: Option<&'a SessionGraph>) -> Result<Self> {
        let design = Design::new(dataset, spec)?;
        if spec.is_car() {
            let g = graph.ok_or_else(|| Error::Config("CAR family requires a session graph".into()))?;
            if g.size() != design.n_clusters {
                return Err(Error::Config(format!(
                    "graph has {} nodes but the dataset has {} clustering units",
                    g.size(),
                    design.n_clusters
                )));
            }
        }
        let graph = if spec.is_car() { graph } else { None };

        let observed: Vec<usize> = (0..design.n_obs()).filter(|&o| design.outcome[o].is_some()).collect();
        let missing: Vec<usize> = (0..design.n_obs()).filter(|&o| design.outcome[o].is_none()).collect();
        if observed.is_empty() {
            return Err(Error::Validation("no observed outcomes".into()));
        }
        let mut client_obs = vec![Vec::new(); design.n_clients];
        let mut cluster_obs = vec![Vec::new(); design.n_clusters];
        for &o in &observed {
            client_obs[design.obs_client[o]].push(o);
            cluster_obs[design.obs_cluster[o]].push(o);
        }

        let n_fixed = 2 + design.n_covariates + if spec.pattern_mixture { 2 } else { 0 };
        let rows: Vec<Vec<f64>> = observed.iter().map(|&o| fixed_row(&design, o)).collect();
        let mut xtx = DMatrix::zeros(n_fixed, n_fixed);
        for r in &rows {
            for a in 0..n_fixed {
                for b in 0..n_fixed {
                    xtx[(a, b)] += r[a] * r[b];
                }
            }
        }

        let (islands, island_clients, isolated, isolated_obs) = match graph {
            Some(g) => {
                let islands = g.island_members();
                let mut client_island: Vec<Option<usize>> = vec![None; design.n_clients];
                let mut spans = vec![false; design.n_clients];
                for &o in &observed {
                    let i = design.obs_client[o];
                    let isl = g.island_of(design.obs_cluster[o]);
                    match client_island[i] {
                        None => client_island[i] = Some(isl),
                        Some(prev) if prev != isl => spans[i] = true,
                        _ => {}
                    }
                }
                let mut members: Vec<Vec<usize>> = vec![Vec::new(); islands.len()];
                let mut tainted = vec![false; islands.len()];
                for i in 0..design.n_clients {
                    if let Some(isl) = client_island[i] {
                        if spans[i] {
                            tainted[isl] = true;
                        }
                        members[isl].push(i);
                    }
                }
                // A spanning client taints every island it touches.
                for &o in &observed {
                    let i = design.obs_client[o];
                    if spans[i] {
                        tainted[g.island_of(design.obs_cluster[o])] = true;
                    }
                }
                let island_clients = members
                    .into_iter()
                    .zip(&tainted)
                    .zip(&islands)
                    .map(|((m, &t), isl)| (!t && isl.len() > 1 && !m.is_empty()).then_some(m))
                    .collect();
                let isolated: Vec<usize> = (0..g.size()).filter(|&s| g.is_isolated(s)).collect();
                let isolated_obs = isolated.iter().flat_map(|&s| cluster_obs[s].iter().copied()).collect();
                (islands, island_clients, isolated, isolated_obs)
            }
            None => (Vec::new(), Vec::new(), Vec::new(), Vec::new()),
        };
        let short_stay = (0..design.n_clients).filter(|&i| design.pattern[i]).collect();

        Ok(Self {
            design,
            spec,
            graph,
            observed,
            missing,
            client_obs,
            cluster_obs,
            rows,
            xtx,
            n_fixed,
            islands,
            island_clients,
            isolated,
            isolated_obs,
            short_stay,
        })
    }

    fn client_effects(&self) -> bool {
        self.spec.restrict.client_effects
    }

    fn y(&self, o: usize) -> f64 {
        self.design.outcome[o].expect("observed index")
    }

    /// Least-squares starting values, method-of-moments variances, and
    /// (optionally) chain-indexed overdispersion.
    pub fn initialize_state(&self, chain: usize, overdispersed: bool, rng: &mut StreamRng) -> Result<ParameterState> {
        let d = &self.design;
        let mut times: Vec<f64> = self.observed.iter().map(|&o| d.time[o]).collect();
        times.sort_by(f64::total_cmp);
        times.dedup();
        if times.len() < 2 {
            return Err(Error::Initialization(
                "fewer than 2 distinct observed time points; the slope is not identified".into(),
            ));
        }
        let mut state = ParameterState::zeros(d.n_covariates, d.n_clients, d.n_clusters);

        // Pooled least squares with a tiny ridge for rank-deficient designs.
        let mut xty = DVector::zeros(self.n_fixed);
        for (r, &o) in self.rows.iter().zip(&self.observed) {
            for a in 0..self.n_fixed {
                xty[a] += r[a] * self.y(o);
            }
        }
        let mut a = self.xtx.clone();
        for k in 0..self.n_fixed {
            a[(k, k)] += 1e-8 * (1.0 + a[(k, k)]);
        }
        let theta = a
            .cholesky()
            .ok_or_else(|| Error::Initialization("normal equations are not positive definite".into()))?
            .solve(&xty);
        self.set_fixed(&mut state, theta.as_slice());

        // Residual decomposition for moment estimates.
        let resid: Vec<f64> = (0..d.n_obs())
            .map(|o| d.outcome[o].map_or(0.0, |y| y - d.fixed_part(&state, o)))
            .collect();
        let mut client_mean = vec![0.0; d.n_clients];
        for (i, obs) in self.client_obs.iter().enumerate() {
            if !obs.is_empty() {
                client_mean[i] = obs.iter().map(|&o| resid[o]).sum::<f64>() / obs.len() as f64;
            }
        }
        let within: Vec<f64> = self
            .observed
            .iter()
            .map(|&o| resid[o] - client_mean[d.obs_client[o]])
            .collect();
        let n_obs = self.observed.len() as f64;
        let active_clients = self.client_obs.iter().filter(|v| !v.is_empty()).count() as f64;
        let dof = (n_obs - active_clients).max(1.0);
        let sigma2_eps = within.iter().map(|e| e * e).sum::<f64>() / dof;
        let mean_inv_n = self
            .client_obs
            .iter()
            .filter(|v| !v.is_empty())
            .map(|v| 1.0 / v.len() as f64)
            .sum::<f64>()
            / active_clients.max(1.0);
        let var_means = client_mean.iter().map(|m| m * m).sum::<f64>() / active_clients.max(1.0);
        let clamp = |v: f64| v.clamp(INIT_VARIANCE_MIN, INIT_VARIANCE_MAX);
        state.sigma2_eps = clamp(self.spec.restrict.fixed_sigma2_eps.unwrap_or(sigma2_eps));
        state.sigma2_0 = clamp(var_means - sigma2_eps * mean_inv_n);
        let t_var = {
            let m = self.observed.iter().map(|&o| d.time[o]).sum::<f64>() / n_obs;
            self.observed.iter().map(|&o| (d.time[o] - m).powi(2)).sum::<f64>() / n_obs
        };
        state.sigma2_1 = clamp(state.sigma2_0 / t_var.max(1.0));
        let mut cluster_sum = vec![0.0; d.n_clusters];
        let mut cluster_n = vec![0.0; d.n_clusters];
        for (&o, e) in self.observed.iter().zip(&within) {
            cluster_sum[d.obs_cluster[o]] += e;
            cluster_n[d.obs_cluster[o]] += 1.0;
        }
        let occupied: Vec<usize> = (0..d.n_clusters).filter(|&c| cluster_n[c] > 0.0).collect();
        let var_cluster = occupied
            .iter()
            .map(|&c| (cluster_sum[c] / cluster_n[c]).powi(2) - sigma2_eps / cluster_n[c])
            .sum::<f64>()
            / occupied.len().max(1) as f64;
        state.sigma2_nu = clamp(var_cluster);
        state.delta = state.sigma2_nu;
        state.sigma2_beta1 = match self.spec.hyper.slope_prior {
            SlopePrior::FixedVariance(v) => v,
            SlopePrior::GammaPrecision(g) => g.rate / g.shape,
        };
        if self.spec.pattern_mixture {
            let n1 = self.short_stay.len() as f64;
            let h = &self.spec.hyper;
            state.pi = (h.pattern_a + n1) / (h.pattern_a + h.pattern_b + d.n_clients as f64);
        }

        if overdispersed {
            let sign = if chain.is_multiple_of(2) { 1.0 } else { -1.0 };
            let y_sd = {
                let ys: Vec<f64> = self.observed.iter().map(|&o| self.y(o)).collect();
                let m = ys.iter().sum::<f64>() / n_obs;
                (ys.iter().map(|y| (y - m).powi(2)).sum::<f64>() / n_obs).sqrt().max(1e-3)
            };
            state.beta0 += sign * 2.0 * y_sd;
            let slope_sd = state.sigma2_beta1.sqrt().min(y_sd / t_var.sqrt().max(1e-3));
            state.beta1 += sign * 2.0 * slope_sd;
            let alt = |k: usize| if k.is_multiple_of(2) { sign } else { -sign };
            if self.client_effects() {
                for i in 0..d.n_clients {
                    state.b0[i] = alt(i) * 2.0 * state.sigma2_0.sqrt();
                    state.b1[i] = alt(i) * 2.0 * state.sigma2_1.sqrt();
                }
            }
            if self.spec.has_session_effects() {
                for c in 0..d.n_clusters {
                    state.nu[c] = alt(c) * 2.0 * state.sigma2_nu.sqrt();
                }
            }
            if let Some(g) = self.graph {
                for c in 0..d.n_clusters {
                    if !g.is_isolated(c) {
                        state.u[c] = alt(c) * 2.0 * state.delta.sqrt();
                    }
                }
            }
        }
        let _ = rng;

        for &o in &self.missing {
            let i = d.obs_client[o];
            let obs = &self.client_obs[i];
            let fill = if obs.is_empty() {
                self.observed.iter().map(|&k| self.y(k)).sum::<f64>() / n_obs
            } else {
                obs.iter().map(|&k| self.y(k)).sum::<f64>() / obs.len() as f64
            };
            state.imputed.insert(o, fill);
        }
        Ok(state)
    }

    fn set_fixed(&self, state: &mut ParameterState, theta: &[f64]) {
        let k = self.design.n_covariates;
        state.beta0 = theta[0];
        state.beta1 = theta[1];
        state.beta_cov.copy_from_slice(&theta[2..2 + k]);
        if self.spec.pattern_mixture {
            state.offset_intercept = theta[2 + k];
            state.offset_slope = theta[3 + k];
        }
    }

    /// One full Gibbs sweep. Returns the number of variance clamp events.
    pub fn gibbs_sweep(&self, state: &mut ParameterState, rng: &mut StreamRng, translations: bool) -> Result<usize> {
        self.update_fixed(state, rng)?;
        if self.client_effects() {
            self.update_clients(state, rng);
        }
        if self.spec.has_session_effects() {
            self.update_unstructured(state, rng);
        }
        if self.graph.is_some() {
            self.update_structured(state, rng);
        }
        if translations {
            self.translation_moves(state, rng);
        }
        if self.graph.is_some() {
            self.recenter_structured_effects(state, rng);
        }
        let clamps = self.update_variances(state, rng)?;
        if self.spec.pattern_mixture {
            self.update_pi(state, rng);
        }
        self.impute_missing_outcomes(state, rng);
        Ok(clamps)
    }

    /// Random part of the predictor: client effects plus session effects.
    fn random_part(&self, state: &ParameterState, o: usize) -> f64 {
        let d = &self.design;
        let i = d.obs_client[o];
        let c = d.obs_cluster[o];
        state.b0[i] + state.b1[i] * d.time[o] + state.u[c] + state.nu[c]
    }

    pub fn update_fixed(&self, state: &mut ParameterState, rng: &mut StreamRng) -> Result<()> {
        let p = self.n_fixed;
        let k = self.design.n_covariates;
        let h = &self.spec.hyper;
        let prec_eps = 1.0 / state.sigma2_eps;

        let mut prior_prec = vec![0.0; p];
        let mut prior_mean = vec![0.0; p];
        prior_prec[0] = 1.0 / INTERCEPT_PRIOR_VARIANCE;
        prior_prec[1] = 1.0 / state.sigma2_beta1;
        for j in 0..k {
            prior_prec[2 + j] = 1.0 / h.sigma2_beta;
        }
        if self.spec.pattern_mixture {
            prior_prec[2 + k] = 1.0 / h.offset_intercept_prior.variance;
            prior_mean[2 + k] = h.offset_intercept_prior.mean;
            prior_prec[3 + k] = 1.0 / h.offset_slope_prior.variance;
            prior_mean[3 + k] = h.offset_slope_prior.mean;
        }

        let mut lin = DVector::zeros(p);
        for (r, &o) in self.rows.iter().zip(&self.observed) {
            let target = self.y(o) - self.random_part(state, o);
            for a in 0..p {
                lin[a] += r[a] * target;
            }
        }
        let mut prec = &self.xtx * prec_eps;
        for a in 0..p {
            lin[a] = lin[a] * prec_eps + prior_prec[a] * prior_mean[a];
            prec[(a, a)] += prior_prec[a];
        }
        let chol = prec
            .cholesky()
            .ok_or_else(|| Error::Validation("fixed-effect precision is not positive definite".into()))?;
        let mean = chol.solve(&lin);
        let z = DVector::from_iterator(p, (0..p).map(|_| std_normal(rng)));
        let noise = chol
            .l()
            .transpose()
            .solve_upper_triangular(&z)
            .expect("Cholesky factor is nonsingular");
        let theta = mean + noise;
        self.set_fixed(state, theta.as_slice());
        Ok(())
    }

    pub fn update_clients(&self, state: &mut ParameterState, rng: &mut StreamRng) {
        let d = &self.design;
        let prec_eps = 1.0 / state.sigma2_eps;
        for i in 0..d.n_clients {
            let obs = &self.client_obs[i];
            // b0 | b1
            let mut lin = 0.0;
            for &o in obs {
                let c = d.obs_cluster[o];
                lin += self.y(o) - d.fixed_part(state, o) - state.b1[i] * d.time[o] - state.u[c] - state.nu[c];
            }
            let prec = obs.len() as f64 * prec_eps + 1.0 / state.sigma2_0;
            state.b0[i] = normal_canonical(rng, lin * prec_eps, prec);
            // b1 | b0
            let mut lin = 0.0;
            let mut tt = 0.0;
            for &o in obs {
                let c = d.obs_cluster[o];
                let t = d.time[o];
                lin += t * (self.y(o) - d.fixed_part(state, o) - state.b0[i] - state.u[c] - state.nu[c]);
                tt += t * t;
            }
            let prec = tt * prec_eps + 1.0 / state.sigma2_1;
            state.b1[i] = normal_canonical(rng, lin * prec_eps, prec);
        }
    }

    fn cluster_residual_sum(&self, state: &ParameterState, c: usize) -> f64 {
        let d = &self.design;
        self.cluster_obs[c]
            .iter()
            .map(|&o| {
                let i = d.obs_client[o];
                self.y(o) - d.fixed_part(state, o) - state.b0[i] - state.b1[i] * d.time[o]
            })
            .sum()
    }

    pub fn update_unstructured(&self, state: &mut ParameterState, rng: &mut StreamRng) {
        let prec_eps = 1.0 / state.sigma2_eps;
        for c in 0..self.design.n_clusters {
            let lin = (self.cluster_residual_sum(state, c) - self.cluster_obs[c].len() as f64 * state.u[c]) * prec_eps;
            let prec = self.cluster_obs[c].len() as f64 * prec_eps + 1.0 / state.sigma2_nu;
            state.nu[c] = normal_canonical(rng, lin, prec);
        }
    }

    pub fn update_structured(&self, state: &mut ParameterState, rng: &mut StreamRng) {
        let graph = self.graph.expect("CAR family");
        let prec_eps = 1.0 / state.sigma2_eps;
        for c in 0..self.design.n_clusters {
            let Some((prior_mean, prior_var)) = crate::graph::car_conditional(c, &state.u, graph, state.delta) else {
                // Isolated units carry no structured effect.
                state.u[c] = 0.0;
                continue;
            };
            let n = self.cluster_obs[c].len() as f64;
            let lin = prior_mean / prior_var + (self.cluster_residual_sum(state, c) - n * state.nu[c]) * prec_eps;
            let prec = 1.0 / prior_var + n * prec_eps;
            state.u[c] = normal_canonical(rng, lin, prec);
        }
    }

    /// Shifts an anchor by c and a set of zero-mean normal followers by −c,
    /// with c drawn from its exact conditional. `anchor` is `(value, prior
    /// mean, prior variance)`; `None` means a flat anchor prior.
    fn translation_draw(
        rng: &mut StreamRng,
        anchor: Option<(f64, f64, f64)>,
        follower_sum: f64,
        n_followers: usize,
        follower_var: f64,
    ) -> f64 {
        let mut prec = n_followers as f64 / follower_var;
        let mut lin = follower_sum / follower_var;
        if let Some((value, mean, var)) = anchor {
            prec += 1.0 / var;
            lin += (mean - value) / var;
        }
        normal_canonical(rng, lin, prec)
    }

    pub fn translation_moves(&self, state: &mut ParameterState, rng: &mut StreamRng) {
        let d = &self.design;
        if self.client_effects() && d.n_clients > 0 {
            let c = Self::translation_draw(
                rng,
                Some((state.beta0, 0.0, INTERCEPT_PRIOR_VARIANCE)),
                state.b0.iter().sum(),
                d.n_clients,
                state.sigma2_0,
            );
            state.beta0 += c;
            state.b0.iter_mut().for_each(|b| *b -= c);

            let c = Self::translation_draw(
                rng,
                Some((state.beta1, 0.0, state.sigma2_beta1)),
                state.b1.iter().sum(),
                d.n_clients,
                state.sigma2_1,
            );
            state.beta1 += c;
            state.b1.iter_mut().for_each(|b| *b -= c);

            if self.spec.pattern_mixture && !self.short_stay.is_empty() {
                let h = &self.spec.hyper;
                let n = self.short_stay.len();
                let c = Self::translation_draw(
                    rng,
                    Some((
                        state.offset_intercept,
                        h.offset_intercept_prior.mean,
                        h.offset_intercept_prior.variance,
                    )),
                    self.short_stay.iter().map(|&i| state.b0[i]).sum(),
                    n,
                    state.sigma2_0,
                );
                state.offset_intercept += c;
                self.short_stay.iter().for_each(|&i| state.b0[i] -= c);

                let c = Self::translation_draw(
                    rng,
                    Some((state.offset_slope, h.offset_slope_prior.mean, h.offset_slope_prior.variance)),
                    self.short_stay.iter().map(|&i| state.b1[i]).sum(),
                    n,
                    state.sigma2_1,
                );
                state.offset_slope += c;
                self.short_stay.iter().for_each(|&i| state.b1[i] -= c);
            }
        }
        if self.spec.has_session_effects() {
            let c = Self::translation_draw(
                rng,
                Some((state.beta0, 0.0, INTERCEPT_PRIOR_VARIANCE)),
                state.nu.iter().sum(),
                d.n_clusters,
                state.sigma2_nu,
            );
            state.beta0 += c;
            state.nu.iter_mut().for_each(|v| *v -= c);
        }
        if self.graph.is_some() {
            for (isl, members) in self.islands.iter().enumerate() {
                if members.len() < 2 {
                    continue;
                }
                if let (true, Some(clients)) = (self.client_effects(), &self.island_clients[isl]) {
                    let c = Self::translation_draw(
                        rng,
                        None,
                        clients.iter().map(|&i| state.b0[i]).sum(),
                        clients.len(),
                        state.sigma2_0,
                    );
                    members.iter().for_each(|&s| state.u[s] += c);
                    clients.iter().for_each(|&i| state.b0[i] -= c);
                }
                let c = Self::translation_draw(
                    rng,
                    None,
                    members.iter().map(|&s| state.nu[s]).sum(),
                    members.len(),
                    state.sigma2_nu,
                );
                members.iter().for_each(|&s| {
                    state.u[s] += c;
                    state.nu[s] -= c;
                });
            }
        }
    }

    /// Moves the average of the island means of u into β0. With isolated
    /// units present that direction is not flat, so β0 and the structured
    /// effects are instead shifted by an exact conditional draw.
    pub fn recenter_structured_effects(&self, state: &mut ParameterState, rng: &mut StreamRng) {
        let graph = self.graph.expect("CAR family");
        if self.isolated.is_empty() {
            let means: Vec<f64> = self
                .islands
                .iter()
                .map(|m| m.iter().map(|&s| state.u[s]).sum::<f64>() / m.len() as f64)
                .collect();
            let grand = means.iter().sum::<f64>() / means.len() as f64;
            state.u.iter_mut().for_each(|u| *u -= grand);
            state.beta0 += grand;
        } else {
            let prec_eps = 1.0 / state.sigma2_eps;
            let resid: f64 = self
                .isolated_obs
                .iter()
                .map(|&o| self.y(o) - linear_predictor(state, o, &self.design))
                .sum();
            let prec = self.isolated_obs.len() as f64 * prec_eps + 1.0 / INTERCEPT_PRIOR_VARIANCE;
            let lin = resid * prec_eps - state.beta0 / INTERCEPT_PRIOR_VARIANCE;
            let c = normal_canonical(rng, lin, prec);
            state.beta0 += c;
            for s in 0..graph.size() {
                if !graph.is_isolated(s) {
                    state.u[s] -= c;
                }
            }
        }
    }

    fn clamp_variance(v: f64, events: &mut usize) -> f64 {
        if v < VARIANCE_MIN {
            *events += 1;
            VARIANCE_MIN
        } else if v > VARIANCE_MAX {
            *events += 1;
            VARIANCE_MAX
        } else {
            v
        }
    }

    pub fn update_variances(&self, state: &mut ParameterState, rng: &mut StreamRng) -> Result<usize> {
        let d = &self.design;
        let h = &self.spec.hyper;
        let mut events = 0;
        let finite = |name: &str, v: f64| {
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::Validation(format!("non-finite sum of squares for {name}")))
            }
        };

        if self.spec.restrict.fixed_sigma2_eps.is_none() {
            let ss: f64 = self
                .observed
                .iter()
                .map(|&o| (self.y(o) - linear_predictor(state, o, d)).powi(2))
                .sum();
            let ss = finite("sigma2_eps", ss)?;
            let prec = draw_precision(rng, GammaPrior { shape: h.psi_y0, rate: h.psi_y1 }, self.observed.len(), ss);
            state.sigma2_eps = Self::clamp_variance(1.0 / prec, &mut events);
        }
        if self.client_effects() {
            let n = d.n_clients;
            let ss0 = finite("sigma2_0", state.b0.iter().map(|b| b * b).sum())?;
            let prec = draw_precision(rng, GammaPrior { shape: h.psi_00, rate: h.psi_01 }, n, ss0);
            state.sigma2_0 = Self::clamp_variance(1.0 / prec, &mut events);
            let ss1 = finite("sigma2_1", state.b1.iter().map(|b| b * b).sum())?;
            let prec = draw_precision(rng, GammaPrior { shape: h.psi_10, rate: h.psi_11 }, n, ss1);
            state.sigma2_1 = Self::clamp_variance(1.0 / prec, &mut events);
        }
        if self.spec.has_session_effects() {
            let ss = finite("sigma2_nu", state.nu.iter().map(|v| v * v).sum())?;
            let prec = draw_precision(rng, GammaPrior { shape: h.psi_nu0, rate: h.psi_nu1 }, d.n_clusters, ss);
            state.sigma2_nu = Self::clamp_variance(1.0 / prec, &mut events);
        }
        if let Some(g) = self.graph {
            let energy = finite("delta", g.pairwise_energy(&state.u))?;
            let rank = g.size() - g.n_islands();
            let prec = draw_precision(rng, GammaPrior { shape: h.d0, rate: h.d1 }, rank, energy);
            state.delta = Self::clamp_variance(1.0 / prec, &mut events);
        }
        if let SlopePrior::GammaPrecision(gp) = h.slope_prior {
            let prec = draw_precision(rng, gp, 1, state.beta1 * state.beta1);
            state.sigma2_beta1 = Self::clamp_variance(1.0 / prec, &mut events);
        }
        Ok(events)
    }

    pub fn update_pi(&self, state: &mut ParameterState, rng: &mut StreamRng) {
        let h = &self.spec.hyper;
        let n1 = self.short_stay.len() as f64;
        let n0 = self.design.n_clients as f64 - n1;
        state.pi = Beta::new(h.pattern_a + n1, h.pattern_b + n0)
            .expect("positive Beta parameters")
            .sample(rng);
    }

    /// Posterior-predictive draw of every missing outcome.
    pub fn impute_missing_outcomes(&self, state: &mut ParameterState, rng: &mut StreamRng) {
        let sd = state.sigma2_eps.sqrt();
        for &o in &self.missing {
            let mean = linear_predictor(state, o, &self.design);
            state.imputed.insert(o, mean + sd * std_normal(rng));
        }
    }

    /// Names of the recorded quantities, in recording order.
    pub fn quantity_names(&self, config: &McmcConfig) -> Vec<String> {
        let d = &self.design;
        let mut q = Vec::new();
        if config.monitors(Monitor::Fixed) {
            q.push("beta0".to_string());
            q.push("beta1".to_string());
            for name in &d.covariate_names {
                q.push(format!("beta_{name}"));
            }
        }
        if config.monitors(Monitor::Variances) {
            q.push("sigma2_eps".into());
            if self.client_effects() {
                q.push("sigma2_0".into());
                q.push("sigma2_1".into());
            }
            if self.spec.has_session_effects() {
                q.push("sigma2_nu".into());
            }
            if self.graph.is_some() {
                q.push("delta".into());
            }
        }
        if config.monitors(Monitor::Pattern) && self.spec.pattern_mixture {
            for name in ["beta0_star", "beta1_star", "Delta0", "Delta1", "pi", "beta0_short", "beta1_short"] {
                q.push(name.into());
            }
        }
        if config.monitors(Monitor::Gamma) && self.spec.has_session_effects() {
            for label in &d.cluster_labels {
                q.push(format!("gamma[{label}]"));
            }
        }
        if config.monitors(Monitor::Imputed) {
            for &o in &self.missing {
                q.push(format!(
                    "ypred[{}:{}]",
                    d.client_labels[d.obs_client[o]], d.cluster_labels[d.obs_cluster[o]]
                ));
            }
        }
        q.push("deviance".into());
        q
    }

    fn record(&self, state: &ParameterState, config: &McmcConfig, out: &mut [Vec<f64>]) {
        let mut values = Vec::with_capacity(out.len());
        let (b0, b1) = if self.spec.pattern_mixture {
            marginalize_pmm(state)
        } else {
            (state.beta0, state.beta1)
        };
        if config.monitors(Monitor::Fixed) {
            values.push(b0);
            values.push(b1);
            values.extend_from_slice(&state.beta_cov);
        }
        if config.monitors(Monitor::Variances) {
            values.push(state.sigma2_eps);
            if self.client_effects() {
                values.push(state.sigma2_0);
                values.push(state.sigma2_1);
            }
            if self.spec.has_session_effects() {
                values.push(state.sigma2_nu);
            }
            if self.graph.is_some() {
                values.push(state.delta);
            }
        }
        if config.monitors(Monitor::Pattern) && self.spec.pattern_mixture {
            values.extend_from_slice(&[
                state.beta0,
                state.beta1,
                state.offset_intercept,
                state.offset_slope,
                state.pi,
                state.beta0 + state.offset_intercept,
                state.beta1 + state.offset_slope,
            ]);
        }
        if config.monitors(Monitor::Gamma) && self.spec.has_session_effects() {
            values.extend((0..self.design.n_clusters).map(|c| state.gamma(c)));
        }
        if config.monitors(Monitor::Imputed) {
            values.extend(self.missing.iter().map(|o| state.imputed[o]));
        }
        values.push(deviance(state, &self.design));
        for (col, v) in out.iter_mut().zip(values) {
            col.push(v);
        }
    }

    fn max_predictor_change(&self, before: &ParameterState, after: &ParameterState) -> f64 {
        (0..self.design.n_obs())
            .map(|o| (linear_predictor(before, o, &self.design) - linear_predictor(after, o, &self.design)).abs())
            .fold(0.0, f64::max)
    }

    pub fn run_chain(&self, chain: usize, config: &McmcConfig) -> Result<ChainSamples> {
        let mut rng = stream(config.seed, TAG_CHAIN, chain as u64);
        let mut state = self.initialize_state(chain, config.overdispersed_starts, &mut rng)?;
        let n_q = self.quantity_names(config).len();
        let mut draws = vec![Vec::with_capacity(config.retained_per_chain()); n_q];
        let mut iterations = Vec::with_capacity(config.retained_per_chain());
        let mut acc = StateAccumulator::new(&state);
        let mut clamp_events = 0;
        let mut max_shift: f64 = 0.0;
        let abort = |iteration: usize, reason: String, state: &ParameterState| Error::ChainAbort {
            chain,
            iteration,
            reason,
            snapshot: serde_json::to_string(state).unwrap_or_default(),
        };
        for iter in 0..config.n_iter {
            let sweep = if config.check_recentering && self.graph.is_some() {
                self.sweep_with_audit(&mut state, &mut rng, config.translation_moves, &mut max_shift)
            } else {
                self.gibbs_sweep(&mut state, &mut rng, config.translation_moves)
            };
            match sweep {
                Ok(events) => clamp_events += events,
                Err(e) => return Err(abort(iter, e.to_string(), &state)),
            }
            if clamp_events > config.max_clamp_events {
                return Err(abort(iter, format!("{clamp_events} variance clamp events"), &state));
            }
            if !state.beta0.is_finite() || !state.beta1.is_finite() {
                return Err(abort(iter, "non-finite fixed effects".into(), &state));
            }
            if iter >= config.burn_in && (iter - config.burn_in).is_multiple_of(config.thin) {
                self.record(&state, config, &mut draws);
                iterations.push(iter);
                acc.add(&state);
            }
        }
        Ok(ChainSamples {
            chain,
            iterations,
            draws,
            mean_state: acc.finish(),
            clamp_events,
            max_recentering_shift: max_shift,
        })
    }

    /// Same update sequence as [`Self::gibbs_sweep`], recording how much
    /// recentering moves any linear predictor.
    fn sweep_with_audit(
        &self,
        state: &mut ParameterState,
        rng: &mut StreamRng,
        translations: bool,
        max_shift: &mut f64,
    ) -> Result<usize> {
        self.update_fixed(state, rng)?;
        if self.client_effects() {
            self.update_clients(state, rng);
        }
        self.update_unstructured(state, rng);
        self.update_structured(state, rng);
        if translations {
            self.translation_moves(state, rng);
        }
        let before = state.clone();
        self.recenter_structured_effects(state, rng);
        if self.isolated.is_empty() {
            *max_shift = max_shift.max(self.max_predictor_change(&before, state));
        }
        let clamps = self.update_variances(state, rng)?;
        if self.spec.pattern_mixture {
            self.update_pi(state, rng);
        }
        self.impute_missing_outcomes(state, rng);
        Ok(clamps)
    }
}

fn fixed_row(design: &Design, o: usize) -> Vec<f64> {
    let i = design.obs_client[o];
    let t = design.time[o];
    let mut row = vec![1.0, t];
    row.extend_from_slice(&design.covariates[i]);
    if design.pattern_mixture {
        let r = if design.pattern[i] { 1.0 } else { 0.0 };
        row.push(r);
        row.push(r * t);
    }
    row
}

/// Runs `config.n_chains` independent chains in parallel.
pub fn run_chains(
    dataset: &Dataset,
    graph: Option<&SessionGraph>,
    spec: &ModelSpec,
    config: &McmcConfig,
) -> Result<PosteriorSamples> {
    config.validate()?;
    let sampler = Sampler::new(dataset, spec, graph)?;
    let results: Vec<Result<ChainSamples>> = (0..config.n_chains)
        .into_par_iter()
        .map(|k| sampler.run_chain(k, config))
        .collect();
    let chains = results.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(PosteriorSamples {
        spec: spec.clone(),
        config: config.clone(),
        data_hash: dataset.content_hash(),
        quantities: sampler.quantity_names(config),
        chains,
        cluster_labels: sampler.design.cluster_labels.clone(),
    })
}

/// Builds the session graph a spec needs, if any.
pub fn graph_for(dataset: &Dataset, spec: &ModelSpec) -> Result<Option<SessionGraph>> {
    use crate::graph::{build_type1_weights, build_type2_weights, Clustering};
    use crate::models::Closeness;
    if spec.family != Family::Car {
        return Ok(None);
    }
    let unit = spec.unit();
    let graph = match spec.closeness() {
        Closeness::Type1 => build_type1_weights(dataset, unit)?,
        Closeness::Type2 => build_type2_weights(dataset, unit)?,
        Closeness::Custom(edges) => {
            let clustering = Clustering::new(dataset, unit)?;
            SessionGraph::from_edges(clustering.labels, unit, edges)?
        }
    };
    Ok(Some(graph))
}

/// Builds the graph and runs all chains.
pub fn fit(dataset: &Dataset, spec: &ModelSpec, config: &McmcConfig) -> Result<PosteriorSamples> {
    let graph = graph_for(dataset, spec)?;
    run_chains(dataset, graph.as_ref(), spec, config)
}
