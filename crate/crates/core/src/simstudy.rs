//! Synthetic rolling-group data and the replicated model-comparison study.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Record};
use crate::diagnostics::{deviance_summaries, gelman_rubin, mc_standard_error};
use crate::models::{Hyperparameters, ModelSpec};
use crate::rng::{derive_seed, stream, StreamRng, TAG_ATTENDANCE, TAG_CHAIN, TAG_OUTCOME, TAG_REPLICATE};
use crate::sampler::{fit, McmcConfig};
use crate::{Error, Result};

/// Clients attending fewer sessions than this form the short-stay pattern.
pub const SHORT_STAY_THRESHOLD: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttendanceTemplate {
    /// Number of sessions in each rolling group.
    pub groups: Vec<u32>,
    pub module_length: u32,
    pub sessions_per_client: u32,
    /// Probability of leaving after each completed module.
    pub dropout_hazard: f64,
    pub target_clients: usize,
    /// Most clients that may enter at one module start.
    pub max_entrants_per_module: usize,
    pub sessions_per_week: f64,
}

impl AttendanceTemplate {
    pub fn bright() -> Self {
        Self {
            groups: vec![36, 40, 40, 129],
            module_length: 4,
            sessions_per_client: 16,
            dropout_hazard: 0.21,
            target_clients: 132,
            max_entrants_per_module: 6,
            sessions_per_week: 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups.is_empty() || self.groups.contains(&0) {
            return Err(Error::Generation("every group needs at least one session".into()));
        }
        if self.module_length == 0 || self.sessions_per_client == 0 {
            return Err(Error::Generation("module length and stay length must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.dropout_hazard) {
            return Err(Error::Generation("dropout hazard must lie in [0, 1]".into()));
        }
        if !(self.sessions_per_week > 0.0) {
            return Err(Error::Generation("sessions per week must be positive".into()));
        }
        let starts = self.entry_points().len();
        if self.target_clients < starts {
            return Err(Error::Generation(format!(
                "{} clients cannot cover {starts} module starts",
                self.target_clients
            )));
        }
        let capacity = starts * self.max_entrants_per_module;
        if self.target_clients > capacity {
            return Err(Error::Generation(format!(
                "{} clients exceed entry capacity {capacity} ({starts} module starts x {} entrants)",
                self.target_clients, self.max_entrants_per_module
            )));
        }
        Ok(())
    }

    /// `(group index, session order)` of every module start.
    pub fn entry_points(&self) -> Vec<(usize, u32)> {
        let mut out = Vec::new();
        for (g, &len) in self.groups.iter().enumerate() {
            let mut order = 1;
            while order <= len {
                out.push((g, order));
                order += self.module_length;
            }
        }
        out
    }
}

fn group_label(g: usize) -> String {
    format!("g{}", g + 1)
}

fn session_label(g: usize, order: u32) -> String {
    format!("g{}s{order:03}", g + 1)
}

/// Attendance skeleton: clients, sessions attended and times, no outcomes.
pub fn generate_attendance(template: &AttendanceTemplate, rng: &mut StreamRng) -> Result<Dataset> {
    template.validate()?;
    let starts = template.entry_points();
    let mut entrants = vec![1usize; starts.len()];
    let mut remaining = template.target_clients - starts.len();
    while remaining > 0 {
        let k = rng.random_range(0..starts.len());
        if entrants[k] < template.max_entrants_per_module {
            entrants[k] += 1;
            remaining -= 1;
        }
    }
    let mut records = Vec::new();
    let mut client = 0usize;
    for (k, &(g, entry)) in starts.iter().enumerate() {
        let group_len = template.groups[g];
        for _ in 0..entrants[k] {
            client += 1;
            let id = format!("c{client:04}");
            let mut attended = 0;
            let mut order = entry;
            'stay: while order <= group_len && attended < template.sessions_per_client {
                records.push(Record {
                    client_id: id.clone(),
                    session_id: session_label(g, order),
                    group_id: group_label(g),
                    session_order: order,
                    module_index: Some((order - 1) / template.module_length + 1),
                    time_weeks: f64::from(order - entry) / template.sessions_per_week,
                    y: None,
                    covariates: Vec::new(),
                });
                attended += 1;
                order += 1;
                let module_done = (order - 1) % template.module_length == 0;
                if module_done
                    && attended < template.sessions_per_client
                    && rng.random::<f64>() < template.dropout_hazard
                {
                    break 'stay;
                }
            }
        }
    }
    Dataset::from_records(records, Vec::new())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Generator {
    LgmCar,
    PmmCar,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    /// Marginal intercept and slope.
    pub beta0: f64,
    pub beta1: f64,
    pub sigma2_b0: f64,
    pub sigma2_b1: f64,
    pub sigma2_eps: f64,
    /// Marginal variance of each session effect.
    pub sigma2_gamma: f64,
    pub delta0: f64,
    pub delta1: f64,
    pub pi: f64,
}

impl Truth {
    pub fn standard() -> Self {
        Self {
            beta0: 15.0,
            beta1: -0.5,
            sigma2_b0: 0.25,
            sigma2_b1: 0.25,
            sigma2_eps: 1.0,
            sigma2_gamma: 1.0,
            delta0: 41.67,
            delta1: -1.83,
            pi: 0.273,
        }
    }

    /// Long-stay pattern coefficients `(β0*, β1*)`.
    pub fn starred(&self) -> (f64, f64) {
        (self.beta0 - self.pi * self.delta0, self.beta1 - self.pi * self.delta1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimScenario {
    pub name: String,
    pub generator: Generator,
    pub rho: f64,
    pub truth: Truth,
    pub attendance: AttendanceTemplate,
    pub replicates: usize,
    pub analysis_models: Vec<ModelSpec>,
    #[serde(default)]
    pub mask_every_other: bool,
}

pub const PRESET_NAMES: [&str; 6] = ["a", "b", "c", "d", "e", "f"];

impl SimScenario {
    pub fn preset(name: &str) -> Option<Self> {
        let (generator, rho) = match name {
            "a" => (Generator::LgmCar, 0.0),
            "b" => (Generator::LgmCar, 0.25),
            "c" => (Generator::LgmCar, 0.5),
            "d" => (Generator::PmmCar, 0.0),
            "e" => (Generator::PmmCar, 0.25),
            "f" => (Generator::PmmCar, 0.5),
            _ => return None,
        };
        let hyper = Hyperparameters::choice7();
        let models = [
            ModelSpec::lgm(),
            ModelSpec::hlm(),
            ModelSpec::car(),
            ModelSpec::lgm().with_pmm(),
            ModelSpec::car().with_pmm(),
        ]
        .into_iter()
        .map(|m| m.with_hyper(hyper.clone()))
        .collect();
        Some(Self {
            name: name.to_string(),
            generator,
            rho,
            truth: Truth::standard(),
            attendance: AttendanceTemplate::bright(),
            replicates: 20,
            analysis_models: models,
            mask_every_other: false,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.attendance.validate()?;
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::Generation(format!("rho = {} must lie in [0, 1)", self.rho)));
        }
        let t = &self.truth;
        for (name, v) in [
            ("sigma2_b0", t.sigma2_b0),
            ("sigma2_b1", t.sigma2_b1),
            ("sigma2_eps", t.sigma2_eps),
            ("sigma2_gamma", t.sigma2_gamma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Generation(format!("{name} must be finite and nonnegative")));
            }
        }
        if self.generator == Generator::PmmCar && !(0.0..=1.0).contains(&t.pi) {
            return Err(Error::Generation("pi must lie in [0, 1]".into()));
        }
        for m in &self.analysis_models {
            m.validate()?;
        }
        Ok(())
    }
}

/// Block-diagonal AR(1) correlation of session effects, one block per group.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionCovariance {
    /// Dataset session indices of each block, in session order.
    pub blocks: Vec<Vec<usize>>,
    pub matrices: Vec<DMatrix<f64>>,
    factors: Vec<DMatrix<f64>>,
}

impl SessionCovariance {
    pub fn size(&self) -> usize {
        self.blocks.iter().map(Vec::len).sum()
    }

    /// Dense matrix over all sessions in dataset order.
    pub fn dense(&self) -> DMatrix<f64> {
        let n = self.size();
        let mut out = DMatrix::zeros(n, n);
        for (idx, m) in self.blocks.iter().zip(&self.matrices) {
            for (a, &i) in idx.iter().enumerate() {
                for (b, &j) in idx.iter().enumerate() {
                    out[(i, j)] = m[(a, b)];
                }
            }
        }
        out
    }

    /// Draw with the given marginal variance.
    pub fn sample(&self, variance: f64, rng: &mut StreamRng) -> Vec<f64> {
        let mut out = vec![0.0; self.size()];
        let scale = variance.sqrt();
        for (idx, l) in self.blocks.iter().zip(&self.factors) {
            let z: Vec<f64> = (0..idx.len()).map(|_| rng.sample(StandardNormal)).collect();
            for (a, &i) in idx.iter().enumerate() {
                let mut v = 0.0;
                for (b, zb) in z.iter().enumerate().take(a + 1) {
                    v += l[(a, b)] * zb;
                }
                out[i] = scale * v;
            }
        }
        out
    }
}

pub fn session_covariance(rho: f64, dataset: &Dataset) -> Result<SessionCovariance> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::Generation(format!("rho = {rho} must lie in [0, 1)")));
    }
    let mut by_group: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in dataset.sessions.iter().enumerate() {
        by_group.entry(s.group_id.as_str()).or_default().push(i);
    }
    let mut blocks = Vec::new();
    let mut matrices = Vec::new();
    let mut factors = Vec::new();
    for (group, idx) in by_group {
        let n = idx.len();
        let m = DMatrix::from_fn(n, n, |a, b| {
            let lag = dataset.sessions[idx[a]].order_index.abs_diff(dataset.sessions[idx[b]].order_index);
            rho.powi(lag as i32)
        });
        let l = m
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Generation(format!("session covariance of group {group} is not positive definite")))?
            .l();
        blocks.push(idx);
        matrices.push(m);
        factors.push(l);
    }
    Ok(SessionCovariance { blocks, matrices, factors })
}

/// Realized quantities of one generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub n_clients: usize,
    pub n_sessions: usize,
    pub n_observations: usize,
    pub n_missing: usize,
    pub n_short_stay: usize,
    pub short_stay_fraction: f64,
    pub warnings: Vec<String>,
}

/// Fills in outcomes under the scenario truth and derives missing-data
/// patterns from realized attendance.
pub fn generate_outcomes(
    skeleton: &Dataset,
    scenario: &SimScenario,
    rng: &mut StreamRng,
) -> Result<(Dataset, GenerationReport)> {
    let t = &scenario.truth;
    let counts = skeleton.sessions_per_client();
    let short: Vec<bool> = counts.iter().map(|&c| c < SHORT_STAY_THRESHOLD).collect();
    let (b0, b1) = match scenario.generator {
        Generator::LgmCar => (t.beta0, t.beta1),
        Generator::PmmCar => t.starred(),
    };
    let cov = session_covariance(scenario.rho, skeleton)?;
    let gamma = cov.sample(t.sigma2_gamma, rng);
    let sd0 = t.sigma2_b0.sqrt();
    let sd1 = t.sigma2_b1.sqrt();
    let client_effects: Vec<(f64, f64)> = (0..skeleton.n_clients())
        .map(|_| {
            let z0: f64 = rng.sample(StandardNormal);
            let z1: f64 = rng.sample(StandardNormal);
            (sd0 * z0, sd1 * z1)
        })
        .collect();
    let sd_eps = t.sigma2_eps.sqrt();
    let mut last_obs = vec![0usize; skeleton.n_clients()];
    for (o, obs) in skeleton.observations.iter().enumerate() {
        last_obs[obs.client] = o;
    }

    let mut records = skeleton.to_records();
    let mut n_missing = 0;
    for (o, (obs, rec)) in skeleton.observations.iter().zip(records.iter_mut()).enumerate() {
        let i = obs.client;
        let time = obs.time_weeks;
        let mut mean = b0 + b1 * time + client_effects[i].0 + client_effects[i].1 * time + gamma[obs.session];
        if scenario.generator == Generator::PmmCar && short[i] {
            mean += t.delta0 + t.delta1 * time;
        }
        let z: f64 = rng.sample(StandardNormal);
        let y = mean + sd_eps * z;
        let order = skeleton.sessions[obs.session].order_index;
        let measured = !scenario.mask_every_other || (order - 1).is_multiple_of(2) || last_obs[i] == o;
        rec.y = measured.then_some(y);
        if !measured {
            n_missing += 1;
        }
    }
    let dataset = Dataset::from_records(records, skeleton.covariate_names.clone())?
        .derive_pattern_indicators(SHORT_STAY_THRESHOLD);
    let n_short = short.iter().filter(|&&s| s).count();
    let mut warnings = Vec::new();
    if n_short == 0 || n_short == short.len() {
        warnings.push(format!(
            "only one missing-data pattern realized ({n_short} of {} clients short-stay)",
            short.len()
        ));
    }
    let report = GenerationReport {
        n_clients: dataset.n_clients(),
        n_sessions: dataset.n_sessions(),
        n_observations: dataset.observations.len(),
        n_missing,
        n_short_stay: n_short,
        short_stay_fraction: n_short as f64 / short.len().max(1) as f64,
        warnings,
    };
    Ok((dataset, report))
}

/// Generates the dataset of one replicate; every replicate owns its streams.
pub fn simulate_replicate(scenario: &SimScenario, seed: u64, replicate: usize) -> Result<(Dataset, GenerationReport)> {
    scenario.validate()?;
    let rep_seed = derive_seed(seed, TAG_REPLICATE, replicate as u64);
    let mut att = stream(rep_seed, TAG_ATTENDANCE, 0);
    let skeleton = generate_attendance(&scenario.attendance, &mut att)?;
    let mut out = stream(rep_seed, TAG_OUTCOME, 0);
    generate_outcomes(&skeleton, scenario, &mut out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateFit {
    pub replicate: usize,
    pub model: String,
    pub mean_b0: f64,
    pub sd_b0: f64,
    pub mean_b1: f64,
    pub sd_b1: f64,
    pub dbar: f64,
    pub max_psrf: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub model: String,
    pub mean_b0: f64,
    pub mcse_mean_b0: f64,
    pub sd_b0: f64,
    pub mcse_sd_b0: f64,
    pub mean_b1: f64,
    pub mcse_mean_b1: f64,
    pub sd_b1: f64,
    pub mcse_sd_b1: f64,
    pub dbar: f64,
    pub mcse_dbar: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationTable {
    pub scenario: String,
    pub rows: Vec<TableRow>,
    /// Included replicates, in replicate order then model order.
    pub fits: Vec<ReplicateFit>,
    /// Replicates dropped because a chain aborted, with the reason.
    pub excluded: Vec<(usize, String)>,
    pub reports: Vec<GenerationReport>,
}

impl ReplicationTable {
    pub fn row(&self, model: &str) -> Option<&TableRow> {
        self.rows.iter().find(|r| r.model == model)
    }

    /// Per-replicate values of one model, in replicate order.
    pub fn fits_of(&self, model: &str) -> Vec<&ReplicateFit> {
        self.fits.iter().filter(|f| f.model == model).collect()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "model", "mean_b0", "mcse", "sd_b0", "mcse", "mean_b1", "mcse", "sd_b1", "mcse", "dbar", "mcse",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.model.clone(),
                format!("{:.4}", r.mean_b0),
                format!("{:.4}", r.mcse_mean_b0),
                format!("{:.4}", r.sd_b0),
                format!("{:.4}", r.mcse_sd_b0),
                format!("{:.4}", r.mean_b1),
                format!("{:.4}", r.mcse_mean_b1),
                format!("{:.4}", r.sd_b1),
                format!("{:.4}", r.mcse_sd_b1),
                format!("{:.2}", r.dbar),
                format!("{:.2}", r.mcse_dbar),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<table>", e))?;
        Ok(())
    }

    pub fn write_replicates_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["replicate", "model", "mean_b0", "sd_b0", "mean_b1", "sd_b1", "dbar", "max_psrf"])?;
        for f in &self.fits {
            w.write_record([
                f.replicate.to_string(),
                f.model.clone(),
                f.mean_b0.to_string(),
                f.sd_b0.to_string(),
                f.mean_b1.to_string(),
                f.sd_b1.to_string(),
                f.dbar.to_string(),
                f.max_psrf.map(|p| p.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<replicates>", e))?;
        Ok(())
    }
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn sd(x: &[f64]) -> f64 {
    let m = mean(x);
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0)).sqrt()
}

fn fit_replicate(
    scenario: &SimScenario,
    mcmc: &McmcConfig,
    replicate: usize,
) -> Result<(Vec<ReplicateFit>, GenerationReport)> {
    let (dataset, report) = simulate_replicate(scenario, mcmc.seed, replicate)?;
    let rep_seed = derive_seed(mcmc.seed, TAG_REPLICATE, replicate as u64);
    let mut fits = Vec::with_capacity(scenario.analysis_models.len());
    for (k, spec) in scenario.analysis_models.iter().enumerate() {
        let config = McmcConfig { seed: derive_seed(rep_seed, TAG_CHAIN, k as u64), ..mcmc.clone() };
        let samples = fit(&dataset, spec, &config)?;
        let b0 = samples.pooled("beta0").expect("beta0 monitored");
        let b1 = samples.pooled("beta1").expect("beta1 monitored");
        let dev = deviance_summaries(&samples, &dataset)?;
        let max_psrf = ["beta0", "beta1"]
            .iter()
            .filter_map(|q| gelman_rubin(&samples.chains_of(q)?).ok())
            .reduce(f64::max);
        fits.push(ReplicateFit {
            replicate,
            model: spec.label(),
            mean_b0: mean(&b0),
            sd_b0: sd(&b0),
            mean_b1: mean(&b1),
            sd_b1: sd(&b1),
            dbar: dev.dbar,
            max_psrf,
        });
    }
    Ok((fits, report))
}

/// Generates `scenario.replicates` datasets, fits every analysis model to
/// each, and tabulates replicate means with Monte Carlo standard errors.
pub fn run_scenario(scenario: &SimScenario, mcmc: &McmcConfig) -> Result<ReplicationTable> {
    scenario.validate()?;
    mcmc.validate()?;
    if scenario.replicates < 2 {
        return Err(Error::Config("at least 2 replicates are required".into()));
    }
    if !mcmc.monitor.contains(&crate::sampler::Monitor::Fixed) {
        return Err(Error::Config("replication needs the fixed effects monitored".into()));
    }
    let results: Vec<Result<(Vec<ReplicateFit>, GenerationReport)>> = (0..scenario.replicates)
        .into_par_iter()
        .map(|r| fit_replicate(scenario, mcmc, r))
        .collect();
    let mut fits = Vec::new();
    let mut reports = Vec::new();
    let mut excluded = Vec::new();
    for (r, res) in results.into_iter().enumerate() {
        match res {
            Ok((f, rep)) => {
                fits.extend(f);
                reports.push(rep);
            }
            Err(e @ Error::ChainAbort { .. }) => excluded.push((r, e.to_string())),
            Err(e) => return Err(e),
        }
    }
    let included = scenario.replicates - excluded.len();
    if included < 2 {
        return Err(Error::Diagnostic(format!(
            "only {included} replicates completed; at least 2 are needed"
        )));
    }
    let mut rows = Vec::new();
    for spec in &scenario.analysis_models {
        let label = spec.label();
        let of: Vec<&ReplicateFit> = fits.iter().filter(|f| f.model == label).collect();
        let col = |g: fn(&ReplicateFit) -> f64| of.iter().map(|f| g(f)).collect::<Vec<f64>>();
        let cell = |v: Vec<f64>| -> Result<(f64, f64)> { Ok((mean(&v), mc_standard_error(&v)?)) };
        let (mean_b0, mcse_mean_b0) = cell(col(|f| f.mean_b0))?;
        let (sd_b0, mcse_sd_b0) = cell(col(|f| f.sd_b0))?;
        let (mean_b1, mcse_mean_b1) = cell(col(|f| f.mean_b1))?;
        let (sd_b1, mcse_sd_b1) = cell(col(|f| f.sd_b1))?;
        let (dbar, mcse_dbar) = cell(col(|f| f.dbar))?;
        rows.push(TableRow {
            model: label,
            mean_b0,
            mcse_mean_b0,
            sd_b0,
            mcse_sd_b0,
            mean_b1,
            mcse_mean_b1,
            sd_b1,
            mcse_sd_b1,
            dbar,
            mcse_dbar,
        });
    }
    Ok(ReplicationTable { scenario: scenario.name.clone(), rows, fits, excluded, reports })
}

/// MCMC settings of the desk-scale study.
pub fn desk_scale_mcmc(seed: u64) -> McmcConfig {
    McmcConfig { n_chains: 2, n_iter: 3000, burn_in: 1000, thin: 1, seed, ..McmcConfig::default() }
}
