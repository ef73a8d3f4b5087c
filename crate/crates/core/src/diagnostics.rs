//! Convergence and summary statistics for posterior draws.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::graph::SessionGraph;
use crate::models::{deviance, Design};
use crate::sampler::PosteriorSamples;
use crate::{Error, Result};

pub const PSRF_THRESHOLD: f64 = 1.1;

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn sample_var(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0)
}

/// Potential scale reduction factor.
///
/// Chains must have equal length of at least 2, and there must be at least
/// two chains.
pub fn gelman_rubin(chains: &[&[f64]]) -> Result<f64> {
    let m = chains.len();
    if m < 2 {
        return Err(Error::Diagnostic("PSRF needs at least 2 chains".into()));
    }
    let n = chains[0].len();
    if n < 2 {
        return Err(Error::Diagnostic("PSRF needs at least 2 draws per chain".into()));
    }
    if chains.iter().any(|c| c.len() != n) {
        return Err(Error::Diagnostic("chains differ in length".into()));
    }
    if chains.iter().flat_map(|c| c.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Diagnostic("non-finite draw".into()));
    }
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let b_over_n = sample_var(&means);
    let w = chains.iter().map(|c| sample_var(c)).sum::<f64>() / m as f64;
    if w <= 0.0 {
        return Err(Error::Diagnostic("within-chain variance is zero".into()));
    }
    let nf = n as f64;
    let v = (nf - 1.0) / nf * w + b_over_n;
    Ok((v / w).sqrt())
}

/// Shortest interval spanning `round(level · m)` consecutive sorted draws.
/// Ties go to the lowest start.
pub fn hpd_interval(draws: &[f64], level: f64) -> Result<(f64, f64)> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Diagnostic(format!("HPD level {level} must lie in (0, 1)")));
    }
    let m = draws.len();
    if draws.iter().any(|v| !v.is_finite()) {
        return Err(Error::Diagnostic("non-finite draw".into()));
    }
    let k = (level * m as f64).round() as usize;
    if k < 1 || k >= m {
        return Err(Error::Diagnostic(format!(
            "{m} draws are too few for a {level} HPD interval"
        )));
    }
    let mut sorted = draws.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut best = 0;
    let mut width = f64::INFINITY;
    for start in 0..m - k + 1 {
        let w = sorted[start + k - 1] - sorted[start];
        if w < width {
            width = w;
            best = start;
        }
    }
    Ok((sorted[best], sorted[best + k - 1]))
}

/// SD / sqrt(n) of independent replicate estimates.
pub fn mc_standard_error(values: &[f64]) -> Result<f64> {
    if values.len() < 2 {
        return Err(Error::Diagnostic("MC standard error needs at least 2 values".into()));
    }
    Ok(sample_var(values).sqrt() / (values.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DevianceSummary {
    pub dbar: f64,
    pub d_at_mean: f64,
    pub pd: f64,
    pub dic: f64,
}

/// Mean posterior deviance, deviance at the posterior mean, pD and DIC.
pub fn deviance_summaries(samples: &PosteriorSamples, dataset: &crate::data::Dataset) -> Result<DevianceSummary> {
    let draws = samples
        .pooled("deviance")
        .ok_or_else(|| Error::Diagnostic("deviance was not recorded".into()))?;
    if draws.is_empty() {
        return Err(Error::Diagnostic("no deviance draws".into()));
    }
    let dbar = mean(&draws);
    let design = Design::new(dataset, &samples.spec)?;
    let d_at_mean = deviance(&samples.posterior_mean_state(), &design);
    let pd = dbar - d_at_mean;
    Ok(DevianceSummary { dbar, d_at_mean, pd, dic: dbar + pd })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantitySummary {
    pub quantity: String,
    pub mean: f64,
    pub sd: f64,
    pub hpd_lo: f64,
    pub hpd_hi: f64,
    /// Absent for single-chain fits.
    pub psrf: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternSummary {
    pub n_short: usize,
    pub n_long: usize,
    pub pi_mean: f64,
    pub beta0_short: f64,
    pub beta1_short: f64,
    pub beta0_long: f64,
    pub beta1_long: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub model: String,
    pub data_hash: String,
    pub hpd_level: f64,
    pub quantities: Vec<QuantitySummary>,
    pub deviance: DevianceSummary,
    pub converged: bool,
    pub max_psrf: Option<f64>,
    pub clamp_events: usize,
    pub patterns: Option<PatternSummary>,
    pub notes: Vec<String>,
}

impl FitSummary {
    pub fn get(&self, name: &str) -> Option<&QuantitySummary> {
        self.quantities.iter().find(|q| q.quantity == name)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        write_quantities_csv(&self.quantities, writer)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Writes `quantity,mean,sd,hpd_lo,hpd_hi,psrf` rows.
pub fn write_quantities_csv<W: Write>(rows: &[QuantitySummary], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["quantity", "mean", "sd", "hpd_lo", "hpd_hi", "psrf"])?;
    for q in rows {
        w.write_record([
            q.quantity.clone(),
            q.mean.to_string(),
            q.sd.to_string(),
            q.hpd_lo.to_string(),
            q.hpd_hi.to_string(),
            q.psrf.map(|p| p.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<summary>", e))?;
    Ok(())
}

/// Mean, SD, HPD interval and PSRF of one quantity from per-chain draws.
/// PSRF is `None` for a single chain or when it is undefined.
pub fn summarize_quantity(name: &str, chains: &[&[f64]], level: f64) -> Result<QuantitySummary> {
    let pooled: Vec<f64> = chains.iter().flat_map(|c| c.iter().copied()).collect();
    if pooled.is_empty() {
        return Err(Error::Diagnostic(format!("{name}: no draws")));
    }
    let m = mean(&pooled);
    let sd = if pooled.len() > 1 { sample_var(&pooled).sqrt() } else { 0.0 };
    let (hpd_lo, hpd_hi) = hpd_interval(&pooled, level)?;
    let psrf = if chains.len() >= 2 { gelman_rubin(chains).ok() } else { None };
    Ok(QuantitySummary { quantity: name.to_string(), mean: m, sd, hpd_lo, hpd_hi, psrf })
}

/// Per-quantity summaries, PSRF, deviance statistics and (for
/// pattern-mixture fits) per-pattern trajectories.
pub fn summarize(samples: &PosteriorSamples, dataset: &crate::data::Dataset, hpd_level: f64) -> Result<FitSummary> {
    let mut quantities = Vec::with_capacity(samples.quantities.len());
    let mut max_psrf: Option<f64> = None;
    let mut notes = Vec::new();
    for name in &samples.quantities {
        let chains = samples.chains_of(name).expect("listed quantity");
        let q = summarize_quantity(name, &chains, hpd_level)?;
        match q.psrf {
            Some(r) if name != "deviance" => max_psrf = Some(max_psrf.map_or(r, |p: f64| p.max(r))),
            None if chains.len() >= 2 => notes.push(format!("{name}: PSRF undefined (no within-chain variation)")),
            _ => {}
        }
        quantities.push(q);
    }
    let deviance = deviance_summaries(samples, dataset)?;
    if samples.spec.pattern_mixture {
        notes.push(
            "DIC depends on the parameterization; pD for pattern-mixture fits is not comparable across models".into(),
        );
    }
    let patterns = if samples.spec.pattern_mixture {
        let get = |n: &str| quantities.iter().find(|q| q.quantity == n).map(|q| q.mean);
        let n_short = dataset.clients.iter().filter(|c| c.pattern == Some(true)).count();
        match (get("beta0_star"), get("beta1_star"), get("Delta0"), get("Delta1"), get("pi")) {
            (Some(b0), Some(b1), Some(d0), Some(d1), Some(pi)) => Some(PatternSummary {
                n_short,
                n_long: dataset.n_clients() - n_short,
                pi_mean: pi,
                beta0_short: b0 + d0,
                beta1_short: b1 + d1,
                beta0_long: b0,
                beta1_long: b1,
            }),
            _ => None,
        }
    } else {
        None
    };
    let converged = samples.chains.len() >= 2 && max_psrf.is_some_and(|r| r < PSRF_THRESHOLD);
    Ok(FitSummary {
        model: samples.spec.label(),
        data_hash: samples.data_hash.clone(),
        hpd_level,
        quantities,
        deviance,
        converged,
        max_psrf,
        clamp_events: samples.clamp_events(),
        patterns,
        notes,
    })
}

/// Rows of a model comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub source: String,
    pub model: String,
    pub dbar: f64,
    pub pd: f64,
    pub dic: f64,
    pub beta1_mean: Option<f64>,
    pub beta1_hpd_lo: Option<f64>,
    pub beta1_hpd_hi: Option<f64>,
}

/// Builds a comparison sorted by Dbar (ties by source name). All summaries
/// must come from the same dataset.
pub fn compare_fits(fits: &[(String, FitSummary)]) -> Result<Vec<ComparisonRow>> {
    if fits.is_empty() {
        return Err(Error::Diagnostic("nothing to compare".into()));
    }
    let hash = &fits[0].1.data_hash;
    if let Some((src, _)) = fits.iter().find(|(_, f)| &f.data_hash != hash) {
        return Err(Error::Validation(format!(
            "{src} was fitted to a different dataset than {}",
            fits[0].0
        )));
    }
    let mut rows: Vec<ComparisonRow> = fits
        .iter()
        .map(|(src, f)| {
            let b1 = f.get("beta1");
            ComparisonRow {
                source: src.clone(),
                model: f.model.clone(),
                dbar: f.deviance.dbar,
                pd: f.deviance.pd,
                dic: f.deviance.dic,
                beta1_mean: b1.map(|q| q.mean),
                beta1_hpd_lo: b1.map(|q| q.hpd_lo),
                beta1_hpd_hi: b1.map(|q| q.hpd_hi),
            }
        })
        .collect();
    rows.sort_by(|a, b| a.dbar.total_cmp(&b.dbar).then_with(|| a.source.cmp(&b.source)));
    Ok(rows)
}

pub fn write_comparison<W: Write>(rows: &[ComparisonRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["source", "model", "dbar", "pd", "dic", "beta1_mean", "beta1_hpd_lo", "beta1_hpd_hi"])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.source.clone(),
            r.model.clone(),
            r.dbar.to_string(),
            r.pd.to_string(),
            r.dic.to_string(),
            opt(r.beta1_mean),
            opt(r.beta1_hpd_lo),
            opt(r.beta1_hpd_hi),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<comparison>", e))?;
    Ok(())
}

/// Posterior mean of each cluster's total effect, keyed by label.
pub fn session_effect_means(samples: &PosteriorSamples) -> BTreeMap<String, f64> {
    samples
        .cluster_labels
        .iter()
        .filter_map(|label| {
            let draws = samples.pooled(&format!("gamma[{label}]"))?;
            Some((label.clone(), mean(&draws)))
        })
        .collect()
}

/// Posterior means of the structured effects smoothed over the graph: for
/// each unit, the average of its neighbors' γ means.
pub fn neighbor_smoothed(samples: &PosteriorSamples, graph: &SessionGraph) -> Vec<Option<f64>> {
    let means = session_effect_means(samples);
    let vals: Vec<Option<f64>> = graph.labels.iter().map(|l| means.get(l).copied()).collect();
    (0..graph.size())
        .map(|s| {
            let nb = graph.neighbors(s);
            if nb.is_empty() {
                return None;
            }
            let mut num = 0.0;
            for &(j, w) in nb {
                num += w * vals[j]?;
            }
            Some(num / graph.row_sum(s))
        })
        .collect()
}
