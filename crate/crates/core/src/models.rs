//! Analysis-model families, their parameters, and the quantities evaluated
//! on a single parameter draw: linear predictor, deviance, log prior.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize};

use crate::data::Dataset;
use crate::graph::{ClusterUnit, Clustering, SessionGraph};
use crate::{Error, Result};

/// Variance of the proper normal stand-in for the flat intercept prior.
pub const INTERCEPT_PRIOR_VARIANCE: f64 = 1e8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// No session effects.
    Lgm,
    /// Independent session effects.
    Hlm,
    /// Convolution prior: CAR structured plus independent unstructured effects.
    Car,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Closeness {
    Type1,
    Type2,
    /// Explicit `(s, j, w)` edges over cluster indices.
    Custom(Vec<(usize, usize, f64)>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaPrior {
    pub shape: f64,
    pub rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalPrior {
    pub mean: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlopePrior {
    /// β1 ~ N(0, variance).
    FixedVariance(f64),
    /// β1 ~ N(0, σ²_β1) with σ⁻²_β1 ~ Gamma(shape, rate).
    GammaPrecision(GammaPrior),
}

/// Gamma priors use the shape/rate form, so E = shape / rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub psi_y0: f64,
    pub psi_y1: f64,
    pub psi_00: f64,
    pub psi_01: f64,
    pub psi_10: f64,
    pub psi_11: f64,
    pub psi_nu0: f64,
    pub psi_nu1: f64,
    pub d0: f64,
    pub d1: f64,
    pub slope_prior: SlopePrior,
    /// Prior variance of each covariate coefficient.
    pub sigma2_beta: f64,
    pub offset_intercept_prior: NormalPrior,
    pub offset_slope_prior: NormalPrior,
    pub pattern_a: f64,
    pub pattern_b: f64,
}

impl Hyperparameters {
    /// Equal prior weight on structured and unstructured session variation.
    pub fn choice7() -> Self {
        Self {
            psi_nu0: 0.10,
            psi_nu1: 0.10,
            d0: 0.10,
            d1: 0.2,
            ..Self::base()
        }
    }

    /// Independent priors, more mass near zero for δ.
    pub fn choice8() -> Self {
        Self {
            psi_nu0: 1.0,
            psi_nu1: 1.0,
            d0: 0.5,
            d1: 0.0005,
            ..Self::base()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "choice7" => Some(Self::choice7()),
            "choice8" => Some(Self::choice8()),
            _ => None,
        }
    }

    fn base() -> Self {
        Self {
            psi_y0: 1.0,
            psi_y1: 1.0,
            psi_00: 1.0,
            psi_01: 1.0,
            psi_10: 1.0,
            psi_11: 1.0,
            psi_nu0: 1.0,
            psi_nu1: 1.0,
            d0: 1.0,
            d1: 1.0,
            slope_prior: SlopePrior::GammaPrecision(GammaPrior {
                shape: 1.0,
                rate: 1.0,
            }),
            sigma2_beta: 1e4,
            offset_intercept_prior: NormalPrior {
                mean: 0.0,
                variance: 10.0,
            },
            offset_slope_prior: NormalPrior {
                mean: 0.0,
                variance: 10.0,
            },
            pattern_a: 1.0,
            pattern_b: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let gammas = [
            ("psi_y0", self.psi_y0),
            ("psi_y1", self.psi_y1),
            ("psi_00", self.psi_00),
            ("psi_01", self.psi_01),
            ("psi_10", self.psi_10),
            ("psi_11", self.psi_11),
            ("psi_nu0", self.psi_nu0),
            ("psi_nu1", self.psi_nu1),
            ("d0", self.d0),
            ("d1", self.d1),
            ("sigma2_beta", self.sigma2_beta),
            ("offset_intercept_prior.variance", self.offset_intercept_prior.variance),
            ("offset_slope_prior.variance", self.offset_slope_prior.variance),
            ("pattern_a", self.pattern_a),
            ("pattern_b", self.pattern_b),
        ];
        for (name, v) in gammas {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        match self.slope_prior {
            SlopePrior::FixedVariance(v) if !(v.is_finite() && v > 0.0) => {
                Err(Error::Config(format!("slope prior variance must be positive, got {v}")))
            }
            SlopePrior::GammaPrecision(g) if !(g.shape > 0.0 && g.rate > 0.0) => {
                Err(Error::Config("slope precision prior must have positive shape and rate".into()))
            }
            _ => Ok(()),
        }
    }
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Self::choice7()
    }
}

fn hyper_or_preset<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Hyperparameters, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Preset(String),
        Explicit(Box<Hyperparameters>),
    }
    match Repr::deserialize(d)? {
        Repr::Preset(name) => Hyperparameters::preset(&name).ok_or_else(|| {
            serde::de::Error::custom(format!("unknown hyperparameter preset `{name}` (choice7|choice8)"))
        }),
        Repr::Explicit(h) => Ok(*h),
    }
}

/// Restrictions used for reduced models, e.g. the fixed-variance linear
/// model that has a closed-form posterior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Restrictions {
    #[serde(default = "yes")]
    pub client_effects: bool,
    #[serde(default)]
    pub fixed_sigma2_eps: Option<f64>,
}

fn yes() -> bool {
    true
}

impl Default for Restrictions {
    fn default() -> Self {
        Self {
            client_effects: true,
            fixed_sigma2_eps: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    #[serde(default)]
    pub pattern_mixture: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub closeness: Option<Closeness>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<ClusterUnit>,
    #[serde(default, deserialize_with = "hyper_or_preset")]
    pub hyper: Hyperparameters,
    #[serde(default)]
    pub restrict: Restrictions,
}

impl ModelSpec {
    pub fn new(family: Family) -> Self {
        Self {
            family,
            pattern_mixture: false,
            closeness: None,
            unit: None,
            hyper: Hyperparameters::default(),
            restrict: Restrictions::default(),
        }
    }

    pub fn lgm() -> Self {
        Self::new(Family::Lgm)
    }

    pub fn hlm() -> Self {
        Self::new(Family::Hlm)
    }

    pub fn car() -> Self {
        Self::new(Family::Car)
    }

    pub fn with_pmm(mut self) -> Self {
        self.pattern_mixture = true;
        self
    }

    pub fn with_hyper(mut self, hyper: Hyperparameters) -> Self {
        self.hyper = hyper;
        self
    }

    pub fn with_closeness(mut self, closeness: Closeness) -> Self {
        self.closeness = Some(closeness);
        self
    }

    pub fn with_unit(mut self, unit: ClusterUnit) -> Self {
        self.unit = Some(unit);
        self
    }

    pub fn closeness(&self) -> Closeness {
        self.closeness.clone().unwrap_or(Closeness::Type1)
    }

    pub fn unit(&self) -> ClusterUnit {
        self.unit.unwrap_or(ClusterUnit::Session)
    }

    pub fn has_session_effects(&self) -> bool {
        self.family != Family::Lgm
    }

    pub fn is_car(&self) -> bool {
        self.family == Family::Car
    }

    /// Table label: LGM, HLM, CAR, PMM, HLM+PMM, CAR+PMM.
    pub fn label(&self) -> String {
        match (self.family, self.pattern_mixture) {
            (Family::Lgm, false) => "LGM".into(),
            (Family::Lgm, true) => "PMM".into(),
            (Family::Hlm, false) => "HLM".into(),
            (Family::Hlm, true) => "HLM+PMM".into(),
            (Family::Car, false) => "CAR".into(),
            (Family::Car, true) => "CAR+PMM".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.family == Family::Lgm && (self.closeness.is_some() || self.unit.is_some()) {
            return Err(Error::Config(
                "LGM has no session effects; closeness and unit must be unset".into(),
            ));
        }
        if let Some(v) = self.restrict.fixed_sigma2_eps {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("fixed sigma2_eps must be positive, got {v}")));
            }
        }
        self.hyper.validate()
    }
}

impl FromStr for ModelSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lgm" => Ok(Self::lgm()),
            "hlm" => Ok(Self::hlm()),
            "car" => Ok(Self::car()),
            "pmm" => Ok(Self::lgm().with_pmm()),
            "hlm+pmm" => Ok(Self::hlm().with_pmm()),
            "car+pmm" => Ok(Self::car().with_pmm()),
            other => Err(Error::Config(format!(
                "unknown model `{other}` (lgm|hlm|car|pmm|hlm+pmm|car+pmm)"
            ))),
        }
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// One full assignment of every sampled quantity.
///
/// Under a pattern-mixture spec `beta0`/`beta1` hold the starred (long-stay)
/// parameters; see [`marginalize_pmm`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterState {
    pub beta0: f64,
    pub beta1: f64,
    pub beta_cov: Vec<f64>,
    pub b0: Vec<f64>,
    pub b1: Vec<f64>,
    /// Structured (CAR) session effects.
    pub u: Vec<f64>,
    /// Unstructured session effects.
    pub nu: Vec<f64>,
    pub sigma2_eps: f64,
    pub sigma2_0: f64,
    pub sigma2_1: f64,
    pub sigma2_nu: f64,
    /// CAR conditional variance scale.
    pub delta: f64,
    pub sigma2_beta1: f64,
    /// Δ0: intercept offset of the short-stay pattern.
    pub offset_intercept: f64,
    /// Δ1: slope offset of the short-stay pattern.
    pub offset_slope: f64,
    pub pi: f64,
    /// Observation index -> imputed outcome.
    pub imputed: BTreeMap<usize, f64>,
}

impl ParameterState {
    /// All-zero effects with unit variances.
    pub fn zeros(n_covariates: usize, n_clients: usize, n_clusters: usize) -> Self {
        Self {
            beta0: 0.0,
            beta1: 0.0,
            beta_cov: vec![0.0; n_covariates],
            b0: vec![0.0; n_clients],
            b1: vec![0.0; n_clients],
            u: vec![0.0; n_clusters],
            nu: vec![0.0; n_clusters],
            sigma2_eps: 1.0,
            sigma2_0: 1.0,
            sigma2_1: 1.0,
            sigma2_nu: 1.0,
            delta: 1.0,
            sigma2_beta1: 1.0,
            offset_intercept: 0.0,
            offset_slope: 0.0,
            pi: 0.0,
            imputed: BTreeMap::new(),
        }
    }

    /// Total session effect γ_s = u_s + ν_s.
    pub fn gamma(&self, cluster: usize) -> f64 {
        self.u[cluster] + self.nu[cluster]
    }
}

/// Index structure tying a dataset to a model spec.
#[derive(Debug, Clone)]
pub struct Design {
    pub n_clients: usize,
    pub n_clusters: usize,
    pub n_covariates: usize,
    pub pattern_mixture: bool,
    pub obs_client: Vec<usize>,
    pub obs_cluster: Vec<usize>,
    pub time: Vec<f64>,
    pub outcome: Vec<Option<f64>>,
    /// Centered covariates per client.
    pub covariates: Vec<Vec<f64>>,
    /// R_i per client (all false when not a pattern-mixture spec).
    pub pattern: Vec<bool>,
    pub cluster_labels: Vec<String>,
    pub client_labels: Vec<String>,
    pub covariate_names: Vec<String>,
}

impl Design {
    pub fn new(dataset: &Dataset, spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let clustering = Clustering::new(dataset, spec.unit())?;
        let pattern = if spec.pattern_mixture {
            dataset
                .clients
                .iter()
                .map(|c| {
                    c.pattern.ok_or_else(|| {
                        Error::Config(format!(
                            "pattern-mixture model requires R for every client; client {} has none",
                            c.id
                        ))
                    })
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            vec![false; dataset.n_clients()]
        };
        Ok(Self {
            n_clients: dataset.n_clients(),
            n_clusters: clustering.len(),
            n_covariates: dataset.n_covariates(),
            pattern_mixture: spec.pattern_mixture,
            obs_client: dataset.observations.iter().map(|o| o.client).collect(),
            obs_cluster: clustering.observation_clusters(dataset),
            time: dataset.observations.iter().map(|o| o.time_weeks).collect(),
            outcome: dataset.observations.iter().map(|o| o.outcome).collect(),
            covariates: dataset.clients.iter().map(|c| c.covariates.clone()).collect(),
            pattern,
            cluster_labels: clustering.labels,
            client_labels: dataset.clients.iter().map(|c| c.id.clone()).collect(),
            covariate_names: dataset.covariate_names.clone(),
        })
    }

    pub fn n_obs(&self) -> usize {
        self.time.len()
    }

    pub fn check_state(&self, state: &ParameterState) -> Result<()> {
        let ok = state.beta_cov.len() == self.n_covariates
            && state.b0.len() == self.n_clients
            && state.b1.len() == self.n_clients
            && state.u.len() == self.n_clusters
            && state.nu.len() == self.n_clusters;
        if ok {
            Ok(())
        } else {
            Err(Error::Validation("parameter state dimensions do not match the dataset".into()))
        }
    }

    /// Fixed-effect part of the predictor: β0 + β1 t + Σ β X (+ pattern offsets).
    pub fn fixed_part(&self, state: &ParameterState, obs: usize) -> f64 {
        let i = self.obs_client[obs];
        let t = self.time[obs];
        let mut v = state.beta0 + state.beta1 * t;
        for (b, x) in state.beta_cov.iter().zip(&self.covariates[i]) {
            v += b * x;
        }
        if self.pattern_mixture && self.pattern[i] {
            v += state.offset_intercept + state.offset_slope * t;
        }
        v
    }
}

/// Mean of y_is under the current draw.
pub fn linear_predictor(state: &ParameterState, obs: usize, design: &Design) -> f64 {
    let i = design.obs_client[obs];
    let c = design.obs_cluster[obs];
    let t = design.time[obs];
    design.fixed_part(state, obs) + state.b0[i] + state.b1[i] * t + state.u[c] + state.nu[c]
}

/// −2 × Gaussian log-likelihood of the observed outcomes (growth submodel only).
pub fn deviance(state: &ParameterState, design: &Design) -> f64 {
    let log_norm = (2.0 * PI * state.sigma2_eps).ln();
    design
        .outcome
        .iter()
        .enumerate()
        .filter_map(|(o, y)| y.map(|y| (o, y)))
        .map(|(o, y)| {
            let r = y - linear_predictor(state, o, design);
            log_norm + r * r / state.sigma2_eps
        })
        .sum()
}

/// Marginal intercept and slope β* + πΔ of a pattern-mixture draw.
pub fn marginalize_pmm(state: &ParameterState) -> (f64, f64) {
    (
        state.beta0 + state.pi * state.offset_intercept,
        state.beta1 + state.pi * state.offset_slope,
    )
}

fn normal_log(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * var.ln() - (x - mean).powi(2) / (2.0 * var)
}

fn gamma_log(x: f64, shape: f64, rate: f64) -> f64 {
    (shape - 1.0) * x.ln() - rate * x
}

/// Log density of the intrinsic CAR prior up to a constant:
/// −(S−G)/2 · log δ − Σ_{s<j} w_sj (u_s − u_j)² / (2δ).
pub fn car_log_density(u: &[f64], delta: f64, graph: &SessionGraph) -> f64 {
    let rank = (graph.size() - graph.n_islands()) as f64;
    -0.5 * rank * delta.ln() - graph.pairwise_energy(u) / (2.0 * delta)
}

/// Sum of log prior densities up to an additive constant. Includes the
/// random-effect densities of b and ν.
pub fn log_prior(state: &ParameterState, spec: &ModelSpec, graph: Option<&SessionGraph>) -> Result<f64> {
    let h = &spec.hyper;
    let variances = [
        state.sigma2_eps,
        state.sigma2_0,
        state.sigma2_1,
        state.sigma2_nu,
        state.delta,
        state.sigma2_beta1,
    ];
    if variances.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::Validation("variance components must be positive".into()));
    }
    let mut lp = 0.0;
    match h.slope_prior {
        SlopePrior::FixedVariance(v) => lp += normal_log(state.beta1, 0.0, v),
        SlopePrior::GammaPrecision(g) => {
            lp += normal_log(state.beta1, 0.0, state.sigma2_beta1);
            lp += gamma_log(1.0 / state.sigma2_beta1, g.shape, g.rate);
        }
    }
    lp += state
        .beta_cov
        .iter()
        .map(|b| normal_log(*b, 0.0, h.sigma2_beta))
        .sum::<f64>();
    if spec.restrict.fixed_sigma2_eps.is_none() {
        lp += gamma_log(1.0 / state.sigma2_eps, h.psi_y0, h.psi_y1);
    }
    if spec.restrict.client_effects {
        lp += gamma_log(1.0 / state.sigma2_0, h.psi_00, h.psi_01);
        lp += gamma_log(1.0 / state.sigma2_1, h.psi_10, h.psi_11);
        lp += state.b0.iter().map(|b| normal_log(*b, 0.0, state.sigma2_0)).sum::<f64>();
        lp += state.b1.iter().map(|b| normal_log(*b, 0.0, state.sigma2_1)).sum::<f64>();
    }
    if spec.has_session_effects() {
        lp += gamma_log(1.0 / state.sigma2_nu, h.psi_nu0, h.psi_nu1);
        lp += state.nu.iter().map(|v| normal_log(*v, 0.0, state.sigma2_nu)).sum::<f64>();
    }
    if spec.is_car() {
        let graph = graph.ok_or_else(|| Error::Config("CAR prior needs a session graph".into()))?;
        lp += gamma_log(1.0 / state.delta, h.d0, h.d1);
        lp += car_log_density(&state.u, state.delta, graph);
    }
    if spec.pattern_mixture {
        let (a, b) = (h.offset_intercept_prior, h.offset_slope_prior);
        lp += normal_log(state.offset_intercept, a.mean, a.variance);
        lp += normal_log(state.offset_slope, b.mean, b.variance);
        if !(0.0..=1.0).contains(&state.pi) {
            return Err(Error::Validation("pi must lie in [0, 1]".into()));
        }
        lp += (h.pattern_a - 1.0) * state.pi.ln() + (h.pattern_b - 1.0) * (1.0 - state.pi).ln();
    }
    Ok(lp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Record;

    fn one_obs_design(t: f64, y: f64, short_stay: bool) -> (Dataset, Design, ModelSpec) {
        let rec = Record {
            client_id: "a".into(),
            session_id: "s1".into(),
            group_id: "g".into(),
            session_order: 1,
            module_index: None,
            time_weeks: t,
            y: Some(y),
            covariates: vec![],
        };
        let mut ds = Dataset::from_records(vec![rec], vec![]).unwrap();
        ds.clients[0].pattern = Some(short_stay);
        let spec = ModelSpec::lgm().with_pmm();
        let design = Design::new(&ds, &spec).unwrap();
        (ds, design, spec)
    }

    #[test]
    fn predictor_at_truth_values() {
        let (_, design, _) = one_obs_design(8.0, 0.0, false);
        let mut s = ParameterState::zeros(0, 1, 1);
        s.beta0 = 15.0;
        s.beta1 = -0.5;
        assert_eq!(linear_predictor(&s, 0, &design), 11.0);
    }

    #[test]
    fn predictor_adds_pattern_offsets() {
        let (_, design, _) = one_obs_design(0.0, 0.0, true);
        let mut s = ParameterState::zeros(0, 1, 1);
        s.beta0 = 15.0;
        s.beta1 = -0.5;
        s.offset_intercept = 41.67;
        s.offset_slope = -1.83;
        assert!((linear_predictor(&s, 0, &design) - 56.67).abs() < 1e-12);
    }

    #[test]
    fn pmm_without_patterns_is_config_error() {
        let (mut ds, _, spec) = one_obs_design(0.0, 0.0, true);
        ds.clients[0].pattern = None;
        assert!(matches!(Design::new(&ds, &spec), Err(Error::Config(_))));
    }

    #[test]
    fn deviance_examples() {
        let (_, design, _) = one_obs_design(0.0, 2.0, false);
        let mut s = ParameterState::zeros(0, 1, 1);
        s.beta0 = 2.0;
        s.sigma2_eps = 1.0 / (2.0 * PI);
        assert!(deviance(&s, &design).abs() < 1e-12);
        s.sigma2_eps = 1.0;
        assert!((deviance(&s, &design) - (2.0 * PI).ln()).abs() < 1e-12);
        assert!((deviance(&s, &design) - 1.8379).abs() < 1e-4);
    }

    #[test]
    fn marginal_pmm_values() {
        let mut s = ParameterState::zeros(0, 0, 0);
        s.beta0 = 3.624;
        s.offset_intercept = 41.67;
        s.pi = 0.273;
        s.beta1 = 0.0;
        s.offset_slope = -1.83;
        let (b0, b1) = marginalize_pmm(&s);
        assert!((b0 - 15.0).abs() < 0.01);
        assert!((b1 + 0.5).abs() < 0.001);
        s.pi = 0.0;
        assert_eq!(marginalize_pmm(&s), (3.624, 0.0));
    }

    #[test]
    fn car_term_examples() {
        let labels = vec!["a".to_string(), "b".to_string()];
        let g = SessionGraph::from_edges(labels, ClusterUnit::Session, vec![(0, 1, 1.0)]).unwrap();
        // Quadratic part only: drop the log δ term.
        let quad = car_log_density(&[0.0, 2.0], 2.0, &g) + 0.5 * 2f64.ln();
        assert!((quad + 1.0).abs() < 1e-12);
        let flat = car_log_density(&[3.0, 3.0], 2.0, &g) + 0.5 * 2f64.ln();
        assert_eq!(flat, 0.0);
    }

    #[test]
    fn spec_labels_and_parsing() {
        for name in ["lgm", "hlm", "car", "pmm", "hlm+pmm", "car+pmm"] {
            let spec: ModelSpec = name.parse().unwrap();
            assert_eq!(spec.label().to_ascii_lowercase(), name);
        }
        assert!("glm".parse::<ModelSpec>().is_err());
    }

    #[test]
    fn lgm_rejects_closeness() {
        let spec = ModelSpec::lgm().with_closeness(Closeness::Type1);
        assert!(spec.validate().is_err());
    }

    #[test]
    fn spec_json_accepts_presets() {
        let spec: ModelSpec = serde_json::from_str(
            r#"{"family":"car","pattern_mixture":true,"closeness":"type2","unit":"module","hyper":"choice8"}"#,
        )
        .unwrap();
        assert_eq!(spec.hyper, Hyperparameters::choice8());
        assert_eq!(spec.closeness(), Closeness::Type2);
        assert_eq!(spec.unit(), ClusterUnit::Module);
        let back: ModelSpec = serde_json::from_str(&serde_json::to_string(&spec).unwrap()).unwrap();
        assert_eq!(back, spec);
        assert!(serde_json::from_str::<ModelSpec>(r#"{"family":"car","hyper":"choice9"}"#).is_err());
    }

    #[test]
    fn preset_values() {
        let h7 = Hyperparameters::choice7();
        assert_eq!((h7.psi_nu0, h7.psi_nu1, h7.d0, h7.d1), (0.1, 0.1, 0.1, 0.2));
        let h8 = Hyperparameters::choice8();
        assert_eq!((h8.psi_nu0, h8.psi_nu1, h8.d0, h8.d1), (1.0, 1.0, 0.5, 0.0005));
        assert_eq!((h7.psi_y0, h7.psi_y1, h7.psi_00, h7.psi_11), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn log_prior_rejects_nonpositive_variance() {
        let mut s = ParameterState::zeros(0, 1, 1);
        s.sigma2_eps = 0.0;
        assert!(log_prior(&s, &ModelSpec::lgm(), None).is_err());
    }
}
