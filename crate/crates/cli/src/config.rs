//! Experiment configuration.
//!
//! The primary format is TOML, written with dotted keys:
//!
//! ```toml
//! problem.name = "fig1"
//! scheme.kind = "tte"
//! scheme.delta = 0.05
//! scheme.alpha = 1.3
//! x0 = [100.0]
//! horizon = 5.0
//! record.every = 0.25
//! n_paths = 1000
//! seed = 2024
//! ```
//!
//! A file whose first non-blank character is `{`, or whose name ends in
//! `.json`, is read as JSON with the same structure. Every section has
//! defaults; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use uitsde::model::{from_registry, ObservableFn, ProblemParams, SdeProblem};
use uitsde::schemes::{SchemeConfig, SchemeKind};

/// A configuration problem, with the dotted path of the offending field.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("config error at `{field}`: {message}")]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

fn bad(field: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProblemConfig {
    /// `fig1`, `cubic1d`, `coupled2d` or `ou`.
    pub name: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub a: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub b: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma1: Option<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma2: Option<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_scale: Option<f64>,
}

impl Default for ProblemConfig {
    fn default() -> Self {
        ProblemConfig {
            name: "fig1".into(),
            a: None,
            b: None,
            sigma1: None,
            sigma2: None,
            rate: None,
            sigma: None,
            noise_scale: None,
        }
    }
}

impl ProblemConfig {
    pub fn params(&self) -> ProblemParams {
        let d = ProblemParams::default();
        ProblemParams {
            a: self.a.unwrap_or(d.a),
            b: self.b,
            sigma1: self.sigma1.unwrap_or(d.sigma1),
            sigma2: self.sigma2.unwrap_or(d.sigma2),
            rate: self.rate.unwrap_or(d.rate),
            sigma: self.sigma.unwrap_or(d.sigma),
            noise_scale: self.noise_scale,
        }
    }

    pub fn build(&self) -> Result<SdeProblem, ConfigError> {
        from_registry(&self.name, &self.params()).map_err(|e| bad("problem", e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecordConfig {
    pub every: f64,
}

impl Default for RecordConfig {
    fn default() -> Self {
        RecordConfig { every: 0.25 }
    }
}

/// Fine reference for `weak-error` and `order`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReferenceConfig {
    /// A scheme name, or `exact` for the closed-form mean of `ou` with
    /// observable `x`.
    pub kind: String,
    pub delta: f64,
    pub paths: usize,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        ReferenceConfig {
            kind: "tamed".into(),
            delta: 5e-4,
            paths: 10_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OrderConfig {
    pub deltas: Vec<f64>,
}

impl Default for OrderConfig {
    fn default() -> Self {
        OrderConfig {
            deltas: vec![0.2, 0.1, 0.05, 0.025],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Fig1Config {
    pub x0: Vec<f64>,
    pub alphas: Vec<f64>,
    pub delta: f64,
    pub n_paths: usize,
    pub reference_delta: f64,
    pub reference_paths: usize,
    pub horizon: f64,
}

impl Default for Fig1Config {
    fn default() -> Self {
        let d = uitsde::analysis::fig1::Fig1Spec::default();
        Fig1Config {
            x0: vec![1.0, 100.0],
            alphas: d.alphas,
            delta: d.delta,
            n_paths: d.n_paths,
            reference_delta: d.reference_delta,
            reference_paths: d.reference_paths,
            horizon: d.horizon,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SesConfig {
    pub points: Vec<Vec<f64>>,
    pub fine_delta: f64,
    pub hessian_step: f64,
    pub require_analytic: bool,
}

impl Default for SesConfig {
    fn default() -> Self {
        SesConfig {
            points: Vec::new(),
            fine_delta: 0.01,
            hessian_step: 1e-2,
            require_analytic: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalErrorConfig {
    pub states: Vec<Vec<f64>>,
    pub deltas: Vec<f64>,
}

impl Default for LocalErrorConfig {
    fn default() -> Self {
        LocalErrorConfig {
            states: Vec::new(),
            deltas: vec![0.2, 0.1, 0.05, 0.025],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckConfig {
    pub radius: f64,
    pub samples: usize,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig {
            radius: 10.0,
            samples: 2000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemConfig,
    pub scheme: SchemeConfig,
    /// Defaults to the origin, or `1` in every coordinate for `fig1`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    pub horizon: f64,
    pub record: RecordConfig,
    pub n_paths: usize,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub observables: Vec<String>,
    pub moments: Vec<f64>,
    pub reference: ReferenceConfig,
    pub order: OrderConfig,
    pub fig1: Fig1Config,
    pub ses: SesConfig,
    pub local_error: LocalErrorConfig,
    pub check: CheckConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            problem: ProblemConfig::default(),
            scheme: SchemeConfig::new(SchemeKind::TamedTruncated, 0.05),
            x0: None,
            horizon: 5.0,
            record: RecordConfig::default(),
            n_paths: 1000,
            seed: 2024,
            out: None,
            observables: vec!["x".into()],
            moments: vec![2.0],
            reference: ReferenceConfig::default(),
            order: OrderConfig::default(),
            fig1: Fig1Config::default(),
            ses: SesConfig::default(),
            local_error: LocalErrorConfig::default(),
            check: CheckConfig::default(),
        }
    }
}

fn looks_like_json(path: Option<&Path>, text: &str) -> bool {
    path.and_then(|p| p.extension()).is_some_and(|e| e == "json") || text.trim_start().starts_with('{')
}

/// Parses TOML or JSON text. Errors carry the dotted field path and, for
/// syntax errors, the line.
pub fn parse_config(text: &str, path: Option<&Path>) -> Result<ExperimentConfig, ConfigError> {
    if looks_like_json(path, text) {
        let mut de = serde_json::Deserializer::from_str(text);
        return serde_path_to_error::deserialize(&mut de).map_err(|e| {
            let field = e.path().to_string();
            let inner = e.into_inner();
            bad(
                field,
                format!("{inner} (line {}, column {})", inner.line(), inner.column()),
            )
        });
    }
    let value: toml::Table = text.parse().map_err(|e: toml::de::Error| {
        let line = e
            .span()
            .map(|s| text[..s.start.min(text.len())].lines().count().max(1));
        let msg = e.message().to_string();
        match line {
            Some(l) => bad(format!("line {l}"), msg),
            None => bad("<document>", msg),
        }
    })?;
    serde_path_to_error::deserialize(toml::Value::Table(value)).map_err(|e| {
        let field = e.path().to_string();
        bad(field, e.into_inner().message().to_string())
    })
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| bad("--config", format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text, Some(path))
}

impl ExperimentConfig {
    #[cfg(test)]
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn x0_for(&self, problem: &SdeProblem) -> Vec<f64> {
        self.x0.clone().unwrap_or_else(|| {
            let fill = if self.problem.name == "fig1" { 1.0 } else { 0.0 };
            vec![fill; problem.dim_state()]
        })
    }

    pub fn observable_fns(&self, dim: usize) -> Result<Vec<ObservableFn>, ConfigError> {
        self.observables
            .iter()
            .enumerate()
            .map(|(i, name)| ObservableFn::by_name(name, dim).map_err(|e| bad(format!("observables[{i}]"), e.to_string())))
            .collect()
    }

    /// Range and consistency checks that do not depend on the subcommand.
    pub fn validate(&self) -> Result<SdeProblem, ConfigError> {
        let problem = self.problem.build()?;
        let positive = |field: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(bad(field, format!("must be positive and finite, got {v}")))
            }
        };
        positive("scheme.delta", self.scheme.delta)?;
        if let Some(a) = self.scheme.alpha {
            positive("scheme.alpha", a)?;
        }
        if let Some(q) = self.scheme.q {
            if !(q >= 0.0 && q.is_finite()) {
                return Err(bad("scheme.q", format!("must be nonnegative, got {q}")));
            }
        }
        self.scheme
            .implicit
            .validate()
            .map_err(|e| bad("scheme.implicit", e.to_string()))?;
        positive("horizon", self.horizon)?;
        positive("record.every", self.record.every)?;
        if self.n_paths == 0 {
            return Err(bad("n_paths", "must be >= 1"));
        }
        if let Some(x0) = &self.x0 {
            if x0.len() != problem.dim_state() {
                return Err(bad(
                    "x0",
                    format!("has {} entries but `{}` has dimension {}", x0.len(), problem.name(), problem.dim_state()),
                ));
            }
            if !x0.iter().all(|v| v.is_finite()) {
                return Err(bad("x0", "entries must be finite"));
            }
        }
        self.observable_fns(problem.dim_state())?;
        for (i, &p) in self.moments.iter().enumerate() {
            positive(&format!("moments[{i}]"), p)?;
        }
        if self.reference.kind != "exact" {
            self.reference
                .kind
                .parse::<SchemeKind>()
                .map_err(|e| bad("reference.kind", e.to_string()))?;
        }
        positive("reference.delta", self.reference.delta)?;
        if self.reference.paths == 0 {
            return Err(bad("reference.paths", "must be >= 1"));
        }
        for (i, &d) in self.order.deltas.iter().enumerate() {
            positive(&format!("order.deltas[{i}]"), d)?;
        }
        positive("fig1.delta", self.fig1.delta)?;
        positive("fig1.reference_delta", self.fig1.reference_delta)?;
        positive("fig1.horizon", self.fig1.horizon)?;
        for (i, &a) in self.fig1.alphas.iter().enumerate() {
            positive(&format!("fig1.alphas[{i}]"), a)?;
        }
        positive("ses.fine_delta", self.ses.fine_delta)?;
        positive("ses.hessian_step", self.ses.hessian_step)?;
        for (i, &d) in self.local_error.deltas.iter().enumerate() {
            positive(&format!("local_error.deltas[{i}]"), d)?;
        }
        positive("check.radius", self.check.radius)?;
        Ok(problem)
    }
}
