//! Experiment configuration documents.

use serde::{Deserialize, Serialize};

use claas_core::drift::{DetectorKind, DriftConfig};
use claas_core::nn::ModelSpec;
use claas_core::registry::validate_experiment_id;
use claas_core::scenario::{DatasetManifest, TestProtocol};
use claas_core::strategies::{StrategyConfig, Validation};

use crate::error::{ApiError, ApiResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment_id: Option<String>,
    pub model: ModelSpec,
    pub strategy: StrategyConfig,
    pub scenario: ScenarioConfig,
    #[serde(default)]
    pub trigger: TriggerRule,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drift: Option<DriftConfig>,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default = "default_runs")]
    pub runs: usize,
}

fn default_runs() -> usize {
    3
}

/// New-Classes stream layout. Without a manifest, experiences are pushed
/// through the API; with one, the dataset is read from the service's blob
/// store and split once at creation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub first_size: usize,
    pub rest_size: usize,
    pub n_experiences: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<DatasetManifest>,
    /// Class permutation seed for manifest scenarios.
    #[serde(default)]
    pub seed: u64,
}

impl ScenarioConfig {
    /// Classes expected in experience `index`.
    pub fn class_count(&self, index: usize) -> usize {
        if index == 0 {
            self.first_size
        } else {
            self.rest_size
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TriggerMode {
    #[default]
    Manual,
    EveryNExperiences,
    OnDrift,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct TriggerRule {
    pub mode: TriggerMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    #[serde(default = "default_top_k")]
    pub top_k: Vec<usize>,
    #[serde(default)]
    pub protocol: TestProtocol,
}

fn default_top_k() -> Vec<usize> {
    vec![1, 5]
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            top_k: default_top_k(),
            protocol: TestProtocol::default(),
        }
    }
}

/// Parses and validates a configuration document as a whole.
pub fn parse_config(bytes: &[u8]) -> ApiResult<ExperimentConfig> {
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        if inner.is_syntax() || inner.is_eof() {
            return ApiError::bad_request(format!("malformed JSON: {inner}")).with_code("MalformedJson");
        }
        let message = inner.to_string();
        let field = field_path(&path, &message);
        if field == "strategy.name" && message.contains("unknown variant") {
            return ApiError::invalid_config(message, field).with_code("UnknownStrategy");
        }
        ApiError::invalid_config(message, field)
    })?;
    validate(&cfg)?;
    Ok(cfg)
}

/// Appends the offending key for missing field errors, whose path points at
/// the enclosing object.
fn field_path(path: &str, message: &str) -> String {
    let base = if path == "." { "" } else { path };
    let named = ["missing field `", "unknown field `"]
        .iter()
        .find_map(|p| message.strip_prefix(p))
        .and_then(|rest| rest.split('`').next());
    match named {
        Some(name) if base.is_empty() => name.to_string(),
        Some(name) if base == name || base.ends_with(&format!(".{name}")) => base.to_string(),
        Some(name) => format!("{base}.{name}"),
        None => base.to_string(),
    }
}

pub fn validate(cfg: &ExperimentConfig) -> ApiResult<()> {
    if let Some(id) = &cfg.experiment_id {
        validate_experiment_id(id).map_err(|e| ApiError::invalid_config(e.to_string(), "experiment_id"))?;
    }
    cfg.model
        .validate()
        .map_err(|e| ApiError::invalid_config(e.to_string(), "model"))?;
    cfg.strategy
        .validate(Validation::Strict)
        .map_err(|e| ApiError::invalid_config(e.to_string(), format!("strategy.{}", e.field())))?;
    if cfg.runs == 0 {
        return Err(ApiError::invalid_config("runs must be >= 1", "runs"));
    }

    let sc = &cfg.scenario;
    if sc.first_size == 0 || sc.n_experiences == 0 || (sc.n_experiences > 1 && sc.rest_size == 0) {
        return Err(ApiError::invalid_config(
            "first_size and n_experiences must be >= 1, and rest_size >= 1 for more than one experience",
            "scenario",
        ));
    }
    let required = sc.first_size + sc.rest_size * (sc.n_experiences - 1);
    if required > cfg.model.num_classes {
        return Err(ApiError::invalid_config(
            format!("scenario needs {required} classes but the model has {}", cfg.model.num_classes),
            "scenario",
        ));
    }
    if let Some(m) = &sc.manifest {
        if m.feature_dim != cfg.model.input_dim {
            return Err(ApiError::invalid_config(
                format!("manifest feature_dim {} differs from model.input_dim {}", m.feature_dim, cfg.model.input_dim),
                "scenario.manifest.feature_dim",
            ));
        }
        if m.num_classes != cfg.model.num_classes {
            return Err(ApiError::invalid_config(
                format!("manifest num_classes {} differs from model.num_classes {}", m.num_classes, cfg.model.num_classes),
                "scenario.manifest.num_classes",
            ));
        }
    }

    match (cfg.trigger.mode, cfg.trigger.n) {
        (TriggerMode::EveryNExperiences, Some(n)) if n >= 1 => {}
        (TriggerMode::EveryNExperiences, _) => {
            return Err(ApiError::invalid_config("every_n_experiences needs n >= 1", "trigger.n"));
        }
        (_, Some(_)) => {
            return Err(ApiError::invalid_config("n only applies to every_n_experiences", "trigger.n"));
        }
        _ => {}
    }
    if let Some(d) = &cfg.drift {
        d.validate().map_err(|e| ApiError::invalid_config(e.to_string(), "drift"))?;
    }
    if cfg.trigger.mode == TriggerMode::OnDrift && cfg.drift.is_none() {
        return Err(ApiError::invalid_config("on_drift trigger needs a drift config", "drift"));
    }

    let ev = &cfg.evaluation;
    if ev.top_k.is_empty() {
        return Err(ApiError::invalid_config("top_k must not be empty", "evaluation.top_k"));
    }
    if let Some(k) = ev.top_k.iter().find(|&&k| k == 0 || k > cfg.model.num_classes) {
        return Err(ApiError::invalid_config(
            format!("k = {k} is outside [1, {}]", cfg.model.num_classes),
            "evaluation.top_k",
        ));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn needs_labels(&self) -> bool {
        matches!(&self.drift, Some(d) if d.detector == DetectorKind::PerfDecay)
    }

    /// Model seed of seed run `run`.
    pub fn run_seed(&self, run: usize) -> u64 {
        self.model.seed.wrapping_add(run as u64)
    }
}
