//! End-to-end runs of a strategy over a scenario, for benchmarks and tests.

use serde::{Deserialize, Serialize};

use crate::evaluation::{aggregate, evaluate_step, EvalError, RunRecord, SeedRecord, StepPredictions, StepRecord};
use crate::nn::{Activation, ModelSpec};
use crate::scenario::{build_nc_scenario, synth_blobs, Scenario, ScenarioError, TestProtocol};
use crate::strategies::{
    make_strategy, train_experience, StrategyConfig, StrategyError, StrategyName, StrategyState, TrainingHook,
    Validation,
};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

/// A synthetic benchmark: Gaussian blobs split into a New-Classes stream,
/// plus the model and training schedule shared by every strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchPreset {
    pub name: String,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub per_class_train: usize,
    pub per_class_test: usize,
    pub spread: f32,
    pub first_size: usize,
    pub rest_size: usize,
    pub n_experiences: usize,
    pub hidden_layers: Vec<usize>,
    pub activation: Activation,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub memory_size: usize,
    pub replay_ratio: f64,
    pub protocol: TestProtocol,
    pub top_k: Vec<usize>,
}

/// 20 classes in 10 experiences of 2 classes, 1000 training patterns per
/// experience.
pub fn blobs10() -> BenchPreset {
    BenchPreset {
        name: "blobs10".into(),
        num_classes: 20,
        feature_dim: 16,
        per_class_train: 500,
        per_class_test: 100,
        spread: 0.8,
        first_size: 2,
        rest_size: 2,
        n_experiences: 10,
        hidden_layers: vec![64],
        activation: Activation::Relu,
        epochs: 10,
        batch_size: 32,
        lr: 0.05,
        memory_size: 2000,
        replay_ratio: 0.5,
        protocol: TestProtocol::AccumulatingTest,
        top_k: vec![1, 5],
    }
}

pub fn preset(name: &str) -> Result<BenchPreset> {
    match name {
        "blobs10" => Ok(blobs10()),
        other => Err(HarnessError::UnknownPreset(other.to_string())),
    }
}

impl BenchPreset {
    pub fn model_spec(&self, seed: u64) -> ModelSpec {
        ModelSpec {
            input_dim: self.feature_dim,
            hidden_layers: self.hidden_layers.clone(),
            num_classes: self.num_classes,
            activation: self.activation,
            seed,
        }
    }

    pub fn strategy(&self, name: StrategyName) -> StrategyConfig {
        match name {
            StrategyName::Naive => StrategyConfig::naive(self.epochs, self.batch_size, self.lr),
            StrategyName::Cumulative => StrategyConfig::cumulative(self.epochs, self.batch_size, self.lr),
            StrategyName::Replay => {
                let mut cfg = StrategyConfig::replay(self.epochs, self.batch_size, self.lr, self.memory_size);
                cfg.replay_ratio = Some(self.replay_ratio);
                cfg
            }
        }
    }

    /// Data, class order and model initialisation all derive from `seed`.
    pub fn scenario(&self, seed: u64) -> Result<Scenario> {
        let (train, test) = synth_blobs(
            self.num_classes,
            self.feature_dim,
            self.per_class_train,
            self.per_class_test,
            self.spread,
            seed,
        )?;
        Ok(build_nc_scenario(
            &train,
            &test,
            self.num_classes,
            self.first_size,
            self.rest_size,
            self.n_experiences,
            seed,
            self.protocol,
        )?)
    }
}

pub struct SeedRun {
    pub record: SeedRecord,
    pub predictions: Vec<StepPredictions>,
    pub state: StrategyState,
}

/// Trains on every experience of `scenario` in order, evaluating after each.
pub fn run_seed(
    scenario: &Scenario,
    spec: &ModelSpec,
    cfg: &StrategyConfig,
    top_k: &[usize],
    hooks: &mut dyn TrainingHook,
) -> Result<SeedRun> {
    let mut state = make_strategy(cfg, spec, Validation::Strict)?;
    let tests: Vec<_> = scenario.experiences.iter().map(|e| &e.test).collect();
    let mut steps = Vec::with_capacity(scenario.experiences.len());
    let mut predictions = Vec::with_capacity(scenario.experiences.len());
    for exp in &scenario.experiences {
        let (next, stats) = train_experience(state, cfg, exp, hooks)?;
        state = next;
        let (row, stream, log) = evaluate_step(&state.params, &tests, exp.index, scenario.protocol, top_k)?;
        steps.push(StepRecord {
            experience: exp.index,
            seconds: stats.seconds,
            patterns: stats.patterns_trained_on,
            final_loss: stats.final_loss,
            accuracy_row: row,
            stream_accuracy: stream,
        });
        predictions.push(log);
    }
    Ok(SeedRun {
        record: SeedRecord {
            seed: spec.seed,
            steps,
            complete: true,
        },
        predictions,
        state,
    })
}

/// Runs the preset once per seed, sequentially, and aggregates the results.
pub fn run_preset(preset: &BenchPreset, strategy: StrategyName, seeds: &[u64]) -> Result<(Vec<SeedRun>, RunRecord)> {
    let cfg = preset.strategy(strategy);
    let runs = seeds
        .iter()
        .map(|&seed| {
            let scenario = preset.scenario(seed)?;
            run_seed(
                &scenario,
                &preset.model_spec(seed),
                &cfg,
                &preset.top_k,
                &mut crate::strategies::NoHooks,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let records: Vec<SeedRecord> = runs.iter().map(|r| r.record.clone()).collect();
    let agg = aggregate(&records)?;
    Ok((runs, agg))
}

pub const TIME_MEMORY_HEADER: &str = "experience,runs,seconds_mean,seconds_std,patterns_mean,patterns_std";
pub const ACCURACY_HEADER: &str =
    "experience,runs,acc_top1_mean,acc_top1_std,acc_top5_mean,acc_top5_std,avg_acc_mean,avg_acc_std,forgetting_mean";

/// Wall-clock and patterns trained on per experience, mean and sample
/// standard deviation over the seeds.
pub fn time_memory_csv(record: &RunRecord) -> String {
    let (m, s) = (&record.mean, &record.stddev);
    let runs = record.seeds.len();
    let mut out = format!("{TIME_MEMORY_HEADER}\n");
    for i in 0..m.steps() {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            i + 1,
            runs,
            m.seconds[i],
            s.seconds[i],
            m.patterns[i],
            s.patterns[i]
        ));
    }
    out
}

/// Stream top-1/top-5 accuracy, average accuracy and mean forgetting per
/// experience over the seeds.
pub fn accuracy_csv(record: &RunRecord) -> String {
    let (m, s) = (&record.mean, &record.stddev);
    let runs = record.seeds.len();
    let cell = |v: Option<&[f64]>, i: usize| v.map(|v| v[i].to_string()).unwrap_or_default();
    let mut out = format!("{ACCURACY_HEADER}\n");
    for i in 0..m.steps() {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            i + 1,
            runs,
            cell(m.stream(1), i),
            cell(s.stream(1), i),
            cell(m.stream(5), i),
            cell(s.stream(5), i),
            m.avg_accuracy[i],
            s.avg_accuracy[i],
            m.forgetting_mean[i]
        ));
    }
    out
}
