//! Stateful continual-learning strategies.
//!
//! - `naive` fine-tunes the current parameters on each new experience only.
//! - `cumulative` keeps every pattern seen and retrains from freshly
//!   initialized parameters on all of them at every step.
//! - `replay` fine-tunes on minibatches that mix new patterns with patterns
//!   drawn from a bounded rehearsal buffer, then offers the new patterns to
//!   the buffer.

mod buffer;
mod hooks;

pub use buffer::{buffer_update, BufferItem, ReplayBuffer, Sampling};
pub use hooks::{EventLog, FnHook, HookEvent, HookKind, NoHooks, TrainingHook};

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::nn::{init_params, loss_and_grad, Batch, ModelSpec, NnError, Params};
use crate::scenario::Experience;

const TAG_SHUFFLE: u64 = 1;
const TAG_MEMORY: u64 = 2;
const TAG_BUFFER: u64 = 3;
const TAG_CUMULATIVE: u64 = 4;

pub const DEFAULT_REPLAY_RATIO: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyName {
    Naive,
    Cumulative,
    Replay,
}

impl std::fmt::Display for StrategyName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StrategyName::Naive => "naive",
            StrategyName::Cumulative => "cumulative",
            StrategyName::Replay => "replay",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyConfig {
    pub name: StrategyName,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memory_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replay_ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampling: Option<Sampling>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Validation {
    /// Replay-only fields on other strategies are errors.
    Strict,
    /// Replay-only fields on other strategies are ignored.
    Lenient,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConfigError {
    #[error("`{0}` is required for this strategy")]
    MissingField(&'static str),
    #[error("`{0}` does not apply to this strategy")]
    IrrelevantField(&'static str),
    #[error("`{field}` {reason}")]
    Invalid {
        field: &'static str,
        reason: &'static str,
    },
}

impl ConfigError {
    pub fn field(&self) -> &'static str {
        match self {
            ConfigError::MissingField(f) | ConfigError::IrrelevantField(f) => f,
            ConfigError::Invalid { field, .. } => field,
        }
    }
}

impl StrategyConfig {
    pub fn naive(epochs: usize, batch_size: usize, lr: f32) -> Self {
        Self {
            name: StrategyName::Naive,
            epochs,
            batch_size,
            lr,
            memory_size: None,
            replay_ratio: None,
            sampling: None,
        }
    }

    pub fn cumulative(epochs: usize, batch_size: usize, lr: f32) -> Self {
        Self {
            name: StrategyName::Cumulative,
            ..Self::naive(epochs, batch_size, lr)
        }
    }

    pub fn replay(epochs: usize, batch_size: usize, lr: f32, memory_size: usize) -> Self {
        Self {
            name: StrategyName::Replay,
            memory_size: Some(memory_size),
            ..Self::naive(epochs, batch_size, lr)
        }
    }

    pub fn validate(&self, mode: Validation) -> std::result::Result<(), ConfigError> {
        let invalid = |field, reason| Err(ConfigError::Invalid { field, reason });
        if self.epochs == 0 {
            return invalid("epochs", "must be >= 1");
        }
        if self.batch_size == 0 {
            return invalid("batch_size", "must be >= 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return invalid("lr", "must be a positive finite number");
        }
        if self.name == StrategyName::Replay {
            match self.memory_size {
                None => return Err(ConfigError::MissingField("memory_size")),
                Some(0) => return invalid("memory_size", "must be >= 1"),
                Some(_) => {}
            }
            if let Some(r) = self.replay_ratio {
                if !(r > 0.0 && r <= 1.0) {
                    return invalid("replay_ratio", "must lie in (0, 1]");
                }
            }
        } else if mode == Validation::Strict {
            if self.memory_size.is_some() {
                return Err(ConfigError::IrrelevantField("memory_size"));
            }
            if self.replay_ratio.is_some() {
                return Err(ConfigError::IrrelevantField("replay_ratio"));
            }
            if self.sampling.is_some() {
                return Err(ConfigError::IrrelevantField("sampling"));
            }
        }
        Ok(())
    }

    pub fn replay_ratio(&self) -> f64 {
        self.replay_ratio.unwrap_or(DEFAULT_REPLAY_RATIO)
    }

    pub fn sampling(&self) -> Sampling {
        self.sampling.unwrap_or_default()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StrategyError {
    #[error("invalid strategy config: {0}")]
    Config(#[from] ConfigError),
    #[error("experience {0} has no training patterns")]
    EmptyExperience(usize),
    #[error("strategy state was built for a different model or strategy")]
    StateMismatch,
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T> = std::result::Result<T, StrategyError>;

/// The learner carried from one experience to the next.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyState {
    pub spec: ModelSpec,
    pub params: Params,
    /// Rehearsal memory (replay only).
    pub buffer: Option<ReplayBuffer>,
    /// Every training pattern seen so far (cumulative only).
    pub cumulative_store: Option<Batch>,
    pub seen_count: u64,
    pub experiences_trained: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub seconds: f64,
    /// Patterns fed through SGD across all epochs, memory draws included.
    pub patterns_trained_on: u64,
    /// Mean loss over the last epoch.
    pub final_loss: f64,
}

pub fn make_strategy(cfg: &StrategyConfig, spec: &ModelSpec, mode: Validation) -> Result<StrategyState> {
    cfg.validate(mode)?;
    let params = init_params(spec)?;
    Ok(StrategyState {
        spec: spec.clone(),
        params,
        buffer: (cfg.name == StrategyName::Replay).then(|| {
            ReplayBuffer::new(cfg.memory_size.unwrap_or_default(), cfg.sampling())
        }),
        cumulative_store: (cfg.name == StrategyName::Cumulative).then(|| Batch::empty(spec.input_dim)),
        seen_count: 0,
        experiences_trained: 0,
    })
}

/// Source of rehearsal patterns mixed into every minibatch.
struct MemoryMix<'a> {
    buffer: &'a ReplayBuffer,
    ratio: f64,
    seed: u64,
}

/// Runs `cfg.epochs` passes of minibatch SGD over `data`, shuffled per epoch
/// from `shuffle_seed`. Returns (patterns fed, mean loss of the last epoch).
fn run_epochs(
    params: &mut Params,
    data: &Batch,
    cfg: &StrategyConfig,
    shuffle_seed: u64,
    memory: Option<MemoryMix<'_>>,
    experience: usize,
    hooks: &mut dyn TrainingHook,
) -> Result<(u64, f64)> {
    let n = data.len();
    let batch_size = cfg.batch_size;
    // New patterns per minibatch and memory patterns drawn alongside a full chunk.
    let (new_per_batch, memory_per_batch) = match &memory {
        Some(m) if !m.buffer.is_empty() => {
            let from_memory = (batch_size as f64 * m.ratio).round() as usize;
            let fresh = batch_size.saturating_sub(from_memory).max(1);
            (fresh, batch_size - fresh)
        }
        _ => (batch_size, 0),
    };
    let mut mem_rng = ChaCha8Rng::seed_from_u64(memory.as_ref().map_or(0, |m| m.seed));

    let mut patterns = 0u64;
    let mut last_loss = 0.0;
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(shuffle_seed, &[epoch as u64])));
        let mut loss_sum = 0.0f64;
        let mut epoch_patterns = 0u64;
        for chunk in order.chunks(new_per_batch) {
            let mut mb = data.gather(chunk);
            if let Some(m) = &memory {
                let draws = memory_per_batch * chunk.len() / new_per_batch;
                for _ in 0..draws {
                    let it = m.buffer.item(mem_rng.random_range(0..m.buffer.len()));
                    mb.push(&it.features, it.label);
                }
            }
            let (loss, grads) = loss_and_grad(params, &mb)?;
            params.apply_sgd(&grads, cfg.lr)?;
            loss_sum += loss * mb.len() as f64;
            epoch_patterns += mb.len() as u64;
        }
        patterns += epoch_patterns;
        last_loss = loss_sum / epoch_patterns.max(1) as f64;
        hooks.on_event(&HookEvent {
            kind: HookKind::AfterEpoch,
            experience,
            epoch: Some(epoch),
            running_loss: Some(last_loss),
        });
    }
    Ok((patterns, last_loss))
}

/// Trains `state` on one experience according to `cfg`.
pub fn train_experience(
    mut state: StrategyState,
    cfg: &StrategyConfig,
    exp: &Experience,
    hooks: &mut dyn TrainingHook,
) -> Result<(StrategyState, TrainStats)> {
    cfg.validate(Validation::Lenient)?;
    if exp.train.is_empty() {
        return Err(StrategyError::EmptyExperience(exp.index));
    }
    let consistent = state.params.matches_spec(&state.spec)
        && match cfg.name {
            StrategyName::Naive => true,
            StrategyName::Cumulative => state.cumulative_store.is_some(),
            StrategyName::Replay => state.buffer.is_some(),
        };
    if !consistent {
        return Err(StrategyError::StateMismatch);
    }
    if exp.train.feature_dim != state.spec.input_dim {
        return Err(NnError::Dimension {
            what: "experience features",
            expected: state.spec.input_dim,
            got: exp.train.feature_dim,
        }
        .into());
    }

    hooks.on_event(&HookEvent {
        kind: HookKind::BeforeExperience,
        experience: exp.index,
        epoch: None,
        running_loss: None,
    });
    let started = Instant::now();
    let step = state.experiences_trained;
    let seed = state.spec.seed;

    let (patterns, final_loss) = match cfg.name {
        StrategyName::Naive => run_epochs(
            &mut state.params,
            &exp.train,
            cfg,
            derive_seed(seed, &[TAG_SHUFFLE, step]),
            None,
            exp.index,
            hooks,
        )?,
        StrategyName::Cumulative => {
            let store = state.cumulative_store.as_mut().expect("checked above");
            store.extend_from(&exp.train);
            // Stateless retraining: the run depends only on the data and the
            // model seed, never on how many steps preceded it.
            let mut fresh = init_params(&state.spec)?;
            let out = run_epochs(
                &mut fresh,
                store,
                cfg,
                derive_seed(seed, &[TAG_CUMULATIVE]),
                None,
                exp.index,
                hooks,
            )?;
            state.params = fresh;
            out
        }
        StrategyName::Replay => {
            let buffer = state.buffer.take().expect("checked above");
            let out = run_epochs(
                &mut state.params,
                &exp.train,
                cfg,
                derive_seed(seed, &[TAG_SHUFFLE, step]),
                Some(MemoryMix {
                    buffer: &buffer,
                    ratio: cfg.replay_ratio(),
                    seed: derive_seed(seed, &[TAG_MEMORY, step]),
                }),
                exp.index,
                hooks,
            );
            let buffer = buffer_update(buffer, &exp.train, derive_seed(seed, &[TAG_BUFFER, step]));
            state.buffer = Some(buffer);
            out?
        }
    };

    state.seen_count += exp.train.len() as u64;
    state.experiences_trained += 1;
    let seconds = started.elapsed().as_secs_f64();
    hooks.on_event(&HookEvent {
        kind: HookKind::AfterExperience,
        experience: exp.index,
        epoch: Some(cfg.epochs),
        running_loss: Some(final_loss),
    });
    Ok((
        state,
        TrainStats {
            seconds,
            patterns_trained_on: patterns,
            final_loss,
        },
    ))
}
