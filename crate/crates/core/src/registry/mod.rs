//! Model version registry.
//!
//! Every experiment owns a directory of blobs:
//!
//! ```text
//! experiments/{id}/config.json
//! experiments/{id}/journal.jsonl
//! experiments/{id}/runs/{run}/v{version}/weights.clbw
//! experiments/{id}/runs/{run}/v{version}/state.json
//! ```
//!
//! The journal holds one [`ModelVersion`] per line and is the source of truth
//! for the version index; it is replayed when the registry is opened. Each
//! seed run of an experiment has its own gapless version sequence.

mod store;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

pub use store::{validate_key, BlobStore, FsStore, MemStore, StagedWrite, StoreError, StoreResult};

use crate::nn::encode_weights;
use crate::strategies::{StrategyConfig, StrategyName, StrategyState};

#[derive(Debug, thiserror::Error)]
pub enum RegistryError {
    #[error("{0} not found")]
    NotFound(String),
    #[error("experiment {0:?} already exists")]
    Exists(String),
    #[error("invalid experiment id {0:?}: use 1-64 characters from [A-Za-z0-9_-]")]
    InvalidId(String),
    #[error(transparent)]
    Storage(#[from] StoreError),
    #[error("corrupt registry data at {key}: {message}")]
    Corrupt { key: String, message: String },
}

pub type Result<T> = std::result::Result<T, RegistryError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelVersion {
    pub experiment_id: String,
    /// Seed run the version belongs to.
    pub run: usize,
    pub version: u64,
    pub parent_version: Option<u64>,
    pub created_at: DateTime<Utc>,
    pub strategy_snapshot: StrategyConfig,
    pub weights_key: String,
    pub metrics_key: String,
}

pub fn validate_experiment_id(id: &str) -> Result<()> {
    let ok = (1..=64).contains(&id.len())
        && id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-');
    if ok {
        Ok(())
    } else {
        Err(RegistryError::InvalidId(id.to_string()))
    }
}

pub fn experiment_prefix(id: &str) -> String {
    format!("experiments/{id}/")
}

fn config_key(id: &str) -> String {
    format!("experiments/{id}/config.json")
}

fn journal_key(id: &str) -> String {
    format!("experiments/{id}/journal.jsonl")
}

fn version_prefix(id: &str, run: usize, version: u64) -> String {
    format!("experiments/{id}/runs/{run}/v{version}/")
}

#[derive(Default)]
struct Experiment {
    /// Held for the whole of a commit.
    writer: Mutex<()>,
    versions: RwLock<Vec<ModelVersion>>,
}

impl Experiment {
    fn read(&self) -> std::sync::RwLockReadGuard<'_, Vec<ModelVersion>> {
        self.versions.read().unwrap_or_else(|e| e.into_inner())
    }
}

pub struct Registry {
    store: Arc<dyn BlobStore>,
    experiments: RwLock<BTreeMap<String, Arc<Experiment>>>,
}

impl Registry {
    /// Opens a filesystem-backed registry rooted at `root`.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        Self::with_store(Arc::new(FsStore::open(root)?))
    }

    /// Replays every journal found in `store`.
    pub fn with_store(store: Arc<dyn BlobStore>) -> Result<Self> {
        let mut experiments = BTreeMap::new();
        for key in store.list("experiments")? {
            let Some(id) = key
                .strip_prefix("experiments/")
                .and_then(|rest| rest.strip_suffix("/config.json"))
            else {
                continue;
            };
            if validate_experiment_id(id).is_err() {
                continue;
            }
            let versions = read_journal(store.as_ref(), id)?;
            experiments.insert(
                id.to_string(),
                Arc::new(Experiment {
                    writer: Mutex::new(()),
                    versions: RwLock::new(versions),
                }),
            );
        }
        Ok(Self {
            store,
            experiments: RwLock::new(experiments),
        })
    }

    pub fn store(&self) -> &Arc<dyn BlobStore> {
        &self.store
    }

    fn experiment(&self, id: &str) -> Result<Arc<Experiment>> {
        self.experiments
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .get(id)
            .cloned()
            .ok_or_else(|| RegistryError::NotFound(format!("experiment {id:?}")))
    }

    /// Registers a new experiment and stores its configuration document.
    pub fn create_experiment(&self, id: &str, config: &[u8]) -> Result<()> {
        validate_experiment_id(id)?;
        let mut map = self.experiments.write().unwrap_or_else(|e| e.into_inner());
        if map.contains_key(id) {
            return Err(RegistryError::Exists(id.to_string()));
        }
        self.store.put(&config_key(id), config)?;
        map.insert(id.to_string(), Arc::new(Experiment::default()));
        Ok(())
    }

    pub fn exists(&self, id: &str) -> bool {
        self.experiments
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .contains_key(id)
    }

    pub fn list_experiments(&self) -> Vec<String> {
        self.experiments
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .keys()
            .cloned()
            .collect()
    }

    pub fn config(&self, id: &str) -> Result<Vec<u8>> {
        self.experiment(id)?;
        Ok(self.store.get(&config_key(id))?)
    }

    /// Stores the weights and state of `state` as the next version of `run`
    /// and appends it to the journal. The record is durable on return.
    pub fn commit_version(
        &self,
        id: &str,
        run: usize,
        state: &StrategyState,
        cfg: &StrategyConfig,
        metrics_key: &str,
    ) -> Result<ModelVersion> {
        let exp = self.experiment(id)?;
        let _writer = exp.writer.lock().unwrap_or_else(|e| e.into_inner());
        let previous = exp
            .read()
            .iter()
            .filter(|v| v.run == run)
            .map(|v| v.version)
            .max()
            .unwrap_or(0);
        let version = previous + 1;
        let prefix = version_prefix(id, run, version);
        let weights_key = format!("{prefix}weights.clbw");
        self.store.put(&weights_key, &encode_weights(&state.params))?;
        let state_json = serde_json::to_vec(state).map_err(|e| RegistryError::Corrupt {
            key: format!("{prefix}state.json"),
            message: e.to_string(),
        })?;
        self.store.put(&format!("{prefix}state.json"), &state_json)?;

        let parent_version = match cfg.name {
            StrategyName::Cumulative => None,
            _ if version == 1 => None,
            _ => Some(previous),
        };
        let record = ModelVersion {
            experiment_id: id.to_string(),
            run,
            version,
            parent_version,
            created_at: Utc::now(),
            strategy_snapshot: cfg.clone(),
            weights_key,
            metrics_key: metrics_key.to_string(),
        };

        // The journal is replaced atomically, so a crash leaves either the
        // old or the new index and never a torn line.
        let mut journal = match self.store.get(&journal_key(id)) {
            Ok(bytes) => bytes,
            Err(StoreError::NotFound(_)) => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        if !journal.is_empty() && !journal.ends_with(b"\n") {
            let cut = journal.iter().rposition(|&b| b == b'\n').map_or(0, |p| p + 1);
            journal.truncate(cut);
        }
        serde_json::to_writer(&mut journal, &record).expect("ModelVersion serializes");
        journal.push(b'\n');
        self.store.put(&journal_key(id), &journal)?;

        exp.versions
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .push(record.clone());
        Ok(record)
    }

    /// All versions of the experiment in commit order.
    pub fn versions(&self, id: &str) -> Result<Vec<ModelVersion>> {
        Ok(self.experiment(id)?.read().clone())
    }

    pub fn run_versions(&self, id: &str, run: usize) -> Result<Vec<ModelVersion>> {
        Ok(self
            .experiment(id)?
            .read()
            .iter()
            .filter(|v| v.run == run)
            .cloned()
            .collect())
    }

    /// Returns the record and its CLBW weights bytes.
    pub fn get_version(&self, id: &str, run: usize, version: u64) -> Result<(ModelVersion, Vec<u8>)> {
        let record = self
            .experiment(id)?
            .read()
            .iter()
            .find(|v| v.run == run && v.version == version)
            .cloned()
            .ok_or_else(|| RegistryError::NotFound(format!("version {version} of {id:?} run {run}")))?;
        let weights = self.store.get(&record.weights_key)?;
        Ok((record, weights))
    }

    pub fn latest(&self, id: &str, run: usize) -> Result<Option<ModelVersion>> {
        Ok(self
            .experiment(id)?
            .read()
            .iter()
            .filter(|v| v.run == run)
            .max_by_key(|v| v.version)
            .cloned())
    }

    pub fn load_state(&self, record: &ModelVersion) -> Result<StrategyState> {
        let key = format!(
            "{}state.json",
            version_prefix(&record.experiment_id, record.run, record.version)
        );
        let bytes = self.store.get(&key)?;
        serde_json::from_slice(&bytes).map_err(|e| RegistryError::Corrupt {
            key,
            message: e.to_string(),
        })
    }
}

/// Parses a journal, ignoring a trailing line without a newline terminator.
fn read_journal(store: &dyn BlobStore, id: &str) -> Result<Vec<ModelVersion>> {
    let key = journal_key(id);
    let bytes = match store.get(&key) {
        Ok(b) => b,
        Err(StoreError::NotFound(_)) => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let complete = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |p| p + 1);
    if complete < bytes.len() {
        log::warn!("{key}: ignoring {} bytes of incomplete journal entry", bytes.len() - complete);
    }
    let text = std::str::from_utf8(&bytes[..complete]).map_err(|e| RegistryError::Corrupt {
        key: key.clone(),
        message: e.to_string(),
    })?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| RegistryError::Corrupt {
                key: key.clone(),
                message: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::decode_weights;
    use crate::nn::{Activation, ModelSpec, Params};
    use crate::strategies::{make_strategy, Validation};

    fn spec() -> ModelSpec {
        ModelSpec {
            input_dim: 3,
            hidden_layers: vec![4],
            num_classes: 2,
            activation: Activation::Relu,
            seed: 5,
        }
    }

    fn state(cfg: &StrategyConfig) -> StrategyState {
        make_strategy(cfg, &spec(), Validation::Strict).unwrap()
    }

    #[test]
    fn gapless_versions_and_round_trip() {
        let reg = Registry::with_store(Arc::new(MemStore::new())).unwrap();
        reg.create_experiment("exp", b"{}").unwrap();
        let cfg = StrategyConfig::naive(1, 8, 0.1);
        let st = state(&cfg);
        let versions: Vec<u64> = (0..3)
            .map(|_| reg.commit_version("exp", 0, &st, &cfg, "m").unwrap().version)
            .collect();
        assert_eq!(versions, vec![1, 2, 3]);
        let (rec, bytes) = reg.get_version("exp", 0, 2).unwrap();
        assert_eq!(rec.parent_version, Some(1));
        assert_eq!(bytes, encode_weights(&st.params));
        assert!(decode_weights(&bytes).is_ok());
        assert_eq!(reg.latest("exp", 0).unwrap().unwrap().version, 3);
        assert_eq!(reg.get_version("exp", 0, 3).unwrap().0, reg.latest("exp", 0).unwrap().unwrap());
        assert!(matches!(reg.get_version("exp", 0, 99), Err(RegistryError::NotFound(_))));
        assert_eq!(reg.load_state(&rec).unwrap(), st);
        assert!(reg.latest("exp", 1).unwrap().is_none());
    }

    #[test]
    fn unknown_experiment_and_bad_ids() {
        let reg = Registry::with_store(Arc::new(MemStore::new())).unwrap();
        let cfg = StrategyConfig::naive(1, 8, 0.1);
        assert!(matches!(
            reg.commit_version("nope", 0, &state(&cfg), &cfg, "m"),
            Err(RegistryError::NotFound(_))
        ));
        assert!(matches!(reg.create_experiment("a/b", b"{}"), Err(RegistryError::InvalidId(_))));
        reg.create_experiment("a", b"{}").unwrap();
        assert!(matches!(reg.create_experiment("a", b"{}"), Err(RegistryError::Exists(_))));
    }

    #[test]
    fn cumulative_versions_have_no_parent() {
        let reg = Registry::with_store(Arc::new(MemStore::new())).unwrap();
        reg.create_experiment("c", b"{}").unwrap();
        let cfg = StrategyConfig::cumulative(1, 8, 0.1);
        let st = state(&cfg);
        for _ in 0..3 {
            assert_eq!(reg.commit_version("c", 0, &st, &cfg, "m").unwrap().parent_version, None);
        }
    }

    #[test]
    fn restart_replays_journal() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = StrategyConfig::replay(1, 8, 0.1, 10);
        let st = state(&cfg);
        {
            let reg = Registry::open(dir.path()).unwrap();
            reg.create_experiment("e", b"{\"x\":1}").unwrap();
            for run in 0..2 {
                reg.commit_version("e", run, &st, &cfg, "m").unwrap();
                reg.commit_version("e", run, &st, &cfg, "m").unwrap();
            }
        }
        let reg = Registry::open(dir.path()).unwrap();
        assert_eq!(reg.list_experiments(), vec!["e".to_string()]);
        assert_eq!(reg.config("e").unwrap(), b"{\"x\":1}");
        assert_eq!(reg.versions("e").unwrap().len(), 4);
        let (_, bytes) = reg.get_version("e", 1, 2).unwrap();
        let params = Params::from_weights(&bytes, Activation::Relu).unwrap();
        assert_eq!(params, st.params);
        assert_eq!(reg.commit_version("e", 1, &st, &cfg, "m").unwrap().version, 3);
    }

    #[test]
    fn torn_journal_tail_is_ignored() {
        let store: Arc<dyn BlobStore> = Arc::new(MemStore::new());
        let cfg = StrategyConfig::naive(1, 8, 0.1);
        let st = state(&cfg);
        {
            let reg = Registry::with_store(store.clone()).unwrap();
            reg.create_experiment("t", b"{}").unwrap();
            reg.commit_version("t", 0, &st, &cfg, "m").unwrap();
        }
        let mut journal = store.get("experiments/t/journal.jsonl").unwrap();
        journal.extend_from_slice(b"{\"experiment_id\":\"t\",\"ver");
        store.put("experiments/t/journal.jsonl", &journal).unwrap();
        let reg = Registry::with_store(store.clone()).unwrap();
        assert_eq!(reg.versions("t").unwrap().len(), 1);
        assert_eq!(reg.commit_version("t", 0, &st, &cfg, "m").unwrap().version, 2);
        let reg = Registry::with_store(store).unwrap();
        assert_eq!(reg.versions("t").unwrap().len(), 2);
    }

    #[test]
    fn journal_lines_are_model_versions() {
        let store: Arc<dyn BlobStore> = Arc::new(MemStore::new());
        let reg = Registry::with_store(store.clone()).unwrap();
        reg.create_experiment("j", b"{}").unwrap();
        let cfg = StrategyConfig::naive(1, 8, 0.1);
        reg.commit_version("j", 0, &state(&cfg), &cfg, "metrics/x").unwrap();
        let text = String::from_utf8(store.get("experiments/j/journal.jsonl").unwrap()).unwrap();
        let value: serde_json::Value = serde_json::from_str(text.trim_end()).unwrap();
        let mut keys: Vec<&str> = value.as_object().unwrap().keys().map(String::as_str).collect();
        keys.sort();
        assert_eq!(
            keys,
            vec![
                "created_at",
                "experiment_id",
                "metrics_key",
                "parent_version",
                "run",
                "strategy_snapshot",
                "version",
                "weights_key"
            ]
        );
    }

    #[test]
    fn concurrent_commits_stay_gapless() {
        let dir = tempfile::tempdir().unwrap();
        let reg = Arc::new(Registry::open(dir.path()).unwrap());
        reg.create_experiment("s", b"{}").unwrap();
        let cfg = StrategyConfig::naive(1, 8, 0.1);
        let st = state(&cfg);
        std::thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| {
                    for _ in 0..10 {
                        reg.commit_version("s", 0, &st, &cfg, "m").unwrap();
                    }
                });
            }
        });
        let mut versions: Vec<u64> = reg.versions("s").unwrap().iter().map(|v| v.version).collect();
        versions.sort();
        assert_eq!(versions, (1..=80).collect::<Vec<_>>());
        let reopened = Registry::open(dir.path()).unwrap();
        assert_eq!(reopened.versions("s").unwrap().len(), 80);
    }
}
