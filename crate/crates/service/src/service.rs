//! Experiment lifecycle, trigger rules and the training workers.
//!
//! All mutable state sits behind one mutex; training runs on worker threads
//! without holding it. Blob layout per experiment, next to the registry's:
//!
//! ```text
//! experiments/{id}/experiences/{index}.json
//! experiments/{id}/scenario.json        (manifest scenarios)
//! experiments/{id}/monitor.json
//! experiments/{id}/audit.jsonl
//! experiments/{id}/runs/{run}/v{version}/metrics.json
//! jobs/{job_id}.json
//! ```

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use axum::http::StatusCode;
use serde::{Deserialize, Serialize};

use claas_core::drift::{self, DetectorKind, DriftError, DriftReport, MonitorState};
use claas_core::evaluation::{aggregate, evaluate_step, RunRecord, SeedRecord, StepRecord};
use claas_core::nn::{predict_topk, Batch, Params};
use claas_core::registry::{BlobStore, ModelVersion, Registry, StoreError};
use claas_core::scenario::{build_nc_scenario, ingest_csv, parse_csv, Experience, Scenario};
use claas_core::strategies::{make_strategy, train_experience, NoHooks, StrategyState, Validation};

use crate::config::{parse_config, ExperimentConfig, TriggerMode};
use crate::error::{ApiError, ApiResult};
use crate::jobs::{job_id, job_number, now, AuditEntry, AuditEvent, Commit, JobState, TrainingJob, TriggerCause};

fn experience_key(id: &str, index: usize) -> String {
    format!("experiments/{id}/experiences/{index:06}.json")
}

fn scenario_key(id: &str) -> String {
    format!("experiments/{id}/scenario.json")
}

fn monitor_key(id: &str) -> String {
    format!("experiments/{id}/monitor.json")
}

fn audit_key(id: &str) -> String {
    format!("experiments/{id}/audit.jsonl")
}

fn metrics_key(id: &str, run: usize, version: u64) -> String {
    format!("experiments/{id}/runs/{run}/v{version}/metrics.json")
}

fn job_key(job_id: &str) -> String {
    format!("jobs/{job_id}.json")
}

/// Metrics blob referenced by a model version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VersionMetrics {
    pub job_id: String,
    pub run: usize,
    pub seed: u64,
    pub step: StepRecord,
}

/// Experience upload: headerless `label,f1,...` CSV text for both splits
/// plus the declared class list. `from_scenario` instead releases the next
/// experience of a manifest scenario.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperiencePayload {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counts: Option<Counts>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_csv: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_csv: Option<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub from_scenario: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Counts {
    pub train: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PushOutcome {
    pub experience_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub job_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerOutcome {
    pub job_id: String,
    pub coalesced: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservePayload {
    pub samples: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObserveOutcome {
    pub fired: bool,
    /// One report per window completed by this payload.
    pub reports: Vec<DriftReport>,
    /// Observations buffered towards the next window.
    pub pending: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub job_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStatus {
    pub run: usize,
    pub seed: u64,
    pub latest_version: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorStatus {
    pub detector: DetectorKind,
    pub pending: usize,
    pub windows_completed: u64,
    pub has_reference: bool,
    pub baseline_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentStatus {
    pub experiment_id: String,
    pub config: ExperimentConfig,
    pub experiences: usize,
    pub trained: usize,
    pub pending: usize,
    pub runs: Vec<RunStatus>,
    pub jobs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub monitor: Option<MonitorStatus>,
}

struct ExpRuntime {
    config: ExperimentConfig,
    experiences: Vec<Arc<Experience>>,
    scenario: Option<Arc<Scenario>>,
    classes_seen: BTreeSet<usize>,
    monitor: Option<MonitorState>,
    audit: Vec<AuditEntry>,
}

#[derive(Default)]
struct State {
    experiments: BTreeMap<String, ExpRuntime>,
    jobs: BTreeMap<String, TrainingJob>,
    queue: VecDeque<String>,
    /// Experiments with a running job.
    running: BTreeSet<String>,
    next_job: u64,
}

struct Inner {
    registry: Registry,
    state: Mutex<State>,
    work: Condvar,
    shutdown: AtomicBool,
    workers: Mutex<Vec<JoinHandle<()>>>,
}

/// Cheap to clone; clones share the same service.
#[derive(Clone)]
pub struct Service {
    inner: Arc<Inner>,
}

impl Service {
    /// Opens (or creates) the service state under `root` and starts
    /// `workers` training threads.
    pub fn open(root: impl Into<PathBuf>, workers: usize) -> ApiResult<Self> {
        Self::with_registry(Registry::open(root)?, workers)
    }

    pub fn with_registry(registry: Registry, workers: usize) -> ApiResult<Self> {
        let state = recover(&registry)?;
        let svc = Service {
            inner: Arc::new(Inner {
                registry,
                state: Mutex::new(state),
                work: Condvar::new(),
                shutdown: AtomicBool::new(false),
                workers: Mutex::new(Vec::new()),
            }),
        };
        svc.spawn_workers(workers)?;
        Ok(svc)
    }

    /// Adds `n` worker threads. A service opened with zero workers only
    /// queues jobs until this is called.
    pub fn spawn_workers(&self, n: usize) -> ApiResult<()> {
        let mut handles = self.inner.workers.lock().unwrap_or_else(|e| e.into_inner());
        for _ in 0..n {
            let inner = self.inner.clone();
            let name = format!("claas-worker-{}", handles.len());
            handles.push(
                std::thread::Builder::new()
                    .name(name)
                    .spawn(move || worker_loop(inner))
                    .map_err(|e| ApiError::internal(format!("cannot start worker: {e}")))?,
            );
        }
        Ok(())
    }

    pub fn registry(&self) -> &Registry {
        &self.inner.registry
    }

    fn store(&self) -> &dyn BlobStore {
        self.inner.registry.store().as_ref()
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.inner.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Stops the workers after their current job and waits for them.
    pub fn shutdown(&self) {
        self.inner.shutdown.store(true, Ordering::SeqCst);
        self.inner.work.notify_all();
        let handles: Vec<_> = self
            .inner
            .workers
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .drain(..)
            .collect();
        for h in handles {
            let _ = h.join();
        }
    }

    /// Blocks until no job is queued or running, or `timeout` elapses.
    pub fn wait_idle(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let mut st = self.lock();
        loop {
            if st.queue.is_empty() && st.running.is_empty() {
                return true;
            }
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return false;
            }
            st = self
                .inner
                .work
                .wait_timeout(st, left)
                .unwrap_or_else(|e| e.into_inner())
                .0;
        }
    }

    pub fn create_experiment(&self, body: &[u8]) -> ApiResult<String> {
        let mut cfg = parse_config(body)?;
        make_strategy(&cfg.strategy, &cfg.model, Validation::Strict)
            .map_err(|e| ApiError::invalid_config(e.to_string(), "strategy"))?;
        let scenario = match &cfg.scenario.manifest {
            Some(manifest) => {
                let (train, test) = ingest_csv(manifest, self.store())
                    .map_err(|e| ApiError::invalid_config(e.to_string(), "scenario.manifest"))?;
                let sc = build_nc_scenario(
                    &train,
                    &test,
                    cfg.model.num_classes,
                    cfg.scenario.first_size,
                    cfg.scenario.rest_size,
                    cfg.scenario.n_experiences,
                    cfg.scenario.seed,
                    cfg.evaluation.protocol,
                )
                .map_err(|e| ApiError::invalid_config(e.to_string(), "scenario"))?;
                Some(Arc::new(sc))
            }
            None => None,
        };

        let mut st = self.lock();
        let id = match &cfg.experiment_id {
            Some(id) => id.clone(),
            None => (st.experiments.len() + 1..)
                .map(|n| format!("exp-{n:04}"))
                .find(|id| !st.experiments.contains_key(id))
                .expect("unbounded range"),
        };
        cfg.experiment_id = Some(id.clone());
        let doc = serde_json::to_vec_pretty(&cfg).map_err(|e| ApiError::internal(e.to_string()))?;
        if let Some(sc) = &scenario {
            let bytes = serde_json::to_vec(sc.as_ref()).map_err(|e| ApiError::internal(e.to_string()))?;
            // Written first so a registered experiment always finds it.
            self.store().put(&scenario_key(&id), &bytes)?;
        }
        self.inner.registry.create_experiment(&id, &doc)?;
        let monitor = match &cfg.drift {
            Some(d) => Some(
                MonitorState::new(d.clone(), cfg.model.input_dim).map_err(|e| ApiError::invalid_config(e.to_string(), "drift"))?,
            ),
            None => None,
        };
        let mut rt = ExpRuntime {
            config: cfg,
            experiences: Vec::new(),
            scenario,
            classes_seen: BTreeSet::new(),
            monitor,
            audit: Vec::new(),
        };
        self.audit(&id, &mut rt, AuditEvent::ExperimentCreated, None, None)?;
        st.experiments.insert(id.clone(), rt);
        log::info!("created experiment {id}");
        Ok(id)
    }

    pub fn list_experiments(&self) -> Vec<String> {
        self.lock().experiments.keys().cloned().collect()
    }

    fn audit(
        &self,
        id: &str,
        rt: &mut ExpRuntime,
        event: AuditEvent,
        job: Option<&str>,
        detail: Option<serde_json::Value>,
    ) -> ApiResult<()> {
        rt.audit.push(AuditEntry {
            at: now(),
            event,
            job_id: job.map(str::to_string),
            detail,
        });
        let mut bytes = Vec::new();
        for e in &rt.audit {
            serde_json::to_writer(&mut bytes, e).map_err(|e| ApiError::internal(e.to_string()))?;
            bytes.push(b'\n');
        }
        self.store().put(&audit_key(id), &bytes)?;
        Ok(())
    }

    pub fn audit_log(&self, id: &str) -> ApiResult<Vec<AuditEntry>> {
        let st = self.lock();
        Ok(runtime(&st, id)?.audit.clone())
    }

    /// Experiences below this index are trained, or will be by an active job.
    fn covered(st: &State, id: &str, trained: usize) -> usize {
        st.jobs
            .values()
            .filter(|j| j.experiment_id == id && j.state.is_active())
            .map(|j| j.upto)
            .fold(trained, usize::max)
    }

    /// Experiences trained by every seed run.
    fn trained(&self, id: &str, runs: usize) -> ApiResult<usize> {
        let versions = self.inner.registry.versions(id)?;
        Ok((0..runs)
            .map(|r| versions.iter().filter(|v| v.run == r).count())
            .min()
            .unwrap_or(0))
    }

    pub fn push_experience(&self, id: &str, body: &[u8]) -> ApiResult<PushOutcome> {
        let payload: ExperiencePayload = parse_json(body)?;
        let (cfg, scenario) = {
            let st = self.lock();
            let rt = runtime(&st, id)?;
            (rt.config.clone(), rt.scenario.clone())
        };
        let candidate = if payload.from_scenario {
            if payload.classes.is_some() || payload.train_csv.is_some() || payload.test_csv.is_some() {
                return Err(ApiError::bad_request("from_scenario excludes inline data"));
            }
            None
        } else {
            Some(inline_experience(&cfg, &payload)?)
        };

        let mut st = self.lock();
        let trained = self.trained(id, cfg.runs)?;
        let st = &mut *st;
        let rt = st
            .experiments
            .get_mut(id)
            .ok_or_else(|| ApiError::not_found(format!("experiment {id:?}")))?;
        let index = rt.experiences.len();
        if index >= cfg.scenario.n_experiences {
            return Err(ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "ScenarioComplete",
                format!("the scenario declares {} experiences", cfg.scenario.n_experiences),
            ));
        }
        let exp = match candidate {
            Some((class_set, train, test)) => Experience {
                index,
                class_set,
                train,
                test,
            },
            None => {
                let sc = scenario.ok_or_else(|| ApiError::bad_request("experiment has no manifest scenario"))?;
                sc.experiences[index].clone()
            }
        };
        let expected = cfg.scenario.class_count(index);
        if exp.class_set.len() != expected {
            return Err(ApiError::data(format!(
                "experience {index} must introduce {expected} classes, got {}",
                exp.class_set.len()
            ))
            .with_field("classes"));
        }
        let overlap: Vec<usize> = exp
            .class_set
            .iter()
            .copied()
            .filter(|c| rt.classes_seen.contains(c))
            .collect();
        if !overlap.is_empty() {
            return Err(ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "ClassOverlap",
                format!("classes {overlap:?} already appeared in an earlier experience"),
            )
            .with_field("classes"));
        }

        let bytes = serde_json::to_vec(&exp).map_err(|e| ApiError::internal(e.to_string()))?;
        self.store().put(&experience_key(id, index), &bytes)?;
        rt.classes_seen.extend(exp.class_set.iter().copied());
        rt.experiences.push(Arc::new(exp));
        let pushed = rt.experiences.len();

        let mut job = None;
        if let (TriggerMode::EveryNExperiences, Some(n)) = (cfg.trigger.mode, cfg.trigger.n) {
            let pending = pushed - Self::covered(st, id, trained);
            if pending > 0 && pending % n == 0 {
                job = Some(self.enqueue(st, id, TriggerCause::Schedule, pushed)?);
            }
        }
        let rt = st.experiments.get_mut(id).expect("checked above");
        self.audit(
            id,
            rt,
            AuditEvent::ExperiencePushed,
            job.as_deref(),
            Some(serde_json::json!({"experience_index": index})),
        )?;
        Ok(PushOutcome {
            experience_index: index,
            job_id: job,
        })
    }

    fn enqueue(&self, st: &mut State, id: &str, cause: TriggerCause, upto: usize) -> ApiResult<String> {
        st.next_job += 1;
        let job = TrainingJob {
            job_id: job_id(st.next_job),
            experiment_id: id.to_string(),
            trigger_cause: cause,
            state: JobState::Queued,
            submitted_at: now(),
            started_at: None,
            finished_at: None,
            error: None,
            upto,
            commits: Vec::new(),
        };
        self.persist_job(&job)?;
        let jid = job.job_id.clone();
        st.jobs.insert(jid.clone(), job);
        st.queue.push_back(jid.clone());
        self.inner.work.notify_all();
        log::info!("queued {jid} for {id} ({cause:?}, upto {upto})");
        Ok(jid)
    }

    fn persist_job(&self, job: &TrainingJob) -> ApiResult<()> {
        let bytes = serde_json::to_vec_pretty(job).map_err(|e| ApiError::internal(e.to_string()))?;
        self.store().put(&job_key(&job.job_id), &bytes)?;
        Ok(())
    }

    /// Enqueues a job over every pending experience, or folds the request
    /// into the experiment's queued job.
    fn request_training(&self, st: &mut State, id: &str, cause: TriggerCause) -> ApiResult<Option<TriggerOutcome>> {
        let runs = runtime(st, id)?.config.runs;
        let pushed = runtime(st, id)?.experiences.len();
        let trained = self.trained(id, runs)?;
        if pushed <= trained {
            return Ok(None);
        }
        let queued = st
            .queue
            .iter()
            .rev()
            .find(|j| st.jobs[*j].experiment_id == id)
            .cloned();
        if let Some(jid) = queued {
            let job = st.jobs.get_mut(&jid).expect("queued jobs are tracked");
            if job.upto < pushed {
                job.upto = pushed;
                let job = job.clone();
                self.persist_job(&job)?;
            }
            return Ok(Some(TriggerOutcome {
                job_id: jid,
                coalesced: true,
            }));
        }
        let running = st
            .jobs
            .values()
            .find(|j| j.experiment_id == id && j.state == JobState::Running && j.upto >= pushed)
            .map(|j| j.job_id.clone());
        if let Some(jid) = running {
            return Ok(Some(TriggerOutcome {
                job_id: jid,
                coalesced: true,
            }));
        }
        let jid = self.enqueue(st, id, cause, pushed)?;
        Ok(Some(TriggerOutcome {
            job_id: jid,
            coalesced: false,
        }))
    }

    pub fn trigger_job(&self, id: &str) -> ApiResult<TriggerOutcome> {
        let mut st = self.lock();
        let outcome = self.request_training(&mut st, id, TriggerCause::Manual)?;
        let rt = st.experiments.get_mut(id).expect("checked by request_training");
        match outcome {
            Some(o) => {
                self.audit(
                    id,
                    rt,
                    AuditEvent::TriggerRequest,
                    Some(&o.job_id),
                    Some(serde_json::json!({"coalesced": o.coalesced})),
                )?;
                Ok(o)
            }
            None => {
                self.audit(id, rt, AuditEvent::TriggerRequest, None, Some(serde_json::json!({"rejected": "NothingToTrain"})))?;
                Err(ApiError::new(
                    StatusCode::CONFLICT,
                    "NothingToTrain",
                    "no untrained experience is pending",
                ))
            }
        }
    }

    pub fn job(&self, job_id: &str) -> ApiResult<TrainingJob> {
        self.lock()
            .jobs
            .get(job_id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("job {job_id:?}")))
    }

    pub fn jobs_of(&self, id: &str) -> ApiResult<Vec<TrainingJob>> {
        let st = self.lock();
        runtime(&st, id)?;
        Ok(st.jobs.values().filter(|j| j.experiment_id == id).cloned().collect())
    }

    pub fn status(&self, id: &str) -> ApiResult<ExperimentStatus> {
        let st = self.lock();
        let rt = runtime(&st, id)?;
        let versions = self.inner.registry.versions(id)?;
        let runs: Vec<RunStatus> = (0..rt.config.runs)
            .map(|r| RunStatus {
                run: r,
                seed: rt.config.run_seed(r),
                latest_version: versions.iter().filter(|v| v.run == r).map(|v| v.version).max(),
            })
            .collect();
        let trained = runs
            .iter()
            .map(|r| r.latest_version.unwrap_or(0) as usize)
            .min()
            .unwrap_or(0);
        Ok(ExperimentStatus {
            experiment_id: id.to_string(),
            config: rt.config.clone(),
            experiences: rt.experiences.len(),
            trained,
            pending: rt.experiences.len().saturating_sub(trained),
            runs,
            jobs: st
                .jobs
                .values()
                .filter(|j| j.experiment_id == id)
                .map(|j| j.job_id.clone())
                .collect(),
            monitor: rt.monitor.as_ref().map(|m| MonitorStatus {
                detector: m.config.detector,
                pending: m.pending(),
                windows_completed: m.windows_completed,
                has_reference: m.reference.is_some(),
                baseline_acc: m.baseline_acc,
            }),
        })
    }

    /// Seed-run records over the steps every run has completed.
    pub fn metrics(&self, id: &str) -> ApiResult<RunRecord> {
        let runs = {
            let st = self.lock();
            runtime(&st, id)?.config.runs
        };
        let steps = self.trained(id, runs)?;
        if steps == 0 {
            return Err(ApiError::new(
                StatusCode::NOT_FOUND,
                "NoMetricsYet",
                "no training step has completed yet",
            ));
        }
        let records = (0..runs)
            .map(|r| {
                let versions = self.inner.registry.run_versions(id, r)?;
                let mut seed = 0;
                let steps = versions[..steps]
                    .iter()
                    .map(|v| {
                        let m = self.version_metrics(v)?;
                        seed = m.seed;
                        Ok(m.step)
                    })
                    .collect::<ApiResult<Vec<_>>>()?;
                Ok(SeedRecord {
                    seed,
                    steps,
                    complete: true,
                })
            })
            .collect::<ApiResult<Vec<_>>>()?;
        aggregate(&records).map_err(|e| ApiError::internal(e.to_string()))
    }

    fn version_metrics(&self, v: &ModelVersion) -> ApiResult<VersionMetrics> {
        let bytes = self.store().get(&v.metrics_key)?;
        serde_json::from_slice(&bytes).map_err(|e| ApiError::internal(format!("{}: {e}", v.metrics_key)))
    }

    pub fn versions(&self, id: &str, run: Option<usize>) -> ApiResult<Vec<ModelVersion>> {
        let all = self.inner.registry.versions(id)?;
        Ok(match run {
            Some(r) => all.into_iter().filter(|v| v.run == r).collect(),
            None => all,
        })
    }

    pub fn version(&self, id: &str, run: usize, version: u64) -> ApiResult<(ModelVersion, Vec<u8>)> {
        Ok(self.inner.registry.get_version(id, run, version)?)
    }

    pub fn observe(&self, id: &str, body: &[u8]) -> ApiResult<ObserveOutcome> {
        let payload: ObservePayload = parse_json(body)?;
        let (cfg, detector) = {
            let st = self.lock();
            let rt = runtime(&st, id)?;
            let m = rt.monitor.as_ref().ok_or_else(|| {
                ApiError::new(
                    StatusCode::CONFLICT,
                    "MonitoringDisabled",
                    "experiment has no drift config",
                )
            })?;
            (rt.config.clone(), m.config.detector)
        };
        let (outcomes, baseline) = if detector == DetectorKind::PerfDecay {
            let labels = payload
                .labels
                .as_ref()
                .ok_or_else(|| ApiError::data("perf_decay needs labels for every sample").with_field("labels"))?;
            if labels.len() != payload.samples.len() {
                return Err(ApiError::data("labels and samples differ in length").with_field("labels"));
            }
            let (params, baseline) = self.deployed_model(id)?;
            let batch = samples_batch(&payload.samples, cfg.model.input_dim, labels)?;
            let preds = predict_topk(&params, &batch, 1).map_err(|e| ApiError::data(e.to_string()))?;
            let outcomes: Vec<(usize, usize)> = labels.iter().copied().zip(preds.into_iter().map(|p| p[0])).collect();
            (Some(outcomes), Some(baseline))
        } else {
            (None, None)
        };

        let mut st = self.lock();
        let mut monitor = runtime(&st, id)?.monitor.clone().expect("drift config is immutable");
        if let (None, Some(b)) = (monitor.baseline_acc, baseline) {
            monitor = monitor.with_baseline(b);
        }
        let (next, reports) = drift::observe(monitor, &payload.samples, outcomes.as_deref()).map_err(|e| match e {
            DriftError::Data(msg) => ApiError::data(msg),
            other => ApiError::data(other.to_string()),
        })?;
        let pending = next.pending();
        let bytes = serde_json::to_vec(&next).map_err(|e| ApiError::internal(e.to_string()))?;
        self.store().put(&monitor_key(id), &bytes)?;
        st.experiments.get_mut(id).expect("checked above").monitor = Some(next);

        let fired = reports.iter().any(|r| r.fired);
        let mut job = None;
        if fired && cfg.trigger.mode == TriggerMode::OnDrift {
            job = self.request_training(&mut st, id, TriggerCause::Drift)?.map(|o| o.job_id);
        }
        let rt = st.experiments.get_mut(id).expect("checked above");
        for r in &reports {
            let fired_job = if r.fired { job.as_deref() } else { None };
            self.audit(id, rt, AuditEvent::DriftReport, fired_job, serde_json::to_value(r).ok())?;
        }
        Ok(ObserveOutcome {
            fired,
            reports,
            pending,
            job_id: job,
        })
    }

    /// Latest run-0 parameters and their stream top-1 accuracy.
    fn deployed_model(&self, id: &str) -> ApiResult<(Params, f64)> {
        let latest = self.inner.registry.latest(id, 0)?.ok_or_else(|| {
            ApiError::new(StatusCode::CONFLICT, "NoModel", "no trained model to monitor yet")
        })?;
        let state = self.inner.registry.load_state(&latest)?;
        let m = self.version_metrics(&latest)?;
        let acc = m
            .step
            .stream(1)
            .unwrap_or_else(|| m.step.accuracy_row.iter().sum::<f64>() / m.step.accuracy_row.len().max(1) as f64);
        Ok((state.params, acc))
    }
}

fn runtime<'a>(st: &'a State, id: &str) -> ApiResult<&'a ExpRuntime> {
    st.experiments
        .get(id)
        .ok_or_else(|| ApiError::not_found(format!("experiment {id:?}")))
}

fn parse_json<T: for<'de> Deserialize<'de>>(body: &[u8]) -> ApiResult<T> {
    let de = &mut serde_json::Deserializer::from_slice(body);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let err = ApiError::bad_request(inner.to_string());
        if inner.is_syntax() || inner.is_eof() || path == "." {
            err
        } else {
            err.with_field(path)
        }
    })
}

fn samples_batch(samples: &[Vec<f64>], dim: usize, labels: &[usize]) -> ApiResult<Batch> {
    let mut b = Batch::empty(dim);
    for (i, (s, &y)) in samples.iter().zip(labels).enumerate() {
        if s.len() != dim {
            return Err(ApiError::data(format!("sample {i} has {} features, expected {dim}", s.len())).with_field("samples"));
        }
        let row: Vec<f32> = s.iter().map(|&v| v as f32).collect();
        b.push(&row, y);
    }
    Ok(b)
}

fn inline_experience(cfg: &ExperimentConfig, p: &ExperiencePayload) -> ApiResult<(Vec<usize>, Batch, Batch)> {
    let missing = |f: &str| ApiError::bad_request(format!("missing field `{f}`")).with_field(f);
    let classes = p.classes.clone().ok_or_else(|| missing("classes"))?;
    let train_csv = p.train_csv.as_ref().ok_or_else(|| missing("train_csv"))?;
    let test_csv = p.test_csv.as_ref().ok_or_else(|| missing("test_csv"))?;
    let num_classes = cfg.model.num_classes;
    let class_set: BTreeSet<usize> = classes.iter().copied().collect();
    if class_set.len() != classes.len() {
        return Err(ApiError::data("duplicate class in class list").with_field("classes"));
    }
    if let Some(c) = classes.iter().find(|&&c| c >= num_classes) {
        return Err(ApiError::data(format!("class {c} is outside [0, {num_classes})")).with_field("classes"));
    }
    let parse = |text: &str, field: &str| {
        parse_csv(text.as_bytes(), cfg.model.input_dim, num_classes)
            .map_err(|e| ApiError::data(e.to_string()).with_field(field.to_string()))
    };
    let train = parse(train_csv, "train_csv")?;
    let test = parse(test_csv, "test_csv")?;
    for (batch, field) in [(&train, "train_csv"), (&test, "test_csv")] {
        if let Some((i, y)) = batch.labels.iter().enumerate().find(|(_, y)| !class_set.contains(y)) {
            return Err(ApiError::data(format!("row {} has label {y} outside the declared classes", i + 1)).with_field(field));
        }
    }
    if let Some(c) = class_set.iter().find(|c| !train.labels.contains(c)) {
        return Err(ApiError::data(format!("declared class {c} has no training rows")).with_field("train_csv"));
    }
    if let Some(counts) = p.counts {
        if counts.train != train.len() || counts.test != test.len() {
            return Err(ApiError::data(format!(
                "declared counts {}/{} differ from parsed {}/{}",
                counts.train,
                counts.test,
                train.len(),
                test.len()
            ))
            .with_field("counts"));
        }
    }
    Ok((class_set.into_iter().collect(), train, test))
}

/// Rebuilds the in-memory state from storage. Jobs that were running when
/// the previous process stopped are marked failed; queued ones are resumed.
fn recover(registry: &Registry) -> ApiResult<State> {
    let store = registry.store().as_ref();
    let mut st = State::default();
    for id in registry.list_experiments() {
        let config = parse_config(&registry.config(&id)?)?;
        let mut experiences = Vec::new();
        let mut classes_seen = BTreeSet::new();
        for key in store.list(&format!("experiments/{id}/experiences"))? {
            let exp: Experience = serde_json::from_slice(&store.get(&key)?)
                .map_err(|e| ApiError::internal(format!("{key}: {e}")))?;
            classes_seen.extend(exp.class_set.iter().copied());
            experiences.push(Arc::new(exp));
        }
        experiences.sort_by_key(|e| e.index);
        let scenario = match store.get(&scenario_key(&id)) {
            Ok(b) => Some(Arc::new(
                serde_json::from_slice(&b).map_err(|e| ApiError::internal(format!("scenario of {id}: {e}")))?,
            )),
            Err(StoreError::NotFound(_)) => None,
            Err(e) => return Err(e.into()),
        };
        let monitor = match (&config.drift, store.get(&monitor_key(&id))) {
            (Some(_), Ok(b)) => Some(serde_json::from_slice(&b).map_err(|e| ApiError::internal(format!("monitor of {id}: {e}")))?),
            (Some(d), Err(StoreError::NotFound(_))) => {
                Some(MonitorState::new(d.clone(), config.model.input_dim).map_err(|e| ApiError::internal(e.to_string()))?)
            }
            (Some(_), Err(e)) => return Err(e.into()),
            (None, _) => None,
        };
        let audit = match store.get(&audit_key(&id)) {
            Ok(b) => String::from_utf8_lossy(&b)
                .lines()
                .filter_map(|l| serde_json::from_str(l).ok())
                .collect(),
            Err(StoreError::NotFound(_)) => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        st.experiments.insert(
            id,
            ExpRuntime {
                config,
                experiences,
                scenario,
                classes_seen,
                monitor,
                audit,
            },
        );
    }

    let mut jobs: Vec<TrainingJob> = Vec::new();
    for key in store.list("jobs")? {
        let job: TrainingJob =
            serde_json::from_slice(&store.get(&key)?).map_err(|e| ApiError::internal(format!("{key}: {e}")))?;
        jobs.push(job);
    }
    jobs.sort_by_key(|j| job_number(&j.job_id));
    for mut job in jobs {
        st.next_job = st.next_job.max(job_number(&job.job_id).unwrap_or(0));
        match job.state {
            JobState::Running => {
                job.state = JobState::Failed;
                job.finished_at = Some(now());
                job.error = Some("interrupted: the service stopped while the job was running".into());
                let bytes = serde_json::to_vec_pretty(&job).map_err(|e| ApiError::internal(e.to_string()))?;
                store.put(&job_key(&job.job_id), &bytes)?;
                if let Some(rt) = st.experiments.get_mut(&job.experiment_id) {
                    rt.audit.push(AuditEntry {
                        at: now(),
                        event: AuditEvent::JobInterrupted,
                        job_id: Some(job.job_id.clone()),
                        detail: None,
                    });
                }
                log::warn!("{} was interrupted and is marked failed", job.job_id);
            }
            JobState::Queued => st.queue.push_back(job.job_id.clone()),
            _ => {}
        }
        st.jobs.insert(job.job_id.clone(), job);
    }
    Ok(st)
}

fn worker_loop(inner: Arc<Inner>) {
    let svc = Service { inner };
    loop {
        let job = {
            let mut st = svc.lock();
            loop {
                if svc.inner.shutdown.load(Ordering::SeqCst) {
                    return;
                }
                let pos = st
                    .queue
                    .iter()
                    .position(|j| !st.running.contains(&st.jobs[j].experiment_id));
                if let Some(pos) = pos {
                    let jid = st.queue.remove(pos).expect("position is in range");
                    let job = st.jobs.get_mut(&jid).expect("queued jobs are tracked");
                    job.state = JobState::Running;
                    job.started_at = Some(now());
                    let job = job.clone();
                    st.running.insert(job.experiment_id.clone());
                    if let Err(e) = svc.persist_job(&job) {
                        log::error!("cannot persist {}: {e}", job.job_id);
                    }
                    if let Some(rt) = st.experiments.get_mut(&job.experiment_id) {
                        let _ = svc.audit(&job.experiment_id, rt, AuditEvent::JobStarted, Some(&job.job_id), None);
                    }
                    break job;
                }
                st = svc.inner.work.wait(st).unwrap_or_else(|e| e.into_inner());
            }
        };
        log::info!("running {} for {}", job.job_id, job.experiment_id);
        let result = catch_unwind(AssertUnwindSafe(|| svc.execute(&job)))
            .unwrap_or_else(|_| Err("training panicked".to_string()));

        let mut st = svc.lock();
        st.running.remove(&job.experiment_id);
        let finished = st.jobs.get_mut(&job.job_id).expect("running jobs are tracked");
        finished.finished_at = Some(now());
        match &result {
            Ok(()) => finished.state = JobState::Succeeded,
            Err(msg) => {
                finished.state = JobState::Failed;
                finished.error = Some(msg.clone());
                log::error!("{} failed: {msg}", job.job_id);
            }
        }
        let finished = finished.clone();
        if let Err(e) = svc.persist_job(&finished) {
            log::error!("cannot persist {}: {e}", finished.job_id);
        }
        if let Some(rt) = st.experiments.get_mut(&job.experiment_id) {
            if result.is_ok() {
                if let Some(m) = rt.monitor.as_mut() {
                    m.reset(None);
                    if let Ok(bytes) = serde_json::to_vec(m) {
                        let _ = svc.store().put(&monitor_key(&job.experiment_id), &bytes);
                    }
                }
            }
            let detail = serde_json::json!({"state": finished.state, "commits": finished.commits.len()});
            let _ = svc.audit(&job.experiment_id, rt, AuditEvent::JobFinished, Some(&job.job_id), Some(detail));
        }
        drop(st);
        svc.inner.work.notify_all();
    }
}

impl Service {
    /// Trains every seed run on each experience below `job.upto` that the
    /// run has not seen, committing one version per (run, experience).
    fn execute(&self, job: &TrainingJob) -> Result<(), String> {
        let id = &job.experiment_id;
        let (cfg, experiences) = {
            let st = self.lock();
            let rt = runtime(&st, id).map_err(|e| e.to_string())?;
            let upto = job.upto.min(rt.experiences.len());
            (rt.config.clone(), rt.experiences[..upto].to_vec())
        };
        let tests: Vec<&Batch> = experiences.iter().map(|e| &e.test).collect();
        let registry = &self.inner.registry;
        let mut states: Vec<Option<StrategyState>> = vec![None; cfg.runs];
        for (k, exp) in experiences.iter().enumerate() {
            for (run, slot) in states.iter_mut().enumerate() {
                let versions = registry.run_versions(id, run).map_err(|e| e.to_string())?;
                if versions.len() > k {
                    continue;
                }
                if versions.len() < k {
                    return Err(format!("run {run} has {} versions, cannot train experience {k}", versions.len()));
                }
                let seed = cfg.run_seed(run);
                let state = match slot.take() {
                    Some(s) => s,
                    None => match versions.last() {
                        Some(v) => registry.load_state(v).map_err(|e| e.to_string())?,
                        None => make_strategy(&cfg.strategy, &cfg.model.with_seed(seed), Validation::Strict)
                            .map_err(|e| e.to_string())?,
                    },
                };
                let (state, stats) =
                    train_experience(state, &cfg.strategy, exp, &mut NoHooks).map_err(|e| e.to_string())?;
                let (row, stream, _) =
                    evaluate_step(&state.params, &tests, k, cfg.evaluation.protocol, &cfg.evaluation.top_k)
                        .map_err(|e| e.to_string())?;
                let version = k as u64 + 1;
                let key = metrics_key(id, run, version);
                let metrics = VersionMetrics {
                    job_id: job.job_id.clone(),
                    run,
                    seed,
                    step: StepRecord {
                        experience: k,
                        seconds: stats.seconds,
                        patterns: stats.patterns_trained_on,
                        final_loss: stats.final_loss,
                        accuracy_row: row,
                        stream_accuracy: stream,
                    },
                };
                let bytes = serde_json::to_vec(&metrics).map_err(|e| e.to_string())?;
                self.store().put(&key, &bytes).map_err(|e| e.to_string())?;
                let committed = registry
                    .commit_version(id, run, &state, &cfg.strategy, &key)
                    .map_err(|e| e.to_string())?;
                if committed.version != version {
                    return Err(format!("committed version {} where {version} was expected", committed.version));
                }
                let mut st = self.lock();
                if let Some(j) = st.jobs.get_mut(&job.job_id) {
                    j.commits.push(Commit { run, version });
                    let j = j.clone();
                    if let Err(e) = self.persist_job(&j) {
                        log::error!("cannot persist {}: {e}", j.job_id);
                    }
                }
                drop(st);
                *slot = Some(state);
            }
        }
        Ok(())
    }
}
