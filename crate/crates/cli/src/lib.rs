//! `claas`: command-line client for the CLaaS REST API, plus an embedded
//! benchmark runner that writes plot-ready CSVs.
//!
//! Exit codes: 0 success, 2 input error, 3 transport error, 4 not found,
//! 5 server error.

pub mod bench;
pub mod client;
pub mod error;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use claas_core::strategies::StrategyName;

use client::{bytes_of, Api};
use error::{CliError, CliResult, Kind};

#[derive(Debug, Parser)]
#[command(name = "claas", version, about = "Client for the CLaaS continual-training service")]
pub struct Cli {
    /// Base URL of the service.
    #[arg(long, global = true, env = "CLAAS_SERVER", default_value = "http://127.0.0.1:8080")]
    pub server: String,
    /// Directory for files written by `export` and `bench`.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    /// Rendering of metrics.
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

impl Format {
    fn as_str(self) -> &'static str {
        match self {
            Format::Json => "json",
            Format::Csv => "csv",
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create an experiment from a configuration file and print its id.
    Init { config: PathBuf },
    /// Upload an experience.
    Push {
        experiment_id: String,
        /// JSON payload with `classes`, `train_csv`, `test_csv` and optional `counts`.
        payload: Option<PathBuf>,
        /// Headerless `label,f1,...` training CSV.
        #[arg(long, conflicts_with = "payload", requires_all = ["test", "classes"])]
        train: Option<PathBuf>,
        #[arg(long, conflicts_with = "payload", requires = "train")]
        test: Option<PathBuf>,
        /// Comma-separated class ids of the experience.
        #[arg(long, value_delimiter = ',', requires = "train")]
        classes: Option<Vec<usize>>,
        /// Release the next experience of a manifest scenario.
        #[arg(long, conflicts_with_all = ["payload", "train"])]
        from_scenario: bool,
    },
    /// Request a training job over the pending experiences.
    Train {
        experiment_id: String,
        /// Block until the job finishes.
        #[arg(long)]
        wait: bool,
        /// Seconds to wait for.
        #[arg(long, default_value_t = 600)]
        timeout: u64,
    },
    /// Show an experiment, or a job with `--job`.
    Status {
        #[arg(required_unless_present = "job")]
        experiment_id: Option<String>,
        #[arg(long, conflicts_with = "experiment_id")]
        job: Option<String>,
    },
    /// Print aggregated metrics.
    Metrics { experiment_id: String },
    /// Send monitoring samples from a JSON file (`samples`, optional `labels`).
    Observe { experiment_id: String, samples: PathBuf },
    /// Download metrics or model weights into the output directory.
    Export {
        experiment_id: String,
        what: ExportWhat,
        /// Model version; the latest when omitted.
        #[arg(long)]
        version: Option<u64>,
        /// Seed run of the model.
        #[arg(long, default_value_t = 0)]
        run: usize,
    },
    /// Run a benchmark preset in-process and write its CSVs.
    Bench {
        #[arg(long, default_value = "blobs10")]
        preset: String,
        #[arg(long, value_delimiter = ',', default_values = ["cumulative", "replay"])]
        strategy: Vec<StrategyArg>,
        #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3])]
        seeds: Vec<u64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExportWhat {
    Metrics,
    Weights,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Naive,
    Cumulative,
    Replay,
}

impl From<StrategyArg> for StrategyName {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Naive => StrategyName::Naive,
            StrategyArg::Cumulative => StrategyName::Cumulative,
            StrategyArg::Replay => StrategyName::Replay,
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code. Results go to `out`, diagnostics to `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { Kind::Input.exit_code() } else { 0 };
            let _ = if e.use_stderr() {
                write!(err, "{}", e.render())
            } else {
                write!(out, "{}", e.render())
            };
            return code;
        }
    };
    match execute(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message);
            e.kind.exit_code()
        }
    }
}

fn execute(cli: &Cli, out: &mut dyn Write) -> CliResult<()> {
    match &cli.command {
        Command::Bench { preset, strategy, seeds } => {
            let strategies: Vec<StrategyName> = strategy.iter().map(|&s| s.into()).collect();
            for path in bench::run(preset, &strategies, seeds, &cli.out)? {
                emit(out, &path.display().to_string())?;
            }
            Ok(())
        }
        cmd => remote(cli, cmd, &Api::new(&cli.server)?, out),
    }
}

fn remote(cli: &Cli, cmd: &Command, api: &Api, out: &mut dyn Write) -> CliResult<()> {
    match cmd {
        Command::Init { config } => {
            let body = read_json(config)?;
            let created = api.post_json("/v1/experiments", &body)?;
            emit(out, created["experiment_id"].as_str().unwrap_or_default())
        }
        Command::Push {
            experiment_id,
            payload,
            train,
            test,
            classes,
            from_scenario,
        } => {
            let body = match (payload, train, test, classes) {
                _ if *from_scenario => json!({"from_scenario": true}),
                (Some(p), ..) => read_json(p)?,
                (None, Some(train), Some(test), Some(classes)) => json!({
                    "classes": classes,
                    "train_csv": read_text(train)?,
                    "test_csv": read_text(test)?,
                }),
                _ => {
                    return Err(CliError::input(
                        "give a payload file, --train/--test/--classes, or --from-scenario",
                    ))
                }
            };
            let pushed = api.post_json(&format!("/v1/experiments/{}/experiences", seg(experiment_id)), &body)?;
            emit_json(out, &pushed)
        }
        Command::Train {
            experiment_id,
            wait,
            timeout,
        } => {
            let queued = api.post_empty(&format!("/v1/experiments/{}/jobs", seg(experiment_id)))?;
            let job_id = queued["job_id"].as_str().unwrap_or_default().to_string();
            if !wait {
                return emit(out, &job_id);
            }
            let job = wait_for(api, &job_id, Duration::from_secs(*timeout))?;
            emit_json(out, &job)?;
            if job["state"] == "failed" {
                return Err(CliError::new(
                    Kind::Server,
                    format!("job {job_id} failed: {}", job["error"].as_str().unwrap_or("no message")),
                ));
            }
            Ok(())
        }
        Command::Status { experiment_id, job } => {
            let path = match (job, experiment_id) {
                (Some(j), _) => format!("/v1/jobs/{}", seg(j)),
                (None, Some(id)) => format!("/v1/experiments/{}", seg(id)),
                (None, None) => return Err(CliError::input("give an experiment id or --job")),
            };
            emit_json(out, &api.get_json(&path)?)
        }
        Command::Metrics { experiment_id } => {
            let resp = api.get(&metrics_path(experiment_id, cli.format))?;
            out_bytes(out, &bytes_of(resp)?)
        }
        Command::Observe { experiment_id, samples } => {
            let body = read_json(samples)?;
            emit_json(out, &api.post_json(&format!("/v1/experiments/{}/observe", seg(experiment_id)), &body)?)
        }
        Command::Export {
            experiment_id,
            what,
            version,
            run,
        } => {
            let path = export(api, &cli.out, cli.format, experiment_id, *what, *version, *run)?;
            emit(out, &path.display().to_string())
        }
        Command::Bench { .. } => unreachable!("bench runs in-process"),
    }
}

fn export(
    api: &Api,
    dir: &Path,
    format: Format,
    id: &str,
    what: ExportWhat,
    version: Option<u64>,
    run: usize,
) -> CliResult<PathBuf> {
    let (name, bytes) = match what {
        ExportWhat::Metrics => {
            let bytes = bytes_of(api.get(&metrics_path(id, format))?)?;
            (format!("{id}-metrics.{}", format.as_str()), bytes)
        }
        ExportWhat::Weights => {
            let version = match version {
                Some(v) => v,
                None => latest_version(api, id, run)?,
            };
            let bytes = bytes_of(api.get(&format!("/v1/experiments/{}/versions/{version}/weights?run={run}", seg(id)))?)?;
            claas_core::nn::decode_weights(&bytes)
                .map_err(|e| CliError::new(Kind::Server, format!("downloaded weights do not parse: {e}")))?;
            (format!("{id}-run{run}-v{version}.clbw"), bytes)
        }
    };
    std::fs::create_dir_all(dir).map_err(|e| CliError::input(format!("cannot create {}: {e}", dir.display())))?;
    let path = dir.join(name);
    std::fs::write(&path, bytes).map_err(|e| CliError::input(format!("cannot write {}: {e}", path.display())))?;
    Ok(path)
}

fn latest_version(api: &Api, id: &str, run: usize) -> CliResult<u64> {
    let versions = api.get_json(&format!("/v1/experiments/{}/versions?run={run}", seg(id)))?;
    versions
        .as_array()
        .and_then(|v| v.iter().filter_map(|m| m["version"].as_u64()).max())
        .ok_or_else(|| CliError::new(Kind::NotFound, format!("experiment {id} has no versions for run {run}")))
}

fn wait_for(api: &Api, job_id: &str, timeout: Duration) -> CliResult<Value> {
    let deadline = Instant::now() + timeout;
    loop {
        let job = api.get_json(&format!("/v1/jobs/{}", seg(job_id)))?;
        if matches!(job["state"].as_str(), Some("succeeded" | "failed")) {
            return Ok(job);
        }
        if Instant::now() >= deadline {
            return Err(CliError::new(Kind::Transport, format!("timed out waiting for {job_id}")));
        }
        std::thread::sleep(Duration::from_millis(100));
    }
}

fn metrics_path(id: &str, format: Format) -> String {
    format!("/v1/experiments/{}/metrics?format={}", seg(id), format.as_str())
}

/// Percent-encodes one path segment.
fn seg(s: &str) -> String {
    let mut u = url::Url::parse("http://x/").expect("static URL");
    u.path_segments_mut().expect("http URL").push(s);
    u.path()[1..].to_string()
}

fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::input(format!("cannot read {}: {e}", path.display())))
}

fn read_json(path: &Path) -> CliResult<Value> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| CliError::input(format!("{}: malformed JSON: {e}", path.display())))
}

fn emit(out: &mut dyn Write, line: &str) -> CliResult<()> {
    writeln!(out, "{line}").map_err(|e| CliError::input(format!("cannot write output: {e}")))
}

fn emit_json(out: &mut dyn Write, v: &Value) -> CliResult<()> {
    emit(out, &serde_json::to_string_pretty(v).unwrap_or_default())
}

fn out_bytes(out: &mut dyn Write, bytes: &[u8]) -> CliResult<()> {
    out.write_all(bytes)
        .map_err(|e| CliError::input(format!("cannot write output: {e}")))
}
