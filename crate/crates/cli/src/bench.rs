//! Embedded benchmark: runs a preset for each strategy over the given seeds
//! and writes `<out>/<strategy>/{time_memory,accuracy}.csv`.

use std::path::{Path, PathBuf};

use claas_core::harness::{accuracy_csv, preset, run_preset, time_memory_csv, HarnessError};
use claas_core::strategies::StrategyName;

use crate::error::{CliError, CliResult, Kind};

pub fn run(preset_name: &str, strategies: &[StrategyName], seeds: &[u64], out: &Path) -> CliResult<Vec<PathBuf>> {
    let p = preset(preset_name).map_err(|e| match e {
        HarnessError::UnknownPreset(_) => CliError::input(format!("{e}; known presets: blobs10")),
        other => CliError::input(other.to_string()),
    })?;
    if seeds.is_empty() {
        return Err(CliError::input("at least one seed is required"));
    }
    let mut written = Vec::new();
    for &strategy in strategies {
        let (_, record) = run_preset(&p, strategy, seeds)
            .map_err(|e| CliError::new(Kind::Server, format!("{strategy} benchmark failed: {e}")))?;
        let dir = out.join(strategy.to_string());
        std::fs::create_dir_all(&dir).map_err(|e| CliError::input(format!("cannot create {}: {e}", dir.display())))?;
        for (name, body) in [("time_memory.csv", time_memory_csv(&record)), ("accuracy.csv", accuracy_csv(&record))] {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|e| CliError::input(format!("cannot write {}: {e}", path.display())))?;
            written.push(path);
        }
    }
    Ok(written)
}
