//! Reproducibility record written next to every run's artifacts.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliResult;
use wnet::training::RunConfig;

pub const FILE_NAME: &str = "run.json";

#[derive(Debug, Serialize)]
pub struct RunRecord<'a> {
    pub command: &'a str,
    pub version: &'static str,
    pub config_hash: Option<String>,
    pub seed: Option<u64>,
    pub argv: &'a [String],
    /// SHA-256 of each input file.
    pub inputs: BTreeMap<String, String>,
    pub timestamp_unix: u64,
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| wnet::Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

pub fn write(out: &Path, command: &str, config: Option<&RunConfig>, seed: Option<u64>, inputs: &[&Path], argv: &[String]) -> CliResult<()> {
    let inputs = inputs
        .iter()
        .map(|p| Ok((p.display().to_string(), sha256_file(p)?)))
        .collect::<CliResult<_>>()?;
    let record = RunRecord {
        command,
        version: env!("CARGO_PKG_VERSION"),
        config_hash: config.map(RunConfig::hash),
        seed: seed.or(config.map(|c| c.seed)),
        argv,
        inputs,
        timestamp_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
    };
    let path = out.join(FILE_NAME);
    let text = serde_json::to_string_pretty(&record).map_err(wnet::Error::from)?;
    std::fs::write(&path, text + "\n").map_err(|e| wnet::Error::io(&path, e))?;
    Ok(())
}
