use std::path::Path;

use serde::Serialize;

use crate::CliError;

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    argv: &'a [String],
    seed: Option<u64>,
    outputs: &'a [String],
}

/// Records the invocation next to its outputs so the run can be repeated.
pub fn write(dir: &Path, command: &str, argv: &[String], seed: Option<u64>, outputs: &[String]) -> Result<(), CliError> {
    let m = Manifest { tool: "vslam", version: env!("CARGO_PKG_VERSION"), command, argv: &argv[1..], seed, outputs };
    let body = serde_json::to_string_pretty(&m).map_err(CliError::failed)?;
    write_file(&dir.join("manifest.json"), &(body + "\n"))
}

pub fn write_file(path: &Path, body: &str) -> Result<(), CliError> {
    std::fs::write(path, body).map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))
}

pub fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Failed(format!("{}: {e}", dir.display())))
}
