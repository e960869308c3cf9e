use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use qdistill::io::{sha256_file, sha256_hex, write_json};
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

static ARGS: Mutex<Vec<String>> = Mutex::new(Vec::new());

pub fn set_args(args: Vec<String>) {
    *ARGS.lock().unwrap() = args;
}

/// Everything needed to re-run a subcommand: resolved config, arguments and
/// content hashes of what it read and wrote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub args: Vec<String>,
    pub config_digest: String,
    pub seed: u64,
    pub config: Config,
    pub inputs: BTreeMap<String, String>,
    pub artifacts: BTreeMap<String, String>,
    /// Artifacts whose bytes depend on the host (timings).
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub host_dependent: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, config: &Config) -> Self {
        let json = serde_json::to_vec(config).expect("config serializes");
        Self {
            tool: "qdistill".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            args: ARGS.lock().unwrap().clone(),
            config_digest: sha256_hex(&json),
            seed: config.run.seed,
            config: config.clone(),
            inputs: BTreeMap::new(),
            artifacts: BTreeMap::new(),
            host_dependent: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        self.inputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    /// Records `dir/name`, which must already be written.
    pub fn artifact(&mut self, dir: &Path, name: &str) -> Result<PathBuf, CliError> {
        let p = dir.join(name);
        self.artifacts.insert(name.to_string(), sha256_file(&p)?);
        Ok(p)
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("{}: not a manifest: {e}", path.display())))
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        write_json(&dir.join(MANIFEST_FILE), self)?;
        Ok(())
    }
}
