use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::{read_text, write_file, CliError, CliResult};

/// Record of one batch run, written next to its outputs. `args` is enough to
/// reproduce the outputs exactly (`dragdrop replay <manifest>`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: Option<Value>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seed: Option<u64>,
    pub version: String,
    pub wall_time_ms: u64,
    #[serde(skip)]
    pub(crate) manifest_path: Option<PathBuf>,
}

impl RunManifest {
    pub fn new(command: &str, args: Vec<String>) -> Self {
        RunManifest {
            command: command.to_string(),
            args,
            config: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            seed: None,
            version: env!("CARGO_PKG_VERSION").to_string(),
            wall_time_ms: 0,
            manifest_path: None,
        }
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        serde_json::from_str(&read_text(path)?).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }

    /// Writes the manifest if the command produced files.
    pub(crate) fn finish(mut self, elapsed: Duration) -> CliResult<()> {
        let Some(path) = self.manifest_path.take() else {
            return Ok(());
        };
        self.wall_time_ms = elapsed.as_millis() as u64;
        let text = serde_json::to_string_pretty(&self).expect("manifest serializes");
        write_file(&path, text + "\n")
    }
}

/// `<out>.manifest.json`
pub(crate) fn beside(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}
