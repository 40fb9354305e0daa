use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
}

/// Everything needed to repeat a run: the command, its fully resolved
/// settings, the seed, and checksums of what it read and wrote.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: &'static str,
    pub config: Value,
    pub seed: Option<u64>,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub wall_clock_seconds: f64,
    #[serde(skip)]
    started: Option<Instant>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {} for its checksum", path.display()))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

impl RunManifest {
    pub fn start(command: &str) -> Self {
        RunManifest {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION"),
            config: Value::Null,
            seed: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            wall_clock_seconds: 0.0,
            started: Some(Instant::now()),
        }
    }

    pub fn config(&mut self, v: impl Serialize) -> Result<()> {
        self.config = serde_json::to_value(v)?;
        Ok(())
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(Artifact {
            path: path.to_path_buf(),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        self.outputs.push(Artifact {
            path: path.to_path_buf(),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    /// Writes to `target`, or to stderr when there is nowhere to put it.
    pub fn finish(mut self, target: Option<PathBuf>) -> Result<()> {
        if let Some(t) = self.started.take() {
            self.wall_clock_seconds = t.elapsed().as_secs_f64();
        }
        let text = serde_json::to_string_pretty(&self)?;
        match target {
            Some(p) => fs::write(&p, text + "\n").with_context(|| format!("writing manifest {}", p.display())),
            None => {
                eprintln!("{text}");
                Ok(())
            }
        }
    }
}

/// Default manifest location next to a command's primary output.
pub fn beside(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}
