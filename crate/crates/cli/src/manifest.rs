use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use dota_core::config::KeyValues;

pub const MANIFEST_FILE: &str = "manifest.txt";

/// Record of one artifact-producing command: what ran, with which
/// configuration and seeds, what it read and wrote, and how long it took.
#[derive(Debug, Clone)]
pub struct RunManifest {
    pub command: String,
    pub config: KeyValues,
    pub seeds: Vec<(String, u64)>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    started_unix: u64,
    clock: Instant,
}

impl RunManifest {
    pub fn start(command: &str) -> Self {
        RunManifest {
            command: command.to_string(),
            config: KeyValues::new(),
            seeds: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            started_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            clock: Instant::now(),
        }
    }

    pub fn snapshot(&mut self, prefix: &str, kv: &KeyValues) {
        for (k, v) in kv.iter() {
            self.config.set(&format!("{}{}", prefix, k), v);
        }
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("command", &self.command);
        kv.set("tool_version", env!("CARGO_PKG_VERSION"));
        for (name, seed) in &self.seeds {
            kv.set(&format!("seed.{}", name), seed);
        }
        for (k, v) in self.config.iter() {
            kv.set(&format!("config.{}", k), v);
        }
        for (i, p) in self.inputs.iter().enumerate() {
            kv.set(&format!("input.{}", i), p.display());
        }
        for (i, p) in self.outputs.iter().enumerate() {
            kv.set(&format!("output.{}", i), p.display());
        }
        kv.set("started_unix", self.started_unix);
        kv.set(
            "wall_seconds",
            format!("{:.3}", self.clock.elapsed().as_secs_f64()),
        );
        kv
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_key_values().to_text())
            .with_context(|| format!("writing manifest {}", path.display()))
    }
}

/// Manifest path for a single-file artifact: `<file>.manifest.txt`.
pub fn manifest_beside(file: &Path) -> PathBuf {
    let mut name = file
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".manifest.txt");
    file.with_file_name(name)
}
