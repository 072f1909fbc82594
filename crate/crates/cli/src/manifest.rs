//! Run manifests: what was run, with which seeds, and what it wrote.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use chargenoise::pipeline::sha256_hex;
use serde::Serialize;

use crate::CliResult;

/// Manifest file name for `command`; one per command so that several
/// commands can share an output directory.
pub fn manifest_name(command: &str) -> String {
    format!("manifest-{command}.json")
}

#[derive(Debug, Clone, Serialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub master_seed: u64,
    pub seeds: BTreeMap<String, u64>,
    pub artifacts: Vec<Artifact>,
    pub versions: BTreeMap<String, String>,
    pub jobs: usize,
    /// Wall-clock fields; the only ones allowed to differ between reruns.
    pub started_unix_s: f64,
    pub elapsed_s: f64,
}

/// Collects artifacts written by one command.
pub struct Recorder {
    out: PathBuf,
    manifest: RunManifest,
    started: Instant,
}

impl Recorder {
    pub fn new(out: &Path, command: &str, config_hash: String, master_seed: u64, jobs: usize) -> CliResult<Self> {
        std::fs::create_dir_all(out)?;
        let mut versions = BTreeMap::new();
        versions.insert("chargenoise-cli".into(), env!("CARGO_PKG_VERSION").into());
        versions.insert("format".into(), "1".into());
        let started_unix_s = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs_f64())
            .unwrap_or(0.0);
        Ok(Self {
            out: out.to_path_buf(),
            manifest: RunManifest {
                command: command.into(),
                config_hash,
                master_seed,
                seeds: BTreeMap::new(),
                artifacts: Vec::new(),
                versions,
                jobs,
                started_unix_s,
                elapsed_s: 0.0,
            },
            started: Instant::now(),
        })
    }

    pub fn out(&self) -> &Path {
        &self.out
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    pub fn seed(&mut self, label: &str, seed: u64) {
        self.manifest.seeds.insert(label.into(), seed);
    }

    /// Writes `contents` to `name` under the output directory and records it.
    pub fn write(&mut self, name: &str, contents: &str) -> CliResult<()> {
        std::fs::write(self.path(name), contents)?;
        self.record(name, contents.as_bytes());
        Ok(())
    }

    pub fn record(&mut self, name: &str, bytes: &[u8]) {
        self.manifest.artifacts.retain(|a| a.path != name);
        self.manifest.artifacts.push(Artifact {
            path: name.into(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
        });
    }

    /// Writes the manifest and returns it.
    pub fn finish(mut self) -> CliResult<RunManifest> {
        self.manifest.elapsed_s = self.started.elapsed().as_secs_f64();
        let json = serde_json::to_string_pretty(&self.manifest).expect("manifest serialises");
        std::fs::write(self.out.join(manifest_name(&self.manifest.command)), json + "\n")?;
        Ok(self.manifest)
    }
}
