//! Run manifests: everything needed to rerun a command and check its outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use stainprompt::datasets::Corpus;
use stainprompt::hash::{file_hash, key_hash, write_atomic};

pub const MANIFEST_NAME: &str = "run_manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Output {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config_path: PathBuf,
    /// The config as parsed, after `--seed` was applied.
    pub config: serde_json::Value,
    pub seed: u64,
    pub substreams: BTreeMap<String, u64>,
    pub workers: usize,
    pub inputs: BTreeMap<String, String>,
    pub checkpoint_hash: Option<String>,
    pub outputs: Vec<Output>,
    pub timings_s: BTreeMap<String, f64>,
    pub started_unix_s: u64,
    pub finished_unix_s: u64,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Accumulates a manifest while a command runs.
pub struct Recorder {
    m: RunManifest,
    clock: Instant,
    declared: Vec<PathBuf>,
}

impl Recorder {
    pub fn new(command: &str, config_path: &Path, table: &toml::Table, seed: u64, workers: usize) -> Result<Self> {
        Ok(Self {
            m: RunManifest {
                command: command.into(),
                tool_version: env!("CARGO_PKG_VERSION").into(),
                config_path: config_path.to_path_buf(),
                config: serde_json::to_value(table)?,
                seed,
                substreams: BTreeMap::new(),
                workers,
                inputs: BTreeMap::new(),
                checkpoint_hash: None,
                outputs: Vec::new(),
                timings_s: BTreeMap::new(),
                started_unix_s: now(),
                finished_unix_s: 0,
            },
            clock: Instant::now(),
            declared: Vec::new(),
        })
    }

    pub fn substream(&mut self, name: &str, value: u64) {
        self.m.substreams.insert(name.into(), value);
    }

    pub fn input(&mut self, name: &str, hash: String) {
        self.m.inputs.insert(name.into(), hash);
    }

    pub fn input_file(&mut self, name: &str, path: &Path) -> Result<()> {
        let h = file_hash(path)?;
        self.input(name, h);
        Ok(())
    }

    pub fn checkpoint(&mut self, hash: &str) {
        self.m.checkpoint_hash = Some(hash.into());
    }

    pub fn time(&mut self, name: &str, seconds: f64) {
        *self.m.timings_s.entry(name.into()).or_insert(0.0) += seconds;
    }

    pub fn output(&mut self, path: impl Into<PathBuf>) {
        self.declared.push(path.into());
    }

    /// Hashes every declared output and writes the manifest into `dir`. Fails
    /// if any declared output is missing.
    pub fn finish(mut self, dir: &Path) -> Result<RunManifest> {
        for p in std::mem::take(&mut self.declared) {
            if !p.is_file() {
                bail!("declared output {} was not written", p.display());
            }
            let sha256 = file_hash(&p)?;
            self.m.outputs.push(Output { path: p, sha256 });
        }
        self.m.timings_s.insert("total".into(), self.clock.elapsed().as_secs_f64());
        self.m.finished_unix_s = now();
        let path = dir.join(MANIFEST_NAME);
        write_atomic(&path, &serde_json::to_vec_pretty(&self.m)?)?;
        Ok(self.m)
    }
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest> {
    let p = dir.join(MANIFEST_NAME);
    let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
}

/// Location-independent corpus identity: domains, records and file contents.
pub fn corpus_hash(corpus: &Corpus) -> Result<String> {
    let mut parts = vec![serde_json::to_string(corpus.domains())?];
    for r in corpus.records() {
        parts.push(format!("{}/{}/{}", r.id, r.domain, r.split));
        parts.push(file_hash(&corpus.path(r))?);
    }
    let refs: Vec<&str> = parts.iter().map(String::as_str).collect();
    Ok(key_hash(&refs))
}
