//! Per-run manifest: resolved configuration plus SHA-256 of every input and
//! output artifact.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::config::{Resolved, Source};

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = std::fs::File::open(path).with_context(|| format!("hashing {}", path.display()))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub args: Vec<String>,
    pub config: BTreeMap<String, Value>,
    /// Keys whose value did not come from the defaults, with their layer.
    pub overrides: BTreeMap<String, Source>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, Value>,
    #[serde(skip)]
    run_dir: PathBuf,
}

impl RunManifest {
    pub fn new(command: &str, resolved: &Resolved, run_dir: &Path) -> Self {
        Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            args: std::env::args().skip(1).collect(),
            config: resolved.values.clone(),
            overrides: resolved.sources.iter().filter(|(_, s)| **s != Source::Default).map(|(k, s)| (k.clone(), *s)).collect(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            extra: BTreeMap::new(),
            run_dir: run_dir.to_path_buf(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    /// Records an output; paths inside the run directory are stored
    /// relative to it.
    pub fn output(&mut self, path: &Path) -> Result<()> {
        let key = path.strip_prefix(&self.run_dir).unwrap_or(path).display().to_string();
        self.outputs.insert(key, sha256_file(path)?);
        Ok(())
    }

    pub fn note(&mut self, key: &str, value: impl Serialize) -> Result<()> {
        self.extra.insert(key.into(), serde_json::to_value(value)?);
        Ok(())
    }

    /// Writes `manifest-<command>.json` into the run directory.
    pub fn write(&self) -> Result<PathBuf> {
        let path = self.run_dir.join(format!("manifest-{}.json", self.command));
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        hee::checkpoint::write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_matches_known_digest() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("abc");
        std::fs::write(&p, b"abc").unwrap();
        assert_eq!(sha256_file(&p).unwrap(), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn outputs_are_relative_to_the_run_dir() {
        let dir = tempfile::tempdir().unwrap();
        let resolved = crate::config::ConfigBuilder::new().build().unwrap();
        let mut m = RunManifest::new("score", &resolved, dir.path());
        let out = dir.path().join("report.txt");
        std::fs::write(&out, "x").unwrap();
        m.output(&out).unwrap();
        assert!(m.outputs.contains_key("report.txt"));
        let written = m.write().unwrap();
        let v: Value = serde_json::from_str(&std::fs::read_to_string(written).unwrap()).unwrap();
        assert_eq!(v["config"]["pipeline.window_s"], 3.2);
        assert_eq!(v["command"], "score");
    }
}
