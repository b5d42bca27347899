//! Per-invocation provenance: which config produced which files from
//! which inputs. The manifest is the only output that may differ between
//! two identical runs (its timestamp); everything else is byte-stable.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub subcommand: String,
    pub config_sha256: String,
    pub seed: u64,
    /// Input artifact path -> SHA-256 of its bytes.
    pub inputs: BTreeMap<String, String>,
    /// Files this invocation wrote, relative to the run directory when
    /// they live under it.
    pub outputs: Vec<String>,
    pub unix_time: u64,
}

impl Manifest {
    pub fn new(subcommand: &str, config_bytes: &[u8], seed: u64) -> Self {
        Manifest {
            subcommand: subcommand.to_string(),
            config_sha256: sha256_hex(config_bytes),
            seed,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            unix_time: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }

    pub fn record_input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn record_output(&mut self, out_dir: &Path, path: &Path) {
        let shown = path.strip_prefix(out_dir).unwrap_or(path);
        self.outputs.push(shown.display().to_string());
    }

    /// Written as `<subcommand>.manifest.json` so several stages can
    /// share one run directory.
    pub fn write(&self, out_dir: &Path) -> Result<PathBuf> {
        let path = out_dir.join(format!("{}.manifest.json", self.subcommand));
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for b in digest {
        hex.push_str(&format!("{b:02x}"));
    }
    hex
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_matches_known_vector() {
        // Standard test vector for the empty string.
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn outputs_are_shown_relative_to_the_run_dir() {
        let mut m = Manifest::new("generate", b"{}", 1);
        let out = Path::new("/tmp/run");
        m.record_output(out, &out.join("dataset.ndjson"));
        m.record_output(out, Path::new("/elsewhere/file.csv"));
        assert_eq!(m.outputs, vec!["dataset.ndjson", "/elsewhere/file.csv"]);
    }

    #[test]
    fn manifest_round_trips_as_json() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.bin");
        std::fs::write(&input, b"payload").unwrap();
        let mut m = Manifest::new("evaluate", b"cfg", 42);
        m.record_input(&input).unwrap();
        m.record_output(dir.path(), &dir.path().join("report.json"));
        let path = m.write(dir.path()).unwrap();
        let parsed: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(parsed["subcommand"], "evaluate");
        assert_eq!(parsed["seed"], 42);
        assert_eq!(parsed["inputs"][input.display().to_string()], sha256_hex(b"payload"));
        assert_eq!(parsed["outputs"][0], "report.json");
    }
}
