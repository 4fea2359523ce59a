//! `run.manifest`: line-oriented `key=value` run records with SHA-256
//! digests of every input and output file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use sha2::{Digest, Sha256};

use crate::igrd::write_atomic;
use crate::{Error, Result};

pub const FILE_NAME: &str = "run.manifest";

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    pub config: BTreeMap<String, String>,
    pub seeds: Vec<u64>,
    /// Path (relative to the manifest directory when possible) to digest.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Path relative to `dir` when inside it, otherwise absolute; either form
/// resolves through `dir.join`.
fn relative(dir: &Path, path: &Path) -> String {
    let abs = |p: &Path| fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
    let (dir, path) = (abs(dir), abs(path));
    path.strip_prefix(&dir).unwrap_or(&path).to_string_lossy().into_owned()
}

impl RunManifest {
    pub fn new(command: &str, config: BTreeMap<String, String>, seeds: Vec<u64>) -> Self {
        Self { command: command.into(), config, seeds, started_unix: unix_now(), ..Default::default() }
    }

    pub fn add_input(&mut self, dir: &Path, path: &Path) -> Result<()> {
        self.inputs.insert(relative(dir, path), sha256_file(path)?);
        Ok(())
    }

    pub fn add_output(&mut self, dir: &Path, path: &Path) -> Result<()> {
        self.outputs.insert(relative(dir, path), sha256_file(path)?);
        Ok(())
    }

    /// Fills the run id from everything except the timestamps, so reruns
    /// with identical config, seeds and inputs share an id.
    pub fn seal(&mut self) {
        self.finished_unix = unix_now();
        let mut h = Sha256::new();
        h.update(self.command.as_bytes());
        for (k, v) in &self.config {
            h.update(format!("\0{k}={v}").as_bytes());
        }
        for s in &self.seeds {
            h.update(s.to_le_bytes());
        }
        for (k, v) in &self.inputs {
            h.update(format!("\0{k}={v}").as_bytes());
        }
        self.run_id = hex::encode(&h.finalize()[..8]);
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut line = |k: &str, v: &str| {
            s.push_str(k);
            s.push('=');
            s.push_str(v);
            s.push('\n');
        };
        line("run_id", &self.run_id);
        line("command", &self.command);
        line("started_unix", &self.started_unix.to_string());
        line("finished_unix", &self.finished_unix.to_string());
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        line("seeds", &seeds.join(","));
        for (k, v) in &self.config {
            line(&format!("config.{k}"), v);
        }
        for (k, v) in &self.inputs {
            line(&format!("input.{k}"), v);
        }
        for (k, v) in &self.outputs {
            line(&format!("output.{k}"), v);
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = RunManifest::default();
        for (n, raw) in text.lines().enumerate() {
            if raw.is_empty() {
                continue;
            }
            let bad = |msg: &str| Error::Format(format!("manifest line {}: {msg}", n + 1));
            // paths may contain '=', digests never do
            let split = if raw.starts_with("input.") || raw.starts_with("output.") { raw.rfind('=') } else { raw.find('=') };
            let (k, v) = split.map(|i| (&raw[..i], &raw[i + 1..])).ok_or_else(|| bad("missing '='"))?;
            let num = |v: &str| v.parse::<u64>().map_err(|_| bad("expected an integer"));
            match k {
                "run_id" => m.run_id = v.into(),
                "command" => m.command = v.into(),
                "started_unix" => m.started_unix = num(v)?,
                "finished_unix" => m.finished_unix = num(v)?,
                "seeds" if v.is_empty() => m.seeds.clear(),
                "seeds" => m.seeds = v.split(',').map(num).collect::<Result<_>>()?,
                _ => {
                    if let Some(key) = k.strip_prefix("config.") {
                        m.config.insert(key.into(), v.into());
                    } else if let Some(p) = k.strip_prefix("input.") {
                        m.inputs.insert(p.into(), v.into());
                    } else if let Some(p) = k.strip_prefix("output.") {
                        m.outputs.insert(p.into(), v.into());
                    } else {
                        return Err(bad(&format!("unknown key {k}")));
                    }
                }
            }
        }
        Ok(m)
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let path = dir.as_ref().join(FILE_NAME);
        write_atomic(&path, self.to_text().as_bytes())?;
        Ok(path)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Recomputes every recorded digest relative to `dir`.
    pub fn verify(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for (p, want) in self.inputs.iter().chain(&self.outputs) {
            let got = sha256_file(dir.join(p))?;
            if &got != want {
                return Err(Error::Digest { path: p.clone(), expected: want.clone(), actual: got });
            }
        }
        Ok(())
    }

    /// Equality ignoring the two timestamps.
    pub fn same_run(&self, other: &Self) -> bool {
        let strip = |m: &Self| Self { started_unix: 0, finished_unix: 0, ..m.clone() };
        strip(self) == strip(other)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_and_tamper_detection() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("a=b.bin");
        fs::write(&f, b"hello").unwrap();
        let mut config = BTreeMap::new();
        config.insert("depth".to_string(), "3".to_string());
        let mut m = RunManifest::new("train", config, vec![1, 2]);
        m.add_output(dir.path(), &f).unwrap();
        m.seal();
        let path = m.write(dir.path()).unwrap();
        let back = RunManifest::read(&path).unwrap();
        assert_eq!(back, m);
        back.verify(dir.path()).unwrap();
        fs::write(&f, b"hellO").unwrap();
        assert!(matches!(back.verify(dir.path()), Err(Error::Digest { .. })));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunManifest::parse("colour=blue\n").is_err());
    }
}
