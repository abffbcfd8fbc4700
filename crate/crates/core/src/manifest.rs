//! Run manifest: config snapshot, per-stage file checksums and timings.
//!
//! Text layout:
//!
//! ```text
//! version <crate version>
//! [config]
//! <key = value lines>
//! [stage <name>]
//! seconds <wall clock>
//! input <relative path> <sha256>
//! output <relative path> <sha256>
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_NAME: &str = "manifest.txt";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Default)]
pub struct StageRecord {
    pub name: String,
    pub seconds: f64,
    pub inputs: Vec<(String, String)>,
    pub outputs: Vec<(String, String)>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunManifest {
    pub version: String,
    pub config: String,
    pub stages: Vec<StageRecord>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_checksum(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

impl RunManifest {
    pub fn new(config: &str) -> Self {
        Self { version: VERSION.to_string(), config: config.to_string(), stages: Vec::new() }
    }

    /// Replaces any earlier record of the same stage, keeping stage order stable.
    pub fn record(&mut self, stage: StageRecord) {
        match self.stages.iter_mut().find(|s| s.name == stage.name) {
            Some(s) => *s = stage,
            None => self.stages.push(stage),
        }
    }

    /// Everything except wall-clock timings, for comparing runs.
    pub fn checksums(&self) -> Vec<(String, &'static str, String, String)> {
        let mut out = Vec::new();
        for s in &self.stages {
            for (p, h) in &s.inputs {
                out.push((s.name.clone(), "input", p.clone(), h.clone()));
            }
            for (p, h) in &s.outputs {
                out.push((s.name.clone(), "output", p.clone(), h.clone()));
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("version {}\n[config]\n{}", self.version, self.config);
        if !self.config.ends_with('\n') && !self.config.is_empty() {
            out.push('\n');
        }
        for s in &self.stages {
            writeln!(out, "[stage {}]", s.name).unwrap();
            writeln!(out, "seconds {:.3}", s.seconds).unwrap();
            for (p, h) in &s.inputs {
                writeln!(out, "input {p} {h}").unwrap();
            }
            for (p, h) in &s.outputs {
                writeln!(out, "output {p} {h}").unwrap();
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |l: &str| Error::Config(format!("manifest line {l:?}"));
        let mut lines = text.lines();
        let version = lines.next().and_then(|l| l.strip_prefix("version ")).ok_or_else(|| bad("version"))?;
        if lines.next() != Some("[config]") {
            return Err(bad("[config]"));
        }
        let mut m = RunManifest { version: version.to_string(), ..Default::default() };
        let mut stage: Option<StageRecord> = None;
        for line in lines {
            if let Some(name) = line.strip_prefix("[stage ").and_then(|l| l.strip_suffix(']')) {
                m.stages.extend(stage.take());
                stage = Some(StageRecord { name: name.to_string(), ..Default::default() });
                continue;
            }
            let Some(s) = stage.as_mut() else {
                m.config.push_str(line);
                m.config.push('\n');
                continue;
            };
            let mut parts = line.splitn(3, ' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some("seconds"), Some(v), None) => s.seconds = v.parse().map_err(|_| bad(line))?,
                (Some("input"), Some(p), Some(h)) => s.inputs.push((p.to_string(), h.to_string())),
                (Some("output"), Some(p), Some(h)) => s.outputs.push((p.to_string(), h.to_string())),
                _ => return Err(bad(line)),
            }
        }
        m.stages.extend(stage);
        Ok(m)
    }

    pub fn load(dir: &Path) -> Result<Option<Self>> {
        let path = dir.join(MANIFEST_NAME);
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::parse(&text).map(Some)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_NAME);
        fs::write(&path, self.to_text()).map_err(|e| Error::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn text_round_trip_and_replacement() {
        let mut m = RunManifest::new("seed = 1\n");
        m.record(StageRecord {
            name: "phantom".into(),
            seconds: 1.5,
            inputs: vec![],
            outputs: vec![("data/a.imgf".into(), "00".into())],
        });
        m.record(StageRecord {
            name: "train".into(),
            seconds: 2.0,
            inputs: vec![("x".into(), "11".into())],
            outputs: vec![],
        });
        m.record(StageRecord {
            name: "phantom".into(),
            seconds: 3.0,
            inputs: vec![],
            outputs: vec![("b".into(), "22".into())],
        });
        assert_eq!(m.stages[0].outputs[0].0, "b");
        let back = RunManifest::parse(&m.to_text()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.checksums().len(), 2);
    }
}
