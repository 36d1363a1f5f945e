//! JSON-lines files with a versioned header, and atomic file replacement.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prior::{InitialState, NoiseSequence};
use crate::sim::Scenario;

pub const FORMAT_VERSION: u32 = 1;

/// First line of every JSON-lines file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileHeader {
    pub kind: String,
    pub version: u32,
    pub config_hash: String,
    pub scenario: Scenario,
    #[serde(default)]
    pub meta: serde_json::Value,
}

impl FileHeader {
    pub fn new(kind: &str, config_hash: &str, scenario: Scenario) -> Self {
        Self {
            kind: kind.into(),
            version: FORMAT_VERSION,
            config_hash: config_hash.into(),
            scenario,
            meta: serde_json::Value::Null,
        }
    }

    /// Checks kind, version and (when given) the config hash.
    pub fn expect(&self, kind: &str, config_hash: Option<&str>) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Format(format!("expected a `{kind}` file, found `{}`", self.kind)));
        }
        if self.version != FORMAT_VERSION {
            return Err(Error::Incompatible(format!(
                "format version {} is not supported (expected {FORMAT_VERSION})",
                self.version
            )));
        }
        if let Some(h) = config_hash {
            if h != self.config_hash {
                return Err(Error::Incompatible(format!(
                    "file was produced with config {} but the current config is {h}",
                    self.config_hash
                )));
            }
        }
        Ok(())
    }
}

pub const KIND_MC: &str = "mc-failures";
pub const KIND_SAMPLES: &str = "samples";
pub const KIND_DATASET: &str = "elite-dataset";
pub const KIND_REPORT: &str = "training-report";

/// One simulated episode with full provenance. Used for Monte Carlo failures
/// and for generated samples alike.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeRecord {
    pub scenario: Scenario,
    pub episode_index: u64,
    pub s0: [f64; 4],
    pub epsilon: NoiseSequence,
    pub behavior_seed: u64,
    pub rho: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho_threshold: Option<f64>,
}

impl EpisodeRecord {
    pub fn initial_state(&self) -> InitialState {
        InitialState::from_array(self.s0)
    }

    pub fn is_failure(&self) -> bool {
        self.rho == 0.0
    }
}

pub fn write_jsonl<W: Write, T: Serialize>(mut w: W, header: &FileHeader, records: &[T]) -> Result<()> {
    serde_json::to_writer(&mut w, header)?;
    w.write_all(b"\n")?;
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(r: impl BufRead) -> Result<(FileHeader, Vec<T>)> {
    let mut lines = r.lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Format("file is empty, expected a header line".into()))??;
    let header: FileHeader =
        serde_json::from_str(&first).map_err(|e| Error::Format(format!("bad header line: {e}")))?;
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format(format!("line {}: {e}", i + 2)))?);
    }
    Ok((header, out))
}

pub fn read_jsonl_file<T: DeserializeOwned>(path: &Path) -> Result<(FileHeader, Vec<T>)> {
    let f = File::open(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    read_jsonl(BufReader::new(f))
}

fn temp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

/// Writes through a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = temp_path(path);
    let mut w = BufWriter::new(File::create(&tmp)?);
    f(&mut w)?;
    w.flush()?;
    w.get_ref().sync_all()?;
    drop(w);
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_jsonl_file<T: Serialize>(path: &Path, header: &FileHeader, records: &[T]) -> Result<()> {
    write_atomic(path, |w| write_jsonl(w, header, records))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(i: u64) -> EpisodeRecord {
        EpisodeRecord {
            scenario: Scenario::West,
            episode_index: i,
            s0: [0.1, -0.2, 0.3, 1.0 / 3.0],
            epsilon: NoiseSequence::new((0..92).map(|j| (j as f64 * 0.37 + i as f64).sin() * 1e-3).collect()).unwrap(),
            behavior_seed: u64::MAX - i,
            rho: if i % 2 == 0 { 0.0 } else { 0.012_345_678_9 },
            rho_threshold: (i % 3 == 0).then_some(0.0),
        }
    }

    #[test]
    fn records_round_trip_bit_exactly() {
        let h = FileHeader::new(KIND_MC, "deadbeef", Scenario::West);
        let recs: Vec<_> = (0..5).map(record).collect();
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &h, &recs).unwrap();
        let (h2, back): (_, Vec<EpisodeRecord>) = read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(h, h2);
        assert_eq!(recs, back);
        let mut again = Vec::new();
        write_jsonl(&mut again, &h2, &back).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn header_checks() {
        let h = FileHeader::new(KIND_SAMPLES, "aa", Scenario::South);
        assert!(h.expect(KIND_SAMPLES, Some("aa")).is_ok());
        assert!(matches!(h.expect(KIND_SAMPLES, Some("bb")), Err(Error::Incompatible(_))));
        assert!(matches!(h.expect(KIND_MC, None), Err(Error::Format(_))));
        let mut old = h.clone();
        old.version = 0;
        assert!(matches!(old.expect(KIND_SAMPLES, None), Err(Error::Incompatible(_))));
    }

    #[test]
    fn malformed_lines_are_reported() {
        let text = "{\"kind\":\"samples\",\"version\":1,\"config_hash\":\"x\",\"scenario\":\"south\"}\nnot json\n";
        let r: Result<(FileHeader, Vec<EpisodeRecord>)> = read_jsonl(text.as_bytes());
        assert!(matches!(r, Err(Error::Format(m)) if m.contains("line 2")));
        let r: Result<(FileHeader, Vec<EpisodeRecord>)> = read_jsonl("".as_bytes());
        assert!(r.is_err());
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub").join("x.jsonl");
        let h = FileHeader::new(KIND_MC, "h", Scenario::East);
        write_jsonl_file(&p, &h, &[record(1)]).unwrap();
        write_jsonl_file(&p, &h, &[record(1), record(2)]).unwrap();
        let (_, recs): (_, Vec<EpisodeRecord>) = read_jsonl_file(&p).unwrap();
        assert_eq!(recs.len(), 2);
        assert!(!temp_path(&p).exists());
    }
}
