//! Newline-delimited JSON suites, one sample per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::sample::Sample;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub schema_version: u32,
    #[serde(flatten)]
    pub sample: Sample,
}

pub fn write_suite(path: &Path, samples: &[Sample]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for s in samples {
        let rec = SampleRecord {
            schema_version: SCHEMA_VERSION,
            sample: s.clone(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_suite(path: &Path) -> Result<Vec<Sample>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(&line)?;
        if rec.schema_version != SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "{}:{}: schema_version {} (expected {SCHEMA_VERSION})",
                path.display(),
                lineno + 1,
                rec.schema_version
            )));
        }
        out.push(rec.sample);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::{SuiteSpec, TaskKind};

    #[test]
    fn suite_file_round_trip_and_quota() {
        let spec = SuiteSpec {
            tasks: TaskKind::ALL.to_vec(),
            seed_start: 100,
            per_task: 3,
            grid: (6, 6),
        };
        let samples = spec.generate().unwrap();
        for t in TaskKind::ALL {
            assert_eq!(samples.iter().filter(|s| s.task == t).count(), 3);
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("suite.jsonl");
        write_suite(&p, &samples).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), samples.len());
        assert!(text.lines().all(|l| l.contains("\"schema_version\":1")));
        assert_eq!(read_suite(&p).unwrap(), samples);
    }
}
