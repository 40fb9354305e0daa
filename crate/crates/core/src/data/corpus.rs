use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One univariate series of a corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesRecord {
    pub id: String,
    pub values: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub freq: Option<String>,
}

impl SeriesRecord {
    pub fn new(id: impl Into<String>, values: Vec<f64>) -> Self {
        SeriesRecord {
            id: id.into(),
            values,
            freq: None,
        }
    }

    pub fn with_freq(mut self, freq: impl Into<String>) -> Self {
        self.freq = Some(freq.into());
        self
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::Data(format!("series {:?} is empty", self.id)));
        }
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("series {:?} has a non-finite value at index {i}", self.id)));
        }
        Ok(())
    }
}

/// Parses line-delimited JSON records; blank lines are skipped.
pub fn parse_corpus(text: &str) -> Result<Vec<SeriesRecord>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: SeriesRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        rec.validate()?;
        if !seen.insert(rec.id.clone()) {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("duplicate id {:?}", rec.id),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<SeriesRecord>> {
    parse_corpus(&fs::read_to_string(path)?)
}

/// Writes one JSON object per line. Values use the shortest decimal that
/// reads back to the same `f64`.
pub fn save_corpus(path: impl AsRef<Path>, records: &[SeriesRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for r in records {
        r.validate()?;
        let line = serde_json::to_string(r).map_err(|e| Error::Data(e.to_string()))?;
        writeln!(f, "{line}")?;
    }
    f.flush()?;
    Ok(())
}
