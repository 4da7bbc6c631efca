use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::reward::{reward, RewardConfig};
use super::SearchError;
use crate::archspace::{detokenize, resolve, ArchitectureSpec, ReferenceBase, TokenSequence};

pub const HISTORY_HEADER: [&str; 6] = ["index", "tokens", "macs", "accuracy", "reward", "wall_ms"];

/// One evaluated sample. A failed evaluation has a NaN accuracy and zero
/// reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub index: usize,
    pub tokens: TokenSequence,
    pub macs: u64,
    pub accuracy: f64,
    pub reward: f64,
    pub wall_ms: u64,
}

impl HistoryRow {
    pub fn failed(&self) -> bool {
        self.accuracy.is_nan()
    }

    pub fn spec(&self, base: &ReferenceBase) -> Result<ArchitectureSpec, SearchError> {
        Ok(resolve(&detokenize(&self.tokens), base)?)
    }

    /// Reward implied by the stored accuracy and MACs.
    pub fn recompute_reward(&self, cfg: &RewardConfig) -> Result<f64, SearchError> {
        if self.failed() {
            Ok(0.0)
        } else {
            reward(self.accuracy, self.macs as f64, cfg)
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SearchHistory {
    rows: Vec<HistoryRow>,
}

impl SearchHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn rows(&self) -> &[HistoryRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn push(&mut self, row: HistoryRow) -> Result<(), SearchError> {
        if let Some(last) = self.rows.last() {
            if row.index <= last.index {
                return Err(SearchError::Internal(format!(
                    "history index {} does not follow {}",
                    row.index, last.index
                )));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        {
            let mut w = HistoryWriter::new(&mut buf).expect("in-memory writer");
            for r in &self.rows {
                w.append(r).expect("in-memory writer");
            }
        }
        String::from_utf8(buf).expect("utf-8 csv")
    }

    pub fn from_csv_str(text: &str) -> Result<Self, SearchError> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
        if header != HISTORY_HEADER {
            return Err(SearchError::Format(format!(
                "history header {header:?}, expected {HISTORY_HEADER:?}"
            )));
        }
        let mut history = SearchHistory::new();
        for (line, record) in reader.records().enumerate() {
            let record = record?;
            let field = |i: usize| record.get(i).unwrap_or("");
            let bad = |what: &str, e: &dyn std::fmt::Display| {
                SearchError::Format(format!("history row {}: bad {what}: {e}", line + 1))
            };
            history.push(HistoryRow {
                index: field(0).parse().map_err(|e| bad("index", &e))?,
                tokens: TokenSequence::from_delimited(field(1)).map_err(|e| bad("tokens", &e))?,
                macs: field(2).parse().map_err(|e| bad("macs", &e))?,
                accuracy: field(3).parse().map_err(|e| bad("accuracy", &e))?,
                reward: field(4).parse().map_err(|e| bad("reward", &e))?,
                wall_ms: field(5).parse().map_err(|e| bad("wall_ms", &e))?,
            })?;
        }
        Ok(history)
    }

    pub fn load(path: &Path) -> Result<Self, SearchError> {
        Self::from_csv_str(&std::fs::read_to_string(path)?)
    }
}

/// Streams rows to a CSV sink, flushing after each append.
pub struct HistoryWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl HistoryWriter<BufWriter<File>> {
    pub fn create(path: &Path) -> Result<Self, SearchError> {
        HistoryWriter::new(BufWriter::new(File::create(path)?))
    }
}

impl<W: Write> HistoryWriter<W> {
    pub fn new(sink: W) -> Result<Self, SearchError> {
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_writer(sink);
        inner.write_record(HISTORY_HEADER)?;
        Ok(HistoryWriter { inner })
    }

    pub fn append(&mut self, row: &HistoryRow) -> Result<(), SearchError> {
        self.inner.write_record([
            row.index.to_string(),
            row.tokens.to_delimited(),
            row.macs.to_string(),
            row.accuracy.to_string(),
            row.reward.to_string(),
            row.wall_ms.to_string(),
        ])?;
        self.inner.flush()?;
        Ok(())
    }
}
