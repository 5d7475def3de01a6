//! Run-directory file layout and JSONL helpers.

use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::CliError;

pub const CONFIG: &str = "config.toml";
pub const COLLECTIONS: &str = "collections.jsonl";
pub const TRIALS: &str = "trials.jsonl";
pub const AUDIT: &str = "audit.jsonl";
pub const RUN_STATS: &str = "run_stats.json";
pub const SCORES: &str = "scores.jsonl";
pub const COMPARISONS_JSON: &str = "comparisons.json";
pub const COMPARISONS_CSV: &str = "comparisons.csv";
pub const REPORT: &str = "report.txt";
pub const TABLE: &str = "table.csv";
pub const BARS: &str = "bars.csv";
pub const MANIFEST: &str = "manifest.json";
pub const CACHE: &str = "cache";

#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn create(&self) -> Result<(), CliError> {
        fs::create_dir_all(&self.root).map_err(io_err(&self.root))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn exists(&self, name: &str) -> bool {
        self.path(name).is_file()
    }

    /// Reads every record; a missing file is a missing input.
    pub fn read_jsonl<T: DeserializeOwned>(&self, name: &str) -> Result<Vec<T>, CliError> {
        let path = self.path(name);
        if !path.is_file() {
            return Err(CliError::MissingInput(format!(
                "{} not found",
                path.display()
            )));
        }
        let file = fs::File::open(&path).map_err(io_err(&path))?;
        let mut out = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(io_err(&path))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec = serde_json::from_str(&line).map_err(|source| CliError::Json {
                path: path.display().to_string(),
                line: i + 1,
                source,
            })?;
            out.push(rec);
        }
        Ok(out)
    }

    /// Like [`read_jsonl`](Self::read_jsonl) but a missing file reads as empty.
    pub fn read_jsonl_or_empty<T: DeserializeOwned>(&self, name: &str) -> Result<Vec<T>, CliError> {
        if self.exists(name) {
            self.read_jsonl(name)
        } else {
            Ok(Vec::new())
        }
    }

    pub fn write_jsonl<T: Serialize>(&self, name: &str, records: &[T]) -> Result<(), CliError> {
        let mut text = String::new();
        for r in records {
            text.push_str(&serde_json::to_string(r).expect("record serialises"));
            text.push('\n');
        }
        self.write(name, &text)
    }

    pub fn append_jsonl<T: Serialize>(&self, name: &str, records: &[T]) -> Result<(), CliError> {
        if records.is_empty() {
            return Ok(());
        }
        let path = self.path(name);
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err(&path))?;
        let mut text = String::new();
        for r in records {
            text.push_str(&serde_json::to_string(r).expect("record serialises"));
            text.push('\n');
        }
        file.write_all(text.as_bytes()).map_err(io_err(&path))
    }

    /// Replaces `name` atomically.
    pub fn write(&self, name: &str, text: &str) -> Result<(), CliError> {
        let path = self.path(name);
        let mut tmp = tempfile::NamedTempFile::new_in(&self.root).map_err(io_err(&path))?;
        tmp.write_all(text.as_bytes()).map_err(io_err(&path))?;
        tmp.persist(&path).map_err(|e| CliError::Io {
            path: path.display().to_string(),
            source: e.error,
        })?;
        Ok(())
    }

    pub fn read_to_string(&self, name: &str) -> Result<String, CliError> {
        let path = self.path(name);
        fs::read_to_string(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                CliError::MissingInput(format!("{} not found", path.display()))
            } else {
                CliError::Io {
                    path: path.display().to_string(),
                    source: e,
                }
            }
        })
    }
}
