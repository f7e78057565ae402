//! Line-delimited JSON encodings and the batch spool directory.
//!
//! An edge batch is one header line followed by one line per cell:
//!
//! ```text
//! {"edge_id":"e1","slot":{"start":"2017-05-15T12:00:00Z","duration_s":3600},"batch_id":"…","max_depth":16,"sample_ids":["a","b"],"cells":1}
//! {"cell":"0123…","stats":{"classes":[…]}}
//! ```
//!
//! Sums travel as their exact partials, so a decoded batch merges to the
//! same store as the in-memory one.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::edge::EdgeBatch;
use crate::fusion::CellStats;
use crate::grid::Quadkey;
use crate::model::{PollutantKind, SampleId, SourceClass, TimeSlot};

pub const SPOOL_EXTENSION: &str = "jsonl";

#[derive(Debug, Error)]
pub enum WireError {
    #[error("line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error("invalid batch: {0}")]
    Batch(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

/// Parses one JSON value per non-blank line. Line numbers start at 1.
pub fn parse_json_lines<T: DeserializeOwned>(text: &str) -> Result<Vec<T>, WireError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|source| WireError::Json { line: i + 1, source }))
        .collect()
}

/// One compact JSON value per line, each terminated by a newline.
pub fn to_json_lines<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("wire types serialize"));
        out.push('\n');
    }
    out
}

#[derive(Debug, Serialize, Deserialize)]
struct BatchHeader {
    edge_id: String,
    slot: TimeSlot,
    batch_id: String,
    max_depth: u8,
    sample_ids: Vec<SampleId>,
    cells: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CellLine {
    cell: Quadkey,
    stats: CellStats,
}

pub fn encode_batch(batch: &EdgeBatch) -> String {
    let header = BatchHeader {
        edge_id: batch.edge_id.clone(),
        slot: batch.slot,
        batch_id: batch.batch_id.clone(),
        max_depth: batch.max_depth,
        sample_ids: batch.sample_ids.clone(),
        cells: batch.stats.len(),
    };
    let mut out = to_json_lines(&[header]);
    let cells: Vec<CellLine> =
        batch.stats.iter().map(|(k, v)| CellLine { cell: k.clone(), stats: v.clone() }).collect();
    out.push_str(&to_json_lines(&cells));
    out
}

fn check_cell(cell: &Quadkey, stats: &CellStats) -> Result<(), WireError> {
    for class in SourceClass::ALL {
        let c = stats.class(class);
        if let Some(k) = PollutantKind::ALL.into_iter().find(|k| c.counts[k.index()] > c.samples) {
            return Err(WireError::Batch(format!("cell {cell}: {k} count exceeds the {class:?} sample count")));
        }
    }
    Ok(())
}

/// Decodes and checks a batch: cell count, count consistency and the id.
pub fn decode_batch(text: &str) -> Result<EdgeBatch, WireError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines.next().ok_or_else(|| WireError::Batch("empty batch".into()))?;
    let header: BatchHeader = serde_json::from_str(first).map_err(|source| WireError::Json { line: 1, source })?;
    let mut stats = BTreeMap::new();
    for (i, line) in lines {
        let c: CellLine = serde_json::from_str(line).map_err(|source| WireError::Json { line: i + 1, source })?;
        check_cell(&c.cell, &c.stats)?;
        if stats.insert(c.cell.clone(), c.stats).is_some() {
            return Err(WireError::Batch(format!("cell {} appears twice", c.cell)));
        }
    }
    if stats.len() != header.cells {
        return Err(WireError::Batch(format!("header announces {} cells, found {}", header.cells, stats.len())));
    }
    let batch = EdgeBatch {
        edge_id: header.edge_id,
        slot: header.slot,
        max_depth: header.max_depth,
        batch_id: header.batch_id,
        sample_ids: header.sample_ids,
        stats,
    };
    if !batch.verify_id() {
        return Err(WireError::Batch(format!("batch id {} does not match its content", batch.batch_id)));
    }
    Ok(batch)
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> WireError + '_ {
    move |source| WireError::Io { path: path.to_path_buf(), source }
}

fn file_safe(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

/// Writes a batch into the spool directory, atomically via rename.
/// Re-spooling the same batch overwrites the same file.
pub fn write_spool(dir: &Path, batch: &EdgeBatch) -> Result<PathBuf, WireError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let name = format!(
        "{}-{}-{}.{SPOOL_EXTENSION}",
        batch.slot.start().format("%Y%m%dT%H%M%SZ"),
        file_safe(&batch.edge_id),
        batch.batch_id
    );
    let path = dir.join(name);
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode_batch(batch)).map_err(io_err(&tmp))?;
    fs::rename(&tmp, &path).map_err(io_err(&path))?;
    Ok(path)
}

/// Every spooled batch, in file-name order. A missing directory is empty.
pub fn read_spool(dir: &Path) -> Result<Vec<EdgeBatch>, WireError> {
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(dir)(e)),
    };
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(io_err(dir))?.path();
        if path.extension().is_some_and(|e| e == SPOOL_EXTENSION) {
            paths.push(path);
        }
    }
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(io_err(p))?;
            decode_batch(&text).map_err(|e| match e {
                WireError::Json { line, source } => {
                    WireError::Batch(format!("{}: line {line}: {source}", p.display()))
                }
                WireError::Batch(msg) => WireError::Batch(format!("{}: {msg}", p.display())),
                other => other,
            })
        })
        .collect()
}
