//! Pollutant sub-indices and the composite AQI.
//!
//! The default table holds the hourly breakpoints of the Chinese HJ 633-2012
//! standard. Sub-indices interpolate linearly inside the enclosing segment
//! and round up to the next integer.

use std::fmt;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::model::{PollutantKind, PollutantVector};

const DEFAULT_TABLE: &str = include_str!("../data/hj633_hourly.txt");

/// AQI above which a primary pollutant is named.
pub const PRIMARY_POLLUTANT_THRESHOLD: u32 = 50;

#[derive(Debug, Error)]
pub enum AqiError {
    #[error("UnknownPollutant: breakpoint table has no segments for {0}")]
    UnknownPollutant(PollutantKind),
    #[error("invalid concentration {value} for {kind}")]
    InvalidConcentration { kind: PollutantKind, value: f64 },
    #[error("AllValuesAbsent: no pollutant value present")]
    AllValuesAbsent,
    #[error("breakpoint table line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("breakpoint table for {kind}: {reason}")]
    InvalidTable { kind: PollutantKind, reason: String },
    #[error("reading breakpoint table: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Segment {
    pub c_lo: f64,
    pub c_hi: f64,
    pub i_lo: u32,
    pub i_hi: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BreakpointTable {
    segments: [Vec<Segment>; 6],
}

impl BreakpointTable {
    /// Hourly HJ 633-2012 breakpoints.
    pub fn hj633_hourly() -> Self {
        Self::parse(DEFAULT_TABLE).expect("embedded breakpoint table is valid")
    }

    /// Validates and builds a table. Kinds may be missing; present kinds must
    /// start at (0, 0) and increase strictly and contiguously.
    pub fn new(segments: [Vec<Segment>; 6]) -> Result<Self, AqiError> {
        for kind in PollutantKind::ALL {
            let segs = &segments[kind.index()];
            let bad = |reason: &str| AqiError::InvalidTable { kind, reason: reason.to_string() };
            let Some(first) = segs.first() else { continue };
            if first.c_lo != 0.0 || first.i_lo != 0 {
                return Err(bad("first segment must start at (0, 0)"));
            }
            for s in segs {
                if !(s.c_lo.is_finite() && s.c_hi.is_finite()) || s.c_hi <= s.c_lo || s.i_hi <= s.i_lo {
                    return Err(bad("segments must increase strictly"));
                }
            }
            for w in segs.windows(2) {
                if w[0].c_hi != w[1].c_lo || w[0].i_hi != w[1].i_lo {
                    return Err(bad("segments must be contiguous"));
                }
            }
        }
        Ok(BreakpointTable { segments })
    }

    /// Parses the plain-text format: one `pollutant c_lo c_hi i_lo i_hi`
    /// segment per line, whitespace- or comma-separated, `#` comments.
    pub fn parse(text: &str) -> Result<Self, AqiError> {
        let mut segments: [Vec<Segment>; 6] = Default::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |reason: String| AqiError::Parse { line: n + 1, reason };
            let fields: Vec<&str> =
                line.split(|c: char| c == ',' || c.is_whitespace()).filter(|f| !f.is_empty()).collect();
            if fields.len() != 5 {
                return Err(parse_err(format!("expected 5 fields, found {}", fields.len())));
            }
            let kind: PollutantKind = fields[0].parse().map_err(|_| parse_err(format!("unknown pollutant {:?}", fields[0])))?;
            let num = |s: &str| s.parse::<f64>().map_err(|_| parse_err(format!("bad number {s:?}")));
            let idx = |s: &str| s.parse::<u32>().map_err(|_| parse_err(format!("bad index {s:?}")));
            segments[kind.index()].push(Segment {
                c_lo: num(fields[1])?,
                c_hi: num(fields[2])?,
                i_lo: idx(fields[3])?,
                i_hi: idx(fields[4])?,
            });
        }
        Self::new(segments)
    }

    pub fn load(path: &Path) -> Result<Self, AqiError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn segments(&self, kind: PollutantKind) -> &[Segment] {
        &self.segments[kind.index()]
    }
}

impl Default for BreakpointTable {
    fn default() -> Self {
        Self::hj633_hourly()
    }
}

/// Ceiling that ignores representation noise just above an integer.
fn ceil_index(x: f64) -> u32 {
    let r = x.round();
    let v = if (x - r).abs() < 1e-9 { r } else { x.ceil() };
    v.max(0.0) as u32
}

/// Individual sub-index of one pollutant.
pub fn pollutant_subindex(
    kind: PollutantKind,
    concentration: f64,
    table: &BreakpointTable,
) -> Result<u32, AqiError> {
    if !concentration.is_finite() || concentration < 0.0 {
        return Err(AqiError::InvalidConcentration { kind, value: concentration });
    }
    let segs = table.segments(kind);
    let last = segs.last().ok_or(AqiError::UnknownPollutant(kind))?;
    let Some(seg) = segs.iter().find(|s| concentration <= s.c_hi) else {
        return Ok(last.i_hi);
    };
    // Multiply before dividing so exact breakpoints stay exact.
    let span = f64::from(seg.i_hi - seg.i_lo);
    let x = f64::from(seg.i_lo) + span * (concentration - seg.c_lo) / (seg.c_hi - seg.c_lo);
    Ok(ceil_index(x))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AqiResult {
    pub aqi: u32,
    pub primary_pollutant: Option<PollutantKind>,
    pub subindices: Vec<(PollutantKind, u32)>,
}

impl fmt::Display for AqiResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.primary_pollutant {
            Some(p) => write!(f, "AQI {} (primary {})", self.aqi, p),
            None => write!(f, "AQI {}", self.aqi),
        }
    }
}

/// Composite AQI: maximum sub-index over the present pollutants.
pub fn compute_aqi(values: &PollutantVector, table: &BreakpointTable) -> Result<AqiResult, AqiError> {
    let mut subindices = Vec::with_capacity(6);
    for (kind, c) in values.present() {
        subindices.push((kind, pollutant_subindex(kind, c, table)?));
    }
    // Strict comparison keeps the earliest kind on ties.
    let (top_kind, aqi) = subindices
        .iter()
        .copied()
        .fold(None, |best: Option<(PollutantKind, u32)>, (k, i)| match best {
            Some((_, bi)) if bi >= i => best,
            _ => Some((k, i)),
        })
        .ok_or(AqiError::AllValuesAbsent)?;
    Ok(AqiResult {
        aqi,
        primary_pollutant: (aqi > PRIMARY_POLLUTANT_THRESHOLD).then_some(top_kind),
        subindices,
    })
}
