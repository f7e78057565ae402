//! Slotting, density-adaptive gridding and multi-source fusion.
//!
//! Within one time slot the bounding box is refined as a quadtree: a cell
//! splits into its four quadrants while it holds more than
//! `split_threshold` samples, is shallower than `max_depth`, and both of
//! its sides exceed `min_cell_deg`. Each leaf keeps per-class, per-pollutant
//! `(sum, count)` statistics, from which the fused value of a pollutant is
//!
//! ```text
//! v = Σ_c  w_c / W · (Σ_i v_ci / n_c)      W = Σ_c w_c over classes with n_c > 0
//! ```
//!
//! i.e. the weighted sum of per-class means, with the weights renormalized
//! over the classes that actually reported the pollutant.

use std::collections::BTreeMap;

use chrono::{DateTime, TimeDelta, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aqi::{compute_aqi, AqiError, BreakpointTable};
use crate::exact::ExactSum;
use crate::grid::{BoundingBox, Quadkey};
use crate::model::{
    FusionWeights, MaqiRecord, PollutantKind, PollutantVector, SampleCounts, SampleId, SensorSample,
    SourceClass, TimeSlot,
};

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("NoData: cell has no usable samples")]
    NoData,
    #[error("sample {0} lies outside the bounding box")]
    SampleOutsideBox(SampleId),
    #[error("sample {id} at {at} lies outside slot {slot}")]
    SampleOutsideSlot { id: SampleId, at: DateTime<Utc>, slot: TimeSlot },
    #[error("fine statistics keyed at depth {found}, expected max depth {expected}")]
    DepthMismatch { found: u8, expected: u8 },
    #[error(transparent)]
    Aqi(#[from] AqiError),
}

/// Slot whose half-open interval contains `timestamp`.
pub fn assign_time_slot(timestamp: DateTime<Utc>, duration: TimeDelta) -> TimeSlot {
    TimeSlot::containing(timestamp, duration)
}

/// Groups samples by slot. Order within a slot follows the input.
pub fn partition_by_slot(
    samples: &[SensorSample],
    duration: TimeDelta,
) -> BTreeMap<TimeSlot, Vec<SensorSample>> {
    let mut slots: BTreeMap<TimeSlot, Vec<SensorSample>> = BTreeMap::new();
    for s in samples {
        slots.entry(assign_time_slot(s.timestamp, duration)).or_default().push(s.clone());
    }
    slots
}

/// Sufficient statistics of one source class inside a cell.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub samples: u64,
    pub sums: [ExactSum; 6],
    pub counts: [u64; 6],
}

impl ClassStats {
    pub fn mean(&self, kind: PollutantKind) -> Option<f64> {
        let n = self.counts[kind.index()];
        (n > 0).then(|| self.sums[kind.index()].value() / n as f64)
    }

    fn merge(&mut self, other: &ClassStats) {
        self.samples += other.samples;
        for k in 0..6 {
            self.sums[k].merge(&other.sums[k]);
            self.counts[k] += other.counts[k];
        }
    }
}

/// Per-class, per-pollutant `(sum, count)` for one cell. Merges by addition.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    classes: [ClassStats; 3],
}

impl CellStats {
    pub fn from_classes(classes: [ClassStats; 3]) -> Self {
        CellStats { classes }
    }

    pub fn add_sample(&mut self, sample: &SensorSample) {
        let c = &mut self.classes[sample.source.index()];
        c.samples += 1;
        for (kind, v) in sample.values.present() {
            c.sums[kind.index()].add(v);
            c.counts[kind.index()] += 1;
        }
    }

    pub fn merge(&mut self, other: &CellStats) {
        for (a, b) in self.classes.iter_mut().zip(other.classes.iter()) {
            a.merge(b);
        }
    }

    pub fn class(&self, class: SourceClass) -> &ClassStats {
        &self.classes[class.index()]
    }

    pub fn sample_counts(&self) -> SampleCounts {
        SampleCounts::from_array(self.classes.each_ref().map(|c| c.samples))
    }

    pub fn sample_count(&self) -> u64 {
        self.classes.iter().map(|c| c.samples).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_count() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub split_threshold: u64,
    pub max_depth: u8,
    pub min_cell_deg: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { split_threshold: 64, max_depth: 16, min_cell_deg: 0.005 }
    }
}

impl GridConfig {
    /// The refinement rule shared by every way of building a grid.
    pub fn should_split(&self, bounds: &BoundingBox, depth: u8, count: u64) -> bool {
        count > self.split_threshold
            && depth < self.max_depth
            && bounds.width() > self.min_cell_deg
            && bounds.height() > self.min_cell_deg
    }
}

/// Leaf cells of one slot's adaptive quadtree.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub slot: TimeSlot,
    pub bbox: BoundingBox,
    pub config: GridConfig,
    /// Every leaf, including empty ones, keyed by quadkey.
    pub cells: BTreeMap<Quadkey, CellStats>,
}

impl Grid {
    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Leaf holding `p`, if `p` is inside the box and the grid is non-empty.
    pub fn leaf_for(&self, p: crate::model::GeoPoint) -> Option<&Quadkey> {
        if !self.bbox.contains(p) {
            return None;
        }
        let fine = Quadkey::for_point(&self.bbox, p, self.config.max_depth);
        (0..=fine.depth())
            .rev()
            .map(|d| fine.ancestor(d))
            .find_map(|q| self.cells.get_key_value(&q).map(|(k, _)| k))
    }

    /// Builds the grid from per-cell statistics keyed at `config.max_depth`,
    /// coarsening by adding statistics. Produces the same leaves as
    /// [`build_adaptive_grid`] on the underlying samples.
    pub fn from_fine_stats(
        slot: TimeSlot,
        bbox: BoundingBox,
        config: GridConfig,
        fine: &BTreeMap<Quadkey, CellStats>,
    ) -> Result<Grid, FusionError> {
        if let Some(bad) = fine.keys().find(|q| q.depth() != config.max_depth) {
            return Err(FusionError::DepthMismatch { found: bad.depth(), expected: config.max_depth });
        }
        let mut cells = BTreeMap::new();
        if fine.values().any(|s| !s.is_empty()) {
            coarsen(&config, fine, Quadkey::root(), bbox, &mut cells);
        }
        Ok(Grid { slot, bbox, config, cells })
    }
}

fn with_prefix<'a>(
    fine: &'a BTreeMap<Quadkey, CellStats>,
    prefix: &'a Quadkey,
) -> impl Iterator<Item = &'a CellStats> + 'a {
    fine.range(prefix.clone()..).take_while(move |(k, _)| prefix.is_prefix_of(k)).map(|(_, v)| v)
}

fn coarsen(
    config: &GridConfig,
    fine: &BTreeMap<Quadkey, CellStats>,
    key: Quadkey,
    bounds: BoundingBox,
    out: &mut BTreeMap<Quadkey, CellStats>,
) {
    let count: u64 = with_prefix(fine, &key).map(CellStats::sample_count).sum();
    if config.should_split(&bounds, key.depth(), count) {
        for d in 0..4 {
            coarsen(config, fine, key.child(d), bounds.child(d), out);
        }
    } else {
        let mut stats = CellStats::default();
        for s in with_prefix(fine, &key) {
            stats.merge(s);
        }
        out.insert(key, stats);
    }
}

fn refine(
    config: &GridConfig,
    key: Quadkey,
    bounds: BoundingBox,
    samples: Vec<&SensorSample>,
    out: &mut BTreeMap<Quadkey, CellStats>,
) {
    if config.should_split(&bounds, key.depth(), samples.len() as u64) {
        let mut quadrants: [Vec<&SensorSample>; 4] = Default::default();
        for s in samples {
            quadrants[bounds.child_digit(s.location) as usize].push(s);
        }
        for (d, part) in quadrants.into_iter().enumerate() {
            refine(config, key.child(d as u8), bounds.child(d as u8), part, out);
        }
    } else {
        let mut stats = CellStats::default();
        for s in samples {
            stats.add_sample(s);
        }
        out.insert(key, stats);
    }
}

/// Top-down quadtree over the samples of one slot.
pub fn build_adaptive_grid(
    samples: &[SensorSample],
    slot: TimeSlot,
    bbox: BoundingBox,
    config: GridConfig,
) -> Result<Grid, FusionError> {
    for s in samples {
        if !bbox.contains(s.location) {
            return Err(FusionError::SampleOutsideBox(s.sample_id.clone()));
        }
        if !slot.contains(s.timestamp) {
            return Err(FusionError::SampleOutsideSlot { id: s.sample_id.clone(), at: s.timestamp, slot });
        }
    }
    let mut cells = BTreeMap::new();
    if !samples.is_empty() {
        refine(&config, Quadkey::root(), bbox, samples.iter().collect(), &mut cells);
    }
    Ok(Grid { slot, bbox, config, cells })
}

/// Weighted fusion of one cell's statistics.
pub fn fuse_cell(stats: &CellStats, weights: &FusionWeights) -> Result<PollutantVector, FusionError> {
    let mut fused = [None; 6];
    for kind in PollutantKind::ALL {
        let parts: Vec<(f64, f64)> = SourceClass::ALL
            .iter()
            .filter_map(|&c| {
                let w = weights.get(c);
                let mean = stats.class(c).mean(kind)?;
                (w > 0.0).then_some((w, mean))
            })
            .collect();
        let total: f64 = parts.iter().map(|(w, _)| w).sum();
        if total > 0.0 {
            fused[kind.index()] = Some(parts.iter().map(|(w, m)| w / total * m).sum());
        }
    }
    PollutantVector::new(fused).map_err(|_| FusionError::NoData)
}

/// One record per non-empty leaf, sorted by quadkey.
pub fn build_maqi_records(
    grid: &Grid,
    weights: &FusionWeights,
    table: &BreakpointTable,
) -> Result<Vec<MaqiRecord>, FusionError> {
    let mut out = Vec::new();
    for (key, stats) in &grid.cells {
        let values = match fuse_cell(stats, weights) {
            Ok(v) => v,
            Err(FusionError::NoData) => continue,
            Err(e) => return Err(e),
        };
        let aqi = compute_aqi(&values, table)?;
        out.push(MaqiRecord {
            cell: key.clone(),
            centroid: key.center(&grid.bbox),
            slot: grid.slot,
            aqi: aqi.aqi,
            primary_pollutant: aqi.primary_pollutant,
            values,
            sample_counts: stats.sample_counts(),
        });
    }
    Ok(out)
}
