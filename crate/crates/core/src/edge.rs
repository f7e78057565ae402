//! Edge clouds and the remote aggregator.
//!
//! An edge accumulates per-cell statistics at the grid's maximum depth and
//! ships them per closed slot as an [`EdgeBatch`]. The remote store adds
//! batches cell by cell and runs the same adaptive gridding and fusion on
//! the merged statistics. Delivery is at-least-once: a batch id is applied
//! at most once, so retries are harmless.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use chrono::{DateTime, TimeDelta, Utc};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::aqi::BreakpointTable;
use crate::fusion::{build_maqi_records, CellStats, FusionError, Grid, GridConfig};
use crate::grid::{BoundingBox, Quadkey};
use crate::model::{FusionWeights, MaqiRecord, SampleId, SensorSample, TimeSlot};

#[derive(Debug, Error)]
pub enum EdgeError {
    #[error("OutOfBoundingBox: sample {0} lies outside the edge's bounding box")]
    OutOfBoundingBox(SampleId),
    #[error("SlotStillOpen: slot {slot} ends at {end}")]
    SlotStillOpen { slot: TimeSlot, end: DateTime<Utc> },
    #[error("UnknownSlot: no data for slot {0}")]
    UnknownSlot(TimeSlot),
    #[error("malformed batch {batch_id}: {reason}")]
    MalformedBatch { batch_id: String, reason: String },
    #[error(transparent)]
    Fusion(#[from] FusionError),
}

/// One edge's statistics for one slot.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeBatch {
    pub edge_id: String,
    pub slot: TimeSlot,
    pub max_depth: u8,
    pub batch_id: String,
    pub sample_ids: Vec<SampleId>,
    pub stats: BTreeMap<Quadkey, CellStats>,
}

impl EdgeBatch {
    /// Assembles a batch and derives its content-addressed id.
    pub fn new(
        edge_id: String,
        slot: TimeSlot,
        max_depth: u8,
        mut sample_ids: Vec<SampleId>,
        stats: BTreeMap<Quadkey, CellStats>,
    ) -> Self {
        sample_ids.sort();
        let batch_id = batch_id(&edge_id, &slot, &sample_ids, &stats);
        EdgeBatch { edge_id, slot, max_depth, batch_id, sample_ids, stats }
    }

    pub fn sample_count(&self) -> u64 {
        self.stats.values().map(CellStats::sample_count).sum()
    }

    /// Recomputes the id from the content.
    pub fn verify_id(&self) -> bool {
        self.batch_id == batch_id(&self.edge_id, &self.slot, &self.sample_ids, &self.stats)
    }
}

/// Hash of edge, slot and content. Sums enter through their correctly
/// rounded values so the id does not depend on ingestion order.
fn batch_id(edge_id: &str, slot: &TimeSlot, sample_ids: &[SampleId], stats: &BTreeMap<Quadkey, CellStats>) -> String {
    use crate::model::{PollutantKind, SourceClass};
    let mut h = Sha256::new();
    h.update(edge_id.as_bytes());
    h.update([0]);
    h.update(slot.start().timestamp().to_le_bytes());
    h.update(slot.duration().num_seconds().to_le_bytes());
    for id in sample_ids {
        h.update(id.0.as_bytes());
        h.update([0]);
    }
    for (key, cell) in stats {
        h.update(key.as_str().as_bytes());
        h.update([0]);
        for class in SourceClass::ALL {
            let c = cell.class(class);
            h.update(c.samples.to_le_bytes());
            for k in PollutantKind::ALL {
                h.update(c.counts[k.index()].to_le_bytes());
                h.update(c.sums[k.index()].value().to_bits().to_le_bytes());
            }
        }
    }
    h.finalize().iter().take(16).map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IngestOutcome {
    Accepted,
    Duplicate,
}

#[derive(Debug, Clone, Default)]
struct SlotBuffer {
    /// Data not yet sealed into a batch.
    open: BTreeMap<Quadkey, CellStats>,
    open_ids: Vec<SampleId>,
    /// Sealed and waiting for acknowledgment.
    unacked: Option<EdgeBatch>,
}

/// State of one edge cloud. Single writer.
#[derive(Debug, Clone)]
pub struct EdgeNode {
    edge_id: String,
    /// Frame of the quadkeys; shared by every edge and the remote store.
    bbox: BoundingBox,
    /// Region this edge accepts samples from.
    area: BoundingBox,
    max_depth: u8,
    slot_duration: TimeDelta,
    slots: BTreeMap<TimeSlot, SlotBuffer>,
    seen: HashSet<SampleId>,
}

impl EdgeNode {
    /// Edge keying cells within `bbox` and accepting samples from all of it.
    pub fn new(edge_id: impl Into<String>, bbox: BoundingBox, max_depth: u8, slot_duration: TimeDelta) -> Self {
        EdgeNode {
            edge_id: edge_id.into(),
            bbox,
            area: bbox,
            max_depth,
            slot_duration,
            slots: BTreeMap::new(),
            seen: HashSet::new(),
        }
    }

    /// Restricts accepted samples to `area`. Cells stay keyed in the full box.
    pub fn with_area(mut self, area: BoundingBox) -> Self {
        self.area = area;
        self
    }

    pub fn edge_id(&self) -> &str {
        &self.edge_id
    }

    pub fn area(&self) -> &BoundingBox {
        &self.area
    }

    /// Marks ids as already ingested, e.g. when resuming from spooled batches.
    pub fn remember<I: IntoIterator<Item = SampleId>>(&mut self, ids: I) {
        self.seen.extend(ids);
    }

    pub fn has_seen(&self, id: &SampleId) -> bool {
        self.seen.contains(id)
    }

    /// Slots holding data that has not been acknowledged.
    pub fn pending_slots(&self) -> Vec<TimeSlot> {
        self.slots.keys().copied().collect()
    }

    /// Accumulates a validated sample into its max-depth cell.
    pub fn ingest(&mut self, sample: &SensorSample) -> Result<IngestOutcome, EdgeError> {
        if !(self.area.contains(sample.location) && self.bbox.contains(sample.location)) {
            return Err(EdgeError::OutOfBoundingBox(sample.sample_id.clone()));
        }
        if !self.seen.insert(sample.sample_id.clone()) {
            return Ok(IngestOutcome::Duplicate);
        }
        let slot = TimeSlot::containing(sample.timestamp, self.slot_duration);
        let cell = Quadkey::for_point(&self.bbox, sample.location, self.max_depth);
        let buf = self.slots.entry(slot).or_default();
        buf.open.entry(cell).or_default().add_sample(sample);
        buf.open_ids.push(sample.sample_id.clone());
        Ok(IngestOutcome::Accepted)
    }

    /// Batch for a closed slot. The oldest unacknowledged batch is returned
    /// again until it is acknowledged; only then is newer data sealed.
    pub fn flush(&mut self, slot: TimeSlot, now: DateTime<Utc>) -> Result<EdgeBatch, EdgeError> {
        if now < slot.end() {
            return Err(EdgeError::SlotStillOpen { slot, end: slot.end() });
        }
        let Some(buf) = self.slots.get_mut(&slot) else {
            return Ok(EdgeBatch::new(self.edge_id.clone(), slot, self.max_depth, Vec::new(), BTreeMap::new()));
        };
        if buf.unacked.is_none() {
            let batch = EdgeBatch::new(
                self.edge_id.clone(),
                slot,
                self.max_depth,
                std::mem::take(&mut buf.open_ids),
                std::mem::take(&mut buf.open),
            );
            buf.unacked = Some(batch);
        }
        Ok(buf.unacked.clone().expect("sealed above"))
    }

    /// Drops a delivered batch. Returns false if it was not the pending one.
    pub fn acknowledge(&mut self, slot: TimeSlot, batch_id: &str) -> bool {
        let Some(buf) = self.slots.get_mut(&slot) else { return false };
        if buf.unacked.as_ref().map(|b| b.batch_id.as_str()) != Some(batch_id) {
            return false;
        }
        buf.unacked = None;
        if buf.open.is_empty() {
            self.slots.remove(&slot);
        }
        true
    }
}

/// Free-function form of [`EdgeNode::ingest`].
pub fn edge_ingest(edge: &mut EdgeNode, sample: &SensorSample) -> Result<IngestOutcome, EdgeError> {
    edge.ingest(sample)
}

/// Free-function form of [`EdgeNode::flush`].
pub fn edge_flush(edge: &mut EdgeNode, slot: TimeSlot, now: DateTime<Utc>) -> Result<EdgeBatch, EdgeError> {
    edge.flush(slot, now)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SlotStore {
    pub cells: BTreeMap<Quadkey, CellStats>,
    pub max_depth: Option<u8>,
}

impl SlotStore {
    pub fn sample_count(&self) -> u64 {
        self.cells.values().map(CellStats::sample_count).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergeOutcome {
    Applied,
    AlreadyApplied,
}

/// Merged statistics of every edge, per slot.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RemoteStore {
    slots: BTreeMap<TimeSlot, SlotStore>,
    applied: BTreeSet<String>,
}

impl RemoteStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn slots(&self) -> impl Iterator<Item = (&TimeSlot, &SlotStore)> {
        self.slots.iter()
    }

    pub fn slot(&self, slot: &TimeSlot) -> Option<&SlotStore> {
        self.slots.get(slot)
    }

    pub fn is_applied(&self, batch_id: &str) -> bool {
        self.applied.contains(batch_id)
    }

    /// Adds a batch's statistics; a batch id already applied is a no-op.
    pub fn merge(&mut self, batch: &EdgeBatch) -> Result<MergeOutcome, EdgeError> {
        if self.applied.contains(&batch.batch_id) {
            return Ok(MergeOutcome::AlreadyApplied);
        }
        let malformed =
            |reason: String| EdgeError::MalformedBatch { batch_id: batch.batch_id.clone(), reason };
        if let Some(q) = batch.stats.keys().find(|q| q.depth() != batch.max_depth) {
            return Err(malformed(format!("cell {q} is not at depth {}", batch.max_depth)));
        }
        if batch.stats.is_empty() {
            self.applied.insert(batch.batch_id.clone());
            return Ok(MergeOutcome::Applied);
        }
        let store = self.slots.entry(batch.slot).or_default();
        if let Some(d) = store.max_depth.filter(|d| *d != batch.max_depth) {
            return Err(malformed(format!("depth {} differs from the slot's depth {d}", batch.max_depth)));
        }
        store.max_depth = Some(batch.max_depth);
        for (key, stats) in &batch.stats {
            store.cells.entry(key.clone()).or_default().merge(stats);
        }
        self.applied.insert(batch.batch_id.clone());
        Ok(MergeOutcome::Applied)
    }

    /// Adaptive grid over the merged statistics of `slot`.
    pub fn grid(&self, slot: TimeSlot, bbox: BoundingBox, config: GridConfig) -> Result<Grid, EdgeError> {
        let store = self.slots.get(&slot).ok_or(EdgeError::UnknownSlot(slot))?;
        Ok(Grid::from_fine_stats(slot, bbox, config, &store.cells)?)
    }

    /// Fuses a slot exactly as direct fusion over the raw samples would.
    pub fn fuse(
        &self,
        slot: TimeSlot,
        bbox: BoundingBox,
        config: GridConfig,
        weights: &FusionWeights,
        table: &BreakpointTable,
    ) -> Result<Vec<MaqiRecord>, EdgeError> {
        let grid = self.grid(slot, bbox, config)?;
        Ok(build_maqi_records(&grid, weights, table)?)
    }
}

pub fn remote_merge(store: &mut RemoteStore, batch: &EdgeBatch) -> Result<MergeOutcome, EdgeError> {
    store.merge(batch)
}

pub fn remote_fuse(
    store: &RemoteStore,
    slot: TimeSlot,
    bbox: BoundingBox,
    config: GridConfig,
    weights: &FusionWeights,
    table: &BreakpointTable,
) -> Result<Vec<MaqiRecord>, EdgeError> {
    store.fuse(slot, bbox, config, weights, table)
}
