//! The single-process deployment: edges, the remote store and fused slots.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::sync::{RwLock, RwLockReadGuard, RwLockWriteGuard};

use chrono::{DateTime, Utc};
use maqi_core::edge::{EdgeError, IngestOutcome, MergeOutcome};
use maqi_core::guidance::{
    advisory_at, plan_route, record_at, Advisory, GuidanceError, MessageCatalog, Route, RouteLattice, RouteQuery,
    UserProfile,
};
use maqi_core::physio::{validate_physio, RawPhysio};
use maqi_core::wire::{decode_batch, read_spool, write_spool, WireError};
use maqi_core::{
    validate_sample, BoundingBox, BreakpointTable, EdgeBatch, EdgeNode, GeoPoint, MaqiRecord, PhysioRecord,
    RawSample, RemoteStore, TimeSlot,
};
use serde::Serialize;
use thiserror::Error;

use crate::config::{EdgeConfig, ServiceConfig};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("{0}")]
    BadRequest(String),
    #[error("UnknownSlot: slot {0} has not been fused")]
    UnknownSlot(TimeSlot),
    #[error("SlotStillOpen: slot {0} has not ended")]
    SlotStillOpen(TimeSlot),
    #[error("NoData: {0}")]
    NoData(String),
    #[error(transparent)]
    Guidance(#[from] GuidanceError),
    #[error("{0}")]
    Internal(String),
}

impl ServiceError {
    pub fn name(&self) -> &'static str {
        match self {
            ServiceError::BadRequest(_) => "BadRequest",
            ServiceError::UnknownSlot(_) => "UnknownSlot",
            ServiceError::SlotStillOpen(_) => "SlotStillOpen",
            ServiceError::NoData(_) => "NoData",
            ServiceError::Guidance(GuidanceError::NoRoute) => "NoRoute",
            ServiceError::Guidance(GuidanceError::OutsideArea(_)) => "OutsideArea",
            ServiceError::Guidance(GuidanceError::UnknownProfile(_)) => "UnknownProfile",
            ServiceError::Guidance(_) => "InvalidQuery",
            ServiceError::Internal(_) => "Internal",
        }
    }
}

impl From<WireError> for ServiceError {
    fn from(e: WireError) -> Self {
        match e {
            WireError::Io { .. } => ServiceError::Internal(e.to_string()),
            other => ServiceError::BadRequest(other.to_string()),
        }
    }
}

impl From<EdgeError> for ServiceError {
    fn from(e: EdgeError) -> Self {
        match e {
            EdgeError::SlotStillOpen { slot, .. } => ServiceError::SlotStillOpen(slot),
            EdgeError::UnknownSlot(slot) => ServiceError::UnknownSlot(slot),
            EdgeError::MalformedBatch { .. } | EdgeError::OutOfBoundingBox(_) => ServiceError::BadRequest(e.to_string()),
            EdgeError::Fusion(f) => ServiceError::Internal(f.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordOutcome {
    Accepted,
    Duplicate,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecordStatus {
    pub index: usize,
    pub status: RecordOutcome,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sample_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub edge_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

impl RecordStatus {
    fn rejected(index: usize, error: &str, message: String) -> Self {
        RecordStatus {
            index,
            status: RecordOutcome::Rejected,
            sample_id: None,
            edge_id: None,
            error: Some(error.to_string()),
            message: Some(message),
        }
    }
}

/// Per-record result of a batch upload.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct IngestReport {
    pub accepted: usize,
    pub duplicates: usize,
    pub rejected: usize,
    pub records: Vec<RecordStatus>,
}

impl IngestReport {
    fn push(&mut self, status: RecordStatus) {
        match status.status {
            RecordOutcome::Accepted => self.accepted += 1,
            RecordOutcome::Duplicate => self.duplicates += 1,
            RecordOutcome::Rejected => self.rejected += 1,
        }
        self.records.push(status);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FuseSummary {
    pub slot: TimeSlot,
    pub batches: usize,
    pub records: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Health {
    pub status: &'static str,
    pub edges: usize,
    pub stored_slots: usize,
    pub fused_slots: usize,
    pub physio_records: usize,
}

struct Inner {
    edges: Vec<(EdgeConfig, EdgeNode)>,
    store: RemoteStore,
    fused: BTreeMap<TimeSlot, Vec<MaqiRecord>>,
    physio: Vec<PhysioRecord>,
    physio_seen: HashSet<String>,
}

pub struct Service {
    config: ServiceConfig,
    table: BreakpointTable,
    catalog: MessageCatalog,
    inner: RwLock<Inner>,
}

impl Service {
    /// Builds the service and replays any spooled batches.
    pub fn new(config: ServiceConfig) -> anyhow::Result<Self> {
        config.validate()?;
        let table = config.load_table()?;
        let edges = config
            .edge_configs()
            .into_iter()
            .map(|e| {
                let node = EdgeNode::new(e.id.clone(), config.bbox, config.grid.max_depth, config.slot_duration())
                    .with_area(e.bbox);
                (e, node)
            })
            .collect();
        let service = Service {
            config,
            table,
            catalog: MessageCatalog::default(),
            inner: RwLock::new(Inner {
                edges,
                store: RemoteStore::new(),
                fused: BTreeMap::new(),
                physio: Vec::new(),
                physio_seen: HashSet::new(),
            }),
        };
        service.restore()?;
        Ok(service)
    }

    fn restore(&self) -> anyhow::Result<()> {
        let Some(dir) = &self.config.spool_dir else { return Ok(()) };
        let batches = read_spool(dir)?;
        let mut inner = self.write();
        let mut slots = BTreeSet::new();
        for batch in &batches {
            if let Some((_, node)) = inner.edges.iter_mut().find(|(e, _)| e.id == batch.edge_id) {
                node.remember(batch.sample_ids.iter().cloned());
            }
            inner.store.merge(batch)?;
            slots.insert(batch.slot);
        }
        for slot in slots {
            self.refuse(&mut inner, slot)?;
        }
        tracing::info!(batches = batches.len(), "restored spool");
        Ok(())
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn table(&self) -> &BreakpointTable {
        &self.table
    }

    pub fn catalog(&self) -> &MessageCatalog {
        &self.catalog
    }

    fn read(&self) -> RwLockReadGuard<'_, Inner> {
        self.inner.read().unwrap_or_else(|e| e.into_inner())
    }

    fn write(&self) -> RwLockWriteGuard<'_, Inner> {
        self.inner.write().unwrap_or_else(|e| e.into_inner())
    }

    /// The slot of the configured duration that contains `ts`.
    pub fn slot_of(&self, ts: DateTime<Utc>) -> TimeSlot {
        TimeSlot::containing(ts, self.config.slot_duration())
    }

    /// Validates line-delimited sample records and routes them to edges.
    /// Fails only when the body is not line-delimited JSON.
    pub fn ingest_samples(&self, body: &str) -> Result<IngestReport, ServiceError> {
        let values: Vec<serde_json::Value> = maqi_core::wire::parse_json_lines(body)?;
        let mut report = IngestReport::default();
        let mut inner = self.write();
        for (index, value) in values.into_iter().enumerate() {
            let status = match serde_json::from_value::<RawSample>(value) {
                Err(e) => RecordStatus::rejected(index, "InvalidRecord", e.to_string()),
                Ok(raw) => match validate_sample(&raw) {
                    Err(e) => RecordStatus::rejected(index, e.name(), e.to_string()),
                    Ok(sample) => route_sample(&mut inner, &self.config.bbox, index, &sample),
                },
            };
            report.push(status);
        }
        Ok(report)
    }

    /// Ships every edge's data for a closed slot to the store, then fuses it.
    pub fn fuse_slot(&self, slot: TimeSlot, now: DateTime<Utc>) -> Result<FuseSummary, ServiceError> {
        if now < slot.end() {
            return Err(ServiceError::SlotStillOpen(slot));
        }
        let mut inner = self.write();
        let mut batches = 0;
        let Inner { edges, store, .. } = &mut *inner;
        for (_, node) in edges.iter_mut() {
            loop {
                let batch = node.flush(slot, now)?;
                if batch.stats.is_empty() && batch.sample_ids.is_empty() {
                    node.acknowledge(slot, &batch.batch_id);
                    break;
                }
                self.persist_and_merge(store, &batch)?;
                node.acknowledge(slot, &batch.batch_id);
                batches += 1;
            }
        }
        let records = self.refuse(&mut inner, slot)?;
        Ok(FuseSummary { slot, batches, records })
    }

    /// Fuses every slot that has pending edge data and has ended by `now`.
    pub fn fuse_closed(&self, now: DateTime<Utc>) -> Vec<Result<FuseSummary, ServiceError>> {
        let slots = self.pending_slots().into_iter().filter(|s| s.end() <= now);
        slots.map(|s| self.fuse_slot(s, now)).collect()
    }

    /// Slots with edge data not yet shipped to the store.
    pub fn pending_slots(&self) -> BTreeSet<TimeSlot> {
        self.read().edges.iter().flat_map(|(_, n)| n.pending_slots()).collect()
    }

    fn persist_and_merge(&self, store: &mut RemoteStore, batch: &EdgeBatch) -> Result<MergeOutcome, ServiceError> {
        if store.is_applied(&batch.batch_id) {
            return Ok(MergeOutcome::AlreadyApplied);
        }
        if let Some(dir) = &self.config.spool_dir {
            write_spool(dir, batch)?;
        }
        Ok(store.merge(batch)?)
    }

    fn refuse(&self, inner: &mut Inner, slot: TimeSlot) -> Result<usize, ServiceError> {
        let records = inner.store.fuse(slot, self.config.bbox, self.config.grid, &self.config.weights, &self.table)?;
        let n = records.len();
        inner.fused.insert(slot, records);
        Ok(n)
    }

    /// Applies an encoded edge batch received from another edge.
    pub fn merge_batch(&self, body: &str) -> Result<MergeOutcome, ServiceError> {
        let batch = decode_batch(body)?;
        if batch.max_depth != self.config.grid.max_depth && !batch.stats.is_empty() {
            return Err(ServiceError::BadRequest(format!(
                "batch depth {} differs from the configured depth {}",
                batch.max_depth, self.config.grid.max_depth
            )));
        }
        let mut inner = self.write();
        let outcome = self.persist_and_merge(&mut inner.store, &batch)?;
        if outcome == MergeOutcome::Applied && inner.store.slot(&batch.slot).is_some() {
            self.refuse(&mut inner, batch.slot)?;
        }
        Ok(outcome)
    }

    pub fn fused_slots(&self) -> Vec<TimeSlot> {
        self.read().fused.keys().copied().collect()
    }

    /// Records of a fused slot whose cells meet `area`, sorted by quadkey.
    pub fn maqi(&self, slot: TimeSlot, area: Option<BoundingBox>) -> Result<Vec<MaqiRecord>, ServiceError> {
        let inner = self.read();
        let records = inner.fused.get(&slot).ok_or(ServiceError::UnknownSlot(slot))?;
        Ok(records
            .iter()
            .filter(|r| area.is_none_or(|a| r.cell.bounds(&self.config.bbox).intersects(&a)))
            .cloned()
            .collect())
    }

    pub fn aqi_at(&self, slot: TimeSlot, p: GeoPoint) -> Result<MaqiRecord, ServiceError> {
        let inner = self.read();
        let records = inner.fused.get(&slot).ok_or(ServiceError::UnknownSlot(slot))?;
        record_at(records, &self.config.bbox, p)
            .cloned()
            .ok_or_else(|| ServiceError::NoData(format!("no record at ({}, {}) in slot {slot}", p.lon, p.lat)))
    }

    pub fn advisory(&self, slot: TimeSlot, p: GeoPoint, profile: &UserProfile) -> Result<Advisory, ServiceError> {
        let inner = self.read();
        let records = inner.fused.get(&slot).ok_or(ServiceError::UnknownSlot(slot))?;
        advisory_at(records, &self.config.bbox, p, profile)
            .ok_or_else(|| ServiceError::NoData(format!("no record at ({}, {}) in slot {slot}", p.lon, p.lat)))
    }

    pub fn route(&self, slot: TimeSlot, query: &RouteQuery) -> Result<Route, ServiceError> {
        let inner = self.read();
        let records = inner.fused.get(&slot).ok_or(ServiceError::UnknownSlot(slot))?;
        let lattice = RouteLattice::from_records(records, self.config.bbox, self.config.route_depth);
        Ok(plan_route(&lattice, query)?)
    }

    /// Validates and stores physiological records. Exact repeats are duplicates.
    pub fn ingest_physio(&self, body: &str) -> Result<IngestReport, ServiceError> {
        let values: Vec<serde_json::Value> = maqi_core::wire::parse_json_lines(body)?;
        let mut report = IngestReport::default();
        let mut inner = self.write();
        for (index, value) in values.into_iter().enumerate() {
            let status = match serde_json::from_value::<RawPhysio>(value) {
                Err(e) => RecordStatus::rejected(index, "InvalidRecord", e.to_string()),
                Ok(raw) => match validate_physio(&raw) {
                    Err(e) => RecordStatus::rejected(index, e.name(), e.to_string()),
                    Ok(record) => {
                        let key = serde_json::to_string(&RawPhysio::from(&record)).expect("serializable");
                        let status =
                            if inner.physio_seen.insert(key) { RecordOutcome::Accepted } else { RecordOutcome::Duplicate };
                        if status == RecordOutcome::Accepted {
                            inner.physio.push(record);
                        }
                        RecordStatus { index, status, sample_id: None, edge_id: None, error: None, message: None }
                    }
                },
            };
            report.push(status);
        }
        Ok(report)
    }

    /// Stored physiological records, optionally filtered, in time order.
    pub fn physio(
        &self,
        resident: Option<&str>,
        from: Option<DateTime<Utc>>,
        to: Option<DateTime<Utc>>,
    ) -> Vec<PhysioRecord> {
        let mut out: Vec<PhysioRecord> = self
            .read()
            .physio
            .iter()
            .filter(|r| resident.is_none_or(|id| r.resident_id.as_deref() == Some(id)))
            .filter(|r| from.is_none_or(|f| r.timestamp >= f) && to.is_none_or(|t| r.timestamp < t))
            .cloned()
            .collect();
        out.sort_by(|a, b| a.timestamp.cmp(&b.timestamp).then_with(|| a.resident_id.cmp(&b.resident_id)));
        out
    }

    pub fn health(&self) -> Health {
        let inner = self.read();
        Health {
            status: "ok",
            edges: inner.edges.len(),
            stored_slots: inner.store.slots().count(),
            fused_slots: inner.fused.len(),
            physio_records: inner.physio.len(),
        }
    }
}

fn route_sample(inner: &mut Inner, bbox: &BoundingBox, index: usize, sample: &maqi_core::SensorSample) -> RecordStatus {
    let id = Some(sample.sample_id.0.clone());
    let outside = || {
        let msg = format!("({}, {}) is outside the service area", sample.location.lon, sample.location.lat);
        RecordStatus { sample_id: id.clone(), ..RecordStatus::rejected(index, "OutOfBoundingBox", msg) }
    };
    if !bbox.contains(sample.location) {
        return outside();
    }
    if inner.edges.iter().any(|(_, n)| n.has_seen(&sample.sample_id)) {
        return RecordStatus {
            index,
            status: RecordOutcome::Duplicate,
            sample_id: id,
            edge_id: None,
            error: None,
            message: None,
        };
    }
    let Some((edge, node)) = inner.edges.iter_mut().find(|(e, _)| e.bbox.contains(sample.location)) else {
        return outside();
    };
    match node.ingest(sample) {
        Ok(outcome) => RecordStatus {
            index,
            status: match outcome {
                IngestOutcome::Accepted => RecordOutcome::Accepted,
                IngestOutcome::Duplicate => RecordOutcome::Duplicate,
            },
            sample_id: id,
            edge_id: Some(edge.id.clone()),
            error: None,
            message: None,
        },
        Err(e) => RecordStatus { sample_id: id, ..RecordStatus::rejected(index, "OutOfBoundingBox", e.to_string()) },
    }
}
