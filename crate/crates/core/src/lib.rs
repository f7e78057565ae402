//! Multi-source urban air quality fusion.
//!
//! Samples from crowdsourced phones, IoT sensors and meteorological sites
//! are bucketed into time slots, gridded by a density-adaptive quadtree and
//! fused into per-cell M-AQI records carrying a composite AQI. Edges ship
//! mergeable cell statistics to a remote aggregator that reproduces direct
//! fusion exactly. Around that core sit crowdsensing task assignment,
//! physiological signal handling, health guidance, exposure-aware routing
//! and a synthetic evaluation harness.

pub mod aqi;
pub mod edge;
pub mod exact;
pub mod fusion;
pub mod grid;
pub mod guidance;
pub mod model;
pub mod physio;
pub mod sim;
pub mod tasking;
pub mod wire;

pub use aqi::{compute_aqi, pollutant_subindex, AqiResult, BreakpointTable};
pub use fusion::{assign_time_slot, build_adaptive_grid, build_maqi_records, fuse_cell, CellStats, Grid, GridConfig};
pub use edge::{EdgeBatch, EdgeNode, RemoteStore};
pub use grid::{BoundingBox, Quadkey};
pub use model::{
    validate_sample, FusionWeights, GeoPoint, MaqiRecord, PhysioRecord, PollutantKind, PollutantVector, RawSample,
    SampleId, SensorSample, SourceClass, TimeSlot,
};
