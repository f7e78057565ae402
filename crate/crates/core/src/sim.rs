//! Synthetic pollution fields, noisy samples and mobility traces, plus the
//! metrics used to judge fusion against the known truth.

use std::fmt::Write as _;

use chrono::{DateTime, TimeDelta, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aqi::BreakpointTable;
use crate::fusion::{build_adaptive_grid, build_maqi_records, FusionError, GridConfig};
use crate::grid::BoundingBox;
use crate::model::{
    haversine_m, parse_timestamp, FusionWeights, GeoPoint, MaqiRecord, PollutantKind, PollutantVector, SampleCounts,
    SampleId, SensorSample, SourceClass, TimeSlot,
};
use crate::tasking::{MobilityTrace, TracePoint};

/// Offsets that give each generator its own random stream for one seed.
const FIELD_STREAM: u64 = 0;
const SAMPLE_STREAM: u64 = 1;
const TRACE_STREAM: u64 = 2;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Fusion(#[from] FusionError),
}

/// One Gaussian plume. `sigma_m` is the spatial standard deviation in meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plume {
    pub center: GeoPoint,
    pub amplitude: [f64; 6],
    pub sigma_m: f64,
}

/// Background level plus a sum of plumes, per pollutant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticField {
    pub plumes: Vec<Plume>,
    pub background: [f64; 6],
    pub seed: u64,
}

impl SyntheticField {
    pub fn new(plumes: Vec<Plume>, background: [f64; 6], seed: u64) -> Result<Self, SimError> {
        let nonneg = |v: &f64| v.is_finite() && *v >= 0.0;
        if !background.iter().all(nonneg) {
            return Err(SimError::InvalidConfig("background levels must be >= 0".into()));
        }
        for p in &plumes {
            if !p.amplitude.iter().all(nonneg) || !(p.sigma_m.is_finite() && p.sigma_m > 0.0) {
                return Err(SimError::InvalidConfig("plume amplitudes must be >= 0 and sigma > 0".into()));
            }
        }
        Ok(SyntheticField { plumes, background, seed })
    }

    /// Random plumes drawn from `spec` inside `bbox`.
    pub fn random(spec: &FieldSpec, bbox: &BoundingBox, seed: u64) -> Result<Self, SimError> {
        spec.validate()?;
        let mut rng = rng_for(seed, FIELD_STREAM);
        let plumes = (0..spec.plumes)
            .map(|_| Plume {
                center: uniform_point(&mut rng, bbox),
                amplitude: spec.max_amplitude.map(|a| a * rng.random_range(0.5..=1.0)),
                sigma_m: rng.random_range(spec.sigma_m.0..=spec.sigma_m.1),
            })
            .collect();
        SyntheticField::new(plumes, spec.background, seed)
    }

    pub fn value(&self, kind: PollutantKind, p: GeoPoint) -> f64 {
        let k = kind.index();
        self.background[k]
            + self
                .plumes
                .iter()
                .map(|pl| {
                    let d = haversine_m(p, pl.center);
                    pl.amplitude[k] * (-d * d / (2.0 * pl.sigma_m * pl.sigma_m)).exp()
                })
                .sum::<f64>()
    }

    pub fn values(&self, p: GeoPoint) -> [f64; 6] {
        PollutantKind::ALL.map(|k| self.value(k, p))
    }
}

/// How random fields are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldSpec {
    pub plumes: usize,
    /// Range of plume widths in meters.
    pub sigma_m: (f64, f64),
    /// Per-pollutant amplitude ceiling; each plume draws 50–100 % of it.
    pub max_amplitude: [f64; 6],
    pub background: [f64; 6],
}

impl Default for FieldSpec {
    fn default() -> Self {
        FieldSpec {
            plumes: 4,
            sigma_m: (8_000.0, 20_000.0),
            max_amplitude: [120.0, 150.0, 2.0, 80.0, 100.0, 30.0],
            background: [30.0, 50.0, 0.8, 30.0, 60.0, 10.0],
        }
    }
}

impl FieldSpec {
    fn validate(&self) -> Result<(), SimError> {
        let (lo, hi) = self.sigma_m;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(SimError::InvalidConfig(format!("plume sigma range ({lo}, {hi}) is invalid")));
        }
        Ok(())
    }
}

/// Relative Gaussian noise and per-pollutant dropout for one source class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassNoise {
    pub sigma: f64,
    #[serde(default)]
    pub dropout: f64,
}

impl ClassNoise {
    pub const fn new(sigma: f64, dropout: f64) -> Self {
        ClassNoise { sigma, dropout }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseModel {
    pub crowd: ClassNoise,
    pub met: ClassNoise,
    pub iot: ClassNoise,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel { crowd: ClassNoise::new(0.30, 0.0), met: ClassNoise::new(0.05, 0.0), iot: ClassNoise::new(0.15, 0.0) }
    }
}

impl NoiseModel {
    pub fn zero() -> Self {
        let z = ClassNoise::new(0.0, 0.0);
        NoiseModel { crowd: z, met: z, iot: z }
    }

    pub fn get(&self, class: SourceClass) -> ClassNoise {
        match class {
            SourceClass::Crowdsourced => self.crowd,
            SourceClass::Meteorological => self.met,
            SourceClass::IotSensing => self.iot,
        }
    }

    fn validate(&self) -> Result<(), SimError> {
        for c in SourceClass::ALL {
            let n = self.get(c);
            if !(n.sigma.is_finite() && n.sigma >= 0.0 && (0.0..=1.0).contains(&n.dropout)) {
                return Err(SimError::InvalidConfig(format!("{c:?} noise needs sigma >= 0 and dropout in [0, 1]")));
            }
        }
        Ok(())
    }
}

fn uniform_point<R: Rng>(rng: &mut R, bbox: &BoundingBox) -> GeoPoint {
    let lon = rng.random_range(bbox.min_lon..bbox.max_lon);
    let lat = rng.random_range(bbox.min_lat..bbox.max_lat);
    GeoPoint { lon, lat }
}

/// Noisy samples of `field`, `counts` per class, uniform over the box and
/// the slot. A sample whose every pollutant dropped out is not emitted.
pub fn generate_samples(
    field: &SyntheticField,
    noise: &NoiseModel,
    counts: SampleCounts,
    bbox: &BoundingBox,
    slot: TimeSlot,
    seed: u64,
) -> Result<Vec<SensorSample>, SimError> {
    noise.validate()?;
    let mut rng = rng_for(seed, SAMPLE_STREAM);
    let slot_secs = slot.duration().num_seconds();
    let mut out = Vec::with_capacity(counts.total() as usize);
    for class in SourceClass::ALL {
        let ClassNoise { sigma, dropout } = noise.get(class);
        let normal = Normal::new(0.0, sigma).expect("sigma validated");
        for i in 0..counts.get(class) {
            let location = uniform_point(&mut rng, bbox);
            let timestamp = slot.start() + TimeDelta::seconds(rng.random_range(0..slot_secs));
            let truth = field.values(location);
            let mut values = [None; 6];
            for (k, t) in truth.into_iter().enumerate() {
                let factor = 1.0 + normal.sample(&mut rng);
                let dropped = dropout > 0.0 && rng.random_bool(dropout);
                if !dropped {
                    values[k] = Some((t * factor).max(0.0));
                }
            }
            let Ok(values) = PollutantVector::new(values) else { continue };
            out.push(SensorSample {
                sample_id: SampleId(format!("sim-{seed}-{}-{i}", class.as_str())),
                location,
                timestamp,
                source: class,
                reporter_id: (class == SourceClass::Crowdsourced).then(|| format!("resident-{}", i % 100)),
                values,
            });
        }
    }
    Ok(out)
}

/// Fusion error against the true field.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FusionMetrics {
    /// Per-pollutant RMSE at cell centers; `None` when no cell has the pollutant.
    pub rmse: [Option<f64>; 6],
    pub cells_with_data: usize,
    pub leaf_cells: usize,
    pub coverage: f64,
}

/// RMSE of fused values against the field at cell centers, and the share
/// of leaf cells that produced a record.
pub fn evaluate_fusion(records: &[MaqiRecord], leaf_cells: usize, field: &SyntheticField) -> FusionMetrics {
    let mut sq = [0.0; 6];
    let mut n = [0usize; 6];
    for r in records {
        for (kind, v) in r.values.present() {
            let e = v - field.value(kind, r.centroid);
            sq[kind.index()] += e * e;
            n[kind.index()] += 1;
        }
    }
    let rmse = std::array::from_fn(|k| (n[k] > 0).then(|| (sq[k] / n[k] as f64).sqrt()));
    let coverage = if leaf_cells == 0 { 0.0 } else { records.len() as f64 / leaf_cells as f64 };
    FusionMetrics { rmse, cells_with_data: records.len(), leaf_cells, coverage }
}

/// Random-waypoint movement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MobilityConfig {
    pub bbox: BoundingBox,
    pub start: DateTime<Utc>,
    pub duration_s: i64,
    pub interval_s: i64,
    /// Leg speed range in m/s, inclusive.
    pub speed_mps: (f64, f64),
}

impl Default for MobilityConfig {
    fn default() -> Self {
        MobilityConfig {
            bbox: BoundingBox::WUHAN,
            start: parse_timestamp("start", "2017-05-15T08:00:00Z").expect("valid literal"),
            duration_s: 4 * 3600,
            interval_s: 60,
            speed_mps: (0.5, 15.0),
        }
    }
}

impl MobilityConfig {
    fn validate(&self) -> Result<(), SimError> {
        let (lo, hi) = self.speed_mps;
        if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
            return Err(SimError::InvalidConfig(format!("speed range ({lo}, {hi}) is invalid")));
        }
        if self.interval_s <= 0 || self.duration_s < 0 {
            return Err(SimError::InvalidConfig("interval must be > 0 and duration >= 0".into()));
        }
        Ok(())
    }
}

/// Moves `meters` from `from` toward `to` on a local flat-earth tangent plane.
fn step_toward(from: GeoPoint, to: GeoPoint, meters: f64) -> GeoPoint {
    let m_per_deg = crate::model::EARTH_RADIUS_M.to_radians();
    let cos_lat = from.lat.to_radians().cos();
    let dx = (to.lon - from.lon) * m_per_deg * cos_lat;
    let dy = (to.lat - from.lat) * m_per_deg;
    let norm = dx.hypot(dy);
    GeoPoint {
        lon: from.lon + meters * dx / norm / (m_per_deg * cos_lat),
        lat: from.lat + meters * dy / norm / m_per_deg,
    }
}

/// Traces for `n` residents, one point per interval.
pub fn generate_traces(n: usize, config: &MobilityConfig, seed: u64) -> Result<Vec<MobilityTrace>, SimError> {
    config.validate()?;
    let mut rng = rng_for(seed, TRACE_STREAM);
    let (lo, hi) = config.speed_mps;
    let speed = |rng: &mut ChaCha8Rng| if lo == hi { lo } else { rng.random_range(lo..=hi) };
    let steps = config.duration_s / config.interval_s;
    let dt = config.interval_s as f64;
    let mut traces = Vec::with_capacity(n);
    for r in 0..n {
        let mut pos = uniform_point(&mut rng, &config.bbox);
        let mut target = uniform_point(&mut rng, &config.bbox);
        let mut v = speed(&mut rng);
        let mut last_v = v;
        let mut points = Vec::with_capacity(steps as usize + 1);
        for step in 0..=steps {
            points.push(TracePoint {
                timestamp: config.start + TimeDelta::seconds(step * config.interval_s),
                location: pos,
                speed_mps: v,
                accel_mps2: if step == 0 { 0.0 } else { (v - last_v) / dt },
            });
            last_v = v;
            // Advance one interval, switching legs at each waypoint.
            let mut budget = v * dt;
            while budget > 0.0 {
                let d = haversine_m(pos, target);
                if d > budget {
                    pos = step_toward(pos, target, budget);
                    break;
                }
                budget -= d;
                pos = target;
                target = uniform_point(&mut rng, &config.bbox);
                v = speed(&mut rng);
                if v == 0.0 {
                    break;
                }
            }
        }
        let trace = MobilityTrace::new(format!("resident-{r}"), points).expect("generated traces are well formed");
        traces.push(trace);
    }
    Ok(traces)
}

/// A batch of seeded fusion experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub bbox: BoundingBox,
    pub slot_start: DateTime<Utc>,
    pub slot_duration_s: i64,
    pub field: FieldSpec,
    pub noise: NoiseModel,
    pub counts: SampleCounts,
    pub seeds: Vec<u64>,
    pub grid: GridConfig,
    /// Named weight settings to compare.
    pub weights: Vec<(String, FusionWeights)>,
    pub residents: usize,
    pub mobility: MobilityConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            bbox: BoundingBox::WUHAN,
            slot_start: parse_timestamp("slot_start", "2017-05-15T12:00:00Z").expect("valid literal"),
            slot_duration_s: 3600,
            field: FieldSpec::default(),
            noise: NoiseModel::default(),
            counts: SampleCounts { crowdsourced: 1000, meteorological: 1000, iot_sensing: 1000 },
            seeds: (1..=20).collect(),
            grid: GridConfig::default(),
            weights: vec![
                ("fused".into(), FusionWeights::default()),
                ("met_only".into(), FusionWeights::meteorological_only()),
                ("crowd_only".into(), FusionWeights::crowd_only()),
            ],
            residents: 50,
            mobility: MobilityConfig::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn slot(&self) -> Result<TimeSlot, SimError> {
        TimeSlot::aligned(self.slot_start, TimeDelta::seconds(self.slot_duration_s))
            .ok_or_else(|| SimError::InvalidConfig(format!("slot start {} is not aligned", self.slot_start)))
    }
}

/// One (seed, weight setting) evaluation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluationRow {
    pub seed: u64,
    pub weights: String,
    pub metrics: FusionMetrics,
}

/// Runs every seed under every weight setting.
pub fn run_scenario(config: &ScenarioConfig, table: &BreakpointTable) -> Result<Vec<EvaluationRow>, SimError> {
    let slot = config.slot()?;
    let mut rows = Vec::new();
    for &seed in &config.seeds {
        let field = SyntheticField::random(&config.field, &config.bbox, seed)?;
        let samples = generate_samples(&field, &config.noise, config.counts, &config.bbox, slot, seed)?;
        let grid = build_adaptive_grid(&samples, slot, config.bbox, config.grid)?;
        for (name, w) in &config.weights {
            let records = build_maqi_records(&grid, w, table)?;
            rows.push(EvaluationRow { seed, weights: name.clone(), metrics: evaluate_fusion(&records, grid.cells.len(), &field) });
        }
    }
    Ok(rows)
}

/// Mean of the per-seed RMSE of one pollutant for one weight setting.
pub fn mean_rmse(rows: &[EvaluationRow], weights: &str, kind: PollutantKind) -> Option<f64> {
    let vals: Vec<f64> =
        rows.iter().filter(|r| r.weights == weights).filter_map(|r| r.metrics.rmse[kind.index()]).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Comma-separated metrics table with a header row.
pub fn metrics_csv(rows: &[EvaluationRow]) -> String {
    let mut out = String::from("seed,weights");
    for k in PollutantKind::ALL {
        write!(out, ",rmse_{}", k.key()).unwrap();
    }
    out.push_str(",cells_with_data,leaf_cells,coverage\n");
    for r in rows {
        write!(out, "{},{}", r.seed, r.weights).unwrap();
        for v in r.metrics.rmse {
            match v {
                Some(v) => write!(out, ",{v:.6}").unwrap(),
                None => out.push(','),
            }
        }
        writeln!(out, ",{},{},{:.6}", r.metrics.cells_with_data, r.metrics.leaf_cells, r.metrics.coverage).unwrap();
    }
    out
}
