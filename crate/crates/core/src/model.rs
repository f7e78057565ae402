//! Domain types shared by every stage of the pipeline.
//!
//! Everything here is an immutable value once constructed. Constructors
//! enforce the invariants, so downstream code never re-checks ranges.

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, NaiveDateTime, TimeDelta, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Validation failures for external records. Each variant names the field.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ValidationError {
    #[error("OutOfRangeCoordinate: {field} = {value}")]
    OutOfRangeCoordinate { field: &'static str, value: f64 },
    #[error("UnparseableTimestamp: {field} = {value:?}")]
    UnparseableTimestamp { field: &'static str, value: String },
    #[error("AllValuesAbsent: no pollutant value present")]
    AllValuesAbsent,
    #[error("InvalidValue: {field} = {value:?}")]
    InvalidValue { field: String, value: String },
    #[error("MissingField: {field}")]
    MissingField { field: &'static str },
}

impl ValidationError {
    /// Stable error name used in ingestion reports.
    pub fn name(&self) -> &'static str {
        match self {
            ValidationError::OutOfRangeCoordinate { .. } => "OutOfRangeCoordinate",
            ValidationError::UnparseableTimestamp { .. } => "UnparseableTimestamp",
            ValidationError::AllValuesAbsent => "AllValuesAbsent",
            ValidationError::InvalidValue { .. } => "InvalidValue",
            ValidationError::MissingField { .. } => "MissingField",
        }
    }
}

/// WGS-84 position in decimal degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lon: f64,
    pub lat: f64,
}

impl GeoPoint {
    pub fn new(lon: f64, lat: f64) -> Result<Self, ValidationError> {
        if !lon.is_finite() || !(-180.0..=180.0).contains(&lon) {
            return Err(ValidationError::OutOfRangeCoordinate { field: "lon", value: lon });
        }
        if !lat.is_finite() || !(-90.0..=90.0).contains(&lat) {
            return Err(ValidationError::OutOfRangeCoordinate { field: "lat", value: lat });
        }
        Ok(GeoPoint { lon, lat })
    }
}

/// Mean Earth radius in meters.
pub const EARTH_RADIUS_M: f64 = 6_371_008.8;

/// Great-circle distance in meters.
pub fn haversine_m(a: GeoPoint, b: GeoPoint) -> f64 {
    let (lat1, lat2) = (a.lat.to_radians(), b.lat.to_radians());
    let dlat = lat2 - lat1;
    let dlon = (b.lon - a.lon).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Origin of a sample. The order here is the order of the fusion weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceClass {
    Crowdsourced,
    Meteorological,
    IotSensing,
}

impl SourceClass {
    pub const ALL: [SourceClass; 3] =
        [SourceClass::Crowdsourced, SourceClass::Meteorological, SourceClass::IotSensing];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SourceClass::Crowdsourced => "crowdsourced",
            SourceClass::Meteorological => "meteorological",
            SourceClass::IotSensing => "iot_sensing",
        }
    }
}

impl FromStr for SourceClass {
    type Err = ValidationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "crowdsourced" | "crowd" => Ok(SourceClass::Crowdsourced),
            "meteorological" | "met" => Ok(SourceClass::Meteorological),
            "iot_sensing" | "iot" => Ok(SourceClass::IotSensing),
            _ => Err(ValidationError::InvalidValue { field: "source".into(), value: s.into() }),
        }
    }
}

/// The six air quality indicators. Declaration order breaks primary-pollutant ties.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PollutantKind {
    #[serde(rename = "pm25")]
    Pm25,
    #[serde(rename = "pm10")]
    Pm10,
    #[serde(rename = "co")]
    Co,
    #[serde(rename = "no2")]
    No2,
    #[serde(rename = "o3")]
    O3,
    #[serde(rename = "so2")]
    So2,
}

impl PollutantKind {
    pub const ALL: [PollutantKind; 6] = [
        PollutantKind::Pm25,
        PollutantKind::Pm10,
        PollutantKind::Co,
        PollutantKind::No2,
        PollutantKind::O3,
        PollutantKind::So2,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Wire field name.
    pub fn key(self) -> &'static str {
        match self {
            PollutantKind::Pm25 => "pm25",
            PollutantKind::Pm10 => "pm10",
            PollutantKind::Co => "co",
            PollutantKind::No2 => "no2",
            PollutantKind::O3 => "o3",
            PollutantKind::So2 => "so2",
        }
    }

    /// Display label, as printed in tables.
    pub fn label(self) -> &'static str {
        match self {
            PollutantKind::Pm25 => "PM2.5",
            PollutantKind::Pm10 => "PM10",
            PollutantKind::Co => "CO",
            PollutantKind::No2 => "NO2",
            PollutantKind::O3 => "O3",
            PollutantKind::So2 => "SO2",
        }
    }

    /// CO is kept in mg/m³, everything else in µg/m³.
    pub fn unit(self) -> &'static str {
        match self {
            PollutantKind::Co => "mg/m3",
            _ => "ug/m3",
        }
    }
}

impl fmt::Display for PollutantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for PollutantKind {
    type Err = ValidationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s
            .trim()
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .map(|c| c.to_ascii_lowercase())
            .collect();
        PollutantKind::ALL
            .into_iter()
            .find(|k| k.key() == norm)
            .ok_or_else(|| ValidationError::InvalidValue { field: "pollutant".into(), value: s.into() })
    }
}

/// One optional non-negative concentration per pollutant; at least one present.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PollutantVector([Option<f64>; 6]);

impl PollutantVector {
    pub fn new(values: [Option<f64>; 6]) -> Result<Self, ValidationError> {
        for (kind, v) in PollutantKind::ALL.iter().zip(values.iter()) {
            if let Some(v) = v {
                if !v.is_finite() || *v < 0.0 {
                    return Err(ValidationError::InvalidValue {
                        field: kind.key().to_string(),
                        value: v.to_string(),
                    });
                }
            }
        }
        if values.iter().all(Option::is_none) {
            return Err(ValidationError::AllValuesAbsent);
        }
        Ok(PollutantVector(values))
    }

    /// Builds from `(kind, value)` pairs; later pairs overwrite earlier ones.
    pub fn from_pairs<I: IntoIterator<Item = (PollutantKind, f64)>>(
        pairs: I,
    ) -> Result<Self, ValidationError> {
        let mut values = [None; 6];
        for (k, v) in pairs {
            values[k.index()] = Some(v);
        }
        Self::new(values)
    }

    pub fn get(&self, kind: PollutantKind) -> Option<f64> {
        self.0[kind.index()]
    }

    pub fn as_array(&self) -> &[Option<f64>; 6] {
        &self.0
    }

    /// Present values in declaration order.
    pub fn present(&self) -> impl Iterator<Item = (PollutantKind, f64)> + '_ {
        PollutantKind::ALL.into_iter().filter_map(|k| self.get(k).map(|v| (k, v)))
    }

    pub fn present_count(&self) -> usize {
        self.0.iter().filter(|v| v.is_some()).count()
    }
}

/// Serialized as a map holding only the present pollutants.
impl Serialize for PollutantVector {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeMap;
        let mut map = s.serialize_map(Some(self.present_count()))?;
        for (k, v) in self.present() {
            map.serialize_entry(&k, &v)?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for PollutantVector {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let map = std::collections::BTreeMap::<PollutantKind, f64>::deserialize(d)?;
        PollutantVector::from_pairs(map).map_err(serde::de::Error::custom)
    }
}

/// Opaque sample identifier, unique across the system.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SampleId(pub String);

impl fmt::Display for SampleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for SampleId {
    fn from(s: &str) -> Self {
        SampleId(s.to_string())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorSample {
    pub sample_id: SampleId,
    pub location: GeoPoint,
    pub timestamp: DateTime<Utc>,
    pub source: SourceClass,
    pub reporter_id: Option<String>,
    pub values: PollutantVector,
}

/// Parses `YYYY-MM-DD hh:mm:ss`, the same with a `T` separator, or RFC 3339.
/// Timestamps without an offset are UTC.
pub fn parse_timestamp(field: &'static str, s: &str) -> Result<DateTime<Utc>, ValidationError> {
    let t = s.trim();
    if let Ok(dt) = DateTime::parse_from_rfc3339(t) {
        return Ok(dt.with_timezone(&Utc));
    }
    for fmt in ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S"] {
        if let Ok(naive) = NaiveDateTime::parse_from_str(t, fmt) {
            return Ok(naive.and_utc());
        }
    }
    Err(ValidationError::UnparseableTimestamp { field, value: s.to_string() })
}

/// Canonical wire form of a timestamp: RFC 3339 UTC, seconds resolution.
pub fn format_timestamp(ts: &DateTime<Utc>) -> String {
    ts.format("%Y-%m-%dT%H:%M:%SZ").to_string()
}

/// Half-open aligned interval `[start, start + duration)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TimeSlot {
    start: DateTime<Utc>,
    duration: TimeDelta,
}

impl TimeSlot {
    pub const HOUR: TimeDelta = TimeDelta::hours(1);

    /// Slot containing `ts`. Panics if `duration` is not positive.
    pub fn containing(ts: DateTime<Utc>, duration: TimeDelta) -> TimeSlot {
        let secs = duration.num_seconds();
        assert!(secs > 0, "slot duration must be positive");
        let t = ts.timestamp();
        let start = t.div_euclid(secs) * secs;
        TimeSlot {
            start: DateTime::from_timestamp(start, 0).expect("aligned start within range"),
            duration,
        }
    }

    /// Slot starting at `start`; `None` when `start` is not aligned.
    pub fn aligned(start: DateTime<Utc>, duration: TimeDelta) -> Option<TimeSlot> {
        let secs = duration.num_seconds();
        if secs <= 0 || start.timestamp_subsec_nanos() != 0 || start.timestamp().rem_euclid(secs) != 0 {
            return None;
        }
        Some(TimeSlot { start, duration })
    }

    pub fn start(&self) -> DateTime<Utc> {
        self.start
    }

    pub fn end(&self) -> DateTime<Utc> {
        self.start + self.duration
    }

    pub fn duration(&self) -> TimeDelta {
        self.duration
    }

    pub fn contains(&self, ts: DateTime<Utc>) -> bool {
        ts >= self.start && ts < self.end()
    }

    /// The slot `n` durations later (negative for earlier).
    pub fn offset(&self, n: i32) -> TimeSlot {
        TimeSlot { start: self.start + self.duration * n, duration: self.duration }
    }
}

impl fmt::Display for TimeSlot {
    /// `2017-05-15(12:00-13:00)`, the layout used in M-AQI tables.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}({}-{})",
            self.start.format("%Y-%m-%d"),
            self.start.format("%H:%M"),
            self.end().format("%H:%M")
        )
    }
}

#[derive(Serialize, Deserialize)]
struct SlotRepr {
    start: String,
    duration_s: i64,
}

impl Serialize for TimeSlot {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        SlotRepr { start: format_timestamp(&self.start), duration_s: self.duration.num_seconds() }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for TimeSlot {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let repr = SlotRepr::deserialize(d)?;
        let start = parse_timestamp("start", &repr.start).map_err(D::Error::custom)?;
        TimeSlot::aligned(start, TimeDelta::seconds(repr.duration_s))
            .ok_or_else(|| D::Error::custom(format!("slot start {} not aligned to {} s", repr.start, repr.duration_s)))
    }
}

/// Per-class weights of the fusion average. Sums to one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FusionWeights {
    crowd: f64,
    met: f64,
    iot: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid fusion weights ({crowd}, {met}, {iot}): each must lie in [0, 1] and sum to 1")]
pub struct InvalidWeights {
    pub crowd: f64,
    pub met: f64,
    pub iot: f64,
}

impl FusionWeights {
    pub const SUM_TOLERANCE: f64 = 1e-12;

    pub fn new(crowd: f64, met: f64, iot: f64) -> Result<Self, InvalidWeights> {
        let ok = [crowd, met, iot].iter().all(|w| w.is_finite() && (0.0..=1.0).contains(w))
            && ((crowd + met + iot) - 1.0).abs() <= Self::SUM_TOLERANCE;
        if ok {
            Ok(FusionWeights { crowd, met, iot })
        } else {
            Err(InvalidWeights { crowd, met, iot })
        }
    }

    pub fn meteorological_only() -> Self {
        FusionWeights { crowd: 0.0, met: 1.0, iot: 0.0 }
    }

    pub fn crowd_only() -> Self {
        FusionWeights { crowd: 1.0, met: 0.0, iot: 0.0 }
    }

    pub fn get(&self, class: SourceClass) -> f64 {
        match class {
            SourceClass::Crowdsourced => self.crowd,
            SourceClass::Meteorological => self.met,
            SourceClass::IotSensing => self.iot,
        }
    }
}

impl Default for FusionWeights {
    fn default() -> Self {
        FusionWeights { crowd: 0.2, met: 0.5, iot: 0.3 }
    }
}

impl<'de> Deserialize<'de> for FusionWeights {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            crowd: f64,
            met: f64,
            iot: f64,
        }
        let r = Raw::deserialize(d)?;
        FusionWeights::new(r.crowd, r.met, r.iot).map_err(serde::de::Error::custom)
    }
}

/// Per-class sample counts attached to a fused record.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleCounts {
    pub crowdsourced: u64,
    pub meteorological: u64,
    pub iot_sensing: u64,
}

impl SampleCounts {
    pub fn from_array(a: [u64; 3]) -> Self {
        SampleCounts { crowdsourced: a[0], meteorological: a[1], iot_sensing: a[2] }
    }

    pub fn get(&self, class: SourceClass) -> u64 {
        match class {
            SourceClass::Crowdsourced => self.crowdsourced,
            SourceClass::Meteorological => self.meteorological,
            SourceClass::IotSensing => self.iot_sensing,
        }
    }

    pub fn total(&self) -> u64 {
        self.crowdsourced + self.meteorological + self.iot_sensing
    }
}

/// A fused per-cell, per-slot record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaqiRecord {
    pub cell: crate::grid::Quadkey,
    pub centroid: GeoPoint,
    pub slot: TimeSlot,
    pub aqi: u32,
    pub primary_pollutant: Option<PollutantKind>,
    pub values: PollutantVector,
    pub sample_counts: SampleCounts,
}

/// A raw ADC series (ECG or EMG) with an optional declared sampling rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdcSeries {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate_hz: Option<f64>,
    pub samples: Vec<i32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhysioRecord {
    pub resident_id: Option<String>,
    pub location: GeoPoint,
    pub timestamp: DateTime<Utc>,
    pub ecg: Option<AdcSeries>,
    pub emg: Option<AdcSeries>,
    pub heart_rate: Option<f64>,
    pub body_temp: Option<f64>,
    pub spo2: Option<f64>,
}

/// A reading as it arrives on the wire: a number, or text such as `"-"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RawReading {
    Number(f64),
    Text(String),
}

impl RawReading {
    fn parse(&self, kind: PollutantKind) -> Result<Option<f64>, ValidationError> {
        let invalid = |value: String| ValidationError::InvalidValue { field: kind.key().to_string(), value };
        let v = match self {
            RawReading::Number(v) => *v,
            RawReading::Text(t) => match t.trim() {
                "-" | "" => return Ok(None),
                other => other.parse::<f64>().map_err(|_| invalid(t.clone()))?,
            },
        };
        if v.is_finite() && v >= 0.0 {
            Ok(Some(v))
        } else {
            Err(invalid(v.to_string()))
        }
    }
}

/// An air quality record as parsed from an external source, before validation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RawSample {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_id: Option<String>,
    pub lon: Option<f64>,
    pub lat: Option<f64>,
    pub time: Option<String>,
    pub source: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reporter_id: Option<String>,
    #[serde(default, alias = "PM2.5", skip_serializing_if = "Option::is_none")]
    pub pm25: Option<RawReading>,
    #[serde(default, alias = "PM10", skip_serializing_if = "Option::is_none")]
    pub pm10: Option<RawReading>,
    #[serde(default, alias = "CO", skip_serializing_if = "Option::is_none")]
    pub co: Option<RawReading>,
    #[serde(default, alias = "NO2", skip_serializing_if = "Option::is_none")]
    pub no2: Option<RawReading>,
    #[serde(default, alias = "O3", skip_serializing_if = "Option::is_none")]
    pub o3: Option<RawReading>,
    #[serde(default, alias = "SO2", skip_serializing_if = "Option::is_none")]
    pub so2: Option<RawReading>,
}

impl RawSample {
    fn readings(&self) -> [&Option<RawReading>; 6] {
        [&self.pm25, &self.pm10, &self.co, &self.no2, &self.o3, &self.so2]
    }

    fn readings_mut(&mut self) -> [&mut Option<RawReading>; 6] {
        [&mut self.pm25, &mut self.pm10, &mut self.co, &mut self.no2, &mut self.o3, &mut self.so2]
    }
}

impl From<&SensorSample> for RawSample {
    fn from(s: &SensorSample) -> Self {
        let mut raw = RawSample {
            sample_id: Some(s.sample_id.0.clone()),
            lon: Some(s.location.lon),
            lat: Some(s.location.lat),
            time: Some(format_timestamp(&s.timestamp)),
            source: Some(s.source.as_str().to_string()),
            reporter_id: s.reporter_id.clone(),
            ..RawSample::default()
        };
        for (slot, v) in raw.readings_mut().into_iter().zip(s.values.as_array()) {
            *slot = v.map(RawReading::Number);
        }
        raw
    }
}

/// Content-derived identifier for records that arrive without one.
fn derived_sample_id(location: GeoPoint, ts: &DateTime<Utc>, source: SourceClass, values: &PollutantVector) -> SampleId {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(format!("{:?}|{:?}|{}|{}", location.lon, location.lat, ts.timestamp(), source.as_str()));
    for v in values.as_array() {
        h.update(format!("|{v:?}"));
    }
    let digest = h.finalize();
    let hex: String = digest.iter().take(12).map(|b| format!("{b:02x}")).collect();
    SampleId(format!("auto-{hex}"))
}

/// Checks a raw record against every sample invariant. `"-"` readings become
/// absent values; sub-second precision is dropped.
pub fn validate_sample(raw: &RawSample) -> Result<SensorSample, ValidationError> {
    let lon = raw.lon.ok_or(ValidationError::MissingField { field: "lon" })?;
    let lat = raw.lat.ok_or(ValidationError::MissingField { field: "lat" })?;
    let location = GeoPoint::new(lon, lat)?;
    let time = raw.time.as_deref().ok_or(ValidationError::MissingField { field: "time" })?;
    let ts = parse_timestamp("time", time)?;
    let timestamp = DateTime::from_timestamp(ts.timestamp(), 0).expect("in range");
    let source: SourceClass =
        raw.source.as_deref().ok_or(ValidationError::MissingField { field: "source" })?.parse()?;
    let mut values = [None; 6];
    for (kind, reading) in PollutantKind::ALL.into_iter().zip(raw.readings()) {
        if let Some(r) = reading {
            values[kind.index()] = r.parse(kind)?;
        }
    }
    let values = PollutantVector::new(values)?;
    let sample_id = match raw.sample_id.as_deref().map(str::trim) {
        Some(id) if !id.is_empty() => SampleId(id.to_string()),
        _ => derived_sample_id(location, &timestamp, source, &values),
    };
    Ok(SensorSample {
        sample_id,
        location,
        timestamp,
        source,
        reporter_id: raw.reporter_id.clone().filter(|r| !r.is_empty()),
        values,
    })
}
