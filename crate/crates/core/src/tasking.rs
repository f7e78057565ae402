//! Crowdsensing: mobility features, the resident × sensing-point
//! association matrix, credit scores and greedy task assignment.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use chrono::{DateTime, TimeDelta, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{BoundingBox, Quadkey};
use crate::model::{format_timestamp, parse_timestamp, GeoPoint, TimeSlot, ValidationError, EARTH_RADIUS_M};

#[derive(Debug, Error)]
pub enum TaskingError {
    #[error("EmptyTrace: trace for {0} has no points")]
    EmptyTrace(String),
    #[error("trace for {resident}: {reason}")]
    InvalidTrace { resident: String, reason: String },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error("trace file: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TracePoint {
    pub timestamp: DateTime<Utc>,
    pub location: GeoPoint,
    pub speed_mps: f64,
    pub accel_mps2: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MobilityTrace {
    resident_id: String,
    points: Vec<TracePoint>,
}

impl MobilityTrace {
    /// Timestamps must increase strictly and speeds be non-negative.
    pub fn new(resident_id: impl Into<String>, points: Vec<TracePoint>) -> Result<Self, TaskingError> {
        let resident = resident_id.into();
        let invalid = |reason: &str| TaskingError::InvalidTrace { resident: resident.clone(), reason: reason.into() };
        if points.windows(2).any(|w| w[1].timestamp <= w[0].timestamp) {
            return Err(invalid("timestamps must increase strictly"));
        }
        if points.iter().any(|p| !(p.speed_mps >= 0.0 && p.speed_mps.is_finite()) || !p.accel_mps2.is_finite()) {
            return Err(invalid("speeds must be finite and non-negative"));
        }
        Ok(MobilityTrace { resident_id: resident, points })
    }

    pub fn resident_id(&self) -> &str {
        &self.resident_id
    }

    pub fn points(&self) -> &[TracePoint] {
        &self.points
    }
}

/// How trace positions and times map to sensing cells and slots.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellScheme {
    pub bbox: BoundingBox,
    pub depth: u8,
    pub slot_duration: TimeDelta,
}

impl Default for CellScheme {
    fn default() -> Self {
        CellScheme { bbox: BoundingBox::WUHAN, depth: 8, slot_duration: TimeSlot::HOUR }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MobilityFeatures {
    pub resident_id: String,
    pub mean_speed_mps: f64,
    pub radius_of_gyration_m: f64,
    /// Cells visited in each slot.
    pub visits: BTreeMap<TimeSlot, BTreeSet<Quadkey>>,
    /// Share of trace points falling in each cell.
    pub visit_frequency: BTreeMap<Quadkey, f64>,
}

impl MobilityFeatures {
    pub fn visited_cells(&self) -> BTreeSet<&Quadkey> {
        self.visits.values().flatten().collect()
    }
}

/// RMS distance in meters of the points from their centroid, on a local
/// equirectangular projection.
pub fn radius_of_gyration(points: &[GeoPoint]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let n = points.len() as f64;
    let lat0 = points.iter().map(|p| p.lat).sum::<f64>() / n;
    let k = lat0.to_radians().cos();
    let xy: Vec<(f64, f64)> = points
        .iter()
        .map(|p| (EARTH_RADIUS_M * p.lon.to_radians() * k, EARTH_RADIUS_M * p.lat.to_radians()))
        .collect();
    let cx = xy.iter().map(|v| v.0).sum::<f64>() / n;
    let cy = xy.iter().map(|v| v.1).sum::<f64>() / n;
    (xy.iter().map(|(x, y)| (x - cx).powi(2) + (y - cy).powi(2)).sum::<f64>() / n).sqrt()
}

pub fn extract_mobility_features(
    trace: &MobilityTrace,
    scheme: &CellScheme,
) -> Result<MobilityFeatures, TaskingError> {
    let pts = trace.points();
    if pts.is_empty() {
        return Err(TaskingError::EmptyTrace(trace.resident_id.clone()));
    }
    let mut visits: BTreeMap<TimeSlot, BTreeSet<Quadkey>> = BTreeMap::new();
    let mut hits: BTreeMap<Quadkey, usize> = BTreeMap::new();
    let mut inside = 0usize;
    // Points outside the box still count toward speed and radius.
    for p in pts.iter().filter(|p| scheme.bbox.contains(p.location)) {
        let cell = Quadkey::for_point(&scheme.bbox, p.location, scheme.depth);
        let slot = TimeSlot::containing(p.timestamp, scheme.slot_duration);
        visits.entry(slot).or_default().insert(cell.clone());
        *hits.entry(cell).or_default() += 1;
        inside += 1;
    }
    let visit_frequency = hits.into_iter().map(|(c, n)| (c, n as f64 / inside as f64)).collect();
    let locations: Vec<GeoPoint> = pts.iter().map(|p| p.location).collect();
    Ok(MobilityFeatures {
        resident_id: trace.resident_id.clone(),
        mean_speed_mps: pts.iter().map(|p| p.speed_mps).sum::<f64>() / pts.len() as f64,
        radius_of_gyration_m: radius_of_gyration(&locations),
        visits,
        visit_frequency,
    })
}

/// Resident × sensing-point visit probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct AssociationMatrix {
    residents: Vec<String>,
    points: Vec<Quadkey>,
    entries: Vec<Vec<f64>>,
}

impl AssociationMatrix {
    /// Rows follow `residents`, columns follow `points`. Entries must lie in [0, 1].
    pub fn new(residents: Vec<String>, points: Vec<Quadkey>, entries: Vec<Vec<f64>>) -> Result<Self, TaskingError> {
        let bad = |m: &str| TaskingError::InvalidParameter(m.to_string());
        if entries.len() != residents.len() || entries.iter().any(|r| r.len() != points.len()) {
            return Err(bad("matrix shape does not match its labels"));
        }
        if entries.iter().flatten().any(|e| !(0.0..=1.0).contains(e)) {
            return Err(bad("matrix entries must lie in [0, 1]"));
        }
        if residents.iter().collect::<BTreeSet<_>>().len() != residents.len()
            || points.iter().collect::<BTreeSet<_>>().len() != points.len()
        {
            return Err(bad("duplicate resident or point labels"));
        }
        Ok(AssociationMatrix { residents, points, entries })
    }

    pub fn residents(&self) -> &[String] {
        &self.residents
    }

    pub fn points(&self) -> &[Quadkey] {
        &self.points
    }

    pub fn entry(&self, resident: &str, point: &Quadkey) -> f64 {
        let r = self.residents.iter().position(|x| x == resident);
        let p = self.points.iter().position(|x| x == point);
        match (r, p) {
            (Some(r), Some(p)) => self.entries[r][p],
            _ => 0.0,
        }
    }

    pub fn row(&self, resident_index: usize) -> &[f64] {
        &self.entries[resident_index]
    }
}

/// Entry (r, p) is the fraction of the `window` slots ending with `last_slot`
/// in which r visited a cell inside p.
pub fn build_association_matrix(
    features: &[MobilityFeatures],
    points: &[Quadkey],
    last_slot: TimeSlot,
    window: u32,
) -> Result<AssociationMatrix, TaskingError> {
    if window == 0 {
        return Err(TaskingError::InvalidParameter("window must be at least 1".into()));
    }
    let points: Vec<Quadkey> = points.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let first = last_slot.offset(1 - window as i32);
    let mut by_resident: BTreeMap<&str, BTreeMap<TimeSlot, BTreeSet<&Quadkey>>> = BTreeMap::new();
    for f in features {
        let slots = by_resident.entry(f.resident_id.as_str()).or_default();
        for (slot, cells) in f.visits.range(first..=last_slot) {
            slots.entry(*slot).or_default().extend(cells.iter());
        }
    }
    let mut residents = Vec::with_capacity(by_resident.len());
    let mut entries = Vec::with_capacity(by_resident.len());
    for (resident, slots) in by_resident {
        residents.push(resident.to_string());
        entries.push(
            points
                .iter()
                .map(|p| {
                    let hit = slots.values().filter(|cells| cells.iter().any(|c| p.is_prefix_of(c))).count();
                    hit as f64 / window as f64
                })
                .collect(),
        );
    }
    AssociationMatrix::new(residents, points, entries)
}

/// Composite weights of accuracy, timeliness, correlativity and integrity.
pub const CREDIT_WEIGHTS: [f64; 4] = [0.4, 0.2, 0.2, 0.2];
/// Component value used when there is no evidence.
pub const NEUTRAL_CREDIT: f64 = 0.5;
/// Latency, in seconds, at which timeliness has decayed to 1/e.
pub const TIMELINESS_SCALE_S: f64 = 300.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreditScore {
    pub resident_id: String,
    pub accuracy: f64,
    pub timeliness: f64,
    pub correlativity: f64,
    pub integrity: f64,
    pub composite: f64,
}

impl CreditScore {
    /// Components are clamped to [0, 1].
    pub fn from_components(
        resident_id: impl Into<String>,
        accuracy: f64,
        timeliness: f64,
        correlativity: f64,
        integrity: f64,
    ) -> Self {
        let c = [accuracy, timeliness, correlativity, integrity].map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
        let composite = c.iter().zip(CREDIT_WEIGHTS).map(|(v, w)| v * w).sum::<f64>().min(1.0);
        CreditScore {
            resident_id: resident_id.into(),
            accuracy: c[0],
            timeliness: c[1],
            correlativity: c[2],
            integrity: c[3],
            composite,
        }
    }

    pub fn neutral(resident_id: impl Into<String>) -> Self {
        let n = NEUTRAL_CREDIT;
        Self::from_components(resident_id, n, n, n, n)
    }
}

/// One past contribution of a resident, already compared with the consensus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CreditObservation {
    pub value: f64,
    pub consensus: f64,
    pub latency_s: f64,
    /// Co-located meteorological reading, when one exists.
    pub met_value: Option<f64>,
    /// Non-absent pollutants in the contributed sample, out of six.
    pub present_pollutants: u8,
}

fn pearson(pairs: &[(f64, f64)]) -> Option<f64> {
    if pairs.len() < 2 {
        return None;
    }
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in pairs {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    (sxx > 0.0 && syy > 0.0).then(|| (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Pearson correlation, `None` with fewer than two points or zero variance.
pub fn pearson_correlation(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let pairs: Vec<(f64, f64)> = xs.iter().copied().zip(ys.iter().copied()).collect();
    pearson(&pairs)
}

/// Scores a resident from their contribution history. Relative error is
/// taken against the consensus magnitude, floored at one unit.
pub fn update_credit(resident_id: &str, history: &[CreditObservation]) -> CreditScore {
    if history.is_empty() {
        return CreditScore::neutral(resident_id);
    }
    let n = history.len() as f64;
    let rel_err = history.iter().map(|o| (o.value - o.consensus).abs() / o.consensus.abs().max(1.0)).sum::<f64>() / n;
    let latency = history.iter().map(|o| o.latency_s.max(0.0)).sum::<f64>() / n;
    let pairs: Vec<(f64, f64)> = history.iter().filter_map(|o| o.met_value.map(|m| (o.value, m))).collect();
    let integrity = history.iter().map(|o| f64::from(o.present_pollutants.min(6)) / 6.0).sum::<f64>() / n;
    CreditScore::from_components(
        resident_id,
        1.0 - rel_err,
        (-latency / TIMELINESS_SCALE_S).exp(),
        pearson(&pairs).unwrap_or(NEUTRAL_CREDIT),
        integrity,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskAssignment {
    pub slot: TimeSlot,
    /// Assigned residents per sensing point, best first. Every point of the
    /// matrix is present, possibly with no residents.
    pub assignments: BTreeMap<Quadkey, Vec<String>>,
}

impl TaskAssignment {
    pub fn load(&self, resident: &str) -> usize {
        self.assignments.values().filter(|rs| rs.iter().any(|r| r == resident)).count()
    }

    /// Fraction of points with at least one resident.
    pub fn coverage(&self) -> f64 {
        if self.assignments.is_empty() {
            return 0.0;
        }
        self.assignments.values().filter(|r| !r.is_empty()).count() as f64 / self.assignments.len() as f64
    }
}

/// Greedy assignment: points in quadkey order; for each, the top `k`
/// residents by `entry · composite` (ties by id) that are below quota `q`
/// and have a positive entry. Residents without a credit score get the
/// neutral prior.
pub fn assign_tasks(
    matrix: &AssociationMatrix,
    credits: &BTreeMap<String, CreditScore>,
    k: usize,
    q: usize,
    slot: TimeSlot,
) -> Result<TaskAssignment, TaskingError> {
    if k == 0 || q == 0 {
        return Err(TaskingError::InvalidParameter("k and q must be at least 1".into()));
    }
    let composite =
        |r: &str| credits.get(r).map(|c| c.composite).unwrap_or_else(|| CreditScore::neutral(r).composite);
    let mut order: Vec<usize> = (0..matrix.points.len()).collect();
    order.sort_by(|&a, &b| matrix.points[a].cmp(&matrix.points[b]));
    let mut load: BTreeMap<&str, usize> = BTreeMap::new();
    let mut assignments = BTreeMap::new();
    for p in order {
        let mut candidates: Vec<(f64, &str)> = matrix
            .residents
            .iter()
            .enumerate()
            .filter(|(r, id)| matrix.entries[*r][p] > 0.0 && load.get(id.as_str()).copied().unwrap_or(0) < q)
            .map(|(r, id)| (matrix.entries[r][p] * composite(id), id.as_str()))
            .collect();
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
        let chosen: Vec<String> = candidates.into_iter().take(k).map(|(_, id)| id.to_string()).collect();
        for id in &chosen {
            *load.entry(matrix.residents.iter().find(|r| *r == id).unwrap()).or_default() += 1;
        }
        assignments.insert(matrix.points[p].clone(), chosen);
    }
    Ok(TaskAssignment { slot, assignments })
}

#[derive(Debug, Serialize, Deserialize)]
struct TraceRow {
    resident_id: String,
    timestamp: String,
    lon: f64,
    lat: f64,
    speed: f64,
    acceleration: f64,
}

/// Writes traces as CSV: `resident_id,timestamp,lon,lat,speed,acceleration`.
pub fn write_traces<W: Write>(w: W, traces: &[MobilityTrace]) -> Result<(), TaskingError> {
    let mut out = csv::Writer::from_writer(w);
    for t in traces {
        for p in t.points() {
            out.serialize(TraceRow {
                resident_id: t.resident_id.clone(),
                timestamp: format_timestamp(&p.timestamp),
                lon: p.location.lon,
                lat: p.location.lat,
                speed: p.speed_mps,
                acceleration: p.accel_mps2,
            })?;
        }
    }
    out.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Reads the CSV trace format; rows of one resident are sorted by time.
pub fn read_traces<R: Read>(r: R) -> Result<Vec<MobilityTrace>, TaskingError> {
    let mut by_resident: BTreeMap<String, Vec<TracePoint>> = BTreeMap::new();
    for row in csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r).deserialize() {
        let row: TraceRow = row?;
        by_resident.entry(row.resident_id).or_default().push(TracePoint {
            timestamp: parse_timestamp("timestamp", &row.timestamp)?,
            location: GeoPoint::new(row.lon, row.lat)?,
            speed_mps: row.speed,
            accel_mps2: row.acceleration,
        });
    }
    by_resident
        .into_iter()
        .map(|(id, mut pts)| {
            pts.sort_by_key(|p| p.timestamp);
            MobilityTrace::new(id, pts)
        })
        .collect()
}

/// Reads credit components as CSV: `resident_id,accuracy,timeliness,correlativity,integrity`.
pub fn read_credits<R: Read>(r: R) -> Result<BTreeMap<String, CreditScore>, TaskingError> {
    #[derive(Deserialize)]
    struct Row {
        resident_id: String,
        accuracy: f64,
        timeliness: f64,
        correlativity: f64,
        integrity: f64,
    }
    let mut out = BTreeMap::new();
    for row in csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r).deserialize() {
        let row: Row = row?;
        let c = CreditScore::from_components(&row.resident_id, row.accuracy, row.timeliness, row.correlativity, row.integrity);
        out.insert(row.resident_id, c);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;
    use proptest::prelude::*;

    fn t0() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2017, 5, 15, 8, 0, 0).unwrap()
    }

    fn point(secs: i64, lon: f64, lat: f64) -> TracePoint {
        TracePoint {
            timestamp: t0() + TimeDelta::seconds(secs),
            location: GeoPoint::new(lon, lat).unwrap(),
            speed_mps: 1.5,
            accel_mps2: 0.0,
        }
    }

    #[test]
    fn stationary_trace() {
        let trace = MobilityTrace::new("r1", (0..5).map(|i| point(i * 60, 114.3, 30.5)).collect()).unwrap();
        let f = extract_mobility_features(&trace, &CellScheme::default()).unwrap();
        assert_eq!(f.radius_of_gyration_m, 0.0);
        assert_eq!(f.visited_cells().len(), 1);
        assert_eq!(f.visit_frequency.values().sum::<f64>(), 1.0);
        assert_eq!(f.mean_speed_mps, 1.5);
    }

    #[test]
    fn two_points_a_kilometer_apart() {
        let dlat = (1000.0 / EARTH_RADIUS_M).to_degrees();
        let trace = MobilityTrace::new("r1", vec![point(0, 114.3, 30.5), point(600, 114.3, 30.5 + dlat)]).unwrap();
        let f = extract_mobility_features(&trace, &CellScheme::default()).unwrap();
        assert!((f.radius_of_gyration_m - 500.0).abs() < 1e-6, "{}", f.radius_of_gyration_m);
    }

    #[test]
    fn trace_crossing_three_cells() {
        let scheme = CellScheme { depth: 2, ..CellScheme::default() };
        let b = scheme.bbox;
        // Walk west to east along the southern quarter line.
        let lat = b.min_lat + b.height() * 0.2;
        let lons = [0.1, 0.3, 0.6, 0.62];
        let pts: Vec<_> = lons.iter().enumerate().map(|(i, f)| point(i as i64 * 60, b.min_lon + b.width() * f, lat)).collect();
        let expect: BTreeSet<Quadkey> = pts.iter().map(|p| Quadkey::for_point(&b, p.location, 2)).collect();
        assert_eq!(expect.len(), 3);
        let trace = MobilityTrace::new("r1", pts).unwrap();
        let f = extract_mobility_features(&trace, &scheme).unwrap();
        assert_eq!(f.visited_cells().into_iter().cloned().collect::<BTreeSet<_>>(), expect);
    }

    #[test]
    fn trace_validation() {
        assert!(MobilityTrace::new("r", vec![point(10, 114.0, 30.0), point(10, 114.0, 30.0)]).is_err());
        let mut p = point(0, 114.0, 30.0);
        p.speed_mps = -1.0;
        assert!(MobilityTrace::new("r", vec![p]).is_err());
        let empty = MobilityTrace::new("r", vec![]).unwrap();
        assert!(matches!(extract_mobility_features(&empty, &CellScheme::default()), Err(TaskingError::EmptyTrace(_))));
    }

    fn features_visiting(resident: &str, cell: &Quadkey, slots: &[i32], base: TimeSlot) -> MobilityFeatures {
        MobilityFeatures {
            resident_id: resident.into(),
            mean_speed_mps: 1.0,
            radius_of_gyration_m: 0.0,
            visits: slots.iter().map(|&i| (base.offset(i), BTreeSet::from([cell.clone()]))).collect(),
            visit_frequency: BTreeMap::new(),
        }
    }

    #[test]
    fn association_entries_count_slots() {
        let base = TimeSlot::containing(t0(), TimeSlot::HOUR);
        let p: Quadkey = "0123".parse().unwrap();
        let elsewhere: Quadkey = "3333".parse().unwrap();
        let every = features_visiting("always", &p.child(2), &(-9..=0).collect::<Vec<_>>(), base);
        let never = features_visiting("never", &elsewhere, &[0, -1], base);
        let three = features_visiting("three", &p, &[-1, -4, -7, -12], base);
        let m = build_association_matrix(&[every, never, three], std::slice::from_ref(&p), base, 10).unwrap();
        assert_eq!(m.entry("always", &p), 1.0);
        assert_eq!(m.entry("never", &p), 0.0);
        assert_eq!(m.entry("three", &p), 0.3);
        assert_eq!(m.entry("absent", &p), 0.0);
        assert!(build_association_matrix(&[], &[p], base, 0).is_err());
    }

    #[test]
    fn credit_examples() {
        let perfect: Vec<_> = (0..4)
            .map(|i| CreditObservation {
                value: 10.0 + i as f64,
                consensus: 10.0 + i as f64,
                latency_s: 0.0,
                met_value: Some(20.0 + 2.0 * i as f64),
                present_pollutants: 6,
            })
            .collect();
        let c = update_credit("r", &perfect);
        assert!((c.composite - 1.0).abs() < 1e-12, "{c:?}");
        assert_eq!(update_credit("r", &[]).composite, 0.5);
        let c = CreditScore::from_components("r", 0.8, 0.5, 0.6, 1.0);
        assert!((c.composite - 0.74).abs() < 1e-12);
    }

    #[test]
    fn credit_components() {
        let obs = [
            CreditObservation { value: 12.0, consensus: 10.0, latency_s: 300.0, met_value: None, present_pollutants: 3 },
            CreditObservation { value: 0.5, consensus: 0.0, latency_s: 300.0, met_value: None, present_pollutants: 6 },
        ];
        let c = update_credit("r", &obs);
        // relative errors 0.2 and 0.5 (scale floored at 1)
        assert!((c.accuracy - 0.65).abs() < 1e-12);
        assert!((c.timeliness - (-1.0f64).exp()).abs() < 1e-12);
        assert_eq!(c.correlativity, NEUTRAL_CREDIT);
        assert!((c.integrity - 0.75).abs() < 1e-12);
    }

    fn slot() -> TimeSlot {
        TimeSlot::containing(t0(), TimeSlot::HOUR)
    }

    fn credits(pairs: &[(&str, f64)]) -> BTreeMap<String, CreditScore> {
        pairs.iter().map(|(id, c)| (id.to_string(), CreditScore::from_components(*id, *c, *c, *c, *c))).collect()
    }

    #[test]
    fn picks_highest_credit() {
        let p: Quadkey = "01".parse().unwrap();
        let m = AssociationMatrix::new(vec!["a".into(), "b".into()], vec![p.clone()], vec![vec![1.0], vec![1.0]]).unwrap();
        let a = assign_tasks(&m, &credits(&[("a", 0.3), ("b", 0.9)]), 1, 1, slot()).unwrap();
        assert_eq!(a.assignments[&p], vec!["b".to_string()]);
    }

    #[test]
    fn quota_skips_resident_on_later_points() {
        let (p1, p2): (Quadkey, Quadkey) = ("0".parse().unwrap(), "1".parse().unwrap());
        let m = AssociationMatrix::new(
            vec!["a".into(), "b".into()],
            vec![p2.clone(), p1.clone()],
            vec![vec![1.0, 1.0], vec![0.5, 0.0]],
        )
        .unwrap();
        let a = assign_tasks(&m, &credits(&[("a", 0.9), ("b", 0.9)]), 1, 1, slot()).unwrap();
        assert_eq!(a.assignments[&p1], vec!["a".to_string()]);
        assert_eq!(a.assignments[&p2], vec!["b".to_string()]);
        assert!(assign_tasks(&m, &BTreeMap::new(), 0, 1, slot()).is_err());
    }

    #[test]
    fn zero_entries_never_assigned() {
        let p: Quadkey = "2".parse().unwrap();
        let m = AssociationMatrix::new(vec!["a".into()], vec![p.clone()], vec![vec![0.0]]).unwrap();
        let a = assign_tasks(&m, &credits(&[("a", 1.0)]), 3, 3, slot()).unwrap();
        assert!(a.assignments[&p].is_empty());
        assert_eq!(a.coverage(), 0.0);
    }

    /// With a binding quota, raising a credit can move a resident to an
    /// earlier point and off a later one.
    #[test]
    fn binding_quota_can_move_a_raised_resident() {
        let (p1, p2): (Quadkey, Quadkey) = ("0".parse().unwrap(), "1".parse().unwrap());
        let m = AssociationMatrix::new(
            vec!["a".into(), "b".into()],
            vec![p1.clone(), p2.clone()],
            vec![vec![1.0, 1.0], vec![1.0, 0.0]],
        )
        .unwrap();
        let before = assign_tasks(&m, &credits(&[("a", 0.2), ("b", 0.6)]), 1, 1, slot()).unwrap();
        assert_eq!(before.assignments[&p2], vec!["a".to_string()]);
        let after = assign_tasks(&m, &credits(&[("a", 0.9), ("b", 0.6)]), 1, 1, slot()).unwrap();
        assert_eq!(after.assignments[&p1], vec!["a".to_string()]);
        assert!(after.assignments[&p2].is_empty());
    }

    #[test]
    fn trace_csv_round_trip() {
        let trace = MobilityTrace::new("r7", vec![point(0, 114.1, 30.2), point(30, 114.1001, 30.2002)]).unwrap();
        let mut buf = Vec::new();
        write_traces(&mut buf, std::slice::from_ref(&trace)).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("resident_id,timestamp,lon,lat,speed,acceleration\n"));
        assert_eq!(read_traces(buf.as_slice()).unwrap(), vec![trace]);
    }

    #[test]
    fn credits_csv() {
        let text = "resident_id,accuracy,timeliness,correlativity,integrity\nr1,0.8,0.5,0.6,1.0\n";
        let c = read_credits(text.as_bytes()).unwrap();
        assert!((c["r1"].composite - 0.74).abs() < 1e-12);
    }

    proptest! {
        /// With a non-binding quota, raising one credit keeps every point the resident held.
        #[test]
        fn raising_credit_keeps_points_when_quota_slack(
            entries in prop::collection::vec(prop::collection::vec(0.0f64..=1.0, 3), 4),
            comps in prop::collection::vec(0.0f64..=1.0, 4),
            who in 0usize..4,
            bump in 0.0f64..0.5,
            k in 1usize..3,
        ) {
            let ids: Vec<String> = (0..4).map(|i| format!("r{i}")).collect();
            let pts: Vec<Quadkey> = ["0", "1", "2"].iter().map(|s| s.parse().unwrap()).collect();
            let m = AssociationMatrix::new(ids.clone(), pts.clone(), entries).unwrap();
            let mut cr: BTreeMap<String, CreditScore> = ids.iter().zip(&comps)
                .map(|(id, c)| (id.clone(), CreditScore::from_components(id, *c, *c, *c, *c))).collect();
            let before = assign_tasks(&m, &cr, k, pts.len(), slot()).unwrap();
            let c = (comps[who] + bump).min(1.0);
            cr.insert(ids[who].clone(), CreditScore::from_components(&ids[who], c, c, c, c));
            let after = assign_tasks(&m, &cr, k, pts.len(), slot()).unwrap();
            for p in &pts {
                if before.assignments[p].contains(&ids[who]) {
                    prop_assert!(after.assignments[p].contains(&ids[who]));
                }
            }
        }
    }
}
