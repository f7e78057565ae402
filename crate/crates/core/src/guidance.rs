//! Health advisories and exposure-aware route planning.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{BoundingBox, Quadkey};
use crate::model::{haversine_m, GeoPoint, MaqiRecord, TimeSlot};
use crate::tasking::pearson_correlation;

const DEFAULT_MESSAGES: &str = include_str!("../data/messages.txt");

/// Default lattice depth for routing.
pub const ROUTE_DEPTH: u8 = 8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GuidanceError {
    #[error("unknown profile {0:?}")]
    UnknownProfile(String),
    #[error("invalid message catalog line {line}: {reason}")]
    Catalog { line: usize, reason: String },
    #[error("invalid route query: {0}")]
    InvalidQuery(String),
    #[error("OutsideArea: {0} is not inside the routing area")]
    OutsideArea(&'static str),
    #[error("NoRoute: avoid-zones disconnect start from goal")]
    NoRoute,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileClass {
    General,
    Respiratory,
    Cardiac,
}

impl ProfileClass {
    pub fn as_str(self) -> &'static str {
        match self {
            ProfileClass::General => "general",
            ProfileClass::Respiratory => "respiratory",
            ProfileClass::Cardiac => "cardiac",
        }
    }

    pub fn is_sensitive(self) -> bool {
        self != ProfileClass::General
    }
}

impl FromStr for ProfileClass {
    type Err = GuidanceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "general" => Ok(ProfileClass::General),
            "respiratory" => Ok(ProfileClass::Respiratory),
            "cardiac" => Ok(ProfileClass::Cardiac),
            _ => Err(GuidanceError::UnknownProfile(s.to_string())),
        }
    }
}

impl fmt::Display for ProfileClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserProfile {
    pub class: ProfileClass,
    #[serde(default)]
    pub indoor: bool,
}

impl UserProfile {
    pub fn new(class: ProfileClass) -> Self {
        UserProfile { class, indoor: false }
    }
}

/// The six AQI categories, cleanest first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Band {
    Excellent,
    Good,
    LightlyPolluted,
    ModeratelyPolluted,
    HeavilyPolluted,
    SeverelyPolluted,
}

impl Band {
    pub const ALL: [Band; 6] = [
        Band::Excellent,
        Band::Good,
        Band::LightlyPolluted,
        Band::ModeratelyPolluted,
        Band::HeavilyPolluted,
        Band::SeverelyPolluted,
    ];

    /// Band for a raw AQI: 0–50, 51–100, 101–150, 151–200, 201–300, above 300.
    pub fn for_aqi(aqi: u32) -> Band {
        match aqi {
            0..=50 => Band::Excellent,
            51..=100 => Band::Good,
            101..=150 => Band::LightlyPolluted,
            151..=200 => Band::ModeratelyPolluted,
            201..=300 => Band::HeavilyPolluted,
            _ => Band::SeverelyPolluted,
        }
    }

    /// 1-based level.
    pub fn level(self) -> u8 {
        self as u8 + 1
    }

    pub fn slug(self) -> &'static str {
        match self {
            Band::Excellent => "excellent",
            Band::Good => "good",
            Band::LightlyPolluted => "lightly_polluted",
            Band::ModeratelyPolluted => "moderately_polluted",
            Band::HeavilyPolluted => "heavily_polluted",
            Band::SeverelyPolluted => "severely_polluted",
        }
    }

    /// One step more severe, saturating at the top.
    pub fn worse(self) -> Band {
        Band::ALL[(self as usize + 1).min(5)]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Advisory {
    pub level: Band,
    pub message_key: String,
    pub aqi: u32,
    pub profile: ProfileClass,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cell: Option<Quadkey>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slot: Option<TimeSlot>,
}

impl Advisory {
    /// Whether the advisory asks the user to change behaviour.
    pub fn is_warning(&self) -> bool {
        self.level >= Band::LightlyPolluted
    }
}

/// Band for a profile. Sensitive profiles move one band more severe.
pub fn band_for(aqi: u32, profile: ProfileClass) -> Band {
    let band = Band::for_aqi(aqi);
    if profile.is_sensitive() {
        band.worse()
    } else {
        band
    }
}

pub fn advisory_for(aqi: u32, profile: &UserProfile) -> Advisory {
    let level = band_for(aqi, profile.class);
    Advisory {
        level,
        message_key: format!("{}.{}", profile.class, level.slug()),
        aqi,
        profile: profile.class,
        cell: None,
        slot: None,
    }
}

/// Advisory for the record whose cell contains `p`.
pub fn advisory_at(
    records: &[MaqiRecord],
    bbox: &BoundingBox,
    p: GeoPoint,
    profile: &UserProfile,
) -> Option<Advisory> {
    let record = record_at(records, bbox, p)?;
    Some(Advisory { cell: Some(record.cell.clone()), slot: Some(record.slot), ..advisory_for(record.aqi, profile) })
}

/// Record whose cell contains `p`, if any.
pub fn record_at<'a>(records: &'a [MaqiRecord], bbox: &BoundingBox, p: GeoPoint) -> Option<&'a MaqiRecord> {
    if !bbox.contains(p) {
        return None;
    }
    records.iter().find(|r| {
        let fine = Quadkey::for_point(bbox, p, r.cell.depth());
        fine == r.cell
    })
}

/// Overnight advice for indoor-flagged users: issued when the worst
/// overnight AQI is beyond the "good" band.
pub fn sleep_advisory(overnight_aqi: &[u32], profile: &UserProfile) -> Option<Advisory> {
    let worst = *overnight_aqi.iter().max()?;
    let level = Band::for_aqi(worst);
    (profile.indoor && level > Band::Good).then(|| Advisory {
        level,
        message_key: "sleep.indoor".into(),
        aqi: worst,
        profile: profile.class,
        cell: None,
        slot: None,
    })
}

/// Descriptive correlation between nightly mean AQI and sleep-quality scores.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SleepReport {
    pub nights: usize,
    pub pearson_r: Option<f64>,
}

pub fn sleep_correlation(nightly_mean_aqi: &[f64], sleep_scores: &[f64]) -> SleepReport {
    let n = nightly_mean_aqi.len().min(sleep_scores.len());
    SleepReport { nights: n, pearson_r: pearson_correlation(&nightly_mean_aqi[..n], &sleep_scores[..n]) }
}

/// Advisory texts keyed by message key.
#[derive(Debug, Clone, PartialEq)]
pub struct MessageCatalog {
    messages: BTreeMap<String, String>,
}

impl MessageCatalog {
    /// Parses `key = text` lines; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self, GuidanceError> {
        let mut messages = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |reason: &str| GuidanceError::Catalog { line: i + 1, reason: reason.into() };
            let (key, value) = line.split_once('=').ok_or_else(|| err("expected key = text"))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(err("empty key"));
            }
            messages.insert(key.to_string(), value.trim().to_string());
        }
        Ok(MessageCatalog { messages })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.messages.get(key).map(String::as_str)
    }

    /// Text for an advisory, falling back to the key itself.
    pub fn text<'a>(&'a self, advisory: &'a Advisory) -> &'a str {
        self.get(&advisory.message_key).unwrap_or(&advisory.message_key)
    }
}

impl Default for MessageCatalog {
    fn default() -> Self {
        MessageCatalog::parse(DEFAULT_MESSAGES).expect("bundled catalog parses")
    }
}

/// Regular lattice of cells at one quadtree depth, optionally windowed.
#[derive(Debug, Clone, PartialEq)]
pub struct RouteLattice {
    bbox: BoundingBox,
    depth: u8,
    cols: Range<u32>,
    rows: Range<u32>,
    aqi: BTreeMap<(u32, u32), u32>,
}

impl RouteLattice {
    /// Lattice covering the whole box with every cell at AQI 0.
    pub fn new(bbox: BoundingBox, depth: u8) -> Self {
        let n = 1u32 << depth;
        RouteLattice { bbox, depth, cols: 0..n, rows: 0..n, aqi: BTreeMap::new() }
    }

    /// Lattice whose cell AQIs come from fused records. A record covers all
    /// lattice cells below it; a lattice cell holding several finer records
    /// takes their maximum. Cells without records stay at 0.
    pub fn from_records(records: &[MaqiRecord], bbox: BoundingBox, depth: u8) -> Self {
        let mut lattice = RouteLattice::new(bbox, depth);
        let mut coarse: Vec<&MaqiRecord> = Vec::new();
        for r in records {
            if r.cell.depth() >= depth {
                let (c, row) = r.cell.ancestor(depth).col_row();
                let e = lattice.aqi.entry((c, row)).or_insert(0);
                *e = (*e).max(r.aqi);
            } else {
                coarse.push(r);
            }
        }
        for r in coarse {
            let shift = depth - r.cell.depth();
            let (c0, r0) = r.cell.col_row();
            for c in (c0 << shift)..((c0 + 1) << shift) {
                for row in (r0 << shift)..((r0 + 1) << shift) {
                    lattice.aqi.insert((c, row), r.aqi);
                }
            }
        }
        lattice
    }

    /// Restricts routing to a rectangle of columns and rows.
    pub fn with_window(mut self, cols: Range<u32>, rows: Range<u32>) -> Result<Self, GuidanceError> {
        let n = 1u32 << self.depth;
        if cols.is_empty() || rows.is_empty() || cols.end > n || rows.end > n {
            return Err(GuidanceError::InvalidQuery(format!("window {cols:?} x {rows:?} outside 0..{n}")));
        }
        self.cols = cols;
        self.rows = rows;
        Ok(self)
    }

    pub fn set_aqi(&mut self, col: u32, row: u32, aqi: u32) {
        self.aqi.insert((col, row), aqi);
    }

    pub fn aqi(&self, col: u32, row: u32) -> u32 {
        self.aqi.get(&(col, row)).copied().unwrap_or(0)
    }

    pub fn depth(&self) -> u8 {
        self.depth
    }

    pub fn bbox(&self) -> &BoundingBox {
        &self.bbox
    }

    pub fn cols(&self) -> Range<u32> {
        self.cols.clone()
    }

    pub fn rows(&self) -> Range<u32> {
        self.rows.clone()
    }

    pub fn key(&self, col: u32, row: u32) -> Quadkey {
        Quadkey::from_col_row(col, row, self.depth)
    }

    pub fn center(&self, col: u32, row: u32) -> GeoPoint {
        self.key(col, row).center(&self.bbox)
    }

    fn in_window(&self, col: u32, row: u32) -> bool {
        self.cols.contains(&col) && self.rows.contains(&row)
    }

    /// Lattice cell containing `p`, if inside the window.
    pub fn locate(&self, p: GeoPoint) -> Option<(u32, u32)> {
        if !self.bbox.contains(p) {
            return None;
        }
        let (c, r) = Quadkey::for_point(&self.bbox, p, self.depth).col_row();
        self.in_window(c, r).then_some((c, r))
    }

    /// 4-neighbours inside the window.
    pub fn neighbors(&self, col: u32, row: u32) -> impl Iterator<Item = (u32, u32)> + '_ {
        let cand = [
            col.checked_sub(1).map(|c| (c, row)),
            Some((col + 1, row)),
            row.checked_sub(1).map(|r| (col, r)),
            Some((col, row + 1)),
        ];
        cand.into_iter().flatten().filter(|&(c, r)| self.in_window(c, r))
    }

    /// Distance and exposure of the step between two adjacent cells.
    /// Cost is `distance + alpha * exposure`.
    pub fn step(&self, a: (u32, u32), b: (u32, u32)) -> (f64, f64) {
        let d = haversine_m(self.center(a.0, a.1), self.center(b.0, b.1));
        let avg = (f64::from(self.aqi(a.0, a.1)) + f64::from(self.aqi(b.0, b.1))) / 2.0;
        (d, d * (avg - 50.0).max(0.0) / 100.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteQuery {
    pub start: GeoPoint,
    pub goal: GeoPoint,
    pub alpha: f64,
    #[serde(default)]
    pub avoid: BTreeSet<Quadkey>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Route {
    pub cells: Vec<Quadkey>,
    pub total_distance_m: f64,
    pub total_exposure: f64,
    pub total_cost: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Entry {
    cost: f64,
    node: usize,
}

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        other.cost.total_cmp(&self.cost).then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Minimum-cost 4-neighbour path. Among equal-cost paths the one whose
/// quadkey sequence is lexicographically smallest wins.
pub fn plan_route(lattice: &RouteLattice, query: &RouteQuery) -> Result<Route, GuidanceError> {
    if !(query.alpha.is_finite() && query.alpha >= 0.0) {
        return Err(GuidanceError::InvalidQuery(format!("alpha must be >= 0, got {}", query.alpha)));
    }
    let start = lattice.locate(query.start).ok_or(GuidanceError::OutsideArea("start"))?;
    let goal = lattice.locate(query.goal).ok_or(GuidanceError::OutsideArea("goal"))?;
    let blocked = |c: u32, r: u32| query.avoid.iter().any(|q| q.is_prefix_of(&lattice.key(c, r)));
    if blocked(start.0, start.1) || blocked(goal.0, goal.1) {
        return Err(GuidanceError::NoRoute);
    }

    let width = lattice.cols.len();
    let index = |(c, r): (u32, u32)| (r - lattice.rows.start) as usize * width + (c - lattice.cols.start) as usize;
    let coords = |i: usize| ((i % width) as u32 + lattice.cols.start, (i / width) as u32 + lattice.rows.start);
    let n = width * lattice.rows.len();
    let mut dist = vec![f64::INFINITY; n];
    let mut prev: Vec<Option<usize>> = vec![None; n];
    let mut done = vec![false; n];

    let path_to = |prev: &[Option<usize>], mut i: usize| {
        let mut p = vec![i];
        while let Some(j) = prev[i] {
            p.push(j);
            i = j;
        }
        p.reverse();
        p.into_iter().map(|i| { let (c, r) = coords(i); lattice.key(c, r) }).collect::<Vec<_>>()
    };

    let (s, g) = (index(start), index(goal));
    dist[s] = 0.0;
    let mut heap = BinaryHeap::from([Entry { cost: 0.0, node: s }]);
    while let Some(Entry { cost, node }) = heap.pop() {
        if done[node] {
            continue;
        }
        done[node] = true;
        if node == g {
            break;
        }
        let here = coords(node);
        for next in lattice.neighbors(here.0, here.1) {
            if blocked(next.0, next.1) {
                continue;
            }
            let j = index(next);
            if done[j] {
                continue;
            }
            let (d, e) = lattice.step(here, next);
            let c = cost + d + query.alpha * e;
            let better = match c.total_cmp(&dist[j]) {
                Ordering::Less => true,
                Ordering::Equal => path_to(&prev, node) < path_to(&prev, prev[j].expect("reached")),
                Ordering::Greater => false,
            };
            if better {
                dist[j] = c;
                prev[j] = Some(node);
                heap.push(Entry { cost: c, node: j });
            }
        }
    }
    if !done[g] {
        return Err(GuidanceError::NoRoute);
    }

    let cells = path_to(&prev, g);
    let mut total_distance_m = 0.0;
    let mut total_exposure = 0.0;
    let mut i = g;
    let mut steps = Vec::new();
    while let Some(j) = prev[i] {
        steps.push((coords(j), coords(i)));
        i = j;
    }
    for (a, b) in steps.into_iter().rev() {
        let (d, e) = lattice.step(a, b);
        total_distance_m += d;
        total_exposure += e;
    }
    Ok(Route { cells, total_distance_m, total_exposure, total_cost: dist[g] })
}
