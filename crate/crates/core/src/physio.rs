//! Physiological records and heart rate from raw ECG.

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{format_timestamp, parse_timestamp, AdcSeries, GeoPoint, PhysioRecord, ValidationError};

pub const HEART_RATE_RANGE: (f64, f64) = (30.0, 220.0);
pub const SPO2_RANGE: (f64, f64) = (0.0, 100.0);
/// Skin temperature, in °C.
pub const BODY_TEMP_RANGE: (f64, f64) = (20.0, 45.0);
pub const ECG_RATE_RANGE_HZ: (f64, f64) = (50.0, 2000.0);
pub const MIN_SEGMENT_S: f64 = 4.0;
pub const REFRACTORY_S: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PhysioError {
    #[error("OutOfRangeVital: {field} = {value}")]
    OutOfRangeVital { field: &'static str, value: f64 },
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error("InvalidSegment: {0}")]
    InvalidSegment(String),
    #[error("SegmentTooShort: {duration_s:.3} s, need at least {MIN_SEGMENT_S} s")]
    SegmentTooShort { duration_s: f64 },
    #[error("NoPeaksDetected: found {0} peak(s), need 2")]
    NoPeaksDetected(usize),
}

impl PhysioError {
    pub fn name(&self) -> &'static str {
        match self {
            PhysioError::OutOfRangeVital { .. } => "OutOfRangeVital",
            PhysioError::Validation(e) => e.name(),
            PhysioError::InvalidSegment(_) => "InvalidSegment",
            PhysioError::SegmentTooShort { .. } => "SegmentTooShort",
            PhysioError::NoPeaksDetected(_) => "NoPeaksDetected",
        }
    }
}

/// A physiological record as it arrives on the wire.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RawPhysio {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resident_id: Option<String>,
    pub lon: Option<f64>,
    pub lat: Option<f64>,
    pub time: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ecg: Option<AdcSeries>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emg: Option<AdcSeries>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heart_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub body_temp: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spo2: Option<f64>,
}

impl From<&PhysioRecord> for RawPhysio {
    fn from(r: &PhysioRecord) -> Self {
        RawPhysio {
            resident_id: r.resident_id.clone(),
            lon: Some(r.location.lon),
            lat: Some(r.location.lat),
            time: Some(format_timestamp(&r.timestamp)),
            ecg: r.ecg.clone(),
            emg: r.emg.clone(),
            heart_rate: r.heart_rate,
            body_temp: r.body_temp,
            spo2: r.spo2,
        }
    }
}

fn check_vital(field: &'static str, value: Option<f64>, (lo, hi): (f64, f64)) -> Result<Option<f64>, PhysioError> {
    match value {
        Some(v) if !(v.is_finite() && (lo..=hi).contains(&v)) => Err(PhysioError::OutOfRangeVital { field, value: v }),
        other => Ok(other),
    }
}

fn check_series(field: &'static str, series: &Option<AdcSeries>) -> Result<(), PhysioError> {
    if let Some(rate) = series.as_ref().and_then(|s| s.rate_hz) {
        if !(rate.is_finite() && rate > 0.0) {
            return Err(ValidationError::InvalidValue { field: format!("{field}.rate_hz"), value: rate.to_string() }.into());
        }
    }
    Ok(())
}

/// Checks location, time and vital ranges. Every vital is optional.
pub fn validate_physio(raw: &RawPhysio) -> Result<PhysioRecord, PhysioError> {
    let lon = raw.lon.ok_or(ValidationError::MissingField { field: "lon" })?;
    let lat = raw.lat.ok_or(ValidationError::MissingField { field: "lat" })?;
    let location = GeoPoint::new(lon, lat)?;
    let time = raw.time.as_deref().ok_or(ValidationError::MissingField { field: "time" })?;
    let ts = parse_timestamp("time", time)?;
    let timestamp = DateTime::from_timestamp(ts.timestamp(), 0).expect("in range");
    check_series("ecg", &raw.ecg)?;
    check_series("emg", &raw.emg)?;
    Ok(PhysioRecord {
        resident_id: raw.resident_id.clone().filter(|r| !r.is_empty()),
        location,
        timestamp,
        ecg: raw.ecg.clone(),
        emg: raw.emg.clone(),
        heart_rate: check_vital("heart_rate", raw.heart_rate, HEART_RATE_RANGE)?,
        body_temp: check_vital("body_temp", raw.body_temp, BODY_TEMP_RANGE)?,
        spo2: check_vital("spo2", raw.spo2, SPO2_RANGE)?,
    })
}

/// A contiguous ECG recording.
#[derive(Debug, Clone, PartialEq)]
pub struct EcgSegment {
    samples: Vec<i32>,
    sampling_rate: f64,
    start: DateTime<Utc>,
}

impl EcgSegment {
    pub fn new(samples: Vec<i32>, sampling_rate: f64, start: DateTime<Utc>) -> Result<Self, PhysioError> {
        if samples.len() < 2 {
            return Err(PhysioError::InvalidSegment(format!("{} sample(s), need at least 2", samples.len())));
        }
        let (lo, hi) = ECG_RATE_RANGE_HZ;
        if !(sampling_rate.is_finite() && (lo..=hi).contains(&sampling_rate)) {
            return Err(PhysioError::InvalidSegment(format!("sampling rate {sampling_rate} Hz outside [{lo}, {hi}]")));
        }
        Ok(EcgSegment { samples, sampling_rate, start })
    }

    /// Segment from a record's ECG series, which must declare its rate.
    pub fn from_series(series: &AdcSeries, start: DateTime<Utc>) -> Result<Self, PhysioError> {
        let rate = series.rate_hz.ok_or_else(|| PhysioError::InvalidSegment("no sampling rate".into()))?;
        EcgSegment::new(series.samples.clone(), rate, start)
    }

    pub fn samples(&self) -> &[i32] {
        &self.samples
    }

    pub fn sampling_rate(&self) -> f64 {
        self.sampling_rate
    }

    pub fn start(&self) -> DateTime<Utc> {
        self.start
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sampling_rate
    }
}

/// Indices of R-peaks: local maxima above mean + 2·sd, at least the
/// refractory period apart. The first sample of a plateau counts.
pub fn detect_r_peaks(samples: &[i32], sampling_rate: f64) -> Vec<usize> {
    if samples.is_empty() {
        return Vec::new();
    }
    let n = samples.len() as f64;
    let mean = samples.iter().map(|&x| f64::from(x)).sum::<f64>() / n;
    let var = samples.iter().map(|&x| (f64::from(x) - mean).powi(2)).sum::<f64>() / n;
    let threshold = mean + 2.0 * var.sqrt();
    let refractory = (REFRACTORY_S * sampling_rate).ceil() as usize;

    let at = |i: Option<usize>| i.and_then(|i| samples.get(i)).map_or(f64::NEG_INFINITY, |&x| f64::from(x));
    let mut peaks = Vec::new();
    let mut next_allowed = 0;
    for (i, &x) in samples.iter().enumerate() {
        if i < next_allowed {
            continue;
        }
        let x = f64::from(x);
        if x > threshold && x > at(i.checked_sub(1)) && x >= at(Some(i + 1)) {
            peaks.push(i);
            next_allowed = i + refractory;
        }
    }
    peaks
}

/// Beats per minute from the first-to-last peak span, rounded.
pub fn heart_rate_from_ecg(segment: &EcgSegment) -> Result<u32, PhysioError> {
    let duration_s = segment.duration_s();
    if duration_s < MIN_SEGMENT_S {
        return Err(PhysioError::SegmentTooShort { duration_s });
    }
    let peaks = detect_r_peaks(&segment.samples, segment.sampling_rate);
    let (Some(&first), Some(&last)) = (peaks.first(), peaks.last()) else {
        return Err(PhysioError::NoPeaksDetected(0));
    };
    if peaks.len() < 2 {
        return Err(PhysioError::NoPeaksDetected(peaks.len()));
    }
    let span_s = (last - first) as f64 / segment.sampling_rate;
    Ok((60.0 * (peaks.len() - 1) as f64 / span_s).round() as u32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;
    use proptest::prelude::*;

    fn t0() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2017, 5, 15, 12, 0, 0).unwrap()
    }

    fn impulse_train(freq_hz: f64, seconds: f64, rate: f64, amplitude: i32) -> Vec<i32> {
        let n = (seconds * rate).round() as usize;
        let period = (rate / freq_hz).round() as usize;
        (0..n).map(|i| if i % period == 0 { amplitude } else { 0 }).collect()
    }

    fn typical() -> RawPhysio {
        RawPhysio {
            resident_id: Some("r1".into()),
            lon: Some(114.3672),
            lat: Some(30.5719),
            time: Some("2017-05-15 12:30:00".into()),
            ecg: Some(AdcSeries { rate_hz: None, samples: vec![1221] }),
            emg: Some(AdcSeries { rate_hz: None, samples: vec![1221] }),
            heart_rate: Some(74.0),
            body_temp: Some(29.0),
            spo2: Some(98.0),
        }
    }

    #[test]
    fn validates_typical_record() {
        let r = validate_physio(&typical()).unwrap();
        assert_eq!((r.heart_rate, r.spo2, r.body_temp), (Some(74.0), Some(98.0), Some(29.0)));
    }

    #[test]
    fn vital_bounds() {
        let mut raw = typical();
        raw.spo2 = Some(101.0);
        assert_eq!(validate_physio(&raw), Err(PhysioError::OutOfRangeVital { field: "spo2", value: 101.0 }));
        raw.spo2 = Some(100.0);
        raw.heart_rate = Some(29.9);
        assert!(matches!(validate_physio(&raw), Err(PhysioError::OutOfRangeVital { field: "heart_rate", .. })));
        raw.heart_rate = Some(220.0);
        raw.body_temp = Some(f64::NAN);
        assert!(matches!(validate_physio(&raw), Err(PhysioError::OutOfRangeVital { field: "body_temp", .. })));
    }

    #[test]
    fn all_vitals_optional() {
        let raw = RawPhysio {
            lon: Some(114.0),
            lat: Some(30.0),
            time: Some("2017-05-15T12:00:00Z".into()),
            ..RawPhysio::default()
        };
        let r = validate_physio(&raw).unwrap();
        assert!(r.heart_rate.is_none() && r.ecg.is_none() && r.resident_id.is_none());
    }

    #[test]
    fn validation_is_idempotent() {
        let once = validate_physio(&typical()).unwrap();
        let twice = validate_physio(&RawPhysio::from(&once)).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn impulse_trains_give_closed_form_rates() {
        // 10 impulses spaced 0.8 s apart: 60 * 9 / 7.2 = 75.
        let s = EcgSegment::new(impulse_train(1.25, 8.0, 250.0, 1000), 250.0, t0()).unwrap();
        assert_eq!(detect_r_peaks(s.samples(), 250.0).len(), 10);
        assert_eq!(heart_rate_from_ecg(&s).unwrap(), 75);
        let s = EcgSegment::new(impulse_train(1.0, 8.0, 250.0, 1000), 250.0, t0()).unwrap();
        assert_eq!(heart_rate_from_ecg(&s).unwrap(), 60);
    }

    #[test]
    fn refractory_suppresses_double_peaks() {
        let mut x = impulse_train(1.0, 6.0, 250.0, 1000);
        // A second spike 40 ms after each beat must be ignored.
        for i in (0..x.len()).step_by(250) {
            if i + 10 < x.len() {
                x[i + 10] = 900;
            }
        }
        let s = EcgSegment::new(x, 250.0, t0()).unwrap();
        assert_eq!(heart_rate_from_ecg(&s).unwrap(), 60);
    }

    #[test]
    fn degenerate_segments() {
        let flat = EcgSegment::new(vec![512; 2000], 250.0, t0()).unwrap();
        assert_eq!(heart_rate_from_ecg(&flat), Err(PhysioError::NoPeaksDetected(0)));
        let short = EcgSegment::new(impulse_train(1.0, 3.9, 250.0, 1000), 250.0, t0()).unwrap();
        assert!(matches!(heart_rate_from_ecg(&short), Err(PhysioError::SegmentTooShort { .. })));
        let mut one = vec![0; 2000];
        one[700] = 1000;
        let one = EcgSegment::new(one, 250.0, t0()).unwrap();
        assert_eq!(heart_rate_from_ecg(&one), Err(PhysioError::NoPeaksDetected(1)));
        assert!(EcgSegment::new(vec![1], 250.0, t0()).is_err());
        assert!(EcgSegment::new(vec![1, 2], 49.0, t0()).is_err());
        assert!(EcgSegment::new(vec![1, 2], 2001.0, t0()).is_err());
    }

    proptest! {
        #[test]
        fn amplitude_scaling_keeps_peaks(
            freq in 0.8f64..2.5,
            scale in 1i32..50,
            noise in proptest::collection::vec(-20i32..20, 2500),
        ) {
            let base: Vec<i32> = impulse_train(freq, 10.0, 250.0, 1000)
                .iter().zip(&noise).map(|(a, b)| a + b).collect();
            let scaled: Vec<i32> = base.iter().map(|x| x * scale).collect();
            prop_assert_eq!(detect_r_peaks(&base, 250.0), detect_r_peaks(&scaled, 250.0));
            let a = heart_rate_from_ecg(&EcgSegment::new(base, 250.0, t0()).unwrap()).unwrap();
            let b = heart_rate_from_ecg(&EcgSegment::new(scaled, 250.0, t0()).unwrap()).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn short_flat_padding_barely_moves_rate(freq in 0.8f64..2.5, pre in 0usize..62, post in 0usize..62) {
            let x = impulse_train(freq, 8.0, 250.0, 1000);
            let base = heart_rate_from_ecg(&EcgSegment::new(x.clone(), 250.0, t0()).unwrap()).unwrap();
            let padded: Vec<i32> = std::iter::repeat_n(0, pre).chain(x).chain(std::iter::repeat_n(0, post)).collect();
            let moved = heart_rate_from_ecg(&EcgSegment::new(padded, 250.0, t0()).unwrap()).unwrap();
            prop_assert!(base.abs_diff(moved) <= 1);
        }
    }
}
