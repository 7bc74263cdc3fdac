//! Connectivity model: circular-orbit period, overhead-pass contact geometry,
//! periodic contact windows, and replay of measured link-rate traces.
//!
//! Every pass is treated as a maximum-length pass straight over the ground
//! station. With Earth central half-angle
//! `lambda = acos(R cos(eps) / (R + h)) - eps` the satellite is visible for
//! `2 lambda` of each `2 pi` revolution, so the contact fraction is
//! `lambda / pi`.

use std::f64::consts::PI;
use std::path::Path;

use serde::Deserialize;

use crate::{Error, Result};

pub const EARTH_RADIUS_KM: f64 = 6371.0;
/// Earth's gravitational parameter, km^3 / s^2.
pub const EARTH_MU_KM3_S2: f64 = 398_600.441_8;

/// Range outside which an altitude is not treated as LEO (warning only).
pub const LEO_ALTITUDE_RANGE_KM: (f64, f64) = (160.0, 2000.0);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrbitConfig {
    pub altitude_km: f64,
    pub min_elevation_deg: f64,
    /// Start of the first pass relative to t = 0; staggers satellites.
    pub phase_offset_s: f64,
}

impl OrbitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.altitude_km > 0.0) {
            return Err(Error::invalid(format!(
                "altitude {} km must be positive",
                self.altitude_km
            )));
        }
        if !(0.0..90.0).contains(&self.min_elevation_deg) {
            return Err(Error::invalid(format!(
                "minimum elevation {} deg must lie in [0, 90)",
                self.min_elevation_deg
            )));
        }
        if !self.phase_offset_s.is_finite() {
            return Err(Error::invalid("phase offset must be finite"));
        }
        let (lo, hi) = LEO_ALTITUDE_RANGE_KM;
        if !(lo..=hi).contains(&self.altitude_km) {
            log::warn!(
                "altitude {} km is outside the LEO band [{lo}, {hi}] km",
                self.altitude_km
            );
        }
        Ok(())
    }
}

/// Circular-orbit period in seconds: `2 pi sqrt((R + h)^3 / mu)`.
///
/// `h = 0` is accepted as the surface-skimming limit; negative altitudes are
/// rejected.
pub fn orbital_period(altitude_km: f64) -> Result<f64> {
    if !(altitude_km >= 0.0) || !altitude_km.is_finite() {
        return Err(Error::invalid(format!(
            "altitude {altitude_km} km must be non-negative"
        )));
    }
    let a = EARTH_RADIUS_KM + altitude_km;
    Ok(2.0 * PI * (a * a * a / EARTH_MU_KM3_S2).sqrt())
}

/// Earth central half-angle (radians) of the visibility cone above the
/// elevation mask.
pub fn coverage_half_angle(altitude_km: f64, min_elevation_deg: f64) -> Result<f64> {
    if !(altitude_km > 0.0) {
        return Err(Error::invalid(format!(
            "altitude {altitude_km} km must be positive"
        )));
    }
    if !(0.0..90.0).contains(&min_elevation_deg) {
        return Err(Error::invalid(format!(
            "elevation mask {min_elevation_deg} deg outside [0, 90)"
        )));
    }
    let eps = min_elevation_deg.to_radians();
    let lambda = (EARTH_RADIUS_KM * eps.cos() / (EARTH_RADIUS_KM + altitude_km)).acos() - eps;
    if !(lambda > 0.0) {
        return Err(Error::invalid(
            "elevation mask leaves a zero-length contact window",
        ));
    }
    Ok(lambda)
}

/// Share of each orbital period spent in contact, `lambda / pi`.
pub fn contact_fraction(altitude_km: f64, min_elevation_deg: f64) -> Result<f64> {
    Ok(coverage_half_angle(altitude_km, min_elevation_deg)? / PI)
}

/// Contact seconds per pass.
pub fn contact_seconds(altitude_km: f64, min_elevation_deg: f64) -> Result<f64> {
    Ok(contact_fraction(altitude_km, min_elevation_deg)? * orbital_period(altitude_km)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactWindow {
    pub start_s: f64,
    pub end_s: f64,
    /// Satellite to ground.
    pub downlink_bps: f64,
    /// Ground to satellite.
    pub uplink_bps: f64,
}

impl ContactWindow {
    pub fn new(start_s: f64, end_s: f64, downlink_bps: f64, uplink_bps: f64) -> Result<Self> {
        if !(end_s >= start_s) || !(downlink_bps > 0.0 && uplink_bps > 0.0) {
            return Err(Error::invalid(format!(
                "window [{start_s}, {end_s}] with rates {downlink_bps}/{uplink_bps} bps is invalid"
            )));
        }
        Ok(Self {
            start_s,
            end_s,
            downlink_bps,
            uplink_bps,
        })
    }

    pub fn duration_s(&self) -> f64 {
        self.end_s - self.start_s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
pub struct RateSample {
    pub t_s: f64,
    pub downlink_bps: f64,
    pub uplink_bps: f64,
}

/// Measured link rates, replayed as a step function (each sample holds until
/// the next). Queries past the end wrap around cyclically; the wrapped cycle
/// length is the trace span plus its final sample gap.
#[derive(Debug, Clone, PartialEq)]
pub struct RateTrace {
    samples: Vec<RateSample>,
}

impl RateTrace {
    pub fn new(samples: Vec<RateSample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("rate trace has no samples"));
        }
        for (i, s) in samples.iter().enumerate() {
            if !s.t_s.is_finite() || !(s.downlink_bps > 0.0 && s.uplink_bps > 0.0) {
                return Err(Error::invalid(format!("sample {i} has invalid values")));
            }
            if i > 0 && s.t_s <= samples[i - 1].t_s {
                return Err(Error::invalid(format!("sample {i} does not advance time")));
            }
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[RateSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `(downlink_bps, uplink_bps)` in effect at time `t_s`.
    pub fn rate_at(&self, t_s: f64) -> (f64, f64) {
        let first = self.samples[0];
        let n = self.samples.len();
        if n == 1 {
            return (first.downlink_bps, first.uplink_bps);
        }
        let last = self.samples[n - 1];
        let cycle = last.t_s - first.t_s + (last.t_s - self.samples[n - 2].t_s);
        let t = first.t_s + (t_s - first.t_s).rem_euclid(cycle);
        let idx = self.samples.partition_point(|s| s.t_s <= t).max(1) - 1;
        let s = self.samples[idx];
        (s.downlink_bps, s.uplink_bps)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RateSource {
    Fixed { downlink_bps: f64, uplink_bps: f64 },
    Trace(RateTrace),
}

impl RateSource {
    pub fn rate_at(&self, t_s: f64) -> (f64, f64) {
        match self {
            RateSource::Fixed {
                downlink_bps,
                uplink_bps,
            } => (*downlink_bps, *uplink_bps),
            RateSource::Trace(trace) => trace.rate_at(t_s),
        }
    }
}

/// Contact windows inside `[0, horizon_s]`: one pass per orbital period
/// starting at `phase_offset_s`, each `contact_fraction * T` long. Passes cut
/// by either end of the horizon are clipped, so total contact time over any
/// whole number of periods is exactly `fraction * horizon`. Rates are read
/// at each window's start and held for its duration.
pub fn contact_windows(
    config: &OrbitConfig,
    horizon_s: f64,
    rates: &RateSource,
) -> Result<Vec<ContactWindow>> {
    config.validate()?;
    let fraction = contact_fraction(config.altitude_km, config.min_elevation_deg)?;
    contact_windows_with_fraction(config, fraction, horizon_s, rates)
}

/// [`contact_windows`] with the per-orbit contact fraction given instead of
/// derived from the elevation mask.
pub fn contact_windows_with_fraction(
    config: &OrbitConfig,
    fraction: f64,
    horizon_s: f64,
    rates: &RateSource,
) -> Result<Vec<ContactWindow>> {
    config.validate()?;
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!(
            "contact fraction {fraction} outside (0, 1]"
        )));
    }
    if !(horizon_s > 0.0) {
        return Err(Error::invalid(format!(
            "horizon {horizon_s} s must be positive"
        )));
    }
    let period = orbital_period(config.altitude_km)?;
    let length = fraction * period;
    let offset = config.phase_offset_s.rem_euclid(period);

    let mut windows = Vec::new();
    let mut k = -1.0;
    loop {
        let start = offset + k * period;
        if start >= horizon_s {
            break;
        }
        let (s, e) = (start.max(0.0), (start + length).min(horizon_s));
        if e > s {
            let (down, up) = rates.rate_at(s);
            windows.push(ContactWindow::new(s, e, down, up)?);
        }
        k += 1.0;
    }
    Ok(windows)
}

/// Reads a `t_s,downlink_bps,uplink_bps` CSV trace.
pub fn load_rate_trace(path: impl AsRef<Path>) -> Result<RateTrace> {
    let path = path.as_ref();
    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["t_s", "downlink_bps", "uplink_bps"] {
        return Err(parse_err(
            1,
            format!("expected header t_s,downlink_bps,uplink_bps, found {headers:?}"),
        ));
    }
    let mut samples: Vec<RateSample> = Vec::new();
    for row in reader.deserialize::<RateSample>() {
        let sample = row.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(line, e.to_string())
        })?;
        let line = samples.len() as u64 + 2;
        if !sample.t_s.is_finite() || !(sample.downlink_bps > 0.0 && sample.uplink_bps > 0.0) {
            return Err(parse_err(
                line,
                "timestamps must be finite and rates positive".into(),
            ));
        }
        if let Some(prev) = samples.last() {
            if sample.t_s <= prev.t_s {
                return Err(parse_err(
                    line,
                    format!("timestamp {} does not increase", sample.t_s),
                ));
            }
        }
        samples.push(sample);
    }
    if samples.is_empty() {
        return Err(parse_err(1, "trace has no samples".into()));
    }
    RateTrace::new(samples)
}
