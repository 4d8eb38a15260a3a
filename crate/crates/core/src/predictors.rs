//! Model inputs: forecast error, decay-weighted historical bias, solar
//! geometry and the per-gridpoint feature stack fed to the corrector.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{DateTime, Datelike, TimeZone, Utc};

use crate::error::{Error, Result};
use crate::grid::{Field, Grid};
use crate::par;
use crate::store::{self, Container, ContainerKind, FieldSet, ManifestBlock};

/// Default decay constant for the historical-error average.
pub const DEFAULT_DECAY_W: f64 = 0.05;
/// Default number of lags (the window holds `N + 1` errors).
pub const DEFAULT_LAGS: usize = 40;

/// `forecast - verifying_analysis`, per feature and gridpoint.
///
/// The analysis must be valid at the forecast's valid time.
pub fn forecast_error(forecast: &FieldSet, verifying_analysis: &FieldSet) -> Result<FieldSet> {
    forecast.ensure_compatible(verifying_analysis)?;
    if forecast.time != verifying_analysis.time {
        return Err(Error::arg(
            "verifying_analysis",
            format!(
                "valid at {}, forecast valid at {}",
                verifying_analysis.time, forecast.time
            ),
        ));
    }
    forecast.sub(verifying_analysis)
}

fn check_decay(w: f64) -> Result<()> {
    if !(w > 0.0 && w < 1.0) {
        return Err(Error::arg("w", format!("decay constant must lie in (0, 1), got {w}")));
    }
    Ok(())
}

/// Weight of the error at lag `i`: `(1 - w)^i`.
pub fn decay_weight(w: f64, lag: usize) -> f64 {
    (1.0 - w).powi(lag as i32)
}

/// Decay-weighted mean of historical errors, `errors` ordered newest first.
///
/// Every supplied error is used; pass `&errors[..=n]` to keep `n` lags.
pub fn decay_bias(errors: &[FieldSet], w: f64) -> Result<FieldSet> {
    check_decay(w)?;
    let newest = errors
        .first()
        .ok_or_else(|| Error::InsufficientData("decay bias needs at least one error".into()))?;
    for e in &errors[1..] {
        newest.ensure_compatible(e)?;
    }
    let weights: Vec<f64> = (0..errors.len()).map(|i| decay_weight(w, i)).collect();
    let total: f64 = weights.iter().sum();
    // accumulate departures from the newest error so constant input is exact
    Ok(newest.map_fields(|fi, field| {
        let mut acc = vec![0.0; field.values.len()];
        for (e, wt) in errors[1..].iter().zip(&weights[1..]) {
            for ((a, v), r) in acc.iter_mut().zip(&e.fields[fi].values).zip(&field.values) {
                *a += wt * (v - r);
            }
        }
        let values = field.values.iter().zip(&acc).map(|(r, a)| r + a / total).collect();
        Field { grid: field.grid, values }
    }))
}

/// Streaming form of [`decay_bias`] over an unbounded history.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasState {
    pub w: f64,
    /// Number of errors ingested so far.
    pub count: usize,
    /// Layout and time of the newest ingested error; `None` before the first update.
    pub template: Option<FieldSet>,
    /// Running decay-weighted mean.
    pub mean: Vec<Vec<f64>>,
    pub weight_sum: Vec<Vec<f64>>,
}

impl BiasState {
    pub fn new(w: f64) -> Result<Self> {
        check_decay(w)?;
        Ok(BiasState {
            w,
            count: 0,
            template: None,
            mean: Vec::new(),
            weight_sum: Vec::new(),
        })
    }

    /// Ingests the newest error.
    pub fn update(&mut self, newest: &FieldSet) -> Result<()> {
        let keep = 1.0 - self.w;
        match &self.template {
            None => {
                self.mean = newest.fields.iter().map(|f| f.values.clone()).collect();
                self.weight_sum = newest.fields.iter().map(|f| vec![1.0; f.values.len()]).collect();
            }
            Some(t) => {
                t.ensure_compatible(newest)?;
                // m <- m + (e - m) / W with W <- (1 - w) W + 1
                for (fi, field) in newest.fields.iter().enumerate() {
                    for ((m, wsum), v) in self.mean[fi].iter_mut().zip(self.weight_sum[fi].iter_mut()).zip(&field.values) {
                        *wsum = keep * *wsum + 1.0;
                        *m += (v - *m) / *wsum;
                    }
                }
            }
        }
        self.template = Some(newest.zeros_like());
        if let Some(t) = self.template.as_mut() {
            t.time = newest.time;
        }
        self.count += 1;
        Ok(())
    }

    pub fn bias(&self) -> Result<FieldSet> {
        let t = self
            .template
            .as_ref()
            .ok_or_else(|| Error::InsufficientData("bias state has ingested no errors".into()))?;
        Ok(t.map_fields(|fi, f| Field {
            grid: f.grid,
            values: self.mean[fi].clone(),
        }))
    }

    /// Checkpoint: two rasters per feature (running mean, weight sum) with
    /// `w` and the ingested count in the manifest block.
    pub fn save(&self, path: &Path) -> Result<()> {
        let t = self
            .template
            .as_ref()
            .ok_or_else(|| Error::InsufficientData("cannot checkpoint an empty bias state".into()))?;
        let mut extra = BTreeMap::new();
        extra.insert("decay_w".to_string(), serde_json::json!(self.w));
        extra.insert("window".to_string(), serde_json::json!(self.count));
        let mut rasters = Vec::with_capacity(2 * t.n_features());
        for fi in 0..t.n_features() {
            rasters.push(self.mean[fi].clone());
            rasters.push(self.weight_sum[fi].clone());
        }
        let c = Container {
            kind: ContainerKind::BiasState,
            block: ManifestBlock {
                features: t.features.clone(),
                grid: t.grid,
                time: t.time,
                lead_hours: t.lead_hours,
                extra,
            },
            rasters,
        };
        store::write_container(&c, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = store::read_container_kind(path, ContainerKind::BiasState)?;
        let w = c
            .block
            .extra
            .get("decay_w")
            .and_then(|v| v.as_f64())
            .ok_or_else(|| Error::Format("bias checkpoint lacks decay_w".into()))?;
        let count = c
            .block
            .extra
            .get("window")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Format("bias checkpoint lacks window".into()))?
            as usize;
        check_decay(w)?;
        let grid = c.block.grid;
        let n = c.block.features.len();
        let mut mean = Vec::with_capacity(n);
        let mut weight_sum = Vec::with_capacity(n);
        let mut it = c.rasters.into_iter();
        for _ in 0..n {
            mean.push(it.next().expect("count checked by decoder"));
            weight_sum.push(it.next().expect("count checked by decoder"));
        }
        let fields = (0..n).map(|_| Field::zeros(grid)).collect();
        let template =
            FieldSet::new(c.block.features, grid, c.block.time, c.block.lead_hours, fields)?;
        Ok(BiasState { w, count, template: Some(template), mean, weight_sum })
    }
}

/// Sun direction seen from a point on the ground.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolarGeometry {
    /// Degrees clockwise from true north, in [0, 360).
    pub azimuth: f64,
    /// Degrees above the horizon, in [-90, 90].
    pub altitude: f64,
}

/// Low-precision solar ephemeris (about 0.01 degree in declination).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SunEphemeris {
    pub declination: f64,
    pub right_ascension: f64,
    /// Greenwich mean sidereal time, degrees.
    pub gmst: f64,
    /// Apparent minus mean solar time, minutes.
    pub equation_of_time: f64,
}

fn supported_range() -> (DateTime<Utc>, DateTime<Utc>) {
    (
        Utc.with_ymd_and_hms(1950, 1, 1, 0, 0, 0).unwrap(),
        Utc.with_ymd_and_hms(2051, 1, 1, 0, 0, 0).unwrap(),
    )
}

fn wrap_degrees(x: f64) -> f64 {
    let r = x.rem_euclid(360.0);
    if r >= 360.0 {
        0.0
    } else {
        r
    }
}

impl SunEphemeris {
    pub fn at(time: DateTime<Utc>) -> Result<Self> {
        let (lo, hi) = supported_range();
        if time < lo || time >= hi {
            return Err(Error::TimeOutOfRange(time.to_rfc3339()));
        }
        // days since J2000.0 (2000-01-01 12:00 UTC)
        let seconds = time.timestamp() as f64 + time.timestamp_subsec_nanos() as f64 * 1e-9;
        let n = seconds / 86_400.0 - 10_957.5;

        let mean_longitude = wrap_degrees(280.460 + 0.985_647_4 * n);
        let mean_anomaly = wrap_degrees(357.528 + 0.985_600_3 * n).to_radians();
        let ecliptic_longitude = (mean_longitude
            + 1.915 * mean_anomaly.sin()
            + 0.020 * (2.0 * mean_anomaly).sin())
        .to_radians();
        let obliquity = (23.439 - 0.000_000_4 * n).to_radians();

        let right_ascension = wrap_degrees(
            (obliquity.cos() * ecliptic_longitude.sin())
                .atan2(ecliptic_longitude.cos())
                .to_degrees(),
        );
        let declination = (obliquity.sin() * ecliptic_longitude.sin()).asin().to_degrees();
        let gmst = wrap_degrees(280.460_618_37 + 360.985_647_366_29 * n);
        let mut eot = mean_longitude - right_ascension;
        if eot > 180.0 {
            eot -= 360.0;
        } else if eot < -180.0 {
            eot += 360.0;
        }
        Ok(SunEphemeris { declination, right_ascension, gmst, equation_of_time: eot * 4.0 })
    }

    /// Local hour angle in degrees, in (-180, 180].
    pub fn hour_angle(&self, lon: f64) -> f64 {
        let h = wrap_degrees(self.gmst + lon - self.right_ascension);
        if h > 180.0 {
            h - 360.0
        } else {
            h
        }
    }

    /// Latitude and longitude where the sun is at the zenith.
    pub fn subsolar_point(&self) -> (f64, f64) {
        (self.declination, wrap_degrees(self.right_ascension - self.gmst))
    }

    pub fn position(&self, lat: f64, lon: f64) -> SolarGeometry {
        let phi = lat.to_radians();
        let dec = self.declination.to_radians();
        let h = self.hour_angle(lon).to_radians();
        let sin_alt = (phi.sin() * dec.sin() + phi.cos() * dec.cos() * h.cos()).clamp(-1.0, 1.0);
        let altitude = sin_alt.asin().to_degrees();
        let y = -dec.cos() * h.sin();
        let x = dec.sin() * phi.cos() - dec.cos() * phi.sin() * h.cos();
        SolarGeometry { azimuth: wrap_degrees(y.atan2(x).to_degrees()), altitude }
    }
}

/// Solar azimuth and altitude at `(lat, lon)` for `time`. Supports 1950-2050.
pub fn solar_position(time: DateTime<Utc>, lat: f64, lon: f64) -> Result<SolarGeometry> {
    if !(-90.0..=90.0).contains(&lat) {
        return Err(Error::arg("lat", format!("{lat} outside [-90, 90]")));
    }
    Ok(SunEphemeris::at(time)?.position(lat, lon))
}

/// Channels that do not depend on the feature manifest.
pub const GEOMETRY_CHANNELS: usize = 6;

/// Point-major input matrix: `data[p * n_channels + ch]`.
///
/// Channel order: latitude (deg), sin lon, cos lon, sin azimuth, cos azimuth,
/// solar altitude (deg), then `F` forecast values, `F` analysis-at-issue
/// values and `F` decay-bias values.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    pub grid: Grid,
    pub n_channels: usize,
    pub data: Vec<f64>,
}

impl FeatureTensor {
    pub fn new(grid: Grid, n_channels: usize, data: Vec<f64>) -> Result<Self> {
        if n_channels == 0 {
            return Err(Error::arg("n_channels", "must be >= 1"));
        }
        if data.len() != grid.len() * n_channels {
            return Err(Error::ShapeMismatch(format!(
                "feature data has {} values, expected {} points x {n_channels} channels",
                data.len(),
                grid.len()
            )));
        }
        Ok(FeatureTensor { grid, n_channels, data })
    }

    pub fn n_points(&self) -> usize {
        self.grid.len()
    }

    pub fn point(&self, p: usize) -> &[f64] {
        &self.data[p * self.n_channels..(p + 1) * self.n_channels]
    }

    pub fn channel_count_for(n_features: usize) -> usize {
        GEOMETRY_CHANNELS + 3 * n_features
    }

    pub fn channel_names(features: &[store::FeatureSpec]) -> Vec<String> {
        let mut names: Vec<String> =
            ["lat", "sin_lon", "cos_lon", "sin_azimuth", "cos_azimuth", "solar_altitude"]
                .iter()
                .map(|s| s.to_string())
                .collect();
        for prefix in ["forecast", "analysis", "bias"] {
            names.extend(features.iter().map(|f| format!("{prefix}:{}", f.label())));
        }
        names
    }
}

/// Stacks geometry, forecast, issue-time analysis and bias into the input tensor.
pub fn assemble_features(
    forecast: &FieldSet,
    analysis_at_issue: &FieldSet,
    bias: &FieldSet,
    valid_time: DateTime<Utc>,
) -> Result<FeatureTensor> {
    forecast.ensure_compatible(analysis_at_issue)?;
    forecast.ensure_compatible(bias)?;
    let grid = forecast.grid;
    let n_feat = forecast.n_features();
    let n_ch = FeatureTensor::channel_count_for(n_feat);
    let sun = SunEphemeris::at(valid_time)?;
    let lons = grid.lons();
    let lon_sc: Vec<(f64, f64)> = lons.iter().map(|l| l.to_radians().sin_cos()).collect();

    let mut data = vec![0.0; grid.len() * n_ch];
    par::for_each_chunk_mut(&mut data, grid.n_lon * n_ch, |r, row| {
        let lat = grid.lat(r);
        for c in 0..grid.n_lon {
            let p = r * grid.n_lon + c;
            let out = &mut row[c * n_ch..(c + 1) * n_ch];
            let geo = sun.position(lat, lons[c]);
            let (saz, caz) = geo.azimuth.to_radians().sin_cos();
            out[0] = lat;
            out[1] = lon_sc[c].0;
            out[2] = lon_sc[c].1;
            out[3] = saz;
            out[4] = caz;
            out[5] = geo.altitude;
            for f in 0..n_feat {
                out[GEOMETRY_CHANNELS + f] = forecast.fields[f].values[p];
                out[GEOMETRY_CHANNELS + n_feat + f] = analysis_at_issue.fields[f].values[p];
                out[GEOMETRY_CHANNELS + 2 * n_feat + f] = bias.fields[f].values[p];
            }
        }
    });
    FeatureTensor::new(grid, n_ch, data)
}

/// Day of year in 1..=366.
pub(crate) fn day_of_year(time: DateTime<Utc>) -> u32 {
    time.ordinal()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::FeatureSpec;
    use approx::assert_abs_diff_eq;

    fn t(y: i32, m: u32, d: u32, h: u32) -> DateTime<Utc> {
        Utc.with_ymd_and_hms(y, m, d, h, 0, 0).unwrap()
    }

    fn set_with(values: &[f64], time: DateTime<Utc>) -> FieldSet {
        let grid = Grid::global_cell_centred(2, 2).unwrap();
        let fields = vec![Field::new(grid, values.to_vec()).unwrap()];
        FieldSet::new(vec![FeatureSpec::new("t", "850hPa", "K")], grid, time, 6, fields).unwrap()
    }

    #[test]
    fn forecast_error_cases() {
        let a = set_with(&[1.0, 2.0, 3.0, 4.0], t(2021, 1, 1, 6));
        assert!(forecast_error(&a, &a).unwrap().fields[0].values.iter().all(|v| *v == 0.0));
        let f = a.map_fields(|_, x| Field { grid: x.grid, values: x.values.iter().map(|v| v + 2.0).collect() });
        assert!(forecast_error(&f, &a).unwrap().fields[0].values.iter().all(|v| *v == 2.0));
        let mut late = a.clone();
        late.time = t(2021, 1, 1, 12);
        assert!(forecast_error(&f, &late).is_err());
    }

    #[test]
    fn decay_bias_worked_example() {
        let e = [1.0, 2.0, 4.0].map(|v| set_with(&[v; 4], t(2021, 1, 1, 0)));
        let b = decay_bias(&e, 0.5).unwrap();
        assert_abs_diff_eq!(b.fields[0].values[0], 3.0 / 1.75, epsilon = 1e-15);
    }

    #[test]
    fn decay_bias_edge_cases() {
        let single = [set_with(&[0.3, -1.0, 2.0, 5.0], t(2021, 1, 1, 0))];
        assert_eq!(decay_bias(&single, 0.05).unwrap().fields[0].values, single[0].fields[0].values);
        assert!(decay_bias(&[], 0.05).is_err());
        assert!(decay_bias(&single, 0.0).is_err());
        assert!(decay_bias(&single, 1.0).is_err());
        let constant: Vec<_> = (0..30).map(|_| set_with(&[0.7; 4], t(2021, 1, 1, 0))).collect();
        assert!(decay_bias(&constant, 0.05).unwrap().fields[0].values.iter().all(|v| *v == 0.7));
        let mut state = BiasState::new(0.05).unwrap();
        for e in &constant {
            state.update(e).unwrap();
        }
        assert!(state.bias().unwrap().fields[0].values.iter().all(|v| *v == 0.7));
    }

    #[test]
    fn weights_strictly_decrease() {
        for w in [1e-3, 0.05, 0.5, 0.99] {
            for i in 0..50 {
                assert!(decay_weight(w, i + 1) < decay_weight(w, i));
            }
        }
    }

    #[test]
    fn streaming_state_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = BiasState::new(0.25).unwrap();
        assert!(s.bias().is_err());
        s.update(&set_with(&[1.0, 2.0, 3.0, 4.0], t(2021, 1, 1, 0))).unwrap();
        s.update(&set_with(&[2.0, 2.0, 2.0, 2.0], t(2021, 1, 1, 6))).unwrap();
        let path = dir.path().join("state.fld");
        s.save(&path).unwrap();
        let back = BiasState::load(&path).unwrap();
        assert_eq!(back.count, 2);
        assert_eq!(back.w, 0.25);
        // rasters are stored in single precision
        for (a, b) in back.bias().unwrap().fields[0].values.iter().zip(&s.bias().unwrap().fields[0].values) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn subsolar_point_has_sun_overhead() {
        for time in [t(2021, 3, 20, 0), t(2019, 7, 4, 15), t(1955, 12, 1, 9), t(2049, 10, 10, 21)] {
            let eph = SunEphemeris::at(time).unwrap();
            let (lat, lon) = eph.subsolar_point();
            let g = solar_position(time, lat, lon).unwrap();
            assert_abs_diff_eq!(g.altitude, 90.0, epsilon = 0.5);
        }
    }

    #[test]
    fn solstice_noon_near_tropic_of_cancer() {
        let g = solar_position(t(2021, 6, 21, 12), 23.44, 0.0).unwrap();
        assert_abs_diff_eq!(g.altitude, 90.0, epsilon = 1.0);
    }

    #[test]
    fn northern_noon_azimuth_is_south() {
        // local solar noon: hour angle zero at the chosen longitude
        let time = t(2021, 10, 15, 12);
        let eph = SunEphemeris::at(time).unwrap();
        let lon = eph.subsolar_point().1;
        let g = solar_position(time, 45.0, lon).unwrap();
        assert_abs_diff_eq!(g.azimuth, 180.0, epsilon = 2.0);
        assert!(g.altitude > 30.0);
    }

    #[test]
    fn out_of_range_times_rejected() {
        assert!(matches!(solar_position(t(1949, 12, 31, 23), 0.0, 0.0), Err(Error::TimeOutOfRange(_))));
        assert!(matches!(solar_position(t(2051, 1, 1, 0), 0.0, 0.0), Err(Error::TimeOutOfRange(_))));
        assert!(solar_position(t(2050, 12, 31, 23), 0.0, 0.0).is_ok());
    }

    #[test]
    fn channel_counts() {
        assert_eq!(FeatureTensor::channel_count_for(1), 9);
        assert_eq!(FeatureTensor::channel_count_for(17), 57);
        let names = FeatureTensor::channel_names(&store::FeatureManifest::desk_default().features);
        assert_eq!(names.len(), 57);
        assert_eq!(names[6], "forecast:temperature@500hPa");
    }

    #[test]
    fn zero_inputs_leave_geometry_populated() {
        let z = set_with(&[0.0; 4], t(2021, 6, 1, 0));
        let ft = assemble_features(&z, &z, &z, t(2021, 6, 1, 6)).unwrap();
        assert_eq!(ft.n_channels, 9);
        for p in 0..4 {
            let x = ft.point(p);
            assert_eq!(&x[6..], &[0.0, 0.0, 0.0]);
            assert_abs_diff_eq!(x[1] * x[1] + x[2] * x[2], 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(x[3] * x[3] + x[4] * x[4], 1.0, epsilon = 1e-12);
            assert!(x[0] != 0.0);
        }
    }

    #[test]
    fn assemble_rejects_grid_mismatch() {
        let a = set_with(&[0.0; 4], t(2021, 6, 1, 0));
        let grid = Grid::global_cell_centred(2, 3).unwrap();
        let b = FieldSet::new(a.features.clone(), grid, a.time, 6, vec![Field::zeros(grid)]).unwrap();
        assert!(assemble_features(&a, &b, &a, a.time).is_err());
    }
}
