//! Synthetic analysis/forecast pairs for exercising the pipeline without
//! real model archives.
//!
//! Each feature's analysis is an AR(1) sequence of Gaussian random fields
//! advected zonally by a whole number of columns per step. The forecast valid
//! at the same time is the blurred analysis plus a fixed smooth bias pattern
//! plus white noise, so its error has a learnable systematic part and an
//! irreducible floor equal to the noise standard deviation.

use std::path::Path;

use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{self, Field, Grid};
use crate::par;
use crate::store::{FeatureManifest, FeatureSpec, FieldSet};
use crate::verification::signed_wavenumber;

/// Tags separating the random streams of one scenario.
const STREAM_ANALYSIS_INIT: u64 = 1;
const STREAM_ANALYSIS_STEP: u64 = 2;
const STREAM_BIAS: u64 = 3;
const STREAM_NOISE: u64 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub n_lat: usize,
    pub n_lon: usize,
    pub features: usize,
    /// Spectral slope of the analysis anomalies, power ~ k^-beta.
    pub beta: f64,
    /// Amplitude of the systematic bias pattern; one value or one per feature.
    pub bias_amplitude: Vec<f64>,
    pub noise_std: f64,
    pub forecast_blur_sigma: f64,
    pub lead_steps: usize,
    pub step_hours: u32,
    pub steps: usize,
    /// AR(1) coefficient of the analysis anomalies between steps.
    pub persistence: f64,
    /// Zonal shift in columns per step.
    pub advection_cells: i64,
    /// Constant added to every analysis so the fields have a mean state.
    pub base_offset: f64,
    pub seed: u64,
    pub start: DateTime<Utc>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            n_lat: 64,
            n_lon: 64,
            features: 5,
            beta: 3.0,
            bias_amplitude: vec![1.0],
            noise_std: 0.1,
            forecast_blur_sigma: 0.0,
            lead_steps: 1,
            step_hours: 6,
            steps: 60,
            persistence: 0.95,
            advection_cells: 1,
            base_offset: 10.0,
            seed: 20210205,
            start: Utc.with_ymd_and_hms(2021, 1, 1, 0, 0, 0).unwrap(),
        }
    }
}

impl ScenarioConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: ScenarioConfig = serde_json::from_slice(&std::fs::read(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid()?;
        if self.features == 0 {
            return Err(Error::arg("features", "must be >= 1"));
        }
        if !(1.0..=4.0).contains(&self.beta) {
            return Err(Error::arg("beta", format!("must lie in [1, 4], got {}", self.beta)));
        }
        if self.bias_amplitude.is_empty()
            || (self.bias_amplitude.len() != 1 && self.bias_amplitude.len() != self.features)
        {
            return Err(Error::arg("bias_amplitude", "give one value or one per feature"));
        }
        if self.bias_amplitude.iter().any(|a| !(*a >= 0.0)) {
            return Err(Error::arg("bias_amplitude", "amplitudes must be >= 0"));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::arg("noise_std", "must be >= 0"));
        }
        if !(self.forecast_blur_sigma >= 0.0) {
            return Err(Error::arg("forecast_blur_sigma", "must be >= 0"));
        }
        if !(self.persistence >= 0.0 && self.persistence <= 1.0) {
            return Err(Error::arg("persistence", "must lie in [0, 1]"));
        }
        if self.steps == 0 || self.step_hours == 0 {
            return Err(Error::arg("steps", "steps and step_hours must be >= 1"));
        }
        if !self.base_offset.is_finite() {
            return Err(Error::arg("base_offset", "must be finite"));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::global_cell_centred(self.n_lat, self.n_lon)
    }

    pub fn lead_hours(&self) -> u32 {
        self.lead_steps as u32 * self.step_hours
    }

    pub fn amplitude(&self, feature: usize) -> f64 {
        if self.bias_amplitude.len() == 1 {
            self.bias_amplitude[0]
        } else {
            self.bias_amplitude[feature]
        }
    }

    /// Names drawn from the desk manifest, cycling with a numeric suffix when
    /// more features are requested than it lists.
    pub fn feature_specs(&self) -> Vec<FeatureSpec> {
        let base = FeatureManifest::desk_default().features;
        (0..self.features)
            .map(|i| {
                let mut spec = base[i % base.len()].clone();
                if i >= base.len() {
                    spec.variable = format!("{}_{}", spec.variable, i / base.len());
                }
                spec
            })
            .collect()
    }

    pub fn valid_time(&self, step: usize) -> DateTime<Utc> {
        self.start + Duration::hours(step as i64 * self.step_hours as i64)
    }
}

/// SplitMix64 finaliser used to derive independent stream seeds.
pub fn derive_seed(seed: u64, stream: u64, a: u64, b: u64) -> u64 {
    let mut z = seed;
    for v in [stream, a, b] {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(v);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Zero-mean, unit-variance random field whose power falls off as `k^-beta`.
///
/// Complex white noise is shaped by `k^(-beta/2)` in wavenumber space and the
/// real part of its inverse transform is kept; the field is periodic in both
/// directions.
pub fn gaussian_random_field(grid: &Grid, beta: f64, seed: u64) -> Result<Field> {
    grid.validate()?;
    if !beta.is_finite() {
        return Err(Error::arg("beta", "must be finite"));
    }
    let (rows, cols) = grid.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spec: Vec<Complex<f64>> = (0..rows * cols)
        .map(|_| {
            let re: f64 = StandardNormal.sample(&mut rng);
            let im: f64 = StandardNormal.sample(&mut rng);
            Complex::new(re, im)
        })
        .collect();
    for r in 0..rows {
        let ky = signed_wavenumber(r, rows);
        for c in 0..cols {
            let kx = signed_wavenumber(c, cols);
            let k = (kx * kx + ky * ky).sqrt();
            spec[r * cols + c] *= if k == 0.0 { 0.0 } else { k.powf(-beta / 2.0) };
        }
    }
    let mut planner = FftPlanner::new();
    let row_fft = planner.plan_fft_inverse(cols);
    let col_fft = planner.plan_fft_inverse(rows);
    for row in spec.chunks_exact_mut(cols) {
        row_fft.process(row);
    }
    let mut column = vec![Complex::new(0.0, 0.0); rows];
    for c in 0..cols {
        for r in 0..rows {
            column[r] = spec[r * cols + c];
        }
        col_fft.process(&mut column);
        for r in 0..rows {
            spec[r * cols + c] = column[r];
        }
    }
    let mut values: Vec<f64> = spec.iter().map(|z| z.re).collect();
    normalize(&mut values);
    Field::new(*grid, values)
}

fn normalize(values: &mut [f64]) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter_mut().for_each(|v| *v -= mean);
    let sd = (values.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
    if sd > 0.0 {
        values.iter_mut().for_each(|v| *v /= sd);
    }
}

fn roll_columns(field: &Field, shift: i64) -> Field {
    let n = field.grid.n_lon as i64;
    Field::from_fn(field.grid, |r, c| field.get(r, (c as i64 - shift).rem_euclid(n) as usize))
}

/// Bias pattern of every feature: a smooth (`beta = 4`) field times its amplitude.
pub fn bias_patterns(config: &ScenarioConfig) -> Result<Vec<Field>> {
    config.validate()?;
    let grid = config.grid()?;
    (0..config.features)
        .map(|f| {
            let mut g = gaussian_random_field(&grid, 4.0, derive_seed(config.seed, STREAM_BIAS, f as u64, 0))?;
            let a = config.amplitude(f);
            g.values.iter_mut().for_each(|v| *v *= a);
            Ok(g)
        })
        .collect()
}

/// Analyses and forecasts valid at the same `config.steps` times.
///
/// The forecast at index `k` was issued `lead_steps` steps earlier.
pub fn synth_pair_series(config: &ScenarioConfig) -> Result<(Vec<FieldSet>, Vec<FieldSet>)> {
    config.validate()?;
    let grid = config.grid()?;
    let specs = config.feature_specs();
    let biases = bias_patterns(config)?;
    let innovation = (1.0 - config.persistence * config.persistence).sqrt();

    let mut anomalies: Vec<Vec<Field>> = Vec::with_capacity(config.features);
    for f in 0..config.features {
        let fresh = par::map_range(config.steps, |k| {
            let stream = if k == 0 { STREAM_ANALYSIS_INIT } else { STREAM_ANALYSIS_STEP };
            gaussian_random_field(&grid, config.beta, derive_seed(config.seed, stream, f as u64, k as u64))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let mut series: Vec<Field> = Vec::with_capacity(config.steps);
        for (k, eps) in fresh.into_iter().enumerate() {
            if k == 0 {
                series.push(eps);
                continue;
            }
            let moved = roll_columns(&series[k - 1], config.advection_cells);
            let values = moved
                .values
                .iter()
                .zip(&eps.values)
                .map(|(m, e)| config.persistence * m + innovation * e)
                .collect();
            series.push(Field::new(grid, values)?);
        }
        anomalies.push(series);
    }

    let lead = config.lead_hours();
    let pairs = par::map_range(config.steps, |k| -> Result<(FieldSet, FieldSet)> {
        let time = config.valid_time(k);
        let mut analysis_fields = Vec::with_capacity(config.features);
        let mut forecast_fields = Vec::with_capacity(config.features);
        for f in 0..config.features {
            let analysis = Field {
                grid,
                values: anomalies[f][k].values.iter().map(|v| v + config.base_offset).collect(),
            };
            let mut forecast = grid::gaussian_blur(&analysis, config.forecast_blur_sigma)?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_NOISE, f as u64, k as u64));
            for (v, b) in forecast.values.iter_mut().zip(&biases[f].values) {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += b + config.noise_std * z;
            }
            analysis_fields.push(analysis);
            forecast_fields.push(forecast);
        }
        Ok((
            FieldSet::new(specs.clone(), grid, time, 0, analysis_fields)?,
            FieldSet::new(specs.clone(), grid, time, lead, forecast_fields)?,
        ))
    });
    let mut analyses = Vec::with_capacity(config.steps);
    let mut forecasts = Vec::with_capacity(config.steps);
    for pair in pairs {
        let (a, f) = pair?;
        analyses.push(a);
        forecasts.push(f);
    }
    Ok((analyses, forecasts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn small() -> ScenarioConfig {
        ScenarioConfig { n_lat: 16, n_lon: 24, features: 2, steps: 6, ..ScenarioConfig::default() }
    }

    #[test]
    fn grf_is_normalised_and_deterministic() {
        let g = Grid::global_cell_centred(32, 48).unwrap();
        let a = gaussian_random_field(&g, 2.5, 9).unwrap();
        assert_eq!(a, gaussian_random_field(&g, 2.5, 9).unwrap());
        assert_ne!(a, gaussian_random_field(&g, 2.5, 10).unwrap());
        assert_abs_diff_eq!(a.mean(), 0.0, epsilon = 1e-10);
        let var = a.values.iter().map(|v| v * v).sum::<f64>() / a.values.len() as f64;
        assert_abs_diff_eq!(var, 1.0, epsilon = 1e-10);
    }

    #[test]
    fn noiseless_unblurred_error_is_the_bias_pattern() {
        let cfg = ScenarioConfig { noise_std: 0.0, forecast_blur_sigma: 0.0, ..small() };
        let (an, fc) = synth_pair_series(&cfg).unwrap();
        let biases = bias_patterns(&cfg).unwrap();
        for (a, f) in an.iter().zip(&fc) {
            let e = f.sub(a).unwrap();
            for (ef, b) in e.fields.iter().zip(&biases) {
                for (x, y) in ef.values.iter().zip(&b.values) {
                    assert_abs_diff_eq!(x, y, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn series_is_reproducible_and_seed_sensitive() {
        let cfg = small();
        let a = synth_pair_series(&cfg).unwrap();
        assert_eq!(a, synth_pair_series(&cfg).unwrap());
        let other = ScenarioConfig { seed: cfg.seed + 1, ..cfg.clone() };
        assert_ne!(a.0, synth_pair_series(&other).unwrap().0);
    }

    #[test]
    fn times_and_leads() {
        let cfg = ScenarioConfig { lead_steps: 2, ..small() };
        let (an, fc) = synth_pair_series(&cfg).unwrap();
        assert_eq!(an.len(), 6);
        assert_eq!(fc[3].time, cfg.start + Duration::hours(18));
        assert_eq!(fc[0].lead_hours, 12);
        assert_eq!(an[0].lead_hours, 0);
    }

    #[test]
    fn config_validation() {
        assert!(ScenarioConfig { beta: 0.5, ..small() }.validate().is_err());
        assert!(ScenarioConfig { bias_amplitude: vec![-1.0], ..small() }.validate().is_err());
        assert!(ScenarioConfig { bias_amplitude: vec![1.0, 2.0, 3.0], ..small() }.validate().is_err());
        assert!(ScenarioConfig { bias_amplitude: vec![1.0, 2.0], ..small() }.validate().is_ok());
        let json = serde_json::to_string(&small()).unwrap();
        let back: ScenarioConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, small());
        let partial: ScenarioConfig = serde_json::from_str(r#"{"n_lat": 8, "n_lon": 8}"#).unwrap();
        assert_eq!(partial.features, 5);
        assert!(serde_json::from_str::<ScenarioConfig>(r#"{"grid": 3}"#).is_err());
    }

    #[test]
    fn feature_names_are_unique() {
        let cfg = ScenarioConfig { features: 20, ..small() };
        let specs = cfg.feature_specs();
        let mut labels: Vec<String> = specs.iter().map(|s| s.label()).collect();
        labels.sort();
        labels.dedup();
        assert_eq!(labels.len(), 20);
    }
}
