//! Invariants and independent oracles for the grid, predictor, verification,
//! baseline and synthetic-data modules.

use approx::assert_abs_diff_eq;
use chrono::{DateTime, Duration, TimeZone, Utc};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gridpp_core::baselines::{self, MosSample};
use gridpp_core::grid::{self, LatBoundary, PadMode};
use gridpp_core::predictors::{self, BiasState};
use gridpp_core::store::{FeatureSpec, FieldSet};
use gridpp_core::synth::{self, ScenarioConfig};
use gridpp_core::verification::{self, Climatology};
use gridpp_core::{Field, Grid};

fn t0() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2021, 1, 1, 0, 0, 0).unwrap()
}

fn random_field(grid: Grid, rng: &mut ChaCha8Rng) -> Field {
    Field::new(grid, (0..grid.len()).map(|_| rng.gen_range(-5.0..5.0)).collect()).unwrap()
}

fn single(grid: Grid, time: DateTime<Utc>, field: Field) -> FieldSet {
    FieldSet::new(vec![FeatureSpec::new("t", "850", "K")], grid, time, 6, vec![field]).unwrap()
}

fn mean_and_var(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    (m, values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn untile_inverts_tile(n_lat in 2usize..40, n_lon in 2usize..40, extra in 0usize..64, seed in any::<u64>()) {
        let grid = Grid::global_cell_centred(n_lat, n_lon).unwrap();
        let max_tile = 2 * n_lat.max(n_lon);
        prop_assume!(max_tile >= 8);
        let tile = 8 + extra % (max_tile - 7);
        let field = random_field(grid, &mut ChaCha8Rng::seed_from_u64(seed));
        let tiles = grid::tile_field(&field, tile, PadMode::EdgeReplicate).unwrap();
        prop_assert_eq!(grid::untile(&tiles).unwrap(), field);
    }

    #[test]
    fn periodic_blur_conserves_mass_and_shrinks_variance(n_lat in 4usize..24, n_lon in 4usize..24, seed in any::<u64>()) {
        let grid = Grid::global_cell_centred(n_lat, n_lon).unwrap();
        let field = random_field(grid, &mut ChaCha8Rng::seed_from_u64(seed));
        let (m0, v0) = mean_and_var(&field.values);
        let mut last = v0;
        for sigma in [0.5, 1.0, 2.0, 4.0] {
            let b = grid::gaussian_blur_with(&field, sigma, LatBoundary::Periodic).unwrap();
            let (m, v) = mean_and_var(&b.values);
            prop_assert!((m - m0).abs() < 1e-12, "mean {} -> {}", m0, m);
            prop_assert!(v <= last * (1.0 + 1e-12), "variance rose from {} to {} at sigma {}", last, v, sigma);
            last = v;
        }
    }

    #[test]
    fn streaming_bias_equals_direct_form(len in 1usize..30, w in 0.01f64..0.99, seed in any::<u64>()) {
        let grid = Grid::global_cell_centred(2, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let oldest_first: Vec<FieldSet> = (0..len)
            .map(|i| single(grid, t0() + Duration::hours(6 * i as i64), random_field(grid, &mut rng)))
            .collect();
        let mut state = BiasState::new(w).unwrap();
        for e in &oldest_first {
            state.update(e).unwrap();
        }
        let newest_first: Vec<FieldSet> = oldest_first.iter().rev().cloned().collect();
        let direct = predictors::decay_bias(&newest_first, w).unwrap();
        let streamed = state.bias().unwrap();
        for (a, b) in direct.fields[0].values.iter().zip(&streamed.fields[0].values) {
            prop_assert!((a - b).abs() < 1e-10, "{} vs {}", a, b);
        }
    }
}

#[test]
fn solar_geometry_ranges_and_reference_agreement() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let start = Utc.with_ymd_and_hms(2000, 1, 1, 0, 0, 0).unwrap();
    let span = Utc.with_ymd_and_hms(2049, 12, 31, 0, 0, 0).unwrap().timestamp() - start.timestamp();
    let mut compared = 0;
    for _ in 0..10_000 {
        let time = start + Duration::seconds(rng.gen_range(0..span));
        let lat = rng.gen_range(-89.0..89.0);
        let lon = rng.gen_range(-180.0..180.0);
        let g = predictors::solar_position(time, lat, lon).unwrap();
        assert!((0.0..360.0).contains(&g.azimuth), "{g:?}");
        assert!((-90.0..=90.0).contains(&g.altitude), "{g:?}");
        let reference = spa::solar_position::<spa::StdFloatOps>(time, lat, lon).unwrap();
        let altitude = 90.0 - reference.zenith_angle;
        assert!((g.altitude - altitude).abs() < 0.5, "{time} {lat} {lon}: {} vs {altitude}", g.altitude);
        // azimuth is ill-conditioned near the zenith
        if altitude < 85.0 {
            let d = (g.azimuth - reference.azimuth).rem_euclid(360.0);
            assert!(d.min(360.0 - d) < 0.5, "{time} {lat} {lon}: {} vs {}", g.azimuth, reference.azimuth);
            compared += 1;
        }
    }
    assert!(compared > 9_000);
}

#[test]
fn spectrum_matches_direct_dft() {
    let (rows, cols) = (6, 10);
    let grid = Grid::global_cell_centred(rows, cols).unwrap();
    let field = random_field(grid, &mut ChaCha8Rng::seed_from_u64(4));
    let n = (rows * cols) as f64;
    let mut sums = vec![0.0; rows.min(cols) / 2];
    let mut counts = vec![0usize; sums.len()];
    let mut dc = 0.0;
    for ky in 0..rows {
        for kx in 0..cols {
            let (mut re, mut im) = (0.0, 0.0);
            for r in 0..rows {
                for c in 0..cols {
                    let phase = -2.0 * std::f64::consts::PI * (ky * r) as f64 / rows as f64
                        - 2.0 * std::f64::consts::PI * (kx * c) as f64 / cols as f64;
                    re += field.values[r * cols + c] * phase.cos();
                    im += field.values[r * cols + c] * phase.sin();
                }
            }
            let power = (re * re + im * im) / (n * n);
            let fy = if ky <= rows / 2 { ky as f64 } else { ky as f64 - rows as f64 };
            let fx = if kx <= cols / 2 { kx as f64 } else { kx as f64 - cols as f64 };
            let k = (fx * fx + fy * fy).sqrt().round() as usize;
            if k == 0 {
                dc = power;
            } else if k <= sums.len() {
                sums[k - 1] += power;
                counts[k - 1] += 1;
            }
        }
    }
    let s = verification::radial_power_spectrum(&field);
    assert_abs_diff_eq!(s.dc, dc, epsilon = 1e-12);
    assert_eq!(s.counts, counts);
    for (i, (a, b)) in s.bins.iter().zip(&sums).enumerate() {
        assert_abs_diff_eq!(*a, b / counts[i] as f64, epsilon = 1e-12);
    }
}

#[test]
fn random_field_spectral_slope() {
    let grid = Grid::global_cell_centred(128, 128).unwrap();
    for beta in [2.0, 3.0] {
        let f = synth::gaussian_random_field(&grid, beta, 9).unwrap();
        let s = verification::radial_power_spectrum(&f);
        let pts: Vec<(f64, f64)> = (2..=40).map(|k| ((k as f64).ln(), s.bins[k - 1].ln())).collect();
        let (mx, _) = mean_and_var(&pts.iter().map(|p| p.0).collect::<Vec<_>>());
        let my = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
        let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = pts.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
        let slope = sxy / sxx;
        assert!((slope + beta).abs() < 0.3, "beta {beta}: slope {slope}");
    }
}

#[test]
fn decay_bias_recovers_synthetic_pattern() {
    let config = ScenarioConfig { n_lat: 32, n_lon: 48, features: 2, steps: 50, ..ScenarioConfig::default() };
    let (analyses, forecasts) = synth::synth_pair_series(&config).unwrap();
    let patterns = synth::bias_patterns(&config).unwrap();
    let errors: Vec<FieldSet> =
        forecasts.iter().zip(&analyses).map(|(f, a)| predictors::forecast_error(f, a).unwrap()).collect();
    let newest_first: Vec<FieldSet> = errors.iter().rev().take(41).cloned().collect();
    let b = predictors::decay_bias(&newest_first, 0.05).unwrap();
    for (f, pattern) in patterns.iter().enumerate() {
        let rmse = verification::rmse_field(&b.fields[f], pattern, None).unwrap();
        assert!(rmse < 0.05, "feature {f}: rmse {rmse}");
    }
}

#[test]
fn linear_mos_recovers_exact_coefficients() {
    let grid = Grid::global_cell_centred(4, 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let coef: Vec<[f64; 3]> =
        (0..grid.len()).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
    let clim_field = random_field(grid, &mut rng);
    let climatology = Climatology::static_mean(&[single(grid, t0(), clim_field.clone())]).unwrap();
    let mut forecasts = Vec::new();
    let mut biases = Vec::new();
    let mut errors = Vec::new();
    for i in 0..12 {
        let time = t0() + Duration::hours(6 * i);
        let fc = random_field(grid, &mut rng);
        let bias = random_field(grid, &mut rng);
        let err: Vec<f64> = (0..grid.len())
            .map(|p| {
                let [a, b, c] = coef[p];
                a + b * bias.values[p] + c * (fc.values[p] - clim_field.values[p])
            })
            .collect();
        forecasts.push(single(grid, time, fc));
        biases.push(single(grid, time, bias));
        errors.push(single(grid, time, Field::new(grid, err).unwrap()));
    }
    let history: Vec<MosSample> = (0..12)
        .map(|i| MosSample { error: &errors[i], bias: &biases[i], forecast: &forecasts[i] })
        .collect();
    let model = baselines::linear_mos_fit(&history, &climatology).unwrap();
    for (fit, truth) in model.coefficients[0].iter().zip(&coef) {
        for k in 0..3 {
            assert_abs_diff_eq!(fit[k], truth[k], epsilon = 1e-8);
        }
    }
    let corrected = baselines::linear_mos_apply(&model, &forecasts[3], &biases[3], &climatology).unwrap();
    let truth = forecasts[3].sub(&errors[3]).unwrap();
    for (a, b) in corrected.fields[0].values.iter().zip(&truth.fields[0].values) {
        assert_abs_diff_eq!(a, b, epsilon = 1e-8);
    }
}

#[test]
fn seasonal_climatology_smooths_a_sinusoid() {
    let grid = Grid::global_cell_centred(2, 2).unwrap();
    let x = 2.0 * std::f64::consts::PI / 365.0;
    let amplitude = 3.0;
    let analyses: Vec<FieldSet> = (0..365)
        .map(|d| {
            let time = t0() + Duration::days(d);
            let v = amplitude * (x * (d + 1) as f64).sin();
            single(grid, time, Field::filled(grid, v))
        })
        .collect();
    let clim = verification::build_climatology(&analyses).unwrap();
    // a 15-day running mean of sin scales it by sin(15x/2) / (15 sin(x/2))
    let damping = (7.5 * x).sin() / (15.0 * (0.5 * x).sin());
    for day in 30..330 {
        let time = t0() + Duration::days(day - 1);
        let got = clim.for_time(time).unwrap().fields[0].values[0];
        assert_abs_diff_eq!(got, amplitude * damping * (x * day as f64).sin(), epsilon = 1e-9);
    }
}
