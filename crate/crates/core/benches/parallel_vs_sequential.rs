//! Single-worker versus full-pool timings of the data-parallel kernels.
//! Build with `--no-default-features` to time the rayon-free code path.

use chrono::{Duration, TimeZone, Utc};
use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gridpp_core::baselines::{self, MosSample};
use gridpp_core::nn::{self, ModelConfig, Sample, TrainOptions};
use gridpp_core::predictors::FeatureTensor;
use gridpp_core::store::{FeatureSpec, FieldSet};
use gridpp_core::verification::{self, Climatology};
use gridpp_core::{grid, par, Field, Grid};

fn random_field(grid: Grid, rng: &mut ChaCha8Rng) -> Field {
    Field::new(grid, (0..grid.len()).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn single(grid: Grid, i: i64, field: Field) -> FieldSet {
    let time = Utc.with_ymd_and_hms(2021, 1, 1, 0, 0, 0).unwrap() + Duration::hours(6 * i);
    FieldSet::new(vec![FeatureSpec::new("t", "850", "K")], grid, time, 6, vec![field]).unwrap()
}

/// Times `f` on a single worker and on the default pool (all cores).
fn compare(c: &mut Criterion, name: &str, f: impl Fn() + Send + Sync) {
    let mut group = c.benchmark_group(name);
    group.sample_size(10);
    group.bench_function("single_worker", |b| par::with_threads(1, || b.iter(&f)));
    group.bench_function("default_pool", |b| b.iter(&f));
    group.finish();
}

fn blur(c: &mut Criterion) {
    let grid = Grid::global_cell_centred(256, 512).unwrap();
    let field = random_field(grid, &mut ChaCha8Rng::seed_from_u64(1));
    compare(c, "gaussian_blur_256x512", || {
        grid::gaussian_blur(&field, 2.0).unwrap();
    });
}

fn spectrum(c: &mut Criterion) {
    let grid = Grid::global_cell_centred(256, 512).unwrap();
    let field = random_field(grid, &mut ChaCha8Rng::seed_from_u64(2));
    compare(c, "radial_spectrum_256x512", || {
        verification::radial_power_spectrum(&field);
    });
}

fn mos_fit(c: &mut Criterion) {
    let grid = Grid::global_cell_centred(64, 128).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let sets: Vec<[FieldSet; 3]> = (0..30)
        .map(|i| std::array::from_fn(|_| single(grid, i, random_field(grid, &mut rng))))
        .collect();
    let climatology = Climatology::static_mean(&[single(grid, 0, random_field(grid, &mut rng))]).unwrap();
    let history: Vec<MosSample> =
        sets.iter().map(|[e, b, f]| MosSample { error: e, bias: b, forecast: f }).collect();
    compare(c, "linear_mos_fit_64x128x30", || {
        baselines::linear_mos_fit(&history, &climatology).unwrap();
    });
}

fn train_epoch(c: &mut Criterion) {
    let grid = Grid::global_cell_centred(64, 64).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n_in = 8;
    let data: Vec<Sample> = (0..2)
        .map(|i| {
            let x: Vec<f64> = (0..grid.len() * n_in).map(|_| rng.gen_range(-1.0..1.0)).collect();
            Sample {
                features: FeatureTensor::new(grid, n_in, x).unwrap(),
                target: single(grid, i, random_field(grid, &mut rng)),
            }
        })
        .collect();
    let config = ModelConfig::new(n_in, 1);
    let options = TrainOptions { epochs: 1, ..TrainOptions::default() };
    compare(c, "train_one_epoch_64x64", || {
        nn::train(&config, &data, &options).unwrap();
    });
}

criterion_group!(benches, blur, spectrum, mos_fit, train_epoch);
criterion_main!(benches);
