//! Verification: RMSE, anomaly correlation, fractions skill score,
//! climatology, paired significance, skill cards and the calibrated
//! log-spectral sharpness score.

use std::collections::BTreeMap;
use std::fmt;

use chrono::{DateTime, Utc};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::grid::{self, Field, Grid, WeightField};
use crate::par;
use crate::predictors::day_of_year;
use crate::store::{FeatureSpec, FieldSet};

/// Half-width, in days, of the climatology smoothing window.
pub const CLIMATOLOGY_HALF_WINDOW: u32 = 7;
/// Powers below this are floored before taking logs.
pub const POWER_FLOOR: f64 = 1e-30;

#[derive(Debug, Clone, PartialEq)]
enum ClimatologyKind {
    /// Per day-of-year raster sums and sample counts.
    Seasonal { day_sums: BTreeMap<u32, (Vec<Vec<f64>>, usize)>, half_window: u32 },
    Static(Vec<Vec<f64>>),
}

/// Expected value per feature, gridpoint and day of year.
#[derive(Debug, Clone, PartialEq)]
pub struct Climatology {
    pub features: Vec<FeatureSpec>,
    pub grid: Grid,
    kind: ClimatologyKind,
}

fn cyclic_day_distance(a: u32, b: u32) -> u32 {
    let d = a.abs_diff(b);
    d.min(366 - d)
}

impl Climatology {
    /// A time-invariant climatology equal to `set`.
    pub fn from_field_set(set: &FieldSet) -> Self {
        Climatology {
            features: set.features.clone(),
            grid: set.grid,
            kind: ClimatologyKind::Static(set.fields.iter().map(|f| f.values.clone()).collect()),
        }
    }

    /// Time-invariant sample mean of a series; for records shorter than a year.
    pub fn static_mean(series: &[FieldSet]) -> Result<Self> {
        let first = series
            .first()
            .ok_or_else(|| Error::InsufficientData("empty analysis series".into()))?;
        let mut sums: Vec<Vec<f64>> = first.fields.iter().map(|f| vec![0.0; f.values.len()]).collect();
        for s in series {
            first.ensure_compatible(s)?;
            for (acc, f) in sums.iter_mut().zip(&s.fields) {
                acc.iter_mut().zip(&f.values).for_each(|(a, v)| *a += v);
            }
        }
        let n = series.len() as f64;
        sums.iter_mut().for_each(|r| r.iter_mut().for_each(|v| *v /= n));
        Ok(Climatology {
            features: first.features.clone(),
            grid: first.grid,
            kind: ClimatologyKind::Static(sums),
        })
    }

    /// Climatology raster set valid at `time`.
    pub fn for_time(&self, time: DateTime<Utc>) -> Result<FieldSet> {
        let rasters = match &self.kind {
            ClimatologyKind::Static(r) => r.clone(),
            ClimatologyKind::Seasonal { day_sums, half_window } => {
                let day = day_of_year(time);
                let mut acc: Option<Vec<Vec<f64>>> = None;
                let mut count = 0usize;
                for (d, (sums, n)) in day_sums {
                    if cyclic_day_distance(*d, day) > *half_window {
                        continue;
                    }
                    count += n;
                    match acc.as_mut() {
                        None => acc = Some(sums.clone()),
                        Some(a) => a.iter_mut().zip(sums).for_each(|(x, y)| {
                            x.iter_mut().zip(y).for_each(|(p, q)| *p += q)
                        }),
                    }
                }
                let mut acc = acc.ok_or(Error::MissingClimatology(day))?;
                let n = count as f64;
                acc.iter_mut().for_each(|r| r.iter_mut().for_each(|v| *v /= n));
                acc
            }
        };
        let fields = rasters.into_iter().map(|values| Field { grid: self.grid, values }).collect();
        FieldSet::new(self.features.clone(), self.grid, time, 0, fields)
    }
}

/// Day-of-year climatology with a +/-7 day window. Every day 1..=366 must
/// have at least one sample inside its window.
pub fn build_climatology(analyses: &[FieldSet]) -> Result<Climatology> {
    let first = analyses
        .first()
        .ok_or_else(|| Error::InsufficientData("empty analysis series".into()))?;
    let mut day_sums: BTreeMap<u32, (Vec<Vec<f64>>, usize)> = BTreeMap::new();
    for a in analyses {
        first.ensure_compatible(a)?;
        let entry = day_sums.entry(day_of_year(a.time)).or_insert_with(|| {
            (a.fields.iter().map(|f| vec![0.0; f.values.len()]).collect(), 0)
        });
        for (acc, f) in entry.0.iter_mut().zip(&a.fields) {
            acc.iter_mut().zip(&f.values).for_each(|(x, v)| *x += v);
        }
        entry.1 += 1;
    }
    let half_window = CLIMATOLOGY_HALF_WINDOW;
    if let Some(day) = (1..=366u32)
        .find(|d| !day_sums.keys().any(|k| cyclic_day_distance(*k, *d) <= half_window))
    {
        return Err(Error::InsufficientData(format!(
            "no analyses within {half_window} days of day-of-year {day}; a full year is required"
        )));
    }
    Ok(Climatology {
        features: first.features.clone(),
        grid: first.grid,
        kind: ClimatologyKind::Seasonal { day_sums, half_window },
    })
}

fn weights_for<'a>(grid: &Grid, weights: Option<&'a WeightField>) -> Result<std::borrow::Cow<'a, [f64]>> {
    match weights {
        Some(w) if w.grid != *grid => Err(Error::ShapeMismatch("weights on a different grid".into())),
        Some(w) => Ok(std::borrow::Cow::Borrowed(&w.values)),
        None => Ok(std::borrow::Cow::Owned(vec![1.0; grid.len()])),
    }
}

/// Weighted RMSE of a single raster pair.
pub fn rmse_field(candidate: &Field, truth: &Field, weights: Option<&WeightField>) -> Result<f64> {
    candidate.ensure_same_grid(truth)?;
    let w = weights_for(&candidate.grid, weights)?;
    let (mut num, mut den) = (0.0, 0.0);
    for ((c, t), w) in candidate.values.iter().zip(&truth.values).zip(w.iter()) {
        num += w * (c - t) * (c - t);
        den += w;
    }
    if den <= 0.0 {
        return Err(Error::arg("weights", "sum to zero"));
    }
    Ok((num / den).sqrt())
}

/// `sqrt(sum w (c - t)^2 / sum w)` per feature.
pub fn rmse(candidate: &FieldSet, truth: &FieldSet, weights: Option<&WeightField>) -> Result<Vec<f64>> {
    candidate.ensure_compatible(truth)?;
    candidate.fields.iter().zip(&truth.fields).map(|(c, t)| rmse_field(c, t, weights)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AccScore {
    pub value: f64,
    /// Set when either anomaly field has zero weighted variance; `value` is 0.
    pub degenerate: bool,
}

/// Weighted Pearson correlation of two anomaly rasters.
pub fn weighted_correlation(a: &[f64], b: &[f64], w: &[f64]) -> AccScore {
    let sw: f64 = w.iter().sum();
    let ma = a.iter().zip(w).map(|(x, w)| w * x).sum::<f64>() / sw;
    let mb = b.iter().zip(w).map(|(x, w)| w * x).sum::<f64>() / sw;
    let (mut cov, mut va, mut vb, mut sa, mut sb) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for ((x, y), w) in a.iter().zip(b).zip(w) {
        let (dx, dy) = (x - ma, y - mb);
        cov += w * dx * dy;
        va += w * dx * dx;
        vb += w * dy * dy;
        sa += w * x * x;
        sb += w * y * y;
    }
    // variance indistinguishable from rounding noise of the raw second moment
    let tiny = |v: f64, s: f64| v <= 1e-28 * s.max(f64::MIN_POSITIVE) || v == 0.0;
    if tiny(va, sa) || tiny(vb, sb) {
        return AccScore { value: 0.0, degenerate: true };
    }
    AccScore { value: (cov / (va * vb).sqrt()).clamp(-1.0, 1.0), degenerate: false }
}

/// Anomaly correlation per feature against the climatology valid at `valid_time`.
pub fn acc(
    candidate: &FieldSet,
    truth: &FieldSet,
    climatology: &Climatology,
    valid_time: DateTime<Utc>,
    weights: Option<&WeightField>,
) -> Result<Vec<AccScore>> {
    candidate.ensure_compatible(truth)?;
    let clim = climatology.for_time(valid_time)?;
    candidate.ensure_compatible(&clim)?;
    let w = weights_for(&candidate.grid, weights)?;
    Ok((0..candidate.n_features())
        .map(|i| {
            let cl = &clim.fields[i].values;
            let a: Vec<f64> = candidate.fields[i].values.iter().zip(cl).map(|(x, c)| x - c).collect();
            let b: Vec<f64> = truth.fields[i].values.iter().zip(cl).map(|(x, c)| x - c).collect();
            weighted_correlation(&a, &b, &w)
        })
        .collect())
}

/// Fractions skill score of exceedances `>= threshold` at `window` cells.
pub fn fss(candidate: &Field, truth: &Field, threshold: f64, window: usize) -> Result<f64> {
    candidate.ensure_same_grid(truth)?;
    let binarize = |f: &Field| Field {
        grid: f.grid,
        values: f.values.iter().map(|v| if *v >= threshold { 1.0 } else { 0.0 }).collect(),
    };
    let fc = grid::neighborhood_mean(&binarize(candidate), window)?;
    let ft = grid::neighborhood_mean(&binarize(truth), window)?;
    let n = fc.values.len() as f64;
    let mse = fc.values.iter().zip(&ft.values).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
    let reference = (fc.values.iter().map(|a| a * a).sum::<f64>()
        + ft.values.iter().map(|b| b * b).sum::<f64>())
        / n;
    if reference == 0.0 {
        return Ok(1.0);
    }
    Ok((1.0 - mse / reference).clamp(0.0, 1.0))
}

/// Radially binned power spectrum of a raster.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    /// `bins[k - 1]` is the mean power over cells with rounded radius `k`.
    pub bins: Vec<f64>,
    pub counts: Vec<usize>,
    /// Power of the zero-wavenumber cell.
    pub dc: f64,
}

impl Spectrum {
    pub fn bin_count(&self) -> usize {
        self.bins.len()
    }

    /// Total power per bin (mean times cell count).
    pub fn bin_totals(&self) -> Vec<f64> {
        self.bins.iter().zip(&self.counts).map(|(p, n)| p * *n as f64).collect()
    }

    /// `bin,wavenumber,power` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin,wavenumber,power\n");
        for (i, p) in self.bins.iter().enumerate() {
            out.push_str(&format!("{},{},{:e}\n", i, i + 1, p));
        }
        out
    }
}

/// Unitary 2-D DFT of a row-major raster.
pub fn fft2(values: &[f64], rows: usize, cols: usize) -> Vec<Complex<f64>> {
    let mut planner = FftPlanner::new();
    let row_fft = planner.plan_fft_forward(cols);
    let col_fft = planner.plan_fft_forward(rows);
    let mut data: Vec<Complex<f64>> = values.iter().map(|v| Complex::new(*v, 0.0)).collect();
    par::for_each_chunk_mut(&mut data, cols, |_, row| row_fft.process(row));
    let mut transposed = vec![Complex::new(0.0, 0.0); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            transposed[c * rows + r] = data[r * cols + c];
        }
    }
    par::for_each_chunk_mut(&mut transposed, rows, |_, col| col_fft.process(col));
    let scale = 1.0 / ((rows * cols) as f64).sqrt();
    let mut out = vec![Complex::new(0.0, 0.0); rows * cols];
    for c in 0..cols {
        for r in 0..rows {
            out[r * cols + c] = transposed[c * rows + r] * scale;
        }
    }
    out
}

/// Signed integer wavenumber of DFT index `i` on an axis of length `n`.
pub(crate) fn signed_wavenumber(i: usize, n: usize) -> f64 {
    if i <= n / 2 {
        i as f64
    } else {
        i as f64 - n as f64
    }
}

/// Power `|F(k)|^2 / (n_lat n_lon)` of the unnormalised transform (so a
/// constant field `c` has `dc = c^2` and the powers sum to the mean square),
/// averaged in annuli of integer radius `1..=floor(min(n_lat, n_lon) / 2)`.
pub fn radial_power_spectrum(field: &Field) -> Spectrum {
    let (rows, cols) = field.grid.shape();
    let transform = fft2(&field.values, rows, cols);
    let n_bins = rows.min(cols) / 2;
    let scale = 1.0 / (rows * cols) as f64;
    let mut sums = vec![0.0; n_bins];
    let mut counts = vec![0usize; n_bins];
    for r in 0..rows {
        let ky = signed_wavenumber(r, rows);
        for c in 0..cols {
            let kx = signed_wavenumber(c, cols);
            let k = (kx * kx + ky * ky).sqrt().round() as usize;
            if k == 0 || k > n_bins {
                continue;
            }
            sums[k - 1] += transform[r * cols + c].norm_sqr() * scale;
            counts[k - 1] += 1;
        }
    }
    let bins = sums.iter().zip(&counts).map(|(s, n)| if *n > 0 { s / *n as f64 } else { 0.0 }).collect();
    Spectrum { bins, counts, dc: transform[0].norm_sqr() * scale, }
}

/// Mean over radial bins of `ln S(P)/B(P) - ln S(O)/B(O)`, with `B` the log of
/// the zero-wavenumber power. Bins where either power hits the floor are skipped.
pub fn log_spectral_distance(p: &Field, o: &Field) -> Result<f64> {
    p.ensure_same_grid(o)?;
    spectral_distance(&radial_power_spectrum(p), &radial_power_spectrum(o))
}

fn spectral_distance(sp: &Spectrum, so: &Spectrum) -> Result<f64> {
    let bias = |s: &Spectrum| -> Result<f64> {
        let b = s.dc.max(POWER_FLOOR).ln();
        if b.abs() < 1e-12 {
            return Err(Error::DegenerateBias);
        }
        Ok(b)
    };
    let (bp, bo) = (bias(sp)?, bias(so)?);
    let mut total = 0.0;
    let mut used = 0usize;
    for (pp, po) in sp.bins.iter().zip(&so.bins) {
        if *pp < POWER_FLOOR || *po < POWER_FLOOR {
            continue;
        }
        total += pp.ln() / bp - po.ln() / bo;
        used += 1;
    }
    if used == 0 {
        return Err(Error::SpectrallyEmpty);
    }
    Ok(total / used as f64)
}

/// Calibrated log spectral distance score of `p` against base `o`:
/// 0 for the base itself, 1 for the base blurred with `sigma_ref`, positive
/// when `p` is blurrier than `o`.
pub fn clsds(p: &Field, o: &Field, sigma_ref: f64) -> Result<f64> {
    p.ensure_same_grid(o)?;
    let so = radial_power_spectrum(o);
    let reference = grid::gaussian_blur(o, sigma_ref)?;
    let denom = spectral_distance(&radial_power_spectrum(&reference), &so)?;
    if denom.abs() < 1e-12 {
        return Err(Error::ReferenceBlurIndistinguishable);
    }
    Ok(spectral_distance(&radial_power_spectrum(p), &so)? / denom)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SignificanceLevel {
    #[serde(rename = "99%")]
    P99,
    #[serde(rename = "95%")]
    P95,
    #[serde(rename = "not sig")]
    NotSignificant,
}

impl SignificanceLevel {
    pub fn from_p(p: f64) -> Self {
        if p < 0.01 {
            SignificanceLevel::P99
        } else if p < 0.05 {
            SignificanceLevel::P95
        } else {
            SignificanceLevel::NotSignificant
        }
    }
}

impl fmt::Display for SignificanceLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SignificanceLevel::P99 => "99%",
            SignificanceLevel::P95 => "95%",
            SignificanceLevel::NotSignificant => "not sig",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Significance {
    pub mean: f64,
    pub t_stat: f64,
    pub p_value: f64,
    pub level: SignificanceLevel,
}

/// Two-tailed one-sample t-test of paired differences against zero.
pub fn paired_significance(differences: &[f64]) -> Result<Significance> {
    let n = differences.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!("t-test needs >= 2 differences, got {n}")));
    }
    let nf = n as f64;
    let mean = differences.iter().sum::<f64>() / nf;
    let var = differences.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (nf - 1.0);
    let scale = differences.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    let (t_stat, p_value) = if var <= (1e-14 * scale).powi(2) {
        if mean == 0.0 || scale == 0.0 {
            (0.0, 1.0)
        } else {
            (mean.signum() * f64::INFINITY, 0.0)
        }
    } else {
        let t = mean / (var / nf).sqrt();
        let dist = StudentsT::new(0.0, 1.0, nf - 1.0).expect("df >= 1");
        (t, (2.0 * dist.sf(t.abs())).clamp(0.0, 1.0))
    };
    Ok(Significance { mean, t_stat, p_value, level: SignificanceLevel::from_p(p_value) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SkillMetric {
    Rmse,
    Acc,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkillRow {
    pub variable: String,
    pub level: String,
    /// Mean metric of the candidate.
    pub metric_a: f64,
    /// Mean metric of the baseline.
    pub metric_b: f64,
    /// Mean per-step difference, positive when the candidate is better.
    pub diff: f64,
    pub p_value: f64,
    pub significance: SignificanceLevel,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkillCard {
    pub metric: SkillMetric,
    pub steps: usize,
    pub rows: Vec<SkillRow>,
}

impl SkillCard {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variable,level,metric_a,metric_b,diff,p_value,significance\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.9e},{:.9e},{:.9e},{:.9e},{}\n",
                r.variable, r.level, r.metric_a, r.metric_b, r.diff, r.p_value, r.significance
            ));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Paired comparison of two aligned runs against the same truth series.
pub fn skill_card(
    candidate: &[FieldSet],
    baseline: &[FieldSet],
    truth: &[FieldSet],
    metric: SkillMetric,
    climatology: Option<&Climatology>,
    weights: Option<&WeightField>,
) -> Result<SkillCard> {
    if candidate.len() != baseline.len() || candidate.len() != truth.len() {
        return Err(Error::ShapeMismatch(format!(
            "runs have {}, {} and {} time steps",
            candidate.len(),
            baseline.len(),
            truth.len()
        )));
    }
    let first = truth
        .first()
        .ok_or_else(|| Error::InsufficientData("skill card needs time steps".into()))?;
    for ((c, b), t) in candidate.iter().zip(baseline).zip(truth) {
        c.ensure_compatible(t)?;
        b.ensure_compatible(t)?;
        first.ensure_compatible(t)?;
        if c.time != t.time || b.time != t.time {
            return Err(Error::ShapeMismatch(format!("runs misaligned at {}", t.time)));
        }
    }
    if metric == SkillMetric::Acc && climatology.is_none() {
        return Err(Error::arg("climatology", "required for ACC skill cards"));
    }
    // per step, per feature scores for both runs
    let scores = |run: &[FieldSet]| -> Result<Vec<Vec<f64>>> {
        par::map_range(run.len(), |i| match metric {
            SkillMetric::Rmse => rmse(&run[i], &truth[i], weights),
            SkillMetric::Acc => acc(&run[i], &truth[i], climatology.expect("checked"), truth[i].time, weights)
                .map(|v| v.into_iter().map(|a| a.value).collect()),
        })
        .into_iter()
        .collect()
    };
    let a = scores(candidate)?;
    let b = scores(baseline)?;
    let rows = par::map_range(first.n_features(), |fi| {
        let diffs: Vec<f64> = a
            .iter()
            .zip(&b)
            .map(|(sa, sb)| match metric {
                SkillMetric::Rmse => sb[fi] - sa[fi],
                SkillMetric::Acc => sa[fi] - sb[fi],
            })
            .collect();
        let n = a.len() as f64;
        let sig = paired_significance(&diffs)?;
        Ok(SkillRow {
            variable: first.features[fi].variable.clone(),
            level: first.features[fi].level.clone(),
            metric_a: a.iter().map(|s| s[fi]).sum::<f64>() / n,
            metric_b: b.iter().map(|s| s[fi]).sum::<f64>() / n,
            diff: sig.mean,
            p_value: sig.p_value,
            significance: sig.level,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(SkillCard { metric, steps: candidate.len(), rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use chrono::TimeZone;

    fn grid(r: usize, c: usize) -> Grid {
        Grid::global_cell_centred(r, c).unwrap()
    }

    fn one_feature(field: Field, time: DateTime<Utc>) -> FieldSet {
        FieldSet::new(vec![FeatureSpec::new("x", "sfc", "1")], field.grid, time, 0, vec![field]).unwrap()
    }

    fn t0() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2021, 3, 1, 0, 0, 0).unwrap()
    }

    #[test]
    fn rmse_basic_cases() {
        let g = grid(4, 4);
        let a = Field::from_fn(g, |r, c| (r * 4 + c) as f64);
        let b = Field::from_fn(g, |r, c| (r * 4 + c) as f64 + 1.5);
        assert_eq!(rmse_field(&a, &a, None).unwrap(), 0.0);
        let w = grid::cos_lat_weights(&g);
        assert_abs_diff_eq!(rmse_field(&a, &b, None).unwrap(), 1.5, epsilon = 1e-15);
        assert_abs_diff_eq!(rmse_field(&a, &b, Some(&w)).unwrap(), 1.5, epsilon = 1e-15);
    }

    #[test]
    fn acc_signs_and_degeneracy() {
        let g = grid(4, 4);
        let clim = one_feature(Field::filled(g, 10.0), t0());
        let c = Climatology::from_field_set(&clim);
        let truth = one_feature(Field::from_fn(g, |r, c| 10.0 + ((r * 7 + c * 3) % 5) as f64), t0());
        let same = acc(&truth, &truth, &c, t0(), None).unwrap()[0];
        assert_abs_diff_eq!(same.value, 1.0, epsilon = 1e-12);
        let flipped = truth.map_fields(|_, f| Field { grid: g, values: f.values.iter().map(|v| 20.0 - v).collect() });
        assert_abs_diff_eq!(acc(&flipped, &truth, &c, t0(), None).unwrap()[0].value, -1.0, epsilon = 1e-12);
        let flat = one_feature(Field::filled(g, 11.0), t0());
        let d = acc(&flat, &truth, &c, t0(), None).unwrap()[0];
        assert!(d.degenerate);
        assert_eq!(d.value, 0.0);
    }

    #[test]
    fn fss_cases() {
        let g = grid(8, 8);
        let mut a = Field::zeros(g);
        let mut b = Field::zeros(g);
        a.set(2, 2, 1.0);
        b.set(5, 6, 1.0);
        assert_eq!(fss(&a, &a, 0.5, 3).unwrap(), 1.0);
        assert_eq!(fss(&a, &b, 0.5, 1).unwrap(), 0.0);
        let empty = Field::zeros(g);
        assert_eq!(fss(&empty, &empty, 0.5, 5).unwrap(), 1.0);
        assert!(fss(&a, &b, 0.5, 4).is_err());
    }

    #[test]
    fn constant_field_spectrum_is_pure_dc() {
        let s = radial_power_spectrum(&Field::filled(grid(16, 16), 3.0));
        assert_abs_diff_eq!(s.dc, 9.0, epsilon = 1e-12);
        assert_eq!(s.bin_count(), 8);
        assert!(s.bins.iter().all(|p| p.abs() < 1e-24));
    }

    #[test]
    fn spectral_distance_identity_and_asymmetry() {
        let g = grid(16, 16);
        let o = Field::from_fn(g, |r, c| 5.0 + ((r * 5 + c * 3) % 7) as f64 * 0.3);
        assert_eq!(log_spectral_distance(&o, &o).unwrap(), 0.0);
        assert_eq!(clsds(&o, &o, 1.0).unwrap(), 0.0);
        let p = grid::gaussian_blur(&o, 1.0).unwrap();
        assert_abs_diff_eq!(clsds(&p, &o, 1.0).unwrap(), 1.0, epsilon = 1e-12);
        // the raw distance is antisymmetric, the calibrated score is not
        let shifted = Field { grid: g, values: o.values.iter().map(|v| v * 2.0).collect() };
        let ab = log_spectral_distance(&shifted, &o).unwrap();
        let ba = log_spectral_distance(&o, &shifted).unwrap();
        assert_abs_diff_eq!(ab + ba, 0.0, epsilon = 1e-12);
        let sharp_vs_blur = clsds(&o, &p, 1.0).unwrap();
        let blur_vs_sharp = clsds(&p, &o, 1.0).unwrap();
        assert!((sharp_vs_blur + blur_vs_sharp).abs() > 1e-6);
    }

    #[test]
    fn spectrally_empty_and_degenerate_inputs() {
        let g = grid(8, 8);
        let zero = Field::zeros(g);
        let o = Field::from_fn(g, |r, c| 3.0 + (r * c % 3) as f64);
        assert!(matches!(log_spectral_distance(&zero, &o), Err(Error::SpectrallyEmpty)));
        let unit_dc = Field::from_fn(g, |r, c| 1.0 + if (r + c) % 2 == 0 { 0.5 } else { -0.5 });
        assert!(matches!(log_spectral_distance(&unit_dc, &o), Err(Error::DegenerateBias)));
        let flat = Field::filled(g, 4.0);
        assert!(matches!(clsds(&o, &flat, 1.0), Err(Error::SpectrallyEmpty)));
    }

    #[test]
    fn significance_edge_rules() {
        let s = paired_significance(&[0.0; 6]).unwrap();
        assert_eq!((s.p_value, s.level), (1.0, SignificanceLevel::NotSignificant));
        let s = paired_significance(&[0.25; 6]).unwrap();
        assert_eq!((s.p_value, s.level), (0.0, SignificanceLevel::P99));
        assert!(paired_significance(&[1.0]).is_err());
        assert_eq!(SignificanceLevel::from_p(0.03), SignificanceLevel::P95);
        assert_eq!(SignificanceLevel::from_p(0.05), SignificanceLevel::NotSignificant);
    }

    #[test]
    fn significance_scale_invariant() {
        let d = [0.3, -0.1, 0.25, 0.4, 0.05, 0.2, -0.05, 0.33];
        let base = paired_significance(&d).unwrap();
        for k in [1e-3, 0.5, 7.0, 1e4] {
            let scaled: Vec<f64> = d.iter().map(|x| x * k).collect();
            let s = paired_significance(&scaled).unwrap();
            assert_eq!(s.level, base.level);
            assert_abs_diff_eq!(s.p_value, base.p_value, epsilon = 1e-12);
        }
    }

    #[test]
    fn climatology_requires_a_year() {
        let g = grid(2, 2);
        let one = [one_feature(Field::filled(g, 1.0), t0())];
        assert!(matches!(build_climatology(&one), Err(Error::InsufficientData(_))));
        assert!(build_climatology(&[]).is_err());
    }

    #[test]
    fn skill_card_identical_runs_not_significant() {
        let g = grid(4, 4);
        let truth: Vec<_> = (0..5)
            .map(|k| one_feature(Field::from_fn(g, |r, c| (r + c + k) as f64), t0() + chrono::Duration::hours(6 * k as i64)))
            .collect();
        let run: Vec<_> = truth.iter().map(|t| t.map_fields(|_, f| Field { grid: g, values: f.values.iter().map(|v| v + 0.5).collect() })).collect();
        let card = skill_card(&run, &run, &truth, SkillMetric::Rmse, None, None).unwrap();
        assert_eq!(card.rows.len(), 1);
        assert_eq!(card.rows[0].diff, 0.0);
        assert_eq!(card.rows[0].significance, SignificanceLevel::NotSignificant);
        assert!(skill_card(&run[..4], &run, &truth, SkillMetric::Rmse, None, None).is_err());
        assert!(skill_card(&run, &run, &truth, SkillMetric::Acc, None, None).is_err());
        let csv = card.to_csv();
        assert!(csv.starts_with("variable,level,metric_a,metric_b,diff,p_value,significance\n"));
    }
}
