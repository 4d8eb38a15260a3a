//! Glue between the stages: pairing forecasts with verifying analyses,
//! lead-aware bias series, training samples and per-lead evaluation tables.

use std::collections::BTreeMap;

use chrono::{DateTime, Duration, Utc};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{self, WeightField};
use crate::nn::Sample;
use crate::predictors::{self, FeatureTensor};
use crate::store::FieldSet;
use crate::verification::{self, Climatology};

/// Bias-estimation settings shared by every stage that needs `B_N`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasOptions {
    pub w: f64,
    pub lags: usize,
}

impl Default for BiasOptions {
    fn default() -> Self {
        BiasOptions { w: predictors::DEFAULT_DECAY_W, lags: predictors::DEFAULT_LAGS }
    }
}

fn by_time(series: &[FieldSet]) -> BTreeMap<DateTime<Utc>, &FieldSet> {
    series.iter().map(|s| (s.time, s)).collect()
}

/// Forecast errors for every forecast with a verifying analysis, in forecast order.
pub fn forecast_errors(forecasts: &[FieldSet], analyses: &[FieldSet]) -> Result<Vec<FieldSet>> {
    let index = by_time(analyses);
    forecasts
        .iter()
        .filter_map(|f| index.get(&f.time).map(|a| predictors::forecast_error(f, a)))
        .collect()
}

/// Decay bias available when `forecast` was issued: only errors of
/// forecasts valid at or before the issue time are used, newest first, at
/// most `lags + 1` of them. `None` when no such error exists yet.
pub fn bias_at_issue(errors: &[FieldSet], forecast: &FieldSet, options: BiasOptions) -> Result<Option<FieldSet>> {
    let issue = issue_time(forecast);
    let mut known: Vec<&FieldSet> = errors.iter().filter(|e| e.time <= issue).collect();
    if known.is_empty() {
        return Ok(None);
    }
    known.sort_by_key(|e| std::cmp::Reverse(e.time));
    known.truncate(options.lags + 1);
    let owned: Vec<FieldSet> = known.into_iter().cloned().collect();
    let mut b = predictors::decay_bias(&owned, options.w)?;
    b.time = forecast.time;
    b.lead_hours = forecast.lead_hours;
    Ok(Some(b))
}

pub fn issue_time(forecast: &FieldSet) -> DateTime<Utc> {
    forecast.time - Duration::hours(forecast.lead_hours as i64)
}

/// Everything known about one forecast case.
#[derive(Debug, Clone)]
pub struct Case {
    pub forecast: FieldSet,
    /// Verifying analysis at the valid time.
    pub truth: FieldSet,
    pub bias: FieldSet,
    pub features: FeatureTensor,
}

impl Case {
    pub fn error(&self) -> Result<FieldSet> {
        self.forecast.sub(&self.truth)
    }

    pub fn sample(&self) -> Result<Sample> {
        Ok(Sample { features: self.features.clone(), target: self.error()? })
    }
}

/// Cases for every forecast that has a verifying analysis, an analysis at
/// issue time and at least one earlier error for the bias.
pub fn build_cases(forecasts: &[FieldSet], analyses: &[FieldSet], options: BiasOptions) -> Result<Vec<Case>> {
    let index = by_time(analyses);
    let errors = forecast_errors(forecasts, analyses)?;
    let mut cases = Vec::new();
    for f in forecasts {
        let (Some(truth), Some(at_issue)) = (index.get(&f.time), index.get(&issue_time(f))) else {
            continue;
        };
        let Some(bias) = bias_at_issue(&errors, f, options)? else {
            continue;
        };
        let features = predictors::assemble_features(f, at_issue, &bias, f.time)?;
        cases.push(Case { forecast: f.clone(), truth: (*truth).clone(), bias, features });
    }
    Ok(cases)
}

/// Scores of one candidate field against its verifying analysis.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreRow {
    pub lead_hours: u32,
    pub variable: String,
    pub level: String,
    pub rmse: f64,
    pub acc: f64,
    pub fss: f64,
    pub clsds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub lat_weighted: bool,
    /// FSS threshold is this quantile of the verifying field.
    pub fss_quantile: f64,
    pub fss_window: usize,
    pub clsds_sigma: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { lat_weighted: true, fss_quantile: 0.9, fss_window: 5, clsds_sigma: 1.0 }
    }
}

fn quantile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Per-feature scores of `candidate` against `truth` at one valid time.
pub fn score(candidate: &FieldSet, truth: &FieldSet, climatology: &Climatology, options: EvalOptions) -> Result<Vec<ScoreRow>> {
    candidate.ensure_compatible(truth)?;
    let weights: Option<WeightField> = options.lat_weighted.then(|| grid::cos_lat_weights(&truth.grid));
    let rmse = verification::rmse(candidate, truth, weights.as_ref())?;
    let acc = verification::acc(candidate, truth, climatology, truth.time, weights.as_ref())?;
    candidate
        .fields
        .iter()
        .zip(&truth.fields)
        .enumerate()
        .map(|(f, (c, t))| {
            let threshold = quantile(&t.values, options.fss_quantile);
            Ok(ScoreRow {
                lead_hours: candidate.lead_hours,
                variable: truth.features[f].variable.clone(),
                level: truth.features[f].level.clone(),
                rmse: rmse[f],
                acc: acc[f].value,
                fss: verification::fss(c, t, threshold, options.fss_window)?,
                clsds: verification::clsds(c, t, options.clsds_sigma)?,
            })
        })
        .collect()
}

/// Mean scores per lead time and feature over all candidates with a verifying analysis.
pub fn evaluate(
    candidates: &[FieldSet],
    analyses: &[FieldSet],
    climatology: &Climatology,
    options: EvalOptions,
) -> Result<Vec<ScoreRow>> {
    let index = by_time(analyses);
    let mut groups: BTreeMap<(u32, usize), (ScoreRow, usize)> = BTreeMap::new();
    for c in candidates {
        let Some(truth) = index.get(&c.time) else { continue };
        for (f, row) in score(c, truth, climatology, options)?.into_iter().enumerate() {
            groups
                .entry((c.lead_hours, f))
                .and_modify(|(acc, n)| {
                    acc.rmse += row.rmse;
                    acc.acc += row.acc;
                    acc.fss += row.fss;
                    acc.clsds += row.clsds;
                    *n += 1;
                })
                .or_insert((row, 1));
        }
    }
    if groups.is_empty() {
        return Err(Error::InsufficientData("no candidate has a verifying analysis".into()));
    }
    Ok(groups
        .into_values()
        .map(|(mut r, n)| {
            let n = n as f64;
            r.rmse /= n;
            r.acc /= n;
            r.fss /= n;
            r.clsds /= n;
            r
        })
        .collect())
}

pub fn score_csv(rows: &[ScoreRow]) -> String {
    let mut out = String::from("lead_hours,variable,level,rmse,acc,fss,clsds\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.10e},{:.10e},{:.10e},{:.10e}\n",
            r.lead_hours, r.variable, r.level, r.rmse, r.acc, r.fss, r.clsds
        ));
    }
    out
}
