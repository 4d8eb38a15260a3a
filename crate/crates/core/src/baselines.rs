//! Reference correctors: decay-bias subtraction, Gaussian blur and a
//! per-gridpoint linear regression in the spirit of classic MOS.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{self, Field, Grid};
use crate::par;
use crate::store::{self, Container, ContainerKind, FeatureSpec, FieldSet, ManifestBlock};
use crate::verification::Climatology;

/// Blur width used by the blur baseline.
pub const DEFAULT_BLUR_SIGMA: f64 = 2.0;
/// Ridge penalty on the slope terms when the normal equations are singular.
pub const RIDGE_LAMBDA: f64 = 1e-8;

/// `forecast - bias`.
pub fn decay_subtract(forecast: &FieldSet, bias: &FieldSet) -> Result<FieldSet> {
    forecast.sub(bias)
}

/// Gaussian blur of every feature.
pub fn blur_baseline(forecast: &FieldSet, sigma: f64) -> Result<FieldSet> {
    let fields = forecast
        .fields
        .iter()
        .map(|f| grid::gaussian_blur(f, sigma))
        .collect::<Result<Vec<_>>>()?;
    FieldSet::new(forecast.features.clone(), forecast.grid, forecast.time, forecast.lead_hours, fields)
}

/// One training sample for the regression baseline.
#[derive(Debug, Clone, Copy)]
pub struct MosSample<'a> {
    pub error: &'a FieldSet,
    pub bias: &'a FieldSet,
    pub forecast: &'a FieldSet,
}

/// Per-gridpoint, per-feature error model `a + b * bias + c * (forecast - clim)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMosModel {
    pub features: Vec<FeatureSpec>,
    pub grid: Grid,
    /// `coefficients[feature][point] = [a, b, c]`.
    pub coefficients: Vec<Vec<[f64; 3]>>,
}

/// Solves the 3x3 symmetric system with Cholesky; `None` if not positive definite.
fn cholesky_solve3(m: &[[f64; 3]; 3], rhs: &[f64; 3]) -> Option<[f64; 3]> {
    let scale = m[0][0].abs().max(m[1][1].abs()).max(m[2][2].abs()).max(f64::MIN_POSITIVE);
    let mut l = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..=i {
            let mut s = m[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            if i == j {
                if s <= 1e-12 * scale {
                    return None;
                }
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    let mut y = [0.0; 3];
    for i in 0..3 {
        let mut s = rhs[i];
        for k in 0..i {
            s -= l[i][k] * y[k];
        }
        y[i] = s / l[i][i];
    }
    let mut x = [0.0; 3];
    for i in (0..3).rev() {
        let mut s = y[i];
        for k in i + 1..3 {
            s -= l[k][i] * x[k];
        }
        x[i] = s / l[i][i];
    }
    Some(x)
}

/// Ordinary least squares for one gridpoint; ridge on the slopes if singular.
pub(crate) fn fit_point(rows: &[[f64; 3]], targets: &[f64]) -> [f64; 3] {
    let mut xtx = [[0.0; 3]; 3];
    let mut xty = [0.0; 3];
    for (x, y) in rows.iter().zip(targets) {
        for i in 0..3 {
            xty[i] += x[i] * y;
            for j in 0..3 {
                xtx[i][j] += x[i] * x[j];
            }
        }
    }
    if let Some(beta) = cholesky_solve3(&xtx, &xty) {
        return beta;
    }
    let mut ridged = xtx;
    ridged[1][1] += RIDGE_LAMBDA;
    ridged[2][2] += RIDGE_LAMBDA;
    if let Some(beta) = cholesky_solve3(&ridged, &xty) {
        return beta;
    }
    // slopes unidentifiable even with the penalty: intercept-only fit
    let n = targets.len().max(1) as f64;
    [targets.iter().sum::<f64>() / n, 0.0, 0.0]
}

/// Fits the regression independently at every gridpoint and feature.
pub fn linear_mos_fit(history: &[MosSample<'_>], climatology: &Climatology) -> Result<LinearMosModel> {
    if history.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "linear model needs >= 3 samples, got {}",
            history.len()
        )));
    }
    let first = history[0].forecast;
    let clims = history
        .iter()
        .map(|s| {
            first.ensure_compatible(s.forecast)?;
            first.ensure_compatible(s.error)?;
            first.ensure_compatible(s.bias)?;
            let c = climatology.for_time(s.forecast.time)?;
            first.ensure_compatible(&c)?;
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    let n_points = first.grid.len();
    let coefficients = (0..first.n_features())
        .map(|fi| {
            par::map_range(n_points, |p| {
                let rows: Vec<[f64; 3]> = history
                    .iter()
                    .zip(&clims)
                    .map(|(s, c)| {
                        let fc = s.forecast.fields[fi].values[p];
                        [1.0, s.bias.fields[fi].values[p], fc - c.fields[fi].values[p]]
                    })
                    .collect();
                let targets: Vec<f64> = history.iter().map(|s| s.error.fields[fi].values[p]).collect();
                fit_point(&rows, &targets)
            })
        })
        .collect();
    Ok(LinearMosModel { features: first.features.clone(), grid: first.grid, coefficients })
}

/// `forecast - (a + b * bias + c * (forecast - clim))`.
pub fn linear_mos_apply(
    model: &LinearMosModel,
    forecast: &FieldSet,
    bias: &FieldSet,
    climatology: &Climatology,
) -> Result<FieldSet> {
    forecast.ensure_compatible(bias)?;
    if forecast.grid != model.grid || forecast.features != model.features {
        return Err(Error::ShapeMismatch("forecast does not match the fitted model".into()));
    }
    let clim = climatology.for_time(forecast.time)?;
    forecast.ensure_compatible(&clim)?;
    Ok(forecast.map_fields(|fi, f| Field {
        grid: f.grid,
        values: f
            .values
            .iter()
            .enumerate()
            .map(|(p, fc)| {
                let [a, b, c] = model.coefficients[fi][p];
                fc - (a + b * bias.fields[fi].values[p] + c * (fc - clim.fields[fi].values[p]))
            })
            .collect(),
    }))
}

impl LinearMosModel {
    /// Stores three rasters (a, b, c) per feature.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut rasters = Vec::with_capacity(3 * self.features.len());
        for coefs in &self.coefficients {
            for k in 0..3 {
                rasters.push(coefs.iter().map(|c| c[k]).collect());
            }
        }
        let c = Container {
            kind: ContainerKind::LinearMos,
            block: ManifestBlock {
                features: self.features.clone(),
                grid: self.grid,
                time: chrono::DateTime::UNIX_EPOCH,
                lead_hours: 0,
                extra: BTreeMap::new(),
            },
            rasters,
        };
        store::write_container(&c, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = store::read_container_kind(path, ContainerKind::LinearMos)?;
        let coefficients = c
            .rasters
            .chunks_exact(3)
            .map(|abc| (0..c.block.grid.len()).map(|p| [abc[0][p], abc[1][p], abc[2][p]]).collect())
            .collect();
        Ok(LinearMosModel { features: c.block.features, grid: c.block.grid, coefficients })
    }
}
