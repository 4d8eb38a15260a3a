use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use chrono::{DateTime, Utc};
use gridpp_core::baselines::{self, LinearMosModel, MosSample};
use gridpp_core::grid;
use gridpp_core::nn::{self, Corrector, LossKind, ModelConfig, Optimizer, Regime, TrainOptions};
use gridpp_core::pipeline::{self, BiasOptions, Case, EvalOptions};
use gridpp_core::predictors::BiasState;
use gridpp_core::store::{self, FeatureManifest, FieldSet};
use gridpp_core::synth::{self, ScenarioConfig};
use gridpp_core::verification::{self, Climatology, SkillMetric};

use crate::{
    BiasArgs, DataArgs, EvaluateArgs, GenerateArgs, LossArg, MethodArg, MetricArg, PostprocessArgs, RegimeArg,
    SkillcardArgs, TrainArgs,
};

const ANALYSIS_DIR: &str = "analysis";
const FORECAST_DIR: &str = "forecast";

/// One-line diagnostic: `error[<kind>]: <message>`.
#[derive(Debug)]
pub struct CliError {
    kind: &'static str,
    message: String,
}

impl CliError {
    fn new(kind: &'static str, message: impl Into<String>) -> Self {
        CliError { kind, message: message.into() }
    }

    fn at(path: &Path, e: gridpp_core::Error) -> Self {
        CliError::new(e.kind(), format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let message = self.message.replace(['\n', '\r'], " ");
        write!(f, "error[{}]: {}", self.kind, message)
    }
}

impl From<gridpp_core::Error> for CliError {
    fn from(e: gridpp_core::Error) -> Self {
        CliError::new(e.kind(), e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

fn read_series(dir: &Path) -> CliResult<Vec<FieldSet>> {
    if !dir.is_dir() {
        return Err(CliError::new("missing_input", format!("{} is not a directory", dir.display())));
    }
    let sets = store::read_series(dir).map_err(|e| CliError::at(dir, e))?;
    if sets.is_empty() {
        return Err(CliError::new("missing_input", format!("{} holds no .fld files", dir.display())));
    }
    for s in &sets {
        s.validate_finite().map_err(|e| CliError::at(dir, e))?;
    }
    Ok(sets)
}

fn check_manifest(path: &Path, sets: &[FieldSet]) -> CliResult<()> {
    let manifest = FeatureManifest::load(path).map_err(|e| CliError::at(path, e))?;
    let violations = store::validate_manifest(&manifest);
    if let Some(v) = violations.first() {
        return Err(CliError::new("manifest", format!("{}: {}: {}", path.display(), v.field, v.rule)));
    }
    for s in sets {
        if s.features != manifest.features {
            return Err(CliError::new(
                "manifest",
                format!("field set valid at {} does not carry the manifest's features", s.time),
            ));
        }
        if s.grid != manifest.grid {
            return Err(CliError::new("manifest", format!("field set valid at {} is on a different grid", s.time)));
        }
    }
    Ok(())
}

fn load_dataset(data: &DataArgs) -> CliResult<(Vec<FieldSet>, Vec<FieldSet>)> {
    let analyses = read_series(&data.input.join(ANALYSIS_DIR))?;
    let forecasts = read_series(&data.input.join(FORECAST_DIR))?;
    if let Some(m) = &data.manifest {
        check_manifest(m, &analyses)?;
        check_manifest(m, &forecasts)?;
    }
    Ok((analyses, forecasts))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::at(parent, e.into()))?;
    }
    store::write_atomic(path, text.as_bytes()).map_err(|e| CliError::at(path, e))
}

fn write_series(dir: &Path, sets: &[FieldSet]) -> CliResult<()> {
    store::write_series(dir, sets).map_err(|e| CliError::at(dir, e))?;
    Ok(())
}

fn check_w(w: f64) -> CliResult<()> {
    if !(w > 0.0 && w < 1.0) {
        return Err(CliError::new("invalid_argument", format!("--w must lie in (0, 1), got {w}")));
    }
    Ok(())
}

pub fn generate(args: &GenerateArgs) -> CliResult<()> {
    let mut scenario = match &args.scenario {
        Some(p) => ScenarioConfig::load(p).map_err(|e| CliError::at(p, e))?,
        None => ScenarioConfig::default(),
    };
    if let Some(seed) = args.seed {
        scenario.seed = seed;
    }
    scenario.validate()?;
    let (analyses, forecasts) = synth::synth_pair_series(&scenario)?;
    write_series(&args.out.join(ANALYSIS_DIR), &analyses)?;
    write_series(&args.out.join(FORECAST_DIR), &forecasts)?;
    let manifest = FeatureManifest {
        features: scenario.feature_specs(),
        grid: scenario.grid()?,
        times: forecasts.iter().map(|f| f.time).collect(),
        lead_hours: scenario.lead_hours(),
    };
    let manifest_path = args.out.join("manifest.json");
    manifest.save(&manifest_path).map_err(|e| CliError::at(&manifest_path, e))?;
    let mut text = serde_json::to_string_pretty(&scenario).map_err(|e| CliError::from(gridpp_core::Error::from(e)))?;
    text.push('\n');
    write_text(&args.out.join("scenario.json"), &text)?;
    println!(
        "wrote {} analyses and {} forecasts ({} features, {}x{} grid) to {}",
        analyses.len(),
        forecasts.len(),
        scenario.features,
        scenario.n_lat,
        scenario.n_lon,
        args.out.display()
    );
    Ok(())
}

pub fn bias(args: &BiasArgs) -> CliResult<()> {
    check_w(args.w)?;
    let (analyses, forecasts) = load_dataset(&args.data)?;
    let errors = pipeline::forecast_errors(&forecasts, &analyses)?;
    if errors.is_empty() {
        return Err(CliError::new("insufficient_data", "no forecast has a verifying analysis"));
    }
    let options = BiasOptions { w: args.w, lags: args.lags };
    let mut series = Vec::new();
    for f in &forecasts {
        if let Some(b) = pipeline::bias_at_issue(&errors, f, options)? {
            series.push(b);
        }
    }
    write_series(&args.out.join("series"), &series)?;

    let mut state = match &args.resume {
        Some(p) => {
            let s = BiasState::load(p).map_err(|e| CliError::at(p, e))?;
            if s.w != args.w {
                return Err(CliError::new(
                    "invalid_argument",
                    format!("resumed state uses w = {}, --w is {}", s.w, args.w),
                ));
            }
            s
        }
        None => BiasState::new(args.w)?,
    };
    let last = state.template.as_ref().map(|t| t.time);
    let mut ingested = 0;
    for e in errors.iter().filter(|e| last.is_none_or(|t| e.time > t)) {
        state.update(e)?;
        ingested += 1;
    }
    let state_path = args.out.join("state.fld");
    if state.count > 0 {
        state.save(&state_path).map_err(|e| CliError::at(&state_path, e))?;
    }
    println!(
        "wrote {} bias fields; state ingested {} new errors ({} total)",
        series.len(),
        ingested,
        state.count
    );
    Ok(())
}

fn cases(forecasts: &[FieldSet], analyses: &[FieldSet], w: f64) -> CliResult<Vec<Case>> {
    let options = BiasOptions { w, ..BiasOptions::default() };
    let cases = pipeline::build_cases(forecasts, analyses, options)?;
    if cases.is_empty() {
        return Err(CliError::new(
            "insufficient_data",
            "no forecast has a verifying analysis, an analysis at issue time and an earlier error",
        ));
    }
    Ok(cases)
}

pub fn train(args: &TrainArgs) -> CliResult<()> {
    check_w(args.w)?;
    let (analyses, forecasts) = load_dataset(&args.data)?;
    let cases = cases(&forecasts, &analyses, args.w)?;
    let samples = cases
        .iter()
        .filter(|c| args.until.is_none_or(|u| c.forecast.time <= u))
        .map(|c| c.sample())
        .collect::<Result<Vec<_>, _>>()?;
    if samples.is_empty() {
        return Err(CliError::new("insufficient_data", "no training cases before --until"));
    }
    let mut config = ModelConfig::new(samples[0].features.n_channels, samples[0].target.n_features());
    config.layer_widths = args.widths.clone();
    config.seed = args.seed;
    config.lat_weighting = args.lat_weighted.enabled();
    config.regime = match args.regime {
        RegimeArg::Global => Regime::Global,
        RegimeArg::Latw => Regime::LatWeighted,
        RegimeArg::Triregion => Regime::TriRegion,
    };
    config.loss = match args.loss {
        LossArg::Mse => LossKind::Mse,
        LossArg::Mae => LossKind::Mae,
        LossArg::Logcosh => LossKind::LogCosh,
        LossArg::Cossim => LossKind::CosineSimilarity,
        LossArg::Fss => LossKind::Fractions,
    };
    if !(args.learning_rate > 0.0) {
        return Err(CliError::new("invalid_argument", "--learning-rate must be positive"));
    }
    let options = TrainOptions {
        optimizer: Optimizer::default().with_learning_rate(args.learning_rate),
        epochs: args.epochs,
        tile_size: (args.tile > 0).then_some(args.tile),
    };
    let outcome = nn::train(&config, &samples, &options)?;
    let model_path = args.out.join("model.ckpt");
    std::fs::create_dir_all(&args.out).map_err(|e| CliError::at(&args.out, e.into()))?;
    outcome.corrector.save(&model_path).map_err(|e| CliError::at(&model_path, e))?;
    write_text(&args.out.join("loss_trace.csv"), &outcome.trace_csv())?;
    let summary: Vec<String> = outcome
        .corrector
        .region_labels()
        .iter()
        .filter_map(|r| outcome.first_and_last(r).map(|(a, b)| format!("{r} {a:.6} -> {b:.6}")))
        .collect();
    println!(
        "trained on {} cases, {} parameters per model; loss {}",
        samples.len(),
        config.parameter_count(),
        summary.join(", ")
    );
    Ok(())
}

fn training_period(cases: &[Case], until: Option<DateTime<Utc>>) -> CliResult<(DateTime<Utc>, Vec<&Case>)> {
    let until = until.ok_or_else(|| CliError::new("invalid_argument", "--until is required for the linear method"))?;
    Ok((until, cases.iter().filter(|c| c.forecast.time <= until).collect()))
}

pub fn postprocess(args: &PostprocessArgs) -> CliResult<()> {
    check_w(args.w)?;
    let (analyses, forecasts) = load_dataset(&args.data)?;
    let cases = cases(&forecasts, &analyses, args.w)?;
    let targets: Vec<&Case> = cases.iter().filter(|c| args.from.is_none_or(|f| c.forecast.time >= f)).collect();
    if targets.is_empty() {
        return Err(CliError::new("insufficient_data", "no forecasts to correct after --from"));
    }
    let corrected: Vec<FieldSet> = match args.method {
        MethodArg::Nn => {
            let path = args
                .model
                .as_ref()
                .ok_or_else(|| CliError::new("invalid_argument", "--model is required for the nn method"))?;
            let corrector = Corrector::load(path).map_err(|e| CliError::at(path, e))?;
            targets
                .iter()
                .map(|c| nn::postprocess(&corrector, &c.forecast, &c.features))
                .collect::<Result<_, _>>()?
        }
        MethodArg::Linear => {
            let (until, history) = training_period(&cases, args.until)?;
            let clim_source: Vec<FieldSet> = analyses.iter().filter(|a| a.time <= until).cloned().collect();
            let climatology = Climatology::static_mean(&clim_source)?;
            let errors = history.iter().map(|c| c.error()).collect::<Result<Vec<_>, _>>()?;
            let samples: Vec<MosSample> = history
                .iter()
                .zip(&errors)
                .map(|(c, e)| MosSample { error: e, bias: &c.bias, forecast: &c.forecast })
                .collect();
            let model = baselines::linear_mos_fit(&samples, &climatology)?;
            let out: Vec<FieldSet> = targets
                .iter()
                .map(|c| baselines::linear_mos_apply(&model, &c.forecast, &c.bias, &climatology))
                .collect::<Result<_, _>>()?;
            let model_path = args.out.join("linear_model.bin");
            std::fs::create_dir_all(&args.out).map_err(|e| CliError::at(&args.out, e.into()))?;
            LinearMosModel::save(&model, &model_path).map_err(|e| CliError::at(&model_path, e))?;
            out
        }
        MethodArg::Decay => targets
            .iter()
            .map(|c| baselines::decay_subtract(&c.forecast, &c.bias))
            .collect::<Result<_, _>>()?,
        MethodArg::Blur => targets
            .iter()
            .map(|c| baselines::blur_baseline(&c.forecast, args.sigma))
            .collect::<Result<_, _>>()?,
    };
    for c in &corrected {
        c.validate_finite()?;
    }
    write_series(&args.out, &corrected)?;
    println!("wrote {} corrected forecasts to {}", corrected.len(), args.out.display());
    Ok(())
}

fn spectra_csv(candidates: &[FieldSet]) -> String {
    let mut out = String::from("lead_hours,variable,level,bin,wavenumber,power\n");
    let mut groups: BTreeMap<(u32, usize), (Vec<f64>, usize)> = BTreeMap::new();
    for c in candidates {
        for (f, field) in c.fields.iter().enumerate() {
            let s = verification::radial_power_spectrum(field);
            let entry = groups.entry((c.lead_hours, f)).or_insert_with(|| (vec![0.0; s.bins.len()], 0));
            entry.0.iter_mut().zip(&s.bins).for_each(|(a, b)| *a += b);
            entry.1 += 1;
        }
    }
    for ((lead, f), (sums, n)) in groups {
        let spec = &candidates[0].features[f];
        for (i, p) in sums.iter().enumerate() {
            out.push_str(&format!(
                "{lead},{},{},{},{},{:.10e}\n",
                spec.variable,
                spec.level,
                i,
                i + 1,
                p / n as f64
            ));
        }
    }
    out
}

pub fn evaluate(args: &EvaluateArgs) -> CliResult<()> {
    let candidates = read_series(&args.input)?;
    let truth = read_series(&args.truth)?;
    if let Some(m) = &args.manifest {
        check_manifest(m, &candidates)?;
    }
    let climatology = Climatology::static_mean(&truth)?;
    let options = EvalOptions { lat_weighted: args.lat_weighted.enabled(), clsds_sigma: args.sigma, ..EvalOptions::default() };
    let rows = pipeline::evaluate(&candidates, &truth, &climatology, options)?;
    write_text(&args.out, &pipeline::score_csv(&rows))?;
    if let Some(p) = &args.spectra {
        write_text(p, &spectra_csv(&candidates))?;
    }
    println!("scored {} candidate times into {} rows", candidates.len(), rows.len());
    Ok(())
}

fn index_by_time(sets: Vec<FieldSet>) -> BTreeMap<DateTime<Utc>, FieldSet> {
    sets.into_iter().map(|s| (s.time, s)).collect()
}

pub fn skillcard(args: &SkillcardArgs) -> CliResult<()> {
    let candidate = index_by_time(read_series(&args.input)?);
    let mut baseline = index_by_time(read_series(&args.baseline)?);
    let mut truth = index_by_time(read_series(&args.truth)?);
    let (mut a, mut b, mut t) = (Vec::new(), Vec::new(), Vec::new());
    for (time, c) in candidate {
        if let (Some(bb), Some(tt)) = (baseline.remove(&time), truth.remove(&time)) {
            a.push(c);
            b.push(bb);
            t.push(tt);
        }
    }
    if t.len() < 2 {
        return Err(CliError::new(
            "insufficient_data",
            format!("runs share {} valid times with the truth; need at least 2", t.len()),
        ));
    }
    let weights = args.lat_weighted.enabled().then(|| grid::cos_lat_weights(&t[0].grid));
    let metric = match args.metric {
        MetricArg::Rmse => SkillMetric::Rmse,
        MetricArg::Acc => SkillMetric::Acc,
    };
    let climatology = Climatology::static_mean(&t)?;
    let card = verification::skill_card(&a, &b, &t, metric, Some(&climatology), weights.as_ref())?;
    write_text(&args.out, &card.to_csv())?;
    if let Some(p) = &args.json {
        let mut json = card.to_json()?;
        json.push('\n');
        write_text(p, &json)?;
    }
    println!("skill card over {} paired times, {} features", card.steps, card.rows.len());
    Ok(())
}
