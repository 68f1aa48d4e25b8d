//! `tftm` subcommands. Every command reads one TOML config, writes its
//! artifacts under `output_dir`, and records a `manifest-<command>.json`
//! with the config hash, seed and crate version.

use clap::{Args, Parser, Subcommand};
use ndarray::{Array2, Axis};
use serde::Serialize;
use serde_json::json;
use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use thiserror::Error;

use crate::baselines::{self, BaselineError, GrangerScreen, OrderSelection, VarModel};
use crate::config::{load_config, ConfigError, LoadedConfig};
use crate::importance::model_importance;
use crate::metrics::{self, evaluate_records, forecast_records, MetricError, PredictionRecord};
use crate::scenarios::{forecast_scenarios, scenario_contrasts, ScenarioError, ScenarioResult, ScenarioSpec};
use crate::service::{self, quantile_key, AppState};
use crate::synthdata::{generate_cohort, SynthError};
use crate::tft::ModelError;
use crate::timegrid::{self, GridError, Schema, WindowDataset};
use crate::trainer::{train_with_progress, TrainError, TrainOutcome, TrainedModel};

pub const DATASET_FILE: &str = "dataset.tftw";
pub const MODEL_FILE: &str = "model.tftm";
pub const BEST_CHECKPOINT_FILE: &str = "checkpoint-best.tftm";

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    /// Also carries `--help` and `--version` output.
    #[error(transparent)]
    Args(#[from] clap::Error),
    #[error("{0}")]
    Usage(String),
}

#[derive(Debug, Parser)]
#[command(name = "tftm", version, about = "Multivariate quantile forecasting of clinical time series")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(short, long)]
    pub config: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort: events, statics and schema.
    Synth(Common),
    /// Resample, split, fill and window raw events.
    Prepare(Common),
    /// Train the forecaster on the prepared training windows.
    Train {
        #[command(flatten)]
        common: Common,
        /// Overrides `train.max_epochs`.
        #[arg(long)]
        max_epochs: Option<usize>,
    },
    /// Forecast the test windows and score them.
    Evaluate(Common),
    /// Granger screen and VAR baseline.
    Baseline(Common),
    /// Static and temporal feature importance.
    Importance(Common),
    /// Counterfactual treatment schedules for the test windows.
    Whatif(Common),
    /// JSON HTTP service over the trained model.
    Serve(Common),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Prepare(_) => "prepare",
            Command::Train { .. } => "train",
            Command::Evaluate(_) => "evaluate",
            Command::Baseline(_) => "baseline",
            Command::Importance(_) => "importance",
            Command::Whatif(_) => "whatif",
            Command::Serve(_) => "serve",
        }
    }

    fn config_path(&self) -> &Path {
        match self {
            Command::Train { common, .. } => &common.config,
            Command::Synth(c)
            | Command::Prepare(c)
            | Command::Evaluate(c)
            | Command::Baseline(c)
            | Command::Importance(c)
            | Command::Whatif(c)
            | Command::Serve(c) => &c.config,
        }
    }
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config: String,
    config_sha256: &'a str,
    seed: u64,
    version: &'a str,
    outputs: Vec<String>,
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args)?;
    let cfg = load_config(cli.command.config_path())?;
    std::fs::create_dir_all(cfg.output_dir())?;
    let name = cli.command.name();
    let outputs = match &cli.command {
        Command::Synth(_) => synth(&cfg)?,
        Command::Prepare(_) => prepare(&cfg)?,
        Command::Train { max_epochs, .. } => train(&cfg, *max_epochs)?,
        Command::Evaluate(_) => evaluate(&cfg)?,
        Command::Baseline(_) => baseline(&cfg)?,
        Command::Importance(_) => importance(&cfg)?,
        Command::Whatif(_) => whatif(&cfg)?,
        Command::Serve(_) => {
            write_manifest(&cfg, name, &[])?;
            return serve(&cfg);
        }
    };
    write_manifest(&cfg, name, &outputs)?;
    for p in &outputs {
        eprintln!("wrote {}", p.display());
    }
    Ok(())
}

fn write_manifest(cfg: &LoadedConfig, command: &str, outputs: &[PathBuf]) -> Result<(), CliError> {
    let m = Manifest {
        command,
        config: cfg.path.display().to_string(),
        config_sha256: &cfg.hash,
        seed: cfg.config.seed,
        version: env!("CARGO_PKG_VERSION"),
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
    };
    write_json(&cfg.output(&format!("manifest-{command}.json")), &m)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

/// Schema from the inline `[[variables]]` list, else from the schema file.
pub fn load_schema(cfg: &LoadedConfig) -> Result<Schema, CliError> {
    let vars = if cfg.config.variables.is_empty() {
        let path = cfg.schema_path();
        let file = File::open(&path).map_err(|e| CliError::Usage(format!("schema {}: {e}", path.display())))?;
        serde_json::from_reader(std::io::BufReader::new(file))?
    } else {
        cfg.config.variables.clone()
    };
    Ok(Schema::new(vars)?)
}

pub fn load_dataset(cfg: &LoadedConfig) -> Result<WindowDataset, CliError> {
    Ok(WindowDataset::load(&cfg.output(DATASET_FILE))?)
}

pub fn load_model(cfg: &LoadedConfig) -> Result<TrainedModel, CliError> {
    Ok(TrainedModel::load(&cfg.output(MODEL_FILE))?)
}

pub fn synth(cfg: &LoadedConfig) -> Result<Vec<PathBuf>, CliError> {
    let cohort = generate_cohort(&cfg.config.synth)?;
    let events = cfg.output("events.csv");
    let statics = cfg.output("statics.csv");
    let schema = cfg.output("schema.json");
    let truth = cfg.output("synth_truth.json");
    timegrid::write_events(&events, &cohort.events)?;
    timegrid::write_statics(&statics, &cohort.schema.statics(), &cohort.statics)?;
    write_json(&schema, &cohort.schema.variables)?;
    write_json(
        &truth,
        &json!({ "config": cfg.config.synth, "encounters": cohort.truth }),
    )?;
    Ok(vec![events, statics, schema, truth])
}

pub fn prepare(cfg: &LoadedConfig) -> Result<Vec<PathBuf>, CliError> {
    let schema = load_schema(cfg)?;
    let events = timegrid::read_events(&cfg.events_path())?;
    let statics = if schema.statics().is_empty() {
        Default::default()
    } else {
        timegrid::read_statics(&cfg.statics_path())?
    };
    let ds = timegrid::prepare_dataset(&events, &statics, &schema, &cfg.prepare_options())?;
    let out = cfg.output(DATASET_FILE);
    ds.save(&out)?;
    let report = cfg.output("drop_report.txt");
    std::fs::write(
        &report,
        format!("{}train windows: {}\ntest windows: {}\n", ds.report, ds.train.len(), ds.test.len()),
    )?;
    eprint!("{}", ds.report);
    Ok(vec![out, report])
}

/// Trains on the prepared dataset, rewriting the best checkpoint whenever
/// validation loss improves.
pub fn train_dataset(cfg: &LoadedConfig, ds: &WindowDataset, max_epochs: Option<usize>) -> Result<TrainOutcome, CliError> {
    let c = &cfg.config;
    let mc = c
        .model
        .model_config(&ds.schema, ds.past_len, ds.horizon, c.seed)
        .map_err(CliError::Usage)?;
    let mut tc = c.train.clone();
    if let Some(m) = max_epochs {
        tc.max_epochs = m;
    }
    let best_path = cfg.output(BEST_CHECKPOINT_FILE);
    let mut save_error = None;
    let outcome = train_with_progress(&ds.train, &ds.schema, &mc, &tc, |rec, best| {
        eprintln!(
            "epoch {:>4}  train {:.5}  val {:.5}  {:.1}s{}",
            rec.epoch,
            rec.train_loss,
            rec.val_loss,
            rec.elapsed,
            if best.is_some() { "  *" } else { "" }
        );
        if let Some(m) = best {
            if let Err(e) = m.save(&best_path) {
                save_error.get_or_insert(e);
            }
        }
    })?;
    if let Some(e) = save_error {
        return Err(e.into());
    }
    Ok(outcome)
}

pub fn train(cfg: &LoadedConfig, max_epochs: Option<usize>) -> Result<Vec<PathBuf>, CliError> {
    let ds = load_dataset(cfg)?;
    let outcome = train_dataset(cfg, &ds, max_epochs)?;
    let model = cfg.output(MODEL_FILE);
    outcome.model.save(&model)?;
    let log = cfg.output("train_log.jsonl");
    let mut w = BufWriter::new(File::create(&log)?);
    outcome.write_log(&mut w)?;
    w.flush()?;
    eprintln!("best epoch {} (validation loss {:.5})", outcome.best_epoch, outcome.best_val_loss);
    Ok(vec![model, cfg.output(BEST_CHECKPOINT_FILE), log])
}

/// Median and bound records of `model` over `windows`.
pub fn model_records(model: &TrainedModel, windows: &[timegrid::WindowSample]) -> Result<Vec<PredictionRecord>, CliError> {
    let forecasts = model.forecast(windows)?;
    let truth: Vec<(Vec<Vec<f64>>, Vec<Vec<bool>>)> = windows
        .iter()
        .map(|w| {
            model
                .config
                .targets
                .iter()
                .map(|t| {
                    let s = &w.targets_future[t];
                    (s.values.clone(), s.is_real.clone())
                })
                .unzip()
        })
        .collect();
    Ok(forecast_records(&forecasts, &truth))
}

pub fn evaluate(cfg: &LoadedConfig) -> Result<Vec<PathBuf>, CliError> {
    let ds = load_dataset(cfg)?;
    let model = load_model(cfg)?;
    let records = model_records(&model, &ds.test)?;
    let preds = cfg.output("predictions.csv");
    metrics::write_predictions(File::create(&preds)?, &records)?;
    let report = evaluate_records(&records);
    for v in &report.variables {
        eprintln!(
            "{:<10} mae {:>8}  coverage median {:>6}",
            v.variable,
            v.mae.map_or("-".into(), |m| format!("{m:.3}")),
            v.coverage.as_ref().and_then(|c| c.median()).map_or("-".into(), |m| format!("{m:.3}")),
        );
    }
    let out = cfg.output("report.json");
    write_json(&out, &report)?;
    Ok(vec![preds, out])
}

/// A fitted VAR over a subset of the targets.
#[derive(Debug, Clone, Serialize)]
pub struct VarFit {
    pub variables: Vec<String>,
    pub selection: OrderSelection,
    pub model: VarModel,
}

/// Output of the baseline pipeline: the Granger screen, a joint VAR over
/// the retained targets, and a univariate autoregression per excluded one.
#[derive(Debug, Clone, Serialize)]
pub struct BaselineRun {
    pub screen: GrangerScreen,
    pub fits: Vec<VarFit>,
    #[serde(skip)]
    pub records: Vec<PredictionRecord>,
}

fn columns(seqs: &[Array2<f64>], idx: &[usize]) -> Vec<Array2<f64>> {
    seqs.iter().map(|s| s.select(Axis(1), idx)).collect()
}

pub fn run_baseline(cfg: &LoadedConfig, ds: &WindowDataset) -> Result<BaselineRun, CliError> {
    let b = &cfg.config.baseline;
    let targets = if cfg.config.model.targets.is_empty() {
        ds.schema.targets()
    } else {
        cfg.config.model.targets.clone()
    };
    let seqs = ds
        .train
        .iter()
        .map(|w| baselines::window_series(w, &targets))
        .collect::<Result<Vec<_>, _>>()?;
    let refs: Vec<&Array2<f64>> = seqs.iter().collect();
    let screen = baselines::granger_screen(&targets, &refs, b.granger_lag, b.alpha)?;
    let mut groups = vec![screen.retained.clone()];
    groups.extend(screen.excluded.iter().map(|e| vec![e.clone()]));
    let mut fits = Vec::new();
    let mut records = Vec::new();
    for group in groups.into_iter().filter(|g| !g.is_empty()) {
        let idx: Vec<usize> = group
            .iter()
            .map(|g| targets.iter().position(|t| t == g).expect("screen names come from targets"))
            .collect();
        let sub = columns(&seqs, &idx);
        let sub_refs: Vec<&Array2<f64>> = sub.iter().collect();
        let selection = baselines::select_order_pooled(&sub_refs, b.max_order)?;
        let model = baselines::fit_var_pooled(&sub_refs, selection.order)?;
        records.extend(baselines::var_prediction_records(&model, &ds.test, &group)?);
        fits.push(VarFit {
            variables: group,
            selection,
            model,
        });
    }
    Ok(BaselineRun { screen, fits, records })
}

pub fn baseline(cfg: &LoadedConfig) -> Result<Vec<PathBuf>, CliError> {
    let ds = load_dataset(cfg)?;
    let run = run_baseline(cfg, &ds)?;
    let granger = cfg.output("granger.csv");
    let mut w = csv::Writer::from_path(&granger)?;
    for row in &run.screen.tests {
        w.serialize(row)?;
    }
    w.flush()?;
    let preds = cfg.output("var_predictions.csv");
    metrics::write_predictions(File::create(&preds)?, &run.records)?;
    let model = cfg.output("var_model.json");
    write_json(&model, &run)?;
    let report = cfg.output("var_report.json");
    write_json(&report, &evaluate_records(&run.records))?;
    eprintln!("retained {:?}, excluded {:?}", run.screen.retained, run.screen.excluded);
    Ok(vec![granger, preds, model, report])
}

pub fn importance(cfg: &LoadedConfig) -> Result<Vec<PathBuf>, CliError> {
    let ds = load_dataset(cfg)?;
    let model = load_model(cfg)?;
    let (st, tp, lags) = model_importance(&model, &ds.test)?;
    let mut out = Vec::new();
    for (table, name) in [(&st, "importance_static.tsv"), (&tp, "importance_temporal.tsv")] {
        let p = cfg.output(name);
        let mut w = BufWriter::new(File::create(&p)?);
        table.write_tsv(&mut w)?;
        w.flush()?;
        out.push(p);
    }
    let p = cfg.output("importance.json");
    write_json(&p, &json!({ "static": st, "temporal": tp, "attention_lags": lags }))?;
    out.push(p);
    Ok(out)
}

/// Standard scenarios for up to `scenario.max_subjects` test windows.
pub fn run_whatif(cfg: &LoadedConfig, model: &TrainedModel, ds: &WindowDataset) -> Result<Vec<ScenarioResult>, CliError> {
    let channel = &cfg.config.scenario.channel;
    let n = cfg.config.scenario.max_subjects.unwrap_or(ds.test.len());
    ds.test
        .iter()
        .take(n)
        .map(|w| {
            let specs = ScenarioSpec::standard(w, channel)?;
            Ok(forecast_scenarios(model, w, channel, &specs)?)
        })
        .collect()
}

fn write_trajectory(path: &Path, r: &ScenarioResult, which: usize) -> Result<(), CliError> {
    let sc = &r.scenarios[which];
    let f = &sc.forecast;
    let mut w = BufWriter::new(File::create(path)?);
    let qcols: Vec<String> = f.quantiles.iter().map(|&q| quantile_key(q)).collect();
    writeln!(w, "variable,step,schedule,{}", qcols.join(","))?;
    for (v, name) in f.targets.iter().enumerate() {
        for t in 0..f.horizon() {
            let qs: Vec<String> = (0..f.quantiles.len()).map(|q| f.values[v][q][t].to_string()).collect();
            writeln!(w, "{name},{t},{},{}", sc.spec.schedule[t], qs.join(","))?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn whatif(cfg: &LoadedConfig) -> Result<Vec<PathBuf>, CliError> {
    let ds = load_dataset(cfg)?;
    let model = load_model(cfg)?;
    let results = run_whatif(cfg, &model, &ds)?;
    let dir = cfg.output("whatif");
    std::fs::create_dir_all(&dir)?;
    let mut out = Vec::new();
    for r in &results {
        for (i, sc) in r.scenarios.iter().enumerate() {
            let p = dir.join(format!("{}.{}.csv", r.encounter_id, sc.spec.name.as_str()));
            write_trajectory(&p, r, i)?;
            out.push(p);
        }
    }
    let contrasts = scenario_contrasts(&results, &cfg.config.scenario.target);
    for row in &contrasts {
        eprintln!(
            "{:?}: subjects {}  mean difference {}  p {}",
            row.stratum,
            row.subjects,
            row.mean_difference.map_or("-".into(), |d| format!("{d:.3}")),
            row.test.as_ref().map_or("-".into(), |t| format!("{:.3e}", t.p_value)),
        );
    }
    let p = cfg.output("contrasts.json");
    write_json(
        &p,
        &json!({ "channel": cfg.config.scenario.channel, "target": cfg.config.scenario.target, "rows": contrasts }),
    )?;
    out.push(p);
    Ok(out)
}

pub fn app_state(cfg: &LoadedConfig) -> Result<AppState, CliError> {
    let ds = load_dataset(cfg)?;
    let model = load_model(cfg)?;
    Ok(AppState::new(model, ds.test, &cfg.config.scenario.channel, ds.bin_minutes)?)
}

pub fn serve(cfg: &LoadedConfig) -> Result<(), CliError> {
    let state = Arc::new(app_state(cfg)?);
    let addr = cfg.config.serve.addr.clone();
    eprintln!("listening on {addr}");
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(service::serve(state, &addr))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_subcommand_parses() {
        for cmd in ["synth", "prepare", "train", "evaluate", "baseline", "importance", "whatif", "serve"] {
            let cli = Cli::try_parse_from(["tftm", cmd, "--config", "x.toml"]).unwrap();
            assert_eq!(cli.command.name(), cmd);
        }
        let cli = Cli::try_parse_from(["tftm", "train", "-c", "x.toml", "--max-epochs", "3"]).unwrap();
        assert!(matches!(cli.command, Command::Train { max_epochs: Some(3), .. }));
        assert!(Cli::try_parse_from(["tftm", "train"]).is_err());
        assert!(Cli::try_parse_from(["tftm", "fly", "-c", "x"]).is_err());
    }

    #[test]
    fn missing_config_is_reported() {
        let err = run(["tftm", "prepare", "--config", "/nonexistent/cfg.toml"]).unwrap_err();
        assert!(matches!(err, CliError::Config(ConfigError::Read { .. })));
    }
}
