//! Regular time grids built from irregular clinical events.
//!
//! Events are binned on a grid anchored at each encounter's start
//! (`timestamp` is minutes since the encounter began). Every bin carries an
//! `is_real` flag telling whether at least one event fell inside it; filling
//! never touches the flag, so downstream losses and metrics can restrict
//! themselves to observed bins.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;
use thiserror::Error;

pub const DEFAULT_BIN_MINUTES: u32 = 15;
pub const DEFAULT_HORIZON: usize = 25;
/// Past-window lengths in bins: 3 h, 9 h and 18.75 h.
pub const LOOKBACK_CHOICES: [usize; 3] = [12, 36, 75];

const DATASET_MAGIC: &str = "TFTM-WINDOWS";
const DATASET_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("unknown variable `{0}`")]
    UnknownVariable(String),
    #[error("variable `{0}` is static and cannot appear as a timed event")]
    StaticEvent(String),
    #[error("rejected event for `{variable}` at t={timestamp}: {reason}")]
    RejectedEvent {
        variable: String,
        timestamp: f64,
        reason: String,
    },
    #[error("schema: {0}")]
    Schema(String),
    #[error("cohort split needs at least 2 items, got {0}")]
    TooFewForSplit(usize),
    #[error("split ratio must lie in (0, 1), got {0}")]
    BadRatio(f64),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariableKind {
    Continuous,
    Binary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariableRole {
    Static,
    PastObserved,
    KnownFuture,
    /// Forecast target; always also an observed past input.
    Target,
}

/// How bins without events are filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FillPolicy {
    /// Carry the last observed value forward.
    #[default]
    Forward,
    /// A missing bin means "not given" (medication channels).
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableSpec {
    pub name: String,
    pub kind: VariableKind,
    pub role: VariableRole,
    #[serde(default)]
    pub fill: FillPolicy,
}

impl VariableSpec {
    pub fn new(name: &str, kind: VariableKind, role: VariableRole) -> Self {
        Self {
            name: name.to_string(),
            kind,
            role,
            fill: FillPolicy::Forward,
        }
    }

    pub fn with_fill(mut self, fill: FillPolicy) -> Self {
        self.fill = fill;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub variables: Vec<VariableSpec>,
}

impl Schema {
    pub fn new(variables: Vec<VariableSpec>) -> Result<Self, GridError> {
        let schema = Self { variables };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<(), GridError> {
        let mut seen = std::collections::BTreeSet::new();
        for v in &self.variables {
            if !seen.insert(v.name.as_str()) {
                return Err(GridError::Schema(format!("duplicate variable `{}`", v.name)));
            }
            if v.name == crate::tft::TIME_INDEX {
                return Err(GridError::Schema(format!("`{}` is reserved", v.name)));
            }
        }
        if self.targets().is_empty() {
            return Err(GridError::Schema("at least one target is required".into()));
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&VariableSpec> {
        self.variables.iter().find(|v| v.name == name)
    }

    fn names_with(&self, pred: impl Fn(&VariableSpec) -> bool) -> Vec<String> {
        self.variables
            .iter()
            .filter(|v| pred(v))
            .map(|v| v.name.clone())
            .collect()
    }

    pub fn targets(&self) -> Vec<String> {
        self.names_with(|v| v.role == VariableRole::Target)
    }

    pub fn statics(&self) -> Vec<String> {
        self.names_with(|v| v.role == VariableRole::Static)
    }

    pub fn known_future(&self) -> Vec<String> {
        self.names_with(|v| v.role == VariableRole::KnownFuture)
    }

    /// Every time-varying variable, in the order the network consumes them:
    /// targets, other observed inputs, then known-future inputs.
    pub fn past_inputs(&self) -> Vec<String> {
        let mut out = self.targets();
        out.extend(self.names_with(|v| v.role == VariableRole::PastObserved));
        out.extend(self.known_future());
        out
    }

    pub fn time_varying(&self) -> Vec<&VariableSpec> {
        self.variables
            .iter()
            .filter(|v| v.role != VariableRole::Static)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawEvent {
    pub encounter_id: String,
    pub variable: String,
    /// Minutes since encounter start.
    pub timestamp: f64,
    pub value: f64,
}

/// Values on a regular grid plus the observed/imputed flag of every bin.
/// Missing values are NaN until filled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedSeries {
    pub values: Vec<f64>,
    pub is_real: Vec<bool>,
}

impl MaskedSeries {
    pub fn missing(len: usize) -> Self {
        Self {
            values: vec![f64::NAN; len],
            is_real: vec![false; len],
        }
    }

    pub fn observed(values: Vec<f64>) -> Self {
        let is_real = vec![true; values.len()];
        Self { values, is_real }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn slice(&self, start: usize, end: usize) -> Self {
        Self {
            values: self.values[start..end].to_vec(),
            is_real: self.is_real[start..end].to_vec(),
        }
    }

    pub fn real_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.values
            .iter()
            .zip(&self.is_real)
            .filter(|(_, &r)| r)
            .map(|(&v, _)| v)
    }
}

/// Resampled grids of one encounter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncounterGrid {
    pub encounter_id: String,
    pub n_bins: usize,
    pub series: BTreeMap<String, MaskedSeries>,
}

fn median_code(codes: &mut [f64]) -> f64 {
    codes.sort_by(f64::total_cmp);
    let n = codes.len();
    if n % 2 == 1 {
        codes[n / 2]
    } else {
        // ties between the two middle codes round up
        ((codes[n / 2 - 1] + codes[n / 2]) / 2.0).ceil()
    }
}

/// Bins the events of a single encounter. The grid spans from t=0 to the
/// bin holding the latest event unless `n_bins` is given; events beyond an
/// explicit `n_bins` are ignored.
pub fn resample(
    encounter_id: &str,
    events: &[RawEvent],
    schema: &Schema,
    bin_minutes: u32,
    n_bins: Option<usize>,
) -> Result<EncounterGrid, GridError> {
    assert!(bin_minutes > 0, "bin width must be positive");
    let width = f64::from(bin_minutes);
    for e in events {
        let spec = schema
            .get(&e.variable)
            .ok_or_else(|| GridError::UnknownVariable(e.variable.clone()))?;
        if spec.role == VariableRole::Static {
            return Err(GridError::StaticEvent(e.variable.clone()));
        }
        if !e.value.is_finite() {
            return Err(GridError::RejectedEvent {
                variable: e.variable.clone(),
                timestamp: e.timestamp,
                reason: "non-finite value".into(),
            });
        }
        if !(e.timestamp.is_finite() && e.timestamp >= 0.0) {
            return Err(GridError::RejectedEvent {
                variable: e.variable.clone(),
                timestamp: e.timestamp,
                reason: "timestamp must be a non-negative number".into(),
            });
        }
    }
    let n_bins = n_bins.unwrap_or_else(|| {
        events
            .iter()
            .map(|e| (e.timestamp / width).floor() as usize + 1)
            .max()
            .unwrap_or(0)
    });

    let mut buckets: BTreeMap<&str, Vec<Vec<f64>>> = BTreeMap::new();
    for spec in schema.time_varying() {
        buckets.insert(spec.name.as_str(), vec![Vec::new(); n_bins]);
    }
    for e in events {
        let bin = (e.timestamp / width).floor() as usize;
        if bin >= n_bins {
            continue;
        }
        buckets.get_mut(e.variable.as_str()).expect("validated")[bin].push(e.value);
    }

    let mut series = BTreeMap::new();
    for spec in schema.time_varying() {
        let bins = buckets.remove(spec.name.as_str()).expect("inserted");
        let mut s = MaskedSeries::missing(n_bins);
        for (k, mut vals) in bins.into_iter().enumerate() {
            if vals.is_empty() {
                continue;
            }
            s.values[k] = match spec.kind {
                VariableKind::Continuous => vals.iter().sum::<f64>() / vals.len() as f64,
                VariableKind::Binary => median_code(&mut vals),
            };
            s.is_real[k] = true;
        }
        series.insert(spec.name.clone(), s);
    }
    Ok(EncounterGrid {
        encounter_id: encounter_id.to_string(),
        n_bins,
        series,
    })
}

/// Groups events by encounter and resamples each one.
pub fn resample_all(
    events: &[RawEvent],
    schema: &Schema,
    bin_minutes: u32,
) -> Result<Vec<EncounterGrid>, GridError> {
    let mut by_encounter: BTreeMap<&str, Vec<RawEvent>> = BTreeMap::new();
    for e in events {
        by_encounter
            .entry(e.encounter_id.as_str())
            .or_default()
            .push(e.clone());
    }
    by_encounter
        .into_iter()
        .map(|(id, evs)| resample(id, &evs, schema, bin_minutes, None))
        .collect()
}

/// Fills missing bins with the most recent observed value; bins before the
/// first observation take `fallback`.
pub fn forward_fill(series: &MaskedSeries, fallback: f64) -> MaskedSeries {
    let mut last = fallback;
    let values = series
        .values
        .iter()
        .zip(&series.is_real)
        .map(|(&v, &real)| {
            if real {
                last = v;
            }
            last
        })
        .collect();
    MaskedSeries {
        values,
        is_real: series.is_real.clone(),
    }
}

/// Fills every missing bin with zero.
pub fn zero_fill(series: &MaskedSeries) -> MaskedSeries {
    MaskedSeries {
        values: series
            .values
            .iter()
            .zip(&series.is_real)
            .map(|(&v, &r)| if r { v } else { 0.0 })
            .collect(),
        is_real: series.is_real.clone(),
    }
}

/// Per-variable medians of observed values, used as leading-gap fallbacks.
/// Zero-fill variables always get 0.
pub fn fill_values(grids: &[EncounterGrid], schema: &Schema) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    for spec in schema.time_varying() {
        if spec.fill == FillPolicy::Zero {
            out.insert(spec.name.clone(), 0.0);
            continue;
        }
        let mut vals: Vec<f64> = grids
            .iter()
            .filter_map(|g| g.series.get(&spec.name))
            .flat_map(|s| s.real_values())
            .collect();
        let med = if vals.is_empty() {
            0.0
        } else {
            vals.sort_by(f64::total_cmp);
            let n = vals.len();
            if n % 2 == 1 {
                vals[n / 2]
            } else {
                0.5 * (vals[n / 2 - 1] + vals[n / 2])
            }
        };
        out.insert(spec.name.clone(), med);
    }
    out
}

/// Applies each variable's fill policy to a grid.
pub fn fill_grid(grid: &EncounterGrid, schema: &Schema, fills: &BTreeMap<String, f64>) -> EncounterGrid {
    let series = grid
        .series
        .iter()
        .map(|(name, s)| {
            let filled = match schema.get(name).map(|v| v.fill) {
                Some(FillPolicy::Zero) => zero_fill(s),
                _ => forward_fill(s, fills.get(name).copied().unwrap_or(0.0)),
            };
            (name.clone(), filled)
        })
        .collect();
    EncounterGrid {
        encounter_id: grid.encounter_id.clone(),
        n_bins: grid.n_bins,
        series,
    }
}

/// One static-covariate row; `None` marks a missing value.
pub type StaticRow = BTreeMap<String, Option<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSample {
    pub encounter_id: String,
    pub statics: BTreeMap<String, f64>,
    /// All time-varying inputs over the past block (targets included).
    pub past: BTreeMap<String, MaskedSeries>,
    /// Known-future inputs over the forecast block.
    pub future_known: BTreeMap<String, Vec<f64>>,
    /// Targets over the forecast block.
    pub targets_future: BTreeMap<String, MaskedSeries>,
}

impl WindowSample {
    pub fn past_len(&self) -> usize {
        self.past.values().next().map_or(0, MaskedSeries::len)
    }

    pub fn horizon(&self) -> usize {
        self.targets_future.values().next().map_or(0, MaskedSeries::len)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropReport {
    pub total: usize,
    pub kept: usize,
    pub too_short: usize,
    pub missing_static: usize,
}

impl std::fmt::Display for DropReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "encounters: {}", self.total)?;
        writeln!(f, "windows kept: {}", self.kept)?;
        writeln!(f, "dropped (shorter than past + horizon): {}", self.too_short)?;
        writeln!(f, "dropped (missing numeric static): {}", self.missing_static)
    }
}

/// Cuts one window from the first `past_len + horizon` bins of every filled
/// encounter grid.
pub fn build_windows(
    grids: &[EncounterGrid],
    statics: &BTreeMap<String, StaticRow>,
    schema: &Schema,
    past_len: usize,
    horizon: usize,
) -> (Vec<WindowSample>, DropReport) {
    build_windows_at(grids, statics, schema, past_len, horizon, past_len)
}

/// Like [`build_windows`] but the forecast block starts at bin
/// `forecast_start`, with the past block the `past_len` bins before it.
/// Windows of different lookbacks then share identical forecast blocks.
pub fn build_windows_at(
    grids: &[EncounterGrid],
    statics: &BTreeMap<String, StaticRow>,
    schema: &Schema,
    past_len: usize,
    horizon: usize,
    forecast_start: usize,
) -> (Vec<WindowSample>, DropReport) {
    let mut report = DropReport {
        total: grids.len(),
        ..Default::default()
    };
    let forecast_start = forecast_start.max(past_len);
    let first = forecast_start - past_len;
    let need = forecast_start + horizon;
    let targets = schema.targets();
    let known = schema.known_future();
    let mut windows = Vec::new();
    'enc: for grid in grids {
        if grid.n_bins < need {
            report.too_short += 1;
            continue;
        }
        let mut st = BTreeMap::new();
        let row = statics.get(&grid.encounter_id);
        for name in schema.statics() {
            let spec = schema.get(&name).expect("listed");
            match (row.and_then(|r| r.get(&name).copied().flatten()), spec.kind) {
                (Some(v), _) => {
                    st.insert(name, v);
                }
                (None, VariableKind::Binary) => {
                    st.insert(name, 0.0);
                }
                (None, VariableKind::Continuous) => {
                    report.missing_static += 1;
                    continue 'enc;
                }
            }
        }
        let past = grid
            .series
            .iter()
            .map(|(n, s)| (n.clone(), s.slice(first, forecast_start)))
            .collect();
        let future_known = known
            .iter()
            .map(|n| (n.clone(), grid.series[n].values[forecast_start..need].to_vec()))
            .collect();
        let targets_future = targets
            .iter()
            .map(|n| (n.clone(), grid.series[n].slice(forecast_start, need)))
            .collect();
        windows.push(WindowSample {
            encounter_id: grid.encounter_id.clone(),
            statics: st,
            past,
            future_known,
            targets_future,
        });
    }
    report.kept = windows.len();
    (windows, report)
}

/// Random partition into a `ratio` share and the remainder, reproducible
/// from `seed`. Items keep their relative order inside each part.
pub fn split_cohort<T: Clone>(items: &[T], ratio: f64, seed: u64) -> Result<(Vec<T>, Vec<T>), GridError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(GridError::BadRatio(ratio));
    }
    let n = items.len();
    if n < 2 {
        return Err(GridError::TooFewForSplit(n));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_first = ((ratio * n as f64).round() as usize).clamp(0, n);
    let mut first: Vec<usize> = idx[..n_first].to_vec();
    let mut second: Vec<usize> = idx[n_first..].to_vec();
    first.sort_unstable();
    second.sort_unstable();
    Ok((
        first.into_iter().map(|i| items[i].clone()).collect(),
        second.into_iter().map(|i| items[i].clone()).collect(),
    ))
}

/// z-score statistics of continuous variables over observed training bins.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub stats: BTreeMap<String, (f64, f64)>,
}

impl NormStats {
    pub fn normalize(&self, name: &str, x: f64) -> f64 {
        match self.stats.get(name) {
            Some(&(mu, sd)) => (x - mu) / sd,
            None => x,
        }
    }

    pub fn denormalize(&self, name: &str, z: f64) -> f64 {
        match self.stats.get(name) {
            Some(&(mu, sd)) => z * sd + mu,
            None => z,
        }
    }

    /// Standard deviation used for `name` (1 for untouched variables).
    pub fn scale(&self, name: &str) -> f64 {
        self.stats.get(name).map_or(1.0, |&(_, sd)| sd)
    }
}

/// Fits z-score statistics on observed values of the training windows.
pub fn fit_normalizer(windows: &[WindowSample], schema: &Schema) -> NormStats {
    let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for spec in &schema.variables {
        if spec.kind == VariableKind::Continuous {
            acc.insert(spec.name.clone(), Vec::new());
        }
    }
    for w in windows {
        for (name, v) in &w.statics {
            if let Some(a) = acc.get_mut(name) {
                a.push(*v);
            }
        }
        for (name, s) in w.past.iter().chain(&w.targets_future) {
            if let Some(a) = acc.get_mut(name) {
                a.extend(s.real_values());
            }
        }
        for (name, vals) in &w.future_known {
            if let Some(a) = acc.get_mut(name) {
                a.extend(vals.iter().copied());
            }
        }
    }
    let stats = acc
        .into_iter()
        .map(|(name, vals)| {
            let n = vals.len();
            if n == 0 {
                return (name, (0.0, 1.0));
            }
            // shifted by the first value so constant series get an exact mean
            let shift = vals[0];
            let mean = shift + vals.iter().map(|v| v - shift).sum::<f64>() / n as f64;
            let var = if n > 1 {
                vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
            } else {
                0.0
            };
            let sd = var.sqrt();
            (name, (mean, if sd < 1e-8 { 1.0 } else { sd }))
        })
        .collect();
    NormStats { stats }
}

fn map_series(s: &MaskedSeries, f: impl Fn(f64) -> f64) -> MaskedSeries {
    MaskedSeries {
        values: s.values.iter().map(|&v| f(v)).collect(),
        is_real: s.is_real.clone(),
    }
}

fn map_window(w: &WindowSample, f: impl Fn(&str, f64) -> f64) -> WindowSample {
    WindowSample {
        encounter_id: w.encounter_id.clone(),
        statics: w.statics.iter().map(|(n, &v)| (n.clone(), f(n, v))).collect(),
        past: w.past.iter().map(|(n, s)| (n.clone(), map_series(s, |v| f(n, v)))).collect(),
        future_known: w
            .future_known
            .iter()
            .map(|(n, vals)| (n.clone(), vals.iter().map(|&v| f(n, v)).collect()))
            .collect(),
        targets_future: w
            .targets_future
            .iter()
            .map(|(n, s)| (n.clone(), map_series(s, |v| f(n, v))))
            .collect(),
    }
}

pub fn apply_normalizer(w: &WindowSample, stats: &NormStats) -> WindowSample {
    map_window(w, |n, v| stats.normalize(n, v))
}

pub fn invert_normalizer(w: &WindowSample, stats: &NormStats) -> WindowSample {
    map_window(w, |n, v| stats.denormalize(n, v))
}

/// Windowed dataset consumed by training and evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowDataset {
    pub schema: Schema,
    pub bin_minutes: u32,
    pub past_len: usize,
    pub horizon: usize,
    pub fill_values: BTreeMap<String, f64>,
    pub train: Vec<WindowSample>,
    pub test: Vec<WindowSample>,
    pub report: DropReport,
}

impl WindowDataset {
    /// Writes `TFTM-WINDOWS <version>` on the first line followed by a JSON
    /// body.
    pub fn save(&self, path: &Path) -> Result<(), GridError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "{DATASET_MAGIC} {DATASET_VERSION}")?;
        serde_json::to_writer(&mut f, self).map_err(|e| GridError::Format(e.to_string()))?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, GridError> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut header = String::new();
        r.read_line(&mut header)?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some(DATASET_MAGIC) {
            return Err(GridError::Format("missing dataset header".into()));
        }
        let version: u32 = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| GridError::Format("bad version".into()))?;
        if version != DATASET_VERSION {
            return Err(GridError::Format(format!(
                "dataset version {version}, expected {DATASET_VERSION}"
            )));
        }
        serde_json::from_reader(r).map_err(|e| GridError::Format(e.to_string()))
    }
}

/// Resampling, splitting and windowing settings of [`prepare_dataset`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrepareOptions {
    pub bin_minutes: u32,
    pub past_len: usize,
    pub horizon: usize,
    /// Share of encounters assigned to the training set.
    pub train_ratio: f64,
    pub seed: u64,
    /// First forecast bin; defaults to `past_len`.
    pub forecast_start: Option<usize>,
}

impl Default for PrepareOptions {
    fn default() -> Self {
        Self {
            bin_minutes: DEFAULT_BIN_MINUTES,
            past_len: LOOKBACK_CHOICES[2],
            horizon: DEFAULT_HORIZON,
            train_ratio: 0.8,
            seed: 0,
            forecast_start: None,
        }
    }
}

/// Events and statics to a split, filled and windowed dataset. Encounters
/// are split before filling so leading-gap fallbacks come from training
/// encounters only.
pub fn prepare_dataset(
    events: &[RawEvent],
    statics: &BTreeMap<String, StaticRow>,
    schema: &Schema,
    opts: &PrepareOptions,
) -> Result<WindowDataset, GridError> {
    schema.validate()?;
    let grids = resample_all(events, schema, opts.bin_minutes)?;
    let (train_grids, test_grids) = split_cohort(&grids, opts.train_ratio, opts.seed)?;
    let fills = fill_values(&train_grids, schema);
    let filled = |gs: &[EncounterGrid]| -> Vec<EncounterGrid> {
        gs.iter().map(|g| fill_grid(g, schema, &fills)).collect()
    };
    let start = opts.forecast_start.unwrap_or(opts.past_len);
    let cut = |gs: &[EncounterGrid]| build_windows_at(&filled(gs), statics, schema, opts.past_len, opts.horizon, start);
    let (train, r1) = cut(&train_grids);
    let (test, r2) = cut(&test_grids);
    Ok(WindowDataset {
        schema: schema.clone(),
        bin_minutes: opts.bin_minutes,
        past_len: opts.past_len,
        horizon: opts.horizon,
        fill_values: fills,
        train,
        test,
        report: DropReport {
            total: r1.total + r2.total,
            kept: r1.kept + r2.kept,
            too_short: r1.too_short + r2.too_short,
            missing_static: r1.missing_static + r2.missing_static,
        },
    })
}

/// Reads long-format events: `encounter_id,variable,timestamp_minutes,value`.
pub fn read_events(path: &Path) -> Result<Vec<RawEvent>, GridError> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |i: usize| rec.get(i).unwrap_or("").trim().to_string();
        let num = |i: usize| -> Result<f64, GridError> {
            field(i).parse().map_err(|_| GridError::RejectedEvent {
                variable: field(1),
                timestamp: f64::NAN,
                reason: format!("line {line}: cannot parse `{}`", field(i)),
            })
        };
        out.push(RawEvent {
            encounter_id: field(0),
            variable: field(1),
            timestamp: num(2)?,
            value: num(3)?,
        });
    }
    Ok(out)
}

pub fn write_events(path: &Path, events: &[RawEvent]) -> Result<(), GridError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["encounter_id", "variable", "timestamp_minutes", "value"])?;
    for e in events {
        w.write_record([
            e.encounter_id.clone(),
            e.variable.clone(),
            e.timestamp.to_string(),
            e.value.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the statics table: `encounter_id` followed by one column per static
/// variable; empty cells are missing.
pub fn read_statics(path: &Path) -> Result<BTreeMap<String, StaticRow>, GridError> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let mut out = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let id = rec.get(0).unwrap_or("").trim().to_string();
        let mut row = StaticRow::new();
        for (h, cell) in headers.iter().zip(rec.iter()).skip(1) {
            let cell = cell.trim();
            let v = if cell.is_empty() {
                None
            } else {
                Some(cell.parse::<f64>().map_err(|_| GridError::RejectedEvent {
                    variable: h.to_string(),
                    timestamp: f64::NAN,
                    reason: format!("static value `{cell}` for encounter {id}"),
                })?)
            };
            row.insert(h.to_string(), v);
        }
        out.insert(id, row);
    }
    Ok(out)
}

pub fn write_statics(
    path: &Path,
    names: &[String],
    rows: &BTreeMap<String, StaticRow>,
) -> Result<(), GridError> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["encounter_id".to_string()];
    header.extend(names.iter().cloned());
    w.write_record(&header)?;
    for (id, row) in rows {
        let mut rec = vec![id.clone()];
        for n in names {
            rec.push(row.get(n).copied().flatten().map_or(String::new(), |v| v.to_string()));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn schema() -> Schema {
        Schema::new(vec![
            VariableSpec::new("age", VariableKind::Continuous, VariableRole::Static),
            VariableSpec::new("hf", VariableKind::Binary, VariableRole::Static),
            VariableSpec::new("pulse", VariableKind::Continuous, VariableRole::Target),
            VariableSpec::new("temp", VariableKind::Continuous, VariableRole::Target),
            VariableSpec::new("pressor", VariableKind::Binary, VariableRole::PastObserved)
                .with_fill(FillPolicy::Zero),
        ])
        .unwrap()
    }

    fn ev(var: &str, t: f64, v: f64) -> RawEvent {
        RawEvent {
            encounter_id: "e1".into(),
            variable: var.into(),
            timestamp: t,
            value: v,
        }
    }

    #[test]
    fn resample_means_and_medians() {
        let events = vec![
            ev("pulse", 0.0, 10.0),
            ev("pulse", 5.0, 20.0),
            ev("pulse", 10.0, 30.0),
            ev("pressor", 2.0, 1.0),
            ev("pressor", 9.0, 0.0),
            ev("pressor", 12.0, 1.0),
            ev("pulse", 20.0, 7.0),
        ];
        let g = resample("e1", &events, &schema(), 15, None).unwrap();
        assert_eq!(g.n_bins, 2);
        assert_eq!(g.series["pulse"].values[0], 20.0);
        assert!(g.series["pulse"].is_real[0]);
        assert_eq!(g.series["pressor"].values[0], 1.0);
        assert_eq!(g.series["temp"].is_real, vec![false, false]);
    }

    #[test]
    fn binary_median_ties_round_up() {
        let events = vec![ev("pressor", 1.0, 0.0), ev("pressor", 2.0, 1.0)];
        let g = resample("e1", &events, &schema(), 15, Some(1)).unwrap();
        assert_eq!(g.series["pressor"].values[0], 1.0);
    }

    #[test]
    fn resample_rejects_bad_events() {
        let s = schema();
        assert!(matches!(
            resample("e1", &[ev("lactate", 0.0, 1.0)], &s, 15, None),
            Err(GridError::UnknownVariable(_))
        ));
        assert!(matches!(
            resample("e1", &[ev("pulse", 0.0, f64::NAN)], &s, 15, None),
            Err(GridError::RejectedEvent { .. })
        ));
        assert!(matches!(
            resample("e1", &[ev("age", 0.0, 50.0)], &s, 15, None),
            Err(GridError::StaticEvent(_))
        ));
    }

    #[test]
    fn forward_fill_examples() {
        let s = MaskedSeries {
            values: vec![f64::NAN, 5.0, f64::NAN, f64::NAN, 9.0],
            is_real: vec![false, true, false, false, true],
        };
        let f = forward_fill(&s, 7.0);
        assert_eq!(f.values, vec![7.0, 5.0, 5.0, 5.0, 9.0]);
        assert_eq!(f.is_real, s.is_real);

        let all_missing = forward_fill(&MaskedSeries::missing(3), 3.0);
        assert_eq!(all_missing.values, vec![3.0; 3]);
        assert!(all_missing.is_real.iter().all(|r| !r));

        let full = MaskedSeries::observed(vec![1.0, 2.0, 3.0]);
        assert_eq!(forward_fill(&full, 0.0), full);
    }

    fn grid_of_len(id: &str, n: usize) -> EncounterGrid {
        let s = schema();
        let mut series = BTreeMap::new();
        for spec in s.time_varying() {
            series.insert(
                spec.name.clone(),
                MaskedSeries::observed((0..n).map(|k| k as f64).collect()),
            );
        }
        EncounterGrid {
            encounter_id: id.into(),
            n_bins: n,
            series,
        }
    }

    fn statics_for(ids: &[&str]) -> BTreeMap<String, StaticRow> {
        ids.iter()
            .map(|id| {
                let mut r = StaticRow::new();
                r.insert("age".into(), Some(60.0));
                r.insert("hf".into(), None);
                (id.to_string(), r)
            })
            .collect()
    }

    #[test]
    fn windows_use_first_bins_and_drop_short_encounters() {
        let grids = vec![grid_of_len("a", 100), grid_of_len("b", 80)];
        let (w, rep) = build_windows(&grids, &statics_for(&["a", "b"]), &schema(), 75, 25);
        assert_eq!(w.len(), 1);
        assert_eq!(rep.too_short, 1);
        assert_eq!(w[0].past_len(), 75);
        assert_eq!(w[0].horizon(), 25);
        assert_eq!(w[0].statics["hf"], 0.0);

        let (w, _) = build_windows(&grids[..1], &statics_for(&["a"]), &schema(), 12, 25);
        assert_eq!(w[0].past["pulse"].values.last(), Some(&11.0));
        assert_eq!(w[0].targets_future["pulse"].values[0], 12.0);
        assert_eq!(w[0].targets_future["pulse"].values[24], 36.0);
    }

    #[test]
    fn aligned_windows_share_forecast_block() {
        let grids = vec![grid_of_len("a", 100)];
        let st = statics_for(&["a"]);
        let (short, _) = build_windows_at(&grids, &st, &schema(), 12, 25, 75);
        let (long, _) = build_windows_at(&grids, &st, &schema(), 75, 25, 75);
        assert_eq!(short[0].targets_future, long[0].targets_future);
        assert_eq!(short[0].past["pulse"].values[0], 63.0);
        assert_eq!(short[0].past_len(), 12);
        let (w, rep) = build_windows_at(&grids, &st, &schema(), 12, 25, 80);
        assert!(w.is_empty());
        assert_eq!(rep.too_short, 1);
    }

    #[test]
    fn missing_numeric_static_drops_sample() {
        let grids = vec![grid_of_len("a", 100)];
        let mut st = statics_for(&["a"]);
        st.get_mut("a").unwrap().insert("age".into(), None);
        let (w, rep) = build_windows(&grids, &st, &schema(), 75, 25);
        assert!(w.is_empty());
        assert_eq!(rep.missing_static, 1);
    }

    #[test]
    fn split_examples() {
        let items: Vec<u32> = (0..10).collect();
        let (a, b) = split_cohort(&items, 0.8, 42).unwrap();
        assert_eq!((a.len(), b.len()), (8, 2));
        assert_eq!(split_cohort(&items, 0.8, 42).unwrap(), (a.clone(), b.clone()));
        let (c, d) = split_cohort(&items[..4], 0.5, 1).unwrap();
        assert_eq!((c.len(), d.len()), (2, 2));
        let (e, f) = split_cohort(&items, 0.8, 43).unwrap();
        let mut all: Vec<u32> = e.iter().chain(&f).copied().collect();
        all.sort_unstable();
        assert_eq!(all, items);
        assert!(split_cohort(&items[..1], 0.8, 0).is_err());
        assert!(split_cohort(&items, 1.0, 0).is_err());
    }

    #[test]
    fn normalizer_examples() {
        let grids = vec![grid_of_len("a", 100)];
        let (mut w, _) = build_windows(&grids, &statics_for(&["a"]), &schema(), 75, 25);
        // constant series
        w[0].past.get_mut("temp").unwrap().values = vec![36.6; 75];
        w[0].targets_future.get_mut("temp").unwrap().values = vec![36.6; 25];
        let stats = fit_normalizer(&w, &schema());
        assert_eq!(stats.stats["temp"].1, 1.0);
        let n = apply_normalizer(&w[0], &stats);
        assert!(n.past["temp"].values.iter().all(|&v| v == 0.0));
        // binary untouched
        assert_eq!(n.past["pressor"].values, w[0].past["pressor"].values);
        let back = invert_normalizer(&n, &stats);
        for (a, b) in back.past["pulse"].values.iter().zip(&w[0].past["pulse"].values) {
            assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
        }
    }

    #[test]
    fn normalizer_two_values() {
        let mut w = build_windows(&[grid_of_len("a", 2)], &statics_for(&["a"]), &schema(), 1, 1).0;
        w[0].past.get_mut("pulse").unwrap().values = vec![0.0];
        w[0].targets_future.get_mut("pulse").unwrap().values = vec![10.0];
        let stats = fit_normalizer(&w, &schema());
        let (mu, sd) = stats.stats["pulse"];
        assert_eq!(mu, 5.0);
        assert!((sd - 50f64.sqrt()).abs() < 1e-12);
        assert_eq!(stats.normalize("pulse", 0.0), -stats.normalize("pulse", 10.0));
    }

    #[test]
    fn dataset_file_round_trip() {
        let grids = vec![grid_of_len("a", 100), grid_of_len("b", 100)];
        let (w, report) = build_windows(&grids, &statics_for(&["a", "b"]), &schema(), 75, 25);
        let ds = WindowDataset {
            schema: schema(),
            bin_minutes: 15,
            past_len: 75,
            horizon: 25,
            fill_values: BTreeMap::new(),
            train: w[..1].to_vec(),
            test: w[1..].to_vec(),
            report,
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("windows.tftm");
        ds.save(&p).unwrap();
        assert_eq!(WindowDataset::load(&p).unwrap(), ds);
        std::fs::write(&p, "OTHER 1\n{}").unwrap();
        assert!(WindowDataset::load(&p).is_err());
    }

    proptest! {
        #[test]
        fn resampling_conserves_mass(
            raw in proptest::collection::vec((0.0f64..300.0, -100.0f64..100.0), 1..60)
        ) {
            let events: Vec<RawEvent> = raw.iter().map(|&(t, v)| ev("pulse", t, v)).collect();
            let g = resample("e1", &events, &schema(), 15, None).unwrap();
            let mut counts = vec![0usize; g.n_bins];
            for e in &events { counts[(e.timestamp / 15.0).floor() as usize] += 1; }
            let s = &g.series["pulse"];
            let mass: f64 = s.values.iter().zip(&counts).filter(|(_, &c)| c > 0).map(|(v, &c)| v * c as f64).sum();
            let raw_sum: f64 = events.iter().map(|e| e.value).sum();
            prop_assert!((mass - raw_sum).abs() < 1e-9 * (1.0 + raw_sum.abs()));
            let filled = forward_fill(s, 0.0);
            prop_assert_eq!(&filled.is_real, &s.is_real);
            prop_assert!(filled.values.iter().all(|v| v.is_finite()));
        }
    }
}
