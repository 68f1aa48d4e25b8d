//! What-if forecasting under alternative future treatment schedules.
//!
//! A scenario replaces only the known-future treatment channel of a window;
//! the past block is never touched, so differences between scenario
//! forecasts come from the schedule alone.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

use crate::metrics::{masked_mae, paired_t_test, TTest};
use crate::tft::{ForecastSet, ModelError};
use crate::timegrid::WindowSample;
use crate::trainer::TrainedModel;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("model has no known-future channel `{0}`")]
    MissingChannel(String),
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Truth,
    AllOnes,
    AllZeros,
    Custom,
}

impl ScenarioKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioKind::Truth => "truth",
            ScenarioKind::AllOnes => "all_ones",
            ScenarioKind::AllZeros => "all_zeros",
            ScenarioKind::Custom => "custom",
        }
    }
}

/// A future schedule of the treatment channel, one 0/1 entry per forecast
/// bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub name: ScenarioKind,
    pub schedule: Vec<f64>,
}

impl ScenarioSpec {
    pub fn all_ones(h: usize) -> Self {
        Self {
            name: ScenarioKind::AllOnes,
            schedule: vec![1.0; h],
        }
    }

    pub fn all_zeros(h: usize) -> Self {
        Self {
            name: ScenarioKind::AllZeros,
            schedule: vec![0.0; h],
        }
    }

    pub fn custom(schedule: Vec<f64>) -> Self {
        Self {
            name: ScenarioKind::Custom,
            schedule,
        }
    }

    /// The schedule actually recorded in `window`.
    pub fn truth(window: &WindowSample, channel: &str) -> Result<Self, ScenarioError> {
        let schedule = window
            .future_known
            .get(channel)
            .cloned()
            .ok_or_else(|| ScenarioError::MissingChannel(channel.to_string()))?;
        Ok(Self {
            name: ScenarioKind::Truth,
            schedule,
        })
    }

    /// The three standard branches: observed, always on, never on.
    pub fn standard(window: &WindowSample, channel: &str) -> Result<Vec<Self>, ScenarioError> {
        let truth = Self::truth(window, channel)?;
        let h = truth.schedule.len();
        Ok(vec![truth, Self::all_ones(h), Self::all_zeros(h)])
    }

    pub fn validate(&self, horizon: usize) -> Result<(), ScenarioError> {
        if self.schedule.len() != horizon {
            return Err(ScenarioError::Schedule(format!(
                "{} entries for a horizon of {horizon}",
                self.schedule.len()
            )));
        }
        if let Some(bad) = self.schedule.iter().find(|&&x| x != 0.0 && x != 1.0) {
            return Err(ScenarioError::Schedule(format!("entry {bad} is not 0 or 1")));
        }
        Ok(())
    }
}

/// Copy of `window` whose future `channel` follows `schedule`.
pub fn apply_schedule(window: &WindowSample, channel: &str, schedule: &[f64]) -> WindowSample {
    let mut w = window.clone();
    w.future_known.insert(channel.to_string(), schedule.to_vec());
    w
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioForecast {
    pub spec: ScenarioSpec,
    pub forecast: ForecastSet,
    /// Masked MAE of each target's median against the window's truth.
    pub mae: BTreeMap<String, Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub encounter_id: String,
    pub channel: String,
    pub observed_schedule: Vec<f64>,
    pub scenarios: Vec<ScenarioForecast>,
}

impl ScenarioResult {
    pub fn get(&self, kind: ScenarioKind) -> Option<&ScenarioForecast> {
        self.scenarios.iter().find(|s| s.spec.name == kind)
    }
}

/// Checks that `channel` is a known-future input of the model.
pub fn require_channel(model: &TrainedModel, channel: &str) -> Result<(), ScenarioError> {
    if model.config.known_future.iter().any(|c| c == channel) {
        Ok(())
    } else {
        Err(ScenarioError::MissingChannel(channel.to_string()))
    }
}

/// One eval-mode forecast per scenario on the same past inputs.
pub fn forecast_scenarios(
    model: &TrainedModel,
    window: &WindowSample,
    channel: &str,
    specs: &[ScenarioSpec],
) -> Result<ScenarioResult, ScenarioError> {
    require_channel(model, channel)?;
    for s in specs {
        s.validate(model.config.horizon)?;
    }
    let observed = ScenarioSpec::truth(window, channel)?.schedule;
    let variants: Vec<WindowSample> = specs
        .iter()
        .map(|s| apply_schedule(window, channel, &s.schedule))
        .collect();
    let forecasts = model.forecast(&variants)?;
    let scenarios = specs
        .iter()
        .zip(forecasts)
        .map(|(spec, forecast)| {
            let mae = forecast
                .targets
                .iter()
                .enumerate()
                .map(|(v, name)| {
                    let truth = &window.targets_future[name];
                    let m = masked_mae(forecast.median(v), &truth.values, &truth.is_real).expect("horizon lengths match");
                    (name.clone(), m)
                })
                .collect();
            ScenarioForecast {
                spec: spec.clone(),
                forecast,
                mae,
            }
        })
        .collect();
    Ok(ScenarioResult {
        encounter_id: window.encounter_id.clone(),
        channel: channel.to_string(),
        observed_schedule: observed,
        scenarios,
    })
}

/// Which future bins a contrast row averages over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stratum {
    All,
    ObservedOn,
    ObservedOff,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastRow {
    pub stratum: Stratum,
    /// Subjects with at least one bin in the stratum.
    pub subjects: usize,
    /// Mean over subjects of the all-ones minus all-zeros difference.
    pub mean_difference: Option<f64>,
    /// Absent when fewer than two subjects qualify or the differences have
    /// no variance.
    pub test: Option<TTest>,
}

/// Paired t-tests of per-subject mean median forecasts of `target` between
/// the all-ones and all-zeros scenarios, over all future bins and over the
/// bins where the observed schedule is 1 and 0.
pub fn scenario_contrasts(results: &[ScenarioResult], target: &str) -> Vec<ContrastRow> {
    [Stratum::All, Stratum::ObservedOn, Stratum::ObservedOff]
        .into_iter()
        .map(|stratum| {
            let mut ones = Vec::new();
            let mut zeros = Vec::new();
            for r in results {
                let (Some(a), Some(b)) = (r.get(ScenarioKind::AllOnes), r.get(ScenarioKind::AllZeros)) else {
                    continue;
                };
                let Some(v) = a.forecast.target_index(target) else {
                    continue;
                };
                let keep: Vec<usize> = (0..r.observed_schedule.len())
                    .filter(|&t| match stratum {
                        Stratum::All => true,
                        Stratum::ObservedOn => r.observed_schedule[t] == 1.0,
                        Stratum::ObservedOff => r.observed_schedule[t] == 0.0,
                    })
                    .collect();
                if keep.is_empty() {
                    continue;
                }
                let mean = |xs: &[f64]| keep.iter().map(|&t| xs[t]).sum::<f64>() / keep.len() as f64;
                ones.push(mean(a.forecast.median(v)));
                zeros.push(mean(b.forecast.median(v)));
            }
            let n = ones.len();
            let mean_difference =
                (n > 0).then(|| ones.iter().zip(&zeros).map(|(a, b)| a - b).sum::<f64>() / n as f64);
            ContrastRow {
                stratum,
                subjects: n,
                mean_difference,
                test: paired_t_test(&ones, &zeros).ok(),
            }
        })
        .collect()
}
