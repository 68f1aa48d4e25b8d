//! Dataset-level feature importance.
//!
//! Importance is the arithmetic mean of variable-selection weights: over
//! samples for static inputs, over samples and past time steps for temporal
//! inputs. Attention is summarised separately as a profile over lags.

use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::tft::{ForecastSet, ModelConfig, ModelError};
use crate::timegrid::WindowSample;
use crate::trainer::TrainedModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Static,
    Temporal,
}

/// Features sorted by decreasing weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceTable {
    pub scope: Scope,
    pub features: Vec<(String, f64)>,
    /// Number of weight vectors averaged.
    pub count: usize,
}

impl ImportanceTable {
    pub fn weight(&self, name: &str) -> Option<f64> {
        self.features.iter().find(|f| f.0 == name).map(|f| f.1)
    }

    pub fn top(&self) -> Option<&str> {
        self.features.first().map(|f| f.0.as_str())
    }

    /// Tab-separated `feature\tweight` lines with a header.
    pub fn write_tsv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "feature\tweight")?;
        for (name, weight) in &self.features {
            writeln!(w, "{name}\t{weight}")?;
        }
        Ok(())
    }
}

/// Running sums of selection-weight vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Accumulator {
    names: Vec<String>,
    sums: Vec<f64>,
    count: usize,
}

impl Accumulator {
    pub fn new(names: Vec<String>) -> Self {
        let n = names.len();
        Self {
            names,
            sums: vec![0.0; n],
            count: 0,
        }
    }

    pub fn add(&mut self, weights: &[f64]) {
        for (s, w) in self.sums.iter_mut().zip(weights) {
            *s += w;
        }
        self.count += 1;
    }

    pub fn merge(&mut self, other: &Accumulator) {
        for (s, o) in self.sums.iter_mut().zip(&other.sums) {
            *s += o;
        }
        self.count += other.count;
    }

    pub fn finish(&self, scope: Scope) -> ImportanceTable {
        let denom = self.count.max(1) as f64;
        let mut features: Vec<(String, f64)> = self
            .names
            .iter()
            .cloned()
            .zip(self.sums.iter().map(|s| s / denom))
            .collect();
        features.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ImportanceTable {
            scope,
            features,
            count: self.count,
        }
    }
}

pub fn accumulate(forecasts: &[ForecastSet], config: &ModelConfig, scope: Scope) -> Accumulator {
    match scope {
        Scope::Static => {
            let mut acc = Accumulator::new(config.statics.clone());
            for f in forecasts {
                if let Some(w) = &f.static_weights {
                    acc.add(w);
                }
            }
            acc
        }
        Scope::Temporal => {
            let mut acc = Accumulator::new(config.past_features());
            for f in forecasts {
                for row in &f.past_weights {
                    acc.add(row);
                }
            }
            acc
        }
    }
}

/// Mean selection weights of `scope` over already computed forecasts.
pub fn aggregate_importance(forecasts: &[ForecastSet], config: &ModelConfig, scope: Scope) -> ImportanceTable {
    accumulate(forecasts, config, scope).finish(scope)
}

/// Runs the model on raw windows and aggregates both scopes.
pub fn model_importance(
    model: &TrainedModel,
    windows: &[WindowSample],
) -> Result<(ImportanceTable, ImportanceTable, LagProfile), ModelError> {
    let forecasts = model.forecast(windows)?;
    Ok((
        aggregate_importance(&forecasts, &model.config, Scope::Static),
        aggregate_importance(&forecasts, &model.config, Scope::Temporal),
        attention_lag_profile(&forecasts, model.config.past_len),
    ))
}

/// Mean attention weight by lag: `weights[l]` is the average weight a
/// forecast step puts on the position `l` steps before it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LagProfile {
    pub weights: Vec<f64>,
}

pub fn attention_lag_profile(forecasts: &[ForecastSet], past_len: usize) -> LagProfile {
    let width = forecasts
        .first()
        .and_then(|f| f.attention.first())
        .map_or(0, Vec::len);
    let mut sums = vec![0.0; width];
    let mut rows = 0usize;
    for f in forecasts {
        for (i, row) in f.attention.iter().enumerate() {
            let pos = past_len + i;
            for (key, &a) in row.iter().enumerate().take(pos + 1) {
                sums[pos - key] += a;
            }
            rows += 1;
        }
    }
    let denom = rows.max(1) as f64;
    LagProfile {
        weights: sums.into_iter().map(|s| s / denom).collect(),
    }
}
