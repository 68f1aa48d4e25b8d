//! Optimisation loop, checkpoints and the gradient-check harness.

use crate::objective::LossBreakdown;
use crate::params::ModelParams;
use crate::tape::Tape;
use crate::tft::{self, Batch, ForecastSet, ModelConfig, ModelError, Mode};
use crate::timegrid::{self, NormStats, Schema, WindowSample};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;
use std::time::Instant;
use thiserror::Error;

const CHECKPOINT_MAGIC: &str = "TFTM-CHECKPOINT";
const CHECKPOINT_VERSION: u32 = 1;
/// Denominator floor of [`relative_error`]. Central differences at EPS 1e-5
/// carry absolute noise near 1e-10, so exact zeros compare against it.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch} ({layer})")]
    NonFinite {
        epoch: usize,
        batch: usize,
        layer: String,
    },
    #[error("gradient check failed: max relative error {:.3e} at {} coordinates", .0.max_rel_error, .0.offenders.len())]
    GradCheck(GradCheckReport),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Clamped to the training-set size.
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement tolerated before stopping.
    pub patience: usize,
    /// Share of the training windows held out for early stopping.
    pub validation_fraction: f64,
    pub seed: u64,
    pub clip_norm: f64,
    /// Windows per forward pass; gradients of a batch are accumulated over
    /// chunks of this size.
    pub micro_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 800,
            max_epochs: 2000,
            patience: 50,
            validation_fraction: 0.1,
            seed: 0,
            clip_norm: 10.0,
            micro_batch: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.learning_rate > 0.0) {
            return bad("learning rate must be positive");
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.micro_batch == 0 {
            return bad("batch size, epochs and micro batch must be positive");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation fraction must lie in [0, 1)");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip norm must be positive");
        }
        Ok(())
    }
}

/// Network weights with everything needed to forecast in original units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub config: ModelConfig,
    pub norm: NormStats,
    pub params: ModelParams,
    pub fingerprint: String,
}

impl TrainedModel {
    pub fn new(config: ModelConfig, norm: NormStats, params: ModelParams) -> Self {
        let fingerprint = config.fingerprint();
        Self {
            config,
            norm,
            params,
            fingerprint,
        }
    }

    /// Eval-mode forecasts for raw (unnormalised) windows.
    pub fn forecast(&self, windows: &[WindowSample]) -> Result<Vec<ForecastSet>, ModelError> {
        let normed: Vec<WindowSample> = windows
            .iter()
            .map(|w| timegrid::apply_normalizer(w, &self.norm))
            .collect();
        let mut out = Vec::with_capacity(windows.len());
        for chunk in normed.chunks(64) {
            let refs: Vec<&WindowSample> = chunk.iter().collect();
            let batch = Batch::from_windows(&refs, &self.config)?;
            let mut tape = Tape::new();
            let fwd = tft::forward(&mut tape, &self.params, &self.config, &batch, Mode::Eval, None)?;
            out.extend(tft::collect_forecasts(&tape, &fwd, &self.config, &refs, &self.norm));
        }
        Ok(out)
    }

    /// Writes `TFTM-CHECKPOINT <version>` then a JSON body.
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}")?;
        serde_json::to_writer(&mut f, self).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        f.flush()?;
        Ok(())
    }

    /// Loads a checkpoint, refusing other versions and configurations whose
    /// fingerprint does not match the stored one.
    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut header = String::new();
        r.read_line(&mut header)?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some(CHECKPOINT_MAGIC) {
            return Err(TrainError::Checkpoint("not a checkpoint file".into()));
        }
        match parts.next().and_then(|v| v.parse::<u32>().ok()) {
            Some(CHECKPOINT_VERSION) => {}
            Some(v) => {
                return Err(TrainError::Checkpoint(format!(
                    "checkpoint version {v} is not supported (expected {CHECKPOINT_VERSION})"
                )))
            }
            None => return Err(TrainError::Checkpoint("unreadable version".into())),
        }
        let model: TrainedModel =
            serde_json::from_reader(r).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        if model.config.fingerprint() != model.fingerprint {
            return Err(TrainError::Checkpoint("configuration fingerprint mismatch".into()));
        }
        // shape check against a fresh initialisation
        let fresh = tft::init_params(&model.config)?;
        for (name, v) in fresh.iter() {
            match model.params.get(name) {
                Some(p) if p.dim() == v.dim() => {}
                _ => {
                    return Err(TrainError::Checkpoint(format!(
                        "parameter `{name}` missing or mis-shaped"
                    )))
                }
            }
        }
        Ok(model)
    }
}

/// Mean masked loss over `windows` (already normalised) and its gradient with
/// respect to every parameter, accumulated over chunks of `micro` windows.
pub fn loss_and_gradient(
    params: &ModelParams,
    config: &ModelConfig,
    windows: &[&WindowSample],
    mode: Mode,
    mut rng: Option<&mut ChaCha8Rng>,
    micro: usize,
) -> Result<(LossBreakdown, Vec<Array2<f64>>), ModelError> {
    let n = windows.len();
    let mut grads = params.zeros_like();
    let mut total: Option<LossBreakdown> = None;
    for chunk in windows.chunks(micro.max(1)) {
        let batch = Batch::from_windows(chunk, config)?;
        let mut tape = Tape::new();
        let out = tft::forward(&mut tape, params, config, &batch, mode, rng.as_deref_mut())?;
        let (node, breakdown) = tft::loss_node(&mut tape, out.pred, &batch, &config.quantiles)?;
        let g = tape.backward(node);
        for (idx, grad) in g.params() {
            if let Some(grad) = grad {
                grads[idx].scaled_add(1.0 / n as f64, grad);
            }
        }
        total = Some(match total {
            None => breakdown,
            Some(mut acc) => {
                acc.total += breakdown.total;
                acc.samples += breakdown.samples;
                for (a, b) in acc.per_variable.iter_mut().zip(&breakdown.per_variable) {
                    *a += b;
                }
                for (a, b) in acc.per_quantile.iter_mut().zip(&breakdown.per_quantile) {
                    *a += b;
                }
                for (a, b) in acc.real_value_counts.iter_mut().zip(&breakdown.real_value_counts) {
                    *a += b;
                }
                acc
            }
        });
    }
    let total = total.ok_or_else(|| ModelError::Input("no windows".into()))?;
    Ok((total, grads))
}

/// Eval-mode mean masked loss.
pub fn evaluate_loss(
    params: &ModelParams,
    config: &ModelConfig,
    windows: &[&WindowSample],
) -> Result<LossBreakdown, ModelError> {
    let mut acc: Option<LossBreakdown> = None;
    for chunk in windows.chunks(64) {
        let batch = Batch::from_windows(chunk, config)?;
        let mut tape = Tape::new();
        let out = tft::forward(&mut tape, params, config, &batch, Mode::Eval, None)?;
        let (_, b) = tft::loss_node(&mut tape, out.pred, &batch, &config.quantiles)?;
        acc = Some(match acc {
            None => b,
            Some(mut a) => {
                a.total += b.total;
                a.samples += b.samples;
                for (x, y) in a.per_variable.iter_mut().zip(&b.per_variable) {
                    *x += y;
                }
                for (x, y) in a.per_quantile.iter_mut().zip(&b.per_quantile) {
                    *x += y;
                }
                for (x, y) in a.real_value_counts.iter_mut().zip(&b.real_value_counts) {
                    *x += y;
                }
                a
            }
        });
    }
    acc.ok_or_else(|| ModelError::Input("no windows".into()))
}

/// Adaptive-moment optimiser state.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(params: &ModelParams, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &[Array2<f64>]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (i, g) in grads.iter().enumerate() {
            let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = params.value_mut(i);
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
    }
}

/// Scales `grads` to global norm `max_norm` when larger; returns whether
/// clipping happened.
pub fn clip_global_norm(grads: &mut [Array2<f64>], max_norm: f64) -> bool {
    let norm = grads
        .iter()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|x| x * s);
        }
        true
    } else {
        false
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub elapsed: f64,
    /// Batches whose gradient was clipped.
    pub clipped: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TrainedModel,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

impl TrainOutcome {
    /// One JSON record per line.
    pub fn write_log(&self, w: &mut impl Write) -> std::io::Result<()> {
        for r in &self.log {
            serde_json::to_writer(&mut *w, r)?;
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Trains a fresh network on raw training windows. The normaliser is fitted
/// on these windows, a `validation_fraction` share is held out for early
/// stopping, and the parameters of the best validation epoch are returned.
pub fn train(
    windows: &[WindowSample],
    schema: &Schema,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    train_with_progress(windows, schema, model_config, train_config, |_, _| {})
}

/// [`train`] with a callback after every epoch. The second argument is the
/// model of that epoch when it is a new validation best.
pub fn train_with_progress(
    windows: &[WindowSample],
    schema: &Schema,
    model_config: &ModelConfig,
    tc: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, Option<&TrainedModel>),
) -> Result<TrainOutcome, TrainError> {
    tc.validate()?;
    model_config.validate()?;
    if windows.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    let norm = timegrid::fit_normalizer(windows, schema);
    let normed: Vec<WindowSample> = windows
        .iter()
        .map(|w| timegrid::apply_normalizer(w, &norm))
        .collect();
    let (fit, val) = if tc.validation_fraction > 0.0 && normed.len() >= 10 {
        let (a, b) = timegrid::split_cohort(&normed, 1.0 - tc.validation_fraction, tc.seed)
            .map_err(|e| TrainError::Config(e.to_string()))?;
        (a, b)
    } else {
        (normed.clone(), normed)
    };
    let val_refs: Vec<&WindowSample> = val.iter().collect();

    let mut params = tft::init_params(model_config)?;
    let mut adam = Adam::new(&params, tc.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x5eed_0f_7f7);
    let mut order: Vec<usize> = (0..fit.len()).collect();
    let batch_size = tc.batch_size.min(fit.len());
    let started = Instant::now();

    let mut log = Vec::new();
    let mut best = (f64::INFINITY, params.clone(), 0usize);
    let mut since_best = 0usize;
    for epoch in 1..=tc.max_epochs {
        order.shuffle(&mut rng);
        let mut train_total = 0.0;
        let mut clipped = 0;
        for (bi, idx) in order.chunks(batch_size).enumerate() {
            let refs: Vec<&WindowSample> = idx.iter().map(|&i| &fit[i]).collect();
            let (loss, mut grads) = loss_and_gradient(
                &params,
                model_config,
                &refs,
                Mode::Train,
                Some(&mut rng),
                tc.micro_batch,
            )
            .map_err(|e| match e {
                ModelError::NonFinite(layer) => TrainError::NonFinite {
                    epoch,
                    batch: bi,
                    layer,
                },
                other => other.into(),
            })?;
            if !loss.total.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: bi,
                    layer: "loss".into(),
                });
            }
            if grads.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: bi,
                    layer: "gradients".into(),
                });
            }
            if clip_global_norm(&mut grads, tc.clip_norm) {
                clipped += 1;
            }
            adam.step(&mut params, &grads);
            train_total += loss.total;
        }
        let val_loss = evaluate_loss(&params, model_config, &val_refs)?.mean();
        let rec = EpochRecord {
            epoch,
            train_loss: train_total / fit.len() as f64,
            val_loss,
            elapsed: started.elapsed().as_secs_f64(),
            clipped,
        };
        if val_loss < best.0 {
            best = (val_loss, params.clone(), epoch);
            since_best = 0;
            let snapshot = TrainedModel::new(model_config.clone(), norm.clone(), params.clone());
            on_epoch(&rec, Some(&snapshot));
            log.push(rec);
        } else {
            on_epoch(&rec, None);
            log.push(rec);
            since_best += 1;
            if since_best > tc.patience {
                break;
            }
        }
    }
    let (best_val_loss, best_params, best_epoch) = best;
    Ok(TrainOutcome {
        model: TrainedModel::new(model_config.clone(), norm, best_params),
        log,
        best_epoch,
        best_val_loss,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordinateCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub num_params: usize,
    pub checked: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    /// Coordinates above tolerance.
    pub offenders: Vec<CoordinateCheck>,
}

/// Relative error floored for gradients that are numerically zero.
pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(GRAD_CHECK_FLOOR)
}

/// Random normalised windows matching `config`, with roughly a third of
/// the target bins unobserved.
pub fn random_windows(config: &ModelConfig, n: usize, seed: u64) -> Vec<WindowSample> {
    use crate::timegrid::MaskedSeries;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let mut series = |len: usize| MaskedSeries {
                values: (0..len).map(|_| rng.random_range(-1.5..1.5)).collect(),
                is_real: (0..len).map(|_| rng.random::<f64>() > 0.33).collect(),
            };
            let past = config
                .past_inputs
                .iter()
                .map(|name| (name.clone(), series(config.past_len)))
                .collect();
            let future_known = config
                .known_future
                .iter()
                .map(|name| (name.clone(), series(config.horizon).values))
                .collect();
            let targets_future = config
                .targets
                .iter()
                .map(|name| (name.clone(), series(config.horizon)))
                .collect();
            let statics = config
                .statics
                .iter()
                .map(|name| (name.clone(), rng.random_range(-1.0..1.0)))
                .collect();
            WindowSample {
                encounter_id: format!("rand{i}"),
                statics,
                past,
                future_known,
                targets_future,
            }
        })
        .collect()
}

/// Compares analytic gradients of the eval-mode mean masked loss with
/// central finite differences on at least `min_coords` coordinates, covering
/// every parameter tensor at least once.
pub fn gradient_check(config: &ModelConfig, seed: u64, min_coords: usize) -> Result<GradCheckReport, TrainError> {
    const EPS: f64 = 1e-5;
    const TOL: f64 = 1e-3;
    let params = tft::init_params(config)?;
    if params.num_scalars() > 10_000 {
        return Err(TrainError::Config(format!(
            "gradient check wants a tiny model, got {} weights",
            params.num_scalars()
        )));
    }
    let windows = random_windows(config, 3, seed);
    let refs: Vec<&WindowSample> = windows.iter().collect();
    let (_, grads) = loss_and_gradient(&params, config, &refs, Mode::Eval, None, 64)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut coords: Vec<(usize, usize)> = (0..params.len())
        .map(|p| (p, rng.random_range(0..params.value(p).len())))
        .collect();
    let sizes: Vec<usize> = (0..params.len()).map(|p| params.value(p).len()).collect();
    let total: usize = sizes.iter().sum();
    while coords.len() < min_coords.max(params.len()) {
        let mut k = rng.random_range(0..total);
        let mut p = 0;
        while k >= sizes[p] {
            k -= sizes[p];
            p += 1;
        }
        coords.push((p, k));
    }

    let eval = |ps: &ModelParams| -> Result<f64, TrainError> {
        Ok(evaluate_loss(ps, config, &refs)?.mean())
    };
    let mut work = params.clone();
    let mut max_rel: f64 = 0.0;
    let mut offenders = Vec::new();
    for &(p, k) in &coords {
        let orig = work.value(p).as_slice().expect("standard")[k];
        work.value_mut(p).as_slice_mut().expect("standard")[k] = orig + EPS;
        let up = eval(&work)?;
        work.value_mut(p).as_slice_mut().expect("standard")[k] = orig - EPS;
        let down = eval(&work)?;
        work.value_mut(p).as_slice_mut().expect("standard")[k] = orig;
        let numeric = (up - down) / (2.0 * EPS);
        let analytic = grads[p].as_slice().expect("standard")[k];
        let rel = relative_error(analytic, numeric);
        max_rel = max_rel.max(rel);
        if rel > TOL {
            offenders.push(CoordinateCheck {
                param: params.name(p).to_string(),
                index: k,
                analytic,
                numeric,
                rel_error: rel,
            });
        }
    }
    let report = GradCheckReport {
        num_params: params.num_scalars(),
        checked: coords.len(),
        max_rel_error: max_rel,
        tolerance: TOL,
        offenders,
    };
    if report.offenders.is_empty() {
        Ok(report)
    } else {
        Err(TrainError::GradCheck(report))
    }
}
