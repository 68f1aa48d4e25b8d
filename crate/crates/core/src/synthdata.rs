//! Synthetic ICU-like cohorts with known dynamics.
//!
//! Five vitals follow a coupled VAR in standardised units:
//! `z_t = A z_{t-1} + sum_l B_l z_{t-l} + e_t`, `e_t ~ N(0, noise_sd^2)`,
//! where the sparse `B_l` come from [`LagTerm`]s. Reported values are
//! `baseline + scale * (z_t + level)` plus two deterministic effects: a
//! pressor adds `pressor_effect` to mean BP in every bin where it is given,
//! and the static `heart_failure` flag raises pulse. Observations are the
//! latent values thinned by per-variable Bernoulli missingness.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

use crate::timegrid::{FillPolicy, RawEvent, Schema, StaticRow, VariableKind, VariableRole, VariableSpec};

pub const VITALS: [&str; 5] = ["mean_bp", "pulse", "spo2", "resp", "temp"];
pub const PRESSOR: &str = "pressor";
pub const HEART_FAILURE: &str = "heart_failure";
pub const AGE: &str = "age";

/// Typical level of each vital in reported units, in [`VITALS`] order.
pub const BASELINES: [f64; 5] = [75.0, 85.0, 96.0, 18.0, 37.0];
/// Reported units per standardised unit of each vital.
pub const SCALES: [f64; 5] = [8.0, 10.0, 2.0, 4.0, 0.5];
const BURN_IN: usize = 50;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("AR matrix must be {0}x{0}")]
    Shape(usize),
    #[error("AR matrix has spectral radius {0:.4}; it must be below 1")]
    Unstable(f64),
    #[error("missingness for `{0}` must lie in [0, 1)")]
    Missingness(String),
    #[error("invalid setting: {0}")]
    Invalid(String),
}

/// Adds `weight * z[source](t - lag)` to `z[target](t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LagTerm {
    pub target: String,
    pub source: String,
    pub lag: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_encounters: usize,
    pub bins: usize,
    pub bin_minutes: u32,
    /// Row `i` gives the dependence of vital `i` on the previous step of
    /// every vital, in [`VITALS`] order.
    pub ar: Vec<Vec<f64>>,
    /// Extra delayed couplings on top of `ar`.
    pub lag_terms: Vec<LagTerm>,
    /// Innovation standard deviation in standardised units.
    pub noise_sd: f64,
    /// Added to mean BP in bins with the pressor on.
    pub pressor_effect: f64,
    /// Share of encounters that receive pressors at all.
    pub pressor_fraction: f64,
    /// Per-bin switching probabilities of the pressor schedule.
    pub pressor_start: f64,
    pub pressor_stop: f64,
    pub missingness: BTreeMap<String, f64>,
    pub heart_failure_rate: f64,
    /// Pulse shift of heart-failure encounters, in beats per minute.
    pub heart_failure_pulse: f64,
    /// Standard deviation of a constant per-encounter offset of every vital,
    /// in standardised units.
    pub level_sd: f64,
    /// Treat the pressor as a known-future input in the emitted schema.
    pub pressor_known_future: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_encounters: 64,
            bins: 100,
            bin_minutes: 15,
            ar: vec![
                vec![0.8, 0.1, 0.0, 0.0, 0.0],
                vec![0.1, 0.8, 0.0, 0.0, 0.0],
                vec![0.0, 0.0, 0.3, 0.6, 0.0],
                vec![0.0, 0.0, 0.0, 0.9, 0.0],
                vec![0.0, 0.0, 0.0, 0.0, 0.9],
            ],
            lag_terms: Vec::new(),
            noise_sd: 0.5,
            pressor_effect: 5.0,
            pressor_fraction: 0.5,
            pressor_start: 0.05,
            pressor_stop: 0.1,
            missingness: [("mean_bp", 0.1), ("pulse", 0.1), ("spo2", 0.7), ("resp", 0.1), ("temp", 0.5)]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
            heart_failure_rate: 0.3,
            heart_failure_pulse: 15.0,
            level_sd: 0.0,
            pressor_known_future: false,
            seed: 0,
        }
    }
}

/// Largest eigenvalue modulus.
pub fn spectral_radius(a: &[Vec<f64>]) -> f64 {
    let k = a.len();
    let m = DMatrix::from_fn(k, k, |r, c| a[r][c]);
    m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

fn vital_index(name: &str) -> Option<usize> {
    VITALS.iter().position(|v| *v == name)
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let k = VITALS.len();
        if self.ar.len() != k || self.ar.iter().any(|r| r.len() != k) {
            return Err(SynthError::Shape(k));
        }
        for t in &self.lag_terms {
            if vital_index(&t.target).is_none() || vital_index(&t.source).is_none() || t.lag == 0 {
                return Err(SynthError::Invalid(format!("lag term {} <- {} at lag {}", t.target, t.source, t.lag)));
            }
        }
        let rho = spectral_radius(&self.companion());
        if !(rho < 1.0) {
            return Err(SynthError::Unstable(rho));
        }
        for (name, &m) in &self.missingness {
            if !VITALS.contains(&name.as_str()) || !(0.0..1.0).contains(&m) {
                return Err(SynthError::Missingness(name.clone()));
            }
        }
        let probs = [
            ("pressor_fraction", self.pressor_fraction),
            ("pressor_start", self.pressor_start),
            ("pressor_stop", self.pressor_stop),
            ("heart_failure_rate", self.heart_failure_rate),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(SynthError::Invalid(format!("{name} = {p}")));
            }
        }
        if !(self.noise_sd >= 0.0) || !(self.level_sd >= 0.0) || self.bins == 0 || self.bin_minutes == 0 {
            return Err(SynthError::Invalid("noise, level, bins and bin width must be non-negative and nonzero".into()));
        }
        Ok(())
    }

    /// Coefficient matrices by lag, `lag_matrices()[l - 1]` for lag `l`.
    pub fn lag_matrices(&self) -> Vec<Vec<Vec<f64>>> {
        let k = VITALS.len();
        let depth = self.lag_terms.iter().map(|t| t.lag).max().unwrap_or(1).max(1);
        let mut out = vec![vec![vec![0.0; k]; k]; depth];
        out[0] = self.ar.clone();
        for t in &self.lag_terms {
            if let (Some(r), Some(c)) = (vital_index(&t.target), vital_index(&t.source)) {
                out[t.lag - 1][r][c] += t.weight;
            }
        }
        out
    }

    /// Companion matrix of the latent process; stationary iff its spectral
    /// radius is below 1.
    pub fn companion(&self) -> Vec<Vec<f64>> {
        let mats = self.lag_matrices();
        let k = VITALS.len();
        let n = k * mats.len();
        let mut c = vec![vec![0.0; n]; n];
        for (l, m) in mats.iter().enumerate() {
            for r in 0..k {
                for col in 0..k {
                    c[r][l * k + col] = m[r][col];
                }
            }
        }
        for i in k..n {
            c[i][i - k] = 1.0;
        }
        c
    }

    /// SpO2 driven by respiration ten bins earlier, with weak own memory,
    /// so the sparse channel is predictable only through the dense one.
    pub fn delayed_coupling() -> Self {
        let mut c = Self::default();
        c.ar[2] = vec![0.0, 0.0, 0.3, 0.0, 0.0];
        c.ar[3] = vec![0.0, 0.0, 0.0, 0.9, 0.0];
        c.lag_terms = vec![LagTerm {
            target: "spo2".into(),
            source: "resp".into(),
            lag: 10,
            weight: 0.9,
        }];
        c
    }

    /// Uncoupled vitals with short dynamics around a persistent
    /// per-encounter level, which only a long history pins down.
    pub fn long_memory() -> Self {
        let mut c = Self::default();
        for (r, row) in c.ar.iter_mut().enumerate() {
            for (k, a) in row.iter_mut().enumerate() {
                *a = if r == k { 0.5 } else { 0.0 };
            }
        }
        c.level_sd = 1.0;
        c
    }

    /// Schema of the emitted cohort: vitals are targets, the pressor is an
    /// observed or known-future zero-filled binary input.
    pub fn schema(&self) -> Schema {
        let mut vars: Vec<VariableSpec> = VITALS
            .iter()
            .map(|v| VariableSpec::new(v, VariableKind::Continuous, VariableRole::Target))
            .collect();
        let role = if self.pressor_known_future {
            VariableRole::KnownFuture
        } else {
            VariableRole::PastObserved
        };
        vars.push(VariableSpec::new(PRESSOR, VariableKind::Binary, role).with_fill(FillPolicy::Zero));
        vars.push(VariableSpec::new(HEART_FAILURE, VariableKind::Binary, VariableRole::Static));
        vars.push(VariableSpec::new(AGE, VariableKind::Continuous, VariableRole::Static));
        Schema::new(vars).expect("fixed schema is valid")
    }
}

/// Ground truth of one encounter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncounterTruth {
    /// Noise-free-of-missingness values per vital, in reported units.
    pub values: BTreeMap<String, Vec<f64>>,
    pub pressor: Vec<u8>,
    pub heart_failure: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    pub schema: Schema,
    pub events: Vec<RawEvent>,
    pub statics: BTreeMap<String, StaticRow>,
    pub truth: BTreeMap<String, EncounterTruth>,
}

pub fn encounter_id(i: usize) -> String {
    format!("enc{i:05}")
}

/// Independent generator of encounter `i`, derived from the cohort seed.
fn encounter_rng(seed: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64 + 1);
    rng
}

fn simulate_encounter(cfg: &SynthConfig, i: usize, events: &mut Vec<RawEvent>) -> (EncounterTruth, StaticRow) {
    let mut rng = encounter_rng(cfg.seed, i);
    let id = encounter_id(i);
    let k = VITALS.len();
    let noise = Normal::new(0.0, cfg.noise_sd).expect("validated");
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let heart_failure = rng.random_bool(cfg.heart_failure_rate);
    let age: f64 = rng.random_range(40.0..90.0);
    let level: Vec<f64> = (0..k).map(|_| cfg.level_sd * unit.sample(&mut rng)).collect();
    let treated = rng.random_bool(cfg.pressor_fraction);

    let mats = cfg.lag_matrices();
    // history[0] is the latest latent vector
    let mut history: std::collections::VecDeque<Vec<f64>> = vec![vec![0.0; k]; mats.len()].into();
    let mut step = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        let z: Vec<f64> = (0..k)
            .map(|r| {
                let mut acc = noise.sample(rng);
                for (m, past) in mats.iter().zip(&history) {
                    acc += (0..k).map(|c| m[r][c] * past[c]).sum::<f64>();
                }
                acc
            })
            .collect();
        history.pop_back();
        history.push_front(z.clone());
        z
    };
    for _ in 0..BURN_IN {
        step(&mut rng);
    }
    let mut values: BTreeMap<String, Vec<f64>> = VITALS.iter().map(|v| (v.to_string(), Vec::with_capacity(cfg.bins))).collect();
    let mut pressor = Vec::with_capacity(cfg.bins);
    let mut on = false;
    for _ in 0..cfg.bins {
        let z = step(&mut rng);
        if treated {
            let flip = if on { cfg.pressor_stop } else { cfg.pressor_start };
            if rng.random_bool(flip) {
                on = !on;
            }
        }
        pressor.push(u8::from(on));
        for (v, name) in VITALS.iter().enumerate() {
            let mut x = BASELINES[v] + SCALES[v] * (z[v] + level[v]);
            if *name == "mean_bp" && on {
                x += cfg.pressor_effect;
            }
            if *name == "pulse" && heart_failure {
                x += cfg.heart_failure_pulse;
            }
            values.get_mut(*name).expect("vital").push(x);
        }
    }
    let width = cfg.bin_minutes as f64;
    for b in 0..cfg.bins {
        let start = b as f64 * width;
        for name in VITALS {
            let miss = cfg.missingness.get(name).copied().unwrap_or(0.0);
            if rng.random_bool(1.0 - miss) {
                events.push(RawEvent {
                    encounter_id: id.clone(),
                    variable: name.to_string(),
                    timestamp: start + rng.random_range(0.0..width),
                    value: values[name][b],
                });
            }
        }
        events.push(RawEvent {
            encounter_id: id.clone(),
            variable: PRESSOR.to_string(),
            timestamp: start,
            value: f64::from(pressor[b]),
        });
    }
    let statics: StaticRow = [
        (HEART_FAILURE.to_string(), Some(if heart_failure { 1.0 } else { 0.0 })),
        (AGE.to_string(), Some(age)),
    ]
    .into_iter()
    .collect();
    (
        EncounterTruth {
            values,
            pressor,
            heart_failure,
        },
        statics,
    )
}

/// Generates a cohort reproducibly from `cfg.seed`. Each encounter draws
/// from its own stream, so encounter `i` does not depend on how many
/// encounters precede it.
pub fn generate_cohort(cfg: &SynthConfig) -> Result<Cohort, SynthError> {
    cfg.validate()?;
    let mut events = Vec::new();
    let mut statics = BTreeMap::new();
    let mut truth = BTreeMap::new();
    for i in 0..cfg.n_encounters {
        let (t, s) = simulate_encounter(cfg, i, &mut events);
        statics.insert(encounter_id(i), s);
        truth.insert(encounter_id(i), t);
    }
    Ok(Cohort {
        schema: cfg.schema(),
        events,
        statics,
        truth,
    })
}
