//! Temporal fusion network with a joint multi-target quantile head.
//!
//! Data flow for a batch of windows (all sequences time-major):
//!
//! ```text
//! statics ─ embed ─ static VSN ─┬─ GRN → selection context
//!                               ├─ GRN → enrichment context
//!                               ├─ GRN → LSTM initial hidden state
//!                               └─ GRN → LSTM initial cell state
//! past inputs   ─ embed ─ past VSN ──── LSTM encoder ─┐
//! known future  ─ embed ─ future VSN ── LSTM decoder ─┴─ gate+add&norm
//!   ─ static enrichment GRN ─ causal interpretable attention ─ gate+add&norm
//!   ─ position-wise GRN ─ gate+add&norm (temporal skip) ─ dense → V·Q outputs
//! ```
//!
//! Past target values are part of the past inputs, one channel per target.
//! The head emits every quantile of every target at each future step.

use crate::objective::{self, LossBreakdown};
use crate::params::{Init, ModelParams};
use crate::tape::{Tape, Var};
use crate::timegrid::{NormStats, Schema, WindowSample};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::rc::Rc;
use thiserror::Error;

/// Implicit known input giving each position's offset from the forecast
/// origin, in horizons.
pub const TIME_INDEX: &str = "time_index";

pub const DEFAULT_QUANTILES: [f64; 3] = [0.1, 0.5, 0.9];

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("input: {0}")]
    Input(String),
    #[error("non-finite activation in `{0}`")]
    NonFinite(String),
    #[error(transparent)]
    Loss(#[from] objective::LossError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden_size: usize,
    pub num_heads: usize,
    pub dropout: f64,
    pub quantiles: Vec<f64>,
    pub targets: Vec<String>,
    /// Time-varying inputs over the past block; starts with the targets.
    pub past_inputs: Vec<String>,
    pub known_future: Vec<String>,
    pub statics: Vec<String>,
    pub past_len: usize,
    pub horizon: usize,
    /// Seed for parameter initialisation.
    pub seed: u64,
}

impl ModelConfig {
    pub fn from_schema(schema: &Schema, past_len: usize, horizon: usize) -> Self {
        Self {
            hidden_size: 64,
            num_heads: 4,
            dropout: 0.3,
            quantiles: DEFAULT_QUANTILES.to_vec(),
            targets: schema.targets(),
            past_inputs: schema.past_inputs(),
            known_future: schema.known_future(),
            statics: schema.statics(),
            past_len,
            horizon,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.hidden_size == 0 || self.num_heads == 0 || self.hidden_size % self.num_heads != 0 {
            return err(format!(
                "hidden size {} must be a positive multiple of the head count {}",
                self.hidden_size, self.num_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.quantiles.is_empty()
            || self.quantiles.windows(2).any(|w| w[0] >= w[1])
            || self.quantiles.iter().any(|&q| !(q > 0.0 && q < 1.0))
        {
            return err("quantiles must be strictly ascending inside (0, 1)".into());
        }
        if self.targets.is_empty() {
            return err("at least one target is required".into());
        }
        if self.past_len == 0 || self.horizon == 0 {
            return err("past length and horizon must be positive".into());
        }
        for t in &self.targets {
            if !self.past_inputs.contains(t) {
                return err(format!("target `{t}` must also be a past input"));
            }
        }
        for k in &self.known_future {
            if !self.past_inputs.contains(k) {
                return err(format!("known-future input `{k}` must also be a past input"));
            }
        }
        if self.past_inputs.iter().any(|n| n == TIME_INDEX) {
            return err(format!("`{TIME_INDEX}` is added implicitly"));
        }
        Ok(())
    }

    pub fn num_targets(&self) -> usize {
        self.targets.len()
    }

    pub fn seq_len(&self) -> usize {
        self.past_len + self.horizon
    }

    /// Past-VSN feature names, including the implicit time index.
    pub fn past_features(&self) -> Vec<String> {
        let mut v = self.past_inputs.clone();
        v.push(TIME_INDEX.into());
        v
    }

    pub fn future_features(&self) -> Vec<String> {
        let mut v = self.known_future.clone();
        v.push(TIME_INDEX.into());
        v
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(&json))
    }

    /// Causal mask over the concatenated past and future positions.
    pub fn causal_mask(&self) -> Vec<bool> {
        let t = self.seq_len();
        (0..t * t).map(|k| k % t <= k / t).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Network inputs for a batch of normalised windows, time-major.
#[derive(Debug, Clone)]
pub struct Batch {
    pub size: usize,
    /// One `[B, 1]` column per static input.
    pub statics: Vec<Array2<f64>>,
    /// One `[P * B, 1]` column per past feature.
    pub past: Vec<Array2<f64>>,
    /// One `[H * B, 1]` column per future feature.
    pub future: Vec<Array2<f64>>,
    /// `[H * B, V]`.
    pub targets: Array2<f64>,
    pub mask: Array2<bool>,
}

fn time_index_column(start: usize, len: usize, batch: usize, past_len: usize, horizon: usize) -> Array2<f64> {
    Array2::from_shape_fn((len * batch, 1), |(r, _)| {
        ((start + r / batch) as f64 - past_len as f64) / horizon as f64
    })
}

impl Batch {
    pub fn from_windows(windows: &[&WindowSample], config: &ModelConfig) -> Result<Self, ModelError> {
        let b = windows.len();
        if b == 0 {
            return Err(ModelError::Input("empty batch".into()));
        }
        let (p, h) = (config.past_len, config.horizon);
        let missing = |what: &str, name: &str, id: &str| {
            ModelError::Input(format!("window `{id}` lacks {what} `{name}`"))
        };
        let mut statics = Vec::with_capacity(config.statics.len());
        for name in &config.statics {
            let mut col = Array2::zeros((b, 1));
            for (i, w) in windows.iter().enumerate() {
                let v = *w
                    .statics
                    .get(name)
                    .ok_or_else(|| missing("static", name, &w.encounter_id))?;
                if !v.is_finite() {
                    return Err(ModelError::Input(format!("non-finite static `{name}`")));
                }
                col[[i, 0]] = v;
            }
            statics.push(col);
        }
        let mut past = Vec::with_capacity(config.past_inputs.len() + 1);
        for name in &config.past_inputs {
            let mut col = Array2::zeros((p * b, 1));
            for (i, w) in windows.iter().enumerate() {
                let s = w
                    .past
                    .get(name)
                    .ok_or_else(|| missing("past input", name, &w.encounter_id))?;
                if s.len() != p {
                    return Err(ModelError::Input(format!(
                        "past `{name}` has {} bins, expected {p}",
                        s.len()
                    )));
                }
                for (t, &v) in s.values.iter().enumerate() {
                    if !v.is_finite() {
                        return Err(ModelError::Input(format!("unfilled past `{name}` at bin {t}")));
                    }
                    col[[t * b + i, 0]] = v;
                }
            }
            past.push(col);
        }
        past.push(time_index_column(0, p, b, p, h));
        let mut future = Vec::with_capacity(config.known_future.len() + 1);
        for name in &config.known_future {
            let mut col = Array2::zeros((h * b, 1));
            for (i, w) in windows.iter().enumerate() {
                let s = w
                    .future_known
                    .get(name)
                    .ok_or_else(|| missing("known-future input", name, &w.encounter_id))?;
                if s.len() != h {
                    return Err(ModelError::Input(format!(
                        "future `{name}` has {} bins, expected {h}",
                        s.len()
                    )));
                }
                for (t, &v) in s.iter().enumerate() {
                    if !v.is_finite() {
                        return Err(ModelError::Input(format!("non-finite future `{name}`")));
                    }
                    col[[t * b + i, 0]] = v;
                }
            }
            future.push(col);
        }
        future.push(time_index_column(p, h, b, p, h));
        let v = config.num_targets();
        let mut targets = Array2::zeros((h * b, v));
        let mut mask = Array2::from_elem((h * b, v), false);
        for (j, name) in config.targets.iter().enumerate() {
            for (i, w) in windows.iter().enumerate() {
                let s = w
                    .targets_future
                    .get(name)
                    .ok_or_else(|| missing("target", name, &w.encounter_id))?;
                if s.len() != h {
                    return Err(ModelError::Input(format!(
                        "target `{name}` has {} bins, expected {h}",
                        s.len()
                    )));
                }
                for t in 0..h {
                    let real = s.is_real[t] && s.values[t].is_finite();
                    mask[[t * b + i, j]] = real;
                    targets[[t * b + i, j]] = if real { s.values[t] } else { 0.0 };
                }
            }
        }
        Ok(Self {
            size: b,
            statics,
            past,
            future,
            targets,
            mask,
        })
    }
}

/// Result of one forward pass.
pub struct ForwardOutput {
    /// `[H * B, V * Q]`, column `v * Q + q`.
    pub pred: Var,
    /// `[B, n_static]`.
    pub static_weights: Option<Array2<f64>>,
    /// `[P * B, n_past_features]`.
    pub past_weights: Array2<f64>,
    /// `[H * B, n_future_features]`.
    pub future_weights: Array2<f64>,
    /// Head-averaged attention of each future position, `[H * B, P + H]`.
    pub attention: Array2<f64>,
}

enum Source<'a> {
    Init(&'a mut ModelParams, ChaCha8Rng),
    Use(&'a ModelParams),
}

/// Builder that records layers on a tape, pulling (or creating) named
/// parameters as they are first used.
pub struct Net<'a> {
    pub tape: &'a mut Tape,
    source: Source<'a>,
    cache: HashMap<usize, Var>,
    hidden: usize,
    dropout: Option<(f64, &'a mut ChaCha8Rng)>,
}

impl<'a> Net<'a> {
    /// Uses existing parameters. Dropout is applied only when `dropout` is
    /// given with a positive rate.
    pub fn new(
        tape: &'a mut Tape,
        params: &'a ModelParams,
        hidden: usize,
        dropout: Option<(f64, &'a mut ChaCha8Rng)>,
    ) -> Self {
        Self {
            tape,
            source: Source::Use(params),
            cache: HashMap::new(),
            hidden,
            dropout: dropout.filter(|(p, _)| *p > 0.0),
        }
    }

    /// Creates parameters on first use, drawing initial values from `seed`.
    pub fn initializing(tape: &'a mut Tape, params: &'a mut ModelParams, hidden: usize, seed: u64) -> Self {
        Self {
            tape,
            source: Source::Init(params, ChaCha8Rng::seed_from_u64(seed)),
            cache: HashMap::new(),
            hidden,
            dropout: None,
        }
    }

    pub fn param(&mut self, name: &str, rows: usize, cols: usize, init: Init) -> Result<Var, ModelError> {
        let idx = match &mut self.source {
            Source::Use(p) => p
                .lookup(name)
                .ok_or_else(|| ModelError::Config(format!("missing parameter `{name}`")))?,
            Source::Init(p, rng) => match p.lookup(name) {
                Some(i) => i,
                None => {
                    let v = init.sample(rows, cols, rng);
                    p.insert(name.to_string(), v)
                }
            },
        };
        if let Some(&v) = self.cache.get(&idx) {
            return Ok(v);
        }
        let value = match &self.source {
            Source::Use(p) => p.value(idx),
            Source::Init(p, _) => p.value(idx),
        };
        if value.dim() != (rows, cols) {
            return Err(ModelError::Config(format!(
                "parameter `{name}` has shape {:?}, layer expects {:?}",
                value.dim(),
                (rows, cols)
            )));
        }
        let v = self.tape.param(idx, value.clone());
        self.cache.insert(idx, v);
        Ok(v)
    }

    fn cols(&self, x: Var) -> usize {
        self.tape.shape(x).1
    }

    pub fn linear(&mut self, name: &str, x: Var, out: usize, bias: bool) -> Result<Var, ModelError> {
        let w = self.param(&format!("{name}.w"), self.cols(x), out, Init::Xavier)?;
        let y = self.tape.matmul(x, w);
        if bias {
            let b = self.param(&format!("{name}.b"), 1, out, Init::Zeros)?;
            Ok(self.tape.add_row(y, b))
        } else {
            Ok(y)
        }
    }

    pub fn layer_norm(&mut self, name: &str, x: Var) -> Result<Var, ModelError> {
        let d = self.cols(x);
        let g = self.param(&format!("{name}.gamma"), 1, d, Init::Ones)?;
        let b = self.param(&format!("{name}.beta"), 1, d, Init::Zeros)?;
        Ok(self.tape.layer_norm(x, g, b))
    }

    pub fn dropout(&mut self, x: Var) -> Var {
        let Some((p, rng)) = self.dropout.as_mut() else {
            return x;
        };
        let keep = 1.0 - *p;
        let shape = self.tape.shape(x);
        let mask = Array2::from_shape_simple_fn(shape, || {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        self.tape.mul_const(x, Rc::new(mask))
    }

    /// Gated linear unit: `sigmoid(W1 x + b1) * (W2 x + b2)`.
    pub fn glu(&mut self, name: &str, x: Var, out: usize) -> Result<Var, ModelError> {
        let gate = self.linear(&format!("{name}.gate"), x, out, true)?;
        let gate = self.tape.sigmoid(gate);
        let lin = self.linear(&format!("{name}.lin"), x, out, true)?;
        Ok(self.tape.mul(gate, lin))
    }

    /// `LayerNorm(skip + GLU(dropout(x)))`.
    pub fn gate_add_norm(&mut self, name: &str, x: Var, skip: Var) -> Result<Var, ModelError> {
        let x = self.dropout(x);
        let out = self.cols(skip);
        let g = self.glu(&format!("{name}.glu"), x, out)?;
        let s = self.tape.add(g, skip);
        self.layer_norm(&format!("{name}.ln"), s)
    }

    /// Gated residual network with optional context.
    pub fn grn(&mut self, name: &str, x: Var, context: Option<Var>, out: usize) -> Result<Var, ModelError> {
        let h = self.hidden;
        let skip = if self.cols(x) != out {
            self.linear(&format!("{name}.skip"), x, out, true)?
        } else {
            x
        };
        let mut a = self.linear(&format!("{name}.fc1"), x, h, true)?;
        if let Some(c) = context {
            if self.tape.shape(c).0 != self.tape.shape(x).0 {
                return Err(ModelError::Config(format!("`{name}`: context rows differ from input rows")));
            }
            let cw = self.linear(&format!("{name}.ctx"), c, h, false)?;
            a = self.tape.add(a, cw);
        }
        let a = self.tape.elu(a);
        let b = self.linear(&format!("{name}.fc2"), a, h, true)?;
        self.gate_add_norm(&format!("{name}.out"), b, skip)
    }

    /// Softmax-weighted combination of per-variable GRN outputs. Returns the
    /// combined representation and the `[rows, n]` selection weights.
    pub fn variable_selection(
        &mut self,
        name: &str,
        embeddings: &[Var],
        context: Option<Var>,
    ) -> Result<(Var, Array2<f64>), ModelError> {
        let n = embeddings.len();
        if n == 0 {
            return Err(ModelError::Config(format!("`{name}` has no inputs")));
        }
        let h = self.hidden;
        let rows = self.tape.shape(embeddings[0]).0;
        if n == 1 {
            let only = self.grn(&format!("{name}.var0"), embeddings[0], None, h)?;
            return Ok((only, Array2::ones((rows, 1))));
        }
        let flat = self.tape.concat_cols(embeddings);
        let logits = self.grn(&format!("{name}.flat"), flat, context, n)?;
        let weights = self.tape.softmax(logits);
        let mut combined = None;
        for (j, &e) in embeddings.iter().enumerate() {
            let processed = self.grn(&format!("{name}.var{j}"), e, None, h)?;
            let w = self.tape.slice_cols(weights, j, j + 1);
            let term = self.tape.mul_col(processed, w);
            combined = Some(match combined {
                None => term,
                Some(acc) => self.tape.add(acc, term),
            });
        }
        Ok((combined.expect("n >= 2"), self.tape.value(weights).clone()))
    }

    /// Interpretable multi-head attention: per-head query/key projections, a
    /// single value projection shared by all heads, head outputs and weights
    /// averaged. Query row block `i` is position `q_start + i`.
    #[allow(clippy::too_many_arguments)]
    pub fn interpretable_attention(
        &mut self,
        name: &str,
        queries: Var,
        keys: Var,
        values: Var,
        allowed: &[bool],
        batch: usize,
        q_start: usize,
        heads: usize,
    ) -> Result<(Var, Array2<f64>), ModelError> {
        let model = self.cols(values);
        let dk = model / heads;
        let v = self.linear(&format!("{name}.v"), values, dk, true)?;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut sum: Option<Var> = None;
        let mut weights: Option<Array2<f64>> = None;
        for head in 0..heads {
            let q = self.linear(&format!("{name}.q{head}"), queries, dk, true)?;
            let k = self.linear(&format!("{name}.k{head}"), keys, dk, true)?;
            let s = self.tape.attn_scores(q, k, batch, scale);
            let a = self.tape.masked_softmax(s, allowed, batch, q_start);
            let o = self.tape.attn_apply(a, v, batch);
            match weights.as_mut() {
                Some(w) => *w += self.tape.value(a),
                None => weights = Some(self.tape.value(a).clone()),
            }
            sum = Some(match sum {
                None => o,
                Some(acc) => self.tape.add(acc, o),
            });
        }
        let mean = self.tape.scale(sum.expect("heads >= 1"), 1.0 / heads as f64);
        let out = self.linear(&format!("{name}.out"), mean, model, true)?;
        Ok((out, weights.expect("heads >= 1") / heads as f64))
    }

    /// Single-layer LSTM over `steps` time-major blocks of `batch` rows.
    fn lstm(
        &mut self,
        name: &str,
        x: Var,
        steps: usize,
        batch: usize,
        mut h: Var,
        mut c: Var,
    ) -> Result<(Var, Var, Var), ModelError> {
        let d = self.hidden;
        let xw = self.linear(&format!("{name}.ih"), x, 4 * d, true)?;
        let whh = self.param(&format!("{name}.hh.w"), d, 4 * d, Init::Xavier)?;
        let mut outs = Vec::with_capacity(steps);
        for t in 0..steps {
            let xt = self.tape.slice_rows(xw, t * batch, (t + 1) * batch);
            let hw = self.tape.matmul(h, whh);
            let z = self.tape.add(xt, hw);
            let i = self.tape.slice_cols(z, 0, d);
            let i = self.tape.sigmoid(i);
            let f = self.tape.slice_cols(z, d, 2 * d);
            let f = self.tape.sigmoid(f);
            let g = self.tape.slice_cols(z, 2 * d, 3 * d);
            let g = self.tape.tanh(g);
            let o = self.tape.slice_cols(z, 3 * d, 4 * d);
            let o = self.tape.sigmoid(o);
            let fc = self.tape.mul(f, c);
            let ig = self.tape.mul(i, g);
            c = self.tape.add(fc, ig);
            let tc = self.tape.tanh(c);
            h = self.tape.mul(o, tc);
            outs.push(h);
        }
        let out = self.tape.concat_rows(&outs);
        Ok((out, h, c))
    }

    fn check(&self, v: Var, path: &str) -> Result<(), ModelError> {
        if self.tape.value(v).iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(ModelError::NonFinite(path.to_string()))
        }
    }

    fn broadcast(&mut self, x: Var, steps: usize, batch: usize) -> Var {
        let index: Vec<usize> = (0..steps * batch).map(|r| r % batch).collect();
        self.tape.gather_rows(x, Rc::new(index))
    }

    /// Full network on one batch.
    pub fn forward(&mut self, config: &ModelConfig, batch: &Batch) -> Result<ForwardOutput, ModelError> {
        let h = self.hidden;
        let b = batch.size;
        let (p, hz) = (config.past_len, config.horizon);
        let t_all = p + hz;

        // static covariate encoders
        let (contexts, static_weights) = if config.statics.is_empty() {
            (None, None)
        } else {
            let mut emb = Vec::with_capacity(config.statics.len());
            for (name, col) in config.statics.iter().zip(&batch.statics) {
                let x = self.tape.leaf(col.clone());
                emb.push(self.linear(&format!("static.emb.{name}"), x, h, true)?);
            }
            let (xi, w) = self.variable_selection("static_vsn", &emb, None)?;
            let sel = self.grn("ctx.selection", xi, None, h)?;
            let enr = self.grn("ctx.enrichment", xi, None, h)?;
            let st_h = self.grn("ctx.state_h", xi, None, h)?;
            let st_c = self.grn("ctx.state_c", xi, None, h)?;
            self.check(sel, "static_encoder")?;
            (Some([sel, enr, st_h, st_c]), Some(w))
        };

        // temporal variable selection
        let past_names = config.past_features();
        let mut past_emb = Vec::with_capacity(past_names.len());
        for (name, col) in past_names.iter().zip(&batch.past) {
            let x = self.tape.leaf(col.clone());
            past_emb.push(self.linear(&format!("emb.{name}"), x, h, true)?);
        }
        let fut_names = config.future_features();
        let mut fut_emb = Vec::with_capacity(fut_names.len());
        for (name, col) in fut_names.iter().zip(&batch.future) {
            let x = self.tape.leaf(col.clone());
            fut_emb.push(self.linear(&format!("emb.{name}"), x, h, true)?);
        }
        let (ctx_past, ctx_fut) = match contexts {
            Some([sel, ..]) => (Some(self.broadcast(sel, p, b)), Some(self.broadcast(sel, hz, b))),
            None => (None, None),
        };
        let (past_sel, past_weights) = self.variable_selection("past_vsn", &past_emb, ctx_past)?;
        let (fut_sel, future_weights) = self.variable_selection("future_vsn", &fut_emb, ctx_fut)?;
        self.check(past_sel, "past_vsn")?;

        // sequence-to-sequence
        let (h0, c0) = match contexts {
            Some([_, _, sh, sc]) => (sh, sc),
            None => {
                let z = self.tape.leaf(Array2::zeros((b, h)));
                (z, z)
            }
        };
        let (enc, he, ce) = self.lstm("encoder", past_sel, p, b, h0, c0)?;
        let (dec, _, _) = self.lstm("decoder", fut_sel, hz, b, he, ce)?;
        let lstm_out = self.tape.concat_rows(&[enc, dec]);
        let selected = self.tape.concat_rows(&[past_sel, fut_sel]);
        let temporal = self.gate_add_norm("post_lstm", lstm_out, selected)?;
        self.check(temporal, "seq2seq")?;

        // static enrichment
        let ctx_enr = match contexts {
            Some([_, enr, ..]) => Some(self.broadcast(enr, t_all, b)),
            None => None,
        };
        let enriched = self.grn("enrichment", temporal, ctx_enr, h)?;
        self.check(enriched, "enrichment")?;

        // attention from each future position over the whole window
        let queries = self.tape.slice_rows(enriched, p * b, t_all * b);
        let allowed = config.causal_mask();
        let (attn, attention) = self.interpretable_attention(
            "attention",
            queries,
            enriched,
            enriched,
            &allowed,
            b,
            p,
            config.num_heads,
        )?;
        let x = self.gate_add_norm("post_attention", attn, queries)?;
        self.check(x, "attention")?;

        let ff = self.grn("position_ff", x, None, h)?;
        let temporal_future = self.tape.slice_rows(temporal, p * b, t_all * b);
        let fin = self.gate_add_norm("pre_output", ff, temporal_future)?;
        let pred = self.linear(
            "output",
            fin,
            config.num_targets() * config.quantiles.len(),
            true,
        )?;
        self.check(pred, "output")?;

        Ok(ForwardOutput {
            pred,
            static_weights,
            past_weights,
            future_weights,
            attention,
        })
    }
}

/// Creates freshly initialised parameters for `config`.
pub fn init_params(config: &ModelConfig) -> Result<ModelParams, ModelError> {
    config.validate()?;
    let probe = probe_batch(config);
    let mut params = ModelParams::default();
    let mut tape = Tape::new();
    let mut net = Net::initializing(&mut tape, &mut params, config.hidden_size, config.seed);
    net.forward(config, &probe)?;
    Ok(params)
}

fn probe_batch(config: &ModelConfig) -> Batch {
    let (p, h) = (config.past_len, config.horizon);
    Batch {
        size: 1,
        statics: config.statics.iter().map(|_| Array2::zeros((1, 1))).collect(),
        past: config
            .past_features()
            .iter()
            .map(|_| Array2::zeros((p, 1)))
            .collect(),
        future: config
            .future_features()
            .iter()
            .map(|_| Array2::zeros((h, 1)))
            .collect(),
        targets: Array2::zeros((h, config.num_targets())),
        mask: Array2::from_elem((h, config.num_targets()), false),
    }
}

/// Runs the network on `batch`; `rng` enables dropout in [`Mode::Train`].
pub fn forward<'a>(
    tape: &'a mut Tape,
    params: &'a ModelParams,
    config: &ModelConfig,
    batch: &Batch,
    mode: Mode,
    rng: Option<&'a mut ChaCha8Rng>,
) -> Result<ForwardOutput, ModelError> {
    let dropout = match (mode, rng) {
        (Mode::Train, Some(r)) => Some((config.dropout, r)),
        _ => None,
    };
    let mut net = Net::new(tape, params, config.hidden_size, dropout);
    net.forward(config, batch)
}

/// Appends the masked loss of `pred` to the tape; returns the scalar node
/// holding the summed loss and its breakdown.
pub fn loss_node(
    tape: &mut Tape,
    pred: Var,
    batch: &Batch,
    quantiles: &[f64],
) -> Result<(Var, LossBreakdown), ModelError> {
    let (breakdown, grad) = objective::masked_loss_time_major(
        tape.value(pred),
        &batch.targets,
        &batch.mask,
        batch.size,
        quantiles,
    )?;
    let node = tape.linearized(pred, breakdown.total, grad);
    Ok((node, breakdown))
}

/// Forecasts of one window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastSet {
    pub encounter_id: String,
    pub targets: Vec<String>,
    pub quantiles: Vec<f64>,
    /// `values[v][q][t]`.
    pub values: Vec<Vec<Vec<f64>>>,
    pub static_weights: Option<Vec<f64>>,
    /// `[t][feature]` over the past block.
    pub past_weights: Vec<Vec<f64>>,
    /// `[t][feature]` over the forecast block.
    pub future_weights: Vec<Vec<f64>>,
    /// `[t][position]` for each forecast step over the whole window.
    pub attention: Vec<Vec<f64>>,
}

impl ForecastSet {
    pub fn target_index(&self, name: &str) -> Option<usize> {
        self.targets.iter().position(|t| t == name)
    }

    pub fn quantile_index(&self, q: f64) -> Option<usize> {
        self.quantiles.iter().position(|&x| (x - q).abs() < 1e-12)
    }

    /// Median trajectory of `target` (quantile closest to 0.5).
    pub fn median(&self, target: usize) -> &[f64] {
        let qi = self
            .quantiles
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - 0.5).abs().total_cmp(&(b.1 - 0.5).abs()))
            .map_or(0, |(i, _)| i);
        &self.values[target][qi]
    }

    pub fn horizon(&self) -> usize {
        self.values.first().and_then(|v| v.first()).map_or(0, Vec::len)
    }
}

fn rows_of(a: &Array2<f64>, step: usize, count: usize, batch: usize, i: usize) -> Vec<Vec<f64>> {
    (0..count).map(|t| a.row((step + t) * batch + i).to_vec()).collect()
}

/// Splits a forward pass into per-window forecasts, mapping predictions back
/// to original units with `norm`.
pub fn collect_forecasts(
    tape: &Tape,
    out: &ForwardOutput,
    config: &ModelConfig,
    windows: &[&WindowSample],
    norm: &NormStats,
) -> Vec<ForecastSet> {
    let b = windows.len();
    let pred = tape.value(out.pred);
    let nq = config.quantiles.len();
    windows
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let values = config
                .targets
                .iter()
                .enumerate()
                .map(|(v, name)| {
                    (0..nq)
                        .map(|q| {
                            (0..config.horizon)
                                .map(|t| norm.denormalize(name, pred[[t * b + i, v * nq + q]]))
                                .collect()
                        })
                        .collect()
                })
                .collect();
            ForecastSet {
                encounter_id: w.encounter_id.clone(),
                targets: config.targets.clone(),
                quantiles: config.quantiles.clone(),
                values,
                static_weights: out.static_weights.as_ref().map(|s| s.row(i).to_vec()),
                past_weights: rows_of(&out.past_weights, 0, config.past_len, b, i),
                future_weights: rows_of(&out.future_weights, 0, config.horizon, b, i),
                attention: rows_of(&out.attention, 0, config.horizon, b, i),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::timegrid::MaskedSeries;
    use std::collections::BTreeMap;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            hidden_size: 8,
            num_heads: 2,
            dropout: 0.3,
            quantiles: DEFAULT_QUANTILES.to_vec(),
            targets: vec!["a".into(), "b".into()],
            past_inputs: vec!["a".into(), "b".into(), "med".into()],
            known_future: vec!["med".into()],
            statics: vec!["s1".into(), "s2".into()],
            past_len: 6,
            horizon: 3,
            seed: 7,
        }
    }

    pub(crate) fn window(config: &ModelConfig, seed: u64) -> WindowSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ser = |n: usize| MaskedSeries {
            values: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
            is_real: (0..n).map(|k| k % 3 != 1).collect(),
        };
        let past: BTreeMap<_, _> = config.past_inputs.iter().map(|n| (n.clone(), ser(config.past_len))).collect();
        let targets_future = config.targets.iter().map(|n| (n.clone(), ser(config.horizon))).collect();
        let future_known = config
            .known_future
            .iter()
            .map(|n| (n.clone(), ser(config.horizon).values))
            .collect();
        let statics = config.statics.iter().enumerate().map(|(i, n)| (n.clone(), i as f64 * 0.5 - 0.2)).collect();
        WindowSample {
            encounter_id: format!("w{seed}"),
            statics,
            past,
            future_known,
            targets_future,
        }
    }

    fn run(config: &ModelConfig, params: &ModelParams, ws: &[WindowSample]) -> Array2<f64> {
        let refs: Vec<&WindowSample> = ws.iter().collect();
        let batch = Batch::from_windows(&refs, config).unwrap();
        let mut tape = Tape::new();
        let out = forward(&mut tape, params, config, &batch, Mode::Eval, None).unwrap();
        tape.value(out.pred).clone()
    }

    #[test]
    fn forecast_shape_and_determinism() {
        let config = tiny_config();
        let params = init_params(&config).unwrap();
        let ws: Vec<_> = (0..3).map(|s| window(&config, s)).collect();
        let a = run(&config, &params, &ws);
        let b = run(&config, &params, &ws);
        assert_eq!(a.dim(), (3 * 3, 2 * 3));
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));

        let refs: Vec<&WindowSample> = ws.iter().collect();
        let batch = Batch::from_windows(&refs, &config).unwrap();
        let mut tape = Tape::new();
        let out = forward(&mut tape, &params, &config, &batch, Mode::Eval, None).unwrap();
        let sets = collect_forecasts(&tape, &out, &config, &refs, &NormStats::default());
        assert_eq!(sets.len(), 3);
        for s in &sets {
            assert_eq!(s.values.len(), 2);
            assert!(s.values.iter().all(|q| q.len() == 3 && q.iter().all(|t| t.len() == 3)));
        }
    }

    #[test]
    fn single_target_config_has_univariate_shape() {
        let mut config = tiny_config();
        config.targets = vec!["a".into()];
        config.past_inputs = vec!["a".into()];
        config.known_future.clear();
        config.statics.clear();
        let params = init_params(&config).unwrap();
        let p = run(&config, &params, &[window(&config, 1)]);
        assert_eq!(p.dim(), (3, 3));
    }

    #[test]
    fn batch_composition_does_not_change_forecasts() {
        let config = tiny_config();
        let params = init_params(&config).unwrap();
        let ws: Vec<_> = (0..4).map(|s| window(&config, s)).collect();
        let joint = run(&config, &params, &ws);
        let alone = run(&config, &params, &ws[2..3]);
        for t in 0..3 {
            for c in 0..6 {
                assert!((joint[[t * 4 + 2, c]] - alone[[t, c]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn selection_and_attention_weights_are_distributions() {
        let config = tiny_config();
        let params = init_params(&config).unwrap();
        let ws: Vec<_> = (0..3).map(|s| window(&config, s)).collect();
        let refs: Vec<&WindowSample> = ws.iter().collect();
        let batch = Batch::from_windows(&refs, &config).unwrap();
        let mut tape = Tape::new();
        let out = forward(&mut tape, &params, &config, &batch, Mode::Eval, None).unwrap();
        let sw = out.static_weights.as_ref().unwrap();
        for w in [sw, &out.past_weights, &out.future_weights] {
            for row in w.outer_iter() {
                assert!((row.sum() - 1.0).abs() < 1e-6);
                assert!(row.iter().all(|&x| x >= 0.0));
            }
        }
        let t_all = config.seq_len();
        for (r, row) in out.attention.outer_iter().enumerate() {
            let pos = config.past_len + r / 3;
            assert!((row.sum() - 1.0).abs() < 1e-6);
            for j in pos + 1..t_all {
                assert_eq!(row[j], 0.0);
            }
        }
    }

    #[test]
    fn dropout_only_in_train_mode() {
        let config = tiny_config();
        let params = init_params(&config).unwrap();
        let ws = [window(&config, 3)];
        let refs: Vec<&WindowSample> = ws.iter().collect();
        let batch = Batch::from_windows(&refs, &config).unwrap();
        let eval = run(&config, &params, &ws);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let out = forward(&mut tape, &params, &config, &batch, Mode::Train, Some(&mut rng)).unwrap();
        assert_ne!(tape.value(out.pred), &eval);
        let mut tape = Tape::new();
        let out = forward(&mut tape, &params, &config, &batch, Mode::Eval, Some(&mut rng)).unwrap();
        assert_eq!(tape.value(out.pred), &eval);
    }

    #[test]
    fn grn_zero_weights_reduce_to_normalised_skip() {
        let mut params = ModelParams::default();
        let mut tape = Tape::new();
        let x = {
            let mut net = Net::initializing(&mut tape, &mut params, 4, 0);
            let x = net.tape.leaf(Array2::zeros((2, 3)));
            net.grn("g", x, None, 4).unwrap();
            x
        };
        let _ = x;
        for i in 0..params.len() {
            params.value_mut(i).fill(0.0);
        }
        // zero skip weights with a bias make the skip path non-trivial
        params.get_mut("g.skip.b").unwrap().assign(&ndarray::array![[1.0, 2.0, 3.0, 6.0]]);
        params.get_mut("g.out.ln.gamma").unwrap().fill(1.0);
        let mut tape = Tape::new();
        let mut net = Net::new(&mut tape, &params, 4, None);
        let x = net.tape.leaf(Array2::zeros((2, 3)));
        let y = net.grn("g", x, None, 4).unwrap();
        let out = tape.value(y).clone();
        let skip = [1.0, 2.0, 3.0, 6.0];
        let mean = 3.0;
        let var = skip.iter().map(|v: &f64| (v - mean).powi(2)).sum::<f64>() / 4.0;
        for r in 0..2 {
            for c in 0..4 {
                let expect = (skip[c] - mean) / (var + 1e-5).sqrt();
                assert!((out[[r, c]] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn grn_gradient_matches_central_differences() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = Array2::from_shape_simple_fn((3, 5), || rng.random_range(-1.0..1.0));
        let c0 = Array2::from_shape_simple_fn((3, 4), || rng.random_range(-1.0..1.0));
        let w = std::rc::Rc::new(Array2::from_shape_simple_fn((3, 4), || rng.random_range(-1.0..1.0)));
        let mut params = ModelParams::default();
        {
            let mut tape = Tape::new();
            let mut net = Net::initializing(&mut tape, &mut params, 4, 5);
            let x = net.tape.leaf(x0.clone());
            let c = net.tape.leaf(c0.clone());
            net.grn("g", x, Some(c), 4).unwrap();
        }
        for i in 0..params.len() {
            params.value_mut(i).mapv_inplace(|v| v + rng.random_range(-0.3..0.3));
        }
        let objective = |params: &ModelParams| {
            let mut tape = Tape::new();
            let mut net = Net::new(&mut tape, params, 4, None);
            let x = net.tape.leaf(x0.clone());
            let c = net.tape.leaf(c0.clone());
            let y = net.grn("g", x, Some(c), 4).unwrap();
            let root = tape.mul_const(y, w.clone());
            let value = tape.value(root).sum();
            (tape, root, value)
        };
        let (tape, root, _) = objective(&params);
        let grads = tape.backward(root);
        let mut analytic = params.zeros_like();
        for (idx, g) in grads.params() {
            if let Some(g) = g {
                analytic[idx] += g;
            }
        }
        let eps = 1e-4;
        for i in 0..params.len() {
            for k in 0..params.value(i).len() {
                let mut plus = params.clone();
                plus.value_mut(i).as_slice_mut().unwrap()[k] += eps;
                let mut minus = params.clone();
                minus.value_mut(i).as_slice_mut().unwrap()[k] -= eps;
                let numeric = (objective(&plus).2 - objective(&minus).2) / (2.0 * eps);
                let a = analytic[i].as_slice().unwrap()[k];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(rel < 1e-4, "{}[{k}]: {a} vs {numeric}", params.name(i));
            }
        }
    }

    #[test]
    fn variable_selection_examples() {
        // single variable
        let mut params = ModelParams::default();
        let mut tape = Tape::new();
        let mut net = Net::initializing(&mut tape, &mut params, 4, 3);
        let e = net.tape.leaf(Array2::from_elem((5, 4), 0.3));
        let (_, w) = net.variable_selection("vs", &[e], None).unwrap();
        assert!(w.iter().all(|&x| x == 1.0));

        // duplicated variable with tied parameters
        let mut params = ModelParams::default();
        let mut tape = Tape::new();
        let mut net = Net::initializing(&mut tape, &mut params, 4, 3);
        let e = net.tape.leaf(Array2::from_shape_fn((5, 4), |(i, j)| (i * 4 + j) as f64 * 0.1));
        net.variable_selection("vs", &[e, e], None).unwrap();
        // tie the flattened GRN so both halves of the input see equal weights
        for (a, b) in [("vs.flat.fc1.w", 4), ("vs.flat.skip.w", 4)] {
            let w = params.get_mut(a).unwrap();
            let top = w.slice(ndarray::s![0..b, ..]).to_owned();
            w.slice_mut(ndarray::s![b..2 * b, ..]).assign(&top);
        }
        for name in ["vs.flat.skip.w", "vs.flat.out.glu.gate.w", "vs.flat.out.glu.lin.w"] {
            let w = params.get_mut(name).unwrap();
            let c0 = w.column(0).to_owned();
            w.column_mut(1).assign(&c0);
        }
        for name in ["vs.flat.skip.b", "vs.flat.out.glu.gate.b", "vs.flat.out.glu.lin.b", "vs.flat.out.ln.gamma", "vs.flat.out.ln.beta"] {
            let w = params.get_mut(name).unwrap();
            let c0 = w[[0, 0]];
            w[[0, 1]] = c0;
        }
        let mut tape = Tape::new();
        let mut net = Net::new(&mut tape, &params, 4, None);
        let e = net.tape.leaf(Array2::from_shape_fn((5, 4), |(i, j)| (i * 4 + j) as f64 * 0.1));
        let (_, w) = net.variable_selection("vs", &[e, e], None).unwrap();
        for row in w.outer_iter() {
            assert!((row[0] - 0.5).abs() < 1e-12 && (row[1] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_restricted_to_self() {
        let mut params = ModelParams::default();
        let mut tape = Tape::new();
        let seq = 4;
        let batch = 2;
        let allowed: Vec<bool> = (0..seq * seq).map(|k| k / seq == k % seq).collect();
        let xs = Array2::from_shape_fn((seq * batch, 4), |(i, j)| ((i * 7 + j * 3) % 5) as f64 * 0.2 - 0.4);
        let mut net = Net::initializing(&mut tape, &mut params, 4, 9);
        let x = net.tape.leaf(xs.clone());
        let (out, w) = net
            .interpretable_attention("att", x, x, x, &allowed, batch, 0, 2)
            .unwrap();
        let v = net.linear("att.v", x, 2, true).unwrap();
        let vo = net.linear("att.out", v, 4, true).unwrap();
        for r in 0..seq * batch {
            let i = r / batch;
            for j in 0..seq {
                assert_eq!(w[[r, j]], if i == j { 1.0 } else { 0.0 });
            }
        }
        let (a, b) = (tape.value(out), tape.value(vo));
        assert!(a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn masked_positions_content_is_irrelevant() {
        let mut params = ModelParams::default();
        let seq = 5;
        let batch = 1;
        let allowed: Vec<bool> = (0..seq * seq).map(|k| k % seq <= k / seq).collect();
        let base = Array2::from_shape_fn((seq, 4), |(i, j)| (i as f64 - j as f64) * 0.3);
        let mut tape = Tape::new();
        let q = Array2::from_shape_fn((2, 4), |(i, j)| (i + j) as f64 * 0.1);
        {
            let mut net = Net::initializing(&mut tape, &mut params, 4, 2);
            let qv = net.tape.leaf(q.clone());
            let kv = net.tape.leaf(base.clone());
            net.interpretable_attention("att", qv, kv, kv, &allowed, batch, 1, 2).unwrap();
        }
        let run = |kv_arr: &Array2<f64>| {
            let mut tape = Tape::new();
            let mut net = Net::new(&mut tape, &params, 4, None);
            let qv = net.tape.leaf(q.clone());
            let kv = net.tape.leaf(kv_arr.clone());
            let (o, _) = net.interpretable_attention("att", qv, kv, kv, &allowed, batch, 1, 2).unwrap();
            tape.value(o).clone()
        };
        // queries are positions 1 and 2; positions 3 and 4 are masked for both
        let mut swapped = base.clone();
        let r3 = base.row(3).to_owned();
        swapped.row_mut(3).assign(&base.row(4));
        swapped.row_mut(4).assign(&r3);
        assert_eq!(run(&base), run(&swapped));
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_config();
        c.num_heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.quantiles = vec![0.5, 0.1];
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.targets = vec!["zzz".into()];
        assert!(c.validate().is_err());
        assert_ne!(tiny_config().fingerprint(), {
            let mut c = tiny_config();
            c.hidden_size = 16;
            c.fingerprint()
        });
    }
}
