//! Vector autoregression baseline and pairwise Granger screening.
//!
//! Series are `T x k` arrays (rows are time). Several encounters can be
//! pooled: lags never cross sequence boundaries.

use nalgebra::DMatrix;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor};
use thiserror::Error;

use crate::metrics::PredictionRecord;
use crate::timegrid::WindowSample;

#[derive(Debug, Error, PartialEq)]
pub enum BaselineError {
    #[error("design matrix is rank deficient; try a smaller order than {order}")]
    RankDeficient { order: usize },
    #[error("need more than {needed} observations, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("series have inconsistent widths or lengths: {0}")]
    Shape(String),
    #[error("residual variance is zero")]
    DegenerateVariance,
    #[error("history has {got} rows, order {order} needs at least that many")]
    ShortHistory { got: usize, order: usize },
    #[error("variable `{0}` missing from window")]
    MissingVariable(String),
}

/// `x_t = c + sum_j A_j x_{t-j} + e_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarModel {
    pub order: usize,
    pub k: usize,
    /// `coefficients[j][row][col]` is `A_{j+1}`.
    pub coefficients: Vec<Vec<Vec<f64>>>,
    pub intercept: Vec<f64>,
    /// Residual covariance with the degrees-of-freedom correction.
    pub sigma: Vec<Vec<f64>>,
    /// OLS standard errors in the layout of `coefficients`.
    pub std_errors: Vec<Vec<Vec<f64>>>,
    pub n_obs: usize,
}

/// Least-squares fit of `y` on `x` with the rank check shared by every
/// regression in this module.
struct Ols {
    beta: DMatrix<f64>,
    residuals: DMatrix<f64>,
    xtx_inv: DMatrix<f64>,
}

fn ols(x: &DMatrix<f64>, y: &DMatrix<f64>, order: usize) -> Result<Ols, BaselineError> {
    let xtx = x.transpose() * x;
    let sv = xtx.clone().singular_values();
    let max = sv.max();
    if !(max > 0.0) || sv.min() <= max * 1e-12 {
        return Err(BaselineError::RankDeficient { order });
    }
    let chol = xtx.cholesky().ok_or(BaselineError::RankDeficient { order })?;
    let beta = chol.solve(&(x.transpose() * y));
    let residuals = y - x * &beta;
    Ok(Ols {
        beta,
        residuals,
        xtx_inv: chol.inverse(),
    })
}

fn check_widths(seqs: &[&Array2<f64>]) -> Result<usize, BaselineError> {
    let k = seqs.first().map_or(0, |s| s.ncols());
    if k == 0 || seqs.iter().any(|s| s.ncols() != k) {
        return Err(BaselineError::Shape("expected equal, nonzero widths".into()));
    }
    Ok(k)
}

/// Lagged design rows `[1, x_{t-1}, ..., x_{t-p}]` and targets `x_t` for
/// `t >= start` of every sequence.
fn lagged_design(seqs: &[&Array2<f64>], p: usize, start: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let k = seqs[0].ncols();
    let rows: usize = seqs.iter().map(|s| s.nrows().saturating_sub(start)).sum();
    let m = 1 + k * p;
    let mut x = DMatrix::zeros(rows, m);
    let mut y = DMatrix::zeros(rows, k);
    let mut r = 0;
    for s in seqs {
        for t in start..s.nrows() {
            x[(r, 0)] = 1.0;
            for j in 0..p {
                for c in 0..k {
                    x[(r, 1 + j * k + c)] = s[[t - 1 - j, c]];
                }
            }
            for c in 0..k {
                y[(r, c)] = s[[t, c]];
            }
            r += 1;
        }
    }
    (x, y)
}

fn fit_from(seqs: &[&Array2<f64>], p: usize, start: usize) -> Result<(VarModel, DMatrix<f64>), BaselineError> {
    let k = check_widths(seqs)?;
    let (x, y) = lagged_design(seqs, p, start);
    let n = x.nrows();
    let m = x.ncols();
    if n <= m {
        return Err(BaselineError::TooShort { needed: m, got: n });
    }
    let fit = ols(&x, &y, p)?;
    let dof = (n - m) as f64;
    let sigma = fit.residuals.transpose() * &fit.residuals / dof;
    let coef = |j: usize, row: usize, col: usize| fit.beta[(1 + j * k + col, row)];
    let se = |j: usize, row: usize, col: usize| (sigma[(row, row)] * fit.xtx_inv[(1 + j * k + col, 1 + j * k + col)]).sqrt();
    let grid = |f: &dyn Fn(usize, usize, usize) -> f64| -> Vec<Vec<Vec<f64>>> {
        (0..p)
            .map(|j| (0..k).map(|r| (0..k).map(|c| f(j, r, c)).collect()).collect())
            .collect()
    };
    let model = VarModel {
        order: p,
        k,
        coefficients: grid(&coef),
        intercept: (0..k).map(|c| fit.beta[(0, c)]).collect(),
        sigma: (0..k).map(|r| (0..k).map(|c| sigma[(r, c)]).collect()).collect(),
        std_errors: grid(&se),
        n_obs: n,
    };
    Ok((model, fit.residuals))
}

/// Fits a VAR(p) on one or more sequences by equation-wise OLS.
pub fn fit_var_pooled(seqs: &[&Array2<f64>], p: usize) -> Result<VarModel, BaselineError> {
    fit_from(seqs, p, p).map(|(m, _)| m)
}

pub fn fit_var(series: &Array2<f64>, p: usize) -> Result<VarModel, BaselineError> {
    fit_var_pooled(&[series], p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderSelection {
    pub order: usize,
    /// `(p, AIC)` for every candidate, all on the same estimation sample.
    pub aic: Vec<(usize, f64)>,
}

/// Chooses the order in `1..=p_max` minimising AIC. Every candidate is
/// estimated on observations `t >= p_max` so the criteria are comparable.
pub fn select_order_pooled(seqs: &[&Array2<f64>], p_max: usize) -> Result<OrderSelection, BaselineError> {
    let p_max = p_max.max(1);
    let mut aic = Vec::with_capacity(p_max);
    for p in 1..=p_max {
        let (model, resid) = fit_from(seqs, p, p_max)?;
        let n = model.n_obs as f64;
        let k = model.k;
        let ml = resid.transpose() * &resid / n;
        let det = ml.determinant();
        if !(det > 0.0) {
            return Err(BaselineError::DegenerateVariance);
        }
        let params = (k * k * p + k) as f64;
        aic.push((p, det.ln() + 2.0 * params / n));
    }
    let order = aic
        .iter()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|a| a.0)
        .unwrap_or(1);
    Ok(OrderSelection { order, aic })
}

pub fn select_order(series: &Array2<f64>, p_max: usize) -> Result<OrderSelection, BaselineError> {
    select_order_pooled(&[series], p_max)
}

/// Iterated one-step forecasts from the last `order` rows of `history`.
/// Returns a `k x h` array.
pub fn var_forecast(model: &VarModel, history: &Array2<f64>, h: usize) -> Result<Array2<f64>, BaselineError> {
    let k = model.k;
    let p = model.order;
    if history.ncols() != k {
        return Err(BaselineError::Shape(format!("history has {} columns, model {k}", history.ncols())));
    }
    if history.nrows() < p {
        return Err(BaselineError::ShortHistory {
            got: history.nrows(),
            order: p,
        });
    }
    // lags[0] is the most recent row
    let mut lags: Vec<Vec<f64>> = (0..p).map(|j| history.row(history.nrows() - 1 - j).to_vec()).collect();
    let mut out = Array2::zeros((k, h));
    for step in 0..h {
        let mut next = model.intercept.clone();
        for (j, a) in model.coefficients.iter().enumerate() {
            for r in 0..k {
                for c in 0..k {
                    next[r] += a[r][c] * lags[j][c];
                }
            }
        }
        for r in 0..k {
            out[[r, step]] = next[r];
        }
        if p > 0 {
            lags.pop();
            lags.insert(0, next);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrangerResult {
    pub f_statistic: f64,
    pub p_value: f64,
    pub df_num: usize,
    pub df_den: usize,
}

fn lag_rows(xs: &[&[f64]], ys: &[&[f64]], p: usize, with_x: bool) -> (DMatrix<f64>, DMatrix<f64>) {
    let n: usize = ys.iter().map(|y| y.len().saturating_sub(p)).sum();
    let m = 1 + p + if with_x { p } else { 0 };
    let mut x = DMatrix::zeros(n, m);
    let mut y = DMatrix::zeros(n, 1);
    let mut r = 0;
    for (xs_i, ys_i) in xs.iter().zip(ys) {
        for t in p..ys_i.len() {
            x[(r, 0)] = 1.0;
            for j in 0..p {
                x[(r, 1 + j)] = ys_i[t - 1 - j];
                if with_x {
                    x[(r, 1 + p + j)] = xs_i[t - 1 - j];
                }
            }
            y[(r, 0)] = ys_i[t];
            r += 1;
        }
    }
    (x, y)
}

/// F-test of whether lags of `x` improve an AR(p) regression of `y`, pooled
/// over sequence pairs. The test uses the `n = sum(T_i - p)` usable rows, so
/// the denominator has `n - 2p - 1` degrees of freedom.
pub fn granger_test_pooled(xs: &[&[f64]], ys: &[&[f64]], p: usize) -> Result<GrangerResult, BaselineError> {
    if p == 0 || xs.len() != ys.len() || xs.iter().zip(ys).any(|(a, b)| a.len() != b.len()) {
        return Err(BaselineError::Shape("paired series must have equal lengths and p >= 1".into()));
    }
    let n: usize = ys.iter().map(|y| y.len().saturating_sub(p)).sum();
    if n <= 2 * p + 1 {
        return Err(BaselineError::TooShort {
            needed: 2 * p + 1,
            got: n,
        });
    }
    let (xr, y) = lag_rows(xs, ys, p, false);
    let (xu, _) = lag_rows(xs, ys, p, true);
    let rss = |x: &DMatrix<f64>| -> Result<f64, BaselineError> {
        let fit = ols(x, &y, p).map_err(|_| BaselineError::DegenerateVariance)?;
        Ok(fit.residuals.norm_squared())
    };
    let rss_r = rss(&xr)?;
    let rss_u = rss(&xu)?;
    let scale = y.iter().map(|v| v * v).sum::<f64>().max(f64::MIN_POSITIVE);
    if rss_u <= 1e-14 * scale {
        return Err(BaselineError::DegenerateVariance);
    }
    let df_den = n - 2 * p - 1;
    let f = ((rss_r - rss_u).max(0.0) / p as f64) / (rss_u / df_den as f64);
    let dist = FisherSnedecor::new(p as f64, df_den as f64).expect("positive degrees of freedom");
    Ok(GrangerResult {
        f_statistic: f,
        p_value: dist.sf(f),
        df_num: p,
        df_den,
    })
}

pub fn granger_test(x: &[f64], y: &[f64], p: usize) -> Result<GrangerResult, BaselineError> {
    granger_test_pooled(&[x], &[y], p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrangerRow {
    pub cause: String,
    pub effect: String,
    pub f_statistic: f64,
    pub p_value: f64,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrangerScreen {
    pub lag: usize,
    pub alpha: f64,
    pub tests: Vec<GrangerRow>,
    pub retained: Vec<String>,
    pub excluded: Vec<String>,
}

/// Tests every ordered pair, then repeatedly drops each variable with no
/// significant test in either direction against any still-retained
/// variable, until nothing changes. Degenerate pairs count as
/// non-significant.
pub fn granger_screen(names: &[String], seqs: &[&Array2<f64>], p: usize, alpha: f64) -> Result<GrangerScreen, BaselineError> {
    let k = check_widths(seqs)?;
    if names.len() != k {
        return Err(BaselineError::Shape(format!("{} names for {k} columns", names.len())));
    }
    let cols: Vec<Vec<Vec<f64>>> = (0..k)
        .map(|c| seqs.iter().map(|s| s.column(c).to_vec()).collect())
        .collect();
    let mut sig = vec![vec![false; k]; k];
    let mut tests = Vec::new();
    for cause in 0..k {
        for effect in 0..k {
            if cause == effect {
                continue;
            }
            let xs: Vec<&[f64]> = cols[cause].iter().map(Vec::as_slice).collect();
            let ys: Vec<&[f64]> = cols[effect].iter().map(Vec::as_slice).collect();
            let (f, pv) = match granger_test_pooled(&xs, &ys, p) {
                Ok(r) => (r.f_statistic, r.p_value),
                Err(BaselineError::DegenerateVariance) => (f64::NAN, 1.0),
                Err(e) => return Err(e),
            };
            sig[cause][effect] = pv < alpha;
            tests.push(GrangerRow {
                cause: names[cause].clone(),
                effect: names[effect].clone(),
                f_statistic: f,
                p_value: pv,
                significant: pv < alpha,
            });
        }
    }
    let mut keep = vec![true; k];
    loop {
        let drop: Vec<usize> = (0..k)
            .filter(|&v| keep[v])
            .filter(|&v| !(0..k).any(|u| u != v && keep[u] && (sig[v][u] || sig[u][v])))
            .collect();
        // a round that would empty the model keeps what is left
        if drop.is_empty() || drop.len() == keep.iter().filter(|&&x| x).count() {
            break;
        }
        for v in drop {
            keep[v] = false;
        }
    }
    Ok(GrangerScreen {
        lag: p,
        alpha,
        tests,
        retained: (0..k).filter(|&v| keep[v]).map(|v| names[v].clone()).collect(),
        excluded: (0..k).filter(|&v| !keep[v]).map(|v| names[v].clone()).collect(),
    })
}

/// Stacks the filled past and future target values of a window as a
/// `(P + H) x k` array.
pub fn window_series(w: &WindowSample, variables: &[String]) -> Result<Array2<f64>, BaselineError> {
    let past = w.past_len();
    let h = w.targets_future.values().next().map_or(0, |s| s.len());
    let mut out = Array2::zeros((past + h, variables.len()));
    for (c, name) in variables.iter().enumerate() {
        let p = w.past.get(name).ok_or_else(|| BaselineError::MissingVariable(name.clone()))?;
        let f = w
            .targets_future
            .get(name)
            .ok_or_else(|| BaselineError::MissingVariable(name.clone()))?;
        for (t, v) in p.values.iter().chain(&f.values).enumerate() {
            out[[t, c]] = *v;
        }
    }
    Ok(out)
}

/// Point forecasts of `model` on every window, as prediction records with
/// empty bounds. `variables` are the model's columns in order; truth and
/// mask come from the window's future targets.
pub fn var_prediction_records(
    model: &VarModel,
    windows: &[WindowSample],
    variables: &[String],
) -> Result<Vec<PredictionRecord>, BaselineError> {
    let mut out = Vec::new();
    for w in windows {
        let full = window_series(w, variables)?;
        let past = w.past_len();
        let h = full.nrows() - past;
        let history = full.slice(ndarray::s![..past, ..]).to_owned();
        let fc = var_forecast(model, &history, h)?;
        for (c, name) in variables.iter().enumerate() {
            let truth = &w.targets_future[name];
            for t in 0..h {
                out.push(PredictionRecord {
                    subject: w.encounter_id.clone(),
                    variable: name.clone(),
                    step: t,
                    truth: truth.values[t],
                    mask: truth.is_real[t],
                    q10: None,
                    q50: fc[[c, t]],
                    q90: None,
                });
            }
        }
    }
    Ok(out)
}

/// Residual orthogonality check used by tests: `max |X^T e|` relative to
/// `max |X| * max |e| * rows`.
#[doc(hidden)]
pub fn normal_equation_residual(series: &Array2<f64>, p: usize) -> Result<f64, BaselineError> {
    let (x, y) = lagged_design(&[series], p, p);
    let fit = ols(&x, &y, p)?;
    let xte = x.transpose() * &fit.residuals;
    let scale = x.amax() * fit.residuals.amax() * x.nrows() as f64;
    Ok(xte.amax() / scale.max(f64::MIN_POSITIVE))
}
