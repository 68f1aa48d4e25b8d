//! Masked evaluation metrics.
//!
//! Every metric looks only at bins whose mask is `true`; values stored at
//! masked positions never influence a result. Metrics are computed in
//! original units.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use thiserror::Error;

use crate::tft::ForecastSet;

/// Bland-Altman limits lie this many standard deviations from the mean.
pub const LOA_Z: f64 = 1.96;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("length mismatch: {0}")]
    Shape(String),
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("differences have zero variance")]
    Degenerate,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

fn check_len(a: usize, b: usize, c: usize) -> Result<(), MetricError> {
    if a == b && b == c {
        Ok(())
    } else {
        Err(MetricError::Shape(format!("{a}, {b} and {c} elements")))
    }
}

/// Pooled mean absolute error over real positions; `None` when nothing is
/// observed.
pub fn masked_mae(pred: &[f64], truth: &[f64], mask: &[bool]) -> Result<Option<f64>, MetricError> {
    check_len(pred.len(), truth.len(), mask.len())?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..pred.len() {
        if mask[i] {
            sum += (truth[i] - pred[i]).abs();
            n += 1;
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mape {
    /// Percentage; absent when no real position has nonzero truth.
    pub value: Option<f64>,
    pub used: usize,
    /// Real positions skipped because the truth was exactly zero.
    pub zero_truth_excluded: usize,
}

pub fn masked_mape(pred: &[f64], truth: &[f64], mask: &[bool]) -> Result<Mape, MetricError> {
    check_len(pred.len(), truth.len(), mask.len())?;
    let mut sum = 0.0;
    let mut used = 0usize;
    let mut excluded = 0usize;
    for i in 0..pred.len() {
        if !mask[i] {
            continue;
        }
        if truth[i] == 0.0 {
            excluded += 1;
            continue;
        }
        sum += (truth[i] - pred[i]).abs() / truth[i].abs();
        used += 1;
    }
    Ok(Mape {
        value: (used > 0).then(|| 100.0 * sum / used as f64),
        used,
        zero_truth_excluded: excluded,
    })
}

/// Fraction of real points inside the closed band `[lower, upper]`; `None`
/// when the subject has no real points.
pub fn coverage_fraction(
    lower: &[f64],
    upper: &[f64],
    truth: &[f64],
    mask: &[bool],
) -> Result<Option<f64>, MetricError> {
    check_len(lower.len(), upper.len(), truth.len())?;
    check_len(lower.len(), mask.len(), mask.len())?;
    let mut inside = 0usize;
    let mut n = 0usize;
    for i in 0..truth.len() {
        if mask[i] {
            n += 1;
            if lower[i] <= truth[i] && truth[i] <= upper[i] {
                inside += 1;
            }
        }
    }
    Ok((n > 0).then(|| inside as f64 / n as f64))
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageSummary {
    pub fractions: Vec<f64>,
    /// First, second and third quartile of `fractions`.
    pub quartiles: Option<[f64; 3]>,
    /// Subjects without any real point.
    pub excluded: usize,
}

impl CoverageSummary {
    pub fn from_fractions(fractions: Vec<Option<f64>>) -> Self {
        let excluded = fractions.iter().filter(|f| f.is_none()).count();
        let fractions: Vec<f64> = fractions.into_iter().flatten().collect();
        let mut sorted = fractions.clone();
        sorted.sort_by(f64::total_cmp);
        let quartiles = (!sorted.is_empty()).then(|| {
            [0.25, 0.5, 0.75].map(|q| quantile_sorted(&sorted, q).expect("non-empty"))
        });
        Self {
            fractions,
            quartiles,
            excluded,
        }
    }

    pub fn median(&self) -> Option<f64> {
        self.quartiles.map(|q| q[1])
    }
}

fn sample_sd(xs: &[f64], mean: f64) -> f64 {
    let ss: f64 = xs.iter().map(|x| (x - mean).powi(2)).sum();
    (ss / (xs.len() - 1) as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlandAltman {
    pub mean_diff: f64,
    pub sd: f64,
    pub loa_low: f64,
    pub loa_high: f64,
    /// Plot points `(mean of pred and truth, pred - truth)`.
    pub points: Vec<(f64, f64)>,
}

pub fn bland_altman(pred: &[f64], truth: &[f64], mask: &[bool]) -> Result<BlandAltman, MetricError> {
    check_len(pred.len(), truth.len(), mask.len())?;
    let points: Vec<(f64, f64)> = (0..pred.len())
        .filter(|&i| mask[i])
        .map(|i| ((pred[i] + truth[i]) / 2.0, pred[i] - truth[i]))
        .collect();
    if points.len() < 2 {
        return Err(MetricError::TooFewPoints {
            needed: 2,
            got: points.len(),
        });
    }
    let d: Vec<f64> = points.iter().map(|p| p.1).collect();
    let mean_diff = d.iter().sum::<f64>() / d.len() as f64;
    let sd = sample_sd(&d, mean_diff);
    Ok(BlandAltman {
        mean_diff,
        sd,
        loa_low: mean_diff - LOA_Z * sd,
        loa_high: mean_diff + LOA_Z * sd,
        points,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub statistic: f64,
    pub p_value: f64,
    pub df: f64,
}

/// Two-sided p-value of a Student t statistic.
pub fn t_two_sided_p(statistic: f64, df: f64) -> f64 {
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    (2.0 * dist.cdf(-statistic.abs())).min(1.0)
}

/// Paired t-test of `mean(a - b) = 0`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::Shape(format!("{} vs {} values", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(MetricError::TooFewPoints {
            needed: 2,
            got: a.len(),
        });
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let sd = sample_sd(&d, mean);
    if !(sd > 1e-12 * mean.abs().max(1.0)) {
        return Err(MetricError::Degenerate);
    }
    let statistic = mean / (sd / n.sqrt());
    let df = n - 1.0;
    Ok(TTest {
        statistic,
        p_value: t_two_sided_p(statistic, df),
        df,
    })
}

/// Fraction of `(target, step)` cells whose quantile trajectory is not
/// monotone in the quantile level. Ties are not crossings.
pub fn crossing_rate(f: &ForecastSet) -> f64 {
    let mut order: Vec<usize> = (0..f.quantiles.len()).collect();
    order.sort_by(|&a, &b| f.quantiles[a].total_cmp(&f.quantiles[b]));
    let h = f.horizon();
    let cells = f.values.len() * h;
    if cells == 0 {
        return 0.0;
    }
    let mut crossed = 0usize;
    for v in &f.values {
        for t in 0..h {
            if order.windows(2).any(|w| v[w[0]][t] > v[w[1]][t]) {
                crossed += 1;
            }
        }
    }
    crossed as f64 / cells as f64
}

/// One row of a prediction file. Baselines without quantiles leave the
/// bounds empty and put their point forecast in `q50`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub subject: String,
    pub variable: String,
    pub step: usize,
    pub truth: f64,
    pub mask: bool,
    pub q10: Option<f64>,
    pub q50: f64,
    pub q90: Option<f64>,
}

pub fn write_predictions(w: impl Write, records: &[PredictionRecord]) -> Result<(), MetricError> {
    let mut out = csv::Writer::from_writer(w);
    for r in records {
        out.serialize(r)?;
    }
    out.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_predictions(r: impl Read) -> Result<Vec<PredictionRecord>, MetricError> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

/// Flattens forecasts and their truth into prediction records. `truth[i]`
/// holds `(values[v][t], mask[v][t])` for `forecasts[i]`.
pub fn forecast_records(
    forecasts: &[ForecastSet],
    truth: &[(Vec<Vec<f64>>, Vec<Vec<bool>>)],
) -> Vec<PredictionRecord> {
    let mut out = Vec::new();
    for (f, (values, mask)) in forecasts.iter().zip(truth) {
        let lo = f.quantile_index(0.1);
        let hi = f.quantile_index(0.9);
        for (v, name) in f.targets.iter().enumerate() {
            let med = f.median(v);
            for t in 0..f.horizon() {
                out.push(PredictionRecord {
                    subject: f.encounter_id.clone(),
                    variable: name.clone(),
                    step: t,
                    truth: values[v][t],
                    mask: mask[v][t],
                    q10: lo.map(|q| f.values[v][q][t]),
                    q50: med[t],
                    q90: hi.map(|q| f.values[v][q][t]),
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableReport {
    pub variable: String,
    pub mae: Option<f64>,
    pub mape: Mape,
    pub real_count: usize,
    pub total_count: usize,
    /// Present when the records carry q10 and q90.
    pub coverage: Option<CoverageSummary>,
    pub bland_altman: Option<BlandAltman>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variables: Vec<VariableReport>,
    pub subjects: usize,
    /// Fraction of `(subject, variable, step)` cells with q10 > q50 or
    /// q50 > q90; absent without bounds.
    pub crossing_rate: Option<f64>,
}

impl EvalReport {
    pub fn variable(&self, name: &str) -> Option<&VariableReport> {
        self.variables.iter().find(|v| v.variable == name)
    }
}

/// Builds the report from prediction records, keeping the variable order of
/// first appearance.
pub fn evaluate_records(records: &[PredictionRecord]) -> EvalReport {
    let mut order: Vec<&str> = Vec::new();
    let mut by_var: BTreeMap<&str, Vec<&PredictionRecord>> = BTreeMap::new();
    for r in records {
        if !by_var.contains_key(r.variable.as_str()) {
            order.push(&r.variable);
        }
        by_var.entry(&r.variable).or_default().push(r);
    }
    let subjects: std::collections::BTreeSet<&str> = records.iter().map(|r| r.subject.as_str()).collect();
    let has_bounds = !records.is_empty() && records.iter().all(|r| r.q10.is_some() && r.q90.is_some());
    let variables = order
        .iter()
        .map(|name| {
            let rows = &by_var[name];
            let pred: Vec<f64> = rows.iter().map(|r| r.q50).collect();
            let truth: Vec<f64> = rows.iter().map(|r| r.truth).collect();
            let mask: Vec<bool> = rows.iter().map(|r| r.mask).collect();
            let coverage = has_bounds.then(|| {
                let mut per_subject: BTreeMap<&str, (Vec<f64>, Vec<f64>, Vec<f64>, Vec<bool>)> = BTreeMap::new();
                for r in rows {
                    let e = per_subject.entry(&r.subject).or_default();
                    e.0.push(r.q10.unwrap_or(f64::NAN));
                    e.1.push(r.q90.unwrap_or(f64::NAN));
                    e.2.push(r.truth);
                    e.3.push(r.mask);
                }
                CoverageSummary::from_fractions(
                    per_subject
                        .values()
                        .map(|(l, u, y, m)| coverage_fraction(l, u, y, m).expect("equal lengths"))
                        .collect(),
                )
            });
            VariableReport {
                variable: name.to_string(),
                mae: masked_mae(&pred, &truth, &mask).expect("equal lengths"),
                mape: masked_mape(&pred, &truth, &mask).expect("equal lengths"),
                real_count: mask.iter().filter(|&&m| m).count(),
                total_count: mask.len(),
                coverage,
                bland_altman: bland_altman(&pred, &truth, &mask).ok(),
            }
        })
        .collect();
    let crossing_rate = has_bounds.then(|| {
        let crossed = records
            .iter()
            .filter(|r| r.q10.is_some_and(|l| l > r.q50) || r.q90.is_some_and(|u| r.q50 > u))
            .count();
        crossed as f64 / records.len() as f64
    });
    EvalReport {
        variables,
        subjects: subjects.len(),
        crossing_rate,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn mae_examples() {
        let m = masked_mae(&[1.0, 6.0, 9.0], &[2.0, 4.0, 0.0], &[true, true, false]).unwrap();
        assert_eq!(m, Some(1.5));
        assert_eq!(masked_mae(&[3.0, 4.0], &[3.0, 4.0], &[true, true]).unwrap(), Some(0.0));
        assert_eq!(masked_mae(&[3.0], &[1.0], &[false]).unwrap(), None);
        assert!(masked_mae(&[1.0], &[1.0, 2.0], &[true]).is_err());
    }

    #[test]
    fn mape_examples() {
        let m = masked_mape(&[9.0], &[10.0], &[true]).unwrap();
        assert!((m.value.unwrap() - 10.0).abs() < 1e-12);
        let m = masked_mape(&[5.0], &[0.0], &[true]).unwrap();
        assert_eq!(m.value, None);
        assert_eq!(m.zero_truth_excluded, 1);
        let m = masked_mape(&[5.0, 6.0], &[4.0, 8.0], &[true, true]).unwrap();
        assert!((m.value.unwrap() - 25.0).abs() < 1e-12);
    }

    #[test]
    fn coverage_examples() {
        let truth = [1.0, 2.0, 3.0];
        let mask = [true; 3];
        let c = coverage_fraction(&[-1e9; 3], &[1e9; 3], &truth, &mask).unwrap();
        assert_eq!(c, Some(1.0));
        let c = coverage_fraction(&[1.0, 0.0, 0.0], &[5.0, 2.0, 2.0], &truth, &mask).unwrap();
        assert_eq!(c, Some(2.0 / 3.0));
        assert_eq!(coverage_fraction(&[0.0], &[1.0], &[0.5], &[false]).unwrap(), None);
        let s = CoverageSummary::from_fractions(vec![Some(0.0), None, Some(1.0), Some(0.5)]);
        assert_eq!(s.excluded, 1);
        assert_eq!(s.quartiles, Some([0.25, 0.5, 0.75]));
    }

    #[test]
    fn coverage_of_calibrated_gaussian_band() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let z = statrs::distribution::Normal::new(0.0, 1.0).unwrap().inverse_cdf(0.9);
        let n = 100_000;
        let truth: Vec<f64> = (0..n).map(|_| 3.0 + 2.0 * normal.sample(&mut rng)).collect();
        let lower = vec![3.0 - 2.0 * z; n];
        let upper = vec![3.0 + 2.0 * z; n];
        let c = coverage_fraction(&lower, &upper, &truth, &vec![true; n]).unwrap().unwrap();
        assert!((c - 0.8).abs() < 0.01, "{c}");
    }

    #[test]
    fn bland_altman_examples() {
        let b = bland_altman(&[1.0, 2.0], &[1.0, 2.0], &[true, true]).unwrap();
        assert_eq!((b.mean_diff, b.loa_low, b.loa_high), (0.0, 0.0, 0.0));
        let b = bland_altman(&[1.0, -1.0], &[0.0, 0.0], &[true, true]).unwrap();
        assert_eq!(b.mean_diff, 0.0);
        assert!((b.sd - 2f64.sqrt()).abs() < 1e-12);
        assert!((b.loa_high - 1.96 * 2f64.sqrt()).abs() < 1e-12);
        let b = bland_altman(&[4.0, 5.0, 9.0], &[1.0, 2.0, 6.0], &[true; 3]).unwrap();
        assert!((b.mean_diff - 3.0).abs() < 1e-12);
        assert!((b.loa_high - b.loa_low).abs() < 1e-12);
        assert!(matches!(
            bland_altman(&[1.0, 2.0], &[1.0, 2.0], &[true, false]),
            Err(MetricError::TooFewPoints { .. })
        ));
    }

    #[test]
    fn bland_altman_limits_hold_ninety_five_percent() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let normal = Normal::new(0.7, 2.0).unwrap();
        let n = 20_000;
        let d: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
        let b = bland_altman(&d, &vec![0.0; n], &vec![true; n]).unwrap();
        let inside = d.iter().filter(|&&x| b.loa_low <= x && x <= b.loa_high).count() as f64 / n as f64;
        assert!((inside - 0.95).abs() < 0.015, "{inside}");
    }

    #[test]
    fn paired_t_detects_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let eps = Normal::new(0.5, 0.1).unwrap();
        let b: Vec<f64> = (0..100).map(|_| rng.random_range(-3.0..3.0)).collect();
        let a: Vec<f64> = b.iter().map(|x| x + eps.sample(&mut rng)).collect();
        let t = paired_t_test(&a, &b).unwrap();
        assert!(t.statistic > 0.0 && t.p_value < 1e-10);
        assert!(matches!(paired_t_test(&b, &b), Err(MetricError::Degenerate)));
    }

    #[test]
    fn paired_t_type_one_rate() {
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut rejections = 0;
        for seed in 0..1000 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<f64> = (0..100).map(|_| normal.sample(&mut rng)).collect();
            let b: Vec<f64> = (0..100).map(|_| normal.sample(&mut rng)).collect();
            if paired_t_test(&a, &b).unwrap().p_value < 0.05 {
                rejections += 1;
            }
        }
        assert!((30..=70).contains(&rejections), "{rejections}");
    }

    /// Two-sided tail of the t density by composite Simpson quadrature on
    /// `[0, |t|]`.
    fn quadrature_two_sided_p(t: f64, df: f64) -> f64 {
        let ln_c = statrs::function::gamma::ln_gamma((df + 1.0) / 2.0)
            - statrs::function::gamma::ln_gamma(df / 2.0)
            - 0.5 * (df * std::f64::consts::PI).ln();
        let density = |x: f64| (ln_c - (df + 1.0) / 2.0 * (1.0 + x * x / df).ln()).exp();
        let n = 20_000;
        let h = t.abs() / n as f64;
        let mut s = density(0.0) + density(t.abs());
        for i in 1..n {
            s += density(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        let central = s * h / 3.0;
        1.0 - 2.0 * central
    }

    #[test]
    fn t_to_p_mapping_matches_quadrature() {
        for df in [50.0, 150.0, 500.0] {
            let p = t_two_sided_p(3.67, df);
            let oracle = quadrature_two_sided_p(3.67, df);
            assert!((p - oracle).abs() < 1e-9, "df {df}: {p} vs {oracle}");
            assert!((1e-4..6e-4).contains(&p), "df {df}: {p}");
        }
    }

    fn forecast(values: Vec<Vec<Vec<f64>>>) -> ForecastSet {
        ForecastSet {
            encounter_id: "e".into(),
            targets: (0..values.len()).map(|i| format!("v{i}")).collect(),
            quantiles: vec![0.1, 0.5, 0.9],
            values,
            static_weights: None,
            past_weights: vec![],
            future_weights: vec![],
            attention: vec![],
        }
    }

    #[test]
    fn crossing_rate_examples() {
        let mono = forecast(vec![vec![vec![0.0; 50], vec![1.0; 50], vec![2.0; 50]]; 2]);
        assert_eq!(crossing_rate(&mono), 0.0);
        let mut one = mono.clone();
        one.values[1][0][7] = 1.5;
        assert!((crossing_rate(&one) - 0.01).abs() < 1e-15);
        let tied = forecast(vec![vec![vec![1.0; 4]; 3]]);
        assert_eq!(crossing_rate(&tied), 0.0);
    }

    #[test]
    fn prediction_file_round_trip_and_report() {
        let records = vec![
            PredictionRecord {
                subject: "a".into(),
                variable: "bp".into(),
                step: 0,
                truth: 10.0,
                mask: true,
                q10: Some(8.0),
                q50: 10.0,
                q90: Some(12.0),
            },
            PredictionRecord {
                subject: "a".into(),
                variable: "bp".into(),
                step: 1,
                truth: 11.0,
                mask: false,
                q10: Some(8.0),
                q50: 10.0,
                q90: Some(12.0),
            },
            PredictionRecord {
                subject: "b".into(),
                variable: "bp".into(),
                step: 0,
                truth: 20.0,
                mask: true,
                q10: Some(9.0),
                q50: 20.0,
                q90: Some(12.0),
            },
        ];
        let mut buf = Vec::new();
        write_predictions(&mut buf, &records).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("subject,variable,step,truth,mask,q10,q50,q90\n"));
        let back = read_predictions(buf.as_slice()).unwrap();
        assert_eq!(back, records);
        let report = evaluate_records(&back);
        let bp = report.variable("bp").unwrap();
        assert_eq!(bp.mae, Some(0.0));
        assert_eq!(bp.real_count, 2);
        assert_eq!(report.subjects, 2);
        assert_eq!(bp.coverage.as_ref().unwrap().fractions, vec![1.0, 0.0]);
        assert!((report.crossing_rate.unwrap() - 1.0 / 3.0).abs() < 1e-15);

        let mut point_only = records.clone();
        for r in &mut point_only {
            r.q10 = None;
            r.q90 = None;
        }
        let mut buf = Vec::new();
        write_predictions(&mut buf, &point_only).unwrap();
        let report = evaluate_records(&read_predictions(buf.as_slice()).unwrap());
        assert!(report.crossing_rate.is_none());
        assert!(report.variables[0].coverage.is_none());
    }

    fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>, Vec<bool>)> {
        (1usize..40).prop_flat_map(|n| {
            (
                prop::collection::vec(-50.0..50.0f64, n),
                prop::collection::vec(0.0..10.0f64, n),
                prop::collection::vec(-50.0..50.0f64, n),
                prop::collection::vec(any::<bool>(), n),
            )
        })
    }

    proptest! {
        #[test]
        fn metrics_ignore_masked_values((pred, width, truth, mask) in instance(), junk in -1e3..1e3f64) {
            let lower: Vec<f64> = pred.iter().zip(&width).map(|(p, w)| p - w).collect();
            let upper: Vec<f64> = pred.iter().zip(&width).map(|(p, w)| p + w).collect();
            let mut pred2 = pred.clone();
            let mut truth2 = truth.clone();
            let mut lower2 = lower.clone();
            for i in 0..pred.len() {
                if !mask[i] {
                    pred2[i] = junk;
                    truth2[i] = -junk;
                    lower2[i] = junk * 2.0;
                }
            }
            prop_assert_eq!(masked_mae(&pred, &truth, &mask).unwrap(), masked_mae(&pred2, &truth2, &mask).unwrap());
            prop_assert_eq!(masked_mape(&pred, &truth, &mask).unwrap(), masked_mape(&pred2, &truth2, &mask).unwrap());
            prop_assert_eq!(
                coverage_fraction(&lower, &upper, &truth, &mask).unwrap(),
                coverage_fraction(&lower2, &upper, &truth2, &mask).unwrap()
            );
            let a = bland_altman(&pred, &truth, &mask).ok();
            let b = bland_altman(&pred2, &truth2, &mask).ok();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn widening_bounds_never_reduces_coverage((pred, width, truth, mask) in instance(), extra in 0.0..5.0f64) {
            let lower: Vec<f64> = pred.iter().zip(&width).map(|(p, w)| p - w).collect();
            let upper: Vec<f64> = pred.iter().zip(&width).map(|(p, w)| p + w).collect();
            let wl: Vec<f64> = lower.iter().map(|l| l - extra).collect();
            let wu: Vec<f64> = upper.iter().map(|u| u + extra).collect();
            let narrow = coverage_fraction(&lower, &upper, &truth, &mask).unwrap();
            let wide = coverage_fraction(&wl, &wu, &truth, &mask).unwrap();
            prop_assert!(wide >= narrow);
            if let Some(c) = wide {
                prop_assert!((0.0..=1.0).contains(&c));
            }
        }
    }
}
