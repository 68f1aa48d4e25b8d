//! Masked MAE/MAPE, per-subject interval coverage and Bland-Altman
//! agreement for a trained model against a last-value baseline.

use tftmulti::metrics::{evaluate_records, forecast_records, PredictionRecord};
use tftmulti::synthdata::{generate_cohort, SynthConfig};
use tftmulti::tft::ModelConfig;
use tftmulti::timegrid::{prepare_dataset, PrepareOptions};
use tftmulti::trainer::{train, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cohort = generate_cohort(&SynthConfig {
        n_encounters: 160,
        bins: 50,
        seed: 2,
        ..SynthConfig::default()
    })?;
    let ds = prepare_dataset(
        &cohort.events,
        &cohort.statics,
        &cohort.schema,
        &PrepareOptions {
            past_len: 25,
            ..PrepareOptions::default()
        },
    )?;
    let mut mc = ModelConfig::from_schema(&ds.schema, ds.past_len, ds.horizon);
    mc.hidden_size = 16;
    mc.dropout = 0.1;
    let tc = TrainConfig {
        learning_rate: 3e-3,
        batch_size: 64,
        max_epochs: 30,
        patience: 8,
        ..TrainConfig::default()
    };
    let model = train(&ds.train, &ds.schema, &mc, &tc)?.model;

    let forecasts = model.forecast(&ds.test)?;
    let truth: Vec<_> = ds
        .test
        .iter()
        .map(|w| {
            mc.targets
                .iter()
                .map(|t| (w.targets_future[t].values.clone(), w.targets_future[t].is_real.clone()))
                .unzip()
        })
        .collect();
    let records = forecast_records(&forecasts, &truth);
    let report = evaluate_records(&records);

    let last_value: Vec<PredictionRecord> = ds
        .test
        .iter()
        .flat_map(|w| {
            mc.targets.iter().flat_map(move |t| {
                let last = *w.past[t].values.last().expect("non-empty past");
                let s = &w.targets_future[t];
                (0..s.len()).map(move |step| PredictionRecord {
                    subject: w.encounter_id.clone(),
                    variable: t.clone(),
                    step,
                    truth: s.values[step],
                    mask: s.is_real[step],
                    q10: None,
                    q50: last,
                    q90: None,
                })
            })
        })
        .collect();
    let naive = evaluate_records(&last_value);

    println!("{} test subjects, crossing rate {:?}", report.subjects, report.crossing_rate);
    println!("variable     MAE  naive   MAPE%  coverage(q1/med/q3)      BA bias  LoA");
    for v in &report.variables {
        let n = naive.variable(&v.variable).and_then(|r| r.mae).unwrap_or(f64::NAN);
        let cov = v.coverage.as_ref().and_then(|c| c.quartiles).unwrap_or([f64::NAN; 3]);
        let ba = v.bland_altman.as_ref();
        println!(
            "{:<8} {:>7.3} {:>6.3} {:>7.2}  {:.2}/{:.2}/{:.2}  {:>9.3}  [{:.2}, {:.2}]",
            v.variable,
            v.mae.unwrap_or(f64::NAN),
            n,
            v.mape.value.unwrap_or(f64::NAN),
            cov[0],
            cov[1],
            cov[2],
            ba.map_or(f64::NAN, |b| b.mean_diff),
            ba.map_or(f64::NAN, |b| b.loa_low),
            ba.map_or(f64::NAN, |b| b.loa_high),
        );
    }
    Ok(())
}
