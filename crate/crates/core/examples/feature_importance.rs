//! Dataset-level variable importance from the selection networks and the
//! attention profile over lags.

use tftmulti::importance::model_importance;
use tftmulti::synthdata::{generate_cohort, SynthConfig};
use tftmulti::tft::ModelConfig;
use tftmulti::timegrid::{prepare_dataset, PrepareOptions};
use tftmulti::trainer::{train, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cohort = generate_cohort(&SynthConfig {
        n_encounters: 128,
        bins: 50,
        heart_failure_pulse: 25.0,
        seed: 4,
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
        max_epochs: 25,
        patience: 8,
        ..TrainConfig::default()
    };
    let model = train(&ds.train, &ds.schema, &mc, &tc)?.model;

    let (statics, temporal, lags) = model_importance(&model, &ds.test)?;
    println!("static importance over {} subjects:", statics.count);
    statics.write_tsv(&mut std::io::stdout())?;
    println!("\ntemporal importance over {} time steps:", temporal.count);
    temporal.write_tsv(&mut std::io::stdout())?;
    println!("\nmean attention by lag (first 10):");
    for (lag, w) in lags.weights.iter().take(10).enumerate() {
        println!("  {lag:>2} {w:.4} {}", "#".repeat((w * 200.0) as usize));
    }
    Ok(())
}
