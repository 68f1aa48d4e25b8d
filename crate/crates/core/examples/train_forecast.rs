//! Trains a small multivariate forecaster and prints one subject's
//! quantile forecast.

use tftmulti::synthdata::{generate_cohort, SynthConfig};
use tftmulti::tft::ModelConfig;
use tftmulti::timegrid::{prepare_dataset, PrepareOptions};
use tftmulti::trainer::{train_with_progress, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cohort = generate_cohort(&SynthConfig {
        n_encounters: 96,
        bins: 50,
        seed: 1,
        ..SynthConfig::default()
    })?;
    let opts = PrepareOptions {
        past_len: 25,
        ..PrepareOptions::default()
    };
    let ds = prepare_dataset(&cohort.events, &cohort.statics, &cohort.schema, &opts)?;

    let mut mc = ModelConfig::from_schema(&ds.schema, ds.past_len, ds.horizon);
    mc.hidden_size = 16;
    mc.dropout = 0.1;
    let tc = TrainConfig {
        learning_rate: 3e-3,
        batch_size: 32,
        max_epochs: 15,
        patience: 5,
        ..TrainConfig::default()
    };
    let outcome = train_with_progress(&ds.train, &ds.schema, &mc, &tc, |rec, best| {
        println!(
            "epoch {:>2} train {:.4} val {:.4}{}",
            rec.epoch,
            rec.train_loss,
            rec.val_loss,
            if best.is_some() { " (best)" } else { "" }
        );
    })?;
    println!(
        "best epoch {}, {} weights, fingerprint {}",
        outcome.best_epoch,
        outcome.model.params.num_scalars(),
        &outcome.model.fingerprint[..12]
    );

    let f = &outcome.model.forecast(&ds.test[..1])?[0];
    let v = f.target_index("mean_bp").expect("mean_bp is a target");
    let truth = &ds.test[0].targets_future["mean_bp"];
    println!("mean_bp forecast for {}:", f.encounter_id);
    println!("step    q10    q50    q90  truth");
    for t in 0..f.horizon() {
        let obs = if truth.is_real[t] { format!("{:6.1}", truth.values[t]) } else { "     -".into() };
        println!(
            "{t:>4} {:6.1} {:6.1} {:6.1} {obs}",
            f.values[v][0][t], f.values[v][1][t], f.values[v][2][t]
        );
    }
    Ok(())
}
