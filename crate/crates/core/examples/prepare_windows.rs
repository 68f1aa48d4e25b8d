//! Irregular events to fixed-grid windows: resampling, cohort split,
//! forward/zero fill with observation masks, and normalisation.

use tftmulti::synthdata::{generate_cohort, SynthConfig};
use tftmulti::timegrid::{fit_normalizer, prepare_dataset, PrepareOptions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cohort = generate_cohort(&SynthConfig {
        n_encounters: 40,
        seed: 3,
        ..SynthConfig::default()
    })?;
    let opts = PrepareOptions {
        past_len: 36,
        horizon: 25,
        ..PrepareOptions::default()
    };
    let ds = prepare_dataset(&cohort.events, &cohort.statics, &cohort.schema, &opts)?;
    print!("{}", ds.report);
    println!("train {} / test {} windows", ds.train.len(), ds.test.len());

    let w = &ds.train[0];
    println!("window {} (past {} bins, horizon {})", w.encounter_id, w.past_len(), w.horizon());
    for (name, s) in &w.past {
        let real = s.is_real.iter().filter(|&&r| r).count();
        println!("  {name:<8} {real:>2}/{} bins observed, last value {:.2}", s.len(), s.values[s.len() - 1]);
    }
    println!("  leading-gap fill values (train medians): {:?}", ds.fill_values);

    let norm = fit_normalizer(&ds.train, &ds.schema);
    for (name, (mean, sd)) in &norm.stats {
        println!("  {name:<8} mean {mean:>7.2} sd {sd:>5.2}");
    }
    Ok(())
}
