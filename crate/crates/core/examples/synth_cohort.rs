//! Generates a synthetic ICU cohort and reports what was emitted.
//!
//! `cargo run --example synth_cohort -- [out_dir]` also writes the events,
//! statics and schema files that `tftm prepare` reads.

use std::collections::BTreeMap;

use tftmulti::synthdata::{generate_cohort, spectral_radius, SynthConfig, VITALS};
use tftmulti::timegrid::{write_events, write_statics};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = SynthConfig {
        n_encounters: 32,
        pressor_known_future: true,
        seed: 7,
        ..SynthConfig::default()
    };
    let cohort = generate_cohort(&cfg)?;
    println!(
        "{} encounters x {} bins of {} min, spectral radius {:.3}",
        cfg.n_encounters,
        cfg.bins,
        cfg.bin_minutes,
        spectral_radius(&cfg.companion())
    );

    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for e in &cohort.events {
        *counts.entry(e.variable.as_str()).or_default() += 1;
    }
    let cells = (cfg.n_encounters * cfg.bins) as f64;
    for v in VITALS {
        let n = counts.get(v).copied().unwrap_or(0);
        println!(
            "{v:<8} {n:>5} events, observed share {:.2} (configured missingness {:.2})",
            n as f64 / cells,
            cfg.missingness.get(v).copied().unwrap_or(0.0)
        );
    }
    let treated = cohort.truth.values().filter(|t| t.pressor.contains(&1)).count();
    let hf = cohort.truth.values().filter(|t| t.heart_failure).count();
    println!("{treated} encounters ever on pressors, {hf} with heart failure");

    if let Some(dir) = std::env::args().nth(1) {
        let dir = std::path::Path::new(&dir);
        std::fs::create_dir_all(dir)?;
        write_events(&dir.join("events.csv"), &cohort.events)?;
        write_statics(&dir.join("statics.csv"), &cohort.schema.statics(), &cohort.statics)?;
        std::fs::write(dir.join("schema.json"), serde_json::to_string_pretty(&cohort.schema.variables)?)?;
        println!("wrote cohort files to {}", dir.display());
    }
    Ok(())
}
