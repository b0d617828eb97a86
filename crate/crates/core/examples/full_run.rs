//! The whole pipeline on a preset, as `crdi run` does it: train, fit,
//! reconstruct, generate, evaluate, with every artifact and a manifest
//! written to the output directory.
//!
//! cargo run --release --example full_run [sprites|ring] [OUT_DIR]

use std::path::PathBuf;

use crdi::workbench::config::ExperimentConfig;
use crdi::workbench::experiment::{load_report, run_experiment};

fn main() -> crdi::error::Result<()> {
    let mut args = std::env::args().skip(1);
    let preset = args.next().unwrap_or_else(|| "ring".into());
    let mut cfg = match preset.as_str() {
        "sprites" => ExperimentConfig::sprites(),
        "ring" => ExperimentConfig::ring(),
        other => return Err(crdi::error::Error::Config(format!("unknown preset {other:?}"))),
    };
    let out = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join(format!("crdi-{preset}")));
    cfg.run.out = Some(out.clone());

    let manifest = run_experiment(&cfg)?;
    let report = load_report(&out)?;
    println!("{}", report.header);
    println!("{}", report.to_json()?);
    println!("artifacts in {}:", out.display());
    for (name, path) in &manifest.artifacts {
        println!("  {name:<16} {}", path.display());
    }
    Ok(())
}
