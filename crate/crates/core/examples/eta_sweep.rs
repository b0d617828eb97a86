//! Sweeps the number of guidance segments on the ring preset. One model is
//! trained and shared by every cell.
//!
//! cargo run --release --example eta_sweep [OUT_DIR]

use std::path::PathBuf;

use crdi::workbench::config::ExperimentConfig;
use crdi::workbench::experiment::{presets, run_sweep, SWEEP_FILE};

fn main() -> crdi::error::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("crdi-eta-sweep"));
    let mut cfg = presets::eta_sweep(&ExperimentConfig::ring());
    cfg.run.out = Some(out.clone());
    println!("{:>4}  {:>9}  {:>9}", "eta", "Fréchet", "diversity");
    for cell in run_sweep(&cfg)? {
        println!(
            "{:>4}  {:>9.4}  {:>9.4}",
            cell.value, cell.report.frechet, cell.report.intra_diversity
        );
    }
    println!("table: {}", out.join(SWEEP_FILE).display());
    Ok(())
}
