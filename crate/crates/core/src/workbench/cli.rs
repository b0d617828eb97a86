//! Command-line front end. Each subcommand runs one stage against an output
//! directory, reading earlier stages' artifacts from it.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::diffusion::NoiseNet;
use crate::error::{Error, Result};
use crate::sampler::GuidanceSource;
use crate::sge::SgeSet;
use crate::workbench::config::{ExperimentConfig, Variant};
use crate::workbench::experiment::{
    evaluate_stage, few_shot_targets, fit_stage, generate_stage, load_model, presets,
    reconstruct_stage, run_experiment, run_label, run_sweep, train_source_stage, GENERATED_FILE,
    LOSS_FILE, METRICS_FILE, MODEL_FILE, RECONSTRUCTIONS_FILE, REPORT_FILE, SGE_FILE, SWEEP_FILE,
    TARGETS_FILE,
};
use crate::workbench::formats::{read_samples, write_grid, write_samples};
use crate::metrics::{MetricsReport, CSV_HEADER};
use crate::numerics::Tensor;

pub const THREADS_ENV: &str = "CRDI_THREADS";

#[derive(Parser, Debug)]
#[command(name = "crdi", version, about = "Few-shot diffusion adaptation with per-sample guidance embeddings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Preset {
    Sprites,
    Ring,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SweepPreset {
    Eta,
    K,
    Ablation,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Experiment config (TOML). Without it the preset is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "sprites")]
    pub preset: Preset,
    /// Overrides `run.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `run.out`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train the source model; writes model.crdn and the loss trace.
    TrainSource(Common),
    /// Fit one guidance embedding per target sample; writes sge.crds.
    FitSge(Common),
    /// Generate samples from the fitted embeddings; writes generated.crdt.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
    },
    /// Reconstruct each fitted target; writes reconstructions.crdt.
    Reconstruct(Common),
    /// Score the generated (and reconstructed) samples; writes report.json.
    Evaluate(Common),
    /// Run every cell of the config's sweep section, or a preset sweep.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        axis: Option<SweepPreset>,
    },
    /// Collect the reports under the output directory into one table.
    Report(Common),
    /// All stages end to end, with a run manifest.
    Run(Common),
    /// Print the resolved config as TOML.
    ShowConfig(Common),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum VariantArg {
    Full,
    NoSge,
    NoPerturbation,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Full => Variant::Full,
            VariantArg::NoSge => Variant::NoSge,
            VariantArg::NoPerturbation => Variant::NoPerturbation,
        }
    }
}

impl Common {
    /// The config with command-line overrides applied and validated.
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => match self.preset {
                Preset::Sprites => ExperimentConfig::sprites(),
                Preset::Ring => ExperimentConfig::ring(),
            },
        };
        if let Some(seed) = self.seed {
            cfg.run.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.run.out = Some(out.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn out_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cfg
        .run
        .out
        .clone()
        .ok_or_else(|| Error::Config("no output directory: pass --out or set run.out".into()))?;
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn model_for(cfg: &ExperimentConfig, dir: &Path) -> Result<NoiseNet> {
    let path = match &cfg.model.checkpoint {
        Some(p) => p.clone(),
        None => dir.join(MODEL_FILE),
    };
    if !path.exists() {
        return Err(Error::Config(format!(
            "no model at {}; run train-source first or set model.checkpoint",
            path.display()
        )));
    }
    load_model(cfg, &path)
}

fn sge_for(dir: &Path) -> Result<SgeSet> {
    let path = dir.join(SGE_FILE);
    if !path.exists() {
        return Err(Error::Config(format!("no embeddings at {}; run fit-sge first", path.display())));
    }
    SgeSet::load(&path)
}

fn save_samples(dir: &Path, file: &str, xs: &[Tensor], columns: usize) -> Result<()> {
    let path = dir.join(file);
    write_samples(&path, xs)?;
    println!("wrote {} ({} samples)", path.display(), xs.len());
    if xs.first().is_some_and(|x| x.rank() == 2) {
        let grid = path.with_extension("pgm");
        write_grid(&grid, xs, columns)?;
        println!("wrote {}", grid.display());
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn print_report(label: &str, r: &MetricsReport) {
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    println!(
        "{label}: mean SSIM {} | MC-SSIM {} | Fréchet {:.4} | intra-diversity {:.4}{}",
        opt(r.mean_ssim),
        opt(r.mc_ssim),
        r.frechet,
        r.intra_diversity,
        if r.diversity_degenerate { " (degenerate)" } else { "" }
    );
}

fn train_source_cmd(c: &Common) -> Result<()> {
    let cfg = c.resolve()?;
    let dir = out_dir(&cfg)?;
    let out = train_source_stage(&cfg)?;
    out.net.save(&dir.join(MODEL_FILE))?;
    println!("wrote {}", dir.join(MODEL_FILE).display());
    let mut csv = String::from("step,loss\n");
    for (i, l) in out.loss_trace.iter().enumerate() {
        csv.push_str(&format!("{i},{l:.17e}\n"));
    }
    write_text(&dir.join(LOSS_FILE), &csv)?;
    let tail = &out.loss_trace[out.loss_trace.len().saturating_sub(100)..];
    if !tail.is_empty() {
        println!("mean loss over the last {} steps: {:.4}", tail.len(), tail.iter().sum::<f64>() / tail.len() as f64);
    }
    Ok(())
}

fn fit_sge_cmd(c: &Common) -> Result<()> {
    let cfg = c.resolve()?;
    let dir = out_dir(&cfg)?;
    let net = model_for(&cfg, &dir)?;
    save_samples(&dir, TARGETS_FILE, &few_shot_targets(&cfg)?, cfg.generate.columns)?;
    let set = fit_stage(&cfg, &net)?;
    set.save(&dir.join(SGE_FILE), cfg.schedule.steps)?;
    println!("wrote {}", dir.join(SGE_FILE).display());
    for m in set.members() {
        println!(
            "sample {}: final loss {:.4}",
            m.sample_id().unwrap_or_default(),
            m.meta().final_loss
        );
    }
    Ok(())
}

fn generate_cmd(c: &Common, variant: Option<VariantArg>) -> Result<()> {
    let mut cfg = c.resolve()?;
    if let Some(v) = variant {
        cfg = cfg.with_variant(v.into());
    }
    let dir = out_dir(&cfg)?;
    let net = model_for(&cfg, &dir)?;
    let set = match cfg.generate.guidance {
        GuidanceSource::None => None,
        _ => Some(sge_for(&dir)?),
    };
    let xs = generate_stage(&cfg, &net, set.as_ref())?;
    save_samples(&dir, GENERATED_FILE, &xs, cfg.generate.columns)
}

fn reconstruct_cmd(c: &Common) -> Result<()> {
    let cfg = c.resolve()?;
    let dir = out_dir(&cfg)?;
    let net = model_for(&cfg, &dir)?;
    let set = sge_for(&dir)?;
    let xs = reconstruct_stage(&cfg, &net, &set)?;
    save_samples(&dir, RECONSTRUCTIONS_FILE, &xs, cfg.generate.columns)
}

fn evaluate_cmd(c: &Common) -> Result<()> {
    let cfg = c.resolve()?;
    let dir = out_dir(&cfg)?;
    let gen_path = dir.join(GENERATED_FILE);
    if !gen_path.exists() {
        return Err(Error::Config(format!("no samples at {}; run generate first", gen_path.display())));
    }
    let generated = read_samples(&gen_path)?;
    let rec_path = dir.join(RECONSTRUCTIONS_FILE);
    let reconstructions = if rec_path.exists() {
        read_samples(&rec_path)?
    } else {
        Vec::new()
    };
    let report = evaluate_stage(&cfg, &generated, &reconstructions)?;
    write_text(&dir.join(REPORT_FILE), &report.to_json()?)?;
    let label = run_label(&cfg);
    write_text(
        &dir.join(METRICS_FILE),
        &format!("{CSV_HEADER}\n{}\n", report.csv_row(&label)),
    )?;
    print_report(&label, &report);
    Ok(())
}

fn sweep_cmd(c: &Common, axis: Option<SweepPreset>) -> Result<()> {
    let mut cfg = c.resolve()?;
    cfg = match axis {
        Some(SweepPreset::Eta) => presets::eta_sweep(&cfg),
        Some(SweepPreset::K) => presets::k_shot(&cfg),
        Some(SweepPreset::Ablation) => presets::ablation(&cfg),
        None => cfg,
    };
    out_dir(&cfg)?;
    let cells = run_sweep(&cfg)?;
    for cell in &cells {
        print_report(&format!("{}={}", cell.axis, cell.value), &cell.report);
    }
    if let Some(dir) = &cfg.run.out {
        println!("wrote {}", dir.join(SWEEP_FILE).display());
    }
    Ok(())
}

/// Report files under `dir`, at most one level deep, in path order.
fn find_reports(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    if dir.join(REPORT_FILE).exists() {
        found.push(dir.join(REPORT_FILE));
    }
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() && path.join(REPORT_FILE).exists() {
            found.push(path.join(REPORT_FILE));
        }
    }
    found.sort();
    Ok(found)
}

fn report_cmd(c: &Common) -> Result<()> {
    let cfg = c.resolve()?;
    let dir = out_dir(&cfg)?;
    let reports = find_reports(&dir)?;
    if reports.is_empty() {
        return Err(Error::Config(format!("no {REPORT_FILE} under {}", dir.display())));
    }
    let mut csv = format!("{CSV_HEADER},config_hash\n");
    for path in &reports {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let report: MetricsReport = serde_json::from_str(&text)?;
        let parent = path.parent().unwrap_or(&dir);
        let label = match parent.strip_prefix(&dir) {
            Ok(p) if !p.as_os_str().is_empty() => p.display().to_string(),
            _ => ".".to_string(),
        };
        print_report(&label, &report);
        csv.push_str(&format!(
            "{},{}\n",
            report.csv_row(&label),
            report.config_hash.as_deref().unwrap_or("")
        ));
    }
    if let Some(first) = reports.first() {
        let text = std::fs::read_to_string(first).map_err(|e| Error::io(first, e))?;
        let r: MetricsReport = serde_json::from_str(&text)?;
        println!("{}", r.header);
    }
    write_text(&dir.join("summary.csv"), &csv)
}

fn run_cmd(c: &Common) -> Result<()> {
    let cfg = c.resolve()?;
    out_dir(&cfg)?;
    let manifest = run_experiment(&cfg)?;
    let dir = cfg.run.out.clone().unwrap_or_default();
    let report = crate::workbench::experiment::load_report(&dir)?;
    print_report(&run_label(&cfg), &report);
    println!("config hash {}", manifest.config_hash);
    println!("wrote {}", dir.join(crate::workbench::experiment::MANIFEST_FILE).display());
    Ok(())
}

fn show_config_cmd(c: &Common) -> Result<()> {
    print!("{}", c.resolve()?.to_toml()?);
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::TrainSource(c) => train_source_cmd(c),
        Command::FitSge(c) => fit_sge_cmd(c),
        Command::Generate { common, variant } => generate_cmd(common, *variant),
        Command::Reconstruct(c) => reconstruct_cmd(c),
        Command::Evaluate(c) => evaluate_cmd(c),
        Command::Sweep { common, axis } => sweep_cmd(common, *axis),
        Command::Report(c) => report_cmd(c),
        Command::Run(c) => run_cmd(c),
        Command::ShowConfig(c) => show_config_cmd(c),
    }
}

/// Caps the global thread pool from `CRDI_THREADS`, if set.
pub fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Parses `args`, runs the command and returns the process exit code:
/// 0 on success, 2 for config errors, 3 for numeric errors, 1 otherwise.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match configure_threads().and_then(|_| execute(&cli)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn every_subcommand_takes_the_common_flags() {
        for name in ["train-source", "fit-sge", "generate", "reconstruct", "evaluate", "sweep", "report"] {
            let cli = Cli::try_parse_from(["crdi", name, "--config", "c.toml", "--seed", "3", "--out", "o"]);
            assert!(cli.is_ok(), "{name}: {cli:?}");
        }
    }

    #[test]
    fn overrides_apply() {
        let c = Common {
            config: None,
            preset: Preset::Ring,
            seed: Some(9),
            out: Some("x".into()),
        };
        let cfg = c.resolve().unwrap();
        assert_eq!(cfg.run.seed, 9);
        assert_eq!(cfg.run.out.as_deref(), Some(Path::new("x")));
    }

    #[test]
    fn config_and_usage_errors_exit_2() {
        assert_eq!(run(["crdi", "show-config", "--config", "/nonexistent/c.toml"]), 2);
        assert_eq!(run(["crdi", "train-source", "--bogus"]), 2);
    }
}
