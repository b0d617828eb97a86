//! Pipeline stages, the end-to-end run and preset sweeps.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{train_source, NoiseNet, TrainOutcome};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricsReport, CSV_HEADER};
use crate::numerics::{RngStream, Tensor};
use crate::sampler::{generate, reconstruct, GenerationRequest, GuidanceSource, Mode, Start};
use crate::sge::{fit_sge, SgeSet};
use crate::workbench::config::{ExperimentConfig, Variant};
use crate::workbench::domains::{from_model, synth_domain, to_model};
use crate::workbench::formats::{read_samples, write_grid, write_samples};

pub const CONFIG_FILE: &str = "config.toml";
pub const MODEL_FILE: &str = "model.crdn";
pub const LOSS_FILE: &str = "train_loss.csv";
pub const SGE_FILE: &str = "sge.crds";
pub const TARGETS_FILE: &str = "targets.crdt";
pub const RECONSTRUCTIONS_FILE: &str = "reconstructions.crdt";
pub const GENERATED_FILE: &str = "generated.crdt";
pub const REPORT_FILE: &str = "report.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SWEEP_FILE: &str = "sweep.csv";
/// Written next to partial outputs when a stage fails.
pub const FAILED_FILE: &str = "FAILED";

/// Wraps a stage's error with the stage name.
pub fn stage<T>(name: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    f().map_err(|e| Error::Stage {
        stage: name,
        source: Box::new(e),
    })
}

fn stream(cfg: &ExperimentConfig, purpose: &str) -> RngStream {
    RngStream::new(cfg.run.seed, purpose)
}

fn sample_len(cfg: &ExperimentConfig) -> usize {
    cfg.source.sample_shape().iter().product()
}

/// Source training set in model space.
pub fn source_dataset(cfg: &ExperimentConfig) -> Result<Vec<Tensor>> {
    let spec = &cfg.source;
    Ok(synth_domain(spec, cfg.model.source_count, &spec.stream())?
        .iter()
        .map(|x| to_model(spec, x))
        .collect())
}

/// The `k` fitted target samples, in data space. Shot sets are nested:
/// the first `k` samples of the target stream.
pub fn few_shot_targets(cfg: &ExperimentConfig) -> Result<Vec<Tensor>> {
    synth_domain(&cfg.target, cfg.run.k, &cfg.target.stream())
}

/// Held-out target samples the Fréchet distance is measured against.
pub fn reference_set(cfg: &ExperimentConfig) -> Result<Vec<Tensor>> {
    let spec = &cfg.target;
    synth_domain(spec, cfg.metrics.reference_count, &spec.stream().child("reference"))
}

pub fn train_source_stage(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    let schedule = cfg.noise_schedule()?;
    let mut init = stream(cfg, "net-init");
    let mut net = NoiseNet::new(sample_len(cfg), &cfg.model.hidden, cfg.schedule.steps, &mut init)?;
    if let Some(sd) = cfg.model.sigma_data {
        net = net.with_denoiser_head(&schedule, sd)?;
    }
    let data = source_dataset(cfg)?;
    train_source(net, &schedule, &data, &cfg.train_config(), &mut stream(cfg, "train"))
}

/// Loads `path` and checks it fits the configured schedule and sample shape.
pub fn load_model(cfg: &ExperimentConfig, path: &Path) -> Result<NoiseNet> {
    let net = NoiseNet::load(path)?;
    if net.steps() != cfg.schedule.steps || net.dim() != sample_len(cfg) {
        return Err(Error::Config(format!(
            "checkpoint {} has T = {} and dim = {}, config needs T = {} and dim = {}",
            path.display(),
            net.steps(),
            net.dim(),
            cfg.schedule.steps,
            sample_len(cfg)
        )));
    }
    Ok(net)
}

pub fn fit_stage(cfg: &ExperimentConfig, net: &NoiseNet) -> Result<SgeSet> {
    let targets = model_targets(cfg)?;
    fit_sge(
        net,
        &cfg.noise_schedule()?,
        &targets,
        cfg.rigidity_map()?,
        &cfg.sge_config(),
        &stream(cfg, "fit"),
    )
}

fn model_targets(cfg: &ExperimentConfig) -> Result<Vec<Tensor>> {
    Ok(few_shot_targets(cfg)?
        .iter()
        .map(|x| to_model(&cfg.target, x))
        .collect())
}

/// Model output back in data space; images are clamped to the pixel range.
fn to_data(cfg: &ExperimentConfig, x: &Tensor) -> Tensor {
    let y = from_model(&cfg.target, x);
    if cfg.target.is_image() {
        y.map(|v| v.clamp(0.0, 1.0))
    } else {
        y
    }
}

/// Generated samples in data space. `set` may be `None` only when the
/// config generates without guidance.
pub fn generate_stage(
    cfg: &ExperimentConfig,
    net: &NoiseNet,
    set: Option<&SgeSet>,
) -> Result<Vec<Tensor>> {
    let schedule = cfg.noise_schedule()?;
    let req = GenerationRequest {
        mode: Mode::Generate,
        guidance: cfg.generate.guidance,
        start: if cfg.generate.noised_start {
            Start::Noised(None)
        } else {
            Start::Prior
        },
        start_t: (cfg.perturb.alpha_frac * cfg.schedule.steps as f64).round() as usize,
        perturbation: Some(cfg.perturbation()?),
        plan: cfg.plan()?,
        count: cfg.generate.count,
        tail: cfg.generate.tail,
        stream: stream(cfg, "generate"),
        start_noise: None,
    };
    let set = set.filter(|_| cfg.generate.guidance != GuidanceSource::None);
    let out = generate(net, &schedule, set, &model_targets(cfg)?, &req)?;
    Ok(out.iter().map(|x| to_data(cfg, x)).collect())
}

/// Deterministic reconstruction of every fitted target, in data space.
pub fn reconstruct_stage(cfg: &ExperimentConfig, net: &NoiseNet, set: &SgeSet) -> Result<Vec<Tensor>> {
    let schedule = cfg.noise_schedule()?;
    let plan = cfg.plan()?;
    let targets = model_targets(cfg)?;
    let st = stream(cfg, "reconstruct");
    (0..targets.len())
        .map(|i| {
            let x = reconstruct(net, &schedule, set, &targets, i, cfg.schedule.steps, &plan, &st)?;
            Ok(to_data(cfg, &x))
        })
        .collect()
}

pub fn evaluate_stage(
    cfg: &ExperimentConfig,
    generated: &[Tensor],
    reconstructions: &[Tensor],
) -> Result<MetricsReport> {
    let targets = few_shot_targets(cfg)?;
    let reference = reference_set(cfg)?;
    let mut report = evaluate(
        generated,
        &targets,
        reconstructions,
        Some(&reference),
        &cfg.metrics_config(),
    )?;
    report.config_hash = Some(cfg.hash()?);
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    /// Artifact name to path. Paths inside the run directory are relative to it.
    pub artifacts: BTreeMap<String, PathBuf>,
    pub model_checksum: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub versions: BTreeMap<String, String>,
}

impl RunManifest {
    /// Copy with timestamps zeroed, for run-to-run comparison.
    pub fn without_timestamps(&self) -> Self {
        Self {
            started_unix: 0,
            finished_unix: 0,
            ..self.clone()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn versions() -> BTreeMap<String, String> {
    [
        ("crdi", env!("CARGO_PKG_VERSION")),
        ("tensor-format", "CRDT/1"),
        ("checkpoint-format", "CRDN/1"),
        ("sge-format", "CRDS/1"),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Artifacts written so far in one run directory.
struct Artifacts {
    dir: PathBuf,
    paths: BTreeMap<String, PathBuf>,
}

impl Artifacts {
    fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }

    fn record(&mut self, name: &str, file: &str) {
        self.paths.insert(name.to_string(), PathBuf::from(file));
    }

    fn samples(&mut self, name: &str, file: &str, xs: &[Tensor], columns: usize) -> Result<()> {
        write_samples(&self.path(file), xs)?;
        self.record(name, file);
        if xs[0].rank() == 2 {
            let grid = Path::new(file).with_extension("pgm");
            let grid = grid.to_str().unwrap_or_default().to_string();
            write_grid(&self.path(&grid), xs, columns)?;
            self.record(&format!("{name}-grid"), &grid);
        }
        Ok(())
    }
}

/// Trains or loads the source model, fits the embeddings, reconstructs the
/// targets, generates and evaluates, all under `run.out`. On failure the
/// directory keeps its partial outputs plus a `FAILED` marker naming the
/// stage.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunManifest> {
    cfg.validate()?;
    let dir = cfg
        .run
        .out
        .clone()
        .ok_or_else(|| Error::Config("run.out must name an output directory".into()))?;
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let failed = dir.join(FAILED_FILE);
    if failed.exists() {
        std::fs::remove_file(&failed).map_err(|e| Error::io(&failed, e))?;
    }
    let result = run_stages(cfg, &dir);
    if let Err(e) = &result {
        write_text(&failed, &format!("{e}\n"))?;
    }
    result
}

fn run_stages(cfg: &ExperimentConfig, dir: &Path) -> Result<RunManifest> {
    let started = unix_now();
    let mut arts = Artifacts {
        dir: dir.to_path_buf(),
        paths: BTreeMap::new(),
    };
    write_text(&arts.path(CONFIG_FILE), &cfg.to_toml()?)?;
    arts.record("config", CONFIG_FILE);

    let net = stage("train-source", || match &cfg.model.checkpoint {
        Some(p) => {
            arts.paths.insert("model".into(), p.clone());
            load_model(cfg, p)
        }
        None => {
            let out = train_source_stage(cfg)?;
            out.net.save(&arts.path(MODEL_FILE))?;
            arts.record("model", MODEL_FILE);
            let mut csv = String::from("step,loss\n");
            for (i, l) in out.loss_trace.iter().enumerate() {
                csv.push_str(&format!("{i},{l:.17e}\n"));
            }
            write_text(&arts.path(LOSS_FILE), &csv)?;
            arts.record("train-loss", LOSS_FILE);
            Ok(out.net)
        }
    })?;

    let targets = few_shot_targets(cfg)?;
    arts.samples("targets", TARGETS_FILE, &targets, cfg.generate.columns)?;

    let guided = cfg.generate.guidance != GuidanceSource::None;
    let set = if guided {
        let set = stage("fit-sge", || {
            let set = fit_stage(cfg, &net)?;
            set.save(&arts.path(SGE_FILE), cfg.schedule.steps)?;
            Ok(set)
        })?;
        arts.record("sge", SGE_FILE);
        Some(set)
    } else {
        None
    };

    let reconstructions = match &set {
        Some(set) => {
            let r = stage("reconstruct", || reconstruct_stage(cfg, &net, set))?;
            arts.samples("reconstructions", RECONSTRUCTIONS_FILE, &r, cfg.generate.columns)?;
            r
        }
        None => Vec::new(),
    };

    let generated = stage("generate", || generate_stage(cfg, &net, set.as_ref()))?;
    arts.samples("generated", GENERATED_FILE, &generated, cfg.generate.columns)?;

    let report = stage("evaluate", || evaluate_stage(cfg, &generated, &reconstructions))?;
    write_text(&arts.path(REPORT_FILE), &report.to_json()?)?;
    arts.record("report", REPORT_FILE);
    write_text(
        &arts.path(METRICS_FILE),
        &format!("{CSV_HEADER}\n{}\n", report.csv_row(&run_label(cfg))),
    )?;
    arts.record("metrics", METRICS_FILE);

    let manifest = RunManifest {
        config_hash: cfg.hash()?,
        seed: cfg.run.seed,
        artifacts: arts.paths.clone(),
        model_checksum: net.checksum(),
        started_unix: started,
        finished_unix: unix_now(),
        versions: versions(),
    };
    for (name, p) in &manifest.artifacts {
        let full = if p.is_absolute() { p.clone() } else { dir.join(p) };
        if !full.exists() {
            return Err(Error::invalid(format!("artifact {name} missing at {}", full.display())));
        }
    }
    write_text(&arts.path(MANIFEST_FILE), &serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Short label used in CSV rows.
pub fn run_label(cfg: &ExperimentConfig) -> String {
    let variant = if cfg.generate.guidance == GuidanceSource::None {
        "no-sge"
    } else if cfg.perturb.s == 0.0 {
        "no-perturbation"
    } else {
        "full"
    };
    format!("{variant}/eta={}/k={}/s={}", cfg.sge.eta, cfg.run.k, cfg.perturb.s)
}

/// Reads a finished run's report.
pub fn load_report(dir: &Path) -> Result<MetricsReport> {
    let path = dir.join(REPORT_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Reads a run's generated samples.
pub fn load_generated(dir: &Path) -> Result<Vec<Tensor>> {
    read_samples(&dir.join(GENERATED_FILE))
}

/// One cell of a sweep: the axis it varies and the value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub axis: String,
    pub value: String,
    pub dir: PathBuf,
    pub report: MetricsReport,
}

/// Cell configs of the `sweep` table, each with its own output directory.
/// A single source model is shared through `checkpoint`.
pub fn sweep_cells(cfg: &ExperimentConfig, root: &Path, checkpoint: &Path) -> Vec<(String, String, ExperimentConfig)> {
    let mut cells = Vec::new();
    let mut base = cfg.clone();
    base.model.checkpoint = Some(checkpoint.to_path_buf());
    let mut push = |axis: &str, value: String, mut c: ExperimentConfig| {
        c.run.out = Some(root.join(format!("{axis}-{value}")));
        cells.push((axis.to_string(), value, c));
    };
    for &eta in &cfg.sweep.eta {
        let mut c = base.clone();
        c.sge.eta = eta;
        push("eta", eta.to_string(), c);
    }
    for &k in &cfg.sweep.k {
        let mut c = base.clone();
        c.run.k = k;
        push("k", k.to_string(), c);
    }
    for &s in &cfg.sweep.s {
        let mut c = base.clone();
        c.perturb.s = s;
        push("s", s.to_string(), c);
    }
    for &v in &cfg.sweep.variants {
        push("variant", v.label().to_string(), base.with_variant(v));
    }
    cells
}

/// Trains the source model once, runs every sweep cell and writes
/// `sweep.csv` with one row per cell.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<Vec<SweepCell>> {
    cfg.validate()?;
    let root = cfg
        .run
        .out
        .clone()
        .ok_or_else(|| Error::Config("run.out must name an output directory".into()))?;
    std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    let checkpoint = match &cfg.model.checkpoint {
        Some(p) => p.clone(),
        None => {
            let p = root.join(MODEL_FILE);
            let out = stage("train-source", || train_source_stage(cfg))?;
            out.net.save(&p)?;
            p
        }
    };
    let cells = sweep_cells(cfg, &root, &checkpoint);
    if cells.is_empty() {
        return Err(Error::Config("sweep section lists no values".into()));
    }
    let results: Vec<SweepCell> = cells
        .into_par_iter()
        .map(|(axis, value, c)| {
            run_experiment(&c)?;
            let dir = c.run.out.clone().unwrap_or_default();
            Ok(SweepCell {
                axis,
                value,
                report: load_report(&dir)?,
                dir,
            })
        })
        .collect::<Result<_>>()?;
    let mut csv = format!("axis,value,{CSV_HEADER}\n");
    for cell in &results {
        csv.push_str(&format!(
            "{},{},{}\n",
            cell.axis,
            cell.value,
            cell.report.csv_row(&format!("{}={}", cell.axis, cell.value))
        ));
    }
    write_text(&root.join(SWEEP_FILE), &csv)?;
    Ok(results)
}

/// Sweep presets on top of a base config.
pub mod presets {
    use super::*;

    pub fn eta_sweep(base: &ExperimentConfig) -> ExperimentConfig {
        let mut c = base.clone();
        c.sweep.eta = vec![1, 4, 8, 16, 25];
        c
    }

    pub fn k_shot(base: &ExperimentConfig) -> ExperimentConfig {
        let mut c = base.clone();
        c.sweep.k = vec![1, 5, 10];
        c
    }

    pub fn ablation(base: &ExperimentConfig) -> ExperimentConfig {
        let mut c = base.clone();
        c.sweep.variants = vec![Variant::Full, Variant::NoSge, Variant::NoPerturbation];
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// A ring run small enough for a unit test.
    fn tiny(out: &Path) -> ExperimentConfig {
        let mut c = ExperimentConfig::ring();
        c.schedule.steps = 100;
        c.schedule.beta_end = 0.1;
        c.inference.steps = 11;
        c.model.hidden = vec![16];
        c.model.train_steps = 50;
        c.model.source_count = 64;
        c.sge.eta = 4;
        c.sge.iterations = 20;
        c.run.k = 3;
        c.generate.count = 6;
        c.metrics.reference_count = 16;
        c.run.out = Some(out.to_path_buf());
        c
    }

    #[test]
    fn run_writes_every_artifact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let m = run_experiment(&cfg).unwrap();
        for key in ["config", "model", "train-loss", "targets", "sge", "reconstructions", "generated", "report", "metrics"] {
            assert!(m.artifacts.contains_key(key), "{key}");
        }
        assert_eq!(m.config_hash, cfg.hash().unwrap());
        assert!(dir.path().join(MANIFEST_FILE).exists());
        assert!(!dir.path().join(FAILED_FILE).exists());
        let report = load_report(dir.path()).unwrap();
        assert_eq!(report.config_hash.as_deref(), Some(m.config_hash.as_str()));
        // points get no SSIM
        assert!(report.ssim.is_empty() && report.mean_ssim.is_none());
        assert_eq!(read_samples(&dir.path().join(RECONSTRUCTIONS_FILE)).unwrap().len(), 3);
        assert_eq!(load_generated(dir.path()).unwrap().len(), 6);
        assert_eq!(RunManifest::load(&dir.path().join(MANIFEST_FILE)).unwrap(), m);
    }

    #[test]
    fn no_sge_skips_fitting() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path()).with_variant(Variant::NoSge);
        let m = run_experiment(&cfg).unwrap();
        assert!(!m.artifacts.contains_key("sge"));
        assert!(load_report(dir.path()).unwrap().mean_ssim.is_none());
    }

    #[test]
    fn failing_stage_leaves_marker() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(dir.path());
        // a guided window that stops short of the chain start
        cfg.sge.window_hi_frac = 0.5;
        let err = run_experiment(&cfg).unwrap_err();
        assert!(matches!(err, Error::Stage { stage: "reconstruct", .. }), "{err}");
        let marker = std::fs::read_to_string(dir.path().join(FAILED_FILE)).unwrap();
        assert!(marker.contains("reconstruct"));
        assert!(dir.path().join(SGE_FILE).exists());
        // a later successful run clears the marker
        cfg.sge.window_hi_frac = 1.0;
        run_experiment(&cfg).unwrap();
        assert!(!dir.path().join(FAILED_FILE).exists());
    }

    #[test]
    fn checkpoint_must_match_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(&dir.path().join("a"));
        run_experiment(&cfg).unwrap();
        let mut other = tiny(&dir.path().join("b"));
        other.schedule.steps = 200;
        other.model.checkpoint = Some(dir.path().join("a").join(MODEL_FILE));
        let err = run_experiment(&other).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn sweep_writes_one_row_per_cell() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(dir.path());
        cfg.sweep.eta = vec![1, 2];
        cfg.sweep.variants = vec![Variant::NoSge];
        let cells = run_sweep(&cfg).unwrap();
        assert_eq!(cells.len(), 3);
        let csv = std::fs::read_to_string(dir.path().join(SWEEP_FILE)).unwrap();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().nth(1).unwrap().starts_with("eta,1,"));
        assert!(dir.path().join("variant-no-sge").join(MANIFEST_FILE).exists());
    }

    #[test]
    fn missing_out_is_config_error() {
        let mut cfg = ExperimentConfig::ring();
        cfg.run.out = None;
        assert!(matches!(run_experiment(&cfg), Err(Error::Config(_))));
    }
}
