//! Experiment configuration: TOML tables with unknown keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::TrainConfig;
use crate::error::{Error, Result};
use crate::metrics::{FeatureKind, McDirection, MetricsConfig};
use crate::sampler::{GuidanceSource, Tail};
use crate::schedules::{InferencePlan, NoiseSchedule, PerturbationSchedule, RigidityMap};
use crate::sge::{Coupling, SgeConfig};
use crate::workbench::domains::{DomainKind, DomainSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    /// Shot count: target samples the embeddings are fitted on.
    pub k: usize,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceSection {
    /// Timesteps in the inference sub-sequence, both ends included.
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    pub train_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub source_count: usize,
    /// Data scale of the denoiser-parameterized head; absent means the
    /// network predicts noise directly.
    #[serde(default)]
    pub sigma_data: Option<f64>,
    /// Load this checkpoint instead of training.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgeSection {
    pub eta: usize,
    pub lambda: f64,
    /// Step size of the embedding optimizer.
    pub lr: f64,
    pub iterations: usize,
    #[serde(default)]
    pub coupling: Coupling,
    /// Guided window `[t_lo, t_hi]` as fractions of T.
    #[serde(default)]
    pub window_lo_frac: f64,
    #[serde(default = "one")]
    pub window_hi_frac: f64,
    #[serde(default = "yes")]
    pub scaled_steps: bool,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbSection {
    pub alpha_frac: f64,
    pub beta_frac: f64,
    pub s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateSection {
    pub count: usize,
    #[serde(default = "per_sample")]
    pub guidance: GuidanceSource,
    /// Start from a noised target (`true`) or from the prior.
    #[serde(default = "yes")]
    pub noised_start: bool,
    #[serde(default)]
    pub tail: Tail,
    pub columns: usize,
}

fn per_sample() -> GuidanceSource {
    GuidanceSource::PerSample
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsSection {
    pub mc_ssim_n: usize,
    #[serde(default)]
    pub mc_direction: McDirection,
    pub features: FeatureKind,
    /// Held-out target-domain samples for the Fréchet reference.
    pub reference_count: usize,
}

/// Values swept by the `sweep` command; empty lists are skipped.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(default)]
    pub eta: Vec<usize>,
    #[serde(default)]
    pub k: Vec<usize>,
    #[serde(default)]
    pub s: Vec<f64>,
    #[serde(default)]
    pub variants: Vec<Variant>,
}

/// Ablations of the full pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    NoSge,
    NoPerturbation,
}

impl Variant {
    pub fn label(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoSge => "no-sge",
            Variant::NoPerturbation => "no-perturbation",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run: RunSection,
    pub schedule: ScheduleSection,
    pub inference: InferenceSection,
    pub model: ModelSection,
    pub sge: SgeSection,
    pub perturb: PerturbSection,
    pub generate: GenerateSection,
    pub metrics: MetricsSection,
    pub source: DomainSpec,
    pub target: DomainSpec,
    #[serde(default)]
    pub sweep: SweepSection,
}

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl ExperimentConfig {
    /// Sprite source (plain circles) adapted to circles crossed by a bar.
    pub fn sprites() -> Self {
        Self {
            run: RunSection {
                seed: 0,
                k: 10,
                out: None,
            },
            schedule: ScheduleSection {
                steps: 1000,
                beta_start: 1e-4,
                beta_end: 0.02,
            },
            inference: InferenceSection { steps: 25 },
            model: ModelSection {
                hidden: vec![128, 128],
                train_steps: 4000,
                batch_size: 64,
                lr: 2e-3,
                source_count: 4000,
                sigma_data: Some(0.1),
                checkpoint: None,
            },
            sge: SgeSection {
                eta: 25,
                lambda: 1e-3,
                lr: 0.03,
                iterations: 2000,
                coupling: Coupling::Coupled,
                window_lo_frac: 0.0,
                window_hi_frac: 1.0,
                scaled_steps: true,
            },
            perturb: PerturbSection {
                alpha_frac: 1.0,
                beta_frac: 0.6,
                s: 0.5,
            },
            generate: GenerateSection {
                count: 64,
                guidance: GuidanceSource::PerSample,
                noised_start: true,
                tail: Tail::Clamp,
                columns: 8,
            },
            metrics: MetricsSection {
                mc_ssim_n: 3,
                mc_direction: McDirection::PerTarget,
                features: FeatureKind::Pixels,
                reference_count: 300,
            },
            source: DomainSpec::sprites(1),
            target: DomainSpec::sprites_with_bar(2),
            sweep: SweepSection::default(),
        }
    }

    /// Ring of eight Gaussians adapted to the same ring rotated by half a gap.
    pub fn ring() -> Self {
        let mut c = Self::sprites();
        c.model.hidden = vec![64, 64];
        c.model.train_steps = 3000;
        c.model.sigma_data = None;
        c.source = DomainSpec::ring(8, 1);
        let mut target = DomainSpec::ring(8, 2);
        if let DomainKind::RingOfGaussians { rotation, .. } =
            &mut target.kind
        {
            *rotation = std::f64::consts::PI / 8.0;
        }
        c.target = target;
        c.metrics.features = FeatureKind::Identity;
        c.sge.iterations = 500;
        c
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| cfg_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| cfg_err(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| cfg_err(e.to_string()))
    }

    /// SHA-256 of the canonical TOML serialization. The output directory
    /// is left out: where a run is written does not change what it computes.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.run.out = None;
        let digest = Sha256::digest(c.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn validate(&self) -> Result<()> {
        let frac = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(cfg_err(format!("{name} = {v} is not a fraction in [0, 1]")))
            }
        };
        if self.run.k == 0 {
            return Err(cfg_err("run.k must be at least 1"));
        }
        if self.schedule.steps < 2 || self.inference.steps < 2 {
            return Err(cfg_err("schedule.T and inference.steps must be at least 2"));
        }
        if self.inference.steps > self.schedule.steps + 1 {
            return Err(cfg_err("inference.steps cannot exceed T + 1"));
        }
        if self.model.hidden.is_empty() || self.model.hidden.contains(&0) {
            return Err(cfg_err("model.hidden needs positive widths"));
        }
        if self.model.batch_size == 0 || self.model.source_count == 0 {
            return Err(cfg_err("model batch_size and source_count must be positive"));
        }
        if self.model.sigma_data.is_some_and(|v| !(v > 0.0 && v.is_finite())) {
            return Err(cfg_err("model.sigma_data must be positive"));
        }
        if !(self.model.lr > 0.0 && self.sge.lr > 0.0) {
            return Err(cfg_err("learning rates must be positive"));
        }
        if let Some(p) = &self.model.checkpoint {
            if !p.exists() {
                return Err(cfg_err(format!("checkpoint {} does not exist", p.display())));
            }
        }
        if self.sge.eta == 0 {
            return Err(cfg_err("sge.eta must be at least 1"));
        }
        if !(self.sge.lambda >= 0.0) {
            return Err(cfg_err("sge.lambda must be >= 0"));
        }
        frac("sge.window_lo_frac", self.sge.window_lo_frac)?;
        frac("sge.window_hi_frac", self.sge.window_hi_frac)?;
        frac("perturb.alpha_frac", self.perturb.alpha_frac)?;
        frac("perturb.beta_frac", self.perturb.beta_frac)?;
        if !(self.perturb.s >= 0.0 && self.perturb.s.is_finite()) {
            return Err(cfg_err("perturb.s must be finite and >= 0"));
        }
        if self.generate.count == 0 || self.generate.columns == 0 {
            return Err(cfg_err("generate.count and generate.columns must be positive"));
        }
        if self.metrics.mc_ssim_n == 0 || self.metrics.reference_count < 2 {
            return Err(cfg_err("metrics need mc_ssim_n >= 1 and reference_count >= 2"));
        }
        self.source.validate().map_err(|e| cfg_err(format!("source: {e}")))?;
        self.target.validate().map_err(|e| cfg_err(format!("target: {e}")))?;
        if self.source == self.target {
            return Err(cfg_err("source and target domains must differ"));
        }
        if self.source.sample_shape() != self.target.sample_shape() {
            return Err(cfg_err("source and target samples differ in shape"));
        }
        if self.sweep.eta.contains(&0) || self.sweep.k.contains(&0) {
            return Err(cfg_err("sweep values for eta and k must be positive"));
        }
        // schedule-level checks reuse the library validators
        self.noise_schedule().map_err(|e| cfg_err(format!("schedule: {e}")))?;
        self.rigidity_map().map_err(|e| cfg_err(format!("sge: {e}")))?;
        self.perturbation().map_err(|e| cfg_err(format!("perturb: {e}")))?;
        Ok(())
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.schedule.steps, self.schedule.beta_start, self.schedule.beta_end)
    }

    pub fn plan(&self) -> Result<InferencePlan> {
        InferencePlan::uniform(self.schedule.steps, self.inference.steps)
    }

    pub fn rigidity_map(&self) -> Result<RigidityMap> {
        RigidityMap::from_fractions(
            self.sge.eta,
            self.sge.window_lo_frac,
            self.sge.window_hi_frac,
            self.schedule.steps,
        )
    }

    pub fn perturbation(&self) -> Result<PerturbationSchedule> {
        PerturbationSchedule::from_fractions(
            self.perturb.alpha_frac,
            self.perturb.beta_frac,
            self.perturb.s,
            self.schedule.steps,
        )
    }

    pub fn sge_config(&self) -> SgeConfig {
        SgeConfig {
            iterations: self.sge.iterations,
            lr: self.sge.lr,
            lambda: self.sge.lambda,
            coupling: self.sge.coupling,
            scaled_steps: self.sge.scaled_steps,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.model.train_steps,
            batch_size: self.model.batch_size,
            lr: self.model.lr,
            ..TrainConfig::default()
        }
    }

    pub fn metrics_config(&self) -> MetricsConfig {
        MetricsConfig {
            mc_ssim_n: self.metrics.mc_ssim_n,
            mc_direction: self.metrics.mc_direction,
            features: self.metrics.features,
            range: 1.0,
        }
    }

    /// This config with one ablation applied.
    pub fn with_variant(&self, v: Variant) -> Self {
        let mut c = self.clone();
        match v {
            Variant::Full => {}
            Variant::NoSge => c.generate.guidance = GuidanceSource::None,
            Variant::NoPerturbation => c.perturb.s = 0.0,
        }
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for c in [ExperimentConfig::sprites(), ExperimentConfig::ring()] {
            c.validate().unwrap();
            let text = c.to_toml().unwrap();
            let back = ExperimentConfig::from_toml_str(&text).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.hash().unwrap(), c.hash().unwrap());
        }
    }

    #[test]
    fn unknown_keys_are_errors() {
        let mut text = ExperimentConfig::sprites().to_toml().unwrap();
        text = text.replace("[sge]\n", "[sge]\nmomentum = 0.9\n");
        assert!(matches!(
            ExperimentConfig::from_toml_str(&text),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn rejects_identical_domains() {
        let mut c = ExperimentConfig::sprites();
        c.target = c.source.clone();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_bad_fractions() {
        let mut c = ExperimentConfig::sprites();
        c.perturb.beta_frac = 1.5;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::sprites();
        c.run.k = 0;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::sprites();
        c.model.checkpoint = Some("/nonexistent/net.crdn".into());
        assert!(c.validate().is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::sprites();
        let mut b = a.clone();
        b.sge.eta = 8;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
        assert_eq!(a.hash().unwrap().len(), 64);
        let mut moved = a.clone();
        moved.run.out = Some("/tmp/elsewhere".into());
        assert_eq!(a.hash().unwrap(), moved.hash().unwrap());
    }

    #[test]
    fn variants_touch_one_knob() {
        let c = ExperimentConfig::sprites();
        assert_eq!(c.with_variant(Variant::Full), c);
        assert_eq!(c.with_variant(Variant::NoPerturbation).perturb.s, 0.0);
        assert_eq!(
            c.with_variant(Variant::NoSge).generate.guidance,
            GuidanceSource::None
        );
    }
}
