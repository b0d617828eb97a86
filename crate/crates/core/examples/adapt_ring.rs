//! Few-shot adaptation on points: a model trained on one ring is steered
//! toward ten samples of a rotated ring with per-sample guidance embeddings.
//! Generation is run with and without the guidance perturbation.
//!
//! The ring modes are sharp, so near t = 0 the score changes by orders of
//! magnitude inside one segment and a single guidance vector per segment is
//! a compromise there: only part of the mass moves onto the target modes.
//!
//! cargo run --release --example adapt_ring

use std::f64::consts::PI;

use crdi::metrics::{intra_diversity, ClusterRule, FeatureExtractor, FeatureKind};
use crdi::numerics::Tensor;
use crdi::sampler::{generate, GenerationRequest, GuidanceSource, Mode, Start, Tail};
use crdi::sge::fit_sge;
use crdi::workbench::config::ExperimentConfig;
use crdi::workbench::domains::synth_domain;
use crdi::workbench::experiment::{few_shot_targets, train_source_stage};

/// Fraction of points within 0.25 of a radius-2 ring mode offset by `rotation`.
fn on_modes(xs: &[Tensor], rotation: f64) -> f64 {
    let hits = xs
        .iter()
        .filter(|x| {
            (0..8).any(|k| {
                let a = rotation + k as f64 * PI / 4.0;
                let (dx, dy) = (x.data()[0] - 2.0 * a.cos(), x.data()[1] - 2.0 * a.sin());
                dx.hypot(dy) < 0.25
            })
        })
        .count();
    hits as f64 / xs.len() as f64
}

fn main() -> crdi::error::Result<()> {
    let cfg = ExperimentConfig::ring();
    let net = train_source_stage(&cfg)?.net;
    let schedule = cfg.noise_schedule()?;
    let targets = few_shot_targets(&cfg)?;
    let source = synth_domain(&cfg.source, 256, &cfg.source.stream().child("eval"))?;

    let set = fit_sge(
        &net,
        &schedule,
        &targets,
        cfg.rigidity_map()?,
        &cfg.sge_config(),
        &cfg.source.stream().child("fit"),
    )?;
    println!("fitted {} embeddings with {} segments each", set.len(), set.map().eta());

    let ex = FeatureExtractor::new(FeatureKind::Identity, 2)?;
    println!("{:<22} {:>12} {:>12} {:>10}", "", "target modes", "source modes", "diversity");
    let score = |name: &str, xs: &[Tensor]| -> crdi::error::Result<()> {
        let div = intra_diversity(xs, &targets, &ex, ClusterRule::NearestFeature)?;
        println!(
            "{name:<22} {:>12.3} {:>12.3} {:>10.4}",
            on_modes(xs, PI / 8.0),
            on_modes(xs, 0.0),
            div.value
        );
        Ok(())
    };
    score("source samples", &source)?;

    for (name, s) in [("guided, perturbed", cfg.perturb.s), ("guided, unperturbed", 0.0)] {
        let req = GenerationRequest {
            mode: Mode::Generate,
            guidance: GuidanceSource::PerSample,
            start: Start::Noised(None),
            start_t: cfg.schedule.steps,
            perturbation: Some(cfg.perturbation()?.with_s(s)),
            plan: cfg.plan()?,
            count: 256,
            tail: Tail::Clamp,
            stream: cfg.target.stream().child("generate"),
            start_noise: None,
        };
        score(name, &generate(&net, &schedule, Some(&set), &targets, &req)?)?;
    }
    Ok(())
}
