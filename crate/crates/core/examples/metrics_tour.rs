//! The evaluation battery on hand-built sprite sets: identical, shifted,
//! source versus target, and collapsed generators.
//!
//! cargo run --release --example metrics_tour

use crdi::metrics::{
    frechet, intra_diversity, mc_ssim, ssim, ClusterRule, FeatureExtractor, FeatureKind, McDirection,
};
use crdi::numerics::Tensor;
use crdi::workbench::domains::{synth_domain, DomainSpec};

fn main() -> crdi::error::Result<()> {
    let source = DomainSpec::sprites(1);
    let target = DomainSpec::sprites_with_bar(2);
    let targets = synth_domain(&target, 10, &target.stream())?;
    let fresh = synth_domain(&target, 200, &target.stream().child("fresh"))?;
    let other = synth_domain(&source, 200, &source.stream().child("fresh"))?;
    let reference = synth_domain(&target, 300, &target.stream().child("reference"))?;

    let a = &targets[0];
    let dimmed = a.map(|v| 0.8 * v);
    println!("SSIM(a, a) = {}", ssim(a, a, 1.0)?);
    println!("SSIM(a, 0.8 a) = {:.4}", ssim(a, &dimmed, 1.0)?);
    println!("SSIM(a, b) = {:.4}", ssim(a, &targets[1], 1.0)?);

    let ex = FeatureExtractor::new(FeatureKind::Pixels, 256)?;
    let reference_f = ex.extract_all(&reference)?;
    let collapsed: Vec<Tensor> = (0..200).map(|i| targets[i % 10].clone()).collect();
    let copies: Vec<Tensor> = (0..200).map(|_| targets[0].clone()).collect();
    println!();
    println!("{:<22} {:>8} {:>8} {:>9}", "generator", "Fréchet", "MC-SSIM", "diversity");
    for (name, xs) in [
        ("fresh target samples", &fresh),
        ("source samples", &other),
        ("replayed ten shots", &collapsed),
        ("one shot copied", &copies),
    ] {
        let fd = frechet(&ex.extract_all(xs)?, &reference_f)?;
        let mc = mc_ssim(xs, &targets, 3, McDirection::PerTarget, 1.0)?;
        let div = intra_diversity(xs, &targets, &ex, ClusterRule::MaxSsim)?;
        println!("{name:<22} {fd:>8.3} {mc:>8.4} {:>9.4}", div.value);
    }
    Ok(())
}
