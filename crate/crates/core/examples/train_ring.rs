//! Trains a noise network on an 8-component ring and samples it with the
//! 25-step deterministic chain.
//!
//! cargo run --release --example train_ring

use std::f64::consts::PI;

use crdi::diffusion::{sample_unconditional, train_source, NoiseNet, TrainConfig};
use crdi::numerics::RngStream;
use crdi::schedules::{InferencePlan, NoiseSchedule};
use crdi::workbench::domains::{synth_domain, DomainSpec};

fn main() -> crdi::error::Result<()> {
    let spec = DomainSpec::ring(8, 1);
    let data = synth_domain(&spec, 4000, &spec.stream())?;
    let schedule = NoiseSchedule::linear(1000, 1e-4, 0.02)?;
    let net = NoiseNet::new(2, &[64, 64], 1000, &mut RngStream::new(0, "init"))?;
    let cfg = TrainConfig {
        steps: 3000,
        ..TrainConfig::default()
    };
    let out = train_source(net, &schedule, &data, &cfg, &mut RngStream::new(0, "train"))?;
    for chunk in out.loss_trace.chunks(500).enumerate() {
        let (i, losses) = chunk;
        let mean = losses.iter().sum::<f64>() / losses.len() as f64;
        println!("steps {:>4}..{:>4}  loss {mean:.4}", i * 500, (i + 1) * 500);
    }

    let plan = InferencePlan::uniform(1000, 25)?;
    let samples = sample_unconditional(&out.net, &schedule, &plan, 800, &RngStream::new(0, "sample"))?;
    let mut hist = [0usize; 8];
    let mut radius = 0.0;
    for x in &samples {
        let (px, py) = (x.data()[0], x.data()[1]);
        let angle = py.atan2(px).rem_euclid(2.0 * PI);
        hist[(angle / (PI / 4.0)).round() as usize % 8] += 1;
        radius += (px * px + py * py).sqrt();
    }
    println!("samples per mode: {hist:?}");
    println!("mean radius {:.3} (data: 2.0)", radius / samples.len() as f64);
    Ok(())
}
