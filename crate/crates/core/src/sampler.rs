//! Reconstruction and diversity-enhanced generation with fitted embeddings.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{ddim_step, noise_to, NoiseNet};
use crate::error::{Error, Result};
use crate::numerics::{gaussian, RngStream, Tensor};
use crate::schedules::{InferencePlan, NoiseSchedule, PerturbationSchedule};
use crate::sge::{guide_noise, mean_sge, Sge, SgeSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Reconstruct,
    Generate,
}

/// Which embedding steers each output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GuidanceSource {
    /// A member of the set: the start sample's own embedding.
    PerSample,
    /// The set-wise mean embedding.
    Mean,
    /// No guidance at all (the unconditional model).
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Start {
    /// Fresh Gaussian state.
    Prior,
    /// Forward-noised target; `None` picks one uniformly per output.
    Noised(Option<usize>),
}

/// Guidance for timesteps below the guided window.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Tail {
    #[default]
    Clamp,
    Unguided,
}

#[derive(Clone, Debug)]
pub struct GenerationRequest {
    pub mode: Mode,
    pub guidance: GuidanceSource,
    pub start: Start,
    /// Timestep the chain starts from.
    pub start_t: usize,
    pub perturbation: Option<PerturbationSchedule>,
    pub plan: InferencePlan,
    pub count: usize,
    pub tail: Tail,
    pub stream: RngStream,
    /// Overrides the start noise of every output, mostly for replay.
    pub start_noise: Option<Tensor>,
}

impl GenerationRequest {
    /// Deterministic reconstruction of target `sample`.
    pub fn reconstruct(sample: usize, start_t: usize, plan: InferencePlan, stream: RngStream) -> Self {
        Self {
            mode: Mode::Reconstruct,
            guidance: GuidanceSource::PerSample,
            start: Start::Noised(Some(sample)),
            start_t,
            perturbation: None,
            plan,
            count: 1,
            tail: Tail::Clamp,
            stream,
            start_noise: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::invalid("generation count must be at least 1"));
        }
        if self.mode == Mode::Reconstruct {
            if self.perturbation.is_some_and(|p| p.s() != 0.0) {
                return Err(Error::invalid("reconstruction runs without perturbation noise"));
            }
            if !matches!(self.start, Start::Noised(Some(_))) {
                return Err(Error::invalid("reconstruction starts from its own noised sample"));
            }
        }
        Ok(())
    }
}

/// Corrupts a guidance vector by the annealing rule:
/// `ceil(sqrt(gamma)) * g + s * sqrt(1 - gamma) * eps`.
pub fn perturb_guidance(
    g: &Tensor,
    t: usize,
    sched: &PerturbationSchedule,
    stream: &mut RngStream,
) -> Result<Tensor> {
    let gamma = sched.gamma(t as f64);
    if gamma >= 1.0 {
        return Ok(g.clone());
    }
    let eps = gaussian(stream, g.shape())?;
    let noise_scale = sched.s() * (1.0 - gamma).sqrt();
    if gamma <= 0.0 {
        Ok(eps.scale(noise_scale))
    } else {
        g.lin_comb(1.0, &eps, noise_scale)
    }
}

/// Guidance in force at `t`, or `None` when the step runs unguided.
fn guidance_for(sge: &Sge, t: usize, tail: Tail) -> Result<Option<Tensor>> {
    let (lo, hi) = sge.map().window();
    if t > hi {
        return Err(Error::invalid(format!(
            "guided window ends at {hi} but the chain visits t = {t}"
        )));
    }
    if t < lo && tail == Tail::Unguided {
        return Ok(None);
    }
    Ok(Some(sge.guidance_at(t)?))
}

/// Runs the guided reverse chain for every requested output.
pub fn generate(
    net: &NoiseNet,
    schedule: &NoiseSchedule,
    set: Option<&SgeSet>,
    targets: &[Tensor],
    req: &GenerationRequest,
) -> Result<Vec<Tensor>> {
    req.validate()?;
    if req.guidance != GuidanceSource::None && set.is_none() {
        return Err(Error::invalid("guided generation needs an SGE set"));
    }
    if let Some(set) = set {
        if set.len() != targets.len() && matches!(req.start, Start::Noised(_)) {
            return Err(Error::invalid("targets and SGE set differ in size"));
        }
    }
    let mean = match (req.guidance, set) {
        (GuidanceSource::Mean, Some(s)) => Some(mean_sge(s)?),
        _ => None,
    };
    let start_t = req.plan.floor(req.start_t);
    let walk = req.plan.descending_from(start_t);
    if let (Some(set), Some(&(top, _))) = (set, walk.first()) {
        if req.guidance != GuidanceSource::None && top > set.map().window().1 {
            return Err(Error::invalid(format!(
                "guided window ends at {} but generation starts at {top}",
                set.map().window().1
            )));
        }
    }
    let shape: Vec<usize> = match (targets.first(), set) {
        (Some(x), _) => x.shape().to_vec(),
        (None, Some(s)) => s.members()[0].sample_shape().to_vec(),
        (None, None) => vec![net.dim()],
    };
    let n_targets = targets.len().max(set.map_or(0, |s| s.len()));

    (0..req.count)
        .into_par_iter()
        .map(|i| {
            let mut noise_stream = req.stream.child(i);
            let mut pick_stream = req.stream.child(format!("{i}/pick"));
            let mut perturb_stream = req.stream.child(format!("{i}/perturb"));
            let start_noise = match &req.start_noise {
                Some(e) => e.clone(),
                None => gaussian(&mut noise_stream, &shape)?,
            };
            let chosen = match req.start {
                Start::Noised(Some(id)) => id,
                _ if n_targets > 0 => pick_stream.uniform_int(0, n_targets - 1),
                _ => 0,
            };
            let mut x = match req.start {
                Start::Prior => start_noise,
                Start::Noised(_) => {
                    let x0 = targets.get(chosen).ok_or_else(|| {
                        Error::invalid(format!("unknown sample id {chosen}"))
                    })?;
                    noise_to(schedule, x0, start_t, &start_noise)?
                }
            };
            let sge: Option<&Sge> = match req.guidance {
                GuidanceSource::None => None,
                GuidanceSource::Mean => mean.as_ref(),
                GuidanceSource::PerSample => Some(set.unwrap().get(chosen)?),
            };
            for &(t, t_prev) in &walk {
                let mut eps = net.predict(&x, t)?;
                if let Some(sge) = sge {
                    if let Some(g) = guidance_for(sge, t, req.tail)? {
                        let g = match &req.perturbation {
                            Some(p) => perturb_guidance(&g, t, p, &mut perturb_stream)?,
                            None => g,
                        };
                        eps = guide_noise(schedule, &eps, t, &g)?;
                    }
                }
                x = ddim_step(schedule, &x, t, t_prev, &eps)?;
            }
            Ok(x)
        })
        .collect()
}

/// Deterministic reconstruction of one fitted target.
pub fn reconstruct(
    net: &NoiseNet,
    schedule: &NoiseSchedule,
    set: &SgeSet,
    targets: &[Tensor],
    sample: usize,
    start_t: usize,
    plan: &InferencePlan,
    stream: &RngStream,
) -> Result<Tensor> {
    set.get(sample)?;
    let req = GenerationRequest::reconstruct(sample, start_t, plan.clone(), stream.child(sample));
    Ok(generate(net, schedule, Some(set), targets, &req)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{ddim_chain, sample_unconditional, TIME_EMBED_DIM};
    use crate::numerics::Mlp;
    use crate::schedules::RigidityMap;
    use crate::sge::{fit_sge, fit_sge_with, Coupling, Draw, DrawSource, SgeConfig};

    fn sched() -> NoiseSchedule {
        NoiseSchedule::linear(100, 1e-4, 0.1).unwrap()
    }

    fn frozen_net(d: usize, seed: u64) -> NoiseNet {
        let mut n = NoiseNet::new(d, &[16], 100, &mut RngStream::new(seed, "net")).unwrap();
        n.freeze();
        n
    }

    fn rand(seed: u64, shape: &[usize]) -> Tensor {
        gaussian(&mut RngStream::new(seed, "sampler-test"), shape).unwrap()
    }

    fn request(guidance: GuidanceSource, start: Start, s: f64, count: usize) -> GenerationRequest {
        GenerationRequest {
            mode: Mode::Generate,
            guidance,
            start,
            start_t: 100,
            perturbation: Some(PerturbationSchedule::from_fractions(1.0, 0.6, s, 100).unwrap()),
            plan: InferencePlan::uniform(100, 11).unwrap(),
            count,
            tail: Tail::Clamp,
            stream: RngStream::new(5, "gen"),
            start_noise: None,
        }
    }

    #[test]
    fn perturbation_regimes() {
        let p = PerturbationSchedule::new(20.0, 10.0, 0.1, 100).unwrap();
        let g = rand(1, &[3]);
        let mut st = RngStream::new(0, "p");
        assert_eq!(perturb_guidance(&g, 7, &p, &mut st).unwrap(), g);
        assert_eq!(st.counter(), 0);
        let quiet = p.with_s(0.0);
        assert_eq!(perturb_guidance(&g, 25, &quiet, &mut st).unwrap().norm(), 0.0);

        // replay: gamma = 0.5 at t = 15
        let mut a = RngStream::new(3, "replay");
        let mut b = a.clone();
        let out = perturb_guidance(&g, 15, &p, &mut a).unwrap();
        let eps = gaussian(&mut b, &[3]).unwrap();
        let want = g.lin_comb(1.0, &eps, 0.1 * 0.5f64.sqrt()).unwrap();
        assert!(out.max_abs_diff(&want).unwrap() < 1e-15);
    }

    #[test]
    fn zero_sge_without_noise_reduces_to_unconditional_chain() {
        let s = sched();
        let net = frozen_net(3, 1);
        let map = RigidityMap::new(4, 0, 100, 100).unwrap();
        let set = SgeSet::new(vec![Sge::zeros(map, &[3], Some(0))]).unwrap();
        let req = request(GuidanceSource::PerSample, Start::Prior, 0.0, 4);
        let guided = generate(&net, &s, Some(&set), &[rand(9, &[3])], &req).unwrap();
        let plain = sample_unconditional(&net, &s, &req.plan, 4, &req.stream).unwrap();
        for (a, b) in guided.iter().zip(&plain) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn reconstruction_is_deterministic() {
        let s = sched();
        let net = frozen_net(3, 2);
        let targets = vec![rand(1, &[3]), rand(2, &[3])];
        let map = RigidityMap::new(2, 0, 100, 100).unwrap();
        let cfg = SgeConfig {
            iterations: 50,
            ..SgeConfig::default()
        };
        let set = fit_sge(&net, &s, &targets, map, &cfg, &RngStream::new(0, "f")).unwrap();
        let plan = InferencePlan::uniform(100, 11).unwrap();
        let st = RngStream::new(1, "rec");
        let a = reconstruct(&net, &s, &set, &targets, 1, 100, &plan, &st).unwrap();
        let b = reconstruct(&net, &s, &set, &targets, 1, 100, &plan, &st).unwrap();
        assert_eq!(a.data(), b.data());
        assert!(reconstruct(&net, &s, &set, &targets, 2, 100, &plan, &st).is_err());
    }

    #[test]
    fn unfitted_reconstruction_is_plain_denoising() {
        let s = sched();
        let net = frozen_net(3, 3);
        let targets = vec![rand(4, &[3])];
        let map = RigidityMap::new(3, 0, 100, 100).unwrap();
        let set = SgeSet::new(vec![Sge::zeros(map, &[3], Some(0))]).unwrap();
        let plan = InferencePlan::uniform(100, 11).unwrap();
        let eps = rand(5, &[3]);
        let mut req = GenerationRequest::reconstruct(0, 80, plan.clone(), RngStream::new(0, "r"));
        req.start_noise = Some(eps.clone());
        let rec = generate(&net, &s, Some(&set), &targets, &req).unwrap().remove(0);
        let start_t = plan.floor(80);
        let x = noise_to(&s, &targets[0], start_t, &eps).unwrap();
        let plain = ddim_chain(&net, &s, &plan, &x, start_t).unwrap();
        assert_eq!(rec.data(), plain.data());
    }

    struct Fixed(Draw);

    impl DrawSource for Fixed {
        fn draw(&mut self, _: (usize, usize), _: &[usize], _: Coupling) -> Result<Draw> {
            Ok(self.0.clone())
        }
    }

    /// Zero network, one target, embedding fitted on a single fixed draw; the
    /// one-step chain from that draw's noisy state must land on the target.
    #[test]
    fn fitted_scalar_toy_reconstructs_target() {
        let s = sched();
        let mut net =
            NoiseNet::from_backbone(Mlp::zeros(&[1 + TIME_EMBED_DIM, 2, 1]).unwrap(), 100)
                .unwrap();
        net.freeze();
        let x0 = Tensor::from_vec(vec![-0.6]).unwrap();
        let t_star = 40;
        let eps = rand(11, &[1]);
        let map = RigidityMap::new(1, 0, 100, 100).unwrap();
        let cfg = SgeConfig {
            iterations: 3000,
            ..SgeConfig::default()
        };
        let draw = Draw {
            t: t_star,
            eps: eps.clone(),
            eps_prev: eps.clone(),
        };
        let targets = vec![x0.clone()];
        let set = fit_sge_with(&net, &s, &targets, map, &cfg, vec![Fixed(draw)]).unwrap();
        let plan = InferencePlan::from_timesteps(vec![0, t_star], 100).unwrap();
        let mut req = GenerationRequest::reconstruct(0, t_star, plan, RngStream::new(0, "r"));
        req.start_noise = Some(eps);
        let rec = generate(&net, &s, Some(&set), &targets, &req).unwrap().remove(0);
        assert!((rec.data()[0] - x0.data()[0]).abs() < 1e-2, "{rec:?}");
    }

    #[test]
    fn annealing_boundaries() {
        // above alpha the consumed guidance ignores the embedding; below beta it is exact
        let p = PerturbationSchedule::new(60.0, 30.0, 0.2, 100).unwrap();
        let g1 = rand(1, &[4]);
        let g2 = rand(2, &[4]);
        let a = perturb_guidance(&g1, 70, &p, &mut RngStream::new(0, "x")).unwrap();
        let b = perturb_guidance(&g2, 70, &p, &mut RngStream::new(0, "x")).unwrap();
        assert_eq!(a, b);
        assert_eq!(perturb_guidance(&g1, 30, &p, &mut RngStream::new(0, "x")).unwrap(), g1);
    }

    #[test]
    fn window_must_cover_chain() {
        let s = sched();
        let net = frozen_net(2, 4);
        let map = RigidityMap::new(2, 0, 50, 100).unwrap();
        let set = SgeSet::new(vec![Sge::zeros(map, &[2], Some(0))]).unwrap();
        let req = request(GuidanceSource::PerSample, Start::Prior, 0.0, 1);
        assert!(matches!(
            generate(&net, &s, Some(&set), &[rand(1, &[2])], &req),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn reconstruct_mode_rejects_noise() {
        let s = sched();
        let net = frozen_net(2, 4);
        let map = RigidityMap::new(2, 0, 100, 100).unwrap();
        let set = SgeSet::new(vec![Sge::zeros(map, &[2], Some(0))]).unwrap();
        let mut req =
            GenerationRequest::reconstruct(0, 100, InferencePlan::uniform(100, 5).unwrap(), RngStream::new(0, "r"));
        req.perturbation = Some(PerturbationSchedule::new(90.0, 10.0, 0.3, 100).unwrap());
        assert!(generate(&net, &s, Some(&set), &[rand(1, &[2])], &req).is_err());
    }

    #[test]
    fn noise_scale_spreads_outputs() {
        let s = sched();
        let net = frozen_net(2, 6);
        let map = RigidityMap::new(2, 0, 100, 100).unwrap();
        let mut sge = Sge::zeros(map, &[2], Some(0));
        sge.set_segment(0, &Tensor::from_vec(vec![0.5, -0.5]).unwrap()).unwrap();
        sge.set_segment(1, &Tensor::from_vec(vec![1.0, 0.2]).unwrap()).unwrap();
        let set = SgeSet::new(vec![sge]).unwrap();
        let targets = vec![rand(1, &[2])];
        let spread = |s_val: f64| {
            let mut req = request(GuidanceSource::PerSample, Start::Noised(None), s_val, 32);
            // one shared start state isolates the effect of the perturbation
            req.start_noise = Some(rand(2, &[2]));
            let out = generate(&net, &s, Some(&set), &targets, &req).unwrap();
            let mut acc = 0.0;
            for i in 0..out.len() {
                for j in i + 1..out.len() {
                    acc += out[i].sub(&out[j]).unwrap().norm();
                }
            }
            acc
        };
        assert_eq!(spread(0.0), 0.0);
        assert!(spread(0.5) > spread(0.1));
    }
}
