//! Sample-wise guidance embeddings.
//!
//! An embedding is a set of `eta` vectors, one per segment of the guided
//! timestep window. It enters the reverse process as an additive score term,
//! which in noise space reads `eps_hat = eps_theta(x_t, t) - sqrt(1 - ab_t) * g`.
//! Fitting keeps the network frozen and only moves the embedding: every
//! iteration re-noises the target at a fresh random timestep, predicts `x0`
//! and `x_{t-1}` through the guided noise, and descends
//!
//! ```text
//! L = |x0 - x0'|^2 + |x_{t-1} - x_{t-1}'|^2 + lambda * |G_i - mean_j G_j|^2
//! ```
//!
//! on the segment that owns `t`.
//!
//! Both predictions are affine in `g` (the network sees `x_t`, which does not
//! depend on `g`), so the gradient is exact and closed-form.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{read_file, ByteReader, ByteWriter};
use crate::diffusion::{noise_to, NoiseNet};
use crate::error::{Error, Result};
use crate::numerics::{adam_step, gaussian, AdamConfig, AdamState, RngStream, Tensor};
use crate::schedules::{NoiseSchedule, RigidityMap};

const SGE_MAGIC: &[u8; 4] = b"CRDS";
const SGE_VERSION: u32 = 1;

/// How the noisy input `x_t` relates to the regression target `x_{t-1}`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Coupling {
    /// Both are noised with the same `eps`.
    #[default]
    Coupled,
    /// `x_{t-1}` gets its own noise draw.
    Independent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgeConfig {
    /// Passes over the few-shot set; each pass updates every sample once.
    pub iterations: usize,
    pub lr: f64,
    /// Weight of the pull toward the set mean.
    pub lambda: f64,
    pub coupling: Coupling,
    /// Scale each segment's step by the geometric mean of `s_t / n_t^2` over
    /// its timesteps, so `lr` acts as a step in `x0` units everywhere.
    #[serde(default = "default_scaled")]
    pub scaled_steps: bool,
}

fn default_scaled() -> bool {
    true
}

impl Default for SgeConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            lr: 1e-2,
            lambda: 1.0,
            coupling: Coupling::Coupled,
            scaled_steps: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitMeta {
    /// Mean loss over the last tenth of the iterations.
    pub final_loss: f64,
    pub iterations: usize,
}

/// Guidance embedding for one target sample (or the set mean).
#[derive(Clone, Debug, PartialEq)]
pub struct Sge {
    /// `eta * d` values, segment-major.
    segments: Vec<f64>,
    sample_shape: Vec<usize>,
    map: RigidityMap,
    sample_id: Option<usize>,
    meta: FitMeta,
}

impl Sge {
    pub fn zeros(map: RigidityMap, sample_shape: &[usize], sample_id: Option<usize>) -> Self {
        let d: usize = sample_shape.iter().product();
        Self {
            segments: vec![0.0; map.eta() * d],
            sample_shape: sample_shape.to_vec(),
            map,
            sample_id,
            meta: FitMeta::default(),
        }
    }

    pub fn dim(&self) -> usize {
        self.segments.len() / self.map.eta()
    }

    pub fn eta(&self) -> usize {
        self.map.eta()
    }

    pub fn map(&self) -> &RigidityMap {
        &self.map
    }

    pub fn sample_id(&self) -> Option<usize> {
        self.sample_id
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn meta(&self) -> &FitMeta {
        &self.meta
    }

    pub fn values(&self) -> &[f64] {
        &self.segments
    }

    pub fn segment_slice(&self, k: usize) -> &[f64] {
        let d = self.dim();
        &self.segments[k * d..(k + 1) * d]
    }

    fn segment_slice_mut(&mut self, k: usize) -> &mut [f64] {
        let d = self.dim();
        &mut self.segments[k * d..(k + 1) * d]
    }

    pub fn segment(&self, k: usize) -> Tensor {
        Tensor::from_parts(self.sample_shape.clone(), self.segment_slice(k).to_vec())
    }

    /// Overwrites segment `k`.
    pub fn set_segment(&mut self, k: usize, values: &Tensor) -> Result<()> {
        if k >= self.eta() || values.len() != self.dim() {
            return Err(Error::shape(format!(
                "segment {k} of {} needs {} values",
                self.eta(),
                self.dim()
            )));
        }
        self.segment_slice_mut(k).copy_from_slice(values.data());
        Ok(())
    }

    /// Guidance vector in force at timestep `t`.
    pub fn guidance_at(&self, t: usize) -> Result<Tensor> {
        Ok(self.segment(self.map.segment_for(t)?))
    }
}

/// Per-sample embeddings sharing one rigidity map, plus their mean.
#[derive(Clone, Debug, PartialEq)]
pub struct SgeSet {
    members: Vec<Sge>,
    mean: Vec<f64>,
}

impl SgeSet {
    pub fn new(members: Vec<Sge>) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::invalid("an SGE set needs at least one member"))?;
        if members
            .iter()
            .any(|m| m.map != first.map || m.sample_shape != first.sample_shape)
        {
            return Err(Error::invalid("SGE set members must share eta, window and shape"));
        }
        let mean = mean_of(&members);
        Ok(Self { members, mean })
    }

    pub fn members(&self) -> &[Sge] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn map(&self) -> &RigidityMap {
        &self.members[0].map
    }

    pub fn get(&self, id: usize) -> Result<&Sge> {
        self.members.get(id).ok_or_else(|| {
            Error::invalid(format!(
                "unknown sample id {id}; set holds {}",
                self.members.len()
            ))
        })
    }

    /// Per-segment arithmetic mean of the members.
    pub fn mean_values(&self) -> &[f64] {
        &self.mean
    }

    fn refresh_mean(&mut self) {
        self.mean = mean_of(&self.members);
    }

    /// Writes the binary `CRDS` file with its trailing JSON metadata block.
    pub fn save(&self, path: &Path, steps: usize) -> Result<()> {
        let map = self.map();
        let (lo, hi) = map.window();
        let mut w = ByteWriter::new(SGE_MAGIC, SGE_VERSION);
        w.u32(self.members.len() as u32);
        w.u32(map.eta() as u32);
        w.u32(self.members[0].dim() as u32);
        w.u32(lo as u32);
        w.u32(hi as u32);
        for m in &self.members {
            w.f64s(&m.segments);
        }
        let meta = SgeFileMeta {
            steps,
            sample_shape: self.members[0].sample_shape.clone(),
            members: self
                .members
                .iter()
                .map(|m| MemberMeta {
                    sample_id: m.sample_id,
                    final_loss: m.meta.final_loss,
                    iterations: m.meta.iterations,
                })
                .collect(),
        };
        w.bytes(serde_json::to_string(&meta)?.as_bytes());
        w.write_to(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&read_file(path)?)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::open(bytes, SGE_MAGIC, SGE_VERSION)?;
        let n = r.u32()? as usize;
        let eta = r.u32()? as usize;
        let d = r.u32()? as usize;
        let lo = r.u32()? as usize;
        let at = r.offset();
        let hi = r.u32()? as usize;
        if n == 0 || eta == 0 || d == 0 {
            return Err(Error::format(8, "empty SGE header"));
        }
        let data = r.f64s(n * eta * d)?;
        let meta_at = r.offset();
        let meta: SgeFileMeta = serde_json::from_slice(r.rest())
            .map_err(|e| Error::format(meta_at, format!("metadata block: {e}")))?;
        if meta.members.len() != n || meta.sample_shape.iter().product::<usize>() != d {
            return Err(Error::format(meta_at, "metadata disagrees with header"));
        }
        let map = RigidityMap::new(eta, lo, hi, meta.steps)
            .map_err(|e| Error::format(at, e.to_string()))?;
        let members = data
            .chunks(eta * d)
            .zip(&meta.members)
            .map(|(chunk, mm)| Sge {
                segments: chunk.to_vec(),
                sample_shape: meta.sample_shape.clone(),
                map,
                sample_id: mm.sample_id,
                meta: FitMeta {
                    final_loss: mm.final_loss,
                    iterations: mm.iterations,
                },
            })
            .collect();
        Self::new(members)
    }
}

#[derive(Serialize, Deserialize)]
struct SgeFileMeta {
    steps: usize,
    sample_shape: Vec<usize>,
    members: Vec<MemberMeta>,
}

#[derive(Serialize, Deserialize)]
struct MemberMeta {
    sample_id: Option<usize>,
    final_loss: f64,
    iterations: usize,
}

fn mean_of(members: &[Sge]) -> Vec<f64> {
    let n = members.len() as f64;
    let mut mean = vec![0.0; members[0].segments.len()];
    for m in members {
        mean.iter_mut().zip(&m.segments).for_each(|(a, b)| *a += b);
    }
    mean.iter_mut().for_each(|a| *a /= n);
    mean
}

/// Set-wise embedding: the per-segment mean of all members.
pub fn mean_sge(set: &SgeSet) -> Result<Sge> {
    if set.members.is_empty() {
        return Err(Error::invalid("mean of an empty SGE set"));
    }
    let first = &set.members[0];
    Ok(Sge {
        segments: set.mean.clone(),
        sample_shape: first.sample_shape.clone(),
        map: first.map,
        sample_id: None,
        meta: FitMeta::default(),
    })
}

/// `eps - sqrt(1 - ab_t) * g`.
pub fn guide_noise(schedule: &NoiseSchedule, eps: &Tensor, t: usize, g: &Tensor) -> Result<Tensor> {
    if g.len() != eps.len() {
        return Err(Error::shape(format!(
            "guidance has {} values, noise has {}",
            g.len(),
            eps.len()
        )));
    }
    let g = Tensor::from_parts(eps.shape().to_vec(), g.data().to_vec());
    eps.lin_comb(1.0, &g, -schedule.noise(t))
}

/// Network noise prediction shifted by guidance `g`.
pub fn guided_noise(
    net: &NoiseNet,
    schedule: &NoiseSchedule,
    x_t: &Tensor,
    t: usize,
    g: &Tensor,
) -> Result<Tensor> {
    if t == 0 {
        return Err(Error::invalid("guided noise needs t >= 1"));
    }
    let eps = net.predict(x_t, t)?;
    guide_noise(schedule, &eps, t, g)
}

/// Everything one fitting step sees apart from the embedding itself.
#[derive(Clone, Copy, Debug)]
pub struct SgeStep<'a> {
    pub schedule: &'a NoiseSchedule,
    pub t: usize,
    pub x0: &'a Tensor,
    pub x_t: &'a Tensor,
    /// Forward-noised target at `t - 1`.
    pub x_prev: &'a Tensor,
    /// `eps_theta(x_t, t)` from the frozen network.
    pub net_eps: &'a Tensor,
}

/// Loss value and its gradient with respect to the active segment.
#[derive(Clone, Debug)]
pub struct SgeLoss {
    pub value: f64,
    pub x0_term: f64,
    pub prev_term: f64,
    pub penalty: f64,
    pub grad: Tensor,
}

/// Loss of one step for active segment `g`. The penalty anchor is the
/// segment's set mean, held fixed while differentiating.
pub fn sge_loss(
    step: &SgeStep<'_>,
    g: &Tensor,
    anchor: Option<(&Tensor, f64)>,
) -> Result<SgeLoss> {
    let SgeStep {
        schedule,
        t,
        x0,
        x_t,
        x_prev,
        net_eps,
    } = *step;
    if t == 0 {
        return Err(Error::invalid("sge_loss needs t >= 1"));
    }
    let d = x0.len();
    if [x_t.len(), x_prev.len(), net_eps.len(), g.len()]
        .iter()
        .any(|&n| n != d)
    {
        return Err(Error::shape("sge_loss operands differ in length"));
    }
    let (s_t, n_t) = (schedule.signal(t), schedule.noise(t));
    let (s_p, n_p) = (schedule.signal(t - 1), schedule.noise(t - 1));
    // x0' = (x_t - n_t * eps_hat) / s_t with eps_hat = e - n_t * g
    let dx0_dg = n_t * n_t / s_t;
    // x_prev' = s_p * x0' + n_p * eps_hat
    let dprev_dg = s_p * dx0_dg - n_p * n_t;

    let mut x0_term = 0.0;
    let mut prev_term = 0.0;
    let mut grad = vec![0.0; d];
    for j in 0..d {
        let eps_hat = net_eps.data()[j] - n_t * g.data()[j];
        let x0_pred = (x_t.data()[j] - n_t * eps_hat) / s_t;
        let prev_pred = s_p * x0_pred + n_p * eps_hat;
        let r0 = x0.data()[j] - x0_pred;
        let r1 = x_prev.data()[j] - prev_pred;
        x0_term += r0 * r0;
        prev_term += r1 * r1;
        grad[j] = -2.0 * (dx0_dg * r0 + dprev_dg * r1);
    }
    let mut penalty = 0.0;
    if let Some((mean, lambda)) = anchor {
        if mean.len() != d {
            return Err(Error::shape("penalty anchor length differs"));
        }
        for j in 0..d {
            let diff = g.data()[j] - mean.data()[j];
            penalty += lambda * diff * diff;
            grad[j] += 2.0 * lambda * diff;
        }
    }
    let value = x0_term + prev_term + penalty;
    if !value.is_finite() {
        return Err(Error::numeric(0, "non-finite SGE loss"));
    }
    Ok(SgeLoss {
        value,
        x0_term,
        prev_term,
        penalty,
        grad: Tensor::new(g.shape().to_vec(), grad)?,
    })
}

/// Noise draws for one fitting step.
#[derive(Clone, Debug)]
pub struct Draw {
    pub t: usize,
    /// Noise for `x_t`.
    pub eps: Tensor,
    /// Noise for `x_{t-1}`.
    pub eps_prev: Tensor,
}

/// Source of per-iteration draws for one sample.
pub trait DrawSource {
    fn draw(&mut self, t_range: (usize, usize), shape: &[usize], coupling: Coupling)
        -> Result<Draw>;
}

impl DrawSource for RngStream {
    fn draw(
        &mut self,
        (lo, hi): (usize, usize),
        shape: &[usize],
        coupling: Coupling,
    ) -> Result<Draw> {
        let t = self.uniform_int(lo, hi);
        let eps = gaussian(self, shape)?;
        let eps_prev = match coupling {
            Coupling::Coupled => eps.clone(),
            Coupling::Independent => gaussian(self, shape)?,
        };
        Ok(Draw { t, eps, eps_prev })
    }
}

struct Learner<D> {
    sge: Sge,
    states: Vec<AdamState>,
    draws: D,
    recent: Vec<f64>,
}

/// Per-segment step multipliers. A unit change of `g` moves the `x0`
/// prediction by `n_t^2 / s_t`, which spans orders of magnitude over `t`.
fn segment_step_scales(
    schedule: &NoiseSchedule,
    map: &RigidityMap,
    (lo, hi): (usize, usize),
    scaled: bool,
) -> Result<Vec<f64>> {
    if !scaled {
        return Ok(vec![1.0; map.eta()]);
    }
    let mut log_sum = vec![0.0; map.eta()];
    let mut count = vec![0usize; map.eta()];
    for t in lo..=hi {
        let k = map.segment_for(t)?;
        let n = schedule.noise(t);
        log_sum[k] += (schedule.signal(t) / (n * n)).ln();
        count[k] += 1;
    }
    Ok(log_sum
        .iter()
        .zip(&count)
        .map(|(s, &c)| if c == 0 { 1.0 } else { (s / c as f64).exp() })
        .collect())
}

/// Fits one embedding per target against a frozen network.
pub fn fit_sge(
    net: &NoiseNet,
    schedule: &NoiseSchedule,
    targets: &[Tensor],
    map: RigidityMap,
    cfg: &SgeConfig,
    stream: &RngStream,
) -> Result<SgeSet> {
    let sources = (0..targets.len())
        .map(|i| stream.child(format!("sample{i}")))
        .collect();
    fit_sge_with(net, schedule, targets, map, cfg, sources)
}

/// [`fit_sge`] with caller-provided draw sources, one per target.
pub fn fit_sge_with<D: DrawSource + Send>(
    net: &NoiseNet,
    schedule: &NoiseSchedule,
    targets: &[Tensor],
    map: RigidityMap,
    cfg: &SgeConfig,
    sources: Vec<D>,
) -> Result<SgeSet> {
    if !net.is_frozen() {
        return Err(Error::invalid("fit_sge needs a frozen noise network"));
    }
    if targets.is_empty() {
        return Err(Error::invalid("fit_sge needs at least one target"));
    }
    if sources.len() != targets.len() {
        return Err(Error::invalid("one draw source per target is required"));
    }
    let shape = targets[0].shape().to_vec();
    if targets.iter().any(|x| x.shape() != shape.as_slice()) || targets[0].len() != net.dim() {
        return Err(Error::shape("targets must share a shape matching the network"));
    }
    let (lo, hi) = map.window();
    let t_range = (lo.max(1), hi);
    let eta = map.eta();
    let adams: Vec<AdamConfig> = segment_step_scales(schedule, &map, t_range, cfg.scaled_steps)?
        .into_iter()
        .map(|c| AdamConfig::with_lr(cfg.lr * c))
        .collect();
    let tail = (cfg.iterations / 10).max(1);

    let mut learners: Vec<Learner<D>> = sources
        .into_iter()
        .enumerate()
        .map(|(i, draws)| Learner {
            sge: Sge::zeros(map, &shape, Some(i)),
            states: (0..eta).map(|_| AdamState::new(targets[0].len())).collect(),
            draws,
            recent: Vec::new(),
        })
        .collect();
    let mut mean = vec![0.0; eta * targets[0].len()];
    let use_penalty = cfg.lambda != 0.0;

    for iter in 0..cfg.iterations {
        let mean_ref = &mean;
        learners
            .par_iter_mut()
            .zip(targets.par_iter())
            .try_for_each(|(l, x0)| -> Result<()> {
                let Draw { t, eps, eps_prev } = l.draws.draw(t_range, &shape, cfg.coupling)?;
                let x_t = noise_to(schedule, x0, t, &eps)?;
                let x_prev = noise_to(schedule, x0, t - 1, &eps_prev)?;
                let net_eps = net.predict(&x_t, t)?;
                let k = map.segment_for(t)?;
                let g = l.sge.segment(k);
                let d = g.len();
                let anchor_t =
                    Tensor::from_parts(shape.clone(), mean_ref[k * d..(k + 1) * d].to_vec());
                let anchor = use_penalty.then_some((&anchor_t, cfg.lambda));
                let step = SgeStep {
                    schedule,
                    t,
                    x0,
                    x_t: &x_t,
                    x_prev: &x_prev,
                    net_eps: &net_eps,
                };
                let loss = sge_loss(&step, &g, anchor)?;
                if iter + tail >= cfg.iterations {
                    l.recent.push(loss.value);
                }
                adam_step(
                    l.sge.segment_slice_mut(k),
                    loss.grad.data(),
                    &mut l.states[k],
                    &adams[k],
                )
            })?;
        let members: Vec<&Sge> = learners.iter().map(|l| &l.sge).collect();
        let n = members.len() as f64;
        mean.iter_mut().for_each(|v| *v = 0.0);
        for m in members {
            mean.iter_mut().zip(&m.segments).for_each(|(a, b)| *a += b);
        }
        mean.iter_mut().for_each(|v| *v /= n);
    }

    let members = learners
        .into_iter()
        .map(|l| {
            let mut sge = l.sge;
            sge.meta = FitMeta {
                final_loss: if l.recent.is_empty() {
                    0.0
                } else {
                    l.recent.iter().sum::<f64>() / l.recent.len() as f64
                },
                iterations: cfg.iterations,
            };
            sge
        })
        .collect();
    let mut set = SgeSet::new(members)?;
    set.refresh_mean();
    Ok(set)
}
