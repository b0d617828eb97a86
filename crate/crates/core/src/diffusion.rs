//! Forward noising, x0 prediction, deterministic DDIM steps, the score/noise
//! conversion and training of the source noise-prediction network.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::binio::{read_file, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::numerics::{adam_step, gaussian, AdamConfig, AdamState, Mlp, RngStream, Tensor};
use crate::schedules::{InferencePlan, NoiseSchedule};

/// Width of the sinusoidal time embedding fed next to `x_t`.
pub const TIME_EMBED_DIM: usize = 32;

const CHECKPOINT_MAGIC: &[u8; 4] = b"CRDN";
const CHECKPOINT_VERSION: u32 = 1;

/// Rows per gradient chunk during training. Fixed so that the summation
/// order, and therefore the result, does not depend on the thread count.
const TRAIN_CHUNK: usize = 16;

/// Sinusoidal features of `t`: `sin(t / p_k)` and `cos(t / p_k)` for 16
/// periods `p_k` spaced geometrically from 1 to `T`.
pub fn time_embedding(t: usize, steps: usize) -> [f64; TIME_EMBED_DIM] {
    let half = TIME_EMBED_DIM / 2;
    let mut out = [0.0; TIME_EMBED_DIM];
    let log_t = (steps as f64).ln();
    for k in 0..half {
        let period = (log_t * k as f64 / (half - 1) as f64).exp();
        let arg = t as f64 / period;
        out[k] = arg.sin();
        out[half + k] = arg.cos();
    }
    out
}

/// Concatenates each data row with the embedding of its timestep.
fn embed_rows(xs: &[f64], ts: &[usize], dim: usize, steps: usize) -> Vec<f64> {
    let w = dim + TIME_EMBED_DIM;
    let mut rows = vec![0.0; ts.len() * w];
    for (r, &t) in ts.iter().enumerate() {
        let row = &mut rows[r * w..(r + 1) * w];
        row[..dim].copy_from_slice(&xs[r * dim..(r + 1) * dim]);
        row[dim..].copy_from_slice(&time_embedding(t, steps));
    }
    rows
}

/// How the backbone output `F` becomes the noise prediction.
#[derive(Clone, Debug, PartialEq)]
pub enum Head {
    /// `eps_theta = F`.
    Noise,
    /// Preconditioned denoiser: `eps_theta = (x_t - s_t D) / n_t` with
    /// `D = c_skip x_t / s_t + c_out F`, `sigma = n_t / s_t`,
    /// `c_skip = sd^2 / (sigma^2 + sd^2)` and `c_out = sigma / sqrt(sigma^2 + sd^2)`.
    /// The skip path carries the full-rank part of the noise, so a narrow
    /// backbone only has to model the data.
    Denoiser {
        sigma_data: f64,
        schedule: NoiseSchedule,
    },
}

impl Head {
    /// `(a_t, b_t)` with `eps_theta = a_t x_t + b_t F`.
    fn coeffs(&self, t: usize) -> (f64, f64) {
        match self {
            Head::Noise => (0.0, 1.0),
            Head::Denoiser {
                sigma_data,
                schedule,
            } => {
                let (s, n) = (schedule.signal(t), schedule.noise(t));
                let sigma = n / s;
                let denom = sigma * sigma + sigma_data * sigma_data;
                (n / (s * s * denom), -1.0 / denom.sqrt())
            }
        }
    }
}

/// Noise-prediction network `eps_theta(x_t, t)` over `d`-dimensional data.
#[derive(Clone, Debug)]
pub struct NoiseNet {
    backbone: Mlp,
    dim: usize,
    steps: usize,
    head: Head,
    frozen: bool,
}

impl NoiseNet {
    /// Randomly initialised network with the given hidden widths.
    pub fn new(dim: usize, hidden: &[usize], steps: usize, stream: &mut RngStream) -> Result<Self> {
        let mut widths = vec![dim + TIME_EMBED_DIM];
        widths.extend_from_slice(hidden);
        widths.push(dim);
        let backbone = Mlp::init(&widths, 1.0, stream)?;
        Self::from_backbone(backbone, steps)
    }

    pub fn from_backbone(backbone: Mlp, steps: usize) -> Result<Self> {
        let dim = backbone.output_dim();
        if backbone.input_dim() != dim + TIME_EMBED_DIM {
            return Err(Error::shape(format!(
                "backbone input {} must equal output {} + {TIME_EMBED_DIM}",
                backbone.input_dim(),
                dim
            )));
        }
        Ok(Self {
            backbone,
            dim,
            steps,
            head: Head::Noise,
            frozen: false,
        })
    }

    /// Switches to the preconditioned denoiser head for `schedule`.
    pub fn with_denoiser_head(mut self, schedule: &NoiseSchedule, sigma_data: f64) -> Result<Self> {
        if schedule.steps() != self.steps {
            return Err(Error::invalid("net and schedule disagree on T"));
        }
        if !(sigma_data > 0.0 && sigma_data.is_finite()) {
            return Err(Error::invalid("sigma_data must be positive"));
        }
        self.head = Head::Denoiser {
            sigma_data,
            schedule: schedule.clone(),
        };
        Ok(self)
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn backbone(&self) -> &Mlp {
        &self.backbone
    }

    /// Mutable access to the parameters; refused once the net is frozen.
    pub fn backbone_mut(&mut self) -> Result<&mut Mlp> {
        if self.frozen {
            return Err(Error::invalid("noise network is frozen"));
        }
        Ok(&mut self.backbone)
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// SHA-256 over the little-endian parameter bytes, hex encoded.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for w in self.backbone.widths() {
            h.update((*w as u64).to_le_bytes());
        }
        if let Head::Denoiser {
            sigma_data,
            schedule,
        } = &self.head
        {
            let (b0, b1) = schedule.beta_range();
            for v in [*sigma_data, b0, b1] {
                h.update(v.to_le_bytes());
            }
        }
        for p in self.backbone.params() {
            h.update(p.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Turns backbone outputs into noise predictions in place.
    fn apply_head(&self, xs: &[f64], ts: &[usize], out: &mut [f64]) {
        if self.head == Head::Noise {
            return;
        }
        let d = self.dim;
        for (r, &t) in ts.iter().enumerate() {
            let (a, b) = self.head.coeffs(t);
            let xr = &xs[r * d..(r + 1) * d];
            for (o, x) in out[r * d..(r + 1) * d].iter_mut().zip(xr) {
                *o = a * x + b * *o;
            }
        }
    }

    fn input_rows(&self, xs: &[f64], ts: &[usize]) -> Vec<f64> {
        embed_rows(xs, ts, self.dim, self.steps)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::shape(format!(
                "noise net expects {} values, got shape {:?}",
                self.dim,
                x.shape()
            )));
        }
        Ok(())
    }

    /// `eps_theta(x_t, t)` for one sample; the output keeps the input shape.
    pub fn predict(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        self.check_input(x_t)?;
        let rows = self.input_rows(x_t.data(), &[t]);
        let mut out = self.backbone.forward_slice(&rows, 1);
        self.apply_head(x_t.data(), &[t], &mut out);
        Tensor::new(x_t.shape().to_vec(), out)
    }

    /// Batched prediction over `[n, d]` inputs with per-row timesteps.
    pub fn predict_batch(&self, xs: &Tensor, ts: &[usize]) -> Result<Tensor> {
        if xs.len() != ts.len() * self.dim {
            return Err(Error::shape(format!(
                "predict_batch: {} rows of width {} expected, got {:?}",
                ts.len(),
                self.dim,
                xs.shape()
            )));
        }
        let rows = self.input_rows(xs.data(), ts);
        let mut out = self.backbone.forward_slice(&rows, ts.len());
        self.apply_head(xs.data(), ts, &mut out);
        Tensor::new(vec![ts.len(), self.dim], out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = ByteWriter::new(CHECKPOINT_MAGIC, CHECKPOINT_VERSION);
        w.u32(self.steps as u32);
        match &self.head {
            Head::Noise => w.u32(0),
            Head::Denoiser {
                sigma_data,
                schedule,
            } => {
                w.u32(1);
                let (b0, b1) = schedule.beta_range();
                w.f64s(&[*sigma_data, b0, b1]);
            }
        }
        let widths = self.backbone.widths();
        w.u32(widths.len() as u32);
        for &x in widths {
            w.u32(x as u32);
        }
        w.f64s(self.backbone.params());
        w.write_to(path)
    }

    /// Loads a checkpoint; the returned net is frozen.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        Self::decode(&bytes)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::open(bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let steps = r.u32()? as usize;
        let head_at = r.offset();
        let head_params = match r.u32()? {
            0 => None,
            1 => Some(r.f64s(3)?),
            other => return Err(Error::format(head_at, format!("unknown head tag {other}"))),
        };
        let at = r.offset();
        let n = r.u32()? as usize;
        if !(2..=64).contains(&n) {
            return Err(Error::format(at, format!("implausible layer count {n}")));
        }
        let mut widths = Vec::with_capacity(n);
        for _ in 0..n {
            let at = r.offset();
            let w = r.u32()? as usize;
            if w == 0 || w > 1 << 20 {
                return Err(Error::format(at, format!("implausible layer width {w}")));
            }
            widths.push(w);
        }
        let count: usize = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        let params = r.f64s(count)?;
        r.expect_end()?;
        let at = r.offset();
        let backbone = Mlp::from_params(&widths, params)?;
        let mut net = Self::from_backbone(backbone, steps)
            .map_err(|e| Error::format(at, e.to_string()))?;
        if let Some(p) = head_params {
            let schedule = NoiseSchedule::linear(steps, p[1], p[2])
                .map_err(|e| Error::format(head_at, e.to_string()))?;
            net = net
                .with_denoiser_head(&schedule, p[0])
                .map_err(|e| Error::format(head_at, e.to_string()))?;
        }
        net.freeze();
        Ok(net)
    }
}

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Forward noising `sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`.
pub fn noise_to(schedule: &NoiseSchedule, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
    same_shape(x0, eps, "noise_to")?;
    schedule.check_t(t)?;
    x0.lin_comb(schedule.signal(t), eps, schedule.noise(t))
}

/// Direct estimate of `x0` from `x_t` and predicted noise.
pub fn predict_x0(
    schedule: &NoiseSchedule,
    x_t: &Tensor,
    t: usize,
    eps_hat: &Tensor,
) -> Result<Tensor> {
    if t == 0 {
        return Err(Error::invalid("predict_x0 needs t >= 1"));
    }
    schedule.check_t(t)?;
    same_shape(x_t, eps_hat, "predict_x0")?;
    let inv = 1.0 / schedule.signal(t);
    x_t.lin_comb(inv, eps_hat, -schedule.noise(t) * inv)?
        .ensure_finite()
}

/// DDIM update expressed on raw cumulative coefficients.
pub fn ddim_update(x_t: &Tensor, ab_t: f64, ab_prev: f64, eps_hat: &Tensor) -> Result<Tensor> {
    same_shape(x_t, eps_hat, "ddim_update")?;
    let x0 = x_t.lin_comb(1.0 / ab_t.sqrt(), eps_hat, -(1.0 - ab_t).sqrt() / ab_t.sqrt())?;
    x0.lin_comb(ab_prev.sqrt(), eps_hat, (1.0 - ab_prev).sqrt())?
        .ensure_finite()
}

/// Deterministic reverse step from `t` to `t_prev`.
pub fn ddim_step(
    schedule: &NoiseSchedule,
    x_t: &Tensor,
    t: usize,
    t_prev: usize,
    eps_hat: &Tensor,
) -> Result<Tensor> {
    if t_prev >= t {
        return Err(Error::invalid(format!(
            "ddim_step needs t_prev < t, got {t_prev} >= {t}"
        )));
    }
    schedule.check_t(t)?;
    let x0 = predict_x0(schedule, x_t, t, eps_hat)?;
    x0.lin_comb(schedule.signal(t_prev), eps_hat, schedule.noise(t_prev))?
        .ensure_finite()
}

/// Score `-eps / sqrt(1 - ab_t)` implied by a noise prediction.
pub fn score_from_noise(schedule: &NoiseSchedule, eps_hat: &Tensor, t: usize) -> Result<Tensor> {
    if t == 0 {
        return Err(Error::invalid("score is undefined at t = 0"));
    }
    schedule.check_t(t)?;
    Ok(eps_hat.scale(-1.0 / schedule.noise(t)))
}

/// Inverse of [`score_from_noise`].
pub fn noise_from_score(schedule: &NoiseSchedule, score: &Tensor, t: usize) -> Result<Tensor> {
    if t == 0 {
        return Err(Error::invalid("score is undefined at t = 0"));
    }
    schedule.check_t(t)?;
    Ok(score.scale(-schedule.noise(t)))
}

/// Unconditional deterministic chain along `plan` starting at `start_t`.
pub fn ddim_chain(
    net: &NoiseNet,
    schedule: &NoiseSchedule,
    plan: &InferencePlan,
    x_start: &Tensor,
    start_t: usize,
) -> Result<Tensor> {
    let mut x = x_start.clone();
    for (t, t_prev) in plan.descending_from(start_t) {
        let eps = net.predict(&x, t)?;
        x = ddim_step(schedule, &x, t, t_prev, &eps)?;
    }
    Ok(x)
}

/// Optimisation settings for [`train_source`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Final learning rate as a fraction of `lr` after cosine decay.
    pub lr_final_frac: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            batch_size: 64,
            lr: 2e-3,
            lr_final_frac: 0.1,
        }
    }
}

/// Result of [`train_source`]: the frozen net plus the per-step mean loss.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub net: NoiseNet,
    pub loss_trace: Vec<f64>,
}

/// Fits `eps_theta` with the standard noise-regression objective, timesteps
/// uniform on `[1, T]`. The loss is the per-element mean squared error.
pub fn train_source(
    mut net: NoiseNet,
    schedule: &NoiseSchedule,
    dataset: &[Tensor],
    cfg: &TrainConfig,
    stream: &mut RngStream,
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::invalid("training dataset is empty"));
    }
    if let Some(bad) = dataset.iter().position(|x| x.len() != net.dim) {
        return Err(Error::shape(format!(
            "sample {bad} has {} values, net expects {}",
            dataset[bad].len(),
            net.dim
        )));
    }
    if net.steps != schedule.steps() {
        return Err(Error::invalid("net and schedule disagree on T"));
    }
    if cfg.steps > 0 && cfg.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    if let Head::Denoiser { schedule: own, .. } = &net.head {
        if own != schedule {
            return Err(Error::invalid("denoiser head was built for another schedule"));
        }
    }
    let d = net.dim;
    let head = net.head.clone();
    let backbone = net.backbone_mut()?;
    let mut state = AdamState::new(backbone.param_count());
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut adam = AdamConfig::with_lr(cfg.lr);
    let chunk_rows = TRAIN_CHUNK.min(cfg.batch_size.max(1));

    for step in 0..cfg.steps {
        let progress = step as f64 / cfg.steps.max(1) as f64;
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        adam.lr = cfg.lr * (cfg.lr_final_frac + (1.0 - cfg.lr_final_frac) * cosine);

        let b = cfg.batch_size;
        let mut xs = vec![0.0; b * d];
        let mut eps = vec![0.0; b * d];
        let mut ts = vec![0usize; b];
        stream.fill_normal(&mut eps);
        for r in 0..b {
            let idx = stream.uniform_int(0, dataset.len() - 1);
            let t = stream.uniform_int(1, schedule.steps());
            ts[r] = t;
            let (sa, sn) = (schedule.signal(t), schedule.noise(t));
            let x0 = dataset[idx].data();
            for j in 0..d {
                xs[r * d + j] = sa * x0[j] + sn * eps[r * d + j];
            }
        }
        let inputs = embed_rows(&xs, &ts, d, schedule.steps());
        let width = d + TIME_EMBED_DIM;
        let norm = 2.0 / (b * d) as f64;
        let net_ref: &Mlp = backbone;
        let head = &head;

        let partials: Vec<(f64, Vec<f64>)> = (0..b.div_ceil(chunk_rows))
            .into_par_iter()
            .map(|c| {
                let lo = c * chunk_rows;
                let hi = (lo + chunk_rows).min(b);
                let rows = hi - lo;
                let input = &inputs[lo * width..hi * width];
                let out = net_ref.forward_slice(input, rows);
                let mut loss = 0.0;
                let mut upstream = vec![0.0; rows * d];
                for r in 0..rows {
                    let (ca, cb) = head.coeffs(ts[lo + r]);
                    for j in 0..d {
                        let k = r * d + j;
                        let x = xs[lo * d + k];
                        let res = ca * x + cb * out[k] - eps[lo * d + k];
                        loss += res * res;
                        upstream[k] = norm * res * cb;
                    }
                }
                let mut grads = vec![0.0; net_ref.param_count()];
                net_ref.backward_slice(input, rows, &upstream, &mut grads);
                (loss, grads)
            })
            .collect();

        let mut loss = 0.0;
        let mut grads = vec![0.0; backbone.param_count()];
        for (l, g) in &partials {
            loss += l;
            grads.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        let loss = loss / (b * d) as f64;
        if !loss.is_finite() {
            return Err(Error::numeric(step, "non-finite training loss"));
        }
        trace.push(loss);
        adam_step(backbone.params_mut(), &grads, &mut state, &adam)?;
    }
    net.freeze();
    Ok(TrainOutcome {
        net,
        loss_trace: trace,
    })
}

/// Draws `count` unconditional samples from the prior with the DDIM chain.
pub fn sample_unconditional(
    net: &NoiseNet,
    schedule: &NoiseSchedule,
    plan: &InferencePlan,
    count: usize,
    stream: &RngStream,
) -> Result<Vec<Tensor>> {
    let top = *plan.timesteps().last().unwrap();
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut s = stream.child(i);
            let x = gaussian(&mut s, &[net.dim])?;
            ddim_chain(net, schedule, plan, &x, top)
        })
        .collect()
}
