//! Time-indexed coefficients: the discrete noise schedule, the inference
//! sub-sequence, the rigidity segmentation of the guided window and the
//! annealing weight `gamma(t)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Discrete variance-preserving schedule over timesteps `1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    /// `beta[t - 1]` for `t = 1..=T`.
    beta: Vec<f64>,
    /// `alpha_bar[t]` for `t = 0..=T`, with `alpha_bar[0] = 1`.
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas linearly interpolated from `beta_start` at `t = 1` to `beta_end` at `t = T`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::invalid(format!("schedule needs T >= 2, got {steps}")));
        }
        if !(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0) {
            return Err(Error::invalid(format!(
                "need 0 < beta_start < beta_end < 1, got {beta_start} and {beta_end}"
            )));
        }
        let beta: Vec<f64> = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect();
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for b in &beta {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        if acc >= 0.01 {
            return Err(Error::invalid(format!(
                "terminal alpha_bar {acc:.4} is not below 0.01; the prior would keep signal"
            )));
        }
        Ok(Self {
            steps,
            beta_start,
            beta_end,
            beta,
            alpha_bar,
        })
    }

    /// `T`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// The `(beta_start, beta_end)` pair the schedule was built from.
    pub fn beta_range(&self) -> (f64, f64) {
        (self.beta_start, self.beta_end)
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// Signal coefficient `sqrt(alpha_bar_t)`.
    pub fn signal(&self, t: usize) -> f64 {
        self.alpha_bar[t].sqrt()
    }

    /// Noise variance `1 - alpha_bar_t`; adds to `alpha_bar_t` exactly.
    pub fn noise_variance(&self, t: usize) -> f64 {
        1.0 - self.alpha_bar[t]
    }

    /// Noise coefficient `sqrt(1 - alpha_bar_t)`.
    pub fn noise(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar[t]).sqrt()
    }

    pub(crate) fn check_t(&self, t: usize) -> Result<()> {
        if t > self.steps {
            return Err(Error::OutOfRange(format!(
                "timestep {t} exceeds T = {}",
                self.steps
            )));
        }
        Ok(())
    }
}

/// DDIM inference sub-sequence `tau`, strictly increasing from 0.
#[derive(Clone, Debug, PartialEq)]
pub struct InferencePlan {
    tau: Vec<usize>,
}

impl InferencePlan {
    /// `len` timesteps evenly spaced over `[0, T]`, both ends included.
    pub fn uniform(steps: usize, len: usize) -> Result<Self> {
        if len < 2 || len > steps + 1 {
            return Err(Error::invalid(format!(
                "inference plan length {len} must lie in [2, T + 1 = {}]",
                steps + 1
            )));
        }
        let tau: Vec<usize> = (0..len)
            .map(|i| ((i * steps) as f64 / (len - 1) as f64).round() as usize)
            .collect();
        Self::from_timesteps(tau, steps)
    }

    pub fn from_timesteps(tau: Vec<usize>, steps: usize) -> Result<Self> {
        if tau.first() != Some(&0) {
            return Err(Error::invalid("inference plan must start at timestep 0"));
        }
        if tau.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("inference plan must be strictly increasing"));
        }
        if *tau.last().unwrap() > steps {
            return Err(Error::invalid("inference plan exceeds T"));
        }
        Ok(Self { tau })
    }

    pub fn timesteps(&self) -> &[usize] {
        &self.tau
    }

    pub fn len(&self) -> usize {
        self.tau.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tau.is_empty()
    }

    /// Consecutive `(t, t_prev)` pairs walked downward, starting from the
    /// largest plan timestep not above `start`.
    pub fn descending_from(&self, start: usize) -> Vec<(usize, usize)> {
        let top = self.tau.iter().rposition(|&t| t <= start).unwrap_or(0);
        (1..=top).rev().map(|i| (self.tau[i], self.tau[i - 1])).collect()
    }

    /// Largest plan timestep not above `t`.
    pub fn floor(&self, t: usize) -> usize {
        self.tau.iter().copied().filter(|&s| s <= t).max().unwrap_or(0)
    }
}

/// Splits the guided window `[t_lo, t_hi]` into `eta` equal segments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RigidityMap {
    eta: usize,
    t_lo: usize,
    t_hi: usize,
}

impl RigidityMap {
    pub fn new(eta: usize, t_lo: usize, t_hi: usize, steps: usize) -> Result<Self> {
        if !(t_lo < t_hi && t_hi <= steps) {
            return Err(Error::invalid(format!(
                "window ({t_lo}, {t_hi}) must satisfy t_lo < t_hi <= T = {steps}"
            )));
        }
        if eta == 0 || eta > steps || eta > t_hi - t_lo + 1 {
            return Err(Error::invalid(format!(
                "eta {eta} must lie in [1, min(T, window width)]"
            )));
        }
        Ok(Self { eta, t_lo, t_hi })
    }

    /// Window given as fractions of `T`.
    pub fn from_fractions(eta: usize, lo_frac: f64, hi_frac: f64, steps: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&lo_frac) || !(0.0..=1.0).contains(&hi_frac) {
            return Err(Error::invalid("window fractions must lie in [0, 1]"));
        }
        let lo = (lo_frac * steps as f64).round() as usize;
        let hi = (hi_frac * steps as f64).round() as usize;
        Self::new(eta, lo, hi, steps)
    }

    pub fn eta(&self) -> usize {
        self.eta
    }

    pub fn window(&self) -> (usize, usize) {
        (self.t_lo, self.t_hi)
    }

    /// Segment index for timestep `t`; timesteps below the window clamp to 0.
    pub fn segment_for(&self, t: usize) -> Result<usize> {
        if t > self.t_hi {
            return Err(Error::OutOfRange(format!(
                "timestep {t} above guided window end {}",
                self.t_hi
            )));
        }
        if t < self.t_lo {
            return Ok(0);
        }
        let width = self.t_hi - self.t_lo + 1;
        Ok((((t - self.t_lo) * self.eta) / width).min(self.eta - 1))
    }
}

/// Free-function form of [`RigidityMap::segment_for`].
pub fn segment_for(map: &RigidityMap, t: usize) -> Result<usize> {
    map.segment_for(t)
}

/// Annealing configuration: the condition is pure scaled noise for
/// `t >= alpha_t`, clean for `t <= beta_t`, linearly blended in between.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSchedule {
    alpha_t: f64,
    beta_t: f64,
    s: f64,
}

impl PerturbationSchedule {
    pub fn new(alpha_t: f64, beta_t: f64, s: f64, steps: usize) -> Result<Self> {
        if !(0.0 <= beta_t && beta_t < alpha_t && alpha_t <= steps as f64) {
            return Err(Error::invalid(format!(
                "need 0 <= beta ({beta_t}) < alpha ({alpha_t}) <= T ({steps})"
            )));
        }
        if !(s >= 0.0 && s.is_finite()) {
            return Err(Error::invalid(format!("noise scale s must be >= 0, got {s}")));
        }
        Ok(Self { alpha_t, beta_t, s })
    }

    pub fn from_fractions(alpha_frac: f64, beta_frac: f64, s: f64, steps: usize) -> Result<Self> {
        let t = steps as f64;
        Self::new((alpha_frac * t).round(), (beta_frac * t).round(), s, steps)
    }

    pub fn alpha_t(&self) -> f64 {
        self.alpha_t
    }

    pub fn beta_t(&self) -> f64 {
        self.beta_t
    }

    pub fn s(&self) -> f64 {
        self.s
    }

    pub fn with_s(mut self, s: f64) -> Self {
        self.s = s;
        self
    }

    pub fn gamma(&self, t: f64) -> f64 {
        if t <= self.beta_t {
            1.0
        } else if t >= self.alpha_t {
            0.0
        } else {
            // linear from 1 at beta down to 0 at alpha
            (self.alpha_t - t) / (self.alpha_t - self.beta_t)
        }
    }
}

/// Free-function form of [`PerturbationSchedule::gamma`].
pub fn gamma(sched: &PerturbationSchedule, t: f64) -> f64 {
    sched.gamma(t)
}
