//! Discrete variance-preserving noise schedule.
//!
//! Time indices run over `0..=T` with `alpha_bar[0] = 1`. The reverse sampler's
//! outer step `s` (for `s = T-1 ..= 0`) is the transition `alpha_bar[s+1] ->
//! alpha_bar[s]`, i.e. a DDIM step at `t = s + 1`.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Patch- or canvas-shaped tensor `(channels, height, width)`.
pub type Patch = Array3<f64>;

/// Per-step coefficients of the forward corruption and the DDIM reverse update.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    eta: f64,
    /// `beta[i]` is the noise rate of step `i + 1`.
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
    gamma: Vec<f64>,
    sigma: Vec<f64>,
    /// `ddim_sigma[t]` is the DDIM noise scale of the transition `t -> t-1`.
    ddim_sigma: Vec<f64>,
}

/// How the schedule is written into run configs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    #[serde(rename = "T")]
    pub steps: usize,
    #[serde(default)]
    pub eta: f64,
    #[serde(default)]
    pub schedule: ScheduleKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ScheduleKind {
    /// Linear beta ramp rescaled by `1000 / T`.
    #[default]
    #[serde(rename = "linear-rescaled")]
    LinearRescaled,
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        match self.schedule {
            ScheduleKind::LinearRescaled => NoiseSchedule::linear(self.steps, self.eta),
        }
    }
}

impl NoiseSchedule {
    /// Linear beta ramp from `1e-4 * 1000/T` to `0.02 * 1000/T`, clamped to
    /// `(0, 0.999]`. Short schedules reach the same terminal signal level as
    /// the 1000-step ramp.
    pub fn linear(steps: usize, eta: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::InvalidArgument(format!(
                "schedule needs at least 2 steps, got {steps}"
            )));
        }
        if !(eta >= 0.0 && eta.is_finite()) {
            return Err(Error::InvalidArgument(format!("eta must be >= 0, got {eta}")));
        }
        let rescale = 1000.0 / steps as f64;
        let (lo, hi) = (1e-4 * rescale, 0.02 * rescale);
        let beta: Vec<f64> = (0..steps)
            .map(|i| {
                let b = lo + (hi - lo) * i as f64 / (steps - 1) as f64;
                b.clamp(f64::MIN_POSITIVE, 0.999)
            })
            .collect();
        Self::from_betas(beta, eta)
    }

    /// Build from explicit per-step noise rates.
    pub fn from_betas(beta: Vec<f64>, eta: f64) -> Result<Self> {
        let steps = beta.len();
        if steps < 2 {
            return Err(Error::InvalidArgument("schedule needs at least 2 steps".into()));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::InvalidArgument(format!("beta {b} outside (0, 1)")));
        }
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        for b in &beta {
            let prev = *alpha_bar.last().unwrap();
            alpha_bar.push(prev * (1.0 - b));
        }
        let gamma = alpha_bar.iter().map(|a| a.sqrt()).collect();
        let sigma = alpha_bar.iter().map(|a| (1.0 - a).sqrt()).collect();
        let mut ddim_sigma = vec![0.0; steps + 1];
        for t in 1..=steps {
            let (a_t, a_prev) = (alpha_bar[t], alpha_bar[t - 1]);
            ddim_sigma[t] = eta * ((1.0 - a_prev) / (1.0 - a_t)).sqrt() * (1.0 - a_t / a_prev).sqrt();
        }
        let schedule = NoiseSchedule {
            steps,
            eta,
            beta,
            alpha_bar,
            gamma,
            sigma,
            ddim_sigma,
        };
        for t in 1..=steps {
            let r = schedule.direction_radicand(t);
            if r < -1e-12 {
                return Err(Error::InvalidArgument(format!(
                    "eta = {eta} makes the DDIM direction coefficient imaginary at t = {t}"
                )));
            }
        }
        Ok(schedule)
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Signal coefficient `sqrt(alpha_bar[t])`.
    pub fn gamma(&self, t: usize) -> f64 {
        self.gamma[t]
    }

    /// Noise coefficient `sqrt(1 - alpha_bar[t])`.
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    pub fn ddim_sigma(&self, t: usize) -> f64 {
        self.ddim_sigma[t]
    }

    fn direction_radicand(&self, t: usize) -> f64 {
        1.0 - self.alpha_bar[t - 1] - self.ddim_sigma[t].powi(2)
    }

    /// Scalar coefficients `(signal, direction, noise)` of the DDIM update at
    /// `t`, so that `z_{t-1} = c0 * x0_hat + c1 * eps_hat + c2 * noise`.
    pub fn ddim_coefficients(&self, t: usize) -> Result<(f64, f64, f64)> {
        self.check_step(t)?;
        let r = self.direction_radicand(t);
        if r < -1e-12 {
            return Err(Error::NegativeRadicand { t, value: r });
        }
        Ok((self.gamma[t - 1], r.max(0.0).sqrt(), self.ddim_sigma[t]))
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(Error::TimeOutOfRange { t, max: self.steps });
        }
        Ok(())
    }
}

/// Forward corruption `gamma_t * x0 + sigma_t * noise`. `t = 0` is the clean
/// level and returns `x0`.
pub fn corrupt(x0: &Patch, t: usize, noise: &Patch, s: &NoiseSchedule) -> Result<Patch> {
    if x0.shape() != noise.shape() {
        return Err(Error::shape(x0.shape(), noise.shape()));
    }
    if t > s.steps() {
        return Err(Error::TimeOutOfRange { t, max: s.steps() });
    }
    let (g, sg) = (s.gamma(t), s.sigma(t));
    let mut out = x0.clone();
    out.zip_mut_with(noise, |x, e| *x = g * *x + sg * e);
    Ok(out)
}

/// One DDIM transition `alpha_bar[t] -> alpha_bar[t-1]`.
///
/// `noise` may be `None` when the step is deterministic (`eta = 0`).
pub fn ddim_step(z: &Patch, eps_hat: &Patch, t: usize, s: &NoiseSchedule, noise: Option<&Patch>) -> Result<Patch> {
    if z.shape() != eps_hat.shape() {
        return Err(Error::shape(z.shape(), eps_hat.shape()));
    }
    let (c_signal, c_dir, c_noise) = s.ddim_coefficients(t)?;
    let (g, sg) = (s.gamma(t), s.sigma(t));
    let mut out = Patch::zeros(z.raw_dim());
    ndarray::Zip::from(&mut out).and(z).and(eps_hat).for_each(|o, &z, &e| {
        let x0 = (z - sg * e) / g;
        *o = c_signal * x0 + c_dir * e;
    });
    if c_noise > 0.0 {
        let noise = noise
            .ok_or_else(|| Error::InvalidArgument(format!("stochastic DDIM step at t = {t} needs a noise draw")))?;
        if noise.shape() != z.shape() {
            return Err(Error::shape(z.shape(), noise.shape()));
        }
        out.zip_mut_with(noise, |o, n| *o += c_noise * n);
    }
    Ok(out)
}
