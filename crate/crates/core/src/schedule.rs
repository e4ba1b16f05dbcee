//! Discrete noise schedules and the forward (noising) process.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::LatentGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    LinearBeta,
    Cosine,
}

/// Step count at which `beta_end` is reached unscaled. Shorter schedules
/// stretch the ramp end by `1000 / T` so `ᾱ_T` still approaches zero.
const REFERENCE_STEPS: f64 = 1000.0;
const MAX_BETA: f64 = 0.999;

/// Key-value description of a schedule, as stored in run configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Offset `s` of the cosine schedule.
    pub cosine_offset: f64,
    /// Use `ᾱ_t` rather than `√ᾱ_t` as the signal coefficient of the
    /// forward process. Off by default; the samplers always assume the
    /// variance-preserving form.
    pub literal_signal: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::LinearBeta,
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
            cosine_offset: 0.008,
            literal_signal: false,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        let t = self.steps;
        if t < 2 {
            return Err(Error::invalid(format!("schedule needs at least 2 steps, got {t}")));
        }
        if !(self.beta_start > 0.0 && self.beta_start <= self.beta_end && self.beta_end < 1.0) {
            return Err(Error::invalid(format!(
                "beta ramp must satisfy 0 < start <= end < 1, got {} -> {}",
                self.beta_start, self.beta_end
            )));
        }
        let betas: Vec<f64> = match self.kind {
            ScheduleKind::LinearBeta => {
                let end = (self.beta_end * REFERENCE_STEPS / t as f64).min(MAX_BETA);
                (0..=t)
                    .map(|i| (self.beta_start + (end - self.beta_start) * i as f64 / t as f64).min(MAX_BETA))
                    .collect()
            }
            ScheduleKind::Cosine => {
                let s = self.cosine_offset;
                let f = |i: usize| {
                    let u = (i as f64 / t as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2;
                    u.cos().powi(2)
                };
                std::iter::once(self.beta_start)
                    .chain((1..=t).map(|i| (1.0 - f(i) / f(i - 1)).clamp(self.beta_start, MAX_BETA)))
                    .collect()
            }
        };
        let mut alpha_bar = Vec::with_capacity(t + 1);
        let mut acc = 1.0;
        for b in betas {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        let schedule = NoiseSchedule {
            config: self.clone(),
            alpha_bar,
        };
        schedule.validate()?;
        Ok(schedule)
    }
}

/// Decreasing sequence `ᾱ_0 .. ᾱ_T` of cumulative signal fractions.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    alpha_bar: Vec<f64>,
}

/// Schedule of the given kind with the default beta ramp.
pub fn build_schedule(kind: ScheduleKind, steps: usize) -> Result<NoiseSchedule> {
    ScheduleConfig {
        kind,
        steps,
        ..ScheduleConfig::default()
    }
    .build()
}

impl NoiseSchedule {
    /// Schedule from an explicit `ᾱ` table (length `T + 1`).
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 3 {
            return Err(Error::invalid("alpha_bar table needs at least 3 entries"));
        }
        let schedule = NoiseSchedule {
            config: ScheduleConfig {
                steps: alpha_bar.len() - 1,
                ..ScheduleConfig::default()
            },
            alpha_bar,
        };
        schedule.validate()?;
        Ok(schedule)
    }

    fn validate(&self) -> Result<()> {
        let ab = &self.alpha_bar;
        if ab.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
            return Err(Error::invalid("alpha_bar entries must lie in (0, 1]"));
        }
        if ab.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::invalid("alpha_bar must be strictly decreasing"));
        }
        if ab[0] < 0.999 || ab[ab.len() - 1] > 0.01 {
            return Err(Error::invalid(format!(
                "alpha_bar endpoints out of range: alpha_bar[0]={}, alpha_bar[T]={}",
                ab[0],
                ab[ab.len() - 1]
            )));
        }
        Ok(())
    }

    pub fn config(&self) -> &ScheduleConfig {
        &self.config
    }

    pub fn kind(&self) -> ScheduleKind {
        self.config.kind
    }

    /// `T`, the index of the noisiest timestep.
    pub fn num_steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub(crate) fn check_t(&self, t: usize) -> Result<()> {
        if t > self.num_steps() {
            return Err(Error::invalid(format!(
                "timestep {t} outside 0..={}",
                self.num_steps()
            )));
        }
        Ok(())
    }

    /// Coefficient multiplying the clean latent in the forward process.
    pub fn signal_coeff(&self, t: usize) -> f64 {
        if self.config.literal_signal {
            self.alpha_bar[t]
        } else {
            self.alpha_bar[t].sqrt()
        }
    }
}

/// `z_t = √ᾱ_t · z0 + √(1−ᾱ_t) · eps`
pub fn forward_noise(
    z0: &LatentGrid,
    t: usize,
    eps: &LatentGrid,
    schedule: &NoiseSchedule,
) -> Result<LatentGrid> {
    schedule.check_t(t)?;
    let ab = schedule.alpha_bar(t);
    z0.lin_comb(schedule.signal_coeff(t), eps, (1.0 - ab).sqrt())
}

/// Signal-to-noise ratio `ᾱ_t / (1 − ᾱ_t)`.
pub fn snr(t: usize, schedule: &NoiseSchedule) -> Result<f64> {
    schedule.check_t(t)?;
    let ab = schedule.alpha_bar(t);
    Ok(ab / (1.0 - ab))
}
