//! Reverse-process steps, sampling loops and deterministic DDIM inversion.

use serde::{Deserialize, Serialize};

use crate::denoiser::{Condition, Denoiser};
use crate::error::{Error, Result};
use crate::grid::{seeded_rng, GaussianSource, LatentGrid};
use crate::schedule::{forward_noise, NoiseSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Ddpm,
    Ddim,
}

pub const DEFAULT_INVERSION_REFINEMENTS: usize = 0;

/// Largest accepted seed. Config files store seeds as TOML integers, which
/// are signed 64-bit.
pub const MAX_SEED: u64 = i64::MAX as u64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    /// Number of sampling steps `S`.
    pub steps: usize,
    /// DDIM stochasticity; ignored for DDPM.
    pub eta: f64,
    pub seed: u64,
    /// Fixed-point refinements per inversion step (see [`ddim_invert`]).
    pub inversion_refinements: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            kind: SamplerKind::Ddim,
            steps: 50,
            eta: 0.0,
            seed: 0,
            inversion_refinements: DEFAULT_INVERSION_REFINEMENTS,
        }
    }
}

impl SamplerConfig {
    pub fn ddim(steps: usize, seed: u64) -> Self {
        Self {
            kind: SamplerKind::Ddim,
            steps,
            eta: 0.0,
            seed,
            inversion_refinements: DEFAULT_INVERSION_REFINEMENTS,
        }
    }

    pub fn validate(&self, s: &NoiseSchedule) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::invalid(format!("eta must lie in [0, 1], got {}", self.eta)));
        }
        if self.seed > MAX_SEED {
            return Err(Error::invalid(format!("seed must be at most {MAX_SEED}, got {}", self.seed)));
        }
        sampling_timesteps(s.num_steps(), self.steps).map(|_| ())
    }

    pub fn timesteps(&self, s: &NoiseSchedule) -> Result<Vec<usize>> {
        sampling_timesteps(s.num_steps(), self.steps)
    }
}

/// `S` strictly decreasing timesteps by uniform stride: `T, T − T/S, …`.
/// The step after the last one lands on `t = 0`.
pub fn sampling_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(Error::invalid(format!(
            "sample step count must lie in 1..={total}, got {steps}"
        )));
    }
    Ok((0..steps).map(|i| total - i * total / steps).collect())
}

/// Latents recorded at each visited timestep, in decreasing-`t` order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub timesteps: Vec<usize>,
    pub latents: Vec<LatentGrid>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.timesteps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timesteps.is_empty()
    }

    pub fn latent_at(&self, t: usize) -> Option<&LatentGrid> {
        self.timesteps
            .iter()
            .position(|&x| x == t)
            .map(|i| &self.latents[i])
    }

    /// The last recorded latent (the sample, for sampling trajectories).
    pub fn last(&self) -> Option<&LatentGrid> {
        self.latents.last()
    }

    fn push(&mut self, t: usize, z: LatentGrid) {
        self.timesteps.push(t);
        self.latents.push(z);
    }
}

/// `ᾱ` used by the samplers: the step that lands on `t = 0` is treated as
/// fully clean (`ᾱ = 1`), so the last update returns `x̂0` itself.
pub fn step_alpha_bar(t: usize, s: &NoiseSchedule) -> f64 {
    if t == 0 {
        1.0
    } else {
        s.alpha_bar(t)
    }
}

fn check_step(t: usize, t_prev: usize, s: &NoiseSchedule) -> Result<()> {
    if t <= t_prev {
        return Err(Error::invalid(format!("step must go backwards in time, got {t} -> {t_prev}")));
    }
    s.check_t(t)
}

/// Generalized DDIM update from `t` to `t_prev`:
///
/// `z' = √ᾱ' x̂0 + √(1 − ᾱ' − σ²) ε̂ + σ ξ`,
/// `σ = η √((1 − ᾱ')/(1 − ᾱ)) √(1 − ᾱ/ᾱ')`.
///
/// The step that lands on `t = 0` returns `x̂0` (see [`step_alpha_bar`]).
pub fn ddim_step<G: GaussianSource + ?Sized>(
    z_t: &LatentGrid,
    t: usize,
    t_prev: usize,
    eps_hat: &LatentGrid,
    s: &NoiseSchedule,
    eta: f64,
    noise: &mut G,
) -> Result<LatentGrid> {
    check_step(t, t_prev, s)?;
    z_t.ensure_shape(eps_hat)?;
    let ab = s.alpha_bar(t);
    let ab_prev = step_alpha_bar(t_prev, s);
    let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).sqrt();
    let x0 = z_t.lin_comb(1.0 / ab.sqrt(), eps_hat, -(1.0 - ab).sqrt() / ab.sqrt())?;
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let mut out = x0.lin_comb(ab_prev.sqrt(), eps_hat, dir)?;
    if sigma > 0.0 {
        for v in out.as_mut_slice() {
            *v += sigma * noise.next_gaussian();
        }
    }
    Ok(out)
}

/// Posterior variance `β̃ = (1 − ᾱ')/(1 − ᾱ) · (1 − ᾱ/ᾱ')` of the DDPM step.
pub fn ddpm_posterior_variance(t: usize, t_prev: usize, s: &NoiseSchedule) -> f64 {
    let ab = s.alpha_bar(t);
    let ab_prev = step_alpha_bar(t_prev, s);
    (1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev)
}

/// Ancestral DDPM update: sample `q(z_{t'} | z_t, x̂0)`.
pub fn ddpm_step<G: GaussianSource + ?Sized>(
    z_t: &LatentGrid,
    t: usize,
    t_prev: usize,
    eps_hat: &LatentGrid,
    s: &NoiseSchedule,
    noise: &mut G,
) -> Result<LatentGrid> {
    check_step(t, t_prev, s)?;
    z_t.ensure_shape(eps_hat)?;
    let ab = s.alpha_bar(t);
    let ab_prev = step_alpha_bar(t_prev, s);
    let alpha_step = ab / ab_prev;
    let beta_step = 1.0 - alpha_step;
    let x0 = z_t.lin_comb(1.0 / ab.sqrt(), eps_hat, -(1.0 - ab).sqrt() / ab.sqrt())?;
    let mut out = x0.lin_comb(
        ab_prev.sqrt() * beta_step / (1.0 - ab),
        z_t,
        alpha_step.sqrt() * (1.0 - ab_prev) / (1.0 - ab),
    )?;
    if t_prev > 0 {
        let std = ddpm_posterior_variance(t, t_prev, s).sqrt();
        for v in out.as_mut_slice() {
            *v += std * noise.next_gaussian();
        }
    }
    Ok(out)
}

/// Position of a sampling step within its loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepContext {
    pub index: usize,
    pub num_steps: usize,
    pub t: usize,
    pub t_prev: usize,
}

/// Per-step latent update applied before the denoiser is evaluated.
pub trait GuidanceHook: Sync {
    fn is_active(&self, ctx: &StepContext) -> bool;

    fn apply(&self, z_t: &LatentGrid, ctx: &StepContext) -> Result<LatentGrid>;
}

/// Runs the reverse process from seeded `z_T ~ N(0, I)`.
///
/// On every step where `guidance` is active the hook updates `z_t` first
/// and the denoiser sees the updated latent. The trajectory records the
/// latent fed to the denoiser at each timestep, then the final `z_0`.
pub fn sample(
    den: &dyn Denoiser,
    cond: &Condition,
    cfg: &SamplerConfig,
    s: &NoiseSchedule,
    guidance: Option<&dyn GuidanceHook>,
) -> Result<Trajectory> {
    cfg.validate(s)?;
    let ts = cfg.timesteps(s)?;
    let mut rng = seeded_rng(cfg.seed);
    let mut z = LatentGrid::gaussian(den.shape(), &mut rng);
    let mut traj = Trajectory::default();
    for (index, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(index + 1).copied().unwrap_or(0);
        let ctx = StepContext {
            index,
            num_steps: ts.len(),
            t,
            t_prev,
        };
        if let Some(hook) = guidance {
            if hook.is_active(&ctx) {
                z = hook.apply(&z, &ctx)?;
            }
        }
        let eps = den.predict(&z, t, cond)?;
        let next = match cfg.kind {
            SamplerKind::Ddim => ddim_step(&z, t, t_prev, &eps, s, cfg.eta, &mut rng)?,
            SamplerKind::Ddpm => ddpm_step(&z, t, t_prev, &eps, s, &mut rng)?,
        };
        traj.push(t, std::mem::replace(&mut z, next));
    }
    traj.push(0, z);
    Ok(traj)
}

/// Deterministic DDIM inversion of `z0` along the sampler's timestep grid,
/// visiting every grid timestep `≤ t_stop`.
///
/// Step `t' → t` looks for the `z_t` that the sampling step `t → t'` maps
/// onto the current latent. The first guess evaluates the denoiser on the
/// current latent at `t`; each of `cfg.inversion_refinements` fixed-point
/// passes re-evaluates it on the latest guess. Zero refinements is the plain
/// explicit inversion, first order in the step size.
///
/// The trajectory is returned in decreasing-`t` order and ends with `z0`
/// itself at `t = 0`.
pub fn ddim_invert(
    z0: &LatentGrid,
    den: &dyn Denoiser,
    cond: &Condition,
    cfg: &SamplerConfig,
    s: &NoiseSchedule,
    t_stop: usize,
) -> Result<Trajectory> {
    if cfg.eta != 0.0 || cfg.kind != SamplerKind::Ddim {
        return Err(Error::invalid("inversion requires the deterministic DDIM sampler (eta = 0)"));
    }
    s.check_t(t_stop)?;
    crate::grid::ensure_shape(den.shape(), z0.shape())?;
    let mut grid = cfg.timesteps(s)?;
    grid.push(0);
    grid.reverse();
    let mut timesteps = vec![0];
    let mut latents = vec![z0.clone()];
    let mut z = z0.clone();
    for pair in grid.windows(2) {
        let (from, to) = (pair[0], pair[1]);
        if to > t_stop {
            break;
        }
        let ab_from = step_alpha_bar(from, s);
        let ab_to = s.alpha_bar(to);
        let invert = |eps: &LatentGrid| -> Result<LatentGrid> {
            let x0 = z.lin_comb(1.0 / ab_from.sqrt(), eps, -(1.0 - ab_from).sqrt() / ab_from.sqrt())?;
            x0.lin_comb(ab_to.sqrt(), eps, (1.0 - ab_to).sqrt())
        };
        let mut next = invert(&den.predict(&z, to, cond)?)?;
        for _ in 0..cfg.inversion_refinements {
            next = invert(&den.predict(&next, to, cond)?)?;
        }
        z = next;
        timesteps.push(to);
        latents.push(z.clone());
    }
    timesteps.reverse();
    latents.reverse();
    Ok(Trajectory { timesteps, latents })
}

/// Deterministic DDIM sampling that starts from a given latent at
/// timestep `t_start` (which must lie on the sampler's grid).
pub fn sample_from(
    z_start: &LatentGrid,
    t_start: usize,
    den: &dyn Denoiser,
    cond: &Condition,
    cfg: &SamplerConfig,
    s: &NoiseSchedule,
) -> Result<Trajectory> {
    cfg.validate(s)?;
    let ts = cfg.timesteps(s)?;
    let first = ts
        .iter()
        .position(|&t| t == t_start)
        .ok_or_else(|| Error::invalid(format!("timestep {t_start} is not on the sampling grid")))?;
    let mut rng = seeded_rng(cfg.seed);
    let mut z = z_start.clone();
    let mut traj = Trajectory::default();
    for index in first..ts.len() {
        let t = ts[index];
        let t_prev = ts.get(index + 1).copied().unwrap_or(0);
        let eps = den.predict(&z, t, cond)?;
        let next = match cfg.kind {
            SamplerKind::Ddim => ddim_step(&z, t, t_prev, &eps, s, cfg.eta, &mut rng)?,
            SamplerKind::Ddpm => ddpm_step(&z, t, t_prev, &eps, s, &mut rng)?,
        };
        traj.push(t, std::mem::replace(&mut z, next));
    }
    traj.push(0, z);
    Ok(traj)
}

/// Forward-noised references `z̄_t = √ᾱ_t z0 + √(1−ᾱ_t) ε_t` for each `t`
/// in `t_list` (decreasing). With `shared_eps` one draw serves every entry.
pub fn noise_reference<G: GaussianSource + ?Sized>(
    z0: &LatentGrid,
    t_list: &[usize],
    s: &NoiseSchedule,
    noise: &mut G,
    shared_eps: bool,
) -> Result<Trajectory> {
    if t_list.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::invalid("reference timesteps must be strictly decreasing"));
    }
    let shared = shared_eps.then(|| LatentGrid::gaussian(z0.shape(), noise));
    let mut traj = Trajectory::default();
    for &t in t_list {
        let eps = match &shared {
            Some(e) => e.clone(),
            None => LatentGrid::gaussian(z0.shape(), noise),
        };
        traj.push(t, forward_noise(z0, t, &eps, s)?);
    }
    Ok(traj)
}
