//! Backward guidance: pull the sampling latent toward reference features by
//! one gradient step on a feature distance, `z̃_t = z_t − γ ∇_{z_t} D`.
//!
//! Guidance is pluggable along two axes. A [`FeatureExtractor`] maps a
//! latent to features and supplies the exact vector-Jacobian product; a
//! [`DistanceFn`] compares reference features against current ones and
//! supplies its gradient in the current-feature argument. The gradient of
//! `D(extract(z̄_t), extract(z_t))` with respect to `z_t` is then
//! `vjp(z_t, grad_b(f̄, f))`.

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::LatentGrid;
use crate::sampler::{step_alpha_bar, GuidanceHook, SamplerConfig, StepContext, Trajectory};
use crate::schedule::NoiseSchedule;
use crate::spectral;

pub trait FeatureExtractor: Send + Sync {
    fn extract(&self, z: &LatentGrid, t: usize) -> Result<LatentGrid>;

    /// `Jᵀ · cotangent` where `J` is the Jacobian of `extract` at `z`.
    fn vjp(&self, z: &LatentGrid, t: usize, cotangent: &LatentGrid) -> Result<LatentGrid>;
}

/// The raw latent is the feature.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityExtractor;

pub fn identity_lfi_extractor() -> IdentityExtractor {
    IdentityExtractor
}

impl FeatureExtractor for IdentityExtractor {
    fn extract(&self, z: &LatentGrid, _t: usize) -> Result<LatentGrid> {
        Ok(z.clone())
    }

    fn vjp(&self, z: &LatentGrid, _t: usize, cotangent: &LatentGrid) -> Result<LatentGrid> {
        z.ensure_shape(cotangent)?;
        Ok(cotangent.clone())
    }
}

/// Radial spectral low-pass; linear and self-adjoint, so it is its own vjp.
#[derive(Debug, Clone, Copy)]
pub struct LowpassExtractor {
    cutoff: f64,
}

pub fn lowpass_extractor(cutoff_fraction: f64) -> Result<LowpassExtractor> {
    if !(cutoff_fraction > 0.0 && cutoff_fraction <= 1.0) {
        return Err(Error::invalid(format!(
            "cutoff fraction must lie in (0, 1], got {cutoff_fraction}"
        )));
    }
    Ok(LowpassExtractor {
        cutoff: cutoff_fraction,
    })
}

impl LowpassExtractor {
    pub fn cutoff(&self) -> f64 {
        self.cutoff
    }
}

impl FeatureExtractor for LowpassExtractor {
    fn extract(&self, z: &LatentGrid, _t: usize) -> Result<LatentGrid> {
        spectral::lowpass(z, self.cutoff)
    }

    fn vjp(&self, z: &LatentGrid, _t: usize, cotangent: &LatentGrid) -> Result<LatentGrid> {
        z.ensure_shape(cotangent)?;
        spectral::lowpass(cotangent, self.cutoff)
    }
}

pub trait DistanceFn: Send + Sync {
    fn value(&self, a: &LatentGrid, b: &LatentGrid) -> Result<f64>;

    /// Gradient of `value(a, b)` with respect to `b`.
    fn grad_b(&self, a: &LatentGrid, b: &LatentGrid) -> Result<LatentGrid>;
}

/// `Σ (a − b)²`
#[derive(Debug, Clone, Copy, Default)]
pub struct L2SqDistance;

pub fn l2sq_distance() -> L2SqDistance {
    L2SqDistance
}

impl DistanceFn for L2SqDistance {
    fn value(&self, a: &LatentGrid, b: &LatentGrid) -> Result<f64> {
        a.dist_sq(b)
    }

    fn grad_b(&self, a: &LatentGrid, b: &LatentGrid) -> Result<LatentGrid> {
        b.lin_comb(2.0, a, -2.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractorKind {
    Identity,
    Lowpass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceKind {
    L2sq,
}

/// Reference box area at which the area-scaled step size equals `gamma`.
pub const AREA_SCALE_REFERENCE: f64 = 0.16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    /// Step size `γ`.
    pub gamma: f64,
    /// Fraction of sampling steps, counted from the noisiest, that are guided.
    pub guided_fraction: f64,
    pub extractor: ExtractorKind,
    pub lowpass_cutoff: f64,
    pub distance: DistanceKind,
    /// Fixed cap on the update norm. When absent the cap is
    /// `clamp_noise_multiple · √(1 − ᾱ_t/ᾱ_{t'}) · √(CHW)`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_update_norm: Option<f64>,
    pub clamp_noise_multiple: f64,
    /// Scale `γ` by `√(0.16 / mean box area)` clamped to `[0.5, 4]`.
    pub area_scaled_gamma: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            gamma: 0.1,
            guided_fraction: 0.1,
            extractor: ExtractorKind::Identity,
            lowpass_cutoff: 0.2,
            distance: DistanceKind::L2sq,
            max_update_norm: None,
            clamp_noise_multiple: 10.0,
            area_scaled_gamma: false,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::invalid(format!("gamma must be a finite value >= 0, got {}", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.guided_fraction) {
            return Err(Error::invalid(format!(
                "guided_fraction must lie in [0, 1], got {}",
                self.guided_fraction
            )));
        }
        if let Some(m) = self.max_update_norm {
            if !(m > 0.0) {
                return Err(Error::invalid(format!("max_update_norm must be positive, got {m}")));
            }
        }
        if !(self.clamp_noise_multiple > 0.0) {
            return Err(Error::invalid("clamp_noise_multiple must be positive"));
        }
        if self.extractor == ExtractorKind::Lowpass {
            lowpass_extractor(self.lowpass_cutoff)?;
        }
        Ok(())
    }

    pub fn build_extractor(&self) -> Result<Box<dyn FeatureExtractor>> {
        Ok(match self.extractor {
            ExtractorKind::Identity => Box::new(IdentityExtractor),
            ExtractorKind::Lowpass => Box::new(lowpass_extractor(self.lowpass_cutoff)?),
        })
    }

    pub fn build_distance(&self) -> Box<dyn DistanceFn> {
        match self.distance {
            DistanceKind::L2sq => Box::new(L2SqDistance),
        }
    }

    /// Step size after the optional area scaling for `mean_box_area`.
    pub fn effective_gamma(&self, mean_box_area: f64) -> f64 {
        if !self.area_scaled_gamma || mean_box_area <= 0.0 {
            return self.gamma;
        }
        self.gamma * (AREA_SCALE_REFERENCE / mean_box_area).sqrt().clamp(0.5, 4.0)
    }

    /// Number of guided steps out of `steps`: `⌈fraction · S⌉`.
    pub fn guided_count(&self, steps: usize) -> usize {
        let raw = self.guided_fraction * steps as f64;
        // Absorb representation error such as 0.3 · 10 = 3.0000000000000004.
        ((raw - 1e-9).ceil().max(0.0) as usize).min(steps)
    }
}

/// Timesteps of the first `⌈fraction · S⌉` sampling steps.
pub fn guided_step_set(cfg: &SamplerConfig, gc: &GuidanceConfig, s: &NoiseSchedule) -> Result<BTreeSet<usize>> {
    let ts = cfg.timesteps(s)?;
    Ok(ts.into_iter().take(gc.guided_count(cfg.steps)).collect())
}

/// Cap on the update norm at a step `t → t_prev`.
pub fn update_norm_cap(gc: &GuidanceConfig, t: usize, t_prev: usize, len: usize, s: &NoiseSchedule) -> f64 {
    match gc.max_update_norm {
        Some(m) => m,
        None => {
            let ratio = s.alpha_bar(t) / step_alpha_bar(t_prev, s);
            gc.clamp_noise_multiple * (1.0 - ratio).max(0.0).sqrt() * (len as f64).sqrt()
        }
    }
}

/// `D(extract(z̄_t), extract(z_t))`
pub fn guidance_loss(
    z_t: &LatentGrid,
    z_ref: &LatentGrid,
    t: usize,
    extractor: &dyn FeatureExtractor,
    distance: &dyn DistanceFn,
) -> Result<f64> {
    distance.value(&extractor.extract(z_ref, t)?, &extractor.extract(z_t, t)?)
}

/// Gradient of [`guidance_loss`] with respect to `z_t`.
pub fn guidance_gradient(
    z_t: &LatentGrid,
    z_ref: &LatentGrid,
    t: usize,
    extractor: &dyn FeatureExtractor,
    distance: &dyn DistanceFn,
) -> Result<LatentGrid> {
    z_t.ensure_shape(z_ref)?;
    let f = extractor.extract(z_t, t)?;
    let f_ref = extractor.extract(z_ref, t)?;
    extractor.vjp(z_t, t, &distance.grad_b(&f_ref, &f)?)
}

/// One backward-guidance update of `z_t` toward the reference at `t`.
pub fn guidance_update(
    z_t: &LatentGrid,
    t: usize,
    reference: &Trajectory,
    extractor: &dyn FeatureExtractor,
    distance: &dyn DistanceFn,
    gamma: f64,
    max_norm: f64,
) -> Result<LatentGrid> {
    let z_ref = reference.latent_at(t).ok_or(Error::ReferenceGap(t))?;
    z_t.ensure_shape(z_ref)?;
    if gamma == 0.0 {
        return Ok(z_t.clone());
    }
    let mut step = guidance_gradient(z_t, z_ref, t, extractor, distance)?.scale(-gamma);
    let n = step.norm();
    if n > max_norm {
        step = step.scale(max_norm / n);
    }
    z_t.add(&step)
}

/// Guidance hook that applies [`guidance_update`] on the guided steps.
pub struct BackwardGuidance {
    reference: Trajectory,
    extractor: Box<dyn FeatureExtractor>,
    distance: Box<dyn DistanceFn>,
    config: GuidanceConfig,
    gamma: f64,
    guided: BTreeSet<usize>,
    schedule: Arc<NoiseSchedule>,
}

impl BackwardGuidance {
    pub fn new(
        reference: Trajectory,
        config: GuidanceConfig,
        sampler: &SamplerConfig,
        schedule: Arc<NoiseSchedule>,
        mean_box_area: f64,
    ) -> Result<Self> {
        config.validate()?;
        let guided = guided_step_set(sampler, &config, &schedule)?;
        if let Some(&t) = guided.iter().rev().find(|&&t| reference.latent_at(t).is_none()) {
            return Err(Error::ReferenceGap(t));
        }
        Ok(Self {
            extractor: config.build_extractor()?,
            distance: config.build_distance(),
            gamma: config.effective_gamma(mean_box_area),
            reference,
            config,
            guided,
            schedule,
        })
    }

    pub fn guided_timesteps(&self) -> &BTreeSet<usize> {
        &self.guided
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }
}

impl GuidanceHook for BackwardGuidance {
    fn is_active(&self, ctx: &StepContext) -> bool {
        self.guided.contains(&ctx.t)
    }

    fn apply(&self, z_t: &LatentGrid, ctx: &StepContext) -> Result<LatentGrid> {
        let cap = update_norm_cap(&self.config, ctx.t, ctx.t_prev, z_t.len(), &self.schedule);
        guidance_update(
            z_t,
            ctx.t,
            &self.reference,
            self.extractor.as_ref(),
            self.distance.as_ref(),
            self.gamma,
            cap,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{seeded_rng, Shape};
    use crate::schedule::{build_schedule, ScheduleKind};

    fn grid1(v: f64) -> LatentGrid {
        LatentGrid::filled(Shape::new(1, 1, 1), v)
    }

    fn single_ref(t: usize, z: LatentGrid) -> Trajectory {
        Trajectory {
            timesteps: vec![t],
            latents: vec![z],
        }
    }

    #[test]
    fn identity_extractor_is_bitwise_identity() {
        let z = LatentGrid::gaussian(Shape::new(2, 3, 3), &mut seeded_rng(1));
        let c = LatentGrid::gaussian(Shape::new(2, 3, 3), &mut seeded_rng(2));
        let e = identity_lfi_extractor();
        assert_eq!(e.extract(&z, 10).unwrap(), z);
        assert_eq!(e.vjp(&z, 10, &c).unwrap(), c);
    }

    #[test]
    fn lowpass_extractor_examples() {
        let mut rng = seeded_rng(3);
        let z = LatentGrid::gaussian(Shape::new(3, 6, 6), &mut rng);
        let full = lowpass_extractor(1.0).unwrap().extract(&z, 0).unwrap();
        assert!(full.rms_diff(&z).unwrap() < 1e-14);
        let flat = LatentGrid::filled(Shape::new(3, 6, 6), 0.37);
        for cut in [0.05, 0.3, 0.8] {
            let out = lowpass_extractor(cut).unwrap().extract(&flat, 0).unwrap();
            assert!(out.rms_diff(&flat).unwrap() < 1e-14);
        }
        let mut checker = LatentGrid::zeros(Shape::new(1, 8, 8));
        for y in 0..8 {
            for x in 0..8 {
                checker.set(0, y, x, if (x + y) % 2 == 0 { 1.0 } else { -1.0 });
            }
        }
        let out = lowpass_extractor(0.25).unwrap().extract(&checker, 0).unwrap();
        assert!(out.norm_sq() <= 1e-10 * checker.norm_sq());
        assert!(lowpass_extractor(0.0).is_err());
        assert!(lowpass_extractor(1.01).is_err());
    }

    #[test]
    fn l2sq_examples() {
        let d = l2sq_distance();
        let a = LatentGrid::from_vec(Shape::new(1, 1, 2), vec![0.0, 0.0]).unwrap();
        let b = LatentGrid::from_vec(Shape::new(1, 1, 2), vec![3.0, 4.0]).unwrap();
        assert_eq!(d.value(&a, &a).unwrap(), 0.0);
        assert_eq!(d.value(&a, &b).unwrap(), 25.0);
        assert_eq!(d.value(&b, &a).unwrap(), 25.0);
        assert!(d.grad_b(&b, &b).unwrap().norm() == 0.0);
        assert!(d.value(&a, &grid1(0.0)).is_err());
    }

    #[test]
    fn zero_gamma_is_bitwise_noop() {
        let z = LatentGrid::gaussian(Shape::new(1, 4, 4), &mut seeded_rng(5));
        let r = single_ref(7, LatentGrid::gaussian(Shape::new(1, 4, 4), &mut seeded_rng(6)));
        let out = guidance_update(&z, 7, &r, &IdentityExtractor, &L2SqDistance, 0.0, f64::INFINITY).unwrap();
        assert_eq!(out, z);
    }

    #[test]
    fn matching_reference_is_a_fixed_point() {
        let z = LatentGrid::gaussian(Shape::new(1, 4, 4), &mut seeded_rng(5));
        let r = single_ref(7, z.clone());
        let out = guidance_update(&z, 7, &r, &IdentityExtractor, &L2SqDistance, 0.3, f64::INFINITY).unwrap();
        assert_eq!(out, z);
    }

    #[test]
    fn scalar_update_hand_value() {
        let r = single_ref(3, grid1(0.0));
        let out = guidance_update(&grid1(1.0), 3, &r, &IdentityExtractor, &L2SqDistance, 0.25, f64::INFINITY).unwrap();
        assert_eq!(out.as_slice()[0], 0.5);
        // Central difference of D(z) = (z − 0)² at z = 1.
        let h: f64 = 1e-6;
        let fd = ((1.0 + h) * (1.0 + h) - (1.0 - h) * (1.0 - h)) / (2.0 * h);
        assert!((fd - 2.0).abs() < 1e-8);
    }

    #[test]
    fn missing_reference_timestep() {
        let r = single_ref(3, grid1(0.0));
        assert!(matches!(
            guidance_update(&grid1(1.0), 4, &r, &IdentityExtractor, &L2SqDistance, 0.1, 1.0),
            Err(Error::ReferenceGap(4))
        ));
    }

    #[test]
    fn update_is_clamped() {
        let r = single_ref(3, grid1(0.0));
        let out = guidance_update(&grid1(1.0), 3, &r, &IdentityExtractor, &L2SqDistance, 10.0, 0.5).unwrap();
        assert!((out.as_slice()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn half_step_reaches_reference() {
        let mut rng = seeded_rng(8);
        let z = LatentGrid::gaussian(Shape::new(3, 4, 4), &mut rng);
        let target = LatentGrid::gaussian(Shape::new(3, 4, 4), &mut rng);
        let r = single_ref(1, target.clone());
        let out = guidance_update(&z, 1, &r, &IdentityExtractor, &L2SqDistance, 0.5, f64::INFINITY).unwrap();
        assert!(out.rms_diff(&target).unwrap() < 1e-15);
    }

    #[test]
    fn guided_step_set_examples() {
        let s = build_schedule(ScheduleKind::LinearBeta, 1000).unwrap();
        let cfg = SamplerConfig::ddim(50, 0);
        let with = |f: f64| GuidanceConfig {
            guided_fraction: f,
            ..GuidanceConfig::default()
        };
        assert!(guided_step_set(&cfg, &with(0.0), &s).unwrap().is_empty());
        assert_eq!(guided_step_set(&cfg, &with(1.0), &s).unwrap().len(), 50);
        let tenth = guided_step_set(&cfg, &with(0.1), &s).unwrap();
        assert_eq!(tenth.into_iter().rev().collect::<Vec<_>>(), vec![1000, 980, 960, 940, 920]);
        assert_eq!(with(0.3).guided_count(10), 3);
        assert_eq!(with(0.01).guided_count(10), 1);
    }

    #[test]
    fn area_scaling_is_off_by_default() {
        let gc = GuidanceConfig::default();
        assert_eq!(gc.effective_gamma(0.01), gc.gamma);
        let scaled = GuidanceConfig {
            area_scaled_gamma: true,
            ..gc
        };
        assert!((scaled.effective_gamma(0.04) - 0.2).abs() < 1e-15);
        assert_eq!(scaled.effective_gamma(1e-6), 0.4);
        assert_eq!(scaled.effective_gamma(1.0), 0.05);
    }

    #[test]
    fn hook_rejects_reference_without_guided_timesteps() {
        let s = Arc::new(build_schedule(ScheduleKind::LinearBeta, 1000).unwrap());
        let cfg = SamplerConfig::ddim(50, 0);
        let r = single_ref(1000, grid1(0.0));
        let err = BackwardGuidance::new(r, GuidanceConfig::default(), &cfg, s, 0.16);
        assert!(matches!(err, Err(Error::ReferenceGap(980))));
    }
}
