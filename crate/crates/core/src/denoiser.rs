//! Noise-predicting denoisers.
//!
//! [`GmmDenoiser`] is the Bayes-optimal denoiser for a [`SceneMixture`]: it
//! computes `E[z0 | z_t]` in closed form and converts it to a noise
//! prediction. Restricting it to the components that match a layout gives
//! a layout-conditional model; leaving it unrestricted gives the
//! unconditional base model.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::{LatentGrid, Shape};
use crate::scene::{LayoutSpec, SceneMixture};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, PartialEq)]
pub enum Condition {
    Unconditional,
    Layout(LayoutSpec),
    ComponentSet(Vec<usize>),
}

/// `ε_θ(z_t, t, cond)`.
pub trait Denoiser: Send + Sync {
    fn predict(&self, z_t: &LatentGrid, t: usize, cond: &Condition) -> Result<LatentGrid>;

    fn shape(&self) -> Shape;

    fn schedule(&self) -> &NoiseSchedule;
}

impl<D: Denoiser + ?Sized> Denoiser for Arc<D> {
    fn predict(&self, z_t: &LatentGrid, t: usize, cond: &Condition) -> Result<LatentGrid> {
        (**self).predict(z_t, t, cond)
    }

    fn shape(&self) -> Shape {
        (**self).shape()
    }

    fn schedule(&self) -> &NoiseSchedule {
        (**self).schedule()
    }
}

/// Responsibilities `r_k ∝ w_k N(z_t; √ᾱ μ_k, v I)` over `subset`, with
/// `v = ᾱσ² + 1 − ᾱ`, normalized through log-sum-exp.
pub fn gmm_responsibilities(
    z_t: &LatentGrid,
    t: usize,
    m: &SceneMixture,
    subset: &[usize],
    s: &NoiseSchedule,
) -> Result<Vec<f64>> {
    if subset.is_empty() {
        return Err(Error::invalid("component subset is empty"));
    }
    s.check_t(t)?;
    crate::grid::ensure_shape(m.shape(), z_t.shape())?;
    let ab = s.alpha_bar(t);
    let sig2 = m.pixel_sigma() * m.pixel_sigma();
    let var = ab * sig2 + 1.0 - ab;
    let scale = ab.sqrt();
    let comps = m.components();
    let mut logits = Vec::with_capacity(subset.len());
    for &k in subset {
        let c = comps
            .get(k)
            .ok_or_else(|| Error::invalid(format!("component index {k} out of range")))?;
        let d2: f64 = z_t
            .as_slice()
            .iter()
            .zip(c.template.as_slice())
            .map(|(z, mu)| {
                let d = z - scale * mu;
                d * d
            })
            .sum();
        logits.push(c.weight.ln() - 0.5 * d2 / var);
    }
    Ok(softmax(&logits))
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `E[z0 | z_t]` under the mixture restricted to `subset`.
///
/// Each component is conjugate: `μ̂_k = μ_k + (√ᾱ σ² / v)(z_t − √ᾱ μ_k)`,
/// and the result is `Σ r_k μ̂_k`.
pub fn gmm_posterior_mean(
    z_t: &LatentGrid,
    t: usize,
    m: &SceneMixture,
    subset: &[usize],
    s: &NoiseSchedule,
) -> Result<LatentGrid> {
    let resp = gmm_responsibilities(z_t, t, m, subset, s)?;
    let ab = s.alpha_bar(t);
    let sig2 = m.pixel_sigma() * m.pixel_sigma();
    let var = ab * sig2 + 1.0 - ab;
    let gain = ab.sqrt() * sig2 / var;
    let keep = 1.0 - ab.sqrt() * gain;
    let comps = m.components();
    let mut out = LatentGrid::zeros(z_t.shape());
    for (&k, &r) in subset.iter().zip(&resp) {
        if r == 0.0 {
            continue;
        }
        let mu = comps[k].template.as_slice();
        for ((o, &z), &m) in out.as_mut_slice().iter_mut().zip(z_t.as_slice()).zip(mu) {
            *o += r * (keep * m + gain * z);
        }
    }
    Ok(out)
}

/// `ε̂ = (z_t − √ᾱ_t x̂0) / √(1 − ᾱ_t)`; undefined at `t = 0`.
pub fn posterior_mean_to_eps(
    z_t: &LatentGrid,
    t: usize,
    x0_hat: &LatentGrid,
    s: &NoiseSchedule,
) -> Result<LatentGrid> {
    if t == 0 {
        return Err(Error::invalid("noise prediction is undefined at t = 0"));
    }
    s.check_t(t)?;
    let ab = s.alpha_bar(t);
    let inv = 1.0 / (1.0 - ab).sqrt();
    z_t.lin_comb(inv, x0_hat, -ab.sqrt() * inv)
}

/// Closed-form denoiser for a scene mixture.
#[derive(Debug, Clone)]
pub struct GmmDenoiser {
    mixture: Arc<SceneMixture>,
    schedule: Arc<NoiseSchedule>,
    subset: Vec<usize>,
}

impl GmmDenoiser {
    /// Unconditional denoiser over every component.
    pub fn unconditional(mixture: Arc<SceneMixture>, schedule: Arc<NoiseSchedule>) -> Self {
        let subset = (0..mixture.len()).collect();
        Self {
            mixture,
            schedule,
            subset,
        }
    }

    pub fn restricted(
        mixture: Arc<SceneMixture>,
        schedule: Arc<NoiseSchedule>,
        subset: Vec<usize>,
    ) -> Result<Self> {
        if subset.is_empty() {
            return Err(Error::invalid("component subset is empty"));
        }
        if let Some(&k) = subset.iter().find(|&&k| k >= mixture.len()) {
            return Err(Error::invalid(format!("component index {k} out of range")));
        }
        Ok(Self {
            mixture,
            schedule,
            subset,
        })
    }

    pub fn mixture(&self) -> &SceneMixture {
        &self.mixture
    }

    pub fn subset(&self) -> &[usize] {
        &self.subset
    }

    fn resolve(&self, cond: &Condition) -> Result<Vec<usize>> {
        let extra: Vec<usize> = match cond {
            Condition::Unconditional => return Ok(self.subset.clone()),
            Condition::ComponentSet(set) => set.clone(),
            Condition::Layout(layout) => self.mixture.matching_components(layout),
        };
        let picked: Vec<usize> = self.subset.iter().copied().filter(|k| extra.contains(k)).collect();
        if picked.is_empty() {
            return Err(Error::NoMatchingLayout);
        }
        Ok(picked)
    }

    pub fn posterior_mean(&self, z_t: &LatentGrid, t: usize, cond: &Condition) -> Result<LatentGrid> {
        let subset = self.resolve(cond)?;
        gmm_posterior_mean(z_t, t, &self.mixture, &subset, &self.schedule)
    }
}

impl Denoiser for GmmDenoiser {
    fn predict(&self, z_t: &LatentGrid, t: usize, cond: &Condition) -> Result<LatentGrid> {
        let x0 = self.posterior_mean(z_t, t, cond)?;
        posterior_mean_to_eps(z_t, t, &x0, &self.schedule)
    }

    fn shape(&self) -> Shape {
        self.mixture.shape()
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }
}

/// Denoiser restricted to the components whose layout matches `layout`.
pub fn gmm_conditional(
    mixture: Arc<SceneMixture>,
    schedule: Arc<NoiseSchedule>,
    layout: &LayoutSpec,
) -> Result<GmmDenoiser> {
    let subset = mixture.matching_components(layout);
    if subset.is_empty() {
        return Err(Error::NoMatchingLayout);
    }
    GmmDenoiser::restricted(mixture, schedule, subset)
}

/// `uncond + w · (cond − uncond)`
pub fn cfg_combine(uncond: &LatentGrid, cond: &LatentGrid, w: f64) -> Result<LatentGrid> {
    uncond.lin_comb(1.0 - w, cond, w)
}

/// Classifier-free guidance over a pair of denoisers.
pub struct CfgDenoiser<U, C> {
    pub unconditional: U,
    pub conditional: C,
    pub scale: f64,
}

impl<U: Denoiser, C: Denoiser> Denoiser for CfgDenoiser<U, C> {
    fn predict(&self, z_t: &LatentGrid, t: usize, cond: &Condition) -> Result<LatentGrid> {
        let u = self.unconditional.predict(z_t, t, &Condition::Unconditional)?;
        let c = self.conditional.predict(z_t, t, cond)?;
        cfg_combine(&u, &c, self.scale)
    }

    fn shape(&self) -> Shape {
        self.conditional.shape()
    }

    fn schedule(&self) -> &NoiseSchedule {
        self.conditional.schedule()
    }
}
