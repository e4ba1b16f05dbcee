//! Two-stage large-canvas generation.
//!
//! 1. Sample a small image conditioned on the layout.
//! 2. Upsample it by `k` and encode it into the large latent space.
//! 3. Turn the encoded reference into per-timestep references `z̄_t`, by DDIM
//!    inversion under the large unconditional denoiser or by forward noising.
//! 4. Sample the large canvas unconditionally, pulling `z_t` toward `z̄_t`
//!    on the first guided steps.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::denoiser::{gmm_conditional, Condition, GmmDenoiser};
use crate::error::{Error, Result};
use crate::grid::{seeded_rng, LatentGrid, Shape};
use crate::guidance::{guided_step_set, BackwardGuidance, GuidanceConfig};
use crate::sampler::{ddim_invert, noise_reference, sample, SamplerConfig, SamplerKind, Trajectory};
use crate::scene::{mixture_from_layouts, Canvas, LayoutSpec, Palette, SceneMixture};
use crate::schedule::{NoiseSchedule, ScheduleConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpsampleMode {
    Nearest,
    Bilinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReferenceMode {
    Invert,
    Noise,
}

/// Map between image space and latent space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum LatentCodec {
    Identity,
    /// Encode by `factor × factor` block averaging, decode by bilinear
    /// upsampling.
    AvgPool { factor: usize },
}

impl Default for LatentCodec {
    fn default() -> Self {
        LatentCodec::Identity
    }
}

impl LatentCodec {
    pub fn encode(&self, img: &LatentGrid) -> Result<LatentGrid> {
        match *self {
            LatentCodec::Identity => Ok(img.clone()),
            LatentCodec::AvgPool { factor } => img.box_downsample(factor),
        }
    }

    pub fn decode(&self, latent: &LatentGrid) -> Result<LatentGrid> {
        match *self {
            LatentCodec::Identity => Ok(latent.clone()),
            LatentCodec::AvgPool { factor } => upsample(latent, factor, UpsampleMode::Bilinear),
        }
    }

    /// Factor by which encoding shrinks i.i.d. pixel noise.
    pub fn noise_gain(&self) -> f64 {
        match *self {
            LatentCodec::Identity => 1.0,
            LatentCodec::AvgPool { factor } => 1.0 / factor.max(1) as f64,
        }
    }

    /// Latent shape for an image of shape `image`.
    pub fn latent_shape(&self, image: Shape) -> Result<Shape> {
        match *self {
            LatentCodec::Identity => Ok(image),
            LatentCodec::AvgPool { factor } => {
                if factor == 0 || image.height % factor != 0 || image.width % factor != 0 {
                    return Err(Error::invalid(format!(
                        "codec factor {factor} does not divide the image {image}"
                    )));
                }
                Ok(Shape::new(image.channels, image.height / factor, image.width / factor))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub small_canvas: Canvas,
    /// Integer ratio `k` between the large and small canvas sides.
    pub scale: usize,
    pub upsample: UpsampleMode,
    pub reference: ReferenceMode,
    /// Seed of the forward-noise draws when `reference = "noise"`.
    pub reference_seed: u64,
    pub small_sampler: SamplerConfig,
    pub large_sampler: SamplerConfig,
    pub guidance: GuidanceConfig,
    pub codec: LatentCodec,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            small_canvas: Canvas(16, 16),
            scale: 3,
            upsample: UpsampleMode::Nearest,
            reference: ReferenceMode::Invert,
            reference_seed: 0,
            small_sampler: SamplerConfig::default(),
            large_sampler: SamplerConfig {
                seed: 1,
                ..SamplerConfig::default()
            },
            guidance: GuidanceConfig::default(),
            codec: LatentCodec::Identity,
        }
    }
}

impl PipelineConfig {
    pub fn large_canvas(&self) -> Canvas {
        self.small_canvas.scaled(self.scale)
    }

    pub fn validate(&self, s: &NoiseSchedule) -> Result<()> {
        if self.scale < 2 {
            return Err(Error::invalid(format!("scale must be at least 2, got {}", self.scale)));
        }
        if self.small_canvas.height() == 0 || self.small_canvas.width() == 0 {
            return Err(Error::invalid("small canvas must be non-empty"));
        }
        if self.reference_seed > crate::sampler::MAX_SEED {
            return Err(Error::invalid(format!(
                "reference_seed must be at most {}, got {}",
                crate::sampler::MAX_SEED,
                self.reference_seed
            )));
        }
        self.small_sampler.validate(s)?;
        self.large_sampler.validate(s)?;
        self.guidance.validate()
    }

    /// Seeds for run number `seed` of a batch: the small stage and the noise
    /// reference use `seed`, the large stage `seed + LARGE_SEED_OFFSET`.
    pub fn with_run_seed(&self, seed: u64) -> Self {
        self.with_seeds(seed, seed.wrapping_add(LARGE_SEED_OFFSET))
    }

    /// Same configuration with both sampler seeds replaced.
    pub fn with_seeds(&self, small: u64, large: u64) -> Self {
        let mut pc = self.clone();
        pc.small_sampler.seed = small;
        pc.large_sampler.seed = large;
        pc.reference_seed = small;
        pc
    }
}

/// Offset between the small- and large-stage seeds of one run.
pub const LARGE_SEED_OFFSET: u64 = 1_000_000;

/// Pixel noise of the large-canvas scene model.
pub const DEFAULT_PIXEL_SIGMA: f64 = 0.3;

/// Scene model shared by both stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    /// Pixel noise of the large canvas. The small canvas uses `σ / k`,
    /// which is what box-averaging a large sample by `k` leaves behind.
    pub pixel_sigma: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            pixel_sigma: DEFAULT_PIXEL_SIGMA,
        }
    }
}

/// Everything needed to reproduce a run, as stored in the TOML run config.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scene: SceneConfig,
    pub schedule: ScheduleConfig,
    pub pipeline: PipelineConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<NoiseSchedule> {
        if !(self.scene.pixel_sigma >= 0.0 && self.scene.pixel_sigma.is_finite()) {
            return Err(Error::invalid(format!(
                "pixel_sigma must be finite and non-negative, got {}",
                self.scene.pixel_sigma
            )));
        }
        let s = self.schedule.build()?;
        self.pipeline.validate(&s)?;
        Ok(s)
    }
}

/// Small- and large-canvas mixtures over the same layouts.
///
/// `layouts` may be given on any canvas; they are re-targeted to the small
/// canvas and to the large image canvas. With a non-identity codec the large
/// templates are encoded, so the large mixture lives in latent space.
pub fn scene_mixtures(
    layouts: &[LayoutSpec],
    pixel_sigma: f64,
    pc: &PipelineConfig,
    palette: &Palette,
) -> Result<(SceneMixture, SceneMixture)> {
    let small: Vec<LayoutSpec> = layouts.iter().map(|l| l.with_canvas(pc.small_canvas)).collect();
    let large: Vec<LayoutSpec> = layouts.iter().map(|l| l.with_canvas(pc.large_canvas())).collect();
    let m_small = mixture_from_layouts(&small, pixel_sigma / pc.scale as f64, palette)?;
    let m_large = mixture_from_layouts(&large, pixel_sigma, palette)?;
    let m_large = match pc.codec {
        LatentCodec::Identity => m_large,
        codec => m_large.map_templates(pixel_sigma * codec.noise_gain(), |t| codec.encode(t))?,
    };
    Ok((m_small, m_large))
}

/// Upsamples each channel by an integer factor. Bilinear sampling uses
/// pixel-center alignment and clamps at the edges.
pub fn upsample(img: &LatentGrid, k: usize, mode: UpsampleMode) -> Result<LatentGrid> {
    if k == 0 {
        return Err(Error::invalid("upsample factor must be at least 1"));
    }
    let (h, w) = (img.height(), img.width());
    let mut out = LatentGrid::zeros(Shape::new(img.channels(), h * k, w * k));
    let coord = |o: usize, n: usize| {
        let src = ((o as f64 + 0.5) / k as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        (lo, hi, src - lo as f64)
    };
    for c in 0..img.channels() {
        let src = img.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..h * k {
            for x in 0..w * k {
                dst[y * w * k + x] = match mode {
                    UpsampleMode::Nearest => src[(y / k) * w + x / k],
                    UpsampleMode::Bilinear => {
                        let (y0, y1, fy) = coord(y, h);
                        let (x0, x1, fx) = coord(x, w);
                        let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                        let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                        top * (1.0 - fy) + bottom * fy
                    }
                };
            }
        }
    }
    Ok(out)
}

/// Everything produced by one reference construction.
#[derive(Debug, Clone)]
pub struct Reference {
    /// Layout-conditional sample on the small canvas.
    pub small: LatentGrid,
    /// The small sample upsampled to the large canvas, in image space.
    pub upsampled: LatentGrid,
    /// Encoded reference latent `z̄_0`.
    pub latent: LatentGrid,
    /// `z̄_t` for every guided timestep (empty when nothing is guided).
    pub trajectory: Trajectory,
}

fn check_mixtures(m_small: &SceneMixture, m_large: &SceneMixture, pc: &PipelineConfig) -> Result<()> {
    let small = m_small.shape();
    if m_small.canvas() != pc.small_canvas {
        return Err(Error::invalid(format!(
            "small mixture is defined on {small}, config asks for {:?}",
            pc.small_canvas
        )));
    }
    let image = Shape::new(small.channels, small.height * pc.scale, small.width * pc.scale);
    let latent = pc.codec.latent_shape(image)?;
    crate::grid::ensure_shape(latent, m_large.shape())
}

/// Builds the reference latent and its per-timestep trajectory.
pub fn generate_reference(
    layout: &LayoutSpec,
    m_small: Arc<SceneMixture>,
    m_large: Arc<SceneMixture>,
    pc: &PipelineConfig,
    s: Arc<NoiseSchedule>,
) -> Result<Reference> {
    pc.validate(&s)?;
    check_mixtures(&m_small, &m_large, pc)?;
    let small_den = gmm_conditional(m_small, s.clone(), layout)?;
    let small = sample(&small_den, &Condition::Unconditional, &pc.small_sampler, &s, None)?
        .last()
        .cloned()
        .ok_or_else(|| Error::invalid("empty sampling trajectory"))?;
    let upsampled = upsample(&small, pc.scale, pc.upsample)?;
    let latent = pc.codec.encode(&upsampled)?;

    let guided = guided_step_set(&pc.large_sampler, &pc.guidance, &s)?;
    let trajectory = match guided.iter().next_back() {
        None => Trajectory::default(),
        Some(&t_max) => match pc.reference {
            ReferenceMode::Invert => {
                let large_den = GmmDenoiser::unconditional(m_large, s.clone());
                let inv_cfg = SamplerConfig {
                    kind: SamplerKind::Ddim,
                    eta: 0.0,
                    ..pc.large_sampler.clone()
                };
                let full = ddim_invert(&latent, &large_den, &Condition::Unconditional, &inv_cfg, &s, t_max)?;
                let mut kept = Trajectory::default();
                for (t, z) in full.timesteps.into_iter().zip(full.latents) {
                    if guided.contains(&t) {
                        kept.timesteps.push(t);
                        kept.latents.push(z);
                    }
                }
                kept
            }
            ReferenceMode::Noise => {
                let ts: Vec<usize> = guided.iter().rev().copied().collect();
                noise_reference(&latent, &ts, &s, &mut seeded_rng(pc.reference_seed), false)?
            }
        },
    };
    if let Some(&t) = guided.iter().rev().find(|&&t| trajectory.latent_at(t).is_none()) {
        return Err(Error::ReferenceGap(t));
    }
    Ok(Reference {
        small,
        upsampled,
        latent,
        trajectory,
    })
}

/// Output of a full two-stage run.
#[derive(Debug, Clone)]
pub struct Generation {
    /// Decoded large-canvas image.
    pub image: LatentGrid,
    /// Large-canvas sampling trajectory in latent space.
    pub trajectory: Trajectory,
    pub reference: Reference,
}

/// Runs both stages: reference construction, then guided unconditional
/// sampling on the large canvas.
pub fn generate(
    layout: &LayoutSpec,
    m_small: Arc<SceneMixture>,
    m_large: Arc<SceneMixture>,
    pc: &PipelineConfig,
    s: Arc<NoiseSchedule>,
) -> Result<Generation> {
    let reference = generate_reference(layout, m_small, m_large.clone(), pc, s.clone())?;
    let large_den = GmmDenoiser::unconditional(m_large, s.clone());
    let hook = if reference.trajectory.is_empty() {
        None
    } else {
        Some(BackwardGuidance::new(
            reference.trajectory.clone(),
            pc.guidance.clone(),
            &pc.large_sampler,
            s.clone(),
            layout.mean_box_area(),
        )?)
    };
    let trajectory = sample(
        &large_den,
        &Condition::Unconditional,
        &pc.large_sampler,
        &s,
        hook.as_ref().map(|h| h as &dyn crate::sampler::GuidanceHook),
    )?;
    let last = trajectory
        .last()
        .ok_or_else(|| Error::invalid("empty sampling trajectory"))?;
    let image = pc.codec.decode(last)?;
    Ok(Generation {
        image,
        trajectory,
        reference,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::seeded_rng;
    use crate::scene::{benchmark_layouts, mixture_from_layouts, Palette};
    use crate::schedule::{build_schedule, ScheduleKind};
    use rand::Rng;

    #[test]
    fn upsample_identity_and_replication() {
        let g = LatentGrid::gaussian(Shape::new(2, 3, 4), &mut seeded_rng(1));
        for mode in [UpsampleMode::Nearest, UpsampleMode::Bilinear] {
            assert_eq!(upsample(&g, 1, mode).unwrap(), g);
        }
        let row = LatentGrid::from_vec(Shape::new(1, 1, 2), vec![1.5, -2.0]).unwrap();
        let up = upsample(&row, 2, UpsampleMode::Nearest).unwrap();
        assert_eq!(up.shape(), Shape::new(1, 2, 4));
        assert_eq!(up.as_slice(), &[1.5, 1.5, -2.0, -2.0, 1.5, 1.5, -2.0, -2.0]);
        assert!(upsample(&row, 0, UpsampleMode::Nearest).is_err());
    }

    #[test]
    fn upsample_preserves_constants() {
        let g = LatentGrid::filled(Shape::new(3, 3, 5), 0.42);
        for k in 1..5 {
            for mode in [UpsampleMode::Nearest, UpsampleMode::Bilinear] {
                let up = upsample(&g, k, mode).unwrap();
                assert!(up.as_slice().iter().all(|&v| (v - 0.42).abs() < 1e-15));
            }
        }
    }

    #[test]
    fn bilinear_down_up_is_a_tridiagonal_blur() {
        // Along each axis, averaging the three sub-pixels at offsets
        // -1/3, 0, 1/3 gives weights (1/9, 7/9, 1/9); at a clamped edge the
        // outer neighbour folds back onto the pixel itself (8/9, 1/9).
        let n = 4;
        let weight = |i: usize, j: usize| -> f64 {
            let edge = i == 0 || i == n - 1;
            if i == j {
                if edge { 8.0 / 9.0 } else { 7.0 / 9.0 }
            } else if i.abs_diff(j) == 1 {
                1.0 / 9.0
            } else {
                0.0
            }
        };
        let mut rng = seeded_rng(4);
        let mut mean_sq = 0.0;
        let trials = 2000;
        for _ in 0..trials {
            let data: Vec<f64> = (0..n * n).map(|_| rng.gen::<f64>()).collect();
            let g = LatentGrid::from_vec(Shape::new(1, n, n), data).unwrap();
            let back = upsample(&g, 3, UpsampleMode::Bilinear).unwrap().box_downsample(3).unwrap();
            for y in 0..n {
                for x in 0..n {
                    let mut want = 0.0;
                    for v in 0..n {
                        for u in 0..n {
                            want += weight(y, v) * weight(x, u) * g.get(0, v, u);
                        }
                    }
                    assert!((back.get(0, y, x) - want).abs() < 1e-12);
                }
            }
            mean_sq += back.dist_sq(&g).unwrap() / (n * n) as f64 / trials as f64;
        }
        // Uniform pixels have variance 1/12, so E[rms²] = ‖A − I‖²_F / (12 n²).
        let mut frob = 0.0;
        for y in 0..n {
            for x in 0..n {
                for v in 0..n {
                    for u in 0..n {
                        let a = weight(y, v) * weight(x, u) - if (y, x) == (v, u) { 1.0 } else { 0.0 };
                        frob += a * a;
                    }
                }
            }
        }
        let expected = frob / (12.0 * (n * n) as f64);
        assert!((mean_sq - expected).abs() < 0.05 * expected, "{mean_sq} vs {expected}");
        assert!(expected.sqrt() < 0.102);
    }

    #[test]
    fn avgpool_codec_shapes() {
        let codec = LatentCodec::AvgPool { factor: 2 };
        let img = LatentGrid::filled(Shape::new(3, 6, 4), 0.3);
        let lat = codec.encode(&img).unwrap();
        assert_eq!(lat.shape(), Shape::new(3, 3, 2));
        assert!(codec.decode(&lat).unwrap().rms_diff(&img).unwrap() < 1e-15);
        assert!(codec.latent_shape(Shape::new(3, 5, 4)).is_err());
    }

    fn setup(sigma: f64) -> (Arc<SceneMixture>, Arc<SceneMixture>, Arc<NoiseSchedule>, Vec<LayoutSpec>) {
        let layouts = benchmark_layouts(Canvas(8, 8));
        let palette = Palette::default();
        let small = Arc::new(mixture_from_layouts(&layouts, sigma, &palette).unwrap());
        let large = Arc::new(mixture_from_layouts(&benchmark_layouts(Canvas(16, 16)), sigma, &palette).unwrap());
        let s = Arc::new(build_schedule(ScheduleKind::LinearBeta, 1000).unwrap());
        (small, large, s, layouts)
    }

    fn config() -> PipelineConfig {
        PipelineConfig {
            small_canvas: Canvas(8, 8),
            scale: 2,
            small_sampler: SamplerConfig::ddim(20, 3),
            large_sampler: SamplerConfig::ddim(20, 4),
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn zero_fraction_gives_empty_reference() {
        let (small, large, s, layouts) = setup(0.05);
        let mut pc = config();
        pc.guidance.guided_fraction = 0.0;
        let gen = generate(&layouts[0], small, large.clone(), &pc, s.clone()).unwrap();
        assert!(gen.reference.trajectory.is_empty());
        let plain = sample(
            &GmmDenoiser::unconditional(large, s.clone()),
            &Condition::Unconditional,
            &pc.large_sampler,
            &s,
            None,
        )
        .unwrap();
        assert_eq!(&gen.image, plain.last().unwrap());
    }

    #[test]
    fn noise_reference_with_noiseless_mixture_is_a_template() {
        let (small, large, s, layouts) = setup(0.0);
        let mut pc = config();
        pc.reference = ReferenceMode::Noise;
        let r = generate_reference(&layouts[1], small.clone(), large, &pc, s).unwrap();
        let (idx, rms) = crate::scene::nearest_template(&r.small, small.templates()).unwrap();
        assert_eq!(idx, 1);
        assert!(rms < 1e-9);
    }

    #[test]
    fn reference_covers_guided_steps() {
        let (small, large, s, layouts) = setup(0.05);
        let mut pc = config();
        pc.guidance.guided_fraction = 0.2;
        let r = generate_reference(&layouts[2], small, large, &pc, s).unwrap();
        assert_eq!(r.trajectory.timesteps, vec![1000, 950, 900, 850]);
    }

    #[test]
    fn unknown_layout_is_rejected() {
        let (small, large, s, layouts) = setup(0.05);
        let mut other = layouts[0].clone();
        other.boxes[0].x = 0.5;
        other.boxes[0].y = 0.5;
        other.boxes[0].w = 0.2;
        other.boxes[0].h = 0.2;
        assert!(matches!(
            generate(&other, small, large, &config(), s),
            Err(Error::NoMatchingLayout)
        ));
    }

    #[test]
    fn fixed_seeds_are_reproducible() {
        let (small, large, s, layouts) = setup(0.05);
        let a = generate(&layouts[3], small.clone(), large.clone(), &config(), s.clone()).unwrap();
        let b = generate(&layouts[3], small, large, &config(), s).unwrap();
        assert_eq!(a.image, b.image);
    }
}
