//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion.
//!
//! The target exits successfully even when a criterion fails, so the rest of
//! the suite still runs; set `ACCEPTANCE_STRICT=1` to turn any FAIL into a
//! non-zero exit.

use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;

use layoutguide::denoiser::{gmm_posterior_mean, Condition, GmmDenoiser};
use layoutguide::eval::{
    adherence, bootstrap_mean, lowband_correlation, pearson, Estimate, ADHERENCE_IOU, BOOTSTRAP_SEED,
    LOWBAND_CUTOFF,
};
use layoutguide::guidance::{
    guidance_gradient, guidance_loss, identity_lfi_extractor, l2sq_distance, lowpass_extractor,
    FeatureExtractor,
};
use layoutguide::io::{encode_ppm, to_json, GammaMap};
use layoutguide::pipeline::{generate, scene_mixtures, PipelineConfig, DEFAULT_PIXEL_SIGMA};
use layoutguide::sampler::{ddim_invert, sample, sample_from, step_alpha_bar, SamplerConfig};
use layoutguide::scene::{
    benchmark_layouts, mixture_from_layouts, nearest_template, Canvas, LayoutSpec, MixtureComponent, Palette,
    SceneMixture,
};
use layoutguide::schedule::{build_schedule, NoiseSchedule, ScheduleKind};
use layoutguide::{seeded_rng, LatentGrid, Shape};

const SEEDS: u64 = 100;

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(id: usize, name: &str, started: Instant, o: &Outcome) {
    println!(
        "criterion {id:>2} {:<4} {name}: {} ({:.1}s)",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail,
        started.elapsed().as_secs_f64()
    );
}

fn schedule() -> Arc<NoiseSchedule> {
    Arc::new(build_schedule(ScheduleKind::LinearBeta, 1000).unwrap())
}

// ---------------------------------------------------------------- 1

fn gradient_check() -> Outcome {
    let shape = Shape::new(3, 4, 4);
    let mut rng = seeded_rng(11);
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    let extractors: Vec<(String, Box<dyn FeatureExtractor>)> = vec![
        ("identity".into(), Box::new(identity_lfi_extractor())),
        ("lowpass(0.2)".into(), Box::new(lowpass_extractor(0.2).unwrap())),
        ("lowpass(0.6)".into(), Box::new(lowpass_extractor(0.6).unwrap())),
    ];
    for (name, ex) in &extractors {
        let mut name_worst: f64 = 0.0;
        for _ in 0..5 {
            let z = LatentGrid::gaussian(shape, &mut rng);
            let r = LatentGrid::gaussian(shape, &mut rng);
            let analytic = guidance_gradient(&z, &r, 500, ex.as_ref(), &l2sq_distance()).unwrap();
            let h = 1e-5;
            let mut numeric = LatentGrid::zeros(shape);
            for i in 0..shape.len() {
                let mut plus = z.clone();
                plus.as_mut_slice()[i] += h;
                let mut minus = z.clone();
                minus.as_mut_slice()[i] -= h;
                let lp = guidance_loss(&plus, &r, 500, ex.as_ref(), &l2sq_distance()).unwrap();
                let lm = guidance_loss(&minus, &r, 500, ex.as_ref(), &l2sq_distance()).unwrap();
                numeric.as_mut_slice()[i] = (lp - lm) / (2.0 * h);
            }
            let scale = numeric.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let err = analytic
                .as_slice()
                .iter()
                .zip(numeric.as_slice())
                .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()))
                / scale;
            name_worst = name_worst.max(err);
        }
        worst = worst.max(name_worst);
        parts.push(format!("{name} {name_worst:.1e}"));
    }
    Outcome {
        pass: worst <= 1e-5,
        detail: format!("max relative error {} (limit 1e-5)", parts.join(", ")),
    }
}

// ---------------------------------------------------------------- 2

/// For `f(z) = N(z; μ, σ²) N(y; √ᾱ z, 1 − ᾱ)`, returns `ln ∫ f` and
/// `∫ z f / ∫ f`, both by the trapezoid rule on a dense grid covering the
/// prior and the likelihood.
fn quadrature_1d(mu: f64, sigma: f64, y: f64, ab: f64) -> (f64, f64) {
    let lik_sd = ((1.0 - ab) / ab).sqrt();
    let lik_center = y / ab.sqrt();
    let width = sigma.min(lik_sd);
    let lo = (mu - 14.0 * sigma).min(lik_center - 14.0 * lik_sd);
    let hi = (mu + 14.0 * sigma).max(lik_center + 14.0 * lik_sd);
    let n = (((hi - lo) / (width / 40.0)).ceil() as usize).max(4000);
    let dz = (hi - lo) / n as f64;
    let log_f = |z: f64| {
        let a = (z - mu) / sigma;
        let b = (y - ab.sqrt() * z) / (1.0 - ab).sqrt();
        -0.5 * a * a - 0.5 * b * b
    };
    let max = (0..=n).map(|i| log_f(lo + i as f64 * dz)).fold(f64::NEG_INFINITY, f64::max);
    let (mut m0, mut m1) = (0.0, 0.0);
    for i in 0..=n {
        let z = lo + i as f64 * dz;
        let w = if i == 0 || i == n { 0.5 } else { 1.0 };
        let f = w * (log_f(z) - max).exp();
        m0 += f;
        m1 += f * z;
    }
    let norm = -(sigma.ln()) - 0.5 * (1.0 - ab).ln() - (2.0 * std::f64::consts::PI).ln();
    ((m0 * dz).ln() + max + norm, m1 / m0)
}

fn denoiser_oracle() -> Outcome {
    let s = schedule();
    let shape = Shape::new(1, 2, 2);
    let sigma = 0.3;
    let mut rng = seeded_rng(5);
    let weights = [0.5, 0.3, 0.2];
    let components: Vec<MixtureComponent> = weights
        .iter()
        .enumerate()
        .map(|(k, &weight)| MixtureComponent {
            layout: LayoutSpec::new(Canvas(2, 2), vec![]),
            template: LatentGrid::gaussian(shape, &mut rng).scale(0.5 + 0.25 * k as f64),
            weight,
        })
        .collect();
    let m = SceneMixture::new(components, sigma).unwrap();
    let subset = [0, 1, 2];
    let mut worst: f64 = 0.0;
    for &t in &[1usize, 250, 500, 750, 1000] {
        let ab = s.alpha_bar(t);
        // Place z_t between components so that responsibilities are mixed.
        let mix = m.components()[0].template.lin_comb(0.5, &m.components()[1].template, 0.5).unwrap();
        let z_t = mix.scale(ab.sqrt()).add(&LatentGrid::gaussian(shape, &mut rng).scale(0.3)).unwrap();
        let got = gmm_posterior_mean(&z_t, t, &m, &subset, &s).unwrap();

        let mut log_w = Vec::new();
        let mut means = Vec::new();
        for c in m.components() {
            let mut lw = c.weight.ln();
            let mut mean = Vec::new();
            for d in 0..shape.len() {
                let (log_z, first) = quadrature_1d(c.template.as_slice()[d], sigma, z_t.as_slice()[d], ab);
                lw += log_z;
                mean.push(first);
            }
            log_w.push(lw);
            means.push(mean);
        }
        let max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = w.iter().sum();
        for d in 0..shape.len() {
            let want: f64 = w.iter().zip(&means).map(|(wk, mk)| wk * mk[d]).sum::<f64>() / total;
            worst = worst.max((got.as_slice()[d] - want).abs());
        }
    }
    Outcome {
        pass: worst <= 1e-6,
        detail: format!("max abs error {worst:.2e} over t in {{1, 250, 500, 750, 1000}} (limit 1e-6)"),
    }
}

// ---------------------------------------------------------------- 3 and 4

fn single_template(canvas: Canvas, sigma: f64) -> Arc<SceneMixture> {
    let layout = benchmark_layouts(canvas).remove(0);
    Arc::new(mixture_from_layouts(&[layout], sigma, &Palette::default()).unwrap())
}

fn round_trip_error(steps: usize, refinements: usize, z0: &LatentGrid, den: &GmmDenoiser, s: &NoiseSchedule) -> f64 {
    let cfg = SamplerConfig {
        inversion_refinements: refinements,
        ..SamplerConfig::ddim(steps, 0)
    };
    let t_max = cfg.timesteps(s).unwrap()[0];
    let inv = ddim_invert(z0, den, &Condition::Unconditional, &cfg, s, t_max).unwrap();
    let back = sample_from(&inv.latents[0], t_max, den, &Condition::Unconditional, &cfg, s).unwrap();
    let rec = back.last().unwrap();
    rec.rms_diff(z0).unwrap() / (z0.norm_sq() / z0.len() as f64).sqrt()
}

fn inversion_round_trip() -> Outcome {
    let s = schedule();
    let m = single_template(Canvas(8, 8), 0.1);
    let den = GmmDenoiser::unconditional(m.clone(), s.clone());
    let (z0, _) = layoutguide::scene::sample_scene(&m, &mut seeded_rng(3));
    let default = SamplerConfig::default().inversion_refinements;
    let e100 = round_trip_error(100, default, &z0, &den, &s);
    let e200 = round_trip_error(200, default, &z0, &den, &s);
    let r100 = round_trip_error(100, 2, &z0, &den, &s);
    let r200 = round_trip_error(200, 2, &z0, &den, &s);
    Outcome {
        pass: e200 <= 1e-3 && e100 > e200,
        detail: format!(
            "relative RMS S=200 {e200:.2e} (limit 1e-3), S=100 {e100:.2e}; \
             with 2 fixed-point refinements (not the default) S=200 {r200:.2e}, S=100 {r100:.2e}"
        ),
    }
}

fn closed_form_trajectory() -> Outcome {
    let s = schedule();
    let sigma = 0.1;
    let m = single_template(Canvas(6, 6), sigma);
    let mu = m.components()[0].template.clone();
    let den = GmmDenoiser::unconditional(m.clone(), s.clone());
    let cfg = SamplerConfig::ddim(50, 21);
    let traj = sample(&den, &Condition::Unconditional, &cfg, &s, None).unwrap();

    // With one component, u_t = z_t − √ᾱ_t μ obeys u_{t'} = c · u_t with
    // c = (√(ᾱ ᾱ') σ² + √((1 − ᾱ)(1 − ᾱ'))) / (ᾱ σ² + 1 − ᾱ).
    let z_t = LatentGrid::gaussian(mu.shape(), &mut seeded_rng(cfg.seed));
    let ts = cfg.timesteps(&s).unwrap();
    let mut u = z_t.lin_comb(1.0, &mu, -s.alpha_bar(ts[0]).sqrt()).unwrap();
    let mut worst: f64 = 0.0;
    let s2 = sigma * sigma;
    for (i, &t) in ts.iter().enumerate() {
        let ab = s.alpha_bar(t);
        let expected = u.lin_comb(1.0, &mu, ab.sqrt()).unwrap();
        worst = worst.max(max_abs_diff(&expected, &traj.latents[i]));
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        let abp = step_alpha_bar(t_prev, &s);
        let c = ((ab * abp).sqrt() * s2 + ((1.0 - ab) * (1.0 - abp)).sqrt()) / (ab * s2 + 1.0 - ab);
        u = u.scale(c);
    }
    let expected = u.add(&mu).unwrap();
    worst = worst.max(max_abs_diff(&expected, traj.last().unwrap()));
    Outcome {
        pass: worst <= 1e-8,
        detail: format!("max abs deviation {worst:.2e} over {} steps (limit 1e-8)", ts.len()),
    }
}

fn max_abs_diff(a: &LatentGrid, b: &LatentGrid) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

// ---------------------------------------------------------------- 5 to 9

struct Bench {
    small: Vec<LayoutSpec>,
    large: Vec<LayoutSpec>,
    m_small: Arc<SceneMixture>,
    m_large: Arc<SceneMixture>,
    s: Arc<NoiseSchedule>,
    palette: Palette,
}

impl Bench {
    fn new() -> Self {
        let pc = PipelineConfig::default();
        let palette = Palette::default();
        let small = benchmark_layouts(pc.small_canvas);
        let large = benchmark_layouts(pc.large_canvas());
        let (m_small, m_large) = scene_mixtures(&small, DEFAULT_PIXEL_SIGMA, &pc, &palette).unwrap();
        Self {
            small,
            large,
            m_small: Arc::new(m_small),
            m_large: Arc::new(m_large),
            s: schedule(),
            palette,
        }
    }
}

#[derive(Clone)]
struct Run {
    adherence: f64,
    template_rms: f64,
    /// `(low-band, full-band)` correlations of each guided `z̄_t` with the
    /// upsampled reference.
    reference_corr: Vec<(f64, f64)>,
}

struct Batch {
    runs: Vec<Run>,
}

impl Batch {
    fn estimate(&self, f: impl Fn(&Run) -> f64) -> Estimate {
        let v: Vec<f64> = self.runs.iter().map(f).collect();
        bootstrap_mean(&v, 0.95, BOOTSTRAP_SEED).unwrap()
    }

    fn adherence(&self) -> Estimate {
        self.estimate(|r| r.adherence)
    }

    fn template_rms(&self) -> Estimate {
        self.estimate(|r| r.template_rms)
    }
}

fn run_batch(bench: &Bench, pc: &PipelineConfig) -> Batch {
    let runs = (0..SEEDS)
        .into_par_iter()
        .map(|seed| {
            let li = (seed % bench.small.len() as u64) as usize;
            let pc = pc.with_run_seed(seed);
            let g = generate(&bench.small[li], bench.m_small.clone(), bench.m_large.clone(), &pc, bench.s.clone())
                .unwrap();
            let adh = adherence(&g.image, &bench.large[li], &bench.palette, ADHERENCE_IOU).unwrap();
            let (_, template_rms) = nearest_template(&g.image, bench.m_large.templates()).unwrap();
            let reference_corr = g
                .reference
                .trajectory
                .latents
                .iter()
                .map(|z| {
                    (
                        lowband_correlation(z, &g.reference.upsampled, LOWBAND_CUTOFF).unwrap(),
                        pearson(z, &g.reference.upsampled).unwrap(),
                    )
                })
                .collect();
            Run {
                adherence: adh.adherence_rate,
                template_rms,
                reference_corr,
            }
        })
        .collect();
    Batch { runs }
}

fn fmt(e: &Estimate) -> String {
    format!("{:.3} [{:.3}, {:.3}]", e.mean, e.lo, e.hi)
}

fn with(f: impl FnOnce(&mut PipelineConfig)) -> PipelineConfig {
    let mut pc = PipelineConfig::default();
    f(&mut pc);
    pc
}

fn efficacy(guided: &Batch, unguided: &Batch) -> Outcome {
    let g = guided.adherence();
    let u = unguided.adherence();
    Outcome {
        pass: g.mean >= 2.0 * u.mean && g.mean >= 0.8,
        detail: format!("guided {} vs unguided {} (need >= 2x and >= 0.8)", fmt(&g), fmt(&u)),
    }
}

fn fraction_ablation(f01: &Batch, f05: &Batch, f09: &Batch) -> Outcome {
    let a01 = f01.adherence();
    let a05 = f05.adherence();
    let r01 = f01.template_rms();
    let r09 = f09.template_rms();
    let adherence_ok = a05.contains(a01.mean);
    let rms_ok = r09.mean > r01.mean && !r09.overlaps(&r01);
    Outcome {
        pass: adherence_ok && rms_ok,
        detail: format!(
            "adherence f=0.1 {} in CI of f=0.5 {}: {}; template_rms f=0.9 {} > f=0.1 {} disjoint: {}",
            fmt(&a01),
            fmt(&a05),
            adherence_ok,
            fmt(&r09),
            fmt(&r01),
            rms_ok
        ),
    }
}

fn scale_ablation(gammas: &[(f64, &Batch)], g10: &Batch) -> Outcome {
    let adh: Vec<Estimate> = gammas.iter().map(|(_, b)| b.adherence()).collect();
    let monotone = adh.windows(2).all(|w| w[1].mean >= w[0].mean || w[1].overlaps(&w[0]));
    let r01 = gammas.iter().find(|(g, _)| *g == 0.1).unwrap().1.template_rms();
    let r10 = g10.template_rms();
    let rms_ok = r10.mean > r01.mean && !r10.overlaps(&r01);
    let listing: Vec<String> = gammas.iter().zip(&adh).map(|((g, _), e)| format!("γ={g} {}", fmt(e))).collect();
    Outcome {
        pass: monotone && rms_ok,
        detail: format!(
            "adherence {} non-decreasing: {monotone}; template_rms γ=10 {} > γ=0.1 {} disjoint: {rms_ok}",
            listing.join(", "),
            fmt(&r10),
            fmt(&r01)
        ),
    }
}

fn step_robustness(s50: &Batch, s10: &Batch) -> Outcome {
    let a50 = s50.adherence();
    let a10 = s10.adherence();
    let gap = (a50.mean - a10.mean).abs();
    Outcome {
        pass: gap <= 0.10 && a50.overlaps(&a10),
        detail: format!("S=50 {} vs S=10 {}, gap {:.3} (limit 0.10, CIs must overlap)", fmt(&a50), fmt(&a10), gap),
    }
}

fn lowband_preservation(guided: &Batch) -> Outcome {
    let pairs: Vec<(f64, f64)> = guided.runs.iter().flat_map(|r| r.reference_corr.iter().copied()).collect();
    let min_low = pairs.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let mean_low = pairs.iter().map(|p| p.0).sum::<f64>() / pairs.len() as f64;
    let mean_full = pairs.iter().map(|p| p.1).sum::<f64>() / pairs.len() as f64;
    let below = pairs.iter().filter(|p| p.1 < p.0).count();
    Outcome {
        pass: min_low >= 0.9 && below == pairs.len(),
        detail: format!(
            "low-band corr min {min_low:.3} mean {mean_low:.3} (need >= 0.9); full-band mean {mean_full:.3}, below low-band in {below}/{}",
            pairs.len()
        ),
    }
}

// ---------------------------------------------------------------- 10

fn determinism(bench: &Bench) -> Outcome {
    let invoke = || {
        let pc = PipelineConfig::default().with_run_seed(7);
        let g = generate(&bench.small[1], bench.m_small.clone(), bench.m_large.clone(), &pc, bench.s.clone())
            .unwrap();
        let adh = adherence(&g.image, &bench.large[1], &bench.palette, ADHERENCE_IOU).unwrap();
        let ppm = encode_ppm(&g.image, GammaMap::Linear).unwrap();
        (ppm, to_json(&adh).unwrap())
    };
    let (a_img, a_metrics) = invoke();
    let (b_img, b_metrics) = invoke();
    Outcome {
        pass: a_img == b_img && a_metrics == b_metrics,
        detail: format!(
            "image bytes identical: {}, metrics identical: {}",
            a_img == b_img,
            a_metrics == b_metrics
        ),
    }
}

fn main() {
    let mut all = Vec::new();
    let mut record = |id: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        report(id, name, t, &o);
        all.push(o.pass);
    };

    record(1, "guidance gradient vs finite differences", &mut gradient_check);
    record(2, "mixture denoiser vs quadrature", &mut denoiser_oracle);
    record(3, "inversion round trip", &mut inversion_round_trip);
    record(4, "closed-form single-Gaussian trajectory", &mut closed_form_trajectory);

    let bench = Bench::new();
    let t = Instant::now();
    let guided = run_batch(&bench, &PipelineConfig::default());
    let unguided = run_batch(&bench, &with(|pc| pc.guidance.guided_fraction = 0.0));
    let f05 = run_batch(&bench, &with(|pc| pc.guidance.guided_fraction = 0.5));
    let f09 = run_batch(&bench, &with(|pc| pc.guidance.guided_fraction = 0.9));
    let g001 = run_batch(&bench, &with(|pc| pc.guidance.gamma = 0.01));
    let g05 = run_batch(&bench, &with(|pc| pc.guidance.gamma = 0.5));
    let g10 = run_batch(&bench, &with(|pc| pc.guidance.gamma = 10.0));
    let s10 = run_batch(&bench, &with(|pc| pc.large_sampler.steps = 10));
    println!(
        "benchmark: 8 configurations x {SEEDS} seeds in {:.1}s",
        t.elapsed().as_secs_f64()
    );

    record(5, "guidance efficacy", &mut || efficacy(&guided, &unguided));
    record(6, "guided-fraction ablation", &mut || fraction_ablation(&guided, &f05, &f09));
    record(7, "step-size ablation", &mut || {
        scale_ablation(&[(0.01, &g001), (0.1, &guided), (0.5, &g05)], &g10)
    });
    record(8, "step-count robustness", &mut || step_robustness(&guided, &s10));
    record(9, "low-frequency preservation", &mut || lowband_preservation(&guided));
    record(10, "determinism", &mut || determinism(&bench));

    let failed = all.iter().filter(|p| !**p).count();
    println!("acceptance: {} passed, {failed} failed", all.len() - failed);
    if failed > 0 && std::env::var_os("ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
