use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use layoutguide::eval::{adherence, fidelity_reports, trend_report, AdherenceReport, FidelityReport, RunRecord, ADHERENCE_IOU};
use layoutguide::guidance::ExtractorKind;
use layoutguide::io::{self, GammaMap, TensorDump};
use layoutguide::pipeline::{generate, scene_mixtures, ReferenceMode, RunConfig};
use layoutguide::scene::{benchmark_layouts, mixture_from_layouts, render_template, LayoutSpec, Palette, SceneMixture};
use layoutguide::schedule::NoiseSchedule;
use layoutguide::LatentGrid;

const GIT_DESCRIBE: &str = env!("LAYOUTGUIDE_GIT_DESCRIBE");

#[derive(Parser)]
#[command(name = "layoutguide", version, about = "Layout-guided large-canvas generation on a toy scene model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate one large image for a layout.
    Generate {
        #[arg(long)]
        layout: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the large-stage trajectory as a tensor dump.
        #[arg(long)]
        dump_trajectory: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Sweep one knob over a grid of values, several seeds per value.
    Ablate {
        #[arg(long, value_enum)]
        knob: Knob,
        /// Comma-separated knob values, at least two.
        #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
        grid: Vec<f64>,
        #[arg(long)]
        layout: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Seeds per grid value.
        #[arg(long, default_value_t = 20)]
        runs: u64,
        /// Worker threads; defaults to the number of cores.
        #[arg(long)]
        jobs: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Score every PPM in a directory against a layout.
    Eval {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        layout: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML run config; defaults apply to every missing key.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base seed; overrides the seeds of the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    reference: Option<ReferenceArg>,
    #[arg(long, value_enum)]
    extractor: Option<ExtractorArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Knob {
    Gamma,
    Fraction,
    Steps,
}

impl Knob {
    fn name(self) -> &'static str {
        match self {
            Knob::Gamma => "gamma",
            Knob::Fraction => "fraction",
            Knob::Steps => "steps",
        }
    }

    fn apply(self, cfg: &mut RunConfig, value: f64) -> Result<(), Failure> {
        match self {
            Knob::Gamma => cfg.pipeline.guidance.gamma = value,
            Knob::Fraction => cfg.pipeline.guidance.guided_fraction = value,
            Knob::Steps => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(Failure::usage(format!("steps must be a positive integer, got {value}")));
                }
                cfg.pipeline.large_sampler.steps = value as usize;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ReferenceArg {
    Invert,
    Noise,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExtractorArg {
    Identity,
    Lowpass,
}

/// Exit code 2 for bad input, 1 for failures while running.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    fn usage(e: impl Display) -> Self {
        Failure::Usage(e.to_string())
    }

    fn runtime(e: impl Display) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate {
            layout,
            out,
            dump_trajectory,
            common,
        } => cmd_generate(&layout, &out, dump_trajectory, &common),
        Command::Ablate {
            knob,
            grid,
            layout,
            out,
            runs,
            jobs,
            common,
        } => cmd_ablate(knob, &grid, &layout, &out, runs, jobs, &common),
        Command::Eval {
            images,
            layout,
            out,
            config,
        } => cmd_eval(&images, &layout, &out, config.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    match path {
        Some(p) => io::read_run_config(p).map_err(Failure::usage),
        None => Ok(RunConfig::default()),
    }
}

fn configure(common: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = load_config(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.pipeline = cfg.pipeline.with_run_seed(seed);
    }
    if let Some(r) = common.reference {
        cfg.pipeline.reference = match r {
            ReferenceArg::Invert => ReferenceMode::Invert,
            ReferenceArg::Noise => ReferenceMode::Noise,
        };
    }
    if let Some(e) = common.extractor {
        cfg.pipeline.guidance.extractor = match e {
            ExtractorArg::Identity => ExtractorKind::Identity,
            ExtractorArg::Lowpass => ExtractorKind::Lowpass,
        };
    }
    cfg.validate().map_err(Failure::usage)?;
    Ok(cfg)
}

/// Models and targets shared by every run on one layout.
struct Scene {
    /// The layout on the small canvas, as handed to the conditional model.
    small_layout: LayoutSpec,
    /// The layout on the large canvas, as scored.
    large_layout: LayoutSpec,
    m_small: Arc<SceneMixture>,
    m_large: Arc<SceneMixture>,
    /// Large-canvas templates in image space.
    templates: Vec<LatentGrid>,
    schedule: Arc<NoiseSchedule>,
    palette: Palette,
}

/// The scene family is the benchmark layouts, plus the requested layout when
/// none of them matches it.
fn build_scene(layout: &LayoutSpec, cfg: &RunConfig) -> Result<Scene, Failure> {
    let pc = &cfg.pipeline;
    if layout.canvas != pc.large_canvas() {
        return Err(Failure::usage(format!(
            "layout canvas {}x{} does not match the configured output canvas {}x{}",
            layout.canvas.height(),
            layout.canvas.width(),
            pc.large_canvas().height(),
            pc.large_canvas().width()
        )));
    }
    let palette = Palette::default();
    let small_layout = layout.with_canvas(pc.small_canvas);
    let mut layouts = benchmark_layouts(pc.small_canvas);
    if !layouts.iter().any(|l| l.matches(&small_layout)) {
        layouts.push(small_layout.clone());
    }
    let (m_small, m_large) =
        scene_mixtures(&layouts, cfg.scene.pixel_sigma, pc, &palette).map_err(Failure::usage)?;
    let large: Vec<LayoutSpec> = layouts.iter().map(|l| l.with_canvas(pc.large_canvas())).collect();
    let templates = mixture_from_layouts(&large, cfg.scene.pixel_sigma, &palette)
        .map_err(Failure::usage)?
        .templates()
        .cloned()
        .collect();
    Ok(Scene {
        small_layout,
        large_layout: layout.clone(),
        m_small: Arc::new(m_small),
        m_large: Arc::new(m_large),
        templates,
        schedule: Arc::new(cfg.schedule.build().map_err(Failure::usage)?),
        palette,
    })
}

struct RunOutput {
    image: LatentGrid,
    upsampled: LatentGrid,
    adherence: AdherenceReport,
    trajectory: layoutguide::sampler::Trajectory,
}

fn run_once(scene: &Scene, cfg: &RunConfig) -> Result<RunOutput, Failure> {
    let g = generate(
        &scene.small_layout,
        scene.m_small.clone(),
        scene.m_large.clone(),
        &cfg.pipeline,
        scene.schedule.clone(),
    )
    .map_err(Failure::runtime)?;
    let adherence = adherence(&g.image, &scene.large_layout, &scene.palette, ADHERENCE_IOU).map_err(Failure::runtime)?;
    Ok(RunOutput {
        image: g.image,
        upsampled: g.reference.upsampled,
        adherence,
        trajectory: g.trajectory,
    })
}

#[derive(Serialize)]
struct Seeds {
    small: u64,
    large: u64,
    reference: u64,
}

impl Seeds {
    fn of(cfg: &RunConfig) -> Self {
        Seeds {
            small: cfg.pipeline.small_sampler.seed,
            large: cfg.pipeline.large_sampler.seed,
            reference: cfg.pipeline.reference_seed,
        }
    }
}

#[derive(Serialize)]
struct Manifest<'a, M: Serialize> {
    command: &'static str,
    version: &'static str,
    git_describe: &'static str,
    config: &'a RunConfig,
    layout: &'a LayoutSpec,
    seeds: Seeds,
    wall_time_seconds: f64,
    outputs: Vec<String>,
    metrics: M,
}

fn create_dir(out: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(out).map_err(|e| Failure::runtime(format!("{}: {e}", out.display())))
}

fn read_layout(path: &Path) -> Result<LayoutSpec, Failure> {
    io::read_layout(path).map_err(Failure::usage)
}

#[derive(Serialize)]
struct GenerateMetrics {
    adherence: AdherenceReport,
    fidelity: FidelityReport,
    trajectory_timesteps: Vec<usize>,
}

fn cmd_generate(layout_path: &Path, out: &Path, dump: bool, common: &Common) -> Result<(), Failure> {
    let started = Instant::now();
    let layout = read_layout(layout_path)?;
    let cfg = configure(common)?;
    let scene = build_scene(&layout, &cfg)?;
    let run = run_once(&scene, &cfg)?;
    let fidelity = fidelity_reports(
        std::slice::from_ref(&run.image),
        std::slice::from_ref(&run.upsampled),
        &scene.templates,
    )
    .map_err(Failure::runtime)?[0];

    create_dir(out)?;
    let mut outputs = vec!["image.ppm".to_string()];
    io::write_ppm(&run.image, &out.join("image.ppm"), GammaMap::Linear).map_err(Failure::runtime)?;
    if dump {
        let tensor = TensorDump::from_grids(&run.trajectory.latents).map_err(Failure::runtime)?;
        io::write_tensor(&tensor, &out.join("trajectory.gdt")).map_err(Failure::runtime)?;
        outputs.push("trajectory.gdt".into());
    }
    let manifest = Manifest {
        command: "generate",
        version: env!("CARGO_PKG_VERSION"),
        git_describe: GIT_DESCRIBE,
        config: &cfg,
        layout: &layout,
        seeds: Seeds::of(&cfg),
        wall_time_seconds: started.elapsed().as_secs_f64(),
        outputs,
        metrics: GenerateMetrics {
            adherence: run.adherence.clone(),
            fidelity,
            trajectory_timesteps: run.trajectory.timesteps.clone(),
        },
    };
    io::write_json(&manifest, &out.join("manifest.json")).map_err(Failure::runtime)?;
    println!(
        "adherence {:.3}  mean IoU {:.3}  template RMS {:.4}  -> {}",
        run.adherence.adherence_rate,
        run.adherence.mean_iou,
        fidelity.template_rms,
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct AblationSpec<'a> {
    knob: &'static str,
    grid: &'a [f64],
    runs: u64,
    base_seed: u64,
}

#[derive(Serialize)]
struct AblateMetrics<'a> {
    ablation: AblationSpec<'a>,
    trend: layoutguide::eval::TrendReport,
}

fn pool(jobs: Option<usize>) -> Result<rayon::ThreadPool, Failure> {
    if jobs == Some(0) {
        return Err(Failure::usage("--jobs must be at least 1"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(Failure::runtime)
}

fn cmd_ablate(
    knob: Knob,
    grid: &[f64],
    layout_path: &Path,
    out: &Path,
    runs: u64,
    jobs: Option<usize>,
    common: &Common,
) -> Result<(), Failure> {
    let started = Instant::now();
    if grid.len() < 2 {
        return Err(Failure::usage("--grid needs at least two values"));
    }
    if runs == 0 {
        return Err(Failure::usage("--runs must be at least 1"));
    }
    let layout = read_layout(layout_path)?;
    let base = configure(common)?;
    let base_seed = common.seed.unwrap_or(base.pipeline.small_sampler.seed);
    let mut configs = Vec::with_capacity(grid.len());
    for &v in grid {
        let mut cfg = base.clone();
        knob.apply(&mut cfg, v)?;
        cfg.validate().map_err(Failure::usage)?;
        configs.push(cfg);
    }
    let scene = build_scene(&layout, &base)?;
    let pool = pool(jobs)?;

    let jobs_list: Vec<(usize, u64)> = (0..grid.len()).flat_map(|g| (0..runs).map(move |r| (g, r))).collect();
    let results: Vec<RunOutput> = pool.install(|| {
        jobs_list
            .par_iter()
            .map(|&(g, r)| {
                let mut cfg = configs[g].clone();
                cfg.pipeline = cfg.pipeline.with_run_seed(base_seed.wrapping_add(r));
                run_once(&scene, &cfg)
            })
            .collect::<Result<Vec<_>, Failure>>()
    })?;

    let mut records = Vec::with_capacity(results.len());
    for (g, &value) in grid.iter().enumerate() {
        let batch: Vec<&RunOutput> = results[g * runs as usize..(g + 1) * runs as usize].iter().collect();
        let images: Vec<LatentGrid> = batch.iter().map(|r| r.image.clone()).collect();
        let refs: Vec<LatentGrid> = batch.iter().map(|r| r.upsampled.clone()).collect();
        let fidelity = fidelity_reports(&images, &refs, &scene.templates).map_err(Failure::runtime)?;
        for (r, (run, fid)) in batch.iter().zip(fidelity).enumerate() {
            records.push(RunRecord {
                knob_value: value,
                seed: base_seed.wrapping_add(r as u64),
                adherence: run.adherence.clone(),
                fidelity: fid,
            });
        }
    }
    let trend = trend_report(knob.name(), &records).map_err(Failure::runtime)?;

    create_dir(out)?;
    let mut lines = String::new();
    for r in &records {
        lines.push_str(&serde_json::to_string(r).map_err(Failure::runtime)?);
        lines.push('\n');
    }
    io::write_atomic(&out.join("runs.jsonl"), lines.as_bytes()).map_err(Failure::runtime)?;
    io::write_json(&trend, &out.join("trend.json")).map_err(Failure::runtime)?;

    println!("{:>10} {:>24} {:>24}", knob.name(), "adherence [95% CI]", "template RMS [95% CI]");
    for g in &trend.groups {
        println!(
            "{:>10} {:>24} {:>24}",
            g.knob_value,
            format!("{:.3} [{:.3}, {:.3}]", g.adherence.mean, g.adherence.lo, g.adherence.hi),
            format!("{:.4} [{:.4}, {:.4}]", g.template_rms.mean, g.template_rms.lo, g.template_rms.hi),
        );
    }
    println!(
        "adherence trend: {:?}, template RMS trend: {:?}",
        trend.adherence_trend, trend.template_rms_trend
    );

    let manifest = Manifest {
        command: "ablate",
        version: env!("CARGO_PKG_VERSION"),
        git_describe: GIT_DESCRIBE,
        config: &base,
        layout: &layout,
        seeds: Seeds::of(&RunConfig {
            pipeline: base.pipeline.with_run_seed(base_seed),
            ..base.clone()
        }),
        wall_time_seconds: started.elapsed().as_secs_f64(),
        outputs: vec!["runs.jsonl".into(), "trend.json".into()],
        metrics: AblateMetrics {
            ablation: AblationSpec {
                knob: knob.name(),
                grid,
                runs,
                base_seed,
            },
            trend,
        },
    };
    io::write_json(&manifest, &out.join("manifest.json")).map_err(Failure::runtime)
}

#[derive(Serialize)]
#[serde(untagged)]
enum EvalLine {
    Scored {
        file: String,
        adherence: AdherenceReport,
        fidelity: FidelityReport,
    },
    Failed {
        file: String,
        error: String,
    },
}

#[derive(Serialize)]
struct EvalMetrics {
    images: usize,
    failed: usize,
    mean_adherence: Option<f64>,
}

fn cmd_eval(images_dir: &Path, layout_path: &Path, out: &Path, config: Option<&Path>) -> Result<(), Failure> {
    let started = Instant::now();
    let layout = read_layout(layout_path)?;
    let cfg = load_config(config)?;
    cfg.validate().map_err(Failure::usage)?;
    let scene = build_scene(&layout, &cfg)?;
    let target = render_template(&layout, layout.canvas, &scene.palette).map_err(Failure::usage)?;

    let mut files: Vec<PathBuf> = std::fs::read_dir(images_dir)
        .map_err(|e| Failure::usage(format!("{}: {e}", images_dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Failure::usage(format!("no .ppm files in {}", images_dir.display())));
    }

    let mut loaded: Vec<(String, LatentGrid)> = Vec::new();
    let mut lines: Vec<(usize, EvalLine)> = Vec::new();
    for (i, path) in files.iter().enumerate() {
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        match io::read_ppm(path) {
            Ok(img) if img.shape() == target.shape() => loaded.push((name, img)),
            Ok(img) => lines.push((
                i,
                EvalLine::Failed {
                    file: name,
                    error: format!("image is {}, layout canvas needs {}", img.shape(), target.shape()),
                },
            )),
            Err(e) => lines.push((
                i,
                EvalLine::Failed {
                    file: name,
                    error: e.to_string(),
                },
            )),
        }
    }
    let failed = lines.len();

    let images: Vec<LatentGrid> = loaded.iter().map(|(_, g)| g.clone()).collect();
    let refs = vec![target.clone(); images.len()];
    let fidelity = fidelity_reports(&images, &refs, &scene.templates).map_err(Failure::runtime)?;
    let mut rates = Vec::new();
    for ((name, img), fid) in loaded.iter().zip(fidelity) {
        let adh = adherence(img, &layout, &scene.palette, ADHERENCE_IOU).map_err(Failure::runtime)?;
        rates.push(adh.adherence_rate);
        let i = files.iter().position(|p| p.file_name().unwrap().to_string_lossy() == *name).unwrap();
        lines.push((
            i,
            EvalLine::Scored {
                file: name.clone(),
                adherence: adh,
                fidelity: fid,
            },
        ));
    }
    lines.sort_by_key(|(i, _)| *i);

    create_dir(out)?;
    let mut text = String::new();
    for (_, l) in &lines {
        text.push_str(&serde_json::to_string(l).map_err(Failure::runtime)?);
        text.push('\n');
    }
    io::write_atomic(&out.join("eval.jsonl"), text.as_bytes()).map_err(Failure::runtime)?;
    let mean_adherence = (!rates.is_empty()).then(|| rates.iter().sum::<f64>() / rates.len() as f64);
    let manifest = Manifest {
        command: "eval",
        version: env!("CARGO_PKG_VERSION"),
        git_describe: GIT_DESCRIBE,
        config: &cfg,
        layout: &layout,
        seeds: Seeds::of(&cfg),
        wall_time_seconds: started.elapsed().as_secs_f64(),
        outputs: vec!["eval.jsonl".into()],
        metrics: EvalMetrics {
            images: files.len(),
            failed,
            mean_adherence,
        },
    };
    io::write_json(&manifest, &out.join("manifest.json")).map_err(Failure::runtime)?;
    match mean_adherence {
        Some(m) => println!("{} images, {failed} unreadable, mean adherence {m:.3}", files.len()),
        None => println!("{} images, all unreadable", files.len()),
    }
    if failed > 0 {
        return Err(Failure::Runtime(format!("{failed} of {} images could not be scored", files.len())));
    }
    Ok(())
}
