use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use newtsplat::bench::{ablation_orders, convergence, order_run, overshoot, write_curves, Curve};
use newtsplat::dataset::Dataset;
use newtsplat::gradcheck::{check_derivatives, dataset_views, random_case, GradCheckConfig};
use newtsplat::loss::LossConfig;
use newtsplat::metrics::ViewMetrics;
use newtsplat::newton::{parse_order, write_systems_csv};
use newtsplat::raster::{render, RenderSettings};
use newtsplat::scene::Scene;
use newtsplat::secondary::{fit_bounding_sphere, knn_views};
use newtsplat::synth::{synth_scene, CameraLayout, SynthConfig};
use newtsplat::trainer::{run_training, LearningRates, Optimizer, Stabilization, TrainConfig, TrainOutput, Trainer};
use newtsplat::{Error, Result};

#[derive(Parser)]
#[command(name = "newtsplat", version, about = "Gaussian splatting with per-attribute local Newton training")]
struct Cli {
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, env = "NEWTSPLAT_THREADS", default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a scene against a dataset.
    Train(TrainArgs),
    /// Render a scene from dataset cameras and report metrics against the targets.
    Render(RenderArgs),
    /// Generate a synthetic scene, its perturbed initialisation and a dataset.
    Synth(SynthArgs),
    /// Compare every analytic derivative with finite differences.
    CheckGrad(CheckGradArgs),
    /// Newton-vs-GD and ablation runs on synthetic fixtures.
    Bench(BenchArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Dataset manifest (JSON).
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "newton")]
    optimizer: String,
    #[arg(long, default_value = "pos,rot,scale,opacity,color")]
    order: String,
    #[arg(long, default_value_t = 1)]
    epochs: usize,
    /// Stop after this many image steps.
    #[arg(long)]
    max_steps: Option<usize>,
    /// Secondary targets per view.
    #[arg(long, default_value_t = 3)]
    knn: usize,
    /// Pixel stride of secondary renders.
    #[arg(long, default_value_t = 4)]
    secondary_downsample: usize,
    /// SSIM weight in the loss.
    #[arg(long, default_value_t = 0.2)]
    lambda: f64,
    #[arg(long, env = "NEWTSPLAT_SEED", default_value_t = 0)]
    seed: u64,
    /// Loss-curve CSV.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Probe metrics every this many steps.
    #[arg(long, default_value_t = 1)]
    log_every: usize,
    /// Directory for per-epoch scene checkpoints.
    #[arg(long)]
    checkpoints: Option<PathBuf>,
    /// Final scene file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Multiplies the baseline learning rates.
    #[arg(long, default_value_t = 1.0)]
    lr_scale: f64,
    /// Unit Newton steps with exact curvature and no safeguards.
    #[arg(long)]
    plain_newton: bool,
    /// Writes the local systems of one extra (unapplied) step from the final scene as CSV.
    #[arg(long)]
    dump_systems: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Output directory for the rendered images.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated view ids (default: all).
    #[arg(long)]
    views: Option<String>,
    /// Disable the alpha and transmittance cutoffs.
    #[arg(long)]
    exact: bool,
    #[arg(long, value_enum, default_value_t = Format::Png)]
    format: Format,
    #[arg(long, default_value_t = 0.2)]
    lambda: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Png,
    Ppm,
}

impl Format {
    fn ext(self) -> &'static str {
        match self {
            Format::Png => "png",
            Format::Ppm => "ppm",
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Layout {
    Sphere,
    Ring,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory: truth.json, init.json and dataset/manifest.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, env = "NEWTSPLAT_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    kernels: usize,
    #[arg(long, default_value_t = 8)]
    views: usize,
    #[arg(long, default_value_t = 64)]
    resolution: usize,
    #[arg(long, default_value_t = 3)]
    sh_degree: u8,
    #[arg(long, value_enum, default_value_t = Layout::Sphere)]
    layout: Layout,
    /// Scales the perturbation of the initial scene (0 = ground truth).
    #[arg(long, default_value_t = 1.0)]
    perturbation: f64,
    #[arg(long, value_enum, default_value_t = Format::Png)]
    format: Format,
}

#[derive(Args)]
struct CheckGradArgs {
    /// Scene to check; with `--dataset`. Without them, random scenes are used.
    #[arg(long, requires = "dataset")]
    scene: Option<PathBuf>,
    #[arg(long, requires = "scene")]
    dataset: Option<PathBuf>,
    /// Primary view of a dataset check.
    #[arg(long, default_value_t = 0)]
    view: usize,
    /// Secondary views of a dataset check.
    #[arg(long, default_value_t = 2)]
    knn: usize,
    #[arg(long, default_value_t = 2)]
    secondary_downsample: usize,
    /// Number of random scenes.
    #[arg(long, default_value_t = 20)]
    scenes: usize,
    #[arg(long, default_value_t = 50)]
    kernels: usize,
    #[arg(long, default_value_t = 48)]
    resolution: usize,
    #[arg(long, env = "NEWTSPLAT_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 1e-3)]
    hessian_tolerance: f64,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Experiment {
    All,
    Convergence,
    Overshoot,
    Order,
}

#[derive(Args)]
struct BenchArgs {
    /// Output directory: curves.csv and summary.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Experiment::All)]
    experiment: Experiment,
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// First seed.
    #[arg(long, env = "NEWTSPLAT_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    gd_steps: usize,
    #[arg(long, default_value_t = 20)]
    newton_steps: usize,
    #[arg(long, default_value_t = 36)]
    overshoot_steps: usize,
    #[arg(long, default_value_t = 48)]
    order_steps: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", &e.render().to_string()),
    };
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            return fail("threads", &e.to_string());
        }
    }
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Render(a) => render_cmd(a),
        Command::Synth(a) => synth(a),
        Command::CheckGrad(a) => check_grad(a),
        Command::Bench(a) => bench(a),
    };
    match result {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).expect("json value"));
            ExitCode::SUCCESS
        }
        Err(e) => fail(e.kind(), &e.to_string()),
    }
}

fn fail(kind: &str, message: &str) -> ExitCode {
    let body = json!({ "error": { "kind": kind, "message": message.trim_end() } });
    eprintln!("{body}");
    ExitCode::FAILURE
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| io_error(path, e))
}

fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        context: format!("writing {}", path.display()),
        source: e,
    }
}

fn train(a: TrainArgs) -> Result<serde_json::Value> {
    let scene = Scene::load(&a.scene)?;
    let dataset = Dataset::load(&a.dataset)?;
    let optimizer: Optimizer = a.optimizer.parse()?;
    let config = TrainConfig {
        optimizer,
        order: parse_order(&a.order)?,
        epochs: a.epochs,
        max_steps: a.max_steps,
        seed: a.seed,
        loss: LossConfig {
            lambda: a.lambda,
            ..Default::default()
        },
        knn: a.knn,
        secondary_stride: a.secondary_downsample,
        learning_rates: match optimizer {
            Optimizer::Adam => LearningRates::ADAM,
            _ => LearningRates::GD,
        }
        .scaled(a.lr_scale),
        log_every: a.log_every,
        stabilization: if a.plain_newton {
            Stabilization::NONE
        } else {
            Stabilization::default()
        },
        keep_systems: a.dump_systems.is_some(),
        ..Default::default()
    };
    let output = TrainOutput {
        log: a.log.clone(),
        checkpoint_dir: a.checkpoints.clone(),
    };
    let run = if let Some(path) = &a.dump_systems {
        // one more step from the trained scene, kept only for its systems
        let mut trainer = Trainer::new(config.clone(), scene.clone(), &dataset)?;
        let run = run_training(config, scene, &dataset, &output)?;
        let last = run.reports.last().map(|r| r.image_id).unwrap_or(0);
        trainer.scene = run.scene.clone();
        trainer.train_step(last)?;
        let mut buf = Vec::new();
        write_systems_csv(&trainer.last_systems, &mut buf).expect("writing to memory");
        write_file(path, &buf)?;
        run
    } else {
        run_training(config, scene, &dataset, &output)?
    };
    if let Some(path) = &a.out {
        run.scene.save(path)?;
    }
    Ok(json!({
        "steps": run.reports.len(),
        "initial_probe_loss": run.initial.loss,
        "final_probe_loss": run.final_loss(),
        "final_psnr": run.reports.last().and_then(|r| r.probe).map(|p| p.psnr),
        "log": a.log,
        "scene": a.out,
    }))
}

fn parse_views(s: &Option<String>, n: usize) -> Result<Vec<usize>> {
    let Some(s) = s else {
        return Ok((0..n).collect());
    };
    s.split(',')
        .map(|v| {
            let id: usize = v
                .trim()
                .parse()
                .map_err(|_| Error::InvalidInput(format!("bad view id '{v}'")))?;
            if id >= n {
                return Err(Error::InvalidInput(format!("view {id} out of range (dataset has {n})")));
            }
            Ok(id)
        })
        .collect()
}

fn render_cmd(a: RenderArgs) -> Result<serde_json::Value> {
    let scene = Scene::load(&a.scene)?;
    let dataset = Dataset::load(&a.dataset)?;
    let settings = if a.exact {
        RenderSettings::exact()
    } else {
        RenderSettings::default()
    };
    let loss = LossConfig {
        lambda: a.lambda,
        ..Default::default()
    };
    fs::create_dir_all(&a.out).map_err(|e| io_error(&a.out, e))?;
    let mut metrics = Vec::new();
    for v in parse_views(&a.views, dataset.len())? {
        let cam = &dataset.cameras[v];
        let (_, rt) = render(&scene, cam, cam.full_grid(), &settings, false)?;
        rt.image.save(&a.out.join(format!("view_{v:03}.{}", a.format.ext())))?;
        metrics.push(ViewMetrics::compute(v, &rt.image, &dataset.images[v], &loss)?);
    }
    Ok(json!({ "views": metrics }))
}

fn synth(a: SynthArgs) -> Result<serde_json::Value> {
    let out = synth_scene(&SynthConfig {
        seed: a.seed,
        n_kernels: a.kernels,
        n_views: a.views,
        resolution: a.resolution,
        sh_degree: a.sh_degree,
        layout: match a.layout {
            Layout::Sphere => CameraLayout::Sphere,
            Layout::Ring => CameraLayout::Ring,
        },
        perturbation: a.perturbation,
        ..Default::default()
    })?;
    fs::create_dir_all(&a.out).map_err(|e| io_error(&a.out, e))?;
    let truth = a.out.join("truth.json");
    let init = a.out.join("init.json");
    out.truth.save(&truth)?;
    out.init.save(&init)?;
    let manifest = out.dataset.save(&a.out.join("dataset"), a.format.ext())?;
    Ok(json!({ "truth": truth, "init": init, "dataset": manifest }))
}

fn check_grad(a: CheckGradArgs) -> Result<serde_json::Value> {
    let cfg = GradCheckConfig {
        tolerance: a.tolerance,
        hessian_tolerance: a.hessian_tolerance,
        ..Default::default()
    };
    let cases = match (&a.scene, &a.dataset) {
        (Some(scene), Some(dataset)) => {
            let scene = Scene::load(scene)?;
            let dataset = Dataset::load(dataset)?;
            let neighbors = if a.knn > 0 && dataset.len() > 1 {
                let sphere = fit_bounding_sphere(&scene)?;
                knn_views(&dataset.cameras, &sphere, a.knn)?
                    .get(a.view)
                    .cloned()
                    .ok_or_else(|| Error::InvalidInput(format!("view {} out of range", a.view)))?
            } else {
                Vec::new()
            };
            vec![(scene, dataset_views(&dataset, a.view, &neighbors, a.secondary_downsample)?)]
        }
        _ => (0..a.scenes as u64)
            .map(|i| random_case(a.seed + i, a.kernels, a.resolution, 3))
            .collect::<Result<Vec<_>>>()?,
    };
    let mut reports = Vec::new();
    let mut failures = Vec::new();
    for (i, (scene, views)) in cases.iter().enumerate() {
        let report = check_derivatives(scene, views, &cfg)?;
        failures.extend(report.failures().into_iter().map(|c| format!("case {i}: {} ({:.3e})", c.name, c.max_rel_err)));
        reports.push(report);
    }
    if !failures.is_empty() {
        return Err(Error::NumericalDegeneracy(format!(
            "derivative check failed: {}",
            failures.join("; ")
        )));
    }
    Ok(json!({ "passed": true, "cases": reports }))
}

fn bench(a: BenchArgs) -> Result<serde_json::Value> {
    let base = TrainConfig::default();
    let seeds: Vec<u64> = (a.seed..a.seed + a.seeds).collect();
    let wants = |e: Experiment| a.experiment == Experiment::All || a.experiment == e;
    let mut curves: Vec<Curve> = Vec::new();
    let mut summary = serde_json::Map::new();
    if wants(Experiment::Convergence) {
        let mut rows = Vec::new();
        for &s in &seeds {
            let r = convergence(s, &base, a.gd_steps, a.newton_steps)?;
            curves.extend(r.curves.iter().cloned());
            rows.push(json!({
                "seed": s,
                "gd_target": r.gd_target,
                "newton_steps": r.newton_steps,
                "newton_final": r.newton_final,
                "cost_ratio": r.cost_ratio,
            }));
        }
        summary.insert("convergence".into(), rows.into());
    }
    if wants(Experiment::Overshoot) {
        let mut rows = Vec::new();
        for &s in &seeds {
            for k in [0, 3, 8] {
                let r = overshoot(s, &base, k, a.overshoot_steps)?;
                rows.push(json!({ "seed": s, "knn": k, "mean_spike": r.mean_spike, "final_loss": r.final_loss }));
                curves.push(r.curve);
            }
        }
        summary.insert("overshoot".into(), rows.into());
    }
    if wants(Experiment::Order) {
        let mut rows = Vec::new();
        for &s in &seeds {
            for order in ablation_orders() {
                let r = order_run(s, &base, &order, a.order_steps)?;
                rows.push(json!({ "seed": s, "order": r.order, "final_loss": r.final_loss }));
                curves.push(r.curve);
            }
        }
        summary.insert("order".into(), rows.into());
    }
    let mut buf = Vec::new();
    write_curves(&curves, &mut buf).expect("writing to memory");
    let csv = a.out.join("curves.csv");
    write_file(&csv, &buf)?;
    let summary = serde_json::Value::Object(summary);
    let path = a.out.join("summary.json");
    write_file(&path, serde_json::to_string_pretty(&summary).expect("json value").as_bytes())?;
    Ok(json!({ "curves": csv, "summary": path, "results": summary }))
}
