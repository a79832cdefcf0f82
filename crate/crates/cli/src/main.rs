use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, Vector3};

use gdsplat::density::{all_nearest_gds, GdsConfig, GdsForm};
use gdsplat::epipolar::{weight_map, Intrinsics, RelativePose};
use gdsplat::image::{save_gray_png, save_png};
use gdsplat::plane::{cross_attn_trace, PlaneDecoderWeights};
use gdsplat::ply::{load_ply, save_ply};
use gdsplat::raster::render;
use gdsplat::scene::{
    image_file_name, parse_cameras, save_cameras, synth_preset, synthesize, Bounds, SceneManifest,
};
use gdsplat::trainer::{evaluate_psnr, metrics_csv, LrPolicy, TrainConfig, TrainError, Trainer};

#[derive(Parser)]
#[command(name = "gdsplat", version, about = "CPU Gaussian splatting with GDS-gated densification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize a Gaussian cloud against posed images.
    Fit(FitArgs),
    /// Render one camera of a cloud to PNG.
    Render(RenderArgs),
    /// Epipolar band weights of a target point in a source view.
    Epipolar(EpipolarArgs),
    /// Nearest-neighbour GDS statistics of a cloud.
    Gds(GdsArgs),
    /// Generate a self-reconstruction fixture.
    Synth(SynthArgs),
    /// Run the plane-decoder cross-attention on random inputs.
    PlaneDemo(PlaneDemoArgs),
}

fn parse_pair(s: &str) -> Result<[f64; 2], String> {
    let v = parse_list(s, 2)?;
    Ok([v[0], v[1]])
}

fn parse_bounds(s: &str) -> Result<Bounds, String> {
    let v = parse_list(s, 6)?;
    Bounds::new(Vector3::new(v[0], v[1], v[2]), Vector3::new(v[3], v[4], v[5])).map_err(|e| e.to_string())
}

fn parse_list(s: &str, n: usize) -> Result<Vec<f64>, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    if v.len() != n {
        return Err(format!("expected {n} comma-separated numbers, got {}", v.len()));
    }
    Ok(v)
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    cameras: PathBuf,
    /// Directory holding view_<id>.png for every camera.
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    iters: usize,
    /// Zero disables the gate.
    #[arg(long, default_value_t = 0.1)]
    gds_threshold: f64,
    #[arg(long, default_value_t = GdsForm::Wasserstein)]
    gds_form: GdsForm,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// One learning rate for every parameter group.
    #[arg(long, num_args = 0..=1, default_missing_value = "1e-4", value_name = "LR")]
    uniform_lr: Option<f64>,
    /// Record wall-clock milliseconds in the metrics (logs stop being reproducible).
    #[arg(long)]
    timing: bool,
    /// Initialization box as xmin,ymin,zmin,xmax,ymax,zmax; guessed from the cameras otherwise.
    #[arg(long, value_parser = parse_bounds, allow_hyphen_values = true)]
    bounds: Option<Bounds>,
    #[arg(long, default_value_t = 1000)]
    init_count: usize,
    /// Write <out>.<iter>.ply every N iterations.
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
    #[arg(long, default_value_t = 100)]
    log_every: usize,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    cameras: PathBuf,
    #[arg(long)]
    view: u32,
    #[arg(long)]
    out: PathBuf,
    /// Store coverage in an alpha channel.
    #[arg(long)]
    alpha: bool,
}

#[derive(Args)]
struct EpipolarArgs {
    #[arg(long)]
    cameras: PathBuf,
    #[arg(long)]
    src: u32,
    #[arg(long)]
    tgt: u32,
    /// Target-view point in normalized [0,1] coordinates, as X,Y.
    #[arg(long, value_parser = parse_pair)]
    point: [f64; 2],
    #[arg(long, default_value_t = 32)]
    grid: usize,
    #[arg(long)]
    out: PathBuf,
    /// Also write the weights as CSV (row, col, weight).
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct GdsArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = GdsForm::Wasserstein)]
    form: GdsForm,
    /// Histogram as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long, default_value_t = 12)]
    bins: usize,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value = "ORBIT")]
    preset: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct PlaneDemoArgs {
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 4)]
    queries: usize,
    #[arg(long, default_value_t = 64)]
    keys: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Load weights from a directory of .fdgt tensors instead of sampling them.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    save_weights: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(1);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("FDG_THREADS") else { return Ok(()) };
    let n: usize = value.trim().parse().with_context(|| format!("FDG_THREADS must be a positive integer, got `{value}`"))?;
    if n == 0 {
        bail!("FDG_THREADS must be positive");
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Fit(a) => fit(a),
        Command::Render(a) => render_view(a),
        Command::Epipolar(a) => epipolar(a),
        Command::Gds(a) => gds_stats(a),
        Command::Synth(a) => synth(a),
        Command::PlaneDemo(a) => plane_demo(a),
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn fit(a: FitArgs) -> Result<()> {
    let manifest = SceneManifest::load(&a.cameras, &a.images, a.bounds)?;
    let views = manifest.load_views()?;
    let cfg = TrainConfig {
        iters: a.iters,
        lr: a.uniform_lr.map_or(LrPolicy::Grouped, LrPolicy::Uniform),
        gds: GdsConfig { threshold: a.gds_threshold, form: a.gds_form, ..TrainConfig::default().gds },
        seed: a.seed,
        log_interval: a.log_every,
        checkpoint_interval: a.checkpoint_every,
        init_count: a.init_count,
        bounds: Some(manifest.bounds),
        record_timing: a.timing,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::with_init(views.clone(), cfg)?;
    let out = a.out.clone();
    let mut checkpoint_err = None;
    let result = trainer.fit(|iter, cloud| {
        let path = out.with_extension(format!("{iter:06}.ply"));
        if let Err(e) = save_ply(cloud, &path) {
            checkpoint_err.get_or_insert(e);
        }
    });
    if let Some(path) = &a.metrics {
        write_file(path, metrics_csv(trainer.metrics()))?;
    }
    if let Some(e) = checkpoint_err {
        return Err(e).context("writing checkpoint");
    }
    if let Err(TrainError::NonFinite { what, iteration, snapshot }) = &result {
        let dump = a.out.with_extension("abort.ply");
        save_ply(snapshot, &dump).with_context(|| format!("writing {}", dump.display()))?;
        bail!("non-finite {what} at iteration {iteration}; cloud before the step saved to {}", dump.display());
    }
    result?;
    save_ply(trainer.cloud(), &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let psnr = evaluate_psnr(trainer.cloud(), &views)?;
    let blocked: usize = trainer.metrics().iter().map(|m| m.densify.n_gds_blocked).sum();
    let densified: usize = trainer.metrics().iter().map(|m| m.densify.densified()).sum();
    println!(
        "{} Gaussians, {densified} split/clone, {blocked} blocked by GDS, mean PSNR {psnr:.2} dB over {} views",
        trainer.cloud().len(),
        views.len()
    );
    Ok(())
}

fn find_camera(path: &Path, id: u32) -> Result<gdsplat::gaussian::Camera> {
    parse_cameras(path)?
        .into_iter()
        .find(|c| c.id == id)
        .with_context(|| format!("no camera with id {id} in {}", path.display()))
}

fn render_view(a: RenderArgs) -> Result<()> {
    let cloud = load_ply(&a.model).with_context(|| format!("reading {}", a.model.display()))?;
    let cam = find_camera(&a.cameras, a.view)?;
    let buf = render(&cloud, &cam)?;
    save_png(&a.out, &buf.color, a.alpha.then_some(buf.alpha.as_slice()))?;
    if buf.stats.singular > 0 {
        log::warn!("{} near-singular splats skipped", buf.stats.singular);
    }
    Ok(())
}

fn epipolar(a: EpipolarArgs) -> Result<()> {
    if a.grid == 0 {
        bail!("--grid must be positive");
    }
    let src = find_camera(&a.cameras, a.src)?;
    let tgt = find_camera(&a.cameras, a.tgt)?;
    let pose = RelativePose::between(&src, &tgt);
    let (si, ti) = (Intrinsics::of(&src), Intrinsics::of(&tgt));
    let weights = match weight_map(a.point, &pose, &ti, &si, a.grid, a.grid) {
        Ok(w) => w,
        Err(e) => {
            log::warn!("{e}; writing uniform weights");
            vec![1.0; a.grid * a.grid]
        }
    };
    save_gray_png(&a.out, a.grid as u32, a.grid as u32, &weights)?;
    if let Some(path) = &a.csv {
        let mut text = String::from("row,col,weight\n");
        for (i, w) in weights.iter().enumerate() {
            text.push_str(&format!("{},{},{w:.9}\n", i / a.grid, i % a.grid));
        }
        write_file(path, text)?;
    }
    let near = weights.iter().filter(|&&w| w > 0.5).count();
    println!("{near} of {} cells within the band", weights.len());
    Ok(())
}

struct Histogram {
    edges: Vec<f64>,
    counts: Vec<usize>,
}

/// Equal-width bins in log10 space over the positive values; zeros get their own bin.
fn log_histogram(values: &[f64], bins: usize) -> Histogram {
    let positive: Vec<f64> = values.iter().copied().filter(|v| *v > 0.0).collect();
    let zeros = values.len() - positive.len();
    let mut edges = vec![0.0];
    let mut counts = vec![zeros];
    if let (Some(lo), Some(hi)) = (
        positive.iter().copied().reduce(f64::min),
        positive.iter().copied().reduce(f64::max),
    ) {
        let (l0, l1) = (lo.log10(), hi.log10().max(lo.log10() + 1e-9));
        let step = (l1 - l0) / bins as f64;
        edges.extend((0..=bins).map(|k| 10f64.powf(l0 + step * k as f64)));
        let mut c = vec![0; bins];
        for v in &positive {
            let k = (((v.log10() - l0) / step) as usize).min(bins - 1);
            c[k] += 1;
        }
        counts.extend(c);
    }
    Histogram { edges, counts }
}

fn gds_stats(a: GdsArgs) -> Result<()> {
    if a.bins == 0 {
        bail!("--bins must be positive");
    }
    let cloud = load_ply(&a.model).with_context(|| format!("reading {}", a.model.display()))?;
    let mut values = all_nearest_gds(&cloud, a.form)?;
    values.sort_by(f64::total_cmp);
    let n = values.len();
    let median = if n % 2 == 1 { values[n / 2] } else { 0.5 * (values[n / 2 - 1] + values[n / 2]) };
    println!("{n} Gaussians, nearest-neighbor GDS ({})", a.form);
    println!("min {:.6e}  median {median:.6e}  max {:.6e}", values[0], values[n - 1]);
    let hist = log_histogram(&values, a.bins);
    let widest = hist.counts.iter().copied().max().unwrap_or(1).max(1);
    let mut csv = String::from("lo,hi,count\n");
    for (k, &count) in hist.counts.iter().enumerate() {
        let (lo, hi) = if k == 0 { (0.0, 0.0) } else { (hist.edges[k], hist.edges[k + 1]) };
        if k == 0 && count == 0 {
            continue;
        }
        let bar = "#".repeat((count * 40).div_ceil(widest));
        println!("[{lo:>10.3e}, {hi:>10.3e}] {count:>7} {bar}");
        csv.push_str(&format!("{lo:e},{hi:e},{count}\n"));
    }
    if let Some(path) = &a.csv {
        write_file(path, csv)?;
    }
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut preset = synth_preset(&a.preset)?;
    if let Some(seed) = a.seed {
        preset.seed = seed;
    }
    let scene = synthesize(&preset)?;
    let images = a.out.join("images");
    fs::create_dir_all(&images).with_context(|| format!("creating {}", images.display()))?;
    save_cameras(&scene.cameras, a.out.join("cameras.json"))?;
    save_ply(&scene.cloud, a.out.join("gt.ply"))?;
    for ((cam, img), alpha) in scene.cameras.iter().zip(&scene.images).zip(&scene.alphas) {
        save_png(images.join(image_file_name(cam.id)), img, Some(alpha))?;
    }
    let b = scene.bounds;
    println!(
        "{} views of {} Gaussians written to {}; bounds {},{},{},{},{},{}",
        scene.cameras.len(),
        scene.cloud.len(),
        a.out.display(),
        b.min.x,
        b.min.y,
        b.min.z,
        b.max.x,
        b.max.y,
        b.max.z
    );
    Ok(())
}

fn plane_demo(a: PlaneDemoArgs) -> Result<()> {
    let weights = match &a.weights {
        Some(dir) => PlaneDecoderWeights::load_dir(dir)?,
        None => PlaneDecoderWeights::random(a.dim, a.queries, a.seed),
    };
    if let Some(dir) = &a.save_weights {
        weights.save_dir(dir)?;
    }
    let d = weights.dim();
    let latent = PlaneDecoderWeights::random(d, a.keys, a.seed.wrapping_add(1)).u * (d as f64).sqrt();
    let trace = cross_attn_trace(&weights.u, &latent, &weights)?;
    let values: DMatrix<f64> = &latent * weights.wv.transpose();
    let worst_row = (0..trace.probs.nrows()).map(|r| (trace.probs.row(r).sum() - 1.0).abs()).fold(0.0, f64::max);
    let in_hull = (0..d).all(|c| {
        let (lo, hi) = (values.column(c).min(), values.column(c).max());
        trace.output.column(c).iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12)
    });
    println!(
        "{} queries x {} keys, d = {d}: max |row sum - 1| = {worst_row:.2e}, outputs inside value hull: {in_hull}",
        trace.output.nrows(),
        latent.nrows()
    );
    Ok(())
}
