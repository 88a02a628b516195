//! Command-line front end for the planar radiance field toolkit: scene
//! generation, fitting, novel-view rendering, metric evaluation, and a
//! finite-difference gradient audit.
//!
//! Exit codes partition failures: 2 for usage, 3 for bad or missing data,
//! 4 for numeric failures (divergence, failed gradient checks).

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde::de::DeserializeOwned;
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use planarfield::dataset::load_dataset;
use planarfield::field::{FrustumGrid, load_grid};
use planarfield::fit::{CheckpointMeta, FitConfig, FitError, fit};
use planarfield::geometry::{
    Camera, DepthRange, DisparitySet, Pose, PoseFile, bin_edge_disparities,
    sample_disparities_between,
};
use planarfield::imageio::{read_ppm, write_pfm, write_ppm};
use planarfield::losses::{ForwardPassModel, count_forward_passes, psnr, ssim};
use planarfield::oracle::{SceneFile, emit_scene_file};
use planarfield::raster::ColorMap;
use planarfield::renderer::{
    GradcheckConfig, PadMode, gradcheck, render_depth_normalized, render_novel,
};

#[derive(Parser)]
#[command(name = "planarfield", version, about = "Planar radiance field toolkit")]
struct Cli {
    /// Reference mode: forces deterministic settings (zeroed wall clock in
    /// fit reports). All commands are already bit-reproducible per seed.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Worker threads for scene generation; other commands run single
    /// threaded. Overrides the scene bundle's own setting.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overrides the seed found in config files; also seeds stratified
    /// render sampling (default 0).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ray-trace a scene bundle into a posed dataset directory
    GenScene {
        /// Scene bundle: {scene, camera, views, emit}
        spec: PathBuf,
        out_dir: PathBuf,
    },
    /// Fit a frustum grid to a dataset by gradient descent
    Fit {
        /// Fit configuration JSON; missing fields take defaults
        config: PathBuf,
        /// Dataset directory (view_k.ppm, view_k_depth.pfm, ...)
        dataset: PathBuf,
        /// Receives checkpoint.minegrid, checkpoint.json, report.jsonl
        out_dir: PathBuf,
    },
    /// Render a checkpointed grid from a new viewpoint
    Render {
        /// Grid file; a .json sidecar next to it supplies the depth range
        /// for bin-edges mode (the grid's own slice span stands in when
        /// the sidecar is missing)
        checkpoint: PathBuf,
        camera: PathBuf,
        /// Pose JSON mapping source-frame points into the target frame
        pose: PathBuf,
        /// Receives rgb.ppm, depth.pfm, weightsum.pfm
        out_dir: PathBuf,
        #[arg(long, default_value_t = 8)]
        n_planes: usize,
        #[arg(long, value_enum, default_value_t = SampleModeArg::BinEdges)]
        mode: SampleModeArg,
        #[arg(long, value_enum, default_value_t = PadArg::Edge)]
        pad: PadArg,
        #[arg(long, value_enum, default_value_t = DepthArg::Raw)]
        depth: DepthArg,
    },
    /// Compare matching .ppm files in two directories with PSNR and SSIM
    Eval {
        pred_dir: PathBuf,
        gt_dir: PathBuf,
        /// Fraction of width/height cropped from every side first
        #[arg(long, default_value_t = 0.0)]
        crop_frac: f64,
        /// Metrics file destination [default: <pred_dir>/metrics.json]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference audit of the renderer's analytic gradients
    Gradcheck {
        /// Image and grid raster size (square)
        #[arg(long, default_value_t = 8)]
        size: usize,
        #[arg(long, default_value_t = 4)]
        n_planes: usize,
        #[arg(long, default_value_t = 4)]
        slices: usize,
        /// Nominal finite-difference step
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        /// Maximum allowed relative error
        #[arg(long, default_value_t = 1e-4)]
        threshold: f64,
        /// Check at most this many randomly chosen parameters (0 = all)
        #[arg(long, default_value_t = 0)]
        max_params: usize,
        /// Negative control: corrupt one analytic entry so a working
        /// check must fail (exit 4)
        #[arg(long)]
        corrupt: bool,
        /// Also write the report as JSON
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SampleModeArg {
    /// One random disparity per stratified bin of the grid's slice span
    Stratified,
    /// Fixed disparities at the depth range's bin edges
    BinEdges,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PadArg {
    /// Out-of-frustum samples read as transparent
    Zero,
    /// Out-of-frustum samples replicate the border pixel
    Edge,
}

impl From<PadArg> for PadMode {
    fn from(p: PadArg) -> PadMode {
        match p {
            PadArg::Zero => PadMode::Zero,
            PadArg::Edge => PadMode::Edge,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DepthArg {
    /// Expected depth as composited (dark where little weight accumulates)
    Raw,
    /// Expected depth divided by the weight sum where it is meaningful
    Normalized,
}

/// A failed run, already classified to its exit code.
enum Failure {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Data(_) => 3,
            Failure::Numeric(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Numeric(m) => m,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenScene { ref spec, ref out_dir } => {
            cmd_gen_scene(spec, out_dir, cli.seed, cli.threads)
        }
        Command::Fit { ref config, ref dataset, ref out_dir } => {
            cmd_fit(config, dataset, out_dir, cli.seed, cli.deterministic)
        }
        Command::Render { ref checkpoint, ref camera, ref pose, ref out_dir, n_planes, mode, pad, depth } => {
            cmd_render(checkpoint, camera, pose, out_dir, n_planes, mode, pad, depth, cli.seed)
        }
        Command::Eval { ref pred_dir, ref gt_dir, crop_frac, ref out } => {
            cmd_eval(pred_dir, gt_dir, crop_frac, out.as_deref())
        }
        Command::Gradcheck { size, n_planes, slices, step, threshold, max_params, corrupt, ref out } => {
            cmd_gradcheck(size, n_planes, slices, step, threshold, max_params, corrupt, out.as_deref(), cli.seed)
        }
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, Failure> {
    std::fs::read(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

/// Parses JSON with field-path error context ("scene.rects[1].center: ...").
fn parse_json<T: DeserializeOwned>(bytes: &[u8], path: &Path) -> Result<T, Failure> {
    let mut de = serde_json::Deserializer::from_slice(bytes);
    let value = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        Failure::Data(format!("{}: field {}: {}", path.display(), e.path(), e.inner()))
    })?;
    de.end()
        .map_err(|e| Failure::Data(format!("{}: trailing content: {e}", path.display())))?;
    Ok(value)
}

fn write_json_file(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    let mut bytes = serde_json::to_vec_pretty(value)
        .map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn data_err(e: impl std::fmt::Display) -> Failure {
    Failure::Data(e.to_string())
}

fn print_wrote(dir: &Path, name: &str) -> Result<(), Failure> {
    let path = dir.join(name);
    let len = std::fs::metadata(&path)
        .map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?
        .len();
    println!("wrote {} ({len} bytes)", path.display());
    Ok(())
}

fn cmd_gen_scene(
    spec: &Path,
    out_dir: &Path,
    seed: Option<u64>,
    threads: Option<usize>,
) -> Result<(), Failure> {
    let bytes = read_bytes(spec)?;
    let mut bundle: SceneFile = parse_json(&bytes, spec)?;
    if let Some(s) = seed {
        bundle.emit.seed = s;
    }
    if let Some(t) = threads {
        bundle.emit.threads = t;
    }
    bundle.scene.validate().map_err(data_err)?;
    bundle.camera.validate().map_err(data_err)?;
    emit_scene_file(&bundle, out_dir).map_err(data_err)?;

    print_wrote(out_dir, "camera.json")?;
    for k in 0..bundle.views.len() {
        for name in [
            format!("view_{k}.ppm"),
            format!("view_{k}_depth.pfm"),
            format!("view_{k}_pose.json"),
            format!("points_{k}.json"),
        ] {
            print_wrote(out_dir, &name)?;
        }
    }
    Ok(())
}

fn cmd_fit(
    config_path: &Path,
    dataset_dir: &Path,
    out_dir: &Path,
    seed: Option<u64>,
    deterministic: bool,
) -> Result<(), Failure> {
    let bytes = read_bytes(config_path)?;
    let mut config: FitConfig = parse_json(&bytes, config_path)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    if deterministic {
        config.deterministic = true;
    }
    let dataset = load_dataset(dataset_dir).map_err(data_err)?;
    let (_, report) = fit(&config, &dataset, Some(out_dir)).map_err(|e| match e {
        FitError::Diverged { .. } => Failure::Numeric(e.to_string()),
        other => Failure::Data(other.to_string()),
    })?;

    let s = &report.summary;
    println!(
        "fit: {} iterations over {} views, seed {}",
        s.iterations,
        dataset.num_views(),
        s.seed
    );
    println!("scale: {}", s.scale);
    if let (Some(p), Some(ss), Some(rms)) = (s.holdout_psnr, s.holdout_ssim, s.holdout_depth_rms) {
        let view = config.holdout_view.expect("holdout metrics imply a holdout view");
        println!("holdout view {view}: psnr {p:.4} dB, ssim {ss:.6}, depth rms {rms:.6}");
    }
    for name in ["checkpoint.minegrid", "checkpoint.json", "report.jsonl"] {
        print_wrote(out_dir, name)?;
    }
    Ok(())
}

/// Depth range for bin-edge placement: the sidecar's configured range when
/// available, else the span of the grid's own slices.
fn bin_edge_range(checkpoint: &Path, grid: &FrustumGrid) -> Result<DepthRange, Failure> {
    let sidecar = checkpoint.with_extension("json");
    if sidecar.exists() {
        let bytes = read_bytes(&sidecar)?;
        let meta: CheckpointMeta = parse_json(&bytes, &sidecar)?;
        Ok(meta.config.range)
    } else {
        let (d_min, d_max) = grid.disparity_span();
        DepthRange::from_disparities(d_max, d_min).map_err(data_err)
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_render(
    checkpoint: &Path,
    camera_path: &Path,
    pose_path: &Path,
    out_dir: &Path,
    n_planes: usize,
    mode: SampleModeArg,
    pad: PadArg,
    depth: DepthArg,
    seed: Option<u64>,
) -> Result<(), Failure> {
    if n_planes == 0 {
        return Err(Failure::Usage("--n-planes must be at least 1".into()));
    }
    let grid = load_grid(checkpoint)
        .map_err(|e| Failure::Data(format!("{}: {e}", checkpoint.display())))?;
    let cam: Camera = parse_json(&read_bytes(camera_path)?, camera_path)?;
    cam.validate().map_err(data_err)?;
    if grid.width() != cam.width || grid.height() != cam.height {
        return Err(Failure::Data(format!(
            "grid raster {}x{} does not match camera raster {}x{}",
            grid.width(),
            grid.height(),
            cam.width,
            cam.height
        )));
    }
    let pose_file: PoseFile = parse_json(&read_bytes(pose_path)?, pose_path)?;
    let pose: Pose = pose_file.to_pose().map_err(data_err)?;

    let ds: DisparitySet = match mode {
        SampleModeArg::BinEdges => {
            let slices = grid.num_slices();
            if n_planes > slices {
                return Err(Failure::Data(format!(
                    "--n-planes {n_planes} exceeds the grid's {slices} slices; \
                     bin edges below the last slice have no planes to sample"
                )));
            }
            if n_planes == slices {
                // Exact slice hits reproduce the plain plane-stack path.
                DisparitySet::new(grid.slice_disparities().to_vec()).map_err(data_err)?
            } else {
                let range = bin_edge_range(checkpoint, &grid)?;
                bin_edge_disparities(n_planes, &range).map_err(data_err)?
            }
        }
        SampleModeArg::Stratified => {
            let (d_min, d_max) = grid.disparity_span();
            let mut rng = ChaCha8Rng::seed_from_u64(seed.unwrap_or(0));
            sample_disparities_between(n_planes, d_max, d_min, &mut rng).map_err(data_err)?
        }
    };

    let (out, trace) = render_novel(&grid, &cam, &pose, &ds, pad.into()).map_err(data_err)?;
    let depth_map = match depth {
        DepthArg::Raw => out.depth,
        DepthArg::Normalized => render_depth_normalized(&trace, &ds),
    };

    std::fs::create_dir_all(out_dir)
        .map_err(|e| Failure::Data(format!("{}: {e}", out_dir.display())))?;
    write_ppm(&out_dir.join("rgb.ppm"), &out.rgb).map_err(data_err)?;
    write_pfm(&out_dir.join("depth.pfm"), &depth_map).map_err(data_err)?;
    write_pfm(&out_dir.join("weightsum.pfm"), &out.weight_sum).map_err(data_err)?;

    let passes = count_forward_passes(&ForwardPassModel::PlaneStack { n_planes: n_planes as u64 });
    println!("{n_planes} planes, {passes} decoder-equivalent forward passes");
    for name in ["rgb.ppm", "depth.pfm", "weightsum.pfm"] {
        print_wrote(out_dir, name)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct ViewMetrics {
    name: String,
    psnr: f64,
    ssim: f64,
}

#[derive(Serialize)]
struct Metrics {
    crop_frac: f64,
    views: Vec<ViewMetrics>,
    mean_psnr: f64,
    mean_ssim: f64,
}

fn list_ppms(dir: &Path) -> Result<BTreeSet<String>, Failure> {
    let entries =
        std::fs::read_dir(dir).map_err(|e| Failure::Data(format!("{}: {e}", dir.display())))?;
    let mut names = BTreeSet::new();
    for entry in entries {
        let entry = entry.map_err(|e| Failure::Data(format!("{}: {e}", dir.display())))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.ends_with(".ppm") {
            names.insert(name);
        }
    }
    Ok(names)
}

/// Same side crop the PSNR metric applies, for the SSIM pass.
fn crop_map(img: &ColorMap, crop_frac: f64) -> ColorMap {
    let cx = (crop_frac * img.width() as f64).round() as usize;
    let cy = (crop_frac * img.height() as f64).round() as usize;
    let (w, h) = (img.width() - 2 * cx, img.height() - 2 * cy);
    let mut out = ColorMap::black(w, h);
    for (x, y) in out.coords().collect::<Vec<_>>() {
        out.set(x, y, img.at(x + cx, y + cy));
    }
    out
}

fn cmd_eval(
    pred_dir: &Path,
    gt_dir: &Path,
    crop_frac: f64,
    out: Option<&Path>,
) -> Result<(), Failure> {
    if !(0.0..0.5).contains(&crop_frac) {
        return Err(Failure::Usage(format!(
            "--crop-frac {crop_frac} outside [0, 0.5)"
        )));
    }
    let preds = list_ppms(pred_dir)?;
    let gts = list_ppms(gt_dir)?;
    if preds != gts {
        let only_pred: Vec<_> = preds.difference(&gts).cloned().collect();
        let only_gt: Vec<_> = gts.difference(&preds).cloned().collect();
        return Err(Failure::Data(format!(
            "directories hold different views; only in {}: [{}], only in {}: [{}]",
            pred_dir.display(),
            only_pred.join(", "),
            gt_dir.display(),
            only_gt.join(", ")
        )));
    }
    if preds.is_empty() {
        return Err(Failure::Data(format!(
            "no .ppm files in {}",
            pred_dir.display()
        )));
    }

    let mut views = Vec::new();
    for name in &preds {
        let pred = read_ppm(&pred_dir.join(name))
            .map_err(|e| Failure::Data(format!("{}: {e}", pred_dir.join(name).display())))?;
        let gt = read_ppm(&gt_dir.join(name))
            .map_err(|e| Failure::Data(format!("{}: {e}", gt_dir.join(name).display())))?;
        let p = psnr(&pred, &gt, crop_frac).map_err(|e| Failure::Data(format!("{name}: {e}")))?;
        let s = ssim(&crop_map(&pred, crop_frac), &crop_map(&gt, crop_frac))
            .map_err(|e| Failure::Data(format!("{name}: {e}")))?
            .mean;
        println!("{name}: psnr {p:.4} dB, ssim {s:.6}");
        views.push(ViewMetrics { name: name.clone(), psnr: p, ssim: s });
    }
    let n = views.len() as f64;
    let metrics = Metrics {
        crop_frac,
        mean_psnr: views.iter().map(|v| v.psnr).sum::<f64>() / n,
        mean_ssim: views.iter().map(|v| v.ssim).sum::<f64>() / n,
        views,
    };
    println!(
        "mean over {} views: psnr {:.4} dB, ssim {:.6}",
        metrics.views.len(),
        metrics.mean_psnr,
        metrics.mean_ssim
    );
    let out_path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| pred_dir.join("metrics.json"));
    write_json_file(&out_path, &metrics)?;
    println!("wrote {}", out_path.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_gradcheck(
    size: usize,
    n_planes: usize,
    slices: usize,
    step: f64,
    threshold: f64,
    max_params: usize,
    corrupt: bool,
    out: Option<&Path>,
    seed: Option<u64>,
) -> Result<(), Failure> {
    if size == 0 || n_planes == 0 || slices < 2 {
        return Err(Failure::Usage(
            "--size and --n-planes must be at least 1, --slices at least 2".into(),
        ));
    }
    let config = GradcheckConfig {
        seed: seed.unwrap_or(0),
        n_planes,
        grid_slices: slices,
        width: size,
        height: size,
        step,
        threshold,
        max_params,
        corrupt,
        ..GradcheckConfig::default()
    };
    let report = gradcheck(&config).map_err(data_err)?;
    println!(
        "checked {} parameters, skipped {} near the density kink",
        report.checked, report.skipped_kink
    );
    println!(
        "max abs err {:.3e}, max rel err {:.3e} (worst at parameter {})",
        report.max_abs_err, report.max_rel_err, report.worst_param
    );
    if let Some(path) = out {
        write_json_file(path, &report)?;
        println!("wrote {}", path.display());
    }
    if report.pass {
        println!("gradcheck: PASS (threshold {threshold:e})");
        Ok(())
    } else {
        println!("gradcheck: FAIL (threshold {threshold:e})");
        Err(Failure::Numeric(format!(
            "analytic and finite-difference gradients disagree: max rel err {:.3e} at parameter {}",
            report.max_rel_err, report.worst_param
        )))
    }
}
