//! Command-line front end for the mapping pipeline: dataset synthesis,
//! training, mesh/slice extraction, dynamic-point segmentation, and
//! reconstruction evaluation.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/processing error.

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use tsdf4d_core::evaluation::{recon_metrics, sample_mesh_surface, seg_metrics};
use tsdf4d_core::mesher::{export_slice, extract_mesh, MeshMode, SliceAxis};
use tsdf4d_core::ply::{read_ply, write_ply, PlyEncoding};
use tsdf4d_core::training::write_loss_csv;
use tsdf4d_core::{checkpoint, io, synth, training, MapConfig, PointClass, TriangleMesh};

#[derive(Parser)]
#[command(
    name = "tsdf4d",
    version,
    about = "4D neural TSDF mapping from posed range scans"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Override the RNG seed used by the subcommand.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Bit-reproducible mode: single-threaded with ordered reductions.
    /// (Parallel runs are also reproducible on a fixed machine; this
    /// removes the thread pool from the picture entirely.)
    #[arg(long, global = true)]
    deterministic: bool,

    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (scans, poses, labels, ground truth).
    Synth(SynthArgs),
    /// Train a map from scans and poses; writes checkpoint and loss log.
    Train(TrainArgs),
    /// Extract a triangle mesh from a trained checkpoint.
    Mesh(MeshArgs),
    /// Export a 2D grid of clamped field values on an axis-aligned plane.
    Slice(SliceArgs),
    /// Classify scan points as static or dynamic; writes label files.
    Segment(SegmentArgs),
    /// Compare a mesh against a ground-truth cloud.
    Eval(EvalArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Scene description (TOML); built-in default scene when omitted.
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory of KITTI-format .bin scans.
    #[arg(long)]
    scans: PathBuf,
    /// KITTI pose file (12 values per line).
    #[arg(long)]
    poses: PathBuf,
    /// Config file (key = value lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config overrides, repeatable: --set key=value.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Loss log CSV path.
    #[arg(long)]
    loss_log: Option<PathBuf>,
}

#[derive(Args)]
struct MeshArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Mesh the static channel (default).
    #[arg(long, conflicts_with = "at_frame")]
    r#static: bool,
    /// Mesh the field at one frame instead of the static channel.
    #[arg(long)]
    at_frame: Option<usize>,
    /// Marching-cubes lattice spacing, meters (default: finest voxel / 2).
    #[arg(long)]
    cell_size: Option<f64>,
    /// Write ascii PLY instead of binary little-endian.
    #[arg(long)]
    ascii: bool,
}

#[derive(Args)]
struct SliceArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Slice plane normal axis: x, y, or z.
    #[arg(long)]
    axis: String,
    /// Plane coordinate along the axis, meters.
    #[arg(long)]
    coord: f64,
    /// Slice the field at one frame instead of the static channel.
    #[arg(long)]
    at_frame: Option<usize>,
    /// Display clamp for the values, meters.
    #[arg(long, default_value_t = 0.3)]
    clamp: f64,
    /// Grid spacing, meters (default: finest voxel / 2).
    #[arg(long)]
    cell_size: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SegmentArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    scans: PathBuf,
    #[arg(long)]
    poses: PathBuf,
    /// Output directory for per-scan .label files.
    #[arg(long)]
    out: PathBuf,
    /// Ground-truth label directory; enables the accuracy report.
    #[arg(long)]
    gt_labels: Option<PathBuf>,
    /// Static/dynamic threshold, meters (default: from the checkpoint).
    #[arg(long)]
    d_static: Option<f64>,
    /// Write the report here as well as to stdout.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Predicted mesh (PLY).
    #[arg(long)]
    mesh: PathBuf,
    /// Ground-truth point cloud (PLY).
    #[arg(long)]
    gt_cloud: PathBuf,
    /// F-score threshold in centimeters.
    #[arg(long, default_value_t = 1.0)]
    threshold_cm: f64,
    /// Mesh surface sampling density, points per square meter.
    #[arg(long, default_value_t = 10_000.0)]
    density: f64,
    /// Write the report here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

enum CliError {
    Usage(String),
    Data(String),
}

impl From<tsdf4d_core::Error> for CliError {
    fn from(e: tsdf4d_core::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests are success, everything else is usage
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let threads = if cli.deterministic {
        Some(1)
    } else {
        cli.threads
    };
    if let Some(n) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: could not configure {n} worker threads: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(args) => cmd_synth(args, cli.seed),
        Command::Train(args) => cmd_train(args, cli.seed),
        Command::Mesh(args) => cmd_mesh(args),
        Command::Slice(args) => cmd_slice(args),
        Command::Segment(args) => cmd_segment(args),
        Command::Eval(args) => cmd_eval(args, cli.seed),
    }
}

fn cmd_synth(args: SynthArgs, seed: Option<u64>) -> Result<(), CliError> {
    let mut spec = match &args.scene {
        Some(path) => synth::load_scene(path)?,
        None => synth::default_scene(),
    };
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    let (seq, gt) = synth::simulate(&spec)?;
    synth::write_dataset(&spec, &seq, &gt, &args.out)?;
    println!(
        "wrote {} scans ({} points) to {}",
        seq.frame_count(),
        seq.total_points(),
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs, seed: Option<u64>) -> Result<(), CliError> {
    let mut cfg = MapConfig::load(args.config.as_deref(), &args.overrides)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let seq = io::load_dataset(&args.scans, &args.poses)?;
    eprintln!(
        "training on {} scans, {} points ({} steps, batch {})",
        seq.frame_count(),
        seq.total_points(),
        cfg.train_steps,
        cfg.batch_size
    );
    let outcome = training::train(&seq, &cfg)?;
    if outcome.skipped_rays > 0 {
        eprintln!(
            "note: skipped {} rays shorter than the truncation distance",
            outcome.skipped_rays
        );
    }
    checkpoint::save(&outcome.model, &args.out)?;
    if let Some(log) = &args.loss_log {
        write_loss_csv(log, &outcome.losses)?;
    }
    let last = outcome.losses.last().expect("train_steps is nonzero");
    println!(
        "checkpoint written to {} (final loss {:.6})",
        args.out.display(),
        last.breakdown.total
    );
    Ok(())
}

fn mesh_mode(at_frame: Option<usize>) -> MeshMode {
    match at_frame {
        Some(t) => MeshMode::AtFrame(t),
        None => MeshMode::Static,
    }
}

fn cmd_mesh(args: MeshArgs) -> Result<(), CliError> {
    let model = checkpoint::load(&args.checkpoint)?;
    let cell = args.cell_size.unwrap_or(model.cfg.finest_voxel_size / 2.0);
    if cell <= 0.0 {
        return Err(CliError::Usage("--cell-size must be positive".into()));
    }
    let mesh = extract_mesh(&model, mesh_mode(args.at_frame), cell)?;
    let encoding = if args.ascii {
        PlyEncoding::Ascii
    } else {
        PlyEncoding::BinaryLe
    };
    write_ply(&args.out, &mesh.vertices, &mesh.triangles, encoding)?;
    println!(
        "wrote {} triangles ({} vertices) to {}",
        mesh.triangles.len(),
        mesh.vertices.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_slice(args: SliceArgs) -> Result<(), CliError> {
    let model = checkpoint::load(&args.checkpoint)?;
    let axis: SliceAxis = args
        .axis
        .parse()
        .map_err(|e: tsdf4d_core::Error| CliError::Usage(e.to_string()))?;
    let cell = args.cell_size.unwrap_or(model.cfg.finest_voxel_size / 2.0);
    if cell <= 0.0 || args.clamp <= 0.0 {
        return Err(CliError::Usage(
            "--cell-size and --clamp must be positive".into(),
        ));
    }
    export_slice(
        &model,
        axis,
        args.coord,
        mesh_mode(args.at_frame),
        cell,
        args.clamp,
        &args.out,
    )?;
    println!("wrote slice to {}", args.out.display());
    Ok(())
}

fn cmd_segment(args: SegmentArgs) -> Result<(), CliError> {
    use rayon::prelude::*;
    let model = checkpoint::load(&args.checkpoint)?;
    let d_static = args.d_static.unwrap_or(model.cfg.d_static);
    let seq = io::load_dataset(&args.scans, &args.poses)?;
    std::fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Data(format!("{}: {e}", args.out.display())))?;

    let mut predicted: Vec<PointClass> = Vec::with_capacity(seq.total_points());
    for scan in &seq.scans {
        let chunks: Vec<Vec<PointClass>> = scan
            .points_world
            .par_chunks(8192)
            .map(|chunk| {
                let mut scratch = tsdf4d_core::QueryScratch::for_model(&model);
                chunk
                    .iter()
                    .map(|&p| {
                        if model.forward_static(p, &mut scratch) > d_static {
                            PointClass::Dynamic
                        } else {
                            PointClass::Static
                        }
                    })
                    .collect()
            })
            .collect();
        let labels: Vec<PointClass> = chunks.into_iter().flatten().collect();
        io::write_labels(&args.out.join(format!("{:06}.label", scan.frame)), &labels)?;
        predicted.extend_from_slice(&labels);
    }
    println!(
        "labeled {} points over {} scans (d_static = {d_static} m)",
        predicted.len(),
        seq.frame_count()
    );

    if let Some(gt_dir) = &args.gt_labels {
        let mut gt: Vec<PointClass> = Vec::with_capacity(predicted.len());
        for scan in &seq.scans {
            let path = gt_dir.join(format!("{:06}.label", scan.frame));
            let labels = io::read_labels(&path)?;
            if labels.len() != scan.points_world.len() {
                return Err(CliError::Data(format!(
                    "{}: {} labels for {} points",
                    path.display(),
                    labels.len(),
                    scan.points_world.len()
                )));
            }
            gt.extend_from_slice(&labels);
        }
        let report = seg_metrics(&predicted, &gt)?;
        print!("{report}");
        print!("{}", report.to_kv());
        if let Some(path) = &args.report {
            io::write_atomic(path, format!("{report}{}", report.to_kv()).as_bytes())?;
        }
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs, seed: Option<u64>) -> Result<(), CliError> {
    let (vertices, triangles) = read_ply(&args.mesh)?;
    if triangles.is_empty() {
        return Err(CliError::Data(format!(
            "{}: mesh has no triangles to sample",
            args.mesh.display()
        )));
    }
    let mesh = TriangleMesh {
        vertices,
        triangles,
    };
    let (gt_cloud, _) = read_ply(&args.gt_cloud)?;
    let pred = sample_mesh_surface(&mesh, args.density, seed.unwrap_or(42));
    if pred.is_empty() {
        return Err(CliError::Data(
            "mesh sampling produced no points (density too low?)".into(),
        ));
    }
    let mut report = recon_metrics(&pred, &gt_cloud, args.threshold_cm)?;
    report.sample_density = Some(args.density);
    print!("{report}");
    print!("{}", report.to_kv());
    if let Some(path) = &args.out {
        io::write_atomic(path, format!("{report}{}", report.to_kv()).as_bytes())?;
    }
    Ok(())
}
