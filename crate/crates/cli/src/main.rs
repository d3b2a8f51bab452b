mod manifest;

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use evsdf::fields::checkpoint::Checkpoint;
use evsdf::imaging::{Mask, RgbImage};
use evsdf::meshing::{export_mesh, extract_mesh, import_mesh, Bounds, MeshFormat};
use evsdf::metrics::{chamfer, masked_psnr, sdf_mae, EvalReport, DEFAULT_POINTS};
use evsdf::renderer::{render_image, PoseFile, RenderConfig};
use evsdf::scenegen::{build_dataset, load_dataset, sphere_trace_render, write_dataset, SceneConfig, DATASET_FILES};
use evsdf::training::{StepStats, TrainConfig, TrainData, Trainer, LOG_HEADER};

use manifest::{hash_files, DirLock, RunManifest};

const CHECKPOINT_FILE: &str = "checkpoint.json";
const LOG_FILE: &str = "train.log";
const CONFIG_SNAPSHOT: &str = "config.toml";

#[derive(Parser)]
#[command(name = "evsdf", version, about = "Surface reconstruction from colour event streams")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render an analytic scene along a spiral and simulate its events.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        force: bool,
    },
    /// Fit the SDF and radiance networks to a dataset.
    Train {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        iterations: Option<u64>,
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        force: bool,
    },
    /// Extract a triangle mesh from a checkpoint.
    Mesh {
        /// Checkpoint file or training directory.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 128)]
        resolution: usize,
        #[arg(long)]
        colour: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Compare a mesh (and optionally a render) against references.
    Eval {
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        render: Option<PathBuf>,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long, default_value = "scene")]
        scene: String,
        #[arg(long, default_value_t = DEFAULT_POINTS)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render one dataset pose from a checkpoint or the analytic scene.
    Render {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        pose: usize,
        /// Poses to index instead of the dataset's own.
        #[arg(long)]
        pose_file: Option<PathBuf>,
        /// Sphere-trace the dataset's analytic scene instead.
        #[arg(long)]
        ground_truth: bool,
        #[arg(long)]
        mask_out: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
}

/// Message plus process exit code: 1 for runtime failures, 2 for bad input.
#[derive(Debug)]
pub struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    pub fn input(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<evsdf::Error> for Failure {
    fn from(e: evsdf::Error) -> Self {
        use evsdf::Error as E;
        match e {
            E::InvalidInput(_) | E::ShapeMismatch { .. } | E::Parse { .. } | E::Schema { .. } => Failure::input(e.to_string()),
            E::Io { .. } | E::NonFinite { .. } | E::Other(_) => Failure::runtime(e.to_string()),
        }
    }
}

/// Anything that goes wrong while reading user-supplied files is bad input.
fn input<T>(r: evsdf::Result<T>) -> Result<T, Failure> {
    r.map_err(|e| Failure::input(e.to_string()))
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate { config, out, seed, force } => simulate(config, &out, seed, force),
        Command::Train {
            dataset,
            config,
            out,
            seed,
            iterations,
            resume,
            force,
        } => train(dataset, config, out, seed, iterations, resume, force),
        Command::Mesh {
            checkpoint,
            resolution,
            colour,
            out,
            force,
        } => mesh(&checkpoint, resolution, colour, &out, force),
        Command::Eval {
            mesh,
            gt,
            render,
            reference,
            mask,
            scene,
            points,
            seed,
            out,
        } => eval(&mesh, &gt, render, reference, mask, scene, points, seed, out),
        Command::Render {
            checkpoint,
            dataset,
            pose,
            pose_file,
            ground_truth,
            mask_out,
            out,
            force,
        } => render(checkpoint, &dataset, pose, pose_file, ground_truth, mask_out, &out, force),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}

fn simulate(config: Option<PathBuf>, out: &Path, seed: Option<u64>, force: bool) -> Result<(), Failure> {
    let mut cfg = match &config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
            SceneConfig::from_toml(&text).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?
        }
        None => SceneConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let mut manifest = RunManifest::new("simulate", cfg.seed, serde_json::to_value(&cfg).expect("config serialises"));
    if !force {
        if let Some(old) = RunManifest::load(out) {
            if old.hash == manifest.hash && DATASET_FILES.iter().all(|f| out.join(f).is_file()) {
                println!("{} is up to date (use --force to rebuild)", out.display());
                return Ok(());
            }
            return Err(Failure::input(format!(
                "{} holds a different dataset; use --force to overwrite",
                out.display()
            )));
        }
    }
    let _lock = DirLock::acquire(out)?;
    manifest.save(out)?;
    let scene = cfg.scene()?;
    let trajectory = cfg.trajectory()?;
    let data = build_dataset(&scene, &trajectory, &cfg.simulator(), cfg.gt_resolution)?;
    write_dataset(out, &data, &cfg)?;
    manifest.dataset_hash = Some(hash_files(out, &DATASET_FILES)?);
    manifest.finish();
    manifest.save(out)?;
    println!(
        "wrote {} events over {:.3} s to {}",
        data.stream.len(),
        data.stream.duration(),
        out.display()
    );
    Ok(())
}

/// Keeps the header and every line logged before `iteration`.
fn truncate_log(path: &Path, iteration: u64) -> Result<(), Failure> {
    let text = fs::read_to_string(path).unwrap_or_default();
    let mut kept = format!("{LOG_HEADER}\n");
    for line in text.lines() {
        if let Some(s) = StepStats::parse_log_line(line) {
            if s.iteration < iteration {
                kept.push_str(line);
                kept.push('\n');
            }
        }
    }
    write_file(path, &kept)
}

fn save_checkpoint(trainer: &Trainer, run: &Path) -> Result<(), Failure> {
    let tmp = run.join(format!("{CHECKPOINT_FILE}.tmp"));
    trainer.to_checkpoint().save(&tmp)?;
    let dst = run.join(CHECKPOINT_FILE);
    fs::rename(&tmp, &dst).map_err(|e| Failure::runtime(format!("{}: {e}", dst.display())))
}

#[allow(clippy::too_many_arguments)]
fn train(
    dataset: Option<PathBuf>,
    config: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: Option<u64>,
    iterations: Option<u64>,
    resume: bool,
    force: bool,
) -> Result<(), Failure> {
    let mut cfg = match &config {
        Some(path) => {
            if !path.is_file() {
                return Err(Failure::input(format!("{}: config file not found", path.display())));
            }
            TrainConfig::load(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?
        }
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(n) = iterations {
        cfg.iterations = n;
    }
    let dataset = dataset
        .or_else(|| cfg.dataset.clone().map(PathBuf::from))
        .ok_or_else(|| Failure::input("no dataset given (--dataset or `dataset` in the config)"))?;
    let run = out
        .or_else(|| cfg.out.clone().map(PathBuf::from))
        .ok_or_else(|| Failure::input("no output directory given (--out or `out` in the config)"))?;
    cfg.validate()?;

    let ck_path = run.join(CHECKPOINT_FILE);
    let log_path = run.join(LOG_FILE);
    let mut trainer = if resume && ck_path.is_file() {
        let ck = input(Checkpoint::load(&ck_path))?;
        let t = Trainer::from_checkpoint(ck, Some(cfg.iterations))?;
        println!("resuming {} from iteration {}", run.display(), t.iteration);
        t
    } else {
        if ck_path.is_file() && !force {
            let ck = input(Checkpoint::load(&ck_path))?;
            if ck.iteration >= cfg.iterations {
                println!("{} already holds iteration {} (use --force to retrain)", run.display(), ck.iteration);
                return Ok(());
            }
            return Err(Failure::input(format!(
                "{} holds a partial run at iteration {}; use --resume or --force",
                run.display(),
                ck.iteration
            )));
        }
        Trainer::new(cfg.clone())?
    };

    let data = input(load_dataset(&dataset))?;
    let dataset_hash = hash_files(&dataset, &DATASET_FILES)?;
    let _lock = DirLock::acquire(&run)?;
    let mut manifest = RunManifest::new("train", trainer.config.seed, serde_json::to_value(&trainer.config).expect("config serialises"));
    manifest.dataset_hash = Some(dataset_hash);
    manifest.save(&run)?;
    write_file(&run.join(CONFIG_SNAPSHOT), &trainer.config.to_toml())?;
    truncate_log(&log_path, trainer.iteration)?;

    let mut log = fs::OpenOptions::new()
        .append(true)
        .open(&log_path)
        .map_err(|e| Failure::runtime(format!("{}: {e}", log_path.display())))?;
    let train_data = TrainData::new(data.stream, data.poses)?;
    let until = trainer.config.iterations;
    let interval = trainer.config.log_interval;
    let ck_interval = trainer.config.checkpoint_interval;
    let mut failure = None;
    let outcome = trainer.run(&train_data, until, |t, stats| {
        if t.iteration % interval == 0 {
            let line = stats.log_line();
            println!("{line}");
            if let Err(e) = writeln!(log, "{line}") {
                failure = Some(Failure::runtime(format!("{}: {e}", log_path.display())));
            }
        }
        if t.iteration % ck_interval == 0 && t.iteration < until {
            if let Err(f) = save_checkpoint(t, &run) {
                failure = Some(f);
            }
        }
        Ok(())
    });
    if let Some(f) = failure {
        return Err(f);
    }
    if let Err(e) = outcome {
        // keep the last good state for inspection
        save_checkpoint(&trainer, &run)?;
        return Err(e.into());
    }
    save_checkpoint(&trainer, &run)?;
    manifest.finish();
    manifest.save(&run)?;
    println!("trained to iteration {} in {}", trainer.iteration, run.display());
    Ok(())
}

fn checkpoint_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(CHECKPOINT_FILE)
    } else {
        path.to_path_buf()
    }
}

fn load_trainer(path: &Path) -> Result<Trainer, Failure> {
    let ck = input(Checkpoint::load(checkpoint_path(path)))?;
    Ok(Trainer::from_checkpoint(ck, None)?)
}

fn refuse_overwrite(out: &Path, force: bool) -> bool {
    if out.exists() && !force {
        println!("{} exists (use --force to overwrite)", out.display());
        return true;
    }
    false
}

fn mesh(checkpoint: &Path, resolution: usize, colour: bool, out: &Path, force: bool) -> Result<(), Failure> {
    let format = input(MeshFormat::from_path(out))?;
    if resolution < 2 {
        return Err(Failure::input("--resolution must be at least 2"));
    }
    let trainer = load_trainer(checkpoint)?;
    if refuse_overwrite(out, force) {
        return Ok(());
    }
    let radius = trainer.config.sampling().bound_radius;
    let mesh = extract_mesh(
        &trainer.params,
        &trainer.anneal_coeffs(),
        resolution,
        Bounds::cube(radius),
        Some(radius),
        colour,
    )?;
    if mesh.is_empty() {
        println!("no surface found; nothing written");
        return Ok(());
    }
    export_mesh(&mesh, out, format)?;
    println!(
        "wrote {} vertices, {} triangles to {}",
        mesh.vertices.len(),
        mesh.triangles.len(),
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn eval(
    mesh: &Path,
    gt: &Path,
    render: Option<PathBuf>,
    reference: Option<PathBuf>,
    mask: Option<PathBuf>,
    scene: String,
    points: usize,
    seed: u64,
    out: Option<PathBuf>,
) -> Result<(), Failure> {
    let pred = input(import_mesh(mesh))?;
    let gt_mesh = input(import_mesh(gt))?;
    if pred.is_empty() || gt_mesh.is_empty() {
        return Err(Failure::input("both meshes must hold triangles"));
    }
    let psnr = match (render, reference) {
        (Some(r), Some(reference)) => {
            let rendered = input(RgbImage::load_png(&r))?;
            let reference_img = input(RgbImage::load_png(&reference))?;
            let mask = match mask {
                Some(m) => input(Mask::load_png(&m))?,
                None => Mask {
                    width: reference_img.width,
                    height: reference_img.height,
                    values: vec![true; reference_img.pixels.len()],
                },
            };
            Some(input(masked_psnr(&rendered, &reference_img, &mask))?)
        }
        (None, None) => None,
        _ => return Err(Failure::input("--render and --reference go together")),
    };
    let report = EvalReport {
        scene,
        chamfer: chamfer(&gt_mesh, &pred, points, seed)?,
        sdf_mae: sdf_mae(&gt_mesh, &pred, points, seed)?,
        psnr,
    };
    let text = report.key_values();
    print!("{text}");
    if let Some(path) = out {
        write_file(&path, &text)?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn render(
    checkpoint: Option<PathBuf>,
    dataset: &Path,
    pose: usize,
    pose_file: Option<PathBuf>,
    ground_truth: bool,
    mask_out: Option<PathBuf>,
    out: &Path,
    force: bool,
) -> Result<(), Failure> {
    let data = input(load_dataset(dataset))?;
    let cams = match pose_file {
        Some(p) => input(input(PoseFile::load(&p))?.cameras(data.intrinsics))?,
        None => data.poses.cameras().to_vec(),
    };
    let cam = cams
        .get(pose)
        .ok_or_else(|| Failure::input(format!("pose {pose} out of range (have {})", cams.len())))?;
    if refuse_overwrite(out, force) {
        return Ok(());
    }
    let scene = data.config.scene()?;
    let image = if ground_truth {
        sphere_trace_render(&scene, cam)
    } else {
        let path = checkpoint.ok_or_else(|| Failure::input("--checkpoint is required unless --ground-truth is set"))?;
        let trainer = load_trainer(&path)?;
        let cfg = RenderConfig {
            sampling: trainer.config.sampling(),
            background: [trainer.config.background; 3],
            ..RenderConfig::default()
        };
        render_image(cam, &trainer.params, &trainer.anneal_coeffs(), &cfg, trainer.config.seed)?
    };
    image.save_png(out)?;
    if let Some(m) = mask_out {
        let reference = sphere_trace_render(&scene, cam);
        Mask::from_foreground(&reference, scene.background, 1e-9).save_png(&m)?;
    }
    println!("wrote {}", out.display());
    Ok(())
}
