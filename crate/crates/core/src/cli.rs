//! The `headfit` command line.
//!
//! Every subcommand accepts `--config FILE` with a JSON object of the same
//! settings (snake_case keys); flags given on the command line win. Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 2 | invalid flags, config or input dimensions |
//! | 3 | I/O, file format or render failure |
//! | 4 | fit did not converge (outputs are still written) |
//! | 5 | evaluation alignment failed |

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate, AnchorPairs, EvalConfig};
use crate::fit::{fit, FitWeights, SolverConfig, ViewObservation};
use crate::geometry::{CameraPose, Intrinsics};
use crate::mesh_io::{load_mesh, save_mesh};
use crate::model::{generate_procedural_model, load_model, save_model, ModelConfig, MorphableModel, ShapeParams};
use crate::raster::{
    load_landmarks, load_normal_map, normal_map_to_rgb, read_bytes, render_views, save_landmarks, save_normal_map,
    write_bytes,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NOT_CONVERGED: i32 = 4;
pub const EXIT_ALIGNMENT: i32 = 5;

#[derive(Debug, Parser)]
#[command(name = "headfit", version, about = "Fit a morphable head model to normal and landmark maps")]
pub struct Cli {
    /// Worker threads; outputs do not depend on it.
    #[arg(long, global = true, env = "HEADFIT_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a procedural morphable model.
    GenModel(GenModelArgs),
    /// Render normal and landmark maps of a synthetic subject.
    Synth(SynthArgs),
    /// Fit the model to one or more views.
    Fit(FitArgs),
    /// Score a reconstruction against a reference mesh.
    Eval(EvalArgs),
    /// Write a model instance as a mesh, or a normal map as PNG.
    Export(ExportArgs),
}

#[derive(Debug, Args)]
pub struct GenModelArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Icosphere subdivision level (>= 2).
    #[arg(long)]
    subdiv: Option<u32>,
    /// Number of shape components.
    #[arg(long)]
    components: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenModelFile {
    subdiv: Option<u32>,
    components: Option<usize>,
    seed: Option<u64>,
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Draw the shape with this seed.
    #[arg(long, conflicts_with = "y_file")]
    y_seed: Option<u64>,
    /// Read the shape from JSON: an array, or an object with a `y` array.
    #[arg(long)]
    y_file: Option<PathBuf>,
    /// Per-component standard deviation of a seeded shape, in units of σ_k.
    #[arg(long)]
    y_scale: Option<f64>,
    /// "roll,pitch,yaw,x,y,z": angles in degrees, then the camera-frame
    /// position of the model origin in mm.
    #[arg(long, allow_hyphen_values = true)]
    pose: Option<String>,
    /// Focal length in pixels; defaults to 1.2 × the larger image side.
    #[arg(long)]
    focal: Option<f64>,
    /// Image size as WxH.
    #[arg(long)]
    size: Option<String>,
    #[arg(long)]
    out_prefix: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SynthFile {
    model: Option<PathBuf>,
    y_seed: Option<u64>,
    y_file: Option<PathBuf>,
    y_scale: Option<f64>,
    pose: Option<String>,
    focal: Option<f64>,
    size: Option<String>,
    out_prefix: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    /// "map.nmap,landmarks.lmk.json"; repeat for more views.
    #[arg(long = "view")]
    views: Vec<String>,
    /// "λN,λZ,λP".
    #[arg(long)]
    weights: Option<String>,
    /// Fitted mesh, `.obj` or `.ply`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Fit result JSON; defaults to the mesh path with a `.fit.json` suffix.
    #[arg(long)]
    result: Option<PathBuf>,
    #[arg(long)]
    max_iters: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FitFile {
    model: Option<PathBuf>,
    views: Option<Vec<String>>,
    weights: Option<String>,
    out: Option<PathBuf>,
    result: Option<PathBuf>,
    max_iters: Option<usize>,
    solver: Option<SolverConfig>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long)]
    recon: Option<PathBuf>,
    /// Anchor pairs JSON: `{"reference": [...], "recon": [...]}` or one index
    /// array shared by both meshes. Without it, ICP starts from identity.
    #[arg(long)]
    anchors: Option<PathBuf>,
    /// Report JSON; a text table is written next to it with `.txt`.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalFile {
    reference: Option<PathBuf>,
    recon: Option<PathBuf>,
    anchors: Option<PathBuf>,
    report: Option<PathBuf>,
    eval: Option<EvalConfig>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model to instantiate.
    #[arg(long, conflicts_with = "nmap")]
    model: Option<PathBuf>,
    /// Shape JSON (array, or object with `y`); the mean head when absent.
    #[arg(long)]
    y_file: Option<PathBuf>,
    /// Normal map to visualize.
    #[arg(long)]
    nmap: Option<PathBuf>,
    /// `.obj` / `.ply` for a mesh, `.png` for a normal map.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExportFile {
    model: Option<PathBuf>,
    y_file: Option<PathBuf>,
    nmap: Option<PathBuf>,
    out: Option<PathBuf>,
}

/// Ground truth written by `synth`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthParams {
    pub y: Vec<f64>,
    pub pose: CameraPose,
    pub intrinsics: Intrinsics,
    pub width: usize,
    pub height: usize,
}

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidConfig(_)
        | Error::DimensionMismatch { .. }
        | Error::InvalidPose(_)
        | Error::InvalidIntrinsics(_)
        | Error::DegenerateConfiguration(_)
        | Error::EmptyMesh => EXIT_INVALID,
        Error::Io { .. }
        | Error::CorruptModel(_)
        | Error::CorruptFile(_)
        | Error::Json(_)
        | Error::EmptyRender
        | Error::BehindCamera { .. } => EXIT_IO,
        Error::DegenerateNormals { .. }
        | Error::EmptyResidual(_)
        | Error::UnderConstrained { .. }
        | Error::PrealignFailed { .. }
        | Error::SolverFailure(_) => EXIT_NOT_CONVERGED,
        Error::AlignmentFailed(_) => EXIT_ALIGNMENT,
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the exit code. Errors go to stderr as one line.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("headfit: error: {e}");
            if code == EXIT_INVALID {
                eprintln!("For usage, try 'headfit --help'.");
            }
            code
        }
    }
}

fn execute(cli: Cli) -> Result<i32> {
    let command = cli.command;
    match cli.threads {
        Some(0) => Err(Error::InvalidConfig("--threads must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?
            .install(|| dispatch(command)),
        None => dispatch(command),
    }
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::GenModel(a) => cmd_gen_model(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Export(a) => cmd_export(a),
    }
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes)
        .map_err(|e| Error::InvalidConfig(format!("config {}: {e}", path.display())))
}

fn required<T>(value: Option<T>, flag: &str) -> Result<T> {
    value.ok_or_else(|| Error::InvalidConfig(format!("missing required --{flag}")))
}

fn parse_list(s: &str, expected: usize, what: &str) -> Result<Vec<f64>> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::InvalidConfig(format!("{what}: expected {expected} comma-separated numbers, got {s:?}")))?;
    if v.len() != expected || v.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "{what}: expected {expected} finite comma-separated numbers, got {s:?}"
        )));
    }
    Ok(v)
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::InvalidConfig(format!("--size: expected WxH, got {s:?}"));
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let w: usize = w.trim().parse().map_err(|_| bad())?;
    let h: usize = h.trim().parse().map_err(|_| bad())?;
    if w == 0 || h == 0 || w > 16384 || h > 16384 {
        return Err(bad());
    }
    Ok((w, h))
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ShapeFile {
    Plain(Vec<f64>),
    Object { y: Vec<f64> },
}

/// Shape vector from JSON: a bare array or any object with a `y` array
/// (shape, ground-truth and fit-result files all qualify).
pub fn read_shape(path: &Path, model: &MorphableModel) -> Result<ShapeParams> {
    let bytes = read_bytes(path)?;
    let y = match serde_json::from_slice::<ShapeFile>(&bytes) {
        Ok(ShapeFile::Plain(y) | ShapeFile::Object { y }) => y,
        Err(e) => {
            return Err(Error::CorruptFile(format!("{}: not a shape vector: {e}", path.display())));
        }
    };
    if y.len() != model.num_components() {
        return Err(Error::DimensionMismatch {
            what: "shape parameter count",
            expected: model.num_components(),
            actual: y.len(),
        });
    }
    ShapeParams::new(y)
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_bytes(path, s.as_bytes())
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn cmd_gen_model(a: GenModelArgs) -> Result<i32> {
    let file: GenModelFile = read_config(a.config.as_deref())?;
    let config = ModelConfig {
        n_subdiv: a.subdiv.or(file.subdiv).unwrap_or(3),
        n_components: a.components.or(file.components).unwrap_or(30),
        seed: a.seed.or(file.seed).unwrap_or(0),
    };
    let out = required(a.out.or(file.out), "out")?;
    let model = generate_procedural_model(config)?;
    save_model(&model, &out)?;
    let size = std::fs::metadata(&out).map_err(|e| Error::io(&out, e))?.len();
    println!(
        "model: N_X={} N_y={} faces={} landmarks={} anchors={} seed={} bytes={} -> {}",
        model.num_vertices(),
        model.num_components(),
        model.topology.faces.len(),
        model.landmark_indices.len(),
        model.eval_anchor_indices.len(),
        config.seed,
        size,
        out.display()
    );
    Ok(EXIT_OK)
}

fn cmd_synth(a: SynthArgs) -> Result<i32> {
    let file: SynthFile = read_config(a.config.as_deref())?;
    let model_path = required(a.model.or(file.model), "model")?;
    let prefix = required(a.out_prefix.or(file.out_prefix), "out-prefix")?;
    let y_seed = a.y_seed.or(file.y_seed);
    let y_file = a.y_file.or(file.y_file);
    let y_scale = a.y_scale.or(file.y_scale).unwrap_or(0.7);
    let (width, height) = parse_size(a.size.or(file.size).as_deref().unwrap_or("256x256"))?;
    let pose = parse_list(a.pose.or(file.pose).as_deref().unwrap_or("0,0,0,0,0,500"), 6, "--pose")?;
    if !(y_scale.is_finite() && y_scale >= 0.0) {
        return Err(Error::InvalidConfig("--y-scale must be finite and >= 0".into()));
    }
    let prior = Intrinsics::prior_for_image(width, height);
    let k = Intrinsics::new(a.focal.or(file.focal).unwrap_or(prior.f), prior.u0, prior.v0)?;
    let r = [pose[0], pose[1], pose[2]].map(f64::to_radians);
    let pose = CameraPose::looking_at(r, nalgebra::Vector3::new(pose[3], pose[4], pose[5]))?;

    let model = load_model(&model_path)?;
    let y = match (y_seed, y_file) {
        (Some(_), Some(_)) => {
            return Err(Error::InvalidConfig("--y-seed and --y-file are exclusive".into()));
        }
        (_, Some(path)) => read_shape(&path, &model)?,
        (seed, None) => model.sample_shape(seed.unwrap_or(0), y_scale),
    };
    let mesh = model.instantiate(&y)?;
    let (map, lmk) = render_views(&mesh, &model, &pose, &k, width, height)?;

    save_normal_map(&map, with_suffix(&prefix, ".nmap"))?;
    save_landmarks(&lmk, with_suffix(&prefix, ".lmk.json"))?;
    save_mesh(&mesh, with_suffix(&prefix, "_gt.obj"))?;
    write_json(
        &SynthParams {
            y: y.y,
            pose,
            intrinsics: k,
            width,
            height,
        },
        &with_suffix(&prefix, ".params.json"),
    )?;
    write_json(
        &AnchorPairs::shared(&model.eval_anchor_indices),
        &with_suffix(&prefix, ".anchors.json"),
    )?;
    println!(
        "synth: {}x{} coverage={} px ({:.1}%), landmarks visible={}/{} -> {}.*",
        width,
        height,
        map.coverage(),
        100.0 * map.coverage() as f64 / (width * height) as f64,
        lmk.visible_count(),
        lmk.detections.len(),
        prefix.display()
    );
    Ok(EXIT_OK)
}

fn cmd_fit(a: FitArgs) -> Result<i32> {
    let file: FitFile = read_config(a.config.as_deref())?;
    let model_path = required(a.model.or(file.model), "model")?;
    let out = required(a.out.or(file.out), "out")?;
    let result_path = a
        .result
        .or(file.result)
        .unwrap_or_else(|| out.with_extension("fit.json"));
    let views = if a.views.is_empty() {
        file.views.unwrap_or_default()
    } else {
        a.views
    };
    if views.is_empty() {
        return Err(Error::InvalidConfig("at least one --view is required".into()));
    }
    let weights = match a.weights.or(file.weights) {
        Some(s) => {
            let w = parse_list(&s, 3, "--weights")?;
            FitWeights::new(w[0], w[1], w[2])?
        }
        None => FitWeights::default(),
    };
    let mut solver = file.solver.unwrap_or_default();
    if let Some(n) = a.max_iters.or(file.max_iters) {
        solver.max_iterations = n;
    }
    solver.validate()?;
    let pairs: Vec<(PathBuf, PathBuf)> = views
        .iter()
        .map(|v| {
            v.split_once(',')
                .map(|(n, l)| (PathBuf::from(n.trim()), PathBuf::from(l.trim())))
                .ok_or_else(|| Error::InvalidConfig(format!("--view: expected NMAP,LMK, got {v:?}")))
        })
        .collect::<Result<_>>()?;

    let model = load_model(&model_path)?;
    let observations = pairs
        .iter()
        .map(|(n, l)| ViewObservation::new(load_normal_map(n)?, load_landmarks(l)?))
        .collect::<Result<Vec<_>>>()?;
    let result = fit(&model, &observations, weights, &solver)?;
    let mesh = model.instantiate(&result.shape())?;
    save_mesh(&mesh, &out)?;
    write_bytes(&result_path, result.to_json()?.as_bytes())?;
    println!(
        "fit: views={} iterations={} termination={:?} energy={:.6} (normals {:.6}, landmarks {:.6}, prior {:.6}) -> {}",
        observations.len(),
        result.iterations,
        result.termination,
        result.energy.total,
        result.energy.normals,
        result.energy.landmarks,
        result.energy.prior,
        out.display()
    );
    if result.converged {
        Ok(EXIT_OK)
    } else {
        eprintln!(
            "headfit: error: solver did not converge ({:?}); diagnostics in {}",
            result.termination,
            result_path.display()
        );
        Ok(EXIT_NOT_CONVERGED)
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum AnchorFile {
    Shared(Vec<usize>),
    Pairs(AnchorPairs),
}

fn cmd_eval(a: EvalArgs) -> Result<i32> {
    let file: EvalFile = read_config(a.config.as_deref())?;
    let reference = load_mesh(required(a.reference.or(file.reference), "reference")?)?;
    let recon = load_mesh(required(a.recon.or(file.recon), "recon")?)?;
    let anchors = match a.anchors.or(file.anchors) {
        Some(path) => {
            let bytes = read_bytes(&path)?;
            let parsed: AnchorFile = serde_json::from_slice(&bytes)
                .map_err(|e| Error::CorruptFile(format!("{}: not an anchor list: {e}", path.display())))?;
            Some(match parsed {
                AnchorFile::Shared(idx) => AnchorPairs::shared(&idx),
                AnchorFile::Pairs(p) => p,
            })
        }
        None => None,
    };
    let config = file.eval.unwrap_or_default();
    let report = evaluate(&reference, &recon, anchors.as_ref(), &config)?;
    let table = report.to_table();
    if let Some(path) = a.report.or(file.report) {
        write_bytes(&path, report.to_json()?.as_bytes())?;
        write_bytes(&path.with_extension("txt"), table.as_bytes())?;
    }
    print!("{table}");
    Ok(EXIT_OK)
}

fn cmd_export(a: ExportArgs) -> Result<i32> {
    let file: ExportFile = read_config(a.config.as_deref())?;
    let out = required(a.out.or(file.out), "out")?;
    match (a.model.or(file.model), a.nmap.or(file.nmap)) {
        (Some(model_path), None) => {
            let model = load_model(&model_path)?;
            let y = match a.y_file.or(file.y_file) {
                Some(p) => read_shape(&p, &model)?,
                None => ShapeParams::zeros(model.num_components()),
            };
            save_mesh(&model.instantiate(&y)?, &out)?;
        }
        (None, Some(nmap)) => {
            let is_png = out
                .extension()
                .is_some_and(|e| e.eq_ignore_ascii_case("png"));
            if !is_png {
                return Err(Error::InvalidConfig("normal maps export to .png only".into()));
            }
            let img = normal_map_to_rgb(&load_normal_map(&nmap)?);
            let mut bytes = Vec::new();
            img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
                .map_err(|e| Error::io(&out, std::io::Error::other(e)))?;
            write_bytes(&out, &bytes)?;
        }
        _ => {
            return Err(Error::InvalidConfig("export needs exactly one of --model or --nmap".into()));
        }
    }
    println!("export: -> {}", out.display());
    Ok(EXIT_OK)
}
