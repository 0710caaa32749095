//! The `cardioseg` command line: generate, train, segment, evaluate, render.
//!
//! Every parameter can come from a flag or from a `key = value` config file
//! (`--config`), flags taking precedence. Exit codes: 0 success, 2 bad
//! configuration, 3 I/O failure, 4 localization failure, 1 anything else.

pub mod config;
pub mod render;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::localizer::{BoundingBox3D, FusionParams, Localizer};
use crate::metrics::EvaluationReport;
use crate::neuralnet::{Model, NetworkSpec, NetworkWeights, Precision, TrainConfig};
use crate::phantom::{generate_dataset, read_manifest, Intensities, LabelMode, PhantomConfig};
use crate::segmenter::{ClassifyOptions, Connectivity, Pipeline, PostprocessParams};
use crate::training::{load_manifest_scans, train_localizer, train_segmenter};
use crate::volgrid::{read_label, read_volume, write_label, write_volume, Axis, ElementType, NormalizationWindow};
use config::{ConfigFile, Resolver, Triple};

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_LOCALIZATION: i32 = 4;

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_)
        | Error::Bounds(_)
        | Error::Shape(_)
        | Error::Grid(_)
        | Error::CountMismatch(_)
        | Error::Incompatible(_) => EXIT_CONFIG,
        Error::FileIo { .. } | Error::Io(_) | Error::Format(_) | Error::SizeMismatch { .. } => EXIT_IO,
        Error::LocalizationFailure { .. } => EXIT_LOCALIZATION,
        Error::Numeric { .. } | Error::UndefinedDistance(_) => EXIT_OTHER,
    }
}

#[derive(Parser, Debug)]
#[command(name = "cardioseg", version, about = "Two-stage CNN segmentation of the left ventricle")]
pub struct Cli {
    /// key = value configuration file with [section] headers.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a phantom dataset and its manifest.
    Generate(GenerateArgs),
    /// Train one of the four networks.
    Train(TrainArgs),
    /// Segment one image with trained networks.
    Segment(SegmentArgs),
    /// Score predicted masks against references.
    Evaluate(EvaluateArgs),
    /// Render slices to PNG/PGM/PPM, optionally with a mask contour.
    Render(RenderArgs),
}

#[derive(Args, Debug, Default)]
pub struct GenerateArgs {
    /// Number of phantoms.
    #[arg(long)]
    pub n: Option<usize>,
    /// First seed; phantoms use seed..seed+n.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub dims: Option<Triple<usize>>,
    #[arg(long)]
    pub spacing: Option<Triple<f64>>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    #[arg(long)]
    pub max_rotation_deg: Option<f64>,
    /// shell or shell_and_cavity.
    #[arg(long)]
    pub label_mode: Option<LabelMode>,
    #[arg(long)]
    pub distractors_min: Option<usize>,
    #[arg(long)]
    pub distractors_max: Option<usize>,
    #[arg(long)]
    pub background: Option<f64>,
    #[arg(long)]
    pub lung: Option<f64>,
    #[arg(long)]
    pub cavity: Option<f64>,
    #[arg(long)]
    pub myocardium: Option<f64>,
    #[arg(long)]
    pub distractor: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Localizer(Axis),
    Segmenter,
}

impl Role {
    pub fn name(self) -> String {
        match self {
            Role::Localizer(a) => format!("localizer-{a}"),
            Role::Segmenter => "segmenter".to_string(),
        }
    }

    pub fn spec(self) -> NetworkSpec {
        match self {
            Role::Localizer(_) => NetworkSpec::localizer_default(),
            Role::Segmenter => NetworkSpec::segmentation_default(),
        }
    }

    /// File name used when no explicit weight path is given.
    pub fn weight_file(self) -> String {
        format!("{}.weights", self.name())
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "segmenter" => Ok(Role::Segmenter),
            other => match other.strip_prefix("localizer-") {
                Some(axis) => Ok(Role::Localizer(axis.parse()?)),
                None => Err(Error::config(format!(
                    "role: expected localizer-axial, localizer-coronal, localizer-sagittal or segmenter, got '{other}'"
                ))),
            },
        }
    }
}

#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    /// localizer-axial, localizer-coronal, localizer-sagittal or segmenter.
    #[arg(long)]
    pub role: Option<Role>,
    /// Dataset manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Weight file to write (default: <role>.weights).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-epoch loss CSV (default: weight path with a .csv extension).
    #[arg(long)]
    pub loss_log: Option<PathBuf>,
    /// Number of manifest scans to train on (0 = all).
    #[arg(long)]
    pub scans: Option<usize>,
    /// Positive patches in total; the same number of negatives is drawn.
    #[arg(long)]
    pub patches_per_class: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub dropout_rate: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// f32 or f64.
    #[arg(long)]
    pub precision: Option<Precision>,
    #[arg(long)]
    pub window_lo: Option<f64>,
    #[arg(long)]
    pub window_hi: Option<f64>,
}

#[derive(Args, Debug, Default)]
pub struct SegmentArgs {
    /// Image to segment (MetaImage header).
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Directory holding <role>.weights files.
    #[arg(long)]
    pub weights_dir: Option<PathBuf>,
    #[arg(long)]
    pub localizer_axial: Option<PathBuf>,
    #[arg(long)]
    pub localizer_coronal: Option<PathBuf>,
    #[arg(long)]
    pub localizer_sagittal: Option<PathBuf>,
    #[arg(long)]
    pub segmenter: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub prob_threshold: Option<f64>,
    #[arg(long)]
    pub smooth_window: Option<usize>,
    #[arg(long)]
    pub margin_fraction: Option<f64>,
    #[arg(long)]
    pub sigma_mm: Option<f64>,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// 6 or 26.
    #[arg(long)]
    pub connectivity: Option<Connectivity>,
    /// Evaluate every n-th voxel and interpolate the rest (1 = every voxel).
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub window_lo: Option<f64>,
    #[arg(long)]
    pub window_hi: Option<f64>,
}

#[derive(Args, Debug, Default)]
pub struct EvaluateArgs {
    /// Predicted mask file or a segment output directory; repeat per scan.
    #[arg(long)]
    pub pred: Vec<PathBuf>,
    /// Reference label file; repeat per scan in the same order.
    #[arg(long = "ref")]
    pub reference: Vec<PathBuf>,
    /// Take references from a manifest instead of --ref.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// JSON report path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
pub struct RenderArgs {
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Mask drawn as a contour.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long)]
    pub axis: Option<Axis>,
    /// Slice index; repeat for several slices (default: middle slice).
    #[arg(long)]
    pub index: Vec<usize>,
    /// Output image (.png, .pgm or .ppm).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub window_lo: Option<f64>,
    #[arg(long)]
    pub window_hi: Option<f64>,
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code. Messages go to stdout/stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let file = cli.config.as_ref().map(ConfigFile::load).transpose()?;
    match &cli.command {
        Command::Generate(a) => cmd_generate(a, file.as_ref()).map(|p| println!("{}", p.display())),
        Command::Train(a) => cmd_train(a, file.as_ref()).map(|p| println!("{}", p.display())),
        Command::Segment(a) => cmd_segment(a, file.as_ref()).map(|p| println!("{}", p.display())),
        Command::Evaluate(a) => cmd_evaluate(a, file.as_ref()).map(|r| println!("{}", r.summary_line())),
        Command::Render(a) => cmd_render(a, file.as_ref()).map(|paths| {
            for p in paths {
                println!("{}", p.display());
            }
        }),
    }
}

fn resolver<'a>(file: Option<&'a ConfigFile>, section: &'static str, keys: &[&str]) -> Result<Resolver<'a>> {
    if let Some(f) = file {
        f.check_keys(section, keys)?;
    }
    Ok(Resolver { file, section })
}

fn window(r: &Resolver, lo: Option<f64>, hi: Option<f64>) -> Result<NormalizationWindow> {
    let d = NormalizationWindow::default();
    NormalizationWindow::new(r.or(lo, "window_lo", d.lo)?, r.or(hi, "window_hi", d.hi)?)
}

/// Returns the manifest path.
pub fn cmd_generate(a: &GenerateArgs, file: Option<&ConfigFile>) -> Result<PathBuf> {
    let r = resolver(
        file,
        "generate",
        &[
            "n",
            "seed",
            "out",
            "dims",
            "spacing",
            "noise_sigma",
            "max_rotation_deg",
            "label_mode",
            "distractors_min",
            "distractors_max",
            "background",
            "lung",
            "cavity",
            "myocardium",
            "distractor",
        ],
    )?;
    let d = PhantomConfig::default();
    let di = d.intensities;
    let seed = r.or(a.seed, "seed", d.seed)?;
    let cfg = PhantomConfig {
        dims: r.or(a.dims, "dims", Triple(d.dims))?.0,
        spacing: r.or(a.spacing, "spacing", Triple(d.spacing))?.0,
        noise_sigma: r.or(a.noise_sigma, "noise_sigma", d.noise_sigma)?,
        max_rotation_deg: r.or(a.max_rotation_deg, "max_rotation_deg", d.max_rotation_deg)?,
        label_mode: r.or(a.label_mode, "label_mode", d.label_mode)?,
        distractors: (
            r.or(a.distractors_min, "distractors_min", d.distractors.0)?,
            r.or(a.distractors_max, "distractors_max", d.distractors.1)?,
        ),
        intensities: Intensities {
            background: r.or(a.background, "background", di.background)?,
            lung: r.or(a.lung, "lung", di.lung)?,
            cavity: r.or(a.cavity, "cavity", di.cavity)?,
            myocardium: r.or(a.myocardium, "myocardium", di.myocardium)?,
            distractor: r.or(a.distractor, "distractor", di.distractor)?,
        },
        seed,
        ..d
    };
    let n = r.or(a.n, "n", 5)?;
    let out: PathBuf = r.or(a.out.clone(), "out", PathBuf::from("phantoms"))?;
    generate_dataset(&cfg, n, seed, out)
}

/// Returns the weight file path.
pub fn cmd_train(a: &TrainArgs, file: Option<&ConfigFile>) -> Result<PathBuf> {
    let r = resolver(
        file,
        "train",
        &[
            "role",
            "manifest",
            "out",
            "loss_log",
            "scans",
            "patches_per_class",
            "epochs",
            "batch_size",
            "learning_rate",
            "momentum",
            "dropout_rate",
            "seed",
            "precision",
            "window_lo",
            "window_hi",
        ],
    )?;
    let role: Role = r.required(a.role, "role")?;
    let manifest: PathBuf = r.required(a.manifest.clone(), "manifest")?;
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        epochs: r.or(a.epochs, "epochs", d.epochs)?,
        batch_size: r.or(a.batch_size, "batch_size", d.batch_size)?,
        learning_rate: r.or(a.learning_rate, "learning_rate", d.learning_rate)?,
        momentum: r.or(a.momentum, "momentum", d.momentum)?,
        dropout_rate: r.or(a.dropout_rate, "dropout_rate", d.dropout_rate)?,
        seed: r.or(a.seed, "seed", d.seed)?,
        precision: r.or(a.precision, "precision", d.precision)?,
    };
    cfg.validate()?;
    let window = window(&r, a.window_lo, a.window_hi)?;
    let scans = r.or(a.scans, "scans", 5)?;
    let patches_per_class = r.or(a.patches_per_class, "patches_per_class", 20_000)?;
    let out: PathBuf = r.or(a.out.clone(), "out", PathBuf::from(role.weight_file()))?;
    let loss_log: PathBuf = r.or(a.loss_log.clone(), "loss_log", out.with_extension("csv"))?;

    let scans = load_manifest_scans(&manifest, (scans > 0).then_some(scans))?;
    if scans.is_empty() {
        return Err(Error::config(format!("manifest: {} lists no scans", manifest.display())));
    }
    let progress = |epoch: usize, loss: f64| eprintln!("{} epoch {} loss {loss:.6}", role.name(), epoch + 1);
    let outcome = match role {
        Role::Localizer(axis) => train_localizer(&scans, axis, &window, &cfg, progress)?,
        Role::Segmenter => train_segmenter(&scans, &window, patches_per_class, &cfg, progress)?,
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    }
    outcome.weights.save(&out)?;
    let mut csv = String::from("epoch,loss\n");
    for (i, l) in outcome.epoch_losses.iter().enumerate() {
        writeln!(csv, "{},{l}", i + 1).expect("writing to a String");
    }
    fs::write(&loss_log, csv).map_err(|e| Error::file(&loss_log, e))?;
    Ok(out)
}

fn load_model<T: crate::neuralnet::Scalar>(path: &Path, spec: &NetworkSpec) -> Result<Model<T>> {
    Model::new(spec, &NetworkWeights::load(path, spec)?)
}

pub const MASK_FILE: &str = "mask.mhd";
pub const PROB_FILE: &str = "prob.mhd";
pub const SMOOTHED_PROB_FILE: &str = "prob_smoothed.mhd";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const TIMING_FILE: &str = "timing.txt";

/// Returns the output directory.
pub fn cmd_segment(a: &SegmentArgs, file: Option<&ConfigFile>) -> Result<PathBuf> {
    let r = resolver(
        file,
        "segment",
        &[
            "image",
            "weights_dir",
            "localizer_axial",
            "localizer_coronal",
            "localizer_sagittal",
            "segmenter",
            "out",
            "prob_threshold",
            "smooth_window",
            "margin_fraction",
            "sigma_mm",
            "threshold",
            "connectivity",
            "stride",
            "batch_size",
            "window_lo",
            "window_hi",
        ],
    )?;
    let image_path: PathBuf = r.required(a.image.clone(), "image")?;
    let weights_dir: PathBuf = r.or(a.weights_dir.clone(), "weights_dir", PathBuf::from("."))?;
    let weight_path = |flag: &Option<PathBuf>, role: Role| -> Result<PathBuf> {
        let key = role.name().replace('-', "_");
        r.or(flag.clone(), &key, weights_dir.join(role.weight_file()))
    };
    let paths = [
        weight_path(&a.localizer_axial, Role::Localizer(Axis::Axial))?,
        weight_path(&a.localizer_coronal, Role::Localizer(Axis::Coronal))?,
        weight_path(&a.localizer_sagittal, Role::Localizer(Axis::Sagittal))?,
        weight_path(&a.segmenter, Role::Segmenter)?,
    ];
    let fd = FusionParams::default();
    let fusion = FusionParams {
        prob_threshold: r.or(a.prob_threshold, "prob_threshold", fd.prob_threshold)?,
        smooth_window: r.or(a.smooth_window, "smooth_window", fd.smooth_window)?,
        margin_fraction: r.or(a.margin_fraction, "margin_fraction", fd.margin_fraction)?,
    };
    fusion.validate()?;
    let pd = PostprocessParams::default();
    let post = PostprocessParams {
        sigma_mm: r.or(a.sigma_mm, "sigma_mm", pd.sigma_mm)?,
        threshold: r.or(a.threshold, "threshold", pd.threshold)?,
        connectivity: r.or(a.connectivity, "connectivity", pd.connectivity)?,
    };
    post.validate()?;
    let cd = ClassifyOptions::default();
    let classify = ClassifyOptions {
        stride: r.or(a.stride, "stride", cd.stride)?,
        batch_size: r.or(a.batch_size, "batch_size", cd.batch_size)?,
    };
    let window = window(&r, a.window_lo, a.window_hi)?;
    let out: PathBuf = r.or(a.out.clone(), "out", PathBuf::from("segmentation"))?;

    let start = Instant::now();
    let image = read_volume(&image_path)?;
    let loc_spec = NetworkSpec::localizer_default();
    let localizer = Localizer {
        axial: load_model(&paths[0], &loc_spec)?,
        coronal: load_model(&paths[1], &loc_spec)?,
        sagittal: load_model(&paths[2], &loc_spec)?,
    };
    let pipeline = Pipeline {
        localizer,
        segmenter: load_model(&paths[3], &NetworkSpec::segmentation_default())?,
        window,
        fusion,
        post,
        classify,
    };
    fs::create_dir_all(&out).map_err(|e| Error::file(&out, e))?;
    let write_text = |name: &str, text: String| {
        let p = out.join(name);
        fs::write(&p, text).map_err(|e| Error::file(p, e))
    };
    let result = match pipeline.segment(&image) {
        Ok(res) => res,
        Err(Error::LocalizationFailure { axis }) => {
            write_text(
                SUMMARY_FILE,
                format!("status = localization_failure\nimage = {}\naxis = {axis}\n", image_path.display()),
            )?;
            write_text(TIMING_FILE, format!("wall_seconds = {:.3}\n", start.elapsed().as_secs_f64()))?;
            return Err(Error::LocalizationFailure { axis });
        }
        Err(e) => return Err(e),
    };
    write_label(&result.mask, out.join(MASK_FILE))?;
    write_volume(&result.probabilities.to_volume(image.grid())?, out.join(PROB_FILE), ElementType::Float)?;
    write_volume(&result.smoothed.to_volume(image.grid())?, out.join(SMOOTHED_PROB_FILE), ElementType::Float)?;
    let b = result.bbox;
    write_text(
        SUMMARY_FILE,
        format!(
            "status = ok\nimage = {}\nbox_lo = {} {} {}\nbox_hi = {} {} {}\nbox_voxels = {}\nmask_voxels = {}\nempty = {}\n",
            image_path.display(),
            b.lo[0],
            b.lo[1],
            b.lo[2],
            b.hi[0],
            b.hi[1],
            b.hi[2],
            b.voxel_count(),
            result.mask.count(),
            result.empty
        ),
    )?;
    write_text(TIMING_FILE, format!("wall_seconds = {:.3}\n", start.elapsed().as_secs_f64()))?;
    Ok(out)
}

/// Box recorded by `segment` in a summary file.
pub fn read_summary_box(path: &Path, dims: [usize; 3]) -> Result<BoundingBox3D> {
    let f = ConfigFile::load(path)?;
    let triple = |key: &str| -> Result<[usize; 3]> {
        let raw = f
            .get(config::GLOBAL, key)
            .ok_or_else(|| Error::format(format!("{}: missing {key}", path.display())))?;
        let v: Vec<usize> = raw
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| Error::format(format!("{}: bad {key}", path.display()))))
            .collect::<Result<_>>()?;
        v.try_into()
            .map_err(|_| Error::format(format!("{}: {key} needs 3 values", path.display())))
    };
    BoundingBox3D::new(triple("box_lo")?, triple("box_hi")?, dims)
}

pub fn cmd_evaluate(a: &EvaluateArgs, file: Option<&ConfigFile>) -> Result<EvaluationReport> {
    let r = resolver(file, "evaluate", &["pred", "ref", "manifest", "out"])?;
    let preds: Vec<PathBuf> = r.list(a.pred.clone(), "pred")?;
    let mut refs: Vec<PathBuf> = r.list(a.reference.clone(), "ref")?;
    if let Some(m) = r.get(a.manifest.clone(), "manifest")? {
        if !refs.is_empty() {
            return Err(Error::config("give references with either --ref or --manifest, not both"));
        }
        refs = read_manifest(&m)?.into_iter().map(|e| e.label).collect();
    }
    if preds.is_empty() {
        return Err(Error::config("pred: at least one prediction required"));
    }
    if preds.len() != refs.len() {
        return Err(Error::CountMismatch(format!(
            "{} predictions but {} references",
            preds.len(),
            refs.len()
        )));
    }
    let out: PathBuf = r.or(a.out.clone(), "out", PathBuf::from("report.json"))?;
    let mut ids = Vec::new();
    let mut masks = Vec::new();
    let mut references = Vec::new();
    let mut boxes = Vec::new();
    for (p, rf) in preds.iter().zip(&refs) {
        let (mask_path, summary) = if p.is_dir() {
            (p.join(MASK_FILE), p.join(SUMMARY_FILE))
        } else {
            (p.clone(), p.with_file_name(SUMMARY_FILE))
        };
        let reference = read_label(rf)?;
        let mask = read_label(&mask_path)?;
        let bbox = if summary.is_file() {
            read_summary_box(&summary, reference.dims())?
        } else {
            BoundingBox3D::full(reference.dims())
        };
        let id = if p.is_dir() { p.file_name() } else { p.file_stem() };
        ids.push(id.map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned()));
        masks.push(mask);
        references.push(reference);
        boxes.push(bbox);
    }
    let report = crate::metrics::evaluate_dataset(&ids, &masks, &references, &boxes)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    }
    report.write_json(&out)?;
    Ok(report)
}

/// Returns the written image paths.
pub fn cmd_render(a: &RenderArgs, file: Option<&ConfigFile>) -> Result<Vec<PathBuf>> {
    let r = resolver(file, "render", &["image", "mask", "axis", "index", "out", "window_lo", "window_hi"])?;
    let image_path: PathBuf = r.required(a.image.clone(), "image")?;
    let mask_path: Option<PathBuf> = r.get(a.mask.clone(), "mask")?;
    let axis = r.or(a.axis, "axis", Axis::Axial)?;
    let out: PathBuf = r.or(a.out.clone(), "out", PathBuf::from("slice.png"))?;
    let window = window(&r, a.window_lo, a.window_hi)?;
    let image = read_volume(&image_path)?;
    let mask = mask_path.map(read_label).transpose()?;
    let mut indices = r.list(a.index.clone(), "index")?;
    if indices.is_empty() {
        indices.push(image.dims()[axis.fixed_dim()] / 2);
    }
    let mut written = Vec::new();
    for &i in &indices {
        let raster = render::render_slice(&image, mask.as_ref(), axis, i, &window)?;
        let path = if indices.len() == 1 {
            out.clone()
        } else {
            let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let ext = out.extension().map(|s| s.to_string_lossy().into_owned()).unwrap_or("png".into());
            out.with_file_name(format!("{stem}_{axis}_{i:03}.{ext}"))
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        }
        render::write_raster(&raster, &path)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roles_parse() {
        assert_eq!("segmenter".parse::<Role>().unwrap(), Role::Segmenter);
        assert_eq!("localizer-coronal".parse::<Role>().unwrap(), Role::Localizer(Axis::Coronal));
        assert!("localizer-oblique".parse::<Role>().is_err());
        assert_eq!(Role::Localizer(Axis::Sagittal).weight_file(), "localizer-sagittal.weights");
    }

    #[test]
    fn error_codes() {
        assert_eq!(exit_code(&Error::config("x")), EXIT_CONFIG);
        assert_eq!(exit_code(&Error::file("a", std::io::Error::other("x"))), EXIT_IO);
        assert_eq!(
            exit_code(&Error::LocalizationFailure { axis: Axis::Axial }),
            EXIT_LOCALIZATION
        );
    }

    #[test]
    fn clap_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
