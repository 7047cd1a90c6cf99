//! The `dragdrop` command line.
//!
//! Exit status: 0 on success, 1 on usage errors, 2 when an input is missing
//! or does not parse, or the data are inconsistent.

mod evaluate;
mod manifest;

use std::ffi::OsString;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dragdrop_core::annotation::{
    simulate_ellipse, simulate_scribbles, AnnotationItems, Provenance, DEFAULT_POINT_COUNT,
    DEFAULT_SIGMA_FRAC,
};
use dragdrop_core::io::{load_label, load_volume, save_label, VolumeFormat};
use dragdrop_core::phantom::{write_case, PhantomCase};
use dragdrop_core::{
    froc, generate_phantom, phantom_suite, propagate, simulate_bbox, simulate_dragdrop, simulate_points, FrocCase,
    MatchCriterion, PhantomSpec, PropagationConfig, WeakAnnotationSet,
};
use rayon::prelude::*;

pub use manifest::RunManifest;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<dragdrop_core::Error> for CliError {
    fn from(e: dragdrop_core::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub(crate) fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::Data(format!("{}: {e}", parent.display())))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub(crate) fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

#[derive(Parser, Debug)]
#[command(name = "dragdrop", version, about = "Drag&Drop weak-annotation propagation and evaluation")]
pub struct Cli {
    /// Worker threads for case-level parallelism (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate synthetic phantom volumes with ground truth.
    Phantom(PhantomArgs),
    /// Simulate weak annotations from a ground-truth label map.
    Simulate(SimulateArgs),
    /// Turn Drag&Drop annotations into foreground and uncertain-ring labels.
    Propagate(PropagateArgs),
    /// Pixel-, lesion- and patient-level detection metrics.
    Evaluate(evaluate::EvaluateArgs),
    /// Free-response ROC over a batch of confidence maps.
    Froc(FrocArgs),
    /// Run the HTTP annotation service.
    Serve(ServeArgs),
    /// Re-run the command recorded in a run manifest.
    Replay {
        manifest: PathBuf,
    },
}

#[derive(Args, Debug)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["suite", "spec"])))]
pub struct PhantomArgs {
    /// The fixed 30-case battery (20 positive, 10 negative).
    #[arg(long)]
    pub suite: bool,
    /// A single phantom described by a JSON spec.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Kind {
    Dragdrop,
    Bbox,
    Points,
    Ellipse,
    Scribble,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Ground-truth label map.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, value_enum)]
    pub kind: Kind,
    /// Center noise as a fraction of the lesion radius (dragdrop only).
    #[arg(long, default_value_t = DEFAULT_SIGMA_FRAC)]
    pub sigma_frac: f64,
    /// Points sampled per lesion (points only).
    #[arg(long, default_value_t = DEFAULT_POINT_COUNT)]
    pub points: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Value of the `volume` field (default: the --gt path).
    #[arg(long)]
    pub volume_ref: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum LabelFormat {
    Nifti1,
    RawJson,
}

#[derive(Args, Debug)]
pub struct PropagateArgs {
    #[arg(long)]
    pub volume: PathBuf,
    /// Drag&Drop annotation set (JSON).
    #[arg(long)]
    pub annotations: PathBuf,
    /// Propagation config JSON; defaults apply when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value = "nifti1")]
    pub format: LabelFormat,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct FrocArgs {
    /// JSON array of `{"confidence": path, "gt": path}`; paths are relative to this file.
    #[arg(long)]
    pub cases: PathBuf,
    #[arg(long, default_value = "any_overlap")]
    pub criterion: MatchCriterion,
    /// Comma-separated false-positive-per-case levels to report.
    #[arg(long, value_delimiter = ',')]
    pub levels: Vec<f64>,
    /// FROC points as CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional SVG plot.
    #[arg(long)]
    pub svg: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    /// Where uploaded volumes and session logs are kept across restarts.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: IpAddr,
}

/// Parses `argv` (program name first) and runs it, returning the exit status.
pub fn main_with_args<I, T>(argv: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let recorded: Vec<String> = argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(cli, recorded) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}

pub fn execute(cli: Cli, argv: Vec<String>) -> CliResult<()> {
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(CliError::Usage("--jobs must be at least 1".into()));
        }
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let started = std::time::Instant::now();
    let name = match &cli.command {
        Command::Phantom(_) => "phantom",
        Command::Simulate(_) => "simulate",
        Command::Propagate(_) => "propagate",
        Command::Evaluate(_) => "evaluate",
        Command::Froc(_) => "froc",
        Command::Serve(_) => "serve",
        Command::Replay { .. } => "replay",
    };
    let mut run = RunManifest::new(name, argv);
    match cli.command {
        Command::Phantom(a) => cmd_phantom(a, &mut run)?,
        Command::Simulate(a) => cmd_simulate(a, &mut run)?,
        Command::Propagate(a) => cmd_propagate(a, &mut run)?,
        Command::Evaluate(a) => evaluate::cmd_evaluate(a, &mut run)?,
        Command::Froc(a) => cmd_froc(a, &mut run)?,
        Command::Serve(a) => return cmd_serve(a),
        Command::Replay { manifest } => return replay(&manifest),
    }
    run.finish(started.elapsed())
}

fn replay(path: &Path) -> CliResult<()> {
    let m = RunManifest::load(path)?;
    log::info!("replaying `{}`", m.args.join(" "));
    let argv = std::iter::once("dragdrop".to_string()).chain(m.args.iter().cloned());
    let cli = Cli::try_parse_from(argv).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    if matches!(cli.command, Command::Replay { .. } | Command::Serve(_)) {
        return Err(CliError::Data(format!("{}: manifest does not record a batch run", path.display())));
    }
    execute(cli, m.args)
}

fn cmd_phantom(a: PhantomArgs, run: &mut RunManifest) -> CliResult<()> {
    run.seed = Some(a.seed);
    if let Some(spec_path) = &a.spec {
        run.inputs.push(spec_path.clone());
        let spec: PhantomSpec = serde_json::from_str(&read_text(spec_path)?)
            .map_err(|e| CliError::Data(format!("{}: {e}", spec_path.display())))?;
        let (volume, gt) = generate_phantom(&spec, a.seed)?;
        let case = PhantomCase {
            spec,
            seed: a.seed,
            volume,
            gt,
        };
        write_case(&case, &a.out_dir)?;
    } else {
        let cases = phantom_suite(a.seed)?;
        cases
            .par_iter()
            .enumerate()
            .try_for_each(|(k, c)| write_case(c, &a.out_dir.join(format!("case_{k}"))))?;
        log::info!("wrote {} phantom cases to {}", cases.len(), a.out_dir.display());
    }
    run.outputs.push(a.out_dir.clone());
    run.manifest_path = Some(a.out_dir.join("manifest.json"));
    Ok(())
}

fn cmd_simulate(a: SimulateArgs, run: &mut RunManifest) -> CliResult<()> {
    run.seed = Some(a.seed);
    run.inputs.push(a.gt.clone());
    if !(a.sigma_frac >= 0.0 && a.sigma_frac.is_finite()) {
        return Err(CliError::Usage("--sigma-frac must be a finite non-negative number".into()));
    }
    let (gt, spacing) = load_label(&a.gt, VolumeFormat::detect(&a.gt))?;
    let simulated = |sigma_frac| Provenance::Simulated { seed: a.seed, sigma_frac };
    let (items, provenance) = match a.kind {
        Kind::Dragdrop => (
            AnnotationItems::Dragdrop(simulate_dragdrop(&gt, spacing, a.sigma_frac, a.seed)),
            simulated(Some(a.sigma_frac)),
        ),
        Kind::Bbox => (AnnotationItems::Bbox(simulate_bbox(&gt)), simulated(None)),
        Kind::Points => (AnnotationItems::Points(simulate_points(&gt, a.points, a.seed)), simulated(None)),
        Kind::Ellipse => (AnnotationItems::Ellipse(simulate_ellipse(&gt, spacing)?), simulated(None)),
        Kind::Scribble => (AnnotationItems::Scribble(simulate_scribbles(&gt, a.seed)?), simulated(None)),
    };
    let set = WeakAnnotationSet {
        volume: a.volume_ref.unwrap_or_else(|| a.gt.display().to_string()),
        provenance,
        items,
    };
    write_file(&a.out, set.to_json())?;
    run.outputs.push(a.out.clone());
    run.manifest_path = Some(manifest::beside(&a.out));
    Ok(())
}

fn cmd_propagate(a: PropagateArgs, run: &mut RunManifest) -> CliResult<()> {
    run.inputs.push(a.volume.clone());
    run.inputs.push(a.annotations.clone());
    let mut cfg = match &a.config {
        Some(p) => {
            run.inputs.push(p.clone());
            PropagationConfig::from_json(&read_text(p)?)
                .map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?
        }
        None => PropagationConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    run.seed = Some(cfg.seed);
    run.config = Some(serde_json::to_value(&cfg).expect("config serializes"));

    let vol = load_volume(&a.volume, VolumeFormat::detect(&a.volume))?;
    let set = WeakAnnotationSet::from_json(&read_text(&a.annotations)?)
        .map_err(|e| CliError::Data(format!("{}: {e}", a.annotations.display())))?;
    let AnnotationItems::Dragdrop(anns) = set.items else {
        return Err(CliError::Data(format!(
            "{}: expected dragdrop annotations, found {}",
            a.annotations.display(),
            set.items.kind().as_str()
        )));
    };
    let label = propagate(&vol, &anns, &cfg)?;

    let (fmt, ext) = match a.format {
        LabelFormat::Nifti1 => (VolumeFormat::Nifti1, ".nii"),
        LabelFormat::RawJson => (VolumeFormat::RawJson, ""),
    };
    std::fs::create_dir_all(&a.out_dir).map_err(|e| CliError::Data(format!("{}: {e}", a.out_dir.display())))?;
    let fg_path = a.out_dir.join(format!("foreground{ext}"));
    let ring_path = a.out_dir.join(format!("uncertain{ext}"));
    save_label(&label.foreground, vol.spacing(), &fg_path, fmt)?;
    save_label(&label.uncertain.map(|&u| u as u32), vol.spacing(), &ring_path, fmt)?;
    let summary_path = a.out_dir.join("summary.json");
    let summary = serde_json::to_string_pretty(&label.summary()).expect("summary serializes");
    write_file(&summary_path, summary + "\n")?;
    log::info!(
        "{} lesions, {} foreground voxels",
        anns.len(),
        label.summary().foreground_voxels
    );
    run.outputs.extend([fg_path, ring_path, summary_path]);
    run.manifest_path = Some(a.out_dir.join("manifest.json"));
    Ok(())
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct FrocEntry {
    #[serde(default)]
    id: Option<String>,
    confidence: PathBuf,
    gt: PathBuf,
}

fn cmd_froc(a: FrocArgs, run: &mut RunManifest) -> CliResult<()> {
    run.inputs.push(a.cases.clone());
    if a.levels.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
        return Err(CliError::Usage("--levels must be non-negative numbers".into()));
    }
    let entries: Vec<FrocEntry> = serde_json::from_str(&read_text(&a.cases)?)
        .map_err(|e| CliError::Data(format!("{}: {e}", a.cases.display())))?;
    let base = a.cases.parent().map(Path::to_path_buf).unwrap_or_default();
    let loaded = entries
        .par_iter()
        .map(|e| {
            let (c, g) = (base.join(&e.confidence), base.join(&e.gt));
            let conf = load_volume(&c, VolumeFormat::detect(&c))?;
            let (gt, _) = load_label(&g, VolumeFormat::detect(&g))?;
            if conf.dims() != gt.dims() {
                return Err(CliError::Data(format!(
                    "case {}: confidence dims {:?} differ from gt dims {:?}",
                    e.id.as_deref().unwrap_or("?"),
                    conf.dims().0,
                    gt.dims().0
                )));
            }
            Ok((conf.into_grid(), gt))
        })
        .collect::<CliResult<Vec<_>>>()?;
    let cases: Vec<FrocCase> = loaded.iter().map(|(c, g)| FrocCase { confidence: c, gt: g }).collect();
    let levels = (!a.levels.is_empty()).then_some(&a.levels[..]);
    let curve = froc(&cases, a.criterion, levels)?;
    if curve.degenerate {
        log::warn!("confidence maps have no local maxima; the curve is a single point");
    }
    write_file(&a.out, curve.to_csv())?;
    run.outputs.push(a.out.clone());
    if let Some(svg) = &a.svg {
        write_file(svg, curve.to_svg())?;
        run.outputs.push(svg.clone());
    }
    let report = serde_json::json!({
        "cases": curve.cases,
        "lesions": curve.lesions,
        "criterion": curve.criterion.to_string(),
        "degenerate": curve.degenerate,
        "at_levels": curve.at_levels,
    });
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    run.manifest_path = Some(manifest::beside(&a.out));
    Ok(())
}

fn cmd_serve(a: ServeArgs) -> CliResult<()> {
    let addr = SocketAddr::new(a.host, a.port);
    dragdrop_service::run(addr, a.data_dir.as_deref()).map_err(|e| CliError::Data(format!("serve on {addr}: {e}")))
}
