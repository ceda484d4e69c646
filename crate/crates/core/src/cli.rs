//! The `mpf` command line: `reconstruct`, `evaluate`, `slice`, `check-grad`
//! and `ablate`.
//!
//! Exit codes: 0 success, 1 contract or acceptance failure, 2 usage or I/O
//! error. The worker thread count comes from `MPF_THREADS`.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{ConfigError, RunConfig};
use crate::extract::{self, metrics, FieldKind, Plane};
use crate::fixtures;
use crate::geometry::{GeometryError, PointCloud, TriangleMesh};
use crate::gradcheck::{self, GradCheckOptions};
use crate::io::{self, IoError, MeshFormat, PointFormat};
use crate::losses::Term;
use crate::math::Vec3;
use crate::pipeline::{self, PipelineError};
use crate::trainer::{self, TrainError};

pub const THREADS_ENV: &str = "MPF_THREADS";

/// Default number of surface samples per mesh for chamfer distances.
pub const CHAMFER_SAMPLES: usize = 100_000;

#[derive(Debug)]
pub enum CliError {
    /// Bad arguments, unreadable input, unwritable output.
    Usage(String),
    /// The computation ran but violated a contract.
    Contract(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Contract(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Contract(m) => m,
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<GeometryError> for CliError {
    fn from(e: GeometryError) -> Self {
        CliError::Usage(format!("input: {e}"))
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::Io { .. } | TrainError::Checkpoint { .. } => {
                CliError::Usage(e.to_string())
            }
            TrainError::Objective { .. } | TrainError::Spatial(_) | TrainError::ShapeMismatch { .. } => {
                CliError::Contract(e.to_string())
            }
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Train(t) => t.into(),
            PipelineError::Geometry(g) => g.into(),
            PipelineError::Io(i) => i.into(),
            PipelineError::Metric(m) => CliError::Usage(m.to_string()),
            e @ PipelineError::Write { .. } => CliError::Usage(e.to_string()),
        }
    }
}

impl From<metrics::MetricError> for CliError {
    fn from(e: metrics::MetricError) -> Self {
        CliError::Usage(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(name = "mpf", version, about = "Surface reconstruction with a metric-phase field")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train on a point cloud and extract a mesh.
    Reconstruct(ReconstructArgs),
    /// Chamfer or point-to-surface distance between two inputs.
    Evaluate(EvaluateArgs),
    /// Render a planar slice of a trained field, optionally with a 1D probe.
    Slice(SliceArgs),
    /// Verify analytic derivatives against finite differences.
    CheckGrad(CheckGradArgs),
    /// Re-run with single loss terms removed or strengthened.
    Ablate(AblateArgs),
}

/// Options shared by the training commands.
#[derive(Args, Debug, Default, Clone)]
pub struct RunOptions {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Marching-cubes grid nodes per axis.
    #[arg(long)]
    pub res: Option<usize>,
    /// Run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[command(flatten)]
    pub weights: WeightOverrides,
}

#[derive(Args, Debug, Default, Clone)]
pub struct WeightOverrides {
    #[arg(long = "weights.zero", value_name = "W")]
    pub zero: Option<f64>,
    #[arg(long = "weights.align", value_name = "W")]
    pub align: Option<f64>,
    #[arg(long = "weights.eik_r", value_name = "W")]
    pub eik_r: Option<f64>,
    #[arg(long = "weights.eik_phi", value_name = "W")]
    pub eik_phi: Option<f64>,
    #[arg(long = "weights.lap", value_name = "W")]
    pub lap: Option<f64>,
    #[arg(long = "weights.phase", value_name = "W")]
    pub phase: Option<f64>,
    #[arg(long = "weights.far", value_name = "W")]
    pub far: Option<f64>,
    #[arg(long = "weights.normal", value_name = "W")]
    pub normal: Option<f64>,
    #[arg(long = "weights.alpha_far", value_name = "A")]
    pub alpha_far: Option<f64>,
    #[arg(long = "weights.alpha_align", value_name = "A")]
    pub alpha_align: Option<f64>,
    #[arg(long = "weights.align_start_iter", value_name = "N")]
    pub align_start_iter: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ReconstructArgs {
    /// Point cloud (.xyz or .ply); overrides `input` in the configuration.
    pub input: Option<PathBuf>,
    #[command(flatten)]
    pub run: RunOptions,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Chamfer,
    P2s,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Mesh (.obj/.ply) or point cloud (.xyz/.ply).
    pub a: PathBuf,
    /// Reference mesh or point cloud; a mesh is required for `p2s`.
    pub b: PathBuf,
    #[arg(long, value_enum, default_value_t = Mode::Chamfer)]
    pub mode: Mode,
    /// Surface samples drawn from each mesh operand.
    #[arg(long, default_value_t = CHAMFER_SAMPLES)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write `mode,value` to this CSV file.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FieldArg {
    Phi,
    R,
    Theta,
}

impl From<FieldArg> for FieldKind {
    fn from(f: FieldArg) -> Self {
        match f {
            FieldArg::Phi => FieldKind::Phi,
            FieldArg::R => FieldKind::R,
            FieldArg::Theta => FieldKind::Theta,
        }
    }
}

#[derive(Args, Debug)]
pub struct SliceArgs {
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = FieldArg::Phi)]
    pub field: FieldArg,
    #[arg(long, value_enum, default_value_t = Axis::Z)]
    pub axis: Axis,
    /// Plane position along `axis`, in normalized coordinates.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub offset: f64,
    #[arg(long, default_value_t = 256)]
    pub res: usize,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Direction of an optional 1D probe.
    #[arg(long, value_enum)]
    pub probe_axis: Option<Axis>,
    /// A point on the probe line, `x,y,z`.
    #[arg(long, value_parser = parse_point, default_value = "0,0,0", allow_hyphen_values = true)]
    pub probe_through: Vec3,
}

#[derive(Args, Debug)]
pub struct CheckGradArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Total points in the parameter-check batch, split evenly over the four
    /// sample sets.
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[arg(long, default_value_t = 256)]
    pub hidden: usize,
    #[arg(long, default_value_t = 100)]
    pub probes: usize,
    /// Test hook: perturb this parameter's analytic gradient.
    #[arg(long, hide = true)]
    pub corrupt_param: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Fixture {
    Sphere,
    Sheet,
    CubeSheet,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Point cloud; alternatively use `--fixture`.
    pub input: Option<PathBuf>,
    #[arg(long, value_enum, conflicts_with = "input")]
    pub fixture: Option<Fixture>,
    /// Points in the generated fixture.
    #[arg(long, default_value_t = 5000)]
    pub fixture_points: usize,
    /// Variants as `term=multiplier` with multiplier 0, 1 or 10; defaults to
    /// the standard nine-row table.
    #[arg(long = "vary", value_parser = parse_variant)]
    pub variants: Vec<Variant>,
    #[command(flatten)]
    pub run: RunOptions,
}

/// One ablation row: a loss term scaled by a multiplier.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Variant {
    pub term: Term,
    pub multiplier: f64,
}

impl Variant {
    pub fn label(&self) -> String {
        if self.multiplier == 1.0 {
            return "Default".into();
        }
        let strong = self.multiplier > 1.0;
        let known = match self.term {
            Term::Align => Some("alignment"),
            Term::Normal => Some("normal constraint"),
            Term::Lap => Some("Laplacian constraint"),
            Term::Phase => Some("phase constraint"),
            _ => None,
        };
        match (known, strong) {
            (Some(k), true) => format!("Strong {k}"),
            (Some(k), false) => format!("No {k}"),
            (None, _) => format!("{} x{}", self.term.name(), self.multiplier),
        }
    }
}

/// Default, then each of alignment, normal, Laplacian and phase at ×10 and ×0.
pub fn standard_variants() -> Vec<Variant> {
    let mut v = vec![Variant { term: Term::Align, multiplier: 1.0 }];
    for term in [Term::Align, Term::Normal, Term::Lap, Term::Phase] {
        for multiplier in [10.0, 0.0] {
            v.push(Variant { term, multiplier });
        }
    }
    v
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    let (name, mult) = s.split_once('=').ok_or_else(|| format!("expected term=multiplier, got `{s}`"))?;
    let term = Term::ALL
        .into_iter()
        .find(|t| t.name() == name)
        .ok_or_else(|| format!("unknown loss term `{name}`"))?;
    let multiplier: f64 = mult.parse().map_err(|_| format!("bad multiplier `{mult}`"))?;
    if ![0.0, 1.0, 10.0].contains(&multiplier) {
        return Err(format!("multiplier must be 0, 1 or 10, got {multiplier}"));
    }
    Ok(Variant { term, multiplier })
}

fn parse_point(s: &str) -> Result<Vec3, String> {
    let v: Vec<f64> = s.split(',').map(|t| t.trim().parse::<f64>()).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    match v[..] {
        [x, y, z] if v.iter().all(|c| c.is_finite()) => Ok([x, y, z]),
        _ => Err(format!("expected x,y,z, got `{s}`")),
    }
}

/// Formats with four significant digits.
pub fn four_significant(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v:.3}");
    }
    let decimals = (3 - v.abs().log10().floor() as i32).max(0) as usize;
    format!("{v:.decimals$}")
}

/// Configuration after applying the file, then the command-line overrides.
pub fn resolve_config(opts: &RunOptions) -> Result<RunConfig, CliError> {
    let mut cfg = match &opts.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = opts.seed {
        cfg.train.seed = s;
    }
    if let Some(r) = opts.res {
        cfg.resolution = r;
    }
    if let Some(o) = &opts.out {
        cfg.out_dir = Some(o.clone());
    }
    if let Some(n) = opts.iterations {
        cfg.train.iterations = n;
    }
    let o = &opts.weights;
    let w = &mut cfg.train.weights;
    for (term, v) in [
        (Term::Zero, o.zero),
        (Term::Align, o.align),
        (Term::EikR, o.eik_r),
        (Term::EikPhi, o.eik_phi),
        (Term::Lap, o.lap),
        (Term::Phase, o.phase),
        (Term::Far, o.far),
        (Term::Normal, o.normal),
    ] {
        if let Some(v) = v {
            w.set(term, v);
        }
    }
    if let Some(v) = o.alpha_far {
        w.alpha_far = v;
    }
    if let Some(v) = o.alpha_align {
        w.alpha_align = v;
    }
    if let Some(v) = o.align_start_iter {
        w.align_start_iter = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn require_file(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{}: no such file", path.display())))
    }
}

pub fn load_cloud(path: &Path) -> Result<PointCloud, CliError> {
    require_file(path)?;
    let format = PointFormat::from_path(path)
        .ok_or_else(|| CliError::Usage(format!("{}: unsupported point format", path.display())))?;
    Ok(io::load_points(path, format)?)
}

/// A mesh, or a point cloud when the file has no faces.
enum Shape {
    Mesh(TriangleMesh),
    Points(Vec<Vec3>),
}

fn load_shape(path: &Path) -> Result<Shape, CliError> {
    require_file(path)?;
    if let Some(format) = MeshFormat::from_path(path) {
        if format == MeshFormat::Obj {
            return Ok(Shape::Mesh(io::read_mesh(path, format)?));
        }
        if let Ok(m) = io::read_mesh(path, format) {
            if !m.triangles.is_empty() {
                return Ok(Shape::Mesh(m));
            }
        }
    }
    Ok(Shape::Points(load_cloud(path)?.points))
}

fn samples_of(shape: &Shape, n: usize, seed: u64) -> Result<Vec<Vec3>, CliError> {
    match shape {
        Shape::Mesh(m) => Ok(metrics::sample_surface(m, n, seed)?),
        Shape::Points(p) => Ok(p.clone()),
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Usage(format!("{}: {e}", dir.display())))
}

fn write_out(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn reconstruct(args: &ReconstructArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    let mut cfg = resolve_config(&args.run)?;
    if let Some(i) = &args.input {
        cfg.input = Some(i.clone());
    }
    let input = cfg.input.clone().ok_or_else(|| CliError::Usage("no input point cloud given".into()))?;
    let dir = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("mpf_out"));
    cfg.out_dir = Some(dir.clone());
    let cloud = load_cloud(&input)?;
    let r = pipeline::reconstruct(&cloud, &cfg, Some(&dir), err)?;
    let mesh = pipeline::mesh_path(&dir, &cfg);
    writeln!(out, "mesh {} ({} vertices, {} triangles)", mesh.display(), r.mesh.vertices.len(), r.mesh.triangles.len())
        .ok();
    if r.mesh.is_empty() {
        return Err(CliError::Contract("extracted mesh is empty: the field has no zero crossing".into()));
    }
    Ok(())
}

fn evaluate(args: &EvaluateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let a = load_shape(&args.a)?;
    let b = load_shape(&args.b)?;
    let (name, value) = match args.mode {
        Mode::Chamfer => {
            let pa = samples_of(&a, args.samples, args.seed)?;
            let pb = samples_of(&b, args.samples, args.seed)?;
            ("chamfer", metrics::chamfer(&pa, &pb)?)
        }
        Mode::P2s => {
            let Shape::Mesh(mesh) = &b else {
                return Err(CliError::Usage(format!("{}: p2s needs a mesh reference", args.b.display())));
            };
            let points = match &a {
                Shape::Mesh(m) => m.vertices.clone(),
                Shape::Points(p) => p.clone(),
            };
            ("p2s", metrics::point_to_surface(&points, mesh)?)
        }
    };
    writeln!(out, "{}", four_significant(value)).ok();
    if let Some(csv) = &args.csv {
        write_out(csv, &format!("mode,value\n{name},{value:.9e}\n"))?;
    }
    Ok(())
}

fn slice(args: &SliceArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let plane = Plane::new(args.axis.index(), args.offset).map_err(CliError::Usage)?;
    if args.res < 2 {
        return Err(CliError::Usage("slice resolution must be at least 2".into()));
    }
    require_file(&args.checkpoint)?;
    let ck = trainer::load_checkpoint(&args.checkpoint)?;
    let kind = FieldKind::from(args.field);
    create_dir(&args.out)?;
    let img = extract::render_slice(&ck.params, plane, args.res, kind);
    let ppm = args.out.join("slice.ppm");
    let csv = args.out.join("slice.csv");
    extract::write_ppm(&img, &ppm).map_err(|e| CliError::Usage(format!("{}: {e}", ppm.display())))?;
    extract::write_slice_csv(&img, &csv).map_err(|e| CliError::Usage(format!("{}: {e}", csv.display())))?;
    writeln!(out, "slice {}", ppm.display()).ok();
    if let Some(axis) = args.probe_axis {
        let samples = extract::probe(&ck.params, args.probe_through, axis.index(), args.res, kind);
        let path = args.out.join("probe.csv");
        write_out(&path, &extract::probe_csv(&samples))?;
        let changes = samples.windows(2).filter(|w| (w[0].value < 0.0) != (w[1].value < 0.0)).count();
        writeln!(out, "probe {} ({changes} sign changes)", path.display()).ok();
    }
    Ok(())
}

fn check_grad(args: &CheckGradArgs, out: &mut dyn Write) -> Result<(), CliError> {
    if args.batch < 4 || args.hidden == 0 || args.probes == 0 {
        return Err(CliError::Usage("batch must be at least 4; hidden and probes positive".into()));
    }
    let opts = GradCheckOptions {
        seed: args.seed,
        hidden: args.hidden,
        per_set: args.batch / 4,
        probes: args.probes,
        corrupt: args.corrupt_param,
        ..Default::default()
    };
    if let Some(i) = opts.corrupt {
        if i >= crate::field::Layout::new(opts.hidden).len {
            return Err(CliError::Usage(format!("parameter index {i} out of range")));
        }
    }
    let report = gradcheck::run(&opts).map_err(|e| CliError::Contract(e.to_string()))?;
    writeln!(out, "{report}").ok();
    match report.worst_failure() {
        None => Ok(()),
        Some(f) => Err(CliError::Contract(format!(
            "{} check failed: relative error {:.3e} at {}",
            f.name, f.worst, f.location
        ))),
    }
}

/// Runs one ablation variant and returns its chamfer distance to `reference`.
pub fn ablation_variant(
    cloud: &PointCloud,
    base: &RunConfig,
    v: Variant,
    dir: Option<&Path>,
    progress: &mut dyn Write,
) -> Result<f64, CliError> {
    let mut cfg = base.clone();
    let w = cfg.train.weights.get(v.term);
    cfg.train.weights.set(v.term, w * v.multiplier);
    let r = pipeline::reconstruct(cloud, &cfg, dir, progress)?;
    if r.mesh.is_empty() {
        return Err(CliError::Contract("empty mesh".into()));
    }
    let samples = metrics::sample_surface(&r.mesh, CHAMFER_SAMPLES, cfg.train.seed)?;
    Ok(metrics::chamfer(&samples, &cloud.points)?)
}

fn ablate(args: &AblateArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    let base = resolve_config(&args.run)?;
    let cloud = match (&args.input, args.fixture) {
        (Some(p), _) => load_cloud(p)?,
        (None, Some(f)) => {
            let n = args.fixture_points;
            match f {
                Fixture::Sphere => fixtures::sphere(n, 0.5, base.train.seed),
                Fixture::Sheet => fixtures::sheet(n, 0.5, base.train.seed),
                Fixture::CubeSheet => fixtures::cube_with_sheet(n, base.train.seed),
            }
        }
        (None, None) => return Err(CliError::Usage("give an input point cloud or --fixture".into())),
    };
    let variants = if args.variants.is_empty() { standard_variants() } else { args.variants.clone() };
    let dir = base.out_dir.clone().unwrap_or_else(|| PathBuf::from("mpf_ablation"));
    create_dir(&dir)?;
    let mut csv = String::from("variant,term,multiplier,chamfer,status\n");
    for (k, v) in variants.iter().enumerate() {
        let label = v.label();
        writeln!(err, "variant {k}: {label}").ok();
        let run_dir = dir.join(format!("variant_{k:02}"));
        let row = match ablation_variant(&cloud, &base, *v, Some(&run_dir), err) {
            Ok(cd) => format!("{label},{},{},{cd:.6e},ok", v.term.name(), v.multiplier),
            Err(e) => format!("{label},{},{},,error: {}", v.term.name(), v.multiplier, e.message().replace(',', ";")),
        };
        writeln!(out, "{row}").ok();
        csv.push_str(&row);
        csv.push('\n');
    }
    write_out(&dir.join("ablation.csv"), &csv)
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = v
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
    // A pool already exists when called twice in one process; keep it.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Parses `args` (including the program name), runs the command and returns
/// the exit code. Results go to `out`, diagnostics to `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = if code == 0 { write!(out, "{e}") } else { write!(err, "{e}") };
            return code;
        }
    };
    let result = configure_threads().and_then(|()| match &cli.command {
        Command::Reconstruct(a) => reconstruct(a, out, err),
        Command::Evaluate(a) => evaluate(a, out),
        Command::Slice(a) => slice(a, out),
        Command::CheckGrad(a) => check_grad(a, out),
        Command::Ablate(a) => ablate(a, out, err),
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message());
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("mpf").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn dotted_weight_overrides() {
        let Command::Reconstruct(a) = parse(&["reconstruct", "in.xyz", "--weights.normal", "0", "--weights.align", "7"]).command
        else {
            panic!()
        };
        let cfg = resolve_config(&a.run).unwrap();
        assert_eq!(cfg.train.weights.normal, 0.0);
        assert_eq!(cfg.train.weights.align, 7.0);
        assert_eq!(cfg.train.weights.lap, 0.0004);
    }

    #[test]
    fn seed_res_and_out_override_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"resolution": 64, "train": {"seed": 3}}"#).unwrap();
        let p = path.to_str().unwrap();
        let Command::Reconstruct(a) = parse(&["reconstruct", "--config", p, "--seed", "9"]).command else { panic!() };
        let cfg = resolve_config(&a.run).unwrap();
        assert_eq!((cfg.resolution, cfg.train.seed), (64, 9));
        let Command::Reconstruct(a) = parse(&["reconstruct", "--config", p, "--res", "32", "--out", "x"]).command else {
            panic!()
        };
        let cfg = resolve_config(&a.run).unwrap();
        assert_eq!((cfg.resolution, cfg.train.seed, cfg.out_dir), (32, 3, Some(PathBuf::from("x"))));
    }

    #[test]
    fn ablation_labels() {
        let labels: Vec<String> = standard_variants().iter().map(Variant::label).collect();
        assert_eq!(
            labels,
            [
                "Default",
                "Strong alignment",
                "No alignment",
                "Strong normal constraint",
                "No normal constraint",
                "Strong Laplacian constraint",
                "No Laplacian constraint",
                "Strong phase constraint",
                "No phase constraint"
            ]
        );
        assert_eq!(parse_variant("phase=0").unwrap().label(), "No phase constraint");
        assert!(parse_variant("phase=2").is_err());
        assert!(parse_variant("bogus=0").is_err());
    }

    #[test]
    fn significant_digits() {
        assert_eq!(four_significant(0.0), "0.000");
        assert_eq!(four_significant(1.0), "1.000");
        assert_eq!(four_significant(12.3456), "12.35");
        assert_eq!(four_significant(0.00123456), "0.001235");
        assert_eq!(four_significant(98765.4), "98765");
    }

    #[test]
    fn points_parse() {
        assert_eq!(parse_point("0.1,-2,3").unwrap(), [0.1, -2.0, 3.0]);
        assert!(parse_point("1,2").is_err());
    }

    #[test]
    fn usage_errors_exit_with_two() {
        let (mut o, mut e) = (Vec::new(), Vec::new());
        assert_eq!(run(["mpf", "reconstruct", "/nonexistent/cloud.xyz"], &mut o, &mut e), 2);
        assert!(String::from_utf8_lossy(&e).contains("/nonexistent/cloud.xyz"));
        assert_eq!(run(["mpf", "frobnicate"], &mut o, &mut e), 2);
        assert_eq!(run(["mpf", "--help"], &mut o, &mut e), 0);
    }
}
