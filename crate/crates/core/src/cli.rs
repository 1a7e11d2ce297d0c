//! Command-line front end: `detect`, `synth` and `eval`.
//!
//! Every command returns an exit status: 0 when all outputs were written,
//! 1 with a one-line diagnostic on stderr otherwise.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::image_io::{self, GrayImage};
use crate::params::{ModelKind, ModelParams};
use crate::pipeline::{
    detect_edges, detect_edges_with_params, edge_f1, Boundary, DecodeRule, DetectConfig, Detection,
    EdgeMap, FusionRule, ScanOrder, TrainingSummary,
};
use crate::swt::Wavelet;

#[derive(Debug, Parser)]
#[command(
    name = "swt-hmm-edge",
    version,
    about = "Wavelet hidden-Markov edge detection"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Detect edges in a PGM image.
    Detect(DetectArgs),
    /// Write a synthetic test image and its ground-truth edge map.
    Synth(SynthArgs),
    /// Score an edge map against ground truth.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    /// Input image (PGM, P2 or P5).
    #[arg(long = "in", value_name = "PGM")]
    pub input: PathBuf,
    /// Output edge map; `.pgm` writes 0/255 graymap, anything else a P4 bitmap.
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// Number of wavelet scales J (at least 1).
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u32).range(1..=16))]
    pub scales: u32,
    #[arg(long, value_enum, default_value_t = ModelArg::Hmc)]
    pub model: ModelArg,
    #[arg(long, value_enum, default_value_t = WaveletArg::Haar)]
    pub wavelet: WaveletArg,
    #[arg(long, value_enum, default_value_t = FusionArg::Or)]
    pub fusion: FusionArg,
    #[arg(long = "max-iters", default_value_t = 50)]
    pub max_iters: usize,
    /// Relative log-likelihood change that ends EM.
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    /// Standard deviation of Gaussian noise added to the input first.
    #[arg(long = "noise-sigma", default_value_t = 0.0)]
    pub noise_sigma: f64,
    /// Seed for every random draw.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Decode with these parameters instead of training.
    #[arg(long = "params-in", value_name = "PATH")]
    pub params_in: Option<PathBuf>,
    /// Save the trained parameters.
    #[arg(long = "params-out", value_name = "PATH")]
    pub params_out: Option<PathBuf>,
    /// Metrics file (`key=value` lines); defaults to `<out>.metrics.txt`.
    #[arg(long, value_name = "PATH")]
    pub metrics: Option<PathBuf>,
    /// Also write the metrics as JSON.
    #[arg(long = "metrics-json", value_name = "PATH")]
    pub metrics_json: Option<PathBuf>,
    /// Model and fuse the diagonal subband too.
    #[arg(long = "include-diagonal")]
    pub include_diagonal: bool,
    #[arg(long, value_enum, default_value_t = ScanArg::Rows)]
    pub scan: ScanArg,
    #[arg(long, value_enum, default_value_t = BoundaryArg::Symmetric)]
    pub boundary: BoundaryArg,
    #[arg(long, value_enum, default_value_t = DecodeArg::Map)]
    pub decode: DecodeArg,
    /// Directory that receives every decoded state plane as a PGM.
    #[arg(long = "dump-planes", value_name = "DIR")]
    pub dump_planes: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SynthKind {
    Step,
    Ramp,
    Constant,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(value_enum)]
    pub kind: SynthKind,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    /// First high column; defaults to `width / 2`.
    #[arg(long = "edge-col")]
    pub edge_col: Option<usize>,
    #[arg(long, default_value_t = 0.0)]
    pub low: f64,
    #[arg(long, default_value_t = 1.0)]
    pub high: f64,
    /// Intensity of the constant image.
    #[arg(long, default_value_t = 0.5)]
    pub value: f64,
    /// Columns over which the ramp climbs from low to high.
    #[arg(long = "ramp-width", default_value_t = 4)]
    pub ramp_width: usize,
    #[arg(long = "noise-sigma", default_value_t = 0.0)]
    pub noise_sigma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output image (P5 PGM).
    #[arg(long, value_name = "PGM")]
    pub out: PathBuf,
    /// Ground-truth edge map; defaults to `<out stem>.truth.pbm`.
    #[arg(long, value_name = "PATH")]
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Detected edge map (PBM or PGM; nonzero is edge).
    #[arg(long, value_name = "PATH")]
    pub map: PathBuf,
    /// Ground-truth edge map.
    #[arg(long, value_name = "PATH")]
    pub truth: PathBuf,
    /// Match radius in pixels (Chebyshev distance).
    #[arg(long, default_value_t = 1)]
    pub tolerance: usize,
}

macro_rules! mirror_enum {
    ($arg:ident => $lib:ident { $($variant:ident),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
        pub enum $arg {
            $($variant,)+
        }

        impl From<$arg> for $lib {
            fn from(a: $arg) -> $lib {
                match a {
                    $($arg::$variant => $lib::$variant,)+
                }
            }
        }
    };
}

mirror_enum!(ModelArg => ModelKind { Hmc, Hmt });
mirror_enum!(WaveletArg => Wavelet { Haar });
mirror_enum!(FusionArg => FusionRule { Or, And, Majority });
mirror_enum!(ScanArg => ScanOrder { Rows, Columns });
mirror_enum!(BoundaryArg => Boundary { Symmetric, Periodic });
mirror_enum!(DecodeArg => DecodeRule { Map, Pixelwise });

impl DetectArgs {
    pub fn config(&self) -> Result<DetectConfig> {
        if self.tol.is_nan() || self.tol <= 0.0 {
            return Err(Error::Config(format!(
                "--tol must be positive, got {}",
                self.tol
            )));
        }
        check_sigma(self.noise_sigma)?;
        Ok(DetectConfig {
            scales: self.scales as usize,
            model: self.model.into(),
            wavelet: self.wavelet.into(),
            fusion: self.fusion.into(),
            max_iters: self.max_iters,
            tol: self.tol,
            include_diagonal: self.include_diagonal,
            scan: self.scan.into(),
            boundary: self.boundary.into(),
            decode: self.decode.into(),
        })
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!(
            "--noise-sigma must be >= 0, got {sigma}"
        )));
    }
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes)
        .map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))
}

fn with_context<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn is_pgm(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("pgm"))
}

fn encode_edges(map: &EdgeMap, path: &Path) -> Vec<u8> {
    let bitmap = map.to_bitmap();
    if is_pgm(path) {
        image_io::write_bitmap_pgm(&bitmap)
    } else {
        image_io::write_pbm(&bitmap)
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(OsString::from).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

/// Machine-readable form of the detect metrics.
#[derive(Debug, Serialize)]
struct DetectMetrics<'a> {
    input: String,
    width: usize,
    height: usize,
    model: String,
    scales: usize,
    wavelet: String,
    fusion: String,
    noise_sigma: f64,
    seed: u64,
    edge_count: usize,
    em_iterations: usize,
    final_log_likelihood: Option<f64>,
    training: &'a [TrainingSummary],
    /// The parameter file's `key=value` lines.
    #[serde(skip)]
    params: &'a ModelParams,
    #[serde(rename = "params")]
    params_table: BTreeMap<String, String>,
}

fn params_table(params: &ModelParams) -> BTreeMap<String, String> {
    params
        .to_lines(false)
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

fn summary_key(t: &TrainingSummary) -> String {
    match t.scale {
        Some(j) => format!("{}.{j}", t.orientation),
        None => t.orientation.to_string(),
    }
}

/// Total EM iterations (largest over trained models) and the summed final
/// log-likelihood of all trained models; `None` when nothing was trained.
fn training_totals(training: &[TrainingSummary]) -> (usize, Option<f64>) {
    let iterations = training.iter().map(|t| t.iterations).max().unwrap_or(0);
    let lls: Vec<f64> = training
        .iter()
        .filter_map(|t| t.final_log_likelihood)
        .collect();
    let ll = (!lls.is_empty()).then(|| lls.iter().sum());
    (iterations, ll)
}

fn metrics_text(m: &DetectMetrics<'_>) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "input={}", m.input);
    let _ = writeln!(out, "width={}", m.width);
    let _ = writeln!(out, "height={}", m.height);
    let _ = writeln!(out, "fusion={}", m.fusion);
    let _ = writeln!(out, "noise_sigma={}", m.noise_sigma);
    let _ = writeln!(out, "seed={}", m.seed);
    let _ = writeln!(out, "edge_count={}", m.edge_count);
    let _ = writeln!(out, "em_iterations={}", m.em_iterations);
    match m.final_log_likelihood {
        Some(ll) => {
            let _ = writeln!(out, "final_log_likelihood={ll}");
        }
        None => {
            let _ = writeln!(out, "final_log_likelihood=none");
        }
    }
    for t in m.training {
        let key = summary_key(t);
        let _ = writeln!(out, "train.{key}.flat={}", t.flat);
        let _ = writeln!(out, "train.{key}.iterations={}", t.iterations);
        let _ = writeln!(out, "train.{key}.converged={}", t.converged);
        if let Some(ll) = t.final_log_likelihood {
            let _ = writeln!(out, "train.{key}.final_log_likelihood={ll}");
        }
        let _ = writeln!(out, "train.{key}.relabeled={}", t.relabeled);
        let silent: Vec<String> = t.silent_scales.iter().map(|j| j.to_string()).collect();
        let _ = writeln!(out, "train.{key}.silent_scales={}", silent.join(","));
        let _ = writeln!(out, "train.{key}.frozen_states={}", t.frozen.len());
    }
    out.push_str(&m.params.to_lines(false));
    out
}

fn cmd_detect(args: &DetectArgs, stdout: &mut dyn Write) -> Result<()> {
    let config = args.config()?;
    let bytes = read_file(&args.input)?;
    let mut img = with_context(&args.input, image_io::read_pgm(&bytes))?;
    if args.noise_sigma > 0.0 {
        img = image_io::add_gaussian_noise(&img, args.noise_sigma, args.seed);
    }
    let detection: Detection = match &args.params_in {
        Some(path) => {
            let text = String::from_utf8(read_file(path)?)
                .map_err(|_| Error::Config(format!("{} is not UTF-8 text", path.display())))?;
            let params = with_context(path, ModelParams::from_text(&text))?;
            detect_edges_with_params(&img, &config, &params)?
        }
        None => detect_edges(&img, &config)?,
    };

    write_file(&args.out, &encode_edges(&detection.edge_map, &args.out))?;
    if let Some(path) = &args.params_out {
        write_file(path, detection.params.to_text().as_bytes())?;
    }
    if let Some(dir) = &args.dump_planes {
        fs::create_dir_all(dir)
            .map_err(|e| Error::Config(format!("cannot create {}: {e}", dir.display())))?;
        for s in &detection.states {
            let map = EdgeMap::new(
                s.states.width(),
                s.states.height(),
                s.states.labels().iter().map(|&l| l == 1).collect(),
            )?;
            let path = dir.join(format!("states_{}_{}.pgm", s.orientation, s.scale));
            write_file(&path, &image_io::write_bitmap_pgm(&map.to_bitmap()))?;
        }
    }

    let (em_iterations, final_log_likelihood) = training_totals(&detection.training);
    let metrics = DetectMetrics {
        input: args.input.display().to_string(),
        width: img.width(),
        height: img.height(),
        model: config.model.to_string(),
        scales: config.scales,
        wavelet: config.wavelet.to_string(),
        fusion: config.fusion.to_string(),
        noise_sigma: args.noise_sigma,
        seed: args.seed,
        edge_count: detection.edge_map.edge_count(),
        em_iterations,
        final_log_likelihood,
        training: &detection.training,
        params: &detection.params,
        params_table: params_table(&detection.params),
    };
    let metrics_path = args
        .metrics
        .clone()
        .unwrap_or_else(|| sibling(&args.out, ".metrics.txt"));
    write_file(&metrics_path, metrics_text(&metrics).as_bytes())?;
    if let Some(path) = &args.metrics_json {
        let json = serde_json::to_string_pretty(&metrics)
            .map_err(|e| Error::Config(format!("cannot encode metrics: {e}")))?;
        write_file(path, format!("{json}\n").as_bytes())?;
    }
    writeln!(stdout, "edge_count={}", metrics.edge_count)?;
    Ok(())
}

fn default_truth_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(OsString::from).unwrap_or_default();
    let mut name = stem;
    name.push(".truth.pbm");
    out.with_file_name(name)
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    check_sigma(args.noise_sigma)?;
    if args.width == 0 || args.height == 0 {
        return Err(Error::Config(format!(
            "--width and --height must be positive, got {}x{}",
            args.width, args.height
        )));
    }
    let edge_col = args.edge_col.unwrap_or(args.width / 2);
    let (img, truth) = match args.kind {
        SynthKind::Step => (
            image_io::make_step_image(args.width, args.height, edge_col, args.low, args.high)
                .map_err(|e| Error::Config(format!("invalid --edge-col/--low/--high: {e}")))?,
            EdgeMap::step_truth(args.width, args.height, edge_col),
        ),
        SynthKind::Ramp => (
            image_io::make_ramp_image(
                args.width,
                args.height,
                edge_col,
                args.ramp_width,
                args.low,
                args.high,
            )
            .map_err(|e| Error::Config(format!("invalid ramp geometry: {e}")))?,
            EdgeMap::step_truth(args.width, args.height, edge_col),
        ),
        SynthKind::Constant => (
            GrayImage::filled(args.width, args.height, args.value)
                .map_err(|e| Error::Config(format!("invalid --value: {e}")))?,
            EdgeMap::empty(args.width, args.height),
        ),
    };
    let img = if args.noise_sigma > 0.0 {
        image_io::add_gaussian_noise(&img, args.noise_sigma, args.seed)
    } else {
        img
    };
    write_file(&args.out, &image_io::write_pgm(&img, 255))?;
    let truth_path = args
        .truth
        .clone()
        .unwrap_or_else(|| default_truth_path(&args.out));
    write_file(&truth_path, &encode_edges(&truth, &truth_path))?;
    Ok(())
}

fn read_edge_map(path: &Path) -> Result<EdgeMap> {
    let bytes = read_file(path)?;
    let bitmap = with_context(path, image_io::read_bitmap(&bytes))?;
    EdgeMap::from_bitmap(bitmap)
}

fn cmd_eval(args: &EvalArgs, stdout: &mut dyn Write) -> Result<()> {
    let map = read_edge_map(&args.map)?;
    let truth = read_edge_map(&args.truth)?;
    let score = edge_f1(&map, &truth, args.tolerance)?;
    writeln!(stdout, "precision={}", score.precision)?;
    writeln!(stdout, "recall={}", score.recall)?;
    writeln!(stdout, "f1={}", score.f1)?;
    writeln!(stdout, "edge_count={}", map.edge_count())?;
    Ok(())
}

/// Parses `args` (program name first) and runs the command, writing normal
/// output to `stdout` and diagnostics to `stderr`. Returns the exit status.
pub fn run_with<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(stdout, "{text}");
                    0
                }
                _ => {
                    let _ = write!(stderr, "{text}");
                    1
                }
            };
        }
    };
    let result = match &cli.command {
        Command::Detect(a) => cmd_detect(a, stdout),
        Command::Synth(a) => cmd_synth(a),
        Command::Eval(a) => cmd_eval(a, stdout),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            1
        }
    }
}

/// [`run_with`] on the process's standard streams.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    // Unlocked handles: worker threads log to stderr while the command runs.
    run_with(args, &mut std::io::stdout(), &mut std::io::stderr())
}
