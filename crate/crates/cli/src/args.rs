//! Command-line definition and `--config` merging.
//!
//! A config file is a JSON object whose keys are flag names (either `-` or
//! `_` separated) of the chosen subcommand or the global flags. Values are
//! strings, numbers, booleans (`true` sets a switch) or arrays for
//! repeatable flags. Flags given on the command line win.

use std::ffi::OsString;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::parser::ValueSource;
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use crater_lpm::counting_model::CountingModelParams;
use crater_lpm::scores::{AxisKey, DEFAULT_MARGIN};
use crater_lpm::synth::SceneGeometry;
use crater_lpm::templates::{Measure, TemplateKind};
use serde_json::Value;

#[derive(Parser, Debug)]
#[command(name = "craterlpm", version, about = "Contamination-corrected crater counts with linear Poisson models")]
pub struct Cli {
    /// Root random seed.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    /// JSON file of flag values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic scene: scene.pgm, annotations.csv, scene.json.
    Synth(SynthArgs),
    /// Draw regions from the Poisson-Beta counting model: simulate.csv.
    Simulate(SimulateArgs),
    /// Build crater templates from true-labelled annotations.
    Template(TemplateArgs),
    /// Best-match scores of annotations against templates: matches.csv.
    Match(MatchArgs),
    /// Bin match scores into histograms: histograms.json, spec.json.
    Hist(HistArgs),
    /// Train a linear Poisson model from labelled histograms: model.json.
    Train(TrainArgs),
    /// Contamination-corrected totals and per-band counts: correct.json, sfd.csv.
    Correct(CorrectArgs),
    /// Scaling factors from reference counts: calibration.json.
    Calibrate(CalibrateArgs),
    /// Bootstrap validation trials: validation_summary.csv, validation_trials.csv.
    Validate(ValidateArgs),
}

fn geometry_default() -> SceneGeometry {
    SceneGeometry::default()
}

fn params_default() -> CountingModelParams {
    CountingModelParams::default()
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = geometry_default().width)]
    pub width: usize,
    #[arg(long, default_value_t = geometry_default().height)]
    pub height: usize,
    /// Expected number of true craters.
    #[arg(long, default_value_t = params_default().lambda_true)]
    pub lambda_true: f64,
    /// Expected number of false features.
    #[arg(long, default_value_t = params_default().lambda_false)]
    pub lambda_false: f64,
    #[arg(long, default_value_t = geometry_default().diameter_min)]
    pub diameter_min: f64,
    #[arg(long, default_value_t = geometry_default().diameter_max)]
    pub diameter_max: f64,
    #[arg(long, default_value_t = geometry_default().max_degradation)]
    pub max_degradation: f64,
    #[arg(long, default_value_t = geometry_default().contrast_min)]
    pub contrast_min: f64,
    #[arg(long, default_value_t = geometry_default().contrast_max)]
    pub contrast_max: f64,
    #[arg(long, default_value_t = geometry_default().noise_sigma)]
    pub noise_sigma: f64,
    #[arg(long, default_value_t = geometry_default().background_level)]
    pub background: f64,
    /// Direction of the incoming light in degrees.
    #[arg(long, default_value_t = geometry_default().sun_azimuth)]
    pub sun_azimuth: f64,
    /// 8 or 16.
    #[arg(long, default_value_t = 8)]
    pub bit_depth: u8,
    /// Render this scene description instead of drawing a random one.
    #[arg(long)]
    pub scene: Option<PathBuf>,
}

impl SynthArgs {
    pub fn geometry(&self) -> SceneGeometry {
        SceneGeometry {
            width: self.width,
            height: self.height,
            diameter_min: self.diameter_min,
            diameter_max: self.diameter_max,
            max_degradation: self.max_degradation,
            contrast_min: self.contrast_min,
            contrast_max: self.contrast_max,
            noise_sigma: self.noise_sigma,
            background_level: self.background,
            sun_azimuth: self.sun_azimuth,
        }
    }
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = params_default().lambda_true)]
    pub lambda_true: f64,
    #[arg(long, default_value_t = params_default().lambda_false)]
    pub lambda_false: f64,
    #[arg(long, default_value_t = params_default().alpha_t)]
    pub alpha_t: f64,
    #[arg(long, default_value_t = params_default().beta_t)]
    pub beta_t: f64,
    #[arg(long, default_value_t = params_default().alpha_f)]
    pub alpha_f: f64,
    #[arg(long, default_value_t = params_default().beta_f)]
    pub beta_f: f64,
    #[arg(long, default_value_t = 1000)]
    pub regions: usize,
}

impl SimulateArgs {
    pub fn params(&self) -> CountingModelParams {
        CountingModelParams {
            lambda_true: self.lambda_true,
            lambda_false: self.lambda_false,
            alpha_t: self.alpha_t,
            beta_t: self.beta_t,
            alpha_f: self.alpha_f,
            beta_f: self.beta_f,
        }
    }
}

#[derive(Args, Debug)]
pub struct TemplateArgs {
    /// PGM raster.
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [TemplateKind::Appearance, TemplateKind::Derivative])]
    pub kind: Vec<TemplateKind>,
    /// Pad patches that reach outside the raster with their mean instead of skipping them.
    #[arg(long)]
    pub pad_mean: bool,
}

#[derive(Args, Debug)]
pub struct MatchArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub annotations: PathBuf,
    /// Template JSON; repeat for several templates.
    #[arg(long, required = true)]
    pub template: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = [Measure::Mse, Measure::Dp])]
    pub measure: Vec<Measure>,
    /// Only use templates of this kind.
    #[arg(long)]
    pub template_kind: Option<TemplateKind>,
    /// Smoothing widths in pixels; defaults to the 16-level schedule.
    #[arg(long, value_delimiter = ',')]
    pub schedule: Vec<f64>,
    #[arg(long)]
    pub pad_mean: bool,
}

#[derive(Args, Debug)]
pub struct HistArgs {
    /// Match CSV; repeat to combine files.
    #[arg(long, required = true)]
    pub matches: Vec<PathBuf>,
    /// Score axes, e.g. `grey_dp` or `grey_mse,grad_dp`.
    #[arg(long, value_delimiter = ',', required_unless_present = "spec")]
    pub axes: Vec<AxisKey>,
    /// Bins per axis (one value for all axes, or one per axis).
    #[arg(long, value_delimiter = ',')]
    pub bins: Vec<usize>,
    #[arg(long, default_value_t = DEFAULT_MARGIN)]
    pub margin: f64,
    /// Reuse the binning of an earlier spec.json instead of deriving one.
    #[arg(long, conflicts_with_all = ["axes", "bins"])]
    pub spec: Option<PathBuf>,
    /// Keep only annotations with this label (`true`, `false`, `unknown` or `all`).
    #[arg(long, default_value = "all")]
    pub label: String,
    /// Split the annotations round-robin (by sorted id) into this many histograms.
    #[arg(long, default_value_t = 1)]
    pub groups: usize,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Histogram JSON (single or array) of true-class examples; repeatable.
    #[arg(long, required = true)]
    pub true_hist: Vec<PathBuf>,
    #[arg(long, required = true)]
    pub false_hist: Vec<PathBuf>,
    #[arg(long, default_value_t = 1.2)]
    pub chi2_target: f64,
    #[arg(long, default_value_t = 10)]
    pub max_components: usize,
    /// Fixed number of components per class.
    #[arg(long)]
    pub components: Option<usize>,
    #[arg(long, default_value_t = 5)]
    pub restarts: usize,
    #[arg(long, default_value_t = 10_000)]
    pub max_iterations: usize,
}

#[derive(Args, Debug)]
pub struct CorrectArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Histogram JSON to decompose.
    #[arg(long, conflicts_with = "matches", required_unless_present = "matches")]
    pub hist: Option<PathBuf>,
    /// Match CSV; repeatable. Labels are ignored.
    #[arg(long)]
    pub matches: Vec<PathBuf>,
    /// Annotation CSV giving diameters for a per-band size-frequency distribution.
    #[arg(long, requires = "band_edges", requires = "matches")]
    pub annotations: Option<PathBuf>,
    /// Diameter band edges in pixels, increasing.
    #[arg(long, value_delimiter = ',', requires = "annotations")]
    pub band_edges: Vec<f64>,
    /// calibration.json to apply to the per-band counts.
    #[arg(long, requires = "annotations")]
    pub calibration: Option<PathBuf>,
    #[arg(long, default_value_t = 10_000)]
    pub max_iterations: usize,
}

#[derive(Args, Debug)]
pub struct CalibrateArgs {
    /// Diameter band edges in pixels, increasing.
    #[arg(long, value_delimiter = ',', required = true)]
    pub band_edges: Vec<f64>,
    /// Corrected SFD CSV (`band_lo,band_hi,count,sigma`) of a calibration region; repeatable.
    #[arg(long, required = true)]
    pub measured: Vec<PathBuf>,
    /// Two-counter reference mark-up CSV of the same region, in the same order as `--measured`.
    #[arg(long, required = true)]
    pub reference: Vec<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ValidateArgs {
    #[arg(long, default_value_t = 1000)]
    pub trials: usize,
    /// Test-to-training data ratios.
    #[arg(long, value_delimiter = ',', default_values_t = [0.01, 0.1, 1.0, 10.0, 100.0])]
    pub ratios: Vec<f64>,
    #[arg(long, default_value_t = 180.0)]
    pub region_width: f64,
    #[arg(long, default_value_t = 180.0)]
    pub region_height: f64,
    /// Target false fraction.
    #[arg(long, default_value_t = 0.25)]
    pub contamination: f64,
    #[arg(long, default_value_t = 100)]
    pub training_rectangles: usize,
    #[arg(long, default_value_t = 8)]
    pub training_groups: usize,
    #[arg(long, default_value_t = 32)]
    pub bins_1d: usize,
    #[arg(long, default_value_t = 16)]
    pub bins_2d: usize,
    #[arg(long, default_value_t = DEFAULT_MARGIN)]
    pub margin: f64,
    /// Representations to run, e.g. `grey_dp,grey_mse+grad_dp`; all ten by default.
    #[arg(long, value_delimiter = ',')]
    pub representations: Vec<String>,
    #[arg(long, default_value_t = 1.2)]
    pub chi2_target: f64,
    #[arg(long, default_value_t = 10)]
    pub max_components: usize,
    #[arg(long)]
    pub components: Option<usize>,
    #[arg(long, default_value_t = 5)]
    pub restarts: usize,
    /// Side of the synthetic pool scene in pixels.
    #[arg(long, default_value_t = 3000)]
    pub pool_size: usize,
    /// Expected annotations in the synthetic pool.
    #[arg(long, default_value_t = 2500.0)]
    pub pool_annotations: f64,
    #[arg(long, default_value_t = 150.0)]
    pub template_examples: f64,
    #[arg(long, default_value_t = 0.02)]
    pub contamination_tolerance: f64,
    /// Keep the rendered positions instead of re-placing annotations independently.
    #[arg(long)]
    pub keep_layout: bool,
    /// Labelled match CSVs covering all four axes, used instead of a synthetic pool.
    #[arg(long, requires_all = ["annotations", "width", "height"])]
    pub matches: Vec<PathBuf>,
    #[arg(long, requires = "matches")]
    pub annotations: Option<PathBuf>,
    #[arg(long, requires = "matches")]
    pub width: Option<f64>,
    #[arg(long, requires = "matches")]
    pub height: Option<f64>,
}

fn scalar(key: &str, v: &Value) -> Result<String> {
    match v {
        Value::String(s) => Ok(s.clone()),
        Value::Number(n) => Ok(n.to_string()),
        Value::Bool(b) => Ok(b.to_string()),
        _ => bail!("config key `{key}`: expected a string, number or boolean"),
    }
}

/// Parses `argv`, merging in `--config` values for flags not given on the
/// command line.
pub fn parse(mut argv: Vec<OsString>) -> Result<Cli> {
    let mut cmd = Cli::command();
    cmd.build();
    let matches = cmd.clone().try_get_matches_from(&argv)?;
    let Some(path) = matches.get_one::<PathBuf>("config") else {
        return Ok(Cli::from_arg_matches(&matches)?);
    };
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    let sub_cmd = cmd.find_subcommand(name).expect("parsed subcommand exists");
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let obj: serde_json::Map<String, Value> =
        serde_json::from_str(&text).with_context(|| format!("config {} must be a JSON object", path.display()))?;
    for (key, value) in &obj {
        let id = key.replace('-', "_");
        let Some(arg) = sub_cmd.get_arguments().find(|a| a.get_id().as_str() == id) else {
            bail!("config key `{key}` is not a flag of `{name}`");
        };
        if id == "config" {
            bail!("config files cannot include other config files");
        }
        if sub.value_source(&id) == Some(ValueSource::CommandLine) {
            continue;
        }
        let long = arg.get_long().expect("all flags are long");
        let flag_takes_value = arg.get_num_args().map(|r| r.takes_values()).unwrap_or(true);
        match value {
            Value::Null => {}
            Value::Bool(b) if !flag_takes_value => {
                if *b {
                    argv.push(format!("--{long}").into());
                }
            }
            Value::Array(items) => {
                for it in items {
                    argv.push(format!("--{long}={}", scalar(key, it)?).into());
                }
            }
            v => argv.push(format!("--{long}={}", scalar(key, v)?).into()),
        }
    }
    let merged = cmd.try_get_matches_from(&argv)?;
    Ok(Cli::from_arg_matches(&merged)?)
}
