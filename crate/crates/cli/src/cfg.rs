//! Subcommand configuration: JSON files with serde defaults, flag
//! overrides applied afterwards, and the run record echoed into every
//! artifact directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use fodkit::mlp::Activation;
use fodkit::signal::REFERENCE_LAMBDAS;
use fodkit::sphere::DEFAULT_SIGMA;
use fodkit::synth::{DatasetScope, TPolicy};
use fodkit::{HeatmapConfig, LossKind, OptimizerKind, DEFAULT_BATCH_CAP};

/// Failures split by exit code: bad configuration (2) versus a run
/// that could not finish (1).
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl From<fodkit::Error> for CliError {
    fn from(e: fodkit::Error) -> Self {
        match e {
            // The message is reused bare; main() adds the prefix.
            fodkit::Error::Config(msg) => CliError::Config(msg),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Parses a JSON config, or falls back to defaults when no file is
/// given. Parse failures point at the file and position.
pub fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => load_json(p),
    }
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Dataset or volume generation settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateCfg {
    /// Number of labeled samples (dataset output only).
    pub count: usize,
    pub t: TPolicy,
    pub snr_range: [f64; 2],
    /// Per-component spatial perturbation inside a patch.
    pub sigma_r: f64,
    pub lambdas: [f64; 3],
    pub seed: u64,
    pub scope: DatasetScope,
    /// Measured protocol files; omit both to synthesize one.
    pub bvals: Option<PathBuf>,
    pub bvecs: Option<PathBuf>,
    /// Synthetic protocol shape, ignored when bvals/bvecs are given.
    pub directions: usize,
    pub bvalue: f64,
    /// Unweighted channels prepended to volume protocols.
    pub b0_channels: usize,
    pub protocol_seed: u64,
    /// Existing dictionary file; omit to build one.
    pub dictionary: Option<PathBuf>,
    pub dictionary_m: usize,
    pub dictionary_seed: u64,
    /// Label blur width in radians.
    pub sigma: f64,
    /// Set to emit a noisy test volume instead of a training dataset.
    pub volume_dims: Option<[usize; 3]>,
    pub s0: f64,
}

impl Default for SimulateCfg {
    fn default() -> Self {
        SimulateCfg {
            count: 100_000,
            t: TPolicy::Fixed(3),
            snr_range: [20.0, 30.0],
            sigma_r: 0.14,
            lambdas: REFERENCE_LAMBDAS,
            seed: 0,
            scope: DatasetScope::Voxel,
            bvals: None,
            bvecs: None,
            directions: 150,
            bvalue: 2000.0,
            b0_channels: 1,
            protocol_seed: 0,
            dictionary: None,
            dictionary_m: 362,
            dictionary_seed: 0,
            sigma: DEFAULT_SIGMA,
            volume_dims: None,
            s0: 1000.0,
        }
    }
}

/// Direction dictionary construction settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DictCfg {
    pub m: usize,
    pub seed: u64,
}

impl Default for DictCfg {
    fn default() -> Self {
        DictCfg { m: 362, seed: 0 }
    }
}

/// Training settings; unset fields inherit the per-scope recipe.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainCmdCfg {
    pub dataset: Option<PathBuf>,
    pub loss: Option<LossKind>,
    pub optimizer: Option<OptimizerKind>,
    pub learning_rate: Option<f64>,
    pub lr_decay: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub seed: u64,
    pub validation_fraction: Option<f64>,
    pub output_activation: Activation,
    pub dropout: f64,
    /// Overrides the preset widths; first and last must still match
    /// the dataset row length and dictionary size.
    pub layer_dims: Option<Vec<usize>>,
}

impl Default for TrainCmdCfg {
    fn default() -> Self {
        TrainCmdCfg {
            dataset: None,
            loss: None,
            optimizer: None,
            learning_rate: None,
            lr_decay: None,
            batch_size: None,
            epochs: None,
            seed: 0,
            validation_fraction: None,
            output_activation: Activation::Sigmoid,
            dropout: 0.2,
            layer_dims: None,
        }
    }
}

/// Model inference settings; paths may instead come from flags.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictCfg {
    pub model: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub bvals: Option<PathBuf>,
    pub bvecs: Option<PathBuf>,
    pub batch_cap: usize,
    /// Keep going when the volume protocol hash differs from the one
    /// the model was trained on.
    pub allow_protocol_mismatch: bool,
}

impl Default for PredictCfg {
    fn default() -> Self {
        PredictCfg {
            model: None,
            input: None,
            bvals: None,
            bvecs: None,
            batch_cap: DEFAULT_BATCH_CAP,
            allow_protocol_mismatch: false,
        }
    }
}

/// Non-negative least squares baseline settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineCfg {
    pub input: Option<PathBuf>,
    pub bvals: Option<PathBuf>,
    pub bvecs: Option<PathBuf>,
    pub dictionary: Option<PathBuf>,
    pub lambdas: [f64; 3],
    /// Append a direction-free column with the mean eigenvalue.
    pub isotropic: bool,
}

impl Default for BaselineCfg {
    fn default() -> Self {
        BaselineCfg {
            input: None,
            bvals: None,
            bvecs: None,
            dictionary: None,
            lambdas: REFERENCE_LAMBDAS,
            isotropic: false,
        }
    }
}

/// One coefficient map to score; `seconds` is carried into the
/// summary so timing measured elsewhere can ride along.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionEntry {
    pub name: String,
    pub coefficients: PathBuf,
    #[serde(default)]
    pub seconds: f64,
}

/// Ground-truth evaluation settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalCfg {
    pub dictionary: Option<PathBuf>,
    /// Per-voxel truth file written by `simulate` in volume mode.
    pub truth: Option<PathBuf>,
    pub predictions: Vec<PredictionEntry>,
    pub sigma: f64,
    pub success_threshold_deg: f64,
    pub rel_peak_threshold: f64,
    pub min_separation_deg: f64,
}

impl Default for EvalCfg {
    fn default() -> Self {
        EvalCfg {
            dictionary: None,
            truth: None,
            predictions: Vec::new(),
            sigma: DEFAULT_SIGMA,
            success_threshold_deg: 15.0,
            rel_peak_threshold: 0.1,
            min_separation_deg: 15.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatmapMethod {
    Model,
    Nnls,
}

/// Crossing-geometry error grid settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeatmapCmdCfg {
    pub method: HeatmapMethod,
    pub model: Option<PathBuf>,
    pub dictionary: Option<PathBuf>,
    pub bvals: Option<PathBuf>,
    pub bvecs: Option<PathBuf>,
    pub directions: usize,
    pub bvalue: f64,
    pub protocol_seed: u64,
    pub sigma: f64,
    /// Eigenvalues for the NNLS signal dictionary.
    pub lambdas: [f64; 3],
    pub allow_protocol_mismatch: bool,
    /// Grid geometry and noise sampling; omitted fields and a missing
    /// block both fall back to the built-in 19x19 default.
    pub grid: Option<HeatmapConfig>,
}

impl Default for HeatmapCmdCfg {
    fn default() -> Self {
        HeatmapCmdCfg {
            method: HeatmapMethod::Model,
            model: None,
            dictionary: None,
            bvals: None,
            bvecs: None,
            directions: 150,
            bvalue: 2000.0,
            protocol_seed: 0,
            sigma: DEFAULT_SIGMA,
            lambdas: REFERENCE_LAMBDAS,
            allow_protocol_mismatch: false,
            grid: None,
        }
    }
}

/// Hyperparameter grid sweep settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepCfg {
    pub dataset: Option<PathBuf>,
    pub repeats: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: Option<f64>,
    pub lr_decay: Option<f64>,
    pub validation_fraction: f64,
    pub dropout: f64,
    pub seed: u64,
    pub layer_dims: Option<Vec<usize>>,
    /// Adds a frozen zero-learning-rate run that plateau detection
    /// must flag.
    pub zero_lr_control: bool,
}

impl Default for SweepCfg {
    fn default() -> Self {
        SweepCfg {
            dataset: None,
            repeats: 5,
            epochs: 30,
            batch_size: 256,
            learning_rate: None,
            lr_decay: None,
            validation_fraction: 0.1,
            dropout: 0.2,
            seed: 0,
            layer_dims: None,
            zero_lr_control: true,
        }
    }
}

/// Reproducibility record dropped into every artifact directory. No
/// timestamps: a rerun with the same inputs writes identical bytes.
#[derive(Debug, Serialize)]
pub struct RunRecord<'a, C: Serialize> {
    pub tool: &'static str,
    pub version: &'static str,
    pub data_format: u32,
    pub subcommand: &'static str,
    pub threads: Option<usize>,
    pub config: &'a C,
    pub outputs: &'a [String],
}

pub fn write_run_record<C: Serialize>(
    out: &Path,
    subcommand: &'static str,
    threads: Option<usize>,
    config: &C,
    outputs: &[String],
) -> CliResult<()> {
    let record = RunRecord {
        tool: "fodkit",
        version: env!("CARGO_PKG_VERSION"),
        data_format: crate::DATA_FORMAT_VERSION,
        subcommand,
        threads,
        config,
        outputs,
    };
    let text = serde_json::to_string_pretty(&record)
        .map_err(|e| CliError::Runtime(format!("run record serialization: {e}")))?;
    let path = out.join("run.json");
    fs::write(&path, text + "\n")
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}
