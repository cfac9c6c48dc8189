//! Subcommand execution: resolves configuration against flags, drives
//! the library pipeline, and writes each command's artifact directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use fodkit::eval::{angular_error, heatmap, summarize, HeatmapConfig, MetricRecord, Predictor};
use fodkit::geom::Vec3;
use fodkit::mlp::{init_model, neighborhood_preset_dims, voxel_preset_dims, Activation, MlpNet};
use fodkit::model_store::{load_model, save_model, ModelManifest, ModelMode, FLATTEN_ORDER};
use fodkit::nnls::{build_signal_dictionary, predict_nnls, NnlsProblem};
use fodkit::protocol::{load_protocol, save_protocol, AcquisitionProtocol};
use fodkit::signal::FiberConfig;
use fodkit::sphere::{
    build_dictionary, encode_labels, extract_peaks, gaussian_weight_matrix, load_dictionary,
    random_unit_vector, save_dictionary, SphereDictionary,
};
use fodkit::synth::{
    generate_dataset, load_dataset, save_dataset, synthesize_volume, DatasetScope, SynthConfig,
    TruthRecord, VolumeSynthConfig,
};
use fodkit::train::{full_grid, sweep, train, SweepVariant, TrainConfig};
use fodkit::volume::normalize_signals;
use fodkit::{emd, load_nifti, predict_neighborhood, predict_voxelwise, save_nifti};

use crate::cfg::{self, CliError, CliResult, HeatmapMethod};
use crate::{Cli, Command, ModeArg};

pub fn dispatch(cli: Cli) -> CliResult<()> {
    if let Some(t) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::Config(format!("--threads: {e}")))?;
    }
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    let threads = cli.threads;
    match cli.command {
        Command::Simulate { config } => {
            let mut c: cfg::SimulateCfg = cfg::load_config(config.as_deref())?;
            if let Some(seed) = cli.seed {
                c.seed = seed;
            }
            if let Some(mode) = cli.mode {
                c.scope = mode_scope(mode);
            }
            simulate(&out, threads, c)
        }
        Command::Dict { config } => {
            let mut c: cfg::DictCfg = cfg::load_config(config.as_deref())?;
            if let Some(seed) = cli.seed {
                c.seed = seed;
            }
            dict(&out, threads, c)
        }
        Command::Train { config } => {
            let mut c: cfg::TrainCmdCfg = cfg::load_config(config.as_deref())?;
            if let Some(seed) = cli.seed {
                c.seed = seed;
            }
            run_train(&out, threads, c, cli.mode)
        }
        Command::Predict { config, model, input, bvals, bvecs } => {
            let mut c: cfg::PredictCfg = cfg::load_config(config.as_deref())?;
            merge_path(&mut c.model, model);
            merge_path(&mut c.input, input);
            merge_path(&mut c.bvals, bvals);
            merge_path(&mut c.bvecs, bvecs);
            predict(&out, threads, c, cli.mode)
        }
        Command::BaselineNnls { config, input, bvals, bvecs, dictionary } => {
            let mut c: cfg::BaselineCfg = cfg::load_config(config.as_deref())?;
            merge_path(&mut c.input, input);
            merge_path(&mut c.bvals, bvals);
            merge_path(&mut c.bvecs, bvecs);
            merge_path(&mut c.dictionary, dictionary);
            baseline(&out, threads, c)
        }
        Command::Eval { config } => {
            let c: cfg::EvalCfg = cfg::load_config(config.as_deref())?;
            eval(&out, threads, c)
        }
        Command::Heatmap { config, model, grid } => {
            let mut c: cfg::HeatmapCmdCfg = cfg::load_config(config.as_deref())?;
            merge_path(&mut c.model, model);
            if let Some(spec) = grid.as_deref() {
                c.grid = Some(resolve_grid(spec)?);
            }
            if let Some(seed) = cli.seed {
                c.grid = Some(HeatmapConfig {
                    seed,
                    ..c.grid.clone().unwrap_or_default()
                });
            }
            run_heatmap(&out, threads, c)
        }
        Command::Sweep { config } => {
            let mut c: cfg::SweepCfg = cfg::load_config(config.as_deref())?;
            if let Some(seed) = cli.seed {
                c.seed = seed;
            }
            run_sweep(&out, threads, c)
        }
    }
}

fn merge_path(slot: &mut Option<PathBuf>, flag: Option<PathBuf>) {
    if flag.is_some() {
        *slot = flag;
    }
}

fn mode_scope(mode: ModeArg) -> DatasetScope {
    match mode {
        ModeArg::Voxel => DatasetScope::Voxel,
        ModeArg::Neighborhood => DatasetScope::Neighborhood,
    }
}

fn mode_model(mode: ModeArg) -> ModelMode {
    match mode {
        ModeArg::Voxel => ModelMode::Voxel,
        ModeArg::Neighborhood => ModelMode::Neighborhood,
    }
}

fn scope_name(scope: DatasetScope) -> &'static str {
    match scope {
        DatasetScope::Voxel => "voxel",
        DatasetScope::Neighborhood => "neighborhood",
    }
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    write_text(path, &(text + "\n"))
}

fn required<T: Clone>(slot: &Option<T>, what: &str) -> CliResult<T> {
    slot.clone()
        .ok_or_else(|| CliError::Config(format!("{what} is required (config field or flag)")))
}

/// Loads a measured protocol when both files are given, otherwise
/// draws `directions` uniform gradients on a fixed stream. The b=0
/// channels never consume random draws, so the diffusion-weighted
/// part is the same with or without them.
fn resolve_protocol(
    bvals: &Option<PathBuf>,
    bvecs: &Option<PathBuf>,
    directions: usize,
    bvalue: f64,
    b0_channels: usize,
    seed: u64,
) -> CliResult<AcquisitionProtocol> {
    match (bvals, bvecs) {
        (Some(a), Some(b)) => Ok(load_protocol(a, b)?),
        (None, None) => {
            if directions == 0 {
                return Err(CliError::Config(
                    "synthetic protocol needs at least one direction".into(),
                ));
            }
            if !(bvalue > 0.0) {
                return Err(CliError::Config(format!("bvalue {bvalue} must be positive")));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut gradients = vec![[0.0; 3]; b0_channels];
            let mut bvalues = vec![0.0; b0_channels];
            for _ in 0..directions {
                gradients.push(random_unit_vector(&mut rng).to_array());
                bvalues.push(bvalue);
            }
            Ok(AcquisitionProtocol::new(gradients, bvalues)?)
        }
        _ => Err(CliError::Config("bvals and bvecs must be given together".into())),
    }
}

fn resolve_dictionary(path: &Option<PathBuf>, m: usize, seed: u64) -> CliResult<SphereDictionary> {
    match path {
        Some(p) => Ok(load_dictionary(p)?),
        None => Ok(build_dictionary(m, seed)?),
    }
}

fn simulate(out: &Path, threads: Option<usize>, c: cfg::SimulateCfg) -> CliResult<()> {
    let volume = c.volume_dims.is_some();
    let b0 = if volume { c.b0_channels } else { 0 };
    let proto = resolve_protocol(&c.bvals, &c.bvecs, c.directions, c.bvalue, b0, c.protocol_seed)?;
    let dict = resolve_dictionary(&c.dictionary, c.dictionary_m, c.dictionary_seed)?;
    ensure_dir(out)?;
    let mut outputs: Vec<String> = Vec::new();

    if let Some(dims) = c.volume_dims {
        let vcfg = VolumeSynthConfig {
            dims: (dims[0], dims[1], dims[2]),
            lambdas: c.lambdas,
            snr_range: c.snr_range,
            t_policy: c.t,
            s0: c.s0,
            seed: c.seed,
        };
        let (vol, truth) = synthesize_volume(&proto, &vcfg)?;
        save_nifti(&out.join("dwi.nii"), &vol)?;
        write_json(&out.join("truth.json"), &truth)?;
        save_protocol(&proto, &out.join("protocol.bvals"), &out.join("protocol.bvecs"))?;
        save_dictionary(&dict, &out.join("dictionary.json"))?;
        outputs.extend(
            ["dwi.nii", "truth.json", "protocol.bvals", "protocol.bvecs", "dictionary.json"]
                .map(String::from),
        );
        println!(
            "volume {}x{}x{}, {} channels ({} unweighted) -> {}",
            dims[0],
            dims[1],
            dims[2],
            proto.n(),
            proto.b0_indices().len(),
            out.display()
        );
    } else {
        let ds_proto = proto.dwi_only();
        if ds_proto.n() == 0 {
            return Err(CliError::Config("protocol has no diffusion-weighted entries".into()));
        }
        let weights = gaussian_weight_matrix(&dict, c.sigma)?;
        let scfg = SynthConfig {
            lambdas: c.lambdas,
            snr_range: c.snr_range,
            sigma_r: c.sigma_r,
            t_policy: c.t,
            master_seed: c.seed,
            count: c.count,
        };
        let ds = generate_dataset(&ds_proto, &dict, &weights, &scfg, c.scope)?;
        save_dataset(&ds, out)?;
        save_dictionary(&dict, &out.join("dictionary.json"))?;
        save_protocol(&ds_proto, &out.join("protocol.bvals"), &out.join("protocol.bvecs"))?;
        outputs.extend(
            [
                "manifest.json",
                "signals.bin",
                "labels.bin",
                "truth.json",
                "dictionary.json",
                "protocol.bvals",
                "protocol.bvecs",
            ]
            .map(String::from),
        );
        println!(
            "{} {} samples, row length {}, {} atoms -> {}",
            ds.manifest.count,
            scope_name(c.scope),
            ds.row_len(),
            ds.manifest.m,
            out.display()
        );
    }
    cfg::write_run_record(out, "simulate", threads, &c, &outputs)
}

fn dict(out: &Path, threads: Option<usize>, c: cfg::DictCfg) -> CliResult<()> {
    let dict = build_dictionary(c.m, c.seed)?;
    ensure_dir(out)?;
    save_dictionary(&dict, &out.join("dictionary.json"))?;
    println!(
        "m={} max_nearest={:.2}deg min_pairwise={:.2}deg converged={} checksum={}",
        dict.m(),
        dict.max_nearest_neighbor_angle().to_degrees(),
        dict.min_pairwise_angle().to_degrees(),
        dict.converged,
        &dict.checksum()[..12]
    );
    let outputs = vec!["dictionary.json".to_string()];
    cfg::write_run_record(out, "dict", threads, &c, &outputs)
}

#[derive(Serialize)]
struct TrainReport {
    mode: &'static str,
    rows: usize,
    final_train_loss: f64,
    final_val_loss: f64,
    plateaued: bool,
}

fn run_train(
    out: &Path,
    threads: Option<usize>,
    c: cfg::TrainCmdCfg,
    mode: Option<ModeArg>,
) -> CliResult<()> {
    let dataset_dir = required(&c.dataset, "dataset")?;
    let ds = load_dataset(&dataset_dir)?;
    let scope = ds.manifest.scope;
    if let Some(m) = mode {
        if mode_scope(m) != scope {
            return Err(CliError::Config(format!(
                "--mode {} conflicts with the dataset scope {}; rows fix the input width",
                scope_name(mode_scope(m)),
                scope_name(scope)
            )));
        }
    }
    let mut tc = match scope {
        DatasetScope::Voxel => TrainConfig::voxel_defaults(),
        DatasetScope::Neighborhood => TrainConfig::neighborhood_defaults(),
    };
    if let Some(v) = c.loss {
        tc.loss = v;
    }
    if let Some(v) = c.optimizer {
        tc.optimizer = v;
    }
    if let Some(v) = c.learning_rate {
        tc.learning_rate = v;
    }
    if let Some(v) = c.lr_decay {
        tc.lr_decay = v;
    }
    if let Some(v) = c.batch_size {
        tc.batch_size = v;
    }
    if let Some(v) = c.epochs {
        tc.epochs = v;
    }
    if let Some(v) = c.validation_fraction {
        tc.validation_fraction = v;
    }
    tc.seed = c.seed;
    tc.validate()?;

    let (n, m) = (ds.manifest.n, ds.manifest.m);
    let dims = c.layer_dims.clone().unwrap_or_else(|| match scope {
        DatasetScope::Voxel => voxel_preset_dims(n, m),
        DatasetScope::Neighborhood => neighborhood_preset_dims(n, m),
    });
    if dims.first() != Some(&ds.row_len()) {
        return Err(CliError::Config(format!(
            "first layer width {:?} does not match the dataset row length {}",
            dims.first(),
            ds.row_len()
        )));
    }
    if dims.last() != Some(&m) {
        return Err(CliError::Config(format!(
            "last layer width {:?} does not match the dictionary size {m}",
            dims.last()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut net: MlpNet<f32> =
        init_model(&dims, Activation::Relu, c.output_activation, c.dropout, &mut rng)?;
    let history = train(&mut net, &ds.signals, &ds.labels, ds.manifest.count, &tc)?;

    let manifest = ModelManifest {
        layer_dims: dims,
        hidden_activation: Activation::Relu.tag().to_string(),
        output_activation: c.output_activation.tag().to_string(),
        dropout_rate: c.dropout,
        mode: match scope {
            DatasetScope::Voxel => ModelMode::Voxel,
            DatasetScope::Neighborhood => ModelMode::Neighborhood,
        },
        protocol_hash: ds.manifest.protocol_checksum.clone(),
        dictionary_m: m,
        dictionary_checksum: ds.manifest.dictionary_checksum.clone(),
        flatten_order: FLATTEN_ORDER.to_string(),
    };
    ensure_dir(out)?;
    save_model(&net, &manifest, &out.join("model"))?;
    write_text(&out.join("history.csv"), &history.to_csv())?;
    let last = history.epochs.last().expect("training ran at least one epoch");
    write_json(
        &out.join("train_report.json"),
        &TrainReport {
            mode: scope_name(scope),
            rows: ds.manifest.count,
            final_train_loss: last.train_loss,
            final_val_loss: last.val_loss,
            plateaued: history.plateaued(),
        },
    )?;
    println!(
        "{} model, {} rows, final train loss {:.6e}, val loss {:.6e}{}",
        scope_name(scope),
        ds.manifest.count,
        last.train_loss,
        last.val_loss,
        if history.plateaued() { " (plateaued)" } else { "" }
    );
    let outputs = ["model/manifest.json", "model/weights.bin", "history.csv", "train_report.json"]
        .map(String::from)
        .to_vec();
    cfg::write_run_record(out, "train", threads, &c, &outputs)
}

#[derive(Serialize)]
struct PredictReport {
    mode: &'static str,
    voxels_total: usize,
    voxels_predicted: usize,
    seconds: f64,
}

fn predict(
    out: &Path,
    threads: Option<usize>,
    c: cfg::PredictCfg,
    mode: Option<ModeArg>,
) -> CliResult<()> {
    let model_dir = required(&c.model, "model")?;
    let input = required(&c.input, "input volume")?;
    let bvals = required(&c.bvals, "bvals")?;
    let bvecs = required(&c.bvecs, "bvecs")?;

    let (net, manifest) = load_model(&model_dir)?;
    if let Some(m) = mode {
        if mode_model(m) != manifest.mode {
            return Err(CliError::Config(format!(
                "--mode conflicts with the stored model mode; the manifest says {:?}",
                manifest.mode
            )));
        }
    }
    let proto = load_protocol(&bvals, &bvecs)?;
    let vol = load_nifti(&input)?;
    let (dwi, _s0, mask) = normalize_signals(&vol, &proto)?;
    if dwi.channels() != manifest.signals_per_voxel() {
        return Err(CliError::Runtime(format!(
            "model consumes {} channels per voxel, volume provides {}",
            manifest.signals_per_voxel(),
            dwi.channels()
        )));
    }
    let hash = proto.dwi_only().checksum();
    if hash != manifest.protocol_hash && !c.allow_protocol_mismatch {
        return Err(CliError::Runtime(format!(
            "volume protocol checksum {} differs from the training protocol {}; \
             set allow_protocol_mismatch to force",
            &hash[..12],
            &manifest.protocol_hash[..12]
        )));
    }

    let start = Instant::now();
    let coeffs = match manifest.mode {
        ModelMode::Voxel => predict_voxelwise(&net, &dwi, Some(&mask), c.batch_cap)?,
        ModelMode::Neighborhood => predict_neighborhood(&net, &dwi, Some(&mask), c.batch_cap)?,
    };
    let seconds = start.elapsed().as_secs_f64();

    ensure_dir(out)?;
    save_nifti(&out.join("coefficients.nii"), &coeffs)?;
    let report = PredictReport {
        mode: match manifest.mode {
            ModelMode::Voxel => "voxel",
            ModelMode::Neighborhood => "neighborhood",
        },
        voxels_total: coeffs.voxel_count(),
        voxels_predicted: mask.count_included(),
        seconds,
    };
    write_json(&out.join("predict_report.json"), &report)?;
    println!(
        "{} prediction over {}/{} voxels in {:.2}s -> {}",
        report.mode,
        report.voxels_predicted,
        report.voxels_total,
        seconds,
        out.display()
    );
    let outputs = ["coefficients.nii", "predict_report.json"].map(String::from).to_vec();
    cfg::write_run_record(out, "predict", threads, &c, &outputs)
}

#[derive(Serialize)]
struct BaselineReport {
    atoms: usize,
    voxels_solved: usize,
    voxels_capped: usize,
    seconds: f64,
}

fn baseline(out: &Path, threads: Option<usize>, c: cfg::BaselineCfg) -> CliResult<()> {
    let input = required(&c.input, "input volume")?;
    let bvals = required(&c.bvals, "bvals")?;
    let bvecs = required(&c.bvecs, "bvecs")?;
    let dict_path = required(&c.dictionary, "dictionary")?;

    let dict = load_dictionary(&dict_path)?;
    let proto = load_protocol(&bvals, &bvecs)?;
    let vol = load_nifti(&input)?;
    let (dwi, _s0, mask) = normalize_signals(&vol, &proto)?;
    let sigdict = build_signal_dictionary(&proto.dwi_only(), &dict, c.lambdas, c.isotropic)?;
    let (coeffs, report) = predict_nnls(&dwi, &sigdict, Some(&mask))?;

    ensure_dir(out)?;
    save_nifti(&out.join("coefficients.nii"), &coeffs)?;
    write_json(
        &out.join("report.json"),
        &BaselineReport {
            atoms: sigdict.m,
            voxels_solved: report.solved_voxels,
            voxels_capped: report.capped_voxels,
            seconds: report.seconds,
        },
    )?;
    println!(
        "nnls over {} voxels ({} capped) with {} atoms in {:.2}s -> {}",
        report.solved_voxels,
        report.capped_voxels,
        sigdict.m,
        report.seconds,
        out.display()
    );
    let outputs = ["coefficients.nii", "report.json"].map(String::from).to_vec();
    cfg::write_run_record(out, "baseline-nnls", threads, &c, &outputs)
}

fn eval(out: &Path, threads: Option<usize>, c: cfg::EvalCfg) -> CliResult<()> {
    let dict_path = required(&c.dictionary, "dictionary")?;
    let truth_path = required(&c.truth, "truth")?;
    if c.predictions.is_empty() {
        return Err(CliError::Config("predictions list is empty".into()));
    }
    let dict = load_dictionary(&dict_path)?;
    let weights = gaussian_weight_matrix(&dict, c.sigma)?;
    let truth: Vec<TruthRecord> = cfg::load_json(&truth_path)?;
    let min_sep = c.min_separation_deg.to_radians();
    let m = dict.m();

    let mut records = Vec::with_capacity(c.predictions.len());
    for entry in &c.predictions {
        let vol = load_nifti(&entry.coefficients)?;
        if vol.channels() != m {
            return Err(CliError::Runtime(format!(
                "'{}' has {} channels, dictionary has {m} atoms",
                entry.name,
                vol.channels()
            )));
        }
        if vol.voxel_count() != truth.len() {
            return Err(CliError::Runtime(format!(
                "'{}' has {} voxels, truth lists {}",
                entry.name,
                vol.voxel_count(),
                truth.len()
            )));
        }
        // Voxels with no coefficient mass (masked background) are
        // skipped rather than scored as zero.
        let scored: Vec<Option<(f64, Vec<f64>, usize, usize)>> = (0..truth.len())
            .into_par_iter()
            .map(|v| -> fodkit::Result<Option<(f64, Vec<f64>, usize, usize)>> {
                let raw = &vol.data[v * m..(v + 1) * m];
                let sum: f64 = raw.iter().map(|&x| x as f64).sum();
                if !(sum > 0.0) {
                    return Ok(None);
                }
                let coeffs: Vec<f64> = raw.iter().map(|&x| x as f64 / sum).collect();
                let rec = &truth[v];
                let config = FiberConfig::new(
                    rec.alphas.clone(),
                    rec.pdds.iter().map(|&p| Vec3::from_array(p)).collect(),
                )?;
                let label = encode_labels(&dict, &weights, &config);
                let distance = emd(&dict, &coeffs, &label)?;
                let peaks = extract_peaks(&dict, &coeffs, c.rel_peak_threshold, min_sep);
                let report = angular_error(&config, &peaks);
                Ok(Some((distance, report.matched, report.missed, report.spurious)))
            })
            .collect::<fodkit::Result<_>>()?;

        let mut emd_values = Vec::new();
        let mut angular = Vec::new();
        let mut missed = 0;
        let mut spurious = 0;
        let mut skipped = 0;
        for cell in scored {
            match cell {
                Some((d, matched, miss, spur)) => {
                    emd_values.push(d);
                    angular.extend(matched);
                    missed += miss;
                    spurious += spur;
                }
                None => skipped += 1,
            }
        }
        if emd_values.is_empty() {
            return Err(CliError::Runtime(format!(
                "'{}' has no voxel with positive coefficient mass",
                entry.name
            )));
        }
        println!("{}: scored {} voxels, skipped {}", entry.name, emd_values.len(), skipped);
        records.push(MetricRecord {
            method: entry.name.clone(),
            emd: emd_values,
            angular,
            missed,
            spurious,
            seconds: entry.seconds,
        });
    }

    let summary = summarize(&records, c.success_threshold_deg)?;
    ensure_dir(out)?;
    write_text(&out.join("summary.csv"), &summary.to_csv())?;
    write_text(&out.join("summary.json"), &(summary.to_json()? + "\n"))?;
    print!("{}", summary.to_csv());
    let outputs = ["summary.csv", "summary.json"].map(String::from).to_vec();
    cfg::write_run_record(out, "eval", threads, &c, &outputs)
}

/// L1-normalizes a nonnegative coefficient row so it can enter a mass
/// transport comparison.
fn l1_normalized(mut x: Vec<f64>) -> fodkit::Result<Vec<f64>> {
    let sum: f64 = x.iter().sum();
    if !(sum > 0.0) {
        return Err(fodkit::Error::Solver(
            "prediction produced no positive coefficient mass".into(),
        ));
    }
    for v in &mut x {
        *v /= sum;
    }
    Ok(x)
}

fn resolve_grid(spec: &str) -> CliResult<HeatmapConfig> {
    if spec == "default" {
        Ok(HeatmapConfig::default())
    } else {
        cfg::load_json(Path::new(spec))
    }
}

fn run_heatmap(out: &Path, threads: Option<usize>, c: cfg::HeatmapCmdCfg) -> CliResult<()> {
    let dict_path = required(&c.dictionary, "dictionary")?;
    let dict = load_dictionary(&dict_path)?;
    let weights = gaussian_weight_matrix(&dict, c.sigma)?;
    let grid = c.grid.clone().unwrap_or_default();
    let proto = resolve_protocol(&c.bvals, &c.bvecs, c.directions, c.bvalue, 0, c.protocol_seed)?
        .dwi_only();
    if proto.n() == 0 {
        return Err(CliError::Config("protocol has no diffusion-weighted entries".into()));
    }

    // Both predictors return unit-mass coefficient rows; the grid cell
    // then compares them to the encoded truth by mass transport.
    let loaded;
    let problem;
    let predictor: Box<Predictor<'_>> = match c.method {
        HeatmapMethod::Model => {
            let model_dir = required(&c.model, "model")?;
            loaded = load_model(&model_dir)?;
            let (net, manifest) = &loaded;
            if manifest.mode != ModelMode::Voxel {
                return Err(CliError::Config(
                    "heatmap drives single-voxel signals; the model is a neighborhood model".into(),
                ));
            }
            if manifest.signals_per_voxel() != proto.n() {
                return Err(CliError::Runtime(format!(
                    "model consumes {} channels, protocol provides {}",
                    manifest.signals_per_voxel(),
                    proto.n()
                )));
            }
            if manifest.dictionary_checksum != dict.checksum() {
                return Err(CliError::Runtime(
                    "dictionary checksum differs from the one the model was trained against; \
                     use the dictionary saved beside the training dataset"
                        .into(),
                ));
            }
            if manifest.protocol_hash != proto.checksum() && !c.allow_protocol_mismatch {
                return Err(CliError::Runtime(format!(
                    "protocol checksum {} differs from the training protocol {}; \
                     set allow_protocol_mismatch to force",
                    &proto.checksum()[..12],
                    &manifest.protocol_hash[..12]
                )));
            }
            Box::new(move |signal: &[f64]| {
                let row: Vec<f32> = signal.iter().map(|&v| v as f32).collect();
                let raw = net.forward_inference(&row)?;
                l1_normalized(raw.into_iter().map(|v| (v as f64).max(0.0)).collect())
            })
        }
        HeatmapMethod::Nnls => {
            let sigdict = build_signal_dictionary(&proto, &dict, c.lambdas, false)?;
            problem = NnlsProblem::from_signal_dictionary(&sigdict)?;
            Box::new(move |signal: &[f64]| {
                let solution = problem.solve(signal)?;
                l1_normalized(solution.x)
            })
        }
    };

    let result = heatmap(&*predictor, &proto, &dict, &weights, &grid)?;
    ensure_dir(out)?;
    write_text(&out.join("heatmap.csv"), &result.to_csv())?;
    write_text(&out.join("heatmap.svg"), &result.to_svg())?;
    let cells = result.mean.len();
    let mean = result.mean.iter().sum::<f64>() / cells as f64;
    println!(
        "{} cells ({}x{}), mean transport error {:.4} -> {}",
        cells,
        grid.axis1_deg.len(),
        grid.axis2_deg.len(),
        mean,
        out.display()
    );
    let outputs = ["heatmap.csv", "heatmap.svg"].map(String::from).to_vec();
    let resolved = cfg::HeatmapCmdCfg { grid: Some(grid), ..c };
    cfg::write_run_record(out, "heatmap", threads, &resolved, &outputs)
}

fn run_sweep(out: &Path, threads: Option<usize>, c: cfg::SweepCfg) -> CliResult<()> {
    let dataset_dir = required(&c.dataset, "dataset")?;
    let ds = load_dataset(&dataset_dir)?;
    let scope = ds.manifest.scope;
    let mut base = match scope {
        DatasetScope::Voxel => TrainConfig::voxel_defaults(),
        DatasetScope::Neighborhood => TrainConfig::neighborhood_defaults(),
    };
    base.epochs = c.epochs;
    base.batch_size = c.batch_size;
    base.validation_fraction = c.validation_fraction;
    base.seed = c.seed;
    if let Some(v) = c.learning_rate {
        base.learning_rate = v;
    }
    if let Some(v) = c.lr_decay {
        base.lr_decay = v;
    }
    base.validate()?;

    let (n, m) = (ds.manifest.n, ds.manifest.m);
    let dims = c.layer_dims.clone().unwrap_or_else(|| match scope {
        DatasetScope::Voxel => voxel_preset_dims(n, m),
        DatasetScope::Neighborhood => neighborhood_preset_dims(n, m),
    });
    if dims.first() != Some(&ds.row_len()) || dims.last() != Some(&m) {
        return Err(CliError::Config(format!(
            "layer dims {dims:?} do not span dataset rows {} -> {m} atoms",
            ds.row_len()
        )));
    }

    let mut variants = full_grid(&base);
    if c.zero_lr_control {
        variants.push(SweepVariant {
            name: "control-zero-lr".into(),
            output_activation: Activation::Sigmoid,
            config: TrainConfig { learning_rate: 0.0, ..base.clone() },
        });
    }
    let report = sweep(
        &ds.signals,
        &ds.labels,
        ds.manifest.count,
        &dims,
        c.dropout,
        &variants,
        c.repeats,
        c.seed,
    )?;

    ensure_dir(out)?;
    write_text(&out.join("sweep.csv"), &report.to_csv())?;
    for variant in &variants {
        let runs: Vec<_> = report.runs.iter().filter(|r| r.variant == variant.name).collect();
        let best = runs
            .iter()
            .filter_map(|r| r.history.epochs.last())
            .map(|e| e.val_loss)
            .fold(f64::INFINITY, f64::min);
        let flagged = runs.iter().filter(|r| r.plateaued).count();
        println!(
            "{}: best val loss {:.6e} over {} repeats, {} plateaued",
            variant.name,
            best,
            runs.len(),
            flagged
        );
    }
    let outputs = ["sweep.csv"].map(String::from).to_vec();
    cfg::write_run_record(out, "sweep", threads, &c, &outputs)
}
