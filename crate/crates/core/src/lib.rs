//! Intravoxel fiber structure from diffusion MRI: multi-tensor signal
//! simulation, labeled patch synthesis over a spherical dictionary,
//! small dense networks trained on those patches, whole-volume
//! inference, an NNLS baseline, and exact EMD evaluation.

pub mod emd;
pub mod error;
pub mod eval;
pub mod geom;
pub mod infer;
pub mod mlp;
pub mod model_store;
pub mod nifti;
pub mod nnls;
pub mod optim;
pub mod protocol;
pub mod signal;
pub mod sphere;
pub mod synth;
pub mod train;
pub mod volume;

pub use emd::{emd, transport_min_cost};
pub use error::{Error, Result};
pub use eval::{
    angular_error, heatmap, heatmap_cell_config, summarize, AngularReport, HeatmapConfig,
    HeatmapGrid, MethodSummary, MetricRecord, Summary,
};
pub use geom::{axial_angle, Mat3, Quat, Vec3};
pub use infer::{predict_neighborhood, predict_voxelwise, DEFAULT_BATCH_CAP};
pub use mlp::{
    init_model, neighborhood_preset_dims, voxel_preset_dims, Activation, DropoutMask, Gradients,
    Layer, LossKind, MlpNet, Scalar,
};
pub use model_store::{load_model, save_model, ModelManifest, ModelMode, FLATTEN_ORDER};
pub use nifti::{load_nifti, save_nifti};
pub use nnls::{
    build_signal_dictionary, nnls_solve, predict_nnls, NnlsProblem, NnlsReport, NnlsSolution,
    SignalDictionary,
};
pub use optim::{decayed_lr, OptimizerKind, OptimizerState};
pub use protocol::{load_protocol, save_protocol, AcquisitionProtocol};
pub use signal::{
    add_rician_noise, multi_tensor_signal, single_tensor_signal, tensor_matrix, FiberConfig,
    TensorSpec, REFERENCE_LAMBDAS,
};
pub use sphere::{
    build_dictionary, encode_labels, extract_peaks, gaussian_weight_matrix, load_dictionary,
    nearest_atom, save_dictionary, GaussianWeights, Peak, PeakSet, SphereDictionary,
    DEFAULT_SIGMA, LABEL_CLIP,
};
pub use synth::{
    generate_dataset, generate_patch, load_dataset, sample_rng, save_dataset, synthesize_volume,
    Dataset, DatasetManifest, DatasetScope, PatchSample, SynthConfig, TPolicy, TruthRecord,
    VolumeSynthConfig, PATCH_CENTER, PATCH_EDGE, PATCH_VOXELS,
};
pub use train::{
    full_grid, sweep, train, EpochStats, SweepReport, SweepRun, SweepVariant, TrainConfig,
    TrainHistory,
};
pub use volume::{normalize_signals, Volume4D, VoxelMask, EPSILON_S0};
