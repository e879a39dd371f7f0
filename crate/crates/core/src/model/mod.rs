//! The fusion detector: configuration, network assembly, training loop,
//! checkpointing, and cached volume inference.

mod checkpoint;
mod config;
mod infer;
mod net;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{BackbonePreset, InitScheme, ModelConfig};
pub use infer::{infer_volume, FeatureCache};
pub use net::{
    backbone_forward, backbone_plan, build_model, combine_losses, compute_image_features, conv6_forward,
    detect_from_features, forward_infer, forward_train_sample, forward_train_with_targets, head_forward,
    leaf_params, normalize_intensity, normalized_image, rpn_forward, rpn_outputs, run_backbone_rpn, GraphParams,
    ImageFeatures, LossValues, Model, NetPlan, ParamStore, RpnRows, RpnStage, SampleLosses, TrainTargets,
};
pub use train::{
    pad_to_stride, read_trace_csv, train, write_trace_csv, Dataset, DatasetSample, TraceRow, TrainOptions,
    TrainReport,
};
