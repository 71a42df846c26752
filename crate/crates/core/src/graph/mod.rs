//! Layer graph for the truncated Inception-v3 classifier, parameter
//! accounting, weight storage and the portable weight file.

mod exec;
mod format;
mod inception;
mod params;
mod spec;
mod weights;

pub use exec::{forward, forward_range, forward_to_endpoint, run_on_tape};
pub use format::{
    decode_weights, encode_weights, export_weights, load_weights, load_with_graph, read_meta,
    TensorEntry, WeightFileMeta, MAGIC,
};
pub use inception::{
    attach_head, build_backbone, build_backbone_with_eps, build_classifier, DEFAULT_DROPOUT_RATE,
    DEFAULT_HIDDEN_UNITS, DEFAULT_INPUT_SIZE, NUM_CLASSES,
};
pub use params::{layer_census, param_report, LayerParams, ParamReport, TrainablePolicy};
pub use spec::{
    group_thousands, Activation, GraphSpec, HeadConfig, LayerKind, LayerSpec, WeightRole,
    WeightSpec,
};
pub use weights::{glorot_limit, init_random, WeightEntry, WeightStore};
