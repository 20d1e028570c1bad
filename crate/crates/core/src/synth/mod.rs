//! Synthetic non-ideal haze data with exact ground truth.
//!
//! A scene is an ideal clean image `J` and depth `z`. A "photographed clean"
//! image `I_c` carries residual haze (`beta_c > 0`), and the training input
//! `I_h` is hazed again from `I_c`, as real dataset pipelines do.

mod dataset;
mod hztr;
mod scene;

pub use dataset::{
    generate_dataset, make_pair, read_dataset, sample_params, write_dataset, Dataset, DatasetConfig, DatasetManifest,
    PairedSample, ParamRanges, SampleRecord, Split, MANIFEST_VERSION,
};
pub use hztr::{decode_hztr, encode_hztr, read_hztr, write_hztr, HZTR_MAGIC, HZTR_VERSION};
pub use scene::{gen_clean, gen_depth, ContentKind, DepthKind, SceneSpec};
