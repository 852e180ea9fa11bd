//! Checkpoints, model files, run configuration and datasets.

mod checkpoint;
mod config;
mod dataset;
mod model;

pub use checkpoint::{tensor_text, text_tensor, Checkpoint, DType, Entry, FORMAT_VERSION, MAGIC};
pub use dataset::{generate, generate_splits, Dataset, ShapeSpec, DATASET_MAGIC, NUM_SHAPES, SHAPE_NAMES};
pub use config::RunConfig;
pub use model::ModelFile;
