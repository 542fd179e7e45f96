//! Deterministic region-localised synthetic clips and their file format.

mod config;
mod generate;
mod io;

pub use config::{make_imbalanced, quadrant_masks, ClassSpec, DatasetConfig, MotionKind, Placement, RegionLayout};
pub use generate::{class_histogram, envelope, generate_dataset, generate_sample, pattern_vector, signal_mask};
pub use io::{
    load_dataset, load_sidecar, read_dataset, save_dataset, save_sidecar, sidecar_path, write_dataset, DatasetSidecar,
    DATASET_MAGIC, DATASET_VERSION,
};
