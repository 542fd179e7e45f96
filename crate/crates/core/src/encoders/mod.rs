//! Dual-stream front end: region masks and crops, the shared semantic token
//! encoder, and the full-frame motion encoder.

mod crop;
mod motion;
mod region;
mod sample;
mod semantic;

pub use crop::{crop_to_mask, extract_region_crops, RegionCrop};
pub use motion::{MotionConfig, MotionEncoder, MotionStage};
pub use region::{RegionId, NUM_REGIONS};
pub use sample::{Mask, VideoSample};
pub use semantic::{patchify, positional_encoding, SemanticConfig, SemanticEncoder};
