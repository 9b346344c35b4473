//! Frame manifests, fps sampling, synthetic data and flip augmentation.

mod augment;
mod manifest;
mod synthetic;

pub use augment::{apply_flips, augment, flip_horizontal, flip_vertical, FlipFlags, FlipRecord};
pub use manifest::{sample_fps, FrameManifest, FrameRecord};
pub use synthetic::{generate_synthetic, SyntheticDataset, SyntheticSpec};
