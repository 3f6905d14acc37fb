//! Image I/O, LR synthesis, patch sampling, configuration and checkpoints.

pub mod checkpoint;
pub mod config;
mod image;
mod patches;
mod resize;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::RunConfig;
pub use image::{decode_ppm, encode_ppm, load_dir, load_image, save_image, Image};
pub use patches::{augment, sample_patches, Augment, Dataset, ImagePair, Patch, PatchPair};
pub use resize::{bicubic_downsample, cubic, downsample_plane, resample_weights};
