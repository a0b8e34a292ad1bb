//! Grayscale rasters and everything that touches pixels: contrast
//! enhancement, resampling, cropping, flip augmentation and the synthetic
//! spine generator.

mod clahe;
mod image;
mod resample;
mod synth;

pub use clahe::{clahe, ClaheParams};
pub use image::GrayImage;
pub use resample::{
    crop_patch, crop_patch_into, hflip, resize_bilinear, resize_to_height, window_origin, PatchSpec,
};
pub use synth::{synth_generate, SynthConfig, SyntheticSample, SYNTH_VERSION};
