//! Reconstruction of faces hidden behind masks.
//!
//! The stack runs in three stages after a gender gate: 98-point landmark
//! heatmaps, binary segmentation of the mask object, and a landmark-guided
//! GAN inpainter trained separately per gender. Everything needed to train
//! the stages from scratch on synthetic paired data lives here too.

pub mod error;
pub mod gender;
pub mod imaging;
pub mod inpaint;
pub mod landmarks;
pub mod nn;
pub mod pipeline;
pub mod segmentation;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};
pub use imaging::{BinarySegmentationMap, ImageTensor};
pub use landmarks::{HeatmapStack, LandmarkSet, NUM_LANDMARKS};
pub use synthdata::{Gender, Manifest};
