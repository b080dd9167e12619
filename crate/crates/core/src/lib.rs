//! Attention-guided counterfactual image generation for a small VQA model:
//! synthetic shape scenes, the classifier, Grad-CAM attention, an inpainting
//! generator conditioned on question and answer embeddings, a patch
//! discriminator, training loops and evaluation.

pub mod config;
pub mod discriminator;
pub mod error;
pub mod eval;
pub mod generator;
pub mod gradcam;
pub mod imaging;
pub mod nn;
pub mod objectives;
pub mod synth;
pub mod training;
pub mod vqa;

pub use error::{Error, Result};
