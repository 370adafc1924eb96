//! Optical flow from all-pairs matching costs.
//!
//! The pipeline: two images are encoded into feature maps, their all-pairs
//! correlation forms a 4D cost volume, each pixel's 2D cost map is
//! summarized into a small set of latent tokens, a transformer refines the
//! tokens jointly across pixels, and a recurrent decoder queries the result
//! while iteratively updating a flow field that is upsampled to full
//! resolution by learned convex combination. Everything runs on a small
//! reverse-mode tape (`tensor`) so the whole model trains from scratch with
//! no external runtime.
//!
//! See the `examples/` directory for end-to-end usage of each stage.

pub mod cli;
pub mod config;
pub mod cost_decoder;
pub mod cost_encoder;
pub mod cost_volume;
pub mod data;
pub mod encoders;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod tiling;
pub mod train;
