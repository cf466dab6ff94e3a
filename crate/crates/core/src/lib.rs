//! Online radar-camera extrinsic calibration on synthetic scenes.
//!
//! The pipeline rasterizes a radar cloud and an image-derived depth map into
//! paired frontal-view and bird's-eye-view information maps, matches features
//! across modalities with cross-attention under explicit matching
//! supervision, fuses the two perspectives, and regresses an iterative 6-DoF
//! correction to the extrinsic transform.

pub mod blob;
pub mod cli;
pub mod config;
pub mod eval;
pub mod geometry;
pub mod kernels;
pub mod fragments;
pub mod fusion;
pub mod matchnet;
pub mod model;
pub mod raster;
pub mod supervision;
pub mod train;
pub mod synthdata;
