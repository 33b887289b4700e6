//! lil is a desk-scale lab for a single experimental question: does the latent
//! space of a style-based image generator, trained only on RGB renders, contain
//! fixed offsets that turn a generated image into one of its intrinsic images
//! (surface normals, depth, albedo, shading, segmentation masks)?
//!
//! Everything needed to pose and score that question lives here: a procedural
//! Lambertian renderer that doubles as ground-truth oracle, a small style-based
//! generator with hand-rolled backprop, supervised training, latent offset
//! search, teachers that supply search targets, and an evaluation layer with
//! fixed file formats so runs can be reproduced byte for byte.
//!
//! Array conventions: images and per-pixel maps are `ndarray` arrays in
//! `(H, W, C)` or `(H, W)` order, f32, with RGB values in `[0, 1]`. The neural
//! network internals use `(C, H, W)`; conversions happen at module boundaries.

pub mod codec;
pub mod config;
pub mod error;
pub mod eval;
pub mod generator;
pub mod geom;
pub mod io;
pub mod nn;
pub mod procgen;
pub mod regressor;
pub mod report;
pub mod rng;
pub mod search;
pub mod teachers;
pub mod trainer;

pub mod cli;

pub use error::{LilError, Result};
