//! Blind HDR image quality assessment.
//!
//! The model disentangles a distorted image's noise magnitude from its
//! perceptual error resistance with two small convolutional networks joined
//! by a tanh mixing function and trained in two stages. Besides the model,
//! the crate ships HDR file I/O (PFM, Radiance RGBE), perceptual-domain
//! preprocessing (PU encoding, tone mapping), correlation metrics with the
//! content-disjoint split protocol, per-patch map rendering, and a
//! synthetic-oracle dataset generator for end-to-end verification.
//!
//! The runnable entry points live under `examples/`; the `hdriqa` binary
//! exposes the same pipeline as subcommands.

pub mod error;
pub mod eval;
pub mod hdr_io;
pub mod maps;
pub mod model;
pub mod nn;
pub mod preprocess;
pub(crate) mod util;

pub use error::{Error, Result};
pub use hdr_io::{load_manifest, luminance, read_image, DatasetManifest, HdrImage};
pub use maps::{make_grating, probe_resistance, render_heatmap, synth_dataset, QualityMap};
pub use model::serialize::{load_bundle, save_bundle};
pub use model::train::{train_stage1, train_stage2, train_two_stage, TrainConfig};
pub use model::{mix, ModelBundle, ModelConfig};
