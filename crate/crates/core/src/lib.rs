//! Change-detection damage mapping for paired pre/post-event imagery.
//!
//! The crate covers the full desk-scale workflow: georeferenced raster and
//! vector handling ([`geo`]), chip dataset assembly ([`dataset`]), a
//! two-stream encoder/decoder segmentation network with exact
//! backpropagation ([`net`]), training and fine-tuning ([`train`]), tiled
//! whole-scene inference with instance extraction ([`infer`]), and a
//! deterministic synthetic scene generator ([`synth`]).
//!
//! Everything is deterministic given a seed: scene generation, parameter
//! initialization, shuffling, and the numeric kernels all produce
//! bit-identical results across runs, regardless of the configured thread
//! count (see [`parallel`]).

pub mod dataset;
pub mod geo;
pub mod infer;
pub mod net;
pub mod parallel;
pub mod synth;
pub mod train;

pub use dataset::{Chip, ChipSet, Role, Scene, Window};
pub use geo::{FeatureCollection, GeoTransform, ImageRaster, MaskRaster, Polygon};
pub use net::{build_model, Model, ModelConfig, Tensor};
