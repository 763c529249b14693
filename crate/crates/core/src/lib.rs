//! Canopy height regression from multi-spectral satellite rasters.
//!
//! The crate covers the whole pipeline: the `.rcube` raster container and a
//! synthetic scene generator ([`raster`]), band selection and normalization
//! ([`preprocess`]), a small CPU tensor library with hand-written backward
//! passes ([`nn`]), the stride-1 separable-convolution regressor ([`model`]),
//! patch-based training ([`train`]), tiled inference with multi-temporal
//! fusion ([`infer`]) and the evaluation metrics ([`eval`]).

pub mod par;
pub mod tensor;
pub mod raster;
pub mod preprocess;
pub mod nn;
pub mod model;
pub mod train;
pub mod eval;
pub mod infer;
pub mod experiment;

pub use tensor::{Real, ShapeError, Tensor, Tensor4};
