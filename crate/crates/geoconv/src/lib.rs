//! Convolution engine with positional input channels (Conv2D, CoordConv2D,
//! GeoConv2D), exact forward/backward passes, analytic verification of the
//! layer identities, synthetic benchmark datasets, and a seeded benchmark
//! harness with CSV reports.

pub mod bench;
pub mod datasets;
pub mod error;
pub mod geopos;
pub mod layers;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod verify;

pub use error::{GeoError, Result};
pub use layers::LayerVariant;
pub use tensor::{ConvGeometry, Tensor};
