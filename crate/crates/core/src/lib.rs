//! Cervical cytology toolkit: slide tiling, cell copy-paste augmentation
//! (plain paste, alpha blend, Poisson seamless cloning), k-NN evaluation of
//! embeddings, and a top-k attention MIL trainer whose slide and tile scores
//! share one linear classifier.

pub mod c3p;
pub mod error;
pub mod features;
pub mod knn;
pub mod metrics;
pub mod mil;
pub mod morphology;
pub mod pipeline;
pub mod poisson;
pub mod raster;
pub mod synthetic;
pub mod tiler;
pub mod util;

pub use error::{Error, Result};
pub use raster::{BinaryMask, RasterImage};
