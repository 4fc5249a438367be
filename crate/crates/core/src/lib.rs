//! Translation of monocular images into bird's-eye-view semantic maps,
//! posed as one sequence-to-sequence problem per image column: each vertical
//! scanline is encoded by a 1D transformer and decoded into a polar ray of
//! BEV features, which are resampled into a rectilinear grid and segmented
//! into per-class occupancy. Includes soft and monotonic (infinite-lookback)
//! attention, a synthetic pinhole-scene dataset, and training/evaluation on
//! top of a small reverse-mode autodiff tape.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod geometry;
pub mod image_io;
pub mod metrics;
pub mod model;
pub mod monotonic;
pub mod numerics;
pub mod params;
pub mod synthdata;
pub mod train;

pub use error::{Error, Result};
pub use numerics::{Scalar, Tape, Tensor, TensorId};
