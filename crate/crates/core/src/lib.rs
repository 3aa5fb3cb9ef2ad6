//! Deformable 3D image registration with a neural cellular automaton.
//!
//! A shared local update rule is iterated over a two-level coarse-to-fine
//! pyramid; three state channels are read out as a dense displacement field
//! that warps the moving volume onto the fixed one. Training is unsupervised
//! (similarity + smoothness, optionally segmentation overlap) and runs on
//! hand-written adjoints, no external tensor framework involved.

pub mod error;
pub mod kvtext;
pub mod real;
pub mod engine;
pub mod metrics;
pub mod volio;
pub mod objective;
pub mod optim;
pub mod volgrid;
pub mod warpfield;

pub use error::{Error, Result};
pub use real::Real;
pub use volgrid::{ChannelGrid, ConvKernel3D, DensePair, Grid};
