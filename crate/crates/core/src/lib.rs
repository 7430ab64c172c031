//! Pixel-grid graph construction (LSGC, SVGA, lattice, KNN), exact shortest-path
//! statistics, a small reverse-mode tensor engine and the LogViG vision GNN built
//! on top of it.

pub mod error;
pub mod graphkit;
pub mod graphstat;
pub mod tensor;
pub mod toytrain;
pub mod verify;
pub mod vigblocks;

pub use error::{Error, Result};
