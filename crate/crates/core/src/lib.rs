//! Explicit MLS-MPM on a sparse paged grid.
//!
//! The engine follows a five-phase step (rebuild-mapping, sort, P2G, grid
//! update, G2P) where the first two phases are amortized over many steps by
//! a free zone around every particle block. Workers emulate separate devices:
//! each owns its particles, block table and grid buffers, and shared blocks
//! are reduced through a double-buffered read of peer buffers after a single
//! spin barrier per step.

pub mod arena;
pub mod domain;
pub mod error;
pub mod grid;
pub mod multi;
pub mod particles;
pub mod pipeline;
pub mod transfer;

pub use error::{MpmError, Result};

pub type Vec3 = nalgebra::Vector3<f64>;
pub type Mat3 = nalgebra::Matrix3<f64>;
