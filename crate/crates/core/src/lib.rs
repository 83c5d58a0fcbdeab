//! Quantum-inspired convolutional classifier with an exact tree tensor
//! network export and entanglement analysis of the trained class states.

pub mod basis;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod io;
pub mod linalg;
pub mod model;
pub mod plot;
pub mod quantum;
pub mod tape;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
