//! Cross-scope spatial-spectral transformer for single hyperspectral image
//! super-resolution: cube I/O and data preparation, the attention kernels and
//! network blocks (with a reverse-mode tape for training), losses, metrics,
//! the training/evaluation harness, and slow reference implementations used
//! to check the fast paths.

pub mod attention;
pub mod blocks;
pub mod config;
pub mod error;
pub mod graph;
pub mod hsi;
pub mod losses;
pub mod metrics;
pub mod oracle;
pub mod params;
pub mod selfcheck;
pub mod tensor;
pub mod training;
pub mod windowing;

pub use error::{CstError, Result};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
