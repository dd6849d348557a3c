//! Dense-matrix numerical core: value kernels, reverse-mode tape, and the
//! finite-difference gradient auditor.

pub mod gradcheck;
pub mod matrix;
pub mod tape;

pub use gradcheck::{finite_diff_check, rel_err, FdOptions, FdReport};
pub use matrix::{Conv1dParams, ConvMeta, Matrix};
pub use tape::{NodeId, Tape};
