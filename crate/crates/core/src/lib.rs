//! Soft pairwise orthogonalization of first-layer convolutional kernels.
//!
//! The crate trains a small CNN with an extra loss term that pushes pairs
//! of first-layer kernels towards orthogonality ([`ortho::almost_right_loss`]),
//! and compares it against cross-entropy alone, a hard Gram-matrix penalty
//! and LSUV initialization on a synthetic open-set task scored by AUROC.
//!
//! | module | contents |
//! |--------|----------|
//! | [`tensor`] | dense tensors, Gram–Schmidt, seeded RNG |
//! | [`nn`] | network, backprop, SGD schedule, training loop, checkpoints |
//! | [`ortho`] | kernel banks, soft and hard orthogonality losses, LSUV |
//! | [`diagnostics`] | cosine matrices, angle summaries, Gram spectra |
//! | [`data`] | synthetic open-set tasks, IDX loading, batching |
//! | [`eval`] | AUROC, accuracy, run reports, aggregation |
//! | [`cli`] | experiment configs and the `near-ortho` commands |

pub mod cli;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod nn;
pub mod ortho;
pub mod tensor;

pub use error::{Error, Result};
