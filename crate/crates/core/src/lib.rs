//! Hybrid analog/digital precoding for millimetre-wave massive MIMO.
//!
//! The crate generates clustered Saleh-Valenzuela channels on uniform planar
//! arrays, builds fully-digital, OMP, zero-forcing, sub-connected and
//! neural-network hybrid precoders, scores them (spectral efficiency, 16-QAM
//! BER, multiplication counts, beam patterns) and drives the reproduction
//! experiments that write CSV result files.

pub mod channel;
pub mod harness;
pub mod linalg;
pub mod metrics;
pub mod neural;
pub mod precoders;
pub mod rng;
pub mod tensor_io;

pub use linalg::{ComplexMatrix, MultiplicationCounter, C64};
