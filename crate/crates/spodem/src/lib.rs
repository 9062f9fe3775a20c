//! Reduced-order modeling of quasi-stationary snapshot data.
//!
//! The pipeline has four stages:
//!
//! 1. **Decomposition** — build a spectral (SPOD) or space-only (POD) modal
//!    basis from a centered snapshot matrix. SPOD segments the record into
//!    Welch blocks, applies a windowed FFT, and solves one weighted
//!    eigenproblem per retained frequency; POD solves a single eigenproblem
//!    on the weighted snapshot Gram matrix (method of snapshots).
//! 2. **Latent projection** — compute expansion coefficients by weighted
//!    oblique projection (time domain) or orthogonal projection of the
//!    block transforms (frequency domain), optionally truncated to a mode
//!    count and frequency band.
//! 3. **Emulation** — learn the coefficient dynamics with one LSTM network
//!    per retained mode, trained by backpropagation through time, and
//!    forecast over a held-out span.
//! 4. **Reconstruction & metrics** — lift coefficients back to the full
//!    field and decompose the error into projection, learning, and total
//!    parts under L1/L2/L∞ summaries.
//!
//! The [`pipeline`] module drives the stages from a JSON config and persists
//! every intermediate artifact with a provenance hash chain; the `spodem`
//! binary in the companion CLI crate is a thin wrapper around it.

pub mod data;
pub mod decomposition;
pub mod emulator;
pub mod error;
pub mod latent;
pub mod linalg;
pub mod metrics;
pub mod npy;
pub mod pipeline;
pub mod synth;

pub use error::{Error, Result};
