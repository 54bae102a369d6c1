//! Mixture-of-ranks adapters with degradation-aware expert routing, plus the
//! single-step restoration training loop that exercises them.
//!
//! The crate decomposes a restoration system into small, independently
//! testable layers:
//!
//! - [`numeric`]: dense `f64` matrices, a checkpointable RNG, Adam, and
//!   finite-difference gradient checking.
//! - [`image`] / [`pnm`] / [`textures`]: grayscale/RGB images in `[0, 1]`,
//!   netpbm IO, and a procedural texture corpus for self-contained tests.
//! - [`degrade`]: a two-stage blur/resize/noise/compression pipeline with
//!   replayable parameter records.
//! - [`embed`] / [`estimator`]: image and prompt embeddings, and the per-axis
//!   quality scores computed from them.
//! - [`adapter`]: the mixture-of-ranks layer itself (shared, routed, and
//!   zero experts) with exact forward/backward passes.
//! - [`losses`]: diffusion schedule, single-step prediction, distillation
//!   and adversarial terms, and the router balance penalties.
//! - [`trainer`] / [`analysis`] / [`metrics`]: the toy two-phase training
//!   loop, expert-usage analysis, and PSNR/SSIM.
//! - [`cli`]: the `mor` command-line tool built on all of the above.
//!
//! A rendered guide with worked examples lives in `book/`; its chapters are
//! also compiled as doc-tests via the [`guide`] module.

pub mod adapter;
pub mod analysis;
pub mod cli;
pub mod degrade;
pub mod embed;
pub mod error;
pub mod estimator;
pub mod guide;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod numeric;
pub mod pnm;
pub mod textures;
pub mod trainer;

pub use error::{Error, Result};
