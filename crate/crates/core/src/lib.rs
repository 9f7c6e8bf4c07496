//! Reconstruction-residual anomaly detection for registered industrial images.
//!
//! Pipeline stages:
//!
//! 1. **recon** – pair each image with a reconstruction (external neural
//!    stage, or the median baseline).
//! 2. **mask** – down-weight pixels that vary a lot across normal images.
//! 3. **localize** – zoom-out-and-shift patches around the largest
//!    differences, ranked by Fréchet feature distance.
//! 4. **metrics** – image-, pixel- and patch-level features per pair.
//! 5. **scorer** – classifier probability as a composite anomaly score, with
//!    a zero-false-negative decision threshold.
//! 6. **report** – STD vs ZFN evaluation tables and histograms.

pub mod distances;
pub mod error;
pub mod features;
pub mod localize;
pub mod mask;
pub mod metrics;
pub mod pipeline;
pub mod recon;
pub mod report;
pub mod scorer;
pub mod seed;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
