//! Synthetic histopathology generation and adversarial nuclei segmentation.
//!
//! The crate covers the whole pipeline:
//!
//! - [`stain`] — sparse stain normalization of H&E patches (optical density,
//!   2-atom nonnegative dictionary learning, recoloring to a target basis).
//! - [`masks`] — nucleus shape dictionaries and randomized polygon mask
//!   sampling used as perfect ground truth for synthetic data.
//! - [`autodiff`] — a small reverse-mode tape. Backward passes are built out
//!   of tape ops themselves, so gradients of gradients (needed by the
//!   discriminator gradient penalty) work without special casing.
//! - [`nn`] — generator/discriminator builders (ResNet, U-Net, 70x70 patch
//!   discriminator), spectral normalization, weight init, checkpoints.
//! - [`losses`] — adversarial BCE terms, cycle consistency, L1, gradient
//!   penalty.
//! - [`synth`] — unpaired cycle-consistent training of mask<->H&E generators
//!   and synthetic dataset emission.
//! - [`seg`] — conditional-GAN segmentation training (jitter, image pool,
//!   spectral norm, gradient penalty) and tiled full-image inference.
//! - [`metrics`] — instance-level evaluation: AJI, Hausdorff, object F1,
//!   connected components.
//! - [`pipeline`] — dataset manifests, patch extraction, organ splits,
//!   overlays, reports, and end-to-end orchestration.

pub mod autodiff;
pub mod error;
pub mod losses;
pub mod masks;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod raster;
pub mod seg;
pub mod stain;
pub mod synth;

pub use error::{Error, Result};
pub use raster::{BinaryMask, InstanceMap, RgbImage};
