// SPDX-License-Identifier: MIT OR Apache-2.0

//! Attention-grounding analysis for multimodal transformers.
//!
//! The crate measures how well the attention a language model pays to image
//! patch tokens lines up with an annotated region, and implements an
//! inference-time refinement on top of that measurement:
//!
//! - [`tensor_io`]: the `VGAT` binary dump format and JSON sidecars.
//! - [`metrics`]: attention ratio, KL and JS divergence over a patch grid.
//! - [`analysis`]: head averaging, reference normalization, layer/head sweeps.
//! - [`refine`]: head ranking, top-K aggregation, percentile suppression and
//!   attention knockout.
//! - [`toy`]: a small deterministic multimodal decoder used to exercise
//!   knockout end to end.
//! - [`dataset`]: fixture generation (bboxes, question templates, planted
//!   attention stacks).
//! - [`report`] and [`cli`]: reports, heatmaps and the command-line surface.

pub mod analysis;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod metrics;
pub mod par;
pub mod refine;
pub mod report;
pub mod tensor_io;
pub mod toy;

pub use error::{Error, Result};
