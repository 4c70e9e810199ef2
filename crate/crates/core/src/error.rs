// SPDX-License-Identifier: MIT OR Apache-2.0

use thiserror::Error;

use crate::analysis::AnalysisError;
use crate::dataset::DatasetError;
use crate::metrics::MetricError;
use crate::refine::TriageError;
use crate::tensor_io::{DumpError, MetaError};
use crate::toy::ToyError;

/// Any failure raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Dump(#[from] DumpError),
    #[error(transparent)]
    Meta(#[from] MetaError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Triage(#[from] TriageError),
    #[error(transparent)]
    Toy(#[from] ToyError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
