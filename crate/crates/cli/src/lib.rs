//! Pipeline behind the `astc` binary: synthetic data generation, mixture and
//! POMDP fitting, actor-critic training, single-belief planning and
//! evaluation reports. Every command reads a [`config::RunConfig`] and
//! communicates with the others only through files in the output directory.

// Negated comparisons are used deliberately so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod report;
pub mod svg;

use std::fmt;

/// A problem with the invocation or configuration rather than the data or
/// computation; the binary exits with status 2 for these.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Whether any error in the chain is a [`UsageError`].
pub fn is_usage_error(err: &anyhow::Error) -> bool {
    err.chain().any(|e| e.is::<UsageError>())
}
