//! Command-line and HTTP front end for precedent-grounded adjudication.
//!
//! - [`annotation`]: task pool, append-only label log, benchmark export.
//! - [`runtime`]: provider wiring shared by both surfaces.
//! - [`server`]: the axum router.
//! - [`cli`]: the `precedent` subcommands.
//! - [`error`]: error codes shared by HTTP bodies and exit statuses.

#![forbid(unsafe_code)]

pub mod annotation;
pub mod cli;
pub mod error;
pub mod runtime;
pub mod server;

/// Version tag carried by every request and response body.
pub const API_VERSION: &str = "1";
