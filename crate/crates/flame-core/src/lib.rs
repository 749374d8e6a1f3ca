//! Core SDK for declarative federated-learning jobs.
//!
//! A job is described as a logical graph of roles (vertices) and channels
//! (edges). The crate provides:
//!
//! - [`spec`]: the job specification model, its parser and structural checks
//! - [`expand`]: compilation of a validated spec plus registered resources
//!   into a physical worker topology
//! - [`channel`]: the runtime channel API over interchangeable backends
//! - [`tasklet`]: composable, editable chains of execution units
//! - [`fl`]: built-in role programs, federated averaging and synthetic data

pub mod channel;
pub mod expand;
pub mod fl;
pub mod spec;
pub mod tasklet;
