//! Store, HTTP service and operator CLI for labelforge.
//!
//! [`store`] persists projects and the review workflow in SQLite, [`api`]
//! exposes it over HTTP for the web UI, [`jobs`] runs crowd and scale jobs
//! and [`cli`] maps each workflow step onto a subcommand.

pub mod api;
pub mod cli;
pub mod config;
pub mod jobs;
pub mod store;
