//! Filesystem, configuration and pipeline layer over `bevlm-core`.
//!
//! `bevlm-core` is pure compute (no IO); this crate adds the artifact
//! formats (scene JSON, QA JSON-lines, binary checkpoints with digest
//! sidecars, run manifests, report tables), the TOML experiment
//! configuration with its content hash, the idempotent stage runner, and
//! the command-line interface.

pub mod cli;
pub mod config;
pub mod formats;
pub mod runner;
