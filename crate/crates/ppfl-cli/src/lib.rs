//! IO, file formats, and run orchestration for the `ppfl` command-line
//! tool. The numerics live in `ppfl-core`; this crate adds CSV ingestion
//! and emission, checkpoint files, run manifests, a threaded round
//! executor, and the subcommand drivers.

pub mod checkpoint;
pub mod configfile;
pub mod csvio;
pub mod exec;
pub mod manifest;
pub mod report;
pub mod runner;
