//! Library surface of the `usvid` command-line tool, exposed so integration
//! tests drive the same code paths as the binary.

pub mod commands;
pub mod config;
pub mod provenance;

pub use commands::{
    run_eval, run_gen, run_inspect, run_sweep_heads, run_sweep_samples, run_train, GenOptions,
    InspectOptions,
};
pub use config::{DataConfig, RunConfig};
