//! Everything behind the command-line binary: run configuration,
//! experiment manifests, the command implementations, and the runtime
//! verification suites. Lives in the library so it is all unit-testable;
//! the binary itself only parses arguments.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod verify;

pub use commands::{run, ablation_table, AblationSummary, CliCommand, Invocation};
pub use config::{AblateConfig, EvalSettings, ModelConfig, PathsConfig, RunConfig};
pub use manifest::{file_digest_short, ExperimentManifest, MANIFEST_FILE};
pub use verify::{gradcheck_suite, selftest_suite, GradCase, SelfTestCase, GRAD_SEEDS, GRAD_TOLERANCE};
