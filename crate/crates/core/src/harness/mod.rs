//! Experiment orchestration: configs, the round-by-round stream runner,
//! data-access tracing, and the cross-run comparison report.
//!
//! A run is a sequence of training rounds over an ordered site stream. Each
//! round trains on the incoming site (plus the replay buffer, per method),
//! quantizes parameters to f32, writes a checkpoint, selects exemplars into
//! the buffer, and evaluates every site's val and test splits into the
//! accuracy matrix. All artifacts land in one output directory:
//!
//! - `config.json`    resolved run configuration
//! - `manifest.json`  per-round checkpoints, buffer manifests, access audit
//! - `metrics.csv`    the accuracy matrix, rewritten after every round
//! - `alignment.csv`  per-iteration losses and gradient-alignment diagnostics
//! - `checkpoints/`   f32 parameter snapshots, `round_000` = initialization
//!
//! Runs are deterministic: the per-round training RNG is derived from the
//! train seed and the round index, Adam state is per-round, and parameters
//! are f32 at every round boundary, so `--resume` reproduces the exact
//! artifacts of an uninterrupted run.

mod access;
mod compare;
mod config;
mod stream;

pub use access::{AccessLog, SubjectRead};
pub use compare::{compare_report, CompareRow};
pub use config::{Method, RunConfig};
pub use stream::{
    evaluate_split, load_stream_data, read_alignment, run_ft_reference, run_stream,
    sequence_length_study, AlignmentRow, FtReference, RoundRecord, RunManifest, RunOptions,
    RunOutcome, SeqStudyRow, IMAGE_SIDE,
};
