//! Data ingestion, synthetic data, results documents and plot data.

mod results;
mod synth;
mod timeseries;

use std::path::Path;

use thiserror::Error;

pub use results::{
    emit_results, read_results, results_json, CURTAILMENT_FILE, CURTAILMENT_HEADER, PCC_FILE, PCC_HEADER,
    PV_SNAPSHOT_FILE, PV_SNAPSHOT_HEADER, RESULTS_FILE,
};
pub use synth::{generate_nodes, generate_synthetic, Archetype, SynthParams, ARCHETYPES};
pub use timeseries::{
    fmt_sig6, ingest_reader, ingest_timeseries, IngestOptions, NodeSeries, TimeSeriesSet, CSV_HEADER, TIMESTAMP_FORMAT,
};

#[derive(Debug, Error)]
pub enum CliIoError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(String),
    #[error("schema mismatch: {0}")]
    Schema(String),
    #[error("negative {column} at node {node}, {timestamp}: {value}")]
    Negative { node: u32, timestamp: String, column: String, value: f64 },
    #[error("gaps beyond tolerance: {}", fmt_gaps(.0))]
    Gaps(Vec<(u32, String, String)>),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("results document: {0}")]
    Document(String),
}

fn fmt_gaps(g: &[(u32, String, String)]) -> String {
    g.iter().map(|(n, a, b)| format!("node {n} [{a} .. {b}]")).collect::<Vec<_>>().join(", ")
}

impl CliIoError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CliIoError::Io { path: path.display().to_string(), source }
    }
}
