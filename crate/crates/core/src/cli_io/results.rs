use std::path::{Path, PathBuf};

use super::{fmt_sig6, CliIoError};
use crate::scenario::{SimulationResult, SCHEMA_VERSION};

pub const RESULTS_FILE: &str = "results.json";
pub const PV_SNAPSHOT_FILE: &str = "pv_snapshot.csv";
pub const PCC_FILE: &str = "pcc_timeseries.csv";
pub const CURTAILMENT_FILE: &str = "curtailment.csv";

pub const PV_SNAPSHOT_HEADER: [&str; 4] = ["node_id", "phase", "pv_kw", "pv_forecast_kw"];
pub const PCC_HEADER: [&str; 9] = [
    "timestamp",
    "pcc_a_kw",
    "pcc_b_kw",
    "pcc_c_kw",
    "pcc_total_kw",
    "expected_kw",
    "nominal_total_kw",
    "unmitigated_total_kw",
    "losses_kw",
];
pub const CURTAILMENT_HEADER: [&str; 4] = ["node_id", "phase", "flexibility_kw", "curtailment_kw"];

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliIoError> {
    std::fs::write(path, bytes).map_err(|e| CliIoError::io(path, e))
}

fn csv_bytes<const N: usize>(
    header: [&str; N],
    rows: impl Iterator<Item = [String; N]>,
) -> Result<Vec<u8>, CliIoError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| CliIoError::Csv(e.to_string());
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(&r).map_err(err)?;
    }
    w.into_inner().map_err(|e| CliIoError::Csv(e.to_string()))
}

/// The results document as written by [`emit_results`].
pub fn results_json(result: &SimulationResult) -> Result<String, CliIoError> {
    let mut s = serde_json::to_string_pretty(result).map_err(|e| CliIoError::Document(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

/// Writes the results document and the three plot-data files into
/// `out_dir`, creating it if needed. Returns the written paths.
pub fn emit_results(result: &SimulationResult, out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>, CliIoError> {
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| CliIoError::io(dir, e))?;
    let s = &result.summary;
    let files = [
        (RESULTS_FILE, results_json(result)?.into_bytes()),
        (
            PV_SNAPSHOT_FILE,
            csv_bytes(
                PV_SNAPSHOT_HEADER,
                s.pv_snapshot.iter().map(|r| {
                    [r.node_id.to_string(), r.phase.to_string(), fmt_sig6(r.pv_kw), fmt_sig6(r.pv_forecast_kw)]
                }),
            )?,
        ),
        (
            PCC_FILE,
            csv_bytes(
                PCC_HEADER,
                result.minutes.iter().map(|m| {
                    let total = |v: [f64; 3]| fmt_sig6(v.iter().sum());
                    [
                        m.time.clone(),
                        fmt_sig6(m.pcc_kw[0]),
                        fmt_sig6(m.pcc_kw[1]),
                        fmt_sig6(m.pcc_kw[2]),
                        total(m.pcc_kw),
                        fmt_sig6(m.expected_kw),
                        total(m.nominal_pcc_kw),
                        total(m.unmitigated_pcc_kw),
                        fmt_sig6(m.losses_kw),
                    ]
                }),
            )?,
        ),
        (
            CURTAILMENT_FILE,
            csv_bytes(
                CURTAILMENT_HEADER,
                s.curtailment.iter().map(|r| {
                    [r.node_id.to_string(), r.phase.to_string(), fmt_sig6(r.flexibility_kw), fmt_sig6(r.curtailment_kw)]
                }),
            )?,
        ),
    ];
    let mut out = Vec::with_capacity(files.len());
    for (name, bytes) in files {
        let path = dir.join(name);
        write_file(&path, &bytes)?;
        out.push(path);
    }
    Ok(out)
}

/// Reads a results document, rejecting other schema versions.
pub fn read_results(path: impl AsRef<Path>) -> Result<SimulationResult, CliIoError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| CliIoError::io(path, e))?;
    let v: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliIoError::Document(format!("{}: {e}", path.display())))?;
    match v.get("schema_version").and_then(|s| s.as_u64()) {
        Some(n) if n == SCHEMA_VERSION as u64 => {}
        other => {
            return Err(CliIoError::Document(format!(
                "{}: schema_version {other:?}, expected {SCHEMA_VERSION}",
                path.display()
            )))
        }
    }
    serde_json::from_value(v).map_err(|e| CliIoError::Document(format!("{}: {e}", path.display())))
}
