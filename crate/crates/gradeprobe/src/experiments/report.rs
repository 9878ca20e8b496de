//! Report emission: JSONL rows, a summary table, and scatter-plot data.
//!
//! Output bytes are a pure function of the report contents (no timestamps),
//! so reruns of identical experiments produce identical files.

use std::io::Write;
use std::path::{Path, PathBuf};

use super::gain::GainReport;
use super::ExperimentError;

/// Writes a gain report under `dir` as three files:
///
/// - `rows.jsonl` — one JSON object per essay row
/// - `summary.json` — suffix, seed, cell means, pooled mean, std, failures
/// - `scatter.tsv` — `score_without <TAB> score_with` per row, mirroring the
///   with/without-suffix scatter axes
///
/// Returns the paths written.
pub fn emit_report(report: &GainReport, dir: &Path) -> Result<Vec<PathBuf>, ExperimentError> {
    std::fs::create_dir_all(dir)?;
    let rows_path = dir.join("rows.jsonl");
    let summary_path = dir.join("summary.json");
    let scatter_path = dir.join("scatter.tsv");

    let mut rows = Vec::new();
    for row in &report.rows {
        serde_json::to_writer(&mut rows, row)?;
        rows.push(b'\n');
    }
    std::fs::write(&rows_path, rows)?;

    let summary = serde_json::json!({
        "suffix": report.suffix,
        "seed": report.seed,
        "cell_means": report.cell_means,
        "pooled_mean_gain": report.pooled_mean_gain,
        "gain_std": report.gain_std,
        "row_count": report.rows.len(),
        "failure_count": report.failures.len(),
        "failures": report.failures,
    });
    let mut summary_bytes = serde_json::to_vec_pretty(&summary)?;
    summary_bytes.push(b'\n');
    std::fs::write(&summary_path, summary_bytes)?;

    let mut scatter = Vec::new();
    writeln!(scatter, "score_without\tscore_with")?;
    for row in &report.rows {
        writeln!(scatter, "{}\t{}", row.score_without, row.score_with)?;
    }
    std::fs::write(&scatter_path, scatter)?;

    Ok(vec![rows_path, summary_path, scatter_path])
}
