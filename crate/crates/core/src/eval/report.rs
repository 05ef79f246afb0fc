use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CollapseMetrics, HistogramReport, ProbeReport};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub probe: ProbeReport,
    pub collapse: CollapseMetrics,
    pub histograms: Vec<HistogramReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

pub const METRICS_HEADER: &str = "source,accuracy,mean_pairwise_sim,mean_dim_std,effective_rank";

fn write(path: &Path, body: String) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// JSON: the full nested reports. CSV: one flat metrics row per report.
pub fn export_reports(reports: &[EvalReport], path: &Path, format: ReportFormat) -> Result<()> {
    match format {
        ReportFormat::Json => write(path, serde_json::to_string_pretty(reports)?),
        ReportFormat::Csv => {
            let mut out = format!("{METRICS_HEADER}\n");
            for r in reports {
                let std = &r.collapse.per_dim_std;
                let mean_std = if std.is_empty() {
                    0.0
                } else {
                    std.iter().sum::<f64>() / std.len() as f64
                };
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    r.probe.source.short_name(),
                    r.probe.accuracy,
                    r.collapse.mean_pairwise_sim,
                    mean_std,
                    r.collapse.effective_rank
                ));
            }
            write(path, out)
        }
    }
}

pub fn import_reports(path: &Path) -> Result<Vec<EvalReport>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn export_histogram_csv(hist: &HistogramReport, path: &Path) -> Result<()> {
    let mut out = String::from("bin_left,bin_right,count_same,count_diff\n");
    for (b, (s, d)) in hist.count_same.iter().zip(&hist.count_diff).enumerate() {
        out.push_str(&format!("{},{},{s},{d}\n", hist.edges[b], hist.edges[b + 1]));
    }
    write(path, out)
}
