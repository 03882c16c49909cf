use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::evaluation::nonfinite::format_value;
use crate::evaluation::{MetricsReport, ReportMetadata, ReportRow};

use super::config::OutputFormat;

pub const CSV_COLUMNS: [&str; 9] = ["scenario", "filter", "param", "step", "metric", "p", "value", "runs", "seed"];

fn csv_error(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

/// Writes the report as CSV preceded by `# key=value` metadata lines.
pub fn write_csv<W: Write>(report: &MetricsReport, mut out: W) -> Result<()> {
    writeln!(out, "# config_hash={}", report.metadata.config_hash)?;
    writeln!(out, "# ref_particles={}", report.metadata.ref_particles)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_COLUMNS).map_err(csv_error)?;
    for r in &report.rows {
        w.write_record([
            r.scenario.clone(),
            r.filter.clone(),
            r.param.clone(),
            r.step.clone(),
            r.metric.clone(),
            r.p.map(format_value).unwrap_or_default(),
            format_value(r.value),
            r.runs.to_string(),
            r.seed.to_string(),
        ])
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<W: Write>(report: &MetricsReport, mut out: W) -> Result<()> {
    serde_json::to_writer_pretty(&mut out, report).map_err(|e| Error::Io(e.to_string()))?;
    writeln!(out)?;
    Ok(())
}

/// Writes the report to `path`, or to standard output when `path` is `None`.
pub fn emit_report(report: &MetricsReport, format: OutputFormat, path: Option<&Path>) -> Result<()> {
    if report.rows.is_empty() {
        return Err(Error::InvalidParameter("report has no rows".into()));
    }
    let mut out: Box<dyn Write> = match path {
        Some(p) => Box::new(std::io::BufWriter::new(std::fs::File::create(p)?)),
        None => Box::new(std::io::stdout().lock()),
    };
    match format {
        OutputFormat::Csv => write_csv(report, &mut out)?,
        OutputFormat::Json => write_json(report, &mut out)?,
    }
    out.flush()?;
    Ok(())
}

fn parse_number(field: &str) -> Result<f64> {
    field
        .parse()
        .map_err(|_| Error::Io(format!("'{field}' is not a number")))
}

/// Reads a report written by [`write_csv`].
pub fn read_csv<R: BufRead>(mut input: R) -> Result<MetricsReport> {
    let mut metadata = ReportMetadata {
        config_hash: String::new(),
        ref_particles: 0,
    };
    let mut body = String::new();
    let mut line = String::new();
    while input.read_line(&mut line)? > 0 {
        match line.trim_end().strip_prefix("# ") {
            Some(meta) => match meta.split_once('=') {
                Some(("config_hash", v)) => metadata.config_hash = v.to_string(),
                Some(("ref_particles", v)) => {
                    metadata.ref_particles = v.parse().map_err(|_| Error::Io(format!("bad particle count '{v}'")))?
                }
                _ => {}
            },
            None => body.push_str(&line),
        }
        line.clear();
    }
    let mut reader = csv::Reader::from_reader(body.as_bytes());
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(csv_error)?;
        if rec.len() != CSV_COLUMNS.len() {
            return Err(Error::Io(format!("expected {} columns, found {}", CSV_COLUMNS.len(), rec.len())));
        }
        rows.push(ReportRow {
            scenario: rec[0].to_string(),
            filter: rec[1].to_string(),
            param: rec[2].to_string(),
            step: rec[3].to_string(),
            metric: rec[4].to_string(),
            p: if rec[5].is_empty() { None } else { Some(parse_number(&rec[5])?) },
            value: parse_number(&rec[6])?,
            runs: rec[7].parse().map_err(|_| Error::Io("bad run count".into()))?,
            seed: rec[8].parse().map_err(|_| Error::Io("bad seed".into()))?,
        });
    }
    Ok(MetricsReport { metadata, rows })
}

pub fn read_json<R: BufRead>(input: R) -> Result<MetricsReport> {
    serde_json::from_reader(input).map_err(|e| Error::Io(e.to_string()))
}

/// One row per (scenario, filter) holding the KL median pooled over steps.
pub fn kl_summary(reports: &[MetricsReport]) -> Vec<ReportRow> {
    reports
        .iter()
        .flat_map(|r| r.select("kl_median", Some("all")).cloned())
        .collect()
}
