//! Seeded Monte-Carlo campaigns: configuration, execution and reports.

mod campaign;
mod config;
mod report;

pub use campaign::{aggregate, run_campaign, run_single, CampaignOutput, FilterTrack, RunRecord};
pub use config::{CampaignConfig, FilterSpec, OutputFormat, DEFAULT_FILTERS, DEFAULT_REF_PARTICLES, FILTER_TEMPLATES};
pub use report::{emit_report, kl_summary, read_csv, read_json, write_csv, write_json, CSV_COLUMNS};
