use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::config::{CampaignConfig, FilterSpec};
use crate::baselines::{
    bootstrap_pf_step, ekf2_update_analytic, ekf_update, iekf_update, ruf_update, systematic_resample, ukf_update,
    AnalyticMeasurementModel, ParticleCloud,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    error_quantiles, mahalanobis_sq, nonfinite, MetricsReport, ReferenceHistogram, ReportMetadata, ReportRow,
    REPORT_LEVELS,
};
use crate::gaussian::GaussianState;
use crate::par;
use crate::pukf::{pukf_update, PukfConfig};
use crate::scenarios::{run_seed, simulate_truth, stream_seed, ScenarioSpec, TruthStep};

const TRUTH_STREAM: u64 = 0;
const REFERENCE_STREAM: u64 = 1;
const PF_STREAM_BASE: u64 = 1 << 32;

/// Per-step results of one filter on one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterTrack {
    pub filter: String,
    /// Norm of the state error; infinite after divergence.
    #[serde(with = "nonfinite::vec")]
    pub errors: Vec<f64>,
    /// χ² CDF value of the truth's Mahalanobis distance; infinite when the
    /// estimate is unusable.
    #[serde(with = "nonfinite::vec")]
    pub levels: Vec<f64>,
    /// KL divergence from the reference; NaN when there is no reference.
    #[serde(with = "nonfinite::vec")]
    pub kl: Vec<f64>,
    /// First step (from 1) at which the filter failed.
    pub diverged_at: Option<usize>,
    pub failure: Option<String>,
    /// Seconds per update call, recorded only when timing is enabled.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub update_seconds: Vec<f64>,
}

/// Results of every filter on one simulated track.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    pub seed: u64,
    pub tracks: Vec<FilterTrack>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CampaignOutput {
    pub report: MetricsReport,
    /// Sorted by run index.
    pub records: Vec<RunRecord>,
}

/// Bootstrap particle filter over a track. The first step weights a prior
/// sample, later steps propagate first.
struct ParticleRunner<'a> {
    spec: &'a ScenarioSpec,
    count: usize,
    seed: u64,
    cloud: Option<ParticleCloud>,
}

impl<'a> ParticleRunner<'a> {
    fn new(spec: &'a ScenarioSpec, count: usize, seed: u64) -> Self {
        Self {
            spec,
            count,
            seed,
            cloud: None,
        }
    }

    /// Processes step `t` (from 0) and returns the weighted cloud.
    fn step(&mut self, t: usize, model: &AnalyticMeasurementModel) -> Result<ParticleCloud> {
        let step_seed = stream_seed(self.seed, t as u64);
        let out = match &self.cloud {
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(step_seed);
                let weighted = ParticleCloud::sample(&self.spec.prior, self.count, &mut rng)?.reweight(model.model())?;
                let resampled = systematic_resample(&weighted, &mut rng);
                (weighted, resampled)
            }
            Some(cloud) => {
                let s = bootstrap_pf_step(cloud, &self.spec.state_model, model.model(), step_seed)?;
                (s.weighted, s.resampled)
            }
        };
        self.cloud = Some(out.1);
        Ok(out.0)
    }
}

fn update(filter: &FilterSpec, prior: &GaussianState, model: &AnalyticMeasurementModel) -> Result<GaussianState> {
    match filter {
        FilterSpec::Pukf { threshold } => {
            pukf_update(prior, model.model(), &PukfConfig::with_threshold(*threshold)).map(|(post, _)| post)
        }
        FilterSpec::Ekf => ekf_update(prior, model),
        FilterSpec::Ekf2 => ekf2_update_analytic(prior, model),
        FilterSpec::Ukf(params) => ukf_update(prior, model.model(), params),
        FilterSpec::Iekf { iterations } => iekf_update(prior, model, *iterations),
        FilterSpec::Ruf { steps } => ruf_update(prior, model, *steps),
        FilterSpec::Pf { .. } => unreachable!("particle filters are not Gaussian updates"),
    }
}

fn chi2_level(truth: &DVector<f64>, est: &GaussianState) -> f64 {
    let chi2 = ChiSquared::new(est.dim() as f64).expect("positive dimension");
    mahalanobis_sq(truth, est).map_or(f64::INFINITY, |m| chi2.cdf(m))
}

fn run_filter(
    spec: &ScenarioSpec,
    filter: &FilterSpec,
    truth: &[TruthStep],
    models: &[AnalyticMeasurementModel],
    references: &[Option<ReferenceHistogram>],
    run_seed: u64,
    timing: bool,
) -> FilterTrack {
    let steps = truth.len();
    let mut track = FilterTrack {
        filter: filter.to_string(),
        errors: vec![f64::INFINITY; steps],
        levels: vec![f64::INFINITY; steps],
        kl: references
            .iter()
            .map(|r| if r.is_some() { f64::INFINITY } else { f64::NAN })
            .collect(),
        diverged_at: None,
        failure: None,
        update_seconds: Vec::new(),
    };
    let mut state = spec.prior.clone();
    let mut pf = match filter {
        FilterSpec::Pf { particles } => Some(ParticleRunner::new(
            spec,
            *particles,
            stream_seed(run_seed, PF_STREAM_BASE + *particles as u64),
        )),
        _ => None,
    };

    for t in 0..steps {
        let started = Instant::now();
        let result = match &mut pf {
            Some(runner) => runner
                .step(t, &models[t])
                .and_then(|c| GaussianState::new(c.mean(), c.cov())),
            None => {
                let prior = if t == 0 { Ok(state.clone()) } else { spec.state_model.predict(&state) };
                prior.and_then(|p| update(filter, &p, &models[t]))
            }
        };
        if timing {
            track.update_seconds.push(started.elapsed().as_secs_f64());
        }
        let est = match result {
            Ok(est) => est,
            Err(e) => {
                track.diverged_at = Some(t + 1);
                track.failure = Some(e.to_string());
                break;
            }
        };
        track.errors[t] = (est.mean() - &truth[t].state).norm();
        track.levels[t] = chi2_level(&truth[t].state, &est);
        if let Some(reference) = &references[t] {
            track.kl[t] = reference.kl_from(&est).unwrap_or(f64::INFINITY);
        }
        state = est;
    }
    track
}

fn reference_histograms(
    spec: &ScenarioSpec,
    models: &[AnalyticMeasurementModel],
    particles: usize,
    seed: u64,
) -> Vec<Option<ReferenceHistogram>> {
    let Some(dims) = spec.position_dims.filter(|_| particles > 0) else {
        return vec![None; models.len()];
    };
    let mut runner = ParticleRunner::new(spec, particles, seed);
    let mut out = Vec::with_capacity(models.len());
    for (t, model) in models.iter().enumerate() {
        match runner.step(t, model) {
            Ok(cloud) => out.push(ReferenceHistogram::covering(&cloud, dims).ok()),
            Err(_) => {
                out.resize(models.len(), None);
                break;
            }
        }
    }
    out
}

/// Simulates one track and runs every filter on the same measurements.
pub fn run_single(
    spec: &ScenarioSpec,
    filters: &[FilterSpec],
    master_seed: u64,
    run: usize,
    ref_particles: usize,
    timing: bool,
) -> Result<RunRecord> {
    let seed = run_seed(master_seed, run as u64);
    let truth = simulate_truth(spec, stream_seed(seed, TRUTH_STREAM))?;
    let models: Vec<AnalyticMeasurementModel> = truth
        .iter()
        .map(|s| spec.measurement_model(s.measurement.clone()))
        .collect::<Result<_>>()?;
    let references = reference_histograms(spec, &models, ref_particles, stream_seed(seed, REFERENCE_STREAM));
    let tracks = filters
        .iter()
        .map(|f| run_filter(spec, f, &truth, &models, &references, seed, timing))
        .collect();
    Ok(RunRecord { run, seed, tracks })
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config_hash: String,
}

/// Completed runs stored in a checkpoint written for the same config.
fn load_checkpoint(path: &Path, hash: &str) -> Result<Vec<RunRecord>> {
    let Ok(file) = File::open(path) else {
        return Ok(Vec::new());
    };
    let mut lines = BufReader::new(file).lines();
    let header: Option<CheckpointHeader> = match lines.next() {
        Some(line) => serde_json::from_str(&line?).ok(),
        None => None,
    };
    if header.is_none_or(|h| h.config_hash != hash) {
        return Ok(Vec::new());
    }
    let mut records = Vec::new();
    for line in lines {
        // a torn final line from an interrupted write is dropped
        match serde_json::from_str::<RunRecord>(&line?) {
            Ok(r) => records.push(r),
            Err(_) => break,
        }
    }
    Ok(records)
}

fn open_checkpoint(path: &Path, hash: &str, kept: &[RunRecord]) -> Result<File> {
    let mut file = OpenOptions::new().create(true).write(true).truncate(true).open(path)?;
    let header = CheckpointHeader {
        config_hash: hash.to_string(),
    };
    writeln!(file, "{}", serde_json::to_string(&header).map_err(|e| Error::Io(e.to_string()))?)?;
    for r in kept {
        writeln!(file, "{}", serde_json::to_string(r).map_err(|e| Error::Io(e.to_string()))?)?;
    }
    file.flush()?;
    Ok(file)
}

/// Runs every configured filter on `runs` simulated tracks and aggregates
/// the metrics. Results depend only on the configuration, not on the
/// number of worker threads or on resumption from a checkpoint.
pub fn run_campaign(cfg: &CampaignConfig) -> Result<CampaignOutput> {
    let (spec, filters) = cfg.validate()?;
    let hash = cfg.hash();

    let mut done: Vec<RunRecord> = match &cfg.checkpoint {
        Some(path) => load_checkpoint(path, &hash)?,
        None => Vec::new(),
    };
    done.retain(|r| r.run < spec.runs);
    done.sort_by_key(|r| r.run);
    done.dedup_by_key(|r| r.run);
    let writer = match &cfg.checkpoint {
        Some(path) => Some(Mutex::new(open_checkpoint(path, &hash, &done)?)),
        None => None,
    };

    let todo: Vec<usize> = (0..spec.runs)
        .filter(|r| done.binary_search_by_key(r, |d| d.run).is_err())
        .collect();
    let fresh = par::with_jobs(cfg.jobs, || {
        par::map_slice(&todo, |&run| {
            let record = run_single(&spec, &filters, cfg.seed, run, cfg.ref_particles, cfg.timing)?;
            if let Some(w) = &writer {
                let line = serde_json::to_string(&record).map_err(|e| Error::Io(e.to_string()))?;
                let mut file = w.lock().expect("checkpoint lock");
                writeln!(file, "{line}")?;
                file.flush()?;
            }
            Ok::<_, Error>(record)
        })
    });
    for r in fresh {
        done.push(r?);
    }
    done.sort_by_key(|r| r.run);

    let report = aggregate(cfg, &spec, &filters, &done, hash)?;
    Ok(CampaignOutput { report, records: done })
}

fn median(values: &[f64]) -> Option<f64> {
    let kept: Vec<f64> = values.iter().copied().filter(|v| !v.is_nan()).collect();
    if kept.is_empty() {
        None
    } else {
        error_quantiles(&kept, &[0.5]).ok().map(|q| q[0])
    }
}

/// Reduces per-run records (sorted by run) to report rows.
pub fn aggregate(
    cfg: &CampaignConfig,
    spec: &ScenarioSpec,
    filters: &[FilterSpec],
    records: &[RunRecord],
    config_hash: String,
) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(Error::EmptySample);
    }
    let runs = records.len();
    let mut rows = Vec::new();
    for (k, filter) in filters.iter().enumerate() {
        let mut row = |step: String, metric: &str, p: Option<f64>, value: f64| {
            rows.push(ReportRow {
                scenario: spec.name.clone(),
                filter: filter.name().to_string(),
                param: filter.param(),
                step,
                metric: metric.to_string(),
                p,
                value,
                runs,
                seed: cfg.seed,
            })
        };
        let tracks: Vec<&FilterTrack> = records.iter().map(|r| &r.tracks[k]).collect();
        for t in 0..spec.steps {
            let step = (t + 1).to_string();
            let errors: Vec<f64> = tracks.iter().map(|tr| tr.errors[t]).collect();
            for (p, q) in REPORT_LEVELS.iter().zip(error_quantiles(&errors, &REPORT_LEVELS)?) {
                row(step.clone(), "error_quantile", Some(*p), q);
            }
            for p in REPORT_LEVELS {
                let inside = tracks.iter().filter(|tr| tr.levels[t] < p).count();
                row(step.clone(), "coverage", Some(p), inside as f64 / runs as f64);
            }
            let kl: Vec<f64> = tracks.iter().map(|tr| tr.kl[t]).collect();
            if let Some(m) = median(&kl) {
                row(step.clone(), "kl_median", None, m);
            }
        }
        let pooled: Vec<f64> = tracks.iter().flat_map(|tr| tr.kl.iter().copied()).collect();
        if let Some(m) = median(&pooled) {
            row("all".into(), "kl_median", None, m);
        }
        let diverged = tracks.iter().filter(|tr| tr.diverged_at.is_some()).count();
        row("all".into(), "divergences", None, diverged as f64);
        if cfg.timing {
            let times: Vec<f64> = tracks.iter().flat_map(|tr| tr.update_seconds.iter().copied()).collect();
            if let Some(m) = median(&times) {
                row("all".into(), "time_median", None, m);
            }
        }
    }
    Ok(MetricsReport {
        metadata: ReportMetadata {
            config_hash,
            ref_particles: cfg.ref_particles,
        },
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(scenario: &str, filters: &[&str]) -> CampaignConfig {
        let mut cfg = CampaignConfig::new(scenario, filters, 7);
        cfg.runs = Some(4);
        cfg.steps = Some(3);
        cfg.ref_particles = 2000;
        cfg
    }

    #[test]
    fn filters_see_identical_measurements() {
        let cfg = small("bearings-near-near", &["ekf", "pukf:1"]);
        let (spec, filters) = cfg.validate().unwrap();
        let a = run_single(&spec, &filters, 7, 2, 0, false).unwrap();
        let b = run_single(&spec, &filters[..1], 7, 2, 0, false).unwrap();
        let json = |t: &FilterTrack| serde_json::to_string(t).unwrap();
        assert_eq!(json(&a.tracks[0]), json(&b.tracks[0]));
    }

    #[test]
    fn divergence_is_recorded() {
        // n + λ = 0 for a 3-D state, so every update fails
        let cfg = small("polynomial", &["ukf:1:-3:2", "pukf:1"]);
        let out = run_campaign(&cfg).unwrap();
        assert_eq!(out.report.value("ukf", "1:-3:2", "all", "divergences", None), Some(4.0));
        assert_eq!(out.report.value("pukf", "1", "all", "divergences", None), Some(0.0));
        assert_eq!(
            out.report.value("ukf", "1:-3:2", "3", "error_quantile", Some(0.05)),
            Some(f64::INFINITY)
        );
        assert_eq!(out.records[0].tracks[0].diverged_at, Some(1));
    }

    #[test]
    fn checkpoint_resumes_identically() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small("bearings-far-near", &["ekf", "pukf:0.1", "pf:500"]);
        let full = run_campaign(&cfg).unwrap();

        cfg.checkpoint = Some(dir.path().join("runs.jsonl"));
        let first = run_campaign(&cfg).unwrap();
        assert_eq!(first.report, full.report);
        // drop the last two runs and resume
        let text = std::fs::read_to_string(cfg.checkpoint.as_ref().unwrap()).unwrap();
        let kept: Vec<&str> = text.lines().take(3).collect();
        std::fs::write(cfg.checkpoint.as_ref().unwrap(), kept.join("\n") + "\n{\"run\": 3, \"se").unwrap();
        let resumed = run_campaign(&cfg).unwrap();
        assert_eq!(resumed.report, full.report);
        let json = |r: &[RunRecord]| serde_json::to_string(r).unwrap();
        assert_eq!(json(&resumed.records), json(&full.records));
    }
}
