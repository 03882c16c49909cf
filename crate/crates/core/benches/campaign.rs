//! Campaign and particle-weighting throughput on one worker versus the full
//! pool. Build with `--no-default-features` to time the sequential fallback.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::DVector;
use pukf::baselines::ParticleCloud;
use pukf::harness::{run_campaign, CampaignConfig};
use pukf::par;
use pukf::scenarios::scenario_bearings_far_near;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn campaign_config(jobs: usize) -> CampaignConfig {
    let mut cfg = CampaignConfig::new("bearings-far-near", &["pukf:1", "pukf:inf", "ekf2", "ukf", "ruf:3"], 5);
    cfg.runs = Some(16);
    cfg.steps = Some(5);
    cfg.ref_particles = 5000;
    cfg.jobs = jobs;
    cfg
}

fn campaign(c: &mut Criterion) {
    let mut group = c.benchmark_group("campaign");
    group.sample_size(10);
    for jobs in [1, 0] {
        let label = if jobs == 1 { "one-worker" } else { "all-workers" };
        let cfg = campaign_config(jobs);
        group.bench_with_input(BenchmarkId::new("bearings", label), &cfg, |b, cfg| {
            b.iter(|| black_box(run_campaign(cfg).unwrap()))
        });
    }
    group.finish();
}

fn reweight(c: &mut Criterion) {
    let spec = scenario_bearings_far_near();
    let cloud = ParticleCloud::sample(&spec.prior, 100_000, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let truth = DVector::from_vec(vec![1.0, -1.0, 0.0, 0.0]);
    let model = spec.measurement_model(spec.measure(&truth)).unwrap();

    let mut group = c.benchmark_group("reweight");
    group.sample_size(20);
    for jobs in [1, 0] {
        let label = if jobs == 1 { "one-worker" } else { "all-workers" };
        group.bench_function(BenchmarkId::new("100k", label), |b| {
            b.iter(|| par::with_jobs(jobs, || black_box(cloud.reweight(model.model()).unwrap())))
        });
    }
    group.finish();
}

criterion_group!(benches, campaign, reweight);
criterion_main!(benches);
