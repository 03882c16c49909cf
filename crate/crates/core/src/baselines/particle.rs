use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::gaussian::{matrix_sqrt, GaussianState, LinearStateModel, MeasurementModel};
use crate::par;

/// Weighted particle set. Particles are stored row-major, one row of length
/// `dim` per particle.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleCloud {
    dim: usize,
    particles: Vec<f64>,
    weights: Vec<f64>,
}

impl ParticleCloud {
    pub fn new(dim: usize, particles: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if dim == 0 || particles.len() != dim * weights.len() || weights.is_empty() {
            return Err(Error::DimensionMismatch(format!(
                "{} coordinates do not form {} particles of dimension {dim}",
                particles.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| w.is_nan() || *w < 0.0) {
            return Err(Error::InvalidParameter("particle weights must be non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!("particle weights sum to {total}")));
        }
        // absorb summation roundoff
        let weights = weights.into_iter().map(|w| w / total).collect();
        Ok(Self { dim, particles, weights })
    }

    /// Uniformly weighted cloud with every row of `particles` as a particle.
    pub fn uniform(dim: usize, particles: Vec<f64>) -> Result<Self> {
        let count = particles.len().checked_div(dim).unwrap_or(0);
        Self::new(dim, particles, vec![1.0 / count.max(1) as f64; count])
    }

    /// `count` equally weighted draws from a Gaussian.
    pub fn sample(prior: &GaussianState, count: usize, rng: &mut impl Rng) -> Result<Self> {
        if count == 0 {
            return Err(Error::InvalidParameter("particle count must be positive".into()));
        }
        let n = prior.dim();
        let root = matrix_sqrt(prior.cov())?;
        let mut particles = Vec::with_capacity(count * n);
        let mut z = DVector::zeros(n);
        for _ in 0..count {
            z.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
            let x = prior.mean() + &root * &z;
            particles.extend(x.iter());
        }
        Self::uniform(n, particles)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn particle(&self, i: usize) -> &[f64] {
        &self.particles[i * self.dim..(i + 1) * self.dim]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], f64)> + '_ {
        self.particles.chunks_exact(self.dim).zip(self.weights.iter().copied())
    }

    pub fn mean(&self) -> DVector<f64> {
        let mut m = DVector::zeros(self.dim);
        for (p, w) in self.iter() {
            for (acc, v) in m.iter_mut().zip(p) {
                *acc += w * v;
            }
        }
        m
    }

    /// Weighted covariance (normalized by the weight sum, no bias correction).
    pub fn cov(&self) -> DMatrix<f64> {
        let m = self.mean();
        let mut c = DMatrix::zeros(self.dim, self.dim);
        for (p, w) in self.iter() {
            for i in 0..self.dim {
                let di = p[i] - m[i];
                for j in i..self.dim {
                    c[(i, j)] += w * di * (p[j] - m[j]);
                }
            }
        }
        for i in 0..self.dim {
            for j in 0..i {
                c[(i, j)] = c[(j, i)];
            }
        }
        c
    }

    /// Effective sample size `1 / Σw²`.
    pub fn effective_size(&self) -> f64 {
        1.0 / self.weights.iter().map(|w| w * w).sum::<f64>()
    }

    /// Moves every particle through `x ↦ F·x + w`, `w ~ N(0, W)`. Noise is
    /// drawn sequentially so results depend only on the generator state.
    pub fn propagate(&self, model: &LinearStateModel, rng: &mut impl Rng) -> Result<Self> {
        let n = self.dim;
        if model.transition().nrows() != n {
            return Err(Error::DimensionMismatch("transition does not match particle dimension".into()));
        }
        let root = matrix_sqrt(model.noise_cov())?;
        let f = model.transition();
        let mut out = Vec::with_capacity(self.particles.len());
        let mut z = DVector::zeros(n);
        for p in self.particles.chunks_exact(n) {
            z.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
            let noise = &root * &z;
            for i in 0..n {
                let mut acc = noise[i];
                for (j, pj) in p.iter().enumerate() {
                    acc += f[(i, j)] * pj;
                }
                out.push(acc);
            }
        }
        Ok(Self {
            dim: n,
            particles: out,
            weights: self.weights.clone(),
        })
    }

    /// Multiplies the weights by the Gaussian measurement likelihood and
    /// renormalizes, working in log space with the maximum subtracted.
    pub fn reweight(&self, meas: &MeasurementModel) -> Result<Self> {
        let root = matrix_sqrt(meas.noise_cov())?;
        let d = meas.dim();
        let whiten = root
            .solve_lower_triangular(&DMatrix::identity(d, d))
            .ok_or(Error::SingularNoiseSqrt)?;
        let n = self.dim;
        let y = meas.value();
        let loglik = par::map_range(self.len(), |i| {
            let x = DVector::from_column_slice(&self.particles[i * n..(i + 1) * n]);
            let r = &whiten * (y - meas.eval(&x));
            let ll = -0.5 * r.norm_squared();
            let lw = ll + self.weights[i].ln();
            if lw.is_nan() {
                f64::NEG_INFINITY
            } else {
                lw
            }
        });
        let peak = loglik.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !peak.is_finite() {
            return Err(Error::DegenerateWeights);
        }
        let mut weights: Vec<f64> = loglik.iter().map(|l| (l - peak).exp()).collect();
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        Ok(Self {
            dim: n,
            particles: self.particles.clone(),
            weights,
        })
    }
}

/// Systematic resampling to `cloud.len()` equally weighted particles using a
/// single uniform offset.
pub fn systematic_resample(cloud: &ParticleCloud, rng: &mut impl Rng) -> ParticleCloud {
    let count = cloud.len();
    let step = 1.0 / count as f64;
    let offset: f64 = rng.random::<f64>() * step;
    let mut particles = Vec::with_capacity(cloud.particles.len());
    let mut cumulative = cloud.weights[0];
    let mut source = 0;
    for j in 0..count {
        let target = offset + j as f64 * step;
        while target > cumulative && source + 1 < count {
            source += 1;
            cumulative += cloud.weights[source];
        }
        particles.extend_from_slice(cloud.particle(source));
    }
    ParticleCloud {
        dim: cloud.dim,
        particles,
        weights: vec![step; count],
    }
}

/// Weighted cloud after the measurement and its resampled counterpart.
#[derive(Clone, Debug, PartialEq)]
pub struct PfStep {
    pub weighted: ParticleCloud,
    pub resampled: ParticleCloud,
}

/// One bootstrap particle filter step: propagate with sampled process
/// noise, weight by the measurement likelihood, resample systematically.
pub fn bootstrap_pf_step(
    cloud: &ParticleCloud,
    state_model: &LinearStateModel,
    meas: &MeasurementModel,
    seed: u64,
) -> Result<PfStep> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let moved = cloud.propagate(state_model, &mut rng)?;
    let weighted = moved.reweight(meas)?;
    let resampled = systematic_resample(&weighted, &mut rng);
    Ok(PfStep { weighted, resampled })
}
