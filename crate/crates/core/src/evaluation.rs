//! Accuracy and consistency metrics: error quantiles, ellipsoid coverage and
//! a grid estimate of the KL divergence from a particle reference to a
//! Gaussian approximation.

use nalgebra::{DVector, Matrix2, Vector2};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::baselines::ParticleCloud;
use crate::error::{Error, Result};
use crate::gaussian::GaussianState;

/// Quantile levels reported for errors and coverage.
pub const REPORT_LEVELS: [f64; 5] = [0.05, 0.25, 0.5, 0.75, 0.95];

/// Cells per axis of the KL grid.
pub const GRID_CELLS: usize = 50;

/// Largest reference mass allowed outside the grid.
pub const MAX_OUTSIDE_MASS: f64 = 1e-3;

const DENSITY_FLOOR: f64 = 1e-300;

/// Empirical quantiles with linear interpolation between order statistics
/// (`p = 0` is the minimum, `p = 1` the maximum). Infinite errors sort last.
pub fn error_quantiles(errors: &[f64], ps: &[f64]) -> Result<Vec<f64>> {
    if errors.is_empty() {
        return Err(Error::EmptySample);
    }
    if errors.iter().any(|e| e.is_nan()) {
        return Err(Error::InvalidParameter("errors contain NaN".into()));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    ps.iter()
        .map(|&p| {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidParameter(format!("quantile level {p} outside [0, 1]")));
            }
            let pos = p * (sorted.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            let frac = pos - lo as f64;
            let (a, b) = (sorted[lo], sorted[hi]);
            Ok(if frac == 0.0 || a == b {
                a
            } else if b.is_infinite() {
                b
            } else {
                a + frac * (b - a)
            })
        })
        .collect()
}

/// Squared Mahalanobis distance of `truth` from `est`.
pub fn mahalanobis_sq(truth: &DVector<f64>, est: &GaussianState) -> Result<f64> {
    if truth.len() != est.dim() {
        return Err(Error::DimensionMismatch("truth and estimate dimensions differ".into()));
    }
    let chol = est.cov().clone().cholesky().ok_or(Error::SingularCovariance)?;
    let diff = est.mean() - truth;
    let m = diff.dot(&chol.solve(&diff));
    if m.is_finite() {
        Ok(m)
    } else {
        Err(Error::SingularCovariance)
    }
}

/// For each level `p`, whether `truth` lies strictly inside the `p`
/// probability ellipsoid of `est`.
pub fn ellipsoid_coverage(truth: &DVector<f64>, est: &GaussianState, ps: &[f64]) -> Result<Vec<bool>> {
    let m = mahalanobis_sq(truth, est)?;
    let chi2 = ChiSquared::new(est.dim() as f64).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let level = chi2.cdf(m);
    Ok(ps.iter().map(|&p| level < p).collect())
}

/// Rectangular grid over two state coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lower: [f64; 2],
    pub upper: [f64; 2],
    pub cells: usize,
}

impl GridSpec {
    /// Bounds of the particle positions padded by three weighted standard
    /// deviations on each side.
    pub fn covering(reference: &ParticleCloud, dims: [usize; 2], cells: usize) -> Result<Self> {
        if dims.iter().any(|&d| d >= reference.dim()) {
            return Err(Error::DimensionMismatch("grid dims exceed particle dimension".into()));
        }
        let cov = reference.cov();
        let mut lower = [f64::INFINITY; 2];
        let mut upper = [f64::NEG_INFINITY; 2];
        for (p, _) in reference.iter() {
            for a in 0..2 {
                lower[a] = lower[a].min(p[dims[a]]);
                upper[a] = upper[a].max(p[dims[a]]);
            }
        }
        for a in 0..2 {
            let pad = 3.0 * cov[(dims[a], dims[a])].max(0.0).sqrt();
            lower[a] -= pad;
            upper[a] += pad;
        }
        let grid = Self { lower, upper, cells };
        grid.validate()?;
        Ok(grid)
    }

    fn validate(&self) -> Result<()> {
        if self.cells == 0 {
            return Err(Error::InvalidParameter("grid needs at least one cell".into()));
        }
        for a in 0..2 {
            if !(self.upper[a] - self.lower[a]).is_finite() || self.upper[a] <= self.lower[a] {
                return Err(Error::InvalidParameter(format!(
                    "degenerate grid axis [{}, {}]",
                    self.lower[a], self.upper[a]
                )));
            }
        }
        Ok(())
    }

    fn width(&self, axis: usize) -> f64 {
        (self.upper[axis] - self.lower[axis]) / self.cells as f64
    }

    fn cell_of(&self, axis: usize, v: f64) -> Option<usize> {
        let t = (v - self.lower[axis]) / self.width(axis);
        if (0.0..self.cells as f64).contains(&t) {
            Some(t as usize)
        } else if v == self.upper[axis] {
            Some(self.cells - 1)
        } else {
            None
        }
    }

    fn midpoint(&self, axis: usize, cell: usize) -> f64 {
        self.lower[axis] + (cell as f64 + 0.5) * self.width(axis)
    }
}

/// Particle mass per grid cell, reusable across Gaussian approximations.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceHistogram {
    grid: GridSpec,
    dims: [usize; 2],
    mass: Vec<f64>,
}

impl ReferenceHistogram {
    pub fn new(reference: &ParticleCloud, grid: GridSpec, dims: [usize; 2]) -> Result<Self> {
        grid.validate()?;
        if dims.iter().any(|&d| d >= reference.dim()) {
            return Err(Error::DimensionMismatch("grid dims exceed particle dimension".into()));
        }
        let mut mass = vec![0.0; grid.cells * grid.cells];
        let mut outside = 0.0;
        for (p, w) in reference.iter() {
            match (grid.cell_of(0, p[dims[0]]), grid.cell_of(1, p[dims[1]])) {
                (Some(i), Some(j)) => mass[i * grid.cells + j] += w,
                _ => outside += w,
            }
        }
        if outside > MAX_OUTSIDE_MASS {
            return Err(Error::GridTooSmall { outside });
        }
        Ok(Self { grid, dims, mass })
    }

    /// Reference cells covering the reference cloud with default resolution.
    pub fn covering(reference: &ParticleCloud, dims: [usize; 2]) -> Result<Self> {
        let grid = GridSpec::covering(reference, dims, GRID_CELLS)?;
        Self::new(reference, grid, dims)
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    /// `Σ p ln(p/q)` over cells with reference mass, `q` being the marginal
    /// density of `approx` at the cell midpoint times the cell area.
    pub fn kl_from(&self, approx: &GaussianState) -> Result<f64> {
        let [a, b] = self.dims;
        if a >= approx.dim() || b >= approx.dim() {
            return Err(Error::DimensionMismatch("grid dims exceed state dimension".into()));
        }
        let m = Vector2::new(approx.mean()[a], approx.mean()[b]);
        let c = approx.cov();
        let cov = Matrix2::new(c[(a, a)], c[(a, b)], c[(b, a)], c[(b, b)]);
        let det = cov.determinant();
        let inv = cov.try_inverse().ok_or(Error::SingularCovariance)?;
        if !det.is_finite() || det <= 0.0 {
            return Err(Error::SingularCovariance);
        }
        let area = self.grid.width(0) * self.grid.width(1);
        let norm = area / (2.0 * std::f64::consts::PI * det.sqrt());
        let n = self.grid.cells;
        let mut kl = 0.0;
        for i in 0..n {
            let u = self.grid.midpoint(0, i) - m[0];
            for j in 0..n {
                let p = self.mass[i * n + j];
                if p <= 0.0 {
                    continue;
                }
                let d = Vector2::new(u, self.grid.midpoint(1, j) - m[1]);
                let q = (norm * (-0.5 * d.dot(&(inv * d))).exp()).max(DENSITY_FLOOR);
                kl += p * (p / q).ln();
            }
        }
        Ok(kl)
    }
}

/// Grid KL divergence of `approx` from the particle reference over the two
/// state coordinates `dims`.
pub fn kl_divergence_grid(
    reference: &ParticleCloud,
    approx: &GaussianState,
    grid: &GridSpec,
    dims: [usize; 2],
) -> Result<f64> {
    ReferenceHistogram::new(reference, *grid, dims)?.kl_from(approx)
}

/// One line of a campaign report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub scenario: String,
    pub filter: String,
    pub param: String,
    /// Step number starting at 1, `all` for values pooled over steps.
    pub step: String,
    pub metric: String,
    #[serde(with = "nonfinite::option")]
    pub p: Option<f64>,
    #[serde(with = "nonfinite")]
    pub value: f64,
    pub runs: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub config_hash: String,
    pub ref_particles: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub metadata: ReportMetadata,
    pub rows: Vec<ReportRow>,
}

impl MetricsReport {
    /// Rows matching `metric` (and `step` when given).
    pub fn select<'a>(&'a self, metric: &'a str, step: Option<&'a str>) -> impl Iterator<Item = &'a ReportRow> + 'a {
        self.rows
            .iter()
            .filter(move |r| r.metric == metric && step.is_none_or(|s| r.step == s))
    }

    /// Looks up one value.
    pub fn value(&self, filter: &str, param: &str, step: &str, metric: &str, p: Option<f64>) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.filter == filter && r.param == param && r.step == step && r.metric == metric && r.p == p)
            .map(|r| r.value)
    }
}

/// Serializes non-finite floats as the strings `inf`, `-inf` and `nan`.
pub(crate) mod nonfinite {
    use serde::{Deserialize, Deserializer, Serializer};

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(&format_value(*v))
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }

    pub fn format_value(v: f64) -> String {
        if v.is_nan() {
            "nan".into()
        } else if v == f64::INFINITY {
            "inf".into()
        } else if v == f64::NEG_INFINITY {
            "-inf".into()
        } else {
            format!("{v}")
        }
    }

    pub mod vec {
        use serde::ser::SerializeSeq;
        use serde::{Deserialize, Deserializer, Serializer};

        struct Item(f64);

        impl serde::Serialize for Item {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                super::serialize(&self.0, s)
            }
        }

        pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
            let mut seq = s.serialize_seq(Some(v.len()))?;
            for x in v {
                seq.serialize_element(&Item(*x))?;
            }
            seq.end()
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
            Vec::<super::Repr>::deserialize(d)?
                .into_iter()
                .map(|r| match r {
                    super::Repr::Num(v) => Ok(v),
                    super::Repr::Text(t) => t.parse().map_err(serde::de::Error::custom),
                })
                .collect()
        }
    }

    pub mod option {
        use serde::{Deserialize, Deserializer, Serializer};

        pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
            match v {
                Some(x) => super::serialize(x, s),
                None => s.serialize_none(),
            }
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
            match Option::<super::Repr>::deserialize(d)? {
                None => Ok(None),
                Some(super::Repr::Num(v)) => Ok(Some(v)),
                Some(super::Repr::Text(t)) => t.parse().map(Some).map_err(serde::de::Error::custom),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn median_of_five() {
        assert_eq!(error_quantiles(&[5.0, 1.0, 4.0, 2.0, 3.0], &[0.5]).unwrap(), vec![3.0]);
        assert_eq!(error_quantiles(&[1.0, 2.0], &[0.25]).unwrap(), vec![1.25]);
        assert_eq!(error_quantiles(&[], &[0.5]).unwrap_err(), Error::EmptySample);
    }

    #[test]
    fn constant_sample() {
        let q = error_quantiles(&[2.5; 7], &REPORT_LEVELS).unwrap();
        assert!(q.iter().all(|&v| v == 2.5));
    }

    #[test]
    fn infinite_errors_sort_last() {
        let q = error_quantiles(&[1.0, 2.0, f64::INFINITY], &[0.5, 0.75, 1.0]).unwrap();
        assert_eq!(q, vec![2.0, f64::INFINITY, f64::INFINITY]);
    }

    #[test]
    fn half_normal_quantile() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e: Vec<f64> = (0..10_000).map(|_| rng.sample::<f64, _>(StandardNormal).abs()).collect();
        let q = error_quantiles(&e, &[0.95]).unwrap()[0];
        assert!((q - 1.959_964).abs() < 0.05, "{q}");
    }

    fn scalar(mean: f64, var: f64) -> GaussianState {
        GaussianState::new(DVector::from_element(1, mean), DMatrix::from_element(1, 1, var)).unwrap()
    }

    #[test]
    fn coverage_examples() {
        let est = GaussianState::new(DVector::zeros(3), DMatrix::identity(3, 3)).unwrap();
        assert!(ellipsoid_coverage(&DVector::zeros(3), &est, &REPORT_LEVELS)
            .unwrap()
            .iter()
            .all(|&b| b));
        // χ²₁ quantile at 0.95 is 3.841459; a distance a hair beyond sits outside
        let edge = 3.841_458_820_694_124_f64.sqrt();
        let x = DVector::from_element(1, edge + 1e-9);
        assert_eq!(ellipsoid_coverage(&x, &scalar(0.0, 1.0), &[0.95]).unwrap(), vec![false]);
        let inside = DVector::from_element(1, edge - 1e-6);
        assert_eq!(ellipsoid_coverage(&inside, &scalar(0.0, 1.0), &[0.95]).unwrap(), vec![true]);
        assert_eq!(
            ellipsoid_coverage(&DVector::from_element(1, 1.96), &scalar(0.0, 1.0), &[0.95]).unwrap(),
            vec![false]
        );
    }

    #[test]
    fn singular_covariance_rejected() {
        let est = GaussianState::new(DVector::zeros(2), DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0])).unwrap();
        assert_eq!(
            ellipsoid_coverage(&DVector::zeros(2), &est, &[0.5]).unwrap_err(),
            Error::SingularCovariance
        );
    }

    #[test]
    fn coverage_is_calibrated() {
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 1.0]);
        let est = GaussianState::new(DVector::from_vec(vec![1.0, -1.0]), cov.clone()).unwrap();
        let root = cov.cholesky().unwrap().l();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 10_000;
        let mut hits = [0usize; 5];
        for _ in 0..n {
            let z = DVector::from_fn(2, |_, _| rng.sample(StandardNormal));
            let x = est.mean() + &root * z;
            for (h, inside) in hits.iter_mut().zip(ellipsoid_coverage(&x, &est, &REPORT_LEVELS).unwrap()) {
                *h += inside as usize;
            }
        }
        for (h, p) in hits.iter().zip(REPORT_LEVELS) {
            let frac = *h as f64 / n as f64;
            assert!((frac - p).abs() < 0.02, "level {p}: {frac}");
        }
    }

    fn gaussian_cloud(state: &GaussianState, count: usize, seed: u64) -> ParticleCloud {
        ParticleCloud::sample(state, count, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn self_divergence_is_small() {
        let state = GaussianState::new(
            DVector::from_vec(vec![1.0, 2.0, 0.0]),
            DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.0, 0.5, 1.0, 0.0, 0.0, 0.0, 1.0]),
        )
        .unwrap();
        let cloud = gaussian_cloud(&state, 100_000, 1);
        let hist = ReferenceHistogram::covering(&cloud, [0, 1]).unwrap();
        let kl = hist.kl_from(&state).unwrap();
        assert!(kl.abs() < 0.05, "{kl}");
    }

    #[test]
    fn distant_approximation_diverges() {
        let state = GaussianState::new(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
        let cloud = gaussian_cloud(&state, 10_000, 2);
        let far = GaussianState::new(DVector::from_vec(vec![8.0, 8.0]), DMatrix::identity(2, 2) * 0.1).unwrap();
        let grid = GridSpec::covering(&cloud, [0, 1], GRID_CELLS).unwrap();
        assert!(kl_divergence_grid(&cloud, &far, &grid, [0, 1]).unwrap() > 5.0);
    }

    #[test]
    fn small_grid_is_rejected() {
        let state = GaussianState::new(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
        let cloud = gaussian_cloud(&state, 10_000, 4);
        let grid = GridSpec {
            lower: [-0.5, -0.5],
            upper: [0.5, 0.5],
            cells: 10,
        };
        assert!(matches!(
            kl_divergence_grid(&cloud, &state, &grid, [0, 1]),
            Err(Error::GridTooSmall { .. })
        ));
    }

    #[test]
    fn nonfinite_values_roundtrip() {
        let row = ReportRow {
            scenario: "s".into(),
            filter: "f".into(),
            param: String::new(),
            step: "all".into(),
            metric: "error_quantile".into(),
            p: Some(0.5),
            value: f64::INFINITY,
            runs: 3,
            seed: 1,
        };
        let text = serde_json::to_string(&row).unwrap();
        assert!(text.contains("\"inf\""));
        assert_eq!(serde_json::from_str::<ReportRow>(&text).unwrap(), row);
    }
}
