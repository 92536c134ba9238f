//! Kernelized trajectory distribution with via-point merging.
//!
//! The parametric trajectory model is never materialized: mean and
//! covariance at a query time come from the kernel-ridge form
//!
//! ```text
//! E[x(t*)] = k* (K + λ_μ Σ)⁻¹ μ
//! D[x(t*)] = (n / λ_Σ) (k** − k* (K + λ_Σ Σ)⁻¹ k*ᵀ)
//! ```
//!
//! where `K` is the block kernel matrix of the merged reference/via-point
//! set, `Σ` its block-diagonal covariance and `μ` the stacked means.

use crate::config::{SessionConfig, VarianceCount};
use crate::linalg::{self, Cov, Point};
use crate::trajectory::{ProbTrajectory, TimedTrajectory, ViaPoint};
use crate::viapoint::boundary_via_points;
use crate::{Error, Result};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

/// Jitter added to every covariance block before factorization.
pub const COV_JITTER: f64 = 1e-8;

/// Squared-exponential kernel `exp(−ϱ (a − b)²)`.
pub fn kernel(a: f64, b: f64, width: f64) -> f64 {
    (-width * (a - b) * (a - b)).exp()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KmpParams {
    pub lambda_mean: f64,
    pub lambda_cov: f64,
    pub kernel_width: f64,
    pub variance_count: VarianceCount,
}

impl KmpParams {
    pub fn from_config(cfg: &SessionConfig) -> Self {
        Self {
            lambda_mean: cfg.lambda_mean,
            lambda_cov: cfg.lambda_cov,
            kernel_width: cfg.kernel_width,
            variance_count: cfg.variance_count,
        }
    }
}

/// Fitted kernel model over the merged dataset.
#[derive(Debug, Clone)]
pub struct KmpModel {
    params: KmpParams,
    ref_times: Vec<f64>,
    ref_means: Vec<Point>,
    ref_covs: Vec<Cov>,
    /// Reference waypoints before merging.
    base_len: usize,
    /// `(K + λ_μ Σ)⁻¹ μ`, stacked.
    mean_weights: DVector<f64>,
    cov_factor: Cholesky<f64, Dyn>,
    dim: usize,
}

impl KmpModel {
    pub fn len(&self) -> usize {
        self.ref_times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ref_times.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.ref_times
    }

    pub fn means(&self) -> &[Point] {
        &self.ref_means
    }

    pub fn covs(&self) -> &[Cov] {
        &self.ref_covs
    }

    pub fn params(&self) -> KmpParams {
        self.params
    }

    fn variance_scale(&self) -> f64 {
        let n = match self.params.variance_count {
            VarianceCount::Extended => self.len(),
            VarianceCount::Reference => self.base_len,
        };
        n as f64 / self.params.lambda_cov
    }

    fn kernel_row(&self, t: f64) -> Vec<f64> {
        self.ref_times.iter().map(|&tj| kernel(t, tj, self.params.kernel_width)).collect()
    }

    pub fn predict_mean(&self, t: f64) -> Point {
        let d = self.dim;
        let k = self.kernel_row(t);
        Point::from_fn(d, |a, _| k.iter().enumerate().map(|(j, kj)| kj * self.mean_weights[j * d + a]).sum())
    }

    pub fn predict_cov(&self, t: f64) -> Cov {
        let d = self.dim;
        let k = self.kernel_row(t);
        let mut hstar = DMatrix::zeros(self.len() * d, d);
        for (j, kj) in k.iter().enumerate() {
            for a in 0..d {
                hstar[(j * d + a, a)] = *kj;
            }
        }
        let solved = self.cov_factor.solve(&hstar);
        let kss = kernel(t, t, self.params.kernel_width);
        let cov = (Cov::identity(d, d) * kss - hstar.transpose() * solved) * self.variance_scale();
        cov
    }
}

/// Merges via-points into the reference set.
///
/// A via-point within `duration / (2N)` of a reference time replaces that
/// entry, time included; otherwise it is inserted, keeping times sorted.
pub fn merge_dataset(reference: &ProbTrajectory, vias: &[ViaPoint]) -> (Vec<f64>, Vec<Point>, Vec<Cov>) {
    let mut times = reference.times().to_vec();
    let mut means = reference.means().to_vec();
    let mut covs = reference.covs().to_vec();
    let n = reference.len();
    let span = times[n - 1] - times[0];
    let tol = span / (2.0 * n as f64);
    let mut appended: Vec<(f64, Point, Cov)> = Vec::new();
    for v in vias {
        let nearest = (0..n)
            .min_by(|&a, &b| (times[a] - v.time).abs().total_cmp(&(times[b] - v.time).abs()))
            .unwrap();
        if (times[nearest] - v.time).abs() < tol {
            times[nearest] = v.time;
            means[nearest] = v.mean.clone();
            covs[nearest] = v.cov.clone();
        } else {
            appended.push((v.time, v.mean.clone(), v.cov.clone()));
        }
    }
    if appended.is_empty() {
        return (times, means, covs);
    }
    let mut rows: Vec<(f64, Point, Cov)> = times.into_iter().zip(means).zip(covs).map(|((t, m), c)| (t, m, c)).collect();
    rows.extend(appended);
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out = (vec![], vec![], vec![]);
    for (t, m, c) in rows {
        out.0.push(t);
        out.1.push(m);
        out.2.push(c);
    }
    out
}

fn block_system(times: &[f64], covs: &[Cov], lambda: f64, width: f64, d: usize) -> DMatrix<f64> {
    let n = times.len();
    let mut a = DMatrix::zeros(n * d, n * d);
    for i in 0..n {
        for j in 0..n {
            let k = kernel(times[i], times[j], width);
            for c in 0..d {
                a[(i * d + c, j * d + c)] = k;
            }
        }
        for r in 0..d {
            for c in 0..d {
                a[(i * d + r, i * d + c)] += lambda * covs[i][(r, c)];
            }
        }
    }
    // exact symmetry for the factorization
    (&a + a.transpose()) * 0.5
}

fn factor(a: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    let copy = a.clone();
    Cholesky::new(a).ok_or_else(|| Error::IllConditioned { condition: linalg::condition_estimate(&copy) })
}

/// Fits the kernel model to a reference distribution plus via-points.
pub fn kmp_fit(reference: &ProbTrajectory, vias: &[ViaPoint], params: KmpParams) -> Result<KmpModel> {
    reference.validate()?;
    let d = reference.dim();
    let (t0, t1) = (reference.times()[0], reference.times()[reference.len() - 1]);
    for v in vias {
        if v.time < t0 - 1e-9 || v.time > t1 + 1e-9 {
            return Err(Error::OutOfRange { time: v.time, start: t0, end: t1 });
        }
        if v.mean.len() != d {
            return Err(Error::Dimension { expected: d, got: v.mean.len() });
        }
    }
    let (times, means, covs) = merge_dataset(reference, vias);
    let covs: Vec<Cov> = covs.into_iter().map(|c| c + Cov::identity(d, d) * COV_JITTER).collect();
    let mu = DVector::from_iterator(means.len() * d, means.iter().flat_map(|m| m.iter().copied()));
    let mean_factor = factor(block_system(&times, &covs, params.lambda_mean, params.kernel_width, d))?;
    let cov_factor = factor(block_system(&times, &covs, params.lambda_cov, params.kernel_width, d))?;
    let mean_weights = mean_factor.solve(&mu);
    Ok(KmpModel {
        params,
        ref_times: times,
        ref_means: means,
        ref_covs: covs,
        base_len: reference.len(),
        mean_weights,
        cov_factor,
        dim: d,
    })
}

/// Mean and covariance at each query time.
pub fn kmp_predict(model: &KmpModel, times: &[f64]) -> Result<ProbTrajectory> {
    if let Some(t) = times.iter().find(|t| !t.is_finite()) {
        return Err(Error::Degenerate(format!("non-finite query time {t}")));
    }
    let means = times.iter().map(|&t| model.predict_mean(t)).collect();
    let covs = times.iter().map(|&t| linalg::symmetrize_clamp(&model.predict_cov(t), 0.0)).collect();
    ProbTrajectory::sanitize(times.to_vec(), means, covs)
}

/// Next reference: the preference deformed through the therapist via-points,
/// pinned to the desired motion's endpoints, evaluated on the waypoint grid.
pub fn deform_reference(
    preference: &ProbTrajectory,
    vias: &[ViaPoint],
    desired: &TimedTrajectory,
    cfg: &SessionConfig,
) -> Result<TimedTrajectory> {
    let mut all = vias.to_vec();
    all.extend(boundary_via_points(desired, cfg.duration)?);
    let model = kmp_fit(preference, &all, KmpParams::from_config(cfg))?;
    let grid = cfg.grid();
    let means = grid.iter().map(|&t| model.predict_mean(t)).collect();
    Ok(TimedTrajectory::new(cfg.grid_dt(), means)?.with_central_velocities())
}
