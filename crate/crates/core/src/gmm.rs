//! Patient preference encoding: a full-covariance Gaussian mixture over
//! `(t, x)` samples fitted by EM, and Gaussian mixture regression on time.

use crate::linalg::{serde_covs, serde_points, symmetrize_clamp, Cov, Point};
use crate::trajectory::ProbTrajectory;
use crate::{Error, Result};
use nalgebra::{Cholesky, DMatrix, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Added to every covariance after each M-step.
pub const COV_REGULARIZATION: f64 = 1e-6;
const MAX_ITERATIONS: usize = 200;
const REL_TOLERANCE: f64 = 1e-6;
const MIN_WEIGHT: f64 = 1e-8;
const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Mixture over joint `(t, x)` vectors; the first coordinate is time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    pub weights: Vec<f64>,
    #[serde(with = "serde_points")]
    pub means: Vec<Point>,
    #[serde(with = "serde_covs")]
    pub covs: Vec<Cov>,
    /// Time range of the data the model was fitted on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_span: Option<[f64; 2]>,
}

/// Fitted model plus the per-iteration log-likelihood trace.
#[derive(Debug, Clone)]
pub struct GmmFit {
    pub model: GmmModel,
    pub log_likelihoods: Vec<f64>,
}

impl GmmModel {
    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    /// Total log-likelihood of `data`.
    pub fn log_likelihood(&self, data: &[Point]) -> Result<f64> {
        let comps = self.factorize()?;
        Ok(data
            .iter()
            .map(|x| log_sum_exp(&comps.iter().map(|c| c.log_weighted_pdf(x)).collect::<Vec<_>>()))
            .sum())
    }

    fn factorize(&self) -> Result<Vec<Component>> {
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.covs)
            .enumerate()
            .map(|(i, ((&w, m), c))| Component::new(w, m.clone(), c.clone(), i))
            .collect()
    }
}

struct Component {
    log_weight: f64,
    mean: Point,
    chol: Cholesky<f64, Dyn>,
    log_det_half: f64,
}

impl Component {
    fn new(weight: f64, mean: Point, cov: Cov, index: usize) -> Result<Self> {
        let chol = Cholesky::new(cov).ok_or(Error::DegenerateComponent { component: index, weight })?;
        let log_det_half = chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum();
        Ok(Self { log_weight: weight.ln(), mean, chol, log_det_half })
    }

    fn log_weighted_pdf(&self, x: &Point) -> f64 {
        let diff = x - &self.mean;
        let z = self.chol.l().solve_lower_triangular(&diff).expect("triangular factor is invertible");
        self.log_weight - 0.5 * (self.mean.len() as f64 * LN_2PI + z.norm_squared()) - self.log_det_half
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn sq_dist(a: &Point, b: &Point) -> f64 {
    (a - b).norm_squared()
}

/// k-means++ seeding followed by Lloyd iterations; returns hard labels.
fn kmeans_labels(data: &[Point], c: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = data.len();
    let mut centers = vec![data[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = data.iter().map(|x| sq_dist(x, &centers[0])).collect();
    while centers.len() < c {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if r < w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centers.push(data[next].clone());
        for (d, x) in d2.iter_mut().zip(data) {
            *d = d.min(sq_dist(x, centers.last().unwrap()));
        }
    }
    let mut labels = vec![0; n];
    for _ in 0..100 {
        let mut changed = false;
        for (l, x) in labels.iter_mut().zip(data) {
            let best = (0..c)
                .min_by(|&a, &b| sq_dist(x, &centers[a]).total_cmp(&sq_dist(x, &centers[b])))
                .unwrap();
            if *l != best {
                *l = best;
                changed = true;
            }
        }
        for (k, center) in centers.iter_mut().enumerate() {
            let members: Vec<&Point> = data.iter().zip(&labels).filter(|(_, &l)| l == k).map(|(x, _)| x).collect();
            if !members.is_empty() {
                *center = members.iter().fold(Point::zeros(x_dim(data)), |acc, x| acc + *x) / members.len() as f64;
            }
        }
        if !changed {
            break;
        }
    }
    labels
}

fn x_dim(data: &[Point]) -> usize {
    data[0].len()
}

/// Weighted M-step for one component. Returns `(weight, mean, cov)`.
fn m_step(data: &[Point], resp: &[f64]) -> (f64, Point, Cov) {
    let dim = x_dim(data);
    let nk: f64 = resp.iter().sum();
    let mut mean = Point::zeros(dim);
    for (x, &r) in data.iter().zip(resp) {
        mean.axpy(r, x, 1.0);
    }
    if nk > 0.0 {
        mean /= nk;
    }
    let mut cov = Cov::zeros(dim, dim);
    for (x, &r) in data.iter().zip(resp) {
        let d = x - &mean;
        cov.ger(r, &d, &d, 1.0);
    }
    if nk > 0.0 {
        cov /= nk;
    }
    cov = (&cov + cov.transpose()) * 0.5;
    for i in 0..dim {
        cov[(i, i)] += COV_REGULARIZATION;
    }
    (nk / data.len() as f64, mean, cov)
}

/// Fits a `c`-component mixture by EM from a seeded k-means++ start.
pub fn fit_gmm(data: &[Point], c: usize, seed: u64) -> Result<GmmModel> {
    fit_gmm_traced(data, c, seed).map(|f| f.model)
}

pub fn fit_gmm_traced(data: &[Point], c: usize, seed: u64) -> Result<GmmFit> {
    if c < 1 {
        return Err(Error::Config("mixture needs at least one component".into()));
    }
    let dim = data.first().map(|p| p.len()).unwrap_or(0);
    // (1 + d_o) + 1 = d_o + 2 samples per component
    let needed = c * (dim + 1);
    if data.is_empty() || data.len() < needed {
        return Err(Error::InsufficientData { needed, got: data.len() });
    }
    if data.iter().any(|x| x.len() != dim || x.iter().any(|v| !v.is_finite())) {
        return Err(Error::Degenerate("non-finite or ragged mixture data".into()));
    }
    let n = data.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = kmeans_labels(data, c, &mut rng);

    let mut resp = vec![vec![0.0; n]; c];
    for (i, &l) in labels.iter().enumerate() {
        resp[l][i] = 1.0;
    }
    let mut model = GmmModel {
        weights: vec![0.0; c],
        means: vec![Point::zeros(dim); c],
        covs: vec![Cov::zeros(dim, dim); c],
        input_span: Some(time_span(data)),
    };
    let mut reseeded = false;
    let apply_m_step = |model: &mut GmmModel, resp: &[Vec<f64>], reseeded: &mut bool| -> Result<()> {
        for k in 0..c {
            let (w, m, s) = m_step(data, &resp[k]);
            model.weights[k] = w;
            model.means[k] = m;
            model.covs[k] = s;
        }
        if let Some(k) = (0..c).find(|&k| model.weights[k] < MIN_WEIGHT) {
            if *reseeded {
                return Err(Error::DegenerateComponent { component: k, weight: model.weights[k] });
            }
            *reseeded = true;
            reseed(model, data, k)?;
        }
        Ok(())
    };
    apply_m_step(&mut model, &resp, &mut reseeded)?;

    let mut trace = Vec::new();
    for _ in 0..MAX_ITERATIONS {
        let comps = model.factorize()?;
        let mut ll = 0.0;
        let mut logp = vec![0.0; c];
        for i in 0..n {
            for (k, comp) in comps.iter().enumerate() {
                logp[k] = comp.log_weighted_pdf(&data[i]);
            }
            let lse = log_sum_exp(&logp);
            ll += lse;
            for k in 0..c {
                resp[k][i] = (logp[k] - lse).exp();
            }
        }
        if !ll.is_finite() {
            return Err(Error::Degenerate("non-finite log-likelihood".into()));
        }
        let converged = trace
            .last()
            .is_some_and(|&prev: &f64| (ll - prev).abs() <= REL_TOLERANCE * prev.abs());
        trace.push(ll);
        if converged {
            break;
        }
        apply_m_step(&mut model, &resp, &mut reseeded)?;
    }
    Ok(GmmFit { model, log_likelihoods: trace })
}

fn time_span(data: &[Point]) -> [f64; 2] {
    data.iter().fold([f64::INFINITY, f64::NEG_INFINITY], |[lo, hi], x| [lo.min(x[0]), hi.max(x[0])])
}

/// Moves a starved component onto the worst-explained sample.
fn reseed(model: &mut GmmModel, data: &[Point], k: usize) -> Result<()> {
    let comps: Vec<Component> = (0..model.components())
        .filter(|&j| j != k)
        .map(|j| Component::new(model.weights[j].max(MIN_WEIGHT), model.means[j].clone(), model.covs[j].clone(), j))
        .collect::<Result<_>>()?;
    let worst = data
        .iter()
        .min_by(|a, b| {
            let la = log_sum_exp(&comps.iter().map(|c| c.log_weighted_pdf(a)).collect::<Vec<_>>());
            let lb = log_sum_exp(&comps.iter().map(|c| c.log_weighted_pdf(b)).collect::<Vec<_>>());
            la.total_cmp(&lb)
        })
        .unwrap();
    let (_, _, global) = m_step(data, &vec![1.0; data.len()]);
    model.means[k] = worst.clone();
    model.covs[k] = global / (model.components() as f64).powi(2);
    model.weights[k] = 1.0 / data.len() as f64;
    let total: f64 = model.weights.iter().sum();
    model.weights.iter_mut().for_each(|w| *w /= total);
    Ok(())
}

/// Conditions the mixture on time, returning the moment-matched Gaussian
/// over positions at each query time.
pub fn gmr_condition(model: &GmmModel, times: &[f64]) -> Result<ProbTrajectory> {
    let dim = model.dim();
    let d_o = dim - 1;
    if let Some([lo, hi]) = model.input_span {
        if let Some(t) = times.iter().find(|&&t| t < lo - 1e-9 || t > hi + 1e-9) {
            log::warn!("GMR query at t = {t} s extrapolates beyond fitted span [{lo}, {hi}]");
        }
    }
    let parts: Vec<_> = (0..model.components())
        .map(|k| {
            let m = &model.means[k];
            let s = &model.covs[k];
            let s_tt = s[(0, 0)];
            let s_xt = s.view((1, 0), (d_o, 1)).column(0).into_owned();
            let s_xx = s.view((1, 1), (d_o, d_o)).into_owned();
            let cond_cov = &s_xx - &s_xt * s_xt.transpose() / s_tt;
            let mu_x = m.rows(1, d_o).into_owned();
            (model.weights[k].ln(), m[0], s_tt, mu_x, s_xt, cond_cov)
        })
        .collect();
    let mut means = Vec::with_capacity(times.len());
    let mut covs = Vec::with_capacity(times.len());
    for &t in times {
        let logh: Vec<f64> = parts
            .iter()
            .map(|(lw, mt, stt, ..)| lw - 0.5 * (LN_2PI + stt.ln() + (t - mt).powi(2) / stt))
            .collect();
        let lse = log_sum_exp(&logh);
        if !lse.is_finite() {
            return Err(Error::Conditioning { time: t, reason: "responsibilities are not finite".into() });
        }
        let mut mean = Point::zeros(d_o);
        let mut second = DMatrix::zeros(d_o, d_o);
        for (lh, (_, mt, stt, mu_x, s_xt, cond_cov)) in logh.iter().zip(&parts) {
            let h = (lh - lse).exp();
            let mu = mu_x + s_xt * ((t - mt) / stt);
            mean.axpy(h, &mu, 1.0);
            second += (cond_cov + &mu * mu.transpose()) * h;
        }
        let cov = second - &mean * mean.transpose();
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Conditioning { time: t, reason: "non-finite moments".into() });
        }
        means.push(mean);
        covs.push(cov);
    }
    let covs = covs.iter().map(|c| symmetrize_clamp(c, 0.0)).collect();
    ProbTrajectory::new(times.to_vec(), means, covs)
}

/// Responsibilities `h_c(t)` of each component for time `t`.
pub fn responsibilities(model: &GmmModel, t: f64) -> Vec<f64> {
    let logh: Vec<f64> = (0..model.components())
        .map(|k| {
            let stt = model.covs[k][(0, 0)];
            model.weights[k].ln() - 0.5 * (LN_2PI + stt.ln() + (t - model.means[k][0]).powi(2) / stt)
        })
        .collect();
    let lse = log_sum_exp(&logh);
    logh.iter().map(|l| (l - lse).exp()).collect()
}
