//! Therapist skill encoding: partial least squares from therapist state to
//! via-point targets, and reproduction of those via-points for a new patient.

use crate::policy::{SkillRecord, TherapySession};
use crate::trajectory::ViaPoint;
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Scores shorter than this stop the extraction early.
const MIN_SCORE_NORM: f64 = 1e-12;

/// Half-width of the window assigning a via-point to a slot, seconds.
pub const SLOT_WINDOW: f64 = 0.5;

/// Linear latent-variable regression `Y ≈ (X − x̄) B + ȳ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlsModel {
    /// Components actually extracted; may be below the requested count.
    pub latent_count: usize,
    pub x_mean: Vec<f64>,
    pub y_mean: Vec<f64>,
    /// `inputs × outputs`, row-major.
    pub coefficients: Vec<Vec<f64>>,
    /// Input weights `W`, loadings `P` and `Q`, one row per component.
    pub weights: Vec<Vec<f64>>,
    pub x_loadings: Vec<Vec<f64>>,
    pub y_loadings: Vec<Vec<f64>>,
    /// Score vectors `T`, one row per component (training diagnostics).
    pub scores: Vec<Vec<f64>>,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn cols_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.column_iter().map(|c| c.iter().copied().collect()).collect()
}

fn matrix_from_rows(rows: &[Vec<f64>], width: usize) -> Result<DMatrix<f64>> {
    if let Some(r) = rows.iter().find(|r| r.len() != width) {
        return Err(Error::Dimension { expected: width, got: r.len() });
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("non-finite entry in regression data".into()));
    }
    Ok(DMatrix::from_fn(rows.len(), width, |i, j| rows[i][j]))
}

fn column_means(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.mean()))
}

fn center(m: &DMatrix<f64>, means: &DVector<f64>) -> DMatrix<f64> {
    let mut c = m.clone();
    for (j, mut col) in c.column_iter_mut().enumerate() {
        col.add_scalar_mut(-means[j]);
    }
    c
}

/// Unit vector along the dominant left singular direction of `m`, with its
/// largest-magnitude entry made positive so the result is deterministic.
fn dominant_direction(m: &DMatrix<f64>) -> Option<DVector<f64>> {
    let gram = m.transpose() * m;
    let eig = gram.symmetric_eigen();
    let k = eig.eigenvalues.imax();
    if !(eig.eigenvalues[k] > 0.0) {
        return None;
    }
    let mut w = m * eig.eigenvectors.column(k);
    let norm = w.norm();
    if !(norm > 0.0) {
        return None;
    }
    w /= norm;
    if w[w.iamax()] < 0.0 {
        w.neg_mut();
    }
    Some(w)
}

/// Fits a PLS regression with column centering and NIPALS deflation of `X`.
///
/// `latent_count` is clamped to `min(rows − 1, columns)`; extraction stops
/// early when a score vector vanishes.
pub fn pls_fit(x_rows: &[Vec<f64>], y_rows: &[Vec<f64>], latent_count: usize) -> Result<PlsModel> {
    if latent_count == 0 {
        return Err(Error::Config("latent count must be at least 1".into()));
    }
    if x_rows.len() != y_rows.len() {
        return Err(Error::Dimension { expected: x_rows.len(), got: y_rows.len() });
    }
    if x_rows.len() < 2 {
        return Err(Error::InsufficientData { needed: 2, got: x_rows.len() });
    }
    let x = matrix_from_rows(x_rows, x_rows[0].len())?;
    let y = matrix_from_rows(y_rows, y_rows[0].len())?;
    let x_mean = column_means(&x);
    let y_mean = column_means(&y);
    let mut xd = center(&x, &x_mean);
    let yc = center(&y, &y_mean);
    if xd.amax() == 0.0 {
        return Err(Error::Degenerate("regression input has zero variance".into()));
    }

    let (n_in, n_out) = (x.ncols(), y.ncols());
    let max_count = latent_count.min(x.nrows() - 1).min(n_in);
    let mut w_cols = Vec::new();
    let mut p_cols = Vec::new();
    let mut q_cols = Vec::new();
    let mut t_cols = Vec::new();
    for _ in 0..max_count {
        let Some(w) = dominant_direction(&(xd.transpose() * &yc)) else {
            break;
        };
        let t = &xd * &w;
        let tt = t.norm_squared();
        if t.norm() < MIN_SCORE_NORM {
            break;
        }
        let p = xd.transpose() * &t / tt;
        let q = yc.transpose() * &t / tt;
        xd -= &t * p.transpose();
        w_cols.push(w);
        p_cols.push(p);
        q_cols.push(q);
        t_cols.push(t);
    }

    let a = w_cols.len();
    let coefficients = if a == 0 {
        DMatrix::zeros(n_in, n_out)
    } else {
        let w = DMatrix::from_columns(&w_cols);
        let p = DMatrix::from_columns(&p_cols);
        let q = DMatrix::from_columns(&q_cols);
        let ptw = p.transpose() * &w;
        let inv = ptw
            .try_inverse()
            .ok_or_else(|| Error::Degenerate("loading/weight product is singular".into()))?;
        w * inv * q.transpose()
    };
    if coefficients.iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("regression coefficients are not finite".into()));
    }
    let stack = |cols: &[DVector<f64>]| cols.iter().map(|c| c.iter().copied().collect()).collect();
    Ok(PlsModel {
        latent_count: a,
        x_mean: x_mean.iter().copied().collect(),
        y_mean: y_mean.iter().copied().collect(),
        coefficients: rows_of(&coefficients),
        weights: stack(&w_cols),
        x_loadings: stack(&p_cols),
        y_loadings: stack(&q_cols),
        scores: stack(&t_cols),
    })
}

impl PlsModel {
    pub fn inputs(&self) -> usize {
        self.x_mean.len()
    }

    pub fn outputs(&self) -> usize {
        self.y_mean.len()
    }

    fn coefficient_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.inputs(), self.outputs(), |i, j| self.coefficients[i][j])
    }

    /// Transposed coefficient matrix, one row per output.
    pub fn coefficient_columns(&self) -> Vec<Vec<f64>> {
        cols_of(&self.coefficient_matrix())
    }
}

/// Evaluates `(s − x̄) B + ȳ`.
pub fn pls_predict(model: &PlsModel, s: &[f64]) -> Result<Vec<f64>> {
    if s.len() != model.inputs() {
        return Err(Error::Dimension { expected: model.inputs(), got: s.len() });
    }
    let centered = DVector::from_iterator(s.len(), s.iter().zip(&model.x_mean).map(|(a, m)| a - m));
    let y = model.coefficient_matrix().transpose() * centered;
    Ok(y.iter().zip(&model.y_mean).map(|(v, m)| v + m).collect())
}

/// How a slot's via-point is written into a regression target row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetEncoding {
    /// Via-point mean in workspace coordinates; an uncorrected slot holds the
    /// reference value there.
    #[default]
    Absolute,
    /// Via-point mean minus the reference it was built on; an uncorrected
    /// slot holds zero.
    ReferenceOffset,
}

/// Rows of `(s_i, via targets)` pooled from one or more sessions of a task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillDataset {
    pub encoding: TargetEncoding,
    pub slot_times: Vec<f64>,
    pub dim: usize,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
    /// Per slot, times of the via-points assigned to it across all rows.
    pub assigned_times: Vec<Vec<f64>>,
}

impl SkillDataset {
    pub fn new(encoding: TargetEncoding, slot_times: Vec<f64>, dim: usize) -> Self {
        let slots = slot_times.len();
        Self { encoding, slot_times, dim, x: Vec::new(), y: Vec::new(), assigned_times: vec![Vec::new(); slots] }
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Adds one record; via-points are assigned to the nearest slot within
    /// ±0.5 s.
    pub fn push(&mut self, record: &SkillRecord) -> Result<()> {
        if record.slot_times.len() != self.slot_times.len()
            || record.slot_times.iter().zip(&self.slot_times).any(|(a, b)| (a - b).abs() > 1e-9)
        {
            return Err(Error::Config("skill record slots differ from the dataset's task".into()));
        }
        if let Some(first) = self.x.first() {
            if first.len() != record.state.len() {
                return Err(Error::Dimension { expected: first.len(), got: record.state.len() });
            }
        }
        let mut chosen: Vec<Option<&ViaPoint>> = vec![None; self.slot_times.len()];
        for via in &record.vias {
            let nearest = self
                .slot_times
                .iter()
                .enumerate()
                .map(|(k, &t)| (k, (via.time - t).abs()))
                .min_by(|a, b| a.1.total_cmp(&b.1));
            if let Some((k, dist)) = nearest {
                if dist <= SLOT_WINDOW {
                    let better = chosen[k].is_none_or(|c| dist < (c.time - self.slot_times[k]).abs());
                    if better {
                        chosen[k] = Some(via);
                    }
                }
            }
        }
        let mut row = Vec::with_capacity(self.slot_times.len() * self.dim);
        for (k, via) in chosen.iter().enumerate() {
            let reference = &record.slot_reference[k];
            if reference.len() != self.dim {
                return Err(Error::Dimension { expected: self.dim, got: reference.len() });
            }
            match (via, self.encoding) {
                (Some(v), TargetEncoding::Absolute) => row.extend(v.mean.iter()),
                (Some(v), TargetEncoding::ReferenceOffset) => row.extend((&v.mean - reference).iter()),
                (None, TargetEncoding::Absolute) => row.extend(reference.iter()),
                (None, TargetEncoding::ReferenceOffset) => row.extend(std::iter::repeat_n(0.0, self.dim)),
            }
            if let Some(v) = via {
                self.assigned_times[k].push(v.time);
            }
        }
        self.x.push(record.state.clone());
        self.y.push(row);
        Ok(())
    }

    /// Every record of `session`.
    pub fn push_session(&mut self, session: &TherapySession) -> Result<()> {
        session.skill_records.iter().try_for_each(|r| self.push(r))
    }

    pub fn from_sessions(encoding: TargetEncoding, sessions: &[TherapySession]) -> Result<Self> {
        let first = sessions.first().ok_or(Error::InsufficientData { needed: 1, got: 0 })?;
        let mut data = Self::new(encoding, first.task.keypoint_times.clone(), first.cfg.dim());
        for s in sessions {
            data.push_session(s)?;
        }
        Ok(data)
    }
}

/// A fitted skill: regression plus where its via-points go in time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillModel {
    pub encoding: TargetEncoding,
    pub dim: usize,
    /// Via time per slot: the average time of the training via-points
    /// assigned to it, or the slot time when none were.
    pub via_times: Vec<f64>,
    pub regression: PlsModel,
}

impl SkillModel {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Default number of latent components.
pub const DEFAULT_LATENT_COUNT: usize = 5;

pub fn train_skill(data: &SkillDataset, latent_count: usize) -> Result<SkillModel> {
    let regression = pls_fit(&data.x, &data.y, latent_count)?;
    let via_times = data
        .slot_times
        .iter()
        .zip(&data.assigned_times)
        .map(|(&slot, ts)| if ts.is_empty() { slot } else { ts.iter().sum::<f64>() / ts.len() as f64 })
        .collect();
    Ok(SkillModel { encoding: data.encoding, dim: data.dim, via_times, regression })
}

/// Via-points the skill would have the therapist inform for `session`'s
/// current preference.
pub fn reproduce_skill(model: &SkillModel, session: &TherapySession) -> Result<Vec<ViaPoint>> {
    let preference = session.current_preference()?;
    let state = session.therapist_state()?;
    let y = pls_predict(&model.regression, state.as_slice())?;
    let expected = model.via_times.len() * model.dim;
    if y.len() != expected {
        return Err(Error::Dimension { expected, got: y.len() });
    }
    model
        .via_times
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let target = DVector::from_column_slice(&y[k * model.dim..(k + 1) * model.dim]);
            let mean = match model.encoding {
                TargetEncoding::Absolute => target,
                TargetEncoding::ReferenceOffset => session.reference.position_at(t) + target,
            };
            Ok(ViaPoint::new(t, mean, preference.cov_at(t)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
        (0..rows).map(|_| (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
    }

    fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
        a.iter()
            .map(|r| (0..b[0].len()).map(|j| r.iter().zip(b).map(|(x, br)| x * br[j]).sum()).collect())
            .collect()
    }

    fn frobenius(a: &[Vec<f64>]) -> f64 {
        a.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }

    #[test]
    fn exact_linear_map_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_rows(&mut rng, 12, 4);
        let b = random_rows(&mut rng, 4, 3);
        let y = matmul(&x, &b);
        let m = pls_fit(&x, &y, 4).unwrap();
        assert_eq!(m.latent_count, 4);
        let resid: Vec<Vec<f64>> = x
            .iter()
            .zip(&y)
            .map(|(xr, yr)| pls_predict(&m, xr).unwrap().iter().zip(yr).map(|(p, t)| p - t).collect())
            .collect();
        assert!(frobenius(&resid) <= 1e-8 * frobenius(&y));
    }

    #[test]
    fn constant_targets_give_zero_slope() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_rows(&mut rng, 6, 5);
        let y = vec![vec![0.3, -0.2]; 6];
        let m = pls_fit(&x, &y, 3).unwrap();
        assert!(m.coefficients.iter().flatten().all(|v| v.abs() < 1e-12));
        let p = pls_predict(&m, &x[2]).unwrap();
        assert!((p[0] - 0.3).abs() < 1e-12 && (p[1] + 0.2).abs() < 1e-12);
    }

    #[test]
    fn rank_one_single_component() {
        let u = [1.0, -2.0, 0.5, 3.0, -1.5];
        let v = [0.2, 0.4, -0.1];
        let c = [0.7, -1.1];
        let x: Vec<Vec<f64>> = u.iter().map(|a| v.iter().map(|b| a * b).collect()).collect();
        let y: Vec<Vec<f64>> = u.iter().map(|a| c.iter().map(|b| a * b).collect()).collect();
        let m = pls_fit(&x, &y, 1).unwrap();
        for (xr, yr) in x.iter().zip(&y) {
            let p = pls_predict(&m, xr).unwrap();
            assert!(p.iter().zip(yr).all(|(a, b)| (a - b).abs() < 1e-10));
        }
    }

    #[test]
    fn scores_are_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_rows(&mut rng, 10, 30);
        let y = random_rows(&mut rng, 10, 8);
        let m = pls_fit(&x, &y, 5).unwrap();
        for i in 0..m.latent_count {
            for j in 0..i {
                let d: f64 = m.scores[i].iter().zip(&m.scores[j]).map(|(a, b)| a * b).sum();
                assert!(d.abs() < 1e-10, "t{i}·t{j} = {d}");
            }
        }
    }

    #[test]
    fn prediction_is_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_rows(&mut rng, 10, 20);
        let y = random_rows(&mut rng, 10, 4);
        let m = pls_fit(&x, &y, 5).unwrap();
        let s1 = &x[1];
        let s2 = &x[7];
        let sum: Vec<f64> = s1.iter().zip(s2).zip(&m.x_mean).map(|((a, b), c)| a + b - c).collect();
        let p = |s: &[f64]| -> Vec<f64> { pls_predict(&m, s).unwrap().iter().zip(&m.y_mean).map(|(a, b)| a - b).collect() };
        let (a, b, c) = (p(&sum), p(s1), p(s2));
        assert!(a.iter().zip(b.iter().zip(&c)).all(|(l, (r1, r2))| (l - r1 - r2).abs() < 1e-10));
        let origin = pls_predict(&m, &m.x_mean).unwrap();
        assert!(origin.iter().zip(&m.y_mean).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn full_rank_matches_least_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_rows(&mut rng, 15, 4);
        let y = random_rows(&mut rng, 15, 2);
        let m = pls_fit(&x, &y, 4).unwrap();
        // centered ordinary least squares through the normal equations
        let xm = DMatrix::from_fn(15, 4, |i, j| x[i][j]);
        let ym = DMatrix::from_fn(15, 2, |i, j| y[i][j]);
        let xc = center(&xm, &column_means(&xm));
        let yc = center(&ym, &column_means(&ym));
        let b = (xc.transpose() * &xc).try_inverse().unwrap() * xc.transpose() * &yc;
        let ols = &xc * b;
        for i in 0..15 {
            let p = pls_predict(&m, &x[i]).unwrap();
            for j in 0..2 {
                let expect = ols[(i, j)] + m.y_mean[j];
                assert!((p[j] - expect).abs() <= 1e-8 * (1.0 + expect.abs()));
            }
        }
    }

    #[test]
    fn degenerate_inputs_rejected() {
        let x = vec![vec![1.0, 2.0]; 4];
        let y = vec![vec![0.0], vec![1.0], vec![2.0], vec![3.0]];
        assert!(matches!(pls_fit(&x, &y, 1), Err(Error::Degenerate(_))));
        assert!(matches!(pls_fit(&x[..1], &y[..1], 1), Err(Error::InsufficientData { .. })));
        let x2 = vec![vec![1.0, 2.0], vec![2.0, 1.0]];
        assert!(matches!(pls_fit(&x2, &y[..2], 0), Err(Error::Config(_))));
        let m = pls_fit(&x2, &y[..2], 1).unwrap();
        assert!(matches!(pls_predict(&m, &[1.0]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn json_round_trip() {
        let x = vec![vec![1.0, 2.0], vec![2.0, 1.0], vec![0.5, 0.1]];
        let y = vec![vec![0.1], vec![0.3], vec![-0.2]];
        let m = pls_fit(&x, &y, 2).unwrap();
        let skill = SkillModel { encoding: TargetEncoding::Absolute, dim: 1, via_times: vec![1.0], regression: m };
        let back = SkillModel::from_json(&skill.to_json().unwrap()).unwrap();
        assert_eq!(back, skill);
    }
}
