//! Timed and probabilistic trajectories, via-points and force events.

use crate::linalg::{self, serde_cov, serde_point, symmetrize_clamp, Cov, Point};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

const UNIFORM_TOL: f64 = 1e-9;

/// Uniformly sampled planar (or `d`-dimensional) motion starting at `t = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimedTrajectory {
    dt: f64,
    points: Vec<Point>,
    velocities: Option<Vec<Point>>,
}

#[derive(Serialize, Deserialize)]
struct TimedWire {
    dt: f64,
    points: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    velocities: Option<Vec<Vec<f64>>>,
}

impl Serialize for TimedTrajectory {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        TimedWire {
            dt: self.dt,
            points: self.points.iter().map(|p| p.as_slice().to_vec()).collect(),
            velocities: self
                .velocities
                .as_ref()
                .map(|v| v.iter().map(|p| p.as_slice().to_vec()).collect()),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for TimedTrajectory {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let w = TimedWire::deserialize(d)?;
        let points = w.points.into_iter().map(Point::from_vec).collect();
        let traj = TimedTrajectory::new(w.dt, points).map_err(serde::de::Error::custom)?;
        match w.velocities {
            Some(v) => traj
                .with_velocities(v.into_iter().map(Point::from_vec).collect())
                .map_err(serde::de::Error::custom),
            None => Ok(traj),
        }
    }
}

impl TimedTrajectory {
    pub fn new(dt: f64, points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidTrajectory("no samples".into()));
        }
        if points.len() > 1 && !(dt.is_finite() && dt > 0.0) {
            return Err(Error::InvalidTrajectory(format!("sample spacing {dt} s")));
        }
        let dim = points[0].len();
        if dim == 0 {
            return Err(Error::InvalidTrajectory("zero-dimensional points".into()));
        }
        if let Some(p) = points.iter().find(|p| p.len() != dim) {
            return Err(Error::Dimension { expected: dim, got: p.len() });
        }
        Ok(Self { dt, points, velocities: None })
    }

    /// Builds a trajectory from explicit sample times, which must start at
    /// zero and be uniform within 1e-9 s.
    pub fn from_times(times: &[f64], points: Vec<Point>) -> Result<Self> {
        if times.len() != points.len() {
            return Err(Error::Dimension { expected: times.len(), got: points.len() });
        }
        if times.is_empty() || times[0].abs() > UNIFORM_TOL {
            return Err(Error::InvalidTrajectory("times must start at 0".into()));
        }
        let dt = if times.len() > 1 { times[1] - times[0] } else { 0.0 };
        for (i, w) in times.windows(2).enumerate() {
            if ((w[1] - w[0]) - dt).abs() > UNIFORM_TOL {
                return Err(Error::InvalidTrajectory(format!(
                    "non-uniform spacing at sample {}",
                    i + 1
                )));
            }
        }
        Self::new(dt, points)
    }

    pub fn from_fn(dt: f64, len: usize, mut f: impl FnMut(f64) -> Point) -> Result<Self> {
        Self::new(dt, (0..len).map(|i| f(i as f64 * dt)).collect())
    }

    pub fn with_velocities(mut self, velocities: Vec<Point>) -> Result<Self> {
        if velocities.len() != self.points.len() {
            return Err(Error::Dimension { expected: self.points.len(), got: velocities.len() });
        }
        let dim = self.dim();
        if let Some(v) = velocities.iter().find(|v| v.len() != dim) {
            return Err(Error::Dimension { expected: dim, got: v.len() });
        }
        self.velocities = Some(velocities);
        Ok(self)
    }

    /// Attaches central-difference velocities (one-sided at the ends).
    pub fn with_central_velocities(self) -> Self {
        let v = self.central_differences();
        Self { velocities: Some(v), ..self }
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn time(&self, i: usize) -> f64 {
        i as f64 * self.dt
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.time(i)).collect()
    }

    pub fn duration(&self) -> f64 {
        self.time(self.len() - 1)
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn velocities(&self) -> Option<&[Point]> {
        self.velocities.as_deref()
    }

    pub fn first(&self) -> &Point {
        &self.points[0]
    }

    pub fn last(&self) -> &Point {
        &self.points[self.len() - 1]
    }

    /// Index and interpolation fraction for time `t`, clamped to the span.
    fn locate(&self, t: f64) -> (usize, f64) {
        let n = self.len();
        if n == 1 || t <= 0.0 {
            return (0, 0.0);
        }
        let s = t / self.dt;
        if s >= (n - 1) as f64 {
            return (n - 1, 0.0);
        }
        let i = s.floor() as usize;
        (i, s - i as f64)
    }

    /// Linearly interpolated position; times outside the span clamp to the ends.
    pub fn position_at(&self, t: f64) -> Point {
        let (i, frac) = self.locate(t);
        if frac == 0.0 {
            return self.points[i].clone();
        }
        linalg::lerp(&self.points[i], &self.points[i + 1], frac)
    }

    /// Interpolated stored velocity, or the slope of the linear interpolant
    /// when no velocities are attached.
    pub fn velocity_at(&self, t: f64) -> Point {
        let (i, frac) = self.locate(t);
        if let Some(v) = &self.velocities {
            if frac == 0.0 {
                return v[i].clone();
            }
            return linalg::lerp(&v[i], &v[i + 1], frac);
        }
        let n = self.len();
        if n == 1 {
            return Point::zeros(self.dim());
        }
        let seg = i.min(n - 2);
        (&self.points[seg + 1] - &self.points[seg]) / self.dt
    }

    pub fn central_differences(&self) -> Vec<Point> {
        let n = self.len();
        let p = &self.points;
        if n == 1 {
            return vec![Point::zeros(self.dim())];
        }
        (0..n)
            .map(|i| {
                if i == 0 {
                    (&p[1] - &p[0]) / self.dt
                } else if i == n - 1 {
                    (&p[n - 1] - &p[n - 2]) / self.dt
                } else {
                    (&p[i + 1] - &p[i - 1]) / (2.0 * self.dt)
                }
            })
            .collect()
    }

    /// Speed profile from central-difference velocities.
    pub fn speeds(&self) -> Vec<f64> {
        self.central_differences().iter().map(|v| v.norm()).collect()
    }

    /// Resamples onto `n` uniform samples spanning `[0, duration]`.
    ///
    /// Endpoints are copied, never interpolated, and resampling an already
    /// uniform grid of the same shape returns it unchanged.
    pub fn resample(&self, n: usize, duration: f64) -> Result<Self> {
        if n < 2 {
            return Err(Error::Config(format!("resample count {n} < 2")));
        }
        if !(duration > 0.0) {
            return Err(Error::Config(format!("resample duration {duration}")));
        }
        let span = self.duration();
        if span + UNIFORM_TOL < duration {
            return Err(Error::OutOfRange { time: duration, start: 0.0, end: span });
        }
        let m = self.len();
        let same_span = (span - duration).abs() <= UNIFORM_TOL;
        let dt = duration / (n - 1) as f64;
        let points = (0..n)
            .map(|k| {
                if k == 0 {
                    return self.points[0].clone();
                }
                if same_span {
                    // exact rational position in source index space
                    let num = k * (m - 1);
                    let (i, rem) = (num / (n - 1), num % (n - 1));
                    if rem == 0 {
                        return self.points[i].clone();
                    }
                    let frac = rem as f64 / (n - 1) as f64;
                    linalg::lerp(&self.points[i], &self.points[i + 1], frac)
                } else {
                    self.position_at(k as f64 * dt)
                }
            })
            .collect();
        Self::new(dt, points)
    }

    /// Sample indices keeping at most `max` samples, evenly strided and
    /// always including the last one.
    pub fn decimation_indices(&self, max: usize) -> Vec<usize> {
        let n = self.len();
        if n <= max || max < 2 {
            return (0..n).collect();
        }
        let stride = (n - 1).div_ceil(max - 1);
        let mut idx: Vec<usize> = (0..n).step_by(stride).collect();
        if *idx.last().unwrap() != n - 1 {
            idx.push(n - 1);
        }
        idx
    }
}

/// Gaussian over positions at each of a strictly increasing set of times.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbTrajectory {
    times: Vec<f64>,
    means: Vec<Point>,
    covs: Vec<Cov>,
}

#[derive(Serialize, Deserialize)]
struct ProbWire {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dt: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    times: Option<Vec<f64>>,
    points: Vec<Vec<f64>>,
    covs: Vec<Vec<Vec<f64>>>,
}

impl Serialize for ProbTrajectory {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let uniform = self.uniform_dt();
        ProbWire {
            dt: uniform,
            times: if uniform.is_some() { None } else { Some(self.times.clone()) },
            points: self.means.iter().map(|p| p.as_slice().to_vec()).collect(),
            covs: self.covs.iter().map(serde_cov::to_rows).collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for ProbTrajectory {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let w = ProbWire::deserialize(d)?;
        let n = w.points.len();
        let times = match (w.times, w.dt) {
            (Some(t), _) => t,
            (None, Some(dt)) => (0..n).map(|i| i as f64 * dt).collect(),
            (None, None) => return Err(D::Error::custom("missing dt or times")),
        };
        let covs = w
            .covs
            .into_iter()
            .map(serde_cov::from_rows)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(D::Error::custom)?;
        let means = w.points.into_iter().map(Point::from_vec).collect();
        ProbTrajectory::new(times, means, covs).map_err(D::Error::custom)
    }
}

impl ProbTrajectory {
    pub fn new(times: Vec<f64>, means: Vec<Point>, covs: Vec<Cov>) -> Result<Self> {
        let out = Self { times, means, covs };
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.times.len();
        if n == 0 {
            return Err(Error::InvalidTrajectory("empty probabilistic trajectory".into()));
        }
        if self.means.len() != n {
            return Err(Error::Dimension { expected: n, got: self.means.len() });
        }
        if self.covs.len() != n {
            return Err(Error::Dimension { expected: n, got: self.covs.len() });
        }
        if let Some(i) = self.times.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidTrajectory(format!(
                "times not strictly increasing at {}",
                i + 1
            )));
        }
        let d = self.means[0].len();
        for (i, (m, c)) in self.means.iter().zip(&self.covs).enumerate() {
            if m.len() != d || c.nrows() != d || c.ncols() != d {
                return Err(Error::Dimension { expected: d, got: m.len().max(c.nrows()) });
            }
            if linalg::max_asymmetry(c) > 1e-10 {
                return Err(Error::InvalidTrajectory(format!("covariance {i} not symmetric")));
            }
            if linalg::min_eigenvalue(c) < -1e-10 {
                return Err(Error::InvalidTrajectory(format!("covariance {i} not PSD")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn means(&self) -> &[Point] {
        &self.means
    }

    pub fn covs(&self) -> &[Cov] {
        &self.covs
    }

    fn uniform_dt(&self) -> Option<f64> {
        if self.times.len() < 2 || self.times[0] != 0.0 {
            return None;
        }
        let dt = self.times[1] - self.times[0];
        self.times
            .iter()
            .enumerate()
            .all(|(i, &t)| (t - i as f64 * dt).abs() <= UNIFORM_TOL)
            .then_some(dt)
    }

    fn locate(&self, t: f64) -> (usize, f64) {
        let n = self.times.len();
        if n == 1 || t <= self.times[0] {
            return (0, 0.0);
        }
        if t >= self.times[n - 1] {
            return (n - 1, 0.0);
        }
        let i = self.times.partition_point(|&x| x <= t) - 1;
        (i, (t - self.times[i]) / (self.times[i + 1] - self.times[i]))
    }

    pub fn mean_at(&self, t: f64) -> Point {
        let (i, f) = self.locate(t);
        if f == 0.0 {
            return self.means[i].clone();
        }
        linalg::lerp(&self.means[i], &self.means[i + 1], f)
    }

    pub fn cov_at(&self, t: f64) -> Cov {
        let (i, f) = self.locate(t);
        if f == 0.0 {
            return self.covs[i].clone();
        }
        linalg::lerp_mat(&self.covs[i], &self.covs[i + 1], f)
    }

    /// Mean trajectory as a uniform timed trajectory (requires uniform times).
    pub fn mean_trajectory(&self) -> Result<TimedTrajectory> {
        TimedTrajectory::from_times(&self.times, self.means.clone())
    }

    /// Pointwise mean ± `k` standard deviations along each axis.
    pub fn band(&self, k: f64) -> (Vec<Point>, Vec<Point>) {
        self.means
            .iter()
            .zip(&self.covs)
            .map(|(m, c)| {
                let sd = c.diagonal().map(|v| v.max(0.0).sqrt()) * k;
                (m - &sd, m + &sd)
            })
            .unzip()
    }

    /// Symmetrizes each covariance and clamps eigenvalues at zero.
    pub(crate) fn sanitize(times: Vec<f64>, means: Vec<Point>, covs: Vec<Cov>) -> Result<Self> {
        let covs = covs.iter().map(|c| symmetrize_clamp(c, 0.0)).collect();
        Self::new(times, means, covs)
    }
}

/// Desired-passage constraint: the trajectory should pass `mean` at `time`
/// with confidence given by `cov`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViaPoint {
    #[serde(rename = "t")]
    pub time: f64,
    #[serde(with = "serde_point")]
    pub mean: Point,
    #[serde(with = "serde_cov")]
    pub cov: Cov,
}

impl ViaPoint {
    pub fn new(time: f64, mean: Point, cov: Cov) -> Self {
        Self { time, mean, cov }
    }

    pub fn validate(&self, duration: f64) -> Result<()> {
        if !(0.0..=duration + UNIFORM_TOL).contains(&self.time) {
            return Err(Error::OutOfRange { time: self.time, start: 0.0, end: duration });
        }
        if self.cov.nrows() != self.mean.len() || !self.cov.is_square() {
            return Err(Error::Dimension { expected: self.mean.len(), got: self.cov.nrows() });
        }
        if linalg::min_eigenvalue(&self.cov) <= 0.0 {
            return Err(Error::InvalidTrajectory("via-point covariance not SPD".into()));
        }
        Ok(())
    }
}

/// Therapist-side corrective force sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForceEvent {
    pub t: f64,
    #[serde(rename = "f", with = "serde_point")]
    pub force: Point,
}

impl ForceEvent {
    pub fn new(t: f64, force: Point) -> Self {
        Self { t, force }
    }
}
