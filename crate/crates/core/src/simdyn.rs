//! Fixed-step simulation of the impedance-controlled robot pair.
//!
//! The patient-side end-effector is a point mass driven by the robot's
//! impedance law plus the simulated patient's force. Gravity and Coriolis
//! terms are assumed compensated, so only inertia remains. Integration is
//! semi-implicit (symplectic) Euler at `dt_sim`.

use crate::config::{steps_for, RobotImpedance, SessionConfig};
use crate::linalg::{serde_point, Point};
use crate::trajectory::{ForceEvent, TimedTrajectory};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

/// `K (x_r − x) + D (ẋ_r − ẋ)` with diagonal gains.
pub fn impedance_force(imp: &RobotImpedance, x_r: &Point, v_r: &Point, x: &Point, v: &Point) -> Point {
    diag_force(&imp.stiffness, &imp.damping, x_r, v_r, x, v)
}

pub(crate) fn diag_force(k: &[f64], d: &[f64], x_r: &Point, v_r: &Point, x: &Point, v: &Point) -> Point {
    Point::from_fn(x.len(), |i, _| k[i] * (x_r[i] - x[i]) + d[i] * (v_r[i] - v[i]))
}

/// Elastic band resisting motion away from an anchor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElasticBand {
    #[serde(with = "serde_point")]
    pub anchor: Point,
    pub stiffness: f64,
    pub rest_length: f64,
}

impl ElasticBand {
    pub fn slack(dim: usize) -> Self {
        Self { anchor: Point::zeros(dim), stiffness: 0.0, rest_length: 0.0 }
    }

    /// Tension pulling away from the anchor direction; the patient feels its negation.
    pub fn tension(&self, x: &Point) -> Point {
        let r = x - &self.anchor;
        let dist = r.norm();
        if dist == 0.0 {
            return Point::zeros(x.len());
        }
        let stretch = (dist - self.rest_length).max(0.0);
        r * (self.stiffness * stretch / dist)
    }
}

/// Simulated patient: a mass pulled toward its own intended path by
/// spring-damper "intent" gains and held back by an elastic band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientModel {
    pub mass: f64,
    pub intent_stiffness: f64,
    pub intent_damping: f64,
    pub preferred_path: TimedTrajectory,
    pub band: ElasticBand,
}

impl PatientModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.mass.is_finite() && self.mass > 0.0) {
            return Err(Error::Config(format!("patient mass {}", self.mass)));
        }
        if !(self.intent_stiffness >= 0.0 && self.intent_damping >= 0.0) {
            return Err(Error::Config("patient intent gains must be >= 0".into()));
        }
        if !(self.band.stiffness >= 0.0 && self.band.rest_length >= 0.0) {
            return Err(Error::Config("band stiffness and rest length must be >= 0".into()));
        }
        if self.band.anchor.len() != self.preferred_path.dim() {
            return Err(Error::Dimension {
                expected: self.preferred_path.dim(),
                got: self.band.anchor.len(),
            });
        }
        Ok(())
    }
}

/// Force the patient applies on the robot at state `(x, ẋ)` and time `t`.
pub fn patient_force(p: &PatientModel, t: f64, x: &Point, v: &Point) -> Point {
    let x_pref = p.preferred_path.position_at(t);
    let v_pref = p.preferred_path.velocity_at(t);
    (x_pref - x) * p.intent_stiffness + (v_pref - v) * p.intent_damping - p.band.tension(x)
}

/// One simulated episode: states and forces at every step, including the final one.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub actual: TimedTrajectory,
    pub control_forces: Vec<Point>,
    pub external_forces: Vec<Point>,
    pub reference: Option<TimedTrajectory>,
}

#[derive(Serialize, Deserialize)]
struct StepRow {
    t: f64,
    x: Vec<f64>,
    v: Vec<f64>,
    f_ctrl: Vec<f64>,
    f_ext: Vec<f64>,
}

impl EpisodeLog {
    pub fn len(&self) -> usize {
        self.actual.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actual.is_empty()
    }

    fn velocity_rows(&self) -> Vec<Point> {
        match self.actual.velocities() {
            Some(v) => v.to_vec(),
            None => self.actual.central_differences(),
        }
    }

    /// One JSON object per step: `t, x, v, f_ctrl, f_ext`.
    pub fn to_jsonl(&self) -> String {
        let vel = self.velocity_rows();
        let mut out = String::new();
        for i in 0..self.len() {
            let row = StepRow {
                t: self.actual.time(i),
                x: self.actual.points()[i].as_slice().to_vec(),
                v: vel[i].as_slice().to_vec(),
                f_ctrl: self.control_forces[i].as_slice().to_vec(),
                f_ext: self.external_forces[i].as_slice().to_vec(),
            };
            out.push_str(&serde_json::to_string(&row).expect("finite rows serialize"));
            out.push('\n');
        }
        out
    }

    pub fn csv_header(dim: usize) -> String {
        const AXES: [&str; 3] = ["x", "y", "z"];
        let axis = |i: usize| AXES.get(i).map(|s| s.to_string()).unwrap_or(format!("q{i}"));
        let mut cols = vec!["t".to_string()];
        cols.extend((0..dim).map(axis));
        cols.extend((0..dim).map(|i| format!("v{}", axis(i))));
        cols.extend((0..dim).map(|i| format!("fc{}", axis(i))));
        cols.extend((0..dim).map(|i| format!("fe{}", axis(i))));
        cols.join(",")
    }

    /// CSV with header `t,x,y,vx,vy,fcx,fcy,fex,fey` in the planar case.
    pub fn to_csv(&self) -> String {
        let vel = self.velocity_rows();
        let mut out = Self::csv_header(self.actual.dim());
        out.push('\n');
        for i in 0..self.len() {
            let _ = write!(out, "{}", self.actual.time(i));
            let cols = [&self.actual.points()[i], &vel[i], &self.control_forces[i], &self.external_forces[i]];
            for c in cols {
                for v in c.iter() {
                    let _ = write!(out, ",{v}");
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::InvalidTrajectory("empty csv".into()))?;
        let ncol = header.split(',').count();
        if ncol < 5 || (ncol - 1) % 4 != 0 {
            return Err(Error::InvalidTrajectory(format!("unexpected csv header {header:?}")));
        }
        let dim = (ncol - 1) / 4;
        if header != Self::csv_header(dim) {
            return Err(Error::InvalidTrajectory(format!("unexpected csv header {header:?}")));
        }
        let (mut times, mut x, mut v, mut fc, mut fe) = (vec![], vec![], vec![], vec![], vec![]);
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let vals: Vec<f64> = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::InvalidTrajectory(format!("row {}: {e}", n + 1)))?;
            if vals.len() != ncol {
                return Err(Error::InvalidTrajectory(format!("row {} has {} columns", n + 1, vals.len())));
            }
            times.push(vals[0]);
            let block = |k: usize| Point::from_column_slice(&vals[1 + k * dim..1 + (k + 1) * dim]);
            x.push(block(0));
            v.push(block(1));
            fc.push(block(2));
            fe.push(block(3));
        }
        let actual = TimedTrajectory::from_times(&times, x)?.with_velocities(v)?;
        Ok(Self { actual, control_forces: fc, external_forces: fe, reference: None })
    }
}

/// Integrates `m ẍ = f_ctrl + f_ext` from `(x0, v0)` for `steps` steps.
///
/// `forces(step, t, x, v)` returns `(f_ctrl, f_ext)` at the current state;
/// both are logged alongside the state they were evaluated at.
pub(crate) fn integrate(
    mass: f64,
    dt: f64,
    steps: usize,
    x0: Point,
    v0: Point,
    mut forces: impl FnMut(usize, f64, &Point, &Point) -> (Point, Point),
) -> Result<EpisodeLog> {
    let mut x = x0;
    let mut v = v0;
    let mut xs = Vec::with_capacity(steps + 1);
    let mut vs = Vec::with_capacity(steps + 1);
    let mut fcs = Vec::with_capacity(steps + 1);
    let mut fes = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let t = k as f64 * dt;
        let (fc, fe) = forces(k, t, &x, &v);
        let finite = |p: &Point| p.iter().all(|c| c.is_finite());
        if !(finite(&x) && finite(&v) && finite(&fc) && finite(&fe)) {
            return Err(Error::Diverged { step: k, time: t });
        }
        xs.push(x.clone());
        vs.push(v.clone());
        if k < steps {
            let a = (&fc + &fe) / mass;
            v += a * dt;
            x += &v * dt;
        }
        fcs.push(fc);
        fes.push(fe);
    }
    let actual = TimedTrajectory::new(dt, xs)?.with_velocities(vs)?;
    Ok(EpisodeLog { actual, control_forces: fcs, external_forces: fes, reference: None })
}

fn check_reference(reference: &TimedTrajectory, duration: f64) -> Result<()> {
    if reference.len() < 2 || reference.duration() + 1e-9 < duration {
        return Err(Error::OutOfRange { time: duration, start: 0.0, end: reference.duration() });
    }
    Ok(())
}

/// Runs one therapy episode with the patient-side robot tracking `reference`.
pub fn run_episode(
    cfg: &SessionConfig,
    imp: &RobotImpedance,
    patient: &PatientModel,
    reference: &TimedTrajectory,
    dt_sim: f64,
) -> Result<EpisodeLog> {
    run_episode_with(cfg, patient, reference, dt_sim, &[], |_, t, x, v| {
        impedance_force(imp, &reference.position_at(t), &reference.velocity_at(t), x, v)
    })
}

/// Shared episode driver: `control` supplies the robot force, and `injected`
/// force events (zero-order hold over one step) are added to the patient side.
pub(crate) fn run_episode_with(
    cfg: &SessionConfig,
    patient: &PatientModel,
    reference: &TimedTrajectory,
    dt_sim: f64,
    injected: &[ForceEvent],
    mut control: impl FnMut(usize, f64, &Point, &Point) -> Point,
) -> Result<EpisodeLog> {
    check_reference(reference, cfg.duration)?;
    let steps = steps_for(cfg.duration, dt_sim)?;
    let dim = reference.dim();
    let pulses = bin_events(injected, dt_sim, steps, dim)?;
    let x0 = reference.first().clone();
    let mut log = integrate(patient.mass, dt_sim, steps, x0, Point::zeros(dim), |k, t, x, v| {
        let mut fc = control(k, t, x, v);
        if let Some(p) = &pulses {
            fc += &p[k];
        }
        (fc, patient_force(patient, t, x, v))
    })?;
    log.reference = Some(reference.clone());
    Ok(log)
}

/// Sums events into per-step force bins (`round(t / dt)`).
fn bin_events(events: &[ForceEvent], dt: f64, steps: usize, dim: usize) -> Result<Option<Vec<Point>>> {
    if events.is_empty() {
        return Ok(None);
    }
    let mut bins = vec![Point::zeros(dim); steps + 1];
    let end = steps as f64 * dt;
    for e in events {
        let k = (e.t / dt).round();
        if !(e.t >= -1e-9 && k <= steps as f64) {
            return Err(Error::OutOfRange { time: e.t, start: 0.0, end });
        }
        if e.force.len() != dim {
            return Err(Error::Dimension { expected: dim, got: e.force.len() });
        }
        bins[k.max(0.0) as usize] += &e.force;
    }
    Ok(Some(bins))
}

/// Therapist-side replay: a unit-mass robot follows the recorded patient
/// motion through `imp` while the therapist's force events push on it.
pub fn replay_with_forces(
    actual: &TimedTrajectory,
    events: &[ForceEvent],
    imp: &RobotImpedance,
) -> Result<TimedTrajectory> {
    if actual.len() < 2 {
        return Err(Error::Degenerate("replay needs a trajectory of non-zero duration".into()));
    }
    let steps = actual.len() - 1;
    let dt = actual.dt();
    let dim = actual.dim();
    let pulses = bin_events(events, dt, steps, dim)?;
    let vel = match actual.velocities() {
        Some(v) => v.to_vec(),
        None => actual.central_differences(),
    };
    let log = integrate(1.0, dt, steps, actual.first().clone(), vel[0].clone(), |k, _, x, v| {
        let fc = impedance_force(imp, &actual.points()[k], &vel[k], x, v);
        let fe = pulses.as_ref().map_or_else(|| Point::zeros(dim), |p| p[k].clone());
        (fc, fe)
    })?;
    Ok(log.actual)
}
