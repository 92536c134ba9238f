//! Comparison controllers: variable impedance on the fixed desired motion,
//! and direct transmission of the therapist's force to a zero-impedance robot.

use crate::config::SessionConfig;
use crate::policy::{aggregate, scripted_therapist_events, summarize_episode, IterationRecord, ScriptedTherapist};
use crate::simdyn::{diag_force, run_episode_with, EpisodeLog, PatientModel};
use crate::task::Task;
use crate::trajectory::{ForceEvent, TimedTrajectory};
use crate::viapoint::detect_segments;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMethod {
    Vic,
    Direct,
}

impl std::str::FromStr for BaselineMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vic" => Ok(Self::Vic),
            "direct" => Ok(Self::Direct),
            other => Err(Error::Config(format!("unknown baseline method {other:?} (expected vic or direct)"))),
        }
    }
}

/// Error-modulated stiffness `K = K_min + (K_max − K_min)·min(1, ‖e‖/e_ref)`
/// with damping `D = 2ζ√(K m)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VicParams {
    pub stiffness_min: Vec<f64>,
    pub stiffness_max: Vec<f64>,
    /// Tracking error at which stiffness saturates, m.
    pub error_ref: f64,
    pub damping_ratio: f64,
}

impl Default for VicParams {
    fn default() -> Self {
        Self { stiffness_min: vec![50.0, 50.0], stiffness_max: vec![800.0, 800.0], error_ref: 0.05, damping_ratio: 0.7 }
    }
}

impl VicParams {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.stiffness_min.len() != dim || self.stiffness_max.len() != dim {
            return Err(Error::Dimension { expected: dim, got: self.stiffness_min.len().min(self.stiffness_max.len()) });
        }
        let ordered = self.stiffness_min.iter().zip(&self.stiffness_max).all(|(lo, hi)| *lo >= 0.0 && hi >= lo);
        if !ordered || !(self.error_ref > 0.0) || !(self.damping_ratio >= 0.0) {
            return Err(Error::Config("VIC needs 0 ≤ K_min ≤ K_max, e_ref > 0 and ζ ≥ 0".into()));
        }
        Ok(())
    }

    /// Diagonal stiffness and damping for a tracking error of norm `error`.
    pub fn gains(&self, error: f64, mass: f64) -> (Vec<f64>, Vec<f64>) {
        let s = (error / self.error_ref).min(1.0);
        let k: Vec<f64> = self.stiffness_min.iter().zip(&self.stiffness_max).map(|(lo, hi)| lo + (hi - lo) * s).collect();
        let d = k.iter().map(|k| 2.0 * self.damping_ratio * (k * mass).sqrt()).collect();
        (k, d)
    }
}

/// Outcome of a baseline run: iteration records in the policy's log format
/// plus the last iteration's raw episodes.
#[derive(Debug, Clone)]
pub struct BaselineRun {
    pub method: BaselineMethod,
    pub log: Vec<IterationRecord>,
    pub episodes: Vec<EpisodeLog>,
}

impl BaselineRun {
    pub fn log_jsonl(&self) -> String {
        self.log
            .iter()
            .map(|r| serde_json::to_string(r).expect("finite records serialize") + "\n")
            .collect()
    }
}

fn record(
    iteration: usize,
    task: &Task,
    cfg: &SessionConfig,
    events: &[ForceEvent],
    episodes: &[EpisodeLog],
) -> Result<IterationRecord> {
    let summaries = episodes.iter().map(|e| summarize_episode(e, task)).collect::<Result<Vec<_>>>()?;
    Ok(IterationRecord {
        iteration,
        preference: None,
        state: None,
        event_count: events.len(),
        segments: detect_segments(events, cfg.force_threshold, cfg.min_gap)?,
        vias: vec![],
        dropped: vec![],
        reference: task.desired.resample(cfg.waypoints, cfg.duration)?,
        metrics: aggregate(&summaries),
        episodes: summaries,
    })
}

fn check(cfg: &SessionConfig, task: &Task, patient: &PatientModel) -> Result<()> {
    cfg.validate()?;
    task.validate()?;
    patient.validate()?;
    if (task.duration() - cfg.duration).abs() > 1e-9 {
        return Err(Error::Config(format!("task lasts {} s but the session is configured for {} s", task.duration(), cfg.duration)));
    }
    Ok(())
}

/// One VIC episode tracking `desired`.
pub fn vic_episode(cfg: &SessionConfig, params: &VicParams, patient: &PatientModel, desired: &TimedTrajectory) -> Result<EpisodeLog> {
    run_episode_with(cfg, patient, desired, cfg.dt_sim, &[], |_, t, x, v| {
        let x_r = desired.position_at(t);
        let (k, d) = params.gains((&x_r - x).norm(), patient.mass);
        diag_force(&k, &d, &x_r, &desired.velocity_at(t), x, v)
    })
}

/// Variable impedance control on the fixed desired motion, `iterations`
/// iterations of `J` episodes each (numbered from 1).
pub fn baseline_vic_run(
    cfg: &SessionConfig,
    params: &VicParams,
    task: &Task,
    patient: &PatientModel,
    iterations: usize,
) -> Result<BaselineRun> {
    check(cfg, task, patient)?;
    params.validate(cfg.dim())?;
    let mut log = Vec::with_capacity(iterations);
    let mut episodes = Vec::new();
    for i in 1..=iterations {
        episodes = (0..cfg.episodes)
            .map(|_| vic_episode(cfg, params, patient, &task.desired))
            .collect::<Result<Vec<_>>>()?;
        log.push(record(i, task, cfg, &[], &episodes)?);
    }
    Ok(BaselineRun { method: BaselineMethod::Vic, log, episodes })
}

/// One zero-impedance episode with `events` applied straight to the patient.
pub fn direct_episode(cfg: &SessionConfig, patient: &PatientModel, task: &Task, events: &[ForceEvent]) -> Result<EpisodeLog> {
    let dim = cfg.dim();
    run_episode_with(cfg, patient, &task.desired, cfg.dt_sim, events, |_, _, _, _| crate::linalg::Point::zeros(dim))
}

/// Direct force transmission: the robot renders no impedance and the
/// therapist's pulses, scripted on the previous iteration's motion, act on
/// the patient unmodified. An uncorrected free-motion pass seeds iteration 1.
pub fn baseline_direct_force_run(
    cfg: &SessionConfig,
    task: &Task,
    patient: &PatientModel,
    therapist: &ScriptedTherapist,
    iterations: usize,
) -> Result<BaselineRun> {
    check(cfg, task, patient)?;
    therapist.validate(cfg.force_threshold)?;
    let mut previous = direct_episode(cfg, patient, task, &[])?;
    let mut log = Vec::with_capacity(iterations);
    let mut episodes = Vec::new();
    for i in 1..=iterations {
        let events = scripted_therapist_events(therapist, task, &previous.actual);
        episodes = (0..cfg.episodes)
            .map(|_| direct_episode(cfg, patient, task, &events))
            .collect::<Result<Vec<_>>>()?;
        log.push(record(i, task, cfg, &events, &episodes)?);
        previous = episodes.last().expect("at least one episode").clone();
    }
    Ok(BaselineRun { method: BaselineMethod::Direct, log, episodes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simdyn::ElasticBand;
    use nalgebra::dvector;

    fn short_cfg() -> SessionConfig {
        SessionConfig { duration: 2.0, episodes: 1, waypoints: 40, ..Default::default() }
    }

    fn line_task(cfg: &SessionConfig) -> Task {
        Task::polygon("line", dvector![0.4, 0.0], &[dvector![0.5, 0.0], dvector![0.5, 0.1]], cfg.duration, cfg.dt_sim).unwrap()
    }

    fn tracker(task: &Task) -> PatientModel {
        PatientModel {
            mass: 2.0,
            intent_stiffness: 2000.0,
            intent_damping: 120.0,
            preferred_path: task.desired.clone(),
            band: ElasticBand::slack(2),
        }
    }

    #[test]
    fn gains_bracket_and_saturate() {
        let p = VicParams::default();
        let (k, d) = p.gains(0.0, 2.0);
        assert_eq!(k, vec![50.0, 50.0]);
        assert!((d[0] - 1.4 * 100f64.sqrt()).abs() < 1e-12);
        assert_eq!(p.gains(0.05, 2.0).0, vec![800.0, 800.0]);
        assert_eq!(p.gains(3.0, 2.0).0, vec![800.0, 800.0]);
        for e in [0.0, 0.01, 0.02, 0.049, 0.2] {
            let (k, _) = p.gains(e, 2.0);
            assert!(k.iter().all(|k| (50.0..=800.0).contains(k)));
        }
    }

    #[test]
    fn vic_logs_match_policy_schema() {
        let cfg = short_cfg();
        let task = line_task(&cfg);
        let run = baseline_vic_run(&cfg, &VicParams::default(), &task, &tracker(&task), 2).unwrap();
        assert_eq!(run.log.len(), 2);
        assert_eq!(run.log[0].iteration, 1);
        let line = run.log_jsonl();
        let back: IterationRecord = serde_json::from_str(line.lines().next().unwrap()).unwrap();
        assert_eq!(back, run.log[0]);
    }

    #[test]
    fn direct_without_events_is_free_motion() {
        let cfg = short_cfg();
        let task = line_task(&cfg);
        let p = tracker(&task);
        let log = direct_episode(&cfg, &p, &task, &[]).unwrap();
        assert!(log.control_forces.iter().all(|f| f.norm() == 0.0));
        let worst = (1000..log.actual.len())
            .map(|k| (&log.actual.points()[k] - task.desired.position_at(log.actual.time(k))).norm())
            .fold(0.0, f64::max);
        assert!(worst < 5e-3, "{worst}");
    }

    #[test]
    fn direct_force_is_transmitted() {
        let cfg = short_cfg();
        let task = line_task(&cfg);
        let events: Vec<_> = (0..=100).map(|k| ForceEvent::new(0.5 + k as f64 * 1e-3, dvector![15.0, 0.0])).collect();
        let log = direct_episode(&cfg, &tracker(&task), &task, &events).unwrap();
        assert_eq!(log.control_forces[500], dvector![15.0, 0.0]);
        assert_eq!(log.control_forces[499], dvector![0.0, 0.0]);
    }

    #[test]
    fn method_parses() {
        assert_eq!("vic".parse::<BaselineMethod>().unwrap(), BaselineMethod::Vic);
        assert!("pid".parse::<BaselineMethod>().is_err());
    }
}
