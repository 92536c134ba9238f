//! The iterative therapy loop.
//!
//! Each iteration encodes the patient's preference from the previous
//! iteration's episodes, turns the therapist's corrective forces into
//! via-points, deforms the reference through them and runs `J` new episodes.
//! Iteration 0 is a bootstrap that tracks the desired motion directly so the
//! first preference has data to encode.

use crate::config::SessionConfig;
use crate::gmm::{fit_gmm, gmr_condition};
use crate::kmp::deform_reference;
use crate::linalg::{serde_points, Point};
use crate::metrics::{corrective_force_metric, episode_sparc};
use crate::simdyn::{run_episode, EpisodeLog, PatientModel};
use crate::task::Task;
use crate::trajectory::{ForceEvent, ProbTrajectory, TimedTrajectory, ViaPoint};
use crate::viapoint::{derive_via_points, detect_segments, DroppedSegment, ForceSegment};
use crate::{Error, Result};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

/// Automated therapist: pushes toward the desired motion at every key point
/// where the replayed patient motion strays too far.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScriptedTherapist {
    pub deviation_threshold: f64,
    pub pulse_force: f64,
    pub pulse_duration: f64,
}

impl Default for ScriptedTherapist {
    fn default() -> Self {
        Self { deviation_threshold: 0.01, pulse_force: 15.0, pulse_duration: 0.1 }
    }
}

impl ScriptedTherapist {
    /// Never intervenes.
    pub fn disabled() -> Self {
        Self { deviation_threshold: f64::INFINITY, ..Self::default() }
    }

    pub fn validate(&self, force_threshold: f64) -> Result<()> {
        if !(self.pulse_force > force_threshold) {
            return Err(Error::Config(format!(
                "therapist pulse {} N does not clear the {force_threshold} N threshold",
                self.pulse_force
            )));
        }
        if !(self.pulse_duration > 0.0) || self.deviation_threshold.is_nan() || self.deviation_threshold < 0.0 {
            return Err(Error::Config("therapist pulse duration and threshold must be positive".into()));
        }
        Ok(())
    }
}

/// Force pulses centred on each key point where `actual` deviates from the
/// desired motion by more than the threshold, sampled at `actual`'s rate.
pub fn scripted_therapist_events(th: &ScriptedTherapist, task: &Task, actual: &TimedTrajectory) -> Vec<ForceEvent> {
    let dt = actual.dt();
    let end = actual.duration();
    let count = (th.pulse_duration / dt).round() as usize;
    let mut out = Vec::new();
    for &tk in &task.keypoint_times {
        let gap = task.desired.position_at(tk) - actual.position_at(tk);
        let dist = gap.norm();
        if !(dist > th.deviation_threshold) {
            continue;
        }
        let force = gap * (th.pulse_force / dist);
        let start = ((tk - th.pulse_duration / 2.0) / dt).round() as i64;
        for k in start..=start + count as i64 {
            let t = k as f64 * dt;
            if t >= 0.0 && t <= end + 1e-12 {
                out.push(ForceEvent::new(t, force.clone()));
            }
        }
    }
    out.sort_by(|a, b| a.t.total_cmp(&b.t));
    out
}

/// Anything that can play the therapist for one iteration.
pub trait CorrectionSource {
    fn events(&mut self, session: &TherapySession) -> Result<Vec<ForceEvent>>;
}

impl CorrectionSource for ScriptedTherapist {
    fn events(&mut self, session: &TherapySession) -> Result<Vec<ForceEvent>> {
        let last = session
            .episodes
            .last()
            .ok_or_else(|| Error::Degenerate("no episode to replay".into()))?;
        Ok(scripted_therapist_events(self, &session.task, &last.actual))
    }
}

/// Preference means minus desired waypoints, flattened waypoint-major
/// (`x₀, y₀, x₁, y₁, …`).
pub fn build_therapist_state(preference: &ProbTrajectory, desired: &TimedTrajectory, n: usize) -> Result<DVector<f64>> {
    if preference.len() != n {
        return Err(Error::Dimension { expected: n, got: preference.len() });
    }
    let duration = preference.times()[n - 1];
    let chi = desired.resample(n, duration)?;
    let d = preference.dim();
    if chi.dim() != d {
        return Err(Error::Dimension { expected: d, got: chi.dim() });
    }
    Ok(DVector::from_iterator(
        n * d,
        preference.means().iter().zip(chi.points()).flat_map(|(m, x)| (m - x).iter().copied().collect::<Vec<_>>()),
    ))
}

/// One `(s_i, via-points)` pair plus what the skill encoder needs to lay it out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillRecord {
    pub iteration: usize,
    pub state: Vec<f64>,
    pub vias: Vec<ViaPoint>,
    pub slot_times: Vec<f64>,
    /// Reference the via-points were built on, at each slot time.
    #[serde(with = "serde_points")]
    pub slot_reference: Vec<Point>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub m1: f64,
    pub m2: f64,
    pub keypoint_rms: f64,
    pub keypoint_errors: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    #[serde(rename = "M1")]
    pub m1: f64,
    #[serde(rename = "M2")]
    pub m2: f64,
    pub track_rms: f64,
}

/// One line of the session log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Preference the iteration's reference was built from (none at bootstrap).
    pub preference: Option<ProbTrajectory>,
    /// Therapist state `s_i` from that preference.
    pub state: Option<Vec<f64>>,
    pub event_count: usize,
    pub segments: Vec<ForceSegment>,
    pub vias: Vec<ViaPoint>,
    pub dropped: Vec<DroppedSegment>,
    /// Reference tracked in this iteration's episodes, on the waypoint grid.
    pub reference: TimedTrajectory,
    pub episodes: Vec<EpisodeSummary>,
    pub metrics: IterationMetrics,
}

pub fn summarize_episode(log: &EpisodeLog, task: &Task) -> Result<EpisodeSummary> {
    let errors: Vec<f64> = task
        .keypoint_times
        .iter()
        .map(|&t| (task.desired.position_at(t) - log.actual.position_at(t)).norm())
        .collect();
    let rms = if errors.is_empty() { 0.0 } else { (errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt() };
    Ok(EpisodeSummary {
        m1: corrective_force_metric(log)?,
        m2: episode_sparc(log)?,
        keypoint_rms: rms,
        keypoint_errors: errors,
    })
}

pub fn aggregate(episodes: &[EpisodeSummary]) -> IterationMetrics {
    let n = episodes.len().max(1) as f64;
    let rms = episodes.iter().map(|e| e.keypoint_rms * e.keypoint_rms).sum::<f64>() / n;
    IterationMetrics {
        m1: episodes.iter().map(|e| e.m1).sum::<f64>() / n,
        m2: episodes.iter().map(|e| e.m2).sum::<f64>() / n,
        track_rms: rms.sqrt(),
    }
}

/// Full state of a therapy session.
#[derive(Debug, Clone)]
pub struct TherapySession {
    pub cfg: SessionConfig,
    pub task: Task,
    /// Completed iterations (the bootstrap is iteration 0).
    pub iteration: usize,
    /// Episodes of the most recent iteration.
    pub episodes: Vec<EpisodeLog>,
    /// Waypoint-resampled episodes pooled for preference encoding.
    pub pool: Vec<Vec<TimedTrajectory>>,
    /// Accumulated `(s_i, via-points)` pairs.
    pub skill_records: Vec<SkillRecord>,
    /// Reference of the most recent iteration.
    pub reference: TimedTrajectory,
    /// Preference encoded from the most recent episodes.
    pub preference: Option<ProbTrajectory>,
    pub log: Vec<IterationRecord>,
}

impl TherapySession {
    /// Iteration 0: `J` episodes tracking the desired motion.
    pub fn bootstrap(cfg: &SessionConfig, task: &Task, patient: &PatientModel) -> Result<Self> {
        cfg.validate()?;
        task.validate()?;
        patient.validate()?;
        if (task.duration() - cfg.duration).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "task lasts {} s but the session is configured for {} s",
                task.duration(),
                cfg.duration
            )));
        }
        let reference = task.desired.clone();
        let episodes = run_episodes(cfg, patient, &reference)?;
        let summaries = episodes.iter().map(|e| summarize_episode(e, task)).collect::<Result<Vec<_>>>()?;
        let record = IterationRecord {
            iteration: 0,
            preference: None,
            state: None,
            event_count: 0,
            segments: vec![],
            vias: vec![],
            dropped: vec![],
            reference: reference.resample(cfg.waypoints, cfg.duration)?,
            metrics: aggregate(&summaries),
            episodes: summaries,
        };
        let mut s = Self {
            cfg: cfg.clone(),
            task: task.clone(),
            iteration: 0,
            episodes: vec![],
            pool: vec![],
            skill_records: vec![],
            reference,
            preference: None,
            log: vec![record],
        };
        s.absorb_episodes(episodes)?;
        Ok(s)
    }

    /// Stores new episodes and encodes the preference they imply.
    fn absorb_episodes(&mut self, episodes: Vec<EpisodeLog>) -> Result<()> {
        let cfg = &self.cfg;
        let resampled = episodes
            .iter()
            .map(|e| e.actual.resample(cfg.waypoints, cfg.duration))
            .collect::<Result<Vec<_>>>()?;
        self.pool.push(resampled);
        while self.pool.len() > cfg.preference_window {
            self.pool.remove(0);
        }
        let data: Vec<Point> = self
            .pool
            .iter()
            .flatten()
            .flat_map(|traj| {
                traj.points().iter().enumerate().map(|(n, p)| {
                    let mut v = Point::zeros(p.len() + 1);
                    v[0] = traj.time(n);
                    v.rows_mut(1, p.len()).copy_from(p);
                    v
                })
            })
            .collect();
        let model = fit_gmm(&data, cfg.components, cfg.seed.wrapping_add(self.iteration as u64))?;
        self.preference = Some(gmr_condition(&model, &cfg.grid())?);
        self.episodes = episodes;
        Ok(())
    }

    pub fn current_preference(&self) -> Result<&ProbTrajectory> {
        self.preference
            .as_ref()
            .ok_or_else(|| Error::Degenerate("session has no encoded preference".into()))
    }

    /// Therapist state of the current preference.
    pub fn therapist_state(&self) -> Result<DVector<f64>> {
        build_therapist_state(self.current_preference()?, &self.task.desired, self.cfg.waypoints)
    }

    /// Via-points from raw therapist force events against the current state.
    pub fn vias_from_events(&self, events: &[ForceEvent]) -> Result<(Vec<ForceSegment>, Vec<ViaPoint>, Vec<DroppedSegment>)> {
        let segments = detect_segments(events, self.cfg.force_threshold, self.cfg.min_gap)?;
        let (vias, dropped) =
            derive_via_points(&segments, &self.task.desired, &self.reference, self.current_preference()?, &self.cfg)?;
        Ok((segments, vias, dropped))
    }

    pub fn done(&self) -> bool {
        self.iteration >= self.cfg.iterations
    }

    /// Session log as JSON lines, one per iteration.
    pub fn log_jsonl(&self) -> String {
        self.log
            .iter()
            .map(|r| serde_json::to_string(r).expect("finite records serialize") + "\n")
            .collect()
    }
}

fn run_episodes(cfg: &SessionConfig, patient: &PatientModel, reference: &TimedTrajectory) -> Result<Vec<EpisodeLog>> {
    (0..cfg.episodes)
        .map(|_| run_episode(cfg, &cfg.patient_robot, patient, reference, cfg.dt_sim))
        .collect()
}

/// One therapy iteration driven by therapist force events.
///
/// The input session is left untouched; on success the advanced session is
/// returned.
pub fn run_iteration(session: &TherapySession, events: &[ForceEvent], patient: &PatientModel) -> Result<TherapySession> {
    let (segments, vias, dropped) = session.vias_from_events(events)?;
    advance(session, events.len(), segments, vias, dropped, patient)
}

/// One therapy iteration with externally supplied via-points (e.g. from a
/// trained skill model) in place of therapist forces.
pub fn run_iteration_with_vias(session: &TherapySession, vias: Vec<ViaPoint>, patient: &PatientModel) -> Result<TherapySession> {
    for v in &vias {
        v.validate(session.cfg.duration)?;
    }
    advance(session, 0, vec![], vias, vec![], patient)
}

fn advance(
    session: &TherapySession,
    event_count: usize,
    segments: Vec<ForceSegment>,
    vias: Vec<ViaPoint>,
    dropped: Vec<DroppedSegment>,
    patient: &PatientModel,
) -> Result<TherapySession> {
    if session.done() {
        return Err(Error::Config(format!("session already ran {} iterations", session.iteration)));
    }
    let cfg = &session.cfg;
    let preference = session.current_preference()?.clone();
    let state = session.therapist_state()?;
    let reference = deform_reference(&preference, &vias, &session.task.desired, cfg)?;
    let episodes = run_episodes(cfg, patient, &reference)?;
    let summaries = episodes.iter().map(|e| summarize_episode(e, &session.task)).collect::<Result<Vec<_>>>()?;

    let slot_times = session.task.keypoint_times.clone();
    let slot_reference = slot_times.iter().map(|&t| session.reference.position_at(t)).collect();
    let mut next = session.clone();
    next.iteration += 1;
    next.skill_records.push(SkillRecord {
        iteration: next.iteration,
        state: state.as_slice().to_vec(),
        vias: vias.clone(),
        slot_times,
        slot_reference,
    });
    next.log.push(IterationRecord {
        iteration: next.iteration,
        preference: Some(preference),
        state: Some(state.as_slice().to_vec()),
        event_count,
        segments,
        vias,
        dropped,
        reference: reference.clone(),
        metrics: aggregate(&summaries),
        episodes: summaries,
    });
    next.reference = reference;
    next.absorb_episodes(episodes)?;
    Ok(next)
}

/// Bootstrap followed by `I` iterations, each fed by `source`.
pub fn run_session(
    cfg: &SessionConfig,
    task: &Task,
    patient: &PatientModel,
    source: &mut dyn CorrectionSource,
) -> Result<TherapySession> {
    let mut session = TherapySession::bootstrap(cfg, task, patient)?;
    while !session.done() {
        let events = source.events(&session)?;
        session = run_iteration(&session, &events, patient)?;
    }
    Ok(session)
}
