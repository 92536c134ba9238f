//! Run-directory layout shared by every subcommand that writes results.
//!
//! ```text
//! <out>/scenario.json        effective scenario (seed applied)
//! <out>/session.jsonl        one iteration record per line
//! <out>/metrics.csv          iteration,M1,M2,track_rms
//! <out>/plot.json            per-iteration plot data
//! <out>/skill_records.json   therapist states and via-points (policy runs)
//! <out>/episodes/*.csv       optional raw episodes
//! ```

use aan_core::policy::{IterationMetrics, IterationRecord, SkillRecord};
use aan_core::scenario::Scenario;
use aan_core::simdyn::EpisodeLog;
use aan_core::task::Task;
use aan_core::trajectory::{ForceEvent, ProbTrajectory, TimedTrajectory, ViaPoint};
use aan_service::{Band, Polyline, TaskView};
use anyhow::{Context, Result};
use serde::Serialize;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

pub const SCENARIO_FILE: &str = "scenario.json";
pub const SESSION_FILE: &str = "session.jsonl";
pub const METRICS_FILE: &str = "metrics.csv";
pub const PLOT_FILE: &str = "plot.json";
pub const SKILL_FILE: &str = "skill_records.json";
pub const EPISODE_DIR: &str = "episodes";

/// Sampled therapist force, one entry per event.
#[derive(Debug, Serialize)]
pub struct ForceTrace {
    pub t: Vec<f64>,
    pub f: Vec<Vec<f64>>,
}

/// One iteration's panel: what was tracked, what came out, what was corrected.
#[derive(Debug, Serialize)]
pub struct PlotFrame {
    pub iteration: usize,
    /// Preference the reference was built from (none at iteration 0).
    pub preference: Option<Band>,
    pub reference: Polyline,
    pub actuals: Vec<Polyline>,
    /// Patient-side control force of each episode.
    pub control_forces: Vec<Polyline>,
    pub vias: Vec<ViaPoint>,
    pub therapist_force: ForceTrace,
    pub metrics: IterationMetrics,
}

#[derive(Debug, Serialize)]
pub struct PlotData {
    pub scenario: String,
    pub method: String,
    pub task: TaskView,
    pub frames: Vec<PlotFrame>,
}

impl PlotData {
    pub fn new(scenario: &Scenario, method: &str, task: &Task) -> Self {
        Self {
            scenario: scenario.name.clone(),
            method: method.to_string(),
            task: TaskView {
                name: task.name.clone(),
                keypoint_times: task.keypoint_times.clone(),
                desired: Polyline::decimated(&task.desired),
            },
            frames: Vec::new(),
        }
    }

    pub fn push(
        &mut self,
        record: &IterationRecord,
        preference: Option<&ProbTrajectory>,
        episodes: &[EpisodeLog],
        events: &[ForceEvent],
    ) -> Result<()> {
        let control_forces = episodes
            .iter()
            .map(|e| Ok(Polyline::decimated(&TimedTrajectory::new(e.actual.dt(), e.control_forces.clone())?)))
            .collect::<aan_core::Result<Vec<_>>>()?;
        self.frames.push(PlotFrame {
            iteration: record.iteration,
            preference: preference.map(Band::two_sigma),
            reference: Polyline::decimated(&record.reference),
            actuals: episodes.iter().map(|e| Polyline::decimated(&e.actual)).collect(),
            control_forces,
            vias: record.vias.clone(),
            therapist_force: ForceTrace {
                t: events.iter().map(|e| e.t).collect(),
                f: events.iter().map(|e| e.force.iter().copied().collect()).collect(),
            },
            metrics: record.metrics,
        });
        Ok(())
    }
}

pub fn metrics_csv<'a>(records: impl IntoIterator<Item = (usize, &'a IterationMetrics)>) -> String {
    let mut out = String::from("iteration,M1,M2,track_rms\n");
    for (i, m) in records {
        let _ = writeln!(out, "{i},{},{},{}", m.m1, m.m2, m.track_rms);
    }
    out
}

pub fn episode_path(dir: &Path, iteration: usize, episode: usize) -> PathBuf {
    dir.join(EPISODE_DIR).join(format!("iter{iteration:03}_ep{episode:02}.csv"))
}

/// Writes a run directory; `episodes` holds `(iteration, logs)` pairs.
pub struct RunOutput<'a> {
    pub scenario: &'a Scenario,
    pub log_jsonl: String,
    pub log: &'a [IterationRecord],
    pub plot: &'a PlotData,
    pub skill_records: Option<&'a [SkillRecord]>,
    pub episodes: Option<&'a [(usize, Vec<EpisodeLog>)]>,
}

impl RunOutput<'_> {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let put = |name: &str, text: &str| {
            let path = dir.join(name);
            fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
        };
        put(SCENARIO_FILE, &(self.scenario.to_json() + "\n"))?;
        put(SESSION_FILE, &self.log_jsonl)?;
        put(METRICS_FILE, &metrics_csv(self.log.iter().map(|r| (r.iteration, &r.metrics))))?;
        put(PLOT_FILE, &serde_json::to_string(self.plot)?)?;
        if let Some(records) = self.skill_records {
            put(SKILL_FILE, &serde_json::to_string(records)?)?;
        }
        if let Some(groups) = self.episodes {
            fs::create_dir_all(dir.join(EPISODE_DIR))?;
            for (iteration, logs) in groups {
                for (j, log) in logs.iter().enumerate() {
                    let path = episode_path(dir, *iteration, j);
                    fs::write(&path, log.to_csv()).with_context(|| format!("writing {}", path.display()))?;
                }
            }
        }
        log::info!("wrote {}", dir.display());
        Ok(())
    }
}
