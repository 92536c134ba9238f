//! Versioned scenario files: everything needed to reproduce a run.
//!
//! A scenario is JSON or TOML (chosen by file extension) with the sections
//! `task`, `patient`, `session`, `therapist`, `baseline`, `skill` and a
//! top-level `seed`. Omitted sections take their defaults.

use crate::baselines::VicParams;
use crate::config::SessionConfig;
use crate::linalg::{serde_point, serde_points, Point};
use crate::policy::ScriptedTherapist;
use crate::simdyn::{ElasticBand, PatientModel};
use crate::skill::{TargetEncoding, DEFAULT_LATENT_COUNT};
use crate::task::Task;
use crate::{Error, Result};
use nalgebra::dvector;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskSpec {
    Triangle,
    Rectangle,
    Polygon {
        name: String,
        #[serde(with = "serde_point")]
        home: Point,
        #[serde(with = "serde_points")]
        vertices: Vec<Point>,
    },
}

impl TaskSpec {
    pub fn build(&self, duration: f64, dt: f64) -> Result<Task> {
        match self {
            Self::Triangle => Task::triangle(duration, dt),
            Self::Rectangle => Task::rectangle(duration, dt),
            Self::Polygon { name, home, vertices } => Task::polygon(name, home.clone(), vertices, duration, dt),
        }
    }
}

/// Patient parameters; the intended path is the task's desired motion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatientSpec {
    pub mass: f64,
    pub intent_stiffness: f64,
    pub intent_damping: f64,
    pub band: ElasticBand,
}

impl PatientSpec {
    /// Mild impairment: a light band anchored below the workspace.
    pub fn stage1() -> Self {
        Self::banded(30.0)
    }

    /// Severe impairment: the same anchor with a stiffer band.
    pub fn stage2() -> Self {
        Self::banded(80.0)
    }

    fn banded(stiffness: f64) -> Self {
        Self {
            mass: 2.0,
            intent_stiffness: 100.0,
            intent_damping: 20.0,
            band: ElasticBand { anchor: dvector![0.40, -0.45], stiffness, rest_length: 0.1 },
        }
    }

    pub fn build(&self, task: &Task) -> PatientModel {
        PatientModel {
            mass: self.mass,
            intent_stiffness: self.intent_stiffness,
            intent_damping: self.intent_damping,
            preferred_path: task.desired.clone(),
            band: self.band.clone(),
        }
    }
}

impl Default for PatientSpec {
    fn default() -> Self {
        Self::stage1()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SkillSpec {
    pub latent_count: usize,
    pub encoding: TargetEncoding,
}

impl Default for SkillSpec {
    fn default() -> Self {
        Self { latent_count: DEFAULT_LATENT_COUNT, encoding: TargetEncoding::Absolute }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema_version: u32,
    #[serde(default)]
    pub name: String,
    pub task: TaskSpec,
    #[serde(default)]
    pub patient: PatientSpec,
    #[serde(default)]
    pub session: SessionConfig,
    #[serde(default)]
    pub therapist: ScriptedTherapist,
    #[serde(default)]
    pub baseline: VicParams,
    #[serde(default)]
    pub skill: SkillSpec,
    #[serde(default)]
    pub seed: u64,
}

impl Scenario {
    pub fn new(name: &str, task: TaskSpec, patient: PatientSpec) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            name: name.to_string(),
            task,
            patient,
            session: SessionConfig::default(),
            therapist: ScriptedTherapist::default(),
            baseline: VicParams::default(),
            skill: SkillSpec::default(),
            seed: 0,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: Self = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let s: Self = toml::from_str(text).map_err(|e| Error::Scenario(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    /// Loads by extension: `.toml` as TOML, anything else as JSON.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let parsed = if path.extension().is_some_and(|e| e == "toml") { Self::from_toml(&text) } else { Self::from_json(&text) };
        parsed.map_err(|e| match e {
            Error::Scenario(msg) => Error::Scenario(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    /// Session parameters with the scenario seed applied.
    pub fn session_config(&self) -> SessionConfig {
        SessionConfig { seed: self.seed, ..self.session.clone() }
    }

    pub fn build_task(&self) -> Result<Task> {
        self.task.build(self.session.duration, self.session.dt_sim)
    }

    pub fn build_patient(&self, task: &Task) -> PatientModel {
        self.patient.build(task)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.session.seed = 0;
        self
    }

    /// Schema version plus every invariant the run would otherwise hit later.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Scenario(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.session.seed != 0 && self.session.seed != self.seed {
            return Err(Error::Scenario("seed is set both at the top level and in [session]".into()));
        }
        let wrap = |e: Error| match e {
            Error::Scenario(_) => e,
            other => Error::Scenario(other.to_string()),
        };
        let cfg = self.session_config();
        cfg.validate().map_err(wrap)?;
        let task = self.build_task().map_err(wrap)?;
        self.build_patient(&task).validate().map_err(wrap)?;
        self.therapist.validate(cfg.force_threshold).map_err(wrap)?;
        self.baseline.validate(cfg.dim()).map_err(wrap)?;
        if self.skill.latent_count == 0 {
            return Err(Error::Scenario("skill.latent_count must be at least 1".into()));
        }
        Ok(())
    }
}
