//! Session configuration. Defaults are the controller parameters of the
//! reference setup, restricted to the planar translational sub-blocks.

use crate::{Error, Result};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

/// Diagonal Cartesian impedance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotImpedance {
    pub stiffness: Vec<f64>,
    pub damping: Vec<f64>,
    /// Allows `K = 0` (the robot renders no spring, e.g. transparent mode).
    #[serde(default)]
    pub zero_impedance: bool,
}

impl RobotImpedance {
    pub fn diagonal(stiffness: &[f64], damping: &[f64]) -> Self {
        Self { stiffness: stiffness.to_vec(), damping: damping.to_vec(), zero_impedance: false }
    }

    pub fn patient_default() -> Self {
        Self::diagonal(&[200.0, 200.0], &[10.0, 10.0])
    }

    pub fn therapist_default() -> Self {
        Self::diagonal(&[800.0, 800.0], &[51.0, 51.0])
    }

    pub fn zero(dim: usize) -> Self {
        Self { stiffness: vec![0.0; dim], damping: vec![0.0; dim], zero_impedance: true }
    }

    pub fn dim(&self) -> usize {
        self.stiffness.len()
    }

    pub fn k(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.stiffness)
    }

    pub fn d(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.damping)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stiffness.len() != self.damping.len() {
            return Err(Error::Dimension { expected: self.stiffness.len(), got: self.damping.len() });
        }
        let bad = |v: &f64| !(v.is_finite() && *v >= 0.0);
        if self.stiffness.iter().any(bad) || self.damping.iter().any(bad) {
            return Err(Error::Config("impedance entries must be finite and >= 0".into()));
        }
        if !self.zero_impedance && self.stiffness.iter().any(|&k| k <= 0.0) {
            return Err(Error::Config("stiffness must be positive unless zero_impedance".into()));
        }
        Ok(())
    }
}

/// How the deviation vector and the force direction combine into a via-point offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ViaProduct {
    /// Componentwise product: an axis the therapist does not push stays put.
    #[default]
    Hadamard,
    /// `‖deviation‖ · u`: full deviation magnitude along the force direction.
    NormDirection,
}

/// Count used in the kernel variance prefactor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VarianceCount {
    /// Size of the merged reference + via-point set.
    #[default]
    Extended,
    /// Number of reference waypoints only.
    Reference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    /// Waypoints per trajectory (N).
    pub waypoints: usize,
    /// Mixture components (C).
    pub components: usize,
    /// Therapy iterations (I).
    pub iterations: usize,
    /// Episodes per iteration (J).
    pub episodes: usize,
    /// Episode duration in seconds.
    pub duration: f64,
    pub lambda_mean: f64,
    pub lambda_cov: f64,
    /// Squared-exponential kernel parameter, 1/s².
    pub kernel_width: f64,
    /// Via-point time shift after force activation, seconds.
    pub via_time_shift: f64,
    /// Deformation scale.
    pub deformation_scale: f64,
    /// Therapist force threshold, newtons.
    pub force_threshold: f64,
    /// Debounce gap when merging force segments, seconds.
    pub min_gap: f64,
    pub patient_robot: RobotImpedance,
    pub therapist_robot: RobotImpedance,
    /// Simulation step, seconds.
    pub dt_sim: f64,
    pub seed: u64,
    pub via_product: ViaProduct,
    pub variance_count: VarianceCount,
    /// Past iterations pooled into the preference dataset.
    pub preference_window: usize,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            waypoints: 200,
            components: 10,
            iterations: 10,
            episodes: 5,
            duration: 10.0,
            lambda_mean: 1.0,
            lambda_cov: 60.0,
            kernel_width: 2.0,
            via_time_shift: 0.05,
            deformation_scale: 1.0,
            force_threshold: 10.0,
            min_gap: 0.2,
            patient_robot: RobotImpedance::patient_default(),
            therapist_robot: RobotImpedance::therapist_default(),
            dt_sim: 1e-3,
            seed: 0,
            via_product: ViaProduct::Hadamard,
            variance_count: VarianceCount::Extended,
            preference_window: 1,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if self.waypoints < 2 {
            return fail("waypoints must be >= 2");
        }
        if self.components < 1 || self.iterations < 1 || self.episodes < 1 {
            return fail("components, iterations and episodes must be >= 1");
        }
        if self.preference_window < 1 {
            return fail("preference_window must be >= 1");
        }
        let positive = [
            ("duration", self.duration),
            ("lambda_mean", self.lambda_mean),
            ("lambda_cov", self.lambda_cov),
            ("kernel_width", self.kernel_width),
            ("force_threshold", self.force_threshold),
            ("dt_sim", self.dt_sim),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be > 0 (got {v})")));
            }
        }
        if !(self.via_time_shift >= 0.0 && self.deformation_scale >= 0.0 && self.min_gap >= 0.0) {
            return fail("via_time_shift, deformation_scale and min_gap must be >= 0");
        }
        self.patient_robot.validate()?;
        self.therapist_robot.validate()?;
        if self.patient_robot.dim() != self.therapist_robot.dim() {
            return fail("robot dimensions differ");
        }
        self.steps()?;
        Ok(())
    }

    /// Simulation steps per episode; `dt_sim` must divide the duration.
    pub fn steps(&self) -> Result<usize> {
        steps_for(self.duration, self.dt_sim)
    }

    pub fn dim(&self) -> usize {
        self.patient_robot.dim()
    }

    /// Uniform waypoint grid over the episode.
    pub fn grid(&self) -> Vec<f64> {
        let dt = self.grid_dt();
        (0..self.waypoints).map(|i| i as f64 * dt).collect()
    }

    pub fn grid_dt(&self) -> f64 {
        self.duration / (self.waypoints - 1) as f64
    }
}

pub(crate) fn steps_for(duration: f64, dt: f64) -> Result<usize> {
    let ratio = duration / dt;
    let steps = ratio.round();
    if !(steps >= 1.0) || (ratio - steps).abs() > 1e-6 {
        return Err(Error::Config(format!("dt_sim {dt} does not divide duration {duration}")));
    }
    Ok(steps as usize)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = SessionConfig::default();
        c.validate().unwrap();
        assert_eq!(c.steps().unwrap(), 10_000);
        assert_eq!(c.grid().len(), 200);
        assert_eq!(*c.grid().last().unwrap(), 10.0);
    }

    #[test]
    fn rejects_bad_values() {
        let mut c = SessionConfig { lambda_cov: 0.0, ..Default::default() };
        assert!(c.validate().is_err());
        c = SessionConfig { dt_sim: 0.003, ..Default::default() };
        assert!(c.validate().is_err());
        c = SessionConfig::default();
        c.patient_robot.stiffness[1] = 0.0;
        assert!(c.validate().is_err());
        c.patient_robot.zero_impedance = true;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn unknown_fields_rejected() {
        let r: std::result::Result<SessionConfig, _> =
            serde_json::from_str(r#"{"waypoints": 100, "bogus": 1}"#);
        assert!(r.is_err());
        let c: SessionConfig = serde_json::from_str(r#"{"waypoints": 100}"#).unwrap();
        assert_eq!(c.waypoints, 100);
        assert_eq!(c.components, 10);
    }
}
