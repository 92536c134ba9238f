//! Therapist corrective forces to via-points.

use crate::config::{SessionConfig, ViaProduct};
use crate::linalg::{serde_point, Cov, Point};
use crate::trajectory::{ForceEvent, ProbTrajectory, TimedTrajectory, ViaPoint};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Covariance of the start/end pinning via-points, m².
pub const BOUNDARY_COV: f64 = 1e-6;

/// A run of above-threshold force samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForceSegment {
    pub t_start: f64,
    pub t_end: f64,
    /// Force sample with the largest magnitude in the run.
    #[serde(with = "serde_point")]
    pub peak_force: Point,
}

/// A segment whose shifted via time fell past the episode end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedSegment {
    pub t_start: f64,
    pub via_time: f64,
}

/// Groups above-threshold samples into segments. Runs closer than `min_gap`
/// are merged.
pub fn detect_segments(events: &[ForceEvent], threshold: f64, min_gap: f64) -> Result<Vec<ForceSegment>> {
    if let Some(i) = events.windows(2).position(|w| w[1].t < w[0].t) {
        return Err(Error::Unsorted { index: i + 1 });
    }
    let mut out: Vec<ForceSegment> = Vec::new();
    for e in events.iter().filter(|e| e.force.norm() > threshold) {
        match out.last_mut() {
            Some(seg) if e.t - seg.t_end < min_gap => {
                seg.t_end = e.t;
                if e.force.norm() > seg.peak_force.norm() {
                    seg.peak_force = e.force.clone();
                }
            }
            _ => out.push(ForceSegment { t_start: e.t, t_end: e.t, peak_force: e.force.clone() }),
        }
    }
    Ok(out)
}

/// Via-point mean: the current reference displaced by the preference's
/// deviation from the desired motion, projected onto the force direction.
pub fn via_mean(
    scale: f64,
    desired: &Point,
    preference: &Point,
    reference: &Point,
    force: &Point,
    product: ViaProduct,
) -> Point {
    let deviation = desired - preference;
    let u = force / force.norm();
    let offset = match product {
        ViaProduct::Hadamard => deviation.component_mul(&u),
        ViaProduct::NormDirection => u * deviation.norm(),
    };
    reference + offset * scale
}

/// Builds one via-point per segment at `t_start + δt`. Segments whose via
/// time exceeds the episode are dropped and reported.
pub fn derive_via_points(
    segments: &[ForceSegment],
    desired: &TimedTrajectory,
    reference: &TimedTrajectory,
    preference: &ProbTrajectory,
    cfg: &SessionConfig,
) -> Result<(Vec<ViaPoint>, Vec<DroppedSegment>)> {
    let mut vias = Vec::new();
    let mut dropped = Vec::new();
    for seg in segments {
        let t = seg.t_start + cfg.via_time_shift;
        if t > cfg.duration + 1e-9 {
            log::warn!("via-point at {t} s falls past the episode end; segment dropped");
            dropped.push(DroppedSegment { t_start: seg.t_start, via_time: t });
            continue;
        }
        let mean = via_mean(
            cfg.deformation_scale,
            &desired.position_at(t),
            &preference.mean_at(t),
            &reference.position_at(t),
            &seg.peak_force,
            cfg.via_product,
        );
        vias.push(ViaPoint::new(t, mean, preference.cov_at(t)));
    }
    let max = cfg.waypoints / 10;
    if vias.len() > max {
        return Err(Error::Config(format!(
            "{} therapist via-points exceed the sparse limit of {max} (N/10)",
            vias.len()
        )));
    }
    Ok((vias, dropped))
}

/// Start and end pins on the desired motion.
pub fn boundary_via_points(desired: &TimedTrajectory, duration: f64) -> Result<Vec<ViaPoint>> {
    if desired.duration() + 1e-9 < duration {
        return Err(Error::OutOfRange { time: duration, start: 0.0, end: desired.duration() });
    }
    let d = desired.dim();
    let cov = Cov::identity(d, d) * BOUNDARY_COV;
    Ok(vec![
        ViaPoint::new(0.0, desired.first().clone(), cov.clone()),
        ViaPoint::new(duration, desired.position_at(duration), cov),
    ])
}
