//! Evaluation metrics: mean corrective force (M1) and spectral arc length (M2).

use crate::simdyn::EpisodeLog;
use crate::{Error, Result};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

/// Statistic used to reduce the per-step control-force norms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ForceStatistic {
    #[default]
    Mean,
    Rms,
    Peak,
}

/// Mean Euclidean norm of the patient-side control force over an episode.
pub fn corrective_force_metric(log: &EpisodeLog) -> Result<f64> {
    corrective_force_with(log, ForceStatistic::Mean)
}

pub fn corrective_force_with(log: &EpisodeLog, stat: ForceStatistic) -> Result<f64> {
    if log.control_forces.is_empty() {
        return Err(Error::Degenerate("empty episode log".into()));
    }
    let norms = log.control_forces.iter().map(|f| f.norm());
    let n = log.control_forces.len() as f64;
    Ok(match stat {
        ForceStatistic::Mean => norms.sum::<f64>() / n,
        ForceStatistic::Rms => (norms.map(|v| v * v).sum::<f64>() / n).sqrt(),
        ForceStatistic::Peak => norms.fold(0.0, f64::max),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparcParams {
    /// Upper cutoff, Hz.
    pub max_frequency: f64,
    /// Normalized magnitude below which the spectrum is considered negligible.
    pub amplitude_threshold: f64,
    /// Zero padding: the FFT length is the next power of two at least
    /// `2^pad_level` times the signal length.
    pub pad_level: u32,
}

impl Default for SparcParams {
    fn default() -> Self {
        Self { max_frequency: 10.0, amplitude_threshold: 0.05, pad_level: 2 }
    }
}

/// Spectral arc length of a speed profile with default parameters.
/// Closer to zero is smoother.
pub fn sparc(speed: &[f64], dt: f64) -> Result<f64> {
    sparc_with(speed, dt, SparcParams::default())
}

pub fn sparc_with(speed: &[f64], dt: f64, p: SparcParams) -> Result<f64> {
    if speed.len() < 16 {
        return Err(Error::InsufficientData { needed: 16, got: speed.len() });
    }
    if !(dt > 0.0) {
        return Err(Error::Config(format!("sample interval {dt}")));
    }
    if speed.iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("non-finite speed sample".into()));
    }
    let nfft = (speed.len() << p.pad_level).next_power_of_two();
    let mut buf: Vec<Complex<f64>> = speed.iter().map(|&v| Complex::new(v, 0.0)).collect();
    buf.resize(nfft, Complex::new(0.0, 0.0));
    FftPlanner::new().plan_fft_forward(nfft).process(&mut buf);

    let df = 1.0 / (dt * nfft as f64);
    let dc = buf[0].norm();
    if dc == 0.0 {
        return Err(Error::Degenerate("speed profile is identically zero".into()));
    }
    let limit = ((p.max_frequency / df).floor() as usize).min(nfft / 2);
    let mag: Vec<f64> = buf[..=limit].iter().map(|c| c.norm() / dc).collect();
    let cutoff = mag.iter().rposition(|&m| m >= p.amplitude_threshold).unwrap_or(0);
    if cutoff == 0 {
        return Ok(0.0);
    }
    let span = cutoff as f64;
    let arc: f64 = mag[..=cutoff]
        .windows(2)
        .map(|w| ((1.0 / span).powi(2) + (w[1] - w[0]).powi(2)).sqrt())
        .sum();
    Ok(-arc)
}

/// Smoothness of an episode's actual motion.
pub fn episode_sparc(log: &EpisodeLog) -> Result<f64> {
    sparc(&log.actual.speeds(), log.actual.dt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::TimedTrajectory;
    use nalgebra::dvector;

    fn min_jerk_speed(duration: f64, dt: f64) -> Vec<f64> {
        let n = (duration / dt).round() as usize + 1;
        (0..n)
            .map(|i| {
                let s = i as f64 * dt / duration;
                30.0 * s * s * (1.0 - s) * (1.0 - s) / duration
            })
            .collect()
    }

    fn log_with_forces(forces: Vec<nalgebra::DVector<f64>>) -> EpisodeLog {
        let n = forces.len();
        EpisodeLog {
            actual: TimedTrajectory::new(0.01, vec![dvector![0.0, 0.0]; n.max(2)]).unwrap(),
            external_forces: vec![dvector![0.0, 0.0]; n],
            control_forces: forces,
            reference: None,
        }
    }

    #[test]
    fn force_metric_examples() {
        let l = log_with_forces(vec![dvector![3.0, 4.0]; 20]);
        assert_eq!(corrective_force_metric(&l).unwrap(), 5.0);
        let l = log_with_forces(vec![dvector![0.0, 0.0]; 20]);
        assert_eq!(corrective_force_metric(&l).unwrap(), 0.0);
        assert!(corrective_force_metric(&log_with_forces(vec![])).is_err());
        let l = log_with_forces(vec![dvector![3.0, 4.0], dvector![0.0, 0.0]]);
        assert_eq!(corrective_force_with(&l, ForceStatistic::Peak).unwrap(), 5.0);
        assert!((corrective_force_with(&l, ForceStatistic::Rms).unwrap() - 12.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn min_jerk_matches_reference_implementation() {
        // value from an independent NumPy port of the published SPARC routine
        // (same padding, 10 Hz cap and 0.05 threshold)
        let s = sparc(&min_jerk_speed(1.0, 0.01), 0.01).unwrap();
        assert!((s - -1.3757623560518364).abs() < 1e-12, "{s}");
        let fine = sparc_with(&min_jerk_speed(1.0, 0.01), 0.01, SparcParams { pad_level: 6, ..Default::default() }).unwrap();
        assert!((fine - -1.4059382543848216).abs() < 1e-12, "{fine}");
    }

    #[test]
    fn amplitude_invariant() {
        let v = min_jerk_speed(2.0, 0.001);
        let a = sparc(&v, 0.001).unwrap();
        let b = sparc(&v.iter().map(|x| 3.0 * x).collect::<Vec<_>>(), 0.001).unwrap();
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }

    #[test]
    fn rejects_short_and_zero() {
        assert!(sparc(&[1.0; 15], 0.01).is_err());
        assert!(matches!(sparc(&[0.0; 64], 0.01), Err(Error::Degenerate(_))));
    }
}
