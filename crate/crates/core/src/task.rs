//! Rehabilitation tasks: closed polygons traced from a home position.

use crate::linalg::Point;
use crate::trajectory::TimedTrajectory;
use crate::{Error, Result};
use nalgebra::dvector;
use serde::{Deserialize, Serialize};

/// Desired motion plus the times at which the key points are passed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub name: String,
    pub desired: TimedTrajectory,
    pub keypoint_times: Vec<f64>,
}

impl Task {
    /// Constant-speed path `home → v₀ → … → v_{n−1} → v₀ → home`.
    ///
    /// Key points are the vertex passages, the first vertex counted on entry
    /// and on closing the loop, so a triangle has four and a rectangle five.
    pub fn polygon(name: &str, home: Point, vertices: &[Point], duration: f64, dt: f64) -> Result<Self> {
        if vertices.len() < 2 {
            return Err(Error::Config("polygon needs at least two vertices".into()));
        }
        let mut path = vec![home.clone()];
        path.extend(vertices.iter().cloned());
        path.push(vertices[0].clone());
        path.push(home);
        let lengths: Vec<f64> = path.windows(2).map(|w| (&w[1] - &w[0]).norm()).collect();
        let total: f64 = lengths.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Config("polygon has zero length".into()));
        }
        let speed = total / duration;
        let mut arrivals = vec![0.0];
        for l in &lengths {
            arrivals.push(arrivals.last().unwrap() + l / speed);
        }
        // vertex passages: indices 1..=n+1 of the path
        let keypoint_times = arrivals[1..path.len() - 1].to_vec();
        let steps = (duration / dt).round() as usize;
        let desired = TimedTrajectory::from_fn(dt, steps + 1, |t| {
            let seg = arrivals.partition_point(|&a| a <= t).clamp(1, path.len() - 1) - 1;
            let span = arrivals[seg + 1] - arrivals[seg];
            let frac = if span > 0.0 { ((t - arrivals[seg]) / span).clamp(0.0, 1.0) } else { 0.0 };
            &path[seg] + (&path[seg + 1] - &path[seg]) * frac
        })?;
        let task = Self { name: name.to_string(), desired, keypoint_times };
        task.validate()?;
        Ok(task)
    }

    /// Triangle with vertices (0.40, −0.15), (0.55, 0.15), (0.25, 0.15) m.
    pub fn triangle(duration: f64, dt: f64) -> Result<Self> {
        let v = [dvector![0.40, -0.15], dvector![0.55, 0.15], dvector![0.25, 0.15]];
        let home = v.iter().fold(Point::zeros(2), |a, p| a + p) / 3.0;
        Self::polygon("triangle", home, &v, duration, dt)
    }

    /// Rectangle spanning (0.25, −0.15) to (0.55, 0.15) m.
    pub fn rectangle(duration: f64, dt: f64) -> Result<Self> {
        let v = [dvector![0.25, -0.15], dvector![0.55, -0.15], dvector![0.55, 0.15], dvector![0.25, 0.15]];
        Self::polygon("rectangle", dvector![0.40, 0.0], &v, duration, dt)
    }

    pub fn duration(&self) -> f64 {
        self.desired.duration()
    }

    pub fn keypoints(&self) -> Vec<Point> {
        self.keypoint_times.iter().map(|&t| self.desired.position_at(t)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.duration();
        if self.keypoint_times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Config(format!("task {}: keypoint times not increasing", self.name)));
        }
        if self.keypoint_times.iter().any(|&t| !(t > 0.0 && t < d)) {
            return Err(Error::Config(format!("task {}: keypoint outside (0, {d})", self.name)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triangle_has_four_keypoints_on_vertices() {
        let t = Task::triangle(10.0, 1e-3).unwrap();
        assert_eq!(t.keypoint_times.len(), 4);
        let kp = t.keypoints();
        assert!((&kp[0] - dvector![0.40, -0.15]).norm() < 2e-4);
        assert!((&kp[1] - dvector![0.55, 0.15]).norm() < 2e-4);
        assert!((&kp[3] - dvector![0.40, -0.15]).norm() < 2e-4);
        assert!((t.desired.first() - t.desired.last()).amax() < 1e-12);
    }

    #[test]
    fn rectangle_has_five_keypoints() {
        let t = Task::rectangle(10.0, 1e-3).unwrap();
        assert_eq!(t.keypoint_times.len(), 5);
        // constant speed: equal time on the equal-length sides
        let k = &t.keypoint_times;
        assert!(((k[1] - k[0]) - (k[3] - k[2])).abs() < 1e-12);
    }
}
