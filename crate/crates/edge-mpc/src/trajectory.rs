//! Reference trajectory generators: circular, spiral, helical, and hover
//! tracks, sampled as desired states with analytic velocities.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::dynamics::VehicleState;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrajectoryKind {
    Circular,
    Spiral,
    Helical,
    Hover,
}

/// Geometry of a reference track.
///
/// All kinds share the same parameter set; `climb_rate` only matters for
/// helical tracks and `radial_rate` only for spirals.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrajectorySpec {
    pub kind: TrajectoryKind,
    /// Initial radius, m.
    pub radius: f64,
    /// Angular rate, rad/s.
    pub omega: f64,
    /// Track center, m.
    pub center: [f64; 3],
    /// Vertical climb rate for helical tracks, m/s.
    pub climb_rate: f64,
    /// Radial growth rate for spiral tracks, m/s.
    pub radial_rate: f64,
    /// Track duration, s.
    pub duration: f64,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        Self {
            kind: TrajectoryKind::Circular,
            radius: 2.0,
            omega: 0.4,
            center: [0.0, 0.0, 2.0],
            climb_rate: 0.05,
            radial_rate: 0.02,
            duration: 60.0,
        }
    }
}

impl TrajectorySpec {
    pub fn hover_at(center: [f64; 3], duration: f64) -> Self {
        Self {
            kind: TrajectoryKind::Hover,
            center,
            duration,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius.is_finite() && self.radius >= 0.0) {
            return Err(Error::invalid("trajectory radius must be finite and >= 0"));
        }
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(Error::invalid("trajectory duration must be finite and > 0"));
        }
        if !self.omega.is_finite() {
            return Err(Error::invalid("trajectory omega must be finite"));
        }
        if self.center.iter().any(|c| !c.is_finite())
            || !self.climb_rate.is_finite()
            || !self.radial_rate.is_finite()
        {
            return Err(Error::invalid("trajectory parameters must be finite"));
        }
        Ok(())
    }

    /// Conservative bound on the reference speed, used by continuity checks.
    pub fn speed_bound(&self) -> f64 {
        let max_radius = match self.kind {
            TrajectoryKind::Spiral => (self.radius + self.radial_rate * self.duration).abs(),
            _ => self.radius.abs(),
        };
        max_radius * self.omega.abs() + self.radial_rate.abs() + self.climb_rate.abs()
    }
}

/// A sampled point of the reference signal: the full desired state (desired
/// attitude is level) plus its timestamp.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReferencePoint {
    pub state: VehicleState,
    pub t: f64,
}

/// Sample the desired state at time `t` in `[0, duration]`.
///
/// Positions follow the closed-form curves; desired velocities are their
/// exact time derivatives; desired roll and pitch are zero.
pub fn sample(spec: &TrajectorySpec, t: f64) -> Result<ReferencePoint> {
    if !t.is_finite() || t < 0.0 || t > spec.duration {
        return Err(Error::invalid(format!(
            "sample time {t} outside [0, {}]",
            spec.duration
        )));
    }
    let center = Vector3::from(spec.center);
    let (sin_wt, cos_wt) = (spec.omega * t).sin_cos();
    let (p, v) = match spec.kind {
        TrajectoryKind::Hover => (center, Vector3::zeros()),
        TrajectoryKind::Circular => {
            let r = spec.radius;
            (
                center + Vector3::new(r * cos_wt, r * sin_wt, 0.0),
                Vector3::new(-r * spec.omega * sin_wt, r * spec.omega * cos_wt, 0.0),
            )
        }
        TrajectoryKind::Spiral => {
            let r = spec.radius + spec.radial_rate * t;
            let dr = spec.radial_rate;
            (
                center + Vector3::new(r * cos_wt, r * sin_wt, 0.0),
                Vector3::new(
                    dr * cos_wt - r * spec.omega * sin_wt,
                    dr * sin_wt + r * spec.omega * cos_wt,
                    0.0,
                ),
            )
        }
        TrajectoryKind::Helical => {
            let r = spec.radius;
            (
                center + Vector3::new(r * cos_wt, r * sin_wt, spec.climb_rate * t),
                Vector3::new(
                    -r * spec.omega * sin_wt,
                    r * spec.omega * cos_wt,
                    spec.climb_rate,
                ),
            )
        }
    };
    Ok(ReferencePoint {
        state: VehicleState::new(p, v, 0.0, 0.0),
        t,
    })
}

/// Sample the next `n` reference points at `t + j*dt` for `j = 1..=n`,
/// clamping times past the end of the track to the terminal point.
pub fn sample_horizon(
    spec: &TrajectorySpec,
    t: f64,
    n: usize,
    dt: f64,
) -> Result<Vec<ReferencePoint>> {
    if !dt.is_finite() || dt <= 0.0 {
        return Err(Error::invalid("sample_horizon: dt must be finite and > 0"));
    }
    (1..=n)
        .map(|j| sample(spec, (t + j as f64 * dt).min(spec.duration)))
        .collect()
}
