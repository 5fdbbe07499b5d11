//! Continuous-time UAV kinematic model and its forward-Euler discretization.
//!
//! The state is `x = [p, v, phi, theta]` (8 components, world frame); the
//! input is `u = [T, phi_d, theta_d]` (mass-normalized thrust plus desired
//! roll/pitch). Attitude responds to the desired angles as a first-order lag,
//! translation responds to the tilted thrust vector, gravity, and linear
//! velocity damping.

use nalgebra::{SVector, Vector3};

use crate::error::{Error, Result};

/// Number of scalar components in the vehicle state.
pub const STATE_DIM: usize = 8;
/// Number of scalar components in the control input.
pub const INPUT_DIM: usize = 3;

/// Vehicle state in the world frame.
///
/// Canonical flattened order (used by the wire protocol, CSV logs, and the
/// MPC internals) is `[px, py, pz, vx, vy, vz, phi, theta]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VehicleState {
    /// Position, meters.
    pub p: Vector3<f64>,
    /// Linear velocity, m/s.
    pub v: Vector3<f64>,
    /// Roll angle, rad, in `[-pi, pi]`.
    pub phi: f64,
    /// Pitch angle, rad, in `[-pi, pi]`.
    pub theta: f64,
}

impl VehicleState {
    pub fn new(p: Vector3<f64>, v: Vector3<f64>, phi: f64, theta: f64) -> Self {
        Self { p, v, phi, theta }
    }

    /// State at rest at a position: zero velocity, level attitude.
    pub fn at_rest(p: Vector3<f64>) -> Self {
        Self::new(p, Vector3::zeros(), 0.0, 0.0)
    }

    pub fn to_vector(&self) -> SVector<f64, STATE_DIM> {
        SVector::<f64, STATE_DIM>::from([
            self.p.x, self.p.y, self.p.z, self.v.x, self.v.y, self.v.z, self.phi, self.theta,
        ])
    }

    pub fn from_vector(x: &SVector<f64, STATE_DIM>) -> Self {
        Self {
            p: Vector3::new(x[0], x[1], x[2]),
            v: Vector3::new(x[3], x[4], x[5]),
            phi: x[6],
            theta: x[7],
        }
    }

    pub fn to_array(&self) -> [f64; STATE_DIM] {
        self.to_vector().into()
    }

    pub fn from_array(a: &[f64; STATE_DIM]) -> Self {
        Self::from_vector(&SVector::from(*a))
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|c| c.is_finite())
    }
}

/// Control input: total mass-normalized thrust plus desired roll/pitch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ControlInput {
    /// Total thrust, m/s^2. Non-negative for physical commands.
    pub thrust: f64,
    /// Desired roll, rad.
    pub phi_d: f64,
    /// Desired pitch, rad.
    pub theta_d: f64,
}

impl ControlInput {
    pub fn new(thrust: f64, phi_d: f64, theta_d: f64) -> Self {
        Self {
            thrust,
            phi_d,
            theta_d,
        }
    }

    /// The hover input `[g, 0, 0]`.
    pub fn hover(gravity: f64) -> Self {
        Self::new(gravity, 0.0, 0.0)
    }

    pub fn to_array(&self) -> [f64; INPUT_DIM] {
        [self.thrust, self.phi_d, self.theta_d]
    }

    pub fn from_array(a: &[f64; INPUT_DIM]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn is_finite(&self) -> bool {
        self.thrust.is_finite() && self.phi_d.is_finite() && self.theta_d.is_finite()
    }
}

/// Physical parameters of the kinematic model.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VehicleParams {
    /// Gravitational acceleration, m/s^2.
    pub gravity: f64,
    /// Linear velocity damping per axis `[A_x, A_y, A_z]`, 1/s.
    pub damping: [f64; 3],
    /// Roll response gain (dimensionless).
    pub k_phi: f64,
    /// Pitch response gain (dimensionless).
    pub k_theta: f64,
    /// Roll response time constant, s.
    pub tau_phi: f64,
    /// Pitch response time constant, s.
    pub tau_theta: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            gravity: 9.81,
            damping: [0.1, 0.1, 0.2],
            k_phi: 1.0,
            k_theta: 1.0,
            tau_phi: 0.5,
            tau_theta: 0.5,
        }
    }
}

impl VehicleParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gravity.is_finite() && self.gravity > 0.0) {
            return Err(Error::invalid("gravity must be finite and > 0"));
        }
        if self.damping.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(Error::invalid("damping terms must be finite and >= 0"));
        }
        for (name, v) in [("k_phi", self.k_phi), ("k_theta", self.k_theta)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("{name} must be finite and > 0")));
            }
        }
        for (name, v) in [("tau_phi", self.tau_phi), ("tau_theta", self.tau_theta)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("{name} must be finite and > 0")));
            }
        }
        Ok(())
    }
}

/// Time derivative of the vehicle state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StateDerivative {
    /// dp/dt, m/s.
    pub dp: Vector3<f64>,
    /// dv/dt, m/s^2.
    pub dv: Vector3<f64>,
    /// dphi/dt, rad/s.
    pub dphi: f64,
    /// dtheta/dt, rad/s.
    pub dtheta: f64,
}

/// Wrap an angle into `[-pi, pi]`. In-range angles pass through untouched so
/// fixed points stay bit-exact; out-of-range angles land in `[-pi, pi)`.
pub fn wrap_angle(a: f64) -> f64 {
    if (-std::f64::consts::PI..=std::f64::consts::PI).contains(&a) {
        return a;
    }
    let two_pi = 2.0 * std::f64::consts::PI;
    let w = (a + std::f64::consts::PI).rem_euclid(two_pi) - std::f64::consts::PI;
    debug_assert!((-std::f64::consts::PI..=std::f64::consts::PI).contains(&w));
    w
}

/// World-frame acceleration produced by thrust `T` at attitude `(phi, theta)`.
///
/// The attitude rotation is `R_y(theta) * R_x(phi)` with yaw fixed at zero,
/// so the thrust vector `[0, 0, T]` maps to
/// `T * [sin(theta)cos(phi), -sin(phi), cos(theta)cos(phi)]`.
/// The result always has Euclidean norm `|T|`.
pub fn thrust_acceleration(phi: f64, theta: f64, thrust: f64) -> Result<Vector3<f64>> {
    if !(phi.is_finite() && theta.is_finite() && thrust.is_finite()) {
        return Err(Error::invalid("thrust_acceleration: non-finite input"));
    }
    let (sin_phi, cos_phi) = phi.sin_cos();
    let (sin_theta, cos_theta) = theta.sin_cos();
    Ok(Vector3::new(
        thrust * sin_theta * cos_phi,
        -thrust * sin_phi,
        thrust * cos_theta * cos_phi,
    ))
}

/// Continuous-time state derivative.
///
/// ```text
/// dp     = v
/// dv     = R(phi,theta)*[0,0,T] + [0,0,-g] - diag(A)*v
/// dphi   = (K_phi * phi_d - phi) / tau_phi
/// dtheta = (K_theta * theta_d - theta) / tau_theta
/// ```
pub fn derivative(
    x: &VehicleState,
    u: &ControlInput,
    params: &VehicleParams,
) -> Result<StateDerivative> {
    if !x.is_finite() {
        return Err(Error::invalid("derivative: non-finite state"));
    }
    if !u.is_finite() {
        return Err(Error::invalid("derivative: non-finite input"));
    }
    let accel = thrust_acceleration(x.phi, x.theta, u.thrust)?;
    let damping = Vector3::new(
        params.damping[0] * x.v.x,
        params.damping[1] * x.v.y,
        params.damping[2] * x.v.z,
    );
    Ok(StateDerivative {
        dp: x.v,
        dv: accel + Vector3::new(0.0, 0.0, -params.gravity) - damping,
        dphi: (params.k_phi * u.phi_d - x.phi) / params.tau_phi,
        dtheta: (params.k_theta * u.theta_d - x.theta) / params.tau_theta,
    })
}

/// One forward-Euler step: `x + dt * derivative(x, u)`, with the roll and
/// pitch angles wrapped back into `[-pi, pi]`.
pub fn euler_step(
    x: &VehicleState,
    u: &ControlInput,
    params: &VehicleParams,
    dt: f64,
) -> Result<VehicleState> {
    if !dt.is_finite() || dt < 0.0 {
        return Err(Error::invalid("euler_step: dt must be finite and >= 0"));
    }
    let d = derivative(x, u, params)?;
    Ok(VehicleState {
        p: x.p + dt * d.dp,
        v: x.v + dt * d.dv,
        phi: wrap_angle(x.phi + dt * d.dphi),
        theta: wrap_angle(x.theta + dt * d.dtheta),
    })
}
