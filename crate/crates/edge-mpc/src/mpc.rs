//! Receding-horizon controller.
//!
//! The controller predicts the vehicle over `N` forward-Euler steps, scores
//! the prediction with a quadratic cost (state deviation, deviation from the
//! hover input, and input-rate smoothness), and minimizes over the input
//! sequence with projected gradient descent under componentwise input bounds.
//!
//! The cost gradient is computed analytically by reverse accumulation through
//! the Euler rollout; the test suite checks it against central finite
//! differences.

use std::time::Instant;

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};

use crate::dynamics::{
    euler_step, ControlInput, VehicleParams, VehicleState, INPUT_DIM, STATE_DIM,
};
use crate::error::{Error, Result};

type StateVec = SVector<f64, STATE_DIM>;
type InputVec = SVector<f64, INPUT_DIM>;
type StateMat = SMatrix<f64, STATE_DIM, STATE_DIM>;
type StateInputMat = SMatrix<f64, STATE_DIM, INPUT_DIM>;

/// Quadratic cost weights. All three matrices must be symmetric positive
/// semidefinite; [`MpcWeights::validate`] enforces this at load time.
#[derive(Clone, Debug, PartialEq)]
pub struct MpcWeights {
    /// State deviation weights over `[p, v, phi, theta]`, 8x8.
    pub q_x: StateMat,
    /// Input deviation weights over `[T, phi_d, theta_d]`, 3x3.
    pub q_u: Matrix3<f64>,
    /// Input rate weights, 3x3.
    pub q_du: Matrix3<f64>,
}

impl Default for MpcWeights {
    fn default() -> Self {
        Self::diagonal(
            [8.0, 8.0, 8.0, 1.5, 1.5, 1.5, 5.0, 5.0],
            [2.0, 10.0, 10.0],
            [3.0, 20.0, 20.0],
        )
    }
}

impl MpcWeights {
    pub fn diagonal(q_x: [f64; STATE_DIM], q_u: [f64; INPUT_DIM], q_du: [f64; INPUT_DIM]) -> Self {
        Self {
            q_x: StateMat::from_diagonal(&StateVec::from(q_x)),
            q_u: Matrix3::from_diagonal(&Vector3::from(q_u)),
            q_du: Matrix3::from_diagonal(&Vector3::from(q_du)),
        }
    }

    pub fn zero() -> Self {
        Self {
            q_x: StateMat::zeros(),
            q_u: Matrix3::zeros(),
            q_du: Matrix3::zeros(),
        }
    }

    /// Check symmetry (to 1e-12) and positive semidefiniteness
    /// (eigenvalues >= -1e-10) of all three weight matrices.
    pub fn validate(&self) -> Result<()> {
        fn check_sym<const D: usize>(name: &str, m: &SMatrix<f64, D, D>) -> Result<()> {
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("{name}: non-finite entry")));
            }
            if (m - m.transpose()).amax() > 1e-12 {
                return Err(Error::invalid(format!("{name}: not symmetric")));
            }
            Ok(())
        }
        fn check_min_eig(name: &str, min_eig: f64) -> Result<()> {
            if min_eig < -1e-10 {
                return Err(Error::invalid(format!(
                    "{name}: not positive semidefinite (min eigenvalue {min_eig})"
                )));
            }
            Ok(())
        }
        check_sym("q_x", &self.q_x)?;
        check_sym("q_u", &self.q_u)?;
        check_sym("q_du", &self.q_du)?;
        check_min_eig("q_x", self.q_x.symmetric_eigenvalues().min())?;
        check_min_eig("q_u", self.q_u.symmetric_eigenvalues().min())?;
        check_min_eig("q_du", self.q_du.symmetric_eigenvalues().min())
    }
}

/// Horizon, sampling time, input box, and solver settings.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpcConfig {
    /// Prediction horizon, steps.
    pub horizon: usize,
    /// Sampling time, s.
    pub dt: f64,
    /// Componentwise lower input bounds `[T, phi_d, theta_d]`.
    pub input_lower: [f64; INPUT_DIM],
    /// Componentwise upper input bounds.
    pub input_upper: [f64; INPUT_DIM],
    /// Maximum projected-gradient iterations per solve.
    pub max_iterations: usize,
    /// Base gradient step size; halved while the cost would increase.
    pub step_size: f64,
    /// Terminate once the gradient norm drops below this.
    pub gradient_tolerance: f64,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 40,
            dt: 0.02,
            input_lower: [0.0, -0.4, -0.4],
            input_upper: [20.0, 0.4, 0.4],
            max_iterations: 200,
            step_size: 1e-3,
            gradient_tolerance: 1e-3,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon < 1 {
            return Err(Error::invalid("horizon must be >= 1"));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::invalid("dt must be finite and > 0"));
        }
        for i in 0..INPUT_DIM {
            if !(self.input_lower[i].is_finite() && self.input_upper[i].is_finite()) {
                return Err(Error::invalid("input bounds must be finite"));
            }
            if self.input_lower[i] > self.input_upper[i] {
                return Err(Error::invalid(format!(
                    "input bound {i}: lower {} > upper {}",
                    self.input_lower[i], self.input_upper[i]
                )));
            }
        }
        if self.input_lower[0] < 0.0 {
            return Err(Error::invalid("thrust lower bound must be >= 0"));
        }
        if self.max_iterations < 1 {
            return Err(Error::invalid("max_iterations must be >= 1"));
        }
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(Error::invalid("step_size must be finite and > 0"));
        }
        if !(self.gradient_tolerance.is_finite() && self.gradient_tolerance >= 0.0) {
            return Err(Error::invalid("gradient_tolerance must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Desired states over the horizon plus the steady-state input `[g, 0, 0]`.
///
/// The state list either has one entry per horizon step or a single entry
/// broadcast across the horizon.
#[derive(Clone, Debug, PartialEq)]
pub struct MpcReference {
    states: Vec<StateVec>,
    u_d: ControlInput,
}

impl MpcReference {
    /// Per-step desired states. `states` must have one entry or `horizon`
    /// entries; checked by the operations that consume the reference.
    pub fn new(states: Vec<StateVec>, gravity: f64) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::invalid("reference must contain at least one state"));
        }
        if states.iter().any(|s| s.iter().any(|c| !c.is_finite())) {
            return Err(Error::invalid("reference states must be finite"));
        }
        Ok(Self {
            states,
            u_d: ControlInput::hover(gravity),
        })
    }

    /// One desired state broadcast across the horizon.
    pub fn constant(state: &VehicleState, gravity: f64) -> Result<Self> {
        Self::new(vec![state.to_vector()], gravity)
    }

    pub fn from_states(states: &[VehicleState], gravity: f64) -> Result<Self> {
        Self::new(states.iter().map(|s| s.to_vector()).collect(), gravity)
    }

    pub fn u_d(&self) -> ControlInput {
        self.u_d
    }

    /// Desired state at horizon slot `i` (0-based), broadcasting a single
    /// entry.
    pub fn state_at(&self, i: usize) -> &StateVec {
        if self.states.len() == 1 {
            &self.states[0]
        } else {
            &self.states[i]
        }
    }

    fn check_horizon(&self, n: usize) -> Result<()> {
        if self.states.len() != 1 && self.states.len() != n {
            return Err(Error::invalid(format!(
                "reference has {} states but the horizon is {n}",
                self.states.len()
            )));
        }
        Ok(())
    }
}

/// Result of one receding-horizon solve.
#[derive(Clone, Debug)]
pub struct MpcSolution {
    /// Optimal input sequence over the horizon.
    pub u_seq: Vec<ControlInput>,
    /// First element of `u_seq`; the input the plant applies.
    pub first_input: ControlInput,
    /// Cost of the returned sequence.
    pub cost: f64,
    /// Gradient-descent iterations performed.
    pub iterations: usize,
    /// Gradient norm at exit.
    pub gradient_norm: f64,
    /// Wall-clock solve time, s.
    pub solve_time: f64,
}

/// Predict `N` states by repeated forward-Euler integration under `u_seq`.
///
/// Entry `j` is the state after `j + 1` steps from `x0`.
pub fn rollout(
    x0: &VehicleState,
    u_seq: &[ControlInput],
    params: &VehicleParams,
    config: &MpcConfig,
) -> Result<Vec<VehicleState>> {
    if u_seq.len() != config.horizon {
        return Err(Error::invalid(format!(
            "rollout: got {} inputs for horizon {}",
            u_seq.len(),
            config.horizon
        )));
    }
    let mut states = Vec::with_capacity(u_seq.len());
    let mut x = *x0;
    for u in u_seq {
        x = euler_step(&x, u, params, config.dt)?;
        states.push(x);
    }
    Ok(states)
}

fn input_vec(u: &ControlInput) -> InputVec {
    InputVec::from(u.to_array())
}

fn quad_form<const D: usize>(q: &SMatrix<f64, D, D>, e: &SVector<f64, D>) -> f64 {
    (q * e).dot(e)
}

fn cost_from_states(
    states: &[VehicleState],
    u_seq: &[ControlInput],
    reference: &MpcReference,
    weights: &MpcWeights,
    u_prev: &ControlInput,
) -> f64 {
    let u_d = input_vec(&reference.u_d);
    let mut total = 0.0;
    let mut prev = input_vec(u_prev);
    for (i, (x, u)) in states.iter().zip(u_seq).enumerate() {
        let e = reference.state_at(i) - x.to_vector();
        let ui = input_vec(u);
        total += quad_form(&weights.q_x, &e);
        total += quad_form(&weights.q_u, &(u_d - ui));
        total += quad_form(&weights.q_du, &(ui - prev));
        prev = ui;
    }
    total
}

/// Total cost of an input sequence from `x0`:
///
/// ```text
/// J = sum_{j=1..N}  (x_d - x_j)' Q_x (x_d - x_j)
///                 + (u_d - u_j)' Q_u (u_d - u_j)
///                 + (u_j - u_{j-1})' Q_du (u_j - u_{j-1})
/// ```
///
/// where the rate term at `j = 1` compares against `u_prev`, the input the
/// plant actually applied at the previous control step.
pub fn cost(
    x0: &VehicleState,
    u_seq: &[ControlInput],
    reference: &MpcReference,
    weights: &MpcWeights,
    params: &VehicleParams,
    config: &MpcConfig,
    u_prev: &ControlInput,
) -> Result<f64> {
    reference.check_horizon(config.horizon)?;
    if !u_prev.is_finite() {
        return Err(Error::invalid("cost: non-finite u_prev"));
    }
    let states = rollout(x0, u_seq, params, config)?;
    Ok(cost_from_states(&states, u_seq, reference, weights, u_prev))
}

/// Jacobian of one Euler step `F(x, u) = x + dt f(x, u)` with respect to the
/// state, evaluated at the pre-step state `x` and the applied input `u`.
fn step_jacobian_x(x: &VehicleState, u: &ControlInput, params: &VehicleParams, dt: f64) -> StateMat {
    let (sin_phi, cos_phi) = x.phi.sin_cos();
    let (sin_theta, cos_theta) = x.theta.sin_cos();
    let t = u.thrust;

    let mut a = StateMat::identity();
    // dp/dv
    for i in 0..3 {
        a[(i, 3 + i)] += dt;
    }
    // dv/dv: velocity damping
    for i in 0..3 {
        a[(3 + i, 3 + i)] -= dt * params.damping[i];
    }
    // dv/dphi and dv/dtheta: thrust direction sensitivity
    a[(3, 6)] += dt * (-t * sin_theta * sin_phi);
    a[(4, 6)] += dt * (-t * cos_phi);
    a[(5, 6)] += dt * (-t * cos_theta * sin_phi);
    a[(3, 7)] += dt * (t * cos_theta * cos_phi);
    a[(5, 7)] += dt * (-t * sin_theta * cos_phi);
    // attitude lags
    a[(6, 6)] -= dt / params.tau_phi;
    a[(7, 7)] -= dt / params.tau_theta;
    a
}

/// Jacobian of one Euler step with respect to the input, evaluated at the
/// pre-step state `x`.
fn step_jacobian_u(x: &VehicleState, params: &VehicleParams, dt: f64) -> StateInputMat {
    let (sin_phi, cos_phi) = x.phi.sin_cos();
    let (sin_theta, cos_theta) = x.theta.sin_cos();

    let mut b = StateInputMat::zeros();
    b[(3, 0)] = dt * sin_theta * cos_phi;
    b[(4, 0)] = dt * (-sin_phi);
    b[(5, 0)] = dt * cos_theta * cos_phi;
    b[(6, 1)] = dt * params.k_phi / params.tau_phi;
    b[(7, 2)] = dt * params.k_theta / params.tau_theta;
    b
}

/// Gradient of [`cost`] with respect to each input in the sequence, computed
/// by reverse accumulation through the Euler rollout.
pub fn cost_gradient(
    x0: &VehicleState,
    u_seq: &[ControlInput],
    reference: &MpcReference,
    weights: &MpcWeights,
    params: &VehicleParams,
    config: &MpcConfig,
    u_prev: &ControlInput,
) -> Result<Vec<Vector3<f64>>> {
    reference.check_horizon(config.horizon)?;
    if !u_prev.is_finite() {
        return Err(Error::invalid("cost_gradient: non-finite u_prev"));
    }
    let n = config.horizon;
    let states = rollout(x0, u_seq, params, config)?;
    let dt = config.dt;
    let u_d = input_vec(&reference.u_d);

    // Adjoint sweep: lambda_i = dJ/dx_i accumulated from the tail.
    let mut lambdas = vec![StateVec::zeros(); n];
    for i in (0..n).rev() {
        let e = reference.state_at(i) - states[i].to_vector();
        let mut lambda = -2.0 * (weights.q_x * e);
        if i + 1 < n {
            let a = step_jacobian_x(&states[i], &u_seq[i + 1], params, dt);
            lambda += a.transpose() * lambdas[i + 1];
        }
        lambdas[i] = lambda;
    }

    let mut grad = Vec::with_capacity(n);
    for i in 0..n {
        let pre_state = if i == 0 { x0 } else { &states[i - 1] };
        let b = step_jacobian_u(pre_state, params, dt);
        let ui = input_vec(&u_seq[i]);
        let prev = if i == 0 {
            input_vec(u_prev)
        } else {
            input_vec(&u_seq[i - 1])
        };
        let mut g: InputVec = b.transpose() * lambdas[i];
        g += -2.0 * (weights.q_u * (u_d - ui));
        g += 2.0 * (weights.q_du * (ui - prev));
        if i + 1 < n {
            let next = input_vec(&u_seq[i + 1]);
            g -= 2.0 * (weights.q_du * (next - ui));
        }
        grad.push(Vector3::new(g[0], g[1], g[2]));
    }
    Ok(grad)
}

/// Clamp every input componentwise into `[lower, upper]`. Idempotent.
pub fn project_inputs(
    u_seq: &[ControlInput],
    lower: &[f64; INPUT_DIM],
    upper: &[f64; INPUT_DIM],
) -> Vec<ControlInput> {
    u_seq
        .iter()
        .map(|u| {
            let a = u.to_array();
            ControlInput::from_array(&[
                a[0].clamp(lower[0], upper[0]),
                a[1].clamp(lower[1], upper[1]),
                a[2].clamp(lower[2], upper[2]),
            ])
        })
        .collect()
}

/// Receding-horizon warm start: drop the first input, repeat the last.
pub fn warm_shift(prev: &MpcSolution) -> Vec<ControlInput> {
    let mut shifted: Vec<ControlInput> = prev.u_seq[1..].to_vec();
    if let Some(&last) = prev.u_seq.last() {
        shifted.push(last);
    }
    shifted
}

fn grad_norm(grad: &[Vector3<f64>]) -> f64 {
    grad.iter().map(|g| g.norm_squared()).sum::<f64>().sqrt()
}

/// Parameter bundle for repeated solves. Stateless; callers keep the
/// previous [`MpcSolution`] and pass it back as the warm start.
#[derive(Clone, Debug)]
pub struct MpcController {
    pub params: VehicleParams,
    pub config: MpcConfig,
    pub weights: MpcWeights,
}

impl MpcController {
    pub fn new(params: VehicleParams, config: MpcConfig, weights: MpcWeights) -> Result<Self> {
        params.validate()?;
        config.validate()?;
        weights.validate()?;
        Ok(Self {
            params,
            config,
            weights,
        })
    }

    /// Minimize the horizon cost with projected gradient descent.
    ///
    /// Starts from the warm-shifted previous solution when one is given,
    /// otherwise from the steady-state input repeated. Each iteration takes a
    /// gradient step, halving the step size (up to 20 times) while the cost
    /// would increase; only non-increasing steps are accepted, so the
    /// returned cost never exceeds the cost of the initial iterate.
    pub fn solve(
        &self,
        x0: &VehicleState,
        reference: &MpcReference,
        warm_start: Option<&MpcSolution>,
        u_prev: &ControlInput,
    ) -> Result<MpcSolution> {
        let started = Instant::now();
        let n = self.config.horizon;
        reference.check_horizon(n)?;
        if (reference.u_d.thrust - self.params.gravity).abs() > 1e-9 {
            return Err(Error::invalid(
                "reference steady-state thrust must equal gravity",
            ));
        }

        let mut u = match warm_start {
            Some(prev) => {
                if prev.u_seq.len() != n {
                    return Err(Error::invalid(format!(
                        "warm start has {} inputs for horizon {n}",
                        prev.u_seq.len()
                    )));
                }
                warm_shift(prev)
            }
            None => vec![reference.u_d; n],
        };
        u = project_inputs(&u, &self.config.input_lower, &self.config.input_upper);

        let cost_of = |u: &[ControlInput]| {
            cost(
                x0,
                u,
                reference,
                &self.weights,
                &self.params,
                &self.config,
                u_prev,
            )
        };

        let mut current_cost = cost_of(&u)?;
        if !current_cost.is_finite() {
            return Err(Error::SolverDiverged { iterations: 0 });
        }
        let initial_cost = current_cost;

        let mut iterations = 0;
        let mut exit_grad_norm = f64::NAN;
        for it in 0..self.config.max_iterations {
            let grad = cost_gradient(
                x0,
                &u,
                reference,
                &self.weights,
                &self.params,
                &self.config,
                u_prev,
            )?;
            iterations = it + 1;
            exit_grad_norm = grad_norm(&grad);
            if exit_grad_norm <= self.config.gradient_tolerance {
                break;
            }

            let mut step = self.config.step_size;
            let mut accepted = None;
            for _ in 0..=20 {
                let candidate: Vec<ControlInput> = u
                    .iter()
                    .zip(&grad)
                    .map(|(ui, gi)| {
                        let a = ui.to_array();
                        ControlInput::from_array(&[
                            a[0] - step * gi[0],
                            a[1] - step * gi[1],
                            a[2] - step * gi[2],
                        ])
                    })
                    .collect();
                let candidate = project_inputs(
                    &candidate,
                    &self.config.input_lower,
                    &self.config.input_upper,
                );
                let candidate_cost = cost_of(&candidate)?;
                if !candidate_cost.is_finite() {
                    return Err(Error::SolverDiverged { iterations: it });
                }
                if candidate_cost <= current_cost {
                    accepted = Some((candidate, candidate_cost));
                    break;
                }
                step *= 0.5;
            }

            match accepted {
                Some((candidate, candidate_cost)) => {
                    let moved = candidate != u;
                    u = candidate;
                    current_cost = candidate_cost;
                    if !moved {
                        // Projection cancelled the whole step: the iterate is
                        // stationary for the box.
                        break;
                    }
                }
                None => break,
            }
        }

        debug_assert!(current_cost <= initial_cost);
        let first_input = u[0];
        Ok(MpcSolution {
            u_seq: u,
            first_input,
            cost: current_cost,
            iterations,
            gradient_norm: exit_grad_norm,
            solve_time: started.elapsed().as_secs_f64(),
        })
    }
}
