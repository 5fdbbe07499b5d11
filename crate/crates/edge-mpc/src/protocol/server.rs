//! The edge side: a TCP server hosting the controller for one session.

use std::net::{SocketAddr, TcpListener, TcpStream};

use super::codec::{read_message, write_message};
use super::{
    CommandMsg, ErrorMsg, FrameDecoder, HelloAck, Message, ProtocolError, WallClock,
    PROTOCOL_VERSION, VERSION_MISMATCH_CODE,
};
use crate::config::RunConfig;
use crate::dynamics::{ControlInput, VehicleState};
use crate::error::Error;
use crate::mpc::{MpcController, MpcReference, MpcSolution};
use crate::trajectory::{sample_horizon, TrajectorySpec};

/// Counters from one completed session.
#[derive(Clone, Copy, Debug, Default)]
pub struct SessionStats {
    pub states_handled: u64,
    pub solver_failures: u64,
}

/// Edge controller service bound to a local address.
pub struct EdgeServer {
    listener: TcpListener,
}

impl EdgeServer {
    /// Bind to `addr` (use port 0 for an ephemeral port).
    pub fn bind(addr: &str) -> std::io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        Ok(Self { listener })
    }

    pub fn local_addr(&self) -> std::io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    /// Accept one connection and run the session until the peer disconnects.
    ///
    /// Every `state` message is answered by one `command` echoing its
    /// sequence number. If the solver diverges, the reply carries the
    /// previous safe input with the error flag set.
    pub fn serve_once(&self, config: &RunConfig) -> Result<SessionStats, ProtocolError> {
        let (mut stream, peer) = self.listener.accept()?;
        stream.set_nodelay(true)?;
        log::info!("session from {peer}");
        match self.run_session(&mut stream, config) {
            Ok(stats) => Ok(stats),
            Err(e) => {
                // Best effort: tell the peer why the session died.
                let (code, message) = match &e {
                    ProtocolError::VersionMismatch { ours, theirs } => (
                        VERSION_MISMATCH_CODE,
                        format!("server speaks version {ours}, client sent {theirs}"),
                    ),
                    other => ("protocol_error", other.to_string()),
                };
                let _ = write_message(
                    &mut stream,
                    &Message::Error(ErrorMsg {
                        code: code.to_string(),
                        message,
                    }),
                );
                Err(e)
            }
        }
    }

    fn run_session(
        &self,
        stream: &mut TcpStream,
        config: &RunConfig,
    ) -> Result<SessionStats, ProtocolError> {
        let clock = WallClock::start();
        let mut decoder = FrameDecoder::new();

        let hello = match read_message(stream, &mut decoder)? {
            Message::Hello(h) => h,
            other => {
                return Err(ProtocolError::Unexpected(format!(
                    "expected hello, got {other:?}"
                )))
            }
        };
        if hello.protocol_version != PROTOCOL_VERSION {
            return Err(ProtocolError::VersionMismatch {
                ours: PROTOCOL_VERSION,
                theirs: hello.protocol_version,
            });
        }
        if hello.mpc.horizon != config.mpc.horizon || hello.mpc.dt != config.mpc.dt {
            log::warn!(
                "client mpc summary ({} steps at {}s) differs from ours ({} at {}s)",
                hello.mpc.horizon,
                hello.mpc.dt,
                config.mpc.horizon,
                config.mpc.dt
            );
        }
        write_message(
            stream,
            &Message::HelloAck(HelloAck {
                protocol_version: PROTOCOL_VERSION,
            }),
        )?;

        let controller =
            MpcController::new(config.vehicle, config.mpc, config.weights.clone())?;
        // States without a reference window fall back to the trajectory
        // announced in the hello, timed relative to the first state sample.
        let trajectory: TrajectorySpec = hello.trajectory;
        let mut session_t0: Option<f64> = None;

        let hover = ControlInput::hover(config.vehicle.gravity);
        let mut warm: Option<MpcSolution> = None;
        // The plant's true applied input is not on the wire; the previous
        // commanded input stands in for the smoothness anchor.
        let mut u_prev = hover;
        let mut last_safe = hover;
        let mut stats = SessionStats::default();

        loop {
            let state_msg = match read_message(stream, &mut decoder) {
                Ok(Message::State(s)) => s,
                Ok(Message::Error(e)) => {
                    return Err(ProtocolError::Remote {
                        code: e.code,
                        message: e.message,
                    })
                }
                Ok(other) => {
                    return Err(ProtocolError::Unexpected(format!(
                        "expected state, got {other:?}"
                    )))
                }
                Err(ProtocolError::Closed) => break,
                Err(e) => return Err(e),
            };
            let t_edge_in = clock.now();

            let reference = match &state_msg.ref_window {
                Some(window) => {
                    if window.len() != config.mpc.horizon {
                        return Err(ProtocolError::Malformed(format!(
                            "reference window has {} states, horizon is {}",
                            window.len(),
                            config.mpc.horizon
                        )));
                    }
                    let states: Vec<VehicleState> =
                        window.iter().map(VehicleState::from_array).collect();
                    MpcReference::from_states(&states, config.vehicle.gravity)
                        .map_err(|e| ProtocolError::Malformed(e.to_string()))?
                }
                None => {
                    let t0 = *session_t0.get_or_insert(state_msg.t_plant);
                    let t_rel = (state_msg.t_plant - t0).clamp(0.0, trajectory.duration);
                    let points = sample_horizon(
                        &trajectory,
                        t_rel,
                        config.mpc.horizon,
                        config.mpc.dt,
                    )?;
                    let states: Vec<VehicleState> = points.iter().map(|p| p.state).collect();
                    MpcReference::from_states(&states, config.vehicle.gravity)?
                }
            };

            let x = VehicleState::from_array(&state_msg.x);
            let (u, solver_error) = match controller.solve(&x, &reference, warm.as_ref(), &u_prev)
            {
                Ok(solution) => {
                    let u = solution.first_input;
                    warm = Some(solution);
                    last_safe = u;
                    (u, false)
                }
                Err(Error::SolverDiverged { .. }) => {
                    log::warn!("solver diverged on seq {}", state_msg.seq);
                    stats.solver_failures += 1;
                    warm = None;
                    (last_safe, true)
                }
                Err(e) => return Err(e.into()),
            };
            u_prev = u;
            stats.states_handled += 1;

            write_message(
                stream,
                &Message::Command(CommandMsg {
                    seq: state_msg.seq,
                    t_plant_echo: state_msg.t_plant,
                    t_edge_in,
                    t_edge_out: clock.now(),
                    u: u.to_array(),
                    solver_error,
                }),
            )?;
        }

        log::info!(
            "session closed: {} states handled, {} solver failures",
            stats.states_handled,
            stats.solver_failures
        );
        Ok(stats)
    }
}
