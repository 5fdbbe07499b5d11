//! The plant side: runs the vehicle in real time against a remote edge
//! controller, injecting uplink and downlink delays locally.
//!
//! Three logical tasks share the session: the tick loop (plant integration
//! and command application), a writer pumping delayed state messages onto
//! the socket, and a reader hoisting commands into the downlink hold. Since
//! the stamps come from wall clocks, the one-way figures in the resulting
//! report are exact only up to same-host clock agreement; negative readings
//! from stamp granularity are clamped to zero.

use std::net::TcpStream;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use super::codec::{read_message_timeout, write_message};
use super::{
    CommandMsg, FrameDecoder, Hello, Message, MpcSummary, ProtocolError, StateMsg, WallClock,
    PROTOCOL_VERSION, VERSION_MISMATCH_CODE,
};
use crate::channel::{DelayChannel, DelayModel};
use crate::config::{derive_stream_seed, RunConfig};
use crate::dynamics::{euler_step, ControlInput};
use crate::harness::euclidean_error;
use crate::report::{RunReport, StepLedger, StepRow};
use crate::trajectory::{sample, sample_horizon};

#[derive(Clone, Debug)]
pub struct FlyOptions {
    /// Edge address, e.g. `127.0.0.1:7501`.
    pub addr: String,
    /// How long to retry the initial connection.
    pub connect_timeout: Duration,
}

impl FlyOptions {
    pub fn new(addr: impl Into<String>) -> Self {
        Self {
            addr: addr.into(),
            connect_timeout: Duration::from_secs(2),
        }
    }
}

fn connect_with_retry(opts: &FlyOptions) -> Result<TcpStream, ProtocolError> {
    let deadline = Instant::now() + opts.connect_timeout;
    loop {
        match TcpStream::connect(&opts.addr) {
            Ok(stream) => return Ok(stream),
            Err(e) => {
                if Instant::now() >= deadline {
                    return Err(e.into());
                }
                std::thread::sleep(Duration::from_millis(50));
            }
        }
    }
}

/// Close the loop over TCP: run the plant at `1/dt` Hz against the edge at
/// `opts.addr` and log the run.
///
/// A lost connection aborts the run; the partial report comes back with its
/// `aborted` flag set.
pub fn fly(config: &RunConfig, opts: &FlyOptions) -> Result<RunReport, ProtocolError> {
    let mut stream = connect_with_retry(opts)?;
    stream.set_nodelay(true)?;

    // Handshake on the main thread, before the pumps spin up.
    write_message(
        &mut stream,
        &Message::Hello(Hello {
            protocol_version: PROTOCOL_VERSION,
            mpc: MpcSummary {
                horizon: config.mpc.horizon,
                dt: config.mpc.dt,
            },
            trajectory: config.trajectory,
        }),
    )?;
    let mut decoder = FrameDecoder::new();
    stream.set_read_timeout(Some(Duration::from_secs(5)))?;
    match read_message_timeout(&mut stream, &mut decoder)? {
        Some(Message::HelloAck(ack)) => {
            if ack.protocol_version != PROTOCOL_VERSION {
                return Err(ProtocolError::VersionMismatch {
                    ours: PROTOCOL_VERSION,
                    theirs: ack.protocol_version,
                });
            }
        }
        Some(Message::Error(e)) if e.code == VERSION_MISMATCH_CODE => {
            // The server told us which version it wanted in prose; the
            // numeric mismatch is what matters for the exit path.
            return Err(ProtocolError::VersionMismatch {
                ours: PROTOCOL_VERSION,
                theirs: u32::MAX,
            });
        }
        Some(Message::Error(e)) => {
            return Err(ProtocolError::Remote {
                code: e.code,
                message: e.message,
            })
        }
        Some(other) => {
            return Err(ProtocolError::Unexpected(format!(
                "expected hello_ack, got {other:?}"
            )))
        }
        None => {
            return Err(ProtocolError::Unexpected(
                "no hello_ack within 5s".to_string(),
            ))
        }
    }

    let clock = WallClock::start();
    let dt = config.mpc.dt;
    let steps = (config.duration / dt).round() as u64;

    // Local delay injection: states are held before hitting the socket,
    // commands are held after leaving it.
    let uplink = Arc::new(DelayChannel::<StateMsg>::new(DelayModel {
        seed: derive_stream_seed(config.seed, 1, config.uplink.seed),
        ..config.uplink
    })?);
    let downlink = Arc::new(DelayChannel::<CommandMsg>::new(DelayModel {
        seed: derive_stream_seed(config.seed, 2, config.downlink.seed),
        ..config.downlink
    })?);

    let shutdown = Arc::new(AtomicBool::new(false));
    let lost = Arc::new(AtomicBool::new(false));

    let writer = {
        let uplink = Arc::clone(&uplink);
        let shutdown = Arc::clone(&shutdown);
        let lost = Arc::clone(&lost);
        let mut stream = stream.try_clone()?;
        std::thread::spawn(move || {
            let clock = clock;
            loop {
                for msg in uplink.poll(clock.now()) {
                    if write_message(&mut stream, &Message::State(msg.payload)).is_err() {
                        lost.store(true, Ordering::SeqCst);
                        return;
                    }
                }
                if shutdown.load(Ordering::SeqCst) {
                    return;
                }
                std::thread::sleep(Duration::from_millis(1));
            }
        })
    };

    let reader = {
        let downlink = Arc::clone(&downlink);
        let shutdown = Arc::clone(&shutdown);
        let lost = Arc::clone(&lost);
        let mut stream = stream.try_clone()?;
        std::thread::spawn(move || {
            let clock = clock;
            let mut decoder = FrameDecoder::new();
            if stream
                .set_read_timeout(Some(Duration::from_millis(20)))
                .is_err()
            {
                lost.store(true, Ordering::SeqCst);
                return;
            }
            loop {
                match read_message_timeout(&mut stream, &mut decoder) {
                    Ok(Some(Message::Command(cmd))) => {
                        if downlink.send(cmd, clock.now()).is_err() {
                            return;
                        }
                    }
                    Ok(Some(other)) => {
                        log::warn!("ignoring unexpected mid-session message: {other:?}");
                    }
                    Ok(None) => {
                        if shutdown.load(Ordering::SeqCst) {
                            return;
                        }
                    }
                    Err(_) => {
                        lost.store(true, Ordering::SeqCst);
                        return;
                    }
                }
            }
        })
    };

    let mut report = RunReport::new(config.tolerance, config.transient_s);
    report.wall_clock = true;

    let mut x = config
        .start_state()
        .map_err(ProtocolError::Core)?;
    let hover = ControlInput::hover(config.vehicle.gravity);
    let mut u_applied = hover;
    let mut last_applied_seq: Option<u64> = None;
    // Measured delay chains keyed by state seq, attached to the rows at the
    // end; states whose commands never came back leave their rows bare.
    let mut ledgers: Vec<Option<StepLedger>> = vec![None; steps as usize];
    let t_wall0 = Instant::now();

    for k in 0..steps {
        let t_nominal = k as f64 * dt;
        // Pace the loop against the wall clock.
        let target = Duration::from_secs_f64(t_nominal);
        let elapsed = t_wall0.elapsed();
        if target > elapsed {
            std::thread::sleep(target - elapsed);
        }

        if lost.load(Ordering::SeqCst) {
            log::error!("connection lost at t={t_nominal}; aborting with a partial log");
            report.aborted = true;
            break;
        }

        // Emit the state with the horizon's reference window attached.
        let window: Vec<[f64; 8]> =
            sample_horizon(&config.trajectory, t_nominal, config.mpc.horizon, dt)?
                .iter()
                .map(|p| p.state.to_array())
                .collect();
        uplink.send(
            StateMsg {
                seq: k,
                t_plant: clock.now(),
                x: x.to_array(),
                ref_window: Some(window),
            },
            clock.now(),
        )?;

        // Record the measured chain of every command released by the hold,
        // then apply the freshest non-stale one.
        let mut row_flagged = false;
        let released = downlink.poll(clock.now());
        let t_recv = clock.now();
        for msg in &released {
            let cmd = msg.payload;
            if (cmd.seq as usize) < ledgers.len() && ledgers[cmd.seq as usize].is_none() {
                // One-way stamps are same-host comparable; clamp the
                // residual granularity noise at zero.
                let d1 = (cmd.t_edge_in - cmd.t_plant_echo).max(0.0);
                let exec = (cmd.t_edge_out - cmd.t_edge_in).max(0.0);
                let downlink_leg = (t_recv - cmd.t_edge_out).max(0.0);
                ledgers[cmd.seq as usize] = Some(StepLedger {
                    d1,
                    exec,
                    downlink: downlink_leg,
                    d2: d1 + exec,
                    d3: d1 + exec + downlink_leg,
                    solve_ms: exec * 1e3,
                });
            }
        }
        if let Some(msg) = released
            .iter()
            .filter(|m| last_applied_seq.map_or(true, |last| m.payload.seq > last))
            .max_by_key(|m| m.payload.seq)
        {
            let cmd = msg.payload;
            u_applied = ControlInput::from_array(&cmd.u);
            last_applied_seq = Some(cmd.seq);
            row_flagged = cmd.solver_error;
        }

        let ref_now = sample(&config.trajectory, t_nominal)?;
        let error = euclidean_error(&x.p, &ref_now.state.p);
        report.rows.push(StepRow {
            t: t_nominal,
            state: x.to_array(),
            reference: ref_now.state.to_array(),
            input: u_applied.to_array(),
            flagged: row_flagged,
            error,
            in_tolerance: error <= config.tolerance,
            ledger: None,
        });

        let sub_dt = dt / config.plant_substeps as f64;
        for _ in 0..config.plant_substeps {
            x = euler_step(&x, &u_applied, &config.vehicle, sub_dt)
                .map_err(ProtocolError::Core)?;
        }
    }

    shutdown.store(true, Ordering::SeqCst);
    let _ = writer.join();
    let _ = stream.shutdown(std::net::Shutdown::Both);
    let _ = reader.join();

    for (row, ledger) in report.rows.iter_mut().zip(ledgers) {
        row.ledger = ledger;
    }

    Ok(report)
}
