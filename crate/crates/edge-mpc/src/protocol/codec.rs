//! Length-prefixed JSON framing.

use std::io::{Read, Write};
use std::net::TcpStream;

use super::{Message, ProtocolError};

/// Hard cap on a frame body. A 100-step reference window is ~20 KiB of JSON;
/// anything near the cap is garbage or abuse.
pub const MAX_FRAME_LEN: usize = 1 << 20;

/// Serialize a message as `[u32 big-endian length][JSON body]`.
pub fn encode(msg: &Message) -> Result<Vec<u8>, ProtocolError> {
    let body = serde_json::to_vec(msg).map_err(|e| ProtocolError::Malformed(e.to_string()))?;
    if body.len() > MAX_FRAME_LEN {
        return Err(ProtocolError::FrameTooLarge {
            len: body.len(),
            max: MAX_FRAME_LEN,
        });
    }
    let mut out = Vec::with_capacity(4 + body.len());
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    Ok(out)
}

/// Incremental decoder over a byte stream. Feed arbitrary chunks with
/// [`FrameDecoder::push`]; [`FrameDecoder::next_message`] yields `Ok(None)`
/// until a full frame is buffered.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Decode the next complete frame, if any. Malformed input is an error;
    /// an incomplete frame is `Ok(None)` (more bytes needed).
    pub fn next_message(&mut self) -> Result<Option<Message>, ProtocolError> {
        if self.buf.len() < 4 {
            return Ok(None);
        }
        let len = u32::from_be_bytes([self.buf[0], self.buf[1], self.buf[2], self.buf[3]]) as usize;
        if len == 0 {
            return Err(ProtocolError::Malformed("empty payload".into()));
        }
        if len > MAX_FRAME_LEN {
            return Err(ProtocolError::FrameTooLarge {
                len,
                max: MAX_FRAME_LEN,
            });
        }
        if self.buf.len() < 4 + len {
            return Ok(None);
        }
        let msg = serde_json::from_slice::<Message>(&self.buf[4..4 + len])
            .map_err(|e| ProtocolError::Malformed(e.to_string()));
        self.buf.drain(..4 + len);
        msg.map(Some)
    }
}

/// Write one frame to a stream.
pub(crate) fn write_message(stream: &mut TcpStream, msg: &Message) -> Result<(), ProtocolError> {
    let frame = encode(msg)?;
    stream.write_all(&frame)?;
    Ok(())
}

/// Read until one full frame is available. `Err(Closed)` on EOF.
pub(crate) fn read_message(
    stream: &mut TcpStream,
    decoder: &mut FrameDecoder,
) -> Result<Message, ProtocolError> {
    loop {
        if let Some(msg) = decoder.next_message()? {
            return Ok(msg);
        }
        let mut chunk = [0u8; 4096];
        let n = stream.read(&mut chunk)?;
        if n == 0 {
            return Err(ProtocolError::Closed);
        }
        decoder.push(&chunk[..n]);
    }
}

/// Like [`read_message`] but treats a read timeout as `Ok(None)` so callers
/// can poll a shutdown flag.
pub(crate) fn read_message_timeout(
    stream: &mut TcpStream,
    decoder: &mut FrameDecoder,
) -> Result<Option<Message>, ProtocolError> {
    loop {
        if let Some(msg) = decoder.next_message()? {
            return Ok(Some(msg));
        }
        let mut chunk = [0u8; 4096];
        match stream.read(&mut chunk) {
            Ok(0) => return Err(ProtocolError::Closed),
            Ok(n) => decoder.push(&chunk[..n]),
            Err(e)
                if e.kind() == std::io::ErrorKind::WouldBlock
                    || e.kind() == std::io::ErrorKind::TimedOut =>
            {
                return Ok(None)
            }
            Err(e) => return Err(e.into()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::{CommandMsg, Hello, HelloAck, MpcSummary, StateMsg};
    use super::*;
    use crate::trajectory::TrajectorySpec;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn state_msg(rng: &mut StdRng) -> Message {
        let mut x = [0.0; 8];
        for v in &mut x {
            *v = rng.gen_range(-10.0..10.0);
        }
        let ref_window = rng.gen_bool(0.5).then(|| {
            (0..rng.gen_range(1..20))
                .map(|_| {
                    let mut r = [0.0; 8];
                    for v in &mut r {
                        *v = rng.gen_range(-10.0..10.0);
                    }
                    r
                })
                .collect()
        });
        Message::State(StateMsg {
            seq: rng.gen(),
            t_plant: rng.gen_range(0.0..1e9),
            x,
            ref_window,
        })
    }

    fn command_msg(rng: &mut StdRng) -> Message {
        Message::Command(CommandMsg {
            seq: rng.gen(),
            t_plant_echo: rng.gen_range(0.0..1e9),
            t_edge_in: rng.gen_range(0.0..1e9),
            t_edge_out: rng.gen_range(0.0..1e9),
            u: [
                rng.gen_range(0.0..20.0),
                rng.gen_range(-0.4..0.4),
                rng.gen_range(-0.4..0.4),
            ],
            solver_error: rng.gen_bool(0.1),
        })
    }

    fn hello_msg(rng: &mut StdRng) -> Message {
        Message::Hello(Hello {
            protocol_version: rng.gen_range(0..5),
            mpc: MpcSummary {
                horizon: rng.gen_range(1..200),
                dt: rng.gen_range(0.001..0.1),
            },
            trajectory: TrajectorySpec::default(),
        })
    }

    fn roundtrip(msg: &Message) {
        let bytes = encode(msg).unwrap();
        let mut dec = FrameDecoder::new();
        dec.push(&bytes);
        let back = dec.next_message().unwrap().unwrap();
        assert_eq!(&back, msg);
        assert!(dec.next_message().unwrap().is_none());
    }

    #[test]
    fn roundtrip_zero_state() {
        roundtrip(&Message::State(StateMsg {
            seq: 0,
            t_plant: 0.0,
            x: [0.0; 8],
            ref_window: None,
        }));
    }

    #[test]
    fn roundtrip_randomized_messages() {
        let mut rng = StdRng::seed_from_u64(314);
        for _ in 0..200 {
            roundtrip(&state_msg(&mut rng));
            roundtrip(&command_msg(&mut rng));
            roundtrip(&hello_msg(&mut rng));
            roundtrip(&Message::HelloAck(HelloAck {
                protocol_version: rng.gen_range(0..5),
            }));
            roundtrip(&Message::Error(super::super::ErrorMsg {
                code: format!("code-{}", rng.gen_range(0..10)),
                message: "m".repeat(rng.gen_range(0..64)),
            }));
        }
    }

    #[test]
    fn frame_split_byte_by_byte_decodes_identically() {
        let mut rng = StdRng::seed_from_u64(99);
        let msg = state_msg(&mut rng);
        let bytes = encode(&msg).unwrap();
        let mut dec = FrameDecoder::new();
        dec.push(&bytes[..1]);
        assert!(dec.next_message().unwrap().is_none());
        dec.push(&bytes[1..]);
        assert_eq!(dec.next_message().unwrap().unwrap(), msg);

        // Arbitrary resegmentation of two frames.
        let msg2 = command_msg(&mut rng);
        let mut all = encode(&msg).unwrap();
        all.extend(encode(&msg2).unwrap());
        for chunk_len in [1usize, 2, 3, 7, 16, 64] {
            let mut dec = FrameDecoder::new();
            let mut got = Vec::new();
            for chunk in all.chunks(chunk_len) {
                dec.push(chunk);
                while let Some(m) = dec.next_message().unwrap() {
                    got.push(m);
                }
            }
            assert_eq!(got, vec![msg.clone(), msg2.clone()]);
        }
    }

    #[test]
    fn empty_payload_rejected() {
        let mut dec = FrameDecoder::new();
        dec.push(&0u32.to_be_bytes());
        assert!(matches!(
            dec.next_message(),
            Err(ProtocolError::Malformed(_))
        ));
    }

    #[test]
    fn unknown_type_rejected() {
        let body = br#"{"type":"warp_drive","seq":1}"#;
        let mut frame = (body.len() as u32).to_be_bytes().to_vec();
        frame.extend_from_slice(body);
        let mut dec = FrameDecoder::new();
        dec.push(&frame);
        assert!(matches!(
            dec.next_message(),
            Err(ProtocolError::Malformed(_))
        ));
    }

    #[test]
    fn oversized_length_prefix_rejected() {
        let mut dec = FrameDecoder::new();
        dec.push(&(MAX_FRAME_LEN as u32 + 1).to_be_bytes());
        assert!(matches!(
            dec.next_message(),
            Err(ProtocolError::FrameTooLarge { .. })
        ));
    }

    #[test]
    fn byte_fuzz_never_panics() {
        let mut rng = StdRng::seed_from_u64(4242);
        for _ in 0..1000 {
            let len = rng.gen_range(0..512);
            let bytes: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
            let mut dec = FrameDecoder::new();
            dec.push(&bytes);
            // Drain until the decoder errors or wants more bytes.
            loop {
                match dec.next_message() {
                    Ok(Some(_)) => continue,
                    Ok(None) | Err(_) => break,
                }
            }
        }
    }

    #[test]
    fn mutated_valid_frames_never_panic() {
        let mut rng = StdRng::seed_from_u64(777);
        for _ in 0..1000 {
            let mut bytes = encode(&state_msg(&mut rng)).unwrap();
            let flips = rng.gen_range(1..8);
            for _ in 0..flips {
                let i = rng.gen_range(0..bytes.len());
                bytes[i] = rng.gen();
            }
            let mut dec = FrameDecoder::new();
            dec.push(&bytes);
            loop {
                match dec.next_message() {
                    Ok(Some(_)) => continue,
                    Ok(None) | Err(_) => break,
                }
            }
        }
    }
}
