//! Server and reader state machines over any frame transport.
//!
//! Message flow for `R` readers and `T` rounds:
//!
//! 1. every reader sends `StartRound(0)` carrying its training-set size;
//! 2. the server sends `BootstrapWeights(0)` with the initial weights to the
//!    lowest reader id, which trains and replies `BootstrapWeights(0)`;
//! 3. the server broadcasts those weights as `Weights(0)`;
//! 4. for each round `t`: `StartRound(t)` to all, one `Weights(t)` from each
//!    reader, then the average as `Weights(t)` to all;
//! 5. `Shutdown`.

use std::io::{Read, Write};
use std::sync::mpsc::{channel, Receiver, Sender};

use super::reader::ReaderClient;
use super::wire::{decode_frame, encode_frame, read_frame, Frame, PayloadKind, ALL_READERS};
use super::{federated_average, AggregationPolicy, Contribution, FedError};
use crate::neuralnet::{decode_checkpoint, encode_checkpoint, ArchConfig, Network};

pub trait Transport {
    /// Sends one frame, returning the bytes put on the wire.
    fn send(&mut self, frame: &Frame) -> Result<usize, FedError>;
    fn recv(&mut self) -> Result<Frame, FedError>;
}

impl<T: Transport + ?Sized> Transport for &mut T {
    fn send(&mut self, frame: &Frame) -> Result<usize, FedError> {
        (**self).send(frame)
    }

    fn recv(&mut self) -> Result<Frame, FedError> {
        (**self).recv()
    }
}

/// Frames over a byte stream such as a `TcpStream`.
#[derive(Debug)]
pub struct StreamTransport<S> {
    stream: S,
}

impl<S: Read + Write> StreamTransport<S> {
    pub fn new(stream: S) -> Self {
        Self { stream }
    }

    pub fn into_inner(self) -> S {
        self.stream
    }
}

impl<S: Read + Write> Transport for StreamTransport<S> {
    fn send(&mut self, frame: &Frame) -> Result<usize, FedError> {
        let bytes = encode_frame(frame);
        self.stream.write_all(&bytes)?;
        self.stream.flush()?;
        Ok(bytes.len())
    }

    fn recv(&mut self) -> Result<Frame, FedError> {
        read_frame(&mut self.stream)
    }
}

/// In-process transport: encoded frames over a pair of queues.
#[derive(Debug)]
pub struct ChannelTransport {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
}

/// Two connected endpoints.
pub fn channel_pair() -> (ChannelTransport, ChannelTransport) {
    let (a_tx, b_rx) = channel();
    let (b_tx, a_rx) = channel();
    (ChannelTransport { tx: a_tx, rx: a_rx }, ChannelTransport { tx: b_tx, rx: b_rx })
}

impl ChannelTransport {
    /// Sends raw bytes, bypassing framing.
    pub fn send_raw(&mut self, bytes: Vec<u8>) -> Result<(), FedError> {
        self.tx
            .send(bytes)
            .map_err(|_| FedError::Io(std::io::ErrorKind::BrokenPipe.into()))
    }
}

impl Transport for ChannelTransport {
    fn send(&mut self, frame: &Frame) -> Result<usize, FedError> {
        let bytes = encode_frame(frame);
        let n = bytes.len();
        self.send_raw(bytes)?;
        Ok(n)
    }

    fn recv(&mut self) -> Result<Frame, FedError> {
        let bytes = self
            .rx
            .recv()
            .map_err(|_| FedError::Io(std::io::ErrorKind::UnexpectedEof.into()))?;
        decode_frame(&bytes)
    }
}

fn decode_weights(payload: &[u8], arch: &ArchConfig) -> Result<Vec<f32>, FedError> {
    let (found, params) = decode_checkpoint(payload)?;
    if &found != arch {
        return Err(FedError::Unexpected(format!(
            "weights for architecture {found:?}, expected {arch:?}"
        )));
    }
    let flat = params.concat();
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(FedError::Malformed("non-finite weights".into()));
    }
    Ok(flat)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerConfig {
    pub arch: ArchConfig,
    pub rounds: u32,
    pub local_epochs: u32,
    pub bootstrap_epochs: u32,
    pub policy: AggregationPolicy,
    /// Seed of the initial weights.
    pub model_seed: u64,
}

/// A reader connection that has completed the join handshake.
#[derive(Debug)]
pub struct Session<T> {
    pub reader_id: u32,
    pub example_count: u64,
    pub conn: T,
}

/// Reads and checks a reader's join message.
pub fn handshake<T: Transport>(mut conn: T) -> Result<Session<T>, FedError> {
    let hello = conn.recv()?;
    if hello.kind != PayloadKind::StartRound || hello.round != 0 || hello.reader_id == ALL_READERS {
        return Err(FedError::Unexpected(format!(
            "join message must be StartRound(0) from a reader, got {:?}({}) from {}",
            hello.kind, hello.round, hello.reader_id
        )));
    }
    Ok(Session {
        reader_id: hello.reader_id,
        example_count: hello.example_count,
        conn,
    })
}

/// Bytes moved in one round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RoundTraffic {
    pub round: u32,
    /// Weight frames from readers to the server.
    pub upload_bytes: u64,
    /// Weight frames from the server to readers.
    pub download_bytes: u64,
    pub control_bytes: u64,
}

#[derive(Debug, Clone)]
pub struct ServerReport {
    pub final_weights: Network<f32>,
    /// Round 0 is the bootstrap.
    pub traffic: Vec<RoundTraffic>,
    pub reader_ids: Vec<u32>,
}

fn lost<T>(s: &Session<T>, round: u32, err: FedError) -> FedError {
    match err {
        FedError::Io(e) => {
            log::error!("reader {} lost in round {round}: {e}", s.reader_id);
            FedError::ReaderLost {
                reader_id: s.reader_id,
                round,
            }
        }
        e => e,
    }
}

fn send_to<T: Transport>(s: &mut Session<T>, round: u32, frame: &Frame) -> Result<u64, FedError> {
    match s.conn.send(frame) {
        Ok(n) => Ok(n as u64),
        Err(e) => Err(lost(s, round, e)),
    }
}

fn recv_from<T: Transport>(s: &mut Session<T>, round: u32) -> Result<Frame, FedError> {
    s.conn.recv().map_err(|e| lost(s, round, e))
}

fn expect_weights<T: Transport>(
    s: &mut Session<T>,
    kind: PayloadKind,
    round: u32,
    arch: &ArchConfig,
) -> Result<(Frame, Vec<f32>), FedError> {
    let f = recv_from(s, round)?;
    if f.kind != kind || f.round != round || f.reader_id != s.reader_id {
        return Err(FedError::Unexpected(format!(
            "expected {kind:?}({round}) from reader {}, got {:?}({}) from {}",
            s.reader_id, f.kind, f.round, f.reader_id
        )));
    }
    let w = decode_weights(&f.payload, arch)?;
    Ok((f, w))
}

/// Drives a whole federated run over `sessions`.
pub fn run_server<T: Transport>(mut sessions: Vec<Session<T>>, cfg: &ServerConfig) -> Result<ServerReport, FedError> {
    if sessions.is_empty() {
        return Err(FedError::InvalidConfig("no readers".into()));
    }
    sessions.sort_by_key(|s| s.reader_id);
    if let Some(w) = sessions.windows(2).find(|w| w[0].reader_id == w[1].reader_id) {
        return Err(FedError::InvalidConfig(format!("reader id {} joined twice", w[0].reader_id)));
    }
    if cfg.policy == AggregationPolicy::DataWeighted {
        if let Some(s) = sessions.iter().find(|s| s.example_count == 0) {
            return Err(FedError::ZeroCount { reader_id: s.reader_id });
        }
    }
    let arch = &cfg.arch;
    let mut traffic = Vec::with_capacity(cfg.rounds as usize + 1);

    let init: Network<f32> = Network::init(arch, cfg.model_seed)?;
    let mut scratch = init.clone();
    let mut t0 = RoundTraffic::default();
    let first = &mut sessions[0];
    t0.download_bytes += send_to(first, 0, &Frame {
        kind: PayloadKind::BootstrapWeights,
        round: 0,
        reader_id: first.reader_id,
        example_count: u64::from(cfg.bootstrap_epochs),
        payload: encode_checkpoint(&init),
    })?;
    let (reply, mut global) = expect_weights(first, PayloadKind::BootstrapWeights, 0, arch)?;
    t0.upload_bytes += reply.wire_len() as u64;
    let mut payload = reply.payload;
    for s in sessions.iter_mut() {
        t0.download_bytes += send_to(s, 0, &Frame {
            kind: PayloadKind::Weights,
            round: 0,
            reader_id: ALL_READERS,
            example_count: 0,
            payload: payload.clone(),
        })?;
    }
    traffic.push(t0);

    for round in 1..=cfg.rounds {
        let mut t = RoundTraffic {
            round,
            ..Default::default()
        };
        for s in sessions.iter_mut() {
            let start = Frame::control(PayloadKind::StartRound, round, ALL_READERS, u64::from(cfg.local_epochs));
            t.control_bytes += send_to(s, round, &start)?;
        }
        let mut received = Vec::with_capacity(sessions.len());
        for s in sessions.iter_mut() {
            let (f, w) = expect_weights(s, PayloadKind::Weights, round, arch)?;
            t.upload_bytes += f.wire_len() as u64;
            received.push((s.reader_id, f.example_count, w));
        }
        let contribs: Vec<Contribution<'_>> = received
            .iter()
            .map(|(id, n, w)| Contribution {
                reader_id: *id,
                weights: w,
                example_count: *n,
            })
            .collect();
        global = federated_average(&contribs, cfg.policy)?;
        scratch.set_flat_params(&global)?;
        payload = encode_checkpoint(&scratch);
        for s in sessions.iter_mut() {
            t.download_bytes += send_to(s, round, &Frame {
                kind: PayloadKind::Weights,
                round,
                reader_id: ALL_READERS,
                example_count: 0,
                payload: payload.clone(),
            })?;
        }
        log::info!(
            "round {round}: {} bytes up, {} bytes down",
            t.upload_bytes,
            t.download_bytes
        );
        traffic.push(t);
    }
    for s in sessions.iter_mut() {
        send_to(s, cfg.rounds, &Frame::control(PayloadKind::Shutdown, cfg.rounds, ALL_READERS, 0))?;
    }
    scratch.set_flat_params(&global)?;
    Ok(ServerReport {
        final_weights: scratch,
        traffic,
        reader_ids: sessions.iter().map(|s| s.reader_id).collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientReport {
    pub rounds_trained: u32,
    /// Checkpoint bytes of the final synchronised weights.
    pub final_checkpoint: Vec<u8>,
}

/// Runs one reader until the server shuts the session down.
pub fn run_client<T: Transport>(conn: &mut T, reader: &mut ReaderClient) -> Result<ClientReport, FedError> {
    let arch = reader.model.arch().clone();
    let id = reader.reader_id;
    conn.send(&Frame::control(PayloadKind::StartRound, 0, id, reader.example_count()))?;
    let mut last_start = 0u32;
    let mut rounds_trained = 0u32;
    loop {
        let f = conn.recv()?;
        if f.round < last_start {
            return Err(FedError::Unexpected(format!(
                "{:?} for round {} after round {last_start} started",
                f.kind, f.round
            )));
        }
        match f.kind {
            PayloadKind::BootstrapWeights if f.reader_id == id && f.round == 0 => {
                let w = decode_weights(&f.payload, &arch)?;
                reader.install(&w)?;
                reader.train_local(f.example_count)?;
                conn.send(&Frame {
                    kind: PayloadKind::BootstrapWeights,
                    round: 0,
                    reader_id: id,
                    example_count: reader.example_count(),
                    payload: encode_checkpoint(reader.network()),
                })?;
            }
            PayloadKind::Weights if f.reader_id == ALL_READERS => {
                let w = decode_weights(&f.payload, &arch)?;
                reader.install(&w)?;
            }
            PayloadKind::StartRound if f.reader_id == ALL_READERS && f.round > last_start => {
                last_start = f.round;
                reader.train_local(f.example_count)?;
                rounds_trained += 1;
                conn.send(&Frame {
                    kind: PayloadKind::Weights,
                    round: f.round,
                    reader_id: id,
                    example_count: reader.example_count(),
                    payload: encode_checkpoint(reader.network()),
                })?;
            }
            PayloadKind::Shutdown => {
                return Ok(ClientReport {
                    rounds_trained,
                    final_checkpoint: encode_checkpoint(reader.network()),
                });
            }
            other => {
                return Err(FedError::Unexpected(format!(
                    "{other:?}({}) addressed to {} at reader {id}",
                    f.round, f.reader_id
                )))
            }
        }
    }
}
