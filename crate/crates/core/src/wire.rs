//! Streaming policy server and controller client over a TCP stream.
//!
//! Frames are `u32 length | u8 type | payload`, little-endian, with `length`
//! counting the type byte plus the payload. The server answers each
//! observation either with one packet per finalized action followed by
//! `CHUNK_DONE` (streaming) or with a single `CHUNK_BULK` after all sampler
//! steps (constant baseline).

use std::collections::HashMap;
use std::io::{ErrorKind, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering as AtomicOrdering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{sample_target, EnvConfig, ExecutedAction, JumpEvent, WorldState, ACTION_DIM, OBS_DIM};
use crate::flow::{sample_constant, sample_with_hit_times, VelocityField};
use crate::pipeline::{delay_and_smin, measure_reactions, ChunkShape, ClientMode, EventSpec, RunTrace, Stall, TimingModel};
use crate::schedule::HasParams;
use crate::{Error, Result};

pub const PROTOCOL_VERSION: u8 = 1;
/// Upper bound on `length`, to refuse garbage before allocating.
pub const MAX_FRAME: u32 = 1 << 24;

pub const MSG_HELLO: u8 = 1;
pub const MSG_OBS_REQUEST: u8 = 2;
pub const MSG_ACTION_PACKET: u8 = 3;
pub const MSG_CHUNK_BULK: u8 = 4;
pub const MSG_CHUNK_DONE: u8 = 5;
pub const MSG_ERROR: u8 = 15;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProtocolError {
    #[error("truncated {what}: need {need} bytes, have {have}")]
    Truncated { what: &'static str, need: usize, have: usize },
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("frame length {0} invalid")]
    BadLength(u32),
    #[error("{what} length mismatch: expected {expected} bytes, got {actual}")]
    LengthMismatch { what: &'static str, expected: usize, actual: usize },
    #[error("message type {0} with empty payload")]
    EmptyPayload(u8),
    #[error("invalid field: {0}")]
    Invalid(String),
    #[error("chunk {chunk_id}: index {index} after {last}")]
    OutOfOrder { chunk_id: u32, index: u16, last: u16 },
    #[error("chunk {chunk_id}: duplicate index {index}")]
    Duplicate { chunk_id: u32, index: u16 },
    #[error("unexpected {0}")]
    Unexpected(String),
    #[error("peer reported: {0}")]
    Remote(String),
}

type PResult<T> = std::result::Result<T, ProtocolError>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: u8,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(msg_type: u8, payload: Vec<u8>) -> Self {
        Self { msg_type, payload }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(5 + self.payload.len());
        out.extend_from_slice(&(self.payload.len() as u32 + 1).to_le_bytes());
        out.push(self.msg_type);
        out.extend_from_slice(&self.payload);
        out
    }

    /// Parses exactly one frame occupying all of `bytes`.
    pub fn decode(bytes: &[u8]) -> PResult<Frame> {
        let mut dec = FrameDecoder::new();
        dec.push(bytes);
        let frame = dec.next_frame()?.ok_or(ProtocolError::Truncated {
            what: "frame",
            need: frame_need(bytes),
            have: bytes.len(),
        })?;
        if dec.buffered() != 0 {
            return Err(ProtocolError::LengthMismatch {
                what: "frame",
                expected: bytes.len() - dec.buffered(),
                actual: bytes.len(),
            });
        }
        Ok(frame)
    }
}

fn frame_need(bytes: &[u8]) -> usize {
    if bytes.len() < 4 {
        5
    } else {
        4 + u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize
    }
}

/// Incremental frame parser; bytes may arrive split anywhere.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
    pos: usize,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        if self.pos > 0 && self.pos == self.buf.len() {
            self.buf.clear();
            self.pos = 0;
        }
        self.buf.extend_from_slice(bytes);
    }

    pub fn buffered(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn next_frame(&mut self) -> PResult<Option<Frame>> {
        let rest = &self.buf[self.pos..];
        if rest.len() < 4 {
            return Ok(None);
        }
        let len = u32::from_le_bytes(rest[..4].try_into().unwrap());
        if len == 0 || len > MAX_FRAME {
            return Err(ProtocolError::BadLength(len));
        }
        let total = 4 + len as usize;
        if rest.len() < total {
            return Ok(None);
        }
        let frame = Frame::new(rest[4], rest[5..total].to_vec());
        self.pos += total;
        if self.pos > 4096 && self.pos * 2 > self.buf.len() {
            self.buf.drain(..self.pos);
            self.pos = 0;
        }
        Ok(Some(frame))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hello {
    pub version: u8,
    /// Streamed packets (1) or one bulk chunk (0).
    pub streaming: bool,
    pub horizon: u16,
    pub action_dim: u16,
    pub obs_dim: u16,
    pub steps: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObsRequest {
    pub chunk_id: u32,
    pub obs: Vec<f32>,
    pub d: u16,
    pub s: u16,
    /// `d x A`, row-major.
    pub prefix: Vec<f32>,
    pub sent_us: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionPacket {
    pub chunk_id: u32,
    pub index: u16,
    pub action: Vec<f32>,
    pub step: u8,
    pub server_us: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChunkBulk {
    pub chunk_id: u32,
    pub steps: u8,
    /// `rows x A`, row-major.
    pub actions: Vec<f32>,
    pub server_us: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkDone {
    pub chunk_id: u32,
    pub steps_used: u8,
    pub early_stopped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello(Hello),
    ObsRequest(ObsRequest),
    ActionPacket(ActionPacket),
    ChunkBulk(ChunkBulk),
    ChunkDone(ChunkDone),
    Error(String),
}

struct Reader<'a> {
    what: &'static str,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> PResult<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(ProtocolError::Truncated {
                what: self.what,
                need: self.pos + n,
                have: self.bytes.len(),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> PResult<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> PResult<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> PResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> PResult<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> PResult<Vec<f32>> {
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn finish(&self) -> PResult<()> {
        if self.pos != self.bytes.len() {
            return Err(ProtocolError::LengthMismatch {
                what: self.what,
                expected: self.pos,
                actual: self.bytes.len(),
            });
        }
        Ok(())
    }
}

fn put_f32s(out: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

impl Message {
    pub fn msg_type(&self) -> u8 {
        match self {
            Message::Hello(_) => MSG_HELLO,
            Message::ObsRequest(_) => MSG_OBS_REQUEST,
            Message::ActionPacket(_) => MSG_ACTION_PACKET,
            Message::ChunkBulk(_) => MSG_CHUNK_BULK,
            Message::ChunkDone(_) => MSG_CHUNK_DONE,
            Message::Error(_) => MSG_ERROR,
        }
    }

    pub fn to_frame(&self) -> Frame {
        let mut p = Vec::new();
        match self {
            Message::Hello(h) => {
                p.push(h.version);
                p.push(h.streaming as u8);
                p.extend_from_slice(&h.horizon.to_le_bytes());
                p.extend_from_slice(&h.action_dim.to_le_bytes());
                p.extend_from_slice(&h.obs_dim.to_le_bytes());
                p.push(h.steps);
            }
            Message::ObsRequest(r) => {
                p.extend_from_slice(&r.chunk_id.to_le_bytes());
                p.extend_from_slice(&(r.obs.len() as u16).to_le_bytes());
                put_f32s(&mut p, &r.obs);
                p.extend_from_slice(&r.d.to_le_bytes());
                p.extend_from_slice(&r.s.to_le_bytes());
                put_f32s(&mut p, &r.prefix);
                p.extend_from_slice(&r.sent_us.to_le_bytes());
            }
            Message::ActionPacket(a) => {
                p.extend_from_slice(&a.chunk_id.to_le_bytes());
                p.extend_from_slice(&a.index.to_le_bytes());
                put_f32s(&mut p, &a.action);
                p.push(a.step);
                p.extend_from_slice(&a.server_us.to_le_bytes());
            }
            Message::ChunkBulk(b) => {
                p.extend_from_slice(&b.chunk_id.to_le_bytes());
                p.push(b.steps);
                p.extend_from_slice(&(b.actions.len() as u32).to_le_bytes());
                put_f32s(&mut p, &b.actions);
                p.extend_from_slice(&b.server_us.to_le_bytes());
            }
            Message::ChunkDone(c) => {
                p.extend_from_slice(&c.chunk_id.to_le_bytes());
                p.push(c.steps_used);
                p.push(c.early_stopped as u8);
            }
            Message::Error(msg) => {
                p.extend_from_slice(&(msg.len() as u16).to_le_bytes());
                p.extend_from_slice(msg.as_bytes());
            }
        }
        Frame::new(self.msg_type(), p)
    }

    pub fn encode(&self) -> Vec<u8> {
        self.to_frame().encode()
    }

    /// `action_dim` sizes the prefix and action fields; it comes from the
    /// handshake.
    pub fn from_frame(frame: &Frame, action_dim: usize) -> PResult<Message> {
        let t = frame.msg_type;
        let what = match t {
            MSG_HELLO => "HELLO",
            MSG_OBS_REQUEST => "OBS_REQUEST",
            MSG_ACTION_PACKET => "ACTION_PACKET",
            MSG_CHUNK_BULK => "CHUNK_BULK",
            MSG_CHUNK_DONE => "CHUNK_DONE",
            MSG_ERROR => "ERROR",
            other => return Err(ProtocolError::UnknownType(other)),
        };
        if frame.payload.is_empty() {
            return Err(ProtocolError::EmptyPayload(t));
        }
        let mut r = Reader {
            what,
            bytes: &frame.payload,
            pos: 0,
        };
        let msg = match t {
            MSG_HELLO => {
                let version = r.u8()?;
                let streaming = match r.u8()? {
                    0 => false,
                    1 => true,
                    x => return Err(ProtocolError::Invalid(format!("streaming flag {x}"))),
                };
                Message::Hello(Hello {
                    version,
                    streaming,
                    horizon: r.u16()?,
                    action_dim: r.u16()?,
                    obs_dim: r.u16()?,
                    steps: r.u8()?,
                })
            }
            MSG_OBS_REQUEST => {
                let chunk_id = r.u32()?;
                let n = r.u16()? as usize;
                let obs = r.f32s(n)?;
                let d = r.u16()?;
                let s = r.u16()?;
                let prefix = r.f32s(d as usize * action_dim)?;
                Message::ObsRequest(ObsRequest {
                    chunk_id,
                    obs,
                    d,
                    s,
                    prefix,
                    sent_us: r.u64()?,
                })
            }
            MSG_ACTION_PACKET => Message::ActionPacket(ActionPacket {
                chunk_id: r.u32()?,
                index: r.u16()?,
                action: r.f32s(action_dim)?,
                step: r.u8()?,
                server_us: r.u64()?,
            }),
            MSG_CHUNK_BULK => {
                let chunk_id = r.u32()?;
                let steps = r.u8()?;
                let n = r.u32()? as usize;
                if action_dim == 0 || n % action_dim != 0 {
                    return Err(ProtocolError::Invalid(format!("bulk of {n} values for action dim {action_dim}")));
                }
                let actions = r.f32s(n)?;
                Message::ChunkBulk(ChunkBulk {
                    chunk_id,
                    steps,
                    actions,
                    server_us: r.u64()?,
                })
            }
            MSG_CHUNK_DONE => {
                let chunk_id = r.u32()?;
                let steps_used = r.u8()?;
                let early_stopped = match r.u8()? {
                    0 => false,
                    1 => true,
                    x => return Err(ProtocolError::Invalid(format!("early_stopped flag {x}"))),
                };
                Message::ChunkDone(ChunkDone {
                    chunk_id,
                    steps_used,
                    early_stopped,
                })
            }
            _ => {
                let n = r.u16()? as usize;
                let text = String::from_utf8(r.take(n)?.to_vec())
                    .map_err(|_| ProtocolError::Invalid("error text is not UTF-8".into()))?;
                Message::Error(text)
            }
        };
        r.finish()?;
        Ok(msg)
    }

    pub fn decode(bytes: &[u8], action_dim: usize) -> PResult<Message> {
        Self::from_frame(&Frame::decode(bytes)?, action_dim)
    }
}

/// Enforces strictly increasing indices within each streamed chunk.
#[derive(Debug, Default)]
pub struct IndexTracker {
    last: HashMap<u32, u16>,
}

impl IndexTracker {
    pub fn accept(&mut self, chunk_id: u32, index: u16) -> PResult<()> {
        match self.last.get(&chunk_id) {
            Some(&l) if index == l => Err(ProtocolError::Duplicate { chunk_id, index }),
            Some(&l) if index < l => Err(ProtocolError::OutOfOrder { chunk_id, index, last: l }),
            _ => {
                self.last.insert(chunk_id, index);
                Ok(())
            }
        }
    }

    pub fn finish(&mut self, chunk_id: u32) {
        self.last.remove(&chunk_id);
    }
}

pub fn unix_micros() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_micros() as u64)
}

fn write_msg(w: &mut impl Write, msg: &Message) -> std::io::Result<()> {
    w.write_all(&msg.encode())
}

/// Blocking read of the next frame; `Ok(None)` on a clean end of stream.
fn read_frame(stream: &mut impl Read, dec: &mut FrameDecoder) -> Result<Option<Frame>> {
    let mut buf = [0u8; 4096];
    loop {
        if let Some(f) = dec.next_frame()? {
            return Ok(Some(f));
        }
        let n = match stream.read(&mut buf) {
            Ok(n) => n,
            Err(e) if e.kind() == ErrorKind::Interrupted => continue,
            Err(e) => return Err(e.into()),
        };
        if n == 0 {
            if dec.buffered() > 0 {
                return Err(ProtocolError::Truncated {
                    what: "stream",
                    need: dec.buffered() + 1,
                    have: dec.buffered(),
                }
                .into());
            }
            return Ok(None);
        }
        dec.push(&buf[..n]);
    }
}

fn sleep_until(t: Instant) {
    let now = Instant::now();
    if t > now {
        thread::sleep(t - now);
    }
}

fn ms(x: f64) -> Duration {
    Duration::from_secs_f64(x.max(0.0) / 1000.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServerConfig {
    /// Stand-in for backbone time, slept before the first sampler step.
    pub dt_vlm_ms: f64,
    /// Each sampler step is padded to at least this long.
    pub dt_ae_ms: f64,
    pub steps: usize,
    pub has: HasParams,
    pub seed: u64,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            dt_vlm_ms: 30.0,
            dt_ae_ms: 8.0,
            steps: 10,
            has: HasParams::single_step(0.6, 10),
            seed: 0,
        }
    }
}

pub type SharedField = Arc<dyn VelocityField + Send + Sync>;

pub struct Server {
    listener: TcpListener,
    model: SharedField,
    cfg: ServerConfig,
    shutdown: Arc<AtomicBool>,
}

pub struct ServerHandle {
    addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stop(mut self) {
        self.stop_inner();
    }

    fn stop_inner(&mut self) {
        self.shutdown.store(true, AtomicOrdering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if self.thread.is_some() {
            self.stop_inner();
        }
    }
}

impl Server {
    pub fn bind(addr: impl ToSocketAddrs, model: SharedField, cfg: ServerConfig) -> Result<Self> {
        if cfg.steps == 0 || cfg.steps > u8::MAX as usize {
            return Err(Error::Config(format!("server steps {} outside [1, 255]", cfg.steps)));
        }
        if !(cfg.dt_vlm_ms >= 0.0 && cfg.dt_ae_ms >= 0.0) {
            return Err(Error::Config("server delays must be non-negative".into()));
        }
        Ok(Self {
            listener: TcpListener::bind(addr)?,
            model,
            cfg,
            shutdown: Arc::new(AtomicBool::new(false)),
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    /// Accepts connections until shut down, one thread per connection.
    pub fn run(self) -> Result<()> {
        let mut conn = 0u64;
        for stream in self.listener.incoming() {
            if self.shutdown.load(AtomicOrdering::SeqCst) {
                break;
            }
            let stream = match stream {
                Ok(s) => s,
                Err(e) => {
                    log::warn!("accept failed: {e}");
                    continue;
                }
            };
            let model = Arc::clone(&self.model);
            let cfg = self.cfg;
            let seed = cfg.seed.wrapping_add(conn);
            conn += 1;
            thread::spawn(move || {
                let peer = stream.peer_addr().ok();
                if let Err(e) = handle_connection(stream, model.as_ref(), &cfg, seed) {
                    log::warn!("connection {peer:?}: {e}");
                }
            });
        }
        Ok(())
    }

    pub fn spawn(self) -> Result<ServerHandle> {
        let addr = self.local_addr()?;
        let shutdown = Arc::clone(&self.shutdown);
        let thread = thread::spawn(move || {
            if let Err(e) = self.run() {
                log::error!("server stopped: {e}");
            }
        });
        Ok(ServerHandle {
            addr,
            shutdown,
            thread: Some(thread),
        })
    }
}

fn handle_connection(mut stream: TcpStream, model: &(dyn VelocityField + Send + Sync), cfg: &ServerConfig, seed: u64) -> Result<()> {
    stream.set_nodelay(true)?;
    let mut dec = FrameDecoder::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, a) = (model.horizon(), model.action_dim());
    let reject = |stream: &mut TcpStream, e: &dyn std::fmt::Display| {
        let _ = write_msg(stream, &Message::Error(e.to_string()));
        let _ = stream.shutdown(Shutdown::Both);
    };

    let hello = match read_frame(&mut stream, &mut dec) {
        Ok(Some(f)) => Message::from_frame(&f, a),
        Ok(None) => return Ok(()),
        Err(e) => {
            reject(&mut stream, &e);
            return Err(e);
        }
    };
    let streaming = match hello {
        Ok(Message::Hello(hl)) if hl.version == PROTOCOL_VERSION => hl.streaming,
        Ok(other) => {
            let e = ProtocolError::Unexpected(format!("message type {} before HELLO", other.msg_type()));
            reject(&mut stream, &e);
            return Err(e.into());
        }
        Err(e) => {
            reject(&mut stream, &e);
            return Err(e.into());
        }
    };
    write_msg(
        &mut stream,
        &Message::Hello(Hello {
            version: PROTOCOL_VERSION,
            streaming,
            horizon: h as u16,
            action_dim: a as u16,
            obs_dim: model.obs_dim() as u16,
            steps: cfg.steps as u8,
        }),
    )?;

    loop {
        let frame = match read_frame(&mut stream, &mut dec) {
            Ok(Some(f)) => f,
            Ok(None) => return Ok(()),
            Err(e) => {
                reject(&mut stream, &e);
                return Err(e);
            }
        };
        let req = match Message::from_frame(&frame, a) {
            Ok(Message::ObsRequest(r)) => r,
            Ok(other) => {
                let e = ProtocolError::Unexpected(format!("message type {}", other.msg_type()));
                reject(&mut stream, &e);
                return Err(e.into());
            }
            Err(e) => {
                reject(&mut stream, &e);
                return Err(e.into());
            }
        };
        let t0 = Instant::now();
        let (d, s) = (req.d as usize, req.s as usize);
        if req.obs.len() != model.obs_dim() {
            let e = ProtocolError::Invalid(format!("observation of {} values, expected {}", req.obs.len(), model.obs_dim()));
            reject(&mut stream, &e);
            return Err(e.into());
        }
        if d >= h || (streaming && (s == 0 || s > h - d)) {
            write_msg(&mut stream, &Message::Error(format!("infeasible d = {d}, s = {s} for H = {h}")))?;
            continue;
        }
        let obs: Vec<f64> = req.obs.iter().map(|&x| x as f64).collect();
        let prefix = Array2::from_shape_vec((d, a), req.prefix.iter().map(|&x| x as f64).collect()).expect("decoded prefix is d x A");
        sleep_until(t0 + ms(cfg.dt_vlm_ms));
        let step_deadline = |j: usize| t0 + ms(cfg.dt_vlm_ms + j as f64 * cfg.dt_ae_ms);

        if streaming {
            let hit = cfg.has.hit_times(h, d)?;
            let mut write_err = None;
            let (_, trace) = sample_with_hit_times(
                model,
                &obs,
                prefix.view(),
                &hit,
                cfg.steps,
                Some(s),
                false,
                &mut |disp| {
                    if write_err.is_some() {
                        return;
                    }
                    sleep_until(step_deadline(disp.step));
                    let pkt = Message::ActionPacket(ActionPacket {
                        chunk_id: req.chunk_id,
                        index: disp.index as u16,
                        action: disp.action.iter().map(|&x| x as f32).collect(),
                        step: disp.step as u8,
                        server_us: unix_micros(),
                    });
                    if let Err(e) = write_msg(&mut stream, &pkt) {
                        write_err = Some(e);
                    }
                },
                &mut rng,
            )?;
            if let Some(e) = write_err {
                return Err(e.into());
            }
            sleep_until(step_deadline(trace.steps_used));
            write_msg(
                &mut stream,
                &Message::ChunkDone(ChunkDone {
                    chunk_id: req.chunk_id,
                    steps_used: trace.steps_used as u8,
                    early_stopped: trace.early_stopped,
                }),
            )?;
        } else {
            let (chunk, _) = sample_constant(model, &obs, cfg.steps, prefix.view(), &mut rng)?;
            sleep_until(step_deadline(cfg.steps));
            write_msg(
                &mut stream,
                &Message::ChunkBulk(ChunkBulk {
                    chunk_id: req.chunk_id,
                    steps: cfg.steps as u8,
                    actions: chunk.0.iter().map(|&x| x as f32).collect(),
                    server_us: unix_micros(),
                }),
            )?;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientConfig {
    pub mode: ClientMode,
    /// Defaults to the mode's `s_min`.
    pub exec_horizon: Option<usize>,
    /// Overrides the computed delay.
    pub delay: Option<usize>,
    pub duration_ms: f64,
    pub events: EventSpec,
    pub seed: u64,
    pub record_actions: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ClientReport {
    pub mode: ClientMode,
    pub exec_horizon: usize,
    pub delay: usize,
    pub trace: RunTrace,
    /// First packet (or bulk chunk) receive time minus request send time.
    pub ttfa_ms: Vec<f64>,
    /// Needed actions that arrived after their execution tick.
    pub late_actions: usize,
    pub truncated: bool,
}

impl ClientReport {
    pub fn mean_ttfa(&self) -> f64 {
        mean(&self.ttfa_ms)
    }

    pub fn mean_reaction(&self) -> f64 {
        mean(&self.trace.protocol_reactions())
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

struct ClientChunk {
    trigger_tick: u64,
    obs_time: f64,
    sent: f64,
    first_usable: usize,
    /// Action and receive time (ms since start) per index.
    rows: Vec<Option<([f64; 2], f64)>>,
    complete: bool,
}

#[derive(Default)]
struct Shared {
    chunks: Vec<ClientChunk>,
    ttfa: Vec<f64>,
    error: Option<Error>,
    closed: bool,
}

struct Receiver {
    state: Mutex<Shared>,
    cv: Condvar,
}

fn receive_loop(mut stream: TcpStream, mut dec: FrameDecoder, rx: Arc<Receiver>, start: Instant, horizon: usize) {
    let mut tracker = IndexTracker::default();
    let fail = |e: Error| {
        let mut st = rx.state.lock().unwrap();
        if st.error.is_none() && !st.closed {
            st.error = Some(e);
        }
        st.closed = true;
        rx.cv.notify_all();
    };
    loop {
        let frame = match read_frame(&mut stream, &mut dec) {
            Ok(Some(f)) => f,
            Ok(None) => {
                let mut st = rx.state.lock().unwrap();
                st.closed = true;
                rx.cv.notify_all();
                return;
            }
            Err(e) => return fail(e),
        };
        let now = start.elapsed().as_secs_f64() * 1000.0;
        let msg = match Message::from_frame(&frame, ACTION_DIM) {
            Ok(m) => m,
            Err(e) => return fail(e.into()),
        };
        let mut st = rx.state.lock().unwrap();
        match msg {
            Message::ActionPacket(p) => {
                let id = p.chunk_id as usize;
                if let Err(e) = tracker.accept(p.chunk_id, p.index) {
                    drop(st);
                    return fail(e.into());
                }
                let Some(c) = st.chunks.get_mut(id) else {
                    drop(st);
                    return fail(ProtocolError::Unexpected(format!("packet for unknown chunk {id}")).into());
                };
                let i = p.index as usize;
                if i < c.first_usable.min(horizon) || i >= horizon {
                    drop(st);
                    return fail(ProtocolError::Invalid(format!("index {i} outside [d, H)")).into());
                }
                let first = c.rows.iter().all(Option::is_none);
                c.rows[i] = Some(([p.action[0] as f64, p.action[1] as f64], now));
                if first {
                    let sent = c.sent;
                    st.ttfa.push(now - sent);
                }
            }
            Message::ChunkBulk(b) => {
                let id = b.chunk_id as usize;
                let Some(c) = st.chunks.get_mut(id) else {
                    drop(st);
                    return fail(ProtocolError::Unexpected(format!("bulk for unknown chunk {id}")).into());
                };
                if b.actions.len() != horizon * ACTION_DIM {
                    drop(st);
                    return fail(ProtocolError::Invalid(format!("bulk of {} values", b.actions.len())).into());
                }
                for (i, r) in b.actions.chunks_exact(ACTION_DIM).enumerate() {
                    c.rows[i] = Some(([r[0] as f64, r[1] as f64], now));
                }
                c.complete = true;
                let sent = c.sent;
                st.ttfa.push(now - sent);
            }
            Message::ChunkDone(dn) => {
                tracker.finish(dn.chunk_id);
                if let Some(c) = st.chunks.get_mut(dn.chunk_id as usize) {
                    c.complete = true;
                }
            }
            Message::Error(text) => {
                drop(st);
                return fail(ProtocolError::Remote(text).into());
            }
            other => {
                drop(st);
                return fail(ProtocolError::Unexpected(format!("message type {} from server", other.msg_type())).into());
            }
        }
        rx.cv.notify_all();
    }
}

struct Controller {
    start: Instant,
    world: WorldState,
    events: Vec<(f64, [f64; 2])>,
    next_event: usize,
    applied: Vec<JumpEvent>,
    trace: RunTrace,
    first_exec: Vec<Option<f64>>,
    record: bool,
    started: bool,
}

impl Controller {
    fn now(&self) -> f64 {
        self.start.elapsed().as_secs_f64() * 1000.0
    }

    /// Sleeps until `t` ms, applying target jumps on the way.
    fn wait_until(&mut self, t: f64) {
        while self.next_event < self.events.len() && self.events[self.next_event].0 <= t {
            let (et, target) = self.events[self.next_event];
            sleep_until(self.start + ms(et));
            self.world.target = target;
            self.applied.push(JumpEvent { time: self.now(), target });
            self.next_event += 1;
        }
        sleep_until(self.start + ms(t));
    }

    fn execute(&mut self, id: usize, obs_time: f64, action: [f64; 2], available: f64) {
        let now = self.now();
        if self.first_exec[id].is_none() {
            self.first_exec[id] = Some(available);
        }
        if self.record {
            self.trace.executed.push(ExecutedAction {
                exec_time: now,
                available_time: available,
                obs_time,
                chunk_id: id as u64,
                action,
                position: self.world.position,
            });
        }
        self.trace.executed_count += 1;
        self.world.step(action);
        self.started = true;
    }
}

/// Connects, runs the controller for `duration_ms` of wall-clock time and
/// returns the measured trace.
pub fn run_client(addr: impl ToSocketAddrs, timing: &TimingModel, cfg: &ClientConfig) -> Result<ClientReport> {
    let mut stream = TcpStream::connect(addr)?;
    stream.set_nodelay(true)?;
    let streaming = cfg.mode == ClientMode::Faster;
    write_msg(
        &mut stream,
        &Message::Hello(Hello {
            version: PROTOCOL_VERSION,
            streaming,
            horizon: 0,
            action_dim: ACTION_DIM as u16,
            obs_dim: OBS_DIM as u16,
            steps: 0,
        }),
    )?;
    let mut dec = FrameDecoder::new();
    let hello = match read_frame(&mut stream, &mut dec)? {
        Some(f) => Message::from_frame(&f, ACTION_DIM)?,
        None => return Err(ProtocolError::Unexpected("end of stream before HELLO".into()).into()),
    };
    let server = match hello {
        Message::Hello(h) => h,
        Message::Error(e) => return Err(ProtocolError::Remote(e).into()),
        other => return Err(ProtocolError::Unexpected(format!("message type {} before HELLO", other.msg_type())).into()),
    };
    if server.action_dim as usize != ACTION_DIM || server.obs_dim as usize != OBS_DIM {
        return Err(Error::Config(format!(
            "server serves A = {}, O = {}; the env needs A = {ACTION_DIM}, O = {OBS_DIM}",
            server.action_dim, server.obs_dim
        )));
    }
    let h = server.horizon as usize;
    let timing = TimingModel {
        steps: server.steps as usize,
        ..*timing
    };
    let shape = ChunkShape {
        horizon: h,
        has: HasParams::single_step(0.6, timing.steps),
    };
    let plan = delay_and_smin(&timing, cfg.mode, Some(&shape))?;
    let s = cfg.exec_horizon.unwrap_or(plan.s_min);
    let d = if cfg.mode.is_async() { cfg.delay.unwrap_or(plan.d) } else { 0 };
    if s == 0 || d + s > h {
        return Err(Error::Infeasible(format!("d = {d}, s = {s} do not fit H = {h}")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let env = EnvConfig::default();
    let start_pos = [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)];
    let first_target = sample_target(&mut rng, start_pos, env.min_jump);
    let times: Vec<f64> = match &cfg.events {
        EventSpec::None | EventSpec::AtTriggers { .. } => Vec::new(),
        EventSpec::Times(t) => t.clone(),
        EventSpec::Uniform { count } => {
            let guard = 2.0 * (timing.full_latency() + (d + s) as f64 * timing.dt_ctrl);
            if *count > 0 && cfg.duration_ms <= guard {
                return Err(Error::Config("duration too short for events".into()));
            }
            let mut t: Vec<f64> = (0..*count).map(|_| rng.random_range(0.0..cfg.duration_ms - guard)).collect();
            t.sort_by(f64::total_cmp);
            t
        }
    };
    let mut last = first_target;
    let events = times
        .into_iter()
        .map(|t| {
            last = sample_target(&mut rng, last, env.min_jump);
            (t, last)
        })
        .collect();

    let rx = Arc::new(Receiver {
        state: Mutex::new(Shared::default()),
        cv: Condvar::new(),
    });
    let start = Instant::now();
    let reader = {
        let rx = Arc::clone(&rx);
        let stream = stream.try_clone()?;
        thread::spawn(move || receive_loop(stream, dec, rx, start, h))
    };
    let mut ctl = Controller {
        start,
        world: WorldState::new(start_pos, first_target),
        events,
        next_event: 0,
        applied: Vec::new(),
        trace: RunTrace::default(),
        first_exec: Vec::new(),
        record: cfg.record_actions,
        started: false,
    };

    let result = if cfg.mode.is_async() {
        run_async(&mut ctl, &mut stream, &rx, &timing, cfg, h, s, d)
    } else {
        run_sync(&mut ctl, &mut stream, &rx, &timing, cfg, h, s)
    };
    let _ = stream.shutdown(Shutdown::Both);
    let _ = reader.join();

    let mut st = rx.state.lock().unwrap();
    let truncated = match (result, st.error.take()) {
        (Err(e), _) => return Err(e),
        (Ok(()), Some(e)) => {
            if matches!(e, Error::Protocol(_)) {
                return Err(e);
            }
            log::warn!("connection lost: {e}");
            true
        }
        (Ok(()), None) => false,
    };

    let mut late = 0;
    if cfg.mode.is_async() {
        for c in &st.chunks {
            for i in c.first_usable..(c.first_usable + s).min(h) {
                let due = (c.trigger_tick + 1 + i as u64) as f64 * timing.dt_ctrl;
                if due <= cfg.duration_ms && c.rows[i].is_some_and(|(_, recv)| recv > due) {
                    late += 1;
                }
            }
        }
    }
    let chunk_log: Vec<(f64, Option<f64>)> = st.chunks.iter().zip(&ctl.first_exec).map(|(c, f)| (c.obs_time, *f)).collect();
    let mut trace = std::mem::take(&mut ctl.trace);
    trace.elapsed = cfg.duration_ms;
    let (events, reactions) = measure_reactions(std::mem::take(&mut ctl.applied), &chunk_log, &trace.executed, cfg.record_actions);
    trace.events = events;
    trace.reactions = reactions;
    Ok(ClientReport {
        mode: cfg.mode,
        exec_horizon: s,
        delay: d,
        trace,
        ttfa_ms: std::mem::take(&mut st.ttfa),
        late_actions: late,
        truncated,
    })
}

fn send_request(ctl: &mut Controller, stream: &mut TcpStream, rx: &Receiver, tick: u64, d: usize, s: usize, prefix: Vec<f32>, h: usize, first_usable: usize) -> Result<()> {
    let obs_time = ctl.now();
    let obs = ctl.world.observation();
    let id = {
        let mut st = rx.state.lock().unwrap();
        st.chunks.push(ClientChunk {
            trigger_tick: tick,
            obs_time,
            sent: obs_time,
            first_usable,
            rows: vec![None; h],
            complete: false,
        });
        st.chunks.len() - 1
    };
    ctl.first_exec.push(None);
    ctl.trace.triggers.push(obs_time);
    let req = Message::ObsRequest(ObsRequest {
        chunk_id: id as u32,
        obs: obs.iter().map(|&x| x as f32).collect(),
        d: d as u16,
        s: s as u16,
        prefix,
        sent_us: unix_micros(),
    });
    write_msg(stream, &req)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_async(ctl: &mut Controller, stream: &mut TcpStream, rx: &Receiver, timing: &TimingModel, cfg: &ClientConfig, h: usize, s: usize, d: usize) -> Result<()> {
    let dt = timing.dt_ctrl;
    let mut k = 0u64;
    loop {
        let t = k as f64 * dt;
        if t > cfg.duration_ms {
            return Ok(());
        }
        ctl.wait_until(t);
        let now = ctl.now();
        if k > 0 {
            let pick = {
                let st = rx.state.lock().unwrap();
                if st.closed {
                    return Ok(());
                }
                st.chunks.iter().enumerate().rev().find_map(|(id, c)| {
                    let i = k.checked_sub(c.trigger_tick + 1)? as usize;
                    if i < c.first_usable || i >= h {
                        return None;
                    }
                    let (a, recv) = c.rows[i]?;
                    (recv <= now).then_some((id, c.obs_time, a, recv))
                })
            };
            match pick {
                Some((id, obs_time, a, recv)) => ctl.execute(id, obs_time, a, recv),
                None if ctl.started => ctl.trace.stalls.push(Stall { start: now, duration: dt }),
                None => {}
            }
        }
        if k % s as u64 == 0 {
            let wire_d = if cfg.mode.uses_prefix() { d } else { 0 };
            let prefix = {
                let st = rx.state.lock().unwrap();
                let prev = st.chunks.last();
                let mut p = Vec::with_capacity(wire_d * ACTION_DIM);
                for r in s..s + wire_d {
                    let row = prev.and_then(|c| c.rows.get(r).copied().flatten()).map_or([0.0; 2], |(a, _)| a);
                    p.extend(row.iter().map(|&x| x as f32));
                }
                p
            };
            send_request(ctl, stream, rx, k, wire_d, s, prefix, h, d)?;
        }
        k += 1;
    }
}

#[allow(clippy::too_many_arguments)]
fn run_sync(ctl: &mut Controller, stream: &mut TcpStream, rx: &Receiver, timing: &TimingModel, cfg: &ClientConfig, h: usize, s: usize) -> Result<()> {
    let dt = timing.dt_ctrl;
    let mut next = 0.0;
    loop {
        ctl.wait_until(next);
        let t = ctl.now();
        if t > cfg.duration_ms {
            return Ok(());
        }
        send_request(ctl, stream, rx, 0, 0, s, Vec::new(), h, 0)?;
        let id = ctl.first_exec.len() - 1;
        // Apply jumps while waiting on the chunk.
        let (rows, obs_time, arrival) = loop {
            let ready = {
                let st = rx.state.lock().unwrap();
                let st = rx
                    .cv
                    .wait_timeout_while(st, Duration::from_millis(1), |st| !st.closed && !st.chunks[id].complete)
                    .unwrap()
                    .0;
                if st.closed && !st.chunks[id].complete {
                    return Ok(());
                }
                st.chunks[id].complete.then(|| {
                    let c = &st.chunks[id];
                    (c.rows.clone(), c.obs_time, c.rows[0].map_or(0.0, |(_, r)| r))
                })
            };
            if let Some(r) = ready {
                break r;
            }
            let now = ctl.now();
            ctl.wait_until(now);
        };
        ctl.trace.stalls.push(Stall {
            start: t,
            duration: arrival - t,
        });
        for (m, row) in rows.iter().take(s).enumerate() {
            let when = arrival + m as f64 * dt;
            if when > cfg.duration_ms {
                return Ok(());
            }
            ctl.wait_until(when);
            let (a, recv) = row.expect("bulk chunks carry every row");
            ctl.execute(id, obs_time, a, recv);
        }
        next = arrival + s as f64 * dt;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::EndpointOracle;

    #[test]
    fn golden_action_packet() {
        let msg = Message::ActionPacket(ActionPacket {
            chunk_id: 1,
            index: 0,
            action: vec![0.0, 0.0],
            step: 1,
            server_us: 0,
        });
        let want: Vec<u8> = vec![
            0x18, 0, 0, 0, 0x03, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0x01, 0, 0, 0, 0, 0, 0, 0, 0,
        ];
        assert_eq!(msg.encode(), want);
        assert_eq!(Message::decode(&want, 2).unwrap(), msg);
    }

    #[test]
    fn golden_chunk_done_and_hello() {
        let done = Message::ChunkDone(ChunkDone {
            chunk_id: 7,
            steps_used: 2,
            early_stopped: true,
        });
        assert_eq!(done.encode(), vec![7, 0, 0, 0, 5, 7, 0, 0, 0, 2, 1]);
        let hello = Message::Hello(Hello {
            version: 1,
            streaming: true,
            horizon: 50,
            action_dim: 2,
            obs_dim: 4,
            steps: 10,
        });
        assert_eq!(hello.encode(), vec![10, 0, 0, 0, 1, 1, 1, 50, 0, 2, 0, 4, 0, 10]);
    }

    #[test]
    fn obs_request_round_trip() {
        let msg = Message::ObsRequest(ObsRequest {
            chunk_id: 42,
            obs: vec![0.5, -0.25, 1.0, 0.0],
            d: 2,
            s: 3,
            prefix: vec![0.1, 0.2, 0.3, 0.4],
            sent_us: 123_456_789,
        });
        assert_eq!(Message::decode(&msg.encode(), 2).unwrap(), msg);
    }

    #[test]
    fn malformed_frames_are_rejected() {
        assert_eq!(Message::decode(&[1, 0, 0, 0, 3], 2), Err(ProtocolError::EmptyPayload(3)));
        assert_eq!(Message::decode(&[2, 0, 0, 0, 9, 0], 2), Err(ProtocolError::UnknownType(9)));
        assert_eq!(Frame::decode(&[0, 0, 0, 0]), Err(ProtocolError::BadLength(0)));
        assert!(matches!(Frame::decode(&[9, 0, 0, 0, 3, 1]), Err(ProtocolError::Truncated { .. })));
        let mut long = Message::ChunkDone(ChunkDone {
            chunk_id: 1,
            steps_used: 1,
            early_stopped: false,
        })
        .to_frame();
        long.payload.push(0);
        assert!(matches!(Message::decode(&long.encode(), 2), Err(ProtocolError::LengthMismatch { .. })));
        let bad_flag = Frame::new(MSG_CHUNK_DONE, vec![1, 0, 0, 0, 1, 2]).encode();
        assert!(matches!(Message::decode(&bad_flag, 2), Err(ProtocolError::Invalid(_))));
    }

    #[test]
    fn decoder_handles_byte_by_byte_input() {
        let msgs = [
            Message::Error("boom".into()),
            Message::ChunkDone(ChunkDone {
                chunk_id: 3,
                steps_used: 10,
                early_stopped: false,
            }),
        ];
        let bytes: Vec<u8> = msgs.iter().flat_map(Message::encode).collect();
        let mut dec = FrameDecoder::new();
        let mut got = Vec::new();
        for b in bytes {
            dec.push(&[b]);
            while let Some(f) = dec.next_frame().unwrap() {
                got.push(Message::from_frame(&f, 2).unwrap());
            }
        }
        assert_eq!(got, msgs);
        assert_eq!(dec.buffered(), 0);
    }

    #[test]
    fn tracker_rejects_reordering() {
        let mut t = IndexTracker::default();
        t.accept(0, 2).unwrap();
        t.accept(0, 3).unwrap();
        assert_eq!(t.accept(0, 3), Err(ProtocolError::Duplicate { chunk_id: 0, index: 3 }));
        assert_eq!(t.accept(0, 1), Err(ProtocolError::OutOfOrder { chunk_id: 0, index: 1, last: 3 }));
        t.accept(1, 0).unwrap();
    }

    fn oracle_server(cfg: ServerConfig) -> ServerHandle {
        let target = Array2::from_shape_fn((10, 2), |(i, k)| 0.01 * i as f64 - 0.02 * k as f64);
        let model: SharedField = Arc::new(EndpointOracle {
            target: crate::flow::ActionChunk(target),
            obs_dim: 4,
        });
        Server::bind("127.0.0.1:0", model, cfg).unwrap().spawn().unwrap()
    }

    fn connect(addr: SocketAddr, streaming: bool) -> (TcpStream, FrameDecoder, Hello) {
        let mut s = TcpStream::connect(addr).unwrap();
        let hello = Hello {
            version: PROTOCOL_VERSION,
            streaming,
            horizon: 0,
            action_dim: 2,
            obs_dim: 4,
            steps: 0,
        };
        write_msg(&mut s, &Message::Hello(hello)).unwrap();
        let mut dec = FrameDecoder::new();
        let f = read_frame(&mut s, &mut dec).unwrap().unwrap();
        let Message::Hello(h) = Message::from_frame(&f, 2).unwrap() else { panic!() };
        (s, dec, h)
    }

    fn request(stream: &mut TcpStream, d: u16, s: u16) {
        let req = Message::ObsRequest(ObsRequest {
            chunk_id: 0,
            obs: vec![0.0; 4],
            d,
            s,
            prefix: vec![0.0; d as usize * 2],
            sent_us: 0,
        });
        write_msg(stream, &req).unwrap();
    }

    fn fast() -> ServerConfig {
        ServerConfig {
            dt_vlm_ms: 0.0,
            dt_ae_ms: 0.0,
            ..ServerConfig::default()
        }
    }

    #[test]
    fn early_stop_with_one_action() {
        let srv = oracle_server(fast());
        let (mut s, mut dec, hello) = connect(srv.addr(), true);
        assert_eq!((hello.horizon, hello.steps), (10, 10));
        request(&mut s, 0, 1);
        let mut msgs = Vec::new();
        loop {
            let f = read_frame(&mut s, &mut dec).unwrap().unwrap();
            let m = Message::from_frame(&f, 2).unwrap();
            let done = matches!(m, Message::ChunkDone(_));
            msgs.push(m);
            if done {
                break;
            }
        }
        let packets: Vec<_> = msgs.iter().filter_map(|m| if let Message::ActionPacket(p) = m { Some(p) } else { None }).collect();
        assert_eq!(packets[0].index, 0);
        assert_eq!(packets[0].step, 1);
        assert!(packets.iter().all(|p| p.step == 1));
        assert_eq!(
            msgs.last(),
            Some(&Message::ChunkDone(ChunkDone {
                chunk_id: 0,
                steps_used: 1,
                early_stopped: true
            }))
        );
    }

    #[test]
    fn constant_mode_sends_one_bulk() {
        let srv = oracle_server(fast());
        let (mut s, mut dec, _) = connect(srv.addr(), false);
        request(&mut s, 0, 3);
        let f = read_frame(&mut s, &mut dec).unwrap().unwrap();
        let Message::ChunkBulk(b) = Message::from_frame(&f, 2).unwrap() else { panic!("expected bulk") };
        assert_eq!((b.steps, b.actions.len()), (10, 20));
        assert!((b.actions[2] - 0.01).abs() < 1e-6);
    }

    #[test]
    fn infeasible_request_gets_error_frame() {
        let srv = oracle_server(fast());
        let (mut s, mut dec, _) = connect(srv.addr(), true);
        request(&mut s, 8, 5);
        let f = read_frame(&mut s, &mut dec).unwrap().unwrap();
        assert!(matches!(Message::from_frame(&f, 2).unwrap(), Message::Error(_)));
        request(&mut s, 0, 1);
        let f = read_frame(&mut s, &mut dec).unwrap().unwrap();
        assert!(matches!(Message::from_frame(&f, 2).unwrap(), Message::ActionPacket(_)));
    }

    #[test]
    fn malformed_request_closes_connection() {
        let srv = oracle_server(fast());
        let (mut s, mut dec, _) = connect(srv.addr(), true);
        s.write_all(&Frame::new(MSG_OBS_REQUEST, vec![]).encode()).unwrap();
        let f = read_frame(&mut s, &mut dec).unwrap().unwrap();
        assert!(matches!(Message::from_frame(&f, 2).unwrap(), Message::Error(_)));
        assert!(read_frame(&mut s, &mut dec).unwrap().is_none());
    }

    #[test]
    fn streaming_packet_timing_follows_steps() {
        let cfg = ServerConfig {
            dt_vlm_ms: 20.0,
            dt_ae_ms: 5.0,
            ..ServerConfig::default()
        };
        let srv = oracle_server(cfg);
        let (mut s, mut dec, _) = connect(srv.addr(), true);
        let t0 = Instant::now();
        request(&mut s, 0, 10);
        let f = read_frame(&mut s, &mut dec).unwrap().unwrap();
        let first = t0.elapsed().as_secs_f64() * 1000.0;
        assert!(matches!(Message::from_frame(&f, 2).unwrap(), Message::ActionPacket(_)));
        assert!(first >= 25.0 && first < 60.0, "{first}");
    }
}
