//! Length-prefixed binary framing between the two nodes.
//!
//! Every frame is a 6-byte header (`type:u8`, `codec:u8`, `body_len:u32`)
//! followed by the body. Integers are little-endian and probabilities are
//! binary16. The body may be block-compressed, as indicated by the codec byte.

use std::io::{self, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::decoder::DraftRecord;
use crate::dist::{self, CompressedDist, CorrectedWeight, DistError};
use crate::Side;

pub const HEADER_LEN: usize = 6;
/// Frames larger than this are refused.
pub const MAX_BODY: u32 = 64 << 20;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("truncated frame: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("length mismatch: header says {declared} body bytes, found {actual}")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("unknown message type {0}")]
    UnknownMsgType(u8),
    #[error("unknown codec {0}")]
    UnknownCodec(u8),
    #[error("decompression failed: {0}")]
    Decompress(String),
    #[error("malformed body: {0}")]
    Malformed(&'static str),
    #[error("frame of {0} bytes exceeds limit")]
    TooLarge(u32),
    #[error("connection closed")]
    Closed,
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl From<DistError> for TransportError {
    fn from(e: DistError) -> Self {
        match e {
            DistError::Malformed(m) => TransportError::Malformed(m),
            _ => TransportError::Malformed("invalid distribution"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Codec {
    #[default]
    None = 0,
    Lz4 = 1,
}

impl TryFrom<u8> for Codec {
    type Error = TransportError;
    fn try_from(b: u8) -> Result<Self, TransportError> {
        match b {
            0 => Ok(Codec::None),
            1 => Ok(Codec::Lz4),
            other => Err(TransportError::UnknownCodec(other)),
        }
    }
}

impl std::str::FromStr for Codec {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(Codec::None),
            "lz4" => Ok(Codec::Lz4),
            other => Err(format!("unknown codec '{other}' (expected none or lz4)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MsgType {
    Draft = 1,
    Target = 2,
    Switch = 3,
    Probe = 4,
    Hello = 5,
    Bye = 6,
}

impl TryFrom<u8> for MsgType {
    type Error = TransportError;
    fn try_from(b: u8) -> Result<Self, TransportError> {
        Ok(match b {
            1 => MsgType::Draft,
            2 => MsgType::Target,
            3 => MsgType::Switch,
            4 => MsgType::Probe,
            5 => MsgType::Hello,
            6 => MsgType::Bye,
            other => return Err(TransportError::UnknownMsgType(other)),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MessageHeader {
    pub msg_type: MsgType,
    pub codec: Codec,
    pub body_len: u32,
}

impl MessageHeader {
    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[0] = self.msg_type as u8;
        b[1] = self.codec as u8;
        b[2..6].copy_from_slice(&self.body_len.to_le_bytes());
        b
    }

    pub fn parse(b: &[u8]) -> Result<Self, TransportError> {
        if b.len() < HEADER_LEN {
            return Err(TransportError::Truncated { need: HEADER_LEN, have: b.len() });
        }
        let msg_type = MsgType::try_from(b[0])?;
        let codec = Codec::try_from(b[1])?;
        let body_len = u32::from_le_bytes(b[2..6].try_into().unwrap());
        if body_len > MAX_BODY {
            return Err(TransportError::TooLarge(body_len));
        }
        Ok(MessageHeader { msg_type, codec, body_len })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DraftMsg {
    pub step: u32,
    pub token: u32,
    pub h: f64,
    pub dist: CompressedDist,
    pub decode_ms: f32,
}

impl DraftMsg {
    pub fn from_record(record: &DraftRecord, dist: CompressedDist) -> Self {
        DraftMsg { step: record.step, token: record.token, h: record.h.0, dist, decode_ms: record.decode_ms as f32 }
    }

    /// Rebuilds the sender's draft record.
    pub fn to_record(&self, side: Side) -> Result<DraftRecord, TransportError> {
        if !self.dist.contains(self.token) {
            return Err(TransportError::Malformed("draft token outside its distribution"));
        }
        Ok(DraftRecord {
            token: self.token,
            dist: dist::topp_decode(&self.dist)?,
            h: CorrectedWeight(self.h),
            decode_ms: self.decode_ms as f64,
            step: self.step,
            side,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TargetMsg {
    pub step: u32,
    pub target: u32,
    pub accept_l: bool,
    pub accept_r: bool,
    pub switch_to: Option<Side>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SwitchMsg {
    pub step: u32,
    pub to: Side,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeKind {
    Ping = 0,
    Pong = 1,
    Ack = 2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProbeMsg {
    pub seq: u32,
    pub kind: ProbeKind,
    pub stamp_us: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Draft(DraftMsg),
    Target(TargetMsg),
    Switch(SwitchMsg),
    Probe(ProbeMsg),
    Hello,
    Bye,
}

impl Message {
    pub fn msg_type(&self) -> MsgType {
        match self {
            Message::Draft(_) => MsgType::Draft,
            Message::Target(_) => MsgType::Target,
            Message::Switch(_) => MsgType::Switch,
            Message::Probe(_) => MsgType::Probe,
            Message::Hello => MsgType::Hello,
            Message::Bye => MsgType::Bye,
        }
    }

    fn write_body(&self, out: &mut Vec<u8>) {
        match self {
            Message::Draft(d) => {
                out.extend_from_slice(&d.step.to_le_bytes());
                out.extend_from_slice(&d.token.to_le_bytes());
                out.extend_from_slice(&d.h.to_le_bytes());
                d.dist.write_to(out);
                out.extend_from_slice(&d.decode_ms.to_le_bytes());
            }
            Message::Target(t) => {
                out.extend_from_slice(&t.step.to_le_bytes());
                out.extend_from_slice(&t.target.to_le_bytes());
                out.push(t.accept_l as u8);
                out.push(t.accept_r as u8);
                out.push(side_code(t.switch_to));
            }
            Message::Switch(s) => {
                out.extend_from_slice(&s.step.to_le_bytes());
                out.push(side_code(Some(s.to)));
            }
            Message::Probe(p) => {
                out.extend_from_slice(&p.seq.to_le_bytes());
                out.push(p.kind as u8);
                out.extend_from_slice(&p.stamp_us.to_le_bytes());
            }
            Message::Hello | Message::Bye => {}
        }
    }

    fn parse_body(msg_type: MsgType, body: &[u8]) -> Result<Message, TransportError> {
        let mut r = BodyReader { buf: body, pos: 0 };
        let msg = match msg_type {
            MsgType::Draft => {
                let step = r.u32()?;
                let token = r.u32()?;
                let h = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
                let (dist, used) = CompressedDist::read_from(&r.buf[r.pos..]).map_err(|e| match e {
                    DistError::Malformed(_) => TransportError::Truncated { need: r.pos + 8, have: body.len() },
                    other => other.into(),
                })?;
                r.pos += used;
                let decode_ms = f32::from_le_bytes(r.take(4)?.try_into().unwrap());
                Message::Draft(DraftMsg { step, token, h, dist, decode_ms })
            }
            MsgType::Target => {
                let step = r.u32()?;
                let target = r.u32()?;
                let accept_l = r.flag()?;
                let accept_r = r.flag()?;
                let switch_to = parse_side(r.u8()?)?;
                Message::Target(TargetMsg { step, target, accept_l, accept_r, switch_to })
            }
            MsgType::Switch => {
                let step = r.u32()?;
                let to = parse_side(r.u8()?)?.ok_or(TransportError::Malformed("switch without target side"))?;
                Message::Switch(SwitchMsg { step, to })
            }
            MsgType::Probe => {
                let seq = r.u32()?;
                let kind = match r.u8()? {
                    0 => ProbeKind::Ping,
                    1 => ProbeKind::Pong,
                    2 => ProbeKind::Ack,
                    _ => return Err(TransportError::Malformed("unknown probe kind")),
                };
                let stamp_us = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
                Message::Probe(ProbeMsg { seq, kind, stamp_us })
            }
            MsgType::Hello => Message::Hello,
            MsgType::Bye => Message::Bye,
        };
        if r.pos != body.len() {
            return Err(TransportError::LengthMismatch { declared: body.len(), actual: r.pos });
        }
        Ok(msg)
    }
}

fn side_code(side: Option<Side>) -> u8 {
    match side {
        None => 0,
        Some(Side::Device) => 1,
        Some(Side::Cloud) => 2,
    }
}

fn parse_side(b: u8) -> Result<Option<Side>, TransportError> {
    match b {
        0 => Ok(None),
        1 => Ok(Some(Side::Device)),
        2 => Ok(Some(Side::Cloud)),
        _ => Err(TransportError::Malformed("unknown side code")),
    }
}

struct BodyReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> BodyReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TransportError> {
        let end = self.pos + n;
        if end > self.buf.len() {
            return Err(TransportError::Truncated { need: end, have: self.buf.len() });
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, TransportError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, TransportError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn flag(&mut self) -> Result<bool, TransportError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(TransportError::Malformed("flag not 0 or 1")),
        }
    }
}

/// Serializes one message into a complete frame.
pub fn encode(msg: &Message, codec: Codec) -> Vec<u8> {
    let mut body = Vec::new();
    msg.write_body(&mut body);
    if codec == Codec::Lz4 {
        body = lz4_flex::block::compress_prepend_size(&body);
    }
    let header = MessageHeader { msg_type: msg.msg_type(), codec, body_len: body.len() as u32 };
    let mut frame = Vec::with_capacity(HEADER_LEN + body.len());
    frame.extend_from_slice(&header.to_bytes());
    frame.extend_from_slice(&body);
    frame
}

fn decode_body(header: &MessageHeader, body: &[u8]) -> Result<Message, TransportError> {
    match header.codec {
        Codec::None => Message::parse_body(header.msg_type, body),
        Codec::Lz4 => {
            let raw = lz4_flex::block::decompress_size_prepended(body).map_err(|e| TransportError::Decompress(e.to_string()))?;
            Message::parse_body(header.msg_type, &raw)
        }
    }
}

/// Parses exactly one frame.
pub fn decode(frame: &[u8]) -> Result<Message, TransportError> {
    let header = MessageHeader::parse(frame)?;
    let declared = header.body_len as usize;
    let have = frame.len() - HEADER_LEN;
    if have < declared {
        return Err(TransportError::Truncated { need: HEADER_LEN + declared, have: frame.len() });
    }
    if have > declared {
        return Err(TransportError::LengthMismatch { declared, actual: have });
    }
    decode_body(&header, &frame[HEADER_LEN..])
}

/// Splits a concatenation of frames back into messages.
pub fn decode_stream(mut bytes: &[u8]) -> Result<Vec<Message>, TransportError> {
    let mut out = Vec::new();
    while !bytes.is_empty() {
        let header = MessageHeader::parse(bytes)?;
        let end = HEADER_LEN + header.body_len as usize;
        if bytes.len() < end {
            return Err(TransportError::Truncated { need: end, have: bytes.len() });
        }
        out.push(decode_body(&header, &bytes[HEADER_LEN..end])?);
        bytes = &bytes[end..];
    }
    Ok(out)
}

/// Blocking frame reader over a byte stream.
pub struct FrameReader<R> {
    inner: R,
    bytes: u64,
}

impl<R: Read> FrameReader<R> {
    pub fn new(inner: R) -> Self {
        FrameReader { inner, bytes: 0 }
    }

    pub fn bytes_read(&self) -> u64 {
        self.bytes
    }

    /// Next message; `Closed` on a clean end of stream between frames.
    pub fn recv(&mut self) -> Result<Message, TransportError> {
        let mut head = [0u8; HEADER_LEN];
        let got = read_full(&mut self.inner, &mut head)?;
        if got == 0 {
            return Err(TransportError::Closed);
        }
        if got < HEADER_LEN {
            return Err(TransportError::Truncated { need: HEADER_LEN, have: got });
        }
        let header = MessageHeader::parse(&head)?;
        let mut body = vec![0u8; header.body_len as usize];
        let got = read_full(&mut self.inner, &mut body)?;
        if got < body.len() {
            return Err(TransportError::Truncated { need: HEADER_LEN + body.len(), have: HEADER_LEN + got });
        }
        self.bytes += (HEADER_LEN + body.len()) as u64;
        decode_body(&header, &body)
    }
}

fn read_full(r: &mut impl Read, buf: &mut [u8]) -> io::Result<usize> {
    let mut n = 0;
    while n < buf.len() {
        match r.read(&mut buf[n..]) {
            Ok(0) => break,
            Ok(k) => n += k,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(n)
}

pub fn send<W: Write>(w: &mut W, msg: &Message, codec: Codec) -> Result<usize, TransportError> {
    let frame = encode(msg, codec);
    w.write_all(&frame)?;
    w.flush()?;
    Ok(frame.len())
}

/// Handle to a writer thread. Each message is held back until `delay` after
/// it was queued, then written in FIFO order.
pub struct Writer {
    tx: Option<mpsc::Sender<(Instant, Message)>>,
    handle: Option<thread::JoinHandle<Result<(), TransportError>>>,
    bytes: Arc<AtomicU64>,
}

impl Writer {
    pub fn spawn<W: Write + Send + 'static>(mut out: W, codec: Codec, delay: Duration) -> Self {
        let (tx, rx) = mpsc::channel::<(Instant, Message)>();
        let bytes = Arc::new(AtomicU64::new(0));
        let counter = Arc::clone(&bytes);
        let handle = thread::Builder::new()
            .name("writer".into())
            .spawn(move || {
                for (queued, msg) in rx {
                    let due = queued + delay;
                    let now = Instant::now();
                    if due > now {
                        thread::sleep(due - now);
                    }
                    let n = send(&mut out, &msg, codec)?;
                    counter.fetch_add(n as u64, Ordering::Relaxed);
                }
                Ok(())
            })
            .expect("spawn writer thread");
        Writer { tx: Some(tx), handle: Some(handle), bytes }
    }

    pub fn send(&self, msg: Message) -> Result<(), TransportError> {
        self.tx.as_ref().ok_or(TransportError::Closed)?.send((Instant::now(), msg)).map_err(|_| TransportError::Closed)
    }

    pub fn bytes_written(&self) -> u64 {
        self.bytes.load(Ordering::Relaxed)
    }

    pub fn byte_counter(&self) -> Arc<AtomicU64> {
        Arc::clone(&self.bytes)
    }

    /// Flushes every queued message and stops the thread.
    pub fn close(mut self) -> Result<(), TransportError> {
        self.shutdown()
    }

    fn shutdown(&mut self) -> Result<(), TransportError> {
        self.tx.take();
        match self.handle.take() {
            Some(h) => h.join().unwrap_or(Err(TransportError::Closed)),
            None => Ok(()),
        }
    }
}

impl Drop for Writer {
    fn drop(&mut self) {
        let _ = self.shutdown();
    }
}

/// Connects, retrying until `timeout` elapses so peers may start in any order.
pub fn connect_with_retry(addr: impl ToSocketAddrs + Clone, timeout: Duration) -> io::Result<TcpStream> {
    let start = Instant::now();
    loop {
        match TcpStream::connect(addr.clone()) {
            Ok(s) => {
                s.set_nodelay(true)?;
                return Ok(s);
            }
            Err(e) if start.elapsed() >= timeout => return Err(e),
            Err(_) => thread::sleep(Duration::from_millis(50)),
        }
    }
}
