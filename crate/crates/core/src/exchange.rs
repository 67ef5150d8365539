//! Messages between the slow and fast components, their wire codec, the
//! upload scheduler and per-direction FIFO links.
//!
//! Wire layout (little-endian):
//!
//! ```text
//! "MCSF" | version u8 = 1 | kind u8 | user u64 | round u32 | payload count u16 |
//!   count x { name_len u16 | name utf-8 | rank u8 | dims u32.. | f32 data.. }
//! ```
//!
//! Message logs on disk are a sequence of `u32` length-prefixed frames.

use std::collections::{HashMap, VecDeque};
use std::io::{Read, Write};

use thiserror::Error;

use crate::fast::NegativeMemoryExport;
use crate::layers::GruCell;
use crate::slow::InterestExport;
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 4] = b"MCSF";
pub const VERSION: u8 = 1;
/// Bytes before the first payload entry.
pub const HEADER_LEN: usize = 4 + 1 + 1 + 8 + 4 + 2;

pub const R_N: &str = "r_n";
pub const R_T: &str = "r_t";
pub const R_HAT2: &str = "r_hat2";

#[derive(Debug, Error, PartialEq)]
pub enum ExchangeError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    UnsupportedVersion(u8),
    #[error("truncated at byte {offset}")]
    Truncated { offset: usize },
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("stale round {round} for user {user} (last accepted {last})")]
    StaleRound { user: u64, round: u32, last: u32 },
    #[error("threshold must be at least 1")]
    ZeroThreshold,
    #[error("i/o: {0}")]
    Io(String),
}

impl From<std::io::Error> for ExchangeError {
    fn from(e: std::io::Error) -> Self {
        ExchangeError::Io(e.to_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum MessageKind {
    /// Cloud to device: `{r_n, r_t}`.
    InterestDown = 1,
    /// Device to cloud: `{r_hat2}`.
    NegativeMemoryUp = 2,
    /// Cloud to device: the nine `GRU_n` tensors.
    GruNSync = 3,
}

impl MessageKind {
    pub const ALL: [MessageKind; 3] = [
        MessageKind::InterestDown,
        MessageKind::NegativeMemoryUp,
        MessageKind::GruNSync,
    ];

    pub fn from_byte(b: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|k| *k as u8 == b)
    }

    pub fn is_upload(self) -> bool {
        self == MessageKind::NegativeMemoryUp
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExchangeMessage {
    pub kind: MessageKind,
    pub user: u64,
    pub round: u32,
    pub payload: Vec<(String, Tensor<f32>)>,
}

impl ExchangeMessage {
    /// Check the payload against the kind's schema.
    pub fn validate(&self) -> Result<(), ExchangeError> {
        let violation = |m: String| Err(ExchangeError::SchemaViolation(m));
        let names: Vec<&str> = self.payload.iter().map(|(n, _)| n.as_str()).collect();
        match self.kind {
            MessageKind::InterestDown => {
                if names != [R_N, R_T] {
                    return violation(format!("InterestDown carries {names:?}"));
                }
                let (a, b) = (&self.payload[0].1, &self.payload[1].1);
                if a.shape().len() != 1 || a.shape() != b.shape() {
                    return violation(format!(
                        "InterestDown vectors have shapes {:?} and {:?}",
                        a.shape(),
                        b.shape()
                    ));
                }
            }
            MessageKind::NegativeMemoryUp => {
                if names != [R_HAT2] {
                    return violation(format!("NegativeMemoryUp carries {names:?}"));
                }
                if self.payload[0].1.shape().len() != 1 {
                    return violation(format!(
                        "r_hat2 has shape {:?}",
                        self.payload[0].1.shape()
                    ));
                }
            }
            MessageKind::GruNSync => {
                if names != GruCell::PARAM_NAMES {
                    return violation(format!("GruNSync carries {names:?}"));
                }
                let hidden = self.payload[6].1.cols();
                let input = self.payload[0].1.rows();
                for (name, t) in &self.payload {
                    let rows = match &name[..1] {
                        "w" => input,
                        "u" => hidden,
                        _ => 1,
                    };
                    if t.shape() != [rows, hidden] {
                        return violation(format!("{name} has shape {:?}", t.shape()));
                    }
                }
            }
        }
        if self.payload.iter().any(|(_, t)| !t.is_finite()) {
            return violation("non-finite payload".into());
        }
        Ok(())
    }
}

/// Validate and encode.
pub fn encode_message(msg: &ExchangeMessage) -> Result<Vec<u8>, ExchangeError> {
    msg.validate()?;
    Ok(encode_frame(msg))
}

/// Encode the raw layout without schema checks.
pub fn encode_frame(msg: &ExchangeMessage) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 64 * msg.payload.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(msg.kind as u8);
    out.extend_from_slice(&msg.user.to_le_bytes());
    out.extend_from_slice(&msg.round.to_le_bytes());
    out.extend_from_slice(&(msg.payload.len() as u16).to_le_bytes());
    for (name, t) in &msg.payload {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ExchangeError> {
        if self.buf.len() - self.pos < n {
            return Err(ExchangeError::Truncated { offset: self.pos });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ExchangeError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ExchangeError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, ExchangeError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, ExchangeError> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

pub fn decode_message(bytes: &[u8]) -> Result<ExchangeMessage, ExchangeError> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(ExchangeError::BadMagic);
    }
    let version = c.u8()?;
    if version != VERSION {
        return Err(ExchangeError::UnsupportedVersion(version));
    }
    let kind_byte = c.u8()?;
    let kind = MessageKind::from_byte(kind_byte)
        .ok_or_else(|| ExchangeError::SchemaViolation(format!("unknown kind {kind_byte}")))?;
    let user = c.u64()?;
    let round = c.u32()?;
    let count = c.u16()?;
    let mut payload = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| ExchangeError::SchemaViolation("payload name is not UTF-8".into()))?
            .to_string();
        let rank = c.u8()?;
        let dims = (0..rank)
            .map(|_| c.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n: usize = dims.iter().product();
        let raw = c.take(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let t = Tensor::new(dims, data)
            .map_err(|e| ExchangeError::SchemaViolation(e.to_string()))?;
        payload.push((name, t));
    }
    if c.pos != bytes.len() {
        return Err(ExchangeError::SchemaViolation(format!(
            "{} trailing bytes",
            bytes.len() - c.pos
        )));
    }
    let msg = ExchangeMessage {
        kind,
        user,
        round,
        payload,
    };
    msg.validate()?;
    Ok(msg)
}

fn vector<T: Real>(values: &[T]) -> Tensor<f32> {
    Tensor::new(vec![values.len()], values.iter().map(|v| v.as_f64() as f32).collect())
        .expect("rank-1 shape")
}

fn unvector<T: Real>(t: &Tensor<f32>) -> Vec<T> {
    t.data().iter().map(|&v| T::lit(v as f64)).collect()
}

impl<T: Real> InterestExport<T> {
    pub fn to_message(&self) -> ExchangeMessage {
        ExchangeMessage {
            kind: MessageKind::InterestDown,
            user: self.user,
            round: self.round,
            payload: vec![(R_N.into(), vector(&self.r_n)), (R_T.into(), vector(&self.r_t))],
        }
    }

    pub fn from_message(msg: &ExchangeMessage) -> Result<Self, ExchangeError> {
        if msg.kind != MessageKind::InterestDown {
            return Err(ExchangeError::SchemaViolation(format!(
                "expected InterestDown, got {:?}",
                msg.kind
            )));
        }
        msg.validate()?;
        Ok(Self {
            user: msg.user,
            round: msg.round,
            r_n: unvector(&msg.payload[0].1),
            r_t: unvector(&msg.payload[1].1),
        })
    }
}

impl<T: Real> NegativeMemoryExport<T> {
    pub fn to_message(&self, round: u32) -> ExchangeMessage {
        ExchangeMessage {
            kind: MessageKind::NegativeMemoryUp,
            user: self.user,
            round,
            payload: vec![(R_HAT2.into(), vector(&self.r_hat2))],
        }
    }

    /// The exposure count is device-local and does not travel.
    pub fn from_message(msg: &ExchangeMessage) -> Result<Self, ExchangeError> {
        if msg.kind != MessageKind::NegativeMemoryUp {
            return Err(ExchangeError::SchemaViolation(format!(
                "expected NegativeMemoryUp, got {:?}",
                msg.kind
            )));
        }
        msg.validate()?;
        Ok(Self {
            user: msg.user,
            r_hat2: unvector(&msg.payload[0].1),
            count: 0,
        })
    }
}

pub fn gru_sync_message(user: u64, round: u32, tensors: Vec<(String, Tensor<f32>)>) -> ExchangeMessage {
    ExchangeMessage {
        kind: MessageKind::GruNSync,
        user,
        round,
        payload: tensors,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    Accumulate,
    UploadNow,
}

/// Event-count upload cadence, tracked per user.
#[derive(Clone, Debug)]
pub struct Scheduler {
    threshold: u32,
    counters: HashMap<u64, u32>,
    rounds: HashMap<u64, u32>,
}

impl Scheduler {
    pub fn new(threshold: u32) -> Result<Self, ExchangeError> {
        if threshold == 0 {
            return Err(ExchangeError::ZeroThreshold);
        }
        Ok(Self {
            threshold,
            counters: HashMap::new(),
            rounds: HashMap::new(),
        })
    }

    pub fn threshold(&self) -> u32 {
        self.threshold
    }

    /// Count one event for `user`; on reaching the threshold the counter resets.
    pub fn tick(&mut self, user: u64) -> Decision {
        let c = self.counters.entry(user).or_insert(0);
        *c += 1;
        if *c >= self.threshold {
            *c = 0;
            Decision::UploadNow
        } else {
            Decision::Accumulate
        }
    }

    pub fn counter(&self, user: u64) -> u32 {
        self.counters.get(&user).copied().unwrap_or(0)
    }

    /// Next (strictly increasing, from 1) upload round for `user`.
    pub fn next_round(&mut self, user: u64) -> u32 {
        let r = self.rounds.entry(user).or_insert(0);
        *r += 1;
        *r
    }
}

/// Rejects messages whose round is not newer than the last accepted one.
#[derive(Clone, Debug, Default)]
pub struct RoundGuard {
    last: HashMap<u64, u32>,
}

impl RoundGuard {
    pub fn accept(&mut self, user: u64, round: u32) -> Result<(), ExchangeError> {
        match self.last.get(&user) {
            Some(&last) if round <= last => Err(ExchangeError::StaleRound { user, round, last }),
            _ => {
                self.last.insert(user, round);
                Ok(())
            }
        }
    }
}

/// One direction of the component link: a FIFO of encoded frames.
#[derive(Clone, Debug, Default)]
pub struct Link {
    queue: VecDeque<Vec<u8>>,
    log: Vec<Vec<u8>>,
}

impl Link {
    pub fn send(&mut self, msg: &ExchangeMessage) -> Result<(), ExchangeError> {
        let frame = encode_message(msg)?;
        self.log.push(frame.clone());
        self.queue.push_back(frame);
        Ok(())
    }

    pub fn recv(&mut self) -> Option<Result<ExchangeMessage, ExchangeError>> {
        self.queue.pop_front().map(|f| decode_message(&f))
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    /// Every frame ever sent, in order.
    pub fn log(&self) -> &[Vec<u8>] {
        &self.log
    }
}

/// Per-kind message counts from a set of frames.
pub fn count_kinds(frames: &[Vec<u8>]) -> HashMap<MessageKind, usize> {
    let mut out = HashMap::new();
    for f in frames {
        if let Some(kind) = f.get(5).copied().and_then(MessageKind::from_byte) {
            *out.entry(kind).or_insert(0) += 1;
        }
    }
    out
}

pub fn write_log<W: Write>(mut w: W, frames: &[Vec<u8>]) -> Result<(), ExchangeError> {
    for f in frames {
        w.write_all(&(f.len() as u32).to_le_bytes())?;
        w.write_all(f)?;
    }
    Ok(())
}

pub fn read_log<R: Read>(mut r: R) -> Result<Vec<Vec<u8>>, ExchangeError> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    let mut frames = Vec::new();
    while c.pos < buf.len() {
        let len = c.u32()? as usize;
        frames.push(c.take(len)?.to_vec());
    }
    Ok(frames)
}
