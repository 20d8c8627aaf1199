//! Wire format between clients and server.
//!
//! A frame is `[length: u32 BE][version: u8][type: u8][payload]`, where
//! `length` counts everything after itself (so an empty-payload frame is 6
//! bytes total). Payload integers are little-endian fixed width, reals are
//! little-endian `f64`, and variable-length sequences carry a `u32` count
//! prefix. Cluster labels travel as `i32` with `-1` meaning noise.
//!
//! Model parameters use one shared blob layout,
//! `[kind: u8][input: u32][hidden: u32][output: u32][count: u32][f64 x count]`,
//! reused verbatim inside upload/global/join-reply payloads and, with a
//! leading version byte, as the standalone serialized form used in snapshot
//! files.

use thiserror::Error;

use crate::clustering::Label;
use crate::embedding::EmbeddingVector;
use crate::learner::{ArchKind, ArchSpec, ModelParams};

pub const PROTOCOL_VERSION: u8 = 1;
/// Upper bound on the `length` field; anything larger is treated as a
/// corrupt stream rather than an allocation request.
pub const MAX_FRAME: u32 = 64 * 1024 * 1024;

pub const MSG_REGISTER: u8 = 1;
pub const MSG_UPLOAD: u8 = 2;
pub const MSG_GLOBAL: u8 = 3;
pub const MSG_JOIN: u8 = 4;
pub const MSG_JOIN_REPLY: u8 = 5;
pub const MSG_ROUND_BEGIN: u8 = 6;
pub const MSG_SHUTDOWN: u8 = 7;
pub const MSG_RAW_DATA: u8 = 8;

/// Parameters and embeddings cross the wire at fixed f64 width.
pub type WireParams = ModelParams<f64>;
pub type WireEmbedding = EmbeddingVector<f64>;

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    /// Client announces itself before the first round.
    Register { client_id: u64 },
    /// One client's round result: trained weights plus its mean data
    /// embedding and how many samples it trained on.
    Upload {
        client_id: u64,
        round: u64,
        num_samples: u64,
        params: WireParams,
        embedding: WireEmbedding,
    },
    /// Server's reply after aggregation. Noise clients get no model and
    /// keep their local weights.
    Global {
        round: u64,
        label: Label,
        params: Option<WireParams>,
    },
    /// A new client asks for a cluster assignment mid-run.
    Join {
        client_id: u64,
        embedding: WireEmbedding,
    },
    JoinReply {
        label: Label,
        params: Option<WireParams>,
    },
    /// Server tells everyone to start local training for `round`.
    RoundBegin { round: u64 },
    Shutdown,
    /// A client's raw dataset, inputs then targets per row. Only the
    /// centralized baseline ships this; it exists so raw-data traffic is
    /// measured by the same codec as everything else.
    RawData {
        client_id: u64,
        inputs: Vec<Vec<f64>>,
        targets: Vec<Vec<f64>>,
    },
}

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("unsupported protocol version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown message type {0}")]
    UnknownMessageType(u8),
    #[error("frame of {0} bytes exceeds the {max} byte limit", max = MAX_FRAME)]
    FrameTooLarge(u64),
    #[error("truncated frame while reading {0}")]
    Truncated(&'static str),
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("invalid payload: {0}")]
    InvalidPayload(String),
}

// ---- primitive writers ----

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_i32(out: &mut Vec<u8>, v: i32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_label(out: &mut Vec<u8>, label: Label) {
    match label {
        Label::Noise => put_i32(out, -1),
        Label::Cluster(c) => put_i32(out, c as i32),
    }
}

fn put_floats(out: &mut Vec<u8>, values: &[f64]) {
    put_u32(out, values.len() as u32);
    for &v in values {
        put_f64(out, v);
    }
}

/// Parameter blob as embedded in frames (no version byte).
pub fn write_params_blob(params: &WireParams, out: &mut Vec<u8>) {
    let arch = params.arch();
    out.push(match arch.kind {
        ArchKind::Linear => 0,
        ArchKind::Mlp => 1,
    });
    put_u32(out, arch.input_dim as u32);
    put_u32(out, arch.hidden_dim as u32);
    put_u32(out, arch.output_dim as u32);
    put_floats(out, params.values());
}

/// Standalone serialized form: a version byte followed by the blob.
pub fn serialize_params(params: &WireParams) -> Vec<u8> {
    let mut out = vec![PROTOCOL_VERSION];
    write_params_blob(params, &mut out);
    out
}

// ---- primitive readers ----

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], ProtocolError> {
        if self.buf.len() - self.pos < n {
            return Err(ProtocolError::Truncated(what));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self, what: &'static str) -> Result<u8, ProtocolError> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u32(&mut self, what: &'static str) -> Result<u32, ProtocolError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, what: &'static str) -> Result<u64, ProtocolError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn i32(&mut self, what: &'static str) -> Result<i32, ProtocolError> {
        Ok(i32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self, what: &'static str) -> Result<f64, ProtocolError> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn label(&mut self, what: &'static str) -> Result<Label, ProtocolError> {
        match self.i32(what)? {
            -1 => Ok(Label::Noise),
            c if c >= 0 => Ok(Label::Cluster(c as u32)),
            c => Err(ProtocolError::InvalidPayload(format!(
                "label {} out of range",
                c
            ))),
        }
    }

    pub(crate) fn floats(&mut self, what: &'static str) -> Result<Vec<f64>, ProtocolError> {
        let n = self.u32(what)? as usize;
        let raw = self.take(n * 8, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn finish(self) -> Result<(), ProtocolError> {
        let extra = self.buf.len() - self.pos;
        if extra != 0 {
            return Err(ProtocolError::TrailingBytes(extra));
        }
        Ok(())
    }
}

pub(crate) fn read_params_blob(r: &mut Reader) -> Result<WireParams, ProtocolError> {
    let kind = match r.u8("arch kind")? {
        0 => ArchKind::Linear,
        1 => ArchKind::Mlp,
        k => {
            return Err(ProtocolError::InvalidPayload(format!(
                "unknown arch kind {}",
                k
            )))
        }
    };
    let input_dim = r.u32("input_dim")? as usize;
    let hidden_dim = r.u32("hidden_dim")? as usize;
    let output_dim = r.u32("output_dim")? as usize;
    let values = r.floats("parameter values")?;
    let arch = ArchSpec {
        kind,
        input_dim,
        hidden_dim,
        output_dim,
    };
    ModelParams::new(arch, values).map_err(|e| ProtocolError::InvalidPayload(e.to_string()))
}

pub fn deserialize_params(bytes: &[u8]) -> Result<WireParams, ProtocolError> {
    let mut r = Reader::new(bytes);
    let version = r.u8("version")?;
    if version != PROTOCOL_VERSION {
        return Err(ProtocolError::UnsupportedVersion(version));
    }
    let params = read_params_blob(&mut r)?;
    r.finish()?;
    Ok(params)
}

fn read_embedding(r: &mut Reader) -> Result<WireEmbedding, ProtocolError> {
    let values = r.floats("embedding values")?;
    if values.is_empty() {
        return Err(ProtocolError::InvalidPayload("empty embedding".into()));
    }
    Ok(EmbeddingVector::new(values))
}

fn read_optional_params(
    r: &mut Reader,
    label: Label,
) -> Result<Option<WireParams>, ProtocolError> {
    let present = r.u8("model presence flag")?;
    match (label, present) {
        (_, 0) => Ok(None),
        (Label::Noise, _) => Err(ProtocolError::InvalidPayload(
            "noise label cannot carry a model".into(),
        )),
        (_, 1) => Ok(Some(read_params_blob(r)?)),
        (_, f) => Err(ProtocolError::InvalidPayload(format!(
            "model presence flag {} is not 0 or 1",
            f
        ))),
    }
}

// ---- frame codec ----

fn payload_of(msg: &Message) -> Vec<u8> {
    let mut p = Vec::new();
    match msg {
        Message::Register { client_id } => {
            put_u64(&mut p, *client_id);
        }
        Message::Upload {
            client_id,
            round,
            num_samples,
            params,
            embedding,
        } => {
            put_u64(&mut p, *client_id);
            put_u64(&mut p, *round);
            put_u64(&mut p, *num_samples);
            write_params_blob(params, &mut p);
            put_floats(&mut p, &embedding.values);
        }
        Message::Global {
            round,
            label,
            params,
        } => {
            put_u64(&mut p, *round);
            put_label(&mut p, *label);
            match params {
                None => p.push(0),
                Some(m) => {
                    p.push(1);
                    write_params_blob(m, &mut p);
                }
            }
        }
        Message::Join {
            client_id,
            embedding,
        } => {
            put_u64(&mut p, *client_id);
            put_floats(&mut p, &embedding.values);
        }
        Message::JoinReply { label, params } => {
            put_label(&mut p, *label);
            match params {
                None => p.push(0),
                Some(m) => {
                    p.push(1);
                    write_params_blob(m, &mut p);
                }
            }
        }
        Message::RoundBegin { round } => {
            put_u64(&mut p, *round);
        }
        Message::Shutdown => {}
        Message::RawData {
            client_id,
            inputs,
            targets,
        } => {
            put_u64(&mut p, *client_id);
            let rows = inputs.len() as u32;
            let d_in = inputs.first().map_or(0, |r| r.len()) as u32;
            let d_out = targets.first().map_or(0, |r| r.len()) as u32;
            put_u32(&mut p, rows);
            put_u32(&mut p, d_in);
            put_u32(&mut p, d_out);
            for (x, y) in inputs.iter().zip(targets) {
                for &v in x {
                    put_f64(&mut p, v);
                }
                for &v in y {
                    put_f64(&mut p, v);
                }
            }
        }
    }
    p
}

fn type_of(msg: &Message) -> u8 {
    match msg {
        Message::Register { .. } => MSG_REGISTER,
        Message::Upload { .. } => MSG_UPLOAD,
        Message::Global { .. } => MSG_GLOBAL,
        Message::Join { .. } => MSG_JOIN,
        Message::JoinReply { .. } => MSG_JOIN_REPLY,
        Message::RoundBegin { .. } => MSG_ROUND_BEGIN,
        Message::Shutdown => MSG_SHUTDOWN,
        Message::RawData { .. } => MSG_RAW_DATA,
    }
}

/// Encode a message as one complete frame.
pub fn encode(msg: &Message) -> Vec<u8> {
    let payload = payload_of(msg);
    let len = (payload.len() + 2) as u32;
    let mut frame = Vec::with_capacity(4 + len as usize);
    frame.extend_from_slice(&len.to_be_bytes());
    frame.push(PROTOCOL_VERSION);
    frame.push(type_of(msg));
    frame.extend_from_slice(&payload);
    frame
}

/// Exact on-wire size of a message in bytes.
pub fn measure(msg: &Message) -> u64 {
    encode(msg).len() as u64
}

/// Decode one complete frame (header included).
pub fn decode_frame(frame: &[u8]) -> Result<Message, ProtocolError> {
    if frame.len() < 4 {
        return Err(ProtocolError::Truncated("frame length"));
    }
    let len = u32::from_be_bytes(frame[..4].try_into().unwrap());
    if len > MAX_FRAME {
        return Err(ProtocolError::FrameTooLarge(len as u64));
    }
    if frame.len() != 4 + len as usize {
        return Err(ProtocolError::Truncated("frame body"));
    }
    let mut r = Reader::new(&frame[4..]);
    let version = r.u8("version")?;
    if version != PROTOCOL_VERSION {
        return Err(ProtocolError::UnsupportedVersion(version));
    }
    let msg_type = r.u8("message type")?;
    let msg = match msg_type {
        MSG_REGISTER => Message::Register {
            client_id: r.u64("client_id")?,
        },
        MSG_UPLOAD => {
            let client_id = r.u64("client_id")?;
            let round = r.u64("round")?;
            let num_samples = r.u64("num_samples")?;
            let params = read_params_blob(&mut r)?;
            let embedding = read_embedding(&mut r)?;
            Message::Upload {
                client_id,
                round,
                num_samples,
                params,
                embedding,
            }
        }
        MSG_GLOBAL => {
            let round = r.u64("round")?;
            let label = r.label("label")?;
            let params = read_optional_params(&mut r, label)?;
            Message::Global {
                round,
                label,
                params,
            }
        }
        MSG_JOIN => {
            let client_id = r.u64("client_id")?;
            let embedding = read_embedding(&mut r)?;
            Message::Join {
                client_id,
                embedding,
            }
        }
        MSG_JOIN_REPLY => {
            let label = r.label("label")?;
            let params = read_optional_params(&mut r, label)?;
            Message::JoinReply { label, params }
        }
        MSG_ROUND_BEGIN => Message::RoundBegin {
            round: r.u64("round")?,
        },
        MSG_SHUTDOWN => Message::Shutdown,
        MSG_RAW_DATA => {
            let client_id = r.u64("client_id")?;
            let rows = r.u32("rows")? as usize;
            let d_in = r.u32("input_dim")? as usize;
            let d_out = r.u32("output_dim")? as usize;
            let mut inputs = Vec::with_capacity(rows);
            let mut targets = Vec::with_capacity(rows);
            for _ in 0..rows {
                let mut x = Vec::with_capacity(d_in);
                for _ in 0..d_in {
                    x.push(r.f64("input value")?);
                }
                let mut y = Vec::with_capacity(d_out);
                for _ in 0..d_out {
                    y.push(r.f64("target value")?);
                }
                inputs.push(x);
                targets.push(y);
            }
            Message::RawData {
                client_id,
                inputs,
                targets,
            }
        }
        t => return Err(ProtocolError::UnknownMessageType(t)),
    };
    r.finish()?;
    Ok(msg)
}

/// Incremental decoder over a byte stream that may deliver frames in
/// arbitrary fragments.
#[derive(Debug, Default)]
pub struct StreamDecoder {
    buf: Vec<u8>,
}

impl StreamDecoder {
    pub fn new() -> Self {
        StreamDecoder::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Next complete message, or `None` if the buffered bytes end
    /// mid-frame.
    pub fn next_message(&mut self) -> Result<Option<Message>, ProtocolError> {
        if self.buf.len() < 4 {
            return Ok(None);
        }
        let len = u32::from_be_bytes(self.buf[..4].try_into().unwrap());
        if len > MAX_FRAME {
            return Err(ProtocolError::FrameTooLarge(len as u64));
        }
        let total = 4 + len as usize;
        if self.buf.len() < total {
            return Ok(None);
        }
        let frame: Vec<u8> = self.buf.drain(..total).collect();
        decode_frame(&frame).map(Some)
    }

    /// Bytes buffered but not yet forming a complete frame.
    pub fn pending_bytes(&self) -> usize {
        self.buf.len()
    }
}
