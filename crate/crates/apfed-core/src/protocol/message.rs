//! Wire format.
//!
//! Every frame is
//!
//!   "APF1" | version u8 | kind u8 | session u64 | batch u64 | payload_len u32 | payload
//!
//! with all integers little-endian, for a 26-byte header. The batch field
//! carries the global step counter for step-scoped messages, the epoch for
//! EndEpoch, and zero elsewhere. Tensors travel as
//!
//!   ndim u8 | dims u32 each | f32 data row-major
//!
//! and the checkpoint container reuses the same tensor encoding.

use crate::data::psi::IdDigest;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"APF1";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 26;
/// Upper bound a receiver will allocate for one frame's payload.
pub const MAX_PAYLOAD: u32 = 64 * 1024 * 1024;
const MAX_TENSOR_RANK: u8 = 4;

#[derive(Debug, thiserror::Error)]
pub enum WireError {
    #[error("bad frame magic {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported wire version {0}")]
    BadVersion(u8),
    #[error("unknown message kind {0}")]
    BadKind(u8),
    #[error("frame truncated: needed {needed} more bytes at offset {offset} of {len}")]
    Truncated {
        offset: usize,
        needed: usize,
        len: usize,
    },
    #[error("payload of {0} bytes exceeds the {MAX_PAYLOAD} byte cap")]
    PayloadTooLarge(u64),
    #[error("{context}: {detail}")]
    Malformed {
        context: &'static str,
        detail: String,
    },
}

fn malformed(context: &'static str, detail: impl Into<String>) -> WireError {
    WireError::Malformed {
        context,
        detail: detail.into(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    /// Session opener, active side to every peer. Carries everything a peer
    /// needs to derive the batch schedule locally.
    Hello {
        session: u64,
        salt: u64,
        plan_seed: u64,
        batch_size: u32,
        epochs: u32,
    },
    /// A peer's salted id digests, one per local sample.
    AlignOffer {
        session: u64,
        digests: Vec<IdDigest>,
    },
    /// The intersected ids as digests, in canonical training order.
    AlignResult {
        session: u64,
        digests: Vec<IdDigest>,
    },
    /// Representation batch for one training step (or a test sweep).
    ForwardReps {
        session: u64,
        batch: u64,
        reps: Tensor<f32>,
    },
    /// Gradient of the sender's objective with respect to the received
    /// representations, plus the objective's value for reporting.
    Grads {
        session: u64,
        batch: u64,
        grads: Tensor<f32>,
        loss: f32,
    },
    /// Barrier reply confirming the sender finished its local update.
    StepAck { session: u64, batch: u64 },
    EndEpoch { session: u64, epoch: u64 },
    Shutdown { session: u64 },
    /// Fatal condition; the connection is dead after this.
    Error { session: u64, text: String },
}

impl Message {
    pub fn kind(&self) -> u8 {
        match self {
            Message::Hello { .. } => 0,
            Message::AlignOffer { .. } => 1,
            Message::AlignResult { .. } => 2,
            Message::ForwardReps { .. } => 3,
            Message::Grads { .. } => 4,
            Message::StepAck { .. } => 5,
            Message::EndEpoch { .. } => 6,
            Message::Shutdown { .. } => 7,
            Message::Error { .. } => 8,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Message::Hello { .. } => "Hello",
            Message::AlignOffer { .. } => "AlignOffer",
            Message::AlignResult { .. } => "AlignResult",
            Message::ForwardReps { .. } => "ForwardReps",
            Message::Grads { .. } => "Grads",
            Message::StepAck { .. } => "StepAck",
            Message::EndEpoch { .. } => "EndEpoch",
            Message::Shutdown { .. } => "Shutdown",
            Message::Error { .. } => "Error",
        }
    }

    pub fn session(&self) -> u64 {
        match self {
            Message::Hello { session, .. }
            | Message::AlignOffer { session, .. }
            | Message::AlignResult { session, .. }
            | Message::ForwardReps { session, .. }
            | Message::Grads { session, .. }
            | Message::StepAck { session, .. }
            | Message::EndEpoch { session, .. }
            | Message::Shutdown { session }
            | Message::Error { session, .. } => *session,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let (batch, payload) = match self {
            Message::Hello {
                salt,
                plan_seed,
                batch_size,
                epochs,
                ..
            } => {
                let mut p = Vec::with_capacity(24);
                p.extend_from_slice(&salt.to_le_bytes());
                p.extend_from_slice(&plan_seed.to_le_bytes());
                p.extend_from_slice(&batch_size.to_le_bytes());
                p.extend_from_slice(&epochs.to_le_bytes());
                (0, p)
            }
            Message::AlignOffer { digests, .. } | Message::AlignResult { digests, .. } => {
                let mut p = Vec::with_capacity(4 + digests.len() * 32);
                p.extend_from_slice(&(digests.len() as u32).to_le_bytes());
                for d in digests {
                    p.extend_from_slice(d);
                }
                (0, p)
            }
            Message::ForwardReps { batch, reps, .. } => {
                let mut p = Vec::new();
                encode_tensor(&mut p, reps);
                (*batch, p)
            }
            Message::Grads {
                batch,
                grads,
                loss,
                ..
            } => {
                let mut p = Vec::new();
                encode_tensor(&mut p, grads);
                encode_tensor(&mut p, &Tensor::scalar(*loss));
                (*batch, p)
            }
            Message::StepAck { batch, .. } => (*batch, Vec::new()),
            Message::EndEpoch { epoch, .. } => (*epoch, Vec::new()),
            Message::Shutdown { .. } => (0, Vec::new()),
            Message::Error { text, .. } => (0, text.as_bytes().to_vec()),
        };

        let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(self.kind());
        out.extend_from_slice(&self.session().to_le_bytes());
        out.extend_from_slice(&batch.to_le_bytes());
        out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&payload);
        out
    }

    /// Decodes one complete frame. Trailing bytes are an error; framing is
    /// the transport's job.
    pub fn decode(frame: &[u8]) -> Result<Message, WireError> {
        let mut r = Reader::new(frame);
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(WireError::BadMagic {
                found: [magic[0], magic[1], magic[2], magic[3]],
            });
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(WireError::BadVersion(version));
        }
        let kind = r.u8()?;
        let session = r.u64()?;
        let batch = r.u64()?;
        let payload_len = r.u32()?;
        if payload_len > MAX_PAYLOAD {
            return Err(WireError::PayloadTooLarge(payload_len as u64));
        }
        let payload = r.take(payload_len as usize)?;
        if !r.is_empty() {
            return Err(malformed(
                "frame",
                format!("{} trailing bytes after payload", r.remaining()),
            ));
        }

        let mut p = Reader::new(payload);
        let msg = match kind {
            0 => {
                let salt = p.u64()?;
                let plan_seed = p.u64()?;
                let batch_size = p.u32()?;
                let epochs = p.u32()?;
                Message::Hello {
                    session,
                    salt,
                    plan_seed,
                    batch_size,
                    epochs,
                }
            }
            1 | 2 => {
                let count = p.u32()? as usize;
                if count > payload_len as usize / 32 {
                    return Err(malformed(
                        "digest list",
                        format!("claim of {count} digests exceeds payload"),
                    ));
                }
                let mut digests = Vec::with_capacity(count);
                for _ in 0..count {
                    let d = p.take(32)?;
                    let mut arr = [0u8; 32];
                    arr.copy_from_slice(d);
                    digests.push(arr);
                }
                if kind == 1 {
                    Message::AlignOffer { session, digests }
                } else {
                    Message::AlignResult { session, digests }
                }
            }
            3 => Message::ForwardReps {
                session,
                batch,
                reps: decode_tensor(&mut p)?,
            },
            4 => {
                let grads = decode_tensor(&mut p)?;
                let loss_t = decode_tensor(&mut p)?;
                if loss_t.numel() != 1 {
                    return Err(malformed(
                        "grads",
                        format!("loss tensor has {} elements", loss_t.numel()),
                    ));
                }
                Message::Grads {
                    session,
                    batch,
                    grads,
                    loss: loss_t.data()[0],
                }
            }
            5 => Message::StepAck { session, batch },
            6 => Message::EndEpoch {
                session,
                epoch: batch,
            },
            7 => Message::Shutdown { session },
            8 => Message::Error {
                session,
                text: String::from_utf8(p.take(payload_len as usize)?.to_vec())
                    .map_err(|e| malformed("error text", e.to_string()))?,
            },
            k => return Err(WireError::BadKind(k)),
        };
        if !p.is_empty() {
            return Err(malformed(
                "payload",
                format!("{} unread bytes in {} payload", p.remaining(), msg.kind_name()),
            ));
        }
        Ok(msg)
    }
}

/// Appends the tensor encoding to `out`.
pub fn encode_tensor(out: &mut Vec<u8>, t: &Tensor<f32>) {
    debug_assert!(t.rank() <= MAX_TENSOR_RANK as usize);
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Reads one tensor from the reader's current position.
pub fn decode_tensor(r: &mut Reader<'_>) -> Result<Tensor<f32>, WireError> {
    let ndim = r.u8()?;
    if ndim > MAX_TENSOR_RANK {
        return Err(malformed("tensor", format!("rank {ndim} too large")));
    }
    let mut shape = Vec::with_capacity(ndim as usize);
    let mut numel: u64 = 1;
    for _ in 0..ndim {
        let d = r.u32()? as u64;
        numel = numel.saturating_mul(d);
        shape.push(d as usize);
    }
    if numel * 4 > MAX_PAYLOAD as u64 {
        return Err(WireError::PayloadTooLarge(numel * 4));
    }
    let bytes = r.take(numel as usize * 4)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Tensor::new(shape, data))
}

/// Bounds-checked little-endian cursor over a byte slice.
pub struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, offset: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.offset + n > self.bytes.len() {
            return Err(WireError::Truncated {
                offset: self.offset,
                needed: n - (self.bytes.len() - self.offset),
                len: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, WireError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub fn u32(&mut self) -> Result<u32, WireError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn u64(&mut self) -> Result<u64, WireError> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub fn is_empty(&self) -> bool {
        self.offset == self.bytes.len()
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.offset
    }
}

/// Parses payload length out of a raw header, validating magic and version.
/// Transports use this to frame reads from a byte stream.
pub fn payload_len(header: &[u8; HEADER_LEN]) -> Result<u32, WireError> {
    if header[..4] != MAGIC {
        return Err(WireError::BadMagic {
            found: [header[0], header[1], header[2], header[3]],
        });
    }
    if header[4] != VERSION {
        return Err(WireError::BadVersion(header[4]));
    }
    let len = u32::from_le_bytes([header[22], header[23], header[24], header[25]]);
    if len > MAX_PAYLOAD {
        return Err(WireError::PayloadTooLarge(len as u64));
    }
    Ok(len)
}
