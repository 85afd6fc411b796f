//! Wire protocol: a fixed 54-byte handshake followed by length-prefixed
//! frames, BitTorrent style.
//!
//! Frame layout is `length: u32 BE | type: u8 | payload`, where `length`
//! counts the type byte and payload. A zero length is a keepalive with no
//! type byte at all.

pub const PROTOCOL_TAG: &[u8; 13] = b"HEKATE-MINI/1";
pub const HANDSHAKE_LEN: usize = 54;

/// Largest chunk a peer may ask for in one request.
pub const MAX_REQUEST_LEN: u32 = 16 * 1024;
/// Largest frame the decoder accepts: a max-size piece plus its header,
/// rounded up. Anything longer is a protocol violation, not backpressure.
pub const MAX_FRAME_LEN: u32 = 32 * 1024;

pub const MSG_CHOKE: u8 = 0;
pub const MSG_UNCHOKE: u8 = 1;
pub const MSG_INTERESTED: u8 = 2;
pub const MSG_NOT_INTERESTED: u8 = 3;
pub const MSG_REQUEST: u8 = 6;
pub const MSG_PIECE: u8 = 7;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    KeepAlive,
    Choke,
    Unchoke,
    Interested,
    NotInterested,
    Request { index: u32, begin: u32, length: u32 },
    Piece { index: u32, begin: u32, data: Vec<u8> },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum WireError {
    #[error("frame of {0} bytes exceeds the {MAX_FRAME_LEN} byte cap")]
    FrameTooLong(u32),
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("message type {msg_type} cannot carry {len} payload bytes")]
    BadLength { msg_type: u8, len: usize },
    #[error("handshake does not start with the protocol tag")]
    BadProtocolTag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Handshake {
    pub info_hash: [u8; 20],
    pub peer_id: [u8; 20],
}

pub fn encode_handshake(info_hash: &[u8; 20], peer_id: &[u8; 20]) -> [u8; HANDSHAKE_LEN] {
    let mut out = [0u8; HANDSHAKE_LEN];
    out[0] = PROTOCOL_TAG.len() as u8;
    out[1..14].copy_from_slice(PROTOCOL_TAG);
    out[14..34].copy_from_slice(info_hash);
    out[34..54].copy_from_slice(peer_id);
    out
}

pub fn decode_handshake(bytes: &[u8; HANDSHAKE_LEN]) -> Result<Handshake, WireError> {
    if bytes[0] as usize != PROTOCOL_TAG.len() || &bytes[1..14] != PROTOCOL_TAG {
        return Err(WireError::BadProtocolTag);
    }
    let mut info_hash = [0u8; 20];
    info_hash.copy_from_slice(&bytes[14..34]);
    let mut peer_id = [0u8; 20];
    peer_id.copy_from_slice(&bytes[34..54]);
    Ok(Handshake { info_hash, peer_id })
}

/// Appends the encoded frame to `out`.
pub fn encode(msg: &Message, out: &mut Vec<u8>) {
    match msg {
        Message::KeepAlive => out.extend_from_slice(&0u32.to_be_bytes()),
        Message::Choke => encode_control(MSG_CHOKE, out),
        Message::Unchoke => encode_control(MSG_UNCHOKE, out),
        Message::Interested => encode_control(MSG_INTERESTED, out),
        Message::NotInterested => encode_control(MSG_NOT_INTERESTED, out),
        Message::Request {
            index,
            begin,
            length,
        } => {
            out.extend_from_slice(&13u32.to_be_bytes());
            out.push(MSG_REQUEST);
            out.extend_from_slice(&index.to_be_bytes());
            out.extend_from_slice(&begin.to_be_bytes());
            out.extend_from_slice(&length.to_be_bytes());
        }
        Message::Piece { index, begin, data } => {
            out.extend_from_slice(&piece_header(*index, *begin, data.len()));
            out.extend_from_slice(data);
        }
    }
}

pub fn encode_to_vec(msg: &Message) -> Vec<u8> {
    let mut out = Vec::new();
    encode(msg, &mut out);
    out
}

fn encode_control(msg_type: u8, out: &mut Vec<u8>) {
    out.extend_from_slice(&1u32.to_be_bytes());
    out.push(msg_type);
}

/// The 13-byte frame header of a piece message, so large payloads can be
/// written straight from the content mapping without copying into a frame
/// buffer first.
pub fn piece_header(index: u32, begin: u32, data_len: usize) -> [u8; 13] {
    let mut out = [0u8; 13];
    out[0..4].copy_from_slice(&(9u32 + data_len as u32).to_be_bytes());
    out[4] = MSG_PIECE;
    out[5..9].copy_from_slice(&index.to_be_bytes());
    out[9..13].copy_from_slice(&begin.to_be_bytes());
    out
}

fn decode_body(msg_type: u8, payload: &[u8]) -> Result<Message, WireError> {
    let control = |msg: Message| {
        if payload.is_empty() {
            Ok(msg)
        } else {
            Err(WireError::BadLength {
                msg_type,
                len: payload.len(),
            })
        }
    };
    match msg_type {
        MSG_CHOKE => control(Message::Choke),
        MSG_UNCHOKE => control(Message::Unchoke),
        MSG_INTERESTED => control(Message::Interested),
        MSG_NOT_INTERESTED => control(Message::NotInterested),
        MSG_REQUEST => {
            if payload.len() != 12 {
                return Err(WireError::BadLength {
                    msg_type,
                    len: payload.len(),
                });
            }
            Ok(Message::Request {
                index: be_u32(&payload[0..4]),
                begin: be_u32(&payload[4..8]),
                length: be_u32(&payload[8..12]),
            })
        }
        MSG_PIECE => {
            if payload.len() < 8 {
                return Err(WireError::BadLength {
                    msg_type,
                    len: payload.len(),
                });
            }
            Ok(Message::Piece {
                index: be_u32(&payload[0..4]),
                begin: be_u32(&payload[4..8]),
                data: payload[8..].to_vec(),
            })
        }
        other => Err(WireError::UnknownType(other)),
    }
}

fn be_u32(bytes: &[u8]) -> u32 {
    u32::from_be_bytes(bytes.try_into().expect("4-byte slice"))
}

/// Incremental frame decoder over arbitrarily fragmented input.
#[derive(Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
    consumed: usize,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        // Reclaim consumed prefix lazily so steady-state decoding does not
        // shift the buffer on every frame.
        if self.consumed > 0 && self.consumed >= self.buf.len() / 2 {
            self.buf.drain(..self.consumed);
            self.consumed = 0;
        }
        self.buf.extend_from_slice(bytes);
    }

    pub fn buffered(&self) -> usize {
        self.buf.len() - self.consumed
    }

    /// The next complete frame, `None` if more input is needed.
    pub fn next_frame(&mut self) -> Result<Option<Message>, WireError> {
        let avail = &self.buf[self.consumed..];
        if avail.len() < 4 {
            return Ok(None);
        }
        let frame_len = be_u32(&avail[0..4]);
        if frame_len == 0 {
            self.consumed += 4;
            return Ok(Some(Message::KeepAlive));
        }
        if frame_len > MAX_FRAME_LEN {
            return Err(WireError::FrameTooLong(frame_len));
        }
        let total = 4 + frame_len as usize;
        if avail.len() < total {
            return Ok(None);
        }
        let msg = decode_body(avail[4], &avail[5..total])?;
        self.consumed += total;
        Ok(Some(msg))
    }
}
