//! Frame codec shared by the point-to-point and broker transports.
//!
//! A frame is a 4-byte big-endian length, then the headers as
//! length-prefixed UTF-8 key/value pairs (a 4-byte pair count, then
//! 4-byte-length-prefixed key and value per pair), then the payload bytes.
//! Payloads round-trip bit-exact.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};

use thiserror::Error;

use super::Message;

/// Frames above this size are rejected as malformed.
pub const MAX_FRAME_LEN: u32 = 256 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("malformed frame: {0}")]
    Malformed(&'static str),
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_be_bytes());
}

fn put_chunk(buf: &mut Vec<u8>, bytes: &[u8]) {
    put_u32(buf, bytes.len() as u32);
    buf.extend_from_slice(bytes);
}

/// Encodes a message as one frame, including the leading length field.
pub fn encode_frame(msg: &Message) -> Vec<u8> {
    let mut body = Vec::with_capacity(msg.payload.len() + 64);
    put_u32(&mut body, msg.headers.len() as u32);
    for (k, v) in &msg.headers {
        put_chunk(&mut body, k.as_bytes());
        put_chunk(&mut body, v.as_bytes());
    }
    body.extend_from_slice(&msg.payload);

    let mut frame = Vec::with_capacity(body.len() + 4);
    put_u32(&mut frame, body.len() as u32);
    frame.extend_from_slice(&body);
    frame
}

/// Reads one frame body (without the length field) from `reader`. Returns
/// `Ok(None)` on clean end of stream.
pub fn read_frame(reader: &mut impl Read) -> Result<Option<Vec<u8>>, WireError> {
    let mut len_buf = [0u8; 4];
    match reader.read_exact(&mut len_buf) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(WireError::Io(e)),
    }
    let len = u32::from_be_bytes(len_buf);
    if len > MAX_FRAME_LEN {
        return Err(WireError::Malformed("frame exceeds size limit"));
    }
    let mut body = vec![0u8; len as usize];
    reader.read_exact(&mut body)?;
    Ok(Some(body))
}

/// Decodes a frame body produced by [`encode_frame`].
pub fn decode_frame(body: &[u8]) -> Result<Message, WireError> {
    let mut pos = 0usize;
    let take_u32 = |pos: &mut usize| -> Result<u32, WireError> {
        if *pos + 4 > body.len() {
            return Err(WireError::Malformed("truncated length field"));
        }
        let v = u32::from_be_bytes(body[*pos..*pos + 4].try_into().unwrap());
        *pos += 4;
        Ok(v)
    };

    let count = take_u32(&mut pos)?;
    let mut headers = BTreeMap::new();
    for _ in 0..count {
        let klen = take_u32(&mut pos)? as usize;
        if pos + klen > body.len() {
            return Err(WireError::Malformed("truncated header key"));
        }
        let key = std::str::from_utf8(&body[pos..pos + klen])
            .map_err(|_| WireError::Malformed("header key is not utf-8"))?
            .to_string();
        pos += klen;
        let vlen = take_u32(&mut pos)? as usize;
        if pos + vlen > body.len() {
            return Err(WireError::Malformed("truncated header value"));
        }
        let value = std::str::from_utf8(&body[pos..pos + vlen])
            .map_err(|_| WireError::Malformed("header value is not utf-8"))?
            .to_string();
        pos += vlen;
        headers.insert(key, value);
    }
    Ok(Message {
        headers,
        payload: body[pos..].to_vec(),
    })
}

pub fn write_message(writer: &mut impl Write, msg: &Message) -> Result<(), WireError> {
    writer.write_all(&encode_frame(msg))?;
    writer.flush()?;
    Ok(())
}

pub fn read_message(reader: &mut impl Read) -> Result<Option<Message>, WireError> {
    match read_frame(reader)? {
        None => Ok(None),
        Some(body) => Ok(Some(decode_frame(&body)?)),
    }
}
