//! Byte framing used by the process backends.
//!
//! ```text
//! u32 LE  length of everything after this field
//! u64 LE  group context
//! u8      tag
//! ...     payload
//! ```

use std::io::{self, Read, Write};

/// Context and tag of frames exchanged while a group is being set up.
pub const CONTROL_CTX: u64 = u64::MAX;
pub const CONTROL_TAG: u8 = 0xFF;

const HEADER: usize = 8 + 1;
const MAX_FRAME: u32 = 1 << 30;

pub fn encode_frame(ctx: u64, tag: u8, payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + HEADER + payload.len());
    out.extend_from_slice(&((HEADER + payload.len()) as u32).to_le_bytes());
    out.extend_from_slice(&ctx.to_le_bytes());
    out.push(tag);
    out.extend_from_slice(payload);
    out
}

pub fn write_frame(w: &mut impl Write, ctx: u64, tag: u8, payload: &[u8]) -> io::Result<()> {
    w.write_all(&encode_frame(ctx, tag, payload))?;
    w.flush()
}

/// Reads one frame. `Ok(None)` on a clean end of stream between frames.
pub fn read_frame(r: &mut impl Read) -> io::Result<Option<(u64, u8, Vec<u8>)>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_le_bytes(len);
    if (len as usize) < HEADER || len > MAX_FRAME {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("bad frame length {len}"),
        ));
    }
    let mut body = vec![0u8; len as usize];
    r.read_exact(&mut body)?;
    let ctx = u64::from_le_bytes(body[..8].try_into().expect("8 bytes"));
    let tag = body[8];
    body.drain(..HEADER);
    Ok(Some((ctx, tag, body)))
}
