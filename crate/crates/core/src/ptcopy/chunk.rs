//! Chunk framing: `index` (u32 LE), flags, `raw_len` (u32 LE), payload.

use std::io::{self, Read, Write};

use flate2::read::DeflateDecoder;
use flate2::write::DeflateEncoder;
use flate2::Compression;
use thiserror::Error;

pub const FLAG_LAST: u8 = 0b001;
pub const FLAG_COMPRESSED: u8 = 0b010;
/// Terminal chunk of a stream the sender could not finish.
pub const FLAG_ABORTED: u8 = 0b100;

const HEADER_LEN: usize = 9;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chunk {
    pub index: u32,
    pub last: bool,
    pub compressed: bool,
    pub aborted: bool,
    pub raw_len: u32,
    pub payload: Vec<u8>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ChunkError {
    #[error("chunk shorter than its header")]
    Short,
    #[error("unknown chunk flags {0:#04x}")]
    Flags(u8),
    #[error("chunk {index}: payload decodes to {got} bytes, header says {want}")]
    Length { index: u32, got: usize, want: u32 },
    #[error("chunk {index}: corrupt compressed payload")]
    Corrupt { index: u32 },
}

impl Chunk {
    /// Frames `data`, compressing it when asked and when that makes it
    /// smaller.
    pub fn seal(index: u32, data: &[u8], last: bool, compress: bool) -> Chunk {
        let raw_len = u32::try_from(data.len()).expect("chunk sizes fit in u32");
        if compress && !data.is_empty() {
            let mut enc = DeflateEncoder::new(Vec::new(), Compression::fast());
            enc.write_all(data).expect("writing to a Vec");
            let packed = enc.finish().expect("writing to a Vec");
            if packed.len() < data.len() {
                return Chunk {
                    index,
                    last,
                    compressed: true,
                    aborted: false,
                    raw_len,
                    payload: packed,
                };
            }
        }
        Chunk {
            index,
            last,
            compressed: false,
            aborted: false,
            raw_len,
            payload: data.to_vec(),
        }
    }

    /// The poisoned terminal chunk.
    pub fn abort(index: u32) -> Chunk {
        Chunk {
            index,
            last: true,
            compressed: false,
            aborted: true,
            raw_len: 0,
            payload: Vec::new(),
        }
    }

    pub fn flags(&self) -> u8 {
        (self.last as u8 * FLAG_LAST)
            | (self.compressed as u8 * FLAG_COMPRESSED)
            | (self.aborted as u8 * FLAG_ABORTED)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(&self.index.to_le_bytes());
        out.push(self.flags());
        out.extend_from_slice(&self.raw_len.to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn decode(b: &[u8]) -> Result<Chunk, ChunkError> {
        if b.len() < HEADER_LEN {
            return Err(ChunkError::Short);
        }
        let flags = b[4];
        if flags & !(FLAG_LAST | FLAG_COMPRESSED | FLAG_ABORTED) != 0 {
            return Err(ChunkError::Flags(flags));
        }
        Ok(Chunk {
            index: u32::from_le_bytes(b[0..4].try_into().expect("4 bytes")),
            last: flags & FLAG_LAST != 0,
            compressed: flags & FLAG_COMPRESSED != 0,
            aborted: flags & FLAG_ABORTED != 0,
            raw_len: u32::from_le_bytes(b[5..9].try_into().expect("4 bytes")),
            payload: b[HEADER_LEN..].to_vec(),
        })
    }

    /// The chunk's original bytes.
    pub fn raw(&self) -> Result<Vec<u8>, ChunkError> {
        let data = if self.compressed {
            let mut out = Vec::with_capacity(self.raw_len as usize);
            DeflateDecoder::new(&self.payload[..])
                .take(self.raw_len as u64 + 1)
                .read_to_end(&mut out)
                .map_err(|_| ChunkError::Corrupt { index: self.index })?;
            out
        } else {
            self.payload.clone()
        };
        if data.len() != self.raw_len as usize {
            return Err(ChunkError::Length {
                index: self.index,
                got: data.len(),
                want: self.raw_len,
            });
        }
        Ok(data)
    }
}

/// Cuts a byte stream into chunks, looking one chunk ahead so the final
/// chunk carries the `last` flag.
pub struct Chunker<R> {
    src: R,
    size: usize,
    compress: bool,
    next_index: u32,
    ahead: Option<Vec<u8>>,
    done: bool,
}

impl<R: Read> Chunker<R> {
    pub fn new(src: R, size: usize, compress: bool) -> Self {
        assert!(size > 0, "chunk size must be positive");
        Chunker {
            src,
            size,
            compress,
            next_index: 0,
            ahead: None,
            done: false,
        }
    }

    /// Index the next chunk will get.
    pub fn next_index(&self) -> u32 {
        self.next_index
    }

    fn fill(&mut self) -> io::Result<Vec<u8>> {
        let mut buf = Vec::with_capacity(self.size);
        (&mut self.src)
            .take(self.size as u64)
            .read_to_end(&mut buf)?;
        Ok(buf)
    }

    pub fn next_chunk(&mut self) -> io::Result<Option<Chunk>> {
        if self.done {
            return Ok(None);
        }
        let cur = match self.ahead.take() {
            Some(b) => b,
            None => self.fill()?,
        };
        let last = if cur.len() < self.size {
            true
        } else {
            let nxt = self.fill()?;
            let empty = nxt.is_empty();
            if !empty {
                self.ahead = Some(nxt);
            }
            empty
        };
        let c = Chunk::seal(self.next_index, &cur, last, self.compress);
        self.next_index += 1;
        self.done = last;
        Ok(Some(c))
    }
}

/// Every chunk of an in-memory stream.
pub fn chunk_bytes(data: &[u8], size: usize, compress: bool) -> Vec<Chunk> {
    let mut ch = Chunker::new(data, size, compress);
    let mut out = Vec::new();
    while let Some(c) = ch.next_chunk().expect("reading from memory") {
        out.push(c);
    }
    out
}
