//! Compressed shards of tokenized image-caption records.
//!
//! ```text
//! magic "TSHD" | version u16 (=1) | record_count u32 | uncompressed_len u64
//! | checksum u64 (FNV-1a 64 of the uncompressed block) | brotli stream
//! ```
//!
//! The uncompressed block is the concatenation of records, each
//! `caption_len varint | caption tokens varint* | 1024 codes × 13 bits`,
//! codes packed least-significant bit first into 1664 bytes. Brotli runs at
//! quality [`BROTLI_QUALITY`] with window [`BROTLI_LGWIN`].

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SHARD_MAGIC: [u8; 4] = *b"TSHD";
pub const SHARD_VERSION: u16 = 1;
pub const SHARD_HEADER_BYTES: usize = 26;
pub const CODES_PER_RECORD: usize = 1024;
pub const CODEBOOK_SIZE: u32 = 8192;
pub const CODE_BITS: usize = 13;
pub const PACKED_CODE_BYTES: usize = CODES_PER_RECORD * CODE_BITS / 8;
pub const BROTLI_QUALITY: u32 = 9;
pub const BROTLI_LGWIN: u32 = 22;

#[derive(Debug, Error)]
pub enum ShardError {
    #[error("image code {value} at position {index} is outside the codebook")]
    CodeOutOfRange { index: usize, value: u32 },
    #[error("record has {0} image codes, expected 1024")]
    WrongCodeCount(usize),
    #[error("shard has no records")]
    EmptyShard,
    #[error("checksum mismatch: header {expected:#018x}, block {actual:#018x}")]
    ChecksumMismatch { expected: u64, actual: u64 },
    #[error("malformed shard: {0}")]
    Malformed(String),
    #[error("fetching {what} failed after {attempts} attempts: {reason}")]
    FetchFailed {
        what: String,
        attempts: u32,
        reason: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub caption_tokens: Vec<u32>,
    pub image_codes: Vec<u16>,
}

impl Record {
    pub fn validate(&self) -> Result<(), ShardError> {
        if self.image_codes.len() != CODES_PER_RECORD {
            return Err(ShardError::WrongCodeCount(self.image_codes.len()));
        }
        if let Some(index) = self.image_codes.iter().position(|&c| c as u32 >= CODEBOOK_SIZE) {
            return Err(ShardError::CodeOutOfRange {
                index,
                value: self.image_codes[index] as u32,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShardHeader {
    pub version: u16,
    pub record_count: u32,
    pub uncompressed_len: u64,
    pub checksum: u64,
}

pub fn checksum(block: &[u8]) -> u64 {
    use std::hash::Hasher;
    let mut h = fnv::FnvHasher::default();
    h.write(block);
    h.finish()
}

pub fn pack_codes(codes: &[u16], out: &mut Vec<u8>) {
    let mut acc: u32 = 0;
    let mut bits = 0;
    for &c in codes {
        acc |= (c as u32) << bits;
        bits += CODE_BITS;
        while bits >= 8 {
            out.push(acc as u8);
            acc >>= 8;
            bits -= 8;
        }
    }
    if bits > 0 {
        out.push(acc as u8);
    }
}

pub fn unpack_codes(bytes: &[u8], n: usize) -> Vec<u16> {
    let mut out = Vec::with_capacity(n);
    let mut acc: u32 = 0;
    let mut bits = 0;
    let mut it = bytes.iter();
    while out.len() < n {
        while bits < CODE_BITS {
            acc |= (*it.next().unwrap_or(&0) as u32) << bits;
            bits += 8;
        }
        out.push((acc & ((1 << CODE_BITS) - 1)) as u16);
        acc >>= CODE_BITS;
        bits -= CODE_BITS;
    }
    out
}

fn put_varint(out: &mut Vec<u8>, mut x: u64) {
    while x >= 0x80 {
        out.push((x as u8) | 0x80);
        x >>= 7;
    }
    out.push(x as u8);
}

fn get_varint(buf: &[u8], pos: &mut usize) -> Result<u64, ShardError> {
    let mut x = 0u64;
    for shift in (0..64).step_by(7) {
        let b = *buf
            .get(*pos)
            .ok_or_else(|| ShardError::Malformed("truncated varint".into()))?;
        *pos += 1;
        x |= ((b & 0x7f) as u64) << shift;
        if b & 0x80 == 0 {
            return Ok(x);
        }
    }
    Err(ShardError::Malformed("varint too long".into()))
}

/// The canonical uncompressed records block.
pub fn records_block(records: &[Record]) -> Result<Vec<u8>, ShardError> {
    let mut out = Vec::with_capacity(records.len() * (PACKED_CODE_BYTES + 16));
    for r in records {
        r.validate()?;
        put_varint(&mut out, r.caption_tokens.len() as u64);
        for &t in &r.caption_tokens {
            put_varint(&mut out, t as u64);
        }
        pack_codes(&r.image_codes, &mut out);
    }
    Ok(out)
}

pub fn parse_block(block: &[u8], count: u32) -> Result<Vec<Record>, ShardError> {
    // every record takes at least one length byte plus its codes
    if count as u64 * (PACKED_CODE_BYTES as u64 + 1) > block.len() as u64 {
        return Err(ShardError::Malformed(format!(
            "{count} records cannot fit in {} bytes",
            block.len()
        )));
    }
    let mut pos = 0;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let n = get_varint(block, &mut pos)?;
        if n > block.len() as u64 {
            return Err(ShardError::Malformed(format!("caption length {n}")));
        }
        let mut caption_tokens = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let t = get_varint(block, &mut pos)?;
            caption_tokens.push(u32::try_from(t).map_err(|_| ShardError::Malformed(format!("token {t}")))?);
        }
        let end = pos + PACKED_CODE_BYTES;
        let packed = block
            .get(pos..end)
            .ok_or_else(|| ShardError::Malformed("truncated image codes".into()))?;
        pos = end;
        out.push(Record {
            caption_tokens,
            image_codes: unpack_codes(packed, CODES_PER_RECORD),
        });
    }
    if pos != block.len() {
        return Err(ShardError::Malformed(format!(
            "{} trailing bytes in records block",
            block.len() - pos
        )));
    }
    Ok(out)
}

pub fn encode_shard(records: &[Record]) -> Result<Vec<u8>, ShardError> {
    if records.is_empty() {
        return Err(ShardError::EmptyShard);
    }
    let block = records_block(records)?;
    let mut out = Vec::with_capacity(SHARD_HEADER_BYTES + block.len() / 2);
    out.extend_from_slice(&SHARD_MAGIC);
    out.extend_from_slice(&SHARD_VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    out.extend_from_slice(&(block.len() as u64).to_le_bytes());
    out.extend_from_slice(&checksum(&block).to_le_bytes());
    compress(&block, &mut out)?;
    Ok(out)
}

pub fn read_header(bytes: &[u8]) -> Result<ShardHeader, ShardError> {
    if bytes.len() < SHARD_HEADER_BYTES {
        return Err(ShardError::Malformed(format!(
            "{} bytes is shorter than the header",
            bytes.len()
        )));
    }
    if bytes[..4] != SHARD_MAGIC {
        return Err(ShardError::Malformed("bad magic".into()));
    }
    let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
    if version != SHARD_VERSION {
        return Err(ShardError::Malformed(format!("unsupported version {version}")));
    }
    Ok(ShardHeader {
        version,
        record_count: u32::from_le_bytes(bytes[6..10].try_into().unwrap()),
        uncompressed_len: u64::from_le_bytes(bytes[10..18].try_into().unwrap()),
        checksum: u64::from_le_bytes(bytes[18..26].try_into().unwrap()),
    })
}

fn decompress(stream: &[u8], limit: u64) -> Option<Vec<u8>> {
    let mut block = Vec::with_capacity(limit.min(1 << 28) as usize);
    let mut reader = brotli::Decompressor::new(stream, 1 << 16);
    // one extra byte reveals an overlong stream
    (&mut reader).take(limit + 1).read_to_end(&mut block).ok()?;
    Some(block)
}

fn compress(block: &[u8], out: &mut Vec<u8>) -> std::io::Result<()> {
    let mut w = brotli::CompressorWriter::new(out, 1 << 16, BROTLI_QUALITY, BROTLI_LGWIN);
    w.write_all(block)?;
    w.into_inner();
    Ok(())
}

/// Decompresses and verifies the records block.
///
/// Besides matching the checksum, the brotli stream must be exactly the one
/// [`encode_shard`] produces for the block, so that every change to the
/// stored bytes is caught, including ones the decompressor ignores (window
/// size bits, trailing padding).
pub fn decode_block(bytes: &[u8]) -> Result<(ShardHeader, Vec<u8>), ShardError> {
    let header = read_header(bytes)?;
    let stream = &bytes[SHARD_HEADER_BYTES..];
    let limit = header.uncompressed_len;
    let block = decompress(stream, limit).unwrap_or_default();
    let actual = checksum(&block);
    if block.len() as u64 != limit || actual != header.checksum {
        return Err(ShardError::ChecksumMismatch {
            expected: header.checksum,
            actual,
        });
    }
    let mut canonical = Vec::with_capacity(stream.len());
    compress(&block, &mut canonical)?;
    if canonical != stream {
        return Err(ShardError::Malformed(
            "records block is not in canonical encoding".into(),
        ));
    }
    Ok((header, block))
}

pub fn decode_shard(bytes: &[u8]) -> Result<Vec<Record>, ShardError> {
    let (header, block) = decode_block(bytes)?;
    let records = parse_block(&block, header.record_count)?;
    if records.is_empty() {
        return Err(ShardError::EmptyShard);
    }
    Ok(records)
}

/// Encoded shard size relative to `reference_image_bytes` per record.
pub fn bandwidth_ratio(records: &[Record], reference_image_bytes: u64) -> Result<f64, ShardError> {
    if reference_image_bytes == 0 {
        return Err(ShardError::Malformed("reference byte count must be positive".into()));
    }
    let shard = encode_shard(records)?;
    Ok(shard.len() as f64 / (reference_image_bytes as f64 * records.len() as f64))
}

pub fn shard_file_name(index: usize) -> String {
    format!("shard-{index:05}.tshd")
}

/// Index of a file named like [`shard_file_name`].
pub fn parse_shard_file_name(name: &str) -> Option<usize> {
    let digits = name.strip_prefix("shard-")?.strip_suffix(".tshd")?;
    if digits.len() < 5 || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}
