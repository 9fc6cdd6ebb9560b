//! Frame container: fixed header followed by four entropy-coded substreams.
//!
//! Header layout (big endian):
//!
//! | bytes | field |
//! |-------|-------|
//! | 0..4  | magic `CTXC` |
//! | 4     | version |
//! | 5     | frame type (0 intra, 1 inter) |
//! | 6..8  | width |
//! | 8..10 | height |
//! | 10    | lambda index |
//! | 11..19 | config hash |
//! | 19..35 | byte lengths of the flow, offset, hyper and frame substreams |
//!
//! A non-empty substream is the range-coded payload followed by a CRC32 of
//! the payload concatenated with the decoded symbols as little-endian `i32`.

use crate::entropy::{range_decode, range_encode, CdfTable};
use crate::error::{Error, Result};
use crate::motion::SubstreamId;

pub const MAGIC: [u8; 4] = *b"CTXC";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 35;
pub const SUBSTREAMS: [SubstreamId; 4] = [SubstreamId::Flow, SubstreamId::Offset, SubstreamId::Hyper, SubstreamId::Frame];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameType {
    Intra = 0,
    Inter = 1,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Header {
    pub version: u8,
    pub frame_type: FrameType,
    pub width: u16,
    pub height: u16,
    pub lambda_index: u8,
    pub config_hash: u64,
    pub lengths: [u32; 4],
}

/// One coded frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitstream {
    pub header: Header,
    /// Indexed like [`SUBSTREAMS`]; each includes its trailing checksum.
    pub substreams: [Vec<u8>; 4],
}

fn slot(id: SubstreamId) -> usize {
    SUBSTREAMS.iter().position(|&s| s == id).unwrap_or(0)
}

fn checksum(payload: &[u8], symbols: &[i32]) -> u32 {
    let mut h = crc32fast::Hasher::new();
    h.update(payload);
    for s in symbols {
        h.update(&s.to_le_bytes());
    }
    h.finalize()
}

/// Range-code `symbols` and append the checksum; empty input gives an empty
/// substream.
pub fn pack_substream(symbols: &[i32], table_index: &[usize], tables: &[CdfTable]) -> Result<Vec<u8>> {
    if symbols.is_empty() {
        return Ok(Vec::new());
    }
    let mut out = range_encode(symbols, table_index, tables)?;
    let crc = checksum(&out, symbols);
    out.extend_from_slice(&crc.to_be_bytes());
    Ok(out)
}

/// Decode and verify a substream. Any integrity failure is reported as a
/// checksum error naming the substream.
pub fn unpack_substream(id: SubstreamId, bytes: &[u8], table_index: &[usize], tables: &[CdfTable]) -> Result<Vec<i32>> {
    if table_index.is_empty() {
        if !bytes.is_empty() {
            return Err(Error::Bitstream(format!("unexpected {} substream of {} bytes", id.name(), bytes.len())));
        }
        return Ok(Vec::new());
    }
    if bytes.len() < 4 {
        return Err(Error::Bitstream(format!("{} substream truncated to {} bytes", id.name(), bytes.len())));
    }
    let (payload, tail) = bytes.split_at(bytes.len() - 4);
    let expected = u32::from_be_bytes([tail[0], tail[1], tail[2], tail[3]]);
    match range_decode(payload, table_index, tables) {
        Ok(symbols) => {
            let actual = checksum(payload, &symbols);
            if actual != expected {
                return Err(Error::Checksum { substream: id.name(), expected, actual });
            }
            Ok(symbols)
        }
        Err(_) => Err(Error::Checksum { substream: id.name(), expected, actual: crc32fast::hash(payload) }),
    }
}

impl Bitstream {
    pub fn new(frame_type: FrameType, width: usize, height: usize, lambda_index: usize, config_hash: u64) -> Result<Self> {
        if width > u16::MAX as usize || height > u16::MAX as usize {
            return Err(Error::Data(format!("frame {width}x{height} exceeds the 16-bit header fields")));
        }
        Ok(Self {
            header: Header {
                version: VERSION,
                frame_type,
                width: width as u16,
                height: height as u16,
                lambda_index: lambda_index as u8,
                config_hash,
                lengths: [0; 4],
            },
            substreams: Default::default(),
        })
    }

    pub fn set(&mut self, id: SubstreamId, bytes: Vec<u8>) {
        let i = slot(id);
        self.header.lengths[i] = bytes.len() as u32;
        self.substreams[i] = bytes;
    }

    pub fn get(&self, id: SubstreamId) -> &[u8] {
        &self.substreams[slot(id)]
    }

    pub fn substream_bits(&self, id: SubstreamId) -> u64 {
        8 * self.get(id).len() as u64
    }

    /// Substream bits, excluding the fixed header.
    pub fn payload_bits(&self) -> u64 {
        SUBSTREAMS.iter().map(|&s| self.substream_bits(s)).sum()
    }

    pub fn len(&self) -> usize {
        HEADER_LEN + self.substreams.iter().map(Vec::len).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(self.len());
        out.extend_from_slice(&MAGIC);
        out.push(h.version);
        out.push(h.frame_type as u8);
        out.extend_from_slice(&h.width.to_be_bytes());
        out.extend_from_slice(&h.height.to_be_bytes());
        out.push(h.lambda_index);
        out.extend_from_slice(&h.config_hash.to_be_bytes());
        for s in &self.substreams {
            out.extend_from_slice(&(s.len() as u32).to_be_bytes());
        }
        for s in &self.substreams {
            out.extend_from_slice(s);
        }
        out
    }

    /// Parse one frame; returns it and the number of bytes consumed.
    pub fn from_bytes(b: &[u8]) -> Result<(Self, usize)> {
        if b.len() < HEADER_LEN {
            return Err(Error::Bitstream(format!("header truncated: {} of {HEADER_LEN} bytes", b.len())));
        }
        if b[0..4] != MAGIC {
            return Err(Error::Bitstream("bad magic".into()));
        }
        if b[4] != VERSION {
            return Err(Error::Bitstream(format!("unsupported version {}", b[4])));
        }
        let frame_type = match b[5] {
            0 => FrameType::Intra,
            1 => FrameType::Inter,
            t => return Err(Error::Bitstream(format!("unknown frame type {t}"))),
        };
        let u16_at = |i: usize| u16::from_be_bytes([b[i], b[i + 1]]);
        let u32_at = |i: usize| u32::from_be_bytes([b[i], b[i + 1], b[i + 2], b[i + 3]]);
        let mut hash = [0u8; 8];
        hash.copy_from_slice(&b[11..19]);
        let lengths = [u32_at(19), u32_at(23), u32_at(27), u32_at(31)];
        let header = Header {
            version: b[4],
            frame_type,
            width: u16_at(6),
            height: u16_at(8),
            lambda_index: b[10],
            config_hash: u64::from_be_bytes(hash),
            lengths,
        };
        if header.width == 0 || header.height == 0 {
            return Err(Error::Bitstream("zero frame size".into()));
        }
        let total = HEADER_LEN + lengths.iter().map(|&l| l as usize).sum::<usize>();
        if b.len() < total {
            return Err(Error::Bitstream(format!("frame truncated: {} of {total} bytes", b.len())));
        }
        let mut substreams: [Vec<u8>; 4] = Default::default();
        let mut at = HEADER_LEN;
        for (s, &l) in substreams.iter_mut().zip(&lengths) {
            *s = b[at..at + l as usize].to_vec();
            at += l as usize;
        }
        Ok((Self { header, substreams }, total))
    }
}

/// Split a file of concatenated frames.
pub fn split_frames(mut b: &[u8]) -> Result<Vec<Bitstream>> {
    let mut out = Vec::new();
    while !b.is_empty() {
        let (f, n) = Bitstream::from_bytes(b)?;
        out.push(f);
        b = &b[n..];
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy::GaussianConditional;

    fn stream() -> (Vec<i32>, Vec<usize>, GaussianConditional) {
        let g = GaussianConditional::new();
        let sym: Vec<i32> = (0..200).map(|i| (i % 7) - 3).collect();
        let idx = vec![20; 200];
        (sym, idx, g)
    }

    #[test]
    fn header_round_trip() {
        let (sym, idx, g) = stream();
        let mut bs = Bitstream::new(FrameType::Inter, 100, 60, 2, 0xdead_beef_0123_4567).unwrap();
        bs.set(SubstreamId::Frame, pack_substream(&sym, &idx, &g.tables).unwrap());
        bs.set(SubstreamId::Hyper, vec![]);
        let bytes = bs.to_bytes();
        assert_eq!(bytes.len(), bs.len());
        assert_eq!(&bytes[..4], b"CTXC");
        let (back, n) = Bitstream::from_bytes(&bytes).unwrap();
        assert_eq!(n, bytes.len());
        assert_eq!(back, bs);
        let dec = unpack_substream(SubstreamId::Frame, back.get(SubstreamId::Frame), &idx, &g.tables).unwrap();
        assert_eq!(dec, sym);
    }

    #[test]
    fn every_single_bit_flip_in_a_substream_is_caught() {
        let (sym, idx, g) = stream();
        let packed = pack_substream(&sym, &idx, &g.tables).unwrap();
        for byte in 0..packed.len() {
            for bit in 0..8 {
                let mut bad = packed.clone();
                bad[byte] ^= 1 << bit;
                match unpack_substream(SubstreamId::Frame, &bad, &idx, &g.tables) {
                    Err(Error::Checksum { substream, .. }) => assert_eq!(substream, "frame"),
                    other => panic!("flip {byte}:{bit} gave {other:?}"),
                }
            }
        }
    }

    #[test]
    fn malformed_headers_are_rejected() {
        let bs = Bitstream::new(FrameType::Intra, 8, 8, 0, 1).unwrap();
        let bytes = bs.to_bytes();
        assert!(Bitstream::from_bytes(&bytes[..20]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Bitstream::from_bytes(&bad).is_err());
        let mut bad = bytes.clone();
        bad[34] = 9;
        assert!(matches!(Bitstream::from_bytes(&bad), Err(Error::Bitstream(_))));
        assert!(Bitstream::new(FrameType::Intra, 70_000, 8, 0, 1).is_err());
    }

    #[test]
    fn frames_concatenate() {
        let a = Bitstream::new(FrameType::Intra, 8, 8, 0, 1).unwrap();
        let mut b = Bitstream::new(FrameType::Inter, 8, 8, 0, 1).unwrap();
        b.set(SubstreamId::Flow, vec![1, 2, 3, 4, 5]);
        let mut bytes = a.to_bytes();
        bytes.extend(b.to_bytes());
        assert_eq!(split_frames(&bytes).unwrap(), vec![a, b]);
    }
}
