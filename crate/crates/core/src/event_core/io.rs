use super::{Event, EventStream, Polarity};
use crate::error::{Error, Result};

pub const CANONICAL_MAGIC: &[u8; 4] = b"EVT1";
const CANONICAL_HEADER: usize = 16;
const CANONICAL_RECORD: usize = 16;

/// N-Caltech101 recordings come from an ATIS sensor cropped to at most 240x180.
const NCALTECH_SENSOR: (u32, u32) = (240, 180);
const NCALTECH_OVERFLOW_Y: u8 = 240;
const NCALTECH_OVERFLOW_STEP: u64 = 1 << 13;

const DVS128_SIZE: u32 = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventFormat {
    /// `EVT1` little-endian container written by this crate.
    Canonical,
    /// 40-bit packed records of the N-Caltech101 distribution.
    NcaltechBin,
    /// AEDAT 2.0 files from a DVS128 sensor (CIFAR10-DVS).
    Aedat,
}

impl EventFormat {
    pub fn from_extension(ext: &str) -> Option<Self> {
        match ext.to_ascii_lowercase().as_str() {
            "evt" => Some(Self::Canonical),
            "bin" => Some(Self::NcaltechBin),
            "aedat" => Some(Self::Aedat),
            _ => None,
        }
    }
}

pub fn parse_event_stream(bytes: &[u8], format: EventFormat) -> Result<EventStream> {
    match format {
        EventFormat::Canonical => parse_canonical(bytes),
        EventFormat::NcaltechBin => parse_ncaltech(bytes),
        EventFormat::Aedat => parse_aedat(bytes),
    }
}

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        message: message.into(),
    }
}

fn le_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

fn parse_canonical(bytes: &[u8]) -> Result<EventStream> {
    if bytes.len() < CANONICAL_HEADER {
        return Err(parse_err(
            bytes.len(),
            format!("header needs {CANONICAL_HEADER} bytes"),
        ));
    }
    if &bytes[..4] != CANONICAL_MAGIC {
        return Err(parse_err(0, "missing EVT1 magic"));
    }
    let width = le_u32(bytes, 4);
    let height = le_u32(bytes, 8);
    let count = le_u32(bytes, 12) as usize;
    let body = &bytes[CANONICAL_HEADER..];
    let expected = count
        .checked_mul(CANONICAL_RECORD)
        .ok_or_else(|| parse_err(12, "record count overflows"))?;
    if body.len() != expected {
        // first byte of the truncated record, or of the surplus
        let offset = CANONICAL_HEADER + (body.len() / CANONICAL_RECORD * CANONICAL_RECORD).min(expected);
        return Err(parse_err(
            offset,
            format!(
                "header announces {count} records ({expected} bytes) but body holds {} bytes",
                body.len()
            ),
        ));
    }
    let mut events = Vec::with_capacity(count);
    for (i, rec) in body.chunks_exact(CANONICAL_RECORD).enumerate() {
        let offset = CANONICAL_HEADER + i * CANONICAL_RECORD;
        let t = u64::from_le_bytes(rec[0..8].try_into().unwrap());
        let x = u16::from_le_bytes(rec[8..10].try_into().unwrap());
        let y = u16::from_le_bytes(rec[10..12].try_into().unwrap());
        let p = rec[12] as i8;
        let polarity = Polarity::from_sign(p)
            .ok_or_else(|| parse_err(offset + 12, format!("polarity byte {p} is not +1 or -1")))?;
        events.push(Event::new(t, x, y, polarity));
    }
    EventStream::new(events, width, height)
}

/// Serializes a stream in the canonical `EVT1` layout.
pub fn write_canonical(stream: &EventStream) -> Vec<u8> {
    let mut out = Vec::with_capacity(CANONICAL_HEADER + stream.len() * CANONICAL_RECORD);
    out.extend_from_slice(CANONICAL_MAGIC);
    out.extend_from_slice(&stream.width().to_le_bytes());
    out.extend_from_slice(&stream.height().to_le_bytes());
    out.extend_from_slice(&(stream.len() as u32).to_le_bytes());
    for e in stream.events() {
        out.extend_from_slice(&e.t.to_le_bytes());
        out.extend_from_slice(&e.x.to_le_bytes());
        out.extend_from_slice(&e.y.to_le_bytes());
        out.push(e.polarity.sign() as u8);
        out.extend_from_slice(&[0, 0, 0]);
    }
    out
}

fn parse_ncaltech(bytes: &[u8]) -> Result<EventStream> {
    if bytes.len() % 5 != 0 {
        return Err(parse_err(
            bytes.len() - bytes.len() % 5,
            "trailing partial 40-bit record",
        ));
    }
    let mut events = Vec::with_capacity(bytes.len() / 5);
    let mut time_base = 0u64;
    let (mut max_x, mut max_y) = (0u32, 0u32);
    for rec in bytes.chunks_exact(5) {
        let x = rec[0];
        let y = rec[1];
        if y == NCALTECH_OVERFLOW_Y {
            time_base += NCALTECH_OVERFLOW_STEP;
            continue;
        }
        let polarity = if rec[2] & 0x80 != 0 {
            Polarity::On
        } else {
            Polarity::Off
        };
        let t = (u64::from(rec[2] & 0x7f) << 16) | (u64::from(rec[3]) << 8) | u64::from(rec[4]);
        max_x = max_x.max(u32::from(x));
        max_y = max_y.max(u32::from(y));
        events.push(Event::new(
            t + time_base,
            u16::from(x),
            u16::from(y),
            polarity,
        ));
    }
    // Raw recordings are not strictly ordered; the stable sort keeps
    // same-timestamp events in file order.
    events.sort_by_key(|e| e.t);
    let width = NCALTECH_SENSOR.0.max(max_x + 1);
    let height = NCALTECH_SENSOR.1.max(max_y + 1);
    EventStream::new(events, width, height)
}

fn parse_aedat(bytes: &[u8]) -> Result<EventStream> {
    let mut pos = 0;
    while pos < bytes.len() && bytes[pos] == b'#' {
        match bytes[pos..].iter().position(|&b| b == b'\n') {
            Some(nl) => pos += nl + 1,
            None => return Err(parse_err(pos, "unterminated header line")),
        }
    }
    let body = &bytes[pos..];
    if body.len() % 8 != 0 {
        return Err(parse_err(
            pos + body.len() - body.len() % 8,
            "trailing partial 8-byte record",
        ));
    }
    let mut events = Vec::with_capacity(body.len() / 8);
    for rec in body.chunks_exact(8) {
        let addr = u32::from_be_bytes(rec[0..4].try_into().unwrap());
        let t = u32::from_be_bytes(rec[4..8].try_into().unwrap());
        let x = DVS128_SIZE - 1 - ((addr & 0xfe) >> 1);
        let y = (addr & 0x7f00) >> 8;
        let polarity = if addr & 1 == 0 {
            Polarity::On
        } else {
            Polarity::Off
        };
        events.push(Event::new(u64::from(t), x as u16, y as u16, polarity));
    }
    events.sort_by_key(|e| e.t);
    EventStream::new(events, DVS128_SIZE, DVS128_SIZE)
}
