//! Binary PGM (P5) and PPM (P6) readers and writers, 8-bit only.

use std::io::{Read, Write};

#[derive(Debug, thiserror::Error)]
pub enum PnmError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Decoded 8-bit raster. `channels` is 1 for PGM and 3 for PPM.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

fn header_tokens(bytes: &[u8], count: usize) -> Result<(Vec<String>, usize), PnmError> {
    let mut tokens = Vec::new();
    let mut pos = 0;
    while tokens.len() < count {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(PnmError::MalformedHeader("unexpected end of header".into()));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates maxval from the payload
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(PnmError::MalformedHeader("missing separator after maxval".into()));
    }
    Ok((tokens, pos + 1))
}

pub fn decode(bytes: &[u8]) -> Result<Raster, PnmError> {
    let (tokens, offset) = header_tokens(bytes, 4)?;
    let channels = match tokens[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(PnmError::MalformedHeader(format!("unsupported magic {other:?}"))),
    };
    let parse = |s: &str, what: &str| s.parse::<usize>().map_err(|_| PnmError::MalformedHeader(format!("bad {what} {s:?}")));
    let width = parse(&tokens[1], "width")?;
    let height = parse(&tokens[2], "height")?;
    let maxval = parse(&tokens[3], "maxval")?;
    if maxval != 255 {
        return Err(PnmError::MalformedHeader(format!("maxval must be 255, got {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(PnmError::MalformedHeader("zero dimension".into()));
    }
    let expected = width * height * channels;
    let payload = &bytes[offset..];
    if payload.len() < expected {
        return Err(PnmError::Truncated { expected, found: payload.len() });
    }
    Ok(Raster { width, height, channels, pixels: payload[..expected].to_vec() })
}

pub fn encode(raster: &Raster) -> Vec<u8> {
    let magic = if raster.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", raster.width, raster.height).into_bytes();
    out.extend_from_slice(&raster.pixels);
    out
}

pub fn read_file(path: &std::path::Path) -> Result<Raster, PnmError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

pub fn write_file(path: &std::path::Path, raster: &Raster) -> Result<(), PnmError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(raster))?;
    Ok(())
}
