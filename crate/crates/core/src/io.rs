//! Binary container shared by dataset and checkpoint files, plus PGM output.
//!
//! Layout: 4 magic bytes, `u32` little-endian header length, JSON header,
//! raw little-endian payload, `u32` little-endian CRC32 of the payload. The
//! header always carries `payload_bytes`.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("truncated file: need {expected} bytes, have {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("shape error: {0}")]
    Shape(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn encode_container<H: Serialize>(magic: &[u8; 4], header: &H, payload: &[u8]) -> Result<Vec<u8>, FormatError> {
    let mut value = serde_json::to_value(header).map_err(|e| FormatError::MalformedHeader(e.to_string()))?;
    match value.as_object_mut() {
        Some(obj) => {
            obj.insert("payload_bytes".into(), payload.len().into());
        }
        None => return Err(FormatError::MalformedHeader("header must be a JSON object".into())),
    }
    let text = serde_json::to_vec(&value).map_err(|e| FormatError::MalformedHeader(e.to_string()))?;
    let mut out = Vec::with_capacity(12 + text.len() + payload.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(&text);
    out.extend_from_slice(payload);
    out.extend_from_slice(&crc32fast::hash(payload).to_le_bytes());
    Ok(out)
}

/// Parses and verifies a container, returning the header and payload.
pub fn decode_container<'a, H: DeserializeOwned>(
    magic: &[u8; 4],
    bytes: &'a [u8],
) -> Result<(H, &'a [u8]), FormatError> {
    if bytes.len() < 4 {
        return Err(FormatError::Truncated {
            expected: 8,
            actual: bytes.len(),
        });
    }
    if &bytes[..4] != magic {
        return Err(FormatError::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
        });
    }
    if bytes.len() < 8 {
        return Err(FormatError::Truncated {
            expected: 8,
            actual: bytes.len(),
        });
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let header_end = 8 + header_len;
    if bytes.len() < header_end {
        return Err(FormatError::Truncated {
            expected: header_end,
            actual: bytes.len(),
        });
    }
    let value: serde_json::Value =
        serde_json::from_slice(&bytes[8..header_end]).map_err(|e| FormatError::MalformedHeader(e.to_string()))?;
    let payload_bytes = value
        .get("payload_bytes")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| FormatError::MalformedHeader("missing payload_bytes".into()))? as usize;
    let header: H = serde_json::from_value(value).map_err(|e| FormatError::MalformedHeader(e.to_string()))?;
    let total = header_end + payload_bytes + 4;
    if bytes.len() < total {
        return Err(FormatError::Truncated {
            expected: total,
            actual: bytes.len(),
        });
    }
    if bytes.len() > total {
        return Err(FormatError::Shape(format!(
            "{} trailing bytes beyond the declared payload",
            bytes.len() - total
        )));
    }
    let payload = &bytes[header_end..header_end + payload_bytes];
    let stored = u32::from_le_bytes(bytes[total - 4..total].try_into().unwrap());
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(FormatError::ChecksumMismatch { stored, computed });
    }
    Ok((header, payload))
}

/// Writes a 16-bit binary PGM, scaling `values` so the maximum maps to 65535.
pub fn write_pgm16(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<(), FormatError> {
    fs::write(path, encode_pgm16(width, height, values))?;
    Ok(())
}

pub fn encode_pgm16(width: usize, height: usize, values: &[f64]) -> Vec<u8> {
    assert_eq!(values.len(), width * height);
    let max = values.iter().copied().filter(|v| v.is_finite()).fold(0.0f64, f64::max);
    let mut out = format!("P5\n{} {}\n65535\n", width, height).into_bytes();
    for &v in values {
        let level = if max > 0.0 && v.is_finite() {
            (v.max(0.0) / max * 65535.0).round() as u16
        } else {
            0
        };
        out.extend_from_slice(&level.to_be_bytes());
    }
    out
}

/// Parses a 16-bit binary PGM into `(width, height, levels)`.
pub fn decode_pgm16(bytes: &[u8]) -> Result<(usize, usize, Vec<u16>), FormatError> {
    let bad = |m: &str| FormatError::MalformedHeader(format!("pgm: {}", m));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("short header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "65535" {
        return Err(bad("expected 16-bit P5"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("height"))?;
    let need = pos + 2 * w * h;
    if bytes.len() < need {
        return Err(FormatError::Truncated {
            expected: need,
            actual: bytes.len(),
        });
    }
    let levels = bytes[pos..need]
        .chunks(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    Ok((w, h, levels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(serde::Serialize, serde::Deserialize, Debug, PartialEq)]
    struct Hdr {
        name: String,
    }

    #[test]
    fn container_round_trip_and_errors() {
        let hdr = Hdr { name: "x".into() };
        let bytes = encode_container(b"TEST", &hdr, &[1, 2, 3, 4, 5]).unwrap();
        let (h, p): (Hdr, _) = decode_container(b"TEST", &bytes).unwrap();
        assert_eq!(h, hdr);
        assert_eq!(p, &[1, 2, 3, 4, 5]);

        assert!(matches!(
            decode_container::<Hdr>(b"NOPE", &bytes),
            Err(FormatError::BadMagic { .. })
        ));
        assert!(matches!(
            decode_container::<Hdr>(b"TEST", &bytes[..bytes.len() - 3]),
            Err(FormatError::Truncated { .. })
        ));
        let mut corrupt = bytes.clone();
        let n = corrupt.len();
        corrupt[n - 6] ^= 0xff;
        assert!(matches!(
            decode_container::<Hdr>(b"TEST", &corrupt),
            Err(FormatError::ChecksumMismatch { .. })
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(
            decode_container::<Hdr>(b"TEST", &long),
            Err(FormatError::Shape(_))
        ));
    }

    #[test]
    fn pgm_scales_to_max() {
        let bytes = encode_pgm16(2, 2, &[0.0, 0.5, 1.0, 0.25]);
        let (w, h, lv) = decode_pgm16(&bytes).unwrap();
        assert_eq!((w, h), (2, 2));
        assert_eq!(lv, vec![0, 32768, 65535, 16384]);
    }
}
