//! PFM (portable float map) reader/writer for single-channel disparity maps.
//!
//! Header: magic `Pf`, then `width height`, then a scale whose sign selects
//! the byte order (negative = little-endian). Pixel rows are stored bottom
//! to top. Writing always emits little-endian with scale -1.0; a write/read
//! round trip is bit-exact.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::PfmBadHeader("unexpected end of header".into()));
    }
    Ok(&bytes[start..*pos])
}

/// Parse PFM bytes into an (h, w) disparity tensor.
pub fn read_pfm(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.len() < 2 || &bytes[..2] != b"Pf" {
        return Err(Error::PfmBadMagic);
    }
    let mut pos = 2usize;
    let parse_dim = |tok: &[u8]| -> Result<usize> {
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .filter(|&v| v > 0)
            .ok_or_else(|| Error::PfmBadHeader("bad dimension".into()))
    };
    let w = parse_dim(next_token(bytes, &mut pos)?)?;
    let h = parse_dim(next_token(bytes, &mut pos)?)?;
    let scale: f32 = std::str::from_utf8(next_token(bytes, &mut pos)?)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::PfmBadHeader("bad scale".into()))?;
    if scale == 0.0 {
        return Err(Error::PfmZeroScale);
    }
    // Exactly one whitespace byte separates the header from the payload.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::PfmBadHeader("missing payload separator".into()));
    }
    pos += 1;
    let payload = &bytes[pos..];
    let expected = w * h * 4;
    if payload.len() != expected {
        return Err(Error::PfmTruncated {
            expected,
            actual: payload.len(),
        });
    }
    let little_endian = scale < 0.0;
    let mut data = vec![0.0f32; w * h];
    for file_row in 0..h {
        let image_row = h - 1 - file_row; // bottom-to-top storage
        for x in 0..w {
            let off = (file_row * w + x) * 4;
            let raw: [u8; 4] = payload[off..off + 4].try_into().unwrap();
            let v = if little_endian {
                f32::from_le_bytes(raw)
            } else {
                f32::from_be_bytes(raw)
            };
            data[image_row * w + x] = v;
        }
    }
    Tensor::new(&[h, w], data)
}

/// Serialize an (h, w) tensor as little-endian PFM.
pub fn write_pfm(map: &Tensor<f32>) -> Result<Vec<u8>> {
    if map.rank() != 2 {
        return Err(Error::invalid(format!(
            "pfm expects an (h, w) map, got {:?}",
            map.shape()
        )));
    }
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let mut out = format!("Pf\n{} {}\n-1.0\n", w, h).into_bytes();
    out.reserve(h * w * 4);
    for file_row in 0..h {
        let image_row = h - 1 - file_row;
        for x in 0..w {
            out.extend_from_slice(&map.data()[image_row * w + x].to_le_bytes());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let map = Tensor::<f32>::from_fn(&[3, 2], |i| (i as f32 * 1.37 - 2.0).exp());
        let bytes = write_pfm(&map).unwrap();
        let back = read_pfm(&bytes).unwrap();
        assert_eq!(map, back);
        // And byte-stable over a second pass.
        assert_eq!(bytes, write_pfm(&back).unwrap());
    }

    #[test]
    fn header_arithmetic() {
        // "Pf\n3 2\n-1.0\n" + 24 payload bytes parses to shape (2, 3).
        let mut bytes = b"Pf\n3 2\n-1.0\n".to_vec();
        bytes.extend_from_slice(&[0u8; 24]);
        let t = read_pfm(&bytes).unwrap();
        assert_eq!(t.shape(), &[2, 3]);
    }

    #[test]
    fn truncated_payload_rejected() {
        let mut bytes = b"Pf\n3 2\n-1.0\n".to_vec();
        bytes.extend_from_slice(&[0u8; 23]);
        match read_pfm(&bytes) {
            Err(Error::PfmTruncated { expected: 24, actual: 23 }) => {}
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_zero_scale_rejected() {
        assert!(matches!(read_pfm(b"PF\n1 1\n-1.0\n"), Err(Error::PfmBadMagic)));
        let mut bytes = b"Pf\n1 1\n0.0\n".to_vec();
        bytes.extend_from_slice(&[0u8; 4]);
        assert!(matches!(read_pfm(&bytes), Err(Error::PfmZeroScale)));
    }

    #[test]
    fn big_endian_scale_reads_swapped() {
        let v = 1234.5f32;
        let mut bytes = b"Pf\n1 1\n1.0\n".to_vec();
        bytes.extend_from_slice(&v.to_be_bytes());
        let t = read_pfm(&bytes).unwrap();
        assert_eq!(t.data()[0], v);
    }
}
