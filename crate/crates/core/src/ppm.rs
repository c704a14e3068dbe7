//! Binary PPM (P6, 8-bit) decoding into feature maps.
//!
//! Header: `P6`, whitespace-separated width/height/maxval (with `#` comments
//! allowed), one whitespace byte, then `width * height * 3` RGB bytes.
//! Decoded pixels are scaled by 1/255 into a 3-channel [`FeatureMap`].

use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos,
            message: message.into(),
        }
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn skip_whitespace_and_comments(&mut self) {
        loop {
            match self.peek() {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while let Some(b) = self.peek() {
                        self.pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                _ => break,
            }
        }
    }

    fn read_uint(&mut self, what: &str) -> Result<usize> {
        self.skip_whitespace_and_comments();
        let start = self.pos;
        while matches!(self.peek(), Some(b) if b.is_ascii_digit()) {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| self.err(format!("unparseable {what}")))
    }
}

/// Decodes a P6 PPM byte buffer into a 3 x height x width map with values in
/// `[0, 1]`.
pub fn decode_p6(bytes: &[u8]) -> Result<FeatureMap> {
    let mut cur = Cursor { bytes, pos: 0 };
    if bytes.len() < 2 || &bytes[0..2] != b"P6" {
        return Err(cur.err("missing P6 signature"));
    }
    cur.pos = 2;
    let width = cur.read_uint("width")?;
    let height = cur.read_uint("height")?;
    let maxval = cur.read_uint("maxval")?;
    if width == 0 || height == 0 {
        return Err(cur.err("zero image dimension"));
    }
    if maxval != 255 {
        return Err(cur.err(format!("unsupported maxval {maxval}, expected 255")));
    }
    match cur.peek() {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(cur.err("expected single whitespace after maxval")),
    }
    let need = width * height * 3;
    let have = bytes.len() - cur.pos;
    if have < need {
        cur.pos = bytes.len();
        return Err(cur.err(format!(
            "truncated pixel data: need {need} bytes, have {have}"
        )));
    }
    let pixels = &bytes[cur.pos..cur.pos + need];
    let mut map = FeatureMap::zeros(3, height, width);
    for y in 0..height {
        for x in 0..width {
            let base = (y * width + x) * 3;
            for c in 0..3 {
                map.set(c, y, x, pixels[base + c] as f64 / 255.0);
            }
        }
    }
    Ok(map)
}

pub fn read_file(path: impl AsRef<std::path::Path>) -> Result<FeatureMap> {
    decode_p6(&std::fs::read(path)?)
}

/// Encodes a 3-channel map (values clamped to `[0, 1]`) as P6. Used by tests
/// and fixture generation.
pub fn encode_p6(map: &FeatureMap) -> Result<Vec<u8>> {
    if map.channels() != 3 {
        return Err(Error::invalid(format!(
            "encode_p6: need 3 channels, got {}",
            map.channels()
        )));
    }
    let (w, h) = (map.width(), map.height());
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push((map.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}
