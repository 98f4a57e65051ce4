//! Binary PPM (P6, maxval 255) frames.

use crate::encoder::Frame;
use crate::error::{Error, Result};

pub fn encode_ppm(frame: &Frame) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", frame.width(), frame.height()).into_bytes();
    out.extend_from_slice(frame.bytes());
    out
}

/// Parses a P6 image with maxval 255; `#` comments are allowed in the
/// header.
pub fn decode_ppm(bytes: &[u8]) -> Result<Frame> {
    let mut pos = 0usize;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Input("truncated PPM header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P6" {
        return Err(Error::Input("not a binary PPM (P6) image".into()));
    }
    let num = |s: String| {
        s.parse::<usize>()
            .map_err(|_| Error::Input(format!("bad PPM header field {s:?}")))
    };
    let width = num(token()?)?;
    let height = num(token()?)?;
    let maxval = num(token()?)?;
    if maxval != 255 {
        return Err(Error::Input(format!("unsupported PPM maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    let need = width * height * 3;
    if bytes.len() < start + need {
        return Err(Error::Input("truncated PPM raster".into()));
    }
    Frame::new(width, height, bytes[start..start + need].to_vec())
}
