//! `OBJPROP1` parameter files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic    8 bytes  "OBJPROP1"
//! blocks   u32      number of layers (6)
//! dims     u32 × 4  kernel_h, kernel_w, c_in, c_out, per layer
//! values   f32 × n  per layer: weights, then biases
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::head::HeadParams;
use crate::io::{read_file, write_atomic};

pub const MAGIC: &[u8; 8] = b"OBJPROP1";

/// Encoded size of `p` in bytes.
pub fn encoded_len(p: &HeadParams) -> usize {
    MAGIC.len() + 4 + 16 * p.layers().len() + 4 * p.len()
}

pub fn params_to_bytes(p: &HeadParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(encoded_len(p));
    out.extend_from_slice(MAGIC);
    let layers = p.layers();
    out.extend_from_slice(&(layers.len() as u32).to_le_bytes());
    for l in layers {
        for d in l.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for v in p.values() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    let slice = bytes.get(at..at + 4).ok_or(Error::Truncated {
        needed: at + 4,
        found: bytes.len(),
    })?;
    Ok(u32::from_le_bytes(slice.try_into().expect("4 bytes")))
}

pub fn params_from_bytes(bytes: &[u8]) -> Result<HeadParams> {
    if bytes.len() < MAGIC.len() {
        return Err(Error::Truncated {
            needed: MAGIC.len(),
            found: bytes.len(),
        });
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::BadMagic);
    }
    let blocks = read_u32(bytes, 8)? as usize;
    if blocks != 6 {
        return Err(Error::ParamShape(format!("expected 6 layers, found {blocks}")));
    }
    let mut dims = Vec::with_capacity(blocks);
    for b in 0..blocks {
        let at = 12 + 16 * b;
        let d: [usize; 4] = [0, 1, 2, 3].map(|k| read_u32(bytes, at + 4 * k).map(|v| v as usize))
            .into_iter()
            .collect::<Result<Vec<_>>>()?
            .try_into()
            .expect("4 dims");
        dims.push(d);
    }
    let (c_in, hidden) = (dims[0][2], dims[0][3]);
    let mut p = HeadParams::zeros(c_in, hidden);
    if p.layers().iter().zip(&dims).any(|(l, d)| l.dims() != *d) {
        return Err(Error::ParamShape(format!("inconsistent layer dimensions {dims:?}")));
    }
    let header = 12 + 16 * blocks;
    let needed = header + 4 * p.len();
    if bytes.len() < needed {
        return Err(Error::Truncated {
            needed,
            found: bytes.len(),
        });
    }
    if bytes.len() > needed {
        return Err(Error::ParamShape(format!(
            "{} trailing bytes after parameters",
            bytes.len() - needed
        )));
    }
    for (v, chunk) in p.values_mut().zip(bytes[header..].chunks_exact(4)) {
        *v = f64::from(f32::from_le_bytes(chunk.try_into().expect("4 bytes")));
    }
    p.validate()?;
    Ok(p)
}

pub fn save_params(p: &HeadParams, path: &Path) -> Result<()> {
    write_atomic(path, &params_to_bytes(p))
}

pub fn load_params(path: &Path) -> Result<HeadParams> {
    params_from_bytes(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_head_byte_length() {
        // conv 3·3·8·16+16, 3 × (3·3·16·16+16), deconv 2·2·16·16+16, predictor 16+1
        let n = (1152 + 16) + 3 * (2304 + 16) + (1024 + 16) + 17;
        assert_eq!(n, 9185);
        let p = HeadParams::zeros(8, 16);
        assert_eq!(p.len(), n);
        assert_eq!(params_to_bytes(&p).len(), 8 + 4 + 6 * 16 + 4 * n);
        assert_eq!(encoded_len(&p), 36848);
    }

    #[test]
    fn round_trip_within_f32() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = HeadParams::init(8, 16, &mut rng);
        let q = params_from_bytes(&params_to_bytes(&p)).unwrap();
        for (a, b) in p.values().zip(q.values()) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1e-30));
        }
    }

    #[test]
    fn distinct_errors() {
        let bytes = params_to_bytes(&HeadParams::zeros(2, 3));
        assert!(matches!(params_from_bytes(b"OBJPROP2xxxx"), Err(Error::BadMagic)));
        assert!(matches!(
            params_from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::Truncated { .. })
        ));
        assert!(matches!(params_from_bytes(&bytes[..20]), Err(Error::Truncated { .. })));
        let mut wrong = bytes.clone();
        wrong[12] = 5; // first conv kernel_h
        assert!(matches!(params_from_bytes(&wrong), Err(Error::ParamShape(_))));
    }
}
