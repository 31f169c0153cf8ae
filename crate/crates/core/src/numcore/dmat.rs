//! DMAT binary matrix files.
//!
//! Layout, all little-endian: `b"DMAT"`, `version: u32`, `rows: u32`,
//! `cols: u32`, then `rows * cols` `f64` values in row-major order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::Matrix;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DMAT";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

pub fn encode(m: &Matrix) -> Result<Vec<u8>> {
    let rows = u32::try_from(m.rows()).map_err(|_| Error::contract("DMAT rows exceed u32"))?;
    let cols = u32::try_from(m.cols()).map_err(|_| Error::contract("DMAT cols exceed u32"))?;
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * m.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&cols.to_le_bytes());
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Matrix, String> {
    if bytes.len() < HEADER_LEN {
        return Err(format!(
            "file too short for DMAT header ({} bytes)",
            bytes.len()
        ));
    }
    if &bytes[0..4] != MAGIC {
        return Err("bad magic, expected DMAT".into());
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != VERSION {
        return Err(format!("unsupported DMAT version {version}"));
    }
    let rows = word(8) as usize;
    let cols = word(12) as usize;
    let expected = HEADER_LEN + 8 * rows * cols;
    if bytes.len() != expected {
        return Err(format!(
            "payload length {} does not match {rows}x{cols} (expected {expected} bytes)",
            bytes.len()
        ));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Matrix::from_vec(rows, cols, data).expect("length checked above"))
}

pub fn write(path: &Path, m: &Matrix) -> Result<()> {
    let bytes = encode(m)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Matrix> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|msg| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_bit_exact() {
        let m = Matrix::from_rows(&[vec![1.0, -2.5]]).unwrap();
        let b = encode(&m).unwrap();
        assert_eq!(&b[0..4], b"DMAT");
        assert_eq!(&b[4..8], &[1, 0, 0, 0]);
        assert_eq!(&b[8..12], &[1, 0, 0, 0]);
        assert_eq!(&b[12..16], &[2, 0, 0, 0]);
        assert_eq!(&b[16..24], &1.0f64.to_le_bytes());
        assert_eq!(b.len(), 32);
    }

    #[test]
    fn rejects_corrupt_input() {
        assert!(decode(b"DMA").is_err());
        let mut b = encode(&Matrix::zeros(2, 2)).unwrap();
        b.pop();
        assert!(decode(&b).is_err());
        b = encode(&Matrix::zeros(1, 1)).unwrap();
        b[0] = b'X';
        assert!(decode(&b).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(rows in 0usize..6, cols in 0usize..6, seed in any::<u64>()) {
            let mut rng = crate::numcore::RngStream::new(seed);
            let m = Matrix::from_fn(rows, cols, |_, _| rng.normal() * 1e3);
            let back = decode(&encode(&m).unwrap()).unwrap();
            prop_assert_eq!(back, m);
        }
    }
}
