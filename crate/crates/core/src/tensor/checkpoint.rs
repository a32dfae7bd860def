//! Flat binary parameter container.
//!
//! ```text
//! "DMTK"                      4 bytes
//! version                     u32 LE
//! repeated until end of data:
//!   name length               u32 LE
//!   name                      UTF-8 bytes
//!   rank                      u32 LE
//!   dims                      rank x u64 LE
//!   data                      prod(dims) x f64 LE
//! ```

use std::path::Path;

use crate::error::{Error, Result};

use super::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DMTK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(entries: &[(String, Tensor<f64>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<Vec<(String, Tensor<f64>)>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic, not a DMTK file".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut out = Vec::new();
    while r.pos < buf.len() {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|e| Error::Checkpoint(format!("parameter name: {e}")))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u64()? as usize);
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("{name}: dimension overflow")))?;
        let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((name, Tensor::new(&dims, data)?));
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, entries: &[(String, Tensor<f64>)]) -> Result<()> {
    std::fs::write(path, encode_checkpoint(entries)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor<f64>)>> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_fixed() {
        let t = Tensor::new(&[2], vec![1.0, -0.5]).unwrap();
        let bytes = encode_checkpoint(&[("a".to_string(), t)]);
        let mut want = b"DMTK".to_vec();
        want.extend(1u32.to_le_bytes());
        want.extend(1u32.to_le_bytes());
        want.push(b'a');
        want.extend(1u32.to_le_bytes());
        want.extend(2u64.to_le_bytes());
        want.extend(1.0f64.to_le_bytes());
        want.extend((-0.5f64).to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(decode_checkpoint(b"NOPE\x01\0\0\0").is_err());
        let t = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let bytes = encode_checkpoint(&[("x".to_string(), t)]);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
    }

    proptest! {
        #[test]
        fn bit_exact_roundtrip(
            entries in proptest::collection::vec(
                ("[a-z._]{1,12}", proptest::collection::vec(any::<u64>(), 0..20)),
                0..5,
            )
        ) {
            let tensors: Vec<(String, Tensor<f64>)> = entries
                .into_iter()
                .map(|(n, bits)| {
                    let len = bits.len();
                    let data = bits.into_iter().map(f64::from_bits).collect();
                    (n, Tensor::new(&[len], data).unwrap())
                })
                .collect();
            let bytes = encode_checkpoint(&tensors);
            let back = decode_checkpoint(&bytes).unwrap();
            prop_assert_eq!(back.len(), tensors.len());
            for ((n1, t1), (n2, t2)) in tensors.iter().zip(&back) {
                prop_assert_eq!(n1, n2);
                prop_assert_eq!(t1.shape(), t2.shape());
                let b1: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
                let b2: Vec<u64> = t2.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(b1, b2);
            }
            prop_assert_eq!(encode_checkpoint(&back), bytes);
        }
    }
}
