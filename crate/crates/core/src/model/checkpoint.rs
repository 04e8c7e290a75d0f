//! Binary checkpoint files.
//!
//! Layout, integers little-endian:
//!
//! ```text
//! "PREN" | u32 version | u32 tensor count
//! per tensor: u32 name length | name (UTF-8) | u32 rank | rank x u32 dims | f32 data
//! u32 config length | config text (UTF-8, `key = value` lines)
//! ```

use std::fs;
use std::path::Path;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"PREN";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_checkpoint(params: &ParamSet<f32>, config: &KeyValues) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(12 + 4 * params.param_count());
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_u32(&mut out, params.len())?;
    for (name, t) in params.iter() {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rank())?;
        for &d in t.shape() {
            put_u32(&mut out, d)?;
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let text = config.to_text();
    put_u32(&mut out, text.len())?;
    out.extend_from_slice(text.as_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated(format!(
                "{what}: need {n} bytes at offset {}, {} left",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn text(&mut self, what: &str) -> Result<&'a str> {
        let n = self.u32(what)?;
        std::str::from_utf8(self.take(n, what)?).map_err(|e| Error::Parse(format!("{what}: {e}")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ParamSet<f32>, KeyValues)> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            expected: CHECKPOINT_MAGIC,
            found: magic,
        });
    }
    let version = r.u32("version")? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let count = r.u32("tensor count")?;
    let mut params = ParamSet::new();
    for i in 0..count {
        let name = r.text(&format!("tensor {i} name"))?.to_string();
        let rank = r.u32(&format!("tensor `{name}` rank"))?;
        let dims = (0..rank)
            .map(|_| r.u32(&format!("tensor `{name}` dims")))
            .collect::<Result<Vec<_>>>()?;
        let len = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Parse(format!("tensor `{name}` dims {dims:?} overflow")))?;
        let data = r
            .take(len, &format!("tensor `{name}` data"))?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        params.insert(name, Tensor::new(&dims, data)?)?;
    }
    let config = KeyValues::parse(r.text("config")?)?;
    if r.pos != bytes.len() {
        return Err(Error::TrailingData(bytes.len() - r.pos));
    }
    Ok((params, config))
}

/// Writes `params` and the config echo; the file is replaced atomically
/// enough for single-writer use (write to a sibling, then rename).
pub fn save_checkpoint(params: &ParamSet<f32>, config: &KeyValues, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(params, config)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamSet<f32>, KeyValues)> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (ParamSet<f32>, KeyValues) {
        let mut p = ParamSet::new();
        p.insert("a.w", Tensor::new(&[2, 3], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5, 1e-30, -7.25]).unwrap())
            .unwrap();
        p.insert("a.b", Tensor::new(&[3], vec![0.1, 0.2, 0.3]).unwrap()).unwrap();
        let mut kv = KeyValues::new();
        kv.insert("seed", 7);
        (p, kv)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let (p, kv) = sample();
        let bytes = encode_checkpoint(&p, &kv).unwrap();
        let (q, kv2) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(kv, kv2);
        assert_eq!(p.names(), q.names());
        for (a, b) in p.tensors().iter().zip(q.tensors()) {
            assert_eq!(a.shape(), b.shape());
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn corruption_is_classified() {
        let (p, kv) = sample();
        let good = encode_checkpoint(&p, &kv).unwrap();
        let mut m = good.clone();
        m[1] = b'X';
        assert!(matches!(decode_checkpoint(&m), Err(Error::BadMagic { .. })));
        let mut v = good.clone();
        v[4] = 2;
        assert!(matches!(decode_checkpoint(&v), Err(Error::VersionMismatch { found: 2, expected: 1 })));
        assert!(matches!(decode_checkpoint(&good[..good.len() - 1]), Err(Error::Truncated(_))));
        assert!(matches!(decode_checkpoint(&good[..30]), Err(Error::Truncated(_))));
        let mut t = good.clone();
        t.extend_from_slice(&[0, 0]);
        assert!(matches!(decode_checkpoint(&t), Err(Error::TrailingData(2))));
    }
}
