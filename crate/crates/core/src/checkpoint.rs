//! Versioned checkpoint container: named f32 arrays, optimizer moments, a
//! JSON config echo and the step counter, sealed with a CRC32.
//!
//! Layout (little-endian): magic `DLCK`, version u32, config length u32 +
//! UTF-8 JSON, step u64, optimizer step u64, then three array groups
//! (parameters, first moments, second moments), each a u32 count of records
//! `[u16 name length, name, u8 rank, rank × u32 dims, f32 data]`, and a
//! trailing CRC32 of everything before it.

use std::path::Path;

use crate::nn::NamedArray;
use crate::{Error, Result};

pub const CKPT_MAGIC: [u8; 4] = *b"DLCK";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_json: String,
    pub step: u64,
    pub optimizer_step: u64,
    pub params: Vec<NamedArray>,
    pub adam_m: Vec<NamedArray>,
    pub adam_v: Vec<NamedArray>,
}

fn put_arrays(out: &mut Vec<u8>, arrays: &[NamedArray]) -> Result<()> {
    out.extend((arrays.len() as u32).to_le_bytes());
    for a in arrays {
        let len = u16::try_from(a.name.len())
            .map_err(|_| Error::InvalidArgument(format!("name too long: {}", a.name)))?;
        out.extend(len.to_le_bytes());
        out.extend(a.name.as_bytes());
        out.push(
            u8::try_from(a.shape.len())
                .map_err(|_| Error::InvalidArgument("rank too large".into()))?,
        );
        for &d in &a.shape {
            out.extend((d as u32).to_le_bytes());
        }
        if a.data.len() != a.shape.iter().product::<usize>() {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", a.shape),
                got: format!("{} values", a.data.len()),
            });
        }
        for x in &a.data {
            out.extend(x.to_le_bytes());
        }
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Truncated {
            path: self.path.to_path_buf(),
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Malformed {
            path: self.path.to_path_buf(),
            msg: "invalid UTF-8".into(),
        })
    }

    fn arrays(&mut self) -> Result<Vec<NamedArray>> {
        let count = self.u32()? as usize;
        let mut out = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = self.u16()? as usize;
            let name = self.string(name_len)?;
            let rank = self.u8()? as usize;
            let shape = (0..rank)
                .map(|_| self.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Truncated {
                path: self.path.to_path_buf(),
            })?)?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            out.push(NamedArray { name, shape, data });
        }
        Ok(out)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend(CKPT_MAGIC);
        out.extend(CKPT_VERSION.to_le_bytes());
        out.extend((self.config_json.len() as u32).to_le_bytes());
        out.extend(self.config_json.as_bytes());
        out.extend(self.step.to_le_bytes());
        out.extend(self.optimizer_step.to_le_bytes());
        put_arrays(&mut out, &self.params)?;
        put_arrays(&mut out, &self.adam_m)?;
        put_arrays(&mut out, &self.adam_v)?;
        let crc = crc32fast::hash(&out);
        out.extend(crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(Error::Truncated {
                path: path.to_path_buf(),
            });
        }
        let mut c = Cursor {
            buf: bytes,
            pos: 0,
            path,
        };
        let magic: [u8; 4] = c.take(4)?.try_into().unwrap();
        if magic != CKPT_MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                found: magic,
                expected: CKPT_MAGIC,
            });
        }
        let version = c.u32()?;
        if version != CKPT_VERSION {
            return Err(Error::UnsupportedVersion {
                path: path.to_path_buf(),
                found: version,
            });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
            return Err(Error::Malformed {
                path: path.to_path_buf(),
                msg: "checkpoint checksum mismatch".into(),
            });
        }
        c.buf = body;
        let cfg_len = c.u32()? as usize;
        let config_json = c.string(cfg_len)?;
        let step = c.u64()?;
        let optimizer_step = c.u64()?;
        let params = c.arrays()?;
        let adam_m = c.arrays()?;
        let adam_v = c.arrays()?;
        if c.pos != body.len() {
            return Err(Error::Malformed {
                path: path.to_path_buf(),
                msg: "trailing bytes".into(),
            });
        }
        Ok(Self {
            config_json,
            step,
            optimizer_step,
            params,
            adam_m,
            adam_v,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::path::PathBuf;

    fn sample() -> Checkpoint {
        let a = NamedArray {
            name: "pi.mu.w".into(),
            shape: vec![2, 3],
            data: vec![1.0, -2.0, 0.5, 3.25, f32::MIN_POSITIVE, 7.0],
        };
        let b = NamedArray {
            name: "pi.log_sigma".into(),
            shape: vec![3],
            data: vec![0.0, -0.1, 0.2],
        };
        Checkpoint {
            config_json: "{\"mode\":\"deltaco\"}".into(),
            step: 1234,
            optimizer_step: 1234,
            params: vec![a.clone(), b.clone()],
            adam_m: vec![a.clone(), b.clone()],
            adam_v: vec![b, a],
        }
    }

    #[test]
    fn round_trip_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.dlck");
        sample().save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), sample());
    }

    #[test]
    fn detects_corruption() {
        let p = PathBuf::from("mem");
        let mut bytes = sample().to_bytes().unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x10;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes, &p),
            Err(Error::Malformed { .. })
        ));
        let mut bad = sample().to_bytes().unwrap();
        bad[4] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bad, &p),
            Err(Error::UnsupportedVersion { found: 9, .. })
        ));
        assert!(matches!(
            Checkpoint::from_bytes(b"DLTC\x01\0\0\0\0\0\0\0", &p),
            Err(Error::BadMagic { .. })
        ));
        assert!(matches!(
            Checkpoint::from_bytes(b"DLCK", &p),
            Err(Error::Truncated { .. })
        ));
    }

    proptest! {
        #[test]
        fn round_trip_arbitrary(data in prop::collection::vec(any::<f32>().prop_filter("finite", |x| x.is_finite()), 0..40), step in any::<u64>()) {
            let n = data.len();
            let ck = Checkpoint {
                config_json: String::new(),
                step,
                optimizer_step: step / 2,
                params: vec![NamedArray { name: "p".into(), shape: vec![n], data }],
                adam_m: vec![],
                adam_v: vec![],
            };
            let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap(), Path::new("mem")).unwrap();
            prop_assert_eq!(back, ck);
        }
    }
}
