//! Versioned binary container for named tensors.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes, ASCII, NUL padded ("EPMVG", "EPMVG-T")
//! version      u32
//! config_len   u32, then config_len bytes of UTF-8 `key=value\n` lines
//! count        u32
//! count x {
//!   name_len u32, name bytes (UTF-8)
//!   rank     u32, rank x u32 dims
//!   payload  prod(dims) x f64
//! }
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::scalar::Real;

pub const FORMAT_VERSION: u32 = 1;
pub const STUDENT_MAGIC: &str = "EPMVG";
pub const TEACHER_MAGIC: &str = "EPMVG-T";
const MAGIC_LEN: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Container<T> {
    pub config: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Real> Container<T> {
    pub fn config_value(&self, key: &str) -> Option<&str> {
        self.config
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn encode(&self, magic: &str) -> Vec<u8> {
        assert!(magic.len() <= MAGIC_LEN && magic.is_ascii());
        let mut out = Vec::new();
        let mut m = [0u8; MAGIC_LEN];
        m[..magic.len()].copy_from_slice(magic.as_bytes());
        out.extend_from_slice(&m);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let cfg: String = self
            .config
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        put_u32(&mut out, cfg.len());
        out.extend_from_slice(cfg.as_bytes());
        put_u32(&mut out, self.tensors.len());
        for (name, t) in &self.tensors {
            put_u32(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.shape().len());
            for &d in t.shape() {
                put_u32(&mut out, d);
            }
            for v in t.data() {
                out.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], magic: &str) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let found = r.take(MAGIC_LEN)?;
        let mut expected = [0u8; MAGIC_LEN];
        expected[..magic.len()].copy_from_slice(magic.as_bytes());
        if found != expected {
            let shown = String::from_utf8_lossy(found).trim_end_matches('\0').to_string();
            return Err(Error::Format(format!("magic {shown:?} is not {magic:?}")));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let cfg_len = r.u32()? as usize;
        let cfg = std::str::from_utf8(r.take(cfg_len)?)
            .map_err(|_| Error::Format("configuration block is not UTF-8".into()))?;
        let mut config = Vec::new();
        for line in cfg.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("malformed configuration line {line:?}")))?;
            config.push((k.to_string(), v.to_string()));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let payload = r.take(n.checked_mul(8).ok_or_else(|| Error::Integrity("tensor too large".into()))?)?;
            let data = payload
                .chunks_exact(8)
                .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
                .collect();
            let t = Tensor::new(shape, data)
                .map_err(|e| Error::Format(format!("tensor {name}: {e}")))?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::Integrity(format!(
                "{} trailing bytes after the last tensor",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { config, tensors })
    }

    /// Writes through a temporary file and renames it into place, so a failed
    /// write never clobbers the previous file.
    pub fn save(&self, path: &Path, magic: &str) -> Result<()> {
        let bytes = self.encode(magic);
        let tmp = path.with_extension("tmp");
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
            fs::rename(&tmp, path)
        };
        write().map_err(|e| {
            let _ = fs::remove_file(&tmp);
            Error::io(path, e)
        })
    }

    pub fn load(path: &Path, magic: &str) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, magic)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    let v = u32::try_from(v).expect("checkpoint field fits in u32");
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Integrity(format!(
                "file truncated: needed {n} bytes at offset {}, {} left",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
