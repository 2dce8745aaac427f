//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "LUPICKPT"
//! version    u32      1
//! endianness u8       1 = little-endian payload
//! precision  u8       32 | 64 (bits per value)
//! header     u32 length + UTF-8 bytes (free-form metadata, JSON by convention)
//! count      u32
//! count x { name: u32 length + UTF-8; ndim: u32; dims: ndim x u64; values }
//! ```

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::tensor::{Precision, Scalar, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"LUPICKPT";
pub const VERSION: u32 = 1;
const LITTLE_ENDIAN: u8 = 1;

/// Named, shape-tagged arrays plus a metadata header.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub header: String,
    pub arrays: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.write_u32::<LittleEndian>(VERSION).unwrap();
        out.push(LITTLE_ENDIAN);
        out.push(T::PRECISION.bits());
        write_str(&mut out, &self.header);
        out.write_u32::<LittleEndian>(self.arrays.len() as u32).unwrap();
        for (name, t) in &self.arrays {
            write_str(&mut out, name);
            out.write_u32::<LittleEndian>(t.shape().len() as u32).unwrap();
            for &d in t.shape() {
                out.write_u64::<LittleEndian>(d as u64).unwrap();
            }
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let corrupt = |reason: String| Error::Corrupt {
            path: origin.to_path_buf(),
            reason,
        };
        let mut cur = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        cur.read_exact(&mut magic)
            .map_err(|_| corrupt("truncated magic".into()))?;
        if &magic != MAGIC {
            return Err(corrupt("bad magic".into()));
        }
        let eof = |_| corrupt("unexpected end of file".into());
        let version = cur.read_u32::<LittleEndian>().map_err(eof)?;
        if version != VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        if cur.read_u8().map_err(eof)? != LITTLE_ENDIAN {
            return Err(corrupt("unsupported endianness".into()));
        }
        let bits = cur.read_u8().map_err(eof)?;
        match Precision::from_bits(bits) {
            Some(p) if p == T::PRECISION => {}
            Some(p) => {
                return Err(corrupt(format!(
                    "checkpoint precision {:?} does not match requested {:?}",
                    p,
                    T::PRECISION
                )))
            }
            None => return Err(corrupt(format!("unknown precision {bits}"))),
        }
        let header = read_str(&mut cur).map_err(|e| corrupt(e.to_string()))?;
        let count = cur.read_u32::<LittleEndian>().map_err(eof)?;
        let width = (bits / 8) as usize;
        let mut arrays = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name = read_str(&mut cur).map_err(|e| corrupt(e.to_string()))?;
            let ndim = cur.read_u32::<LittleEndian>().map_err(eof)?;
            let mut shape = Vec::with_capacity(ndim as usize);
            for _ in 0..ndim {
                shape.push(cur.read_u64::<LittleEndian>().map_err(eof)? as usize);
            }
            let n: usize = shape.iter().product();
            let start = cur.position() as usize;
            let end = start + n * width;
            if end > bytes.len() {
                return Err(corrupt(format!("array {name} truncated")));
            }
            let data = bytes[start..end].chunks_exact(width).map(T::read_le).collect();
            cur.set_position(end as u64);
            arrays.push((name, Tensor::new(shape, data)?));
        }
        if (cur.position() as usize) != bytes.len() {
            return Err(corrupt("trailing bytes".into()));
        }
        Ok(Self { header, arrays })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Reads only the precision byte of a checkpoint file.
pub fn peek_precision(path: impl AsRef<Path>) -> Result<Precision> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 14 || &bytes[..8] != MAGIC {
        return Err(Error::Corrupt {
            path: path.to_path_buf(),
            reason: "not a checkpoint".into(),
        });
    }
    Precision::from_bits(bytes[13]).ok_or_else(|| Error::Corrupt {
        path: path.to_path_buf(),
        reason: format!("unknown precision {}", bytes[13]),
    })
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.write_u32::<LittleEndian>(s.len() as u32).unwrap();
    out.extend_from_slice(s.as_bytes());
}

fn read_str(cur: &mut Cursor<&[u8]>) -> std::io::Result<String> {
    let len = cur.read_u32::<LittleEndian>()? as usize;
    let mut buf = vec![0u8; len];
    cur.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}
