//! Binary container for named tensors.
//!
//! Layout: magic `FARG`, format version 1 (u32 LE), then repeated records:
//! name length (u32 LE), UTF-8 name, dtype tag (u8: 0 = f32, 1 = f64),
//! rank (u32 LE), dims (u32 LE each), raw little-endian element bytes.
//! Writes are atomic (temp file + rename) and round-trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use fargan_tensor::DType;

use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const MAGIC: [u8; 4] = *b"FARG";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedTensor {
    pub fn scalar(name: impl Into<String>, value: f64) -> Self {
        NamedTensor {
            name: name.into(),
            dtype: DType::F64,
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn scalar_value(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }
}

pub fn write_container(path: &Path, tensors: &[NamedTensor]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let file = File::create(&tmp)
            .map_err(|e| Error::io(format!("creating {}", tmp.display()), e))?;
        let mut w = BufWriter::new(file);
        let io_err = |e: std::io::Error| Error::io(format!("writing {}", tmp.display()), e);
        w.write_all(&MAGIC).map_err(io_err)?;
        w.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
        for t in tensors {
            debug_assert_eq!(t.data.len(), t.shape.iter().product::<usize>());
            w.write_all(&(t.name.len() as u32).to_le_bytes()).map_err(io_err)?;
            w.write_all(t.name.as_bytes()).map_err(io_err)?;
            let tag: u8 = match t.dtype {
                DType::F32 => 0,
                DType::F64 => 1,
            };
            w.write_all(&[tag]).map_err(io_err)?;
            w.write_all(&(t.shape.len() as u32).to_le_bytes()).map_err(io_err)?;
            for &d in &t.shape {
                w.write_all(&(d as u32).to_le_bytes()).map_err(io_err)?;
            }
            match t.dtype {
                DType::F32 => {
                    for &v in &t.data {
                        w.write_all(&(v as f32).to_le_bytes()).map_err(io_err)?;
                    }
                }
                DType::F64 => {
                    for &v in &t.data {
                        w.write_all(&v.to_le_bytes()).map_err(io_err)?;
                    }
                }
            }
        }
        w.flush().map_err(io_err)?;
    }
    std::fs::rename(&tmp, path)
        .map_err(|e| Error::io(format!("renaming {} into place", tmp.display()), e))
}

struct Reader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Reader<R> {
    fn take(&mut self, buf: &mut [u8], path: &Path, what: &str) -> Result<()> {
        let at = self.offset;
        self.inner.read_exact(buf).map_err(|e| Error::CheckpointFormat {
            path: path.to_path_buf(),
            msg: format!("{what}: {e}"),
            offset: at,
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    /// Read that distinguishes clean EOF (Ok(false)) from truncation.
    fn take_or_eof(&mut self, buf: &mut [u8], path: &Path, what: &str) -> Result<bool> {
        let at = self.offset;
        let mut filled = 0;
        while filled < buf.len() {
            match self.inner.read(&mut buf[filled..]) {
                Ok(0) => {
                    if filled == 0 {
                        return Ok(false);
                    }
                    return Err(Error::CheckpointFormat {
                        path: path.to_path_buf(),
                        msg: format!("{what}: truncated record"),
                        offset: at + filled as u64,
                    });
                }
                Ok(n) => filled += n,
                Err(e) => {
                    return Err(Error::CheckpointFormat {
                        path: path.to_path_buf(),
                        msg: format!("{what}: {e}"),
                        offset: at + filled as u64,
                    })
                }
            }
        }
        self.offset += buf.len() as u64;
        Ok(true)
    }
}

pub fn read_container(path: &Path) -> Result<Vec<NamedTensor>> {
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut r = Reader {
        inner: BufReader::new(file),
        offset: 0,
    };
    let bad = |msg: String, offset: u64| Error::CheckpointFormat {
        path: path.to_path_buf(),
        msg,
        offset,
    };

    let mut magic = [0u8; 4];
    r.take(&mut magic, path, "magic")?;
    if magic != MAGIC {
        return Err(bad(format!("bad magic {magic:?}"), 0));
    }
    let mut ver = [0u8; 4];
    r.take(&mut ver, path, "version")?;
    let version = u32::from_le_bytes(ver);
    if version != VERSION {
        return Err(bad(format!("unsupported format version {version}"), 4));
    }

    let mut tensors = Vec::new();
    loop {
        let mut len4 = [0u8; 4];
        if !r.take_or_eof(&mut len4, path, "name length")? {
            break;
        }
        let name_len = u32::from_le_bytes(len4) as usize;
        if name_len == 0 || name_len > 4096 {
            return Err(bad(format!("implausible name length {name_len}"), r.offset - 4));
        }
        let mut name_bytes = vec![0u8; name_len];
        r.take(&mut name_bytes, path, "name")?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| bad("name is not UTF-8".into(), r.offset - name_len as u64))?;
        let mut tag = [0u8; 1];
        r.take(&mut tag, path, "dtype tag")?;
        let dtype = match tag[0] {
            0 => DType::F32,
            1 => DType::F64,
            t => return Err(bad(format!("unknown dtype tag {t}"), r.offset - 1)),
        };
        let mut rank4 = [0u8; 4];
        r.take(&mut rank4, path, "rank")?;
        let rank = u32::from_le_bytes(rank4) as usize;
        if rank > 32 {
            return Err(bad(format!("implausible rank {rank}"), r.offset - 4));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut d4 = [0u8; 4];
            r.take(&mut d4, path, "dimension")?;
            shape.push(u32::from_le_bytes(d4) as usize);
        }
        let numel: usize = shape.iter().product();
        if numel > 1 << 30 {
            return Err(bad(format!("implausible element count {numel}"), r.offset));
        }
        let mut data = Vec::with_capacity(numel);
        match dtype {
            DType::F32 => {
                let mut b = [0u8; 4];
                for _ in 0..numel {
                    r.take(&mut b, path, "element data")?;
                    data.push(f32::from_le_bytes(b) as f64);
                }
            }
            DType::F64 => {
                let mut b = [0u8; 8];
                for _ in 0..numel {
                    r.take(&mut b, path, "element data")?;
                    data.push(f64::from_le_bytes(b));
                }
            }
        }
        tensors.push(NamedTensor {
            name,
            dtype,
            shape,
            data,
        });
    }
    Ok(tensors)
}

/// Every store entry as a prefixed named tensor.
pub fn store_tensors(prefix: &str, store: &ParamStore, dtype: DType) -> Vec<NamedTensor> {
    store
        .entries()
        .iter()
        .map(|e| NamedTensor {
            name: format!("{prefix}.{}", e.name),
            dtype,
            shape: e.shape.clone(),
            data: e.data.clone(),
        })
        .collect()
}

/// Restore every store entry from its prefixed tensor; all entries must be
/// present with matching shapes.
pub fn load_store(tensors: &[NamedTensor], prefix: &str, store: &mut ParamStore) -> Result<()> {
    for i in 0..store.len() {
        let name = format!("{prefix}.{}", store.entries()[i].name);
        let t = tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::config(format!("checkpoint missing tensor `{name}`")))?;
        let entry_name = store.entries()[i].name.clone();
        store.load_named(&entry_name, t.data.clone(), &t.shape)?;
    }
    Ok(())
}

/// Fetch one scalar by name.
pub fn find_scalar(tensors: &[NamedTensor], name: &str) -> Result<f64> {
    tensors
        .iter()
        .find(|t| t.name == name)
        .and_then(NamedTensor::scalar_value)
        .ok_or_else(|| Error::config(format!("checkpoint missing scalar `{name}`")))
}
