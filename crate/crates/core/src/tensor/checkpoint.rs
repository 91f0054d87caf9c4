//! Binary parameter checkpoints.
//!
//! Layout (little endian): magic `LNATCKPT`, `u32` version, `u64` count, then
//! per parameter `u32` name length, UTF-8 name, `u32` rank, `u64` dims, and
//! the values as `f64` bit patterns. Values are widened to `f64` on write,
//! which is exact for both supported scalar types, so reloads are bitwise.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"LNATCKPT";
const VERSION: u32 = 1;

pub fn save_checkpoint<S: Scalar>(store: &ParamStore<S>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    put(MAGIC)?;
    put(&VERSION.to_le_bytes())?;
    put(&(store.len() as u64).to_le_bytes())?;
    for (_, p) in store.iter() {
        put(&(p.name.len() as u32).to_le_bytes())?;
        put(p.name.as_bytes())?;
        put(&(p.value.rank() as u32).to_le_bytes())?;
        for &d in p.value.shape() {
            put(&(d as u64).to_le_bytes())?;
        }
        for v in p.value.data() {
            put(&v.as_f64().to_bits().to_le_bytes())?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

struct Reader<R> {
    inner: R,
    path: std::path::PathBuf,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| Error::io(&self.path, e))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn bad(&self, detail: impl Into<String>) -> Error {
        Error::Format {
            what: "checkpoint",
            path: self.path.clone(),
            detail: detail.into(),
        }
    }
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<ParamStore<S>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        inner: BufReader::new(file),
        path: path.to_path_buf(),
    };
    if &r.bytes::<8>()? != MAGIC {
        return Err(r.bad("bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.bad(format!("unsupported version {version}")));
    }
    let count = r.u64()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let mut name = vec![0u8; len];
        r.inner
            .read_exact(&mut name)
            .map_err(|e| Error::io(path, e))?;
        let name = String::from_utf8(name).map_err(|_| r.bad("parameter name is not UTF-8"))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(S::of(f64::from_bits(r.u64()?)));
        }
        store.add(name, Tensor::new(shape, data)?)?;
    }
    Ok(store)
}
