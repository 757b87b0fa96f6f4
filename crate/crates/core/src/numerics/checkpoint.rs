//! Parameter checkpoint file.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes   "PMCK"
//! version    u32       1
//! meta_len   u32       length of the UTF-8 metadata string that follows
//! meta       bytes     free-form "key=value;..." (config hash, strategy, epoch)
//! count      u32       number of tensors
//! repeated count times:
//!   name_len u16, name (UTF-8)
//!   ndim     u8, dims u32 x ndim
//!   values   f32 x prod(dims), row-major
//! ```

use std::fs;
use std::path::Path;

use super::array::DArray;
use super::params::ParamStore;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(store: &ParamStore, meta: &str) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + store.n_scalars() * 4);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for id in store.ids() {
        let name = store.name(id).as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        let v = store.value(id);
        out.push(v.shape().len() as u8);
        for &d in v.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in v.data() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    out
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8], path: &'a Path) -> Self {
        Reader { buf, pos: 0, path }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(self.path, format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn string(&mut self, n: usize) -> Result<String> {
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::format(self.path, "invalid UTF-8"))
    }

    pub(crate) fn finished(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<(ParamStore, String)> {
    let mut r = Reader::new(bytes, path);
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "bad checkpoint magic"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let meta_len = r.u32()? as usize;
    let meta = r.string(meta_len)?;
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = r.string(name_len)?;
        let ndim = r.u8()? as usize;
        let dims = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let data = (0..n).map(|_| r.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
        store.add(name, DArray::new(dims, data)?);
    }
    if !r.finished() {
        return Err(Error::format(path, "trailing bytes after last tensor"));
    }
    Ok((store, meta))
}

pub fn save_checkpoint(path: &Path, store: &ParamStore, meta: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, encode_checkpoint(store, meta))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, String)> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    decode_checkpoint(&fs::read(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_header_is_bit_exact() {
        let mut s = ParamStore::new();
        s.add("ab", DArray::new(vec![2], vec![1.0, -2.0]).unwrap());
        let b = encode_checkpoint(&s, "k=v");
        let mut want = b"PMCK".to_vec();
        want.extend(1u32.to_le_bytes());
        want.extend(3u32.to_le_bytes());
        want.extend(b"k=v");
        want.extend(1u32.to_le_bytes());
        want.extend(2u16.to_le_bytes());
        want.extend(b"ab");
        want.push(1);
        want.extend(2u32.to_le_bytes());
        want.extend(1.0f32.to_le_bytes());
        want.extend((-2.0f32).to_le_bytes());
        assert_eq!(b, want);
    }

    #[test]
    fn truncated_and_bad_magic_rejected() {
        let mut s = ParamStore::new();
        s.add("w", DArray::zeros(&[3, 2]));
        let b = encode_checkpoint(&s, "");
        let p = Path::new("mem");
        assert!(decode_checkpoint(&b[..b.len() - 1], p).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad, p).is_err());
        let (back, meta) = decode_checkpoint(&b, p).unwrap();
        assert_eq!(meta, "");
        assert_eq!(back.value(back.find("w").unwrap()).shape(), &[3, 2]);
    }
}
