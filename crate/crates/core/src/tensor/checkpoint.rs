//! Parameter checkpoint files.
//!
//! Layout: the magic `SBF1`, then one record per tensor until end of file:
//! name length (u64), UTF-8 name, rank (u64), `rank` extents (u64), and the
//! values as `f32`. All integers and floats are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::params::ParamStore;
use super::{Result, Tensor, TensorError};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SBF1";

pub fn write_checkpoint<'a, W: Write>(
    mut w: W,
    records: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    for (name, t) in records {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u64).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| {
            TensorError::Checkpoint(format!("truncated {what} at byte offset {}: {e}", self.offset))
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let mut b = [0u8; 8];
        self.exact(&mut b, what)?;
        Ok(u64::from_le_bytes(b))
    }

    /// True at a clean end of file.
    fn at_eof(&mut self) -> Result<Option<u8>> {
        let mut b = [0u8; 1];
        loop {
            match self.inner.read(&mut b) {
                Ok(0) => return Ok(None),
                Ok(_) => {
                    self.offset += 1;
                    return Ok(Some(b[0]));
                }
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
                Err(e) => return Err(e.into()),
            }
        }
    }
}

// Upper bounds that keep a corrupt header from triggering huge allocations.
const MAX_NAME: u64 = 4096;
const MAX_RANK: u64 = 8;
const MAX_VALUES: u64 = 1 << 32;

pub fn read_checkpoint<R: Read>(r: R) -> Result<Vec<(String, Tensor)>> {
    let mut cur = Cursor { inner: r, offset: 0 };
    let mut magic = [0u8; 4];
    cur.exact(&mut magic, "magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(TensorError::Checkpoint(format!(
            "bad magic {magic:?} at byte offset 0, expected {CHECKPOINT_MAGIC:?}"
        )));
    }
    let mut out = Vec::new();
    while let Some(first) = cur.at_eof()? {
        let start = cur.offset - 1;
        let mut rest = [0u8; 7];
        cur.exact(&mut rest, "name length")?;
        let mut len_bytes = [0u8; 8];
        len_bytes[0] = first;
        len_bytes[1..].copy_from_slice(&rest);
        let name_len = u64::from_le_bytes(len_bytes);
        if name_len > MAX_NAME {
            return Err(TensorError::Checkpoint(format!(
                "implausible name length {name_len} at byte offset {start}"
            )));
        }
        let mut name = vec![0u8; name_len as usize];
        cur.exact(&mut name, "name")?;
        let name = String::from_utf8(name).map_err(|_| {
            TensorError::Checkpoint(format!("name at byte offset {start} is not UTF-8"))
        })?;
        let rank = cur.u64("rank")?;
        if rank == 0 || rank > MAX_RANK {
            return Err(TensorError::Checkpoint(format!(
                "implausible rank {rank} for `{name}` at byte offset {}",
                cur.offset - 8
            )));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut count: u64 = 1;
        for _ in 0..rank {
            let d = cur.u64("extent")?;
            count = count.saturating_mul(d);
            shape.push(d as usize);
        }
        if count == 0 || count > MAX_VALUES {
            return Err(TensorError::Checkpoint(format!(
                "implausible shape {shape:?} for `{name}` at byte offset {}",
                cur.offset
            )));
        }
        let mut raw = vec![0u8; count as usize * 4];
        cur.exact(&mut raw, "values")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

pub fn save_checkpoint(store: &ParamStore, path: impl AsRef<Path>) -> Result<()> {
    let f = BufWriter::new(File::create(path)?);
    write_checkpoint(f, store.iter().map(|(_, n, t)| (n, t)))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
