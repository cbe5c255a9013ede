//! Binary checkpoint container.
//!
//! Layout, all integers little-endian `u64`:
//!
//! ```text
//! "CAMCKPT1" | len | config (UTF-8) | { len | name | rank | dims… | f64 values… }*
//! ```
//!
//! Entries run until end of file. Values are raw IEEE-754 bits, so a
//! save/load round trip is bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CAMCKPT1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

fn put_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_checkpoint<'a, W, I>(w: &mut W, config: &str, tensors: I) -> Result<()>
where
    W: Write,
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    w.write_all(MAGIC)?;
    put_u64(w, config.len() as u64)?;
    w.write_all(config.as_bytes())?;
    for (name, t) in tensors {
        put_u64(w, name.len() as u64)?;
        w.write_all(name.as_bytes())?;
        put_u64(w, t.rank() as u64)?;
        for &d in t.shape() {
            put_u64(w, d as u64)?;
        }
        for v in t.values() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn bad(message: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        message: message.into(),
    }
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => bad("truncated file"),
        _ => Error::Io(e),
    })?;
    Ok(u64::from_le_bytes(b))
}

fn get_string(r: &mut impl Read, what: &str) -> Result<String> {
    let len = get_u64(r)? as usize;
    if len > 1 << 24 {
        return Err(bad(format!("{what} length {len} is implausible")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(|_| bad(format!("truncated {what}")))?;
    String::from_utf8(buf).map_err(|_| bad(format!("{what} is not UTF-8")))
}

/// Reads one more byte to tell a clean end of file from a new entry.
fn at_eof(r: &mut impl Read, first: &mut [u8; 1]) -> Result<bool> {
    loop {
        match r.read(first) {
            Ok(0) => return Ok(true),
            Ok(_) => return Ok(false),
            Err(e) if e.kind() == ErrorKind::Interrupted => continue,
            Err(e) => return Err(e.into()),
        }
    }
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Checkpoint> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| bad("missing magic"))?;
    if &magic != MAGIC {
        return Err(bad("wrong magic bytes"));
    }
    let config = get_string(r, "config")?;
    let mut tensors = Vec::new();
    let mut first = [0u8; 1];
    while !at_eof(r, &mut first)? {
        let mut rest = [0u8; 7];
        r.read_exact(&mut rest).map_err(|_| bad("truncated entry"))?;
        let mut len_bytes = [0u8; 8];
        len_bytes[0] = first[0];
        len_bytes[1..].copy_from_slice(&rest);
        let len_bytes = len_bytes;
        let name = get_string(&mut (&len_bytes[..]).chain(&mut *r), "parameter name")?;
        let rank = get_u64(r)? as usize;
        if !(1..=3).contains(&rank) {
            return Err(bad(format!("`{name}` has rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(get_u64(r)? as usize);
        }
        let numel: usize = dims.iter().product();
        let mut raw = vec![0u8; numel * 8];
        r.read_exact(&mut raw).map_err(|_| bad(format!("truncated values for `{name}`")))?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push((name, Tensor::new(&dims, values)?));
    }
    Ok(Checkpoint { config, tensors })
}

pub fn save_checkpoint<'a, I>(path: &Path, config: &str, tensors: I) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, config, tensors)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    read_checkpoint(&mut r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_exact() {
        let t = Tensor::vector(vec![1.5]).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, "k=v", [("w", &t)]).unwrap();
        let mut expected = Vec::new();
        expected.extend_from_slice(b"CAMCKPT1");
        expected.extend_from_slice(&3u64.to_le_bytes());
        expected.extend_from_slice(b"k=v");
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.extend_from_slice(b"w");
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.extend_from_slice(&1.5f64.to_le_bytes());
        assert_eq!(buf, expected);
    }

    #[test]
    fn rejects_corruption() {
        let t = Tensor::zeros(&[2, 2]);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, "", [("w", &t)]).unwrap();
        assert!(read_checkpoint(&mut &buf[..buf.len() - 1]).is_err());
        let mut wrong = buf.clone();
        wrong[0] = b'X';
        assert!(read_checkpoint(&mut &wrong[..]).is_err());
        assert_eq!(read_checkpoint(&mut &buf[..]).unwrap().tensors.len(), 1);
    }
}
