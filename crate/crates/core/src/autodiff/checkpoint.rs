//! Flat binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"CDEF"
//! version u32
//! repeated until EOF:
//!   name_len u32, name (utf-8), rank u32, dims u64 * rank, payload f64 * numel
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CDEF";
pub const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(store: &ParamStore, mut w: W) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for (name, t) in store.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(mut r: R, label: &str) -> Result<ParamStore> {
    let bad = |msg: &str| Error::format(label, 0, msg);
    let io = |e: std::io::Error| Error::io(label, e);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = read_u32(&mut r).map_err(io)?;
    if version != VERSION {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let mut store = ParamStore::new();
    loop {
        let name_len = match read_u32(&mut r) {
            Ok(n) => n as usize,
            Err(e) if e.kind() == ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(io(e)),
        };
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(io)?;
        let name = String::from_utf8(name).map_err(|_| bad("parameter name is not utf-8"))?;
        let rank = read_u32(&mut r).map_err(io)? as usize;
        let dims = (0..rank)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(io)?;
        let numel: usize = dims.iter().product();
        let mut payload = vec![0u8; numel * 8];
        r.read_exact(&mut payload).map_err(io)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.add(name, Tensor::new(&dims, data)?)?;
    }
    Ok(store)
}

pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(store, BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(file), &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new(&[1, 2], vec![1.0, -2.5]).unwrap()).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&store, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"CDEF");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 1);
        assert_eq!(buf[12], b'w');
        // name_len + name + rank + 2 dims + 2 values
        assert_eq!(buf.len(), 8 + 4 + 1 + 4 + 16 + 16);
    }

    #[test]
    fn rejects_bad_magic() {
        let err = read_checkpoint(&b"NOPE\x01\x00\x00\x00"[..], "mem").unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }

    proptest! {
        #[test]
        fn round_trip_is_exact(
            shapes in prop::collection::vec(prop::collection::vec(1usize..4, 1..3), 0..5),
            seed in any::<u64>(),
        ) {
            let mut init = crate::autodiff::Init::new(seed);
            let mut store = ParamStore::new();
            for (i, s) in shapes.iter().enumerate() {
                store.add(format!("p{i}.w"), init.weight(s, 3)).unwrap();
            }
            let mut buf = Vec::new();
            write_checkpoint(&store, &mut buf).unwrap();
            let back = read_checkpoint(&buf[..], "mem").unwrap();
            prop_assert_eq!(back, store);
        }
    }
}
