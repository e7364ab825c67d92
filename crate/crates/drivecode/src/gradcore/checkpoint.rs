//! Checkpoint file layout:
//!
//! ```text
//! magic "DCKP"  version u32
//! header_json_len u32, header_json bytes   (model/normalizer config echo)
//! n_entries u32
//! per entry: name_len u32, name bytes, rows u64, cols u64
//! payload: all f64 values little-endian, concatenated in entry order
//! trailer: u64 FNV-1a checksum of the payload bytes
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::params::ParamStore;
use super::tape::Shape;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"DCKP";
const VERSION: u32 = 1;

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub fn save_checkpoint(path: &Path, store: &ParamStore, header_json: &str) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let hj = header_json.as_bytes();
    w.write_all(&(hj.len() as u32).to_le_bytes())?;
    w.write_all(hj)?;
    w.write_all(&(store.num_tensors() as u32).to_le_bytes())?;
    for (name, p) in store.iter() {
        let nb = name.as_bytes();
        w.write_all(&(nb.len() as u32).to_le_bytes())?;
        w.write_all(nb)?;
        w.write_all(&(p.shape.rows as u64).to_le_bytes())?;
        w.write_all(&(p.shape.cols as u64).to_le_bytes())?;
    }
    let mut payload = Vec::with_capacity(store.num_scalars() * 8);
    for (_, p) in store.iter() {
        for &v in &p.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&payload)?;
    w.write_all(&fnv1a64(&payload).to_le_bytes())?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, String)> {
    let mut r = BufReader::new(File::open(path)?);

    fn read_exact(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        r.read_exact(&mut buf)?;
        Ok(buf)
    }
    fn read_u32(r: &mut impl Read) -> Result<u32> {
        Ok(u32::from_le_bytes(read_exact(r, 4)?.try_into().unwrap()))
    }
    fn read_u64(r: &mut impl Read) -> Result<u64> {
        Ok(u64::from_le_bytes(read_exact(r, 8)?.try_into().unwrap()))
    }

    let magic = read_exact(&mut r, 4)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let hj_len = read_u32(&mut r)? as usize;
    let header_json = String::from_utf8(read_exact(&mut r, hj_len)?)
        .map_err(|e| Error::Checkpoint(format!("header not utf-8: {e}")))?;
    let n_entries = read_u32(&mut r)? as usize;
    let mut entries = Vec::with_capacity(n_entries);
    for _ in 0..n_entries {
        let name_len = read_u32(&mut r)? as usize;
        let name = String::from_utf8(read_exact(&mut r, name_len)?)
            .map_err(|e| Error::Checkpoint(format!("name not utf-8: {e}")))?;
        let rows = read_u64(&mut r)? as usize;
        let cols = read_u64(&mut r)? as usize;
        entries.push((name, Shape::new(rows, cols)));
    }
    let total: usize = entries.iter().map(|(_, s)| s.len()).sum();
    let payload = read_exact(&mut r, total * 8)?;
    let stored_sum = read_u64(&mut r)?;
    if fnv1a64(&payload) != stored_sum {
        return Err(Error::Checkpoint("payload checksum mismatch".into()));
    }
    let mut store = ParamStore::new();
    let mut off = 0usize;
    for (name, shape) in entries {
        let data: Vec<f64> = (0..shape.len())
            .map(|i| {
                let b = &payload[(off + i) * 8..(off + i + 1) * 8];
                f64::from_le_bytes(b.try_into().unwrap())
            })
            .collect();
        off += shape.len();
        store.add(&name, shape, data)?;
    }
    Ok((store, header_json))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_values_and_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut store = ParamStore::new();
        store.add("w2", Shape::new(2, 3), vec![1.5, -2.0, 0.0, 3.25, 4.0, -0.125]).unwrap();
        store.add("b", Shape::new(1, 1), vec![0.75]).unwrap();
        save_checkpoint(&path, &store, "{\"d\":8}").unwrap();
        let (loaded, header) = load_checkpoint(&path).unwrap();
        assert_eq!(header, "{\"d\":8}");
        let names: Vec<&str> = loaded.iter().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["w2", "b"]);
        assert_eq!(loaded.get("w2").unwrap().data, store.get("w2").unwrap().data);
    }

    #[test]
    fn corrupted_payload_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut store = ParamStore::new();
        store.add("w", Shape::new(1, 2), vec![1.0, 2.0]).unwrap();
        save_checkpoint(&path, &store, "{}").unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let flip = bytes.len() - 12; // inside payload
        bytes[flip] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }
}
