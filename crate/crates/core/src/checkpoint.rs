//! Checkpoint files.
//!
//! Layout: an 8-byte little-endian header length `n`, then `n` bytes of JSON
//! mapping each tensor name to `{"shape": [...], "offset": o}` where `o` counts
//! f32 elements from the start of the data section, then the raw
//! little-endian f32 data in offset order.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct Entry {
    shape: Vec<usize>,
    offset: usize,
}

pub fn to_bytes(params: &ParamStore) -> Result<Vec<u8>> {
    let mut header = BTreeMap::new();
    let mut offset = 0;
    for (_, name, t) in params.iter() {
        header.insert(
            name.to_string(),
            Entry {
                shape: t.shape().to_vec(),
                offset,
            },
        );
        offset += t.numel();
    }
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + json.len() + offset * 4);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, t) in params.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<ParamStore> {
    let bad = |m: &str| CoreError::Checkpoint(m.to_string());
    if bytes.len() < 8 {
        return Err(bad("truncated header length"));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let body = bytes.get(8..8 + n).ok_or_else(|| bad("truncated header"))?;
    let header: BTreeMap<String, Entry> = serde_json::from_slice(body)?;
    let data = &bytes[8 + n..];
    if !data.len().is_multiple_of(4) {
        return Err(bad("data section is not a whole number of f32"));
    }
    let values: Vec<f32> = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut entries: Vec<(String, Entry)> = header.into_iter().collect();
    entries.sort_by_key(|(_, e)| e.offset);
    let mut store = ParamStore::new();
    let mut expected = 0;
    for (name, e) in entries {
        let len: usize = e.shape.iter().product();
        if e.offset != expected {
            return Err(bad("tensors are not contiguous"));
        }
        let slice = values
            .get(e.offset..e.offset + len)
            .ok_or_else(|| bad("tensor extends past data"))?;
        store.add(name, Tensor::new(e.shape, slice.to_vec())?);
        expected += len;
    }
    if expected != values.len() {
        return Err(bad("trailing data"));
    }
    Ok(store)
}

pub fn save(params: &ParamStore, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&to_bytes(params)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamStore> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    from_bytes(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prng::Prng;

    #[test]
    fn byte_exact_round_trip() {
        let mut rng = Prng::new(5);
        let mut p = ParamStore::new();
        p.add("b.weight", Tensor::randn(&[3, 4], 1.0, &mut rng));
        p.add("a.gain", Tensor::randn(&[4], 1.0, &mut rng));
        let bytes = to_bytes(&p).unwrap();
        let q = from_bytes(&bytes).unwrap();
        assert_eq!(to_bytes(&q).unwrap(), bytes);
        assert_eq!(
            q.get(q.id("b.weight").unwrap()).data(),
            p.get(p.id("b.weight").unwrap()).data()
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        save(&p, &path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), bytes);
        assert_eq!(load(&path).unwrap(), q);
    }

    #[test]
    fn truncated_is_rejected() {
        let mut p = ParamStore::new();
        p.add("w", Tensor::zeros(&[2]));
        let bytes = to_bytes(&p).unwrap();
        assert!(from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(from_bytes(&bytes[..4]).is_err());
    }
}
