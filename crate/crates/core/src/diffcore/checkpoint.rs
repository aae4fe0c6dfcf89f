//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "RAMWCKPT"
//! version  u32
//! count    u32
//! manifest count x { name_len u32, name utf8, ndim u32, dims u64 x ndim }
//! payload  f64 x sum(numel), in manifest order
//! ```

use std::path::Path;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::io::{ByteReader, ByteWriter};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RAMWCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(store: &ParamStore) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.u32(store.len() as u32);
    for (name, t) in store.iter() {
        w.str(name);
        w.u32(t.ndim() as u32);
        for &d in t.shape() {
            w.u64(d as u64);
        }
    }
    for (_, t) in store.iter() {
        for &v in t.data() {
            w.f64(v);
        }
    }
    w.into_inner()
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParamStore> {
    let mut r = ByteReader::new(bytes);
    if r.take(8, "checkpoint magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Magic("checkpoint"));
    }
    let version = r.u32("checkpoint version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let count = r.u32("checkpoint count")? as usize;
    let mut manifest = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name = r.string("parameter name")?;
        let ndim = r.u32("parameter rank")? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64("parameter dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        manifest.push((name, shape));
    }
    let mut store = ParamStore::new();
    for (name, shape) in manifest {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| r.f64("parameter payload"))
            .collect::<Result<Vec<_>>>()?;
        store.insert(&name, Tensor::new(&shape, data)?);
    }
    if !r.is_empty() {
        return Err(Error::Corrupt(format!(
            "{} trailing bytes after checkpoint payload",
            r.remaining()
        )));
    }
    Ok(store)
}

/// Copies values from `loaded` into `target`, requiring identical names and shapes.
pub fn restore_into(target: &mut ParamStore, loaded: &ParamStore) -> Result<()> {
    let missing: Vec<String> = target
        .iter()
        .filter(|(n, _)| loaded.id(n).is_none())
        .map(|(n, _)| n.to_string())
        .collect();
    let extra: Vec<String> = loaded
        .iter()
        .filter(|(n, _)| target.id(n).is_none())
        .map(|(n, _)| n.to_string())
        .collect();
    let reshaped: Vec<String> = target
        .iter()
        .filter_map(|(n, t)| {
            let other = loaded.by_name(n)?;
            (other.shape() != t.shape()).then(|| n.to_string())
        })
        .collect();
    if !missing.is_empty() || !extra.is_empty() || !reshaped.is_empty() {
        return Err(Error::Manifest {
            missing,
            extra,
            reshaped,
        });
    }
    let ids: Vec<_> = target.ids().collect();
    for id in ids {
        let value = loaded
            .by_name(target.name(id))
            .expect("checked above")
            .clone();
        *target.get_mut(id) = value;
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, store: &ParamStore) -> Result<()> {
    crate::io::write_atomic(path, &encode_checkpoint(store))
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    decode_checkpoint(&std::fs::read(path)?)
}
