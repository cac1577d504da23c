//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "HDSACKPT"
//! version  u32
//! manifest u32 length + UTF-8 JSON (hyperparameters)
//! count    u32
//! count x record:
//!   name   u32 length + UTF-8
//!   ndim   u32, then ndim x u64 extents
//!   values f64 x product(extents)
//!   adam   u8 flag; if 1: step u64, m f64 x n, v f64 x n
//! ```

use std::io::{self, Read, Write};
use std::path::Path;

use super::{AdamState, NumericsError, ParamStore, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"HDSACKPT";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Parameters plus the hyperparameter manifest that produced them.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: serde_json::Value,
    pub params: ParamStore,
}

pub fn save_checkpoint(path: &Path, manifest: &serde_json::Value, params: &ParamStore) -> Result<(), CheckpointError> {
    let mut out = Vec::new();
    write_checkpoint(&mut out, manifest, params)?;
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = std::fs::read(path)?;
    read_checkpoint(&mut bytes.as_slice())
}

pub fn write_checkpoint<W: Write>(w: &mut W, manifest: &serde_json::Value, params: &ParamStore) -> Result<(), CheckpointError> {
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let m = serde_json::to_vec(manifest)?;
    write_len(w, m.len())?;
    w.write_all(&m)?;
    write_len(w, params.len())?;
    for (_, p) in params.iter() {
        write_len(w, p.name.len())?;
        w.write_all(p.name.as_bytes())?;
        write_len(w, p.tensor.shape().len())?;
        for &d in p.tensor.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        write_f64s(w, p.tensor.data())?;
        if p.adam.step > 0 {
            w.write_all(&[1])?;
            w.write_all(&p.adam.step.to_le_bytes())?;
            write_f64s(w, &p.adam.m)?;
            write_f64s(w, &p.adam.v)?;
        } else {
            w.write_all(&[0])?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Checkpoint, CheckpointError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let manifest_len = read_u32(r)? as usize;
    let manifest: serde_json::Value = serde_json::from_slice(&read_bytes(r, manifest_len)?)?;
    let count = read_u32(r)?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name_len = read_u32(r)? as usize;
        let name = String::from_utf8(read_bytes(r, name_len)?)
            .map_err(|_| CheckpointError::Malformed("parameter name is not UTF-8".into()))?;
        let ndim = read_u32(r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let n: usize = shape.iter().product();
        let data = read_f64s(r, n)?;
        let id = params.insert(&name, Tensor::new(shape, data)?)?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        match flag[0] {
            0 => {}
            1 => {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                let step = u64::from_le_bytes(b);
                let m = read_f64s(r, n)?;
                let v = read_f64s(r, n)?;
                params.get_mut(id).adam = AdamState { m, v, step };
            }
            other => return Err(CheckpointError::Malformed(format!("bad optimizer flag {other}"))),
        }
    }
    Ok(Checkpoint { manifest, params })
}

fn write_len<W: Write>(w: &mut W, n: usize) -> io::Result<()> {
    w.write_all(&(n as u32).to_le_bytes())
}

fn write_f64s<W: Write>(w: &mut W, xs: &[f64]) -> io::Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_bytes<R: Read>(r: &mut R, n: usize) -> io::Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> io::Result<Vec<f64>> {
    let bytes = read_bytes(r, n * 8)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::numerics::Init;

    #[test]
    fn round_trip_preserves_values_and_optimizer_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let w = store.create("w", &[3, 2], Init::Uniform, &mut rng).unwrap();
        store.create("b", &[2], Init::Zeros, &mut rng).unwrap();
        store.get_mut(w).adam.step = 4;
        store.get_mut(w).adam.m[1] = 0.25;
        let manifest = serde_json::json!({"beam": 2, "threshold": 0.4});

        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &manifest, &store).unwrap();
        let ck = read_checkpoint(&mut buf.as_slice()).unwrap();

        assert_eq!(ck.manifest, manifest);
        assert_eq!(ck.params.len(), 2);
        let w2 = ck.params.by_name("w").unwrap();
        assert_eq!(w2.tensor, store.get(w).tensor);
        assert_eq!(w2.adam, store.get(w).adam);
        assert_eq!(ck.params.by_name("b").unwrap().tensor.shape(), &[2]);
    }

    #[test]
    fn rejects_foreign_bytes() {
        let junk = b"NOTACKPT\x01\x00\x00\x00";
        assert!(matches!(read_checkpoint(&mut &junk[..]), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn rejects_future_version() {
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&99u32.to_le_bytes());
        assert!(matches!(read_checkpoint(&mut bytes.as_slice()), Err(CheckpointError::Version(99))));
    }
}
