//! Versioned binary checkpoint; byte layout in `docs/formats.md`.

use std::io::{Read, Write};
use std::path::Path;

use super::{EncoderConfig, VisualEncoder};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TIRCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_bytes(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    Ok(b)
}

pub fn write_checkpoint(enc: &VisualEncoder, w: &mut impl Write) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    put_u32(w, CHECKPOINT_VERSION)?;
    let cfg = serde_json::to_vec(&enc.cfg).map_err(|e| Error::Format(e.to_string()))?;
    put_u32(w, cfg.len() as u32)?;
    w.write_all(&cfg)?;
    let params = enc.named_params();
    put_u32(w, params.len() as u32)?;
    for (name, t) in params {
        put_u32(w, name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        put_u32(w, t.shape().len() as u32)?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<VisualEncoder> {
    let magic = get_bytes(r, 8)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = get_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let n = get_u32(r)? as usize;
    let cfg: EncoderConfig = serde_json::from_slice(&get_bytes(r, n)?).map_err(|e| Error::Format(e.to_string()))?;
    let mut enc = VisualEncoder::new(cfg, 0)?;
    let expected: Vec<(String, Vec<usize>)> =
        enc.named_params().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
    let count = get_u32(r)? as usize;
    if count != expected.len() {
        return Err(Error::Format(format!("expected {} arrays, found {count}", expected.len())));
    }
    for ((want_name, want_shape), slot) in expected.iter().zip(enc.params_mut()) {
        let len = get_u32(r)? as usize;
        let name = String::from_utf8(get_bytes(r, len)?).map_err(|e| Error::Format(e.to_string()))?;
        if &name != want_name {
            return Err(Error::Format(format!("expected array {want_name}, found {name}")));
        }
        let rank = get_u32(r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(get_u64(r)? as usize);
        }
        if &shape != want_shape {
            return Err(Error::Format(format!("{name}: shape {shape:?}, expected {want_shape:?}")));
        }
        let bytes = get_bytes(r, slot.len() * 8)?;
        for (v, chunk) in slot.data_mut().iter_mut().zip(bytes.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
    }
    Ok(enc)
}

pub fn save_checkpoint(enc: &VisualEncoder, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(enc, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<VisualEncoder> {
    read_checkpoint(&mut std::io::BufReader::new(std::fs::File::open(path)?))
}
