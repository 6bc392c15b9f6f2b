//! Binary model checkpoints.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic "PCKP" | u32 version
//! u8 kind | u32 embed_dim, num_layers, num_heads, ff_dim, obs_len, pred_len | f64 speed_scale
//! u32 entry count
//! per entry: u32 name length, name bytes, u32 rank, u32 dims…, f64 values…
//! ```

use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::autodiff::{ParameterSet, Tensor};

use super::{Model, ModelConfig, ModelError, ModelKind};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"PCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

const MAX_NAME_LEN: usize = 4096;
const MAX_RANK: usize = 8;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("parameter layout mismatch: {0}")]
    Layout(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn read_u8(r: &mut impl Read) -> Result<u8, CheckpointError> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn read_u32(r: &mut impl Read) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64, CheckpointError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn to_u32(v: usize, what: &str) -> Result<u32, CheckpointError> {
    u32::try_from(v).map_err(|_| CheckpointError::Corrupt(format!("{what} {v} does not fit in u32")))
}

/// Writes a counted list of named tensors.
pub fn write_tensor_entries<'a, W: Write>(
    w: &mut W,
    entries: impl ExactSizeIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<(), CheckpointError> {
    w.write_all(&to_u32(entries.len(), "entry count")?.to_le_bytes())?;
    for (name, t) in entries {
        w.write_all(&to_u32(name.len(), "name length")?.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&to_u32(t.shape().len(), "rank")?.to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&to_u32(d, "dimension")?.to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads a list written by [`write_tensor_entries`].
pub fn read_tensor_entries<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    let count = read_u32(r)? as usize;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        if len == 0 || len > MAX_NAME_LEN {
            return Err(CheckpointError::Corrupt(format!("name length {len}")));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| CheckpointError::Corrupt("non-utf8 name".into()))?;
        let rank = read_u32(r)? as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(CheckpointError::Corrupt(format!("`{name}` has rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| read_u32(r).map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n > 0 && n <= (1 << 31))
            .ok_or_else(|| CheckpointError::Corrupt(format!("`{name}` has shape {shape:?}")))?;
        let mut bytes = vec![0u8; numel * 8];
        r.read_exact(&mut bytes)?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CheckpointError::Corrupt(format!("`{name}` holds non-finite values")));
        }
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        out.push((name, t));
    }
    Ok(out)
}

fn write_config<W: Write>(w: &mut W, cfg: &ModelConfig) -> Result<(), CheckpointError> {
    w.write_all(&[cfg.kind.code()])?;
    for (v, what) in [
        (cfg.embed_dim, "embed_dim"),
        (cfg.num_layers, "num_layers"),
        (cfg.num_heads, "num_heads"),
        (cfg.ff_dim, "ff_dim"),
        (cfg.obs_len, "obs_len"),
        (cfg.pred_len, "pred_len"),
    ] {
        w.write_all(&to_u32(v, what)?.to_le_bytes())?;
    }
    w.write_all(&cfg.speed_scale.to_le_bytes())?;
    Ok(())
}

fn read_config<R: Read>(r: &mut R) -> Result<ModelConfig, CheckpointError> {
    let code = read_u8(r)?;
    let kind =
        ModelKind::from_code(code).ok_or_else(|| CheckpointError::Corrupt(format!("unknown model kind {code}")))?;
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = read_u32(r)? as usize;
    }
    let cfg = ModelConfig {
        kind,
        embed_dim: dims[0],
        num_layers: dims[1],
        num_heads: dims[2],
        ff_dim: dims[3],
        obs_len: dims[4],
        pred_len: dims[5],
        speed_scale: read_f64(r)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn write_checkpoint<W: Write>(w: &mut W, model: &Model) -> Result<(), CheckpointError> {
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    write_config(w, &model.config)?;
    let entries: Vec<(&str, &Tensor)> = model.params.iter().collect();
    write_tensor_entries(w, entries.into_iter())?;
    w.flush()?;
    Ok(())
}

/// Reads one checkpoint from the stream, leaving any following bytes unread.
pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Model, CheckpointError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = read_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let config = read_config(r)?;
    let mut params = ParameterSet::new();
    for (name, t) in read_tensor_entries(r)? {
        params
            .insert(name, t)
            .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    }
    let expected = super::init_params(&config, 0)?;
    check_layout(&expected, &params)?;
    Ok(Model { config, params })
}

/// Writes through a temporary sibling file and renames it into place.
pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        write_checkpoint(&mut w, model)?;
        w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Loads a checkpoint file; trailing bytes are an error.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let model = read_checkpoint(&mut r)?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(CheckpointError::Corrupt("trailing bytes".into()));
    }
    Ok(model)
}

/// Requires identical names, order and shapes.
pub(crate) fn check_layout(expected: &ParameterSet, actual: &ParameterSet) -> Result<(), CheckpointError> {
    if expected.len() != actual.len() {
        return Err(CheckpointError::Layout(format!(
            "expected {} parameter arrays, found {}",
            expected.len(),
            actual.len()
        )));
    }
    for ((en, et), (an, at)) in expected.iter().zip(actual.iter()) {
        if en != an {
            return Err(CheckpointError::Layout(format!("expected `{en}`, found `{an}`")));
        }
        if et.shape() != at.shape() {
            return Err(CheckpointError::Layout(format!(
                "`{en}` has shape {:?}, expected {:?}",
                at.shape(),
                et.shape()
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Model {
        let mut cfg = ModelConfig::lstm_ed(3, 2);
        cfg.embed_dim = 4;
        Model::new(cfg, 9).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = tiny();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &m).unwrap();
        let back = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back.config, m.config);
        for ((n1, t1), (n2, t2)) in m.params.iter().zip(back.params.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            assert!(t1.data().iter().zip(t2.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn rejects_bad_magic_truncation_and_trailing_bytes() {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &tiny()).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            read_checkpoint(&mut bad.as_slice()),
            Err(CheckpointError::BadMagic(_))
        ));
        let cut = &buf[..buf.len() - 3];
        assert!(matches!(read_checkpoint(&mut &cut[..]), Err(CheckpointError::Io(_))));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut long = buf.clone();
        long.push(0);
        std::fs::write(&path, &long).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::Corrupt(_))));
        std::fs::write(&path, &buf).unwrap();
        assert!(load_checkpoint(&path).is_ok());
    }

    #[test]
    fn layout_mismatch_is_reported() {
        let m = tiny();
        let mut cfg = m.config;
        cfg.embed_dim = 6;
        let other = super::super::init_params(&cfg, 0).unwrap();
        assert!(matches!(
            check_layout(&other, &m.params),
            Err(CheckpointError::Layout(_))
        ));
    }
}
