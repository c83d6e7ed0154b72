//! Binary checkpoints.
//!
//! Layout (all little-endian):
//!
//! ```text
//! b"RAM3DCKPT"  u32 version
//! field config: u32 levels, u32 features_per_level, u32 table_size_log2,
//!               u32 base_resolution, f64 level_scale, u32 mlp_hidden,
//!               u32 mlp_layers, 3 x f64 bounds_min, 3 x f64 bounds_max
//! u64 n, n x f64 parameters (hash tables, then each layer's weights and bias)
//! u8 has_train_state
//!   u64 step, u64 config_hash, u64 adam_t, n x f64 first moment, n x f64 second moment
//! ```

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use crate::error::{Error, Result};
use crate::field::{FieldConfig, FieldLayout, FieldParams};

pub const MAGIC: &[u8; 9] = b"RAM3DCKPT";
pub const VERSION: u32 = 1;

/// Optimizer state stored alongside the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Number of completed optimization steps.
    pub step: u64,
    pub config_hash: u64,
    pub adam_t: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub field: FieldConfig,
    pub params: FieldParams,
    pub train: Option<TrainState>,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(buf: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Config(format!("{what} does not fit in a u32")))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let f = &self.field;
        let mut buf = Vec::with_capacity(64 + self.params.len() * 8 * 3);
        buf.extend_from_slice(MAGIC);
        put_u32(&mut buf, VERSION);
        put_u32(&mut buf, to_u32(f.levels, "levels")?);
        put_u32(&mut buf, to_u32(f.features_per_level, "features_per_level")?);
        put_u32(&mut buf, f.table_size_log2);
        put_u32(&mut buf, to_u32(f.base_resolution, "base_resolution")?);
        put_f64s(&mut buf, &[f.level_scale]);
        put_u32(&mut buf, to_u32(f.mlp_hidden, "mlp_hidden")?);
        put_u32(&mut buf, to_u32(f.mlp_layers, "mlp_layers")?);
        put_f64s(&mut buf, &f.bounds_min);
        put_f64s(&mut buf, &f.bounds_max);
        put_u64(&mut buf, self.params.len() as u64);
        put_f64s(&mut buf, &self.params.values);
        match &self.train {
            None => buf.push(0),
            Some(t) => {
                buf.push(1);
                put_u64(&mut buf, t.step);
                put_u64(&mut buf, t.config_hash);
                put_u64(&mut buf, t.adam_t);
                put_f64s(&mut buf, &t.first_moment);
                put_f64s(&mut buf, &t.second_moment);
            }
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 9];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Version("bad checkpoint magic".into()));
        }
        let version = get_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Version(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        let field = FieldConfig {
            levels: get_u32(&mut r)? as usize,
            features_per_level: get_u32(&mut r)? as usize,
            table_size_log2: get_u32(&mut r)?,
            base_resolution: get_u32(&mut r)? as usize,
            level_scale: get_f64(&mut r)?,
            mlp_hidden: get_u32(&mut r)? as usize,
            mlp_layers: get_u32(&mut r)? as usize,
            bounds_min: [get_f64(&mut r)?, get_f64(&mut r)?, get_f64(&mut r)?],
            bounds_max: [get_f64(&mut r)?, get_f64(&mut r)?, get_f64(&mut r)?],
        };
        field
            .validate()
            .map_err(|e| Error::Version(format!("stored field config is invalid: {e}")))?;
        let expected = FieldLayout::new(&field).len();
        let n = get_u64(&mut r)? as usize;
        if n != expected {
            return Err(Error::Version(format!(
                "checkpoint holds {n} parameters, its field config needs {expected}"
            )));
        }
        let params = FieldParams {
            values: get_f64s(&mut r, n)?,
        };
        let mut flag = [0u8; 1];
        read_exact(&mut r, &mut flag)?;
        let train = match flag[0] {
            0 => None,
            1 => Some(TrainState {
                step: get_u64(&mut r)?,
                config_hash: get_u64(&mut r)?,
                adam_t: get_u64(&mut r)?,
                first_moment: get_f64s(&mut r, n)?,
                second_moment: get_f64s(&mut r, n)?,
            }),
            other => return Err(Error::Version(format!("bad train-state flag {other}"))),
        };
        if (r.position() as usize) != bytes.len() {
            return Err(Error::Version("trailing bytes after checkpoint".into()));
        }
        Ok(Self { field, params, train })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        // Write-then-rename so a crash never leaves a truncated checkpoint.
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn read_exact(r: &mut Cursor<&[u8]>, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Version("checkpoint is truncated".into()))
}

fn get_u32(r: &mut Cursor<&[u8]>) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64(r: &mut Cursor<&[u8]>) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_f64(r: &mut Cursor<&[u8]>) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn get_f64s(r: &mut Cursor<&[u8]>, n: usize) -> Result<Vec<f64>> {
    let remaining = r.get_ref().len() - r.position() as usize;
    if remaining < n * 8 {
        return Err(Error::Version("checkpoint is truncated".into()));
    }
    (0..n).map(|_| get_f64(r)).collect()
}
