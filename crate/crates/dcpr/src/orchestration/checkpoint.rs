//! Binary checkpoints for the three model kinds.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DCPR"                      4-byte magic
//! version                     u16, currently 1
//! kind                        u8: 0 global, 1 region, 2 patch
//! config_len                  u32, then that many bytes of "key=value\n"
//! tensor_count                u32
//! per tensor:
//!   name_len                  u16, then the UTF-8 name
//!   rank                      u8, always 2
//!   rows, cols                u32 each
//!   values                    rows*cols f32
//! digest                      SHA-256 of every preceding byte
//! ```
//!
//! The config block carries the resolved run configuration plus the model
//! scalars and (for region checkpoints) the POI table, so a checkpoint is
//! self-contained: models reconstruct from the file alone.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::denoisers::{GlobalModel, PatchModel, RegionModel, RegionPoi};
use crate::numerics::{Matrix, Real};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DCPR";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {0:02x?}, not a checkpoint file")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u16),
    #[error("unknown model kind code {0}")]
    BadKind(u8),
    #[error("file truncated: needed {need} more bytes, had {have}")]
    Truncated { need: usize, have: usize },
    #[error("integrity digest mismatch — file corrupted or tampered")]
    DigestMismatch,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointKind {
    Global,
    Region,
    Patch,
}

impl CheckpointKind {
    fn code(self) -> u8 {
        match self {
            CheckpointKind::Global => 0,
            CheckpointKind::Region => 1,
            CheckpointKind::Patch => 2,
        }
    }

    fn from_code(code: u8) -> Result<Self, CheckpointError> {
        match code {
            0 => Ok(CheckpointKind::Global),
            1 => Ok(CheckpointKind::Region),
            2 => Ok(CheckpointKind::Patch),
            other => Err(CheckpointError::BadKind(other)),
        }
    }
}

/// A decoded checkpoint: the kind tag, the flat config snapshot (sorted
/// by key), and the named tensors in canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub config: Vec<(String, String)>,
    pub tensors: Vec<(String, Matrix<f32>)>,
}

impl Checkpoint {
    fn new(kind: CheckpointKind, mut config: Vec<(String, String)>, tensors: Vec<(String, Matrix<f32>)>) -> Checkpoint {
        config.sort_by(|a, b| a.0.cmp(&b.0));
        Checkpoint { kind, config, tensors }
    }

    pub fn config_value(&self, key: &str) -> Option<&str> {
        self.config.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn tensor(&self, name: &str) -> Option<&Matrix<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    /// Snapshot a trained global model. `config` is the resolved run
    /// configuration to embed; model scalars are added on top.
    pub fn for_global(model: &GlobalModel<f32>, mut config: Vec<(String, String)>) -> Checkpoint {
        config.push(("model.lambda".into(), format!("{}", model.lambda)));
        Checkpoint::new(CheckpointKind::Global, config, clone_tensors(&model.tensors()))
    }

    pub fn for_region(model: &RegionModel<f32>, mut config: Vec<(String, String)>) -> Checkpoint {
        config.push(("model.lambda".into(), format!("{}", model.base.lambda)));
        config.push(("model.gamma".into(), format!("{}", model.gamma)));
        config.push(("model.region_id".into(), format!("{}", model.region_id)));
        config.push(("model.clip_km".into(), format!("{}", model.clip_km)));
        config.push(("model.clip_hours".into(), format!("{}", model.clip_hours)));
        for (i, p) in model.pois.iter().enumerate() {
            config.push((
                format!("poi.{i}"),
                format!("{},{},{},{}", p.external_id, p.category_row, p.lat, p.lon),
            ));
        }
        Checkpoint::new(CheckpointKind::Region, config, clone_tensors(&model.tensors()))
    }

    pub fn for_patch(model: &PatchModel<f32>, config: Vec<(String, String)>) -> Checkpoint {
        Checkpoint::new(CheckpointKind::Patch, config, clone_tensors(&model.tensors()))
    }
}

fn clone_tensors(tensors: &[(String, &Matrix<f32>)]) -> Vec<(String, Matrix<f32>)> {
    tensors.iter().map(|(n, m)| (n.clone(), (*m).clone())).collect()
}

/// Canonical byte encoding (config sorted by key, tensors in given order).
pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(ck.kind.code());

    let mut config = ck.config.clone();
    config.sort_by(|a, b| a.0.cmp(&b.0));
    let mut block = String::new();
    for (k, v) in &config {
        assert!(!k.contains('=') && !k.contains('\n'), "config key {k:?} contains a delimiter");
        assert!(!v.contains('\n'), "config value for {k:?} contains a newline");
        block.push_str(k);
        block.push('=');
        block.push_str(v);
        block.push('\n');
    }
    out.extend_from_slice(&(block.len() as u32).to_le_bytes());
    out.extend_from_slice(block.as_bytes());

    out.extend_from_slice(&(ck.tensors.len() as u32).to_le_bytes());
    for (name, m) in &ck.tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(2u8); // rank
        out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
        for v in m.data() {
            v.write_le(&mut out);
        }
    }

    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Truncated {
                need: self.pos + n - self.buf.len(),
                have: self.buf.len() - self.pos,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    if bytes.len() < 32 {
        return Err(CheckpointError::Truncated { need: 32 - bytes.len(), have: bytes.len() });
    }
    // Identify the format before validating integrity, so a foreign file
    // reports "not ours" rather than "ours but corrupt".
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let (body, stored_digest) = bytes.split_at(bytes.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != stored_digest {
        return Err(CheckpointError::DigestMismatch);
    }

    let mut r = Reader { buf: body, pos: 0 };
    r.take(4)?;
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let kind = CheckpointKind::from_code(r.u8()?)?;

    let config_len = r.u32()? as usize;
    let config_bytes = r.take(config_len)?;
    let config_text = std::str::from_utf8(config_bytes)
        .map_err(|e| CheckpointError::Malformed(format!("config block not UTF-8: {e}")))?;
    let mut config = Vec::new();
    for line in config_text.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CheckpointError::Malformed(format!("config line without '=': {line:?}")))?;
        config.push((k.to_string(), v.to_string()));
    }

    let n_tensors = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| CheckpointError::Malformed(format!("tensor name not UTF-8: {e}")))?
            .to_string();
        let rank = r.u8()?;
        if rank != 2 {
            return Err(CheckpointError::Malformed(format!(
                "tensor {name:?} has rank {rank}, expected 2"
            )));
        }
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        if rows == 0 || cols == 0 {
            return Err(CheckpointError::Malformed(format!("tensor {name:?} has a zero dimension")));
        }
        let raw = r.take(rows * cols * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, Matrix::from_vec(rows, cols, data)));
    }
    if r.pos != body.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes after the tensor table",
            body.len() - r.pos
        )));
    }
    Ok(Checkpoint { kind, config, tensors })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<(), CheckpointError> {
    fs::write(path, encode_checkpoint(ck))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    decode_checkpoint(&fs::read(path)?)
}

fn want_kind(ck: &Checkpoint, kind: CheckpointKind) -> Result<(), CheckpointError> {
    if ck.kind != kind {
        return Err(CheckpointError::Malformed(format!(
            "expected a {kind:?} checkpoint, found {:?}",
            ck.kind
        )));
    }
    Ok(())
}

fn required_tensor(ck: &Checkpoint, name: &str) -> Result<Matrix<f32>, CheckpointError> {
    ck.tensor(name)
        .cloned()
        .ok_or_else(|| CheckpointError::Malformed(format!("missing tensor {name:?}")))
}

fn required_scalar<T: std::str::FromStr>(ck: &Checkpoint, key: &str) -> Result<T, CheckpointError> {
    let raw = ck
        .config_value(key)
        .ok_or_else(|| CheckpointError::Malformed(format!("missing config key {key:?}")))?;
    raw.parse()
        .map_err(|_| CheckpointError::Malformed(format!("config key {key:?} has bad value {raw:?}")))
}

pub fn global_from_checkpoint(ck: &Checkpoint) -> Result<GlobalModel<f32>, CheckpointError> {
    want_kind(ck, CheckpointKind::Global)?;
    build_global(ck, "")
}

fn build_global(ck: &Checkpoint, prefix: &str) -> Result<GlobalModel<f32>, CheckpointError> {
    let model = GlobalModel {
        category_emb: required_tensor(ck, &format!("{prefix}category_emb"))?,
        w_q: required_tensor(ck, &format!("{prefix}w_q"))?,
        w_k: required_tensor(ck, &format!("{prefix}w_k"))?,
        w_v: required_tensor(ck, &format!("{prefix}w_v"))?,
        lambda: required_scalar(ck, "model.lambda")?,
    };
    let d = model.w_q.rows();
    for (name, m) in [("w_q", &model.w_q), ("w_k", &model.w_k), ("w_v", &model.w_v)] {
        if m.shape() != (d, d) {
            return Err(CheckpointError::Malformed(format!(
                "{prefix}{name} is {}x{}, expected {d}x{d}",
                m.rows(),
                m.cols()
            )));
        }
    }
    if model.category_emb.cols() != d {
        return Err(CheckpointError::Malformed(format!(
            "category embedding width {} does not match projection dim {d}",
            model.category_emb.cols()
        )));
    }
    Ok(model)
}

pub fn region_from_checkpoint(ck: &Checkpoint) -> Result<RegionModel<f32>, CheckpointError> {
    want_kind(ck, CheckpointKind::Region)?;
    let base = build_global(ck, "base.")?;
    let poi_emb = required_tensor(ck, "poi_emb")?;
    let unit_spatial = required_tensor(ck, "unit_spatial")?;
    let unit_temporal = required_tensor(ck, "unit_temporal")?;
    let d = base.dim();
    for (name, m, rows) in [
        ("unit_spatial", &unit_spatial, 1),
        ("unit_temporal", &unit_temporal, 1),
    ] {
        if m.shape() != (rows, d) {
            return Err(CheckpointError::Malformed(format!(
                "{name} is {}x{}, expected {rows}x{d}",
                m.rows(),
                m.cols()
            )));
        }
    }
    if poi_emb.cols() != d {
        return Err(CheckpointError::Malformed(format!(
            "poi embedding width {} does not match model dim {d}",
            poi_emb.cols()
        )));
    }

    let n_pois = poi_emb.rows();
    let mut pois = Vec::with_capacity(n_pois);
    for i in 0..n_pois {
        let raw: String = required_scalar(ck, &format!("poi.{i}"))?;
        let parts: Vec<&str> = raw.split(',').collect();
        if parts.len() != 4 {
            return Err(CheckpointError::Malformed(format!(
                "poi.{i} has {} fields, expected 4",
                parts.len()
            )));
        }
        let bad = |field: &str| {
            CheckpointError::Malformed(format!("poi.{i} field {field:?} is unparsable in {raw:?}"))
        };
        let poi = RegionPoi {
            external_id: parts[0].parse().map_err(|_| bad("external_id"))?,
            category_row: parts[1].parse().map_err(|_| bad("category_row"))?,
            lat: parts[2].parse().map_err(|_| bad("lat"))?,
            lon: parts[3].parse().map_err(|_| bad("lon"))?,
        };
        if poi.category_row >= base.n_categories() {
            return Err(CheckpointError::Malformed(format!(
                "poi.{i} category row {} out of range for {} categories",
                poi.category_row,
                base.n_categories()
            )));
        }
        pois.push(poi);
    }

    Ok(RegionModel {
        base,
        poi_emb,
        unit_spatial,
        unit_temporal,
        gamma: required_scalar(ck, "model.gamma")?,
        region_id: required_scalar(ck, "model.region_id")?,
        pois,
        clip_km: required_scalar(ck, "model.clip_km")?,
        clip_hours: required_scalar(ck, "model.clip_hours")?,
    })
}

pub fn patch_from_checkpoint(ck: &Checkpoint) -> Result<PatchModel<f32>, CheckpointError> {
    want_kind(ck, CheckpointKind::Patch)?;
    let model = PatchModel {
        w1: required_tensor(ck, "w1")?,
        b1: required_tensor(ck, "b1")?,
        w2: required_tensor(ck, "w2")?,
        b2: required_tensor(ck, "b2")?,
        w3: required_tensor(ck, "w3")?,
        b3: required_tensor(ck, "b3")?,
        w4: required_tensor(ck, "w4")?,
        b4: required_tensor(ck, "b4")?,
    };
    let d = model.w1.rows();
    for (name, m) in model.tensors() {
        let expected = if name.starts_with('w') { (d, d) } else { (1, d) };
        if m.shape() != expected {
            return Err(CheckpointError::Malformed(format!(
                "{name} is {}x{}, expected {}x{}",
                m.rows(),
                m.cols(),
                expected.0,
                expected.1
            )));
        }
    }
    Ok(model)
}
