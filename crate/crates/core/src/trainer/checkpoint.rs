//! Binary checkpoint container: a flat list of named single-precision arrays.
//!
//! Layout (little-endian): magic `FHVAE001`, `u32` array count, then per
//! array a `u16` name length, the UTF-8 name, a `u8` rank, `rank` `u32`
//! extents and the `f32` payload in row-major order.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::AdamState;
use crate::data::NormStats;
use crate::diffcore::Array;
use crate::error::{Error, Result};
use crate::fhvae::{FhvaeModel, HyperParams, SVectorTable};
use crate::recnet::{CellKind, Networks};

const MAGIC: &[u8; 8] = b"FHVAE001";
const TABLE: &str = "table.mu2";
const TABLE_IDS: &str = "table.ids";

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: FhvaeModel,
    pub adam: Option<AdamState>,
    pub norm: Option<NormStats>,
}

fn hp_entries(hp: &HyperParams) -> Vec<(&'static str, f64)> {
    vec![
        ("hp.z1_dim", hp.z1_dim as f64),
        ("hp.z2_dim", hp.z2_dim as f64),
        ("hp.frame_dim", hp.frame_dim as f64),
        ("hp.seg_len", hp.seg_len as f64),
        ("hp.hidden", hp.hidden as f64),
        ("hp.cell", hp.cell.code() as f64),
        ("hp.var_z1", hp.var_z1),
        ("hp.var_z2", hp.var_z2),
        ("hp.var_mu2", hp.var_mu2),
        ("hp.var_mu2_post", hp.var_mu2_post),
        ("hp.alpha", hp.alpha),
    ]
}

fn named_arrays(ck: &Checkpoint) -> Vec<(String, Array)> {
    let mut out: Vec<(String, Array)> =
        hp_entries(&ck.model.hp).into_iter().map(|(n, v)| (n.to_string(), Array::scalar(v))).collect();
    let params = &ck.model.nets.params;
    for (n, v) in params.names().iter().zip(params.values()) {
        out.push((n.clone(), v.clone()));
    }
    out.push((TABLE.into(), ck.model.table.rows().clone()));
    let ids = ck.model.table.ids().join("\n").into_bytes();
    out.push((TABLE_IDS.into(), Array::vector(ids.into_iter().map(f64::from).collect())));
    if let Some(adam) = &ck.adam {
        out.push(("adam.step".into(), Array::scalar(adam.step as f64)));
        let names = params.names().iter().map(String::as_str).chain([TABLE]);
        for ((n, m), v) in names.zip(&adam.m).zip(&adam.v) {
            out.push((format!("adam.m/{n}"), m.clone()));
            out.push((format!("adam.v/{n}"), v.clone()));
        }
    }
    if let Some(norm) = &ck.norm {
        out.push(("norm.mean".into(), Array::vector(norm.mean.clone())));
        out.push(("norm.var".into(), Array::vector(norm.var.clone())));
    }
    out
}

pub fn write_checkpoint(w: &mut impl Write, ck: &Checkpoint) -> std::io::Result<()> {
    let arrays = named_arrays(ck);
    w.write_all(MAGIC)?;
    w.write_all(&(arrays.len() as u32).to_le_bytes())?;
    for (name, a) in &arrays {
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[a.rank() as u8])?;
        for &d in a.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in a.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_checkpoint(&mut w, ck).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_exact<const N: usize>(r: &mut impl Read, path: &Path) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| Error::format(path, format!("truncated checkpoint: {e}")))?;
    Ok(buf)
}

/// Parses a checkpoint; `path` only labels errors.
pub fn read_checkpoint(r: &mut impl Read, path: &Path) -> Result<Checkpoint> {
    if &read_exact::<8>(r, path)? != MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let count = u32::from_le_bytes(read_exact(r, path)?);
    let mut arrays = BTreeMap::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(read_exact(r, path)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|e| Error::format(path, format!("truncated checkpoint: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| Error::format(path, "array name is not UTF-8"))?;
        let rank = read_exact::<1>(r, path)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(read_exact(r, path)?) as usize);
        }
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes).map_err(|e| Error::format(path, format!("truncated payload of `{name}`: {e}")))?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
        if arrays.insert(name.clone(), Array::new(shape, data)).is_some() {
            return Err(Error::format(path, format!("duplicate array `{name}`")));
        }
    }
    assemble(arrays, path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut BufReader::new(file), path)
}

fn assemble(mut arrays: BTreeMap<String, Array>, path: &Path) -> Result<Checkpoint> {
    let mut take =
        |name: &str| arrays.remove(name).ok_or_else(|| Error::format(path, format!("missing array `{name}`")));
    let mut scalar = |name: &str| -> Result<f64> {
        let a = take(name)?;
        if a.len() != 1 {
            return Err(Error::format(path, format!("`{name}` must be a scalar")));
        }
        Ok(a.data()[0])
    };
    let cell_code = scalar("hp.cell")?;
    let hp = HyperParams {
        z1_dim: scalar("hp.z1_dim")? as usize,
        z2_dim: scalar("hp.z2_dim")? as usize,
        frame_dim: scalar("hp.frame_dim")? as usize,
        seg_len: scalar("hp.seg_len")? as usize,
        hidden: scalar("hp.hidden")? as usize,
        cell: CellKind::from_code(cell_code as u8)
            .ok_or_else(|| Error::format(path, format!("unknown cell code {cell_code}")))?,
        var_z1: scalar("hp.var_z1")?,
        var_z2: scalar("hp.var_z2")?,
        var_mu2: scalar("hp.var_mu2")?,
        var_mu2_post: scalar("hp.var_mu2_post")?,
        alpha: scalar("hp.alpha")?,
    };
    hp.validate().map_err(|e| Error::format(path, e.to_string()))?;

    let mut nets = Networks::new(hp.net_shape(), &mut ChaCha8Rng::seed_from_u64(0));
    let names: Vec<String> = nets.params.names().to_vec();
    for (k, name) in names.iter().enumerate() {
        let a = take(name)?;
        if a.shape() != nets.params.get(k).shape() {
            return Err(Error::format(
                path,
                format!("`{name}` has shape {:?}, expected {:?}", a.shape(), nets.params.get(k).shape()),
            ));
        }
        nets.params.values_mut()[k] = a;
    }

    let id_bytes: Vec<u8> = take(TABLE_IDS)?.data().iter().map(|&b| b as u8).collect();
    let ids_text = String::from_utf8(id_bytes).map_err(|_| Error::format(path, "sequence ids are not UTF-8"))?;
    let ids: Vec<String> =
        if ids_text.is_empty() { Vec::new() } else { ids_text.split('\n').map(str::to_string).collect() };
    let rows = take(TABLE)?;
    let rows = if rows.rank() == 2 { rows } else { Array::zeros(&[ids.len(), hp.z2_dim]) };
    if rows.cols() != hp.z2_dim {
        return Err(Error::format(path, "s-vector table width differs from z2_dim"));
    }
    let table = SVectorTable::from_rows(ids, rows).map_err(|e| Error::format(path, e.to_string()))?;

    let adam = if arrays.contains_key("adam.step") {
        let step = arrays.remove("adam.step").map(|a| a.data()[0] as u64).unwrap_or(0);
        let mut m = Vec::new();
        let mut v = Vec::new();
        for name in names.iter().map(String::as_str).chain([TABLE]) {
            for (prefix, dst) in [("adam.m/", &mut m), ("adam.v/", &mut v)] {
                let key = format!("{prefix}{name}");
                let a = arrays.remove(&key).ok_or_else(|| Error::format(path, format!("missing array `{key}`")))?;
                dst.push(a);
            }
        }
        Some(AdamState { m, v, step })
    } else {
        None
    };
    let norm = match (arrays.remove("norm.mean"), arrays.remove("norm.var")) {
        (Some(mean), Some(var)) => Some(NormStats { mean: mean.into_data(), var: var.into_data() }),
        (None, None) => None,
        _ => return Err(Error::format(path, "normalization stats are incomplete")),
    };
    if let Some(extra) = arrays.keys().next() {
        return Err(Error::format(path, format!("unexpected array `{extra}`")));
    }
    Ok(Checkpoint { model: FhvaeModel { hp, nets, table }, adam, norm })
}
