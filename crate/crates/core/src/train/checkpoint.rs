//! Checkpoint file format.
//!
//! Layout: magic "ECKP", u32 version, u32 config-JSON length + bytes, u32
//! tensor count, then per tensor: u32 name length, name bytes, u32 ndim,
//! ndim u32 dims, little-endian float32 payload. Everything that evolves is
//! a tensor blob: network parameters, codebooks and positional tables,
//! memory banks (rows, centroid, cursor/fill), optimizer moments and step
//! counters, and the RNG state (the base seed plus the epoch counter —
//! every stream in this crate is rederivable from those).
//!
//! Training runs entirely in f32, so the float32 payload is lossless and a
//! resumed run replays an uninterrupted one bit for bit.

use ndarray::ArrayD;
use std::io::{Read, Write};
use std::path::Path;

use super::{ModelState, TrainConfig};
use crate::cdc::{Codebook, PositionalTable};
use crate::error::{Error, Result};
use crate::nets::{DiscParams, GeneratorParams, ParamWalk};
use crate::transport::MemoryBank;

const MAGIC: &[u8; 4] = b"ECKP";
const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

fn named_tensors(state: &ModelState<f32>) -> Vec<(String, ArrayD<f32>)> {
    let mut out: Vec<(String, ArrayD<f32>)> = Vec::new();
    state.phi_a.walk("phi_a", &mut |n, t| out.push((n, t.clone())));
    state.phi_b.walk("phi_b", &mut |n, t| out.push((n, t.clone())));
    out.push(("pos_a.table".into(), state.pos_a.table.clone()));
    out.push(("pos_b.table".into(), state.pos_b.table.clone()));
    for (name, cb) in [("codebook_a", &state.codebook_a), ("codebook_b", &state.codebook_b)] {
        out.push((format!("{name}.entries"), cb.entries.clone().into_dyn()));
        out.push((
            format!("{name}.usage_counts"),
            cb.usage_counts.clone().into_dyn(),
        ));
    }
    state
        .disc_spatial
        .walk("disc_spatial", &mut |n, t| out.push((n, t.clone())));
    state
        .disc_temporal
        .walk("disc_temporal", &mut |n, t| out.push((n, t.clone())));
    state
        .disc_patch
        .walk("disc_patch", &mut |n, t| out.push((n, t.clone())));
    for (name, bank) in [("bank_a", &state.bank_a), ("bank_b", &state.bank_b)] {
        out.push((format!("{name}.rows"), bank.rows.clone().into_dyn()));
        out.push((format!("{name}.centroid"), bank.centroid.clone().into_dyn()));
        out.push((
            format!("{name}.meta"),
            ndarray::arr1(&[bank.write_cursor as f32, bank.fill as f32]).into_dyn(),
        ));
    }
    for (name, opt) in [("opt_gen", &state.opt_gen), ("opt_disc", &state.opt_disc)] {
        out.push((
            format!("{name}.step"),
            ndarray::arr1(&[opt.step as f32]).into_dyn(),
        ));
        for (i, m) in opt.m.iter().enumerate() {
            out.push((format!("{name}.m.{i:03}"), m.clone()));
        }
        for (i, v) in opt.v.iter().enumerate() {
            out.push((format!("{name}.v.{i:03}"), v.clone()));
        }
    }
    let seed_bytes: Vec<f32> = state
        .config
        .seed
        .to_le_bytes()
        .iter()
        .map(|&b| b as f32)
        .collect();
    out.push(("rng.seed_bytes".into(), ndarray::arr1(&seed_bytes).into_dyn()));
    out.push((
        "meta.epoch".into(),
        ndarray::arr1(&[state.epoch as f32]).into_dyn(),
    ));
    out
}

pub fn save_checkpoint(state: &ModelState<f32>, path: &Path) -> Result<()> {
    let config_json = serde_json::to_string(&state.config)
        .map_err(|e| Error::Format(format!("config encode: {e}")))?;
    let tensors = named_tensors(state);
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(config_json.as_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, tensor) in &tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(tensor.ndim() as u32).to_le_bytes());
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        let std = tensor.as_standard_layout();
        for &v in std.as_slice().expect("layout") {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

struct Reader {
    bytes: Vec<u8>,
    at: usize,
}

impl Reader {
    fn u32(&mut self) -> Result<u32> {
        if self.at + 4 > self.bytes.len() {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let v = u32::from_le_bytes(self.bytes[self.at..self.at + 4].try_into().expect("4"));
        self.at += 4;
        Ok(v)
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }
}

fn read_tensors(path: &Path) -> Result<(TrainConfig, Vec<(String, ArrayD<f32>)>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::Format(format!(
            "{} is not a checkpoint file",
            path.display()
        )));
    }
    let mut r = Reader { bytes, at: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version} unsupported (expected {VERSION})"
        )));
    }
    let cfg_len = r.u32()? as usize;
    let cfg_bytes = r.take(cfg_len)?.to_vec();
    let config: TrainConfig = serde_json::from_slice(&cfg_bytes)
        .map_err(|e| Error::Format(format!("config echo decode: {e}")))?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|e| Error::Format(format!("tensor name: {e}")))?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let len: usize = shape.iter().product();
        let raw = r.take(len * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4")))
            .collect();
        let arr = ArrayD::from_shape_vec(ndarray::IxDyn(&shape), data)
            .map_err(|e| Error::Format(format!("tensor {name}: {e}")))?;
        tensors.push((name, arr));
    }
    Ok((config, tensors))
}

/// Tensor names, shapes, and the config echo, without materializing state.
pub fn inspect_checkpoint(path: &Path) -> Result<(TrainConfig, Vec<TensorInfo>)> {
    let (config, tensors) = read_tensors(path)?;
    Ok((
        config,
        tensors
            .into_iter()
            .map(|(name, t)| TensorInfo {
                name,
                shape: t.shape().to_vec(),
            })
            .collect(),
    ))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState<f32>> {
    let (config, tensors) = read_tensors(path)?;
    let mut state = ModelState::init(config)?;
    let mut map: std::collections::BTreeMap<String, ArrayD<f32>> = tensors.into_iter().collect();
    let mut missing = Vec::new();
    {
        let mut fill = |name: String, dst: &mut ArrayD<f32>| match map.remove(&name) {
            Some(t) if t.shape() == dst.shape() => *dst = t,
            Some(t) => missing.push(format!(
                "{name}: shape {:?} does not match expected {:?}",
                t.shape(),
                dst.shape()
            )),
            None => missing.push(format!("{name}: missing")),
        };
        state.phi_a.walk_mut("phi_a", &mut |n, t| fill(n, t));
        state.phi_b.walk_mut("phi_b", &mut |n, t| fill(n, t));
        fill("pos_a.table".into(), &mut state.pos_a.table);
        fill("pos_b.table".into(), &mut state.pos_b.table);
        state
            .disc_spatial
            .walk_mut("disc_spatial", &mut |n, t| fill(n, t));
        state
            .disc_temporal
            .walk_mut("disc_temporal", &mut |n, t| fill(n, t));
        state
            .disc_patch
            .walk_mut("disc_patch", &mut |n, t| fill(n, t));
    }
    restore_codebook(&mut state.codebook_a, "codebook_a", &mut map, &mut missing);
    restore_codebook(&mut state.codebook_b, "codebook_b", &mut map, &mut missing);
    restore_bank(&mut state.bank_a, "bank_a", &mut map, &mut missing);
    restore_bank(&mut state.bank_b, "bank_b", &mut map, &mut missing);
    restore_opt(&mut state.opt_gen, "opt_gen", &mut map, &mut missing);
    restore_opt(&mut state.opt_disc, "opt_disc", &mut map, &mut missing);
    if let Some(e) = map.remove("meta.epoch") {
        state.epoch = e[[0]] as usize;
    } else {
        missing.push("meta.epoch: missing".into());
    }
    map.remove("rng.seed_bytes");
    if !missing.is_empty() {
        return Err(Error::Format(format!(
            "checkpoint incomplete: {}",
            missing.join("; ")
        )));
    }
    if !map.is_empty() {
        let extra: Vec<String> = map.into_keys().collect();
        return Err(Error::Format(format!(
            "checkpoint has unexpected tensors: {}",
            extra.join(", ")
        )));
    }
    Ok(state)
}

fn restore_codebook(
    cb: &mut Codebook<f32>,
    prefix: &str,
    map: &mut std::collections::BTreeMap<String, ArrayD<f32>>,
    missing: &mut Vec<String>,
) {
    match map.remove(&format!("{prefix}.entries")) {
        Some(t) if t.shape() == cb.entries.shape() => {
            cb.entries = t.into_dimensionality().expect("2-d");
        }
        _ => missing.push(format!("{prefix}.entries")),
    }
    match map.remove(&format!("{prefix}.usage_counts")) {
        Some(t) if t.len() == cb.usage_counts.len() => {
            cb.usage_counts = t.into_dimensionality().expect("1-d");
        }
        _ => missing.push(format!("{prefix}.usage_counts")),
    }
}

fn restore_bank(
    bank: &mut MemoryBank<f32>,
    prefix: &str,
    map: &mut std::collections::BTreeMap<String, ArrayD<f32>>,
    missing: &mut Vec<String>,
) {
    match map.remove(&format!("{prefix}.rows")) {
        Some(t) if t.shape() == bank.rows.shape() => {
            bank.rows = t.into_dimensionality().expect("2-d");
        }
        _ => missing.push(format!("{prefix}.rows")),
    }
    match map.remove(&format!("{prefix}.centroid")) {
        Some(t) if t.len() == bank.centroid.len() => {
            bank.centroid = t.into_dimensionality().expect("1-d");
        }
        _ => missing.push(format!("{prefix}.centroid")),
    }
    match map.remove(&format!("{prefix}.meta")) {
        Some(t) if t.len() == 2 => {
            bank.write_cursor = t[[0]] as usize;
            bank.fill = t[[1]] as usize;
        }
        _ => missing.push(format!("{prefix}.meta")),
    }
}

fn restore_opt(
    opt: &mut super::AdamState<f32>,
    prefix: &str,
    map: &mut std::collections::BTreeMap<String, ArrayD<f32>>,
    missing: &mut Vec<String>,
) {
    match map.remove(&format!("{prefix}.step")) {
        Some(t) if t.len() == 1 => opt.step = t[[0]] as u64,
        _ => missing.push(format!("{prefix}.step")),
    }
    for (i, m) in opt.m.iter_mut().enumerate() {
        match map.remove(&format!("{prefix}.m.{i:03}")) {
            Some(t) if t.shape() == m.shape() => *m = t,
            _ => missing.push(format!("{prefix}.m.{i:03}")),
        }
    }
    for (i, v) in opt.v.iter_mut().enumerate() {
        match map.remove(&format!("{prefix}.v.{i:03}")) {
            Some(t) if t.shape() == v.shape() => *v = t,
            _ => missing.push(format!("{prefix}.v.{i:03}")),
        }
    }
}

// silence an unused-import lint when walkers are only used through macros
#[allow(unused)]
fn _walk_types(_: &GeneratorParams<f32>, _: &DiscParams<f32>, _: &PositionalTable<f32>) {}
