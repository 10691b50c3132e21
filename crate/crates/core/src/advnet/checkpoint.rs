//! Binary checkpoints.
//!
//! Layout (little-endian): magic `SAUGCKPT`, `u32` version, 32-byte config
//! hash, then length-prefixed sections: a JSON header (epoch counter, specs,
//! optimizer scalars, metrics so far) followed by the tensor registry, each
//! tensor as name, rank, dims and `f64` values.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::adam::OptimState;
use super::net::{Net, ParamStore, ToyNetSpec};
use super::tensor::Tensor;
use super::train::{EpochRecord, StepRecord, TrainConfig, TrainState};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SAUGCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct NetHeader {
    spec: ToyNetSpec,
    base: usize,
    step: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    epochs_done: usize,
    d: NetHeader,
    g: Option<NetHeader>,
    epochs: Vec<EpochRecord>,
    steps: Vec<StepRecord>,
}

fn net_header(n: &Net, s: &OptimState) -> NetHeader {
    NetHeader {
        spec: n.spec.clone(),
        base: n.params.base,
        step: s.step,
        lr: s.lr,
        beta1: s.beta1,
        beta2: s.beta2,
        eps: s.eps,
    }
}

fn put_bytes(w: &mut Vec<u8>, b: &[u8]) {
    w.write_u64::<LE>(b.len() as u64).expect("vec write");
    w.extend_from_slice(b);
}

fn put_tensor(w: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_bytes(w, name.as_bytes());
    w.write_u32::<LE>(t.shape.len() as u32).expect("vec write");
    for d in &t.shape {
        w.write_u64::<LE>(*d as u64).expect("vec write");
    }
    for v in &t.data {
        w.write_f64::<LE>(*v).expect("vec write");
    }
}

fn put_net(w: &mut Vec<u8>, tag: &str, n: &Net, s: &OptimState) {
    for (i, name) in n.params.names.iter().enumerate() {
        put_tensor(w, &format!("{tag}/{name}"), &n.params.values[i]);
        put_tensor(w, &format!("{tag}/{name}#m"), &s.m[i]);
        put_tensor(w, &format!("{tag}/{name}#v"), &s.v[i]);
    }
}

pub fn encode(cfg: &TrainConfig, st: &TrainState) -> Vec<u8> {
    let header = Header {
        epochs_done: st.epochs_done,
        d: net_header(&st.d, &st.d_state),
        g: st.g.as_ref().map(|(n, s)| net_header(n, s)),
        epochs: st.epochs.clone(),
        steps: st.steps.clone(),
    };
    let mut w = Vec::new();
    w.extend_from_slice(MAGIC);
    w.write_u32::<LE>(CHECKPOINT_VERSION).expect("vec write");
    w.extend_from_slice(&cfg.hash());
    put_bytes(&mut w, &serde_json::to_vec(&header).expect("header serializes"));
    let mut body = Vec::new();
    put_net(&mut body, "d", &st.d, &st.d_state);
    if let Some((n, s)) = &st.g {
        put_net(&mut body, "g", n, s);
    }
    put_bytes(&mut w, &body);
    w
}

fn corrupt(e: impl std::fmt::Display) -> Error {
    Error::CorruptManifest(format!("checkpoint: {e}"))
}

fn get_bytes(r: &mut Cursor<&[u8]>) -> Result<Vec<u8>> {
    let n = r.read_u64::<LE>().map_err(corrupt)? as usize;
    let left = r.get_ref().len() - r.position() as usize;
    if n > left {
        return Err(corrupt("truncated section"));
    }
    let mut b = vec![0; n];
    r.read_exact(&mut b).map_err(corrupt)?;
    Ok(b)
}

fn get_tensor(r: &mut Cursor<&[u8]>, expect_name: &str, expect_shape: &[usize]) -> Result<Tensor> {
    let name = String::from_utf8(get_bytes(r)?).map_err(corrupt)?;
    if name != expect_name {
        return Err(corrupt(format!("expected tensor `{expect_name}`, found `{name}`")));
    }
    let rank = r.read_u32::<LE>().map_err(corrupt)? as usize;
    let shape = (0..rank)
        .map(|_| r.read_u64::<LE>().map(|d| d as usize))
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(corrupt)?;
    if shape != expect_shape {
        return Err(corrupt(format!("tensor `{name}` has shape {shape:?}, expected {expect_shape:?}")));
    }
    let mut data = vec![0.0; shape.iter().product()];
    r.read_f64_into::<LE>(&mut data).map_err(corrupt)?;
    Tensor::from_vec(&shape, data)
}

fn get_net(r: &mut Cursor<&[u8]>, tag: &str, h: &NetHeader) -> Result<(Net, OptimState)> {
    let template = Net::init(h.spec.clone(), h.base).map_err(corrupt)?;
    let n = template.params.len();
    let (mut values, mut m, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for (i, name) in template.params.names.iter().enumerate() {
        let shape = &template.params.values[i].shape;
        values.push(get_tensor(r, &format!("{tag}/{name}"), shape)?);
        m.push(get_tensor(r, &format!("{tag}/{name}#m"), shape)?);
        v.push(get_tensor(r, &format!("{tag}/{name}#v"), shape)?);
    }
    let net = Net {
        spec: h.spec.clone(),
        params: ParamStore {
            base: h.base,
            names: template.params.names.clone(),
            values,
        },
    };
    let st = OptimState {
        m,
        v,
        step: h.step,
        lr: h.lr,
        beta1: h.beta1,
        beta2: h.beta2,
        eps: h.eps,
    };
    Ok((net, st))
}

/// Decodes a checkpoint written for a config with the same hash.
pub fn decode(bytes: &[u8], cfg: &TrainConfig) -> Result<TrainState> {
    let mut r = Cursor::new(bytes);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(corrupt)?;
    if &magic != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = r.read_u32::<LE>().map_err(corrupt)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let mut hash = [0u8; 32];
    r.read_exact(&mut hash).map_err(corrupt)?;
    if hash != cfg.hash() {
        return Err(Error::Config("checkpoint was written by a different training config".into()));
    }
    let header: Header = serde_json::from_slice(&get_bytes(&mut r)?).map_err(corrupt)?;
    let body = get_bytes(&mut r)?;
    let mut b = Cursor::new(&body[..]);
    let (d, d_state) = get_net(&mut b, "d", &header.d)?;
    let g = header.g.as_ref().map(|h| get_net(&mut b, "g", h)).transpose()?;
    if b.position() as usize != body.len() || r.position() as usize != bytes.len() {
        return Err(corrupt("trailing bytes"));
    }
    Ok(TrainState {
        epochs_done: header.epochs_done,
        d,
        d_state,
        g,
        epochs: header.epochs,
        steps: header.steps,
    })
}

pub fn save(path: &Path, cfg: &TrainConfig, st: &TrainState) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("ckpt.tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&encode(cfg, st)).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path, cfg: &TrainConfig) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, cfg)
}
