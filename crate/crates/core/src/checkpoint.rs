//! DRNC checkpoints: parameters, optimizer state, stage/step counters and the
//! random stream position, little-endian throughout.
//!
//! Layout: `"DRNC"`, version `u32`, 32-byte config digest, a tensor list of
//! parameters, a tensor list of Adam moments (`m.<name>`, `v.<name>`), the Adam
//! scalars, then stage `u32`, stage step `u64`, global step `u64`, seed `u64`
//! and the ChaCha state (32-byte key, stream `u64`, word position `u128`).
//! A tensor list is a `u32` count of entries, each being name length `u32`,
//! name bytes, rank `u32`, dims as `u32`, and `f32` values.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::optim::AdamState;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::TrainState;

pub const MAGIC: &[u8; 4] = b"DRNC";
pub const VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn tensors<'a>(&mut self, entries: impl ExactSizeIterator<Item = (String, &'a Tensor)>) {
        self.u32(entries.len() as u32);
        for (name, t) in entries {
            self.u32(name.len() as u32);
            self.0.extend_from_slice(name.as_bytes());
            self.u32(t.rank() as u32);
            for &d in t.shape() {
                self.u32(d as u32);
            }
            for &v in t.data() {
                self.f32(v);
            }
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::codec(
                self.path,
                format!("truncated: needed {n} bytes at offset {}, file has {}", self.pos, self.bytes.len()),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().expect("16 bytes")))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn tensors(&mut self) -> Result<Vec<(String, Tensor)>> {
        let n = self.u32()? as usize;
        let mut out = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let len = self.u32()? as usize;
            let name = String::from_utf8(self.take(len)?.to_vec())
                .map_err(|_| Error::codec(self.path, "tensor name is not UTF-8"))?;
            let rank = self.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(self.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = self.take(numel.checked_mul(4).ok_or_else(|| Error::codec(self.path, "tensor too large"))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(shape, data)
                .map_err(|e| Error::codec(self.path, format!("tensor `{name}`: {e}")))?;
            out.push((name, t));
        }
        Ok(out)
    }
}

pub fn encode(state: &TrainState, cfg: &ModelConfig) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.0.extend_from_slice(&cfg.digest());
    let entries = state.params.entries();
    w.tensors(entries.iter().map(|e| (e.name.clone(), &e.value)));
    let moments: Vec<(String, &Tensor)> = entries
        .iter()
        .zip(&state.adam.m)
        .map(|(e, m)| (format!("m.{}", e.name), m))
        .chain(entries.iter().zip(&state.adam.v).map(|(e, v)| (format!("v.{}", e.name), v)))
        .collect();
    w.tensors(moments.into_iter());
    let a = &state.adam;
    w.f32(a.lr);
    w.f32(a.beta1);
    w.f32(a.beta2);
    w.f32(a.eps);
    w.u64(a.step);
    w.u32(state.stage);
    w.u64(state.stage_step);
    w.u64(state.global_step);
    w.u64(state.seed);
    w.0.extend_from_slice(&state.rng.get_seed());
    w.u64(state.rng.get_stream());
    w.0.extend_from_slice(&state.rng.get_word_pos().to_le_bytes());
    w.0
}

/// Decodes a checkpoint into a copy of `template`, the parameter store of
/// the model it is meant for.
pub fn decode(bytes: &[u8], path: &Path, template: &ParamStore, cfg: &ModelConfig) -> Result<TrainState> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4)? != MAGIC {
        return Err(Error::codec(path, "bad magic, expected DRNC"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::codec(path, format!("unsupported version {version}, expected {VERSION}")));
    }
    let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let params = r.tensors()?;
    let mut store = template.clone();
    store.load_values(&params)?;
    if digest != cfg.digest() {
        return Err(Error::codec(path, "checkpoint was written for a different model config"));
    }
    let moments = r.tensors()?;
    let n = store.len();
    if moments.len() != 2 * n {
        return Err(Error::codec(path, format!("expected {} moment tensors, found {}", 2 * n, moments.len())));
    }
    let entries = store.entries();
    for (i, (name, t)) in moments.iter().enumerate() {
        let e = &entries[i % n];
        let expected = format!("{}.{}", if i < n { "m" } else { "v" }, e.name);
        if *name != expected || t.shape() != e.value.shape() {
            return Err(Error::CheckpointShape {
                name: name.clone(),
                found: t.shape().to_vec(),
                expected: e.value.shape().to_vec(),
            });
        }
    }
    let (m, v): (Vec<_>, Vec<_>) = moments.into_iter().map(|(_, t)| t).enumerate().partition(|(i, _)| *i < n);
    let adam = AdamState {
        lr: r.f32()?,
        beta1: r.f32()?,
        beta2: r.f32()?,
        eps: r.f32()?,
        step: r.u64()?,
        m: m.into_iter().map(|(_, t)| t).collect(),
        v: v.into_iter().map(|(_, t)| t).collect(),
    };
    let stage = r.u32()?;
    let stage_step = r.u64()?;
    let global_step = r.u64()?;
    let seed = r.u64()?;
    let key: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let stream = r.u64()?;
    let word_pos = r.u128()?;
    if r.pos != bytes.len() {
        return Err(Error::codec(path, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    Ok(TrainState {
        params: store,
        adam,
        stage,
        stage_step,
        global_step,
        rng,
        seed,
    })
}

pub fn save(path: &Path, state: &TrainState, cfg: &ModelConfig) -> Result<()> {
    fs::write(path, encode(state, cfg)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path, template: &ParamStore, cfg: &ModelConfig) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path, template, cfg)
}
