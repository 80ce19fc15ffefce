//! Versioned binary checkpoint container: named little-endian f32 arrays
//! plus a small UTF-8 metadata section (length-prefixed throughout).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::bilevel::Adam;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Scalar, Tensor};

const MAGIC: &[u8; 8] = b"PSNASCK1";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub seed: u64,
    pub step: u64,
    pub meta: Vec<(String, String)>,
    pub arrays: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn meta_get(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.meta.push((key.into(), value.into()));
    }

    pub fn array(&self, name: &str) -> Option<&Tensor<f32>> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&self.seed.to_le_bytes());
        buf.extend_from_slice(&self.step.to_le_bytes());
        let meta: String = self
            .meta
            .iter()
            .map(|(k, v)| format!("{k}={}\n", v.replace('\\', "\\\\").replace('\n', "\\n")))
            .collect();
        buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        buf.extend_from_slice(meta.as_bytes());
        buf.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, t) in &self.arrays {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for d in t.shape() {
                buf.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for v in t.as_slice() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?
            .read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        let magic = cur.take(8)?;
        if magic != MAGIC {
            return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let seed = cur.u64()?;
        let step = cur.u64()?;
        let meta_len = cur.u32()? as usize;
        let meta_raw = std::str::from_utf8(cur.take(meta_len)?)
            .map_err(|_| Error::Checkpoint("metadata is not UTF-8".into()))?;
        let meta = meta_raw
            .lines()
            .filter(|l| !l.is_empty())
            .map(|l| {
                let (k, v) = l
                    .split_once('=')
                    .ok_or_else(|| Error::Checkpoint(format!("bad metadata line `{l}`")))?;
                Ok((k.to_string(), unescape(v)))
            })
            .collect::<Result<Vec<_>>>()?;
        let count = cur.u32()? as usize;
        let mut arrays = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?
                .to_string();
            let ndim = cur.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(cur.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = cur.take(n * 4)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            arrays.push((name, Tensor::from_vec(&shape, data)?));
        }
        Ok(Checkpoint { seed, step, meta, arrays })
    }
}

fn unescape(v: &str) -> String {
    let mut out = String::with_capacity(v.len());
    let mut chars = v.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some('n') => out.push('\n'),
                Some('\\') => out.push('\\'),
                Some(other) => {
                    out.push('\\');
                    out.push(other);
                }
                None => out.push('\\'),
            }
        } else {
            out.push(c);
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]))
    }
}

/// Capture parameters, batch-norm buffers and optimizer moments.
pub fn capture_state<T: Scalar>(
    store: &ParamStore<T>,
    optimizers: &[(&str, &Adam<T>)],
) -> Vec<(String, Tensor<f32>)> {
    let mut arrays = Vec::new();
    for p in &store.params {
        arrays.push((format!("param/{}", p.name), p.value.cast::<f32>()));
    }
    for (name, stats) in &store.buffers {
        arrays.push((
            format!("buf/{name}.mean"),
            Tensor::from_vec(&[stats.mean.len()], stats.mean.iter().map(|v| v.as_f64() as f32).collect())
                .expect("buffer shape"),
        ));
        arrays.push((
            format!("buf/{name}.var"),
            Tensor::from_vec(&[stats.var.len()], stats.var.iter().map(|v| v.as_f64() as f32).collect())
                .expect("buffer shape"),
        ));
    }
    for (label, adam) in optimizers {
        let (ids, m, v, t) = adam.state();
        for (slot, id) in ids.iter().enumerate() {
            let pname = &store.params[id.0].name;
            arrays.push((format!("adam/{label}/m/{pname}"), m[slot].cast::<f32>()));
            arrays.push((format!("adam/{label}/v/{pname}"), v[slot].cast::<f32>()));
        }
        arrays.push((
            format!("adam/{label}/t"),
            Tensor::from_vec(&[1], vec![t as f32]).expect("scalar"),
        ));
    }
    arrays
}

/// Restore parameters and buffers captured by [`capture_state`]. Every
/// parameter and buffer of the store must be present with matching shape.
pub fn restore_store<T: Scalar>(ckpt: &Checkpoint, store: &mut ParamStore<T>) -> Result<()> {
    for i in 0..store.params.len() {
        let name = store.params[i].name.clone();
        let t = ckpt
            .array(&format!("param/{name}"))
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
        if t.shape() != store.params[i].value.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}` has shape {:?}, expected {:?}",
                t.shape(),
                store.params[i].value.shape()
            )));
        }
        store.params[i].value = t.cast::<T>();
    }
    for i in 0..store.buffers.len() {
        let name = store.buffers[i].0.clone();
        let mean = ckpt
            .array(&format!("buf/{name}.mean"))
            .ok_or_else(|| Error::Checkpoint(format!("missing buffer `{name}.mean`")))?;
        let var = ckpt
            .array(&format!("buf/{name}.var"))
            .ok_or_else(|| Error::Checkpoint(format!("missing buffer `{name}.var`")))?;
        let stats = &mut store.buffers[i].1;
        if mean.len() != stats.mean.len() || var.len() != stats.var.len() {
            return Err(Error::Checkpoint(format!("buffer `{name}` length mismatch")));
        }
        stats.mean = mean.as_slice().iter().map(|&v| T::from_f64(f64::from(v))).collect();
        stats.var = var.as_slice().iter().map(|&v| T::from_f64(f64::from(v))).collect();
    }
    Ok(())
}

/// Restore one optimizer's moments captured under `label`.
pub fn restore_adam<T: Scalar>(
    ckpt: &Checkpoint,
    store: &ParamStore<T>,
    label: &str,
    adam: &mut Adam<T>,
) -> Result<()> {
    let ids = adam.ids().to_vec();
    let mut m = Vec::with_capacity(ids.len());
    let mut v = Vec::with_capacity(ids.len());
    for id in &ids {
        let pname = &store.params[id.0].name;
        let ma = ckpt
            .array(&format!("adam/{label}/m/{pname}"))
            .ok_or_else(|| Error::Checkpoint(format!("missing moment for `{pname}`")))?;
        let va = ckpt
            .array(&format!("adam/{label}/v/{pname}"))
            .ok_or_else(|| Error::Checkpoint(format!("missing moment for `{pname}`")))?;
        m.push(ma.cast::<T>());
        v.push(va.cast::<T>());
    }
    let t = ckpt
        .array(&format!("adam/{label}/t"))
        .ok_or_else(|| Error::Checkpoint(format!("missing step counter for `{label}`")))?
        .as_slice()[0] as u64;
    adam.restore_state(m, v, t)
}
