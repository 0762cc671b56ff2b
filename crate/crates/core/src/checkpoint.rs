//! Binary tensor container.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic   "TTPK"
//! version u32 (= 1)
//! repeated until EOF:
//!   name_len u32, name (UTF-8), ndim u32, dims u64 x ndim, data f64 x prod(dims)
//! ```
//!
//! Adam state travels as extra records named `adam.m.<param>`,
//! `adam.v.<param>` and `adam.t.<param>` (a scalar step count).

use std::path::Path;

use crate::error::{Error, Result};
use crate::optim::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TTPK";
pub const VERSION: u32 = 1;

const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";
const ADAM_T: &str = "adam.t.";

pub type Record = (String, Tensor<f64>);

pub fn encode(records: &[Record]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for (name, t) in records {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Vec<Record>> {
    let bad = |msg: &str| Error::format(path, msg);
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4) != Some(&MAGIC[..]) {
        return Err(bad("missing TTPK magic"));
    }
    match r.u32() {
        Some(VERSION) => {}
        Some(v) => return Err(bad(&format!("unsupported version {v}"))),
        None => return Err(bad("truncated header")),
    }
    let mut out = Vec::new();
    while r.pos < bytes.len() {
        let n = r.u32().ok_or_else(|| bad("truncated record name length"))? as usize;
        let name = r.take(n).ok_or_else(|| bad("truncated record name"))?;
        let name = String::from_utf8(name.to_vec()).map_err(|_| bad("record name is not UTF-8"))?;
        let ndim = r.u32().ok_or_else(|| bad("truncated rank"))? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64().ok_or_else(|| bad("truncated shape"))? as usize);
        }
        let count: usize = shape.iter().product();
        let raw = r
            .take(count.checked_mul(8).ok_or_else(|| bad("oversized record"))?)
            .ok_or_else(|| bad(&format!("truncated data for {name}")))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    Ok(out)
}

pub fn write_records(path: &Path, records: &[Record]) -> Result<()> {
    std::fs::write(path, encode(records)).map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

impl<T: Scalar> ParamStore<T> {
    /// Parameter records, optionally followed by Adam state.
    pub fn to_records(&self, with_optimizer: bool) -> Vec<Record> {
        let mut out: Vec<Record> = self.iter().map(|(n, t)| (n.to_string(), t.cast())).collect();
        if with_optimizer {
            for name in self.names() {
                let e = self.entry(name).expect("listed");
                out.push((format!("{ADAM_M}{name}"), e.first_moment().cast()));
                out.push((format!("{ADAM_V}{name}"), e.second_moment().cast()));
                out.push((format!("{ADAM_T}{name}"), Tensor::scalar(e.step() as f64)));
            }
        }
        out
    }

    /// Rebuilds a store. Adam records are applied when present.
    pub fn from_records(records: &[Record]) -> Result<Self> {
        let mut store = ParamStore::new();
        for (name, t) in records {
            if !is_optimizer_record(name) {
                store.insert(name.clone(), t.cast())?;
            }
        }
        let find = |key: String| records.iter().find(|(n, _)| *n == key).map(|(_, t)| t);
        let names: Vec<String> = store.names().map(str::to_string).collect();
        for name in names {
            let m = find(format!("{ADAM_M}{name}"));
            let v = find(format!("{ADAM_V}{name}"));
            let t = find(format!("{ADAM_T}{name}"));
            if let (Some(m), Some(v), Some(t)) = (m, v, t) {
                store.set_optimizer_state(&name, m.cast(), v.cast(), t.item() as u64)?;
            }
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path, with_optimizer: bool) -> Result<()> {
        write_records(path, &self.to_records(with_optimizer))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_records(&read_records(path)?)
    }
}

fn is_optimizer_record(name: &str) -> bool {
    name.starts_with(ADAM_M) || name.starts_with(ADAM_V) || name.starts_with(ADAM_T)
}
