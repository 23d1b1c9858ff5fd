//! Binary checkpoints.
//!
//! Layout (little-endian): magic `PSSC`, version `u32`, iteration `u64`,
//! tensor count `u32`, then per tensor: name length `u16`, UTF-8 name, rank
//! `u8`, dims `u32` each, `f32` data. Optimizer state follows the model
//! parameters under the reserved prefixes `adam.m/`, `adam.v/` and the
//! scalar `adam.step`.

use std::fs;
use std::path::Path;

use super::optim::AdamW;
use crate::error::{CheckpointError, Error, Result};
use crate::param::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PSSC";
pub const VERSION: u32 = 1;
const M_PREFIX: &str = "adam.m/";
const V_PREFIX: &str = "adam.v/";
const STEP_NAME: &str = "adam.step";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub iteration: u64,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    /// Snapshot of model parameters and (optionally) optimizer state.
    pub fn capture<T: Scalar>(store: &ParamStore<T>, opt: Option<&AdamW<T>>, iteration: u64) -> Self {
        let mut tensors: Vec<(String, Tensor<f32>)> = store.iter().map(|p| (p.name.clone(), p.value.cast())).collect();
        if let Some(opt) = opt {
            for (p, m) in store.iter().zip(&opt.m) {
                tensors.push((format!("{M_PREFIX}{}", p.name), m.cast()));
            }
            for (p, v) in store.iter().zip(&opt.v) {
                tensors.push((format!("{V_PREFIX}{}", p.name), v.cast()));
            }
            tensors.push((STEP_NAME.into(), Tensor::scalar(opt.step as f32)));
        }
        Checkpoint { iteration, tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn has_optimizer_state(&self) -> bool {
        self.get(STEP_NAME).is_some()
    }

    /// Copies parameter values into `store`. Fails without modifying the
    /// store if any parameter is missing or differently shaped.
    pub fn restore_params<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let mut bad = Vec::new();
        for p in store.iter() {
            match self.get(&p.name) {
                Some(t) if t.shape() == p.value.shape() => {}
                Some(t) => bad.push(format!("{} (checkpoint {:?}, model {:?})", p.name, t.shape(), p.value.shape())),
                None => bad.push(format!("{} (missing)", p.name)),
            }
        }
        for (name, _) in &self.tensors {
            let reserved = name.starts_with(M_PREFIX) || name.starts_with(V_PREFIX) || name == STEP_NAME;
            if !reserved && store.id(name).is_none() {
                bad.push(format!("{name} (not in model)"));
            }
        }
        if !bad.is_empty() {
            return Err(CheckpointError::Mismatch(bad).into());
        }
        for p in store.iter_mut() {
            p.value = self.get(&p.name).expect("checked").cast();
        }
        Ok(())
    }

    /// Restores optimizer moments and step count for `store`'s parameters.
    pub fn restore_optimizer<T: Scalar>(&self, store: &ParamStore<T>, opt: &mut AdamW<T>) -> Result<()> {
        let step = self
            .get(STEP_NAME)
            .ok_or_else(|| CheckpointError::Malformed("no optimizer state".into()))?;
        let mut m = Vec::with_capacity(store.len());
        let mut v = Vec::with_capacity(store.len());
        let mut bad = Vec::new();
        for p in store.iter() {
            for (prefix, out) in [(M_PREFIX, &mut m), (V_PREFIX, &mut v)] {
                let name = format!("{prefix}{}", p.name);
                match self.get(&name) {
                    Some(t) if t.shape() == p.value.shape() => out.push(t.cast()),
                    _ => bad.push(name),
                }
            }
        }
        if !bad.is_empty() {
            return Err(CheckpointError::Mismatch(bad).into());
        }
        opt.m = m;
        opt.v = v;
        opt.step = step.item()? as u64;
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let nb = name.as_bytes();
            let len = u16::try_from(nb.len()).map_err(|_| CheckpointError::Malformed(format!("name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(nb);
            let rank = u8::try_from(t.rank()).map_err(|_| CheckpointError::Malformed(format!("rank of {name}")))?;
            out.push(rank);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic { found: magic }.into());
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CheckpointError::BadVersion(version).into());
        }
        let iteration = r.u64("iteration")?;
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u16("name length")? as usize;
            let name = String::from_utf8(r.take(len, "name")?.to_vec())
                .map_err(|_| CheckpointError::Malformed("non-UTF-8 tensor name".into()))?;
            let rank = r.take(1, "rank")?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32("dims")? as usize);
            }
            let n: usize = dims.iter().product();
            let raw = r.take(4 * n, "tensor data")?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new(&dims, data).map_err(|_| CheckpointError::Malformed(format!("bad shape for {name}")))?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed("trailing bytes".into()).into());
        }
        Ok(Checkpoint { iteration, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated(what))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}
