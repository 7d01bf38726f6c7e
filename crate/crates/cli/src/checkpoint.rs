//! Binary checkpoints.
//!
//! Layout, all integers little-endian: magic `AGEGRADC`, `u32` version,
//! model spec as `u32` count of length-prefixed key/value strings, best val
//! MAE as `f64`, parameters as `u32` count of (name, `u32` rank, `u32` dims,
//! `f32` values), then a `u8` flag and, if set, the optimizer step,
//! hyperparameters and per-parameter moment arrays.

use std::collections::BTreeMap;
use std::path::Path;

use agegrad::model::{ModelSpec, ParamStore};
use agegrad::optim::{AdamWConfig, Moments, OptimState};
use agegrad::{Error, Result, Tensor};

use crate::io::write_atomic;

pub const MAGIC: &[u8; 8] = b"AGEGRADC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub params: ParamStore,
    pub optim: Option<OptimState>,
    pub best_val_mae: f64,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
    fn floats(&mut self, v: &[f32]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(format!("checkpoint truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format("checkpoint string is not utf-8"))
    }
    fn floats(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::format("checkpoint array too large"))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION as usize);
        let kv = self.spec.to_kv();
        w.u32(kv.len());
        for (k, v) in &kv {
            w.str(k);
            w.str(v);
        }
        w.f64(self.best_val_mae);
        w.u32(self.params.len());
        for (name, t) in self.params.iter() {
            w.str(name);
            w.u32(t.ndim());
            for &d in t.shape() {
                w.u32(d);
            }
            w.floats(t.data());
        }
        match &self.optim {
            None => w.u8(0),
            Some(o) => {
                w.u8(1);
                w.u64(o.step);
                let h = o.hyper;
                for v in [h.beta1, h.beta2, h.eps, h.weight_decay] {
                    w.f64(v);
                }
                w.u32(o.moments.len());
                for (name, m) in &o.moments {
                    w.str(name);
                    w.floats(m.m.data());
                    w.floats(m.v.data());
                }
            }
        }
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(MAGIC.len()).ok() != Some(&MAGIC[..]) {
            return Err(Error::format("not a checkpoint (bad magic)"));
        }
        let version = r.u32()? as u32;
        if version != VERSION {
            return Err(Error::format(format!(
                "checkpoint version {version} is not supported (expected {VERSION})"
            )));
        }
        let mut spec = ModelSpec::default();
        for _ in 0..r.u32()? {
            let (k, v) = (r.str()?, r.str()?);
            spec.set(&k, &v)?;
        }
        spec.validate()?;
        let best_val_mae = r.f64()?;
        let mut params = ParamStore::new();
        for _ in 0..r.u32()? {
            let name = r.str()?;
            let rank = r.u32()?;
            let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let n = n.ok_or_else(|| Error::format(format!("parameter {name} is too large")))?;
            let data = r.floats(n)?;
            params.insert(&name, Tensor::new(shape, data)?)?;
        }
        params.check_matches(&spec)?;
        let optim = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let hyper = AdamWConfig { beta1: r.f64()?, beta2: r.f64()?, eps: r.f64()?, weight_decay: r.f64()? };
                let mut moments = BTreeMap::new();
                for _ in 0..r.u32()? {
                    let name = r.str()?;
                    let p = params
                        .get(&name)
                        .ok_or_else(|| Error::format(format!("optimizer state for unknown parameter {name}")))?;
                    let shape = p.shape().to_vec();
                    let m = Tensor::new(shape.clone(), r.floats(p.len())?)?;
                    let v = Tensor::new(shape, r.floats(p.len())?)?;
                    moments.insert(name, Moments { m, v });
                }
                Some(OptimState { step, hyper, moments })
            }
            f => return Err(Error::format(format!("bad optimizer flag {f}"))),
        };
        if r.pos != buf.len() {
            return Err(Error::format(format!("{} trailing bytes after checkpoint", buf.len() - r.pos)));
        }
        Ok(Checkpoint { spec, params, optim, best_val_mae })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }

    /// Loads parameters for `spec`, failing with a shape error that names the
    /// first mismatching parameter.
    pub fn load_params_for(path: &Path, spec: &ModelSpec) -> Result<ParamStore> {
        let ck = Self::load(path)?;
        ck.params.check_matches(spec)?;
        Ok(ck.params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let spec = ModelSpec::reduced();
        let params = ParamStore::init(&spec, 3).unwrap();
        Checkpoint { spec, params, optim: None, best_val_mae: 4.25 }
    }

    #[test]
    fn bytes_round_trip() {
        let ck = sample();
        let b = ck.to_bytes();
        let back = Checkpoint::from_bytes(&b).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), b);
    }

    #[test]
    fn truncation_and_version_rejected() {
        let b = sample().to_bytes();
        for cut in [0, 5, 12, b.len() / 2, b.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&b[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
        let mut v = b.clone();
        v[8] = 9;
        let e = Checkpoint::from_bytes(&v).unwrap_err();
        assert!(e.to_string().contains("version 9"));
    }
}
