//! Binary checkpoints.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "LMMA"  u32 version
//! u32 x 6  nrb_l nrb_m nrb_h nc width_low width_high
//! u64 step  f64 best_val_miou (NaN = none)  f64 epoch_loss_sum
//! u32 param_count
//!   per param: u32 name_len, name bytes, u32 x 4 dims, f32 data
//! u8 has_adam
//!   f64 lr beta1 beta2 eps, u64 adam_step, f32 m per param, f32 v per param
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{LemmaConfig, LemmaModel, ParamStore};
use crate::optim::AdamState;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LMMA";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: LemmaModel,
    pub adam: Option<AdamState>,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub best_val_miou: Option<f64>,
    /// Sum of batch losses already seen in the current, unfinished epoch.
    pub epoch_loss_sum: f64,
}

impl Checkpoint {
    pub fn from_model(model: LemmaModel) -> Self {
        Checkpoint { model, adam: None, step: 0, best_val_miou: None, epoch_loss_sum: 0.0 }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        let c = &self.model.config;
        for v in [c.nrb_l, c.nrb_m, c.nrb_h, c.nc, c.width_low, c.width_high] {
            put_u32(&mut out, v as u32);
        }
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.best_val_miou.unwrap_or(f64::NAN).to_le_bytes());
        out.extend_from_slice(&self.epoch_loss_sum.to_le_bytes());
        put_u32(&mut out, self.model.params.len() as u32);
        for (name, t) in self.model.params.iter() {
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            for d in t.shape().0 {
                put_u32(&mut out, d as u32);
            }
            put_f32s(&mut out, t.data());
        }
        match &self.adam {
            None => out.push(0),
            Some(a) => {
                out.push(1);
                for v in [a.lr, a.beta1, a.beta2, a.eps] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                out.extend_from_slice(&a.step.to_le_bytes());
                a.m.iter().for_each(|m| put_f32s(&mut out, m));
                a.v.iter().for_each(|v| put_f32s(&mut out, v));
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut dims = [0usize; 6];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let config = LemmaConfig {
            nrb_l: dims[0],
            nrb_m: dims[1],
            nrb_h: dims[2],
            nc: dims[3],
            width_low: dims[4],
            width_high: dims[5],
        };
        config.validate().map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        let step = r.u64()?;
        let best = r.f64()?;
        let epoch_loss_sum = r.f64()?;

        let template = LemmaModel::build(config, 0)?;
        let count = r.u32()? as usize;
        if count != template.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {count} tensors, config needs {}",
                template.params.len()
            )));
        }
        let mut params = ParamStore::new();
        for (want_name, want) in template.params.iter() {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
                .to_string();
            let mut shape = [0usize; 4];
            for d in &mut shape {
                *d = r.u32()? as usize;
            }
            if name != want_name || shape != want.shape().0 {
                return Err(Error::Format(format!(
                    "checkpoint tensor {name:?} {shape:?} does not match expected {want_name:?} {}",
                    want.shape()
                )));
            }
            let data = r.f32s(want.len())?;
            params.insert(name, Tensor::from_vec(shape, data)?)?;
        }
        let adam = match r.take(1)?[0] {
            0 => None,
            1 => {
                let (lr, beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
                let astep = r.u64()?;
                let lens: Vec<usize> = params.iter().map(|(_, t)| t.len()).collect();
                let m = lens.iter().map(|&n| r.f32s(n)).collect::<Result<Vec<_>>>()?;
                let v = lens.iter().map(|&n| r.f32s(n)).collect::<Result<Vec<_>>>()?;
                Some(AdamState { lr, beta1, beta2, eps, step: astep, m, v })
            }
            f => return Err(Error::Format(format!("bad optimizer flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            model: LemmaModel { config, params },
            adam,
            step,
            best_val_miou: (!best.is_nan()).then_some(best),
            epoch_loss_sum,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            e => e,
        })
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, data: &[f32]) {
    out.reserve(data.len() * 4);
    data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
}
