//! Checkpoint container: a config snapshot, the step counter, and every
//! named tensor (parameters plus optimizer moments) as embedded single-
//! tensor records with an index of names. Saving, loading and saving again
//! produces byte-identical files.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::optim::AdamW;
use crate::tensor::{Real, Tensor};

const MAGIC: &[u8; 4] = b"PAVC";

pub struct Checkpoint<T: Real> {
    pub config: Config,
    pub step: u64,
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Real> Checkpoint<T> {
    /// Snapshot parameters and, optionally, optimizer moments.
    pub fn capture(config: &Config, step: u64, store: &ParamStore<T>, optim: Option<&AdamW<T>>) -> Self {
        let mut tensors = Vec::new();
        for id in store.ids() {
            tensors.push((store.name(id).to_string(), store.get(id).clone()));
        }
        if let Some(opt) = optim {
            let (m, v) = opt.moments();
            for id in store.ids() {
                let shape = store.get(id).shape().to_vec();
                tensors.push((
                    format!("optim.m.{}", store.name(id)),
                    Tensor::new(shape.clone(), m[id].clone()).expect("moment shape"),
                ));
                tensors.push((
                    format!("optim.v.{}", store.name(id)),
                    Tensor::new(shape, v[id].clone()).expect("moment shape"),
                ));
            }
        }
        Checkpoint {
            config: config.clone(),
            step,
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(1u8);
        out.push(T::DTYPE as u8);
        out.extend_from_slice(&self.step.to_le_bytes());
        let cfg = self.config.to_canonical_string();
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, tensor) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            tensor.write_bytes(&mut out);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let need = |off: usize, n: usize| -> Result<()> {
            if bytes.len() < off + n {
                Err(Error::Parse {
                    what: "checkpoint",
                    offset: bytes.len(),
                    detail: format!("truncated: need {n} bytes at {off}"),
                })
            } else {
                Ok(())
            }
        };
        need(0, 6)?;
        if &bytes[0..4] != MAGIC {
            return Err(Error::Parse {
                what: "checkpoint",
                offset: 0,
                detail: "bad magic".into(),
            });
        }
        if bytes[4] != 1 {
            return Err(Error::Parse {
                what: "checkpoint",
                offset: 4,
                detail: format!("unsupported version {}", bytes[4]),
            });
        }
        if bytes[5] != T::DTYPE as u8 {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint dtype tag {} does not match requested precision",
                bytes[5]
            )));
        }
        let mut off = 6;
        need(off, 8)?;
        let step = u64::from_le_bytes(bytes[off..off + 8].try_into().expect("8 bytes"));
        off += 8;
        need(off, 4)?;
        let cfg_len = u32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes")) as usize;
        off += 4;
        need(off, cfg_len)?;
        let cfg_text = std::str::from_utf8(&bytes[off..off + cfg_len]).map_err(|e| Error::Parse {
            what: "checkpoint",
            offset: off,
            detail: format!("config not utf8: {e}"),
        })?;
        let config = Config::default().parse_str(cfg_text)?;
        off += cfg_len;
        need(off, 4)?;
        let n = u32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes")) as usize;
        off += 4;
        let mut tensors = Vec::with_capacity(n);
        for _ in 0..n {
            need(off, 2)?;
            let name_len = u16::from_le_bytes([bytes[off], bytes[off + 1]]) as usize;
            off += 2;
            need(off, name_len)?;
            let name = std::str::from_utf8(&bytes[off..off + name_len])
                .map_err(|e| Error::Parse {
                    what: "checkpoint",
                    offset: off,
                    detail: format!("name not utf8: {e}"),
                })?
                .to_string();
            off += name_len;
            let (tensor, used) = Tensor::<T>::read_bytes(&bytes[off..])?;
            off += used;
            tensors.push((name, tensor));
        }
        if off != bytes.len() {
            return Err(Error::Parse {
                what: "checkpoint",
                offset: off,
                detail: format!("{} trailing bytes", bytes.len() - off),
            });
        }
        Ok(Checkpoint {
            config,
            step,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    pub fn tensor_map(&self) -> HashMap<&str, &Tensor<T>> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect()
    }

    /// Write parameter values into an existing store, matched by name;
    /// every store parameter must be present in the checkpoint.
    pub fn load_into(&self, store: &mut ParamStore<T>) -> Result<()> {
        let map = self.tensor_map();
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.name(id).to_string();
            let t = map
                .get(name.as_str())
                .ok_or_else(|| Error::ConfigMismatch(format!("checkpoint missing parameter {name}")))?;
            if t.shape() != store.get(id).shape() {
                return Err(Error::ConfigMismatch(format!(
                    "parameter {name}: checkpoint shape {:?} vs model {:?}",
                    t.shape(),
                    store.get(id).shape()
                )));
            }
            let rq = store.get(id).requires_grad;
            *store.get_mut(id) = (*t).clone();
            store.get_mut(id).requires_grad = rq;
        }
        Ok(())
    }

    /// Restore optimizer moments captured alongside the parameters.
    pub fn load_optimizer(&self, store: &ParamStore<T>, optim: &mut AdamW<T>) -> Result<()> {
        let map = self.tensor_map();
        let mut m = Vec::with_capacity(store.len());
        let mut v = Vec::with_capacity(store.len());
        for id in store.ids() {
            let name = store.name(id);
            let mt = map
                .get(format!("optim.m.{name}").as_str())
                .ok_or_else(|| Error::ConfigMismatch(format!("checkpoint missing moment for {name}")))?;
            let vt = map
                .get(format!("optim.v.{name}").as_str())
                .ok_or_else(|| Error::ConfigMismatch(format!("checkpoint missing moment for {name}")))?;
            m.push(mt.data().to_vec());
            v.push(vt.data().to_vec());
        }
        optim.restore(self.step, m, v);
        Ok(())
    }
}
