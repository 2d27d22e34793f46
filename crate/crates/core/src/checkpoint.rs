//! Self-describing binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "MAEVITCK" | version u32 | config text (u64 len + UTF-8)
//! epoch u64 | rng state u64 | tensor count u64 | tensor records
//! optimizer flag u8 | [step u64 | m records | v records]
//!
//! record: name (u32 len + UTF-8) | kind u8 | rank u32 | extents u64… | values f64…
//! ```
//!
//! Serialization is a pure function of the contents, so loading and saving
//! again reproduces the file byte for byte.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::optim::OptimState;
use crate::params::{ParamKind, ParamStore};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MAEVITCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub epoch: u64,
    /// Seed from which the next epoch's random streams are derived.
    pub rng_state: u64,
    pub tensors: Vec<TensorRecord>,
    pub optimizer: Option<OptimState>,
}

fn kind_code(k: ParamKind) -> u8 {
    match k {
        ParamKind::Weight => 0,
        ParamKind::Bias => 1,
        ParamKind::NormScale => 2,
        ParamKind::NormShift => 3,
        ParamKind::PosEmbed => 4,
        ParamKind::MaskToken => 5,
    }
}

fn kind_from(code: u8) -> Option<ParamKind> {
    Some(match code {
        0 => ParamKind::Weight,
        1 => ParamKind::Bias,
        2 => ParamKind::NormScale,
        3 => ParamKind::NormShift,
        4 => ParamKind::PosEmbed,
        5 => ParamKind::MaskToken,
        _ => return None,
    })
}

impl Checkpoint {
    /// Snapshot of a parameter store; gradients are not saved.
    pub fn from_store(store: &ParamStore, config: String, epoch: u64, rng_state: u64, optimizer: Option<&OptimState>) -> Self {
        let tensors = store
            .ids()
            .map(|id| TensorRecord {
                name: store.name(id).to_string(),
                kind: store.kind(id),
                tensor: Tensor::new(store.tensor(id).shape(), store.tensor(id).data().to_vec()).expect("same shape"),
            })
            .collect();
        Checkpoint {
            config,
            epoch,
            rng_state,
            tensors,
            optimizer: optimizer.cloned(),
        }
    }

    pub fn find(&self, name: &str) -> Option<&TensorRecord> {
        self.tensors.iter().find(|r| r.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.rng_state.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for r in &self.tensors {
            write_record(&mut out, &r.name, r.kind, r.tensor.shape(), r.tensor.data());
        }
        match &self.optimizer {
            None => out.push(0),
            Some(state) => {
                out.push(1);
                out.extend_from_slice(&state.step.to_le_bytes());
                for moments in [&state.m, &state.v] {
                    for (r, values) in self.tensors.iter().zip(moments) {
                        write_record(&mut out, &r.name, r.kind, r.tensor.shape(), values);
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err("not a checkpoint (bad magic bytes)".into());
        }
        let version = u32::from_le_bytes(r.array()?);
        if version != VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let len = r.u64()? as usize;
        let config = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| e.to_string())?;
        let epoch = r.u64()?;
        let rng_state = r.u64()?;
        let count = r.u64()? as usize;
        let tensors = (0..count).map(|_| r.record()).collect::<std::result::Result<Vec<_>, _>>()?;
        let optimizer = match r.take(1)?[0] {
            0 => None,
            1 => {
                let step = r.u64()?;
                let mut moments = [Vec::with_capacity(count), Vec::with_capacity(count)];
                for m in &mut moments {
                    for expected in &tensors {
                        let rec = r.record()?;
                        if rec.name != expected.name || rec.tensor.shape() != expected.tensor.shape() {
                            return Err(format!("optimizer record `{}` does not match `{}`", rec.name, expected.name));
                        }
                        m.push(rec.tensor.into_vec());
                    }
                }
                let [m, v] = moments;
                Some(OptimState { step, m, v })
            }
            f => return Err(format!("bad optimizer flag {f}")),
        };
        if r.pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - r.pos));
        }
        Ok(Checkpoint {
            config,
            epoch,
            rng_state,
            tensors,
            optimizer,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes).map_err(|reason| Error::Decode {
            path: path.to_path_buf(),
            reason,
        })
    }

    /// Copies every tensor whose name is in `store`, requiring matching
    /// shapes. Names accepted by `skip` are ignored. Fails listing every
    /// mismatch, or any store parameter the checkpoint lacks when `strict`.
    pub fn restore_into(&self, store: &mut ParamStore, strict: bool, skip: impl Fn(&str) -> bool) -> Result<Vec<String>> {
        let mut problems = Vec::new();
        for r in &self.tensors {
            if skip(&r.name) {
                continue;
            }
            if let Some(id) = store.find(&r.name) {
                if store.tensor(id).shape() != r.tensor.shape() {
                    problems.push(format!(
                        "{}: expected {:?}, found {:?}",
                        r.name,
                        store.tensor(id).shape(),
                        r.tensor.shape()
                    ));
                }
            }
        }
        if strict {
            for (_, name, _) in store.iter() {
                if self.find(name).is_none() {
                    problems.push(format!("{name}: missing from checkpoint"));
                }
            }
        }
        if !problems.is_empty() {
            return Err(Error::Load(problems.join("; ")));
        }
        let kept = self.tensors.iter().filter(|r| !skip(&r.name)).map(|r| (r.name.as_str(), &r.tensor));
        store.load_matching(kept)
    }
}

fn write_record(out: &mut Vec<u8>, name: &str, kind: ParamKind, shape: &[usize], values: &[f64]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(kind_code(kind));
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &e in shape {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or("truncated checkpoint")?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> std::result::Result<[u8; N], String> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn record(&mut self) -> std::result::Result<TensorRecord, String> {
        let len = u32::from_le_bytes(self.array()?) as usize;
        let name = String::from_utf8(self.take(len)?.to_vec()).map_err(|e| e.to_string())?;
        let kind = kind_from(self.take(1)?[0]).ok_or_else(|| format!("bad parameter kind in `{name}`"))?;
        let rank = u32::from_le_bytes(self.array()?) as usize;
        let shape = (0..rank).map(|_| self.u64().map(|v| v as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &b| a.checked_mul(b)).ok_or("tensor too large")?;
        let raw = self.take(numel.checked_mul(8).ok_or("tensor too large")?)?;
        let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let tensor = Tensor::new(&shape, values).map_err(|e| e.to_string())?;
        Ok(TensorRecord { name, kind, tensor })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::{NormLayout, VitConfig, VitModel};

    fn model() -> VitModel {
        let cfg = VitConfig {
            patch_size: 4,
            embed_dim: 8,
            heads: 2,
            blocks: 2,
            mlp_ratio: 2,
            num_classes: 3,
            image_size: 8,
            norm_layout: NormLayout::Pre,
            ln_eps: 1e-6,
        };
        VitModel::new(&cfg, 1).unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let m = model();
        let mut opt = OptimState::new(&m.params);
        opt.step = 7;
        opt.m[0][0] = 0.25;
        let ck = Checkpoint::from_store(&m.params, "seed = 3\n".into(), 4, 99, Some(&opt));
        let a = dir.path().join("a.ckpt");
        ck.save(&a).unwrap();
        let back = Checkpoint::load(&a).unwrap();
        assert_eq!(back, ck);
        let b = dir.path().join("b.ckpt");
        back.save(&b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }

    #[test]
    fn restore_checks_shapes_and_names() {
        let m = model();
        let ck = Checkpoint::from_store(&m.params, String::new(), 0, 0, None);
        let mut other = model();
        other.params.zero_grad();
        let loaded = ck.restore_into(&mut other.params, true, |_| false).unwrap();
        assert_eq!(loaded.len(), m.params.len());

        let mut bad = ck.clone();
        bad.tensors[0].tensor = Tensor::zeros(&[1, 2]);
        let err = bad.restore_into(&mut other.params, false, |_| false).unwrap_err();
        assert!(matches!(err, Error::Load(_)));
        assert!(err.to_string().contains(&ck.tensors[0].name));

        let mut partial = ck.clone();
        partial.tensors.pop();
        assert!(partial.restore_into(&mut other.params, true, |_| false).is_err());
        assert!(partial.restore_into(&mut other.params, false, |_| false).is_ok());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let m = model();
        let bytes = Checkpoint::from_store(&m.params, String::new(), 0, 0, None).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(Checkpoint::from_bytes(&wrong).unwrap_err().contains("magic"));
    }
}
