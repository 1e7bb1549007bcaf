//! Named-tensor checkpoint container.
//!
//! Binary layout, little-endian throughout:
//!   magic "SAE1", u32 version, u32 tensor count,
//!   per tensor  { u16 name length, name bytes, u8 ndim, u32 dims..., f32 data },
//!   u32 scalar count,
//!   per scalar  { u16 name length, name bytes, f64 value }.
//!
//! Tensor data is stored as f32; parameters are kept on the f32 grid during
//! training, so save -> load -> save is byte-identical.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::semodel::{SEConfig, SEParams};
use crate::sslenc::{EncoderConfig, EncoderParams};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SAE1";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    tensors: Vec<(String, Tensor)>,
    scalars: Vec<(String, f64)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint::default()
    }

    pub fn push_tensor(&mut self, name: &str, t: Tensor) -> Result<()> {
        if self.tensors.iter().any(|(n, _)| n == name) {
            return Err(Error::Checkpoint {
                path: "<memory>".into(),
                detail: format!("duplicate tensor name {name:?}"),
            });
        }
        self.tensors.push((name.to_string(), t));
        Ok(())
    }

    pub fn push_scalar(&mut self, name: &str, v: f64) {
        self.scalars.push((name.to_string(), v));
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn scalar(&self, name: &str) -> Option<f64> {
        self.scalars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
    }

    pub fn tensor_count(&self) -> usize {
        self.tensors.len()
    }

    pub fn tensors(&self) -> &[(String, Tensor)] {
        &self.tensors
    }

    fn require_tensor(&self, path: &Path, name: &str) -> Result<&Tensor> {
        self.tensor(name).ok_or_else(|| Error::Checkpoint {
            path: path.to_path_buf(),
            detail: format!("missing tensor {name:?}"),
        })
    }

    fn require_scalar(&self, path: &Path, name: &str) -> Result<f64> {
        self.scalar(name).ok_or_else(|| Error::Checkpoint {
            path: path.to_path_buf(),
            detail: format!("missing scalar {name:?}"),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(t.shape().len() as u8);
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        buf.extend_from_slice(&(self.scalars.len() as u32).to_le_bytes());
        for (name, v) in &self.scalars {
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf
    }

    /// Atomic save: write to a temp file, then rename into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes, path)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
        let mut r = Reader {
            bytes,
            pos: 0,
            path,
        };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::CheckpointVersion {
                path: path.to_path_buf(),
                found: format!("{magic:?}"),
            });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::CheckpointVersion {
                path: path.to_path_buf(),
                found: format!("version {version}"),
            });
        }
        let n_tensors = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n_tensors);
        let mut seen = HashSet::new();
        for _ in 0..n_tensors {
            let name = r.name()?;
            if !seen.insert(name.clone()) {
                return Err(Error::Checkpoint {
                    path: path.to_path_buf(),
                    detail: format!("duplicate tensor name {name:?}"),
                });
            }
            let ndim = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(r.f32()? as f64);
            }
            tensors.push((name, Tensor::from_vec(&shape, data)));
        }
        let n_scalars = r.u32()? as usize;
        let mut scalars = Vec::with_capacity(n_scalars);
        for _ in 0..n_scalars {
            let name = r.name()?;
            scalars.push((name, r.f64()?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                detail: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        Ok(Checkpoint { tensors, scalars })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint {
                path: self.path.to_path_buf(),
                detail: "truncated file".into(),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn name(&mut self) -> Result<String> {
        let len = u16::from_le_bytes(self.take(2)?.try_into().unwrap()) as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Checkpoint {
            path: self.path.to_path_buf(),
            detail: "tensor name is not UTF-8".into(),
        })
    }
}

/// Extra state recorded alongside model tensors.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TrainState {
    pub epoch: usize,
    pub lr: f64,
    pub best_dev_loss: f64,
}

impl SEParams {
    pub fn to_checkpoint(&self, state: Option<TrainState>) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        for (name, t) in self.named_tensors() {
            ckpt.push_tensor(&name, t.clone())
                .expect("canonical names are unique");
        }
        let c = self.config();
        ckpt.push_scalar("cfg.n_basis", c.n_basis as f64);
        ckpt.push_scalar("cfg.window", c.window as f64);
        ckpt.push_scalar("cfg.bottleneck", c.bottleneck as f64);
        ckpt.push_scalar("cfg.repeats", c.repeats as f64);
        ckpt.push_scalar("cfg.blocks_per_repeat", c.blocks_per_repeat as f64);
        ckpt.push_scalar("cfg.hidden", c.hidden as f64);
        ckpt.push_scalar("cfg.kernel", c.kernel as f64);
        if let Some(s) = state {
            ckpt.push_scalar("epoch", s.epoch as f64);
            ckpt.push_scalar("lr", s.lr);
            ckpt.push_scalar("best_dev_loss", s.best_dev_loss);
        }
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<SEParams> {
        let cfg = SEConfig {
            n_basis: ckpt.require_scalar(path, "cfg.n_basis")? as usize,
            window: ckpt.require_scalar(path, "cfg.window")? as usize,
            bottleneck: ckpt.require_scalar(path, "cfg.bottleneck")? as usize,
            repeats: ckpt.require_scalar(path, "cfg.repeats")? as usize,
            blocks_per_repeat: ckpt.require_scalar(path, "cfg.blocks_per_repeat")? as usize,
            hidden: ckpt.require_scalar(path, "cfg.hidden")? as usize,
            kernel: ckpt.require_scalar(path, "cfg.kernel")? as usize,
        };
        let mut params = crate::semodel::init_se_model(&cfg, 0)?;
        for (name, t) in params.named_tensors_mut() {
            let stored = ckpt.require_tensor(path, &name)?;
            if stored.shape() != t.shape() {
                return Err(Error::Checkpoint {
                    path: path.to_path_buf(),
                    detail: format!(
                        "tensor {name:?} has shape {:?}, expected {:?}",
                        stored.shape(),
                        t.shape()
                    ),
                });
            }
            *t = stored.clone();
        }
        Ok(params)
    }

    pub fn train_state(ckpt: &Checkpoint) -> Option<TrainState> {
        Some(TrainState {
            epoch: ckpt.scalar("epoch")? as usize,
            lr: ckpt.scalar("lr")?,
            best_dev_loss: ckpt.scalar("best_dev_loss")?,
        })
    }
}

impl EncoderParams {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        for (name, t) in self.named_tensors() {
            ckpt.push_tensor(&name, t.clone())
                .expect("canonical names are unique");
        }
        let c = self.config();
        ckpt.push_scalar("cfg.n_layers", c.n_layers as f64);
        ckpt.push_scalar("cfg.dim", c.dim as f64);
        ckpt.push_scalar("cfg.hop", c.hop as f64);
        ckpt.push_scalar("cfg.frontend_kernel", c.frontend_kernel as f64);
        // Seeds are 64-bit; store both halves exactly.
        ckpt.push_scalar("cfg.seed_lo", (c.seed & 0xFFFF_FFFF) as f64);
        ckpt.push_scalar("cfg.seed_hi", (c.seed >> 32) as f64);
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<EncoderParams> {
        let seed_lo = ckpt.require_scalar(path, "cfg.seed_lo")? as u64;
        let seed_hi = ckpt.require_scalar(path, "cfg.seed_hi")? as u64;
        let cfg = EncoderConfig {
            n_layers: ckpt.require_scalar(path, "cfg.n_layers")? as usize,
            dim: ckpt.require_scalar(path, "cfg.dim")? as usize,
            hop: ckpt.require_scalar(path, "cfg.hop")? as usize,
            frontend_kernel: ckpt.require_scalar(path, "cfg.frontend_kernel")? as usize,
            seed: (seed_hi << 32) | seed_lo,
        };
        let mut params = crate::sslenc::init_frozen_encoder(&cfg)?;
        for (name, t) in params.named_tensors_mut() {
            let stored = ckpt.require_tensor(path, &name)?;
            if stored.shape() != t.shape() {
                return Err(Error::Checkpoint {
                    path: path.to_path_buf(),
                    detail: format!(
                        "tensor {name:?} has shape {:?}, expected {:?}",
                        stored.shape(),
                        t.shape()
                    ),
                });
            }
            *t = stored.clone();
        }
        Ok(params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::semodel::init_se_model;
    use crate::sslenc::init_frozen_encoder;

    fn small_se() -> SEParams {
        init_se_model(
            &SEConfig {
                n_basis: 8,
                window: 8,
                bottleneck: 4,
                repeats: 1,
                blocks_per_repeat: 2,
                hidden: 6,
                kernel: 3,
            },
            99,
        )
        .unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let se = small_se();
        let ckpt = se.to_checkpoint(Some(TrainState {
            epoch: 3,
            lr: 5e-4,
            best_dev_loss: -12.5,
        }));
        ckpt.save(&p1).unwrap();
        let loaded = Checkpoint::load(&p1).unwrap();
        loaded.save(&p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        assert_eq!(loaded.tensor_count(), ckpt.tensor_count());

        // The model reconstructs exactly (parameters live on the f32 grid).
        let back = SEParams::from_checkpoint(&loaded, &p1).unwrap();
        for ((_, a), (_, b)) in se.named_tensors().iter().zip(back.named_tensors().iter()) {
            assert_eq!(a, b);
        }
        let state = SEParams::train_state(&loaded).unwrap();
        assert_eq!(state.epoch, 3);
        assert_eq!(state.best_dev_loss, -12.5);
    }

    #[test]
    fn corrupted_magic_is_a_version_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ckpt");
        let se = small_se();
        se.to_checkpoint(None).save(&p).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes[0] = b'X';
        fs::write(&p, bytes).unwrap();
        assert!(matches!(
            Checkpoint::load(&p),
            Err(Error::CheckpointVersion { .. })
        ));
    }

    #[test]
    fn truncation_and_duplicates_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.ckpt");
        let se = small_se();
        se.to_checkpoint(None).save(&p).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            Checkpoint::load(&p),
            Err(Error::Checkpoint { .. })
        ));

        let mut dup = Checkpoint::new();
        dup.push_tensor("x", Tensor::scalar(1.0)).unwrap();
        assert!(dup.push_tensor("x", Tensor::scalar(2.0)).is_err());
    }

    #[test]
    fn encoder_checkpoint_roundtrips_with_identical_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("enc.ckpt");
        let enc = init_frozen_encoder(&crate::sslenc::EncoderConfig {
            seed: 0xDEAD_BEEF_CAFE_F00D,
            ..Default::default()
        })
        .unwrap();
        enc.to_checkpoint().save(&p).unwrap();
        let back = EncoderParams::from_checkpoint(&Checkpoint::load(&p).unwrap(), &p).unwrap();
        assert_eq!(enc.checksum(), back.checksum());
        assert_eq!(back.config().seed, 0xDEAD_BEEF_CAFE_F00D);
    }
}
