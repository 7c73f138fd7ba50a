//! Versioned binary checkpoints: named parameters, optimizer moments, seed
//! state, the effective config and a stage tag.
//!
//! Layout (little-endian): magic `PMAMCKPT`, version u32, stage string,
//! config string, master seed u64, next iteration u64, parameter count u32,
//! then per parameter its name, rank u32, dims u64 and values f64; finally
//! an optimizer flag u32 and, if set, the AdamW hyperparameters, step count
//! and first/second moments in parameter order.

use std::fmt;
use std::path::Path;

use crate::binio::{read_file, write_file, Decoder, Encoder};
use crate::error::{Error, Result};
use crate::numgrad::{AdamW, AdamWConfig, Array, ParamStore};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PMAMCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// After `n` pretraining iterations; 0 is the untrained model.
    Pretrain(usize),
    Finetuned,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stage::Pretrain(n) => write!(f, "pretrain_iter{n}"),
            Stage::Finetuned => f.write_str("finetuned"),
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "finetuned" {
            return Ok(Stage::Finetuned);
        }
        s.strip_prefix("pretrain_iter")
            .and_then(|n| n.parse().ok())
            .map(Stage::Pretrain)
            .ok_or_else(|| Error::Load(format!("unknown stage tag '{s}'")))
    }
}

/// Randomness is drawn from named substreams of one master seed, so the
/// seed and the next iteration index are enough to resume.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub master_seed: u64,
    pub next_iteration: u64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub stage: Stage,
    /// Effective run config as TOML.
    pub config: String,
    pub rng: RngState,
    pub params: ParamStore,
    pub optimizer: Option<AdamW>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::default();
        e.bytes(CHECKPOINT_MAGIC);
        e.u32(CHECKPOINT_VERSION);
        e.str(&self.stage.to_string());
        e.str(&self.config);
        e.u64(self.rng.master_seed);
        e.u64(self.rng.next_iteration);
        e.u32(self.params.len() as u32);
        for id in self.params.ids() {
            let v = self.params.value(id);
            e.str(self.params.name(id));
            e.u32(v.shape().len() as u32);
            for &d in v.shape() {
                e.u64(d as u64);
            }
            e.f64s(v.data());
        }
        match &self.optimizer {
            None => e.u32(0),
            Some(opt) => {
                e.u32(1);
                let c = &opt.cfg;
                e.f64s(&[c.beta1, c.beta2, c.eps, c.weight_decay]);
                e.u64(opt.step);
                for (m, v) in opt.first.iter().zip(&opt.second) {
                    e.f64s(m.data());
                    e.f64s(v.data());
                }
            }
        }
        e.buf
    }

    pub fn from_bytes(buf: &[u8], path: &Path) -> Result<Self> {
        let mut d = Decoder::new(buf, path);
        d.magic(CHECKPOINT_MAGIC)?;
        let version = d.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Load(format!(
                "{}: checkpoint version {version}, expected {CHECKPOINT_VERSION}",
                path.display()
            )));
        }
        let stage: Stage = d.str()?.parse()?;
        let config = d.str()?;
        let rng = RngState {
            master_seed: d.u64()?,
            next_iteration: d.u64()?,
        };
        let n = d.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..n {
            let name = d.str()?;
            let rank = d.u32()? as usize;
            if rank == 0 || rank > 4 {
                return Err(d.err(format!("parameter {name} has rank {rank}")));
            }
            let shape = (0..rank).map(|_| Ok(d.u64()? as usize)).collect::<Result<Vec<_>>>()?;
            let len = shape.iter().try_fold(1usize, |a, &b| a.checked_mul(b)).ok_or_else(|| d.err("shape overflow"))?;
            let value = Array::new(&shape, d.f64s(len)?)?;
            params.add(name, value).map_err(|e| d.err(e.to_string()))?;
        }
        let optimizer = match d.u32()? {
            0 => None,
            1 => {
                let h = d.f64s(4)?;
                let cfg = AdamWConfig {
                    beta1: h[0],
                    beta2: h[1],
                    eps: h[2],
                    weight_decay: h[3],
                };
                let mut opt = AdamW::new(&params, cfg);
                opt.step = d.u64()?;
                for i in 0..params.len() {
                    let len = opt.first[i].len();
                    opt.first[i].data_mut().copy_from_slice(&d.f64s(len)?);
                    opt.second[i].data_mut().copy_from_slice(&d.f64s(len)?);
                }
                Some(opt)
            }
            other => return Err(d.err(format!("bad optimizer flag {other}"))),
        };
        d.finish()?;
        Ok(Self {
            stage,
            config,
            rng,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?, path)
    }
}

#[cfg(test)]
mod tests {
    use rand::Rng as _;

    use super::*;
    use crate::rng::substream;

    fn sample() -> Checkpoint {
        let mut rng = substream(3, "ckpt", &[]);
        let mut params = ParamStore::new();
        for (name, shape) in [("a.weight", vec![3, 4]), ("a.bias", vec![1, 4]), ("b", vec![5])] {
            let n: usize = shape.iter().product();
            params
                .add(name, Array::new(&shape, (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap())
                .unwrap();
        }
        let mut opt = AdamW::new(&params, AdamWConfig::default());
        for id in params.ids().collect::<Vec<_>>() {
            params.grad_mut(id).data_mut().fill(0.3);
        }
        opt.step(&mut params, |_, _| Some(1e-3)).unwrap();
        Checkpoint {
            stage: Stage::Pretrain(2),
            config: "seed = 3\n".into(),
            rng: RngState {
                master_seed: 3,
                next_iteration: 3,
            },
            params,
            optimizer: Some(opt),
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, Path::new("x")).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.params.value_hash(), c.params.value_hash());
        assert_eq!(back.stage, Stage::Pretrain(2));
        let opt = back.optimizer.unwrap();
        assert_eq!(opt.steps_taken(), 1);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("nested/model.ckpt");
        let mut c = sample();
        c.optimizer = None;
        c.stage = Stage::Finetuned;
        c.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert!(back.optimizer.is_none());
        assert_eq!(back.to_bytes(), c.to_bytes());
    }

    #[test]
    fn rejects_bad_input() {
        let bytes = sample().to_bytes();
        let mut wrong_version = bytes.clone();
        wrong_version[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&wrong_version, Path::new("x")), Err(Error::Load(_))));
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad_magic, Path::new("x")), Err(Error::Format { .. })));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1], Path::new("x")).is_err());
        let mut trailing = bytes;
        trailing.push(0);
        assert!(Checkpoint::from_bytes(&trailing, Path::new("x")).is_err());
    }

    #[test]
    fn stage_tags() {
        for s in [Stage::Pretrain(0), Stage::Pretrain(12), Stage::Finetuned] {
            assert_eq!(s.to_string().parse::<Stage>().unwrap(), s);
        }
        assert!("iter2".parse::<Stage>().is_err());
    }
}
