//! Run configuration: one TOML document covering data, model and every
//! training stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::finetune::FinetuneConfig;
use crate::mam::{ContextConfig, PretrainConfig};
use crate::proto::{GmmConfig, PrototypeKind};
use crate::synthgen::GeneratorConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrototypeConfig {
    pub kind: PrototypeKind,
    /// Number of prototypes `K`.
    pub components: usize,
    pub gmm: GmmConfig,
    pub kmeans_max_iters: usize,
}

impl Default for PrototypeConfig {
    fn default() -> Self {
        Self {
            kind: PrototypeKind::Gmm,
            components: 8,
            gmm: GmmConfig::default(),
            kmeans_max_iters: 100,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Paper,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Self::Desk),
            "paper" => Ok(Self::Paper),
            other => Err(Error::Config(format!("unknown preset '{other}' (expected desk or paper)"))),
        }
    }
}

/// Every setting of a run. Omitted keys take the desk preset's value;
/// unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed for model initialization, masks, shuffling and fitting.
    pub seed: u64,
    /// Seeds used by the experiment grid.
    pub seeds: Vec<u64>,
    /// Pretraining iterations (E-step plus M-step).
    pub iterations: usize,
    pub out_dir: PathBuf,
    /// Synthetic dataset; its own `seed` fixes the data independently of
    /// the training seed.
    pub data: GeneratorConfig,
    pub encoder: EncoderConfig,
    pub context: ContextConfig,
    pub prototypes: PrototypeConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            seeds: vec![0, 1, 2],
            iterations: 2,
            out_dir: PathBuf::from("runs/pmam"),
            data: GeneratorConfig::default(),
            encoder: EncoderConfig::default(),
            context: ContextConfig::default(),
            prototypes: PrototypeConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => Self::default(),
            Preset::Paper => {
                let mut c = Self::default();
                c.prototypes.components = 30;
                c.context.blocks = 3;
                c.pretrain.epochs = 30;
                c.pretrain.batch_size = 18;
                c.pretrain.lr_backbone = 1e-5;
                c.pretrain.lr_rest = 2e-4;
                c.finetune.epochs = 45;
                c.finetune.freeze_epochs = 15;
                c.finetune.batch_size = 18;
                c.finetune.lr_backbone = 1e-5;
                c.finetune.lr_rest = 2e-4;
                c.finetune.unlabeled_per_epoch = 0;
                c
            }
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::load_over(&Self::default(), path)
    }

    /// Applies the keys of a TOML document on top of `base`; nested tables
    /// merge key by key.
    pub fn merged(base: &RunConfig, text: &str) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(&base.to_toml()?).map_err(|e| Error::Config(e.to_string()))?;
        let over: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        merge_tables(&mut table, over);
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load_over(base: &RunConfig, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::merged(base, &text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("config encoding: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.encoder.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.encoder.freq_bins != self.data.freq_bins {
            return bad(format!(
                "encoder expects {} frequency bins but data has {}",
                self.encoder.freq_bins, self.data.freq_bins
            ));
        }
        if self.encoder.max_frames < self.data.frames {
            return bad(format!(
                "encoder max_frames {} is below clip length {}",
                self.encoder.max_frames, self.data.frames
            ));
        }
        if self.encoder.d_model != self.encoder.embed_dim {
            return bad("initial pseudo labels need d_model == embed_dim".into());
        }
        if self.context.heads == 0 || !self.encoder.embed_dim.is_multiple_of(self.context.heads) {
            return bad(format!(
                "embed_dim {} not divisible by {} context heads",
                self.encoder.embed_dim, self.context.heads
            ));
        }
        let k = self.prototypes.components;
        if k == 0 || k > self.data.frames {
            return bad(format!("K = {k} must lie in [1, {}] (frames per clip)", self.data.frames));
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        let gmm = &self.prototypes.gmm;
        if !(gmm.variance_floor > 0.0) || gmm.subsample_cap < k {
            return bad("gmm needs a positive variance floor and a subsample cap of at least K".into());
        }
        Ok(())
    }
}

fn merge_tables(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back = RunConfig::from_toml_str(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
        let p = RunConfig::preset(Preset::Paper);
        assert_eq!(RunConfig::from_toml_str(&p.to_toml().unwrap()).unwrap(), p);
    }

    #[test]
    fn partial_documents_take_defaults() {
        let c = RunConfig::from_toml_str("seed = 7\n[pretrain]\nepochs = 3\n[finetune.adamw]\nweight_decay = 0.0\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.pretrain.epochs, 3);
        assert_eq!(c.pretrain.batch_size, 8);
        assert_eq!(c.finetune.adamw.weight_decay, 0.0);
        assert_eq!(c.finetune.adamw.beta1, 0.9);
    }

    #[test]
    fn rejections() {
        for doc in [
            "bogus = 1",
            "[finetune]\nmedian_window = 4",
            "[pretrain.mask]\nratio = 1.5",
            "[pretrain.mask]\nratio = 0.0",
            "[prototypes]\ncomponents = 500",
            "[encoder]\nfreq_bins = 8",
            "[data]\nunknown = true",
        ] {
            assert!(matches!(RunConfig::from_toml_str(doc), Err(Error::Config(_))), "{doc}");
        }
    }

    #[test]
    fn merging_over_a_preset() {
        let paper = RunConfig::preset(Preset::Paper);
        let c = RunConfig::merged(&paper, "[pretrain]\nepochs = 2\n").unwrap();
        assert_eq!(c.pretrain.epochs, 2);
        assert_eq!(c.pretrain.batch_size, 18);
        assert_eq!(c.prototypes.components, 30);
        assert!(matches!(RunConfig::merged(&paper, "[pretrain]\nepoch = 2\n"), Err(Error::Config(_))));
    }

    #[test]
    fn presets() {
        assert_eq!("desk".parse::<Preset>().unwrap(), Preset::Desk);
        assert!("huge".parse::<Preset>().is_err());
        let p = RunConfig::preset(Preset::Paper);
        assert_eq!(p.prototypes.components, 30);
        assert_eq!(p.finetune.freeze_epochs, 15);
        p.validate().unwrap();
    }
}
